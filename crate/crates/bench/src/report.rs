//! Timing tables and speedups from a set of samples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::db::Measurement;
use crate::ladder::{BenchSample, Mode, MODES};
use crate::schema::ALL_ENTITIES;

pub const SAMPLES_FILE: &str = "samples.csv";
pub const EXECUTION_FILE: &str = "execution.csv";
pub const PLANNING_FILE: &str = "planning.csv";
pub const SPEEDUPS_FILE: &str = "speedups.csv";
pub const SPEEDUPS_BY_N_FILE: &str = "speedups_by_n.csv";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no samples")]
    Empty,
    #[error("incomplete grid, missing cells: {}", .0.join(", "))]
    Incomplete(Vec<String>),
    #[error("duplicate cell {0}")]
    Duplicate(String),
    #[error("negative timing in cell {0}")]
    Negative(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
}

/// PassThrough time over Coalesced time. Two zero timings count as no
/// change; a zero denominator alone is an unbounded gain.
pub fn speedup_ratio(passthrough: f64, coalesced: f64) -> f64 {
    if coalesced == 0.0 {
        if passthrough == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        passthrough / coalesced
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTimes {
    pub execution_ms: f64,
    pub planning_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntitySpeedup {
    pub entity: String,
    /// One entry per ladder value, ascending.
    pub execution_by_n: Vec<f64>,
    pub planning_by_n: Vec<f64>,
    pub execution_mean: f64,
    pub planning_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub ladder: Vec<u64>,
    pub entities: Vec<String>,
    pub cells: BTreeMap<(String, Mode, u64), CellTimes>,
    pub speedups: Vec<EntitySpeedup>,
}

fn cell_name(entity: &str, mode: Mode, n: u64) -> String {
    format!("{entity}/{mode}/{n}")
}

fn entity_rank(name: &str) -> (usize, String) {
    let pos = ALL_ENTITIES.iter().position(|e| e.name == name).unwrap_or(ALL_ENTITIES.len());
    (pos, name.to_string())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Requires every entity seen to have both modes at every ladder value seen.
pub fn build_report(samples: &[BenchSample]) -> Result<BenchReport, ReportError> {
    if samples.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut cells = BTreeMap::new();
    for s in samples {
        let name = cell_name(&s.entity, s.mode, s.n_requests);
        if !(s.execution_ms >= 0.0 && s.planning_ms >= 0.0) {
            return Err(ReportError::Negative(name));
        }
        let times = CellTimes {
            execution_ms: s.execution_ms,
            planning_ms: s.planning_ms,
        };
        if cells.insert((s.entity.clone(), s.mode, s.n_requests), times).is_some() {
            return Err(ReportError::Duplicate(name));
        }
    }
    let ladder: Vec<u64> = samples.iter().map(|s| s.n_requests).collect::<BTreeSet<_>>().into_iter().collect();
    let mut entities: Vec<String> = samples.iter().map(|s| s.entity.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    entities.sort_by_key(|e| entity_rank(e));

    let mut missing = Vec::new();
    for e in &entities {
        for mode in MODES {
            for &n in &ladder {
                if !cells.contains_key(&(e.clone(), mode, n)) {
                    missing.push(cell_name(e, mode, n));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(ReportError::Incomplete(missing));
    }

    let speedups = entities
        .iter()
        .map(|e| {
            let pair = |n: u64| {
                (
                    cells[&(e.clone(), Mode::PassThrough, n)],
                    cells[&(e.clone(), Mode::Coalesced, n)],
                )
            };
            let execution_by_n: Vec<f64> = ladder
                .iter()
                .map(|&n| {
                    let (p, c) = pair(n);
                    speedup_ratio(p.execution_ms, c.execution_ms)
                })
                .collect();
            let planning_by_n: Vec<f64> = ladder
                .iter()
                .map(|&n| {
                    let (p, c) = pair(n);
                    speedup_ratio(p.planning_ms, c.planning_ms)
                })
                .collect();
            EntitySpeedup {
                entity: e.clone(),
                execution_mean: mean(&execution_by_n),
                planning_mean: mean(&planning_by_n),
                execution_by_n,
                planning_by_n,
            }
        })
        .collect();

    Ok(BenchReport {
        ladder,
        entities,
        cells,
        speedups,
    })
}

fn csv_string(rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is utf-8")
}

impl BenchReport {
    pub fn speedup(&self, entity: &str) -> Option<&EntitySpeedup> {
        self.speedups.iter().find(|s| s.entity == entity)
    }

    fn times_csv(&self, pick: fn(&CellTimes) -> f64) -> String {
        let header = ["entity", "mode"]
            .into_iter()
            .map(String::from)
            .chain(self.ladder.iter().map(u64::to_string))
            .collect();
        let mut rows = vec![header];
        for e in &self.entities {
            for mode in MODES {
                let mut row = vec![e.clone(), mode.to_string()];
                row.extend(self.ladder.iter().map(|&n| pick(&self.cells[&(e.clone(), mode, n)]).to_string()));
                rows.push(row);
            }
        }
        csv_string(rows)
    }

    /// Rows entity × mode, columns the ladder ascending.
    pub fn execution_csv(&self) -> String {
        self.times_csv(|c| c.execution_ms)
    }

    pub fn planning_csv(&self) -> String {
        self.times_csv(|c| c.planning_ms)
    }

    /// Per-entity mean speedups.
    pub fn speedups_csv(&self) -> String {
        let mut rows = vec![vec![
            "entity".to_string(),
            "execution_speedup".to_string(),
            "planning_speedup".to_string(),
        ]];
        for s in &self.speedups {
            rows.push(vec![s.entity.clone(), s.execution_mean.to_string(), s.planning_mean.to_string()]);
        }
        csv_string(rows)
    }

    pub fn speedups_by_n_csv(&self) -> String {
        let header = ["entity", "metric"]
            .into_iter()
            .map(String::from)
            .chain(self.ladder.iter().map(u64::to_string))
            .collect();
        let mut rows = vec![header];
        for s in &self.speedups {
            for (metric, values) in [("execution", &s.execution_by_n), ("planning", &s.planning_by_n)] {
                let mut row = vec![s.entity.clone(), metric.to_string()];
                row.extend(values.iter().map(f64::to_string));
                rows.push(row);
            }
        }
        csv_string(rows)
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let mut written = Vec::new();
        for (name, contents) in [
            (EXECUTION_FILE, self.execution_csv()),
            (PLANNING_FILE, self.planning_csv()),
            (SPEEDUPS_FILE, self.speedups_csv()),
            (SPEEDUPS_BY_N_FILE, self.speedups_by_n_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, contents).map_err(|e| io_error(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }

    /// Human-readable summary for the terminal.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8} {:<12}", "entity", "mode");
        for n in &self.ladder {
            let _ = write!(out, " {n:>12}");
        }
        out.push('\n');
        for e in &self.entities {
            for mode in MODES {
                let _ = write!(out, "{e:<8} {:<12}", mode.as_str());
                for &n in &self.ladder {
                    let _ = write!(out, " {:>12.3}", self.cells[&(e.clone(), mode, n)].execution_ms);
                }
                out.push('\n');
            }
        }
        out.push('\n');
        for s in &self.speedups {
            let _ = writeln!(
                out,
                "{:<8} execution x{:.2}  planning x{:.2}",
                s.entity, s.execution_mean, s.planning_mean
            );
        }
        out
    }
}

fn io_error(path: &Path, e: std::io::Error) -> ReportError {
    ReportError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

const SAMPLE_HEADER: [&str; 7] = [
    "entity",
    "n_requests",
    "mode",
    "execution_ms",
    "planning_ms",
    "measured",
    "statements",
];

pub fn samples_csv(samples: &[BenchSample]) -> String {
    let mut rows = vec![SAMPLE_HEADER.iter().map(|s| s.to_string()).collect()];
    for s in samples {
        rows.push(vec![
            s.entity.clone(),
            s.n_requests.to_string(),
            s.mode.to_string(),
            s.execution_ms.to_string(),
            s.planning_ms.to_string(),
            s.measured.to_string(),
            s.statements.to_string(),
        ]);
    }
    csv_string(rows)
}

pub fn write_samples(path: &Path, samples: &[BenchSample]) -> Result<(), ReportError> {
    fs::write(path, samples_csv(samples)).map_err(|e| io_error(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<BenchSample>, ReportError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ReportError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let parse_err = |line: u64, message: String| ReportError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != SAMPLE_HEADER.len() {
            return Err(parse_err(line, format!("expected {} fields", SAMPLE_HEADER.len())));
        }
        let num = |i: usize| -> Result<f64, ReportError> {
            record[i]
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("{}: {e}", SAMPLE_HEADER[i])))
        };
        samples.push(BenchSample {
            entity: record[0].to_string(),
            n_requests: record[1].parse().map_err(|e| parse_err(line, format!("n_requests: {e}")))?,
            mode: record[2].parse().map_err(|e| parse_err(line, e))?,
            execution_ms: num(3)?,
            planning_ms: num(4)?,
            measured: Measurement::parse(&record[5]).ok_or_else(|| parse_err(line, format!("measured: {}", &record[5])))?,
            statements: record[6].parse().map_err(|e| parse_err(line, format!("statements: {e}")))?,
        });
    }
    Ok(samples)
}
