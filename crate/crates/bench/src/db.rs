//! Databases behind the mock upstream, plus per-statement timing.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rusqlite::{Connection, ErrorCode};
use serde_json::{Map, Value};

use crate::schema::{EntitySchema, ALL_ENTITIES, FK_TARGETS, SEED_ROW_ID};

/// How a timing was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Measurement {
    /// Parsed from the database's own analyze output.
    Explain,
    /// Stopwatch around the statement; planning is not separable.
    WallClock,
}

impl Measurement {
    pub fn as_str(self) -> &'static str {
        match self {
            Measurement::Explain => "explain",
            Measurement::WallClock => "wall_clock",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "explain" => Some(Measurement::Explain),
            "wall_clock" => Some(Measurement::WallClock),
            _ => None,
        }
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatementTiming {
    pub execution_ms: f64,
    pub planning_ms: f64,
    pub measured: Measurement,
}

#[derive(Debug, thiserror::Error)]
#[error("unparseable explain output: {reason}\n{raw}")]
pub struct MeasurementError {
    pub reason: String,
    pub raw: String,
}

#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error("foreign key violation: {0}")]
    ForeignKeyViolation(String),
    #[error("database error: {0}")]
    Sql(String),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
}

impl From<rusqlite::Error> for DbError {
    fn from(e: rusqlite::Error) -> Self {
        match &e {
            rusqlite::Error::SqliteFailure(f, _)
                if f.code == ErrorCode::ConstraintViolation
                    && f.extended_code == rusqlite::ffi::SQLITE_CONSTRAINT_FOREIGNKEY =>
            {
                DbError::ForeignKeyViolation(e.to_string())
            }
            _ => DbError::Sql(e.to_string()),
        }
    }
}

pub trait InsertDb: Send {
    /// Creates the entity tables if missing.
    fn create_schema(&mut self, schemas: &[EntitySchema]) -> Result<(), DbError>;
    /// Empties every table and reseeds the FK reference rows.
    fn reset(&mut self, schemas: &[EntitySchema]) -> Result<(), DbError>;
    fn timed_insert(&mut self, sql: &str) -> Result<StatementTiming, DbError>;
    fn count_rows(&mut self, schema: &EntitySchema) -> Result<u64, DbError>;
    /// Most recently inserted row as a JSON object, without its id.
    fn latest_row(&mut self, schema: &EntitySchema) -> Result<Option<Value>, DbError>;
    fn measurement(&self) -> Measurement;
}

/// Runs one INSERT and reports how long it took.
pub fn capture_timing(db: &mut dyn InsertDb, insert_statement: &str) -> Result<StatementTiming, DbError> {
    debug_assert!(insert_statement.trim_start().to_ascii_uppercase().starts_with("INSERT"));
    db.timed_insert(insert_statement)
}

/// Every table the schemas need, FK targets first.
fn tables_for(schemas: &[EntitySchema]) -> Vec<EntitySchema> {
    let mut out: Vec<EntitySchema> = Vec::new();
    let needs_targets = schemas.iter().any(|s| s.foreign_keys > 0);
    for e in ALL_ENTITIES {
        let is_target = FK_TARGETS.contains(&e.name);
        if schemas.contains(&e) || (needs_targets && is_target) {
            out.push(e);
        }
    }
    for s in schemas {
        if !out.contains(s) {
            out.push(*s);
        }
    }
    out.sort_by_key(|s| s.foreign_keys);
    out
}

fn seed_sql(target: &EntitySchema) -> String {
    let cols: Vec<String> = target.text_column_names().collect();
    let vals: Vec<String> = cols.iter().map(|c| format!("'seed-{c}'")).collect();
    format!(
        "INSERT INTO {} (id, {}) VALUES ({SEED_ROW_ID}, {})",
        target.table(),
        cols.join(", "),
        vals.join(", ")
    )
}

/// Embedded database. It has no analyze facility, so statements are timed
/// from outside with planning reported as zero.
pub struct SqliteDb {
    conn: Connection,
}

impl SqliteDb {
    pub fn open(path: &Path) -> Result<Self, DbError> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        Self::with_connection(conn)
    }

    pub fn in_memory() -> Result<Self, DbError> {
        Self::with_connection(Connection::open_in_memory()?)
    }

    fn with_connection(conn: Connection) -> Result<Self, DbError> {
        conn.pragma_update(None, "foreign_keys", "ON")?;
        Ok(SqliteDb { conn })
    }
}

impl InsertDb for SqliteDb {
    fn create_schema(&mut self, schemas: &[EntitySchema]) -> Result<(), DbError> {
        for t in tables_for(schemas) {
            self.conn.execute(&t.create_table_sql("INTEGER PRIMARY KEY"), [])?;
        }
        Ok(())
    }

    fn reset(&mut self, schemas: &[EntitySchema]) -> Result<(), DbError> {
        let tables = tables_for(schemas);
        let tx = self.conn.transaction()?;
        for t in tables.iter().rev() {
            tx.execute(&format!("DELETE FROM {}", t.table()), [])?;
        }
        for t in &tables {
            if FK_TARGETS.contains(&t.name) {
                tx.execute(&seed_sql(t), [])?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    fn timed_insert(&mut self, sql: &str) -> Result<StatementTiming, DbError> {
        let start = Instant::now();
        self.conn.execute(sql, [])?;
        Ok(StatementTiming {
            execution_ms: start.elapsed().as_secs_f64() * 1000.0,
            planning_ms: 0.0,
            measured: Measurement::WallClock,
        })
    }

    fn count_rows(&mut self, schema: &EntitySchema) -> Result<u64, DbError> {
        let n: i64 = self
            .conn
            .query_row(&format!("SELECT COUNT(*) FROM {}", schema.table()), [], |r| r.get(0))?;
        Ok(n as u64)
    }

    fn latest_row(&mut self, schema: &EntitySchema) -> Result<Option<Value>, DbError> {
        let cols = schema.columns();
        let sql = format!("SELECT {} FROM {} ORDER BY id DESC LIMIT 1", cols.join(", "), schema.table());
        let mut stmt = self.conn.prepare(&sql)?;
        let mut rows = stmt.query([])?;
        let Some(row) = rows.next()? else { return Ok(None) };
        let mut obj = Map::new();
        for (i, c) in cols.iter().enumerate() {
            let v = if c.starts_with("fk_") {
                Value::from(row.get::<_, i64>(i)?)
            } else {
                Value::from(row.get::<_, String>(i)?)
            };
            obj.insert(c.clone(), v);
        }
        Ok(Some(Value::Object(obj)))
    }

    fn measurement(&self) -> Measurement {
        Measurement::WallClock
    }
}

/// Extracts `(execution_ms, planning_ms)` from PostgreSQL `EXPLAIN ANALYZE`
/// text output. Trigger time is already part of execution time there, so
/// trigger lines are ignored.
pub fn parse_explain_analyze(raw: &str) -> Result<(f64, f64), MeasurementError> {
    let mut execution = None;
    let mut planning = None;
    for line in raw.lines() {
        let line = line.trim();
        let lower = line.to_ascii_lowercase();
        let slot = if lower.starts_with("execution time:") {
            &mut execution
        } else if lower.starts_with("planning time:") {
            &mut planning
        } else {
            continue;
        };
        let value = line
            .split_once(':')
            .map(|(_, v)| v.trim())
            .and_then(|v| v.strip_suffix("ms"))
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|v| v.is_finite() && *v >= 0.0);
        match value {
            Some(v) if slot.is_none() => *slot = Some(v),
            Some(_) => return Err(measurement_error("duplicate timing line", raw)),
            None => return Err(measurement_error(&format!("bad timing line `{line}`"), raw)),
        }
    }
    match (execution, planning) {
        (Some(e), Some(p)) => Ok((e, p)),
        (None, _) => Err(measurement_error("no execution time", raw)),
        (_, None) => Err(measurement_error("no planning time", raw)),
    }
}

fn measurement_error(reason: &str, raw: &str) -> MeasurementError {
    MeasurementError {
        reason: reason.to_string(),
        raw: raw.to_string(),
    }
}

#[cfg(feature = "postgres")]
pub use pg::PostgresDb;

#[cfg(feature = "postgres")]
mod pg {
    use super::*;
    use postgres::error::SqlState;
    use postgres::{Client, NoTls};

    /// Server database; timings come from `EXPLAIN ANALYZE`.
    pub struct PostgresDb {
        client: Client,
    }

    impl PostgresDb {
        pub fn connect(url: &str) -> Result<Self, DbError> {
            Ok(PostgresDb {
                client: Client::connect(url, NoTls).map_err(map)?,
            })
        }
    }

    fn map(e: postgres::Error) -> DbError {
        if e.code() == Some(&SqlState::FOREIGN_KEY_VIOLATION) {
            DbError::ForeignKeyViolation(e.to_string())
        } else {
            DbError::Sql(e.to_string())
        }
    }

    impl InsertDb for PostgresDb {
        fn create_schema(&mut self, schemas: &[EntitySchema]) -> Result<(), DbError> {
            for t in tables_for(schemas) {
                self.client
                    .batch_execute(&t.create_table_sql("BIGSERIAL PRIMARY KEY"))
                    .map_err(map)?;
            }
            Ok(())
        }

        fn reset(&mut self, schemas: &[EntitySchema]) -> Result<(), DbError> {
            let tables = tables_for(schemas);
            let names: Vec<String> = tables.iter().map(|t| t.table()).collect();
            let mut sql = format!("TRUNCATE {} RESTART IDENTITY CASCADE;", names.join(", "));
            for t in &tables {
                if FK_TARGETS.contains(&t.name) {
                    sql.push_str(&seed_sql(t));
                    sql.push(';');
                    sql.push_str(&format!(
                        "SELECT setval(pg_get_serial_sequence('{}', 'id'), {SEED_ROW_ID});",
                        t.table()
                    ));
                }
            }
            self.client.batch_execute(&sql).map_err(map)
        }

        fn timed_insert(&mut self, sql: &str) -> Result<StatementTiming, DbError> {
            let rows = self
                .client
                .simple_query(&format!("EXPLAIN (ANALYZE, FORMAT TEXT) {sql}"))
                .map_err(map)?;
            let mut raw = String::new();
            for msg in rows {
                if let postgres::SimpleQueryMessage::Row(row) = msg {
                    raw.push_str(row.get(0).unwrap_or(""));
                    raw.push('\n');
                }
            }
            let (execution_ms, planning_ms) = parse_explain_analyze(&raw)?;
            Ok(StatementTiming {
                execution_ms,
                planning_ms,
                measured: Measurement::Explain,
            })
        }

        fn count_rows(&mut self, schema: &EntitySchema) -> Result<u64, DbError> {
            let row = self
                .client
                .query_one(&format!("SELECT COUNT(*) FROM {}", schema.table()), &[])
                .map_err(map)?;
            Ok(row.get::<_, i64>(0) as u64)
        }

        fn latest_row(&mut self, schema: &EntitySchema) -> Result<Option<Value>, DbError> {
            let cols = schema.columns();
            let sql = format!("SELECT {} FROM {} ORDER BY id DESC LIMIT 1", cols.join(", "), schema.table());
            let rows = self.client.query(&sql, &[]).map_err(map)?;
            let Some(row) = rows.first() else { return Ok(None) };
            let mut obj = Map::new();
            for (i, c) in cols.iter().enumerate() {
                let v = if c.starts_with("fk_") {
                    Value::from(row.get::<_, i32>(i) as i64)
                } else {
                    Value::from(row.get::<_, String>(i))
                };
                obj.insert(c.clone(), v);
            }
            Ok(Some(Value::Object(obj)))
        }

        fn measurement(&self) -> Measurement {
            Measurement::Explain
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{SqlValue, E10C2FK, E4C0FK, E4C2FK};

    fn row(schema: &EntitySchema, fk: i64) -> Vec<SqlValue> {
        let mut v: Vec<SqlValue> = schema.text_column_names().map(SqlValue::Text).collect();
        v.extend((0..schema.foreign_keys).map(|_| SqlValue::Int(fk)));
        v
    }

    #[test]
    fn sqlite_fallback_reports_wall_clock() {
        let mut db = SqliteDb::in_memory().unwrap();
        db.create_schema(&[E4C0FK]).unwrap();
        db.reset(&[E4C0FK]).unwrap();
        let sql = E4C0FK.insert_sql(&[row(&E4C0FK, 1)]);
        let t = capture_timing(&mut db, &sql).unwrap();
        assert_eq!(t.planning_ms, 0.0);
        assert!(t.execution_ms >= 0.0);
        assert_eq!(t.measured, Measurement::WallClock);
        // seed row plus the insert
        assert_eq!(db.count_rows(&E4C0FK).unwrap(), 2);
    }

    #[test]
    fn sqlite_enforces_foreign_keys() {
        let mut db = SqliteDb::in_memory().unwrap();
        db.create_schema(&[E4C2FK, E10C2FK]).unwrap();
        db.reset(&[E4C2FK, E10C2FK]).unwrap();
        db.timed_insert(&E4C2FK.insert_sql(&[row(&E4C2FK, 1)])).unwrap();
        let err = db.timed_insert(&E4C2FK.insert_sql(&[row(&E4C2FK, 1), row(&E4C2FK, 99)]));
        assert!(matches!(err, Err(DbError::ForeignKeyViolation(_))), "{err:?}");
        assert_eq!(db.count_rows(&E4C2FK).unwrap(), 1);
        db.reset(&[E4C2FK, E10C2FK]).unwrap();
        assert_eq!(db.count_rows(&E4C2FK).unwrap(), 0);
        assert_eq!(db.count_rows(&E4C0FK).unwrap(), 1);
    }

    #[test]
    fn latest_row_round_trips() {
        let mut db = SqliteDb::in_memory().unwrap();
        db.create_schema(&[E4C2FK]).unwrap();
        db.reset(&[E4C2FK]).unwrap();
        assert!(db.latest_row(&E4C2FK).unwrap().is_none());
        let payload = br#"{"c1":"a","c2":"b","c3":"c'","c4":"d","fk_4c0fk":1,"fk_10c0fk":1}"#;
        let vals = E4C2FK.row_values(payload).unwrap();
        db.timed_insert(&E4C2FK.insert_sql(&[vals])).unwrap();
        let got = db.latest_row(&E4C2FK).unwrap().unwrap();
        assert_eq!(got, serde_json::from_slice::<Value>(payload).unwrap());
    }

    // Output shape of PostgreSQL 16 for a one-row insert into a table with
    // two FK constraints.
    const PG_FIXTURE: &str = "\
Insert on \"4c2fk\"  (cost=0.00..0.01 rows=0 width=0) (actual time=0.092..0.093 rows=0 loops=1)
  ->  Result  (cost=0.00..0.01 rows=1 width=180) (actual time=0.018..0.019 rows=1 loops=1)
Planning Time: 0.061 ms
Trigger for constraint 4c2fk_fk_4c0fk_fkey: time=0.155 calls=1
Trigger for constraint 4c2fk_fk_10c0fk_fkey: time=0.047 calls=1
Execution Time: 0.321 ms
";

    #[test]
    fn parses_explain_fixture() {
        let (exec, plan) = parse_explain_analyze(PG_FIXTURE).unwrap();
        assert_eq!(exec, 0.321);
        assert_eq!(plan, 0.061);
        assert!(exec > 0.0 && plan > 0.0);
    }

    #[test]
    fn parses_older_lowercase_labels() {
        let raw = "Insert on t (actual time=0.1..0.1 rows=0 loops=1)\nPlanning time: 0.050 ms\nExecution time: 0.055 ms\n";
        assert_eq!(parse_explain_analyze(raw).unwrap(), (0.055, 0.050));
    }

    #[test]
    fn malformed_explain_is_an_error_with_raw_output() {
        for raw in [
            "",
            "Planning Time: 0.061 ms\n",
            "Execution Time: 0.321 ms\n",
            "Planning Time: fast\nExecution Time: 0.3 ms\n",
            "Planning Time: 0.1 ms\nExecution Time: -1 ms\n",
            "Planning Time: 0.1 ms\nExecution Time: 0.2 ms\nExecution Time: 0.2 ms\n",
        ] {
            let err = parse_explain_analyze(raw).unwrap_err();
            assert_eq!(err.raw, raw);
        }
    }
}
