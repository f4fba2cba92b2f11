//! Administrator-authored configuration.
//!
//! The file is line oriented: `key = value` pairs, `#` comments, and one
//! `[rule]` section per cacheable path. Top-level keys must appear before the
//! first section.
//!
//! ```text
//! listen = 127.0.0.1:8080
//! upstream = http://127.0.0.1:9000
//! threads = 4
//! max_cache_bytes = 1073741824
//! cache_dir = /var/cache/wcproxy
//!
//! [rule]
//! path = /emails
//! kind = upload
//! ttl_seconds = 30
//! flush_threshold = 10000
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

pub const DEFAULT_FLUSH_THRESHOLD: u64 = 10_000;
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_THREADS: usize = 4;
pub const DEFAULT_MAX_CACHE_BYTES: u64 = 1 << 30;
pub const DEFAULT_CACHE_DIR: &str = "wcproxy-cache";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    MalformedSyntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    InvalidValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("line {line}: duplicate {kind} rule for path `{path}`")]
    DuplicateRule {
        line: usize,
        path: String,
        kind: RuleKind,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RuleKind {
    Upload,
    Download,
}

impl RuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::Upload => "upload",
            RuleKind::Download => "download",
        }
    }

    /// The only request method a rule of this kind applies to.
    pub fn method(self) -> &'static str {
        match self {
            RuleKind::Upload => "POST",
            RuleKind::Download => "GET",
        }
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RuleKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "upload" => Ok(RuleKind::Upload),
            "download" => Ok(RuleKind::Download),
            other => Err(format!("expected `upload` or `download`, got `{other}`")),
        }
    }
}

/// One cacheable path.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheRule {
    pub path: String,
    pub kind: RuleKind,
    pub ttl_seconds: f64,
    /// Always `Some` for upload rules, always `None` for download rules.
    pub flush_threshold: Option<u64>,
}

impl CacheRule {
    pub fn upload(path: impl Into<String>, ttl_seconds: f64, flush_threshold: u64) -> Self {
        CacheRule {
            path: path.into(),
            kind: RuleKind::Upload,
            ttl_seconds,
            flush_threshold: Some(flush_threshold),
        }
    }

    pub fn download(path: impl Into<String>, ttl_seconds: f64) -> Self {
        CacheRule {
            path: path.into(),
            kind: RuleKind::Download,
            ttl_seconds,
            flush_threshold: None,
        }
    }

    pub fn ttl(&self) -> Duration {
        Duration::from_secs_f64(self.ttl_seconds)
    }

    pub fn threshold(&self) -> u64 {
        self.flush_threshold.unwrap_or(DEFAULT_FLUSH_THRESHOLD)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub listen_address: String,
    pub upstream_base_url: String,
    pub thread_pool_size: usize,
    pub max_cache_bytes: u64,
    pub cache_dir: PathBuf,
    pub rules: Vec<CacheRule>,
}

impl Config {
    /// A config with defaults for everything but the upstream and no rules.
    pub fn new(upstream_base_url: impl Into<String>) -> Self {
        Config {
            listen_address: DEFAULT_LISTEN.to_string(),
            upstream_base_url: upstream_base_url.into(),
            thread_pool_size: DEFAULT_THREADS,
            max_cache_bytes: DEFAULT_MAX_CACHE_BYTES,
            cache_dir: PathBuf::from(DEFAULT_CACHE_DIR),
            rules: Vec::new(),
        }
    }

    /// Finds the rule governing a request, if any.
    ///
    /// Matching is exact on the path component; any query string is ignored.
    pub fn match_rule(&self, method: &str, path: &str) -> Option<&CacheRule> {
        let path = strip_query(path);
        self.rules
            .iter()
            .find(|r| r.path == path && r.kind.method() == method)
    }

    pub fn upload_rules(&self) -> impl Iterator<Item = &CacheRule> {
        self.rules.iter().filter(|r| r.kind == RuleKind::Upload)
    }

    /// Checks every invariant that `parse_config` enforces.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::InvalidValue {
            line: 0,
            key: key.to_string(),
            message,
        };
        validate_listen(&self.listen_address).map_err(|m| invalid("listen", m))?;
        validate_upstream(&self.upstream_base_url).map_err(|m| invalid("upstream", m))?;
        if self.thread_pool_size == 0 {
            return Err(invalid("threads", "must be at least 1".into()));
        }
        if self.max_cache_bytes == 0 {
            return Err(invalid("max_cache_bytes", "must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for rule in &self.rules {
            validate_path(&rule.path).map_err(|m| invalid("path", m))?;
            validate_ttl(rule.ttl_seconds).map_err(|m| invalid("ttl_seconds", m))?;
            match (rule.kind, rule.flush_threshold) {
                (RuleKind::Upload, Some(0)) | (RuleKind::Upload, None) => {
                    return Err(invalid("flush_threshold", "must be at least 1".into()))
                }
                (RuleKind::Download, Some(_)) => {
                    return Err(invalid(
                        "flush_threshold",
                        "download rules carry no threshold".into(),
                    ))
                }
                _ => {}
            }
            if !seen.insert((rule.path.as_str(), rule.kind)) {
                return Err(ConfigError::DuplicateRule {
                    line: 0,
                    path: rule.path.clone(),
                    kind: rule.kind,
                });
            }
        }
        Ok(())
    }
}

/// Serializes back into the file format accepted by [`parse_config`].
impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "listen = {}", self.listen_address)?;
        writeln!(f, "upstream = {}", self.upstream_base_url)?;
        writeln!(f, "threads = {}", self.thread_pool_size)?;
        writeln!(f, "max_cache_bytes = {}", self.max_cache_bytes)?;
        writeln!(f, "cache_dir = {}", self.cache_dir.display())?;
        for rule in &self.rules {
            writeln!(f)?;
            writeln!(f, "[rule]")?;
            writeln!(f, "path = {}", rule.path)?;
            writeln!(f, "kind = {}", rule.kind)?;
            writeln!(f, "ttl_seconds = {}", rule.ttl_seconds)?;
            if let Some(t) = rule.flush_threshold {
                writeln!(f, "flush_threshold = {t}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Config {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_config(s)
    }
}

pub fn strip_query(target: &str) -> &str {
    target.split_once('?').map_or(target, |(p, _)| p)
}

#[derive(Default)]
struct RuleDraft {
    line: usize,
    path: Option<String>,
    kind: Option<RuleKind>,
    ttl_seconds: Option<f64>,
    flush_threshold: Option<u64>,
}

impl RuleDraft {
    fn finish(self) -> Result<CacheRule, ConfigError> {
        let missing = |key: &str| ConfigError::InvalidValue {
            line: self.line,
            key: key.to_string(),
            message: "missing from [rule] section".into(),
        };
        let path = self.path.clone().ok_or_else(|| missing("path"))?;
        let kind = self.kind.ok_or_else(|| missing("kind"))?;
        let ttl_seconds = self.ttl_seconds.ok_or_else(|| missing("ttl_seconds"))?;
        let flush_threshold = match kind {
            RuleKind::Upload => Some(self.flush_threshold.unwrap_or(DEFAULT_FLUSH_THRESHOLD)),
            RuleKind::Download => {
                if self.flush_threshold.is_some() {
                    log::warn!(
                        "line {}: flush_threshold ignored on download rule `{path}`",
                        self.line
                    );
                }
                None
            }
        };
        Ok(CacheRule {
            path,
            kind,
            ttl_seconds,
            flush_threshold,
        })
    }
}

/// Parses and validates a configuration file.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let mut listen = None;
    let mut upstream = None;
    let mut threads = None;
    let mut max_cache_bytes = None;
    let mut cache_dir = None;
    let mut drafts: Vec<RuleDraft> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split_once('#').map_or(raw, |(c, _)| c);
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = content.len() - content.trim_start().len();

        if trimmed.starts_with('[') {
            if trimmed == "[rule]" {
                drafts.push(RuleDraft {
                    line: line_no,
                    ..Default::default()
                });
                continue;
            }
            let column = if trimmed.ends_with(']') {
                indent + 2
            } else {
                indent + trimmed.len() + 1
            };
            return Err(ConfigError::MalformedSyntax {
                line: line_no,
                column,
                message: format!("unknown section `{trimmed}`, expected `[rule]`"),
            });
        }

        let Some(eq) = content.find('=') else {
            return Err(ConfigError::MalformedSyntax {
                line: line_no,
                column: indent + trimmed.len() + 1,
                message: "expected `key = value`".into(),
            });
        };
        let key = content[..eq].trim();
        let value = content[eq + 1..].trim();
        if key.is_empty() {
            return Err(ConfigError::MalformedSyntax {
                line: line_no,
                column: eq + 1,
                message: "missing key before `=`".into(),
            });
        }
        if value.is_empty() {
            return Err(ConfigError::MalformedSyntax {
                line: line_no,
                column: eq + 2,
                message: format!("missing value for `{key}`"),
            });
        }
        let invalid = |message: String| ConfigError::InvalidValue {
            line: line_no,
            key: key.to_string(),
            message,
        };
        let duplicate = || invalid("key given twice".into());

        match drafts.last_mut() {
            None => match key {
                "listen" => {
                    validate_listen(value).map_err(invalid)?;
                    set_once(&mut listen, value.to_string()).map_err(|_| duplicate())?;
                }
                "upstream" => {
                    validate_upstream(value).map_err(invalid)?;
                    set_once(&mut upstream, value.to_string()).map_err(|_| duplicate())?;
                }
                "threads" => {
                    let n: usize = parse_num(value).map_err(invalid)?;
                    if n == 0 {
                        return Err(invalid("must be at least 1".into()));
                    }
                    set_once(&mut threads, n).map_err(|_| duplicate())?;
                }
                "max_cache_bytes" => {
                    let n: u64 = parse_num(value).map_err(invalid)?;
                    if n == 0 {
                        return Err(invalid("must be at least 1".into()));
                    }
                    set_once(&mut max_cache_bytes, n).map_err(|_| duplicate())?;
                }
                "cache_dir" => {
                    set_once(&mut cache_dir, PathBuf::from(value)).map_err(|_| duplicate())?;
                }
                _ => return Err(invalid("unknown top-level key".into())),
            },
            Some(rule) => match key {
                "path" => {
                    validate_path(value).map_err(invalid)?;
                    set_once(&mut rule.path, value.to_string()).map_err(|_| duplicate())?;
                }
                "kind" => {
                    let kind = value.parse().map_err(invalid)?;
                    set_once(&mut rule.kind, kind).map_err(|_| duplicate())?;
                }
                "ttl_seconds" => {
                    let ttl: f64 = parse_num(value).map_err(invalid)?;
                    validate_ttl(ttl).map_err(invalid)?;
                    set_once(&mut rule.ttl_seconds, ttl).map_err(|_| duplicate())?;
                }
                "flush_threshold" => {
                    let n: u64 = parse_num(value).map_err(invalid)?;
                    if n == 0 {
                        return Err(invalid("must be at least 1".into()));
                    }
                    set_once(&mut rule.flush_threshold, n).map_err(|_| duplicate())?;
                }
                _ => return Err(invalid("unknown rule key".into())),
            },
        }
    }

    let upstream = upstream.ok_or_else(|| ConfigError::InvalidValue {
        line: 0,
        key: "upstream".into(),
        message: "required key missing".into(),
    })?;

    let mut rules = Vec::with_capacity(drafts.len());
    let mut seen = HashSet::new();
    for draft in drafts {
        let line = draft.line;
        let rule = draft.finish()?;
        if !seen.insert((rule.path.clone(), rule.kind)) {
            return Err(ConfigError::DuplicateRule {
                line,
                path: rule.path,
                kind: rule.kind,
            });
        }
        rules.push(rule);
    }

    Ok(Config {
        listen_address: listen.unwrap_or_else(|| DEFAULT_LISTEN.to_string()),
        upstream_base_url: upstream,
        thread_pool_size: threads.unwrap_or(DEFAULT_THREADS),
        max_cache_bytes: max_cache_bytes.unwrap_or(DEFAULT_MAX_CACHE_BYTES),
        cache_dir: cache_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR)),
        rules,
    })
}

fn set_once<T>(slot: &mut Option<T>, value: T) -> Result<(), ()> {
    if slot.is_some() {
        return Err(());
    }
    *slot = Some(value);
    Ok(())
}

fn parse_num<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("`{value}`: {e}"))
}

fn validate_listen(value: &str) -> Result<(), String> {
    let (host, port) = value
        .rsplit_once(':')
        .ok_or_else(|| format!("`{value}` is not host:port"))?;
    if host.is_empty() {
        return Err(format!("`{value}` has an empty host"));
    }
    port.parse::<u16>()
        .map(|_| ())
        .map_err(|_| format!("`{port}` is not a port number"))
}

fn validate_upstream(value: &str) -> Result<(), String> {
    let url = url::Url::parse(value).map_err(|e| format!("`{value}`: {e}"))?;
    if url.scheme() != "http" {
        return Err(format!("only http:// upstreams are supported, got `{value}`"));
    }
    if url.host_str().is_none() {
        return Err(format!("`{value}` has no host"));
    }
    if url.query().is_some() || url.fragment().is_some() {
        return Err(format!("`{value}` must not carry a query or fragment"));
    }
    Ok(())
}

fn validate_path(value: &str) -> Result<(), String> {
    if !value.starts_with('/') {
        return Err(format!("`{value}` must begin with `/`"));
    }
    if value.contains('?') || value.chars().any(char::is_whitespace) {
        return Err(format!("`{value}` must be a bare path"));
    }
    Ok(())
}

fn validate_ttl(ttl: f64) -> Result<(), String> {
    if ttl.is_finite() && ttl > 0.0 {
        Ok(())
    } else {
        Err(format!("ttl must be a positive number, got {ttl}"))
    }
}
