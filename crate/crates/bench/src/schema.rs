//! The four benchmark entities.
//!
//! An entity named `<C>c<F>fk` has `C` text columns and `F` foreign keys. The
//! two-FK entities reference one pre-seeded row in `4c0fk` and one in `10c0fk`.

use std::fmt;
use std::str::FromStr;

use rand::distr::{Alphanumeric, SampleString};
use rand::Rng;
use serde_json::{Map, Value};

pub const PAYLOAD_STRING_LEN: usize = 32;
/// Id of the reference row seeded in each FK target table.
pub const SEED_ROW_ID: i64 = 1;
pub const FK_TARGETS: [&str; 2] = ["4c0fk", "10c0fk"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySchema {
    pub name: &'static str,
    pub text_columns: u32,
    pub foreign_keys: u32,
}

pub const E4C0FK: EntitySchema = EntitySchema { name: "4c0fk", text_columns: 4, foreign_keys: 0 };
pub const E4C2FK: EntitySchema = EntitySchema { name: "4c2fk", text_columns: 4, foreign_keys: 2 };
pub const E10C0FK: EntitySchema = EntitySchema { name: "10c0fk", text_columns: 10, foreign_keys: 0 };
pub const E10C2FK: EntitySchema = EntitySchema { name: "10c2fk", text_columns: 10, foreign_keys: 2 };

/// In report order.
pub const ALL_ENTITIES: [EntitySchema; 4] = [E4C0FK, E4C2FK, E10C0FK, E10C2FK];

impl EntitySchema {
    pub fn text_column_names(&self) -> impl Iterator<Item = String> {
        (1..=self.text_columns).map(|i| format!("c{i}"))
    }

    pub fn fk_column_names(&self) -> impl Iterator<Item = String> + '_ {
        FK_TARGETS
            .iter()
            .take(self.foreign_keys as usize)
            .map(|t| format!("fk_{t}"))
    }

    pub fn fk_targets(&self) -> &'static [&'static str] {
        &FK_TARGETS[..self.foreign_keys as usize]
    }

    pub fn columns(&self) -> Vec<String> {
        self.text_column_names().chain(self.fk_column_names()).collect()
    }

    /// Quoted table name; entity names start with a digit.
    pub fn table(&self) -> String {
        format!("\"{}\"", self.name)
    }

    /// Portable DDL (SQLite and PostgreSQL).
    pub fn create_table_sql(&self, id_type: &str) -> String {
        let mut cols = vec![format!("id {id_type}")];
        cols.extend(self.text_column_names().map(|c| format!("{c} TEXT NOT NULL")));
        for target in self.fk_targets() {
            cols.push(format!("fk_{target} INTEGER NOT NULL REFERENCES \"{target}\"(id)"));
        }
        format!("CREATE TABLE IF NOT EXISTS {} ({})", self.table(), cols.join(", "))
    }

    /// One request body: every text column filled with a distinct
    /// fixed-length alphanumeric string, FKs pointing at the seed rows.
    pub fn payload<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        let mut obj = Map::new();
        for c in self.text_column_names() {
            obj.insert(c, Value::String(Alphanumeric.sample_string(rng, PAYLOAD_STRING_LEN)));
        }
        for c in self.fk_column_names() {
            obj.insert(c, Value::from(SEED_ROW_ID));
        }
        serde_json::to_vec(&Value::Object(obj)).unwrap()
    }

    /// Validates a payload and extracts its column values in column order.
    pub fn row_values(&self, payload: &[u8]) -> Result<Vec<SqlValue>, String> {
        let value: Value = serde_json::from_slice(payload).map_err(|e| format!("invalid JSON: {e}"))?;
        self.row_values_from(&value)
    }

    pub fn row_values_from(&self, value: &Value) -> Result<Vec<SqlValue>, String> {
        let obj = value.as_object().ok_or("payload must be a JSON object")?;
        let mut out = Vec::with_capacity(self.columns().len());
        for c in self.text_column_names() {
            match obj.get(&c) {
                Some(Value::String(s)) => out.push(SqlValue::Text(s.clone())),
                _ => return Err(format!("missing string field `{c}`")),
            }
        }
        for c in self.fk_column_names() {
            match obj.get(&c).and_then(Value::as_i64) {
                Some(id) => out.push(SqlValue::Int(id)),
                None => return Err(format!("missing integer field `{c}`")),
            }
        }
        Ok(out)
    }

    /// `INSERT INTO t (cols) VALUES (...), (...)` with inlined literals.
    pub fn insert_sql(&self, rows: &[Vec<SqlValue>]) -> String {
        let cols = self.columns().join(", ");
        let mut sql = String::with_capacity(64 + rows.len() * (self.text_columns as usize) * (PAYLOAD_STRING_LEN + 4));
        sql.push_str(&format!("INSERT INTO {} ({cols}) VALUES ", self.table()));
        for (i, row) in rows.iter().enumerate() {
            if i > 0 {
                sql.push_str(", ");
            }
            sql.push('(');
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    sql.push_str(", ");
                }
                v.write_literal(&mut sql);
            }
            sql.push(')');
        }
        sql
    }
}

impl fmt::Display for EntitySchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

impl FromStr for EntitySchema {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_ENTITIES
            .iter()
            .find(|e| e.name == s)
            .copied()
            .ok_or_else(|| format!("unknown entity `{s}` (expected one of 4c0fk, 4c2fk, 10c0fk, 10c2fk)"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SqlValue {
    Text(String),
    Int(i64),
}

impl SqlValue {
    fn write_literal(&self, out: &mut String) {
        match self {
            SqlValue::Int(i) => out.push_str(&i.to_string()),
            SqlValue::Text(s) => {
                out.push('\'');
                for ch in s.chars() {
                    if ch == '\'' {
                        out.push('\'');
                    }
                    out.push(ch);
                }
                out.push('\'');
            }
        }
    }
}
