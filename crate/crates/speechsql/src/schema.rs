//! Database schema model and the JSON schema store.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("malformed schema at {path}: {reason}")]
    MalformedSchema { path: String, reason: String },
    #[error("duplicate db_id {0:?}")]
    DuplicateDbId(String),
    #[error("failed to parse schema store: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Number,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<Column>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub db_id: String,
    pub tables: Vec<Table>,
    #[serde(default)]
    pub primary_keys: Vec<(String, String)>,
    /// (src_table, src_column, dst_table, dst_column)
    #[serde(default)]
    pub foreign_keys: Vec<(String, String, String, String)>,
}

impl Schema {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables
            .iter()
            .position(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn has_column(&self, table: &str, column: &str) -> bool {
        self.table(table)
            .map(|t| t.columns.iter().any(|c| c.name.eq_ignore_ascii_case(column)))
            .unwrap_or(false)
    }

    /// Tables (by index) that contain a column of this name.
    pub fn tables_with_column(&self, column: &str) -> Vec<usize> {
        self.tables
            .iter()
            .enumerate()
            .filter(|(_, t)| t.columns.iter().any(|c| c.name.eq_ignore_ascii_case(column)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Foreign key joining two tables, in either direction.
    pub fn foreign_key_between(&self, a: &str, b: &str) -> Option<(String, String, String, String)> {
        for (st, sc, dt, dc) in &self.foreign_keys {
            if st.eq_ignore_ascii_case(a) && dt.eq_ignore_ascii_case(b) {
                return Some((st.clone(), sc.clone(), dt.clone(), dc.clone()));
            }
            if st.eq_ignore_ascii_case(b) && dt.eq_ignore_ascii_case(a) {
                return Some((dt.clone(), dc.clone(), st.clone(), sc.clone()));
            }
        }
        None
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let fail = |path: String, reason: &str| -> Result<(), SchemaError> {
            Err(SchemaError::MalformedSchema {
                path,
                reason: reason.to_string(),
            })
        };
        if self.tables.is_empty() {
            return fail(self.db_id.clone(), "schema has no tables");
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tables {
            if t.name.is_empty() {
                return fail(format!("{}.<table>", self.db_id), "empty table name");
            }
            if !seen.insert(t.name.to_ascii_lowercase()) {
                return fail(
                    format!("{}.{}", self.db_id, t.name),
                    "duplicate table name",
                );
            }
            if t.columns.is_empty() {
                return fail(format!("{}.{}", self.db_id, t.name), "table has no columns");
            }
            let mut cols = std::collections::HashSet::new();
            for c in &t.columns {
                if c.name.is_empty() {
                    return fail(format!("{}.{}", self.db_id, t.name), "empty column name");
                }
                if !cols.insert(c.name.to_ascii_lowercase()) {
                    return fail(
                        format!("{}.{}.{}", self.db_id, t.name, c.name),
                        "duplicate column name in table",
                    );
                }
            }
        }
        for (t, c) in &self.primary_keys {
            if !self.has_column(t, c) {
                return fail(
                    format!("{}.{}.{}", self.db_id, t, c),
                    "primary key names absent column",
                );
            }
        }
        for (st, sc, dt, dc) in &self.foreign_keys {
            if !self.has_column(st, sc) {
                return fail(
                    format!("{}.{}.{}", self.db_id, st, sc),
                    "foreign key source names absent column",
                );
            }
            if !self.has_column(dt, dc) {
                return fail(
                    format!("{}.{}.{}", self.db_id, dt, dc),
                    "foreign key target names absent column",
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreFile {
    databases: Vec<Schema>,
}

/// Ordered map so iteration over the store stays deterministic.
pub type SchemaStore = BTreeMap<String, Schema>;

pub fn load_schema_store(path: &Path) -> Result<SchemaStore, SchemaError> {
    let text = std::fs::read_to_string(path)?;
    parse_schema_store(&text)
}

pub fn parse_schema_store(text: &str) -> Result<SchemaStore, SchemaError> {
    let file: StoreFile = serde_json::from_str(text)?;
    let mut store = SchemaStore::new();
    for schema in file.databases {
        schema.validate()?;
        if store.contains_key(&schema.db_id) {
            return Err(SchemaError::DuplicateDbId(schema.db_id));
        }
        store.insert(schema.db_id.clone(), schema);
    }
    Ok(store)
}

pub fn save_schema_store(store: &SchemaStore, path: &Path) -> Result<(), SchemaError> {
    let file = StoreFile {
        databases: store.values().cloned().collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}
