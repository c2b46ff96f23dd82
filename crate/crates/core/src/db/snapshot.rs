use serde::{Deserialize, Serialize};

use super::{cell_from, query_failed, Cell, DbError, DbHandle};
use crate::sqltok::quote_ident;

/// Schema name used for databases without a schema layer.
pub const FLAT_SCHEMA: &str = "main";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnEntry {
    pub name: String,
    pub declared_type: String,
    /// First non-null values in storage order, at most three.
    pub sample_values: Vec<Cell>,
    /// Table has rows and every one of them is NULL in this column.
    pub all_null: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    /// `table` in the flat schema, `schema.table` otherwise.
    pub qualified_name: String,
    pub schema: String,
    pub name: String,
    pub columns: Vec<ColumnEntry>,
    pub row_count: u64,
    /// Set when the table was folded into a time-suffix group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_tag: Option<String>,
}

impl TableEntry {
    /// Column names and declared types, in order.
    pub fn signature(&self) -> Vec<(String, String)> {
        self.columns
            .iter()
            .map(|c| (c.name.to_lowercase(), c.declared_type.to_uppercase()))
            .collect()
    }

    pub fn column(&self, name: &str) -> Option<&ColumnEntry> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }

    /// SQL reference for this table, quoted for SQLite.
    pub fn sql_ref(&self) -> String {
        if self.schema == FLAT_SCHEMA {
            quote_ident(&self.name)
        } else {
            format!("{}.{}", quote_ident(&self.schema), quote_ident(&self.name))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub name: String,
    pub tables: Vec<TableEntry>,
}

/// database → schema → table → column tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSnapshot {
    pub database_name: String,
    pub schemas: Vec<SchemaEntry>,
}

impl SchemaSnapshot {
    pub fn tables(&self) -> impl Iterator<Item = &TableEntry> {
        self.schemas.iter().flat_map(|s| s.tables.iter())
    }

    pub fn schema_names(&self) -> Vec<String> {
        self.schemas.iter().map(|s| s.name.clone()).collect()
    }

    pub fn schema(&self, name: &str) -> Option<&SchemaEntry> {
        self.schemas.iter().find(|s| s.name.eq_ignore_ascii_case(name))
    }

    /// Resolves a table by qualified name, or by bare name when unambiguous.
    /// Matching is case-insensitive; surrounding quotes are ignored.
    pub fn find_table(&self, name: &str) -> Option<&TableEntry> {
        let wanted: String = name.chars().filter(|c| !matches!(c, '"' | '`' | '[' | ']')).collect();
        if let Some(t) = self.tables().find(|t| t.qualified_name.eq_ignore_ascii_case(&wanted)) {
            return Some(t);
        }
        if let Some(t) = self
            .tables()
            .find(|t| format!("{}.{}", t.schema, t.name).eq_ignore_ascii_case(&wanted))
        {
            return Some(t);
        }
        let mut bare = self.tables().filter(|t| t.name.eq_ignore_ascii_case(&wanted));
        match (bare.next(), bare.next()) {
            (Some(t), None) => Some(t),
            _ => None,
        }
    }
}

fn qualified(schema: &str, table: &str) -> String {
    if schema == FLAT_SCHEMA {
        table.to_string()
    } else {
        format!("{schema}.{table}")
    }
}

pub(super) fn build(db: &DbHandle) -> Result<SchemaSnapshot, DbError> {
    let conn = db.conn();
    let mut stmt = conn.prepare("PRAGMA database_list").map_err(query_failed)?;
    let names: Vec<String> = stmt
        .query_map([], |r| r.get::<_, String>(1))
        .map_err(query_failed)?
        .collect::<Result<_, _>>()
        .map_err(query_failed)?;

    let mut schemas = Vec::new();
    for schema in names.into_iter().filter(|n| n != "temp") {
        let mut tables = Vec::new();
        let sql = format!(
            "SELECT name FROM {}.sqlite_master WHERE type IN ('table','view') \
             AND name NOT LIKE 'sqlite_%' ORDER BY name",
            quote_ident(&schema)
        );
        let mut stmt = conn.prepare(&sql).map_err(query_failed)?;
        let table_names: Vec<String> = stmt
            .query_map([], |r| r.get(0))
            .map_err(query_failed)?
            .collect::<Result<_, _>>()
            .map_err(query_failed)?;
        for name in table_names {
            tables.push(table_entry(db, &schema, &name)?);
        }
        schemas.push(SchemaEntry { name: schema, tables });
    }

    // An empty main next to attached schemas is not a real schema.
    if schemas.len() > 1 {
        schemas.retain(|s| s.name != FLAT_SCHEMA || !s.tables.is_empty());
    }

    let database_name = db
        .location()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SchemaSnapshot { database_name, schemas })
}

fn table_entry(db: &DbHandle, schema: &str, name: &str) -> Result<TableEntry, DbError> {
    let conn = db.conn();
    let table_ref = format!("{}.{}", quote_ident(schema), quote_ident(name));
    let mut stmt = conn
        .prepare(&format!("PRAGMA {}.table_info({})", quote_ident(schema), quote_ident(name)))
        .map_err(query_failed)?;
    let cols: Vec<(String, String)> = stmt
        .query_map([], |r| Ok((r.get::<_, String>(1)?, r.get::<_, String>(2)?)))
        .map_err(query_failed)?
        .collect::<Result<_, _>>()
        .map_err(query_failed)?;
    let row_count: u64 = conn
        .query_row(&format!("SELECT count(*) FROM {table_ref}"), [], |r| r.get::<_, i64>(0))
        .map_err(query_failed)? as u64;

    let mut columns = Vec::with_capacity(cols.len());
    for (col, declared_type) in cols {
        let qcol = quote_ident(&col);
        let mut stmt = conn
            .prepare(&format!("SELECT {qcol} FROM {table_ref} WHERE {qcol} IS NOT NULL LIMIT 3"))
            .map_err(query_failed)?;
        let mut rows = stmt.query([]).map_err(query_failed)?;
        let mut sample_values = Vec::new();
        while let Some(row) = rows.next().map_err(query_failed)? {
            sample_values.push(cell_from(row.get_ref(0).map_err(query_failed)?));
        }
        let all_null = row_count > 0 && sample_values.is_empty();
        columns.push(ColumnEntry { name: col, declared_type, sample_values, all_null });
    }

    Ok(TableEntry {
        qualified_name: qualified(schema, name),
        schema: schema.to_string(),
        name: name.to_string(),
        columns,
        row_count,
        group_tag: None,
    })
}
