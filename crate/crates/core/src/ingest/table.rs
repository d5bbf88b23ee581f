use std::io::Write;

use chrono::NaiveDateTime;

use super::schema::{Storage, TableSchema};
use crate::time::format_datetime;

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Int(Vec<Option<i64>>),
    Float(Vec<Option<f64>>),
    Text(Vec<Option<String>>),
    DateTime(Vec<Option<NaiveDateTime>>),
}

impl ColumnData {
    fn empty(storage: Storage) -> Self {
        match storage {
            Storage::Int => ColumnData::Int(Vec::new()),
            Storage::Float => ColumnData::Float(Vec::new()),
            Storage::Text => ColumnData::Text(Vec::new()),
            Storage::DateTime => ColumnData::DateTime(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ColumnData::Int(v) => v.len(),
            ColumnData::Float(v) => v.len(),
            ColumnData::Text(v) => v.len(),
            ColumnData::DateTime(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&mut self, value: Value) {
        match (self, value) {
            (ColumnData::Int(v), Value::Int(x)) => v.push(Some(x)),
            (ColumnData::Float(v), Value::Float(x)) => v.push(Some(x)),
            (ColumnData::Text(v), Value::Text(x)) => v.push(Some(x)),
            (ColumnData::DateTime(v), Value::DateTime(x)) => v.push(Some(x)),
            (ColumnData::Int(v), Value::Null) => v.push(None),
            (ColumnData::Float(v), Value::Null) => v.push(None),
            (ColumnData::Text(v), Value::Null) => v.push(None),
            (ColumnData::DateTime(v), Value::Null) => v.push(None),
            (col, value) => unreachable!("value {value:?} does not fit column {col:?}"),
        }
    }

    /// Renders one cell the way it is written to CSV; `None` is the empty field.
    pub fn render(&self, row: usize) -> Option<String> {
        match self {
            ColumnData::Int(v) => v[row].map(|x| x.to_string()),
            ColumnData::Float(v) => v[row].map(|x| x.to_string()),
            ColumnData::Text(v) => v[row].clone(),
            ColumnData::DateTime(v) => v[row].as_ref().map(format_datetime),
        }
    }
}

/// A parsed cell, before it is pushed into its column.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Int(i64),
    Float(f64),
    Text(String),
    DateTime(NaiveDateTime),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

/// Column-oriented table. Every registered column exists, even when the
/// source file omitted an optional one (it is then all-null).
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    columns: Vec<Column>,
    len: usize,
}

impl Table {
    pub fn new(schema: &TableSchema) -> Self {
        Table {
            name: schema.name.to_string(),
            columns: schema
                .columns
                .iter()
                .map(|c| Column {
                    name: c.name.to_string(),
                    data: ColumnData::empty(c.ty.storage()),
                })
                .collect(),
            len: 0,
        }
    }

    /// Appends a row whose values are in schema column order.
    pub(crate) fn push_row(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        for (col, v) in self.columns.iter_mut().zip(row) {
            col.data.push(v);
        }
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    fn data(&self, name: &str) -> &ColumnData {
        &self
            .column(name)
            .unwrap_or_else(|| panic!("table `{}` has no column `{name}`", self.name))
            .data
    }

    pub fn ints(&self, name: &str) -> &[Option<i64>] {
        match self.data(name) {
            ColumnData::Int(v) => v,
            other => panic!("{}.{name} is not an integer column: {other:?}", self.name),
        }
    }

    pub fn floats(&self, name: &str) -> &[Option<f64>] {
        match self.data(name) {
            ColumnData::Float(v) => v,
            _ => panic!("{}.{name} is not a numeric column", self.name),
        }
    }

    pub fn texts(&self, name: &str) -> &[Option<String>] {
        match self.data(name) {
            ColumnData::Text(v) => v,
            _ => panic!("{}.{name} is not a text column", self.name),
        }
    }

    pub fn datetimes(&self, name: &str) -> &[Option<NaiveDateTime>] {
        match self.data(name) {
            ColumnData::DateTime(v) => v,
            _ => panic!("{}.{name} is not a datetime column", self.name),
        }
    }

    /// Writes the table as RFC-4180 CSV in schema column order.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        for row in 0..self.len {
            w.write_record(
                self.columns
                    .iter()
                    .map(|c| c.data.render(row).unwrap_or_default()),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}
