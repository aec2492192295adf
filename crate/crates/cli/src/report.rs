//! Table output shared by every command.
//!
//! Reals are written as `{:.16e}`: 17 significant digits, '.' decimal, no
//! locale, enough to round-trip any f64. Missing values are empty fields.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::config::Format;
use crate::error::CliError;

pub fn real(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Real(f64),
    Int(u64),
    Bool(bool),
    Missing,
}

impl Cell {
    fn text(&self) -> String {
        match *self {
            Cell::Real(x) => real(x),
            Cell::Int(n) => n.to_string(),
            Cell::Bool(b) => b.to_string(),
            Cell::Missing => String::new(),
        }
    }

    fn json(&self) -> Value {
        match *self {
            Cell::Real(x) => serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number),
            Cell::Int(n) => Value::from(n),
            Cell::Bool(b) => Value::Bool(b),
            Cell::Missing => Value::Null,
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Missing, Cell::Real)
    }
}

impl From<usize> for Cell {
    fn from(n: usize) -> Self {
        Cell::Int(n as u64)
    }
}

impl From<u64> for Cell {
    fn from(n: u64) -> Self {
        Cell::Int(n)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

/// A column may also hold a label, such as a suite or check name.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Cell(Cell),
    Text(String),
}

impl<T: Into<Cell>> From<T> for Field {
    fn from(v: T) -> Self {
        Field::Cell(v.into())
    }
}

impl Field {
    pub fn text(s: impl Into<String>) -> Self {
        Field::Text(s.into())
    }
}

/// A named table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Field>>,
}

impl Table {
    pub fn new(name: impl Into<String>, header: &[&'static str]) -> Self {
        Self { name: name.into(), header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Field>) {
        assert_eq!(row.len(), self.header.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|f| match f {
                Field::Cell(c) => c.text(),
                Field::Text(s) => s.clone(),
            }))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    let mut m = Map::new();
                    for (k, f) in self.header.iter().zip(row) {
                        let v = match f {
                            Field::Cell(c) => c.json(),
                            Field::Text(s) => Value::String(s.clone()),
                        };
                        m.insert((*k).to_string(), v);
                    }
                    Value::Object(m)
                })
                .collect(),
        )
    }
}

/// One named result of a command.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Table(Table),
    /// Always JSON, whatever the requested format.
    Document { name: String, value: Value },
}

impl Output {
    pub fn name(&self) -> &str {
        match self {
            Output::Table(t) => &t.name,
            Output::Document { name, .. } => name,
        }
    }

    fn json(&self) -> Value {
        match self {
            Output::Table(t) => t.to_json(),
            Output::Document { value, .. } => value.clone(),
        }
    }

    /// File extension and body.
    pub fn body(&self, format: Format) -> Result<(&'static str, String), CliError> {
        Ok(match (self, format) {
            (Output::Table(t), Format::Csv) => ("csv", t.to_csv()?),
            _ => ("json", pretty(&self.json())),
        })
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json renders") + "\n"
}

/// Stdout rendering: a single output as is; several as CSV sections
/// separated by a blank line, or one JSON object keyed by output name.
pub fn render(outputs: &[Output], format: Format) -> Result<String, CliError> {
    if let [one] = outputs {
        return Ok(one.body(format)?.1);
    }
    match format {
        Format::Csv => {
            let parts = outputs.iter().map(|o| o.body(format).map(|b| b.1)).collect::<Result<Vec<_>, _>>()?;
            Ok(parts.join("\n"))
        }
        Format::Json => {
            let mut m = Map::new();
            for o in outputs {
                m.insert(o.name().to_string(), o.json());
            }
            Ok(pretty(&Value::Object(m)))
        }
    }
}

/// Writes each output to `dir/<name>.<ext>` and returns the paths.
pub fn write_outputs(dir: &Path, outputs: &[Output], format: Format) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for o in outputs {
        let (ext, body) = o.body(format)?;
        let path = dir.join(format!("{}.{ext}", o.name()));
        std::fs::write(&path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip_with_17_digits() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0, f64::MIN_POSITIVE] {
            let s = real(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17);
        }
        assert_eq!(real(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn csv_layout() {
        let mut t = Table::new("t", &["a", "b", "c"]);
        t.push(vec![1.5.into(), Field::text("x"), None::<f64>.into()]);
        t.push(vec![2usize.into(), true.into(), Some(0.25).into()]);
        assert_eq!(t.to_csv().unwrap(), "a,b,c\n1.5000000000000000e0,x,\n2,true,2.5000000000000000e-1\n");
        let j = t.to_json();
        assert_eq!(j[0]["c"], Value::Null);
        assert_eq!(j[1]["b"], Value::Bool(true));
    }
}
