//! Small tables written as CSV with a Markdown twin.

use std::path::Path;

use crate::error::{CliError, Result};
use crate::io::{csv_writer, write_file};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(u64),
    Num(f64),
    Empty,
}

impl Cell {
    /// Full precision, shortest round-trip form.
    fn csv(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(v) => v.to_string(),
            Cell::Num(v) => v.to_string(),
            Cell::Empty => String::new(),
        }
    }

    fn markdown(&self) -> String {
        match self {
            Cell::Text(s) => s.replace('|', "\\|"),
            Cell::Int(v) => v.to_string(),
            Cell::Num(v) => format!("{v:.4}"),
            Cell::Empty => String::new(),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::csv))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("| {} |\n", self.header.join(" | ")));
        out.push_str(&format!(
            "|{}\n",
            self.header.iter().map(|_| "---|").collect::<String>()
        ));
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(Cell::markdown).collect();
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.md` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_file(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        write_file(
            &dir.join(format!("{stem}.md")),
            self.to_markdown().as_bytes(),
        )
    }

    /// Reads a CSV written by [`Table::to_csv`]; every cell comes back as
    /// text.
    pub fn read_csv(path: &Path) -> Result<Table> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(bytes.as_slice());
        let bad = |e: csv::Error| CliError::data(format!("{}: {e}", path.display()));
        let header = r.headers().map_err(bad)?.iter().map(String::from).collect();
        let mut table = Table {
            header,
            rows: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec.map_err(bad)?;
            table
                .rows
                .push(rec.iter().map(|s| Cell::Text(s.to_string())).collect());
        }
        Ok(table)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn text(&self, row: usize, col: usize) -> String {
        self.rows[row][col].csv()
    }
}
