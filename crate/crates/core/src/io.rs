//! CSV ingest and output.
//!
//! Binary/count files have the header `y,m,x1,...,xd`; multinomial files
//! have `y,x1,...,xd` with integer classes `1..=K`. Lines starting with `#`
//! are comments, which is where writers put their config and seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::multinomial::MultiDataset;

/// Seventeen significant digits, enough for an exact round trip.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Contents of an input file.
#[derive(Debug, Clone)]
pub enum Ingested {
    Binary(Dataset),
    Multinomial(MultiDataset),
}

impl Ingested {
    /// `(N, d, K)`; K is 2 for binary data.
    pub fn shape(&self) -> (usize, usize, usize) {
        match self {
            Ingested::Binary(ds) => (ds.n(), ds.d(), 2),
            Ingested::Multinomial(md) => (md.n(), md.d(), md.k()),
        }
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r)
}

fn parse_err(line: Option<u64>, message: impl Into<String>) -> Error {
    Error::Parse { line: line.unwrap_or(0) as usize, message: message.into() }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
    /// File line of each row.
    lines: Vec<u64>,
}

impl Table {
    fn line(&self, row: usize) -> Option<u64> {
        self.lines.get(row).copied()
    }
}

fn read_table<R: Read>(r: R) -> Result<Table> {
    let mut rdr = reader(r);
    let header: Vec<String> = rdr.headers().map_err(|e| parse_err(Some(1), e.to_string()))?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(parse_err(Some(1), "missing header row"));
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map(|p| p.line()), e.to_string()))?;
        let line = rec.position().map(|p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let mut row = Vec::with_capacity(rec.len());
        for (field, name) in rec.iter().zip(&header) {
            let v: f64 = field.parse().map_err(|_| parse_err(line, format!("column '{name}': cannot parse '{field}'")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column '{name}': non-finite value '{field}'")));
            }
            row.push(v);
        }
        rows.push(row);
        lines.push(line.unwrap_or(0));
    }
    Ok(Table { header, rows, lines })
}

fn design(rows: &[Vec<f64>], from: usize) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len() - from);
    DMatrix::from_fn(rows.len(), d, |t, j| rows[t][from + j])
}

/// Reads either format, telling them apart by the header.
pub fn ingest<R: Read>(r: R) -> Result<Ingested> {
    let table = read_table(r)?;
    let h = &table.header;
    if h.first().map(String::as_str) != Some("y") {
        return Err(parse_err(Some(1), "first column must be 'y'"));
    }
    if h.get(1).map(String::as_str) == Some("m") {
        binary_from_table(table).map(Ingested::Binary)
    } else {
        multinomial_from_table(table).map(Ingested::Multinomial)
    }
}

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Ingested> {
    ingest(BufReader::new(File::open(path)?))
}

fn binary_from_table(table: Table) -> Result<Dataset> {
    if table.header.len() < 3 {
        return Err(parse_err(Some(1), "binary format needs y, m and at least one feature column"));
    }
    if table.rows.is_empty() {
        return Err(parse_err(Some(2), "no data rows"));
    }
    for (t, row) in table.rows.iter().enumerate() {
        let (y, m) = (row[0], row[1]);
        if !(m > 0.0) {
            return Err(parse_err(table.line(t), format!("trials m = {m} must be positive")));
        }
        if y < 0.0 || y > m {
            return Err(parse_err(table.line(t), format!("need 0 <= y <= m, got y = {y}, m = {m}")));
        }
    }
    let y = DVector::from_iterator(table.rows.len(), table.rows.iter().map(|r| r[0]));
    let m = DVector::from_iterator(table.rows.len(), table.rows.iter().map(|r| r[1]));
    Dataset::new(y, m, design(&table.rows, 2))
}

fn multinomial_from_table(table: Table) -> Result<MultiDataset> {
    if table.header.len() < 2 {
        return Err(parse_err(Some(1), "multinomial format needs y and at least one feature column"));
    }
    if table.rows.is_empty() {
        return Err(parse_err(Some(2), "no data rows"));
    }
    let mut labels = Vec::with_capacity(table.rows.len());
    for (t, row) in table.rows.iter().enumerate() {
        let y = row[0];
        if y < 1.0 || y.fract() != 0.0 {
            return Err(parse_err(table.line(t), format!("class label {y} must be an integer >= 1")));
        }
        labels.push(y as usize);
    }
    let k = labels.iter().copied().max().unwrap_or(0).max(2);
    MultiDataset::from_labels(&labels, k, design(&table.rows, 1))
}

pub fn read_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    match ingest_csv(path)? {
        Ingested::Binary(ds) => Ok(ds),
        Ingested::Multinomial(_) => Err(Error::InvalidInput("expected a y,m,x1.. file, found the multinomial format".into())),
    }
}

/// Writes a `# ...` comment line holding `meta` as JSON.
pub fn write_meta_comment<W: Write, M: Serialize + ?Sized>(w: &mut W, meta: &M) -> Result<()> {
    writeln!(w, "# {}", serde_json::to_string(meta)?)?;
    Ok(())
}

pub fn write_dataset<W: Write, M: Serialize + ?Sized>(mut w: W, ds: &Dataset, meta: Option<&M>) -> Result<()> {
    if let Some(meta) = meta {
        write_meta_comment(&mut w, meta)?;
    }
    let mut cw = csv::Writer::from_writer(w);
    let mut header = vec!["y".to_string(), "m".into()];
    header.extend((1..=ds.d()).map(|j| format!("x{j}")));
    cw.write_record(&header)?;
    for t in 0..ds.n() {
        let mut rec = vec![fmt_float(ds.y()[t]), fmt_float(ds.m()[t])];
        rec.extend(ds.x().row(t).iter().map(|&v| fmt_float(v)));
        cw.write_record(&rec)?;
    }
    cw.flush()?;
    Ok(())
}

pub fn write_multinomial<W: Write, M: Serialize + ?Sized>(mut w: W, md: &MultiDataset, meta: Option<&M>) -> Result<()> {
    if let Some(meta) = meta {
        write_meta_comment(&mut w, meta)?;
    }
    let mut cw = csv::Writer::from_writer(w);
    let mut header = vec!["y".to_string()];
    header.extend((1..=md.d()).map(|j| format!("x{j}")));
    cw.write_record(&header)?;
    for (t, label) in md.labels().into_iter().enumerate() {
        let mut rec = vec![label.to_string()];
        rec.extend(md.x().row(t).iter().map(|&v| fmt_float(v)));
        cw.write_record(&rec)?;
    }
    cw.flush()?;
    Ok(())
}

pub fn create(path: impl AsRef<Path>) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed_file() {
        let text = "y,m,x1,x2\n1,1,0.5,2\n0,3,-1,1e-3\n";
        let ds = match ingest(text.as_bytes()).unwrap() {
            Ingested::Binary(ds) => ds,
            _ => panic!(),
        };
        assert_eq!((ds.n(), ds.d()), (2, 2));
        assert_eq!(ds.m()[1], 3.0);
    }

    #[test]
    fn rejects_y_above_m_with_line_number() {
        let text = "y,m,x1\n1,1,0.5\n3,2,1.0\n";
        match ingest(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_rows() {
        for (text, want) in [("y,m,x1\n1,1\n", 2), ("y,m,x1\n1,1,abc\n", 2), ("y,m,x1\n0,1,1\n1,1,NaN\n", 3), ("y,m,x1\n1,1,inf\n", 2)] {
            match ingest(text.as_bytes()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn comments_are_skipped() {
        let text = "# {\"seed\":1}\ny,m,x1\n1,1,0.5\n";
        assert_eq!(ingest(text.as_bytes()).unwrap().shape(), (1, 1, 2));
    }

    #[test]
    fn multinomial_format() {
        let text = "y,x1,x2\n1,0.5,1\n3,1,2\n2,0,0\n";
        match ingest(text.as_bytes()).unwrap() {
            Ingested::Multinomial(md) => {
                assert_eq!((md.n(), md.d(), md.k()), (3, 2, 3));
                assert_eq!(md.labels(), vec![1, 3, 2]);
            }
            _ => panic!(),
        }
        assert!(ingest("y,x1\n0,1\n".as_bytes()).is_err());
        assert!(ingest("y,x1\n1.5,1\n".as_bytes()).is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 123456789.123456789, f64::MIN_POSITIVE, 5e-324] {
            assert_eq!(fmt_float(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
