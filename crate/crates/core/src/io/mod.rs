//! Data files, model persistence, diagnostics and run configuration.

mod config;
mod diag;
mod model;

pub use config::{DataSection, ModelSection, NetSection, OutputFormat, OutputSection, RunConfig};
pub use diag::{dump_qf0, dump_warping, write_qf0_csv, write_warping_csv, WarpRow};
pub use model::{load_model, model_from_json, model_to_json, save_model, FORMAT_VERSION};

use std::io::Write;
use std::path::Path;

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::models::Standardization;

/// Which CSV column holds the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Column {
    Name(String),
    /// Zero-based position.
    Index(usize),
    Last,
}

impl Column {
    /// A header name, or a zero-based index when `s` is a number and there is no header.
    pub fn parse(s: &str, header: bool) -> Column {
        match s.parse::<usize>() {
            Ok(i) if !header => Column::Index(i),
            _ => Column::Name(s.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Mat,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Rows `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
        }
    }

    /// Target mean and standard deviation of these rows.
    pub fn target_stats(&self) -> Standardization {
        Standardization::fit(&self.y)
    }
}

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

/// Header and numeric rows of a CSV file. Cells must parse as `f64`;
/// offending rows are reported by line number.
pub fn read_table(path: &Path, header: bool) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(header).from_reader(file);
    let names: Vec<String> = if header {
        rdr.headers().map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?.iter().map(|s| s.trim().to_string()).collect()
    } else {
        vec![]
    };
    let mut rows = Vec::new();
    let mut bad: Vec<u64> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Validation(format!("{}: malformed row at line {line}: {e}", path.display()))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parsed: Option<Vec<f64>> =
            rec.iter().map(|c| c.trim().parse::<f64>().ok().filter(|v| v.is_finite())).collect();
        match parsed {
            Some(r) => rows.push(r),
            None => bad.push(line),
        }
    }
    if !bad.is_empty() {
        let shown: Vec<String> = bad.iter().take(20).map(|l| l.to_string()).collect();
        let more = if bad.len() > 20 { format!(" and {} more", bad.len() - 20) } else { String::new() };
        return Err(Error::Validation(format!(
            "{}: unparseable or non-finite cells on line(s) {}{more}",
            path.display(),
            shown.join(", ")
        )));
    }
    Ok((names, rows))
}

/// Loads a numeric CSV; every column except `target` becomes a feature.
pub fn load_csv(path: &Path, target: &Column, header: bool) -> Result<Dataset> {
    let (names, rows) = read_table(path, header)?;
    if rows.is_empty() {
        return Err(Error::Schema(format!("{}: no data rows", path.display())));
    }
    let width = rows[0].len();
    if width < 2 {
        return Err(Error::Schema(format!("{}: need at least one feature and a target column", path.display())));
    }
    let t = match target {
        Column::Last => width - 1,
        Column::Index(i) if *i < width => *i,
        Column::Index(i) => return Err(Error::Schema(format!("{}: no column {i} in {width} columns", path.display()))),
        Column::Name(n) => names
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| Error::Schema(format!("{}: no target column '{n}'", path.display())))?,
    };
    let names = if names.is_empty() { (0..width).map(|i| format!("c{i}")).collect() } else { names };
    let feats: Vec<usize> = (0..width).filter(|&j| j != t).collect();
    let x = Mat::from_fn(rows.len(), feats.len(), |i, j| rows[i][feats[j]]);
    let y = rows.iter().map(|r| r[t]).collect();
    Ok(Dataset { x, y, feature_names: feats.iter().map(|&j| names[j].clone()).collect(), target_name: names[t].clone() })
}

/// CSV text with a header; values use the shortest decimal form that
/// parses back to the same `f64`.
pub fn table_csv(header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut header = data.feature_names.clone();
    header.push(data.target_name.clone());
    let rows = (0..data.len()).map(|i| {
        let mut r: Vec<f64> = data.x.row(i).iter().copied().collect();
        r.push(data.y[i]);
        r
    });
    write_atomic(path, &table_csv(&header, rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn small_file_with_named_target() {
        let f = tmp_file("x,y\n0,1\n1,2\n2,3\n");
        let d = load_csv(f.path(), &Column::Name("y".into()), true).unwrap();
        assert_eq!((d.len(), d.x.ncols()), (3, 1));
        assert_eq!(d.y, vec![1.0, 2.0, 3.0]);
        assert_eq!(d.feature_names, vec!["x"]);
    }

    #[test]
    fn target_can_sit_anywhere() {
        let f = tmp_file("5,0.5,7\n6,1.5,8\n");
        let d = load_csv(f.path(), &Column::Index(1), false).unwrap();
        assert_eq!(d.y, vec![0.5, 1.5]);
        assert_eq!(d.x.row(1).iter().copied().collect::<Vec<_>>(), vec![6.0, 8.0]);
    }

    #[test]
    fn nan_cells_are_rejected_with_line_numbers() {
        let f = tmp_file("x,y\n0,1\n1,NaN\n2,3\nfoo,4\n");
        match load_csv(f.path(), &Column::Last, true) {
            Err(Error::Validation(m)) => assert!(m.contains("3, 5"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_target_and_empty_files_are_schema_errors() {
        let f = tmp_file("x,y\n0,1\n");
        assert!(matches!(load_csv(f.path(), &Column::Name("z".into()), true), Err(Error::Schema(_))));
        let e = tmp_file("");
        assert!(matches!(load_csv(e.path(), &Column::Last, true), Err(Error::Schema(_))));
        let h = tmp_file("x,y\n");
        assert!(matches!(load_csv(h.path(), &Column::Last, true), Err(Error::Schema(_))));
    }

    #[test]
    fn full_precision_round_trip() {
        let vals = [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 12345.678901234567];
        let d = Dataset {
            x: Mat::from_fn(vals.len(), 1, |i, _| vals[i] * 7.0),
            y: vals.to_vec(),
            feature_names: vec!["a".into()],
            target_name: "t".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_csv(&p, &d).unwrap();
        let back = load_csv(&p, &Column::Name("t".into()), true).unwrap();
        assert_eq!(back, d);
    }
}
