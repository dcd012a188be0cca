use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Features of one domain, with labels when known.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl DomainDataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::data(format!("dataset '{name}' is empty")));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::data(format!(
                    "dataset '{name}' has {} labels for {} samples",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Self { features, labels, name })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// `max label + 1`, or `None` when unlabeled.
    pub fn label_count(&self) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l.iter().max()).map(|m| m + 1)
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::data(format!("dataset '{}' has no labels", self.name)))
    }
}

/// Reads a feature CSV.
///
/// The header is `label,f0,...,f{d-1}` for labeled files or `f0,...,f{d-1}`
/// otherwise; each following non-empty line is one sample.
pub fn load_features(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::data(format!("{}: empty file", path.display()))),
    };
    let columns: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let labeled = columns.first() == Some(&"label");
    let feature_cols = &columns[usize::from(labeled)..];
    for (j, col) in feature_cols.iter().enumerate() {
        if *col != format!("f{j}") {
            return Err(Error::data(format!(
                "{}:1: expected column 'f{j}', found '{col}'",
                path.display()
            )));
        }
    }
    let d = feature_cols.len();
    if d == 0 {
        return Err(Error::data(format!("{}:1: no feature columns", path.display())));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::data(format!(
                "{}:{line_no}: expected {} cells, found {}",
                path.display(),
                columns.len(),
                cells.len()
            )));
        }
        let mut cells = cells.into_iter();
        if labeled {
            let cell = cells.next().unwrap();
            let label = cell.parse::<usize>().map_err(|_| {
                Error::data(format!("{}:{line_no}: invalid label '{cell}'", path.display()))
            })?;
            labels.push(label);
        }
        for cell in cells {
            let v = cell.parse::<f64>().map_err(|_| {
                Error::data(format!("{}:{line_no}: non-numeric cell '{cell}'", path.display()))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "{}:{line_no}: non-finite cell '{cell}'",
                    path.display()
                )));
            }
            data.push(v);
        }
    }
    let rows = data.len() / d;
    let features = Matrix::from_vec(rows, d, data)?;
    DomainDataset::new(features, labeled.then_some(labels), name)
}

/// Writes a feature CSV with 17 significant digits per value, which
/// round-trips every `f64` exactly.
pub fn write_features(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    let mut header: Vec<String> = Vec::with_capacity(dataset.dim() + 1);
    if dataset.labels.is_some() {
        header.push("label".into());
    }
    header.extend((0..dataset.dim()).map(|j| format!("f{j}")));
    writeln!(w, "{}", header.join(",")).map_err(io)?;

    for (r, row) in dataset.features.iter_rows().enumerate() {
        let mut cells: Vec<String> = Vec::with_capacity(row.len() + 1);
        if let Some(labels) = &dataset.labels {
            cells.push(labels[r].to_string());
        }
        cells.extend(row.iter().map(|v| format!("{v:.16e}")));
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn loads_labeled_and_unlabeled_files() {
        let dir = tempfile::tempdir().unwrap();
        let labeled = dir.path().join("src.csv");
        fs::write(&labeled, "label,f0,f1\n0,1.5,-2\n2,0.25,3e-1\n").unwrap();
        let ds = load_features(&labeled).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, Some(vec![0, 2]));
        assert_eq!(ds.features.row(1), &[0.25, 0.3]);
        assert_eq!(ds.name, "src");

        let unlabeled = dir.path().join("tgt.csv");
        fs::write(&unlabeled, "f0,f1,f2\n1,2,3\n").unwrap();
        let ds = load_features(&unlabeled).unwrap();
        assert!(ds.labels.is_none());
        assert_eq!(ds.dim(), 3);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "label,f0,f1\n0,1,2\n1,2\n").unwrap();
        let err = load_features(&p).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains(":3:")), "{err}");

        fs::write(&p, "f0,f1\n1,2\n1,abc\n").unwrap();
        let err = load_features(&p).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains(":3:") && m.contains("abc")), "{err}");

        fs::write(&p, "f0,f2\n1,2\n").unwrap();
        assert!(matches!(load_features(&p), Err(Error::Data(_))));

        let missing = load_features(dir.path().join("nope.csv")).unwrap_err();
        assert_eq!(missing.category(), "io");
    }

    #[test]
    fn write_then_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        let features = Matrix::from_rows(&[
            [0.1, -1.0 / 3.0, 1e-300],
            [std::f64::consts::PI, 123456789.123456789, -0.0],
        ])
        .unwrap();
        let ds = DomainDataset::new(features, Some(vec![1, 0]), "rt").unwrap();
        write_features(&ds, &p).unwrap();
        let back = load_features(&p).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.features.as_slice().iter().zip(ds.features.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
