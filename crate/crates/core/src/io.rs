//! CSV formats.
//!
//! * dataset / embeddings: `id,label,f0,...,f{D-1}`
//! * label table: `label,e0,...,e{d-1}`
//! * history: `epoch,mean_loss,recall_at_1,intra_inter_gap`
//!
//! Floats are written with 17 significant digits so that reading a file back
//! reproduces the exact bits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::regularizers::LabelEmbeddingTable;
use crate::trainer::EpochRecord;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => parse_err(path, line, format!("{kind:?}")),
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn check_header(path: &Path, header: &csv::StringRecord, lead: &[&str], prefix: &str) -> Result<usize> {
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() <= lead.len() || cols[..lead.len()] != *lead {
        return Err(parse_err(path, 1, format!("header must start with {}", lead.join(","))));
    }
    for (k, name) in cols[lead.len()..].iter().enumerate() {
        if *name != format!("{prefix}{k}") {
            return Err(parse_err(
                path,
                1,
                format!("expected column {prefix}{k}, found '{name}'"),
            ));
        }
    }
    Ok(cols.len() - lead.len())
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {what} '{field}'")))
}

/// Reads `id,label,f0..` rows. Row order is preserved; ids are checked to be
/// integers but otherwise unused.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = open_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let dim = check_header(path, &header, &["id", "label"], "f")?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim + 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", dim + 2, rec.len()),
            ));
        }
        parse_field::<u64>(path, line, &rec[0], "id")?;
        labels.push(parse_field::<usize>(path, line, &rec[1], "label")?);
        for field in rec.iter().skip(2) {
            let v: f64 = parse_field(path, line, field, "value")?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value '{field}'")));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    Dataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels)
}

fn write_rows(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn numbered(prefix: &str, n: usize) -> String {
    (0..n).map(|k| format!("{prefix}{k}")).collect::<Vec<_>>().join(",")
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(",")
}

/// Writes `id,label,f0..` rows; ids are row indices.
pub fn write_matrix_with_labels(path: &Path, m: &Matrix, labels: &[usize]) -> Result<()> {
    if m.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: m.rows(),
            found: labels.len(),
        });
    }
    let header = format!("id,label,{}", numbered("f", m.cols()));
    write_rows(
        path,
        &header,
        m.iter_rows()
            .zip(labels)
            .enumerate()
            .map(|(i, (row, y))| format!("{i},{y},{}", join_floats(row))),
    )
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    write_matrix_with_labels(path, &d.features, &d.labels)
}

pub fn read_label_table(path: &Path) -> Result<LabelEmbeddingTable> {
    let mut rdr = open_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let dim = check_header(path, &header, &["label"], "e")?;
    let mut vectors = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", dim + 1, rec.len()),
            ));
        }
        let label: usize = parse_field(path, line, &rec[0], "label")?;
        let v = rec
            .iter()
            .skip(1)
            .map(|f| parse_field::<f64>(path, line, f, "value"))
            .collect::<Result<Vec<_>>>()?;
        if vectors.insert(label, v).is_some() {
            return Err(parse_err(path, line, format!("duplicate label {label}")));
        }
    }
    LabelEmbeddingTable::new(vectors, path.display().to_string()).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn write_label_table(path: &Path, table: &LabelEmbeddingTable) -> Result<()> {
    let header = format!("label,{}", numbered("e", table.dim()));
    let rows = table
        .classes()
        .map(|c| Ok(format!("{c},{}", join_floats(table.get(c)?))))
        .collect::<Result<Vec<_>>>()?;
    write_rows(path, &header, rows.into_iter())
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_rows(
        path,
        "epoch,mean_loss,recall_at_1,intra_inter_gap",
        history.iter().map(|h| {
            format!(
                "{},{},{},{}",
                h.epoch,
                fmt_f64(h.mean_loss),
                fmt_f64(h.recall_at_1),
                fmt_f64(h.intra_inter_gap)
            )
        }),
    )
}
