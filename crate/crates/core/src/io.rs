//! Delimited-text and JSON file formats, plus atomic writes.
//!
//! Matrices: first row `sample_id,<gene ids...>`, first column sample ids.
//! Outcomes: two columns `sample_id,class_label`. Comma or tab separated.
//! Floats are written with Rust's shortest round-trip formatting so reruns
//! produce identical bytes.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bicluster, BiclusterSet, ExpressionMatrix, OutcomeMatrix};

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// reader never sees a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn parse_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), message: message.into() }
}

fn sniff_delimiter(text: &str) -> u8 {
    match text.lines().next() {
        Some(first) if first.contains('\t') => b'\t',
        _ => b',',
    }
}

fn read_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let text = fs::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(&text))
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, format!("line {line}: {e}"))
        })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push(rec);
    }
    Ok(rows)
}

fn to_csv(rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub fn read_expression(path: &Path) -> Result<ExpressionMatrix> {
    let rows = read_records(path)?;
    let Some((header, body)) = rows.split_first() else {
        return Err(parse_error(path, "empty file"));
    };
    let gene_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let g = gene_ids.len();
    let mut sample_ids = Vec::with_capacity(body.len());
    let mut values = Vec::with_capacity(body.len() * g);
    for rec in body {
        if rec.len() != g + 1 {
            return Err(parse_error(
                path,
                format!("line {}: expected {} fields, found {}", line_of(rec), g + 1, rec.len()),
            ));
        }
        sample_ids.push(rec[0].to_string());
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                parse_error(path, format!("line {}, column {}: not a number: '{field}'", line_of(rec), j + 2))
            })?;
            values.push(v);
        }
    }
    let n = sample_ids.len();
    ExpressionMatrix::new(DMatrix::from_row_slice(n, g, &values), sample_ids, gene_ids)
}

/// Writes a labelled matrix; `corner` names the row-id column.
pub fn write_labelled_matrix(
    path: &Path,
    corner: &str,
    row_ids: &[String],
    col_ids: &[String],
    values: &DMatrix<f64>,
) -> Result<()> {
    let header = std::iter::once(corner.to_string()).chain(col_ids.iter().cloned()).collect();
    let body = row_ids.iter().enumerate().map(|(i, id)| {
        std::iter::once(id.clone()).chain(values.row(i).iter().map(|v| v.to_string())).collect()
    });
    atomic_write(path, &to_csv(std::iter::once(header).chain(body))?)
}

pub fn write_expression(path: &Path, x: &ExpressionMatrix) -> Result<()> {
    write_labelled_matrix(path, "sample_id", &x.sample_ids, &x.gene_ids, &x.values)
}

/// Reads `sample_id,class_label` rows and aligns them to `sample_ids`.
/// Labels are sorted; the reference is `reference` if given, else the first.
pub fn read_outcome(path: &Path, sample_ids: &[String], reference: Option<&str>) -> Result<OutcomeMatrix> {
    let rows = read_records(path)?;
    let body = match rows.first() {
        Some(h) if h.get(0) == Some("sample_id") => &rows[1..],
        _ => &rows[..],
    };
    let mut by_sample = HashMap::with_capacity(body.len());
    for rec in body {
        if rec.len() != 2 {
            return Err(parse_error(path, format!("line {}: expected 2 fields, found {}", line_of(rec), rec.len())));
        }
        if by_sample.insert(rec[0].to_string(), rec[1].to_string()).is_some() {
            return Err(Error::DimensionMismatch(format!("sample '{}' appears twice in the outcome file", &rec[0])));
        }
    }
    if by_sample.len() != sample_ids.len() {
        return Err(Error::DimensionMismatch(format!(
            "outcome file has {} samples, expression matrix has {}",
            by_sample.len(),
            sample_ids.len()
        )));
    }
    let labels: Vec<String> = by_sample.values().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let reference_class = match reference {
        Some(r) => labels
            .iter()
            .position(|l| l == r)
            .ok_or_else(|| Error::InvalidConfig(format!("reference class '{r}' does not occur in the outcome file")))?,
        None => 0,
    };
    let classes = sample_ids
        .iter()
        .map(|id| {
            let label = by_sample
                .get(id)
                .ok_or_else(|| Error::DimensionMismatch(format!("sample '{id}' missing from the outcome file")))?;
            Ok(labels.binary_search(label).expect("label collected above"))
        })
        .collect::<Result<Vec<usize>>>()?;
    OutcomeMatrix::from_classes(&classes, labels, reference_class)
}

pub fn write_outcome(path: &Path, y: &OutcomeMatrix, sample_ids: &[String]) -> Result<()> {
    let header = vec!["sample_id".to_string(), "class_label".to_string()];
    let body = y
        .classes()
        .into_iter()
        .zip(sample_ids)
        .map(|(c, id)| vec![id.clone(), y.class_labels[c].clone()]);
    atomic_write(path, &to_csv(std::iter::once(header).chain(body))?)
}

/// Plain delimited table with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let head = header.iter().map(|s| s.to_string()).collect();
    atomic_write(path, &to_csv(std::iter::once(head).chain(rows))?)
}

#[derive(Serialize, Deserialize)]
struct BiclusterFile {
    k_hat: usize,
    biclusters: Vec<Bicluster>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BiclusterInput {
    Wrapped { biclusters: Vec<Bicluster> },
    Bare(Vec<Bicluster>),
}

pub fn write_biclusters(path: &Path, set: &BiclusterSet) -> Result<()> {
    let file = BiclusterFile { k_hat: set.k_hat(), biclusters: set.biclusters.clone() };
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Accepts either `{"k_hat": .., "biclusters": [..]}` or a bare list.
pub fn read_biclusters(path: &Path) -> Result<BiclusterSet> {
    let text = fs::read_to_string(path)?;
    let parsed: BiclusterInput = serde_json::from_str(&text)
        .map_err(|e| parse_error(path, format!("line {}: {e}", e.line())))?;
    let list = match parsed {
        BiclusterInput::Wrapped { biclusters } | BiclusterInput::Bare(biclusters) => biclusters,
    };
    Ok(BiclusterSet::new(list.into_iter().map(|b| Bicluster::new(b.samples, b.genes)).collect()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}
