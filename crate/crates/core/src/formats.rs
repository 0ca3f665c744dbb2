//! On-disk formats: binary matrices, CSV label files, head parameter files
//! and step-wise trace reports (JSON document plus a flat CSV projection).
//!
//! All binary data is little-endian IEEE-754 single precision. Values are
//! rounded to nearest-even on write and widened to `f64` on read.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{Activation, ClassifierHead, Layer};
use crate::intervention::Mode;
use crate::linalg::{AccumulatedBasis, RepresentationMatrix};
use crate::probe::LabelVector;
use crate::synth::Feature;

pub const MATRIX_MAGIC: &[u8; 4] = b"IPRB";
pub const MATRIX_VERSION: u32 = 1;
const MATRIX_HEADER_LEN: usize = 24;

pub const HEAD_MAGIC: &str = "IPRB-HEAD";
pub const HEAD_VERSION: u32 = 1;

/// Column order of the CSV projection of a trace report.
pub const REPORT_CSV_HEADER: &str =
    "experiment_id,model_id,feature,mode,step,k,probe_accuracy,majority_baseline,downstream_accuracy,seed";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(what: &'static str, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        what,
        offset: offset as u64,
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

fn encode_rows<'a>(rows: usize, cols: usize, values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode_rows(what: &'static str, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 4 || &bytes[..4] != MATRIX_MAGIC {
        return Err(parse_err(what, 0, "bad magic, expected \"IPRB\""));
    }
    if bytes.len() < MATRIX_HEADER_LEN {
        return Err(parse_err(what, bytes.len(), "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != MATRIX_VERSION {
        return Err(parse_err(what, 4, format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(MATRIX_HEADER_LEN as u64))
        .ok_or_else(|| parse_err(what, 8, "dimensions overflow"))?;
    if (bytes.len() as u64) < expected {
        return Err(parse_err(
            what,
            bytes.len(),
            format!("truncated payload, expected {expected} bytes"),
        ));
    }
    if (bytes.len() as u64) > expected {
        return Err(parse_err(what, expected as usize, "trailing bytes after payload"));
    }
    let payload = &bytes[MATRIX_HEADER_LEN..];
    let mut values = Vec::with_capacity(payload.len() / 4);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(parse_err(what, MATRIX_HEADER_LEN + 4 * i, "non-finite value"));
        }
        values.push(v as f64);
    }
    Ok((rows as usize, cols as usize, values))
}

pub fn encode_matrix(x: &RepresentationMatrix) -> Vec<u8> {
    let view = x.view();
    encode_rows(x.rows(), x.cols(), view.iter())
}

pub fn decode_matrix(bytes: &[u8]) -> Result<RepresentationMatrix> {
    let (rows, cols, values) = decode_rows("matrix file", bytes)?;
    if rows == 0 || cols == 0 {
        return Err(parse_err("matrix file", 8, "matrix must have positive dimensions"));
    }
    RepresentationMatrix::from_shape_vec(rows, cols, values)
}

pub fn write_matrix(path: impl AsRef<Path>, x: &RepresentationMatrix) -> Result<()> {
    write_bytes(path.as_ref(), &encode_matrix(x))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<RepresentationMatrix> {
    decode_matrix(&read_bytes(path.as_ref())?)
}

/// Basis directions stored as a matrix file (`k × d`, `k` may be zero).
pub fn write_basis(path: impl AsRef<Path>, basis: &AccumulatedBasis) -> Result<()> {
    let dirs = basis.directions();
    write_bytes(path.as_ref(), &encode_rows(basis.len(), basis.dim(), dirs.iter()))
}

/// Reads a basis file and re-orthonormalizes it, grouping directions into
/// steps of the given sizes. Single precision storage loses orthonormality at
/// the 1e-7 level; the re-orthonormalization restores it.
pub fn read_basis(path: impl AsRef<Path>, step_sizes: &[usize]) -> Result<AccumulatedBasis> {
    let (rows, cols, values) = decode_rows("basis file", &read_bytes(path.as_ref())?)?;
    if step_sizes.iter().sum::<usize>() != rows {
        return Err(Error::Schema {
            what: "basis file",
            field: "step_sizes".into(),
            message: format!("step sizes sum to {}, file has {rows} rows", step_sizes.iter().sum::<usize>()),
        });
    }
    let mut groups = Vec::with_capacity(step_sizes.len());
    let mut start = 0;
    for &size in step_sizes {
        let group: Vec<Vec<f64>> = (start..start + size)
            .map(|r| values[r * cols..(r + 1) * cols].to_vec())
            .collect();
        groups.push(group);
        start += size;
    }
    AccumulatedBasis::from_groups(cols, &groups)
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

pub fn write_labels(path: impl AsRef<Path>, feature_name: &str, y: &LabelVector) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("example_id,{feature_name}\n");
    for (i, v) in y.values().iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    write_bytes(path, out.as_bytes())
}

/// Reads a label file, returning the feature name from its header and the
/// labels. The class count comes from the feature name when it is a known
/// feature, otherwise from the largest class id seen.
pub fn read_labels(path: impl AsRef<Path>) -> Result<(String, LabelVector)> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    parse_labels(&bytes)
}

pub fn parse_labels(bytes: &[u8]) -> Result<(String, LabelVector)> {
    const WHAT: &str = "label file";
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(WHAT, 0, e.to_string()))?
        .clone();
    if headers.len() != 2 || &headers[0] != "example_id" || headers[1].is_empty() {
        return Err(parse_err(WHAT, 0, "header must be \"example_id,<feature_name>\""));
    }
    let name = headers[1].to_string();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte() as usize);
            parse_err(WHAT, offset, e.to_string())
        })?;
        let offset = record.position().map_or(0, |p| p.byte() as usize);
        if record.len() != 2 {
            return Err(parse_err(WHAT, offset, "expected 2 fields"));
        }
        let id: usize = record[0]
            .parse()
            .map_err(|_| parse_err(WHAT, offset, format!("bad example id `{}`", &record[0])))?;
        if id != i {
            return Err(parse_err(WHAT, offset, format!("example id {id}, expected {i}")));
        }
        let class: usize = record[1]
            .parse()
            .map_err(|_| parse_err(WHAT, offset, format!("bad class id `{}`", &record[1])))?;
        values.push(class);
    }
    let labels = match name.parse::<Feature>() {
        Ok(feature) => LabelVector::new(values, feature.class_count())?.with_names(feature.class_names())?,
        Err(_) => {
            let classes = values.iter().max().map_or(2, |m| (m + 1).max(2));
            LabelVector::new(values, classes)?
        }
    };
    Ok((name, labels))
}

// ---------------------------------------------------------------------------
// Classifier heads
// ---------------------------------------------------------------------------

/// Text header followed by a binary payload:
///
/// ```text
/// IPRB-HEAD 1
/// layers <L>
/// layer <i> <in_dim> <out_dim> <identity|tanh>   (L lines)
/// payload
/// <per layer: out×in weights row-major, then out biases; f32 LE>
/// ```
pub fn encode_head(head: &ClassifierHead) -> Vec<u8> {
    let mut text = format!("{HEAD_MAGIC} {HEAD_VERSION}\nlayers {}\n", head.layers().len());
    for (i, layer) in head.layers().iter().enumerate() {
        text.push_str(&format!(
            "layer {i} {} {} {}\n",
            layer.in_dim(),
            layer.out_dim(),
            layer.activation.as_str()
        ));
    }
    text.push_str("payload\n");
    let mut out = text.into_bytes();
    for layer in head.layers() {
        for &w in layer.weights.iter().chain(layer.bias.iter()) {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_head(bytes: &[u8]) -> Result<ClassifierHead> {
    const WHAT: &str = "head file";
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| start + p)
            .ok_or_else(|| parse_err(WHAT, start, "unterminated header line"))?;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| parse_err(WHAT, start, "header is not UTF-8"))?
            .to_string();
        *pos = end + 1;
        Ok((start, line))
    };

    let (off, magic) = next_line(&mut pos)?;
    let mut parts = magic.split(' ');
    if parts.next() != Some(HEAD_MAGIC) {
        return Err(parse_err(WHAT, 0, "bad magic, expected \"IPRB-HEAD\""));
    }
    match parts.next().map(str::parse::<u32>) {
        Some(Ok(HEAD_VERSION)) if parts.next().is_none() => {}
        _ => return Err(parse_err(WHAT, off + HEAD_MAGIC.len(), "unsupported version")),
    }

    let (off, count_line) = next_line(&mut pos)?;
    let count: usize = count_line
        .strip_prefix("layers ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(WHAT, off, "expected \"layers <count>\""))?;

    let mut shapes = Vec::with_capacity(count);
    for i in 0..count {
        let (off, line) = next_line(&mut pos)?;
        let fields: Vec<&str> = line.split(' ').collect();
        let parsed = match fields.as_slice() {
            ["layer", idx, in_dim, out_dim, act] => idx
                .parse::<usize>()
                .ok()
                .filter(|&x| x == i)
                .and(in_dim.parse::<usize>().ok())
                .zip(out_dim.parse::<usize>().ok())
                .zip(act.parse::<Activation>().ok()),
            _ => None,
        };
        let ((in_dim, out_dim), act) =
            parsed.ok_or_else(|| parse_err(WHAT, off, format!("bad layer line `{line}`")))?;
        shapes.push((in_dim, out_dim, act));
    }
    let (off, marker) = next_line(&mut pos)?;
    if marker != "payload" {
        return Err(parse_err(WHAT, off, "expected \"payload\""));
    }

    let floats: usize = shapes.iter().map(|(i, o, _)| o * i + o).sum();
    let expected = pos + floats * 4;
    if bytes.len() < expected {
        return Err(parse_err(WHAT, bytes.len(), format!("truncated payload, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(parse_err(WHAT, expected, "trailing bytes after payload"));
    }
    let mut cursor = pos;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(parse_err(WHAT, cursor, "non-finite parameter"));
            }
            out.push(v as f64);
            cursor += 4;
        }
        Ok(out)
    };
    let mut layers = Vec::with_capacity(count);
    for (in_dim, out_dim, activation) in shapes {
        let weights = Array2::from_shape_vec((out_dim, in_dim), take(out_dim * in_dim)?)
            .map_err(|e| Error::input(e.to_string()))?;
        let bias = Array1::from(take(out_dim)?);
        layers.push(Layer {
            weights,
            bias,
            activation,
        });
    }
    ClassifierHead::new(layers)
}

pub fn write_head(path: impl AsRef<Path>, head: &ClassifierHead) -> Result<()> {
    write_bytes(path.as_ref(), &encode_head(head))
}

pub fn read_head(path: impl AsRef<Path>) -> Result<ClassifierHead> {
    decode_head(&read_bytes(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Trace reports
// ---------------------------------------------------------------------------

/// One step of one run. Step `-1` is the unintervened representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub experiment_id: String,
    pub model_id: String,
    pub feature: String,
    pub mode: Mode,
    pub step: i64,
    pub k: usize,
    pub probe_accuracy: Option<f64>,
    pub majority_baseline: f64,
    pub downstream_accuracy: Option<f64>,
    pub seed: u64,
}

/// Step-wise records of one `(mode, seed)` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    /// Representation dimension the run operated on.
    pub dim: usize,
    /// The probe never reached the baseline before the basis filled the space.
    #[serde(default)]
    pub saturated: bool,
    #[serde(default)]
    pub max_iters_hit: bool,
    /// Directions contributed by each step of the probe basis, when the run
    /// used one.
    #[serde(default)]
    pub basis_steps: Vec<usize>,
    pub records: Vec<TraceRecord>,
}

impl TraceReport {
    pub fn validate(&self) -> Result<()> {
        let schema = |field: &str, message: String| Error::Schema {
            what: "trace report",
            field: field.into(),
            message,
        };
        if !self.records.iter().any(|r| r.step == -1) {
            return Err(schema("step", "missing step -1 record".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.step < -1 {
                return Err(schema("step", format!("record {i} has step {}", r.step)));
            }
            for (name, value) in [
                ("probe_accuracy", r.probe_accuracy),
                ("downstream_accuracy", r.downstream_accuracy),
                ("majority_baseline", Some(r.majority_baseline)),
            ] {
                if let Some(v) = value {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(schema(name, format!("record {i} value {v} outside [0, 1]")));
                    }
                }
            }
            if r.k > self.dim {
                return Err(schema("k", format!("record {i} has k {} > dim {}", r.k, self.dim)));
            }
        }
        let sorted = self
            .records
            .windows(2)
            .all(|w| (w[0].mode, w[0].seed, w[0].step) < (w[1].mode, w[1].seed, w[1].step));
        if !sorted {
            return Err(schema("step", "records are not strictly sorted by (mode, seed, step)".into()));
        }
        Ok(())
    }

    pub fn start(&self) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.step == -1)
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

pub fn encode_report(report: &TraceReport) -> Result<Vec<u8>> {
    report.validate()?;
    let mut out = serde_json::to_vec_pretty(report).map_err(|e| Error::Schema {
        what: "trace report",
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    out.push(b'\n');
    Ok(out)
}

pub fn decode_report(bytes: &[u8]) -> Result<TraceReport> {
    let report: TraceReport = serde_json::from_slice(bytes).map_err(|e| Error::Schema {
        what: "trace report",
        field: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    report.validate()?;
    Ok(report)
}

pub fn write_report(path: impl AsRef<Path>, report: &TraceReport) -> Result<()> {
    write_bytes(path.as_ref(), &encode_report(report)?)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<TraceReport> {
    decode_report(&read_bytes(path.as_ref())?)
}

pub fn encode_records_csv(records: &[TraceRecord]) -> Result<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for r in records {
        writer.serialize(r).map_err(|e| csv_schema(&e))?;
    }
    if records.is_empty() {
        return Ok(format!("{REPORT_CSV_HEADER}\n").into_bytes());
    }
    writer
        .into_inner()
        .map_err(|e| Error::Schema {
            what: "trace csv",
            field: "<document>".into(),
            message: e.to_string(),
        })
}

pub fn decode_records_csv(bytes: &[u8]) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = reader.headers().map_err(|e| csv_schema(&e))?;
    let joined: Vec<&str> = header.iter().collect();
    if joined.join(",") != REPORT_CSV_HEADER {
        return Err(Error::Schema {
            what: "trace csv",
            field: "<header>".into(),
            message: format!("expected `{REPORT_CSV_HEADER}`"),
        });
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_schema(&e)))
        .collect()
}

fn csv_schema(e: &csv::Error) -> Error {
    let field = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err
            .field()
            .and_then(|i| REPORT_CSV_HEADER.split(',').nth(i as usize))
            .unwrap_or("<record>")
            .to_string(),
        _ => "<record>".to_string(),
    };
    Error::Schema {
        what: "trace csv",
        field,
        message: e.to_string(),
    }
}

pub fn write_report_csv(path: impl AsRef<Path>, report: &TraceReport) -> Result<()> {
    report.validate()?;
    write_bytes(path.as_ref(), &encode_records_csv(&report.records)?)
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    decode_records_csv(&read_bytes(path.as_ref())?)
}
