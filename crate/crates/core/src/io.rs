//! Matrix files, label files, PGM images and run manifests.
//!
//! Matrices are stored either as headerless CSV (one row per line, `,`
//! separated, LF endings) or as RAW64: little-endian `f64` in row-major
//! order with a JSON sidecar `<file>.json` holding `{"rows": R, "cols": C}`.
//! The encoding is chosen by extension: `.csv` is CSV, anything else RAW64.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Csv,
    Raw64,
}

impl Encoding {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Encoding::Csv,
            _ => Encoding::Raw64,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Encoding::Csv => "csv",
            Encoding::Raw64 => "f64",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes `m` with the encoding implied by the path's extension.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    match Encoding::from_path(path) {
        Encoding::Csv => write_bytes(path, csv_string(m).as_bytes()),
        Encoding::Raw64 => {
            let mut bytes = Vec::with_capacity(8 * m.len());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
                }
            }
            write_bytes(path, &bytes)?;
            let layout = Layout {
                rows: m.nrows(),
                cols: m.ncols(),
            };
            let json = serde_json::to_string(&layout)?;
            write_bytes(&sidecar_path(path), json.as_bytes())
        }
    }
}

fn csv_string(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    match Encoding::from_path(path) {
        Encoding::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(path, &text)
        }
        Encoding::Raw64 => {
            let side = sidecar_path(path);
            let layout_text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            let layout: Layout = serde_json::from_str(&layout_text)
                .map_err(|e| Error::format(&side, format!("bad layout sidecar: {e}")))?;
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let expected = layout
                .rows
                .checked_mul(layout.cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::format(&side, "layout overflows"))?;
            if bytes.len() != expected {
                return Err(Error::format(
                    path,
                    format!(
                        "expected {expected} bytes for a {}x{} matrix, found {}",
                        layout.rows,
                        layout.cols,
                        bytes.len()
                    ),
                ));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
                .collect();
            Ok(DMatrix::from_row_slice(layout.rows, layout.cols, &values))
        }
    }
}

fn parse_csv(path: &Path, text: &str) -> Result<DMatrix<f64>> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(path, format!("line {}: cannot parse {field:?}", lineno + 1))
            })?;
            values.push(v);
            count += 1;
        }
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(Error::format(
                    path,
                    format!("line {}: expected {c} fields, found {count}", lineno + 1),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &values))
}

/// One integer label per line.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    write_bytes(path, text.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad label {l:?}", i + 1)))
        })
        .collect()
}

/// Maps abundances to bytes as `round(255 a)` clamped to `[0, 255]`.
pub fn to_gray(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .map(|a| (255.0 * a).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary PGM (`P5`), maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} pixels do not fill a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    write_bytes(path, &bytes)
}

/// Reads a PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::format(path, "not an 8-bit binary PGM"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad PGM dimension {s:?}")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes.get(pos..).unwrap_or_default().to_vec();
    if data.len() != w * h {
        return Err(Error::format(path, "PGM payload size does not match header"));
    }
    Ok((w, h, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub elbo: f64,
    pub sigma2: f64,
}

/// JSON record of one command invocation.
///
/// Holds everything needed to re-run the command (`args` is the verbatim
/// argument list). Wall-clock timings are kept out so that reruns with the
/// same seed give byte-identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<ModelDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args,
            seed: None,
            dims: None,
            config: None,
            trace: Vec::new(),
            stop_reason: None,
            metrics: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Records a metric; non-finite values have no JSON form and are skipped.
    pub fn metric(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.metrics.insert(name.to_string(), value);
        }
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Writes plain text (CSV tables and the like).
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}
