//! Feature files and manifests for externally extracted features.
//!
//! A feature file is an ASCII header line `"<rows> <cols> <f32|f64>\n"`
//! followed by `rows·cols` little-endian values in row-major order. A
//! manifest is UTF-8 text with one `path<TAB>transcript` record per line;
//! relative paths are resolved against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::Sample;
use crate::error::{Error, Result};
use crate::model::Vocabulary;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub transcript: String,
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [rows, cols, dtype] = fields[..] else {
        return Err(bad(format!("header {header:?} is not `rows cols dtype`")));
    };
    let rows: usize = rows.parse().map_err(|_| bad(format!("rows {rows:?}")))?;
    let cols: usize = cols.parse().map_err(|_| bad(format!("cols {cols:?}")))?;
    let body = &bytes[nl + 1..];
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unsupported dtype {other:?}"))),
    };
    if body.len() != rows * cols * width {
        return Err(bad(format!("expected {} data bytes, found {}", rows * cols * width, body.len())));
    }
    let data = if width == 4 {
        body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
    } else {
        body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
    };
    Tensor::new(vec![rows, cols], data)
}

/// Writes `[rows, cols]` features in `f64`.
pub fn write_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    let mut out = format!("{} {} f64\n", features.rows(), features.cols()).into_bytes();
    for x in features.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (p, transcript) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}:{}: expected path<TAB>transcript", path.display(), i + 1)))?;
            Ok(ManifestEntry { path: base.join(p), transcript: transcript.to_string() })
        })
        .collect()
}

/// Loads every manifest entry; transcript characters outside `vocab` map to unk.
pub fn load_dataset(entries: &[ManifestEntry], vocab: &Vocabulary) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| Ok(Sample { features: read_features(&e.path)?, labels: vocab.encode(&e.transcript) }))
        .collect()
}
