//! Binary checkpoint: `DSRF0001\n`, a `d=<int> layers=<w1,...>\n` header,
//! then for each layer its row-major `out x in` weight followed by its bias,
//! all as little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::mlp::{Layer, ModelParams, ModelSpec};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"DSRF0001\n";

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 64 + 8 * params.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(params.spec().describe().as_bytes());
    buf.push(b'\n');
    for b in params.buffers() {
        for v in b {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn parse_header(path: &Path, line: &str) -> Result<ModelSpec> {
    let bad = |detail: &str| Error::BadHeader { path: path.to_path_buf(), detail: detail.to_string() };
    let mut d = None;
    let mut widths = None;
    for tok in line.split_whitespace() {
        match tok.split_once('=') {
            Some(("d", v)) => d = Some(v.parse::<usize>().map_err(|_| bad("d is not an integer"))?),
            Some(("layers", v)) => {
                widths = Some(
                    v.split(',')
                        .map(|w| w.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("layers must be comma-separated integers"))?,
                )
            }
            _ => return Err(bad(&format!("unexpected token {tok:?}"))),
        }
    }
    let spec = ModelSpec::new(d.ok_or_else(|| bad("missing d"))?, widths.ok_or_else(|| bad("missing layers"))?)
        .map_err(|e| bad(&e.to_string()))?;
    Ok(spec)
}

/// Loads a checkpoint; when `expected` is given the stored shape must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelSpec>) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "DSRF0001".into() });
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Truncated { path: path.to_path_buf(), detail: "header line not terminated".into() })?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|_| Error::BadHeader { path: path.to_path_buf(), detail: "header is not UTF-8".into() })?;
    let spec = parse_header(path, header)?;
    if let Some(exp) = expected {
        if exp != &spec {
            return Err(Error::ShapeMismatch {
                path: path.to_path_buf(),
                found: spec.describe(),
                expected: exp.describe(),
            });
        }
    }
    let body = &rest[nl + 1..];
    let need = 8 * spec.param_count();
    if body.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} of {need} payload bytes", body.len()),
        });
    }
    if body.len() > need {
        return Err(Error::ShapeMismatch {
            path: path.to_path_buf(),
            found: format!("{} payload bytes", body.len()),
            expected: format!("{need} payload bytes for {}", spec.describe()),
        });
    }
    let mut vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(i, o)| {
            let weight = Array2::from_shape_vec((o, i), vals.by_ref().take(o * i).collect()).unwrap();
            let bias = Array1::from_vec(vals.by_ref().take(o).collect());
            Layer { weight, bias }
        })
        .collect();
    ModelParams::from_layers(spec, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::RandomSource;

    fn net() -> ModelParams {
        let spec = ModelSpec::new(2, vec![8, 5]).unwrap();
        ModelParams::init(&spec, &mut RandomSource::new(3, 0))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = net();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path, Some(p.spec())).unwrap();
        assert_eq!(p, q);
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"DSRF0001\nd=2 layers=8,5\n"));
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&net(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&net(), &path).unwrap();
        let other = ModelSpec::new(2, vec![16, 16]).unwrap();
        let err = load_checkpoint(&path, Some(&other)).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        assert!(msg.contains("layers=8,5") && msg.contains("layers=16,16"), "{msg}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&net(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Truncated { .. })));
    }
}
