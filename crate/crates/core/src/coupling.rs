//! Coupling datasets `{(x0, x1)}` and their binary file format.
//!
//! File layout: `DSRFPAIR\n`, a `d=<int> n=<int>\n` line, then `n` records of
//! `2d` little-endian f64 (x0 then x1). Provenance goes to a JSON sidecar
//! (`<file>.meta.json`) so the binary layout stays fixed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const COUPLING_MAGIC: &[u8] = b"DSRFPAIR\n";

/// Where a coupling came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Reflow round `k`; 0 is the independent coupling.
    pub round: usize,
    /// Integrator tag (`independent` for round 0).
    pub generator: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub provenance: Provenance,
}

impl Coupling {
    pub fn new(x0: Array2<f64>, x1: Array2<f64>, provenance: Provenance) -> Result<Self> {
        if x0.dim() != x1.dim() {
            return Err(Error::InvalidInput(format!("x0 is {:?} but x1 is {:?}", x0.dim(), x1.dim())));
        }
        if x0.nrows() == 0 || x0.ncols() == 0 {
            return Err(Error::InvalidInput("coupling must be nonempty".into()));
        }
        if x0.iter().chain(x1.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coupling endpoints".into()));
        }
        Ok(Self { x0, x1, provenance })
    }

    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x0.ncols()
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn save_coupling(c: &Coupling, path: &Path) -> Result<()> {
    let (n, d) = c.x0.dim();
    let mut buf = Vec::with_capacity(32 + 16 * n * d);
    buf.extend_from_slice(COUPLING_MAGIC);
    buf.extend_from_slice(format!("d={d} n={n}\n").as_bytes());
    for i in 0..n {
        for v in c.x0.row(i).iter().chain(c.x1.row(i).iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    let meta = serde_json::to_string_pretty(&c.provenance).expect("provenance serialises");
    fs::write(sidecar(path), meta)?;
    Ok(())
}

pub fn load_coupling(path: &Path) -> Result<Coupling> {
    let bytes = fs::read(path)?;
    let p = path.to_path_buf();
    if !bytes.starts_with(COUPLING_MAGIC) {
        return Err(Error::BadMagic { path: p, expected: "DSRFPAIR".into() });
    }
    let rest = &bytes[COUPLING_MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Truncated { path: p.clone(), detail: "header line not terminated".into() })?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|_| Error::BadHeader { path: p.clone(), detail: "header is not UTF-8".into() })?;
    let (mut d, mut n) = (None, None);
    for tok in header.split_whitespace() {
        match tok.split_once('=') {
            Some(("d", v)) => d = v.parse::<usize>().ok(),
            Some(("n", v)) => n = v.parse::<usize>().ok(),
            _ => return Err(Error::BadHeader { path: p, detail: format!("unexpected token {tok:?}") }),
        }
    }
    let (d, n) = match (d, n) {
        (Some(d), Some(n)) if d > 0 && n > 0 => (d, n),
        _ => return Err(Error::BadHeader { path: p, detail: "need positive d=<int> n=<int>".into() }),
    };
    let body = &rest[nl + 1..];
    let need = 16 * n * d;
    if body.len() != need {
        return Err(Error::Truncated { path: p, detail: format!("{} payload bytes, expected {need}", body.len()) });
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let x0 = Array2::from_shape_fn((n, d), |(i, k)| vals[i * 2 * d + k]);
    let x1 = Array2::from_shape_fn((n, d), |(i, k)| vals[i * 2 * d + d + k]);
    let provenance = match fs::read_to_string(sidecar(path)) {
        Ok(s) => {
            serde_json::from_str(&s).map_err(|e| Error::BadHeader { path: sidecar(path), detail: e.to_string() })?
        }
        Err(_) => Provenance { round: 0, generator: "unknown".into(), seed: 0 },
    };
    Coupling::new(x0, x1, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pairs");
        let c = Coupling::new(
            array![[0.1, -2.0], [3.5, 1e-300]],
            array![[1.0, 2.0], [-0.25, 7.0]],
            Provenance { round: 2, generator: "ds_project_2d".into(), seed: 9 },
        )
        .unwrap();
        save_coupling(&c, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"DSRFPAIR\nd=2 n=2\n"));
        assert_eq!(bytes.len(), 17 + 2 * 4 * 8);
        assert_eq!(load_coupling(&path).unwrap(), c);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pairs");
        fs::write(&path, b"DSRFPAIX\nd=2 n=1\n").unwrap();
        assert!(matches!(load_coupling(&path), Err(Error::BadMagic { .. })));
        fs::write(&path, b"DSRFPAIR\nd=2 n=1\n\0\0\0").unwrap();
        assert!(matches!(load_coupling(&path), Err(Error::Truncated { .. })));
        assert!(Coupling::new(
            Array2::zeros((0, 2)),
            Array2::zeros((0, 2)),
            Provenance { round: 0, generator: "x".into(), seed: 0 }
        )
        .is_err());
    }
}
