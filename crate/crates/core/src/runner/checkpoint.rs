use std::path::Path;

use crate::error::{Error, Result};
use crate::families::FamilyKind;

/// `d_lambda=<n> family=<kind>\n` followed by `n` little-endian f64 values.
pub fn encode_checkpoint(family: FamilyKind, lam: &[f64]) -> Vec<u8> {
    let mut out = format!("d_lambda={} family={}\n", lam.len(), family).into_bytes();
    for v in lam {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(FamilyKind, Vec<f64>)> {
    let bad = |msg: String| Error::Schema(format!("checkpoint: {msg}"));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut parts = header.split(' ');
    let (Some(d), Some(f), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(bad(format!("malformed header `{header}`")));
    };
    let d: usize = d
        .strip_prefix("d_lambda=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("malformed d_lambda field `{d}`")))?;
    let family: FamilyKind = f
        .strip_prefix("family=")
        .ok_or_else(|| bad(format!("malformed family field `{f}`")))?
        .parse()
        .map_err(|_| bad(format!("unknown family in `{f}`")))?;
    let body = &bytes[nl + 1..];
    if body.len() != 8 * d {
        return Err(bad(format!("expected {} payload bytes, found {}", 8 * d, body.len())));
    }
    let lam = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((family, lam))
}

pub fn write_checkpoint(path: &Path, family: FamilyKind, lam: &[f64]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(family, lam))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(FamilyKind, Vec<f64>)> {
    decode_checkpoint(&std::fs::read(path)?)
}
