//! `TJM1` dense matrix files and JSON sidecars.
//!
//! Layout: the ASCII magic `TJM1`, row and column counts as little-endian
//! `u32`, then `rows × cols` little-endian `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SvdResult;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"TJM1";

pub fn write_matrix<T: Scalar, W: Write>(m: MatRef<'_, T>, out: W) -> Result<()> {
    let rows = u32::try_from(m.nrows()).map_err(|_| Error::Format("too many rows".into()))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| Error::Format("too many columns".into()))?;
    let mut w = BufWriter::new(out);
    w.write_all(MAGIC)?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_f64_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<T: Scalar, R: Read>(input: R) -> Result<Mat<T>> {
    let mut r = BufReader::new(input);
    let mut header = [0u8; 12];
    r.read_exact(&mut header).map_err(|_| Error::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected TJM1".into()));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let mut raw = vec![0u8; rows * cols * 8];
    r.read_exact(&mut raw).map_err(|_| Error::Format(format!("truncated body for {rows}x{cols} matrix")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after matrix body".into()));
    }
    Ok(Mat::from_fn(rows, cols, |i, j| {
        let at = (i * cols + j) * 8;
        T::lit(f64::from_le_bytes(raw[at..at + 8].try_into().expect("8 bytes")))
    }))
}

pub fn save_matrix<T: Scalar>(m: MatRef<'_, T>, path: impl AsRef<Path>) -> Result<()> {
    write_matrix(m, File::create(path)?)
}

pub fn load_matrix<T: Scalar>(path: impl AsRef<Path>) -> Result<Mat<T>> {
    read_matrix(File::open(path)?)
}

pub fn save_json<S: Serialize>(value: &S, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<S: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<S> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Paths of the three matrices an SVD is stored in.
pub fn svd_paths(dir: impl AsRef<Path>, stem: &str) -> [PathBuf; 3] {
    let d = dir.as_ref();
    [d.join(format!("{stem}_U.tjm")), d.join(format!("{stem}_S.tjm")), d.join(format!("{stem}_V.tjm"))]
}

/// Writes `U`, `S` (as 1×r) and `V`.
pub fn save_svd<T: Scalar>(s: &SvdResult<T>, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let [pu, ps, pv] = svd_paths(dir, stem);
    save_matrix(s.u.as_ref(), pu)?;
    save_matrix(MatRef::from_row_major_slice(&s.s, 1, s.s.len()), ps)?;
    save_matrix(s.v.as_ref(), pv)
}

pub fn load_svd<T: Scalar>(dir: impl AsRef<Path>, stem: &str) -> Result<SvdResult<T>> {
    let [pu, ps, pv] = svd_paths(dir, stem);
    let u = load_matrix::<T>(pu)?;
    let s = load_matrix::<T>(ps)?;
    let v = load_matrix::<T>(pv)?;
    if s.nrows() != 1 || u.ncols() != s.ncols() || v.ncols() != s.ncols() {
        return Err(Error::Format("inconsistent SVD factor shapes".into()));
    }
    Ok(SvdResult { u, s: (0..s.ncols()).map(|j| s[(0, j)]).collect(), v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let m = Mat::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let mut buf = Vec::new();
        write_matrix(m.as_ref(), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"TJM1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(buf.len(), 12 + 6 * 8);
        // Row-major: second stored value is (0, 1).
        assert_eq!(&buf[20..28], &1.0f64.to_le_bytes());
        assert_eq!(&buf[12 + 3 * 8..12 + 4 * 8], &3.0f64.to_le_bytes());
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(read_matrix::<f64, _>(&b"TJM2\0\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_matrix(Mat::<f64>::identity(2, 2).as_ref(), &mut buf).unwrap();
        assert!(read_matrix::<f64, _>(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_matrix::<f64, _>(buf.as_slice()).is_err());
    }

    #[test]
    fn svd_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Mat::from_fn(5, 3, |i, j| ((i + 1) * (j + 2)) as f64 + if i == j { 1.0 } else { 0.0 });
        let s = crate::linalg::svd(a.as_ref()).unwrap();
        save_svd(&s, dir.path(), "x").unwrap();
        assert_eq!(load_svd::<f64>(dir.path(), "x").unwrap(), s);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let m = Mat::from_fn(rows, cols, |i, j| f64::from_bits(seed.wrapping_mul(31).wrapping_add((i * 7 + j) as u64) >> 2));
            let mut buf = Vec::new();
            write_matrix(m.as_ref(), &mut buf).unwrap();
            let back = read_matrix::<f64, _>(buf.as_slice()).unwrap();
            prop_assert_eq!(back.nrows(), rows);
            for i in 0..rows { for j in 0..cols { prop_assert_eq!(back[(i, j)].to_bits(), m[(i, j)].to_bits()); } }
        }
    }
}
