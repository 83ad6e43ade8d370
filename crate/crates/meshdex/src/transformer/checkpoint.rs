//! Versioned binary archive of named tensors.
//!
//! Layout, all little-endian:
//!   magic "MDEXTNSR" | version u32 | tensor count u64
//!   per tensor: name_len u32 | name bytes | rank u32 | dims u64 x rank
//!               | element tag u8 (1 = f64) | values row-major
//!
//! Round-trips are bit-exact: f64 values are written and read as raw bits.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MDEXTNSR";
const VERSION: u32 = 1;
const TAG_F64: u8 = 1;

pub fn save_tensors(path: &Path, tensors: &[(String, &Array2<f64>)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(bytes).map_err(io_err)?;
        w.write_all(&2u32.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(tensor.nrows() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(tensor.ncols() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&[TAG_F64]).map_err(io_err)?;
        for row in tensor.rows() {
            for v in row {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::InvalidInput(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    read_exact(&mut r, path, &mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a tensor archive (bad magic)".into()));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(bad(format!("unsupported archive version {version}")));
    }
    let count = read_u64(&mut r, path)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        if name_len > 1 << 20 {
            return Err(bad(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, path, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name not utf-8".into()))?;
        let rank = read_u32(&mut r, path)?;
        if rank != 2 {
            return Err(bad(format!("tensor {name:?} has unsupported rank {rank}")));
        }
        let rows = read_u64(&mut r, path)? as usize;
        let cols = read_u64(&mut r, path)? as usize;
        let mut tag = [0u8; 1];
        read_exact(&mut r, path, &mut tag)?;
        if tag[0] != TAG_F64 {
            return Err(bad(format!("tensor {name:?} has unknown element tag {}", tag[0])));
        }
        let mut values = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            read_exact(&mut r, path, &mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let tensor = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| bad(format!("tensor {name:?}: {e}")))?;
        tensors.push((name, tensor));
    }
    Ok(tensors)
}

fn read_exact(r: &mut impl Read, path: &Path, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, path, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, path, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        assert!(load_tensors(&path).is_err());

        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(load_tensors(&path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn roundtrip_preserves_bits(
            rows in 1usize..6,
            cols in 1usize..6,
            name in "[a-z._]{1,12}",
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let t = Array2::from_shape_fn((rows, cols), |_| {
                // mix magnitudes, exercise subnormals and negatives
                (rng.gen::<f64>() - 0.5) * 10f64.powi(rng.gen_range(-300..300))
            });
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.ckpt");
            save_tensors(&path, &[(name.clone(), &t)]).unwrap();
            let loaded = load_tensors(&path).unwrap();
            prop_assert_eq!(loaded.len(), 1);
            prop_assert_eq!(&loaded[0].0, &name);
            prop_assert_eq!(
                loaded[0].1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
