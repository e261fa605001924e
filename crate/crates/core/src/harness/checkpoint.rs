//! Versioned binary container of named f64 tensors.
//!
//! Layout (little-endian): magic `XLDC`, u32 version, u32 tensor count, then
//! per tensor: u32 name length, UTF-8 name, u32 rank, rank × u64 dims, and
//! the f64 payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XLDC";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} for `{name}`")))?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save<M: Parameterized + ?Sized>(model: &M, path: &Path) -> Result<()> {
    write_atomic(path, &encode(&model.named_params()))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Copies checkpoint values into `model`. Names and shapes must match
/// exactly; trainability flags of the model are kept.
pub fn restore<M: Parameterized + ?Sized>(model: &mut M, entries: Vec<(String, Tensor)>) -> Result<()> {
    let mut params = model.named_params_mut();
    if params.len() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} tensors, checkpoint has {}",
            params.len(),
            entries.len()
        )));
    }
    for ((name, p), (ename, e)) in params.iter_mut().zip(&entries) {
        if name != ename {
            return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{ename}`")));
        }
        if p.shape() != e.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?} in the model but {:?} in the checkpoint",
                p.shape(),
                e.shape()
            )));
        }
    }
    for ((_, p), (_, e)) in params.iter_mut().zip(entries) {
        p.data_mut().copy_from_slice(e.data());
    }
    Ok(())
}

pub fn load_into<M: Parameterized + ?Sized>(model: &mut M, path: &Path) -> Result<()> {
    restore(model, read(path)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn rejects_corruption() {
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let bytes = encode(&[("a".into(), &t)]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let mut lin = crate::nn::Linear::new(3, 2, 0.1, &mut rand::rng()).unwrap();
        let entries = decode(&encode(&lin.named_params())).unwrap();
        let mut renamed = entries.clone();
        renamed[0].0 = "other".into();
        assert!(restore(&mut lin, renamed).is_err());
        let mut reshaped = entries.clone();
        reshaped[1].1 = Tensor::zeros(&[3]).unwrap();
        assert!(restore(&mut lin, reshaped).is_err());
        assert!(restore(&mut lin, entries).is_ok());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..3), any::<u64>()), 0..5)
        ) {
            let built: Vec<(String, Tensor)> = tensors
                .iter()
                .enumerate()
                .map(|(i, (shape, bits))| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|j| f64::from_bits(bits.wrapping_add(j as u64 * 0x9e37_79b9))).collect();
                    (format!("t{i}.ü"), Tensor::from_vec(shape, data).unwrap())
                })
                .collect();
            let refs: Vec<(String, &Tensor)> = built.iter().map(|(n, t)| (n.clone(), t)).collect();
            let back = decode(&encode(&refs)).unwrap();
            prop_assert_eq!(back.len(), built.len());
            for ((n1, t1), (n2, t2)) in built.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let a: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
