//! Binary checkpoints. Layout, all integers little-endian:
//!
//! ```text
//! "ELCK"  u32 version  u64 step
//! u32 len, config text (UTF-8)
//! u32 count, then per label: u32 len, UTF-8
//! u32 count, then per tensor: u32 len, name; u32 ndim; u32 dims[ndim];
//!                              f32 values[prod(dims)]
//! ```
//!
//! Parameters are stored as f32. Loading converts back to f64, so a
//! save/load/save cycle is byte-identical.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"ELCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Echo of the run configuration.
    pub config: String,
    /// Task head labels; empty for pre-training checkpoints.
    pub labels: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

/// Rounds every parameter to the nearest f32 so the in-memory model equals
/// its checkpoint.
pub fn round_to_f32(store: &mut ParamStore) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = f64::from(*v as f32);
        }
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, step: u64, config: String, labels: Vec<String>) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.map(|v| f64::from(v as f32))))
            .collect();
        Checkpoint {
            step,
            config,
            labels,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config);
        put_u32(&mut out, self.labels.len());
        for l in &self.labels {
            put_str(&mut out, l);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config = r.string()?;
        let n_labels = r.u32()? as usize;
        let labels = (0..n_labels).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint {
            step,
            config,
            labels,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies tensors into the same-named parameters of `store`. Parameters
    /// for which `required` holds must be present; tensors the store lacks
    /// are ignored. Nothing is written unless every check passes. Returns
    /// the number of parameters loaded.
    pub fn apply(&self, store: &mut ParamStore, required: impl Fn(&str) -> bool) -> Result<usize> {
        let by_name: HashMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut plan = Vec::new();
        for (id, p) in store.iter() {
            match by_name.get(p.name.as_str()) {
                Some(t) if t.shape() == p.value.shape() => plan.push((id, *t)),
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "{}: checkpoint shape {:?}, model shape {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None if required(&p.name) => {
                    return Err(Error::Checkpoint(format!("checkpoint lacks parameter {}", p.name)))
                }
                None => {}
            }
        }
        let loaded = plan.len();
        for (id, t) in plan {
            store.get_mut(id).value = t.clone();
        }
        Ok(loaded)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} of {}", self.at, self.bytes.len())))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{normal_tensor, RngStream};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = RngStream::new(1, "ck", 0);
        s.add("a", normal_tensor(&[3, 4], 1.0, &mut rng), true).unwrap();
        s.add("b", normal_tensor(&[1, 5], 1.0, &mut rng), false).unwrap();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = Checkpoint::from_store(&store(), 42, "d = 4\n".into(), vec!["O".into(), "B-K".into()]);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let mut s = store();
        back.apply(&mut s, |_| true).unwrap();
        assert_eq!(Checkpoint::from_store(&s, 42, ck.config.clone(), ck.labels.clone()).to_bytes(), bytes);
    }

    #[test]
    fn truncated_or_foreign_files_fail_cleanly() {
        let bytes = Checkpoint::from_store(&store(), 1, String::new(), vec![]).to_bytes();
        for cut in [0, 3, 8, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "{cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn apply_checks_before_writing() {
        let ck = Checkpoint::from_store(&store(), 0, String::new(), vec![]);
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[3, 4]), true).unwrap();
        other.add("c", Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(ck.apply(&mut other, |_| true).is_err());
        assert_eq!(other.value(other.id("a").unwrap()).sum(), 0.0);
        assert_eq!(ck.apply(&mut other, |n| n == "a").unwrap(), 1);
        assert_ne!(other.value(other.id("a").unwrap()).sum(), 0.0);

        let mut wrong = ParamStore::new();
        wrong.add("a", Tensor::zeros(&[4, 3]), true).unwrap();
        assert!(ck.apply(&mut wrong, |_| false).is_err());
    }

    #[test]
    fn round_to_f32_is_idempotent() {
        let mut s = store();
        round_to_f32(&mut s);
        let once: Vec<Tensor> = s.iter().map(|(_, p)| p.value.clone()).collect();
        round_to_f32(&mut s);
        assert!(s.iter().zip(&once).all(|((_, p), t)| p.value == *t));
    }
}
