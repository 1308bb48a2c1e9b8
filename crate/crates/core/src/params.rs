//! Named parameter storage and the flat checkpoint archive.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CAMALIGN"
//! version  u8       1
//! count    u32
//! records  count x { name_len u32, name utf-8, rank u32, dims u64 x rank,
//!                    values f64 x prod(dims) }
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAMALIGN";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group; the visual side and the encoder-decoder train with
/// separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Visual,
    EncoderDecoder,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, group });
        id
    }

    /// Uniform init in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(rng.gen_range(-a..=a)))
            .collect();
        let t = Tensor::matrix(fan_in, fan_out, data).expect("extent");
        self.add(name, t, group)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], v: f64, group: ParamGroup) -> ParamId {
        self.add(name, Tensor::full(shape, T::lit(v)), group)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    /// Ids of the parameters in `group`, in registration order.
    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Mutable values of the parameters in `group`, ordered as [`Self::group_ids`].
    pub fn group_values_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .filter(|p| p.group == group)
            .map(|p| &mut p.value)
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    /// Overwrites every parameter of this store from an archive. Names and
    /// shapes must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        self.load_bytes(&bytes)
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let records = read_archive(bytes)?;
        if records.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "archive has {} records, model has {}",
                records.len(),
                self.params.len()
            )));
        }
        for (name, t) in records {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let dst = &mut self.params[id.0].value;
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: archive shape {:?}, model shape {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.cast();
        }
        Ok(())
    }
}

/// Decodes an archive into ordered `(name, tensor)` records.
pub fn read_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw.chunks_exact(8).map(f64::from_le).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::matrix(2, 2, vec![1.0, -2.0, 3.5, 0.25]).unwrap(), ParamGroup::Visual);
        s.add("b.bias", Tensor::row(vec![1e-300, -0.0, 7.0]), ParamGroup::EncoderDecoder);
        s
    }

    #[test]
    fn archive_round_trip() {
        let s = store();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(bytes[8], CHECKPOINT_VERSION);
        let mut t = store();
        for id in t.ids().collect::<Vec<_>>() {
            t.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        t.load_bytes(&bytes).unwrap();
        for id in s.ids() {
            assert_eq!(s.get(id), t.get(id));
        }
    }

    #[test]
    fn archive_rejects_corruption() {
        let bytes = store().to_bytes();
        let mut s = store();
        assert!(s.load_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(s.load_bytes(&bad).is_err());
        let mut other = ParamStore::<f64>::new();
        other.add("a", Tensor::zeros(&[4]), ParamGroup::Visual);
        other.add("b.bias", Tensor::zeros(&[1, 3]), ParamGroup::Visual);
        assert!(other.load_bytes(&bytes).is_err());
    }

    #[test]
    fn f32_store_serializes_as_doubles() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::row(vec![0.5f32, -1.25]), ParamGroup::Visual);
        let recs = read_archive(&s.to_bytes()).unwrap();
        assert_eq!(recs[0].1.data(), &[0.5, -1.25]);
    }
}
