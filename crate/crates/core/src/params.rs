//! Named, ordered parameter collections and their binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MXVL" | format version: u32 | entry count: u32
//! per entry: name length: u64 | UTF-8 name | rank: u64 | dims: u64 * rank | f64 * prod(dims)
//! ```
//!
//! Tensors are written as rank 2. Rank 0 and rank 1 entries are accepted on
//! load and become `1×1` and `1×n` matrices.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MXVL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
    version: u64,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.0 == b.0 && a.1 == b.1)
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces the value of an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                format!("parameter `{name}`"),
                format!("{:?}", slot.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        *slot = value;
        self.version += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.values()
    }

    /// Number of update steps applied since construction or load.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.rows(), t.cols()))
    }

    /// Applies `f` to every entry, keeping names and order.
    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                let out = f(k, v);
                assert_eq!(out.shape(), v.shape(), "map changed shape of `{k}`");
                (k.clone(), out)
            })
            .collect();
        Self {
            entries,
            version: self.version,
        }
    }

    /// Combines two structurally identical sets entry by entry.
    pub fn zip_map(&self, other: &Self, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Result<Self> {
        self.check_same_layout(other)?;
        Ok(self.map(|k, a| f(a, &other.entries[k])))
    }

    /// `self + k * other`, bumping the version tag.
    pub fn add_scaled(&self, other: &Self, k: f64) -> Result<Self> {
        let mut out = self.zip_map(other, |a, b| a.add_scaled(b, k))?;
        out.version = self.version + 1;
        Ok(out)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|_, t| t.map(|v| v * k))
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self
            .entries
            .iter()
            .map(|(k, a)| {
                a.data()
                    .iter()
                    .zip(other.entries[k].data())
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            })
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Flattened values in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ParamSet::flatten`] using `self` as the layout template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(
                "unflatten",
                self.num_scalars(),
                flat.len(),
            ));
        }
        let mut offset = 0;
        Ok(self.map(|_, t| {
            let n = t.len();
            let out = Tensor::from_vec(t.rows(), t.cols(), flat[offset..offset + n].to_vec());
            offset += n;
            out
        }))
    }

    fn check_same_layout(&self, other: &Self) -> Result<()> {
        let same = self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(Error::shape(
                "parameter set layout",
                self.layout_string(),
                other.layout_string(),
            ))
        }
    }

    fn layout_string(&self) -> String {
        self.entries
            .iter()
            .map(|(k, t)| format!("{k}{:?}", t.shape()))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u64.to_le_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u64()?;
            let (rows, cols) = match rank {
                0 => (1, 1),
                1 => (1, r.u64()? as usize),
                2 => (r.u64()? as usize, r.u64()? as usize),
                _ => return Err(Error::Format(format!("`{name}` has unsupported rank {rank}"))),
            };
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("`{name}` dims overflow")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            set.insert(name, Tensor::from_vec(rows, cols, data))
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
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
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
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
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("enc.w", Tensor::from_vec(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-300, -0.0]))
            .unwrap();
        p.insert("enc.b", Tensor::from_vec(1, 3, vec![0.5, f64::MIN_POSITIVE, 7.0]))
            .unwrap();
        p
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"MXVL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 5);
        assert_eq!(&bytes[20..25], b"enc.w");
    }

    #[test]
    fn rejects_duplicates_and_shape_changes() {
        let mut p = sample();
        assert!(p.insert("enc.w", Tensor::zeros(1, 1)).is_err());
        assert!(p.set("enc.w", Tensor::zeros(3, 2)).is_err());
        assert!(p.set("missing", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn truncated_and_trailing_input_fail() {
        let bytes = sample().to_bytes();
        assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ParamSet::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(ParamSet::from_bytes(&bad).is_err());
    }

    #[test]
    fn accepts_rank_one_entries() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MXVL");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.push(b'v');
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&1.5f64.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f64).to_le_bytes());
        let p = ParamSet::from_bytes(&bytes).unwrap();
        assert_eq!(p.get("v").unwrap().shape(), [1, 2]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.mxvl");
        let p = sample();
        p.save(&path).unwrap();
        let q = ParamSet::load(&path).unwrap();
        assert_eq!(p.to_bytes(), q.to_bytes());
        assert_eq!(p.hash_hex(), q.hash_hex());
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exactly(
            shapes in prop::collection::vec((0usize..4, 0usize..4), 0..5),
            seed in any::<u64>(),
        ) {
            let mut p = ParamSet::new();
            let mut state = seed;
            for (i, (r, c)) in shapes.into_iter().enumerate() {
                let data = (0..r * c)
                    .map(|_| {
                        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        f64::from_bits(state >> 2)
                    })
                    .collect();
                p.insert(format!("p{i}.ü"), Tensor::from_vec(r, c, data)).unwrap();
            }
            let bytes = p.to_bytes();
            let q = ParamSet::from_bytes(&bytes).unwrap();
            prop_assert_eq!(bytes, q.to_bytes());
        }
    }
}
