//! Binary checkpoint of named float32 arrays.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "IA3C"  u32 version
//! u32 spec_len  spec_len bytes of ModelSpec JSON
//! u32 count
//! count × { u32 name_len  name  u32 rank  rank × u32 dim  f32 payload }
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::ia3::IA3Adapter;
use crate::model::{Model, ModelSpec};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"IA3C";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, arrays: BTreeMap<String, Tensor<f32>>) -> Self {
        Self { spec, arrays }
    }

    pub fn from_tensors<F: Real>(spec: ModelSpec, arrays: &BTreeMap<String, Tensor<F>>) -> Self {
        Self {
            spec,
            arrays: arrays.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }

    fn cast_arrays<F: Real>(&self) -> BTreeMap<String, Tensor<F>> {
        self.arrays.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }

    /// Reads the arrays back as adapter vectors.
    pub fn to_adapter<F: Real>(&self) -> Result<IA3Adapter<F>> {
        IA3Adapter::from_vectors(&self.spec, self.cast_arrays())
    }

    /// Reads the arrays back as a full set of model weights.
    pub fn to_model<F: Real>(&self) -> Result<Model<F>> {
        Model::from_weights(self.spec.clone(), self.cast_arrays())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let spec = serde_json::to_vec(&self.spec)?;
        put_u32(&mut out, spec.len())?;
        out.extend_from_slice(&spec);
        put_u32(&mut out, self.arrays.len())?;
        for (name, t) in &self.arrays {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic(bytes[..4].to_vec()));
        }
        if bytes.len() >= 8 {
            let v = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
            if v != VERSION {
                return Err(CheckpointError::UnsupportedVersion(v));
            }
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::CrcMismatch {
                stored: 0,
                computed: crc32fast::hash(bytes),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 8 };
        let spec_len = r.u32()? as usize;
        let spec: ModelSpec = serde_json::from_slice(r.take(spec_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("model spec: {e}")))?;
        let count = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| CheckpointError::Malformed(format!("array {name} is too large")))?;
            let payload = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| CheckpointError::Malformed("overflow".into()))?,
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("array {name}: {e}")))?;
            if arrays.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate array {name}")));
            }
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Self { spec, arrays })
    }
}

/// Size in bytes of the file [`save_checkpoint`] writes.
pub fn checkpoint_size(spec: &ModelSpec, arrays: &BTreeMap<String, Tensor<f32>>) -> Result<usize> {
    let header = 4 + 4 + 4 + serde_json::to_vec(spec)?.len() + 4;
    let body: usize = arrays
        .iter()
        .map(|(name, t)| 4 + name.len() + 4 + 4 * t.rank() + 4 * t.len())
        .sum();
    Ok(header + body + 4)
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Contract(format!("{n} does not fit in a u32 field")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut arrays = BTreeMap::new();
        arrays.insert(
            "a".to_string(),
            Tensor::vector(vec![1.0f32, -0.0, f32::MIN_POSITIVE]).unwrap(),
        );
        arrays.insert("w".to_string(), Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        Checkpoint::new(ModelSpec::toy(), arrays)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(bytes.len(), checkpoint_size(&c.spec, &c.arrays).unwrap());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.arrays["a"].data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn typed_corruption_errors() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::BadMagic(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::UnsupportedVersion(2))
        );
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0xFF;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::CrcMismatch { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 7]),
            Err(CheckpointError::CrcMismatch { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..6]),
            Err(CheckpointError::CrcMismatch { .. })
        ));
    }
}
