//! Binary checkpoint layout, all integers u32 little-endian:
//!
//! ```text
//! "UAAF" | version | count | stages | channels | seg_classes | seg_channels
//! count x ( name_len | name (UTF-8) | rank | dims[rank] | f32 payload )
//! ```
//!
//! Entries are sorted by name, so equal models give equal bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UAAF";
pub const VERSION: u32 = 1;

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint { config: model.config, tensors: model.named() }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_named(self.config, self.tensors)
    }
}

fn u32_of(v: usize, field: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| bad(format!("{field} {v} does not fit in u32")))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries: Vec<&(String, Tensor)> = ck.tensors.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(bad(format!("duplicate tensor name {}", w[0].0)));
    }
    let mut out = Vec::new();
    let put = |out: &mut Vec<u8>, v: usize, field: &str| -> Result<()> {
        out.extend_from_slice(&u32_of(v, field)?.to_le_bytes());
        Ok(())
    };
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put(&mut out, entries.len(), "tensor count")?;
    let c = &ck.config;
    for (v, field) in [(c.stages, "stages"), (c.channels, "channels"), (c.seg_classes, "seg_classes"), (c.seg_channels, "seg_channels")] {
        put(&mut out, v, field)?;
    }
    for (name, t) in entries {
        put(&mut out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.rank(), "rank")?;
        for &d in t.shape() {
            put(&mut out, d, "dimension")?;
        }
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("tensor {name} does not fit in f32")));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, field: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("{field}: truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(bad("magic: not a UAAF checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(bad(format!("version: unsupported {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")?;
    let config = ModelConfig {
        stages: r.u32("stages")?,
        channels: r.u32("channels")?,
        seg_classes: r.u32("seg_classes")?,
        seg_channels: r.u32("seg_channels")?,
    };
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| bad("name: not valid UTF-8"))?
            .to_owned();
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(bad(format!("duplicate tensor name {name}")));
        }
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| bad(format!("dims of {name}: {dims:?} overflow")))?;
        let payload = r.take(numel * 4, &format!("payload of {name}"))?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        tensors.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(&Checkpoint::from_model(model))?)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)?.into_model()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { stages: 2, channels: 3, seg_classes: 3, seg_channels: 4 }
    }

    #[test]
    fn empty_table_is_header_plus_echo() {
        let ck = Checkpoint { config: cfg(), tensors: vec![] };
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(bytes.len(), 12 + 16);
        assert_eq!(&bytes[..4], b"UAAF");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[12..], &[2, 0, 0, 0, 3, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
    }

    #[test]
    fn model_roundtrip_is_byte_stable() {
        let m = Model::init(cfg(), 1).unwrap();
        let a = encode_checkpoint(&Checkpoint::from_model(&m)).unwrap();
        let back = decode_checkpoint(&a).unwrap().into_model().unwrap();
        let b = encode_checkpoint(&Checkpoint::from_model(&back)).unwrap();
        assert_eq!(a, b);
        for ((n1, t1), (n2, t2)) in m.named().iter().zip(back.named().iter()) {
            assert_eq!(n1, n2);
            for (x, y) in t1.data().iter().zip(t2.data()) {
                assert!((x - y).abs() <= x.abs() * f32::EPSILON as f64);
            }
        }
    }

    #[test]
    fn random_tables_roundtrip_within_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let tensors: Vec<(String, Tensor)> = (0..rng.gen_range(1..5))
                .map(|i| {
                    let shape: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(1..4)).collect();
                    (format!("t{i}"), Tensor::from_fn(shape, |_| rng.gen_range(-1e3..1e3)))
                })
                .collect();
            let ck = Checkpoint { config: cfg(), tensors };
            let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
            for ((_, a), (_, b)) in ck.tensors.iter().zip(&back.tensors) {
                assert_eq!(a.shape(), b.shape());
                assert!(a.max_abs_diff(b) <= 1e3 * f32::EPSILON as f64);
            }
        }
    }

    #[test]
    fn rejects_malformed() {
        let ck = Checkpoint { config: cfg(), tensors: vec![("a".into(), Tensor::ones([2]))] };
        let good = encode_checkpoint(&ck).unwrap();
        let msg = |b: &[u8]| decode_checkpoint(b).unwrap_err().to_string();

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(msg(&magic).contains("magic"));
        let mut version = good.clone();
        version[4] = 2;
        assert!(msg(&version).contains("version"));
        assert!(msg(&good[..good.len() - 1]).contains("truncated"));

        let dup = Checkpoint { config: cfg(), tensors: vec![("a".into(), Tensor::ones([1])), ("a".into(), Tensor::ones([1]))] };
        assert!(encode_checkpoint(&dup).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn dims_overflow_is_reported() {
        let mut b = encode_checkpoint(&Checkpoint { config: cfg(), tensors: vec![] }).unwrap();
        b[8] = 1;
        b.extend_from_slice(&1u32.to_le_bytes());
        b.push(b'x');
        b.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode_checkpoint(&b).unwrap_err().to_string().contains("overflow"));
    }
}
