//! Binary universe and checkpoint files.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, a payload of little-endian numbers, and a SHA-256 of everything
//! before it. Floats live only in the payload so they round-trip bit-exactly.

use std::path::Path;

use fsban_core::data::{ClassGenerator, ClassSplit, Domain, DomainSpec, Universe, UniverseConfig};
use fsban_core::model::{ModelConfig, ModelParams};
use fsban_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const UNIVERSE_MAGIC: &[u8; 8] = b"FSBANUNV";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSBANCKP";
pub const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn schema(msg: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("schema error: {msg}"))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8], header: &impl Serialize) -> CliResult<Self> {
        let h = serde_json::to_vec(header)?;
        let mut buf = Vec::with_capacity(64 + h.len());
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(h.len() as u64).to_le_bytes());
        buf.extend_from_slice(&h);
        Ok(Writer { buf })
    }

    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn u64s(&mut self, xs: &[usize]) {
        for &x in xs {
            self.buf.extend_from_slice(&(x as u64).to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

struct Reader<'a> {
    payload: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and checksum; returns the header and a reader
    /// over the payload.
    fn open<H: for<'de> Deserialize<'de>>(bytes: &'a [u8], magic: &[u8; 8], what: &str) -> CliResult<(H, Self)> {
        if bytes.len() < 20 + 32 || &bytes[..8] != magic {
            return Err(schema(format!("not a {what} file")));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(schema(format!("{what} format version {version}, expected {FORMAT_VERSION}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(schema(format!("{what} checksum mismatch (file is corrupt or truncated)")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| schema("header overruns the file"))?;
        let header = serde_json::from_slice(&body[20..header_end]).map_err(|e| schema(format!("{what} header: {e}")))?;
        Ok((header, Reader { payload: &body[header_end..], pos: 0 }))
    }

    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.payload.len()).ok_or_else(|| schema("payload is shorter than the header declares"))?;
        let s = &self.payload[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> CliResult<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| schema("size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn u64s(&mut self, n: usize) -> CliResult<Vec<usize>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| schema("size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize).collect())
    }

    fn done(&self) -> CliResult<()> {
        if self.pos == self.payload.len() {
            Ok(())
        } else {
            Err(schema("trailing payload bytes"))
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UniverseHeader {
    config: UniverseConfig,
    /// Per domain: base, valid, novel class counts.
    split_sizes: Vec<[usize; 3]>,
}

/// Serializes a universe: the generators, not the samples (samples are
/// regenerated from counters).
pub fn universe_bytes(u: &Universe) -> CliResult<Vec<u8>> {
    let header = UniverseHeader {
        config: u.config.clone(),
        split_sizes: u.domains.iter().map(|d| [d.split.base.len(), d.split.valid.len(), d.split.novel.len()]).collect(),
    };
    let mut w = Writer::new(UNIVERSE_MAGIC, &header)?;
    for d in &u.domains {
        w.f64s(d.spec.affine.data());
        w.f64s(&d.spec.bias);
        w.f64s(&[d.spec.warp_strength, d.spec.noise_std]);
        for c in &d.classes {
            w.f64s(&c.prototype);
            w.f64s(&c.scales);
        }
        w.u64s(&d.split.base);
        w.u64s(&d.split.valid);
        w.u64s(&d.split.novel);
    }
    Ok(w.finish())
}

pub fn universe_from_bytes(bytes: &[u8]) -> CliResult<Universe> {
    let (h, mut r): (UniverseHeader, _) = Reader::open(bytes, UNIVERSE_MAGIC, "universe")?;
    let c = &h.config;
    if h.split_sizes.len() != c.n_domains {
        return Err(schema("domain count differs from the header config"));
    }
    let d = c.dim;
    let mut domains = Vec::with_capacity(c.n_domains);
    for (id, sizes) in h.split_sizes.iter().enumerate() {
        if sizes.iter().sum::<usize>() != c.classes_per_domain {
            return Err(schema("split sizes do not add up to classes_per_domain"));
        }
        let affine = Tensor::new(vec![d, d], r.f64s(d * d)?).map_err(schema)?;
        let bias = r.f64s(d)?;
        let ws = r.f64s(2)?;
        let classes = (0..c.classes_per_domain)
            .map(|k| {
                Ok(ClassGenerator {
                    global_id: id * c.classes_per_domain + k,
                    prototype: r.f64s(d)?,
                    scales: r.f64s(d)?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let split = ClassSplit {
            base: r.u64s(sizes[0])?,
            valid: r.u64s(sizes[1])?,
            novel: r.u64s(sizes[2])?,
        };
        let range = id * c.classes_per_domain..(id + 1) * c.classes_per_domain;
        if [&split.base, &split.valid, &split.novel].iter().flat_map(|v| v.iter()).any(|g| !range.contains(g)) {
            return Err(schema("split lists a class of another domain"));
        }
        domains.push(Domain {
            spec: DomainSpec {
                domain_id: id,
                affine,
                bias,
                warp_strength: ws[0],
                noise_std: ws[1],
            },
            classes,
            split,
        });
    }
    r.done()?;
    Ok(Universe { config: h.config, domains })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Stage name, e.g. `gen0` or `student`.
    pub stage: String,
    pub shapes: Vec<Vec<usize>>,
}

pub fn checkpoint_bytes(params: &ModelParams, stage: &str) -> CliResult<Vec<u8>> {
    let header = CheckpointHeader {
        model: params.config.clone(),
        stage: stage.to_string(),
        shapes: params.tensors.iter().map(|t| t.shape().to_vec()).collect(),
    };
    let mut w = Writer::new(CHECKPOINT_MAGIC, &header)?;
    for t in &params.tensors {
        w.f64s(t.data());
    }
    Ok(w.finish())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> CliResult<(CheckpointHeader, ModelParams)> {
    let (h, mut r): (CheckpointHeader, _) = Reader::open(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    let tensors = h
        .shapes
        .iter()
        .map(|s| Tensor::new(s.clone(), r.f64s(s.iter().product())?).map_err(schema))
        .collect::<CliResult<Vec<_>>>()?;
    r.done()?;
    let params = ModelParams::from_parts(h.model.clone(), tensors).map_err(schema)?;
    Ok((h, params))
}

/// Reads a file, mapping a missing file to a usage error.
pub fn read_input(path: &Path, what: &str) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::usage(format!("{what} {} does not exist", path.display()))
        } else {
            CliError::runtime(format!("{what} {}: {e}", path.display()))
        }
    })
}

pub fn load_universe(path: &Path) -> CliResult<Universe> {
    universe_from_bytes(&read_input(path, "universe")?).map_err(|e| e.context(path.display()))
}

/// Loads a checkpoint and returns it with the SHA-256 of the file.
pub fn load_checkpoint(path: &Path) -> CliResult<(CheckpointHeader, ModelParams, String)> {
    let bytes = read_input(path, "checkpoint")?;
    let (h, p) = checkpoint_from_bytes(&bytes).map_err(|e| e.context(path.display()))?;
    Ok((h, p, sha256_hex(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fsban_core::data::generate_universe;
    use fsban_core::rng;

    fn small() -> Universe {
        generate_universe(&UniverseConfig { dim: 6, signal_dim: 3, samples_per_class: 10, classes_per_domain: 8, ..Default::default() }).unwrap()
    }

    #[test]
    fn universe_round_trips_bit_exactly() {
        let u = small();
        let bytes = universe_bytes(&u).unwrap();
        assert_eq!(universe_from_bytes(&bytes).unwrap(), u);
        assert_eq!(universe_bytes(&small()).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let cfg = ModelConfig { input_dim: 6, hidden: vec![5], feature_dim: 4, ..Default::default() };
        let p = ModelParams::init(&cfg, &mut rng::stream(1, "ckpt")).unwrap();
        let bytes = checkpoint_bytes(&p, "student").unwrap();
        let (h, q) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(q, p);
        assert_eq!(h.stage, "student");
        assert_eq!(checkpoint_bytes(&q, "student").unwrap(), bytes);
    }

    #[test]
    fn corruption_is_a_schema_error() {
        let bytes = universe_bytes(&small()).unwrap();
        for i in [0, 9, 30, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            let err = universe_from_bytes(&bad).unwrap_err().to_string();
            assert!(err.contains("schema error"), "{err}");
        }
        assert!(universe_from_bytes(&bytes[..bytes.len() - 5]).is_err());
        let cfg = ModelConfig { input_dim: 6, hidden: vec![], feature_dim: 4, ..Default::default() };
        let p = ModelParams::init(&cfg, &mut rng::stream(1, "ckpt")).unwrap();
        assert!(checkpoint_from_bytes(&bytes).is_err());
        assert!(universe_from_bytes(&checkpoint_bytes(&p, "x").unwrap()).is_err());
    }
}
