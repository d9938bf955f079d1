//! Model checkpoints and their binary file format.
//!
//! ```text
//! "ANCH" | version u32 LE | config_len u64 LE | config (TOML, UTF-8)
//! then `tensors` records (count stored in the config block):
//!   name_len u64 | name | rank u64 | dims u64 × rank | f32 LE × product(dims)
//! ```
//!
//! Optimizer moments are stored as ordinary tensors named
//! `optimizer.m/<param>` and `optimizer.v/<param>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_param, init_params, ModelConfig, ParamStore};
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ANCH";
pub const FORMAT_VERSION: u32 = 1;
const OPT_M: &str = "optimizer.m/";
const OPT_V: &str = "optimizer.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub optimizer: Option<AdamState<T>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    tensors: u64,
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
}

/// Freshly initialized checkpoint (truncated normal, std 0.02).
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Checkpoint<T>> {
    Ok(Checkpoint {
        config: config.clone(),
        params: init_params(config, seed)?,
        step: 0,
        optimizer: None,
    })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Checks that every parameter the config requires is present with the right shape.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (name, shape) in self.config.param_shapes() {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ParamShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.cast(),
            step: self.step,
            optimizer: self.optimizer.as_ref().map(|s| AdamState {
                step: s.step,
                m: s.m.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
                v: s.v.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            }),
        }
    }

    /// Model for `target` whose encoder, embeddings and MLM head are copied
    /// from `self`; every other parameter (decoder, classifier) is freshly
    /// initialized from `seed`. Step counter and optimizer state are reset.
    pub fn adopt_encoder(&self, target: &ModelConfig, seed: u64) -> Result<Checkpoint<T>> {
        target.validate()?;
        let enc = |c: &ModelConfig| {
            (
                c.num_layers,
                c.hidden_size,
                c.num_heads,
                c.ff_size,
                c.vocab_size,
                c.max_positions,
                c.num_segments,
            )
        };
        if enc(&self.config) != enc(target) {
            return Err(Error::IncompatibleInit(format!(
                "encoder shapes differ: source {:?}, target {:?}",
                enc(&self.config),
                enc(target)
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in target.param_shapes() {
            match self.params.get(&name) {
                Some(t) if ModelConfig::is_encoder_param(&name) => params.insert(name, t.clone()),
                _ => {
                    let t = init_param(&name, &shape, &mut rng);
                    params.insert(name, t);
                }
            }
        }
        Ok(Checkpoint {
            config: target.clone(),
            params,
            step: 0,
            optimizer: None,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let opt_tensors = self.optimizer.as_ref().map_or(0, |s| s.m.len() + s.v.len());
        let header = Header {
            step: self.step,
            tensors: (self.params.len() + opt_tensors) as u64,
            model: self.config.clone(),
            optimizer: self
                .optimizer
                .as_ref()
                .map(|s| OptimizerHeader { step: s.step }),
        };
        let text = toml::to_string(&header)
            .map_err(|e| Error::parse("checkpoint config", e.to_string()))?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (name, t) in self.params.iter() {
            write_tensor(&mut out, name, t);
        }
        if let Some(state) = &self.optimizer {
            for (name, t) in &state.m {
                write_tensor(&mut out, &format!("{OPT_M}{name}"), t);
            }
            for (name, t) in &state.v {
                write_tensor(&mut out, &format!("{OPT_V}{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        let len = r.len_field()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CorruptCheckpoint("config block is not UTF-8".into()))?;
        let header: Header = toml::from_str(text)
            .map_err(|e| Error::CorruptCheckpoint(format!("config block: {e}")))?;

        let mut params = ParamStore::new();
        let mut optimizer = header.optimizer.as_ref().map(|o| AdamState {
            step: o.step,
            ..AdamState::new()
        });
        for _ in 0..header.tensors {
            let name_len = r.len_field()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.len_field()?;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.len_field()?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| {
                    Error::CorruptCheckpoint(format!("tensor {name}: dimension overflow"))
                })?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?,
            )?;
            let data: Vec<T> = raw
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            let tensor = Tensor::new(dims, data)
                .map_err(|e| Error::CorruptCheckpoint(format!("tensor {name}: {e}")))?;
            if let Some(p) = name.strip_prefix(OPT_M) {
                opt_state(&mut optimizer, &name)?
                    .m
                    .insert(p.to_string(), tensor);
            } else if let Some(p) = name.strip_prefix(OPT_V) {
                opt_state(&mut optimizer, &name)?
                    .v
                    .insert(p.to_string(), tensor);
            } else {
                params.insert(name, tensor);
            }
        }
        if !r.at_end() {
            return Err(Error::CorruptCheckpoint(
                "trailing bytes after last tensor".into(),
            ));
        }
        let ckpt = Checkpoint {
            config: header.model,
            params,
            step: header.step,
            optimizer,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn opt_state<'a, T: Scalar>(
    state: &'a mut Option<AdamState<T>>,
    name: &str,
) -> Result<&'a mut AdamState<T>> {
    state.as_mut().ok_or_else(|| {
        Error::CorruptCheckpoint(format!("{name} present but config has no optimizer block"))
    })
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u64).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::CorruptCheckpoint(format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len_field(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::CorruptCheckpoint(format!("length {v} out of range")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encoder_forward, TokenBatch};

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_size: 8,
            num_heads: 2,
            ff_size: 16,
            vocab_size: 12,
            max_positions: 10,
            num_segments: 2,
            dropout_rate: 0.1,
            decoder_layers: 0,
            num_classes: 0,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck: Checkpoint<f32> = build_model(&cfg(), 3).unwrap();
        ck.step = 17;
        let mut st = AdamState::new();
        st.step = 17;
        st.m.insert("mlm.bias".into(), Tensor::full(&[12], 0.25));
        st.v.insert("mlm.bias".into(), Tensor::full(&[12], 0.5));
        ck.optimizer = Some(st);
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);

        let batch = TokenBatch::from_rows(&[vec![2, 6, 7, 3]], 0);
        let a = encoder_forward(&ck.config, &ck.params, &batch).unwrap();
        let b = encoder_forward(&back.config, &back.params, &batch).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.hidden), bits(&b.hidden));
    }

    #[test]
    fn truncation_and_bad_headers_are_rejected() {
        let ck: Checkpoint<f32> = build_model(&cfg(), 3).unwrap();
        let bytes = ck.to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(
                matches!(
                    Checkpoint::<f32>::from_bytes(&bytes[..cut]),
                    Err(Error::CorruptCheckpoint(_))
                ),
                "cut at {cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&long),
            Err(Error::CorruptCheckpoint(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bad),
            Err(Error::CorruptCheckpoint(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bad),
            Err(Error::CheckpointVersion(9))
        ));
    }

    #[test]
    fn shape_mismatch_against_config_is_rejected() {
        let mut ck: Checkpoint<f32> = build_model(&cfg(), 3).unwrap();
        ck.params.insert("mlm.bias", Tensor::zeros(&[11]));
        let err = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap());
        assert!(matches!(err, Err(Error::ParamShape { .. })));
    }

    #[test]
    fn adopting_an_encoder_keeps_it_and_initializes_the_decoder() {
        let base: Checkpoint<f32> = build_model(&cfg(), 3).unwrap();
        let target = cfg().with_decoder(2);
        let a = base.adopt_encoder(&target, 9).unwrap();
        a.validate().unwrap();
        for (name, t) in base.params.iter() {
            assert_eq!(a.params.get(name).unwrap(), t, "{name}");
        }
        let b = base.adopt_encoder(&target, 10).unwrap();
        let w = "decoder.0.ffn.inner.weight";
        assert!(a.params.get(w).unwrap().data().iter().any(|&v| v != 0.0));
        assert_ne!(a.params.get(w), b.params.get(w));
        assert!(a.params.contains("decoder.output.weight"));

        let wide = ModelConfig {
            hidden_size: 12,
            num_heads: 2,
            ..cfg()
        };
        assert!(matches!(
            base.adopt_encoder(&wide, 0),
            Err(Error::IncompatibleInit(_))
        ));
    }
}
