//! ADDM checkpoint files.
//!
//! ```text
//! "ADDM" | u32 version = 1 | u32 header_len | header (UTF-8 JSON)
//! u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 ndim | ndim × u32 dims | f32 data
//! ```
//! Tensors are stored as `denoiser.<name>`, `discriminator.<name>` and
//! `adam.{denoiser,discriminator}.{m,v}.<name>`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_bytes, write_bytes, Reader};
use crate::error::{Error, Result};
use crate::nets::{Denoiser, Discriminator, Params};
use crate::optim::AdamState;
use crate::schedule::{NoiseSchedule, SigmaMode};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, TrainState};

pub const MAGIC: [u8; 4] = *b"ADDM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleHeader {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngHeader {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schedule: ScheduleHeader,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub sigma_mode: SigmaMode,
    pub adam_step_denoiser: u64,
    pub adam_step_discriminator: u64,
    pub rng: RngHeader,
}

/// A decoded checkpoint: header plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn groups(state: &TrainState) -> [(&'static str, &Params); 6] {
    [
        ("denoiser", state.denoiser.params()),
        ("discriminator", state.discriminator.params()),
        ("adam.denoiser.m", &state.denoiser_opt.m),
        ("adam.denoiser.v", &state.denoiser_opt.v),
        ("adam.discriminator.m", &state.discriminator_opt.m),
        ("adam.discriminator.v", &state.discriminator_opt.v),
    ]
}

pub fn header_for(state: &TrainState, config: &TrainConfig) -> CheckpointHeader {
    CheckpointHeader {
        schedule: ScheduleHeader {
            steps: config.steps,
            beta_start: config.beta_start,
            beta_end: config.beta_end,
            sigma_mode: config.sigma_mode,
        },
        config: config.clone(),
        epoch: state.epoch,
        step: state.step,
        seed: config.seed,
        sigma_mode: config.sigma_mode,
        adam_step_denoiser: state.denoiser_opt.step,
        adam_step_discriminator: state.discriminator_opt.step,
        rng: RngHeader {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
    }
}

pub fn encode(state: &TrainState, config: &TrainConfig) -> Vec<u8> {
    let header = serde_json::to_vec(&header_for(state, config)).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let groups = groups(state);
    let count: usize = groups.iter().map(|(_, p)| p.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, params) in groups {
        for (name, t) in params.iter() {
            let full = format!("{prefix}.{name}");
            out.extend_from_slice(&(full.len() as u16).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err("bad magic, expected ADDM".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let header_len = r.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| format!("header: {e}"))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| format!("tensor name: {e}"))?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("dimension overflow")?;
        let data = r.f32s(n)?;
        tensors.push((name, Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?));
    }
    if !r.finished() {
        return Err("trailing bytes after tensors".into());
    }
    Ok(Checkpoint { header, tensors })
}

impl Checkpoint {
    /// Parameters whose stored name starts with `prefix.`, in file order.
    pub fn group(&self, prefix: &str) -> std::result::Result<Params, String> {
        let mut params = Params::new();
        let dotted = format!("{prefix}.");
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&dotted) {
                params.insert(rest, t.clone()).map_err(|e| e.to_string())?;
            }
        }
        Ok(params)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.header.config.schedule()
    }

    pub fn denoiser(&self) -> std::result::Result<Denoiser, String> {
        let params = self.group("denoiser")?;
        Denoiser::from_params(self.header.config.denoiser.clone(), params).map_err(|e| e.to_string())
    }

    /// Rebuilds the full training state, ready to resume.
    pub fn train_state(&self) -> std::result::Result<TrainState, String> {
        let h = &self.header;
        let denoiser = self.denoiser()?;
        let discriminator = Discriminator::from_params(h.config.discriminator.clone(), self.group("discriminator")?)
            .map_err(|e| e.to_string())?;
        let moments = |net: &str, like: &Params, step: u64| -> std::result::Result<AdamState, String> {
            let m = self.group(&format!("adam.{net}.m"))?;
            let v = self.group(&format!("adam.{net}.v"))?;
            if !m.same_layout(like) || !v.same_layout(like) {
                return Err(format!("optimizer state for {net} does not match its parameters"));
            }
            Ok(AdamState { m, v, step })
        };
        let denoiser_opt = moments("denoiser", denoiser.params(), h.adam_step_denoiser)?;
        let discriminator_opt = moments("discriminator", discriminator.params(), h.adam_step_discriminator)?;
        let mut rng = ChaCha8Rng::from_seed(h.rng.seed);
        rng.set_stream(h.rng.stream);
        rng.set_word_pos(h.rng.word_pos.parse::<u128>().map_err(|e| format!("rng word_pos: {e}"))?);
        Ok(TrainState {
            denoiser,
            discriminator,
            denoiser_opt,
            discriminator_opt,
            epoch: h.epoch,
            step: h.step,
            rng,
        })
    }
}

pub fn save(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    write_bytes(path, &encode(state, config))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = read_bytes(path)?;
    decode(&bytes).map_err(|reason| Error::format(path, reason))
}

/// Loads just what inference needs.
pub fn load_denoiser(path: &Path) -> Result<(Denoiser, NoiseSchedule, CheckpointHeader)> {
    let ckpt = load(path)?;
    let denoiser = ckpt.denoiser().map_err(|reason| Error::format(path, reason))?;
    let schedule = ckpt.schedule()?;
    Ok((denoiser, schedule, ckpt.header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{DenoiserConfig, DiscriminatorConfig};

    fn config() -> TrainConfig {
        TrainConfig {
            steps: 10,
            batch_size: 2,
            denoiser: DenoiserConfig {
                image_size: 8,
                base_width: 2,
                depth: 1,
                time_embed_dim: 4,
            },
            discriminator: DiscriminatorConfig {
                image_size: 8,
                base_width: 2,
                n_layers: 2,
                time_embed_dim: 4,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_resumes_identically() {
        let config = config();
        let schedule = config.schedule().unwrap();
        let batch = Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|i| (i as f32 * 0.37).cos()).collect()).unwrap();
        let mut a = TrainState::new(&config).unwrap();
        a.train_step(&batch, &schedule, &config).unwrap();

        let bytes = encode(&a, &config);
        let ckpt = decode(&bytes).unwrap();
        assert_eq!(ckpt.header.config, config);
        let mut b = ckpt.train_state().unwrap();
        assert_eq!(encode(&b, &config), bytes);
        assert_eq!(b.denoiser, a.denoiser);

        let ra = a.train_step(&batch, &schedule, &config).unwrap();
        let rb = b.train_step(&batch, &schedule, &config).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(encode(&a, &config), encode(&b, &config));
    }

    #[test]
    fn rejects_damage() {
        let config = config();
        let bytes = encode(&TrainState::new(&config).unwrap(), &config);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
