//! Checkpoint files.
//!
//! Layout: the 8-byte magic `RBDMCKPT`, a little-endian `u64` header
//! length, a JSON header, then little-endian `f32` arrays: the network
//! weights in parameter order, followed by the Adam first and second
//! moments when the header says they are present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, UNet};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::{Schedule, ScheduleParams};
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"RBDMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    pub iteration: u64,
    pub seed: u64,
    pub param_count: usize,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub weights: Vec<f32>,
    /// Adam moments `(m, v)`.
    pub moments: Option<(Vec<f32>, Vec<f32>)>,
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

impl Checkpoint {
    /// Inference-only checkpoint.
    pub fn from_network(net: &UNet<f32>, schedule: &Schedule, seed: u64) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                schedule: schedule.params(),
                denoiser: net.config().clone(),
                iteration: 0,
                seed,
                param_count: net.params().len(),
                train: None,
                optimizer: None,
            },
            weights: net.params().to_vec(),
            moments: None,
        }
    }

    pub fn from_train_state(state: &TrainState, schedule: &Schedule, config: &TrainConfig) -> Self {
        let mut ckpt = Self::from_network(&state.net, schedule, config.seed);
        ckpt.header.iteration = state.iteration;
        ckpt.header.train = Some(config.clone());
        ckpt.header.optimizer = Some(OptimizerHeader {
            config: state.optimizer.config,
            step: state.optimizer.step,
        });
        ckpt.moments = Some((state.optimizer.m.clone(), state.optimizer.v.clone()));
        ckpt
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::from_params(self.header.schedule)
    }

    pub fn network(&self) -> Result<UNet<f32>> {
        UNet::from_params(&self.header.denoiser, self.weights.clone())
    }

    /// Network and optimizer ready to continue training.
    pub fn train_state(&self) -> Result<TrainState> {
        let net = self.network()?;
        let (opt, (m, v)) = match (&self.header.optimizer, &self.moments) {
            (Some(o), Some(mv)) => (o, mv.clone()),
            _ => return Err(Error::Checkpoint("checkpoint has no optimizer state; cannot resume".into())),
        };
        Ok(TrainState {
            net,
            optimizer: Adam {
                config: opt.config,
                step: opt.step,
                m,
                v,
            },
            iteration: self.header.iteration,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.weights.len() * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        push_f32s(&mut out, &self.weights);
        if let Some((m, v)) = &self.moments {
            push_f32s(&mut out, m);
            push_f32s(&mut out, v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Err(Error::Checkpoint(msg));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return bad("not a checkpoint file (missing RBDMCKPT magic)".into());
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_BYTES || 16 + header_len as usize > bytes.len() {
            return bad(format!(
                "header length {header_len} does not fit in a {}-byte file",
                bytes.len()
            ));
        }
        let header_end = 16 + header_len as usize;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return bad(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                header.format_version
            ));
        }
        header
            .denoiser
            .validate()
            .map_err(|e| Error::Checkpoint(format!("header denoiser config: {e}")))?;
        let expected = UNet::<f32>::param_count_for(&header.denoiser)?;
        if header.param_count != expected {
            return bad(format!(
                "header declares {} parameters but the architecture has {expected}",
                header.param_count
            ));
        }
        let arrays = if header.optimizer.is_some() { 3 } else { 1 };
        let payload = &bytes[header_end..];
        if payload.len() != arrays * expected * 4 {
            return bad(format!(
                "payload is {} bytes, header implies {} ({} arrays of {expected} f32)",
                payload.len(),
                arrays * expected * 4,
                arrays
            ));
        }
        let values = read_f32s(payload);
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return bad(format!("non-finite value at payload index {i}"));
        }
        let weights = values[..expected].to_vec();
        let moments = (arrays == 3).then(|| {
            (
                values[expected..2 * expected].to_vec(),
                values[2 * expected..].to_vec(),
            )
        });
        Ok(Checkpoint {
            header,
            weights,
            moments,
        })
    }

    /// Writes via a temporary file so a crash never leaves a partial
    /// checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
