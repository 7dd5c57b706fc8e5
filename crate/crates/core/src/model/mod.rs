//! Dual-head grading network, ordinal loss, balanced batching and training.

pub mod batching;
pub mod loss;
pub mod net;
mod train;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::Grade;
use crate::error::{Error, Result};
use crate::inference::PatchGrader;
use crate::patchkit::{NormStats, Patch};

pub use loss::{combined_loss, ordinal_ce_loss};
pub use net::{CnnShape, HeadLogits, Param, SmallCnn};
pub use train::{train, write_log_csv, EpochLog, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SmallCnn,
    Densenet121,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub input_size_px: usize,
    /// Conv block widths (small_cnn only).
    pub widths: Vec<usize>,
    pub trunk_units: usize,
    /// Checkpoint to initialize weights from.
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            architecture: Architecture::SmallCnn,
            input_size_px: 512,
            widths: vec![16, 32, 64, 64, 64],
            trunk_units: 64,
            pretrained_weights: None,
        }
    }
}

impl BackboneConfig {
    pub fn shape(&self) -> CnnShape {
        CnnShape {
            input_size: self.input_size_px,
            widths: self.widths.clone(),
            trunk_units: self.trunk_units,
        }
    }

    fn require_small_cnn(&self) -> Result<()> {
        match self.architecture {
            Architecture::SmallCnn => Ok(()),
            Architecture::Densenet121 => Err(Error::Capability("densenet121".into())),
        }
    }

    /// Seeded initial network, or the weights of `pretrained_weights`.
    pub fn build(&self, seed: u64) -> Result<SmallCnn> {
        self.require_small_cnn()?;
        match &self.pretrained_weights {
            Some(path) => {
                let ckpt = Checkpoint::load(path)?;
                if ckpt.model.net.shape != self.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{:?}", self.shape()),
                        got: format!("{:?} in {}", ckpt.model.net.shape, path.display()),
                    });
                }
                Ok(ckpt.model.net)
            }
            None => SmallCnn::init(self.shape(), seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub per_grade_per_batch: usize,
    pub balanced_batches: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// False trains on the consensus grade only.
    pub dual_target: bool,
    pub agreement_loss_weight: f64,
    /// Defaults to one pass worth of batches over the training lesions.
    pub batches_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            per_grade_per_batch: 4,
            balanced_batches: true,
            learning_rate: 1e-4,
            momentum: 0.95,
            max_epochs: 20,
            early_stop_patience: 3,
            dual_target: true,
            agreement_loss_weight: 1.0,
            batches_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.balanced_batches && self.per_grade_per_batch * 3 != self.batch_size {
            return Err(Error::Config(format!(
                "balanced batches need batch_size == 3 * per_grade_per_batch ({} != 3 * {})",
                self.batch_size, self.per_grade_per_batch
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.agreement_loss_weight >= 0.0 && self.agreement_loss_weight.is_finite()) {
            return Err(Error::Config(format!(
                "invalid agreement loss weight {}",
                self.agreement_loss_weight
            )));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::Config("batches per epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Logits of the grade head (grades 1..3) and the agreement head (1..3
/// observers agreeing).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualHeadOutputs {
    pub grade_logits: [f64; 3],
    pub agreement_logits: [f64; 3],
}

impl DualHeadOutputs {
    pub fn grade_probabilities(&self) -> [f64; 3] {
        loss::softmax(&self.grade_logits)
    }

    pub fn agreement_probabilities(&self) -> [f64; 3] {
        loss::softmax(&self.agreement_logits)
    }

    /// Argmax grade, ties toward the lower grade.
    pub fn grade(&self) -> Grade {
        Grade::ALL[loss::argmax_lower(&self.grade_logits)]
    }
}

impl From<HeadLogits> for DualHeadOutputs {
    fn from(h: HeadLogits) -> Self {
        DualHeadOutputs {
            grade_logits: h.grade.map(f64::from),
            agreement_logits: h.agreement.map(f64::from),
        }
    }
}

/// Network weights plus the input standardization they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct GradingModel {
    pub net: SmallCnn,
    pub norm: NormStats,
}

impl GradingModel {
    pub fn forward(&self, patch: &Patch) -> Result<DualHeadOutputs> {
        let expected = self.net.shape.input_size;
        if patch.size != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected}x{expected} patch"),
                got: format!("{0}x{0} patch", patch.size),
            });
        }
        Ok(self.net.forward(&self.norm.to_tensor(patch))?.into())
    }
}

impl PatchGrader for GradingModel {
    fn grade_patch(&self, patch: &Patch) -> Result<Grade> {
        Ok(self.forward(patch)?.grade())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCISCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Seed from which every training stream is derived, and how far training got.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epochs_completed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: BackboneConfig,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub best_val_kappa: Option<f64>,
    pub rng: RngState,
    pub model: GradingModel,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    backbone: BackboneConfig,
    train_config: TrainConfig,
    epoch: usize,
    best_val_kappa: Option<f64>,
    rng: RngState,
    norm: NormStats,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Layout: magic, u32 version, u64 header length, JSON header (configs
    /// and a tensor table), then all tensors as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .model
            .net
            .params
            .iter()
            .map(|p| {
                let e = TensorEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                    len: p.data.len(),
                };
                offset += p.data.len();
                e
            })
            .collect();
        let header = CheckpointHeader {
            format: "dcis-checkpoint".into(),
            version: CHECKPOINT_VERSION,
            backbone: self.backbone.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            best_val_kappa: self.best_val_kappa,
            rng: self.rng,
            norm: self.model.norm,
            tensors,
        };
        let json = serde_json::to_vec_pretty(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.model.net.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let hlen = u64::from_le_bytes(len) as usize;
        if r.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..hlen])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let data = &r[hlen..];
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        if data.len() != total * 4 {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes of weights, found {}",
                total * 4,
                data.len()
            )));
        }
        let params = header
            .tensors
            .into_iter()
            .map(|t| {
                let bytes = data
                    .get(t.offset * 4..(t.offset + t.len) * 4)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {} out of range", t.name)))?;
                Ok(Param {
                    data: bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                    name: t.name,
                    shape: t.shape,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        header.backbone.require_small_cnn()?;
        let net = SmallCnn::from_params(header.backbone.shape(), params)?;
        Ok(Checkpoint {
            backbone: header.backbone,
            train_config: header.train_config,
            epoch: header.epoch,
            best_val_kappa: header.best_val_kappa,
            rng: header.rng,
            model: GradingModel {
                net,
                norm: header.norm,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
