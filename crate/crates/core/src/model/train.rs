//! SGD with momentum, early stopping on validation kappa.

use std::path::Path;
use std::time::Instant;

use crate::agreement;
use crate::datamodel::{DatasetManifest, LesionRecord, Subset};
use crate::error::{Error, Result};
use crate::inference::{predict_lesion, InferenceConfig};
use crate::patchkit::{augment, AugmentationConfig, NormStats, PatchSource};
use crate::seed;

use super::batching::{BalancedBatches, UniformBatches};
use super::loss::combined_loss_grad;
use super::{BackboneConfig, Checkpoint, DualHeadOutputs, GradingModel, RngState, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss_mean: f64,
    /// `None` when kappa is undefined (e.g. a constant prediction).
    pub val_kappa: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation kappa.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn validation_kappa(
    model: &GradingModel,
    source: &PatchSource,
    lesions: &[&LesionRecord],
    inference: &InferenceConfig,
) -> Result<Option<f64>> {
    let mut predicted = Vec::with_capacity(lesions.len());
    let mut consensus = Vec::with_capacity(lesions.len());
    for l in lesions {
        predicted.push(predict_lesion(model, source, l, inference)?);
        consensus.push(l.label().consensus);
    }
    match agreement::qwk(&agreement::confusion(&predicted, &consensus)?) {
        Ok(k) => Ok(Some(k)),
        Err(Error::DegenerateMarginals) => Ok(None),
        Err(e) => Err(e),
    }
}

enum Batches {
    Balanced(BalancedBatches),
    Uniform(UniformBatches),
}

impl Batches {
    fn next_batch(&mut self) -> Vec<usize> {
        match self {
            Batches::Balanced(b) => b.next(),
            Batches::Uniform(b) => b.next(),
        }
        .expect("batch streams are infinite")
    }
}

/// Trains on the manifest's train split and monitors the validation split.
///
/// Every random draw comes from a stream derived from `config.seed`, so two
/// runs with equal inputs produce identical logs and weights. Validation
/// predictions use `inference` without augmentation.
pub fn train(
    manifest: &DatasetManifest,
    source: &PatchSource,
    augmentation: &AugmentationConfig,
    backbone: &BackboneConfig,
    config: &TrainConfig,
    inference: &InferenceConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    augmentation.validate()?;
    inference.validate()?;
    if source.spec.size_px != backbone.input_size_px {
        return Err(Error::Config(format!(
            "patch size {} does not match network input {}",
            source.spec.size_px, backbone.input_size_px
        )));
    }
    if manifest.split.is_none() {
        return Err(Error::Manifest("training needs a train/validation split".into()));
    }
    let train_set = manifest.lesions_in(Subset::Train);
    let val_set = manifest.lesions_in(Subset::Validation);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Manifest(format!(
            "split has {} train and {} validation lesions; both must be non-empty",
            train_set.len(),
            val_set.len()
        )));
    }

    let net = backbone.build(seed::derive_seed(config.seed, "init"))?;

    let norm_seed = seed::derive_seed(config.seed, "norm");
    let norm_patches = train_set
        .iter()
        .map(|l| source.draw(l, &mut seed::lesion_stream(norm_seed, &l.lesion_id)))
        .collect::<Result<Vec<_>>>()?;
    let norm = NormStats::from_patches(&norm_patches)?;
    drop(norm_patches);

    let mut model = GradingModel { net, norm };
    let mut best = Checkpoint {
        backbone: backbone.clone(),
        train_config: config.clone(),
        epoch: 0,
        best_val_kappa: None,
        rng: RngState {
            seed: config.seed,
            epochs_completed: 0,
        },
        model: model.clone(),
    };
    let mut log = Vec::new();
    if config.max_epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint: best,
            log,
        });
    }

    let batch_seed = seed::derive_seed(config.seed, "batches");
    let mut batches = if config.balanced_batches {
        Batches::Balanced(BalancedBatches::new(&train_set, config.per_grade_per_batch, batch_seed)?)
    } else {
        Batches::Uniform(UniformBatches::new(train_set.len(), config.batch_size, batch_seed)?)
    };
    let batches_per_epoch = config
        .batches_per_epoch
        .unwrap_or_else(|| train_set.len().div_ceil(config.batch_size));

    let mut velocity: Vec<Vec<f32>> = model.net.zero_grads();
    let mut best_kappa: Option<f64> = None;
    let mut since_best = 0;
    let lr = config.learning_rate as f32;
    let mu = config.momentum as f32;
    let sample_seed = seed::derive_seed(config.seed, "samples");

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for b in 0..batches_per_epoch {
            let batch = batches.next_batch();
            let mut grads = model.net.zero_grads();
            let scale = 1.0 / batch.len() as f32;
            for (slot, &li) in batch.iter().enumerate() {
                let lesion = train_set[li];
                let mut rng = seed::stream(seed::derive_seed_n(
                    sample_seed,
                    &[epoch as u64, b as u64, slot as u64],
                ));
                let patch = augment(&source.draw(lesion, &mut rng)?, augmentation, &mut rng);
                let input = model.norm.to_tensor(&patch);
                let diverged = || Error::Divergence { epoch, batch: b };
                let (logits, cache) = model.net.forward_train(&input).map_err(|e| match e {
                    Error::NonFinite(_) => diverged(),
                    other => other,
                })?;
                let outputs = DualHeadOutputs::from(logits);
                let terms = match combined_loss_grad(&outputs, &lesion.label(), config) {
                    Ok(t) if t.loss.is_finite() => t,
                    Ok(_) | Err(Error::NonFinite(_)) => return Err(diverged()),
                    Err(e) => return Err(e),
                };
                loss_sum += terms.loss;
                loss_count += 1;
                model.net.backward(
                    &cache,
                    terms.grade_grad.map(|v| v as f32),
                    terms.agreement_grad.map(|v| v as f32),
                    scale,
                    &mut grads,
                );
            }
            for ((p, v), g) in model.net.params.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, vi), gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = mu * *vi - lr * gi;
                    *w += *vi;
                }
            }
            if model
                .net
                .params
                .iter()
                .any(|p| p.data.iter().any(|w| !w.is_finite()))
            {
                return Err(Error::Divergence { epoch, batch: b });
            }
        }

        let val_kappa = validation_kappa(&model, source, &val_set, inference)?;
        let entry = EpochLog {
            epoch,
            train_loss_mean: loss_sum / loss_count.max(1) as f64,
            val_kappa,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val kappa {}, {:.1}s",
            entry.train_loss_mean,
            val_kappa.map_or("undefined".to_string(), |k| format!("{k:.4}")),
            entry.seconds
        );
        log.push(entry);

        let improved = match (val_kappa, best_kappa) {
            (Some(k), Some(b)) => k > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best_kappa = val_kappa;
            since_best = 0;
            best.model = model.clone();
            best.epoch = epoch;
            best.best_val_kappa = val_kappa;
        } else {
            since_best += 1;
        }
        best.rng.epochs_completed = epoch;
        if since_best >= config.early_stop_patience.max(1) {
            log::info!("stopping after {epoch} epochs; best epoch {}", best.epoch);
            break;
        }
    }

    Ok(TrainOutcome {
        checkpoint: best,
        log,
    })
}

/// `epoch,train_loss_mean,val_kappa,seconds`; undefined kappa is written as NA.
pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["epoch", "train_loss_mean", "val_kappa", "seconds"])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.train_loss_mean),
            e.val_kappa.map_or("NA".to_string(), |k| format!("{k:.6}")),
            format!("{:.3}", e.seconds),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

