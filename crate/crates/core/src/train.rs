//! Training loop, AdamW and checkpoints.
//!
//! The backbone is frozen, so features are extracted once and cached.
//! Each sample in a step draws its own partition from a seed derived from
//! `(epoch, step, slot)`; per-sample gradients run in parallel and are
//! summed in batch order so results do not depend on thread scheduling.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayD;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::backbone::{build_backbone, extract_features, load_rgb, preprocess, FeatureExtractor, FeatureMap};
use crate::config::{ModelConfig, OptimizerConfig, ReconstructionMode};
use crate::data::{epoch_order, Record};
use crate::error::{Result, SivtError};
use crate::induction::seeded_partition;
use crate::model::{SivtModel, SivtParameters};
use crate::nn::ParamTree;
use crate::objective::LossBreakdown;
use crate::seed::derive_seed;

pub const CHECKPOINT_VERSION: u32 = 1;

/// AdamW with decoupled weight decay on weight matrices only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl AdamW {
    pub fn new(params: &SivtParameters) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut SivtParameters, grads: &SivtParameters, cfg: &OptimizerConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let g = grads.tensors();
        for (k, (name, mut p)) in params.tensors_mut().into_iter().enumerate() {
            let g = &g[k].1;
            let decay = if decays(&name) { cfg.weight_decay } else { 0.0 };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(&mut p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *p);
            });
        }
    }
}

fn global_norm(grads: &SivtParameters) -> f64 {
    grads
        .tensors()
        .iter()
        .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub l2: f64,
    pub cosine: f64,
    pub steps: usize,
}

/// Model, optimizer and progress: everything a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: SivtModel,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub history: Vec<EpochLoss>,
}

#[derive(Serialize, Deserialize)]
struct Progress {
    version: u32,
    epochs_done: usize,
    step: u64,
    history: Vec<EpochLoss>,
}

impl TrainState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let model = SivtModel::new(config)?;
        let optimizer = AdamW::new(&model.params);
        Ok(Self {
            model,
            optimizer,
            epochs_done: 0,
            history: Vec::new(),
        })
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert_text("config", self.model.config.to_toml_string());
        let progress = Progress {
            version: CHECKPOINT_VERSION,
            epochs_done: self.epochs_done,
            step: self.optimizer.step,
            history: self.history.clone(),
        };
        a.insert_text("progress", serde_json::to_string(&progress).expect("progress serializes"));
        self.model.write_params(&mut a, "param.");
        for ((name, _), (m, v)) in self
            .model
            .params
            .tensors()
            .iter()
            .zip(self.optimizer.m.iter().zip(&self.optimizer.v))
        {
            a.insert(format!("adam_m.{name}"), m.clone());
            a.insert(format!("adam_v.{name}"), v.clone());
        }
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let config = ModelConfig::from_toml_str(a.text("config")?)?;
        let progress: Progress = serde_json::from_str(a.text("progress")?)
            .map_err(|e| SivtError::Checkpoint(format!("progress record: {e}")))?;
        if progress.version != CHECKPOINT_VERSION {
            return Err(SivtError::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                progress.version
            )));
        }
        let model = SivtModel::read_params(config, a, "param.")?;
        let mut optimizer = AdamW::new(&model.params);
        optimizer.step = progress.step;
        for (k, (name, t)) in model.params.tensors().iter().enumerate() {
            optimizer.m[k] = a.tensor(&format!("adam_m.{name}"), t.shape())?.clone();
            optimizer.v[k] = a.tensor(&format!("adam_v.{name}"), t.shape())?.clone();
        }
        Ok(Self {
            model,
            optimizer,
            epochs_done: progress.epochs_done,
            history: progress.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}

/// Features for every readable record, in record order. With
/// `skip_unreadable` set, failing records are logged and dropped.
pub fn extract_all(
    config: &ModelConfig,
    backbone: &dyn FeatureExtractor,
    records: &[&Record],
) -> Result<Vec<FeatureMap>> {
    let results: Vec<Result<FeatureMap>> = records
        .par_iter()
        .map(|r| {
            let img = preprocess(&load_rgb(&r.image)?, config)?;
            extract_features(&img, &config.backbone, backbone)
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(f) => out.push(f),
            Err(e) if config.training.skip_unreadable => log::warn!("skipping {}: {e}", r.image.display()),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Partition seed for one sample of one step.
pub fn sample_seed(config: &ModelConfig, epoch: usize, step: usize, slot: usize) -> u64 {
    if config.partition.train_resample {
        derive_seed(config.seed, &[1, epoch as u64, step as u64, slot as u64])
    } else {
        derive_seed(config.seed, &[1])
    }
}

/// One optimization step over `batch`. Returns the batch-mean loss.
pub fn train_step(
    state: &mut TrainState,
    features: &[&FeatureMap],
    epoch: usize,
    step: usize,
) -> Result<LossBreakdown> {
    let model = &state.model;
    let config = &model.config;
    let results: Vec<Result<(LossBreakdown, SivtParameters)>> = features
        .par_iter()
        .enumerate()
        .map(|(slot, f)| match config.mode {
            ReconstructionMode::Sivt => {
                let part = seeded_partition(
                    config.num_tokens(),
                    config.model.subsets,
                    sample_seed(config, epoch, step, slot),
                )?;
                model.loss_and_grad(f, Some(&part))
            }
            ReconstructionMode::Vanilla => model.loss_and_grad(f, None),
        })
        .collect();
    let n = features.len() as f64;
    let mut mean = LossBreakdown::zero(config.scoring.lambda);
    let mut grads: Option<SivtParameters> = None;
    for (slot, res) in results.into_iter().enumerate() {
        let (loss, g) = res.map_err(|e| match e {
            SivtError::NonFinite { stage } => SivtError::NonFinite {
                stage: format!("{stage} (epoch {epoch}, step {step}, sample {slot})"),
            },
            other => other,
        })?;
        if !loss.total.is_finite() {
            return Err(SivtError::NonFinite {
                stage: format!("loss at epoch {epoch}, step {step}, sample {slot}"),
            });
        }
        mean.total += loss.total / n;
        mean.l2 += loss.l2 / n;
        mean.cosine += loss.cosine / n;
        match grads.as_mut() {
            Some(acc) => acc.add_assign_(&g),
            None => grads = Some(g),
        }
    }
    let mut grads = grads.ok_or_else(|| SivtError::Parameter("empty batch".into()))?;
    grads.scale_(1.0 / n);
    if !grads.all_finite() {
        return Err(SivtError::NonFinite {
            stage: format!("gradient at epoch {epoch}, step {step}"),
        });
    }
    if let Some(clip) = config.optimizer.grad_clip {
        let norm = global_norm(&grads);
        if norm > clip {
            grads.scale_(clip / norm);
        }
    }
    let opt = config.optimizer.clone();
    state.optimizer.update(&mut state.model.params, &grads, &opt);
    Ok(mean)
}

/// Train on cached features until `epochs` epochs are done, calling
/// `on_epoch` after each one.
pub fn fit(
    state: &mut TrainState,
    features: &[FeatureMap],
    epochs: usize,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    if features.is_empty() {
        return Err(SivtError::Parameter("no training features".into()));
    }
    let bs = state.model.config.training.batch_size;
    if bs == 0 {
        return Err(SivtError::Parameter("batch size must be at least 1".into()));
    }
    let shuffle = state.model.config.training.shuffle_seed;
    for epoch in state.epochs_done..epochs {
        let order = epoch_order(features.len(), shuffle, epoch);
        let mut acc = EpochLoss {
            epoch,
            total: 0.0,
            l2: 0.0,
            cosine: 0.0,
            steps: 0,
        };
        for (step, chunk) in order.chunks(bs).enumerate() {
            let batch: Vec<&FeatureMap> = chunk.iter().map(|&i| &features[i]).collect();
            let loss = train_step(state, &batch, epoch, step)?;
            acc.total += loss.total;
            acc.l2 += loss.l2;
            acc.cosine += loss.cosine;
            acc.steps += 1;
        }
        let k = acc.steps as f64;
        acc.total /= k;
        acc.l2 /= k;
        acc.cosine /= k;
        log::info!("epoch {} loss {:.6}", epoch + 1, acc.total);
        state.history.push(acc);
        state.epochs_done = epoch + 1;
        on_epoch(state)?;
    }
    Ok(())
}

/// Record of a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub epochs: Vec<EpochLoss>,
    pub wall_clock_secs: f64,
    pub checkpoint: PathBuf,
    pub train_images: usize,
    pub crate_version: String,
    pub checkpoint_version: u32,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| SivtError::io(path, e))
    }
}

/// Full run on the train split: features, optimization, checkpoints and
/// a manifest under `out`. `resume` continues from a saved state.
pub fn train(
    config: &ModelConfig,
    train_records: &[&Record],
    out: &Path,
    resume: Option<TrainState>,
) -> Result<(TrainState, RunManifest)> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| SivtError::io(out, e))?;
    let started = Instant::now();
    let backbone = build_backbone(&config.backbone)?;
    let features = extract_all(config, &backbone, train_records)?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(config.clone())?,
    };
    let every = config.training.checkpoint_every;
    fit(&mut state, &features, config.training.epochs, &mut |s| {
        if every > 0 && s.epochs_done % every == 0 {
            s.save(&out.join(format!("checkpoint_epoch{:04}.sivt", s.epochs_done)))?;
        }
        Ok(())
    })?;
    let ckpt = out.join("checkpoint.sivt");
    state.save(&ckpt)?;
    config.save(&out.join("config.toml"))?;
    let manifest = RunManifest {
        config: config.to_toml_string(),
        epochs: state.history.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint: ckpt,
        train_images: features.len(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_version: CHECKPOINT_VERSION,
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok((state, manifest))
}
