//! Writer-aware neural frame classifier: base training, joint training of
//! adaptation matrices and writer codes, and unsupervised code estimation
//! for unseen writers.

mod io;
mod net;

pub use io::{read_codes_csv, read_wcnn, write_codes_csv, write_wcnn, WcnnFile};
pub use net::{AdaptiveClassifier, BnMode, ClassifierConfig, ConvBlock, Dense, ForwardCache, Gradients, Reduction};

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Patches;
use crate::rng::sub_rng;

/// Frames of one line with their tied-state labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledLine<'a> {
    pub line_id: u32,
    pub writer_id: u32,
    pub patches: &'a Patches,
    pub labels: &'a [u32],
}

/// Prior probability of each tied state, from label counts with add-one smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePrior {
    pub probs: Vec<f64>,
}

impl StatePrior {
    pub fn from_labels<'a>(num_states: usize, labels: impl IntoIterator<Item = &'a u32>) -> Self {
        let mut counts = vec![1.0; num_states];
        for &l in labels {
            counts[l as usize] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        Self {
            probs: counts.into_iter().map(|c| c / total).collect(),
        }
    }

    pub fn uniform(num_states: usize) -> Self {
        Self {
            probs: vec![1.0 / num_states as f64; num_states],
        }
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }
}

/// `ln p(s | x) - ln p(s)`: the posterior turned into a scaled likelihood.
pub fn scaled_likelihood(log_posterior: &[f64], prior: &StatePrior) -> Vec<f64> {
    log_posterior
        .iter()
        .zip(&prior.probs)
        .map(|(lp, p)| lp - p.ln())
        .collect()
}

/// A writer and its learned code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterProfile {
    pub writer_id: u32,
    pub code: Vec<f64>,
    pub pass_count: u32,
    /// Summed cross-entropy over the writer's frames: before the first
    /// update, then after every epoch.
    pub loss_history: Vec<f64>,
}

impl WriterProfile {
    /// A code drawn from `N(0, std^2)`, deterministic in `(seed, writer_id)`.
    pub fn random(writer_id: u32, code_dim: usize, std: f64, seed: u64) -> Self {
        use rand_distr::{Distribution, Normal};
        let mut rng = sub_rng(seed, "writer-code", writer_id as u64);
        let d = Normal::new(0.0, std).expect("valid std");
        Self {
            writer_id,
            code: (0..code_dim).map(|_| d.sample(&mut rng)).collect(),
            pass_count: 0,
            loss_history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate factor applied every `decay_every` minibatches.
    pub decay: f64,
    pub decay_every: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay: 0.92,
            decay_every: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveTrainConfig {
    pub epochs: usize,
    /// Initial step size for adaptation matrices and codes.
    pub learning_rate: f64,
    /// Step-size factor applied after every `decay_frames` processed frames.
    pub decay: f64,
    pub decay_frames: usize,
    pub code_init_std: f64,
}

impl Default for AdaptiveTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            learning_rate: 0.001,
            decay: 0.8,
            decay_frames: 5_000_000,
            code_init_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Epochs over the unknown writer's lines per decoding pass.
    pub epochs: usize,
    pub learning_rate: f64,
    pub code_init_std: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 0.001,
            code_init_std: 0.01,
        }
    }
}

/// Per-epoch training summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean frame cross-entropy of each epoch (first minibatch separately).
    pub epoch_loss: Vec<f64>,
    pub first_batch_loss: f64,
    pub frames: usize,
}

fn check_line(model: &AdaptiveClassifier, line: &LabeledLine) -> Result<()> {
    if line.patches.len() != line.labels.len() {
        return Err(Error::InvalidInput(format!(
            "line {}: {} patches but {} labels",
            line.line_id,
            line.patches.len(),
            line.labels.len()
        )));
    }
    if line.patches.height != model.patch_height || line.patches.width != model.patch_width {
        return Err(Error::Dimension(format!(
            "line {}: patches are {}x{}, model expects {}x{}",
            line.line_id, line.patches.height, line.patches.width, model.patch_height, model.patch_width
        )));
    }
    if let Some(&l) = line.labels.iter().find(|&&l| l as usize >= model.num_outputs()) {
        return Err(Error::Dimension(format!(
            "line {}: label {l} but the classifier has {} outputs",
            line.line_id,
            model.num_outputs()
        )));
    }
    Ok(())
}

/// All frames of a line prepared as network input.
pub fn prepare_line(model: &AdaptiveClassifier, patches: &Patches) -> Vec<f64> {
    let mut out = Vec::with_capacity(patches.len() * model.input_len());
    for t in 0..patches.len() {
        model.prepare(patches.get(t), &mut out);
    }
    out
}

fn sgd_step(params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>], velocity: &mut [Vec<f64>], lr: f64, momentum: f64, decay: f64) {
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
        for i in 0..p.len() {
            v[i] = momentum * v[i] - lr * (g[i] + decay * p[i]);
            p[i] += v[i];
        }
    }
}

/// Frame-level cross-entropy training of the writer-independent network.
///
/// Batch normalization uses minibatch statistics; afterwards the running
/// statistics are re-estimated over the training frames with the final
/// weights. Returns the label-count state prior.
pub fn train_base(
    model: &mut AdaptiveClassifier,
    lines: &[LabeledLine],
    cfg: &BaseTrainConfig,
    seed: u64,
) -> Result<(StatePrior, TrainReport)> {
    for l in lines {
        check_line(model, l)?;
    }
    let dim = model.input_len();
    let inputs: Vec<f64> = lines.par_iter().flat_map_iter(|l| prepare_line(model, l.patches)).collect();
    let labels: Vec<u32> = lines.iter().flat_map(|l| l.labels.iter().copied()).collect();
    if labels.is_empty() {
        return Err(Error::InvalidInput("no training frames".into()));
    }
    let prior = StatePrior::from_labels(model.num_outputs(), &labels);
    let batch = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut velocity: Vec<Vec<f64>> = model.base_params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut lr = cfg.learning_rate;
    let mut report = TrainReport {
        frames: labels.len(),
        first_batch_loss: f64::NAN,
        ..TrainReport::default()
    };
    let mut steps = 0usize;
    let mut xb = Vec::with_capacity(batch * dim);
    let mut yb = Vec::with_capacity(batch);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut sub_rng(seed, "base-shuffle", epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(&inputs[i * dim..(i + 1) * dim]);
                yb.push(labels[i]);
            }
            let (loss, grads, cache) = model.loss_and_gradients(&xb, &yb, None, BnMode::Batch, Reduction::Mean)?;
            if report.first_batch_loss.is_nan() {
                report.first_batch_loss = loss;
            }
            total += loss * chunk.len() as f64;
            let m = model.config.bn_momentum;
            for (blk, (mean, var)) in model.blocks.iter_mut().zip(AdaptiveClassifier::batch_moments(&cache)) {
                for k in 0..blk.out_channels {
                    blk.running_mean[k] = (1.0 - m) * blk.running_mean[k] + m * mean[k];
                    blk.running_var[k] = (1.0 - m) * blk.running_var[k] + m * var[k];
                }
            }
            sgd_step(model.base_params_mut(), &grads.base, &mut velocity, lr, cfg.momentum, cfg.weight_decay);
            steps += 1;
            if cfg.decay_every > 0 && steps % cfg.decay_every == 0 {
                lr *= cfg.decay;
            }
        }
        let mean = total / labels.len() as f64;
        info!("base epoch {epoch}: mean cross-entropy {mean:.4}");
        report.epoch_loss.push(mean);
    }
    recalibrate_batch_norm(model, &inputs, labels.len(), batch)?;
    Ok((prior, report))
}

/// Sets running statistics to the pooled batch statistics of `inputs`.
fn recalibrate_batch_norm(model: &mut AdaptiveClassifier, inputs: &[f64], count: usize, batch: usize) -> Result<()> {
    let dim = model.input_len();
    let nb = model.blocks.len();
    let mut sum: Vec<Vec<f64>> = model.blocks.iter().map(|b| vec![0.0; b.out_channels]).collect();
    let mut sum_sq = sum.clone();
    let mut seen = 0usize;
    for start in (0..count).step_by(batch) {
        let n = batch.min(count - start);
        let cache = model.forward(&inputs[start * dim..(start + n) * dim], n, None, BnMode::Batch)?;
        for (p, (mean, var)) in AdaptiveClassifier::batch_moments(&cache).into_iter().enumerate() {
            for k in 0..mean.len() {
                sum[p][k] += n as f64 * mean[k];
                sum_sq[p][k] += n as f64 * (var[k] + mean[k] * mean[k]);
            }
        }
        seen += n;
    }
    for p in 0..nb {
        let blk = &mut model.blocks[p];
        for k in 0..blk.out_channels {
            let m = sum[p][k] / seen as f64;
            blk.running_mean[k] = m;
            blk.running_var[k] = (sum_sq[p][k] / seen as f64 - m * m).max(0.0);
        }
    }
    Ok(())
}

/// Fresh random codes for `writers`.
pub fn init_profiles(writers: impl IntoIterator<Item = u32>, code_dim: usize, std: f64, seed: u64) -> BTreeMap<u32, WriterProfile> {
    writers
        .into_iter()
        .map(|w| (w, WriterProfile::random(w, code_dim, std, seed)))
        .collect()
}

/// Jointly trains the adaptation matrices and the training writers' codes
/// with the base parameters frozen; one minibatch is one line.
///
/// Batch normalization runs on its frozen running statistics here: within a
/// single-writer minibatch the code bias is constant per channel, so batch
/// statistics would subtract it again and leave it without gradient.
pub fn train_adaptive(
    model: &mut AdaptiveClassifier,
    profiles: &mut BTreeMap<u32, WriterProfile>,
    lines: &[LabeledLine],
    cfg: &AdaptiveTrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if model.num_adapted() == 0 {
        return Err(Error::Config("model has no adaptation layers".into()));
    }
    for l in lines {
        check_line(model, l)?;
        if !profiles.contains_key(&l.writer_id) {
            return Err(Error::UnknownWriter(l.writer_id));
        }
    }
    let prepared: Vec<Vec<f64>> = lines.par_iter().map(|l| prepare_line(model, l.patches)).collect();
    let mut order: Vec<usize> = (0..lines.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut frames_done = 0usize;
    let mut next_decay = cfg.decay_frames;
    let mut report = TrainReport {
        frames: lines.iter().map(|l| l.labels.len()).sum(),
        first_batch_loss: f64::NAN,
        ..TrainReport::default()
    };
    let initial = writer_losses(model, profiles, lines, &prepared)?;
    for (w, loss) in &initial {
        profiles.get_mut(w).expect("checked").loss_history.push(*loss);
    }
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut sub_rng(seed, "adaptive-shuffle", epoch as u64));
        let mut total = 0.0;
        for &i in &order {
            let line = &lines[i];
            let code = profiles[&line.writer_id].code.clone();
            let (loss, grads, _) =
                model.loss_and_gradients(&prepared[i], line.labels, Some(&code), BnMode::Running, Reduction::Sum)?;
            if report.first_batch_loss.is_nan() {
                report.first_batch_loss = loss;
            }
            total += loss;
            for (a, g) in model.adapt_params_mut().into_iter().zip(&grads.adapt) {
                a.iter_mut().zip(g).for_each(|(x, d)| *x -= lr * d);
            }
            let prof = profiles.get_mut(&line.writer_id).expect("checked");
            prof.code.iter_mut().zip(&grads.code).for_each(|(x, d)| *x -= lr * d);
            frames_done += line.labels.len();
            while cfg.decay_frames > 0 && frames_done >= next_decay {
                lr *= cfg.decay;
                next_decay += cfg.decay_frames;
            }
        }
        let mean = total / report.frames.max(1) as f64;
        info!("adaptive epoch {epoch}: mean cross-entropy {mean:.4}");
        report.epoch_loss.push(mean);
        for (w, loss) in writer_losses(model, profiles, lines, &prepared)? {
            let p = profiles.get_mut(&w).expect("checked");
            p.loss_history.push(loss);
        }
    }
    for p in profiles.values_mut() {
        p.pass_count += 1;
    }
    Ok(report)
}

fn writer_losses(
    model: &AdaptiveClassifier,
    profiles: &BTreeMap<u32, WriterProfile>,
    lines: &[LabeledLine],
    prepared: &[Vec<f64>],
) -> Result<BTreeMap<u32, f64>> {
    let per_line: Vec<(u32, f64)> = lines
        .par_iter()
        .zip(prepared)
        .map(|(l, x)| {
            let code = &profiles[&l.writer_id].code;
            line_loss(model, x, l.labels, Some(code)).map(|v| (l.writer_id, v))
        })
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for (w, v) in per_line {
        *out.entry(w).or_insert(0.0) += v;
    }
    Ok(out)
}

fn line_loss(model: &AdaptiveClassifier, inputs: &[f64], labels: &[u32], code: Option<&[f64]>) -> Result<f64> {
    let lp = model.log_posteriors(inputs, labels.len(), code)?;
    let n = model.num_outputs();
    Ok(-labels.iter().enumerate().map(|(t, &l)| lp[t * n + l as usize]).sum::<f64>())
}

/// Estimates the code of an unseen writer from pseudo-labeled lines with
/// every network parameter frozen.
///
/// `initial` continues from an earlier pass; otherwise the code starts from
/// `N(0, code_init_std^2)` seeded by `(seed, writer_id)`.
pub fn adapt_unknown_writer(
    model: &AdaptiveClassifier,
    writer_id: u32,
    lines: &[LabeledLine],
    initial: Option<&WriterProfile>,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<WriterProfile> {
    if model.num_adapted() == 0 {
        return Err(Error::Config("model has no adaptation layers".into()));
    }
    let mut profile = match initial {
        Some(p) => p.clone(),
        None => WriterProfile::random(writer_id, model.code_dim(), cfg.code_init_std, seed),
    };
    if lines.is_empty() {
        warn!("writer {writer_id}: no adaptation data, using the zero code");
        profile.code = vec![0.0; model.code_dim()];
        return Ok(profile);
    }
    for l in lines {
        check_line(model, l)?;
    }
    let prepared: Vec<Vec<f64>> = lines.iter().map(|l| prepare_line(model, l.patches)).collect();
    let total_loss = |code: &[f64]| -> Result<f64> {
        lines
            .iter()
            .zip(&prepared)
            .map(|(l, x)| line_loss(model, x, l.labels, Some(code)))
            .sum()
    };
    profile.loss_history.push(total_loss(&profile.code)?);
    let mut order: Vec<usize> = (0..lines.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut sub_rng(seed, "adapt-shuffle", ((writer_id as u64) << 16) | epoch as u64));
        for &i in &order {
            let (_, grads, _) = model.loss_and_gradients(
                &prepared[i],
                lines[i].labels,
                Some(&profile.code),
                BnMode::Running,
                Reduction::Sum,
            )?;
            profile
                .code
                .iter_mut()
                .zip(&grads.code)
                .for_each(|(x, d)| *x -= cfg.learning_rate * d);
        }
        profile.loss_history.push(total_loss(&profile.code)?);
    }
    profile.pass_count += 1;
    Ok(profile)
}

/// Frame log-posteriors of a line, `frames x outputs` row-major.
pub fn line_log_posteriors(model: &AdaptiveClassifier, patches: &Patches, code: Option<&[f64]>) -> Result<Vec<f64>> {
    const CHUNK: usize = 64;
    let inputs = prepare_line(model, patches);
    let dim = model.input_len();
    let n = patches.len();
    let parts: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let (a, b) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
            model.log_posteriors(&inputs[a * dim..b * dim], b - a, code)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}
