//! Both training phases: multi-task pre-training of PretrainNet, then joint
//! CPNet + RefineNet training on the coarse-to-fine objective.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::models::{
    compose_rpet, transfer_encoder, CpNet, EncoderDecoder, EncoderDecoderConfig, PretrainNet,
    RefineNet,
};
use crate::nn::{l1_loss, mse_loss, softmax_cross_entropy, Adam, Mode, ModelParams, ParamGroup, Tensor};
use crate::phantom::{mix_seed, SliceSample, DRFS};

const PRETRAIN_INIT_STREAM: u64 = 1;
const CPNET_INIT_STREAM: u64 = 2;
const REFINENET_INIT_STREAM: u64 = 3;
const PRETRAIN_ORDER_STREAM: u64 = 11;
const PREDICTION_ORDER_STREAM: u64 = 12;

/// Eval-mode batches never need to be large; this only bounds memory.
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the RefineNet term in the prediction-phase loss.
    pub beta: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Treat `r = spet - coarse` as a constant target.
    pub detach_residual_target: bool,
    pub base_channels: usize,
    /// Keep the transferred encoder fixed during the prediction phase.
    pub freeze_encoder: bool,
    /// Train RefineNet alongside CPNet; without it RPET is the coarse output.
    pub use_refinenet: bool,
    /// Replace the ramp with a constant reconstruction weight.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_lambda: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-4,
            batch_size: 8,
            beta: 1.0,
            seed: 0,
            shuffle: true,
            detach_residual_target: true,
            base_channels: 16,
            freeze_encoder: false,
            use_refinenet: true,
            fixed_lambda: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be nonnegative, got {}", self.beta)));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be at least 1"));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invalid(format!("fixed_lambda must lie in [0, 1], got {l}")));
            }
        }
        Ok(())
    }

    fn lambda(&self, epoch: usize) -> Result<f64> {
        match self.fixed_lambda {
            Some(l) => Ok(l),
            None => lambda_schedule(epoch, self.epochs),
        }
    }
}

/// Mean per-sample losses of one epoch. Terms that do not apply to the
/// phase are `None` and render as empty CSV fields.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: Option<f64>,
    pub mse: Option<f64>,
    pub ce: Option<f64>,
    pub accuracy: Option<f64>,
    pub l_cpnet: Option<f64>,
    pub l_refinenet: Option<f64>,
    pub total: f64,
    pub seconds: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,lambda,mse,ce,acc,l_cp,l_refine,total,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{:.9e},{:.3}",
            self.epoch,
            f(self.lambda),
            f(self.mse),
            f(self.ce),
            f(self.accuracy),
            f(self.l_cpnet),
            f(self.l_refinenet),
            self.total,
            self.seconds
        )
    }
}

pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for l in logs {
        let _ = writeln!(out, "{}", l.csv_row());
    }
    out
}

/// Linear ramp from 0 at the first epoch to 1 at the last.
pub fn lambda_schedule(epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 || epoch >= total_epochs {
        return Err(Error::invalid(format!(
            "lambda_schedule: epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    if total_epochs == 1 {
        return Ok(1.0);
    }
    Ok(epoch as f64 / (total_epochs - 1) as f64)
}

#[derive(Debug, Clone)]
pub struct PretrainLoss<T> {
    pub total: T,
    pub mse: T,
    pub ce: T,
    pub d_recon: Tensor<T>,
    pub d_logits: Tensor<T>,
}

/// `lambda * mse(recon, lpet) + (1 - lambda) * ce(logits, labels)`.
pub fn pretrain_loss<T: crate::nn::Real>(
    recon: &Tensor<T>,
    lpet: &Tensor<T>,
    logits: &Tensor<T>,
    labels: &Tensor<T>,
    lambda: T,
) -> Result<PretrainLoss<T>> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::invalid(format!("pretrain_loss: lambda {lambda} outside [0, 1]")));
    }
    let mse = mse_loss(recon, lpet)?;
    let ce = softmax_cross_entropy(logits, labels)?;
    let w = T::one() - lambda;
    Ok(PretrainLoss {
        total: lambda * mse.value + w * ce.value,
        mse: mse.value,
        ce: ce.value,
        d_recon: mse.grad.scale(lambda),
        d_logits: ce.grad.scale(w),
    })
}

#[derive(Debug, Clone)]
pub struct PredictionLosses<T> {
    pub total: T,
    pub l_cpnet: T,
    pub l_refinenet: T,
    /// Gradient of `total` w.r.t. the coarse output, excluding the path
    /// through RefineNet's input.
    pub d_coarse: Tensor<T>,
    pub d_residual: Tensor<T>,
}

/// `l1(coarse, spet) + beta * l1(residual_hat, spet - coarse)`.
pub fn prediction_losses<T: crate::nn::Real>(
    coarse: &Tensor<T>,
    spet: &Tensor<T>,
    residual_hat: &Tensor<T>,
    beta: T,
    detach_residual_target: bool,
) -> Result<PredictionLosses<T>> {
    if !(beta >= T::zero()) {
        return Err(Error::invalid(format!("prediction_losses: beta {beta} is negative")));
    }
    let cp = l1_loss(coarse, spet)?;
    let r = spet.zip_map(coarse, "prediction_losses", |s, c| s - c)?;
    let rf = l1_loss(residual_hat, &r)?;
    let d_residual = rf.grad.scale(beta);
    let d_coarse = if detach_residual_target {
        cp.grad
    } else {
        // d r / d coarse = -1, and d l1 / d r = -d l1 / d residual_hat.
        cp.grad.zip_map(&d_residual, "prediction_losses", |a, b| a + b)?
    };
    Ok(PredictionLosses {
        total: cp.value + beta * rf.value,
        l_cpnet: cp.value,
        l_refinenet: rf.value,
        d_coarse,
        d_residual,
    })
}

/// LPET, SPET and labels of a batch as `[n, 1, s, s]` tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub lpet: Tensor<f32>,
    pub spet: Tensor<f32>,
    pub labels: Vec<usize>,
    pub one_hot: Tensor<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[&SliceSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let s = first.size;
        let n = samples.len();
        let mut lpet = Vec::with_capacity(n * s * s);
        let mut spet = Vec::with_capacity(n * s * s);
        let mut labels = Vec::with_capacity(n);
        let mut one_hot = vec![0.0f32; n * DRFS.len()];
        for (i, x) in samples.iter().enumerate() {
            if x.size != s {
                return Err(Error::shape("batch", format!("{s}x{s} slices"), format!("{0}x{0}", x.size)));
            }
            lpet.extend_from_slice(&x.lpet);
            spet.extend_from_slice(&x.spet);
            labels.push(x.drf_class);
            one_hot[i * DRFS.len() + x.drf_class] = 1.0;
        }
        Ok(Self {
            lpet: Tensor::new(vec![n, 1, s, s], lpet)?,
            spet: Tensor::new(vec![n, 1, s, s], spet)?,
            labels,
            one_hot: Tensor::new(vec![n, DRFS.len()], one_hot)?,
        })
    }
}

/// Seeded epoch orders; every phase with the same seed and sample count
/// visits samples in the same sequence.
struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    shuffle: bool,
}

impl BatchOrder {
    fn new(n: usize, seed: u64, stream: u64, shuffle: bool) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, stream)),
            order: (0..n).collect(),
            shuffle,
        }
    }

    /// Index batches for the next epoch. A trailing batch of one sample is
    /// merged into the previous batch because train-mode batch norm needs
    /// at least two values per channel at a 1x1 bottleneck.
    fn next_epoch(&mut self, batch_size: usize) -> Vec<&[usize]> {
        if self.shuffle {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
        }
        let n = self.order.len();
        let mut bounds: Vec<usize> = (0..n).step_by(batch_size).collect();
        if bounds.len() > 1 && n - bounds[bounds.len() - 1] == 1 {
            bounds.pop();
        }
        bounds
            .iter()
            .enumerate()
            .map(|(i, &start)| &self.order[start..bounds.get(i + 1).copied().unwrap_or(n)])
            .collect()
    }
}

fn image_size(samples: &[SliceSample]) -> Result<usize> {
    let s = samples
        .first()
        .ok_or_else(|| Error::invalid("training set is empty"))?
        .size;
    if samples.iter().any(|x| x.size != s) {
        return Err(Error::invalid("training slices have mixed sizes"));
    }
    Ok(s)
}

fn check_finite(phase: &str, epoch: usize, batch: usize, what: &str, v: f32) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{phase}: epoch {epoch} batch {batch}: {what} loss is {v}"
        )))
    }
}

/// Writes a network checkpoint plus `<stem>.model.toml` describing its
/// architecture.
pub fn save_network(stem: &Path, config: &EncoderDecoderConfig, params: &ModelParams<f32>) -> Result<()> {
    params.save_checkpoint(stem)?;
    let path = model_config_path(stem);
    let text = toml::to_string(config).map_err(|e| Error::format(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Rebuilds a network from [`save_network`] output.
pub fn load_network(stem: &Path) -> Result<(EncoderDecoder, ModelParams<f32>)> {
    let path = model_config_path(stem);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config: EncoderDecoderConfig = toml::from_str(&text).map_err(|e| Error::format(&path, e))?;
    let (trunk, mut params) = EncoderDecoder::build::<f32>(config, 0)?;
    params.load_checkpoint(stem)?;
    Ok((trunk, params))
}

pub fn model_config_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".model.toml");
    PathBuf::from(s)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub net: PretrainNet,
    pub params: ModelParams<f32>,
    pub logs: Vec<EpochLog>,
}

impl PretrainOutcome {
    pub fn save(&self, stem: &Path) -> Result<()> {
        save_network(stem, self.net.trunk.config(), &self.params)
    }
}

pub fn load_pretrained(stem: &Path) -> Result<(PretrainNet, ModelParams<f32>)> {
    let (trunk, params) = load_network(stem)?;
    if !trunk.config().with_classifier {
        return Err(Error::format(stem, "checkpoint is not a PretrainNet"));
    }
    Ok((PretrainNet { trunk }, params))
}

pub fn run_pretrain(train: &[SliceSample], config: &TrainConfig) -> Result<PretrainOutcome> {
    run_pretrain_observed(train, config, |_| {})
}

/// [`run_pretrain`] with a callback after every epoch.
pub fn run_pretrain_observed(
    train: &[SliceSample],
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    config.validate()?;
    let size = image_size(train)?;
    for (class, drf) in DRFS.iter().enumerate() {
        if !train.iter().any(|s| s.drf_class == class) {
            return Err(Error::invalid(format!("training set has no DRF {drf} slices")));
        }
    }
    let (net, mut params) =
        PretrainNet::build::<f32>(config.base_channels, size, mix_seed(config.seed, PRETRAIN_INIT_STREAM))?;
    let mut adam = Adam::new(&[&params], config.lr);
    let mut order = BatchOrder::new(train.len(), config.seed, PRETRAIN_ORDER_STREAM, config.shuffle);
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lambda = config.lambda(epoch)?;
        let (mut sum_total, mut sum_mse, mut sum_ce, mut hits) = (0.0, 0.0, 0.0, 0.0);
        for (b, chunk) in order.next_epoch(config.batch_size).into_iter().enumerate() {
            let refs: Vec<&SliceSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_samples(&refs)?;
            let out = net.forward(&params, &batch.lpet, Mode::Train)?;
            let loss = pretrain_loss(&out.recon, &batch.lpet, &out.logits, &batch.one_hot, lambda as f32)?;
            check_finite("pretrain", epoch, b, "total", loss.total)?;
            params.zero_grad();
            net.backward(&mut params, &out.tape, &loss.d_recon, &loss.d_logits)?;
            net.trunk.commit_running_stats(&mut params, &out.tape);
            adam.step(&mut [&mut params])?;
            let n = refs.len() as f64;
            sum_total += loss.total as f64 * n;
            sum_mse += loss.mse as f64 * n;
            sum_ce += loss.ce as f64 * n;
            hits += accuracy(&out.logits, &batch.labels)? * n;
        }
        let n = train.len() as f64;
        let log = EpochLog {
            epoch,
            lambda: Some(lambda),
            mse: Some(sum_mse / n),
            ce: Some(sum_ce / n),
            accuracy: Some(hits / n),
            l_cpnet: None,
            l_refinenet: None,
            total: sum_total / n,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&log);
        logs.push(log);
    }
    params.clear_grads();
    Ok(PretrainOutcome { net, params, logs })
}

/// Eval-mode DRF predictions of a PretrainNet.
pub fn classify(net: &PretrainNet, params: &ModelParams<f32>, samples: &[SliceSample]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs)?;
        let fwd = net.forward(params, &batch.lpet, Mode::Eval)?;
        out.extend(crate::metrics::argmax_rows(&fwd.logits)?);
    }
    Ok(out)
}

/// Eval-mode classification accuracy over `samples`.
pub fn classification_accuracy(
    net: &PretrainNet,
    params: &ModelParams<f32>,
    samples: &[SliceSample],
) -> Result<f64> {
    let pred = classify(net, params, samples)?;
    let hits = pred.iter().zip(samples).filter(|(p, s)| **p == s.drf_class).count();
    Ok(hits as f64 / samples.len().max(1) as f64)
}

/// Output of a trained prediction model for a batch.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub coarse: Tensor<f32>,
    pub residual: Option<Tensor<f32>>,
    pub rpet: Tensor<f32>,
}

/// CPNet with an optional RefineNet.
#[derive(Debug, Clone)]
pub struct PredictionModel {
    pub cpnet: CpNet,
    pub cp_params: ModelParams<f32>,
    pub refine: Option<(RefineNet, ModelParams<f32>)>,
}

pub const CPNET_STEM: &str = "cpnet";
pub const REFINENET_STEM: &str = "refinenet";

impl PredictionModel {
    /// Eval-mode prediction of `[n, 1, s, s]` LPET input.
    pub fn predict(&self, lpet: &Tensor<f32>) -> Result<Prediction> {
        let (coarse, _) = self.cpnet.forward(&self.cp_params, lpet, Mode::Eval)?;
        match &self.refine {
            Some((net, p)) => {
                let (residual, _) = net.forward(p, &coarse, lpet, Mode::Eval)?;
                let rpet = compose_rpet(&coarse, &residual)?;
                Ok(Prediction {
                    coarse,
                    residual: Some(residual),
                    rpet,
                })
            }
            None => {
                let rpet = coarse.map(|v| v.clamp(0.0, 1.0));
                Ok(Prediction {
                    coarse,
                    residual: None,
                    rpet,
                })
            }
        }
    }

    /// RPET images for every sample, in order.
    pub fn reconstruct(&self, samples: &[SliceSample]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_BATCH) {
            let refs: Vec<&SliceSample> = chunk.iter().collect();
            let batch = Batch::from_samples(&refs)?;
            let pred = self.predict(&batch.lpet)?;
            let per = pred.rpet.len() / chunk.len();
            out.extend(pred.rpet.data().chunks(per).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_network(&dir.join(CPNET_STEM), self.cpnet.trunk.config(), &self.cp_params)?;
        if let Some((net, p)) = &self.refine {
            save_network(&dir.join(REFINENET_STEM), net.trunk.config(), p)?;
        }
        Ok(())
    }

    /// Loads `cpnet.*` and, when present, `refinenet.*` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let (trunk, cp_params) = load_network(&dir.join(CPNET_STEM))?;
        let rf_stem = dir.join(REFINENET_STEM);
        let refine = if model_config_path(&rf_stem).exists() {
            let (trunk, p) = load_network(&rf_stem)?;
            Some((RefineNet { trunk }, p))
        } else {
            None
        };
        Ok(Self {
            cpnet: CpNet { trunk },
            cp_params,
            refine,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PredictionOutcome {
    pub model: PredictionModel,
    pub logs: Vec<EpochLog>,
}

/// Builds the prediction-phase networks, transferring the encoder when
/// pre-trained weights are given.
pub fn init_prediction_model(
    size: usize,
    pretrained: Option<&ModelParams<f32>>,
    config: &TrainConfig,
) -> Result<PredictionModel> {
    let (cpnet, mut cp_params) =
        CpNet::build::<f32>(config.base_channels, size, mix_seed(config.seed, CPNET_INIT_STREAM))?;
    if let Some(src) = pretrained {
        transfer_encoder(src, &mut cp_params)?;
    }
    if config.freeze_encoder {
        cp_params.freeze(ParamGroup::Encoder);
    }
    let refine = if config.use_refinenet {
        Some(RefineNet::build::<f32>(
            config.base_channels,
            size,
            mix_seed(config.seed, REFINENET_INIT_STREAM),
        )?)
    } else {
        None
    };
    Ok(PredictionModel {
        cpnet,
        cp_params,
        refine,
    })
}

pub fn run_prediction_phase(
    train: &[SliceSample],
    pretrained: Option<&ModelParams<f32>>,
    config: &TrainConfig,
) -> Result<PredictionOutcome> {
    run_prediction_phase_observed(train, pretrained, config, |_| {})
}

/// [`run_prediction_phase`] with a callback after every epoch.
pub fn run_prediction_phase_observed(
    train: &[SliceSample],
    pretrained: Option<&ModelParams<f32>>,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochLog),
) -> Result<PredictionOutcome> {
    config.validate()?;
    let size = image_size(train)?;
    let mut model = init_prediction_model(size, pretrained, config)?;
    let mut adam = {
        let mut nets = vec![&model.cp_params];
        if let Some((_, p)) = &model.refine {
            nets.push(p);
        }
        Adam::new(&nets, config.lr)
    };
    let mut order = BatchOrder::new(train.len(), config.seed, PREDICTION_ORDER_STREAM, config.shuffle);
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let (mut sum_total, mut sum_cp, mut sum_rf) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.next_epoch(config.batch_size).into_iter().enumerate() {
            let refs: Vec<&SliceSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_samples(&refs)?;
            let step = prediction_step(&mut model, &batch, config)?;
            check_finite("prediction", epoch, b, "total", step.0)?;
            let mut nets = vec![&mut model.cp_params];
            if let Some((_, p)) = &mut model.refine {
                nets.push(p);
            }
            adam.step(&mut nets)?;
            let n = refs.len() as f64;
            sum_total += step.0 as f64 * n;
            sum_cp += step.1 as f64 * n;
            sum_rf += step.2.unwrap_or(0.0) as f64 * n;
        }
        let n = train.len() as f64;
        let log = EpochLog {
            epoch,
            lambda: None,
            mse: None,
            ce: None,
            accuracy: None,
            l_cpnet: Some(sum_cp / n),
            l_refinenet: model.refine.as_ref().map(|_| sum_rf / n),
            total: sum_total / n,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&log);
        logs.push(log);
    }
    model.cp_params.clear_grads();
    if let Some((_, p)) = &mut model.refine {
        p.clear_grads();
    }
    Ok(PredictionOutcome { model, logs })
}

/// Forward, loss and backward for one batch; leaves gradients in the
/// parameter sets and commits batch-norm statistics. Returns
/// `(total, l_cpnet, l_refinenet)`.
pub fn prediction_step(
    model: &mut PredictionModel,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(f32, f32, Option<f32>)> {
    let (coarse, cp_tape) = model.cpnet.forward(&model.cp_params, &batch.lpet, Mode::Train)?;
    model.cp_params.zero_grad();
    match &mut model.refine {
        Some((net, p)) => {
            let (residual, rf_tape) = net.forward(p, &coarse, &batch.lpet, Mode::Train)?;
            let loss = prediction_losses(
                &coarse,
                &batch.spet,
                &residual,
                config.beta as f32,
                config.detach_residual_target,
            )?;
            p.zero_grad();
            let via_refine = net.backward(p, &rf_tape, &loss.d_residual)?;
            net.trunk.commit_running_stats(p, &rf_tape);
            let d_coarse = loss.d_coarse.zip_map(&via_refine, "prediction_step", |a, b| a + b)?;
            model.cpnet.backward(&mut model.cp_params, &cp_tape, &d_coarse)?;
            model.cpnet.trunk.commit_running_stats(&mut model.cp_params, &cp_tape);
            Ok((loss.total, loss.l_cpnet, Some(loss.l_refinenet)))
        }
        None => {
            let loss = l1_loss(&coarse, &batch.spet)?;
            model.cpnet.backward(&mut model.cp_params, &cp_tape, &loss.grad)?;
            model.cpnet.trunk.commit_running_stats(&mut model.cp_params, &cp_tape);
            Ok((loss.value, loss.value, None))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_activity, simulate_pair, DEFAULT_TOTAL_COUNTS};

    fn samples(n_subjects: u64, size: usize) -> Vec<SliceSample> {
        let mut out = Vec::new();
        for s in 0..n_subjects {
            let act = generate_activity(100 + s, size).unwrap();
            for &drf in &DRFS {
                let mut x = simulate_pair(&act, drf, DEFAULT_TOTAL_COUNTS, mix_seed(s, drf as u64)).unwrap();
                x.subject_id = s as u32;
                out.push(x);
            }
        }
        out
    }

    fn small(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            base_channels: 4,
            lr: 2e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lambda_schedule(0, 100).unwrap(), 0.0);
        assert_eq!(lambda_schedule(99, 100).unwrap(), 1.0);
        assert_eq!(lambda_schedule(50, 101).unwrap(), 0.5);
        assert_eq!(lambda_schedule(0, 1).unwrap(), 1.0);
        assert!(lambda_schedule(5, 5).is_err());
        assert!(lambda_schedule(0, 0).is_err());
    }

    #[test]
    fn pretrain_loss_arithmetic() {
        let recon = Tensor::new(vec![1, 1, 1, 2], vec![0.0f64, 0.0]).unwrap();
        let lpet = Tensor::new(vec![1, 1, 1, 2], vec![0.2f64.sqrt(), 0.2f64.sqrt()]).unwrap();
        let logits = Tensor::new(vec![1, 3], vec![0.0f64, 0.0, 0.0]).unwrap();
        let labels = Tensor::new(vec![1, 3], vec![1.0f64, 0.0, 0.0]).unwrap();
        let l = pretrain_loss(&recon, &lpet, &logits, &labels, 0.5).unwrap();
        assert!((l.mse - 0.2).abs() < 1e-15);
        assert!((l.ce - 3f64.ln()).abs() < 1e-15);
        assert!((l.total - (0.1 + 0.5 * 3f64.ln())).abs() < 1e-15);
        assert!(pretrain_loss(&recon, &lpet, &logits, &labels, 1.5).is_err());
    }

    #[test]
    fn prediction_loss_examples() {
        let s = Tensor::from_fn(&[1, 1, 2, 2], |i| 0.2 * i as f64);
        let zero = Tensor::zeros(&[1, 1, 2, 2]);
        let exact = prediction_losses(&s, &s, &zero, 1.0, true).unwrap();
        assert_eq!(exact.total, 0.0);
        let off = s.map(|v| v + 0.1);
        let l = prediction_losses(&off, &s, &zero, 1.0, true).unwrap();
        assert!((l.total - 0.2).abs() < 1e-12);
        let l0 = prediction_losses(&off, &s, &zero, 0.0, true).unwrap();
        assert_eq!(l0.total, l0.l_cpnet);
    }

    #[test]
    fn undetached_residual_adds_refine_gradient_to_coarse() {
        let s = Tensor::from_fn(&[1, 1, 2, 2], |i| 0.2 * i as f64);
        let c = s.map(|v| v + 0.1);
        let r = Tensor::full(&[1, 1, 2, 2], 0.3);
        let det = prediction_losses(&c, &s, &r, 2.0, true).unwrap();
        let live = prediction_losses(&c, &s, &r, 2.0, false).unwrap();
        assert_eq!(det.total, live.total);
        for ((a, b), g) in live.d_coarse.data().iter().zip(det.d_coarse.data()).zip(det.d_residual.data()) {
            assert!((a - (b + g)).abs() < 1e-15);
        }
        // Finite-difference check of the undetached coarse gradient.
        let h = 1e-6;
        for i in 0..4 {
            let mut cp = c.clone();
            cp.data_mut()[i] += h;
            let mut cm = c.clone();
            cm.data_mut()[i] -= h;
            let fd = (prediction_losses(&cp, &s, &r, 2.0, false).unwrap().total
                - prediction_losses(&cm, &s, &r, 2.0, false).unwrap().total)
                / (2.0 * h);
            assert!((fd - live.d_coarse.data()[i]).abs() < 1e-6, "{fd} vs {}", live.d_coarse.data()[i]);
        }
    }

    #[test]
    fn config_validation_and_toml_round_trip() {
        let c = TrainConfig {
            fixed_lambda: Some(1.0),
            ..TrainConfig::default()
        };
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), c);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
        for bad in [
            TrainConfig { epochs: 0, ..c.clone() },
            TrainConfig { lr: 0.0, ..c.clone() },
            TrainConfig { batch_size: 0, ..c.clone() },
            TrainConfig { beta: -1.0, ..c.clone() },
            TrainConfig { fixed_lambda: Some(2.0), ..c.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn pretrain_logs_schedule_and_is_deterministic() {
        let data = samples(2, 16);
        let cfg = small(3);
        let a = run_pretrain(&data, &cfg).unwrap();
        let b = run_pretrain(&data, &cfg).unwrap();
        assert_eq!(a.logs[0].lambda, Some(0.0));
        assert_eq!(a.logs[2].lambda, Some(1.0));
        for (x, y) in a.logs.iter().zip(&b.logs) {
            assert_eq!(x.total, y.total);
            assert_eq!(x.mse, y.mse);
        }
        for (x, y) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(x.tensor.data(), y.tensor.data(), "{}", x.name);
        }
        let fixed = run_pretrain(&data, &TrainConfig { fixed_lambda: Some(1.0), ..cfg }).unwrap();
        assert!(fixed.logs.iter().all(|l| l.lambda == Some(1.0)));
    }

    #[test]
    fn pretrain_rejects_missing_drf_class() {
        let data: Vec<_> = samples(2, 16).into_iter().filter(|s| s.drf != 50).collect();
        let err = run_pretrain(&data, &small(1)).unwrap_err();
        assert!(err.to_string().contains("DRF 50"), "{err}");
    }

    #[test]
    fn prediction_phase_reduces_loss() {
        let data = samples(3, 16);
        let out = run_prediction_phase(&data, None, &small(40)).unwrap();
        let first = out.logs.first().unwrap().total;
        let last = out.logs.last().unwrap().total;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn freeze_keeps_encoder_fixed() {
        let data = samples(2, 16);
        let cfg = TrainConfig {
            freeze_encoder: true,
            ..small(2)
        };
        let init = init_prediction_model(16, None, &cfg).unwrap();
        let out = run_prediction_phase(&data, None, &cfg).unwrap();
        for (a, b) in init.cp_params.group(ParamGroup::Encoder).zip(out.model.cp_params.group(ParamGroup::Encoder)) {
            if a.kind == crate::nn::ParamKind::Trainable {
                assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
            }
        }
        assert!(!init.cp_params.group_bits_equal(&out.model.cp_params, ParamGroup::Decoder));
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let data = samples(1, 16);
        let out = run_prediction_phase(&data, None, &small(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.model.save(dir.path()).unwrap();
        let back = PredictionModel::load(dir.path()).unwrap();
        assert_eq!(out.model.reconstruct(&data).unwrap(), back.reconstruct(&data).unwrap());

        let cp_only = run_prediction_phase(&data, None, &TrainConfig { use_refinenet: false, ..small(1) }).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        cp_only.model.save(dir2.path()).unwrap();
        assert!(PredictionModel::load(dir2.path()).unwrap().refine.is_none());
        assert!(PredictionModel::load(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn epoch_log_csv_has_empty_fields_for_other_phase() {
        let log = EpochLog {
            epoch: 3,
            lambda: None,
            mse: None,
            ce: None,
            accuracy: None,
            l_cpnet: Some(0.5),
            l_refinenet: Some(0.25),
            total: 0.75,
            seconds: 1.0,
        };
        let row = log.csv_row();
        assert_eq!(row.split(',').count(), EPOCH_LOG_HEADER.split(',').count());
        assert!(row.starts_with("3,,,,,"));
    }
}
