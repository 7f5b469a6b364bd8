//! Adversarial training with low-rank regularization, followed by Tucker-2
//! decomposition and factorized adversarial fine-tuning.
//!
//! Phase 1 keeps, per compressible layer, an auxiliary low-rank copy `Z` and
//! a dual variable `M`. Each SGD step on an adversarial batch adds
//! `ρ(W − Z + M)` to the weight gradient. At the end of every epoch (or every
//! batch, with [`DualUpdate::PerBatch`]) `Z ← project(W + M)` at the current
//! plan ranks and `M ← M + W − Z`. The plan is re-derived from the spectra of
//! `W + M` every `refresh_period` epochs.
//!
//! Phase 2 decomposes each `W` at the final plan ranks and fine-tunes the
//! factorized model adversarially with a fresh learning-rate schedule.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AdvConfig};
use crate::error::{invalid, Error, Result};
use crate::io::Dataset;
use crate::nn::{loss_and_grad, argmax, GradRequest, Layer, Mode, Model, Sgd, ConvFactorized};
use crate::rank_select::{select, spectra_from_weights, RankPlan, RankScheme, DEFAULT_MIN_RANK};
use crate::tensor::Tensor;
use crate::tucker::{decompose, project, ConvWeight};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DualUpdate {
    PerEpoch,
    PerBatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CstarConfig {
    pub rho: f64,
    /// Ramp ρ linearly over the first 10% of phase-1 epochs.
    pub rho_warmup: bool,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub t1: usize,
    pub t2: usize,
    pub target_ratio: f64,
    pub refresh_period: usize,
    pub scheme: RankScheme,
    pub min_rank: usize,
    pub dual_update: DualUpdate,
    pub adv_train: AdvConfig,
    pub adv_eval: AdvConfig,
    /// Evaluate on the test split every this many epochs (and always at phase ends).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for CstarConfig {
    fn default() -> Self {
        Self {
            rho: 1e-2,
            rho_warmup: false,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            t1: 15,
            t2: 15,
            target_ratio: 4.0,
            refresh_period: 1,
            scheme: RankScheme::Global,
            min_rank: DEFAULT_MIN_RANK,
            dual_update: DualUpdate::PerEpoch,
            adv_train: AdvConfig::standard(10, true),
            adv_eval: AdvConfig::standard(20, false),
            eval_every: 1,
            seed: 0,
        }
    }
}

impl CstarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return invalid(format!("rho must be non-negative, got {}", self.rho));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate must be non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 || self.refresh_period == 0 || self.eval_every == 0 {
            return invalid("batch_size, refresh_period and eval_every must be positive");
        }
        self.adv_train.validate()?;
        self.adv_eval.validate()
    }
}

/// Step decay: ×0.1 once each at 25%, 50% and 75% of `total` epochs.
pub fn step_decay(base: f64, epoch: usize, total: usize) -> f64 {
    let passed = [0.25, 0.5, 0.75].iter().filter(|&&f| epoch as f64 >= f * total as f64).count();
    base * 0.1f64.powi(passed as i32)
}

/// ρ for a phase-1 epoch, with the optional linear warm-up.
pub fn rho_at(cfg: &CstarConfig, epoch: usize) -> f64 {
    if !cfg.rho_warmup {
        return cfg.rho;
    }
    let ramp = ((cfg.t1 as f64) * 0.1).ceil().max(1.0);
    cfg.rho * ((epoch + 1) as f64 / ramp).min(1.0)
}

/// Independent stream per `(phase, epoch)` derived from the run seed.
pub fn epoch_rng(seed: u64, phase: u32, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase as u64) << 32) | epoch as u64);
    rng
}

/// Shuffled mini-batch index lists for one epoch.
pub fn batch_order(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualLayer {
    pub name: String,
    pub layer_index: usize,
    pub z: ConvWeight,
    pub m: ConvWeight,
}

/// Auxiliary and dual variables of every compressible layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub layers: Vec<DualLayer>,
}

impl DualState {
    /// `Z = W`, `M = 0`.
    pub fn init(model: &Model) -> Result<Self> {
        let mut layers = Vec::new();
        for name in &model.compressible {
            let li = model.layer_index(name).ok_or_else(|| Error::InvalidArgument(format!("no layer {name:?}")))?;
            let w = dense_weight(model, li)?;
            layers.push(DualLayer {
                name: name.clone(),
                layer_index: li,
                m: ConvWeight::new(Tensor::zeros(w.shape()))?,
                z: ConvWeight::new(w.clone())?,
            });
        }
        Ok(Self { layers })
    }

    fn check(&self, model: &Model) -> Result<()> {
        for d in &self.layers {
            let w = dense_weight(model, d.layer_index)?;
            if w.shape() != d.z.tensor().shape() || w.shape() != d.m.tensor().shape() {
                return Err(Error::Shape(format!("dual state for {:?} does not match its weight {:?}", d.name, w.shape())));
            }
        }
        Ok(())
    }

    /// `W + M` for every layer, as rank-selection input.
    pub fn shifted_weights(&self, model: &Model) -> Result<Vec<(String, ConvWeight)>> {
        self.layers
            .iter()
            .map(|d| Ok((d.name.clone(), ConvWeight::new(dense_weight(model, d.layer_index)?.add(d.m.tensor())?)?)))
            .collect()
    }

    /// `Z ← project(W + M)`, then `M ← M + W − Z`.
    pub fn update(&mut self, model: &Model, plan: &RankPlan) -> Result<()> {
        for d in &mut self.layers {
            let lr = plan
                .get(&d.name)
                .ok_or_else(|| Error::InvalidArgument(format!("rank plan has no layer {:?}", d.name)))?;
            let w = dense_weight(model, d.layer_index)?;
            let z = project(&ConvWeight::new(w.add(d.m.tensor())?)?, (lr.r1, lr.r2))?;
            let m = d.m.tensor().add(w)?.sub(z.tensor())?;
            d.z = z;
            d.m = ConvWeight::new(m)?;
        }
        Ok(())
    }

    /// `ρ(W − Z + M)` aligned with the model's layers.
    pub fn penalty_gradients(&self, model: &Model, rho: f64) -> Result<Vec<Option<Tensor>>> {
        let mut extra = vec![None; model.layers.len()];
        for d in &self.layers {
            let w = dense_weight(model, d.layer_index)?;
            let mut t = w.sub(d.z.tensor())?.add(d.m.tensor())?;
            t.data_mut().iter_mut().for_each(|v| *v *= rho);
            extra[d.layer_index] = Some(t);
        }
        Ok(extra)
    }

    /// Per-layer `‖W − Z‖ / ‖W‖`.
    pub fn relative_gaps(&self, model: &Model) -> Result<Vec<f64>> {
        self.layers
            .iter()
            .map(|d| {
                let w = dense_weight(model, d.layer_index)?;
                Ok(w.sub(d.z.tensor())?.frobenius_norm() / w.frobenius_norm().max(f64::MIN_POSITIVE))
            })
            .collect()
    }

    /// Per-layer `‖W − Z + M‖`.
    pub fn residual_norms(&self, model: &Model) -> Result<Vec<f64>> {
        self.layers
            .iter()
            .map(|d| Ok(dense_weight(model, d.layer_index)?.sub(d.z.tensor())?.add(d.m.tensor())?.frobenius_norm()))
            .collect()
    }
}

fn dense_weight(model: &Model, li: usize) -> Result<&Tensor> {
    match &model.layers[li].layer {
        Layer::ConvDense(c) => Ok(&c.weight),
        _ => invalid(format!("layer {:?} is not a dense convolution", model.layers[li].name)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    /// Top-1 on the adversarial training batches, in percent.
    pub train_accuracy: f64,
}

/// One epoch of plain PGD adversarial training (BN in train mode for the update).
pub fn adversarial_epoch(model: &mut Model, opt: &mut Sgd, data: &Dataset, batch_size: usize, adv: &AdvConfig, lr: f64, rng: &mut ChaCha8Rng) -> Result<EpochStats> {
    let order = batch_order(data.len(), batch_size, rng);
    let mut acc = Accumulator::default();
    for idx in order {
        let batch = data.batch(&idx)?;
        let adv_batch = pgd(model, &batch, adv, rng)?;
        let lg = loss_and_grad(model, &adv_batch, Mode::Train, GradRequest::PARAMS)?;
        model.update_running_stats(&lg.pass);
        opt.step(model, lg.grads.as_ref().expect("param grads"), lr, None)?;
        acc.add(lg.loss, lg.correct, idx.len());
    }
    acc.finish()
}

/// One phase-1 epoch. `plan` supplies the projection ranks for the dual update.
#[allow(clippy::too_many_arguments)]
pub fn regularize_epoch(
    model: &mut Model,
    opt: &mut Sgd,
    dual: &mut DualState,
    plan: &RankPlan,
    cfg: &CstarConfig,
    data: &Dataset,
    lr: f64,
    rho: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    dual.check(model)?;
    let order = batch_order(data.len(), cfg.batch_size, rng);
    let mut acc = Accumulator::default();
    for idx in order {
        let batch = data.batch(&idx)?;
        let adv_batch = pgd(model, &batch, &cfg.adv_train, rng)?;
        let lg = loss_and_grad(model, &adv_batch, Mode::Train, GradRequest::PARAMS)?;
        model.update_running_stats(&lg.pass);
        let extra = if rho != 0.0 { Some(dual.penalty_gradients(model, rho)?) } else { None };
        if let Some(ex) = &extra {
            if ex.iter().flatten().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric("non-finite regularization term".into()));
            }
        }
        opt.step(model, lg.grads.as_ref().expect("param grads"), lr, extra.as_deref())?;
        acc.add(lg.loss, lg.correct, idx.len());
        if cfg.dual_update == DualUpdate::PerBatch {
            dual.update(model, plan)?;
        }
    }
    if cfg.dual_update == DualUpdate::PerEpoch {
        dual.update(model, plan)?;
    }
    acc.finish()
}

#[derive(Default)]
struct Accumulator {
    loss: f64,
    correct: usize,
    seen: usize,
}

impl Accumulator {
    fn add(&mut self, loss: f64, correct: usize, n: usize) {
        self.loss += loss * n as f64;
        self.correct += correct;
        self.seen += n;
    }

    fn finish(self) -> Result<EpochStats> {
        if self.seen == 0 {
            return invalid("empty training set");
        }
        Ok(EpochStats {
            loss: self.loss / self.seen as f64,
            train_accuracy: 100.0 * self.correct as f64 / self.seen as f64,
        })
    }
}

/// Benign and PGD top-1 accuracy in percent. `rng` feeds PGD random starts.
pub fn evaluate(model: &Model, data: &Dataset, adv: &AdvConfig, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    if data.is_empty() {
        return invalid("cannot evaluate on an empty dataset");
    }
    let (mut benign, mut robust) = (0usize, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        benign += count_correct(model, &batch.x, &batch.y)?;
        let a = pgd(model, &batch, adv, rng)?;
        robust += count_correct(model, &a.x, &a.y)?;
    }
    let n = data.len() as f64;
    Ok((100.0 * benign as f64 / n, 100.0 * robust as f64 / n))
}

fn count_correct(model: &Model, x: &Tensor, y: &[usize]) -> Result<usize> {
    let logits = model.predict(x)?;
    let k = model.num_classes;
    Ok(logits.data().chunks(k).zip(y).filter(|(row, &t)| argmax(row) == t).count())
}

/// Replace every compressible dense convolution with its Tucker-2 factorization at plan ranks.
pub fn decompose_model(model: &Model, plan: &RankPlan) -> Result<Model> {
    let mut out = model.clone();
    for name in &model.compressible {
        let li = model.layer_index(name).ok_or_else(|| Error::InvalidArgument(format!("no layer {name:?}")))?;
        let r = plan.get(name).ok_or_else(|| Error::InvalidArgument(format!("rank plan has no layer {name:?}")))?;
        let Layer::ConvDense(c) = &model.layers[li].layer else {
            return invalid(format!("layer {name:?} is already factorized"));
        };
        let factors = decompose(&ConvWeight::new(c.weight.clone())?, r.r1, r.r2)?;
        out.layers[li].layer = Layer::ConvFactorized(ConvFactorized { factors, bias: c.bias.clone(), stride: c.stride, padding: c.padding });
    }
    out.validate()?;
    Ok(out)
}

/// Rank plan from the current compressible weights of a dense model.
pub fn plan_for(model: &Model, cfg: &CstarConfig) -> Result<RankPlan> {
    let spectra = spectra_from_weights(&model.compressible_weights()?)?;
    select(&spectra, cfg.scheme, cfg.target_ratio, cfg.min_rank)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    /// 1 = regularization, 2 = factorized fine-tuning.
    pub phase: u32,
    pub epoch: usize,
    pub lr: f64,
    pub rho: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub benign: Option<f64>,
    pub robust: Option<f64>,
    /// Per-layer `‖W − Z‖/‖W‖` (phase 1 only).
    pub gaps: Vec<f64>,
    /// Per-layer `‖W − Z + M‖` (phase 1 only).
    pub residuals: Vec<f64>,
    pub ranks: Vec<(usize, usize)>,
    pub achieved_ratio: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub plan: Option<RankPlan>,
}

impl TrainReport {
    /// Median per-layer `‖W − Z‖/‖W‖` at the last phase-1 epoch.
    pub fn final_median_gap(&self) -> Option<f64> {
        let row = self.rows.iter().rev().find(|r| r.phase == 1)?;
        median(&row.gaps)
    }

    pub fn final_accuracy(&self) -> Option<(f64, f64)> {
        let row = self.rows.last()?;
        Some((row.benign?, row.robust?))
    }
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

pub enum TrainEvent<'a> {
    Epoch(&'a TrainRow),
    /// Model at the end of a phase (1: dense after regularization, 2: final factorized).
    PhaseEnd { phase: u32, model: &'a Model },
}

/// Full two-phase run on a dense model. Returns the fine-tuned factorized model.
pub fn run_cstar(pretrained: &Model, cfg: &CstarConfig, train: &Dataset, test: &Dataset, on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if pretrained.is_factorized() {
        return invalid("run_cstar needs a dense model; this one is already factorized");
    }
    if pretrained.compressible.is_empty() {
        return invalid("model has no compressible layers");
    }
    let mut model = pretrained.clone();
    let mut plan = plan_for(&model, cfg)?;
    let mut dual = DualState::init(&model)?;
    let mut report = TrainReport::default();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);

    for epoch in 0..cfg.t1 {
        let start = Instant::now();
        if epoch % cfg.refresh_period == 0 {
            let spectra = spectra_from_weights(&dual.shifted_weights(&model)?)?;
            plan = select(&spectra, cfg.scheme, cfg.target_ratio, cfg.min_rank)?;
        }
        let lr = step_decay(cfg.lr, epoch, cfg.t1);
        let rho = rho_at(cfg, epoch);
        let mut rng = epoch_rng(cfg.seed, 1, epoch);
        let stats = regularize_epoch(&mut model, &mut opt, &mut dual, &plan, cfg, train, lr, rho, &mut rng)?;
        let gaps = dual.relative_gaps(&model)?;
        if gaps.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite regularization gap".into()));
        }
        let (benign, robust) = maybe_eval(&model, cfg, test, 1, epoch, cfg.t1)?;
        let row = TrainRow {
            phase: 1,
            epoch,
            lr,
            rho,
            loss: stats.loss,
            train_accuracy: stats.train_accuracy,
            benign,
            robust,
            gaps,
            residuals: dual.residual_norms(&model)?,
            ranks: plan.ranks(),
            achieved_ratio: plan.achieved_ratio,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_event(TrainEvent::Epoch(&row))?;
        report.rows.push(row);
    }
    if cfg.t1 > 0 {
        on_event(TrainEvent::PhaseEnd { phase: 1, model: &model })?;
    }

    let mut model = decompose_model(&model, &plan)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    for epoch in 0..cfg.t2 {
        let start = Instant::now();
        let lr = step_decay(cfg.lr, epoch, cfg.t2);
        let mut rng = epoch_rng(cfg.seed, 2, epoch);
        let stats = adversarial_epoch(&mut model, &mut opt, train, cfg.batch_size, &cfg.adv_train, lr, &mut rng)?;
        let (benign, robust) = maybe_eval(&model, cfg, test, 2, epoch, cfg.t2)?;
        let row = TrainRow {
            phase: 2,
            epoch,
            lr,
            rho: 0.0,
            loss: stats.loss,
            train_accuracy: stats.train_accuracy,
            benign,
            robust,
            gaps: vec![],
            residuals: vec![],
            ranks: plan.ranks(),
            achieved_ratio: plan.achieved_ratio,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_event(TrainEvent::Epoch(&row))?;
        report.rows.push(row);
    }
    on_event(TrainEvent::PhaseEnd { phase: 2, model: &model })?;
    report.plan = Some(plan);
    Ok((model, report))
}

fn maybe_eval(model: &Model, cfg: &CstarConfig, test: &Dataset, phase: u32, epoch: usize, total: usize) -> Result<(Option<f64>, Option<f64>)> {
    if test.is_empty() || ((epoch + 1) % cfg.eval_every != 0 && epoch + 1 != total) {
        return Ok((None, None));
    }
    let mut rng = epoch_rng(cfg.seed, 10 + phase, epoch);
    let (b, r) = evaluate(model, test, &cfg.adv_eval, 256, &mut rng)?;
    Ok((Some(b), Some(r)))
}

/// Dense adversarial pre-training with the same step-decay schedule.
pub fn pretrain(model: &mut Model, cfg: &CstarConfig, epochs: usize, train: &Dataset, test: &Dataset, on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>) -> Result<TrainReport> {
    cfg.validate()?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut report = TrainReport::default();
    for epoch in 0..epochs {
        let start = Instant::now();
        let lr = step_decay(cfg.lr, epoch, epochs);
        let mut rng = epoch_rng(cfg.seed, 0, epoch);
        let stats = adversarial_epoch(model, &mut opt, train, cfg.batch_size, &cfg.adv_train, lr, &mut rng)?;
        let (benign, robust) = maybe_eval(model, cfg, test, 0, epoch, epochs)?;
        let row = TrainRow {
            phase: 0,
            epoch,
            lr,
            rho: 0.0,
            loss: stats.loss,
            train_accuracy: stats.train_accuracy,
            benign,
            robust,
            gaps: vec![],
            residuals: vec![],
            ranks: vec![],
            achieved_ratio: 1.0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_event(TrainEvent::Epoch(&row))?;
        report.rows.push(row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synthetic_blobs;
    use crate::nn::MiniConvNetConfig;
    use crate::tucker::recover;
    use rand::Rng;

    fn tiny() -> (Model, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = MiniConvNetConfig { in_channels: 1, image_size: 4, num_classes: 3, stem_width: 4, block_widths: vec![6, 6], kernel: 3, batch_norm: true }
            .build(&mut rng)
            .unwrap();
        let data = synthetic_blobs(3, 1, 4, 24, 0.2, 7).unwrap();
        (model, data)
    }

    fn cfg() -> CstarConfig {
        CstarConfig {
            batch_size: 8,
            t1: 2,
            t2: 1,
            target_ratio: 1.5,
            min_rank: 1,
            adv_train: AdvConfig::standard(2, true),
            adv_eval: AdvConfig::standard(2, false),
            ..CstarConfig::default()
        }
    }

    #[test]
    fn step_decay_milestones() {
        let lrs: Vec<f64> = (0..8).map(|e| step_decay(1.0, e, 8)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.1, 0.1, 0.1f64 * 0.1, 0.1f64 * 0.1, 0.1f64 * 0.1 * 0.1, 0.1f64 * 0.1 * 0.1]);
    }

    #[test]
    fn zero_lr_freezes_primal_and_accumulates_residual() {
        let (mut model, data) = tiny();
        let c = cfg();
        let plan = plan_for(&model, &c).unwrap();
        let mut dual = DualState::init(&model).unwrap();
        let before = model.clone();
        let old_m: Vec<Tensor> = dual.layers.iter().map(|d| d.m.tensor().clone()).collect();
        let mut opt = Sgd::new(0.0, 0.0);
        let mut rng = epoch_rng(0, 1, 0);
        regularize_epoch(&mut model, &mut opt, &mut dual, &plan, &c, &data, 0.0, 0.5, &mut rng).unwrap();
        for (d, m0) in dual.layers.iter().zip(&old_m) {
            let w = dense_weight(&before, d.layer_index).unwrap();
            assert_eq!(dense_weight(&model, d.layer_index).unwrap(), w);
            let r = plan.get(&d.name).unwrap();
            let z = project(&ConvWeight::new(w.add(m0).unwrap()).unwrap(), (r.r1, r.r2)).unwrap();
            assert_eq!(&d.z, &z);
            assert_eq!(d.m.tensor(), &m0.add(w).unwrap().sub(z.tensor()).unwrap());
        }
    }

    #[test]
    fn low_rank_weight_is_fixed_point() {
        let (mut model, data) = tiny();
        let c = cfg();
        let plan = plan_for(&model, &c).unwrap();
        for d in DualState::init(&model).unwrap().layers {
            let r = plan.get(&d.name).unwrap();
            let w = project(&d.z, (r.r1, r.r2)).unwrap();
            if let Layer::ConvDense(cd) = &mut model.layers[d.layer_index].layer {
                cd.weight = w.into_tensor();
            }
        }
        let mut dual = DualState::init(&model).unwrap();
        let mut opt = Sgd::new(0.0, 0.0);
        regularize_epoch(&mut model, &mut opt, &mut dual, &plan, &c, &data, 0.0, 0.5, &mut epoch_rng(0, 1, 0)).unwrap();
        for d in &dual.layers {
            let w = dense_weight(&model, d.layer_index).unwrap();
            assert!(w.sub(d.z.tensor()).unwrap().max_abs() < 1e-10);
            assert!(d.m.tensor().max_abs() < 1e-10);
        }
    }

    #[test]
    fn z_is_rank_feasible_and_dual_identity_holds() {
        let (mut model, data) = tiny();
        let c = CstarConfig { dual_update: DualUpdate::PerBatch, ..cfg() };
        let plan = plan_for(&model, &c).unwrap();
        let mut dual = DualState::init(&model).unwrap();
        let mut opt = Sgd::new(0.9, 0.0);
        regularize_epoch(&mut model, &mut opt, &mut dual, &plan, &c, &data, 0.05, 0.1, &mut epoch_rng(0, 1, 0)).unwrap();
        let m_old: Vec<Tensor> = dual.layers.iter().map(|d| d.m.tensor().clone()).collect();
        dual.update(&model, &plan).unwrap();
        for (d, m0) in dual.layers.iter().zip(&m_old) {
            let w = dense_weight(&model, d.layer_index).unwrap();
            assert_eq!(d.m.tensor(), &m0.add(w).unwrap().sub(d.z.tensor()).unwrap());
            let r = plan.get(&d.name).unwrap();
            for (unf, rank) in [(d.z.mode1_unfolding(), r.r1), (d.z.mode2_unfolding(), r.r2)] {
                let s = crate::linalg::svd(&unf).unwrap().sigma;
                assert!(s.iter().skip(rank).all(|v| *v < 1e-8 * s[0]), "{:?} rank {rank}", s);
            }
        }
    }

    #[test]
    fn run_meets_budget_and_param_count() {
        let (model, data) = tiny();
        let c = cfg();
        let mut phases = vec![];
        let (fact, report) = run_cstar(&model, &c, &data, &data, &mut |e| {
            if let TrainEvent::PhaseEnd { phase, .. } = e {
                phases.push(phase);
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(phases, vec![1, 2]);
        let plan = report.plan.clone().unwrap();
        assert!(plan.achieved_ratio >= c.target_ratio);
        let uncompressed: usize = model.param_count() - model.compressible_weights().unwrap().iter().map(|(_, w)| w.tensor().len()).sum::<usize>();
        assert_eq!(fact.param_count(), plan.compressed_params + uncompressed);
        assert_eq!(report.rows.len(), 3);
        let (b, r) = report.final_accuracy().unwrap();
        assert!((0.0..=100.0).contains(&b) && (0.0..=100.0).contains(&r));
        assert!(run_cstar(&fact, &c, &data, &data, &mut |_| Ok(())).is_err());
    }

    #[test]
    fn infeasible_budget_fails_before_training() {
        let (model, data) = tiny();
        let c = CstarConfig { target_ratio: 50.0, min_rank: 4, ..cfg() };
        let mut epochs = 0;
        let err = run_cstar(&model, &c, &data, &data, &mut |_| {
            epochs += 1;
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Budget(_)));
        assert_eq!(epochs, 0);
    }

    #[test]
    fn evaluate_cases() {
        let (model, data) = tiny();
        let mut rng = epoch_rng(1, 9, 0);
        assert!(evaluate(&model, &data.subset(&[]).unwrap(), &AdvConfig::standard(1, false), 8, &mut rng).is_err());
        // constant-label data and a head biased toward that label
        let mut m = model.clone();
        let head = m.layer_index("head").unwrap();
        if let Layer::Linear(l) = &mut m.layers[head].layer {
            l.weight = Tensor::zeros(l.weight.shape());
            l.bias = Tensor::new(vec![3], vec![0.0, 5.0, 0.0]).unwrap();
        }
        let mut d = data.clone();
        d.labels.iter_mut().for_each(|y| *y = 1);
        let (b, r) = evaluate(&m, &d, &AdvConfig::standard(3, true), 8, &mut rng).unwrap();
        assert_eq!((b, r), (100.0, 100.0));
    }

    #[test]
    fn decompose_model_recovers_at_full_rank() {
        let (model, _) = tiny();
        let ws = model.compressible_weights().unwrap();
        let full = ws
            .iter()
            .map(|(n, w)| {
                let (o, i, k) = w.dims();
                crate::rank_select::LayerRanks { name: n.clone(), dims: (o, i, k), r1: o, r2: i }
            })
            .collect();
        let plan = RankPlan::from_layers(full, 1.0);
        let f = decompose_model(&model, &plan).unwrap();
        for (n, w) in &ws {
            let i = f.layer_index(n).unwrap();
            let Layer::ConvFactorized(c) = &f.layers[i].layer else { panic!() };
            assert!(recover(&c.factors).unwrap().tensor().sub(w.tensor()).unwrap().max_abs() < 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.0..1.0));
        assert!(f.predict(&x).unwrap().sub(&model.predict(&x).unwrap()).unwrap().max_abs() < 1e-8);
    }
}
