//! Per-layer Tucker-2 rank selection under a global parameter budget.
//!
//! The budget is `floor(dense / target_ratio)` over the compressible layers.
//! [`select_global`] starts every layer at the floor rank and then walks the
//! pooled singular values of all layers and both channel modes from largest to
//! smallest; each admitted value raises that layer's rank in that mode by one.
//! The cost of an admission is the true change in that layer's factor count,
//! which depends on the other mode's rank through the core `R1·R2·K²`. The walk
//! stops at the first value that no longer fits.
//!
//! Ordering of equal values: earlier layer first, then mode 1 before mode 2.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::svd;
use crate::tucker::{dense_param_count, param_count, ConvWeight};

pub const DEFAULT_MIN_RANK: usize = 8;

/// Singular values of both channel-mode unfoldings of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularSpectrum {
    pub name: String,
    /// `(O, I, K)`.
    pub dims: (usize, usize, usize),
    /// Mode-1 (`O × I·K²`) spectrum, non-increasing.
    pub sigma1: Vec<f64>,
    /// Mode-2 (`I × O·K²`) spectrum, non-increasing.
    pub sigma2: Vec<f64>,
}

impl SingularSpectrum {
    pub fn new(name: impl Into<String>, dims: (usize, usize, usize), sigma1: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        let s = Self {
            name: name.into(),
            dims,
            sigma1,
            sigma2,
        };
        let (o, i, k) = dims;
        for (label, sig, len) in [("sigma1", &s.sigma1, o.min(i * k * k)), ("sigma2", &s.sigma2, i.min(o * k * k))] {
            if sig.len() != len {
                return invalid(format!("{}: {label} has length {}, expected {len}", s.name, sig.len()));
            }
            if sig.iter().any(|v| !v.is_finite() || *v < 0.0) || sig.windows(2).any(|w| w[0] < w[1]) {
                return invalid(format!("{}: {label} must be non-negative and non-increasing", s.name));
            }
        }
        Ok(s)
    }

    pub fn dense_params(&self) -> usize {
        let (o, i, k) = self.dims;
        dense_param_count(o, i, k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRanks {
    pub name: String,
    pub dims: (usize, usize, usize),
    pub r1: usize,
    pub r2: usize,
}

impl LayerRanks {
    pub fn params(&self) -> usize {
        let (o, i, k) = self.dims;
        param_count(o, i, k, self.r1, self.r2)
    }

    pub fn dense_params(&self) -> usize {
        let (o, i, k) = self.dims;
        dense_param_count(o, i, k)
    }

    pub fn ratio(&self) -> f64 {
        self.dense_params() as f64 / self.params() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub layers: Vec<LayerRanks>,
    pub target_ratio: f64,
    pub dense_params: usize,
    pub compressed_params: usize,
    pub achieved_ratio: f64,
}

impl RankPlan {
    pub fn from_layers(layers: Vec<LayerRanks>, target_ratio: f64) -> Self {
        let dense_params = layers.iter().map(LayerRanks::dense_params).sum();
        let compressed_params = layers.iter().map(LayerRanks::params).sum();
        Self {
            layers,
            target_ratio,
            dense_params,
            compressed_params,
            achieved_ratio: dense_params as f64 / compressed_params as f64,
        }
    }

    pub fn ranks(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.r1, l.r2)).collect()
    }

    pub fn get(&self, name: &str) -> Option<&LayerRanks> {
        self.layers.iter().find(|l| l.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankScheme {
    Global,
    Uniform,
    GlobalMinMax,
    GlobalStd,
}

impl RankScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "uniform" => Ok(Self::Uniform),
            "global-mm" => Ok(Self::GlobalMinMax),
            "global-std" => Ok(Self::GlobalStd),
            other => invalid(format!("unknown rank scheme {other:?} (global | uniform | global-mm | global-std)")),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Uniform => "uniform",
            Self::GlobalMinMax => "global-mm",
            Self::GlobalStd => "global-std",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    MinMax,
    Standard,
}

pub fn select(spectra: &[SingularSpectrum], scheme: RankScheme, target_ratio: f64, min_rank: usize) -> Result<RankPlan> {
    match scheme {
        RankScheme::Global => select_global(spectra, target_ratio, min_rank),
        RankScheme::Uniform => {
            let dims: Vec<(String, (usize, usize, usize))> = spectra.iter().map(|s| (s.name.clone(), s.dims)).collect();
            select_uniform(&dims, target_ratio, min_rank)
        }
        RankScheme::GlobalMinMax => select_global_normalized(spectra, target_ratio, min_rank, Normalization::MinMax),
        RankScheme::GlobalStd => select_global_normalized(spectra, target_ratio, min_rank, Normalization::Standard),
    }
}

fn budget_for(dense: usize, target_ratio: f64) -> Result<usize> {
    if !(target_ratio >= 1.0) || !target_ratio.is_finite() {
        return invalid(format!("target compression ratio must be ≥ 1, got {target_ratio}"));
    }
    Ok((dense as f64 / target_ratio).floor() as usize)
}

/// Floor ranks per layer; a floor above a channel dimension is clamped to it.
fn floor_ranks(spectra: &[SingularSpectrum], min_rank: usize) -> Vec<(usize, usize)> {
    spectra
        .iter()
        .map(|s| (min_rank.min(s.sigma1.len()).max(1), min_rank.min(s.sigma2.len()).max(1)))
        .collect()
}

fn check_floor(spectra: &[SingularSpectrum], floors: &[(usize, usize)], budget: usize) -> Result<()> {
    let floor_cost: usize = spectra
        .iter()
        .zip(floors)
        .map(|(s, &(a, b))| param_count(s.dims.0, s.dims.1, s.dims.2, a, b))
        .sum();
    if floor_cost > budget {
        let dense: usize = spectra.iter().map(SingularSpectrum::dense_params).sum();
        return Err(Error::Budget(format!(
            "minimum-rank plan needs {floor_cost} parameters but the budget is {budget}; \
             the largest achievable compression ratio is {:.3}",
            dense as f64 / floor_cost as f64
        )));
    }
    Ok(())
}

pub fn select_global(spectra: &[SingularSpectrum], target_ratio: f64, min_rank: usize) -> Result<RankPlan> {
    greedy_pooled(spectra, spectra, target_ratio, min_rank)
}

pub fn select_global_normalized(
    spectra: &[SingularSpectrum],
    target_ratio: f64,
    min_rank: usize,
    mode: Normalization,
) -> Result<RankPlan> {
    let scores: Vec<SingularSpectrum> = spectra
        .iter()
        .map(|s| SingularSpectrum {
            name: s.name.clone(),
            dims: s.dims,
            sigma1: normalize(&s.sigma1, mode),
            sigma2: normalize(&s.sigma2, mode),
        })
        .collect();
    greedy_pooled(spectra, &scores, target_ratio, min_rank)
}

/// Min-max maps a spectrum onto `[0, 1]`; a constant spectrum maps to `1` for
/// its first entry and `0` elsewhere. Standard normalization subtracts the
/// mean and divides by the population standard deviation; a zero-variance
/// spectrum maps to all zeros.
pub fn normalize(sig: &[f64], mode: Normalization) -> Vec<f64> {
    if sig.is_empty() {
        return Vec::new();
    }
    match mode {
        Normalization::MinMax => {
            let max = sig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = sig.iter().cloned().fold(f64::INFINITY, f64::min);
            let range = max - min;
            if range > 0.0 {
                sig.iter().map(|v| (v - min) / range).collect()
            } else {
                (0..sig.len()).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()
            }
        }
        Normalization::Standard => {
            let n = sig.len() as f64;
            let mean = sig.iter().sum::<f64>() / n;
            let var = sig.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                let sd = var.sqrt();
                sig.iter().map(|v| (v - mean) / sd).collect()
            } else {
                vec![0.0; sig.len()]
            }
        }
    }
}

/// Greedy admission ordered by `scores`; `spectra` supplies names and dims.
fn greedy_pooled(spectra: &[SingularSpectrum], scores: &[SingularSpectrum], target_ratio: f64, min_rank: usize) -> Result<RankPlan> {
    if spectra.is_empty() {
        return invalid("rank selection needs at least one compressible layer");
    }
    let dense: usize = spectra.iter().map(SingularSpectrum::dense_params).sum();
    let budget = budget_for(dense, target_ratio)?;
    let mut ranks = floor_ranks(spectra, min_rank);
    check_floor(spectra, &ranks, budget)?;

    struct Entry {
        score: f64,
        layer: usize,
        mode: usize,
        index: usize,
    }
    let mut pool = Vec::new();
    for (layer, s) in scores.iter().enumerate() {
        for (mode, sig, floor) in [(0, &s.sigma1, ranks[layer].0), (1, &s.sigma2, ranks[layer].1)] {
            for (index, &score) in sig.iter().enumerate().skip(floor) {
                pool.push(Entry { score, layer, mode, index });
            }
        }
    }
    // Construction order is (layer, mode, index), so a stable descending sort
    // realises the tie rule.
    pool.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));

    let mut used: usize = spectra
        .iter()
        .zip(&ranks)
        .map(|(s, &(a, b))| param_count(s.dims.0, s.dims.1, s.dims.2, a, b))
        .sum();
    for e in &pool {
        let (o, i, k) = spectra[e.layer].dims;
        let (r1, r2) = ranks[e.layer];
        debug_assert_eq!(if e.mode == 0 { r1 } else { r2 }, e.index);
        let next = if e.mode == 0 { (r1 + 1, r2) } else { (r1, r2 + 1) };
        let marginal = param_count(o, i, k, next.0, next.1) - param_count(o, i, k, r1, r2);
        if used + marginal > budget {
            break;
        }
        used += marginal;
        ranks[e.layer] = next;
    }
    Ok(plan_from(spectra, &ranks, target_ratio))
}

fn plan_from(spectra: &[SingularSpectrum], ranks: &[(usize, usize)], target_ratio: f64) -> RankPlan {
    RankPlan::from_layers(
        spectra
            .iter()
            .zip(ranks)
            .map(|(s, &(r1, r2))| LayerRanks {
                name: s.name.clone(),
                dims: s.dims,
                r1,
                r2,
            })
            .collect(),
        target_ratio,
    )
}

/// Every layer compressed at the same ratio with equal fractional ranks:
/// for each `r1`, `r2 = round(r1 · I / O)`; the largest `r1` whose layer count
/// fits `floor(dense_layer / target_ratio)` wins. Layers whose budget cannot
/// hold the floor are clamped to the floor; the plan errors only when the
/// clamped plan breaks the global budget.
pub fn select_uniform(layers: &[(String, (usize, usize, usize))], target_ratio: f64, min_rank: usize) -> Result<RankPlan> {
    if layers.is_empty() {
        return invalid("rank selection needs at least one compressible layer");
    }
    let dense: usize = layers.iter().map(|(_, (o, i, k))| dense_param_count(*o, *i, *k)).sum();
    let budget = budget_for(dense, target_ratio)?;
    let mut out = Vec::with_capacity(layers.len());
    for (name, (o, i, k)) in layers {
        let (o, i, k) = (*o, *i, *k);
        let layer_budget = budget_for(dense_param_count(o, i, k), target_ratio)?;
        let (f1, f2) = (min_rank.min(o).max(1), min_rank.min(i).max(1));
        let mut best = (f1, f2);
        for r1 in 1..=o {
            let r2 = equal_fraction_partner(r1, o, i);
            let (a, b) = (r1.max(f1), r2.max(f2));
            if param_count(o, i, k, a, b) <= layer_budget && (a, b) > best {
                best = (a, b);
            }
        }
        out.push(LayerRanks {
            name: name.clone(),
            dims: (o, i, k),
            r1: best.0,
            r2: best.1,
        });
    }
    let plan = RankPlan::from_layers(out, target_ratio);
    if plan.compressed_params > budget {
        return Err(Error::Budget(format!(
            "uniform plan at the rank floor needs {} parameters but the budget is {budget}; \
             the largest achievable compression ratio is {:.3}",
            plan.compressed_params, plan.achieved_ratio
        )));
    }
    Ok(plan)
}

/// `round(r1 · I / O)` clamped to `1..=I`.
pub fn equal_fraction_partner(r1: usize, o: usize, i: usize) -> usize {
    (((r1 * i) as f64 / o as f64).round() as usize).clamp(1, i)
}

/// Both unfolding spectra of each weight, untruncated.
pub fn spectra_from_weights(weights: &[(String, ConvWeight)]) -> Result<Vec<SingularSpectrum>> {
    weights
        .iter()
        .map(|(name, w)| {
            let sigma1 = svd(&w.mode1_unfolding())?.sigma;
            let sigma2 = svd(&w.mode2_unfolding())?.sigma;
            Ok(SingularSpectrum {
                name: name.clone(),
                dims: w.dims(),
                sigma1,
                sigma2,
            })
        })
        .collect()
}
