//! Browser bindings: Tucker-2 projection error against rank, global rank
//! selection on user-supplied layer shapes, and a PGD perturbation on a toy
//! model. Every entry point returns a JSON string.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use cstar::attack::{linf_distance, pgd, AdvConfig};
use cstar::io::{compact_count, rank_report};
use cstar::nn::{loss_and_grad, Batch, GradRequest, MiniConvNetConfig, Mode};
use cstar::rank_select::{equal_fraction_partner, select, spectra_from_weights, RankScheme};
use cstar::tucker::{dense_param_count, param_count, project, ConvWeight};
use cstar::Tensor;

/// Random `(O, I, K, K)` weight whose channel spectra fall off like `decay^j`.
fn decaying_weight(o: usize, i: usize, k: usize, decay: f64, rng: &mut ChaCha8Rng) -> cstar::Result<ConvWeight> {
    ConvWeight::new(Tensor::from_fn(&[o, i, k, k], |ix| rng.random_range(-1.0..1.0) * decay.powi(ix[0] as i32) * decay.powi(ix[1] as i32)))
}

/// Relative projection error and compression ratio at every output rank, with
/// the input rank following the same fraction of its channel count.
pub fn projection_curve_json(o: usize, i: usize, k: usize, decay: f64, seed: u64) -> Result<Value, String> {
    if o * i * k * k > 1 << 20 {
        return Err("weight too large for the demo (limit 2^20 entries)".into());
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(format!("decay must lie in (0, 1], got {decay}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = decaying_weight(o, i, k, decay, &mut rng).map_err(|e| e.to_string())?;
    let norm = w.tensor().frobenius_norm();
    let dense = dense_param_count(o, i, k);
    let mut points = Vec::new();
    for r1 in 1..=o {
        let r2 = equal_fraction_partner(r1, o, i).clamp(1, i);
        let p = project(&w, (r1, r2)).map_err(|e| e.to_string())?;
        let err = w.tensor().sub(p.tensor()).map_err(|e| e.to_string())?.frobenius_norm() / norm;
        let params = param_count(o, i, k, r1, r2);
        points.push(json!({ "r1": r1, "r2": r2, "error": err, "params": params, "ratio": dense as f64 / params as f64 }));
    }
    Ok(json!({ "dense_params": dense, "points": points }))
}

/// Parses `O,I,K` triples separated by `;`.
fn parse_shapes(shapes: &str) -> Result<Vec<(usize, usize, usize)>, String> {
    shapes
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let v: Vec<usize> = s.split(',').map(|t| t.trim().parse().map_err(|_| format!("bad shape {s:?}"))).collect::<Result<_, _>>()?;
            match v[..] {
                [o, i, k] if o > 0 && i > 0 && k > 0 => Ok((o, i, k)),
                _ => Err(format!("shape {s:?} must be O,I,K with positive entries")),
            }
        })
        .collect()
}

/// Rank plan for random layers of the given shapes. Layer `j` gets spectral
/// decay `decay^(1/(j+1))`, so later layers are less compressible.
pub fn rank_plan_json(shapes: &str, ratio: f64, scheme: &str, min_rank: usize, decay: f64, seed: u64) -> Result<Value, String> {
    let dims = parse_shapes(shapes)?;
    if dims.is_empty() {
        return Err("no layer shapes given".into());
    }
    if dims.iter().map(|&(o, i, k)| o * i * k * k).sum::<usize>() > 1 << 20 {
        return Err("layers too large for the demo (limit 2^20 weights in total)".into());
    }
    let scheme = RankScheme::parse(scheme).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = dims
        .iter()
        .enumerate()
        .map(|(j, &(o, i, k))| Ok((format!("conv{}", j + 1), decaying_weight(o, i, k, decay.powf(1.0 / (j + 1) as f64), &mut rng)?)))
        .collect::<cstar::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let spectra = spectra_from_weights(&weights).map_err(|e| e.to_string())?;
    let plan = select(&spectra, scheme, ratio, min_rank).map_err(|e| e.to_string())?;
    let layers: Vec<Value> = plan
        .layers
        .iter()
        .map(|l| {
            json!({
                "name": l.name, "dims": [l.dims.0, l.dims.1, l.dims.2], "ranks": [l.r1, l.r2],
                "dense": compact_count(l.dense_params()), "compressed": compact_count(l.params()), "ratio": l.ratio(),
            })
        })
        .collect();
    Ok(json!({
        "layers": layers,
        "achieved_ratio": plan.achieved_ratio,
        "dense_params": plan.dense_params,
        "compressed_params": plan.compressed_params,
        "table": rank_report(&plan),
    }))
}

/// PGD against a small random CNN on one random 8×8 grey image.
pub fn pgd_toy_json(delta: f64, step: f64, iters: usize, random_init: bool, seed: u64) -> Result<Value, String> {
    if iters > 200 {
        return Err("at most 200 iterations in the demo".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MiniConvNetConfig { in_channels: 1, image_size: 8, num_classes: 4, stem_width: 6, block_widths: vec![8, 8], kernel: 3, batch_norm: false }
        .build(&mut rng)
        .map_err(|e| e.to_string())?;
    let x = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.random_range(0.0..1.0));
    let batch = Batch::new(x, vec![rng.random_range(0..4)]).map_err(|e| e.to_string())?;
    let cfg = AdvConfig::new(delta, step, iters, random_init).map_err(|e| e.to_string())?;
    let adv = pgd(&model, &batch, &cfg, &mut rng).map_err(|e| e.to_string())?;
    let none = GradRequest { params: false, input: false };
    let before = loss_and_grad(&model, &batch, Mode::Eval, none).map_err(|e| e.to_string())?.loss;
    let after = loss_and_grad(&model, &adv, Mode::Eval, none).map_err(|e| e.to_string())?.loss;
    Ok(json!({
        "label": batch.y[0],
        "loss_clean": before,
        "loss_adv": after,
        "linf": linf_distance(&adv.x, &batch.x),
        "clean": batch.x.data(),
        "adversarial": adv.x.data(),
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn projection_curve(o: usize, i: usize, k: usize, decay: f64, seed: u32) -> Result<String, JsValue> {
    to_js(projection_curve_json(o, i, k, decay, seed as u64))
}

#[wasm_bindgen]
pub fn rank_plan(shapes: &str, ratio: f64, scheme: &str, min_rank: usize, decay: f64, seed: u32) -> Result<String, JsValue> {
    to_js(rank_plan_json(shapes, ratio, scheme, min_rank, decay, seed as u64))
}

#[wasm_bindgen]
pub fn pgd_toy(delta: f64, step: f64, iters: usize, random_init: bool, seed: u32) -> Result<String, JsValue> {
    to_js(pgd_toy_json(delta, step, iters, random_init, seed as u64))
}
