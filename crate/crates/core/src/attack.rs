//! L∞ projected gradient descent.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{invalid, Error, Result};
use crate::nn::{loss_and_grad, Batch, GradRequest, Mode, Model};
use crate::tensor::Tensor;

/// Default PGD iterations at evaluation time.
pub const EVAL_ITERS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvConfig {
    /// L∞ budget in `[0, 1]` pixel units.
    pub delta: f64,
    /// Per-iteration step size.
    pub step: f64,
    pub iters: usize,
    /// Start from a uniform point in the ball rather than the clean input.
    pub random_init: bool,
}

impl AdvConfig {
    pub fn new(delta: f64, step: f64, iters: usize, random_init: bool) -> Result<Self> {
        let c = Self { delta, step, iters, random_init };
        c.validate()?;
        Ok(c)
    }

    /// `Δ = 8/255`, `α = 2/255`.
    pub fn standard(iters: usize, random_init: bool) -> Self {
        Self { delta: 8.0 / 255.0, step: 2.0 / 255.0, iters, random_init }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return invalid(format!("PGD step must be positive, got {}", self.step));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return invalid(format!("PGD budget must be non-negative, got {}", self.delta));
        }
        if self.iters == 0 {
            return invalid("PGD needs at least one iteration");
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn project(x_adv: &mut [f64], x: &[f64], delta: f64) {
    for (a, &c) in x_adv.iter_mut().zip(x) {
        *a = a.clamp(c - delta, c + delta).clamp(0.0, 1.0);
    }
}

/// Adversarial copy of `batch`. Gradients are taken with batch-norm in eval
/// mode. `rng` is only drawn from when `random_init` is set.
pub fn pgd(model: &Model, batch: &Batch, cfg: &AdvConfig, rng: &mut impl Rng) -> Result<Batch> {
    cfg.validate()?;
    let x = batch.x.data();
    let mut adv = batch.x.clone();
    if cfg.random_init && cfg.delta > 0.0 {
        let u = Uniform::new_inclusive(-cfg.delta, cfg.delta).expect("finite budget");
        for a in adv.data_mut() {
            *a += u.sample(rng);
        }
        project(adv.data_mut(), x, cfg.delta);
    }
    for _ in 0..cfg.iters {
        let probe = Batch { x: adv, y: batch.y.clone() };
        let g = loss_and_grad(model, &probe, Mode::Eval, GradRequest::INPUT)?
            .input_grad
            .expect("input gradient requested");
        adv = probe.x;
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input gradient during PGD".into()));
        }
        for (a, gv) in adv.data_mut().iter_mut().zip(g.data()) {
            *a += cfg.step * sign(*gv);
        }
        project(adv.data_mut(), x, cfg.delta);
    }
    project(adv.data_mut(), x, cfg.delta);
    Ok(Batch { x: adv, y: batch.y.clone() })
}

/// Largest `|x_adv − x|` over all pixels.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, Linear, MiniConvNetConfig, NamedLayer};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_model(w: Tensor, c: usize, hw: usize) -> Model {
        let classes = w.shape()[0];
        Model::new(
            vec![
                NamedLayer { name: "flat".into(), layer: Layer::Flatten },
                NamedLayer { name: "fc".into(), layer: Layer::Linear(Linear { weight: w, bias: Tensor::zeros(&[classes]) }) },
            ],
            [c, hw, hw],
            classes,
            vec![],
        )
        .unwrap()
    }

    fn tiny_net(rng: &mut ChaCha8Rng) -> Model {
        MiniConvNetConfig { in_channels: 1, image_size: 4, num_classes: 3, stem_width: 2, block_widths: vec![3], kernel: 3, batch_norm: true }
            .build(rng)
            .unwrap()
    }

    fn batch(model: &Model, b: usize, rng: &mut ChaCha8Rng) -> Batch {
        let [c, h, w] = model.input_shape;
        Batch::new(
            Tensor::from_fn(&[b, c, h, w], |_| rng.random_range(0.0..1.0)),
            (0..b).map(|_| rng.random_range(0..model.num_classes)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_budget_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = tiny_net(&mut rng);
        let b = batch(&m, 3, &mut rng);
        let cfg = AdvConfig::new(0.0, 0.01, 5, true).unwrap();
        assert_eq!(pgd(&m, &b, &cfg, &mut rng).unwrap(), b);
    }

    #[test]
    fn constant_model_leaves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = linear_model(Tensor::zeros(&[3, 4]), 1, 2);
        let b = batch(&m, 4, &mut rng);
        let cfg = AdvConfig::new(0.1, 0.05, 3, false).unwrap();
        assert_eq!(pgd(&m, &b, &cfg, &mut rng).unwrap(), b);
    }

    #[test]
    fn single_step_on_linear_model_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
        let m = linear_model(w.clone(), 1, 2);
        let b = batch(&m, 5, &mut rng);
        let cfg = AdvConfig::new(0.05, 0.03, 1, false).unwrap();
        let adv = pgd(&m, &b, &cfg, &mut rng).unwrap();
        for n in 0..5 {
            let x = &b.x.data()[n * 4..(n + 1) * 4];
            let z: Vec<f64> = (0..3).map(|c| (0..4).map(|j| w.get(&[c, j]) * x[j]).sum()).collect();
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..4 {
                // ∂CE/∂x_j = Σ_c (p_c − [c = y]) w_cj
                let g: f64 = (0..3).map(|c| (e[c] / s - if c == b.y[n] { 1.0 } else { 0.0 }) * w.get(&[c, j])).sum();
                let expect = (x[j] + 0.03 * sign(g)).clamp(x[j] - 0.05, x[j] + 0.05).clamp(0.0, 1.0);
                assert_eq!(adv.x.data()[n * 4 + j], expect);
            }
        }
        assert_eq!(adv.y, b.y);
    }

    #[test]
    fn attack_raises_loss_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = tiny_net(&mut rng);
        let cfg = AdvConfig::new(8.0 / 255.0, 2.0 / 255.0, 10, false).unwrap();
        let (mut benign, mut robust) = (0.0, 0.0);
        for _ in 0..10 {
            let b = batch(&m, 8, &mut rng);
            benign += loss_and_grad(&m, &b, Mode::Eval, GradRequest { params: false, input: false }).unwrap().loss;
            let a = pgd(&m, &b, &cfg, &mut rng).unwrap();
            robust += loss_and_grad(&m, &a, Mode::Eval, GradRequest { params: false, input: false }).unwrap().loss;
        }
        assert!(robust >= benign, "robust {robust} benign {benign}");
    }

    #[test]
    fn config_validation() {
        assert!(AdvConfig::new(0.1, 0.0, 1, false).is_err());
        assert!(AdvConfig::new(-0.1, 0.1, 1, false).is_err());
        assert!(AdvConfig::new(0.1, 0.1, 0, false).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn stays_in_ball_and_box(seed in any::<u64>(), delta in 0.0f64..0.3, step in 0.001f64..0.2, iters in 1usize..4, ri in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = tiny_net(&mut rng);
            let b = batch(&m, 2, &mut rng);
            let cfg = AdvConfig::new(delta, step, iters, ri).unwrap();
            let a = pgd(&m, &b, &cfg, &mut rng).unwrap();
            prop_assert!(linf_distance(&a.x, &b.x) <= delta + 1e-12);
            prop_assert!(a.x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
