//! Quick oracle checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{linf_distance, pgd, AdvConfig};
use crate::conv::conv2d;
use crate::linalg::svd;
use crate::nn::{loss_and_grad, Batch, GradRequest, MiniConvNetConfig, Mode};
use crate::oracles;
use crate::rank_select::{select_global, SingularSpectrum};
use crate::tensor::Tensor;
use crate::tucker::{decompose, factorized_forward, param_count, recover, ConvWeight};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

pub fn run(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.push(check("contract vs nested loops", || {
        let a = random(&[3, 4, 5], &mut rng);
        let b = random(&[6, 4], &mut rng);
        let d = a.contract(1, &b, 1).map_err(|e| e.to_string())?.sub(&oracles::contract_naive(&a, 1, &b, 1)).map_err(|e| e.to_string())?.max_abs();
        ensure(d < 1e-12, format!("max diff {d:e}"))?;
        Ok(format!("max diff {d:.1e}"))
    }));

    out.push(check("truncation error equals tail energy", || {
        let m = random(&[20, 33], &mut rng);
        let s = svd(&m).map_err(|e| e.to_string())?;
        let mut worst: f64 = 0.0;
        for k in 1..=s.sigma.len() {
            let err = m.sub(&s.truncate(k).map_err(|e| e.to_string())?.reconstruct()).map_err(|e| e.to_string())?.frobenius_norm().powi(2);
            let tail = s.tail_energy(k);
            worst = worst.max((err - tail).abs() / tail.max(1e-300).max(m.frobenius_norm().powi(2) * 1e-16));
        }
        ensure(worst < 1e-8, format!("worst relative gap {worst:e}"))?;
        Ok(format!("worst relative gap {worst:.1e}"))
    }));

    out.push(check("tucker-2 round trip and factorized conv", || {
        let w = ConvWeight::new(random(&[6, 5, 3, 3], &mut rng)).map_err(|e| e.to_string())?;
        let f = decompose(&w, 6, 5).map_err(|e| e.to_string())?;
        let back = recover(&f).map_err(|e| e.to_string())?;
        let rt = back.tensor().rel_error(w.tensor()).map_err(|e| e.to_string())?;
        let x = random(&[2, 5, 7, 7], &mut rng);
        let dense = oracles::conv2d_direct(&x, back.tensor(), None, 2, 1);
        let fact = factorized_forward(&f, &x, 2, 1).map_err(|e| e.to_string())?;
        let eq = fact.rel_error(&dense).map_err(|e| e.to_string())?;
        let im2col = conv2d(&x, w.tensor(), None, 2, 1).map_err(|e| e.to_string())?.y;
        let direct = oracles::conv2d_direct(&x, w.tensor(), None, 2, 1);
        let cv = im2col.rel_error(&direct).map_err(|e| e.to_string())?;
        ensure(rt < 1e-8 && eq < 1e-8 && cv < 1e-12, format!("round trip {rt:e}, factorized {eq:e}, conv {cv:e}"))?;
        Ok(format!("round trip {rt:.1e}, factorized {eq:.1e}"))
    }));

    out.push(check("global rank selection vs enumeration", || {
        for t in 0..10 {
            let layers: Vec<(usize, usize, usize, Vec<f64>, Vec<f64>)> = (0..2)
                .map(|_| {
                    let (o, i) = (rng.random_range(1..5usize), rng.random_range(1..5usize));
                    let k = rng.random_range(1..3usize);
                    let mut s1: Vec<f64> = (0..o.min(i * k * k)).map(|_| rng.random_range(0.0..1.0)).collect();
                    let mut s2: Vec<f64> = (0..i.min(o * k * k)).map(|_| rng.random_range(0.0..1.0)).collect();
                    s1.sort_by(|a, b| b.total_cmp(a));
                    s2.sort_by(|a, b| b.total_cmp(a));
                    (o, i, k, s1, s2)
                })
                .collect();
            let spectra: Vec<SingularSpectrum> = layers
                .iter()
                .enumerate()
                .map(|(j, l)| SingularSpectrum::new(format!("l{j}"), (l.0, l.1, l.2), l.3.clone(), l.4.clone()))
                .collect::<crate::Result<_>>()
                .map_err(|e| e.to_string())?;
            let dense: usize = layers.iter().map(|l| l.0 * l.1 * l.2 * l.2).sum();
            let floor: usize = layers.iter().map(|l| param_count(l.0, l.1, l.2, 1, 1)).sum();
            let ratio = rng.random_range(1.0..(dense as f64 / floor as f64).max(1.0) + 1e-9);
            let budget = (dense as f64 / ratio).floor() as usize;
            let expect = oracles::brute_force_global(&layers, budget, 1);
            let got = select_global(&spectra, ratio, 1).ok().map(|p| p.ranks());
            ensure(got == expect, format!("instance {t}: greedy {got:?} vs enumeration {expect:?}"))?;
        }
        Ok("10 instances".into())
    }));

    out.push(check("gradients vs finite differences", || {
        let model = MiniConvNetConfig { in_channels: 1, image_size: 4, num_classes: 3, stem_width: 2, block_widths: vec![3], kernel: 3, batch_norm: true }
            .build(&mut rng)
            .map_err(|e| e.to_string())?;
        let x = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.0..1.0));
        let batch = Batch::new(x, vec![0, 2]).map_err(|e| e.to_string())?;
        let lg = loss_and_grad(&model, &batch, Mode::Train, GradRequest::ALL).map_err(|e| e.to_string())?;
        let analytic = lg.input_grad.ok_or("no input gradient")?;
        let numeric = oracles::finite_difference(batch.x.data(), 1e-5, |p| {
            let b = Batch { x: Tensor::new(batch.x.shape().to_vec(), p.to_vec()).unwrap(), y: batch.y.clone() };
            loss_and_grad(&model, &b, Mode::Train, GradRequest { params: false, input: false }).map(|l| l.loss).unwrap_or(f64::NAN)
        });
        let worst = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-5))
            .fold(0.0, f64::max);
        ensure(worst < 1e-4, format!("worst relative error {worst:e}"))?;
        Ok(format!("worst relative error {worst:.1e}"))
    }));

    out.push(check("PGD stays in budget", || {
        let model = MiniConvNetConfig { in_channels: 1, image_size: 4, num_classes: 3, stem_width: 2, block_widths: vec![3], kernel: 3, batch_norm: false }
            .build(&mut rng)
            .map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let x = Tensor::from_fn(&[3, 1, 4, 4], |_| rng.random_range(0.0..1.0));
            let b = Batch::new(x, vec![0, 1, 2]).map_err(|e| e.to_string())?;
            let delta = rng.random_range(0.0..0.2);
            let cfg = AdvConfig::new(delta, rng.random_range(0.001..0.1), rng.random_range(1..5), rng.random())
                .map_err(|e| e.to_string())?;
            let a = pgd(&model, &b, &cfg, &mut rng).map_err(|e| e.to_string())?;
            let d = linf_distance(&a.x, &b.x);
            ensure(d <= delta + 1e-12, format!("distance {d} over budget {delta}"))?;
            ensure(a.x.data().iter().all(|v| (0.0..=1.0).contains(v)), "pixel outside [0, 1]".into())?;
        }
        Ok("20 configurations".into())
    }));

    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for r in super::run(7) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
