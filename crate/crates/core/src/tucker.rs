//! Tucker-2 factorization of convolution weights.
//!
//! A weight `W ∈ R^{O×I×K×K}` is written as `U1 (O×R1)`, `U2 (I×R2)` and a
//! core `G (R1×R2×K×K)` with `W[o,i,:,:] = Σ U1[o,a] U2[i,b] G[a,b,:,:]`.
//! Only the two channel modes are truncated; the spatial modes stay full.

use crate::conv;
use crate::error::{invalid, shape_err, Result};
use crate::linalg::{orthonormal_columns, svd};
use crate::tensor::Tensor;

/// A 4-D `O × I × K × K` convolution weight with a square kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeight(Tensor);

impl ConvWeight {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            &[_, _, kh, kw] if kh == kw => Ok(Self(t)),
            &[_, _, kh, kw] => shape_err(format!("non-square kernel {kh}×{kw} is not supported")),
            s => shape_err(format!("conv weight must be 4-d O×I×K×K, got {:?}", s)),
        }
    }

    /// `(O, I, K)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `O × (I·K²)`.
    pub fn mode1_unfolding(&self) -> Tensor {
        self.0.flatten_from(1).expect("4-d weight")
    }

    /// `I × (O·K²)`, taken from the `O × I × K²` view with the first two axes swapped.
    pub fn mode2_unfolding(&self) -> Tensor {
        self.0
            .flatten_from(2)
            .and_then(|w| w.permute(&[1, 0, 2]))
            .and_then(|w| w.flatten_from(1))
            .expect("4-d weight")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tucker2Factors {
    pub u1: Tensor,
    pub u2: Tensor,
    pub g: Tensor,
}

impl Tucker2Factors {
    pub fn new(u1: Tensor, u2: Tensor, g: Tensor) -> Result<Self> {
        let f = Self { u1, u2, g };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let (o, r1) = self.u1.dims2()?;
        let (i, r2) = self.u2.dims2()?;
        match self.g.shape() {
            &[a, b, kh, kw] if a == r1 && b == r2 && kh == kw => {}
            s => {
                return shape_err(format!(
                    "core {:?} inconsistent with u1 {:?} and u2 {:?}",
                    s,
                    self.u1.shape(),
                    self.u2.shape()
                ))
            }
        }
        if r1 > o || r2 > i {
            return shape_err(format!("ranks ({r1}, {r2}) exceed channel dims ({o}, {i})"));
        }
        Ok(())
    }

    pub fn ranks(&self) -> (usize, usize) {
        (self.u1.shape()[1], self.u2.shape()[1])
    }

    /// `(O, I, K)` of the weight these factors represent.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.u1.shape()[0], self.u2.shape()[0], self.g.shape()[2])
    }

    pub fn param_count(&self) -> usize {
        let (o, i, k) = self.dims();
        let (r1, r2) = self.ranks();
        param_count(o, i, k, r1, r2)
    }
}

/// Parameters of the three Tucker-2 factors.
pub fn param_count(o: usize, i: usize, k: usize, r1: usize, r2: usize) -> usize {
    o * r1 + i * r2 + r1 * r2 * k * k
}

pub fn dense_param_count(o: usize, i: usize, k: usize) -> usize {
    o * i * k * k
}

fn check_ranks(w: &ConvWeight, r1: usize, r2: usize) -> Result<()> {
    let (o, i, _) = w.dims();
    if r1 == 0 || r1 > o || r2 == 0 || r2 > i {
        return invalid(format!(
            "Tucker-2 ranks ({r1}, {r2}) outside 1..={o} × 1..={i} for weight {:?}",
            w.tensor().shape()
        ));
    }
    Ok(())
}

/// Factors together with the full spectra of both unfoldings.
pub struct Decomposition {
    pub factors: Tucker2Factors,
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
}

pub fn decompose(w: &ConvWeight, r1: usize, r2: usize) -> Result<Tucker2Factors> {
    decompose_with_spectra(w, r1, r2).map(|d| d.factors)
}

pub fn decompose_with_spectra(w: &ConvWeight, r1: usize, r2: usize) -> Result<Decomposition> {
    check_ranks(w, r1, r2)?;
    let w3 = w.tensor().flatten_from(2)?; // O × I × K²
    let s1 = svd(&w3.flatten_from(1)?)?;
    let s2 = svd(&w.mode2_unfolding())?;
    // The leading columns of the full bases; truncating before the core
    // contraction is identical to slicing G afterwards. A rank beyond the
    // unfolding's column count (I > O·K² or O > I·K²) pads with an orthonormal
    // completion whose core slices come out zero.
    let u1 = orthonormal_columns(&s1.u, r1)?;
    let u2 = orthonormal_columns(&s2.u, r2)?;
    let g = u2.contract(0, &w3, 1)?; // R2 × O × K²
    let g = u1.contract(0, &g, 1)?; // R1 × R2 × K²
    let k = w.dims().2;
    let g = g.into_reshape(&[r1, r2, k, k])?;
    Ok(Decomposition {
        factors: Tucker2Factors { u1, u2, g },
        sigma1: s1.sigma,
        sigma2: s2.sigma,
    })
}

pub fn recover(f: &Tucker2Factors) -> Result<ConvWeight> {
    f.validate()?;
    let (o, i, k) = f.dims();
    let (r1, r2) = f.ranks();
    let g = f.g.reshape(&[r1, r2, k * k])?;
    let w = f.u2.contract(1, &g, 1)?; // I × R1 × K²
    let w = f.u1.contract(1, &w, 1)?; // O × I × K²
    ConvWeight::new(w.into_reshape(&[o, i, k, k])?)
}

/// Truncated two-mode HOSVD projection onto Tucker-2 ranks at most `target`.
/// Its squared error lies between the larger and the sum of the two
/// unfoldings' tail energies.
pub fn project(w: &ConvWeight, target: (usize, usize)) -> Result<ConvWeight> {
    recover(&decompose(w, target.0, target.1)?)
}

/// Three-stage factorized convolution: `U2ᵀ` channel projection, `K×K`
/// convolution with `G`, `U1` channel expansion. Accepts `I×H×W` or `B×I×H×W`.
pub fn factorized_forward(
    f: &Tucker2Factors,
    x: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let single = x.ndim() == 3;
    let xb = if single {
        let s = x.shape();
        x.reshape(&[1, s[0], s[1], s[2]])?
    } else {
        x.clone()
    };
    let (_, i, _) = f.dims();
    if xb.ndim() != 4 || xb.shape()[1] != i {
        return shape_err(format!(
            "factorized conv expects {} input channels, got input {:?}",
            i,
            x.shape()
        ));
    }
    let y = StagedWeights::from_factors(f)?.forward(&xb, None, stride, padding)?;
    if single {
        let s = y.shape().to_vec();
        y.into_reshape(&s[1..])
    } else {
        Ok(y)
    }
}

/// The factors laid out as three convolution kernels.
pub(crate) struct StagedWeights {
    /// `R2 × I × 1 × 1` (= `U2ᵀ`)
    pub reduce: Tensor,
    /// `R1 × R2 × K × K` (= `G`)
    pub core: Tensor,
    /// `O × R1 × 1 × 1` (= `U1`)
    pub expand: Tensor,
}

impl StagedWeights {
    pub fn from_factors(f: &Tucker2Factors) -> Result<Self> {
        f.validate()?;
        let (o, i, _) = f.dims();
        let (r1, r2) = f.ranks();
        Ok(Self {
            reduce: f.u2.transpose()?.into_reshape(&[r2, i, 1, 1])?,
            core: f.g.clone(),
            expand: f.u1.reshape(&[o, r1, 1, 1])?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&[f64]>, stride: usize, padding: usize) -> Result<Tensor> {
        let t1 = conv::conv2d(x, &self.reduce, None, 1, 0)?.y;
        let t2 = conv::conv2d(&t1, &self.core, None, stride, padding)?.y;
        Ok(conv::conv2d(&t2, &self.expand, bias, 1, 0)?.y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::leading_columns;
    use crate::oracles;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_weight(o: usize, i: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvWeight {
        ConvWeight::new(random(&[o, i, k, k], rng)).unwrap()
    }

    fn random_factors(o: usize, i: usize, k: usize, r1: usize, r2: usize, rng: &mut ChaCha8Rng) -> Tucker2Factors {
        Tucker2Factors::new(random(&[o, r1], rng), random(&[i, r2], rng), random(&[r1, r2, k, k], rng)).unwrap()
    }

    #[test]
    fn exact_low_rank_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_factors(8, 6, 3, 3, 2, &mut rng);
        let w = recover(&f).unwrap();
        let back = recover(&decompose(&w, 3, 2).unwrap()).unwrap();
        assert!(back.tensor().rel_error(w.tensor()).unwrap() < 1e-8);
    }

    #[test]
    fn full_rank_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (o, i, k) in [(8, 6, 3), (4, 9, 1), (5, 5, 2)] {
            let w = random_weight(o, i, k, &mut rng);
            let back = recover(&decompose(&w, o, i).unwrap()).unwrap();
            assert!(back.tensor().rel_error(w.tensor()).unwrap() < 1e-8);
        }
    }

    #[test]
    fn truncated_decomposition_matches_unfolding_oracle() {
        // Oracle: project onto the leading left singular subspaces of explicitly
        // built unfoldings, W' = P1 ×₁ P2 ×₂ W with Pn = Un Unᵀ.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_weight(8, 6, 3, &mut rng);
        let (m1, m2) = oracles::unfoldings_naive(w.tensor());
        let u1 = leading_columns(&svd(&m1).unwrap().u, 3);
        let u2 = leading_columns(&svd(&m2).unwrap().u, 2);
        let p1 = u1.matmul(&u1.transpose().unwrap()).unwrap();
        let p2 = u2.matmul(&u2.transpose().unwrap()).unwrap();
        let expect = Tensor::from_fn(&[8, 6, 3, 3], |ix| {
            let mut s = 0.0;
            for a in 0..8 {
                for b in 0..6 {
                    s += p1.get(&[ix[0], a]) * p2.get(&[ix[1], b]) * w.tensor().get(&[a, b, ix[2], ix[3]]);
                }
            }
            s
        });
        let got = project(&w, (3, 2)).unwrap();
        assert!(got.tensor().sub(&expect).unwrap().max_abs() < 1e-10);
        let e_got = got.tensor().rel_error(w.tensor()).unwrap();
        let e_exp = expect.rel_error(w.tensor()).unwrap();
        assert!((e_got - e_exp).abs() < 1e-10);
    }

    #[test]
    fn recover_identity_factors_returns_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random(&[4, 3, 3, 3], &mut rng);
        let f = Tucker2Factors::new(Tensor::eye(4), Tensor::eye(3), g.clone()).unwrap();
        assert_eq!(recover(&f).unwrap().tensor(), &g);
    }

    #[test]
    fn recover_rank_one_outer_product() {
        let a = [1.0, -2.0, 0.5];
        let b = [3.0, 1.0];
        let core = [[2.0, -1.0], [0.25, 4.0]];
        let f = Tucker2Factors::new(
            Tensor::new(vec![3, 1], a.to_vec()).unwrap(),
            Tensor::new(vec![2, 1], b.to_vec()).unwrap(),
            Tensor::new(vec![1, 1, 2, 2], vec![2.0, -1.0, 0.25, 4.0]).unwrap(),
        )
        .unwrap();
        let w = recover(&f).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        assert_eq!(w.tensor().get(&[o, i, p, q]), a[o] * b[i] * core[p][q]);
                    }
                }
            }
        }
        let naive = oracles::tucker2_recover_naive(&f.u1, &f.u2, &f.g);
        assert!(w.tensor().sub(&naive).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn project_full_rank_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_weight(5, 4, 3, &mut rng);
        assert!(project(&w, (5, 4)).unwrap().tensor().rel_error(w.tensor()).unwrap() < 1e-8);
    }

    #[test]
    fn project_drops_third_mode_component() {
        // W[o,i,0,0] = diag(3,2,1), zeros elsewhere: every unfolding has spectrum (3,2,1).
        let w = ConvWeight::new(Tensor::from_fn(&[3, 3, 2, 2], |ix| {
            if ix[0] == ix[1] && ix[2] == 0 && ix[3] == 0 {
                [3.0, 2.0, 1.0][ix[0]]
            } else {
                0.0
            }
        }))
        .unwrap();
        let p = project(&w, (2, 2)).unwrap();
        assert!((p.tensor().sub(w.tensor()).unwrap().frobenius_norm() - 1.0).abs() < 1e-8);
        assert!(p.tensor().get(&[2, 2, 0, 0]).abs() < 1e-12);
    }

    #[test]
    fn projection_rank_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random_weight(7, 5, 3, &mut rng);
        let p = project(&w, (3, 2)).unwrap();
        let s1 = svd(&p.mode1_unfolding()).unwrap().sigma;
        let s2 = svd(&p.mode2_unfolding()).unwrap().sigma;
        assert!(s1[3..].iter().all(|&s| s < 1e-8 * s1[0]));
        assert!(s2[2..].iter().all(|&s| s < 1e-8 * s2[0]));
    }

    #[test]
    fn projection_error_within_truncation_bounds() {
        // Any Tucker-2 approximation at ranks (r1, r2) loses at least each mode's
        // own tail energy; the two-SVD projection loses at most their sum.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (o, i, k, r1, r2) in [(6, 5, 3, 3, 2), (8, 8, 3, 2, 5), (4, 7, 1, 2, 3), (9, 4, 2, 1, 1)] {
            let w = random_weight(o, i, k, &mut rng);
            let d = decompose_with_spectra(&w, r1, r2).unwrap();
            let err2 = recover(&d.factors).unwrap().tensor().sub(w.tensor()).unwrap().frobenius_norm().powi(2);
            let t1: f64 = d.sigma1.iter().skip(r1).map(|s| s * s).sum();
            let t2: f64 = d.sigma2.iter().skip(r2).map(|s| s * s).sum();
            assert!(err2 >= t1.max(t2) - 1e-10, "{err2} below {}", t1.max(t2));
            assert!(err2 <= t1 + t2 + 1e-10, "{err2} above {}", t1 + t2);
            // perturbed orthonormal bases with their optimal core never beat the
            // projection by more than the quasi-optimality factor 2 (in squared error)
            for _ in 0..20 {
                let scale = rng.random_range(1e-4..1e-1);
                let mut g = d.factors.clone();
                for t in [&mut g.u1, &mut g.u2] {
                    for v in t.data_mut() {
                        *v += scale * rng.random_range(-1.0..1.0);
                    }
                }
                let q1 = leading_columns(&svd(&g.u1).unwrap().u, r1);
                let q2 = leading_columns(&svd(&g.u2).unwrap().u, r2);
                let w3 = w.tensor().flatten_from(2).unwrap();
                let core = q1.contract(0, &q2.contract(0, &w3, 1).unwrap(), 1).unwrap().into_reshape(&[r1, r2, k, k]).unwrap();
                let cand = recover(&Tucker2Factors::new(q1, q2, core).unwrap()).unwrap();
                let c2 = cand.tensor().sub(w.tensor()).unwrap().frobenius_norm().powi(2);
                assert!(c2 >= t1.max(t2) - 1e-10);
                assert!(2.0 * c2 >= err2 - 1e-10);
            }
        }
    }

    #[test]
    fn rank_errors() {
        let w = ConvWeight::new(Tensor::zeros(&[4, 3, 3, 3])).unwrap();
        assert!(decompose(&w, 0, 1).is_err());
        assert!(decompose(&w, 5, 1).is_err());
        assert!(decompose(&w, 2, 4).is_err());
        assert!(ConvWeight::new(Tensor::zeros(&[4, 3, 3, 2])).is_err());
        assert!(ConvWeight::new(Tensor::zeros(&[4, 3, 3])).is_err());
        assert!(Tucker2Factors::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[3, 2]), Tensor::zeros(&[2, 3, 3, 3])).is_err());
    }

    #[test]
    fn factorized_forward_pointwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random(&[3, 3, 1, 1], &mut rng);
        let f = Tucker2Factors::new(Tensor::eye(3), Tensor::eye(3), g.clone()).unwrap();
        let x = random(&[3, 4, 4], &mut rng);
        let y = factorized_forward(&f, &x, 1, 0).unwrap();
        let x4 = x.reshape(&[1, 3, 4, 4]).unwrap();
        let expect = oracles::conv2d_direct(&x4, &g, None, 1, 0);
        assert!(y.reshape(&[1, 3, 4, 4]).unwrap().sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn factorized_forward_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_factors(6, 5, 3, 3, 2, &mut rng);
        let w = recover(&f).unwrap();
        let x = random(&[2, 5, 7, 7], &mut rng);
        for stride in [1, 2] {
            for padding in [0, 1] {
                let y = factorized_forward(&f, &x, stride, padding).unwrap();
                let d = oracles::conv2d_direct(&x, w.tensor(), None, stride, padding);
                assert!(y.rel_error(&d).unwrap() < 1e-8);
            }
        }
    }

    #[test]
    fn factorized_forward_batch_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = random_factors(4, 3, 3, 2, 2, &mut rng);
        let x = random(&[3, 3, 5, 5], &mut rng);
        let yb = factorized_forward(&f, &x, 1, 1).unwrap();
        for b in 0..3 {
            let xs = Tensor::new(vec![3, 5, 5], x.data()[b * 75..(b + 1) * 75].to_vec()).unwrap();
            let ys = factorized_forward(&f, &xs, 1, 1).unwrap();
            let n = ys.len();
            assert!(ys.data().iter().zip(&yb.data()[b * n..(b + 1) * n]).all(|(a, c)| (a - c).abs() < 1e-12));
        }
        assert!(factorized_forward(&f, &Tensor::zeros(&[1, 4, 5, 5]), 1, 1).is_err());
    }

    #[test]
    fn published_rank_table_param_counts() {
        assert_eq!(param_count(64, 64, 3, 27, 21), 8175);
        assert_eq!(param_count(128, 64, 3, 45, 33), 21237);
        assert_eq!(param_count(512, 512, 3, 8, 8), 8768);
        assert_eq!(dense_param_count(64, 64, 3), 36864);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn projection_is_idempotent(seed in any::<u64>(), o in 2usize..7, i in 2usize..7, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_weight(o, i, k, &mut rng);
            let t = (1 + seed as usize % o, 1 + (seed >> 8) as usize % i);
            let p = project(&w, t).unwrap();
            let pp = project(&p, t).unwrap();
            prop_assert!(pp.tensor().sub(p.tensor()).unwrap().frobenius_norm() <= 1e-7 * p.tensor().frobenius_norm().max(1e-300));
        }
    }
}
