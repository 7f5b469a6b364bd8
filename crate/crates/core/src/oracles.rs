//! Slow, obviously-correct reference implementations.
//!
//! Each function here is written directly from its defining formula with
//! nested loops and shares no code with the production path it checks.
//! Used by `selftest` and by the test suites.

use crate::tensor::Tensor;

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for ax in (0..shape.len()).rev() {
        idx[ax] = flat % shape[ax];
        flat /= shape[ax];
    }
    idx
}

fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (i, d)| acc * d + i)
}

/// Contraction by enumerating every output index tuple.
pub fn contract_naive(a: &Tensor, axis_a: usize, b: &Tensor, axis_b: usize) -> Tensor {
    let n = a.shape()[axis_a];
    assert_eq!(n, b.shape()[axis_b]);
    let ra: Vec<usize> = a.shape().iter().enumerate().filter(|(i, _)| *i != axis_a).map(|(_, d)| *d).collect();
    let rb: Vec<usize> = b.shape().iter().enumerate().filter(|(i, _)| *i != axis_b).map(|(_, d)| *d).collect();
    let mut shape: Vec<usize> = ra.iter().chain(&rb).copied().collect();
    if shape.is_empty() {
        shape.push(1);
    }
    let total: usize = shape.iter().product();
    let na: usize = ra.iter().product();
    let nb: usize = rb.iter().product();
    let mut out = vec![0.0; total];
    for ia in 0..na {
        let ia_idx = unravel(ia, &ra);
        for ib in 0..nb {
            let ib_idx = unravel(ib, &rb);
            let mut s = 0.0;
            for k in 0..n {
                let mut full_a = ia_idx.clone();
                full_a.insert(axis_a, k);
                let mut full_b = ib_idx.clone();
                full_b.insert(axis_b, k);
                s += a.data()[ravel(&full_a, a.shape())] * b.data()[ravel(&full_b, b.shape())];
            }
            out[ia * nb + ib] = s;
        }
    }
    Tensor::new(shape, out).unwrap()
}

/// Direct-sum 2-D convolution (cross-correlation) with zero padding.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, stride: usize, padding: usize) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (wd + 2 * padding - k) / stride + 1;
    Tensor::from_fn(&[b, o, ho, wo], |i| {
        let (n, oc, oh, ow) = (i[0], i[1], i[2], i[3]);
        let mut s = bias.map_or(0.0, |bv| bv[oc]);
        for ic in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    let iw = (ow * stride + kj) as isize - padding as isize;
                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                        s += w.get(&[oc, ic, ki, kj]) * x.get(&[n, ic, ih as usize, iw as usize]);
                    }
                }
            }
        }
        s
    })
}

/// `W[o,i,p,q] = Σ_{a,b} U1[o,a] · U2[i,b] · G[a,b,p,q]`.
pub fn tucker2_recover_naive(u1: &Tensor, u2: &Tensor, g: &Tensor) -> Tensor {
    let (o, r1) = (u1.shape()[0], u1.shape()[1]);
    let (i, r2) = (u2.shape()[0], u2.shape()[1]);
    let k = g.shape()[2];
    Tensor::from_fn(&[o, i, k, k], |ix| {
        let mut s = 0.0;
        for a in 0..r1 {
            for b in 0..r2 {
                s += u1.get(&[ix[0], a]) * u2.get(&[ix[1], b]) * g.get(&[a, b, ix[2], ix[3]]);
            }
        }
        s
    })
}

/// Mode-1 (`O × I·K²`) and mode-2 (`I × O·K²`) unfoldings of a conv weight
/// built entry by entry.
pub fn unfoldings_naive(w: &Tensor) -> (Tensor, Tensor) {
    let (o, i, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let kk = k * k;
    let m1 = Tensor::from_fn(&[o, i * kk], |ix| {
        let (oc, rest) = (ix[0], ix[1]);
        w.get(&[oc, rest / kk, (rest % kk) / k, rest % k])
    });
    let m2 = Tensor::from_fn(&[i, o * kk], |ix| {
        let (ic, rest) = (ix[0], ix[1]);
        w.get(&[rest / kk, ic, (rest % kk) / k, rest % k])
    });
    (m1, m2)
}

/// Central finite difference of `f` at every coordinate of `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// One entry of the pooled singular-value list: `(value, layer, mode, index)`,
/// with mode 0 for the output-channel mode and 1 for the input-channel mode.
pub type PooledEntry = (f64, usize, usize, usize);

/// Total order used by global selection: larger value first, then earlier
/// layer, then mode 1 before mode 2, then earlier index.
pub fn pooled_precedes(a: &PooledEntry, b: &PooledEntry) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    (a.1, a.2, a.3) < (b.1, b.2, b.3)
}

/// Exhaustive search over every rank vector in `[floor, cap]` per layer and mode.
///
/// A candidate is admissible when it fits the budget and the set of singular
/// values it retains above the floors is a prefix of the pooled order
/// ([`pooled_precedes`]); among admissible candidates the one retaining the
/// most singular mass wins (ties: more retained values). `layers` lists
/// `(o, i, k, sigma1, sigma2)`; ranks are capped by the spectrum lengths.
pub fn brute_force_global(
    layers: &[(usize, usize, usize, Vec<f64>, Vec<f64>)],
    budget: usize,
    floor: usize,
) -> Option<Vec<(usize, usize)>> {
    let caps: Vec<(usize, usize)> = layers.iter().map(|l| (l.3.len(), l.4.len())).collect();
    let floors: Vec<(usize, usize)> = caps.iter().map(|&(c1, c2)| (floor.min(c1), floor.min(c2))).collect();
    let dims: Vec<usize> = caps
        .iter()
        .zip(&floors)
        .flat_map(|(&(c1, c2), &(f1, f2))| [c1 - f1 + 1, c2 - f2 + 1])
        .collect();
    let total: usize = dims.iter().product();
    let mut best: Option<(f64, usize, Vec<(usize, usize)>)> = None;
    for flat in 0..total {
        let digits = unravel(flat, &dims);
        let ranks: Vec<(usize, usize)> = (0..layers.len())
            .map(|l| (floors[l].0 + digits[2 * l], floors[l].1 + digits[2 * l + 1]))
            .collect();
        let cost: usize = layers
            .iter()
            .zip(&ranks)
            .map(|(l, &(r1, r2))| l.0 * r1 + l.1 * r2 + r1 * r2 * l.2 * l.2)
            .sum();
        if cost > budget {
            continue;
        }
        let mut kept: Vec<PooledEntry> = Vec::new();
        let mut dropped: Vec<PooledEntry> = Vec::new();
        for (li, l) in layers.iter().enumerate() {
            for (mode, (sig, (f, r))) in [(&l.3, (floors[li].0, ranks[li].0)), (&l.4, (floors[li].1, ranks[li].1))]
                .into_iter()
                .enumerate()
            {
                for (idx, &s) in sig.iter().enumerate().skip(f) {
                    let e = (s, li, mode, idx);
                    if idx < r {
                        kept.push(e);
                    } else {
                        dropped.push(e);
                    }
                }
            }
        }
        let prefix = kept
            .iter()
            .all(|k| dropped.iter().all(|d| pooled_precedes(k, d)));
        if !prefix {
            continue;
        }
        let mass: f64 = kept.iter().map(|e| e.0).sum();
        let better = match &best {
            None => true,
            Some((bm, bn, _)) => mass > *bm || (mass == *bm && kept.len() > *bn),
        };
        if better {
            best = Some((mass, kept.len(), ranks));
        }
    }
    best.map(|b| b.2)
}
