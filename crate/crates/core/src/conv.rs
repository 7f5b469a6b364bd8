//! im2col + GEMM convolution kernels shared by dense layers, the factorized
//! layer's three stages, and the benchmark.
//!
//! Layout: inputs are `B × C × H × W`, weights `O × C × K × K`. The column
//! buffer is `(C·K·K) × (B·Ho·Wo)` so a whole batch is one GEMM.

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.batch * ho * wo
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

pub fn out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return shape_err("stride must be positive");
    }
    if input + 2 * padding < kernel {
        return shape_err(format!(
            "kernel {kernel} larger than padded input {} (input {input}, padding {padding})",
            input + 2 * padding
        ));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

pub fn geometry(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<ConvGeometry> {
    let [b, c, h, w] = match x.shape() {
        &[b, c, h, w] => [b, c, h, w],
        s => return shape_err(format!("convolution input must be B×C×H×W, got {:?}", s)),
    };
    out_size(h, kernel, stride, padding)?;
    out_size(w, kernel, stride, padding)?;
    Ok(ConvGeometry {
        batch: b,
        channels: c,
        height: h,
        width: w,
        kernel,
        stride,
        padding,
    })
}

pub fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    if g.is_pointwise() {
        let hw = g.height * g.width;
        for b in 0..g.batch {
            for c in 0..g.channels {
                let src = &x[(b * g.channels + c) * hw..][..hw];
                cols[c * ncols + b * l..][..l].copy_from_slice(src);
            }
        }
        return cols;
    }
    let k = g.kernel;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut cols[row * ncols..][..ncols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        let dst = &mut dst_row[b * l + oh * wo..][..wo];
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * g.width..][..g.width];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.width as isize {
                                *d = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let ncols = g.col_cols();
    let hw = g.height * g.width;
    let mut x = vec![0.0; g.batch * g.channels * hw];
    if g.is_pointwise() {
        for b in 0..g.batch {
            for c in 0..g.channels {
                x[(b * g.channels + c) * hw..][..hw].copy_from_slice(&cols[c * ncols + b * l..][..l]);
            }
        }
        return x;
    }
    let k = g.kernel;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &cols[row * ncols..][..ncols];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.channels + c) * hw..][..hw];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src = &src_row[b * l + oh * wo..][..wo];
                        let dst = &mut plane[ih as usize * g.width..][..g.width];
                        for (ow, s) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward output plus the column buffer needed by [`conv2d_backward`].
pub struct ConvForward {
    pub y: Tensor,
    pub cols: Vec<f64>,
    pub geometry: ConvGeometry,
}

pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Result<ConvForward> {
    let (o, c, kh, kw) = match w.shape() {
        &[o, c, kh, kw] => (o, c, kh, kw),
        s => return shape_err(format!("conv weight must be O×C×K×K, got {:?}", s)),
    };
    if kh != kw {
        return shape_err(format!("non-square kernel {kh}×{kw}"));
    }
    let g = geometry(x, kh, stride, padding)?;
    if g.channels != c {
        return shape_err(format!(
            "conv input has {} channels, weight {:?} expects {}",
            g.channels,
            w.shape(),
            c
        ));
    }
    if let Some(b) = bias {
        if b.len() != o {
            return shape_err(format!("bias length {} for {} output channels", b.len(), o));
        }
    }
    let cols = im2col(x.data(), &g);
    let y = conv_from_cols(&cols, w.data(), o, bias, &g);
    Ok(ConvForward { y, cols, geometry: g })
}

fn conv_from_cols(cols: &[f64], w: &[f64], o: usize, bias: Option<&[f64]>, g: &ConvGeometry) -> Tensor {
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let n = g.col_cols();
    let mut ymat = vec![0.0; o * n];
    gemm(o, g.col_rows(), n, 1.0, w, false, cols, false, 0.0, &mut ymat);
    // O × (B·L) → B × O × L
    let mut y = vec![0.0; o * n];
    for oc in 0..o {
        let bv = bias.map_or(0.0, |b| b[oc]);
        for b in 0..g.batch {
            let src = &ymat[oc * n + b * l..][..l];
            let dst = &mut y[(b * o + oc) * l..][..l];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    Tensor::new(vec![g.batch, o, ho, wo], y).expect("conv output shape")
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Vec<f64>>,
}

/// Gradients of a convolution given the cached column buffer. `want_params`
/// gates the weight/bias products; `want_input` gates col2im.
pub fn conv2d_backward(
    fwd_cols: &[f64],
    g: &ConvGeometry,
    w: &Tensor,
    dy: &Tensor,
    want_params: bool,
    want_input: bool,
) -> Result<ConvGrads> {
    let o = w.shape()[0];
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let n = g.col_cols();
    if dy.shape() != [g.batch, o, ho, wo] {
        return shape_err(format!(
            "conv output gradient {:?} does not match [{}, {}, {}, {}]",
            dy.shape(),
            g.batch,
            o,
            ho,
            wo
        ));
    }
    let mut dymat = vec![0.0; o * n];
    for b in 0..g.batch {
        for oc in 0..o {
            dymat[oc * n + b * l..][..l].copy_from_slice(&dy.data()[(b * o + oc) * l..][..l]);
        }
    }
    let (dw, db) = if want_params {
        let mut dw = vec![0.0; o * g.col_rows()];
        gemm(o, n, g.col_rows(), 1.0, &dymat, false, fwd_cols, true, 0.0, &mut dw);
        let db = dymat.chunks(n).map(|r| r.iter().sum()).collect();
        (Some(Tensor::new(w.shape().to_vec(), dw)?), Some(db))
    } else {
        (None, None)
    };
    let dx = if want_input {
        let mut dcols = vec![0.0; g.col_rows() * n];
        gemm(g.col_rows(), o, n, 1.0, w.data(), true, &dymat, false, 0.0, &mut dcols);
        let dx = col2im(&dcols, g);
        Some(Tensor::new(vec![g.batch, g.channels, g.height, g.width], dx)?)
    } else {
        None
    };
    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (k, s, p) in [(3, 1, 1), (3, 2, 0), (1, 1, 0), (2, 2, 1), (3, 2, 1), (1, 2, 0)] {
            let x = random(&[2, 3, 7, 6], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = conv2d(&x, &w, Some(&b), s, p).unwrap().y;
            let expect = oracles::conv2d_direct(&x, &w, Some(&b), s, p);
            assert_eq!(y.shape(), expect.shape());
            assert!(y.sub(&expect).unwrap().max_abs() < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, dx> and == <w, dw> for a bias-free conv
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[2, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let f = conv2d(&x, &w, None, 2, 1).unwrap();
        let dy = random(f.y.shape(), &mut rng);
        let gr = conv2d_backward(&f.cols, &f.geometry, &w, &dy, true, true).unwrap();
        let ip = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let lhs = ip(&f.y, &dy);
        assert!((lhs - ip(&x, gr.dx.as_ref().unwrap())).abs() < 1e-10);
        assert!((lhs - ip(&w, gr.dw.as_ref().unwrap())).abs() < 1e-10);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[2, 2, 3, 3]), None, 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[2, 3, 5, 5]), None, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[2, 3, 3, 2]), None, 1, 0).is_err());
        assert!(conv2d(&Tensor::zeros(&[3, 4, 4]), &Tensor::zeros(&[2, 3, 3, 3]), None, 1, 0).is_err());
    }
}
