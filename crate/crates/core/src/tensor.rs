//! Dense row-major tensors.
//!
//! A [`Tensor`] owns a flat `Vec<f64>` and a shape. Every dimension is at least
//! one and the shape is never empty; a scalar is a tensor of shape `[1]`.
//! Permutation always materialises the data in the new row-major order.

use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; use [`Tensor::new`] for checked construction.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Rows × cols of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(format!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        self.clone().into_reshape(new_shape)
    }

    pub fn into_reshape(mut self, new_shape: &[usize]) -> Result<Tensor> {
        check_shape(new_shape)?;
        let n: usize = new_shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!(
                "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
                self.shape,
                self.data.len(),
                new_shape,
                n
            ));
        }
        self.shape = new_shape.to_vec();
        Ok(self)
    }

    /// Merge axes `start..` into one trailing axis.
    pub fn flatten_from(&self, start: usize) -> Result<Tensor> {
        if start >= self.ndim() {
            return invalid(format!(
                "flatten_from({start}) on a {}-d tensor",
                self.ndim()
            ));
        }
        let mut shape = self.shape[..start].to_vec();
        shape.push(self.shape[start..].iter().product());
        self.reshape(&shape)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.dims2()?;
        self.permute(&[1, 0])
    }

    /// `result[i_order[0], .., i_order[n-1]] == self[i_0, .., i_{n-1}]`, i.e. axis
    /// `k` of the result is axis `order[k]` of the input.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        let n = self.ndim();
        let mut seen = vec![false; n];
        if order.len() != n {
            return invalid(format!("permutation {:?} for a {}-d tensor", order, n));
        }
        for &o in order {
            if o >= n || seen[o] {
                return invalid(format!("{:?} is not a permutation of 0..{}", order, n));
            }
            seen[o] = true;
        }
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            return Ok(self.clone());
        }
        let src_strides = self.strides();
        let new_shape: Vec<usize> = order.iter().map(|&o| self.shape[o]).collect();
        let gather: Vec<usize> = order.iter().map(|&o| src_strides[o]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; n];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[src]);
            for ax in (0..n).rev() {
                idx[ax] += 1;
                src += gather[ax];
                if idx[ax] < new_shape[ax] {
                    break;
                }
                src -= gather[ax] * new_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: new_shape,
            data,
        })
    }

    /// Sum over one matched axis: the result's shape is `self.shape` without
    /// `axis_a` followed by `other.shape` without `axis_b`. Two vectors contract
    /// to a tensor of shape `[1]`.
    pub fn contract(&self, axis_a: usize, other: &Tensor, axis_b: usize) -> Result<Tensor> {
        if axis_a >= self.ndim() || axis_b >= other.ndim() {
            return shape_err(format!(
                "contract axes out of range: {:?} axis {} with {:?} axis {}",
                self.shape, axis_a, other.shape, axis_b
            ));
        }
        let n = self.shape[axis_a];
        if n != other.shape[axis_b] {
            return shape_err(format!(
                "contract dimension mismatch: {:?} axis {} ({}) vs {:?} axis {} ({})",
                self.shape, axis_a, n, other.shape, axis_b, other.shape[axis_b]
            ));
        }
        let mut order_a: Vec<usize> = (0..self.ndim()).filter(|&i| i != axis_a).collect();
        order_a.push(axis_a);
        let mut order_b = vec![axis_b];
        order_b.extend((0..other.ndim()).filter(|&i| i != axis_b));
        let a = self.permute(&order_a)?;
        let b = other.permute(&order_b)?;
        let rest_a: Vec<usize> = order_a[..order_a.len() - 1]
            .iter()
            .map(|&i| self.shape[i])
            .collect();
        let rest_b: Vec<usize> = order_b[1..].iter().map(|&i| other.shape[i]).collect();
        let m: usize = rest_a.iter().product();
        let p: usize = rest_b.iter().product();
        let mut out = vec![0.0; m * p];
        gemm(m, n, p, 1.0, &a.data, false, &b.data, false, 0.0, &mut out);
        let mut shape = rest_a;
        shape.extend(rest_b);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::new(shape, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.dims2()?;
        other.dims2()?;
        self.contract(1, other, 0)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Relative Frobenius distance `‖self − other‖ / ‖other‖` (absolute if `other` is zero).
    pub fn rel_error(&self, reference: &Tensor) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        let base = reference.frobenius_norm();
        Ok(if base > 0.0 { diff / base } else { diff })
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return shape_err(format!("invalid tensor shape {:?}", shape));
    }
    Ok(())
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// `c ← alpha · op(a) · op(b) + beta · c` on row-major buffers, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. A transposed operand is stored in its
/// untransposed row-major layout (`k × m` for `a`, `n × k` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extent the strides address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn contract_matrix_example() {
        let a = Tensor::from_rows(&[&[1., 2., 3.], &[4., 5., 6.]]).unwrap();
        let b = Tensor::from_rows(&[&[1., 0.], &[0., 1.], &[1., 1.]]).unwrap();
        let c = a.contract(1, &b, 0).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[4., 5., 10., 11.]);
        assert_eq!(c, oracles::contract_naive(&a, 1, &b, 0));
    }

    #[test]
    fn identity_contraction_leaves_operand() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&[4, 3, 2], &mut rng);
        let c = Tensor::eye(4).contract(1, &b, 0).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn contract_shape_rule() {
        let a = Tensor::zeros(&[2, 2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert_eq!(a.contract(2, &b, 0).unwrap().shape(), &[2, 2, 2]);
    }

    #[test]
    fn contract_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let msg = a.contract(1, &b, 0).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn contract_matches_triple_loop_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random(&[5, 7], &mut rng);
            let b = random(&[7, 3], &mut rng);
            let c = a.contract(1, &b, 0).unwrap();
            let mut expect = Tensor::zeros(&[5, 3]);
            for i in 0..5 {
                for j in 0..3 {
                    let s: f64 = (0..7).map(|k| a.get(&[i, k]) * b.get(&[k, j])).sum();
                    expect.set(&[i, j], s);
                }
            }
            assert!(c.sub(&expect).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn contract_inner_axes_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4, 5], &mut rng);
        let b = random(&[2, 4, 6], &mut rng);
        let c = a.contract(1, &b, 1).unwrap();
        let expect = oracles::contract_naive(&a, 1, &b, 1);
        assert_eq!(c.shape(), &[3, 5, 2, 6]);
        assert!(c.sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn vectors_contract_to_scalar() {
        let a = Tensor::new(vec![3], vec![1., 2., 3.]).unwrap();
        let c = a.contract(0, &a, 0).unwrap();
        assert_eq!(c.shape(), &[1]);
        assert_eq!(c.data(), &[14.]);
    }

    #[test]
    fn permute_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random(&[2, 3, 4], &mut rng);
        assert_eq!(t.permute(&[0, 1, 2]).unwrap(), t);

        let m = Tensor::from_rows(&[&[1., 2., 3.], &[4., 5., 6.]]).unwrap();
        let mt = m.permute(&[1, 0]).unwrap();
        assert_eq!(mt.shape(), &[3, 2]);
        assert_eq!(mt.data(), &[1., 4., 2., 5., 3., 6.]);

        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    // result index (k, i, j) ↔ source index (i, j, k); flat source = i*12 + j*4 + k
                    assert_eq!(p.get(&[k, i, j]), t.data()[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn invalid_permutations_rejected() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(t.permute(&[0, 0]).is_err());
        assert!(t.permute(&[0]).is_err());
        assert!(t.permute(&[0, 2]).is_err());
    }

    #[test]
    fn reshape_and_flatten() {
        let t = Tensor::zeros(&[4, 3, 2, 2]);
        assert_eq!(t.flatten_from(2).unwrap().shape(), &[4, 3, 4]);
        assert_eq!(
            t.flatten_from(2).unwrap().flatten_from(1).unwrap().shape(),
            &[4, 12]
        );
        assert_eq!(t.reshape(&[4, 3, 2, 2]).unwrap(), t);
        assert!(t.reshape(&[5, 9]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn permute_then_inverse_is_identity(seed in any::<u64>(), perm_idx in 0usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random(&[2, 3, 1, 4], &mut rng);
            let mut order = vec![0usize, 1, 2, 3];
            // perm_idx-th permutation in factorial numbering
            let mut k = perm_idx;
            let mut pool = order.clone();
            for (i, slot) in order.iter_mut().enumerate() {
                let f = (1..(4 - i)).product::<usize>();
                *slot = pool.remove(k / f);
                k %= f;
            }
            let mut inverse = vec![0usize; 4];
            for (i, &o) in order.iter().enumerate() {
                inverse[o] = i;
            }
            let back = t.permute(&order).unwrap().permute(&inverse).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn contract_is_bilinear(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[3, 4, 2], &mut rng);
            let a2 = random(&[3, 4, 2], &mut rng);
            let b = random(&[5, 4], &mut rng);
            let lhs = a.add(&a2).unwrap().contract(1, &b, 1).unwrap();
            let rhs = a.contract(1, &b, 1).unwrap().add(&a2.contract(1, &b, 1).unwrap()).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
        }
    }
}
