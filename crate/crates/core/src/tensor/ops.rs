//! Raw kernels shared by the forward and backward passes.

use super::Scalar;

/// `[outer, axis, inner]` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt_acc<F: Scalar>(g: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            let mut s = F::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + t] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn gemm_tn_acc<F: Scalar>(a: &[F], g: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == F::zero() {
                continue;
            }
            let crow = &mut c[t * n..(t + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Returns `(out_shape, out_data)` with `out.shape[i] = shape[perm[i]]`.
pub(crate) fn permute<F: Scalar>(data: &[F], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<F>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        // odometer increment over the output index
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let k = F::c((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + F::c(0.044715) * x * x * x);
    F::c(0.5) * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let k = F::c((2.0 / std::f64::consts::PI).sqrt());
    let c = F::c(0.044715);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (F::one() + F::c(3.0) * c * x * x);
    F::c(0.5) * (F::one() + t) + F::c(0.5) * x * (F::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (os, out) = permute(&data, &shape, &[2, 0, 1]);
        assert_eq!(os, vec![4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    let src = data[b * 12 + c * 4 + a];
                    assert_eq!(out[a * 6 + b * 3 + c], src);
                }
            }
        }
        let inv = inverse_perm(&[2, 0, 1]);
        let (back_shape, back) = permute(&out, &os, &inv);
        assert_eq!(back_shape, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
    }
}
