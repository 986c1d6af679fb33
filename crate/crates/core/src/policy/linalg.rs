//! Dense row-major kernels used by the network.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4 * 4;
    for (x, y) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// `out += W x` for a `rows x cols` matrix.
pub fn matvec_acc(out: &mut [f64], w: &[f64], cols: usize, x: &[f64]) {
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += W^T y` for a `rows x cols` matrix.
pub fn matvec_t_acc(out: &mut [f64], w: &[f64], cols: usize, y: &[f64]) {
    debug_assert_eq!(w.len(), y.len() * cols);
    for (&yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if yi != 0.0 {
            axpy(out, yi, row);
        }
    }
}

/// `G += y x^T`
pub fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    debug_assert_eq!(g.len(), y.len() * x.len());
    for (&yi, row) in y.iter().zip(g.chunks_exact_mut(x.len())) {
        if yi != 0.0 {
            axpy(row, yi, x);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-softmax in place.
pub fn log_softmax(xs: &mut [f64]) {
    let z = log_sum_exp(xs);
    for x in xs {
        *x -= z;
    }
}

pub fn softmax(xs: &mut [f64]) {
    log_softmax(xs);
    for x in xs {
        *x = x.exp();
    }
}

pub fn norm(xs: &[f64]) -> f64 {
    dot(xs, xs).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_match_naive_loops() {
        let w: Vec<f64> = (0..15).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x: Vec<f64> = (0..5).map(|i| 1.0 - i as f64).collect();
        let y = [1.0, -2.0, 0.5];
        let mut out = vec![0.0; 3];
        matvec_acc(&mut out, &w, 5, &x);
        for r in 0..3 {
            let naive: f64 = (0..5).map(|c| w[r * 5 + c] * x[c]).sum();
            assert!((out[r] - naive).abs() < 1e-12);
        }
        let mut back = vec![0.0; 5];
        matvec_t_acc(&mut back, &w, 5, &y);
        for c in 0..5 {
            let naive: f64 = (0..3).map(|r| w[r * 5 + c] * y[r]).sum();
            assert!((back[c] - naive).abs() < 1e-12);
        }
        let mut g = vec![0.0; 15];
        outer_acc(&mut g, &y, &x);
        assert_eq!(g[7], y[1] * x[2]);
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let mut v = vec![1000.0, 1001.0, -1e9];
        softmax(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v[2] == 0.0);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 2]), f64::NEG_INFINITY);
        assert!((sigmoid(-800.0)).is_finite() && sigmoid(800.0) == 1.0);
    }
}
