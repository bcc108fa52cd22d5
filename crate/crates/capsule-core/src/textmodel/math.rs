//! Scalar vector/matrix helpers for the tiny transformer.
//!
//! Everything is f64 and single-threaded with fixed accumulation order, so
//! forward, generation, and training are bit-reproducible across runs.

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// y = W x, with W:[out × in], x:[in].
pub fn matvec(w: &Mat, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols, x.len());
    (0..w.rows)
        .map(|o| dot(w.row(o), x))
        .collect()
}

/// dW += dy ⊗ x  (outer product accumulation).
pub fn matvec_bwd_w(dw: &mut Mat, dy: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.rows, dy.len());
    debug_assert_eq!(dw.cols, x.len());
    for (o, dyo) in dy.iter().enumerate() {
        let row = dw.row_mut(o);
        for (i, xi) in x.iter().enumerate() {
            row[i] += dyo * xi;
        }
    }
}

/// dx += Wᵀ dy.
pub fn matvec_bwd_x(dx: &mut [f64], w: &Mat, dy: &[f64]) {
    debug_assert_eq!(w.rows, dy.len());
    debug_assert_eq!(w.cols, dx.len());
    for (o, dyo) in dy.iter().enumerate() {
        let row = w.row(o);
        for (i, dxi) in dx.iter_mut().enumerate() {
            *dxi += dyo * row[i];
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Softmax with max-subtraction; stable for any finite input.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|v| v / s).collect()
}

/// log softmax(x)[idx], computed via max-subtraction and log-sum-exp.
pub fn log_softmax_at(x: &[f64], idx: usize) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    (x[idx] - m) - lse
}

const RMS_EPS: f64 = 1e-6;

/// y = x / rms(x). Returns (y, 1/rms) so backward can reuse the factor.
pub fn rmsnorm(x: &[f64]) -> (Vec<f64>, f64) {
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let ri = (ms + RMS_EPS).sqrt().recip();
    (x.iter().map(|v| v * ri).collect(), ri)
}

/// Backward of rmsnorm: dx given dy, the original input x, and 1/rms.
pub fn rmsnorm_bwd(dy: &[f64], x: &[f64], ri: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let dot_xy: f64 = dot(dy, x);
    dy.iter()
        .zip(x)
        .map(|(dyi, xi)| ri * dyi - (ri * ri * ri / n) * dot_xy * xi)
        .collect()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation. Smooth everywhere, which keeps central finite
/// differences honest during gradient checks.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -50.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax(&[1000.0, 999.0]);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rmsnorm_bwd_matches_finite_differences() {
        let x = vec![0.3, -1.2, 0.7, 2.0];
        let dy = vec![0.5, -0.25, 1.0, 0.1];
        let (_, ri) = rmsnorm(&x);
        let dx = rmsnorm_bwd(&dy, &x, ri);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let lp: f64 = rmsnorm(&xp).0.iter().zip(&dy).map(|(y, d)| y * d).sum();
            let lm: f64 = rmsnorm(&xm).0.iter().zip(&dy).map(|(y, d)| y * d).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6, "component {i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for &x in &[-3.0, -0.5, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
