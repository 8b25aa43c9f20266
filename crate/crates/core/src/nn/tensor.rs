//! Dense row-major 2-D `f64` tensors and the numeric kernels the tape ops
//! are built from. Everything here is pure; gradients live in `tape`.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A dense row-major matrix. Vectors are 1×d or d×1; scalars are 1×1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data must fill {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The single entry of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "item() needs a scalar tensor");
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every entry through f32. Applied to parameters and optimizer
    /// moments after each update so that the f32 payloads written to
    /// checkpoints are lossless and resume is bit-exact.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Sum of squares of all entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `op_a(A) · op_b(B)` where each `op` optionally transposes its argument.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        for k in 0..ka {
            let av = if ta { a.data[k * a.cols + i] } else { a.data[i * a.cols + k] };
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            if tb {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o += av * b.data[j * b.cols + k];
                }
            } else {
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor { rows: a.rows, cols: a.cols, data }
}

/// Broadcast-add a 1×d row vector to every row of `a`.
pub fn add_row(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((b.rows, b.cols), (1, a.cols), "add_row needs a 1x{} vector", a.cols);
    let mut out = a.clone();
    for i in 0..out.rows {
        for (o, &bv) in out.row_mut(i).iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    out
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data = a.data.iter().map(|x| x * c).collect();
    Tensor { rows: a.rows, cols: a.cols, data }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax. `-inf` entries get exactly zero probability; every row
/// must keep at least one finite entry.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max.is_finite(), "softmax row {i} has no unmasked entry");
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp(); // exp(-inf) == 0 exactly
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Numerically stable log(sum(exp(row))).
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(max.is_finite(), "log_sum_exp over all -inf");
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Draw from a normal(0, std²) truncated to ±2 std, via Box-Muller with
/// rejection.
pub fn truncated_normal_sample<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// A rows×cols tensor of truncated-normal samples, row-major order.
pub fn truncated_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| truncated_normal_sample(rng, std)).collect();
    Tensor { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b, false, false);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transpose_flags_agree_with_explicit_transposes() {
        let a = Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]);
        let b = Tensor::from_vec(2, 3, vec![2.0, 1.0, 0.0, -3.0, 5.0, 2.0]);
        let at = a.transpose();
        let bt = b.transpose();
        assert_eq!(matmul(&a, &b, false, true), matmul(&a, &bt, false, false));
        assert_eq!(matmul(&a, &b, true, false), matmul(&at, &b, false, false));
        let c = Tensor::from_vec(4, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0, 0.0, 1.5]);
        let ct = c.transpose();
        assert_eq!(matmul(&a, &c, true, true), matmul(&at, &ct, false, false));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_exactly() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 0.0, f64::NEG_INFINITY, 0.0]);
        let p = softmax_rows(&a);
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.get(1, 1), 0.0, "masked entry must be exactly zero");
        assert_eq!(p.get(1, 0), 0.5);
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158808).abs() < 1e-5);
        // Derivative agrees with finite differences.
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = vec![1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2.0_f64.ln())).abs() < 1e-9);
        let v = vec![f64::NEG_INFINITY, 0.0];
        assert_eq!(log_sum_exp(&v), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn truncated_normal_respects_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = truncated_normal(&mut rng, 40, 25, 0.02);
        assert!(t.data.iter().all(|v| v.abs() <= 0.04));
        let mean: f64 = t.data.iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        // Not degenerate.
        assert!(t.data.iter().any(|v| v.abs() > 0.005));
    }

    #[test]
    fn add_row_broadcasts() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(1, 2, vec![10.0, 20.0]);
        assert_eq!(add_row(&a, &b).data, vec![11.0, 22.0, 13.0, 24.0]);
    }
}
