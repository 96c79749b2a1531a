//! Batched LSTM cell. Weights are stored as one `(input + hidden) × 4·hidden`
//! matrix applied to `[x | h_prev]`, gate blocks ordered input, forget,
//! candidate, output.

use super::linalg::{gemm, gemm_a_bt, gemm_at_b};
use super::ops::sigmoid;

/// Activations of one cell application, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct CellCache {
    pub rows: usize,
    /// `rows × (input + hidden)`
    pub xh: Vec<f64>,
    /// `rows × 4·hidden`, post-activation
    pub gates: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellShape {
    pub input: usize,
    pub hidden: usize,
}

impl CellShape {
    pub fn fan_in(&self) -> usize {
        self.input + self.hidden
    }
}

/// Forward over `rows` independent rows. `x` is `rows × input`, states are
/// `rows × hidden`.
pub fn cell_forward(
    shape: CellShape,
    weight: &[f64],
    bias: &[f64],
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    rows: usize,
) -> CellCache {
    let (ni, nh) = (shape.input, shape.hidden);
    let k = ni + nh;
    let g4 = 4 * nh;
    let mut xh = vec![0.0; rows * k];
    for r in 0..rows {
        xh[r * k..r * k + ni].copy_from_slice(&x[r * ni..(r + 1) * ni]);
        xh[r * k + ni..(r + 1) * k].copy_from_slice(&h_prev[r * nh..(r + 1) * nh]);
    }
    let mut gates = vec![0.0; rows * g4];
    for r in 0..rows {
        gates[r * g4..(r + 1) * g4].copy_from_slice(bias);
    }
    gemm(rows, k, g4, &xh, weight, 1.0, &mut gates);

    let mut c = vec![0.0; rows * nh];
    let mut tanh_c = vec![0.0; rows * nh];
    let mut h = vec![0.0; rows * nh];
    for r in 0..rows {
        let z = &mut gates[r * g4..(r + 1) * g4];
        for j in 0..nh {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[nh + j]);
            let g = z[2 * nh + j].tanh();
            let o = sigmoid(z[3 * nh + j]);
            z[j] = i;
            z[nh + j] = f;
            z[2 * nh + j] = g;
            z[3 * nh + j] = o;
            let cj = f * c_prev[r * nh + j] + i * g;
            let tc = cj.tanh();
            c[r * nh + j] = cj;
            tanh_c[r * nh + j] = tc;
            h[r * nh + j] = o * tc;
        }
    }
    CellCache {
        rows,
        xh,
        gates,
        c_prev: c_prev[..rows * nh].to_vec(),
        c,
        tanh_c,
        h,
    }
}

/// Gradients flowing out of one cell application.
pub struct CellGrads {
    /// `rows × input`
    pub dx: Vec<f64>,
    pub dh_prev: Vec<f64>,
    pub dc_prev: Vec<f64>,
}

/// Backward for one cell application. `dh` is the total gradient on the
/// output `h`, `dc` the gradient arriving at `c` from the next step.
/// Accumulates into `dweight` and `dbias`.
pub fn cell_backward(
    shape: CellShape,
    cache: &CellCache,
    weight: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dh: &[f64],
    dc: &[f64],
) -> CellGrads {
    let (ni, nh) = (shape.input, shape.hidden);
    let k = ni + nh;
    let g4 = 4 * nh;
    let rows = cache.rows;
    let mut dz = vec![0.0; rows * g4];
    let mut dc_prev = vec![0.0; rows * nh];
    for r in 0..rows {
        let gt = &cache.gates[r * g4..(r + 1) * g4];
        let d = &mut dz[r * g4..(r + 1) * g4];
        for j in 0..nh {
            let idx = r * nh + j;
            let (i, f, g, o) = (gt[j], gt[nh + j], gt[2 * nh + j], gt[3 * nh + j]);
            let tc = cache.tanh_c[idx];
            let dhj = dh[idx];
            let dcj = dc[idx] + dhj * o * (1.0 - tc * tc);
            d[j] = dcj * g * i * (1.0 - i);
            d[nh + j] = dcj * cache.c_prev[idx] * f * (1.0 - f);
            d[2 * nh + j] = dcj * i * (1.0 - g * g);
            d[3 * nh + j] = dhj * tc * o * (1.0 - o);
            dc_prev[idx] = dcj * f;
        }
    }
    gemm_at_b(rows, k, g4, &cache.xh, &dz, dweight);
    for r in 0..rows {
        for (b, d) in dbias.iter_mut().zip(&dz[r * g4..(r + 1) * g4]) {
            *b += d;
        }
    }
    let mut dxh = vec![0.0; rows * k];
    gemm_a_bt(rows, g4, k, &dz, weight, 0.0, &mut dxh);
    let mut dx = vec![0.0; rows * ni];
    let mut dh_prev = vec![0.0; rows * nh];
    for r in 0..rows {
        dx[r * ni..(r + 1) * ni].copy_from_slice(&dxh[r * k..r * k + ni]);
        dh_prev[r * nh..(r + 1) * nh].copy_from_slice(&dxh[r * k + ni..(r + 1) * k]);
    }
    CellGrads { dx, dh_prev, dc_prev }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Scalar-by-scalar recomputation with separate gate weights.
    fn naive(shape: CellShape, w: &[f64], b: &[f64], x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nh = shape.hidden;
        let xh: Vec<f64> = x.iter().chain(h).copied().collect();
        let pre = |gate: usize, j: usize| {
            let col = gate * nh + j;
            b[col] + (0..xh.len()).map(|p| xh[p] * w[p * 4 * nh + col]).sum::<f64>()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut hn = vec![0.0; nh];
        let mut cn = vec![0.0; nh];
        for j in 0..nh {
            let i = sig(pre(0, j));
            let f = sig(pre(1, j));
            let g = pre(2, j).tanh();
            let o = sig(pre(3, j));
            cn[j] = f * c[j] + i * g;
            hn[j] = o * cn[j].tanh();
        }
        (hn, cn)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let shape = CellShape { input: 3, hidden: 4 };
        let w = vec![0.0; shape.fan_in() * 16];
        let b = vec![0.0; 16];
        let cache = cell_forward(shape, &w, &b, &[1.0, -2.0, 0.5], &[0.0; 4], &[0.0; 4], 1);
        assert!(cache.h.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = CellShape { input: 5, hidden: 3 };
        let w = random(shape.fan_in() * 12, &mut rng);
        let b = random(12, &mut rng);
        let x = random(10, &mut rng);
        let h = random(6, &mut rng);
        let c = random(6, &mut rng);
        let cache = cell_forward(shape, &w, &b, &x, &h, &c, 2);
        for r in 0..2 {
            let (hn, cn) = naive(shape, &w, &b, &x[r * 5..r * 5 + 5], &h[r * 3..r * 3 + 3], &c[r * 3..r * 3 + 3]);
            for j in 0..3 {
                assert!((cache.h[r * 3 + j] - hn[j]).abs() < 1e-14);
                assert!((cache.c[r * 3 + j] - cn[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = CellShape { input: 4, hidden: 3 };
        let mut w = random(shape.fan_in() * 12, &mut rng);
        let b = random(12, &mut rng);
        let mut x = random(4, &mut rng);
        let h = random(3, &mut rng);
        let c = random(3, &mut rng);
        let wh = random(3, &mut rng);
        let wc = random(3, &mut rng);
        // loss = <wh, h'> + <wc, c'>
        let loss = |w: &[f64], x: &[f64]| {
            let k = cell_forward(shape, w, &b, x, &h, &c, 1);
            k.h.iter().zip(&wh).map(|(a, b)| a * b).sum::<f64>() + k.c.iter().zip(&wc).map(|(a, b)| a * b).sum::<f64>()
        };
        let cache = cell_forward(shape, &w, &b, &x, &h, &c, 1);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 12];
        let grads = cell_backward(shape, &cache, &w, &mut dw, &mut db, &wh, &wc);
        let step = 1e-5;
        for k in (0..w.len()).step_by(5) {
            let orig = w[k];
            w[k] = orig + step;
            let up = loss(&w, &x);
            w[k] = orig - step;
            let down = loss(&w, &x);
            w[k] = orig;
            let num = (up - down) / (2.0 * step);
            assert!((num - dw[k]).abs() <= 1e-4 * num.abs().max(dw[k].abs()).max(1e-7), "w[{k}]");
        }
        for k in 0..4 {
            let orig = x[k];
            x[k] = orig + step;
            let up = loss(&w, &x);
            x[k] = orig - step;
            let down = loss(&w, &x);
            x[k] = orig;
            let num = (up - down) / (2.0 * step);
            assert!((num - grads.dx[k]).abs() <= 1e-4 * num.abs().max(1e-7));
        }
    }
}
