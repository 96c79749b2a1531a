//! Row-wise softmax utilities.

use super::NnError;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|z| z - lse).collect()
}

/// `logsumexp(logits) - logits[target]`.
pub fn softmax_nll(logits: &[f64], target: usize) -> Result<f64, NnError> {
    if target >= logits.len() {
        return Err(NnError::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    Ok(logsumexp(logits) - logits[target])
}

/// Adds `weight * d nll / d logits = weight * (softmax - onehot)` into `grad`.
pub fn softmax_nll_grad(logits: &[f64], target: usize, weight: f64, grad: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    for (k, (g, z)) in grad.iter_mut().zip(logits).enumerate() {
        let p = (z - max).exp() / total;
        *g += weight * (p - if k == target { 1.0 } else { 0.0 });
    }
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Entropy of `softmax(logits)` and its gradient with respect to the
/// logits, `-p_k (log p_k + H)`, scaled by `weight` and added into `grad`.
pub fn softmax_entropy_grad(logits: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
    let logp = log_softmax(logits);
    let h = -logp.iter().map(|l| l.exp() * l).filter(|x| x.is_finite()).sum::<f64>();
    for (g, l) in grad.iter_mut().zip(&logp) {
        let p = l.exp();
        if p > 0.0 {
            *g += -weight * p * (l + h);
        }
    }
    h
}

/// Adds the vector-Jacobian product of softmax, `p ⊙ (dp - <p, dp>)`, into
/// `grad`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64], grad: &mut [f64]) {
    let dot: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    for ((g, p), d) in grad.iter_mut().zip(probs).zip(dprobs) {
        *g += p * (d - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|k| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[k] += h;
                b[k] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn nll_values() {
        assert!((softmax_nll(&[0.3; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        // ln(1 + 2e^-10)
        let want = (1.0 + 2.0 * (-10f64).exp()).ln();
        let got = softmax_nll(&[10.0, 0.0, 0.0], 0).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 9.0799e-5).abs() < 1e-8);
        assert!(softmax_nll(&[0.0; 3], 3).is_err());
    }

    #[test]
    fn nll_gradient_matches_fd() {
        let z = [0.2, -1.3, 2.0, 0.7];
        let mut g = vec![0.0; 4];
        softmax_nll_grad(&z, 1, 1.0, &mut g);
        let want = fd(|x| softmax_nll(x, 1).unwrap(), &z);
        for (a, n) in g.iter().zip(&want) {
            assert!((a - n).abs() / a.abs().max(n.abs()) < 1e-6);
        }
    }

    #[test]
    fn entropy_gradient_matches_fd() {
        let z = [0.2, -1.3, 2.0, 0.7, -0.1];
        let mut g = vec![0.0; 5];
        let h = softmax_entropy_grad(&z, 1.0, &mut g);
        assert!((h - entropy(&softmax(&z))).abs() < 1e-14);
        let want = fd(|x| entropy(&softmax(x)), &z);
        for (a, n) in g.iter().zip(&want) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let z = [0.5, -0.2, 1.1];
        let w = [0.3, -2.0, 0.9];
        let p = softmax(&z);
        let mut g = vec![0.0; 3];
        softmax_backward(&p, &w, &mut g);
        let want = fd(|x| softmax(x).iter().zip(&w).map(|(a, b)| a * b).sum(), &z);
        for (a, n) in g.iter().zip(&want) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[1000.0, -1000.0, 3.0, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax(&[0.1, 0.2, 0.3]);
        assert!(q.iter().all(|&x| x > 0.0));
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
