use std::io::{self, Read, Write};

use rand::Rng;

use super::NnError;

/// A named dense parameter with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Param {
            name: name.into(),
            rows,
            cols,
            value: vec![0.0; n],
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters in declaration order plus the Adam step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    pub params: Vec<Param>,
    pub step: u64,
}

impl ParameterSet {
    pub fn add(&mut self, p: Param) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for parameter `idx`.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, idx: usize, fan_in: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for x in &mut self.params[idx].value {
            *x = rng.random_range(-bound..=bound);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|x| x.is_finite()))
    }

    /// One bias-corrected Adam update. Fails without touching anything when
    /// a gradient is not finite.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), NnError> {
        for p in &self.params {
            if let Some(k) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient {
                    param: p.name.clone(),
                    index: k,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            for k in 0..p.value.len() {
                let g = p.grad[k];
                p.m[k] = cfg.beta1 * p.m[k] + (1.0 - cfg.beta1) * g;
                p.v[k] = cfg.beta2 * p.v[k] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.m[k] / bc1;
                let v_hat = p.v[k] / bc2;
                p.value[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        if !self.all_finite() {
            return Err(NnError::NonFiniteParameter);
        }
        Ok(())
    }

    /// Flat view used by gradient checks: `(param, offset)` of coordinate `i`.
    pub fn locate(&self, mut i: usize) -> (usize, usize) {
        for (k, p) in self.params.iter().enumerate() {
            if i < p.len() {
                return (k, i);
            }
            i -= p.len();
        }
        panic!("coordinate out of range");
    }
}

const CKPT_MAGIC: &[u8; 4] = b"RMCK";
const CKPT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, config words (count + u32 each),
/// parameter count, then per parameter `(rows u32, cols u32, values f64...)`
/// in declaration order. A trailing flag byte says whether the Adam step and
/// moments follow.
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    config: &[u32],
    params: &ParameterSet,
    with_adam: bool,
) -> io::Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    for c in config {
        w.write_all(&c.to_le_bytes())?;
    }
    w.write_all(&(params.params.len() as u32).to_le_bytes())?;
    for p in &params.params {
        w.write_all(&(p.rows as u32).to_le_bytes())?;
        w.write_all(&(p.cols as u32).to_le_bytes())?;
        for x in &p.value {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.write_all(&[with_adam as u8])?;
    if with_adam {
        w.write_all(&params.step.to_le_bytes())?;
        for p in &params.params {
            for x in p.m.iter().chain(&p.v) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> io::Result<()> {
    let mut b = [0; 8];
    for x in out {
        r.read_exact(&mut b)?;
        *x = f64::from_le_bytes(b);
    }
    Ok(())
}

/// Reads the config words of a checkpoint, then fills `params` (whose shapes
/// must already match, e.g. built from those words by the caller).
pub fn read_checkpoint_header<R: Read>(r: &mut R) -> Result<Vec<u32>, NnError> {
    let mut magic = [0; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(NnError::BadCheckpoint("bad magic".into()));
    }
    if read_u32(r)? != CKPT_VERSION {
        return Err(NnError::BadCheckpoint("unsupported version".into()));
    }
    let n = read_u32(r)? as usize;
    if n > 64 {
        return Err(NnError::BadCheckpoint("config too long".into()));
    }
    (0..n).map(|_| read_u32(r).map_err(NnError::from)).collect()
}

pub fn read_checkpoint_body<R: Read>(r: &mut R, params: &mut ParameterSet) -> Result<(), NnError> {
    let count = read_u32(r)? as usize;
    if count != params.params.len() {
        return Err(NnError::BadCheckpoint(format!(
            "expected {} parameters, found {count}",
            params.params.len()
        )));
    }
    for p in &mut params.params {
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        if (rows, cols) != (p.rows, p.cols) {
            return Err(NnError::BadCheckpoint(format!(
                "{}: expected {}x{}, found {rows}x{cols}",
                p.name, p.rows, p.cols
            )));
        }
        read_f64s(r, &mut p.value)?;
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    if flag[0] == 1 {
        let mut b = [0; 8];
        r.read_exact(&mut b)?;
        params.step = u64::from_le_bytes(b);
        for p in &mut params.params {
            read_f64s(r, &mut p.m)?;
            read_f64s(r, &mut p.v)?;
        }
    } else {
        params.step = 0;
        for p in &mut params.params {
            p.m.iter_mut().for_each(|x| *x = 0.0);
            p.v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    if !params.all_finite() {
        return Err(NnError::NonFiniteParameter);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_params() -> ParameterSet {
        let mut ps = ParameterSet::default();
        let mut a = Param::zeros("a", 2, 2);
        a.value = vec![1.0, -2.0, 0.5, 3.0];
        ps.add(a);
        ps.add(Param::zeros("b", 1, 3));
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = two_params();
        let before = ps.clone();
        ps.adam_step(&AdamConfig::default()).unwrap();
        for (p, q) in ps.params.iter().zip(&before.params) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = two_params();
        let before = ps.clone();
        ps.params[0].grad = vec![0.3, -7.0, 1e-3, 100.0];
        let cfg = AdamConfig::default();
        ps.adam_step(&cfg).unwrap();
        for k in 0..4 {
            let delta = ps.params[0].value[k] - before.params[0].value[k];
            let g = ps.params[0].grad[k];
            assert!((delta + cfg.lr * g.signum()).abs() < 1e-7 * cfg.lr.max(1.0), "{delta}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut ps = two_params();
        ps.params[1].grad[2] = f64::NAN;
        let before = ps.clone();
        assert!(matches!(
            ps.adam_step(&AdamConfig::default()),
            Err(NnError::NonFiniteGradient { index: 2, .. })
        ));
        assert_eq!(ps.step, before.step);
        for (a, b) in ps.params.iter().zip(&before.params) {
            assert_eq!((&a.value, &a.m, &a.v), (&b.value, &b.m, &b.v));
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = sum (x - c)^2
        let mut ps = ParameterSet::default();
        ps.add(Param::zeros("x", 1, 4));
        let c = [1.0, -2.0, 0.5, 3.0];
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let loss = |ps: &ParameterSet| ps.params[0].value.iter().zip(&c).map(|(x, c)| (x - c).powi(2)).sum::<f64>();
        let mut history = Vec::new();
        for _ in 0..100 {
            let x = ps.params[0].value.clone();
            for k in 0..4 {
                ps.params[0].grad[k] = 2.0 * (x[k] - c[k]);
            }
            history.push(loss(&ps));
            ps.adam_step(&cfg).unwrap();
        }
        for w in history[5..].windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(history[99] < 0.1 * history[0]);
    }

    #[test]
    fn clipping() {
        let mut ps = two_params();
        ps.params[0].grad = vec![3.0, 4.0, 0.0, 0.0];
        assert_eq!(ps.clip_grad_norm(1.0), 5.0);
        assert!((ps.grad_norm() - 1.0).abs() < 1e-12);
        assert!((ps.clip_grad_norm(10.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut ps = two_params();
        ps.params[0].grad = vec![1.0; 4];
        ps.adam_step(&AdamConfig::default()).unwrap();
        for with_adam in [false, true] {
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &[7, 9], &ps, with_adam).unwrap();
            let mut r = buf.as_slice();
            assert_eq!(read_checkpoint_header(&mut r).unwrap(), vec![7, 9]);
            let mut back = two_params();
            read_checkpoint_body(&mut r, &mut back).unwrap();
            assert_eq!(back.params[0].value, ps.params[0].value);
            assert_eq!(back.step, if with_adam { 1 } else { 0 });
            if with_adam {
                assert_eq!(back.params[0].m, ps.params[0].m);
            }
        }
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[], &ps, false).unwrap();
        buf[0] = b'X';
        assert!(read_checkpoint_header(&mut buf.as_slice()).is_err());
    }
}
