//! Dense row-major f64 arrays and the forward/backward primitives the rest
//! of the pipeline is built from, plus the SGD optimizer and a central
//! finite-difference gradient checker.
//!
//! Backward passes are hand-written per operation; composite losses call
//! them in reverse composition order. There is no tape.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// 2D accessor, for tests and small matrices.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// self += s * other (shapes must match).
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }
}

/// c = a @ b for a: [m x k], b: [k x n].
///
/// Loop order keeps `c` hot in cache and streams each row of `b` exactly
/// once, which matters for the wide fully-connected layers downstream.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul", a)?;
    let (kb, n) = dims2("matmul", b)?;
    if k != kb {
        return Err(Error::shape("matmul", format!("inner dims {} vs {}", k, kb)));
    }
    let mut c = Tensor::zeros(&[m, n]);
    let cd = c.data_mut();
    for p in 0..k {
        let b_row = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let a_ip = a.data[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut cd[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += a_ip * bv;
            }
        }
    }
    Ok(c)
}

/// c = a^T @ b for a: [r x m], b: [r x n]; result [m x n].
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, m) = dims2("matmul_tn", a)?;
    let (rb, n) = dims2("matmul_tn", b)?;
    if r != rb {
        return Err(Error::shape("matmul_tn", format!("row dims {} vs {}", r, rb)));
    }
    let mut c = Tensor::zeros(&[m, n]);
    let cd = c.data_mut();
    for i in 0..m {
        let c_row = &mut cd[i * n..(i + 1) * n];
        for p in 0..r {
            let a_pi = a.data[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += a_pi * bv;
            }
        }
    }
    Ok(c)
}

/// c = a @ b^T for a: [m x k], b: [n x k]; result [m x n].
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul_nt", a)?;
    let (n, kb) = dims2("matmul_nt", b)?;
    if k != kb {
        return Err(Error::shape("matmul_nt", format!("inner dims {} vs {}", k, kb)));
    }
    let mut c = Tensor::zeros(&[m, n]);
    let cd = c.data_mut();
    for j in 0..n {
        let b_row = &b.data[j * k..(j + 1) * k];
        for i in 0..m {
            let a_row = &a.data[i * k..(i + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row.iter()).map(|(x, y)| x * y).sum();
            cd[i * n + j] = dot;
        }
    }
    Ok(c)
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::shape(op, format!("expected 2D, got {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise 1/(1+e^-x).
pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor { shape: x.shape.clone(), data }
}

/// Gradient wrt the pre-sigmoid input, given the sigmoid output y.
pub fn sigmoid_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    debug_assert_eq!(y.shape, gy.shape);
    let data = y.data.iter().zip(gy.data.iter()).map(|(&s, &g)| g * s * (1.0 - s)).collect();
    Tensor { shape: y.shape.clone(), data }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = dims2("softmax_rows", x)?;
    if c == 0 {
        return Err(Error::invalid("softmax_rows", "zero columns"));
    }
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out.data[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Gradient wrt the softmax input, given the output y and upstream gy.
pub fn softmax_rows_backward(y: &Tensor, gy: &Tensor) -> Result<Tensor> {
    let (r, c) = dims2("softmax_rows_backward", y)?;
    if y.shape != gy.shape {
        return Err(Error::shape("softmax_rows_backward", "y vs gy".to_string()));
    }
    let mut gx = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let yr = &y.data[i * c..(i + 1) * c];
        let gr = &gy.data[i * c..(i + 1) * c];
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        let out = &mut gx.data[i * c..(i + 1) * c];
        for j in 0..c {
            out[j] = yr[j] * (gr[j] - dot);
        }
    }
    Ok(gx)
}

/// 2D cross-correlation of a [H x W] frame with a 3x3 kernel, zero padded so
/// the output shape equals the input shape.
pub fn conv2d_same(frame: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w) = dims2("conv2d_same", frame)?;
    if kernel.shape() != [3, 3] {
        return Err(Error::shape("conv2d_same", format!("kernel must be 3x3, got {:?}", kernel.shape)));
    }
    let mut out = Tensor::zeros(&[h, w]);
    let k = &kernel.data;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in 0..3usize {
                let yy = y as isize + dy as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in 0..3usize {
                    let xx = x as isize + dx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += frame.data[yy as usize * w + xx as usize] * k[dy * 3 + dx];
                }
            }
            out.data[y * w + x] = acc;
        }
    }
    Ok(out)
}

/// Gradients of conv2d_same wrt frame and kernel.
pub fn conv2d_same_backward(
    frame: &Tensor,
    kernel: &Tensor,
    gout: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = dims2("conv2d_same_backward", frame)?;
    if gout.shape != frame.shape {
        return Err(Error::shape("conv2d_same_backward", "gout vs frame".to_string()));
    }
    let mut gframe = Tensor::zeros(&[h, w]);
    let mut gkernel = Tensor::zeros(&[3, 3]);
    for y in 0..h {
        for x in 0..w {
            let g = gout.data[y * w + x];
            if g == 0.0 {
                continue;
            }
            for dy in 0..3usize {
                let yy = y as isize + dy as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in 0..3usize {
                    let xx = x as isize + dx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let f = frame.data[yy as usize * w + xx as usize];
                    gframe.data[yy as usize * w + xx as usize] += g * kernel.data[dy * 3 + dx];
                    gkernel.data[dy * 3 + dx] += g * f;
                }
            }
        }
    }
    Ok((gframe, gkernel))
}

/// Summed smooth-L1 over elements: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(Error::shape("smooth_l1", format!("{:?} vs {:?}", pred.shape, target.shape)));
    }
    let mut acc = 0.0;
    for (p, t) in pred.data.iter().zip(target.data.iter()) {
        let x = p - t;
        acc += if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
    }
    Ok(acc)
}

/// d smooth_l1 / d pred.
pub fn smooth_l1_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape != target.shape {
        return Err(Error::shape("smooth_l1_grad", format!("{:?} vs {:?}", pred.shape, target.shape)));
    }
    let data = pred
        .data
        .iter()
        .zip(target.data.iter())
        .map(|(p, t)| {
            let x = p - t;
            if x.abs() < 1.0 {
                x
            } else {
                x.signum()
            }
        })
        .collect();
    Ok(Tensor { shape: pred.shape.clone(), data })
}

/// Per-row labels for `classification_loss`.
pub enum Labels {
    /// One class index per row; softmax cross-entropy, averaged over rows.
    Single(Vec<usize>),
    /// Binary target per (row, class); sigmoid binary cross-entropy,
    /// averaged over rows and classes.
    Multi(Tensor),
}

pub fn classification_loss(logits: &Tensor, labels: &Labels) -> Result<f64> {
    let (r, k) = dims2("classification_loss", logits)?;
    match labels {
        Labels::Single(idx) => {
            if k < 2 {
                return Err(Error::invalid("classification_loss", "softmax mode needs K >= 2"));
            }
            if idx.len() != r {
                return Err(Error::shape("classification_loss", "label count vs rows".to_string()));
            }
            let mut acc = 0.0;
            for (i, &lab) in idx.iter().enumerate() {
                if lab >= k {
                    return Err(Error::invalid(
                        "classification_loss",
                        format!("label {} >= K {}", lab, k),
                    ));
                }
                let row = &logits.data[i * k..(i + 1) * k];
                acc += log_sum_exp(row) - row[lab];
            }
            Ok(acc / r as f64)
        }
        Labels::Multi(y) => {
            if y.shape != logits.shape {
                return Err(Error::shape("classification_loss", "targets vs logits".to_string()));
            }
            let mut acc = 0.0;
            for (&l, &t) in logits.data.iter().zip(y.data.iter()) {
                // stable BCE on logits: max(l,0) - l t + ln(1 + e^-|l|)
                acc += l.max(0.0) - l * t + (1.0 + (-l.abs()).exp()).ln();
            }
            Ok(acc / (r * k) as f64)
        }
    }
}

pub fn classification_loss_grad(logits: &Tensor, labels: &Labels) -> Result<Tensor> {
    let (r, k) = dims2("classification_loss_grad", logits)?;
    match labels {
        Labels::Single(idx) => {
            let mut g = softmax_rows(logits)?;
            for (i, &lab) in idx.iter().enumerate() {
                if lab >= k {
                    return Err(Error::invalid(
                        "classification_loss_grad",
                        format!("label {} >= K {}", lab, k),
                    ));
                }
                g.data[i * k + lab] -= 1.0;
            }
            g.scale(1.0 / r as f64);
            Ok(g)
        }
        Labels::Multi(y) => {
            if y.shape != logits.shape {
                return Err(Error::shape("classification_loss_grad", "targets vs logits".to_string()));
            }
            let scale = 1.0 / (r * k) as f64;
            let data = logits
                .data
                .iter()
                .zip(y.data.iter())
                .map(|(&l, &t)| scale * (sigmoid_scalar(l) - t))
                .collect();
            Ok(Tensor { shape: logits.shape.clone(), data })
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Trainable tensor with gradient and momentum buffers of the same shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Parameter {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Parameter { value, grad, momentum }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns a named set of parameters. Visit order must be stable;
/// it defines checkpoint layout and gradient-check coordinates.
pub trait ParamSet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter));
}

pub fn zero_grads<M: ParamSet + ?Sized>(model: &mut M) {
    model.visit_params(&mut |_, p| p.zero_grad());
}

pub fn param_count<M: ParamSet + ?Sized>(model: &mut M) -> usize {
    let mut n = 0;
    model.visit_params(&mut |_, p| n += p.value.len());
    n
}

/// Add Gaussian noise to every parameter. Gradient checks use this to move
/// zero-initialized biases off ReLU kinks, where one-sided analytic
/// derivatives and central differences legitimately disagree.
pub fn jitter_params<M: ParamSet + ?Sized>(model: &mut M, scale: f64, rng: &mut impl Rng) {
    model.visit_params(&mut |_, p| {
        for v in p.value.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    });
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping. The attention-pooled context sums
/// over every cell, so classification gradients can dwarf the proposal
/// gradients without this cap.
pub fn clip_grad_norm<M: ParamSet + ?Sized>(model: &mut M, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || !max_norm.is_finite() {
        return Err(Error::invalid("clip_grad_norm", format!("max_norm {}", max_norm)));
    }
    let mut sq = 0.0;
    model.visit_params(&mut |_, p| {
        for &g in p.grad.data() {
            sq += g * g;
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        model.visit_params(&mut |_, p| p.grad.scale(scale));
    }
    Ok(norm)
}

/// Linear warmup followed by cosine decay to zero at `total_epochs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl LrSchedule {
    pub fn lr(&self, t: f64) -> f64 {
        debug_assert!(t >= 0.0);
        if t < self.warmup_epochs {
            let frac = t / self.warmup_epochs;
            self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * frac
        } else if self.total_epochs <= self.warmup_epochs {
            self.base_lr
        } else {
            let frac = ((t - self.warmup_epochs) / (self.total_epochs - self.warmup_epochs)).min(1.0);
            self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// One SGD step with momentum and L2 weight decay at the scheduled rate.
/// Gradients are left untouched; callers zero them before the next pass.
pub fn sgd_step<M: ParamSet + ?Sized>(
    model: &mut M,
    schedule: &LrSchedule,
    epoch_progress: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    if epoch_progress < 0.0 {
        return Err(Error::invalid("sgd_step", "negative epoch_progress"));
    }
    let lr = schedule.lr(epoch_progress);
    let momentum = cfg.momentum;
    let wd = cfg.weight_decay;
    model.visit_params(&mut |_, p| {
        let v = p.value.data_mut();
        let g = p.grad.data();
        let m = p.momentum.data_mut();
        for i in 0..v.len() {
            let grad = g[i] + wd * v[i];
            m[i] = momentum * m[i] + grad;
            v[i] -= lr * m[i];
        }
    });
    Ok(())
}

fn get_param_elem<M: ParamSet + ?Sized>(model: &mut M, target: usize, elem: usize) -> f64 {
    let mut idx = 0;
    let mut out = 0.0;
    model.visit_params(&mut |_, p| {
        if idx == target {
            out = p.value.data()[elem];
        }
        idx += 1;
    });
    out
}

fn set_param_elem<M: ParamSet + ?Sized>(model: &mut M, target: usize, elem: usize, v: f64) {
    let mut idx = 0;
    model.visit_params(&mut |_, p| {
        if idx == target {
            p.value.data_mut()[elem] = v;
        }
        idx += 1;
    });
}

/// Compare the analytic gradients stored in the model's parameters against
/// central finite differences of `loss`, returning the worst relative error.
///
/// The caller runs forward + backward first so that `grad` holds analytic
/// values; `loss` must be a deterministic forward-only evaluation (dropout
/// off, fixed sampling).
pub fn finite_diff_check<M: ParamSet>(
    model: &mut M,
    eps: f64,
    mut loss: impl FnMut(&mut M) -> Result<f64>,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::invalid("finite_diff_check", "eps must be positive"));
    }
    let mut grads: Vec<Vec<f64>> = Vec::new();
    model.visit_params(&mut |_, p| grads.push(p.grad.data().to_vec()));
    let mut worst = 0.0f64;
    for (pi, grad) in grads.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = get_param_elem(model, pi, e);
            set_param_elem(model, pi, e, orig + eps);
            let f_plus = loss(model)?;
            set_param_elem(model, pi, e, orig - eps);
            let f_minus = loss(model)?;
            set_param_elem(model, pi, e, orig);
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite { context: "finite_diff_check loss".to_string() });
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let analytic = grad[e];
            let rel = (numeric - analytic).abs() / (numeric.abs().max(analytic.abs()) + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let eye = t2(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&eye, &x).unwrap(), x);
    }

    #[test]
    fn matmul_hand_example() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[1.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_matrix() {
        let z = Tensor::zeros(&[2, 3]);
        let x = t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = matmul(&z, &x).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                c.data_mut()[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_variants_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = rng.gen_range(1..5);
            let k = rng.gen_range(1..5);
            let n = rng.gen_range(1..5);
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let want = naive_matmul(&a, &b);
            let got = matmul(&a, &b).unwrap();
            for (x, y) in got.data().iter().zip(want.data().iter()) {
                assert!((x - y).abs() < 1e-12);
            }
            // a^T b via tn
            let at = transpose(&a);
            let got_tn = matmul_tn(&at, &b).unwrap();
            for (x, y) in got_tn.data().iter().zip(want.data().iter()) {
                assert!((x - y).abs() < 1e-12);
            }
            // a b^T via nt
            let bt = transpose(&b);
            let got_nt = matmul_nt(&a, &bt).unwrap();
            for (x, y) in got_nt.data().iter().zip(want.data().iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = t.data()[i * c + j];
            }
        }
        out
    }

    #[test]
    fn sigmoid_basics() {
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert!((sigmoid(&x).data()[0] - 0.5).abs() < 1e-15);
        for v in [-3.0, -0.5, 0.0, 1.7, 42.0] {
            let a = sigmoid(&Tensor::from_vec(&[1], vec![v]).unwrap()).data()[0];
            let b = sigmoid(&Tensor::from_vec(&[1], vec![-v]).unwrap()).data()[0];
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        // central difference of sigmoid at 0 is 0.25
        let eps = 1e-5;
        let f = |v: f64| sigmoid_scalar(v);
        let num = (f(eps) - f(-eps)) / (2.0 * eps);
        assert!((num - 0.25).abs() < 1e-6);
        let y = sigmoid(&Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let g = sigmoid_backward(&y, &Tensor::filled(&[1], 1.0));
        assert!((g.data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_examples() {
        let x = t2(1, 2, &[0.0, 0.0]);
        let y = softmax_rows(&x).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);

        let c = 3.7;
        let x = t2(1, 3, &[c, c, c]);
        let y = softmax_rows(&x).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = t2(1, 3, &[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let y = softmax_rows(&x).unwrap();
        assert!((y.data()[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((y.data()[2] - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn conv2d_same_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let mut kernel = Tensor::zeros(&[3, 3]);
        kernel.data_mut()[4] = 1.0;
        let out = conv2d_same(&frame, &kernel).unwrap();
        assert_eq!(out, frame);
    }

    #[test]
    fn conv2d_same_zero_kernel_and_single_cell() {
        let frame = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = conv2d_same(&frame, &Tensor::zeros(&[3, 3])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let v = 2.5;
        let k = -1.25;
        let frame = t2(1, 1, &[v]);
        let mut kernel = Tensor::zeros(&[3, 3]);
        kernel.data_mut()[4] = k;
        let out = conv2d_same(&frame, &kernel).unwrap();
        assert!((out.data()[0] - v * k).abs() < 1e-15);
    }

    #[test]
    fn conv2d_same_rejects_bad_kernel() {
        let frame = Tensor::zeros(&[2, 2]);
        assert!(conv2d_same(&frame, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn smooth_l1_values() {
        let z = Tensor::zeros(&[3]);
        assert_eq!(smooth_l1(&z, &z).unwrap(), 0.0);
        let p = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let t = Tensor::zeros(&[1]);
        assert!((smooth_l1(&p, &t).unwrap() - 0.125).abs() < 1e-15);
        let p = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        assert!((smooth_l1(&p, &t).unwrap() - 1.5).abs() < 1e-15);
        assert!(smooth_l1(&p, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn classification_loss_uniform_logits() {
        for k in 2..6 {
            let logits = Tensor::zeros(&[3, k]);
            let labels = Labels::Single(vec![0, k - 1, 1]);
            let loss = classification_loss(&logits, &labels).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_loss_confident_limit() {
        let logits = t2(1, 2, &[50.0, -50.0]);
        let loss = classification_loss(&logits, &Labels::Single(vec![0])).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn classification_loss_multi_label_zero_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let targets = Tensor::zeros(&[2, 4]);
        let loss = classification_loss(&logits, &Labels::Multi(targets)).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_loss_rejects_bad_label() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(classification_loss(&logits, &Labels::Single(vec![3])).is_err());
    }

    struct OneParam {
        p: Parameter,
    }

    impl ParamSet for OneParam {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
            f("p", &mut self.p);
        }
    }

    #[test]
    fn finite_diff_exact_for_linear() {
        let mut m = OneParam { p: Parameter::new(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()) };
        let w = [2.0, -1.0, 3.0];
        // f = w . p, analytic grad = w
        for (g, &wi) in m.p.grad.data_mut().iter_mut().zip(w.iter()) {
            *g = wi;
        }
        let worst = finite_diff_check(&mut m, 1e-6, |m| {
            Ok(m.p.value.data().iter().zip(w.iter()).map(|(a, b)| a * b).sum())
        })
        .unwrap();
        assert!(worst <= 1e-9, "worst {}", worst);
    }

    #[test]
    fn finite_diff_sigmoid_at_zero() {
        let mut m = OneParam { p: Parameter::new(Tensor::zeros(&[1])) };
        m.p.grad.data_mut()[0] = 0.25;
        let worst =
            finite_diff_check(&mut m, 1e-5, |m| Ok(sigmoid_scalar(m.p.value.data()[0]))).unwrap();
        assert!(worst <= 1e-6, "worst {}", worst);
    }

    #[test]
    fn lr_schedule_endpoints() {
        let s = LrSchedule {
            base_lr: 0.001,
            warmup_start_lr: 0.0001,
            warmup_epochs: 0.3,
            total_epochs: 10.0,
        };
        assert!((s.lr(0.0) - 0.0001).abs() < 1e-15);
        assert!((s.lr(0.3) - 0.001).abs() < 1e-15);
        assert!(s.lr(10.0).abs() < 1e-18);
        // continuity around the warmup boundary
        assert!((s.lr(0.3 - 1e-9) - s.lr(0.3 + 1e-9)).abs() < 1e-9);
    }

    #[test]
    fn sgd_zero_grad_zero_decay_is_noop() {
        let mut m = OneParam { p: Parameter::new(Tensor::from_vec(&[2], vec![1.5, -0.5]).unwrap()) };
        let before = m.p.value.clone();
        let sched = LrSchedule { base_lr: 0.1, warmup_start_lr: 0.1, warmup_epochs: 0.0, total_epochs: 10.0 };
        sgd_step(&mut m, &sched, 1.0, &SgdConfig { momentum: 0.9, weight_decay: 0.0 }).unwrap();
        assert_eq!(m.p.value, before);
    }

    #[test]
    fn sgd_rejects_negative_progress() {
        let mut m = OneParam { p: Parameter::new(Tensor::zeros(&[1])) };
        let sched = LrSchedule { base_lr: 0.1, warmup_start_lr: 0.1, warmup_epochs: 0.0, total_epochs: 1.0 };
        assert!(sgd_step(&mut m, &sched, -0.1, &SgdConfig::default()).is_err());
    }

    #[test]
    fn grad_clip_scales_only_above_threshold() {
        let mut m = OneParam { p: Parameter::new(Tensor::zeros(&[2])) };
        m.p.grad = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let norm = clip_grad_norm(&mut m, 10.0).unwrap();
        assert_eq!(norm, 5.0);
        assert_eq!(m.p.grad.data(), &[3.0, 4.0]);
        let norm = clip_grad_norm(&mut m, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        assert!((m.p.grad.data()[0] - 0.6).abs() < 1e-15);
        assert!((m.p.grad.data()[1] - 0.8).abs() < 1e-15);
        assert!(clip_grad_norm(&mut m, 0.0).is_err());
    }
}
