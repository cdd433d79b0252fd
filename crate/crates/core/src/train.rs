// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE training: AdamW with decoupled weight decay, a warmed-up cosine
//! learning-rate schedule and a linearly warmed-up L1 sparsity coefficient.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation_io::{write_atomic, ActivationDump, Space};
use crate::error::{ensure, Error, Result};
use crate::linalg::{axpy, dot, Matrix, Real};
use crate::sae::{ActivationLaw, SaeModel, SparseCodes};

pub const ADAM_EPS: f64 = 1e-8;
/// Features silent for this many trailing steps are reported as dead.
pub const DEAD_WINDOW: usize = 5_000;
const BIAS_INIT_SAMPLE: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub law: ActivationLaw,
    /// Hidden width `s`.
    pub hidden: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Final L1 coefficient λ.
    pub l1_max: f64,
    pub l1_warmup_steps: usize,
    pub lr_warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            law: ActivationLaw::Relu,
            hidden: 4096,
            base_lr: 7e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            l1_max: 5.0,
            l1_warmup_steps: 10_000,
            lr_warmup_steps: 1_000,
            total_steps: 20_000,
            batch_size: 256,
            seed: 0,
            grad_clip: Some(1.0),
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.hidden >= 1, "hidden width must be positive");
        self.law.validate(self.hidden)?;
        ensure!(
            self.base_lr > 0.0 && self.base_lr.is_finite(),
            "base_lr must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "betas must lie in [0, 1)"
        );
        ensure!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure!(self.l1_max >= 0.0, "l1_max must be non-negative");
        ensure!(
            self.lr_warmup_steps <= self.total_steps,
            "lr warmup ({}) exceeds total steps ({})",
            self.lr_warmup_steps,
            self.total_steps
        );
        ensure!(
            self.l1_warmup_steps <= self.total_steps,
            "l1 warmup ({}) exceeds total steps ({})",
            self.l1_warmup_steps,
            self.total_steps
        );
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.log_every >= 1, "log_every must be at least 1");
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, "grad_clip must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("bad training config: {e}")))
    }
}

/// Learning rate at `step`: linear warmup to `base_lr`, then cosine decay to 0
/// at `total_steps`.
pub fn cosine_lr(step: usize, lr_warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    if step < lr_warmup_steps {
        return base_lr * (step + 1) as f64 / lr_warmup_steps as f64;
    }
    if total_steps <= lr_warmup_steps || step >= total_steps {
        return 0.0;
    }
    let progress = (step - lr_warmup_steps) as f64 / (total_steps - lr_warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// L1 coefficient at `step`: linear ramp from 0 to `l1_max`.
pub fn l1_coeff(step: usize, l1_warmup_steps: usize, l1_max: f64) -> f64 {
    if l1_warmup_steps == 0 {
        return l1_max;
    }
    (step as f64 / l1_warmup_steps as f64).min(1.0) * l1_max
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

/// First and second moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// AdamW state for every SAE parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub w_enc: Moments<T>,
    pub b_enc: Moments<T>,
    pub atoms: Moments<T>,
    pub b_dec: Moments<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &SaeModel<T>) -> Self {
        Self {
            step: 0,
            w_enc: Moments::zeros(model.w_enc.len()),
            b_enc: Moments::zeros(model.b_enc.len()),
            atoms: Moments::zeros(model.atoms.len()),
            b_dec: Moments::zeros(model.b_dec.len()),
        }
    }
}

/// One AdamW update of `params` in place.
///
/// `t` is the 1-based step count used for bias correction. Fails, naming
/// `name`, if any gradient is non-finite.
pub fn adamw_step<T: Real>(
    name: &str,
    params: &mut [T],
    grads: &[T],
    state: &mut Moments<T>,
    t: u64,
    hp: &AdamW,
) -> Result<()> {
    ensure!(
        params.len() == grads.len() && state.m.len() == params.len() && state.v.len() == params.len(),
        "parameter `{name}`: shape mismatch between params, grads and moments"
    );
    ensure!(t >= 1, "AdamW step count starts at 1");
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient in parameter `{name}` at index {i}"
        )));
    }
    let c = |v: f64| T::from(v).unwrap();
    let (b1, b2) = (c(hp.beta1), c(hp.beta2));
    let bc1 = c(1.0 - hp.beta1.powi(t as i32));
    let bc2 = c(1.0 - hp.beta2.powi(t as i32));
    let (lr, wd, eps) = (c(hp.lr), c(hp.weight_decay), c(hp.eps));
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * *p;
    }
    Ok(())
}

/// Gradients for every SAE parameter tensor, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads<T> {
    pub w_enc: Vec<T>,
    pub b_enc: Vec<T>,
    /// Gradient w.r.t. the decoder columns, same layout as [`SaeModel::atoms`].
    pub atoms: Vec<T>,
    pub b_dec: Vec<T>,
}

impl<T: Real> SaeGrads<T> {
    fn zeros(model: &SaeModel<T>) -> Self {
        Self {
            w_enc: vec![T::zero(); model.w_enc.len()],
            b_enc: vec![T::zero(); model.b_enc.len()],
            atoms: vec![T::zero(); model.atoms.len()],
            b_dec: vec![T::zero(); model.b_dec.len()],
        }
    }

    fn tensors(&self) -> [&[T]; 4] {
        [&self.w_enc, &self.b_enc, &self.atoms, &self.b_dec]
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| {
                let g = g.to_f64().unwrap();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, c: T) {
        for t in [&mut self.w_enc, &mut self.b_enc, &mut self.atoms, &mut self.b_dec] {
            t.iter_mut().for_each(|g| *g *= c);
        }
    }
}

/// Loss components for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub recon: f64,
    /// `λ · mean_row(‖h‖₁)`
    pub l1_term: f64,
    pub mean_l0: f64,
}

/// Batch loss `mean‖ẑ − z‖² + λ·mean‖h‖₁` and its exact gradients with the
/// activation mask held fixed.
///
/// `batch` is `n × d` row-major.
pub fn loss_and_grads<T: Real>(
    model: &SaeModel<T>,
    batch: &[T],
    n: usize,
    l1: T,
) -> Result<(LossBreakdown, SaeGrads<T>)> {
    let (loss, grads, _) = forward_backward(model, batch, n, l1)?;
    Ok((loss, grads))
}

fn forward_backward<T: Real>(
    model: &SaeModel<T>,
    batch: &[T],
    n: usize,
    l1: T,
) -> Result<(LossBreakdown, SaeGrads<T>, SparseCodes<T>)> {
    let d = model.d();
    ensure!(n >= 1, "empty batch");
    ensure!(
        batch.len() == n * d,
        "batch has {} values, expected {n}×{d}",
        batch.len()
    );
    let codes = model.encode_rows(batch, n);
    let mut grads = SaeGrads::zeros(model);
    let inv_n = T::one() / T::from(n).unwrap();
    let two_over_n = inv_n + inv_n;
    let mut zhat = vec![T::zero(); d];
    let (mut recon, mut l1_sum, mut l0) = (0.0f64, 0.0f64, 0usize);

    for (i, z) in batch.chunks_exact(d).enumerate() {
        let (idx, val) = codes.row(i);
        model.decode_sparse_into(idx, val, &mut zhat);
        // zhat becomes the upstream gradient 2(ẑ − z)/n after the loss is read
        let mut sq = 0.0f64;
        for (e, &zi) in zhat.iter_mut().zip(z) {
            *e -= zi;
            let ef = e.to_f64().unwrap();
            sq += ef * ef;
            *e *= two_over_n;
        }
        recon += sq;
        axpy(T::one(), &zhat, &mut grads.b_dec);
        for (&j, &v) in idx.iter().zip(val) {
            let j = j as usize;
            l1_sum += v.abs().to_f64().unwrap();
            if v != T::zero() {
                l0 += 1;
            }
            let atom = model.atom(j);
            axpy(v, &zhat, &mut grads.atoms[j * d..(j + 1) * d]);
            let g = dot(atom, &zhat) + l1 * v.signum_or_zero() * inv_n;
            axpy(g, z, &mut grads.w_enc[j * d..(j + 1) * d]);
            grads.b_enc[j] -= g;
        }
    }
    let nf = n as f64;
    let recon = recon / nf;
    let l1_term = l1.to_f64().unwrap() * l1_sum / nf;
    let loss = LossBreakdown {
        loss: recon + l1_term,
        recon,
        l1_term,
        mean_l0: l0 as f64 / nf,
    };
    Ok((loss, grads, codes))
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: Real> SignumOrZero for T {
    fn signum_or_zero(self) -> Self {
        if self == T::zero() {
            T::zero()
        } else {
            self.signum()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub l1_coeff: f64,
    pub reconstruction_loss: f64,
    pub l1_term: f64,
    pub mean_l0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    /// Full-stream reconstruction loss of the initialised model.
    pub initial_recon_loss: f64,
    /// Full-stream reconstruction loss of the returned model.
    pub final_recon_loss: f64,
    pub final_mean_l0: f64,
    /// Features never active in the trailing `min(DEAD_WINDOW, steps)` steps.
    pub dead_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub summary: TrainSummary,
}

impl TrainLog {
    /// One JSON object per line: every record, then `{"summary": …}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).unwrap());
            out.push('\n');
        }
        out.push_str(&serde_json::json!({ "summary": self.summary }).to_string());
        out.push('\n');
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = self.to_jsonl();
        write_atomic(path.as_ref(), |w| w.write_all(text.as_bytes()))
    }
}

/// Unit-norm random decoder columns, tied encoder, zero encoder bias and a
/// decoder bias equal to the mean of a seeded sample of up to 10k rows.
pub fn init_model(data: &Matrix, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<SaeModel<f32>> {
    let (n, d, s) = (data.rows(), data.cols(), cfg.hidden);
    ensure!(n >= 1, "cannot initialise from an empty stream");
    let mut atoms = Vec::with_capacity(s * d);
    for _ in 0..s {
        let mut col: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        col.iter_mut().for_each(|v| *v /= norm);
        atoms.extend(col.into_iter().map(|v| v as f32));
    }
    let sample = index::sample(rng, n, n.min(BIAS_INIT_SAMPLE)).into_vec();
    let mut mean = vec![0.0f64; d];
    for &r in &sample {
        for (m, &v) in mean.iter_mut().zip(data.row(r)) {
            *m += f64::from(v);
        }
    }
    let b_dec: Vec<f32> = mean.iter().map(|m| (m / sample.len() as f64) as f32).collect();
    SaeModel::new(d, s, cfg.law, atoms.clone(), vec![0.0; s], atoms, b_dec)
}

/// Mean reconstruction loss of `model` over every row of `data`.
pub fn eval_reconstruction(model: &SaeModel<f32>, data: &Matrix) -> Result<f64> {
    ensure!(!data.is_empty(), "empty evaluation set");
    let codes = model.encode_rows(data.as_slice(), data.rows());
    let mut zhat = vec![0.0f32; model.d()];
    let mut total = 0.0f64;
    for (i, z) in data.iter_rows().enumerate() {
        let (idx, val) = codes.row(i);
        model.decode_sparse_into(idx, val, &mut zhat);
        total += zhat
            .iter()
            .zip(z)
            .map(|(&a, &b)| {
                let e = f64::from(a) - f64::from(b);
                e * e
            })
            .sum::<f64>();
    }
    Ok(total / data.rows() as f64)
}

/// Trains an SAE on a raw activation stream.
///
/// Deterministic given `cfg.seed`: initialisation, per-epoch shuffles and
/// therefore every batch come from one seeded generator. Incomplete trailing
/// batches of an epoch are skipped.
pub fn train(stream: &ActivationDump, cfg: &TrainConfig) -> Result<(SaeModel<f32>, TrainLog)> {
    cfg.validate()?;
    ensure!(
        stream.space() == Space::Raw,
        "training stream must be raw activations, got {}",
        stream.space()
    );
    let data = stream.data();
    let (n, d) = (data.rows(), data.cols());
    ensure!(
        n >= cfg.batch_size,
        "stream has {n} tokens, fewer than one batch of {}",
        cfg.batch_size
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(data, cfg, &mut rng)?;
    let initial = eval_reconstruction(&model, data)?;
    let mut records = Vec::new();

    if cfg.total_steps == 0 {
        let l0 = crate::sae::mean_l0(&model.encode_matrix(data)?)?;
        let summary = TrainSummary {
            steps: 0,
            initial_recon_loss: initial,
            final_recon_loss: initial,
            final_mean_l0: l0,
            dead_features: 0,
        };
        return Ok((model, TrainLog { records, summary }));
    }

    let mut state = OptimizerState::new(&model);
    let mut order: Vec<usize> = (0..n).collect();
    let batches_per_epoch = n / cfg.batch_size;
    let mut batch = vec![0.0f32; cfg.batch_size * d];
    let mut last_fired: Vec<Option<usize>> = vec![None; cfg.hidden];
    let mut last_good = None;

    for step in 0..cfg.total_steps {
        let slot = step % batches_per_epoch;
        if slot == 0 {
            order.shuffle(&mut rng);
        }
        for (dst, &r) in batch
            .chunks_exact_mut(d)
            .zip(&order[slot * cfg.batch_size..(slot + 1) * cfg.batch_size])
        {
            dst.copy_from_slice(data.row(r));
        }
        let lr = cosine_lr(step, cfg.lr_warmup_steps, cfg.total_steps, cfg.base_lr);
        let l1 = l1_coeff(step, cfg.l1_warmup_steps, cfg.l1_max);
        let (loss, mut grads, codes) = forward_backward(&model, &batch, cfg.batch_size, l1 as f32)?;
        if !loss.loss.is_finite() {
            return Err(Error::Diverged { step, last_good });
        }
        for i in 0..codes.rows() {
            let (idx, val) = codes.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                if v != 0.0 {
                    last_fired[j as usize] = Some(step);
                }
            }
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale((clip / norm) as f32);
            }
        }
        state.step += 1;
        let hp = AdamW {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            eps: ADAM_EPS,
        };
        let t = state.step;
        let step_result = adamw_step("W_e", &mut model.w_enc, &grads.w_enc, &mut state.w_enc, t, &hp)
            .and_then(|_| adamw_step("b_e", &mut model.b_enc, &grads.b_enc, &mut state.b_enc, t, &hp))
            .and_then(|_| adamw_step("W_d", &mut model.atoms, &grads.atoms, &mut state.atoms, t, &hp))
            .and_then(|_| adamw_step("b_d", &mut model.b_dec, &grads.b_dec, &mut state.b_dec, t, &hp));
        if step_result.is_err() || !model.is_finite() {
            return Err(Error::Diverged { step, last_good });
        }
        last_good = Some(step);
        if step % cfg.log_every == 0 || step + 1 == cfg.total_steps {
            records.push(TrainRecord {
                step,
                lr,
                l1_coeff: l1,
                reconstruction_loss: loss.recon,
                l1_term: loss.l1_term,
                mean_l0: loss.mean_l0,
            });
        }
    }

    let window_start = cfg.total_steps.saturating_sub(DEAD_WINDOW);
    let dead_features = last_fired
        .iter()
        .filter(|f| f.is_none_or(|s| s < window_start))
        .count();
    let final_recon = eval_reconstruction(&model, data)?;
    let final_l0 = crate::sae::mean_l0(&model.encode_matrix(data)?)?;
    let summary = TrainSummary {
        steps: cfg.total_steps,
        initial_recon_loss: initial,
        final_recon_loss: final_recon,
        final_mean_l0: final_l0,
        dead_features,
    };
    Ok((model, TrainLog { records, summary }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn cosine_lr_examples() {
        assert_eq!(cosine_lr(100, 10, 100, 1e-3), 0.0);
        assert_eq!(cosine_lr(100, 0, 100, 1e-3), 0.0);
        assert!(close(cosine_lr(4, 10, 100, 1e-3), 5e-4, 1e-15));
        assert!(close(cosine_lr(50, 0, 100, 1.0), 0.5, 1e-15));
        assert_eq!(cosine_lr(10, 10, 10, 1.0), 0.0);
        assert_eq!(cosine_lr(0, 0, 100, 2.0), 2.0);
    }

    #[test]
    fn cosine_lr_monotone_after_warmup() {
        let (w, t) = (20, 300);
        let lrs: Vec<f64> = (w..=t).map(|s| cosine_lr(s, w, t, 0.1)).collect();
        assert!(lrs.windows(2).all(|p| p[1] <= p[0]));
        // continuous at the boundary up to one warmup increment
        assert!((cosine_lr(w - 1, w, t, 0.1) - cosine_lr(w, w, t, 0.1)).abs() <= 0.1 / w as f64);
    }

    #[test]
    fn l1_coeff_examples() {
        assert_eq!(l1_coeff(0, 10_000, 5.0), 0.0);
        assert_eq!(l1_coeff(10_000, 10_000, 5.0), 5.0);
        assert_eq!(l1_coeff(50_000, 10_000, 5.0), 5.0);
        assert_eq!(l1_coeff(2_500, 10_000, 5.0), 1.25);
        assert_eq!(l1_coeff(7, 0, 5.0), 5.0);
    }

    fn hp(lr: f64, wd: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: wd,
            eps: 1e-8,
        }
    }

    #[test]
    fn adamw_examples() {
        let mut p = vec![1.0f64];
        let mut st = Moments::zeros(1);
        adamw_step("p", &mut p, &[1.0], &mut st, 1, &hp(0.1, 0.01)).unwrap();
        // m̂ = v̂ = 1 → 1 − 0.1·1/(1 + 1e-8) − 0.1·0.01
        assert!((p[0] - 0.899).abs() < 1e-8, "{}", p[0]);

        let mut p = vec![2.0f64, -4.0];
        let mut st = Moments::zeros(2);
        adamw_step("p", &mut p, &[0.0, 0.0], &mut st, 1, &hp(0.5, 0.1)).unwrap();
        assert_eq!(p, vec![2.0 - 0.5 * 0.1 * 2.0, -4.0 + 0.5 * 0.1 * 4.0]);

        let mut p = vec![3.0f64];
        let mut st = Moments { m: vec![0.0], v: vec![0.7] };
        adamw_step("p", &mut p, &[0.0], &mut st, 5, &hp(0.5, 0.0)).unwrap();
        assert_eq!(p, vec![3.0]);
    }

    #[test]
    fn adamw_rejects_nan_naming_param() {
        let mut p = vec![1.0f32];
        let mut st = Moments::zeros(1);
        let err = adamw_step("W_e", &mut p, &[f32::NAN], &mut st, 1, &hp(0.1, 0.0)).unwrap_err();
        assert!(err.to_string().contains("W_e"));
    }

    #[test]
    fn identity_model_has_zero_loss_and_grads() {
        let m = SaeModel::<f64>::identity(3, ActivationLaw::TopK { k: 3 }).unwrap();
        let batch = [1.0, -2.0, 0.5, 0.0, 3.0, 1.0];
        let (loss, g) = loss_and_grads(&m, &batch, 2, 0.0).unwrap();
        assert_eq!(loss.loss, 0.0);
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn l1_term_for_single_active_unit() {
        // ReLU with one unit firing at 2: W_e = [[1],[−1]], z = [2]
        let m = SaeModel::<f64>::new(
            1,
            2,
            ActivationLaw::Relu,
            vec![1.0, -1.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0],
        )
        .unwrap();
        let (loss, _) = loss_and_grads(&m, &[2.0], 1, 0.3).unwrap();
        assert_eq!(loss.recon, 0.0);
        assert!((loss.l1_term - 2.0 * 0.3).abs() < 1e-15);
        assert_eq!(loss.mean_l0, 1.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.law = ActivationLaw::TopK { k: c.hidden + 1 };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            lr_warmup_steps: 10,
            total_steps: 5,
            l1_warmup_steps: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let text = TrainConfig::default().to_toml();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), TrainConfig::default());
    }

    #[test]
    fn zero_steps_returns_initialised_model() {
        let data = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let dump = ActivationDump::single_query("t", "d", Space::Raw, data).unwrap();
        let cfg = TrainConfig {
            hidden: 4,
            total_steps: 0,
            lr_warmup_steps: 0,
            l1_warmup_steps: 0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (model, log) = train(&dump, &cfg).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(model.b_dec(), &[3.0, 4.0]);
        for j in 0..4 {
            let atom = model.atom(j);
            let norm: f32 = atom.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert_eq!(&model.w_enc()[j * 2..j * 2 + 2], atom);
        }
    }

    #[test]
    fn raw_space_required() {
        let data = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let dump = ActivationDump::single_query("t", "d", Space::SaeFeatures, data).unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(train(&dump, &cfg).is_err());
    }
}
