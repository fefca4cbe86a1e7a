//! Objectives: temperature softmax, cross-entropy, Jensen-Shannon divergence
//! and the distillation losses built from them.
//!
//! All logs are natural, so JS lies in `[0, ln 2]`. Inside losses every log
//! argument is clamped at [`LOG_FLOOR`], which together with the `0·log 0 = 0`
//! convention keeps one-hot outputs finite.
//!
//! The hard-label cross-entropy term is always evaluated at `τ = 1`; only the
//! distillation (JS) term sees the softened distributions of student and
//! teacher, and that term is scaled by `τ²` to keep its gradient magnitude
//! comparable to the hard-label term.
//!
//! Each loss comes in two forms: a plain function over [`Tensor`] values and
//! an `*_on` variant that records the computation on a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::model::ModelParams;
use crate::{Error, Result, Tape, Tensor, Var};

pub const LOG_FLOOR: f64 = 1e-12;

/// `ln(1 + e^x)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::invalid("inverse_softplus needs a positive finite value"));
    }
    // ln(e^y − 1) = y + ln(1 − e^−y)
    Ok(y + libm::log(-libm::expm1(-y)))
}

/// Learned temperature, stored as a raw scalar `rho` with `τ = softplus(rho)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaTemperature {
    pub rho: f64,
}

impl MetaTemperature {
    pub fn from_tau(tau: f64) -> Result<Self> {
        Ok(MetaTemperature {
            rho: inverse_softplus(tau)?,
        })
    }

    pub fn tau(&self) -> f64 {
        softplus(self.rho)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Hard-label cross-entropy.
    pub lambda1: f64,
    /// Distillation / mutual-regularization term.
    pub lambda2: f64,
    /// Mismatched-teacher term.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.8,
            lambda3: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.lambda1 <= 0.0 {
            return Err(Error::invalid("lambda1 must be positive"));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("temperature must be positive"))
    }
}

/// `SS(z, τ)` for one row of logits.
pub fn softened_softmax(z: &[f64], tau: f64) -> Result<alloc::vec::Vec<f64>> {
    check_tau(tau)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softened_softmax"));
    }
    let t = Tensor::vector(z.to_vec());
    Ok(crate::tape::softmax_rows_value(&t, 1.0 / tau).into_data())
}

/// Row-wise `SS(z, τ)`.
pub fn softened_softmax_rows(z: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    z.check_finite("softened_softmax")?;
    Ok(crate::tape::softmax_rows_value(z, 1.0 / tau))
}

fn check_distributions(p: &Tensor) -> Result<()> {
    for r in 0..p.rows() {
        let row = p.row(r);
        if row.iter().any(|&v| !(v >= 0.0) || v > 1.0 + 1e-9) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("rows must be probability distributions"));
        }
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().into(),
            rhs: b.shape().into(),
        });
    }
    Ok(())
}

/// Mean over rows of `−ln p[target]` for one-hot `targets`.
pub fn cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    same_shape("cross_entropy", probs, targets)?;
    check_distributions(probs)?;
    let mut total = 0.0;
    for r in 0..probs.rows() {
        let t = targets.row(r);
        if t.iter().filter(|&&v| v == 1.0).count() != 1 || t.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("targets must be one-hot"));
        }
        let k = t.iter().position(|&v| v == 1.0).unwrap_or(0);
        total -= libm::log(probs.row(r)[k].max(LOG_FLOOR));
    }
    Ok(total / probs.rows() as f64)
}

/// Mean over rows of `JS(p_r, q_r)` in nats.
pub fn js_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    same_shape("js_divergence", p, q)?;
    check_distributions(p)?;
    check_distributions(q)?;
    let mut total = 0.0;
    for r in 0..p.rows() {
        let mut js = 0.0;
        for (&a, &b) in p.row(r).iter().zip(q.row(r)) {
            let m = 0.5 * (a + b);
            if a > 0.0 {
                js += 0.5 * a * libm::log(a / m);
            }
            if b > 0.0 {
                js += 0.5 * b * libm::log(b / m);
            }
        }
        // Rounding can leave a hair below zero for near-identical rows.
        total += js.clamp(0.0, core::f64::consts::LN_2);
    }
    Ok(total / p.rows() as f64)
}

/// `λ_ce·CE + λ_js·τ²·JS`, the shape shared by every distillation loss.
pub fn distillation_objective(ce: f64, js: f64, lambda_ce: f64, lambda_js: f64, tau: f64) -> f64 {
    lambda_ce * ce + lambda_js * tau * tau * js
}

fn distill_value(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    targets: Option<&Tensor>,
    lambda_ce: f64,
    lambda_js: f64,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    same_shape("distill", student_logits, teacher_logits)?;
    let ce = match targets {
        Some(t) => cross_entropy(&softened_softmax_rows(student_logits, 1.0)?, t)?,
        None => 0.0,
    };
    let js = if lambda_js == 0.0 {
        0.0
    } else {
        js_divergence(
            &softened_softmax_rows(student_logits, tau)?,
            &softened_softmax_rows(teacher_logits, tau)?,
        )?
    };
    Ok(distillation_objective(ce, js, lambda_ce, lambda_js, tau))
}

/// BAN student objective `λ1·CE(Y, SS(s, 1)) + λ2·τ²·JS(SS(s, τ), SS(t, τ))`.
pub fn ban_loss(student_logits: &Tensor, teacher_logits: &Tensor, targets: &Tensor, weights: &LossWeights, tau: f64) -> Result<f64> {
    distill_value(student_logits, teacher_logits, Some(targets), weights.lambda1, weights.lambda2, tau)
}

/// Teacher-side mutual regularization `λ2·τ²·JS(SS(s, τ), SS(t, τ))`.
pub fn mr_loss(student_logits: &Tensor, teacher_logits: &Tensor, weights: &LossWeights, tau: f64) -> Result<f64> {
    distill_value(student_logits, teacher_logits, None, 0.0, weights.lambda2, tau)
}

/// Student objective against a teacher from another domain:
/// `λ1·CE + λ3·τ²·JS(SS(s, τ), SS(t_mm, τ))`.
pub fn mm_loss(student_logits: &Tensor, teacher_logits: &Tensor, targets: &Tensor, weights: &LossWeights, tau: f64) -> Result<f64> {
    distill_value(student_logits, teacher_logits, Some(targets), weights.lambda1, weights.lambda3, tau)
}

/// Cross-entropy at `τ = 1` of an (already updated) student on the query
/// set of a second episode.
pub fn mct_meta_loss(updated_student: &ModelParams, episode: &Episode) -> Result<f64> {
    let logits = updated_student.logits(episode)?;
    cross_entropy(&softened_softmax_rows(&logits, 1.0)?, &episode.query_targets())
}

// ---------------------------------------------------------------------------
// Tape versions

/// `SS(z, τ)` on a tape.
pub fn softened_softmax_on(tape: &mut Tape, logits: Var, tau: f64) -> Result<Var> {
    tape.softmax_rows(logits, tau)
}

/// Mean cross-entropy of probability rows `probs` against one-hot `targets`.
pub fn cross_entropy_on(tape: &mut Tape, probs: Var, targets: &Tensor) -> Result<Var> {
    let n = tape.value(probs).rows();
    same_shape("cross_entropy", tape.value(probs), targets)?;
    let c = tape.clamp_min(probs, LOG_FLOOR)?;
    let l = tape.log(c)?;
    let y = tape.constant(targets.clone());
    let picked = tape.mul(l, y)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / n as f64)
}

fn xlogx_sum(tape: &mut Tape, p: Var) -> Result<Var> {
    let c = tape.clamp_min(p, LOG_FLOOR)?;
    let l = tape.log(c)?;
    let pl = tape.mul(p, l)?;
    tape.sum(pl)
}

/// Mean over rows of `JS(p, q)` on a tape, as `H(m) − (H(p) + H(q))/2`.
pub fn js_divergence_on(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let n = tape.value(p).rows();
    same_shape("js_divergence", tape.value(p), tape.value(q))?;
    let pq = tape.add(p, q)?;
    let m = tape.scale(pq, 0.5)?;
    let sp = xlogx_sum(tape, p)?;
    let sq = xlogx_sum(tape, q)?;
    let sm = xlogx_sum(tape, m)?;
    let half = tape.add(sp, sq)?;
    let half = tape.scale(half, 0.5)?;
    let js = tape.sub(half, sm)?;
    tape.scale(js, 1.0 / n as f64)
}

/// `λ_ce·CE(Y, SS(s, 1)) + λ_js·τ²·JS(SS(s, τ), SS(t, τ))` on a tape.
/// Either logit input may be a constant; gradients flow to whichever is
/// trainable. A zero weight drops its term from the graph.
pub fn distill_on(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    targets: Option<&Tensor>,
    lambda_ce: f64,
    lambda_js: f64,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    same_shape("distill", tape.value(student_logits), tape.value(teacher_logits))?;
    let mut total: Option<Var> = None;
    if let Some(t) = targets {
        if lambda_ce != 0.0 {
            let p = tape.softmax_rows(student_logits, 1.0)?;
            let ce = cross_entropy_on(tape, p, t)?;
            total = Some(tape.scale(ce, lambda_ce)?);
        }
    }
    if lambda_js != 0.0 {
        let ps = tape.softmax_rows(student_logits, tau)?;
        let pt = tape.softmax_rows(teacher_logits, tau)?;
        let js = js_divergence_on(tape, ps, pt)?;
        let js = tape.scale(js, lambda_js * tau * tau)?;
        total = Some(match total {
            Some(ce) => tape.add(ce, js)?,
            None => js,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

pub fn ban_loss_on(tape: &mut Tape, student_logits: Var, teacher_logits: Var, targets: &Tensor, weights: &LossWeights, tau: f64) -> Result<Var> {
    distill_on(tape, student_logits, teacher_logits, Some(targets), weights.lambda1, weights.lambda2, tau)
}

pub fn mr_loss_on(tape: &mut Tape, student_logits: Var, teacher_logits: Var, weights: &LossWeights, tau: f64) -> Result<Var> {
    distill_on(tape, student_logits, teacher_logits, None, 0.0, weights.lambda2, tau)
}

pub fn mm_loss_on(tape: &mut Tape, student_logits: Var, teacher_logits: Var, targets: &Tensor, weights: &LossWeights, tau: f64) -> Result<Var> {
    distill_on(tape, student_logits, teacher_logits, Some(targets), weights.lambda1, weights.lambda3, tau)
}
