//! Distillation, reconstruction and classification losses.
//!
//! Every loss is a scalar [`Var`] on the caller's graph plus a breakdown of
//! its unweighted components. Reductions are means over batch and frames.
//! Teacher-side inputs are detached inside the loss, so callers cannot
//! accidentally route gradient into the teacher.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result, TensorError};
use crate::graph::{Graph, Var};
use crate::nn::{cvae_decode, cvae_encode, cvae_prior, frame_attention, frames, reparameterize, Arch, Latent};
use crate::params::Binding;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: Var,
    pub breakdown: BTreeMap<String, f64>,
}

impl LossValue {
    fn single(g: &Graph, name: &str, total: Var) -> Result<LossValue> {
        let v = g.value(total).item()?;
        Ok(LossValue {
            total,
            breakdown: BTreeMap::from([(name.to_string(), v)]),
        })
    }

    pub fn value(&self, g: &Graph) -> f64 {
        g.value(self.total).data()[0]
    }
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != sb.len() {
        return Err(TensorError::Rank {
            op,
            expected: sa.len(),
            got: sb.len(),
        }
        .into());
    }
    if let Some(i) = (0..sa.len()).find(|&i| sa[i] != sb[i]) {
        return Err(TensorError::Dimension {
            op,
            axis: i.to_string(),
            expected: sa[i],
            got: sb[i],
        }
        .into());
    }
    Ok(())
}

/// `sum((a - b)^2) / rows`.
fn sq_dist(g: &mut Graph, a: Var, b: Var, rows: usize) -> Result<Var> {
    let d = g.sub(a, b)?;
    let s = g.square(d);
    let s = g.sum(s);
    Ok(g.mul_scalar(s, 1.0 / rows as f64))
}

/// Identity-mapped feature KD: `||F_T - F_S||^2 / T`, averaged over the batch.
pub fn loss_feature_kd_baseline(g: &mut Graph, f_t: Var, f_s: Var) -> Result<LossValue> {
    same_shape(g, "loss_feature_kd_baseline", f_t, f_s)?;
    let s = g.shape(f_s);
    if s.len() != 5 {
        return Err(TensorError::Rank {
            op: "loss_feature_kd_baseline",
            expected: 5,
            got: s.len(),
        }
        .into());
    }
    let (n, t) = (s[0], s[2]);
    let f_t = g.detach(f_t);
    let total = sq_dist(g, f_t, f_s, n * t)?;
    LossValue::single(g, "feature_kd", total)
}

/// Closed-form `KL(q || p)` summed over latent dims, averaged over rows.
pub fn kl_diag_gaussian(g: &mut Graph, q: Latent, p: Latent) -> Result<Var> {
    same_shape(g, "kl_diag_gaussian", q.mean, p.mean)?;
    same_shape(g, "kl_diag_gaussian", q.log_var, p.log_var)?;
    same_shape(g, "kl_diag_gaussian", q.mean, q.log_var)?;
    let rows = g.shape(q.mean)[0];
    // 0.5 * (lv_p - lv_q + (exp(lv_q) + (mu_q - mu_p)^2) * exp(-lv_p) - 1)
    let dlv = g.sub(p.log_var, q.log_var)?;
    let var_q = g.exp(q.log_var);
    let dm = g.sub(q.mean, p.mean)?;
    let dm2 = g.square(dm);
    let num = g.add(var_q, dm2)?;
    let neg = g.mul_scalar(p.log_var, -1.0);
    let inv_p = g.exp(neg);
    let ratio = g.mul(num, inv_p)?;
    let s = g.add(dlv, ratio)?;
    let s = g.add_scalar(s, -1.0);
    let s = g.sum(s);
    Ok(g.mul_scalar(s, 0.5 / rows as f64))
}

/// Per-frame rows of a tap and its attention.
fn frame_rows(g: &mut Graph, f: Var, a: Var) -> Result<(Var, Var, usize)> {
    let (sf, sa) = (g.shape(f).to_vec(), g.shape(a).to_vec());
    if sf.len() != 5 || sa.len() != 3 || sf[..3] != sa[..] {
        return Err(TensorError::Dimension {
            op: "frame_rows",
            axis: "A".into(),
            expected: sf.iter().take(3).product(),
            got: sa.iter().product(),
        }
        .into());
    }
    let ft = frames(g, f)?;
    let lt = frame_attention(g, a)?;
    Ok((ft, lt, sf[0] * sf[2]))
}

/// Negative ELBO: per-frame MSE reconstruction plus `alpha * KL(q || prior)`.
pub fn loss_cvae<R: Rng + ?Sized>(
    g: &mut Graph,
    b: &Binding,
    arch: &Arch,
    f: Var,
    a: Var,
    alpha: f64,
    rng: &mut R,
) -> Result<LossValue> {
    let (ft, lt, rows) = frame_rows(g, f, a)?;
    let q = cvae_encode(g, b, ft, lt)?;
    let p = cvae_prior(g, b, lt)?;
    let z = reparameterize(g, q, rng)?;
    let recon = cvae_decode(g, b, arch, z, lt)?;
    let per_row: usize = g.shape(ft)[1..].iter().product();
    let mse = sq_dist(g, ft, recon, rows * per_row)?;
    let kl = kl_diag_gaussian(g, q, p)?;
    let weighted = g.mul_scalar(kl, alpha);
    let total = g.add(mse, weighted)?;
    Ok(LossValue {
        total,
        breakdown: BTreeMap::from([
            ("mse".to_string(), g.value(mse).item()?),
            ("kl".to_string(), g.value(kl).item()?),
        ]),
    })
}

/// Deterministic reconstruction from the prior mean.
fn prior_mean_recon(g: &mut Graph, b: &Binding, arch: &Arch, lt: Var) -> Result<Var> {
    let p = cvae_prior(g, b, lt)?;
    Ok(cvae_decode(g, b, arch, p.mean, lt)?)
}

/// Generative distillation: both CVAEs reconstruct the student's own
/// `(F_S, A_S)` from their prior means; the teacher's output is detached.
#[allow(clippy::too_many_arguments)]
pub fn loss_kd_gen(
    g: &mut Graph,
    teacher: &Binding,
    teacher_arch: &Arch,
    student: &Binding,
    student_arch: &Arch,
    f_s: Var,
    a_s: Var,
) -> Result<LossValue> {
    if teacher_arch.tap_shape() != student_arch.tap_shape() {
        return Err(Error::Incompatible(format!(
            "teacher tap {:?} differs from student tap {:?}",
            teacher_arch.tap_shape(),
            student_arch.tap_shape()
        )));
    }
    let (_, lt, rows) = frame_rows(g, f_s, a_s)?;
    let r_t = prior_mean_recon(g, teacher, teacher_arch, lt)?;
    let r_t = g.detach(r_t);
    let r_s = prior_mean_recon(g, student, student_arch, lt)?;
    let total = sq_dist(g, r_t, r_s, rows)?;
    LossValue::single(g, "kd_gen", total)
}

/// Mean squared error between each frame and its decoding from one posterior
/// sample: `||f_t - decode(z_t, lambda_t)||^2` divided by `C*H*W`.
pub fn loss_recon<R: Rng + ?Sized>(
    g: &mut Graph,
    b: &Binding,
    arch: &Arch,
    f: Var,
    a: Var,
    rng: &mut R,
) -> Result<LossValue> {
    let (ft, lt, rows) = frame_rows(g, f, a)?;
    let q = cvae_encode(g, b, ft, lt)?;
    let z = reparameterize(g, q, rng)?;
    let recon = cvae_decode(g, b, arch, z, lt)?;
    let per_row: usize = g.shape(ft)[1..].iter().product();
    let total = sq_dist(g, ft, recon, rows * per_row)?;
    LossValue::single(g, "recon", total)
}

/// `||A_T - A_S||^2` summed over `(C, T)`, averaged over the batch.
pub fn loss_kd_att(g: &mut Graph, a_t: Var, a_s: Var) -> Result<LossValue> {
    same_shape(g, "loss_kd_att", a_t, a_s)?;
    let n = g.shape(a_s)[0];
    let a_t = g.detach(a_t);
    let total = sq_dist(g, a_t, a_s, n)?;
    LossValue::single(g, "kd_att", total)
}

/// Mean cross-entropy over `C_cls + 1` logits.
pub fn loss_clf(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<LossValue> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Data(format!(
            "{} labels for logits of shape {s:?}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
        return Err(Error::Data(format!("label {bad} outside [0, {}]", s[1] - 1)));
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.gather(lp, labels)?;
    let m = g.mean(picked);
    let total = g.mul_scalar(m, -1.0);
    LossValue::single(g, "clf", total)
}

fn compose(g: &mut Graph, parts: &[(&str, &LossValue, f64)]) -> Result<LossValue> {
    let mut total: Option<Var> = None;
    let mut breakdown = BTreeMap::new();
    for &(name, lv, w) in parts {
        breakdown.insert(name.to_string(), lv.value(g));
        let term = if w == 1.0 { lv.total } else { g.mul_scalar(lv.total, w) };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Invariant("empty loss composite".into()))?;
    Ok(LossValue { total, breakdown })
}

/// Generative-distillation stage: `L_cvae + beta * L_kd_gen`.
pub fn loss_stage1(g: &mut Graph, cvae: &LossValue, kd_gen: Option<&LossValue>, beta: f64) -> Result<LossValue> {
    let mut parts = vec![("cvae", cvae, 1.0)];
    parts.extend(kd_gen.map(|k| ("kd_gen", k, beta)));
    compose(g, &parts)
}

/// Attention-distillation stage: `w * L_recon + L_clf + gamma * L_kd_att`,
/// with `recon` given as `(loss, w)`.
pub fn loss_stage2(
    g: &mut Graph,
    recon: Option<(&LossValue, f64)>,
    clf: &LossValue,
    kd_att: Option<&LossValue>,
    gamma: f64,
) -> Result<LossValue> {
    let mut parts = Vec::new();
    parts.extend(recon.map(|(r, w)| ("recon", r, w)));
    parts.push(("clf", clf, 1.0));
    parts.extend(kd_att.map(|k| ("kd_att", k, gamma)));
    compose(g, &parts)
}

/// Classifier plus weighted identity-mapped feature KD.
pub fn loss_feature_kd_total(g: &mut Graph, clf: &LossValue, feature_kd: &LossValue, weight: f64) -> Result<LossValue> {
    compose(g, &[("clf", clf, 1.0), ("feature_kd", feature_kd, weight)])
}
