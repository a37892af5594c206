//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{TensorError, TensorResult};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Coordinates checked per input before subsampling kicks in.
pub const MAX_COORDS_PER_INPUT: usize = 64;

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is ~0 are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare the reverse-mode gradient of `f` against central differences.
///
/// `f` builds a scalar loss from leaves holding `inputs`; it must be
/// deterministic. Inputs with more than [`MAX_COORDS_PER_INPUT`] entries are
/// checked on a coordinate subsample drawn from `seed`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64, seed: u64) -> TensorResult<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> TensorResult<Var>,
{
    grad_check_with(f, inputs, step, tol, seed, None)
}

/// As [`grad_check`], optionally corrupting one operation's backward rule.
#[doc(hidden)]
pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
    seed: u64,
    fault: Option<&str>,
) -> TensorResult<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> TensorResult<Var>,
{
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_fault(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |which: usize, coord: usize, delta: f64| -> TensorResult<f64> {
        let mut g2 = Graph::new();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[coord] += delta;
                }
                g2.constant(t)
            })
            .collect();
        let l = f(&mut g2, &vs)?;
        g2.value(l).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
        pass: true,
    };
    for (i, (t, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(v)
            .ok_or_else(|| TensorError::Usage(format!("input {i} is not reachable from the loss")))?;
        let coords: Vec<usize> = if t.numel() > MAX_COORDS_PER_INPUT {
            let mut c = sample(&mut rng, t.numel(), MAX_COORDS_PER_INPUT).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..t.numel()).collect()
        };
        for c in coords {
            let numeric = (eval(i, c, step)? - eval(i, c, -step)?) / (2.0 * step);
            let err = relative_error(analytic.data()[c], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = Some((i, c));
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}
