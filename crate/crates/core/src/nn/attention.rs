//! Attention-based feature representation.
//!
//! `A = sigmoid(GN(conv1d_T(pool_HW(F))))` gives one weight per channel and
//! frame. The attention-based feature is `F' = sigma * (A ⊙ theta(F))`, where
//! `theta` is a 1x1x1 transposed convolution and the per-sample `sigma`
//! rescales `F'` to the Frobenius norm of `F`. `sigma` is a constant on the
//! tape, so no gradient flows through it.

use rand::Rng;

use crate::error::{TensorError, TensorResult};
use crate::graph::{Graph, Var};
use crate::nn::{Arch, GN_EPS};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

pub(crate) fn init_params<R: Rng>(p: &mut ParamStore, arch: &Arch, rng: &mut R) {
    let c = arch.channels;
    let k = arch.attn_kernel;
    p.insert(
        "attention.conv1d",
        Tensor::randn([c, c, k], (1.0 / (c * k) as f64).sqrt(), rng),
    );
    p.insert("attention.gn_gamma", Tensor::ones([c]));
    p.insert("attention.gn_beta", Tensor::zeros([c]));
    p.insert(
        "attention.apply_deconv",
        Tensor::from_fn([c, c, 1, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 }),
    );
}

/// `F (N,C,T,H,W)` to `A (N,C,T)` with entries in `(0, 1)`.
pub fn attention_forward(g: &mut Graph, b: &Binding, arch: &Arch, f: Var) -> TensorResult<Var> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 5 {
        return Err(TensorError::Rank {
            op: "attention_forward",
            expected: 5,
            got: shape.len(),
        });
    }
    if arch.groups == 0 || shape[1] % arch.groups != 0 {
        return Err(TensorError::Config {
            op: "attention_forward",
            msg: format!("{} channels are not divisible into {} groups", shape[1], arch.groups),
        });
    }
    let pooled = g.mean_axes(f, &[3, 4])?;
    let conv = g.conv1d(pooled, b.var("attention.conv1d"), 1, arch.attn_kernel / 2)?;
    let normed = g.group_norm(
        conv,
        arch.groups,
        b.var("attention.gn_gamma"),
        b.var("attention.gn_beta"),
        GN_EPS,
    )?;
    Ok(g.sigmoid(normed))
}

/// Per-sample norm-preserving attention reweighting of `f` by `a`.
pub fn attention_apply(g: &mut Graph, b: &Binding, f: Var, a: Var) -> TensorResult<Var> {
    Ok(attention_apply_with(g, b, f, a, None)?.0)
}

/// As [`attention_apply`], optionally substituting fixed per-sample scale
/// factors for the computed ones. Returns the output and the factors used.
///
/// Finite-difference checks pass the base-point factors here so that the
/// perturbed forward treats `sigma` as the constant the backward pass sees.
pub fn attention_apply_with(
    g: &mut Graph,
    b: &Binding,
    f: Var,
    a: Var,
    fixed_sigma: Option<&[f64]>,
) -> TensorResult<(Var, Vec<f64>)> {
    let shape = g.shape(f).to_vec();
    let [n, c, t] = match g.shape(a) {
        &[n, c, t] if shape.len() == 5 && shape[..3] == [n, c, t] => [n, c, t],
        other => {
            return Err(TensorError::Dimension {
                op: "attention_apply",
                axis: "A".into(),
                expected: shape.iter().take(3).product(),
                got: other.iter().product(),
            })
        }
    };
    let theta = g.conv_transpose3d(f, b.var("attention.apply_deconv"), [1, 1, 1], [0, 0, 0])?;
    let a5 = g.reshape(a, &[n, c, t, 1, 1])?;
    let a5 = g.broadcast_to(a5, &shape)?;
    let gmap = g.mul(a5, theta)?;

    let per = shape[1..].iter().product::<usize>();
    let fv = g.value(f).data();
    let gv = g.value(gmap).data();
    let mut factors = Vec::with_capacity(n);
    for s in 0..n {
        let nf = fv[s * per..(s + 1) * per].iter().map(|x| x * x).sum::<f64>().sqrt();
        let ng = gv[s * per..(s + 1) * per].iter().map(|x| x * x).sum::<f64>().sqrt();
        if ng == 0.0 || !ng.is_finite() {
            return Err(TensorError::Domain {
                op: "attention_apply",
                msg: format!("attention-weighted feature of sample {s} is degenerate (norm {ng})"),
            });
        }
        factors.push(nf / ng);
    }
    if let Some(fixed) = fixed_sigma {
        if fixed.len() != n {
            return Err(TensorError::Dimension {
                op: "attention_apply",
                axis: "N".into(),
                expected: n,
                got: fixed.len(),
            });
        }
        factors = fixed.to_vec();
    }
    let full = factors.iter().flat_map(|&s| std::iter::repeat_n(s, per)).collect();
    let sigma = g.constant(Tensor::new(shape.clone(), full)?);
    Ok((g.mul(sigma, gmap)?, factors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_arch, Network};
    use crate::params::Side;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Network, Tensor) {
        let net = Network::init(tiny_arch(true, false), Side::Student, seed).unwrap();
        let f = Tensor::randn([2, 4, 4, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 100));
        (net, f)
    }

    #[test]
    fn zero_params_give_one_half() {
        let (mut net, f) = setup(0);
        for name in ["attention.conv1d", "attention.gn_gamma", "attention.gn_beta"] {
            let t = net.params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let mut g = Graph::new();
        let b = net.bind(&mut g, |_| false);
        let x = g.constant(f);
        let a = attention_forward(&mut g, &b, &net.arch, x).unwrap();
        assert_eq!(g.shape(a), &[2, 4, 4]);
        assert!(g.value(a).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ones_attention_with_identity_theta_is_identity() {
        let (net, f) = setup(1);
        let mut g = Graph::new();
        let b = net.bind(&mut g, |_| false);
        let x = g.constant(f.clone());
        let a = g.constant(Tensor::ones([2, 4, 4]));
        let out = attention_apply(&mut g, &b, x, a).unwrap();
        assert!(g.value(out).max_abs_diff(&f) < 1e-15);
    }

    #[test]
    fn dead_attention_is_degenerate() {
        let (net, f) = setup(2);
        let mut g = Graph::new();
        let b = net.bind(&mut g, |_| false);
        let x = g.constant(f);
        let a = g.constant(Tensor::zeros([2, 4, 4]));
        assert!(matches!(
            attention_apply(&mut g, &b, x, a),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn mismatched_attention_shape() {
        let (net, f) = setup(3);
        let mut g = Graph::new();
        let b = net.bind(&mut g, |_| false);
        let x = g.constant(f);
        let a = g.constant(Tensor::ones([2, 4, 3]));
        assert!(attention_apply(&mut g, &b, x, a).is_err());
    }
}
