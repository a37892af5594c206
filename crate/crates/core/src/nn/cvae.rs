//! Per-frame conditional VAE over tap features.
//!
//! Frames are folded into the batch axis: a tap `F (N,C,T,H,W)` becomes
//! `(N*T, C, H, W)` and its attention `A (N,C,T)` becomes `(N*T, C)`, so one
//! row is one `(F_t, lambda_t)` pair.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{TensorError, TensorResult};
use crate::graph::{Graph, Var};
use crate::nn::{Arch, CvaeArch};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// Diagonal Gaussian, both fields `(B, D_z)`.
#[derive(Clone, Copy, Debug)]
pub struct Latent {
    pub mean: Var,
    pub log_var: Var,
}

fn linear_param<R: Rng>(p: &mut ParamStore, name: &str, d_out: usize, d_in: usize, gain: f64, rng: &mut R) {
    p.insert(
        format!("{name}.weight"),
        Tensor::randn([d_out, d_in], gain * (1.0 / d_in as f64).sqrt(), rng),
    );
    p.insert(format!("{name}.bias"), Tensor::zeros([d_out]));
}

pub(crate) fn init_params<R: Rng>(p: &mut ParamStore, arch: &Arch, c: &CvaeArch, rng: &mut R) {
    let [ch, _, h, w] = arch.tap_shape();
    let flat = c.reduced_channels * h * w;
    let relu = 2f64.sqrt();
    p.insert(
        "cvae.reduce_conv",
        Tensor::randn([c.reduced_channels, ch, 1, 1, 1], (1.0 / ch as f64).sqrt(), rng),
    );
    linear_param(p, "cvae.enc_fc", c.hidden, flat + ch, relu, rng);
    linear_param(p, "cvae.mean_head", c.latent_dim, c.hidden, 1.0, rng);
    linear_param(p, "cvae.logvar_head", c.latent_dim, c.hidden, 0.1, rng);
    linear_param(p, "cvae.prior_fc", c.hidden, ch, relu, rng);
    linear_param(p, "cvae.prior_mean_head", c.latent_dim, c.hidden, 1.0, rng);
    linear_param(p, "cvae.prior_logvar_head", c.latent_dim, c.hidden, 0.1, rng);
    linear_param(p, "cvae.dec_fc", flat, c.latent_dim + ch, relu, rng);
    let n = c.decoder_kernel;
    p.insert(
        "cvae.expand_deconv",
        Tensor::randn(
            [c.reduced_channels, ch, 1, n, n],
            (1.0 / (c.reduced_channels * n * n) as f64).sqrt(),
            rng,
        ),
    );
}

/// `F (N,C,T,H,W)` to per-frame rows `(N*T, C, H, W)`.
pub fn frames(g: &mut Graph, f: Var) -> TensorResult<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 5 {
        return Err(TensorError::Rank {
            op: "frames",
            expected: 5,
            got: s.len(),
        });
    }
    let p = g.permute(f, &[0, 2, 1, 3, 4])?;
    g.reshape(p, &[s[0] * s[2], s[1], s[3], s[4]])
}

/// `A (N,C,T)` to per-frame rows `(N*T, C)`, aligned with [`frames`].
pub fn frame_attention(g: &mut Graph, a: Var) -> TensorResult<Var> {
    let s = g.shape(a).to_vec();
    if s.len() != 3 {
        return Err(TensorError::Rank {
            op: "frame_attention",
            expected: 3,
            got: s.len(),
        });
    }
    let p = g.permute(a, &[0, 2, 1])?;
    g.reshape(p, &[s[0] * s[2], s[1]])
}

/// Posterior `q(z | F_t, lambda_t)`.
pub fn cvae_encode(g: &mut Graph, b: &Binding, f_t: Var, lam: Var) -> TensorResult<Latent> {
    let s = g.shape(f_t).to_vec();
    if s.len() != 4 {
        return Err(TensorError::Rank {
            op: "cvae_encode",
            expected: 4,
            got: s.len(),
        });
    }
    let x = g.reshape(f_t, &[s[0], s[1], 1, s[2], s[3]])?;
    let r = g.conv3d(x, b.var("cvae.reduce_conv"), [1, 1, 1], [0, 0, 0])?;
    let flat: usize = g.shape(r)[1..].iter().product();
    let h = g.reshape(r, &[s[0], flat])?;
    let hl = g.concat(&[h, lam], 1)?;
    let hidden = g.linear(hl, b.var("cvae.enc_fc.weight"), b.var("cvae.enc_fc.bias"))?;
    let hidden = g.relu(hidden);
    Ok(Latent {
        mean: g.linear(hidden, b.var("cvae.mean_head.weight"), b.var("cvae.mean_head.bias"))?,
        log_var: g.linear(hidden, b.var("cvae.logvar_head.weight"), b.var("cvae.logvar_head.bias"))?,
    })
}

/// Conditional prior `p(z | lambda_t)`.
pub fn cvae_prior(g: &mut Graph, b: &Binding, lam: Var) -> TensorResult<Latent> {
    let hidden = g.linear(lam, b.var("cvae.prior_fc.weight"), b.var("cvae.prior_fc.bias"))?;
    let hidden = g.relu(hidden);
    Ok(Latent {
        mean: g.linear(
            hidden,
            b.var("cvae.prior_mean_head.weight"),
            b.var("cvae.prior_mean_head.bias"),
        )?,
        log_var: g.linear(
            hidden,
            b.var("cvae.prior_logvar_head.weight"),
            b.var("cvae.prior_logvar_head.bias"),
        )?,
    })
}

/// One sample `z = mean + exp(log_var / 2) * eps`.
pub fn reparameterize<R: Rng + ?Sized>(g: &mut Graph, d: Latent, rng: &mut R) -> TensorResult<Var> {
    let shape = g.shape(d.mean).to_vec();
    let n = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let eps = g.constant(Tensor::new(shape, eps)?);
    let half = g.mul_scalar(d.log_var, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    g.add(d.mean, noise)
}

/// Reconstructed frame features `(B, C, H, W)`.
pub fn cvae_decode(g: &mut Graph, b: &Binding, arch: &Arch, z: Var, lam: Var) -> TensorResult<Var> {
    let c = arch.cvae.as_ref().ok_or(TensorError::Config {
        op: "cvae_decode",
        msg: "network has no cvae".into(),
    })?;
    let [_, _, h, w] = arch.tap_shape();
    let rows = g.shape(z)[0];
    let zl = g.concat(&[z, lam], 1)?;
    let d = g.linear(zl, b.var("cvae.dec_fc.weight"), b.var("cvae.dec_fc.bias"))?;
    let d = g.relu(d);
    let d = g.reshape(d, &[rows, c.reduced_channels, 1, h, w])?;
    let p = c.decoder_kernel / 2;
    let out = g.conv_transpose3d(d, b.var("cvae.expand_deconv"), [1, 1, 1], [0, p, p])?;
    g.reshape(out, &[rows, arch.channels, h, w])
}
