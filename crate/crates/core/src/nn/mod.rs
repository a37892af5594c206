//! Network building blocks and the assembled teacher/student networks.
//!
//! All parameters live in a [`ParamStore`] under dotted names whose first
//! component is the [`Role`]: `backbone.*`, `attention.*`, `classifier.*`
//! and `cvae.*`. Forward functions take a [`Binding`] of that store into a
//! [`Graph`], so freezing a role is just binding it as constants.

pub mod attention;
pub mod backbone;
pub mod cvae;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, TensorResult};
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamStore, Role, Side};

pub use attention::{attention_apply, attention_apply_with, attention_forward};
pub use backbone::backbone_features;
pub use cvae::{cvae_decode, cvae_encode, cvae_prior, frame_attention, frames, reparameterize, Latent};

/// Epsilon used by every group normalization layer.
pub const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeArch {
    /// Channels after the 1x1x1 reducing convolution.
    pub reduced_channels: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Spatial extent `n` of the `1 x n x n` expanding deconvolution.
    pub decoder_kernel: usize,
}

/// Shape-level description of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub in_channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Temporal kernel extent of each backbone block; 1 gives a 2-D block.
    pub block_kt: Vec<usize>,
    pub spatial_kernel: usize,
    pub num_classes: usize,
    pub groups: usize,
    pub attention: bool,
    pub attn_kernel: usize,
    pub cvae: Option<CvaeArch>,
}

impl Arch {
    /// Number of logits: the classes plus one background class.
    pub fn num_logits(&self) -> usize {
        self.num_classes + 1
    }

    /// `(C, T, H, W)` of the distillation tap.
    pub fn tap_shape(&self) -> [usize; 4] {
        let p = self.spatial_kernel / 2;
        let down = |d: usize| (d + 2 * p - self.spatial_kernel) / 2 + 1;
        [self.channels, self.frames, down(self.height), down(self.width)]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.block_kt.is_empty() {
            return fail("backbone needs at least one block".into());
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return fail(format!(
                "channels ({}) must be divisible by the group count ({})",
                self.channels, self.groups
            ));
        }
        if self.spatial_kernel % 2 == 0 || self.block_kt.iter().any(|k| k % 2 == 0) {
            return fail("backbone kernels must have odd extents".into());
        }
        if self.attn_kernel % 2 == 0 {
            return fail("attention kernel must be odd to preserve the frame count".into());
        }
        if self.spatial_kernel > self.height + 2 * (self.spatial_kernel / 2) {
            return fail("input too small for the backbone kernel".into());
        }
        if let Some(c) = &self.cvae {
            let [_, _, h, w] = self.tap_shape();
            let pad = c.decoder_kernel / 2;
            let out = |d: usize| (d + c.decoder_kernel).checked_sub(1 + 2 * pad);
            if out(h) != Some(h) || out(w) != Some(w) {
                return fail(format!(
                    "decoder kernel {} cannot restore the {h}x{w} tap grid",
                    c.decoder_kernel
                ));
            }
            if c.reduced_channels == 0 || c.hidden == 0 || c.latent_dim == 0 {
                return fail("cvae dimensions must be positive".into());
            }
        }
        Ok(())
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Distillation tap `F (N,C,T,H,W)`.
    pub tap: Var,
    /// Attention map `A (N,C,T)`, when the attention module is present.
    pub attention: Option<Var>,
    /// Features the classifier pools: `F'` with attention, `F` without.
    pub features: Var,
    pub logits: Var,
    /// Per-sample attention scale factors; empty without attention.
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: Arch,
    pub side: Side,
    pub params: ParamStore,
}

impl Network {
    pub fn init(arch: Arch, side: Side, seed: u64) -> Result<Network> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&mut params, &arch, &mut rng);
        if arch.attention {
            attention::init_params(&mut params, &arch, &mut rng);
        }
        if let Some(c) = &arch.cvae {
            cvae::init_params(&mut params, &arch, c, &mut rng);
        }
        Ok(Network { arch, side, params })
    }

    /// Wrap stored tensors, checking names and shapes against `arch`.
    pub fn from_params(arch: Arch, side: Side, params: ParamStore) -> Result<Network> {
        let reference = Network::init(arch.clone(), side, 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                None => return Err(Error::Incompatible(format!("missing tensor `{name}`"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Incompatible(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some((extra, _)) = params.iter().find(|(n, _)| reference.params.get(n).is_none()) {
            return Err(Error::Incompatible(format!("unexpected tensor `{extra}`")));
        }
        Ok(Network { arch, side, params })
    }

    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(Role) -> bool) -> Binding {
        self.params.bind(g, trainable)
    }

    /// Backbone, then attention (if present), then pooled classifier.
    pub fn forward(&self, g: &mut Graph, b: &Binding, clip: Var) -> TensorResult<Forward> {
        self.forward_with(g, b, clip, None)
    }

    /// [`Network::forward`] with optional fixed attention scale factors.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        b: &Binding,
        clip: Var,
        fixed_sigma: Option<&[f64]>,
    ) -> TensorResult<Forward> {
        let tap = backbone_features(g, b, &self.arch, clip)?;
        let (attention, features, sigma) = if self.arch.attention {
            let a = attention_forward(g, b, &self.arch, tap)?;
            let (f, sigma) = attention_apply_with(g, b, tap, a, fixed_sigma)?;
            (Some(a), f, sigma)
        } else {
            (None, tap, Vec::new())
        };
        let logits = backbone::classify(g, b, features)?;
        Ok(Forward {
            tap,
            attention,
            features,
            logits,
            sigma,
        })
    }

    /// Logits only, with every parameter bound as a constant.
    pub fn predict(&self, clip: &crate::Tensor) -> TensorResult<crate::Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let x = g.constant(clip.clone());
        let out = self.forward(&mut g, &b, x)?;
        Ok(g.value(out.logits).clone())
    }
}

#[cfg(test)]
pub(crate) fn tiny_arch(attention: bool, cvae: bool) -> Arch {
    Arch {
        in_channels: 1,
        frames: 4,
        height: 6,
        width: 6,
        channels: 4,
        block_kt: vec![1, 3],
        spatial_kernel: 3,
        num_classes: 3,
        groups: 2,
        attention,
        attn_kernel: 3,
        cvae: cvae.then_some(CvaeArch {
            reduced_channels: 2,
            hidden: 8,
            latent_dim: 3,
            decoder_kernel: 3,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn tap_shape_halves_space() {
        let a = tiny_arch(true, true);
        assert_eq!(a.tap_shape(), [4, 4, 3, 3]);
    }

    #[test]
    fn validate_rejects_bad_groups_and_even_decoder() {
        let mut a = tiny_arch(true, true);
        a.groups = 3;
        assert!(a.validate().is_err());
        let mut a = tiny_arch(true, true);
        a.cvae.as_mut().unwrap().decoder_kernel = 2;
        assert!(matches!(a.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn from_params_checks_shapes() {
        let net = Network::init(tiny_arch(true, false), Side::Student, 1).unwrap();
        assert!(Network::from_params(net.arch.clone(), Side::Student, net.params.clone()).is_ok());
        let mut p = net.params.clone();
        *p.get_mut("classifier.bias").unwrap() = Tensor::zeros([2]);
        assert!(matches!(
            Network::from_params(net.arch.clone(), Side::Student, p),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::init(tiny_arch(true, true), Side::Student, 9).unwrap();
        let b = Network::init(tiny_arch(true, true), Side::Student, 9).unwrap();
        let c = Network::init(tiny_arch(true, true), Side::Student, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params.digest_all(), c.params.digest_all());
    }
}
