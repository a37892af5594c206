//! Small 3-D CNN backbones and the pooled classifier head.
//!
//! Block 0 halves the spatial grid; later blocks keep it. A block with
//! temporal extent 1 is a 2-D block applied frame by frame, which is how the
//! student is made weaker than the all-3-D teacher.

use rand::Rng;

use crate::error::TensorResult;
use crate::graph::{Graph, Var};
use crate::nn::{Arch, GN_EPS};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

pub(crate) fn init_params<R: Rng>(p: &mut ParamStore, arch: &Arch, rng: &mut R) {
    let k = arch.spatial_kernel;
    for (i, &kt) in arch.block_kt.iter().enumerate() {
        let c_in = if i == 0 { arch.in_channels } else { arch.channels };
        let fan_in = c_in * kt * k * k;
        p.insert(
            format!("backbone.block{i}.kernel"),
            Tensor::randn([arch.channels, c_in, kt, k, k], (2.0 / fan_in as f64).sqrt(), rng),
        );
        p.insert(format!("backbone.block{i}.gn_gamma"), Tensor::ones([arch.channels]));
        p.insert(format!("backbone.block{i}.gn_beta"), Tensor::zeros([arch.channels]));
    }
    p.insert(
        "classifier.weight",
        Tensor::randn([arch.num_logits(), arch.channels], (1.0 / arch.channels as f64).sqrt(), rng),
    );
    p.insert("classifier.bias", Tensor::zeros([arch.num_logits()]));
}

/// `clip (N, C_in, T, H, W)` to the distillation tap `F (N, C, T, H', W')`.
pub fn backbone_features(g: &mut Graph, b: &Binding, arch: &Arch, clip: Var) -> TensorResult<Var> {
    let mut x = clip;
    let p = arch.spatial_kernel / 2;
    for (i, &kt) in arch.block_kt.iter().enumerate() {
        let stride = if i == 0 { [1, 2, 2] } else { [1, 1, 1] };
        x = g.conv3d(x, b.var(&format!("backbone.block{i}.kernel")), stride, [kt / 2, p, p])?;
        x = g.group_norm(
            x,
            arch.groups,
            b.var(&format!("backbone.block{i}.gn_gamma")),
            b.var(&format!("backbone.block{i}.gn_beta")),
            GN_EPS,
        )?;
        x = g.relu(x);
    }
    Ok(x)
}

/// Global average pool over `(T, H, W)` followed by a linear layer.
pub fn classify(g: &mut Graph, b: &Binding, features: Var) -> TensorResult<Var> {
    let pooled = g.mean_axes(features, &[2, 3, 4])?;
    g.linear(pooled, b.var("classifier.weight"), b.var("classifier.bias"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_arch, Network};
    use crate::params::Side;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logits_and_tap_shapes() {
        let arch = tiny_arch(true, false);
        let net = Network::init(arch.clone(), Side::Student, 3).unwrap();
        let clip = Tensor::rand_uniform([2, 1, 4, 6, 6], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let b = net.bind(&mut g, |_| false);
        let x = g.constant(clip);
        let out = net.forward(&mut g, &b, x).unwrap();
        assert_eq!(g.shape(out.logits), &[2, 4]);
        assert_eq!(g.shape(out.tap), &[2, 4, 4, 3, 3]);
    }

    #[test]
    fn teacher_and_student_taps_agree() {
        let mut teacher = tiny_arch(true, false);
        teacher.block_kt = vec![3, 3, 3];
        let student = tiny_arch(true, false);
        assert_eq!(teacher.tap_shape(), student.tap_shape());
        let clip = Tensor::rand_uniform([1, 1, 4, 6, 6], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        for arch in [teacher, student] {
            let net = Network::init(arch.clone(), Side::Student, 0).unwrap();
            let mut g = Graph::new();
            let b = net.bind(&mut g, |_| false);
            let x = g.constant(clip.clone());
            let tap = backbone_features(&mut g, &b, &arch, x).unwrap();
            let [c, t, h, w] = arch.tap_shape();
            assert_eq!(g.shape(tap), &[1, c, t, h, w]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::init(tiny_arch(true, false), Side::Student, 4).unwrap();
        let clip = Tensor::rand_uniform([2, 1, 4, 6, 6], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let a = net.predict(&clip).unwrap();
        let b = net.predict(&clip).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }

    #[test]
    fn wrong_clip_shape_is_an_error() {
        let net = Network::init(tiny_arch(false, false), Side::Student, 4).unwrap();
        assert!(net.predict(&Tensor::zeros([1, 2, 4, 6, 6])).is_err());
    }
}
