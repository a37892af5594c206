//! The finite-difference check suite behind `genkd gradcheck`.
//!
//! Three scopes: every differentiable graph op in isolation, every network
//! block with respect to its parameters and inputs, and every loss through
//! its full graph (including the stage composites on a 2-frame micro
//! network). Single ops use tolerance 1e-4, composites 1e-3, step 1e-5.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, TensorError, TensorResult};
use crate::gradcheck::{grad_check_with, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::losses;
use crate::nn::{self, Arch, CvaeArch, Latent, Network};
use crate::params::{Binding, Role, Side};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    Losses,
    All,
}

impl Scope {
    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scope> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "losses" => Ok(Scope::Losses),
            "all" => Ok(Scope::All),
            _ => Err(Error::Usage(format!("unknown gradcheck scope `{s}`"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Blocks => "blocks",
            Scope::Losses => "losses",
            Scope::All => "all",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub scope: Scope,
    pub name: String,
    pub tol: f64,
    pub report: GradCheckReport,
}

type Body<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> TensorResult<Var> + 'a>;

struct Runner<'a> {
    fault: Option<&'a str>,
    out: Vec<CheckResult>,
}

impl Runner<'_> {
    fn run(&mut self, scope: Scope, name: &str, tol: f64, inputs: Vec<Tensor>, f: Body<'_>) -> Result<()> {
        let report = grad_check_with(
            |g, v| {
                let y = f(g, v)?;
                project(g, y)
            },
            &inputs,
            STEP,
            tol,
            0x6b64,
            self.fault,
        )
        .map_err(|e| Error::Invariant(format!("check `{name}` could not run: {e}")))?;
        self.out.push(CheckResult {
            scope,
            name: name.to_string(),
            tol,
            report,
        });
        Ok(())
    }
}

/// Reduce a non-scalar output with fixed irregular weights so every output
/// coordinate contributes to the checked scalar.
fn project(g: &mut Graph, y: Var) -> TensorResult<Var> {
    if g.value(y).numel() == 1 {
        return Ok(y);
    }
    let w = g.constant(Tensor::from_fn(g.shape(y).to_vec(), |i| (i as f64 * 0.37).sin() + 0.5));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn te(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Architecture of the micro networks used for block and loss checks.
pub fn micro_arch(teacher: bool) -> Arch {
    Arch {
        in_channels: 1,
        frames: 2,
        height: 4,
        width: 4,
        channels: 4,
        block_kt: if teacher { vec![3, 3, 3] } else { vec![1, 3] },
        spatial_kernel: 3,
        num_classes: 3,
        groups: 2,
        attention: true,
        attn_kernel: 3,
        cvae: Some(CvaeArch {
            reduced_channels: 2,
            hidden: 6,
            latent_dim: 3,
            decoder_kernel: 3,
        }),
    }
}

/// Bind `net` with the tensors selected by `train` taken from `vars`
/// (in store order) and everything else as constants.
fn bind_from(g: &mut Graph, net: &Network, train: &dyn Fn(&str) -> bool, vars: &[Var]) -> Binding {
    let mut it = vars.iter();
    let bound = net
        .params
        .iter()
        .map(|(n, t)| {
            if train(n) {
                (n.to_string(), *it.next().expect("one var per selected tensor"), true)
            } else {
                (n.to_string(), g.constant(t.clone()), false)
            }
        })
        .collect();
    Binding::from_vars(bound)
}

fn selected(net: &Network, train: &dyn Fn(&str) -> bool) -> Vec<Tensor> {
    net.params.iter().filter(|(n, _)| train(n)).map(|(_, t)| t.clone()).collect()
}

/// Run the suite for `scope`, optionally with one op's backward corrupted.
pub fn run(scope: Scope, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut r = Runner { fault, out: Vec::new() };
    if scope.includes(Scope::Ops) {
        ops(&mut r)?;
    }
    if scope.includes(Scope::Blocks) {
        blocks(&mut r)?;
    }
    if scope.includes(Scope::Losses) {
        loss_checks(&mut r)?;
    }
    Ok(r.out)
}

fn ops(r: &mut Runner) -> Result<()> {
    let s = Scope::Ops;
    let mut g0 = rng(27);
    let a = Tensor::randn([3, 4], 1.0, &mut g0);
    let b = Tensor::randn([3, 4], 1.0, &mut g0);
    let pos = Tensor::rand_uniform([3, 4], 0.5, 2.0, &mut g0);
    let away = a.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let t = OP_TOL;
    r.run(s, "add", t, vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1])))?;
    r.run(s, "sub", t, vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1])))?;
    r.run(s, "mul", t, vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1])))?;
    r.run(s, "mul_scalar_operand", t, vec![a.clone(), Tensor::scalar(0.7)], Box::new(|g, v| g.mul(v[0], v[1])))?;
    r.run(s, "add_scalar", t, vec![a.clone()], Box::new(|g, v| Ok(g.add_scalar(v[0], 1.5))))?;
    r.run(s, "mul_scalar", t, vec![a.clone()], Box::new(|g, v| Ok(g.mul_scalar(v[0], -0.3))))?;
    r.run(s, "sigmoid", t, vec![a.clone()], Box::new(|g, v| Ok(g.sigmoid(v[0]))))?;
    r.run(s, "relu", t, vec![away], Box::new(|g, v| Ok(g.relu(v[0]))))?;
    r.run(s, "exp", t, vec![a.clone()], Box::new(|g, v| Ok(g.exp(v[0]))))?;
    r.run(s, "log", t, vec![pos], Box::new(|g, v| Ok(g.log(v[0]))))?;
    r.run(s, "square", t, vec![a.clone()], Box::new(|g, v| Ok(g.square(v[0]))))?;
    r.run(s, "sum", t, vec![a.clone()], Box::new(|g, v| Ok(g.sum(v[0]))))?;
    r.run(s, "mean", t, vec![a.clone()], Box::new(|g, v| Ok(g.mean(v[0]))))?;
    r.run(s, "sum_axes", t, vec![a.clone()], Box::new(|g, v| g.sum_axes(v[0], &[1])))?;
    r.run(s, "mean_axes", t, vec![a.clone()], Box::new(|g, v| g.mean_axes(v[0], &[0])))?;
    r.run(s, "l2_norm", t, vec![a.clone()], Box::new(|g, v| Ok(g.l2_norm(v[0]))))?;
    r.run(s, "softmax", t, vec![a.clone()], Box::new(|g, v| g.softmax(v[0])))?;
    r.run(s, "log_softmax", t, vec![a.clone()], Box::new(|g, v| g.log_softmax(v[0])))?;
    r.run(s, "reshape", t, vec![a.clone()], Box::new(|g, v| g.reshape(v[0], &[2, 6])))?;
    r.run(s, "permute", t, vec![Tensor::randn([2, 3, 4], 1.0, &mut rng(28))], Box::new(|g, v| g.permute(v[0], &[2, 0, 1])))?;
    r.run(s, "broadcast_to", t, vec![Tensor::randn([3, 1], 1.0, &mut rng(29))], Box::new(|g, v| g.broadcast_to(v[0], &[3, 5])))?;
    r.run(
        s,
        "concat",
        t,
        vec![a.clone(), Tensor::randn([3, 2], 1.0, &mut rng(30))],
        Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
    )?;
    r.run(s, "gather", t, vec![b], Box::new(|g, v| g.gather(v[0], &[3, 0, 2])))?;
    r.run(
        s,
        "conv3d",
        t,
        vec![Tensor::randn([1, 2, 3, 4, 4], 1.0, &mut rng(31)), Tensor::randn([2, 2, 2, 3, 3], 1.0, &mut rng(32))],
        Box::new(|g, v| g.conv3d(v[0], v[1], [1, 2, 1], [1, 1, 1])),
    )?;
    r.run(
        s,
        "conv_transpose3d",
        t,
        vec![Tensor::randn([1, 2, 2, 3, 3], 1.0, &mut rng(33)), Tensor::randn([2, 3, 1, 3, 3], 1.0, &mut rng(34))],
        Box::new(|g, v| g.conv_transpose3d(v[0], v[1], [1, 1, 1], [0, 1, 1])),
    )?;
    r.run(
        s,
        "conv1d",
        t,
        vec![Tensor::randn([2, 3, 6], 1.0, &mut rng(35)), Tensor::randn([4, 3, 3], 1.0, &mut rng(36))],
        Box::new(|g, v| g.conv1d(v[0], v[1], 1, 1)),
    )?;
    r.run(
        s,
        "linear",
        t,
        vec![a, Tensor::randn([5, 4], 1.0, &mut rng(37)), Tensor::randn([5], 1.0, &mut rng(38))],
        Box::new(|g, v| g.linear(v[0], v[1], v[2])),
    )?;
    r.run(
        s,
        "group_norm",
        t,
        vec![
            Tensor::randn([2, 4, 5], 1.0, &mut rng(39)),
            Tensor::rand_uniform([4], 0.5, 1.5, &mut rng(40)),
            Tensor::randn([4], 1.0, &mut rng(41)),
        ],
        Box::new(|g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5)),
    )?;
    Ok(())
}

struct Micro {
    student: Network,
    teacher: Network,
    clip: Tensor,
    labels: Vec<usize>,
    tap: Tensor,
    att: Tensor,
}

fn micro() -> Result<Micro> {
    let student = Network::init(micro_arch(false), Side::Student, 11)?;
    let teacher = Network::init(micro_arch(true), Side::Teacher, 12)?;
    let clip = Tensor::rand_uniform([2, 1, 2, 4, 4], 0.0, 1.0, &mut rng(13));
    let mut g = Graph::new();
    let b = student.bind(&mut g, |_| false);
    let x = g.constant(clip.clone());
    let out = student.forward(&mut g, &b, x)?;
    let tap = g.value(out.tap).clone();
    let att = g.value(out.attention.expect("micro student has attention")).clone();
    Ok(Micro {
        student,
        teacher,
        clip,
        labels: vec![1, 3],
        tap,
        att,
    })
}

const ENCODER: &[&str] = &["cvae.reduce_conv", "cvae.enc_fc", "cvae.mean_head", "cvae.logvar_head"];
const PRIOR: &[&str] = &["cvae.prior"];
const DECODER: &[&str] = &["cvae.dec_fc", "cvae.expand_deconv"];

fn prefixed(groups: &'static [&'static [&'static str]]) -> impl Fn(&str) -> bool {
    move |n: &str| groups.iter().flat_map(|g| g.iter()).any(|p| n.starts_with(p))
}

fn in_role(role: Role) -> impl Fn(&str) -> bool {
    move |n: &str| Role::of(n) == Some(role)
}

fn blocks(r: &mut Runner) -> Result<()> {
    let s = Scope::Blocks;
    let m = micro()?;
    let net = &m.student;
    let arch = &net.arch;
    let tol = COMPOSITE_TOL;

    let bb = in_role(Role::Backbone);
    let mut inputs = vec![m.clip.clone()];
    inputs.extend(selected(net, &bb));
    r.run(
        s,
        "backbone_forward",
        tol,
        inputs,
        Box::new(|g, v| {
            let b = bind_from(g, net, &bb, &v[1..]);
            nn::backbone_features(g, &b, arch, v[0])
        }),
    )?;

    let att = in_role(Role::Attention);
    let att_map = |n: &str| att(n) && n != "attention.apply_deconv";
    let mut inputs = vec![m.tap.clone()];
    inputs.extend(selected(net, &att_map));
    r.run(
        s,
        "attention_forward",
        tol,
        inputs,
        Box::new(|g, v| {
            let b = bind_from(g, net, &att_map, &v[1..]);
            nn::attention_forward(g, &b, arch, v[0])
        }),
    )?;

    let sigma = {
        let mut g = Graph::new();
        let b = net.bind(&mut g, |_| false);
        let (f, a) = (g.constant(m.tap.clone()), g.constant(m.att.clone()));
        nn::attention_apply_with(&mut g, &b, f, a, None)?.1
    };
    let deconv = |n: &str| n == "attention.apply_deconv";
    let mut apply_inputs = vec![m.tap.clone(), m.att.clone()];
    apply_inputs.extend(selected(net, &deconv));
    r.run(
        s,
        "attention_apply",
        tol,
        apply_inputs,
        Box::new(|g, v| {
            let b = bind_from(g, net, &deconv, &v[2..]);
            Ok(nn::attention_apply_with(g, &b, v[0], v[1], Some(&sigma))?.0)
        }),
    )?;

    let enc = prefixed(&[ENCODER]);
    let prior = prefixed(&[PRIOR]);
    let dec = prefixed(&[DECODER]);
    let mut fr = rng(14);
    let ft = Tensor::randn([3, 4, 2, 2], 1.0, &mut fr);
    let lam = Tensor::rand_uniform([3, 4], 0.05, 0.95, &mut fr);
    let z = Tensor::randn([3, 3], 1.0, &mut fr);
    let with = |lead: Vec<Tensor>, sel: &dyn Fn(&str) -> bool| {
        let mut v = lead;
        v.extend(selected(net, sel));
        v
    };
    r.run(
        s,
        "cvae_encode",
        tol,
        with(vec![ft.clone(), lam.clone()], &enc),
        Box::new(|g, v| {
            let b = bind_from(g, net, &enc, &v[2..]);
            let q = nn::cvae_encode(g, &b, v[0], v[1])?;
            g.concat(&[q.mean, q.log_var], 1)
        }),
    )?;
    r.run(
        s,
        "cvae_prior",
        tol,
        with(vec![lam.clone()], &prior),
        Box::new(|g, v| {
            let b = bind_from(g, net, &prior, &v[1..]);
            let p = nn::cvae_prior(g, &b, v[0])?;
            g.concat(&[p.mean, p.log_var], 1)
        }),
    )?;
    r.run(
        s,
        "reparameterize",
        tol,
        vec![Tensor::randn([3, 3], 1.0, &mut fr), Tensor::randn([3, 3], 0.5, &mut fr)],
        Box::new(|g, v| {
            nn::reparameterize(
                g,
                Latent {
                    mean: v[0],
                    log_var: v[1],
                },
                &mut rng(15),
            )
        }),
    )?;
    r.run(
        s,
        "cvae_decode",
        tol,
        with(vec![z, lam], &dec),
        Box::new(|g, v| {
            let b = bind_from(g, net, &dec, &v[2..]);
            nn::cvae_decode(g, &b, arch, v[0], v[1])
        }),
    )?;
    Ok(())
}

fn loss_checks(r: &mut Runner) -> Result<()> {
    let s = Scope::Losses;
    let tol = COMPOSITE_TOL;
    let m = micro()?;
    let (net, teacher) = (&m.student, &m.teacher);
    let arch = &net.arch;
    let mut fr = rng(16);

    let f_t = Tensor::randn(m.tap.shape().to_vec(), 1.0, &mut fr);
    r.run(
        s,
        "loss_feature_kd_baseline",
        tol,
        vec![m.tap.clone()],
        Box::new(move |g, v| {
            let teacher_tap = g.constant(f_t.clone());
            Ok(losses::loss_feature_kd_baseline(g, teacher_tap, v[0]).map_err(te)?.total)
        }),
    )?;

    let pair: Vec<Tensor> = (0..4).map(|_| Tensor::randn([3, 2], 0.7, &mut fr)).collect();
    r.run(
        s,
        "kl_diag_gaussian",
        tol,
        pair,
        Box::new(|g, v| {
            let q = Latent { mean: v[0], log_var: v[1] };
            let p = Latent { mean: v[2], log_var: v[3] };
            losses::kl_diag_gaussian(g, q, p).map_err(te)
        }),
    )?;

    let cv = in_role(Role::Cvae);
    let with = |lead: Vec<Tensor>| {
        let mut v = lead;
        v.extend(selected(net, &cv));
        v
    };
    r.run(
        s,
        "loss_cvae",
        tol,
        with(vec![m.tap.clone(), m.att.clone()]),
        Box::new(|g, v| {
            let b = bind_from(g, net, &cv, &v[2..]);
            Ok(losses::loss_cvae(g, &b, arch, v[0], v[1], losses::DEFAULT_ALPHA, &mut rng(17))
                .map_err(te)?
                .total)
        }),
    )?;
    let enc_dec = prefixed(&[ENCODER, DECODER]);
    let mut recon_inputs = vec![m.tap.clone(), m.att.clone()];
    recon_inputs.extend(selected(net, &enc_dec));
    r.run(
        s,
        "loss_recon",
        tol,
        recon_inputs,
        Box::new(|g, v| {
            let b = bind_from(g, net, &enc_dec, &v[2..]);
            Ok(losses::loss_recon(g, &b, arch, v[0], v[1], &mut rng(18)).map_err(te)?.total)
        }),
    )?;
    // Only the prior mean and the decoder lie on the reconstruction path.
    let gen_path = |n: &str| prefixed(&[PRIOR, DECODER])(n) && !n.starts_with("cvae.prior_logvar");
    // The shared attention input also feeds the detached teacher target, so
    // it enters as a constant, as it does in the generative stage.
    r.run(
        s,
        "loss_kd_gen",
        tol,
        selected(net, &gen_path),
        Box::new(|g, v| {
            let b = bind_from(g, net, &gen_path, v);
            let tb = teacher.bind(g, |_| false);
            let (f, a) = (g.constant(m.tap.clone()), g.constant(m.att.clone()));
            Ok(losses::loss_kd_gen(g, &tb, &teacher.arch, &b, arch, f, a).map_err(te)?.total)
        }),
    )?;
    let a_t = Tensor::rand_uniform(m.att.shape().to_vec(), 0.05, 0.95, &mut fr);
    r.run(
        s,
        "loss_kd_att",
        tol,
        vec![m.att.clone()],
        Box::new(move |g, v| {
            let teacher_att = g.constant(a_t.clone());
            Ok(losses::loss_kd_att(g, teacher_att, v[0]).map_err(te)?.total)
        }),
    )?;
    let logits = Tensor::randn([2, 4], 1.0, &mut fr);
    let labels = m.labels.clone();
    r.run(
        s,
        "loss_clf",
        tol,
        vec![logits],
        Box::new(move |g, v| Ok(losses::loss_clf(g, v[0], &labels).map_err(te)?.total)),
    )?;

    r.run(
        s,
        "loss_stage1",
        tol,
        selected(net, &cv),
        Box::new(|g, v| {
            let b = bind_from(g, net, &cv, v);
            let tb = teacher.bind(g, |_| false);
            let (f, a) = (g.constant(m.tap.clone()), g.constant(m.att.clone()));
            let c = losses::loss_cvae(g, &b, arch, f, a, losses::DEFAULT_ALPHA, &mut rng(19)).map_err(te)?;
            let k = losses::loss_kd_gen(g, &tb, &teacher.arch, &b, arch, f, a).map_err(te)?;
            Ok(losses::loss_stage1(g, &c, Some(&k), losses::DEFAULT_BETA).map_err(te)?.total)
        }),
    )?;

    // Full attention-distillation objective on the 2-frame micro network,
    // differentiated with respect to every trainable student tensor.
    let trainable = |n: &str| Role::of(n) != Some(Role::Cvae);
    let sigma = {
        let mut g = Graph::new();
        let b = net.bind(&mut g, |_| false);
        let x = g.constant(m.clip.clone());
        net.forward(&mut g, &b, x)?.sigma
    };
    let labels = m.labels.clone();
    let clip = m.clip.clone();
    r.run(
        s,
        "loss_stage2",
        tol,
        selected(net, &trainable),
        Box::new(move |g, v| {
            let b = bind_from(g, net, &trainable, v);
            let x = g.constant(clip.clone());
            let out = net.forward_with(g, &b, x, Some(&sigma))?;
            let tb = teacher.bind(g, |_| false);
            let t_out = teacher.forward(g, &tb, x)?;
            let a_s = out.attention.expect("student has attention");
            let a_t = t_out.attention.expect("teacher has attention");
            let rec = losses::loss_recon(g, &b, arch, out.tap, a_s, &mut rng(20)).map_err(te)?;
            let clf = losses::loss_clf(g, out.logits, &labels).map_err(te)?;
            let att = losses::loss_kd_att(g, a_t, a_s).map_err(te)?;
            Ok(losses::loss_stage2(g, Some((&rec, 0.5)), &clf, Some(&att), losses::DEFAULT_GAMMA)
                .map_err(te)?
                .total)
        }),
    )?;
    Ok(())
}
