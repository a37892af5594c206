//! Teacher pretraining, two-stage alternating distillation, baselines and
//! evaluation.
//!
//! Networks carrying a CVAE alternate between two kinds of epoch:
//!
//! - stage 1: only the CVAE trains (Adam), on features of the frozen
//!   backbone and attention, optionally distilled from the teacher's CVAE;
//! - stage 2: backbone, attention and classifier train (SGD) with the CVAE
//!   frozen, optionally matching the teacher's attention maps.
//!
//! Variants without a CVAE train one joint objective every epoch.
//! The teacher is never written during student training.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{batches, sequential_batches, Batch, ClipSample, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{
    loss_clf, loss_cvae, loss_feature_kd_baseline, loss_feature_kd_total, loss_kd_att, loss_kd_gen, loss_recon,
    loss_stage1, loss_stage2, LossValue,
};
use crate::metrics::{topk_accuracy, MetricsRecord, Stage};
use crate::nn::Network;
use crate::optim::Optimizer;
use crate::params::{ParamStore, Role, Side};
use crate::tensor::Tensor;

/// Student training recipes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Plain backbone and classifier, cross-entropy only.
    StudentOnly,
    /// Attention module and its own CVAE, no teacher.
    StudentPlusAttention,
    /// Adds generative distillation in stage 1.
    GenKd,
    /// Adds attention distillation in stage 2.
    AttKd,
    /// Both distillation terms.
    Full,
    /// Plain student regressing the teacher's features directly.
    FeatureKdEq1,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::StudentOnly,
        Variant::StudentPlusAttention,
        Variant::GenKd,
        Variant::AttKd,
        Variant::Full,
        Variant::FeatureKdEq1,
    ];

    /// The arms compared by an ablation sweep.
    pub const ABLATION: [Variant; 5] = [
        Variant::StudentOnly,
        Variant::StudentPlusAttention,
        Variant::GenKd,
        Variant::AttKd,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::StudentOnly => "student_only",
            Variant::StudentPlusAttention => "student_plus_attention",
            Variant::GenKd => "gen_kd",
            Variant::AttKd => "att_kd",
            Variant::Full => "full",
            Variant::FeatureKdEq1 => "feature_kd_eq1",
        }
    }

    /// Student has attention and a CVAE, and trains in two stages.
    pub fn two_stage(self) -> bool {
        matches!(
            self,
            Variant::StudentPlusAttention | Variant::GenKd | Variant::AttKd | Variant::Full
        )
    }

    pub fn kd_gen(self) -> bool {
        matches!(self, Variant::GenKd | Variant::Full)
    }

    pub fn kd_att(self) -> bool {
        matches!(self, Variant::AttKd | Variant::Full)
    }

    pub fn needs_teacher(self) -> bool {
        self.kd_gen() || self.kd_att() || self == Variant::FeatureKdEq1
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant `{s}`")))
    }
}

/// Whether an observer call comes before or after the optimizer update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Before,
    After,
}

/// What a step observer sees around every optimizer update.
pub struct StepView<'a> {
    pub epoch: usize,
    pub step: usize,
    pub stage: Stage,
    pub phase: Phase,
    /// The network being trained.
    pub trained: &'a ParamStore,
    pub teacher: Option<&'a ParamStore>,
}

pub type Observer<'a> = Option<&'a mut dyn FnMut(&StepView<'_>)>;

/// Loss breakdown of one step.
pub type Breakdown = BTreeMap<String, f64>;

/// A finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Selected network: best validation Top-1 for students, final for the teacher.
    pub network: Network,
    pub records: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub top1: f64,
    pub topk: f64,
}

/// Seed for an independent purpose derived from the run seed.
fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(purpose);
    r.next_u64()
}

const SEED_STUDENT_INIT: u64 = 1;
const SEED_TEACHER_INIT: u64 = 2;
const SEED_SAMPLING: u64 = 3;
const SEED_ORDER: u64 = 4;

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, (SEED_ORDER << 32) | epoch as u64)
}

fn check_finite(lv: &LossValue, g: &Graph) -> Result<()> {
    let v = lv.value(g);
    if v.is_finite() {
        return Ok(());
    }
    let parts: Vec<String> = lv.breakdown.iter().map(|(k, x)| format!("{k}={x}")).collect();
    Err(Error::NonFinite {
        epoch: 0,
        step: 0,
        detail: format!("total={v} ({})", parts.join(", ")),
    })
}

/// Backpropagate `loss` and update every tensor of `net` whose role is `trainable`.
fn apply(
    g: &mut Graph,
    b: &crate::params::Binding,
    loss: &LossValue,
    net: &mut Network,
    opt: &mut Optimizer,
    trainable: impl Fn(Role) -> bool,
) -> Result<()> {
    check_finite(loss, g)?;
    let grads = g.backward(loss.total)?;
    let grads = b.gradients(&grads)?;
    opt.step(&mut net.params, &grads, trainable)
}

fn is_cvae(r: Role) -> bool {
    r == Role::Cvae
}

fn is_not_cvae(r: Role) -> bool {
    r != Role::Cvae
}

/// Stage 1: one Adam step on the CVAE of `net`, fitting the frozen
/// backbone's `(F, A)`. With a teacher, adds `beta * L_kd_gen`.
pub fn stage1_step(
    batch: &Batch,
    net: &mut Network,
    teacher: Option<&Network>,
    opt: &mut Optimizer,
    alpha: f64,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Breakdown> {
    let mut g = Graph::new();
    let b = net.bind(&mut g, is_cvae);
    let x = g.constant(batch.clips.clone());
    let out = net.forward(&mut g, &b, x)?;
    let a = out.attention.ok_or_else(|| Error::Invariant("stage 1 needs an attention module".into()))?;
    let cvae = loss_cvae(&mut g, &b, &net.arch, out.tap, a, alpha, rng)?;
    let kd = match teacher {
        Some(t) => {
            let tb = t.bind(&mut g, |_| false);
            Some(loss_kd_gen(&mut g, &tb, &t.arch, &b, &net.arch, out.tap, a)?)
        }
        None => None,
    };
    let loss = loss_stage1(&mut g, &cvae, kd.as_ref(), beta)?;
    apply(&mut g, &b, &loss, net, opt, is_cvae)?;
    Ok(loss.breakdown)
}

/// Stage 2: one SGD step on backbone, attention and classifier of `net`
/// with `recon_weight * L_recon + L_clf`, plus `gamma * L_kd_att` against a
/// teacher. Networks without a CVAE skip the reconstruction term.
#[allow(clippy::too_many_arguments)]
pub fn stage2_step(
    batch: &Batch,
    net: &mut Network,
    teacher: Option<&Network>,
    opt: &mut Optimizer,
    recon_weight: f64,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Breakdown> {
    let mut g = Graph::new();
    let b = net.bind(&mut g, is_not_cvae);
    let x = g.constant(batch.clips.clone());
    let out = net.forward(&mut g, &b, x)?;
    let a = out.attention.ok_or_else(|| Error::Invariant("stage 2 needs an attention module".into()))?;
    let recon = if net.arch.cvae.is_some() {
        Some(loss_recon(&mut g, &b, &net.arch, out.tap, a, rng)?)
    } else {
        None
    };
    let clf = loss_clf(&mut g, out.logits, &batch.labels)?;
    let kd = match teacher {
        Some(t) => {
            let tb = t.bind(&mut g, |_| false);
            let tout = t.forward(&mut g, &tb, x)?;
            let a_t = tout
                .attention
                .ok_or_else(|| Error::Invariant("teacher has no attention module".into()))?;
            Some(loss_kd_att(&mut g, a_t, a)?)
        }
        None => None,
    };
    let loss = loss_stage2(&mut g, recon.as_ref().map(|r| (r, recon_weight)), &clf, kd.as_ref(), gamma)?;
    apply(&mut g, &b, &loss, net, opt, is_not_cvae)?;
    Ok(loss.breakdown)
}

/// Single-objective step for networks without a CVAE: `L_clf`, plus
/// `weight * L_feature_kd` when a teacher is given.
pub fn joint_step(
    batch: &Batch,
    net: &mut Network,
    teacher: Option<&Network>,
    opt: &mut Optimizer,
    weight: f64,
) -> Result<Breakdown> {
    let mut g = Graph::new();
    let b = net.bind(&mut g, |_| true);
    let x = g.constant(batch.clips.clone());
    let out = net.forward(&mut g, &b, x)?;
    let clf = loss_clf(&mut g, out.logits, &batch.labels)?;
    let loss = match teacher {
        Some(t) => {
            let tb = t.bind(&mut g, |_| false);
            let tout = t.forward(&mut g, &tb, x)?;
            let fkd = loss_feature_kd_baseline(&mut g, tout.tap, out.tap)?;
            loss_feature_kd_total(&mut g, &clf, &fkd, weight)?
        }
        None => clf,
    };
    apply(&mut g, &b, &loss, net, opt, |_| true)?;
    Ok(loss.breakdown)
}

/// Top-1 and Top-k over `samples`, through backbone, attention and
/// classifier only.
pub fn evaluate(net: &Network, samples: &[ClipSample], k: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let logits = predict_all(net, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    topk_accuracy(&logits, &labels, k)
}

/// Logits `(N, C_cls + 1)` for every sample, in order.
pub fn predict_all(net: &Network, samples: &[ClipSample]) -> Result<Tensor> {
    let width = net.arch.num_logits();
    let mut data = Vec::with_capacity(samples.len() * width);
    for batch in sequential_batches(samples, 32)? {
        data.extend_from_slice(net.predict(&batch.clips)?.data());
    }
    Ok(Tensor::new([samples.len(), width], data)?)
}

/// Which stage epoch `e` belongs to: blocks of `period` epochs, starting with stage 1.
pub fn stage_of_epoch(epoch: usize, period: usize) -> Stage {
    if (epoch / period.max(1)) % 2 == 0 {
        Stage::Stage1
    } else {
        Stage::Stage2
    }
}

fn mean_breakdown(parts: &[Breakdown]) -> Breakdown {
    let mut sum = Breakdown::new();
    for p in parts {
        for (k, v) in p {
            *sum.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    let n = parts.len().max(1) as f64;
    sum.values_mut().for_each(|v| *v /= n);
    sum
}

/// Shared epoch loop: the per-variant pieces are the step closure and the
/// selection rule.
struct Run<'a> {
    cfg: &'a RunConfig,
    ds: &'a Dataset,
    label: String,
    epochs: usize,
    keep_best: bool,
}

impl Run<'_> {
    fn go(
        self,
        mut net: Network,
        teacher: Option<&Network>,
        mut stage_for: impl FnMut(usize) -> Stage,
        mut step: impl FnMut(Stage, &Batch, &mut Network) -> Result<Breakdown>,
        mut observer: Observer<'_>,
    ) -> Result<TrainOutcome> {
        let t = &self.cfg.train;
        let run_id = format!("{}-{:016x}", self.label, self.cfg.hash());
        let mut records = Vec::with_capacity(self.epochs);
        let mut best: Option<(f64, f64, usize, Network)> = None;
        for epoch in 0..self.epochs {
            let started = Instant::now();
            let stage = stage_for(epoch);
            let mut parts = Vec::new();
            for (i, batch) in batches(&self.ds.train, t.batch_size, epoch_seed(t.seed, epoch))?
                .iter()
                .enumerate()
            {
                let mut notify = |phase, net: &Network| {
                    if let Some(obs) = observer.as_mut() {
                        obs(&StepView {
                            epoch,
                            step: i,
                            stage,
                            phase,
                            trained: &net.params,
                            teacher: teacher.map(|t| &t.params),
                        });
                    }
                };
                notify(Phase::Before, &net);
                let bd = step(stage, batch, &mut net).map_err(|e| match e {
                    Error::NonFinite { detail, .. } => Error::NonFinite { epoch, step: i, detail },
                    other => other,
                })?;
                notify(Phase::After, &net);
                parts.push(bd);
            }
            let evaluate_now = (epoch + 1) % t.eval_every == 0 || epoch + 1 == self.epochs;
            let (top1, topk) = if evaluate_now {
                let (a, b) = evaluate(&net, &self.ds.val, t.topk)?;
                if self.keep_best && best.as_ref().is_none_or(|(b1, ..)| a > *b1) {
                    best = Some((a, b, epoch, net.clone()));
                }
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            records.push(MetricsRecord {
                run_id: run_id.clone(),
                variant: self.label.clone(),
                epoch,
                stage,
                losses: mean_breakdown(&parts),
                top1,
                topk,
                k: t.topk,
                seconds: t.log_wall_time.then(|| started.elapsed().as_secs_f64()),
            });
        }
        let (top1, topk, best_epoch, network) = match best {
            Some(b) => b,
            None => {
                let last = records.last().ok_or_else(|| Error::Config("epoch budget is zero".into()))?;
                let (a, b) = (last.top1.unwrap_or(0.0), last.topk.unwrap_or(0.0));
                (a, b, self.epochs - 1, net)
            }
        };
        Ok(TrainOutcome {
            network,
            records,
            best_epoch,
            top1,
            topk,
        })
    }
}

fn sgd(cfg: &RunConfig) -> Optimizer {
    Optimizer::sgd(cfg.train.sgd_lr, cfg.train.sgd_momentum)
}

fn adam(cfg: &RunConfig) -> Optimizer {
    let t = &cfg.train;
    Optimizer::adam(t.adam_lr, t.adam_beta1, t.adam_beta2, t.adam_eps)
}

/// Pretrain the teacher: CVAE epochs (`L_cvae`) alternate with backbone
/// epochs (`L_recon + L_clf`). Keeps the final network.
pub fn train_teacher(cfg: &RunConfig, ds: &Dataset, observer: Observer<'_>) -> Result<TrainOutcome> {
    let net = Network::init(cfg.teacher_arch(), Side::Teacher, derive_seed(cfg.train.seed, SEED_TEACHER_INIT))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, SEED_SAMPLING));
    let (mut sgd, mut adam) = (sgd(cfg), adam(cfg));
    let t = &cfg.train;
    let run = Run {
        cfg,
        ds,
        label: "teacher".into(),
        epochs: t.teacher_epochs,
        keep_best: false,
    };
    run.go(
        net,
        None,
        |e| stage_of_epoch(e, t.stage_period),
        |stage, batch, net| match stage {
            Stage::Stage1 => stage1_step(batch, net, None, &mut adam, t.alpha, t.beta, &mut rng),
            _ => stage2_step(batch, net, None, &mut sgd, t.recon_weight, t.gamma, &mut rng),
        },
        observer,
    )
}

/// Train a student with `variant`. Teacher-dependent variants require
/// `teacher`, whose parameters are only read.
pub fn train_student(
    cfg: &RunConfig,
    ds: &Dataset,
    variant: Variant,
    teacher: Option<&Network>,
    observer: Observer<'_>,
) -> Result<TrainOutcome> {
    if variant.needs_teacher() && teacher.is_none() {
        return Err(Error::Usage(format!("variant `{variant}` needs a teacher")));
    }
    let teacher = teacher.filter(|_| variant.needs_teacher());
    if let Some(t) = teacher {
        let want = cfg.teacher_arch();
        if t.arch != want || t.side != Side::Teacher {
            return Err(Error::Incompatible("teacher network does not match the configured teacher".into()));
        }
    }
    let arch = cfg.student_arch(variant.two_stage(), variant.two_stage());
    let net = Network::init(arch, Side::Student, derive_seed(cfg.train.seed, SEED_STUDENT_INIT))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, SEED_SAMPLING));
    let (mut sgd, mut adam) = (sgd(cfg), adam(cfg));
    let t = &cfg.train;
    let gen_teacher = teacher.filter(|_| variant.kd_gen());
    let att_teacher = teacher.filter(|_| variant.kd_att());
    let run = Run {
        cfg,
        ds,
        label: variant.name().into(),
        epochs: t.epochs,
        keep_best: true,
    };
    let two_stage = variant.two_stage();
    run.go(
        net,
        teacher,
        |e| {
            if two_stage {
                stage_of_epoch(e, t.stage_period)
            } else {
                Stage::Joint
            }
        },
        |stage, batch, net| match stage {
            Stage::Stage1 => stage1_step(batch, net, gen_teacher, &mut adam, t.alpha, t.beta, &mut rng),
            Stage::Stage2 => stage2_step(batch, net, att_teacher, &mut sgd, t.recon_weight, t.gamma, &mut rng),
            Stage::Joint => joint_step(batch, net, teacher, &mut sgd, t.feature_kd_weight),
        },
        observer,
    )
}

/// The full two-stage distillation protocol.
pub fn train_kd(cfg: &RunConfig, ds: &Dataset, teacher: &Network, observer: Observer<'_>) -> Result<TrainOutcome> {
    train_student(cfg, ds, Variant::Full, Some(teacher), observer)
}

/// Teacherless baselines and the direct feature-regression baseline.
pub fn train_baseline(
    cfg: &RunConfig,
    ds: &Dataset,
    variant: Variant,
    teacher: Option<&Network>,
    observer: Observer<'_>,
) -> Result<TrainOutcome> {
    if !matches!(
        variant,
        Variant::StudentOnly | Variant::StudentPlusAttention | Variant::FeatureKdEq1
    ) {
        return Err(Error::Usage(format!("`{variant}` is not a baseline variant")));
    }
    train_student(cfg, ds, variant, teacher, observer)
}
