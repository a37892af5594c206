//! End-to-end acceptance run on the default configuration.
//!
//! Prints one `PASS`/`FAIL` line per criterion and fails at the end if any
//! criterion failed. Lines go straight to the process stdout so they show up
//! even when the harness captures test output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use genkd::checkpoint::Checkpoint;
use genkd::checks::micro_arch;
use genkd::config::RunConfig;
use genkd::data::{load_dataset, spatial_probe, stack, DatasetSpec};
use genkd::losses::{kl_diag_gaussian, loss_kd_att, loss_kd_gen};
use genkd::metrics::Stage;
use genkd::nn::{attention_apply, attention_forward, Latent, Network};
use genkd::params::{Role, Side};
use genkd::trainer::{train_kd, Phase, StepView};
use genkd::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Output {
    code: u8,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
}

/// Run one CLI command in-process, through the same entry point as the binary.
fn genkd(args: &[&str]) -> Output {
    let (mut stdout, mut stderr) = (Vec::new(), Vec::new());
    let argv = std::iter::once("genkd").chain(args.iter().copied());
    let code = genkd_cli::run(argv, &mut stdout, &mut stderr);
    Output { code, stdout, stderr }
}

fn ok(o: &Output) -> bool {
    o.code == 0
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, n: usize, pass: bool, what: &str, detail: String) {
        if !pass {
            self.failed.push(n);
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        writeln!(out, "{tag} [{n:>2}] {what}: {detail}").unwrap();
        out.flush().unwrap();
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn top1_of(stdout: &[u8]) -> f64 {
    let text = String::from_utf8_lossy(stdout);
    let last = text.lines().last().unwrap_or("");
    last.split(' ')
        .find_map(|p| p.strip_prefix("top1="))
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN)
}

fn gradient_fidelity(r: &mut Report) {
    let t0 = Instant::now();
    let o = genkd(&["gradcheck", "--scope", "all"]);
    let took = t0.elapsed();
    let text = String::from_utf8_lossy(&o.stdout);
    let rows = text.lines().filter(|l| l.ends_with("PASS") || l.ends_with("FAIL")).count();
    let bad = text.lines().filter(|l| l.ends_with("FAIL")).count();
    r.line(
        1,
        ok(&o) && took < Duration::from_secs(120),
        "gradient fidelity",
        format!("{rows} checks, {bad} failing, {}", secs(took)),
    );
}

fn norm_preservation(r: &mut Report) {
    let arch = micro_arch(false);
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let mut net = Network::init(arch.clone(), Side::Student, case).unwrap();
        let mut pr = rng(1000 + case);
        for (name, t) in net.params.iter_mut() {
            if name.starts_with("attention.") {
                for v in t.data_mut() {
                    *v = pr.random_range(-1.5..1.5);
                }
            }
        }
        let f = Tensor::randn([3, arch.channels, 4, 3, 3], pr.random_range(0.1..5.0), &mut pr);
        let mut g = Graph::new();
        let b = net.bind(&mut g, |_| false);
        let fv = g.constant(f.clone());
        let a = attention_forward(&mut g, &b, &arch, fv).unwrap();
        let out = attention_apply(&mut g, &b, fv, a).unwrap();
        let per = f.numel() / 3;
        for s in 0..3 {
            let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ratio = norm(&g.value(out).data()[s * per..(s + 1) * per]) / norm(&f.data()[s * per..(s + 1) * per]);
            worst = worst.max((ratio - 1.0).abs());
        }
    }
    r.line(2, worst <= 1e-10, "norm preservation", format!("100 cases, max |ratio - 1| = {worst:.2e}"));
}

fn adjoint_identity(r: &mut Report) {
    let mut pr = rng(77);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < 20 {
        let (n, ci, co) = (pr.random_range(1..3), pr.random_range(1..4), pr.random_range(1..4));
        let dims: Vec<usize> = (0..3).map(|_| pr.random_range(3..8)).collect();
        let k: Vec<usize> = (0..3).map(|_| pr.random_range(1..4)).collect();
        let s: Vec<usize> = (0..3).map(|_| pr.random_range(1..3)).collect();
        let p: Vec<usize> = (0..3).map(|_| pr.random_range(0..2)).collect();
        // Shapes whose transposed output lands exactly back on the input.
        if (0..3).any(|i| (dims[i] + 2 * p[i] - k[i]) % s[i] != 0) {
            continue;
        }
        let (s3, p3) = ([s[0], s[1], s[2]], [p[0], p[1], p[2]]);
        let x = Tensor::randn([n, ci, dims[0], dims[1], dims[2]], 1.0, &mut pr);
        let w = Tensor::randn([co, ci, k[0], k[1], k[2]], 1.0, &mut pr);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w));
        let cx = g.conv3d(xv, wv, s3, p3).unwrap();
        let y = Tensor::randn(g.shape(cx).to_vec(), 1.0, &mut pr);
        let yv = g.constant(y.clone());
        let ty = g.conv_transpose3d(yv, wv, s3, p3).unwrap();
        let lhs = g.value(cx).dot(&y);
        let rhs = x.dot(g.value(ty));
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        cases += 1;
    }
    r.line(3, worst <= 1e-10, "adjoint identity", format!("20 cases, max relative gap {worst:.2e}"));
}

fn kl_closed(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    let d = mq.len();
    let mut g = Graph::new();
    let mut latent = |m: &[f64], l: &[f64]| Latent {
        mean: g.constant(Tensor::new([1, d], m.to_vec()).unwrap()),
        log_var: g.constant(Tensor::new([1, d], l.to_vec()).unwrap()),
    };
    let (q, p) = (latent(mq, lq), latent(mp, lp));
    let kl = kl_diag_gaussian(&mut g, q, p).unwrap();
    g.value(kl).item().unwrap()
}

fn kl_correctness(r: &mut Report) {
    let log_pdf = |z: f64, m: f64, lv: f64| -0.5 * (lv + (z - m) * (z - m) / lv.exp() + (2.0 * std::f64::consts::PI).ln());
    let mut pr = rng(9);
    let (mut worst_rel, mut worst_self): (f64, f64) = (0.0, 0.0);
    for case in 0..10u64 {
        let v: Vec<f64> = (0..12).map(|_| pr.random_range(-1.5..1.5)).collect();
        let (mq, lq, mp, lp) = (&v[0..3], &v[3..6], &v[6..9], &v[9..12]);
        let closed = kl_closed(mq, lq, mp, lp);
        let mut mc_rng = rng(500 + case);
        let mut acc = 0.0;
        for _ in 0..100_000 {
            for d in 0..3 {
                let e: f64 = mc_rng.sample(StandardNormal);
                let z = mq[d] + (0.5 * lq[d]).exp() * e;
                acc += log_pdf(z, mq[d], lq[d]) - log_pdf(z, mp[d], lp[d]);
            }
        }
        let mc = acc / 100_000.0;
        worst_rel = worst_rel.max((mc - closed).abs() / closed);
        worst_self = worst_self.max(kl_closed(mq, lq, mq, lq).abs());
    }
    r.line(
        4,
        worst_rel < 0.02 && worst_self <= 1e-12,
        "KL correctness",
        format!("max MC relative gap {:.3}%, max KL(q, q) {worst_self:.1e}", 100.0 * worst_rel),
    );
}

fn self_distillation(r: &mut Report, teacher: &Network, data: &Path) {
    let ds = load_dataset(data).unwrap();
    let student = Network::from_params(teacher.arch.clone(), Side::Student, teacher.params.clone()).unwrap();
    let batch = stack(&ds.train, &(0..16).collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new();
    let tb = teacher.bind(&mut g, |_| false);
    let sb = student.bind(&mut g, |_| true);
    let x = g.constant(batch.clips);
    let tf = teacher.forward(&mut g, &tb, x).unwrap();
    let sf = student.forward(&mut g, &sb, x).unwrap();
    let gen = loss_kd_gen(&mut g, &tb, &teacher.arch, &sb, &student.arch, sf.tap, sf.attention.unwrap())
        .unwrap()
        .value(&g);
    let att = loss_kd_att(&mut g, tf.attention.unwrap(), sf.attention.unwrap()).unwrap().value(&g);
    r.line(
        5,
        gen.abs() < 1e-12 && att.abs() < 1e-12,
        "self-distillation zero",
        format!("kd_gen {gen:.1e}, kd_att {att:.1e}"),
    );
}

fn freeze_bit_exactness(r: &mut Report, cfg: &RunConfig, teacher: &Network, data: &Path) {
    let mut ds = load_dataset(data).unwrap();
    ds.train.truncate(32);
    let mut c = cfg.clone();
    c.train.epochs = 3;
    let teacher_hash = teacher.params.digest_all();
    let digests = |v: &StepView<'_>| -> BTreeMap<Role, [u8; 32]> {
        Role::ALL.into_iter().map(|r| (r, v.trained.digest_role(r))).collect()
    };
    let mut before = None;
    let (mut steps, mut violations, mut teacher_moved) = (0usize, Vec::new(), false);
    let mut obs = |v: &StepView<'_>| {
        teacher_moved |= v.teacher.map(|t| t.digest_all()) != Some(teacher_hash);
        let now = digests(v);
        match v.phase {
            Phase::Before => before = Some(now),
            Phase::After => {
                let was = before.take().unwrap();
                let frozen: &[Role] = match v.stage {
                    Stage::Stage1 => &[Role::Backbone, Role::Attention, Role::Classifier],
                    _ => &[Role::Cvae],
                };
                for role in frozen {
                    if was[role] != now[role] {
                        violations.push(format!("epoch {} step {} {role:?}", v.epoch, v.step));
                    }
                }
                steps += 1;
            }
        }
    };
    let run = train_kd(&c, &ds, teacher, Some(&mut obs));
    let pass = run.is_ok() && steps > 0 && violations.is_empty() && !teacher_moved;
    r.line(
        6,
        pass,
        "freeze bit-exactness",
        format!("{steps} steps hashed, {} violations, teacher moved: {teacher_moved}", violations.len()),
    );
}

fn read_ablation(csv: &str) -> BTreeMap<String, f64> {
    csv.lines()
        .skip(1)
        .filter_map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            (cols.get(1) == Some(&"mean")).then(|| (cols[0].to_string(), cols[2].parse().unwrap()))
        })
        .collect()
}

#[test]
fn acceptance() {
    let mut r = Report { failed: Vec::new() };
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let cfg = RunConfig::default();
    fs::write(p("run.cfg"), cfg.to_canonical()).unwrap();

    gradient_fidelity(&mut r);
    norm_preservation(&mut r);
    adjoint_identity(&mut r);
    kl_correctness(&mut r);

    let clock = Instant::now();
    assert!(ok(&genkd(&["gen-data", "--config", &p("run.cfg"), "--out", &p("data.gkdd")])));
    let o = genkd(&[
        "train-teacher",
        "--config",
        &p("run.cfg"),
        "--data",
        &p("data.gkdd"),
        "--out",
        &p("teacher.gkdc"),
        "--metrics",
        &p("teacher.jsonl"),
    ]);
    assert!(ok(&o), "{}", String::from_utf8_lossy(&o.stderr));
    let o = genkd(&["eval", "--checkpoint", &p("teacher.gkdc"), "--data", &p("data.gkdd"), "--split", "train"]);
    let teacher_train = top1_of(&o.stdout);
    let teacher_time = clock.elapsed();
    let teacher = Checkpoint::load(Path::new(&p("teacher.gkdc"))).unwrap().network().unwrap();

    self_distillation(&mut r, &teacher, Path::new(&p("data.gkdd")));
    freeze_bit_exactness(&mut r, &cfg, &teacher, Path::new(&p("data.gkdd")));

    let kd = |out: &str, metrics: &str| {
        let o = genkd(&[
            "train-kd",
            "--config",
            &p("run.cfg"),
            "--data",
            &p("data.gkdd"),
            "--teacher",
            &p("teacher.gkdc"),
            "--out",
            &p(out),
            "--metrics",
            &p(metrics),
        ]);
        assert!(ok(&o), "{}", String::from_utf8_lossy(&o.stderr));
    };
    kd("a.gkdc", "a.jsonl");
    kd("b.gkdc", "b.jsonl");

    let eval = |ck: &str, preds: &str| {
        let o = genkd(&[
            "eval",
            "--checkpoint",
            &p(ck),
            "--data",
            &p("data.gkdd"),
            "--predictions",
            &p(preds),
        ]);
        assert!(ok(&o), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(p(preds)).unwrap()
    };
    assert!(ok(&genkd(&["strip-cvae", "--checkpoint", &p("a.gkdc"), "--out", &p("lean.gkdc")])));
    let lean = Checkpoint::load(Path::new(&p("lean.gkdc"))).unwrap();
    let same = eval("a.gkdc", "full.csv") == eval("lean.gkdc", "lean.csv");
    r.line(
        7,
        same && !lean.params.has_role(Role::Cvae),
        "inference independence",
        format!("predictions identical after strip: {same}"),
    );

    let ablate_clock = Instant::now();
    let o = genkd(&[
        "ablate",
        "--config",
        &p("run.cfg"),
        "--data",
        &p("data.gkdd"),
        "--seeds",
        "3",
        "--teacher",
        &p("teacher.gkdc"),
        "--out",
        &p("ablation.csv"),
    ]);
    assert!(ok(&o), "{}", String::from_utf8_lossy(&o.stderr));
    let ablate_time = ablate_clock.elapsed();
    let csv = fs::read_to_string(p("ablation.csv")).unwrap();
    {
        let mut out = std::io::stdout().lock();
        writeln!(out, "ablation ({}):\n{csv}", secs(ablate_time)).unwrap();
    }
    let means = read_ablation(&csv);
    let m = |v: &str| means[v];
    let (full, only) = (m("full"), m("student_only"));
    let total = teacher_time + ablate_time;
    r.line(
        8,
        full - only >= 0.02 && teacher_train >= 0.9 && total < Duration::from_secs(30 * 60),
        "full KD beats student only",
        format!(
            "full {full:.3} vs student_only {only:.3} ({:+.1} pt), teacher train {teacher_train:.3}, {}",
            100.0 * (full - only),
            secs(total)
        ),
    );
    let spa = m("student_plus_attention");
    r.line(
        9,
        spa >= only,
        "attention module alone",
        format!("student_plus_attention {spa:.3} vs student_only {only:.3}"),
    );
    let tol = 0.005;
    let (gen, att) = (m("gen_kd"), m("att_kd"));
    let ordered =
        full + tol >= gen && full + tol >= att && [gen, att, full].iter().all(|&v| v + tol >= only);
    r.line(
        10,
        ordered,
        "ablation ordering",
        format!("student_only {only:.3}, gen_kd {gen:.3}, att_kd {att:.3}, full {full:.3}"),
    );

    let same_ck = fs::read(p("a.gkdc")).unwrap() == fs::read(p("b.gkdc")).unwrap();
    let same_log = fs::read(p("a.jsonl")).unwrap() == fs::read(p("b.jsonl")).unwrap();
    r.line(
        11,
        same_ck && same_log,
        "determinism",
        format!("checkpoints identical: {same_ck}, metrics identical: {same_log}"),
    );

    let ds = load_dataset(Path::new(&p("data.gkdd"))).unwrap();
    assert_eq!(ds.spec, DatasetSpec::default());
    let probe = spatial_probe(&ds, 200, 0.5);
    r.line(
        12,
        probe <= 0.35 && teacher_train >= 0.9,
        "temporal separability",
        format!("single-frame probe {probe:.3}, teacher train {teacher_train:.3}"),
    );

    assert!(r.failed.is_empty(), "failing criteria: {:?}", r.failed);
}
