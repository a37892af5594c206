use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for a few seconds per command
train_per_class = 3
val_per_class = 2
frames = 4
height = 8
width = 8
channels = 4
groups = 2
teacher_blocks = 3,3
student_blocks = 1
cvae_hidden = 8
latent_dim = 3
batch_size = 4
epochs = 3
teacher_epochs = 2
";

fn genkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genkd")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(config: &str) -> Fixture {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(f.path("run.cfg"), config).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn gen_data(&self) {
        let o = genkd(&["gen-data", "--config", &self.s("run.cfg"), "--out", &self.s("data.gkdd")]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }

    fn train_teacher(&self) {
        let o = genkd(&[
            "train-teacher",
            "--config",
            &self.s("run.cfg"),
            "--data",
            &self.s("data.gkdd"),
            "--out",
            &self.s("teacher.gkdc"),
            "--metrics",
            &self.s("teacher.jsonl"),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }

    fn train_kd(&self, out: &str, metrics: &str) -> Output {
        genkd(&[
            "train-kd",
            "--config",
            &self.s("run.cfg"),
            "--data",
            &self.s("data.gkdd"),
            "--teacher",
            &self.s("teacher.gkdc"),
            "--out",
            &self.s(out),
            "--metrics",
            &self.s(metrics),
        ])
    }
}

fn parse_scores(out: &str) -> (f64, f64) {
    let last = out.lines().last().unwrap();
    let mut parts = last.split(' ');
    let top1 = parts.next().unwrap().strip_prefix("top1=").unwrap().parse().unwrap();
    let topk = parts.next().unwrap().strip_prefix("topk=").unwrap().parse().unwrap();
    assert!(parts.next().is_none(), "{last}");
    (top1, topk)
}

fn lines(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn gen_data_is_deterministic() {
    let f = Fixture::new(TINY);
    f.gen_data();
    let first = fs::read(f.path("data.gkdd")).unwrap();
    f.gen_data();
    assert_eq!(fs::read(f.path("data.gkdd")).unwrap(), first);
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let f = Fixture::new(&format!("{TINY}lerning_rate = 0.1\n"));
    let o = genkd(&["gen-data", "--config", &f.s("run.cfg"), "--out", &f.s("d")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lerning_rate"), "{}", stderr(&o));
    assert!(!f.path("d").exists());
}

#[test]
fn missing_files_exit_3() {
    let f = Fixture::new(TINY);
    let o = genkd(&["gen-data", "--config", &f.s("nope.cfg"), "--out", &f.s("d")]);
    assert_eq!(code(&o), 3);
    let o = genkd(&["eval", "--checkpoint", &f.s("nope.gkdc"), "--data", &f.s("d")]);
    assert_eq!(code(&o), 3);
}

#[test]
fn usage_errors_exit_2() {
    let f = Fixture::new(TINY);
    f.gen_data();
    let o = genkd(&[
        "train-kd",
        "--config",
        &f.s("run.cfg"),
        "--data",
        &f.s("data.gkdd"),
        "--out",
        &f.s("s.gkdc"),
        "--metrics",
        &f.s("s.jsonl"),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--teacher"));
    let o = genkd(&[
        "train-baseline",
        "--config",
        &f.s("run.cfg"),
        "--data",
        &f.s("data.gkdd"),
        "--variant",
        "bogus",
        "--out",
        &f.s("s.gkdc"),
        "--metrics",
        &f.s("s.jsonl"),
    ]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&genkd(&["frobnicate"])), 2);
    assert_eq!(code(&genkd(&["gradcheck", "--scope", "everything"])), 2);
    assert_eq!(code(&genkd(&["--help"])), 0);
}

#[test]
fn train_eval_and_strip_round_trip() {
    let f = Fixture::new(TINY);
    f.gen_data();
    f.train_teacher();
    assert_eq!(lines(&f.path("teacher.jsonl")), 2);

    let o = f.train_kd("student.gkdc", "student.jsonl");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(lines(&f.path("student.jsonl")), 3);
    let (t1, tk) = parse_scores(&stdout(&o));
    assert!(t1 <= tk);
    for line in fs::read_to_string(f.path("student.jsonl")).unwrap().lines() {
        for key in ["\"run_id\"", "\"epoch\"", "\"stage\"", "\"losses\"", "\"top1\"", "\"topk\"", "\"seconds\""] {
            assert!(line.contains(key), "{key} missing from {line}");
        }
    }

    let eval = |ck: &str, preds: &str| {
        let o = genkd(&[
            "eval",
            "--checkpoint",
            &f.s(ck),
            "--data",
            &f.s("data.gkdd"),
            "--split",
            "val",
            "--predictions",
            &f.s(preds),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        stdout(&o)
    };
    let full = eval("student.gkdc", "full.csv");
    assert_eq!(parse_scores(&full), (t1, tk));

    let o = genkd(&["strip-cvae", "--checkpoint", &f.s("student.gkdc"), "--out", &f.s("lean.gkdc")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::metadata(f.path("lean.gkdc")).unwrap().len() < fs::metadata(f.path("student.gkdc")).unwrap().len());
    let lean = eval("lean.gkdc", "lean.csv");
    assert_eq!(lean, full);
    assert_eq!(fs::read(f.path("lean.csv")).unwrap(), fs::read(f.path("full.csv")).unwrap());
    assert_eq!(lines(&f.path("full.csv")), 8);
}

#[test]
fn kd_runs_are_byte_reproducible() {
    let f = Fixture::new(TINY);
    f.gen_data();
    f.train_teacher();
    assert_eq!(code(&f.train_kd("a.gkdc", "a.jsonl")), 0);
    assert_eq!(code(&f.train_kd("b.gkdc", "b.jsonl")), 0);
    assert_eq!(fs::read(f.path("a.gkdc")).unwrap(), fs::read(f.path("b.gkdc")).unwrap());
    assert_eq!(fs::read(f.path("a.jsonl")).unwrap(), fs::read(f.path("b.jsonl")).unwrap());
}

#[test]
fn corrupted_checkpoint_exits_6() {
    let f = Fixture::new(TINY);
    f.gen_data();
    f.train_teacher();
    let mut bytes = fs::read(f.path("teacher.gkdc")).unwrap();
    let i = bytes.len() - 9;
    bytes[i] ^= 1;
    fs::write(f.path("bad.gkdc"), bytes).unwrap();
    let o = genkd(&["eval", "--checkpoint", &f.s("bad.gkdc"), "--data", &f.s("data.gkdd")]);
    assert_eq!(code(&o), 6, "{}", stderr(&o));
}

#[test]
fn teacher_of_another_shape_exits_4() {
    let f = Fixture::new(TINY);
    f.gen_data();
    f.train_teacher();
    fs::write(f.path("run.cfg"), TINY.replace("channels = 4", "channels = 6")).unwrap();
    let o = f.train_kd("s.gkdc", "s.jsonl");
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn divergent_training_exits_5() {
    let f = Fixture::new(&format!("{TINY}sgd_lr = 1e300\n"));
    f.gen_data();
    let o = genkd(&[
        "train-baseline",
        "--config",
        &f.s("run.cfg"),
        "--data",
        &f.s("data.gkdd"),
        "--variant",
        "student_only",
        "--out",
        &f.s("s.gkdc"),
        "--metrics",
        &f.s("s.jsonl"),
    ]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_names_injected_faults() {
    let o = genkd(&["gradcheck", "--scope", "ops"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let table = stdout(&o);
    for op in genkd::graph::OP_NAMES {
        assert!(table.lines().any(|l| l.split_whitespace().nth(1) == Some(op)), "{op} not reported");
    }
    let o = genkd(&["gradcheck", "--scope", "ops", "--inject-fault", "conv3d"]);
    assert_eq!(code(&o), 1);
    let failed = stdout(&o);
    let failed = failed.lines().last().unwrap();
    assert_eq!(failed, "failed: conv3d");
}

#[test]
fn ablate_writes_one_row_per_arm_and_seed() {
    let f = Fixture::new(TINY);
    f.gen_data();
    f.train_teacher();
    let run = |out: &str| {
        let o = genkd(&[
            "ablate",
            "--config",
            &f.s("run.cfg"),
            "--data",
            &f.s("data.gkdd"),
            "--seeds",
            "2",
            "--teacher",
            &f.s("teacher.gkdc"),
            "--out",
            &f.s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read_to_string(f.path(out)).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let rows: Vec<&str> = a.lines().skip(1).collect();
    assert_eq!(a.lines().next().unwrap(), "variant,seed,top1,topk");
    assert_eq!(rows.len(), 5 * 2 + 5);
    assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some("mean")).count(), 5);
}
