use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlstm_distill::distill::{EvalReport, MetricsRecord};
use xlstm_distill::harness::checkpoint;
use xlstm_distill::harness::commands::{
    self, BenchRow, ComponentCheck, ScheduleRow, CONFIG_FILE, EVAL_FILE, METRICS_FILE, STUDENT_FILE, TEACHER_FILE,
};
use xlstm_distill::harness::RunConfig;
use xlstm_distill::nn::Parameterized;
use xlstm_distill::teacher::Teacher;

const TINY: &str = r#"
context_size = 16
batch_size = 4
grad_accum = 2
teacher_layers = 2
teacher_heads = 2
d_model = 16
teacher_steps = 6
epochs = 2
synthetic_len = 3000
bench_lengths = [8, 16]
bench_repeats = 1
"#;

fn bin(args: &[&str], dir: &Path, extra: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        std::fs::write(&config, TINY).unwrap();
    }
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_xlstm-distill"));
    cmd.args(args).arg("--config").arg(&config);
    for o in extra {
        cmd.arg("--override").arg(o);
    }
    cmd.output().unwrap()
}

fn run_ok(args: &[&str], dir: &Path, extra: &[&str]) -> Output {
    let out = bin(args, dir, extra);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn out_arg(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn strip_wall(path: &Path) -> Vec<MetricsRecord> {
    commands::read_jsonl::<MetricsRecord>(path)
        .unwrap()
        .into_iter()
        .map(|r| MetricsRecord { wall_ms: 0.0, ..r })
        .collect()
}

#[test]
fn pretrain_and_distill_are_deterministic_and_keep_frozen_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for run in ["a", "b"] {
        let out = out_arg(d, run);
        run_ok(&["pretrain-teacher", "--out", &out, "--seed", "3"], d, &[]);
        run_ok(&["distill", "--out", &out, "--seed", "3"], d, &[]);
    }
    let read = |run: &str, f: &str| std::fs::read(d.join(run).join(f)).unwrap();
    assert_eq!(read("a", TEACHER_FILE), read("b", TEACHER_FILE));
    assert_eq!(read("a", STUDENT_FILE), read("b", STUDENT_FILE));
    let metrics = strip_wall(&d.join("a").join(METRICS_FILE));
    assert_eq!(metrics, strip_wall(&d.join("b").join(METRICS_FILE)));

    let first = &metrics[0];
    assert_eq!((first.epoch, first.step, first.alpha_k, first.temp_k), (1, 0, 0.8, 2.0));
    for r in &metrics {
        let expect = (1.0 - r.alpha_k - r.beta_k) * r.loss_ce
            + r.alpha_k * r.temp_k * r.temp_k * r.loss_kd
            + r.beta_k * r.loss_frob;
        assert!((expect - r.loss_total).abs() < 1e-9);
    }

    let teacher = checkpoint::read(&d.join("a").join(TEACHER_FILE)).unwrap();
    let student = checkpoint::read(&d.join("a").join(STUDENT_FILE)).unwrap();
    let find = |set: &[(String, xlstm_distill::tensor::Tensor)], n: &str| {
        set.iter().find(|(name, _)| name == n).unwrap().1.data().to_vec()
    };
    assert_eq!(find(&teacher, "embedding"), find(&student, "embedding"));
    assert_eq!(find(&teacher, "head.proj.weight"), find(&student, "head.proj.weight"));
    assert_eq!(find(&teacher, "head.norm.gain"), find(&student, "head.norm.gain"));
}

#[test]
fn zero_teacher_steps_saves_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path(), "t");
    run_ok(
        &["pretrain-teacher", "--out", &out, "--seed", "9"],
        dir.path(),
        &["teacher_steps=0"],
    );
    let cfg = RunConfig::load(Some(&dir.path().join("t").join(CONFIG_FILE)), &[]).unwrap();
    let corpus = commands::Corpus::load(&cfg).unwrap();
    let fresh = Teacher::new(cfg.teacher_config(corpus.vocab.size()).unwrap(), 9).unwrap();
    let saved = std::fs::read(dir.path().join("t").join(TEACHER_FILE)).unwrap();
    assert_eq!(saved, checkpoint::encode(&fresh.named_params()));
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = out_arg(d, "a");
    run_ok(
        &["schedule", "--out", &a, "--seed", "4"],
        d,
        &["beta_mode=annealed", "k_mode=global"],
    );
    let echo = d.join("a").join(CONFIG_FILE);
    let cfg = RunConfig::load(Some(&echo), &[]).unwrap();
    assert_eq!(cfg.seed, 4);
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_xlstm-distill"));
    let b = out_arg(d, "b");
    let out = cmd
        .args(["schedule", "--out", &b, "--config"])
        .arg(&echo)
        .output()
        .unwrap();
    assert!(out.status.success());
    let read = |run: &str| std::fs::read(d.join(run).join(commands::SCHEDULE_FILE)).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(
        std::fs::read(&echo).unwrap(),
        std::fs::read(d.join("b").join(CONFIG_FILE)).unwrap()
    );
}

#[test]
fn schedule_rows_follow_the_anchors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(
        &["schedule", "--out", &out_arg(dir.path(), "s")],
        dir.path(),
        &["epochs=9"],
    );
    let rows: Vec<ScheduleRow> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!((rows[0].alpha_k, rows[0].temp_k), (0.8, 2.0));
    for w in rows.windows(2).filter(|w| w[0].epoch == w[1].epoch) {
        assert!(w[1].alpha_k <= w[0].alpha_k);
    }
    let last = rows.iter().find(|r| r.epoch == 9 && r.step == 0).unwrap();
    assert!((last.alpha_k - 0.5).abs() < 1e-12);
}

#[test]
fn validation_errors_exit_with_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(
        &["pretrain-teacher", "--out", &out_arg(dir.path(), "x")],
        dir.path(),
        &["corpus=/does/not/exist.txt"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`corpus`"));

    let out = bin(&["distill", "--out", &out_arg(dir.path(), "missing")], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));

    let out = bin(
        &["schedule", "--out", &out_arg(dir.path(), "x")],
        dir.path(),
        &["alpha_initial=0.1"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn distill_rejects_a_teacher_with_other_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path(), "t");
    run_ok(&["pretrain-teacher", "--out", &out], dir.path(), &["teacher_steps=0"]);
    let res = bin(&["distill", "--out", &out], dir.path(), &["d_model=32"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("checkpoint"));
}

#[test]
fn gradcheck_reports_every_component_and_fails_on_a_corrupted_rule() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path(), "g");
    run_ok(&["gradcheck", "--out", &out], dir.path(), &[]);
    let rows: Vec<ComponentCheck> = commands::read_jsonl(&dir.path().join("g").join(commands::GRADCHECK_FILE)).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.component.as_str()).collect();
    assert_eq!(names, commands::GRADCHECK_COMPONENTS);
    assert!(rows.iter().all(|r| r.passed && r.max_rel_err < 1e-4));

    let bad = bin(
        &["gradcheck", "--out", &out],
        dir.path(),
        &["gradcheck_fault=\"sigmoid:1.5\""],
    );
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn benchmark_schema_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let schema = |name: &str| {
        let out = run_ok(&["benchmark", "--out", &out_arg(dir.path(), name)], dir.path(), &[]);
        String::from_utf8(out.stdout)
            .unwrap()
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                let mut keys: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
                keys.sort();
                let tag = v.get("seq_len").map(|s| s.to_string()).unwrap_or_default();
                format!("{}:{tag}:{}", v["component"], keys.join(","))
            })
            .collect::<Vec<_>>()
    };
    let a = schema("a");
    assert_eq!(a, schema("b"));
    assert_eq!(a.len(), 6);
    let rows: Vec<BenchRow> =
        commands::read_jsonl::<serde_json::Value>(&dir.path().join("a").join(commands::BENCHMARK_FILE))
            .unwrap()
            .into_iter()
            .filter(|v| v.get("seq_len").is_some())
            .map(|v| serde_json::from_value(v).unwrap())
            .collect();
    assert!(rows.iter().all(|r| r.ms > 0.0));
}

#[test]
fn untrained_student_on_random_text_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz .,;".chars().collect();
    let text: String = (0..4000)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect();
    let corpus = d.join("random.txt");
    std::fs::write(&corpus, text).unwrap();
    let c = format!("corpus=\"{}\"", corpus.display());
    let out = out_arg(d, "r");
    run_ok(&["pretrain-teacher", "--out", &out], d, &[&c, "teacher_steps=0"]);
    run_ok(&["distill", "--out", &out], d, &[&c, "epochs=0"]);
    let res = run_ok(&["eval", "--out", &out], d, &[&c]);
    let report: EvalReport = serde_json::from_str(String::from_utf8(res.stdout).unwrap().trim()).unwrap();
    let ln_v = (alphabet.len() as f64).ln();
    assert!((report.student_ce - ln_v).abs() < 0.05 * ln_v, "{report:?}");
    let saved: Vec<EvalReport> = commands::read_jsonl(&d.join("r").join(EVAL_FILE)).unwrap();
    assert_eq!(saved, vec![report]);
}

#[test]
fn trained_teacher_beats_untrained_student() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = out_arg(d, "t");
    run_ok(
        &["pretrain-teacher", "--out", &out],
        d,
        &["teacher_steps=60", "teacher_lr=0.01"],
    );
    run_ok(&["distill", "--out", &out], d, &["epochs=0"]);
    let res = run_ok(&["eval", "--out", &out], d, &[]);
    let report: EvalReport = serde_json::from_str(String::from_utf8(res.stdout).unwrap().trim()).unwrap();
    assert!(report.teacher_ce < report.student_ce, "{report:?}");
}

#[test]
fn numerical_failure_exits_with_two_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = out_arg(d, "n");
    run_ok(&["pretrain-teacher", "--out", &out], d, &["teacher_steps=0"]);
    let res = bin(
        &["distill", "--out", &out],
        d,
        &["lr=1e300", "lr_schedule=constant", "warmup_ratio=0"],
    );
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    let student = checkpoint::read(&d.join("n").join(STUDENT_FILE)).unwrap();
    assert!(student.iter().all(|(_, t)| t.is_finite()));
    assert!(d.join("n").join(METRICS_FILE).exists());
}
