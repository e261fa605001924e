//! The subcommands, as library calls that write their artifacts to an
//! output directory.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, write_atomic};
use super::config::{parse_fault, RunConfig};
use crate::data::{full_alphabet_corpus, split_held_out, BatchStream, Vocab};
use crate::distill::{
    combined_loss, cross_entropy, evaluate, frobenius_loss, init_student_from_teacher, kd_loss, run_delta_distillation,
    DistillSummary, DistillWeights, EvalReport, MetricsRecord, Student,
};
use crate::error::{Error, Result};
use crate::nn::{check_module_gradients, Parameterized};
use crate::teacher::{pretrain_teacher, CausalSelfAttention, Teacher};
use crate::tensor::{finite_difference_check, GradCheckConfig, Tape, Tensor, Var};
use crate::xlstm::{build_stack, LstmState, MlstmCell, SlstmCell, VanillaLstm};

pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const TEACHER_LOSS_FILE: &str = "teacher_loss.jsonl";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SCHEDULE_FILE: &str = "schedule.jsonl";
pub const GRADCHECK_FILE: &str = "gradcheck.jsonl";
pub const BENCHMARK_FILE: &str = "benchmark.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";

/// Tokenized corpus split into training and held-out streams.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl Corpus {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let text = match &cfg.corpus {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::config("corpus", format!("cannot read {}: {e}", p.display())))?,
            None => full_alphabet_corpus(cfg.synthetic_len, cfg.corpus_seed, cfg.synthetic_noise),
        };
        let vocab = Vocab::build(&text).map_err(|e| Error::config("corpus", e.to_string()))?;
        let tokens = vocab.encode(&text)?;
        let (train, held_out) = split_held_out(&tokens, cfg.held_out)?;
        Ok(Corpus { vocab, train, held_out })
    }

    pub fn train_stream(&self, cfg: &RunConfig) -> Result<BatchStream> {
        BatchStream::new(self.train.clone(), cfg.context_size, cfg.batch_size, cfg.seed)
            .map_err(|e| Error::config("context_size", e.to_string()))
    }

    pub fn held_out_stream(&self, cfg: &RunConfig) -> Result<BatchStream> {
        BatchStream::new(self.held_out.clone(), cfg.context_size, cfg.batch_size, cfg.seed)
            .map_err(|e| Error::config("held_out", e.to_string()))
    }
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())
}

/// Serializes `rows` as one JSON object per line and writes them atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::invalid(e.to_string()))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::invalid(format!("{}: {e}", path.display()))))
        .collect()
}

fn teacher_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.teacher_checkpoint.clone().unwrap_or_else(|| out.join(TEACHER_FILE))
}

fn student_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.student_checkpoint.clone().unwrap_or_else(|| out.join(STUDENT_FILE))
}

/// Builds the configured teacher and fills it from `path`. A vocabulary
/// file beside the checkpoint, when present, must match `corpus`.
pub fn load_teacher(cfg: &RunConfig, corpus: &Corpus, path: &Path) -> Result<Teacher> {
    if let Some(dir) = path.parent() {
        let vpath = dir.join(VOCAB_FILE);
        if vpath.exists() {
            let text = std::fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
            let saved: Vocab =
                serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", vpath.display())))?;
            if saved != corpus.vocab {
                return Err(Error::config(
                    "corpus",
                    "vocabulary differs from the one the teacher was trained on",
                ));
            }
        }
    }
    let mut teacher = Teacher::new(cfg.teacher_config(corpus.vocab.size())?, cfg.seed)?;
    checkpoint::load_into(&mut teacher, path)?;
    Ok(teacher)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

pub struct PretrainOutcome {
    pub teacher: Teacher,
    pub trace: Vec<f64>,
    pub corpus: Corpus,
}

/// Trains the teacher on next-token prediction and writes its checkpoint,
/// loss trace and vocabulary.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainOutcome> {
    let corpus = Corpus::load(cfg)?;
    prepare_out(out, cfg)?;
    let stream = corpus.train_stream(cfg)?;
    let mut teacher = Teacher::new(cfg.teacher_config(corpus.vocab.size())?, cfg.seed)?;
    let trace = pretrain_teacher(&mut teacher, &stream, &cfg.pretrain_options())?;
    let points: Vec<LossPoint> = trace
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossPoint { step, loss })
        .collect();
    write_jsonl(&out.join(TEACHER_LOSS_FILE), &points)?;
    let vocab = serde_json::to_vec(&corpus.vocab).map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&out.join(VOCAB_FILE), &vocab)?;
    checkpoint::save(&teacher, &out.join(TEACHER_FILE))?;
    Ok(PretrainOutcome { teacher, trace, corpus })
}

pub struct DistillOutcome {
    pub teacher: Teacher,
    pub initial_student: Student,
    pub student: Student,
    pub records: Vec<MetricsRecord>,
    pub summary: DistillSummary,
    pub trainable_fraction: f64,
    pub corpus: Corpus,
}

/// Initializes the student from the teacher checkpoint, distils it, and
/// writes the student checkpoint and per-step metrics. On a numerical
/// failure the last good student and the metrics so far are still written.
pub fn distill(cfg: &RunConfig, out: &Path) -> Result<DistillOutcome> {
    let corpus = Corpus::load(cfg)?;
    let teacher = load_teacher(cfg, &corpus, &teacher_path(cfg, out))?;
    prepare_out(out, cfg)?;
    let stream = corpus.train_stream(cfg)?;
    let opts = cfg.distill_options()?;
    let (mut student, trainable_fraction) =
        init_student_from_teacher(&teacher, cfg.student_config(corpus.vocab.size())?, cfg.seed)?;
    let initial_student = student.clone();
    let mut records = Vec::new();
    let result = run_delta_distillation(&teacher, &mut student, &stream, &opts, &mut |r| {
        records.push(r.clone());
        Ok(())
    });
    write_jsonl(&out.join(METRICS_FILE), &records)?;
    checkpoint::save(&student, &student_path(cfg, out))?;
    let summary = result?;
    Ok(DistillOutcome {
        teacher,
        initial_student,
        student,
        records,
        summary,
        trainable_fraction,
        corpus,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub epoch: usize,
    pub step: usize,
    pub alpha_k: f64,
    pub temp_k: f64,
    pub beta_k: f64,
}

/// Annealed weights for every optimizer step of the configured run.
pub fn schedule(cfg: &RunConfig) -> Result<Vec<ScheduleRow>> {
    let corpus = Corpus::load(cfg)?;
    let per_epoch = corpus.train_stream(cfg)?.batches_per_epoch().div_ceil(cfg.grad_accum);
    let mut state = cfg.anneal()?;
    let mut rows = Vec::with_capacity(per_epoch * cfg.epochs);
    for epoch in 1..=cfg.epochs {
        for step in 0..per_epoch {
            let w = state.weights();
            rows.push(ScheduleRow {
                epoch,
                step,
                alpha_k: w.alpha,
                temp_k: w.temp,
                beta_k: w.beta,
            });
            state.advance();
        }
        state = crate::distill::epoch_decay(state);
    }
    Ok(rows)
}

pub fn schedule_to(cfg: &RunConfig, out: &Path) -> Result<Vec<ScheduleRow>> {
    let rows = schedule(cfg)?;
    prepare_out(out, cfg)?;
    write_jsonl(&out.join(SCHEDULE_FILE), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

pub const GRADCHECK_COMPONENTS: [&str; 5] = ["lstm", "slstm", "mlstm", "attention", "combined_loss"];

/// Central-difference checks of five components on tiny random configs.
pub fn gradcheck(cfg: &RunConfig) -> Result<Vec<ComponentCheck>> {
    let gc = GradCheckConfig {
        tol: cfg.gradcheck_tol,
        fault: cfg.gradcheck_fault.as_deref().map(parse_fault).transpose()?,
        ..GradCheckConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (b, s, d) = (2usize, 3usize, 8usize);
    let x = Tensor::randn(&[b, s, d], 1.0, &mut rng)?;

    // Outputs are contracted with fixed random probes so every entry
    // contributes with a distinct weight.
    let mut reports = Vec::new();

    let mut lstm = VanillaLstm::new(d, 5, &mut rng)?;
    let xs = Tensor::randn(&[s, b, d], 1.0, &mut rng)?;
    let w_lstm = Tensor::randn(&[b, 5], 1.0, &mut rng)?;
    let r = check_module_gradients(
        &mut lstm,
        |tape, m| {
            let xv = tape.leaf(&xs);
            let mut st = LstmState::zeros(tape, b, m.d_hidden())?;
            let mut acc = tape.scalar(0.0);
            for t in 0..s {
                st = m.step(tape, xv.select(0, t)?, st)?;
                acc = acc.add(st.h.add(st.c.scale(0.5))?.mul(tape.leaf(&w_lstm))?.sum())?;
            }
            Ok(acc)
        },
        gc,
    )?;
    reports.push(("lstm", r));

    let mut slstm = SlstmCell::new(d, 2, cfg.forget_gate, &mut rng)?;
    let probe = Tensor::randn(&[b, s, d], 1.0, &mut rng)?;
    let r = check_module_gradients(
        &mut slstm,
        |tape, m| {
            m.forward_sequence(tape, tape.leaf(&x))?
                .mul(tape.leaf(&probe))
                .map(Var::sum)
        },
        gc,
    )?;
    reports.push(("slstm", r));

    let mut mlstm = MlstmCell::new(d, 2, cfg.forget_gate, &mut rng)?;
    let probe = Tensor::randn(&[b, s, d], 1.0, &mut rng)?;
    let r = check_module_gradients(
        &mut mlstm,
        |tape, m| {
            m.forward_sequence(tape, tape.leaf(&x))?
                .mul(tape.leaf(&probe))
                .map(Var::sum)
        },
        gc,
    )?;
    reports.push(("mlstm", r));

    let mut attn = CausalSelfAttention::new(d, 2, 4, 0.5, &mut rng)?;
    let xa = Tensor::randn(&[b, 4, d], 1.0, &mut rng)?;
    let probe = Tensor::randn(&[b, 4, d], 1.0, &mut rng)?;
    let r = check_module_gradients(
        &mut attn,
        |tape, m| m.forward(tape, tape.leaf(&xa))?.mul(tape.leaf(&probe)).map(Var::sum),
        gc,
    )?;
    reports.push(("attention", r));

    let v = 5;
    let teacher_logits = Tensor::randn(&[b, s, v], 1.5, &mut rng)?;
    let teacher_hidden = Tensor::randn(&[b, s, d], 1.0, &mut rng)?;
    let targets: Vec<usize> = (0..b * s).map(|i| (i * 3 + 1) % v).collect();
    let params = [
        Tensor::randn(&[b, s, v], 1.5, &mut rng)?,
        Tensor::randn(&[b, s, d], 1.0, &mut rng)?,
    ];
    let weights = DistillWeights {
        alpha: 0.5,
        temp: 2.0,
        beta: 0.2,
    };
    let r = finite_difference_check(
        |tape, p| {
            let ce = cross_entropy(p[0], &targets)?;
            let kd = kd_loss(tape.leaf(&teacher_logits), p[0], weights.temp)?;
            let frob = frobenius_loss(tape.leaf(&teacher_hidden), p[1])?;
            combined_loss(ce, kd, frob, &weights, b * s * d, true)
        },
        &params,
        gc,
    )?;
    reports.push(("combined_loss", r));

    Ok(reports
        .into_iter()
        .map(|(name, r)| ComponentCheck {
            component: name.to_string(),
            max_rel_err: r.max_rel_err,
            tol: r.tol,
            passed: r.passed,
        })
        .collect())
}

pub fn gradcheck_to(cfg: &RunConfig, out: &Path) -> Result<Vec<ComponentCheck>> {
    let rows = gradcheck(cfg)?;
    prepare_out(out, cfg)?;
    write_jsonl(&out.join(GRADCHECK_FILE), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub component: String,
    pub seq_len: usize,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSlope {
    pub component: String,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<BenchSlope>,
}

pub const BENCH_STUDENT: &str = "student_stack";
pub const BENCH_ATTENTION: &str = "teacher_attention";

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn min_forward_ms(repeats: usize, f: impl Fn(&Tape) -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let tape = Tape::new();
        let start = Instant::now();
        f(&tape)?;
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

/// Single-sequence forward wall time of the student stack and one teacher
/// attention layer at each configured length, with fitted log-log slopes.
pub fn benchmark(cfg: &RunConfig) -> Result<BenchReport> {
    if cfg.bench_lengths.len() < 2 || cfg.bench_lengths.contains(&0) {
        return Err(Error::config("bench_lengths", "need at least two positive lengths"));
    }
    let d = cfg.d_model;
    let sc = cfg.student_config(1)?;
    let stack = build_stack(d, sc.n_blocks, sc.n_heads, sc.forget, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dk = d.div_ceil(cfg.teacher_heads);
    let attn = CausalSelfAttention::new(d, cfg.teacher_heads, dk, 0.02, &mut rng)?;
    let mut rows = Vec::new();
    for &s in &cfg.bench_lengths {
        let x = Tensor::randn(&[1, s, d], 1.0, &mut rng)?;
        let ms = min_forward_ms(cfg.bench_repeats, |tape| stack.forward(tape, tape.leaf(&x)).map(drop))?;
        rows.push(BenchRow {
            component: BENCH_STUDENT.into(),
            seq_len: s,
            ms,
        });
        let ms = min_forward_ms(cfg.bench_repeats, |tape| attn.forward(tape, tape.leaf(&x)).map(drop))?;
        rows.push(BenchRow {
            component: BENCH_ATTENTION.into(),
            seq_len: s,
            ms,
        });
    }
    let slopes = [BENCH_STUDENT, BENCH_ATTENTION]
        .iter()
        .map(|&c| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.component == c)
                .map(|r| (r.seq_len as f64, r.ms.max(1e-6)))
                .collect();
            BenchSlope {
                component: c.into(),
                slope: log_log_slope(&pts),
            }
        })
        .collect();
    Ok(BenchReport { rows, slopes })
}

pub fn benchmark_to(cfg: &RunConfig, out: &Path) -> Result<BenchReport> {
    let report = benchmark(cfg)?;
    prepare_out(out, cfg)?;
    let mut buf = Vec::new();
    for r in &report.rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::invalid(e.to_string()))?;
        buf.push(b'\n');
    }
    for s in &report.slopes {
        serde_json::to_writer(&mut buf, s).map_err(|e| Error::invalid(e.to_string()))?;
        buf.push(b'\n');
    }
    write_atomic(&out.join(BENCHMARK_FILE), &buf)?;
    Ok(report)
}

/// Held-out evaluation of the teacher and student checkpoints.
pub fn eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let corpus = Corpus::load(cfg)?;
    let teacher = load_teacher(cfg, &corpus, &teacher_path(cfg, out))?;
    let (mut student, _) = init_student_from_teacher(&teacher, cfg.student_config(corpus.vocab.size())?, cfg.seed)?;
    checkpoint::load_into(&mut student, &student_path(cfg, out))?;
    let report = evaluate(&teacher, &student, &corpus.held_out_stream(cfg)?)?;
    prepare_out(out, cfg)?;
    write_jsonl(&out.join(EVAL_FILE), std::slice::from_ref(&report))?;
    Ok(report)
}

/// Prints rows as JSON lines on `w`.
pub fn print_jsonl<T: Serialize>(w: &mut dyn Write, rows: &[T]) -> Result<()> {
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

/// True when every frozen tensor of `a` is bitwise equal to its
/// counterpart in `b`.
pub fn frozen_params_unchanged(a: &Student, b: &Student) -> bool {
    a.named_params()
        .iter()
        .zip(b.named_params())
        .filter(|((_, t), _)| !t.requires_grad())
        .all(|((_, x), (_, y))| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}
