//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line per criterion and exits non-zero if any failed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlstm_distill::distill::{
    combined_loss, cross_entropy, evaluate, frobenius_loss, kd_loss, schedule_value, DistillWeights, EvalReport,
    MetricsRecord, Student,
};
use xlstm_distill::harness::checkpoint;
use xlstm_distill::harness::commands::{self, DistillOutcome, GRADCHECK_COMPONENTS};
use xlstm_distill::harness::RunConfig;
use xlstm_distill::nn::Parameterized;
use xlstm_distill::teacher::{CausalSelfAttention, Teacher};
use xlstm_distill::tensor::{Tape, Tensor};
use xlstm_distill::xlstm::{
    build_stack, naive_gates, stabilize_gates, ForgetGate, NaiveSlstmState, SlstmCell, SlstmState,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|err| err.to_string())
}

fn root() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("scratch directory");
    dir
}

fn desk_overrides() -> Vec<String> {
    vec!["context_size=64".into(), "teacher_steps=400".into()]
}

fn desk_config(extra: &[&str]) -> RunConfig {
    let mut o = desk_overrides();
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &o).expect("desk config")
}

// Gradient oracle suite.
fn criterion_1() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..4 {
        let cfg = desk_config(&[&format!("seed={seed}")]);
        let rows = e(commands::gradcheck(&cfg))?;
        let names: Vec<&str> = rows.iter().map(|r| r.component.as_str()).collect();
        ensure(names == GRADCHECK_COMPONENTS, format!("components {names:?}"))?;
        for r in &rows {
            ensure(
                r.max_rel_err < 1e-4,
                format!("{} rel err {:.3e} (seed {seed})", r.component, r.max_rel_err),
            )?;
            worst = worst.max(r.max_rel_err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "max rel err {worst:.2e} over 4 seeds x 5 components in {secs:.1}s"
    ))
}

fn recurrent_part<'t>(
    tape: &'t Tape,
    cell: &SlstmCell,
    h: xlstm_distill::tensor::Var<'t>,
) -> xlstm_distill::Result<xlstm_distill::tensor::Var<'t>> {
    h.matmul(tape.leaf(&cell.r).block_diag(4)?)
}

// Stabilizer suite.
fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let log_sigmoid = |x: f64| -(1.0 + (-x).exp()).ln();

    // (a) scalar recurrences: raw exponential gates vs the stabilized path.
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (mut c, mut n) = (0.0f64, 0.0f64);
        let (mut cs, mut ns, mut m) = (0.0f64, 0.0f64, None);
        for _ in 0..12 {
            let (it, ft, z): (f64, f64, f64) = (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..1.0),
            );
            let lf = log_sigmoid(ft);
            c = lf.exp() * c + it.exp() * z;
            n = lf.exp() * n + it.exp();
            let g = stabilize_gates(it, lf, m);
            cs = g.f * cs + g.i * z;
            ns = g.f * ns + g.i;
            m = Some(g.m);
            worst = worst.max((c / n - cs / ns).abs());
        }
    }
    ensure(
        worst < 1e-10,
        format!("scalar stabilized vs naive differ by {worst:.2e}"),
    )?;

    // (a) full cell with small inputs.
    // The default forget bias of 3 is zeroed to stay inside the ±2 range.
    let mut cell = e(SlstmCell::new(8, 2, ForgetGate::Sigmoid, &mut rng))?;
    cell.b.data_mut()[16..24].iter_mut().for_each(|v| *v = 0.0);
    let xs = e(Tensor::randn(&[6, 2, 8], 0.3, &mut rng))?;
    let tape = Tape::new();
    let mut s = e(SlstmState::zeros(&tape, 2, 8))?;
    let mut nv = e(NaiveSlstmState::zeros(&tape, 2, 8))?;
    let mut cell_worst = 0.0f64;
    for t in 0..6 {
        let x = e(tape.leaf(&xs).select(0, t))?;
        let pre = e(e(cell.input_projection(&tape, x))?.add(e(recurrent_part(&tape, &cell, s.h))?))?;
        let peak = pre.to_vec().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ensure(peak <= 2.0, format!("gate pre-activations reach {peak:.2}"))?;
        s = e(cell.step(&tape, x, s))?;
        nv = e(cell.naive_step(&tape, x, nv))?;
        for (a, b) in s.h.to_vec().iter().zip(nv.h.to_vec()) {
            cell_worst = cell_worst.max((a - b).abs());
        }
    }
    ensure(cell_worst < 1e-10, format!("cell outputs differ by {cell_worst:.2e}"))?;

    // (b) pre-activation 800.
    let (i_raw, _) = naive_gates(800.0, log_sigmoid(800.0));
    ensure(!i_raw.is_finite(), "naive input gate finite at 800")?;
    let g1 = stabilize_gates(800.0, log_sigmoid(800.0), None);
    let g2 = stabilize_gates(800.0, log_sigmoid(800.0), Some(g1.m));
    ensure(
        [g1.m, g1.i, g1.f, g2.m, g2.i, g2.f].iter().all(|v| v.is_finite()),
        "stabilized gates overflow",
    )?;
    let mut hot = cell.clone();
    hot.b.data_mut()[8..16].iter_mut().for_each(|v| *v = 800.0);
    let tape = Tape::new();
    let mut s = e(SlstmState::zeros(&tape, 2, 8))?;
    let mut nv = e(NaiveSlstmState::zeros(&tape, 2, 8))?;
    for t in 0..3 {
        let x = e(tape.leaf(&xs).select(0, t))?;
        s = e(hot.step(&tape, x, s))?;
        nv = e(hot.naive_step(&tape, x, nv))?;
    }
    ensure(
        s.h.to_vec().iter().all(|v| v.is_finite()),
        "stabilized cell went non-finite",
    )?;
    ensure(
        nv.h.to_vec().iter().any(|v| !v.is_finite()),
        "naive cell stayed finite at 800",
    )?;

    // (c) gate identities.
    let mut id_worst = 0.0f64;
    for _ in 0..10_000 {
        let it: f64 = rng.random_range(-20.0..20.0);
        let lf = log_sigmoid(rng.random_range(-20.0..20.0));
        let mp: f64 = rng.random_range(-20.0..20.0);
        let g = stabilize_gates(it, lf, Some(mp));
        let (i, f) = naive_gates(it, lf);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        id_worst = id_worst
            .max(rel(g.i * g.m.exp(), i))
            .max(rel(g.f * (g.m - mp).exp(), f));
    }
    ensure(id_worst < 1e-10, format!("gate identities off by {id_worst:.2e}"))?;
    Ok(format!(
        "scalar {worst:.1e}, cell {cell_worst:.1e}, identities {id_worst:.1e}; 800 overflows only the naive path"
    ))
}

// Schedule suite.
fn criterion_3() -> Check {
    let oracle = |a: f64, f: f64, k: usize| f + (a - f) / (1.0 + ((k + 1) as f64).ln());
    ensure(e(schedule_value(0.8, 0.5, 0))? == 0.8, "alpha(0) is not alpha_initial")?;
    let far = e(schedule_value(0.8, 0.5, 1_000_000))?;
    ensure((far - 0.5203).abs() < 1e-3, format!("alpha(1e6) = {far}"))?;
    ensure((far - oracle(0.8, 0.5, 1_000_000)).abs() < 1e-15, "formula mismatch")?;

    let cfg = desk_config(&["epochs=25", "synthetic_len=6000"]);
    let rows = e(commands::schedule(&cfg))?;
    let first = rows[0];
    ensure(
        (first.epoch, first.step, first.alpha_k, first.temp_k) == (1, 0, 0.8, 2.0),
        format!("first row {first:?}"),
    )?;
    for w in rows.windows(2) {
        if w[0].epoch == w[1].epoch {
            ensure(w[1].alpha_k <= w[0].alpha_k, "alpha increased within an epoch")?;
            ensure(w[1].temp_k <= w[0].temp_k, "temperature increased within an epoch")?;
        }
    }
    for r in &rows {
        let e1 = (r.epoch - 1) as f64;
        let a_anchor = (0.8 - 0.05 * e1).max(0.5);
        let t_anchor = (2.0 - 0.05 * e1).max(1.0);
        ensure(
            (r.alpha_k - oracle(a_anchor, 0.5, r.step)).abs() < 1e-12,
            format!("alpha at {r:?}"),
        )?;
        ensure(
            (r.temp_k - oracle(t_anchor, 1.0, r.step)).abs() < 1e-12,
            format!("temperature at {r:?}"),
        )?;
        if r.step == 0 {
            ensure(
                r.epoch < 7 || (r.alpha_k - 0.5).abs() < 1e-12,
                format!("alpha anchor not clamped at epoch {}", r.epoch),
            )?;
            ensure(
                r.epoch < 21 || (r.temp_k - 1.0).abs() < 1e-12,
                format!("temperature anchor not clamped at epoch {}", r.epoch),
            )?;
        }
    }
    let anchor6 = rows.iter().find(|r| r.epoch == 6 && r.step == 0).unwrap().alpha_k;
    ensure(anchor6 > 0.5, "alpha anchor reached the floor before epoch 7")?;
    Ok(format!(
        "alpha(1e6) = {far:.5}; {} schedule rows match the closed form",
        rows.len()
    ))
}

// Loss-identity suite.
fn criterion_4(off: &Run) -> Check {
    let mut worst = 0.0f64;
    for r in &off.logged {
        ensure(r.beta_k == 0.0, "beta not zero in the beta=0 run")?;
        let expect = (1.0 - r.alpha_k) * r.loss_ce + r.alpha_k * r.temp_k * r.temp_k * r.loss_kd;
        worst = worst.max((expect - r.loss_total).abs());
    }
    ensure(worst < 1e-9, format!("logged total off by {worst:.2e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::new();
    let (b, s, v, d) = (2, 3, 7, 5);
    let logits = tape.leaf(&e(Tensor::randn(&[b, s, v], 1.0, &mut rng))?);
    let other = tape.leaf(&e(Tensor::randn(&[b, s, v], 1.0, &mut rng))?);
    let hidden = tape.leaf(&e(Tensor::randn(&[b, s, d], 1.0, &mut rng))?);
    let targets: Vec<usize> = (0..b * s).map(|i| i % v).collect();
    let ce = e(cross_entropy(logits, &targets))?;
    let kd = e(kd_loss(other, logits, 2.0))?;
    let frob = e(frobenius_loss(e(hidden.scale(0.5).add(hidden.scale(0.5)))?, hidden))?;
    let none = DistillWeights {
        alpha: 0.0,
        temp: 2.0,
        beta: 0.0,
    };
    let collapsed = e(combined_loss(ce, kd, frob, &none, b * s * d, true))?.item();
    ensure(
        (collapsed - ce.item()).abs() < 1e-12,
        "alpha=beta=0 does not reduce to CE",
    )?;
    let self_kd = e(kd_loss(logits, logits, 2.0))?.item();
    ensure(self_kd.abs() < 1e-12, format!("KD of identical logits {self_kd:e}"))?;
    ensure(
        frob.item().abs() < 1e-12,
        format!("aligned Frobenius {:e}", frob.item()),
    )?;
    let uniform = e(tape.constant(&[b, s, v], vec![0.3; b * s * v]))?;
    let uce = e(cross_entropy(uniform, &targets))?.item();
    ensure((uce - (v as f64).ln()).abs() < 1e-9, format!("uniform CE {uce}"))?;
    Ok(format!(
        "{} logged steps reconstruct within {worst:.1e}",
        off.logged.len()
    ))
}

// Causality suite.
fn criterion_5(teacher: &Teacher) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (s, d) = (12, teacher.config.d_model);
    let attn = e(CausalSelfAttention::new(d, 6, 11, 0.5, &mut rng))?;
    let stack = e(build_stack(d, 2, 8, ForgetGate::Sigmoid, 5))?;
    let base = e(Tensor::randn(&[1, s, d], 1.0, &mut rng))?;
    let tokens: Vec<usize> = (0..s).map(|_| rng.random_range(1..teacher.config.vocab)).collect();
    type Fwd<'a> = Box<dyn Fn(&Tensor, &[usize]) -> Vec<f64> + 'a>;
    let components: Vec<(&str, Fwd)> = vec![
        (
            "attention",
            Box::new(|x: &Tensor, _: &[usize]| {
                let tape = Tape::new();
                attn.forward(&tape, tape.leaf(x)).unwrap().to_vec()
            }),
        ),
        (
            "student stack",
            Box::new(|x: &Tensor, _: &[usize]| {
                let tape = Tape::new();
                stack.forward(&tape, tape.leaf(x)).unwrap().to_vec()
            }),
        ),
        (
            "teacher",
            Box::new(|_: &Tensor, t: &[usize]| {
                let tape = Tape::new();
                teacher.forward(&tape, t, 1, t.len()).unwrap().logits.to_vec()
            }),
        ),
    ];
    let mut checked = 0;
    for (name, f) in &components {
        let reference = f(&base, &tokens);
        let width = reference.len() / s;
        for p in 1..s {
            let mut x = base.clone();
            x.data_mut()[p * d..].iter_mut().for_each(|v| *v += 3.0);
            let mut toks = tokens.clone();
            toks[p..]
                .iter_mut()
                .for_each(|t| *t = (*t % (teacher.config.vocab - 1)) + 1);
            let out = f(&x, &toks);
            ensure(
                out[p * width..] != reference[p * width..],
                format!("{name}: perturbation had no effect"),
            )?;
            ensure(
                out[..p * width] == reference[..p * width],
                format!("{name}: positions before {p} changed"),
            )?;
            checked += 1;
        }
    }
    Ok(format!("{checked} perturbations, earlier positions bitwise unchanged"))
}

struct Run {
    label: &'static str,
    dir: PathBuf,
    outcome: DistillOutcome,
    logged: Vec<MetricsRecord>,
    before: EvalReport,
    after: EvalReport,
}

fn epoch_means(records: &[MetricsRecord], f: impl Fn(&MetricsRecord) -> f64) -> Vec<f64> {
    let epochs = records.iter().map(|r| r.epoch).max().unwrap_or(0);
    (1..=epochs)
        .map(|ep| {
            let v: Vec<f64> = records.iter().filter(|r| r.epoch == ep).map(&f).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect()
}

fn frozen_matches_teacher(student: &Student, teacher: &Teacher) -> bool {
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let head_t = teacher.head.named_params();
    bits(&student.embedding) == bits(&teacher.embedding)
        && student
            .head
            .named_params()
            .iter()
            .zip(&head_t)
            .all(|((_, a), (_, b))| bits(a) == bits(b))
}

fn distill_run(root: &Path, teacher_ckpt: &Path, label: &'static str, extra: &[&str]) -> Result<Run, String> {
    let dir = root.join(label);
    let ckpt = format!("teacher_checkpoint=\"{}\"", teacher_ckpt.display());
    let mut args = vec![ckpt.as_str()];
    args.extend_from_slice(extra);
    let cfg = desk_config(&args);
    let outcome = e(commands::distill(&cfg, &dir))?;
    let logged = e(commands::read_jsonl(&dir.join(commands::METRICS_FILE)))?;
    let held = e(outcome.corpus.held_out_stream(&cfg))?;
    let before = e(evaluate(&outcome.teacher, &outcome.initial_student, &held))?;
    let after = e(commands::eval(&cfg, &dir))?;
    Ok(Run {
        label,
        dir,
        outcome,
        logged,
        before,
        after,
    })
}

fn end_to_end(run: &Run) -> Check {
    let v = run.outcome.teacher.config.vocab as f64;
    let tce = run.before.teacher_ce;
    ensure(
        tce < 0.7 * v.ln(),
        format!("teacher CE {tce:.3} >= 0.7 ln V = {:.3}", 0.7 * v.ln()),
    )?;
    let sc = run.outcome.student.config;
    ensure((sc.n_blocks, sc.n_heads) == (2, 8), format!("student shape {sc:?}"))?;
    let means = epoch_means(&run.logged, |r| r.loss_total);
    ensure(means.len() == 10, format!("{} epochs logged", means.len()))?;
    ensure(
        means.windows(2).all(|w| w[1] < w[0]),
        format!("[{}] epoch loss not strictly decreasing: {means:?}", run.label),
    )?;
    let (ce0, ce1) = (run.before.student_ce, run.after.student_ce);
    ensure(
        tce < ce0,
        format!("teacher CE {tce:.3} not below untrained student {ce0:.3}"),
    )?;
    ensure(
        ce1 < 0.9 * ce0,
        format!("[{}] student CE {ce1:.3} vs untrained {ce0:.3}", run.label),
    )?;
    let (kl0, kl1) = (run.before.kl_t1, run.after.kl_t1);
    ensure(
        kl1 < 0.5 * kl0,
        format!("[{}] KL {kl1:.3} vs step-0 {kl0:.3}", run.label),
    )?;
    ensure(
        frozen_matches_teacher(&run.outcome.student, &run.outcome.teacher),
        format!("[{}] frozen parameters changed in memory", run.label),
    )?;
    let mut saved = run.outcome.initial_student.clone();
    e(checkpoint::load_into(&mut saved, &run.dir.join(commands::STUDENT_FILE)))?;
    ensure(
        frozen_matches_teacher(&saved, &run.outcome.teacher),
        format!("[{}] frozen parameters changed in the checkpoint", run.label),
    )?;
    Ok(format!(
        "[{}] teacher CE {tce:.3} (< {:.3}); student CE {ce0:.3} -> {ce1:.3}; KL {kl0:.3} -> {kl1:.3}; loss/epoch {:.3} -> {:.3}",
        run.label,
        0.7 * v.ln(),
        means[0],
        means[means.len() - 1]
    ))
}

fn criterion_6(off: &Run) -> Check {
    end_to_end(off)
}

fn final_epoch_grad_norm(run: &Run) -> f64 {
    *epoch_means(&run.logged, |r| r.grad_norm).last().expect("epochs")
}

fn criterion_7(off: &Run, fixed: &Run, annealed: &Run) -> Check {
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    let g0 = final_epoch_grad_norm(off);
    for run in [fixed, annealed] {
        match end_to_end(run) {
            Ok(_) => {}
            Err(m) => failures.push(m),
        }
        let g = final_epoch_grad_norm(run);
        notes.push(format!("{} grad norm {g:.4}", run.label));
        if !(g < g0) {
            failures.push(format!(
                "[{}] final-epoch grad norm {g:.4} not below beta=0 {g0:.4}",
                run.label
            ));
        }
    }
    let summary = format!("beta=0 grad norm {g0:.4}; {}", notes.join(", "));
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join("; ")))
    }
}

// Sequence-length scaling.
fn criterion_8() -> Check {
    let cfg = desk_config(&["bench_repeats=3"]);
    let report = e(commands::benchmark(&cfg))?;
    let slope = |c: &str| {
        report
            .slopes
            .iter()
            .find(|s| s.component == c)
            .map(|s| s.slope)
            .unwrap()
    };
    let (att, stu) = (slope(commands::BENCH_ATTENTION), slope(commands::BENCH_STUDENT));
    let lens: Vec<usize> = report.rows.iter().map(|r| r.seq_len).collect();
    ensure(
        lens.iter().all(|l| [128, 256, 512, 1024].contains(l)),
        "unexpected lengths",
    )?;
    let msg = format!("attention slope {att:.3}, xLSTM stack slope {stu:.3}");
    ensure((1.6..=2.4).contains(&att) && (0.8..=1.3).contains(&stu), msg.clone())?;
    Ok(msg)
}

// Determinism.
fn criterion_9(off: &Run, repeat: &Run) -> Check {
    let strip = |rs: &[MetricsRecord]| {
        rs.iter()
            .map(|r| MetricsRecord {
                wall_ms: 0.0,
                ..r.clone()
            })
            .map(|r| serde_json::to_string(&r).unwrap())
            .collect::<Vec<_>>()
    };
    ensure(
        strip(&off.logged) == strip(&repeat.logged),
        "metrics differ between identical runs",
    )?;
    let a = e(std::fs::read(off.dir.join(commands::STUDENT_FILE)))?;
    let b = e(std::fs::read(repeat.dir.join(commands::STUDENT_FILE)))?;
    ensure(a == b, "student checkpoints differ")?;
    Ok(format!(
        "{} metric lines and {} checkpoint bytes identical",
        off.logged.len(),
        a.len()
    ))
}

fn report(n: usize, name: &str, result: Check) -> bool {
    match result {
        Ok(detail) => {
            println!("criterion {n} ({name}): PASS  {detail}");
            true
        }
        Err(detail) => {
            println!("criterion {n} ({name}): FAIL  {detail}");
            false
        }
    }
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

struct Runs {
    off: Run,
    fixed: Run,
    annealed: Run,
    repeat: Run,
}

fn all_runs(root: &Path, teacher_ckpt: &Path) -> Result<Runs, String> {
    Ok(Runs {
        off: distill_run(root, teacher_ckpt, "beta_off", &[])?,
        fixed: distill_run(root, teacher_ckpt, "beta_fixed", &["beta_mode=fixed"])?,
        annealed: distill_run(root, teacher_ckpt, "beta_annealed", &["beta_mode=annealed"])?,
        repeat: distill_run(root, teacher_ckpt, "beta_off_repeat", &[])?,
    })
}

/// Criterion numbers given on the command line select a subset; none
/// selects all. The shared teacher and runs are built only when needed.
fn main() {
    let start = Instant::now();
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let root = root();
    let teacher_dir = root.join("teacher");
    let teacher_ckpt = teacher_dir.join(commands::TEACHER_FILE);
    let pretrained = std::cell::OnceCell::new();
    let teacher =
        || pretrained.get_or_init(|| commands::pretrain(&desk_config(&[]), &teacher_dir).map_err(|e| e.to_string()));
    let runs = std::cell::OnceCell::new();
    let runs = || {
        runs.get_or_init(|| {
            teacher()
                .as_ref()
                .map_err(|m| format!("teacher pretraining failed: {m}"))?;
            all_runs(&root, &teacher_ckpt).map_err(|m| format!("distillation run failed: {m}"))
        })
    };
    let with_runs = |f: &dyn Fn(&Runs) -> Check| match runs() {
        Ok(r) => guarded(|| f(r)),
        Err(m) => Err(m.clone()),
    };

    let criteria: [(usize, &str, &dyn Fn() -> Check); 9] = [
        (1, "gradient oracle", &|| guarded(criterion_1)),
        (2, "stabilizers", &|| guarded(criterion_2)),
        (3, "schedule", &|| guarded(criterion_3)),
        (4, "loss identities", &|| with_runs(&|r| criterion_4(&r.off))),
        (5, "causality", &|| match teacher() {
            Ok(p) => guarded(|| criterion_5(&p.teacher)),
            Err(m) => Err(format!("teacher pretraining failed: {m}")),
        }),
        (6, "end-to-end distillation", &|| with_runs(&|r| criterion_6(&r.off))),
        (7, "frobenius variant", &|| {
            with_runs(&|r| criterion_7(&r.off, &r.fixed, &r.annealed))
        }),
        (8, "scaling benchmark", &|| guarded(criterion_8)),
        (9, "determinism", &|| with_runs(&|r| criterion_9(&r.off, &r.repeat))),
    ];
    let mut ok = Vec::new();
    for (n, name, f) in criteria {
        if wanted(n) {
            ok.push(report(n, name, f()));
        }
    }

    let passed = ok.iter().filter(|&&b| b).count();
    println!(
        "acceptance: {passed}/{} passed in {:.0}s",
        ok.len(),
        start.elapsed().as_secs_f64()
    );
    if passed != ok.len() {
        std::process::exit(1);
    }
}
