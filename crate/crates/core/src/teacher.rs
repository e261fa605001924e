//! Pre-norm causal transformer used as the distillation teacher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::BatchStream;
use crate::distill::losses::cross_entropy;
use crate::error::{Error, Result};
use crate::nn::{gelu, normal, prefixed, LayerNorm, Linear, Parameterized};
use crate::optim::{clip_grad_norm, lr_at, Adam, LrSchedule};
use crate::tensor::{Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Which per-layer activation is recorded for hidden-state alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureMode {
    /// Full block output, after the feed-forward sublayer.
    #[default]
    Block,
    /// Residual stream right after the attention sublayer.
    Attention,
}

impl std::str::FromStr for CaptureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "block" => Ok(CaptureMode::Block),
            "attention" => Ok(CaptureMode::Attention),
            other => Err(format!("unknown capture mode `{other}` (expected block or attention)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub capture: CaptureMode,
}

impl TeacherConfig {
    /// Per-head width `ceil(D / H)`; heads are concatenated to `H·d_k`
    /// before the output projection.
    pub fn head_dim(&self) -> usize {
        self.d_model.div_ceil(self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Multi-head causal self-attention without the surrounding norm/residual.
#[derive(Debug, Clone)]
pub struct CausalSelfAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    heads: usize,
    head_dim: usize,
}

impl CausalSelfAttention {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, head_dim: usize, out_std: f64, rng: &mut R) -> Result<Self> {
        let inner = heads * head_dim;
        Ok(CausalSelfAttention {
            w_q: Linear::new(d, inner, INIT_STD, rng)?,
            w_k: Linear::new(d, inner, INIT_STD, rng)?,
            w_v: Linear::new(d, inner, INIT_STD, rng)?,
            w_o: Linear::new(inner, d, out_std, rng)?,
            heads,
            head_dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Returns the projected output `[B, S, D]` and the attention weights
    /// `[B·H, S, S]`.
    pub fn forward_with_probs<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.w_q.weight.shape()[0] {
            return Err(Error::shape(format!(
                "attention input {shape:?}, expected [B, S, {}]",
                self.w_q.weight.shape()[0]
            )));
        }
        let (b, s) = (shape[0], shape[1]);
        let (h, dk) = (self.heads, self.head_dim);
        let split = |y: Var<'t>| -> Result<Var<'t>> {
            y.reshape(&[b, s, h, dk])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, s, dk])
        };
        let q = split(self.w_q.forward(tape, x)?)?;
        let k = split(self.w_k.forward(tape, x)?)?;
        let v = split(self.w_v.forward(tape, x)?)?;
        let scores = q.bmm(k, false, true)?.scale(1.0 / (dk as f64).sqrt()).causal_mask()?;
        let probs = scores.softmax_rows(1.0)?;
        let heads = probs
            .bmm(v, false, false)?
            .reshape(&[b, h, s, dk])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, s, h * dk])?;
        Ok((self.w_o.forward(tape, heads)?, probs))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_probs(tape, x)?.0)
    }
}

impl Parameterized for CausalSelfAttention {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        prefixed("w_q", self.w_q.named_params())
            .chain(prefixed("w_k", self.w_k.named_params()))
            .chain(prefixed("w_v", self.w_v.named_params()))
            .chain(prefixed("w_o", self.w_o.named_params()))
            .collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed("w_q", self.w_q.named_params_mut())
            .chain(prefixed("w_k", self.w_k.named_params_mut()))
            .chain(prefixed("w_v", self.w_v.named_params_mut()))
            .chain(prefixed("w_o", self.w_o.named_params_mut()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: CausalSelfAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerLayer {
    /// Returns `(post-attention residual, block output)`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let a = x.add(self.attn.forward(tape, self.ln1.forward(tape, x)?)?)?;
        let hidden = gelu(self.ff1.forward(tape, self.ln2.forward(tape, a)?)?)?;
        let out = a.add(self.ff2.forward(tape, hidden)?)?;
        Ok((a, out))
    }
}

impl Parameterized for TransformerLayer {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        prefixed("ln1", self.ln1.named_params())
            .chain(prefixed("attn", self.attn.named_params()))
            .chain(prefixed("ln2", self.ln2.named_params()))
            .chain(prefixed("ff1", self.ff1.named_params()))
            .chain(prefixed("ff2", self.ff2.named_params()))
            .collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed("ln1", self.ln1.named_params_mut())
            .chain(prefixed("attn", self.attn.named_params_mut()))
            .chain(prefixed("ln2", self.ln2.named_params_mut()))
            .chain(prefixed("ff1", self.ff1.named_params_mut()))
            .chain(prefixed("ff2", self.ff2.named_params_mut()))
            .collect()
    }
}

/// Final normalisation plus vocabulary projection; shared in shape with
/// the student so it can be copied over.
#[derive(Debug, Clone)]
pub struct LmHead {
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl LmHead {
    pub fn forward<'t>(&self, tape: &'t Tape, h: Var<'t>) -> Result<Var<'t>> {
        self.proj.forward(tape, self.norm.forward(tape, h)?)
    }
}

impl Parameterized for LmHead {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        prefixed("norm", self.norm.named_params())
            .chain(prefixed("proj", self.proj.named_params()))
            .collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed("norm", self.norm.named_params_mut())
            .chain(prefixed("proj", self.proj.named_params_mut()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub config: TeacherConfig,
    pub embedding: Tensor,
    pub positions: Tensor,
    pub layers: Vec<TransformerLayer>,
    pub head: LmHead,
}

/// Logits `[B, S, V]` plus one captured state `[B, S, D]` per layer.
#[derive(Debug, Clone)]
pub struct TeacherOutput<'t> {
    pub logits: Var<'t>,
    pub capture: Vec<Var<'t>>,
}

/// Embeds `[B, S]` token ids through a `[V, D]` table.
pub fn embed<'t>(tape: &'t Tape, table: &Tensor, tokens: &[usize], batch: usize, seq: usize) -> Result<Var<'t>> {
    if tokens.len() != batch * seq {
        return Err(Error::shape(format!("{} token ids for [{batch}, {seq}]", tokens.len())));
    }
    let d = table.shape()[1];
    tape.leaf(table).gather_rows(tokens)?.reshape(&[batch, seq, d])
}

impl Teacher {
    pub fn new(config: TeacherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (config.d_model, config.vocab);
        let out_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let embedding = normal(&[v, d], INIT_STD, &mut rng)?;
        let positions = normal(&[config.max_seq, d], INIT_STD, &mut rng)?;
        let layers = (0..config.n_layers)
            .map(|_| {
                Ok(TransformerLayer {
                    ln1: LayerNorm::new(d)?,
                    attn: CausalSelfAttention::new(d, config.n_heads, config.head_dim(), out_std, &mut rng)?,
                    ln2: LayerNorm::new(d)?,
                    ff1: Linear::new(d, 4 * d, INIT_STD, &mut rng)?,
                    ff2: Linear::new(4 * d, d, out_std, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = LmHead {
            norm: LayerNorm::new(d)?,
            proj: Linear::new(d, v, INIT_STD, &mut rng)?,
        };
        Ok(Teacher {
            config,
            embedding,
            positions,
            layers,
            head,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, tokens: &[usize], batch: usize, seq: usize) -> Result<TeacherOutput<'t>> {
        if seq == 0 || seq > self.config.max_seq {
            return Err(Error::shape(format!(
                "sequence length {seq} outside 1..={}",
                self.config.max_seq
            )));
        }
        let pos = tape.leaf(&self.positions).narrow(0, 0, seq)?;
        let mut x = embed(tape, &self.embedding, tokens, batch, seq)?.add_row(pos)?;
        let mut capture = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, out) = layer.forward(tape, x)?;
            capture.push(match self.config.capture {
                CaptureMode::Block => out,
                CaptureMode::Attention => a,
            });
            x = out;
        }
        Ok(TeacherOutput {
            logits: self.head.forward(tape, x)?,
            capture,
        })
    }
}

impl Parameterized for Teacher {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding),
            ("positions".to_string(), &self.positions),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(prefixed(&format!("layers.{l}"), layer.named_params()));
        }
        out.extend(prefixed("head", self.head.named_params()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("embedding".to_string(), &mut self.embedding),
            ("positions".to_string(), &mut self.positions),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(prefixed(&format!("layers.{l}"), layer.named_params_mut()));
        }
        out.extend(prefixed("head", self.head.named_params_mut()));
        out
    }
}

/// Mean over the layer axis of the stacked `[L·B, S, D]` capture.
pub fn layerwise_mean_hidden<'t>(capture: &[Var<'t>]) -> Result<Var<'t>> {
    let first = capture
        .first()
        .ok_or_else(|| Error::invalid("empty hidden-state capture"))?;
    let shape = first.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("captured state {shape:?}, expected [B, S, D]")));
    }
    let stacked = Var::concat(capture, 0)?;
    let l = capture.len();
    stacked
        .reshape(&[l, shape[0] * shape[1] * shape[2]])?
        .mean_axis(0)?
        .reshape(&shape)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub schedule: LrSchedule,
    pub clip: Option<f64>,
}

/// Next-token cross-entropy training for `steps` optimizer steps over
/// repeated epochs of `stream`. Returns the per-step loss trace.
pub fn pretrain_teacher(teacher: &mut Teacher, stream: &BatchStream, opts: &PretrainOptions) -> Result<Vec<f64>> {
    if stream.context() > teacher.config.max_seq {
        return Err(Error::config(
            "context_size",
            format!(
                "{} exceeds teacher max_seq {}",
                stream.context(),
                teacher.config.max_seq
            ),
        ));
    }
    if stream.batches_per_epoch() == 0 && opts.steps > 0 {
        return Err(Error::config("batch_size", "corpus yields no full batch"));
    }
    let mut opt = Adam::default();
    let mut trace = Vec::with_capacity(opts.steps);
    let mut epoch = 0;
    while trace.len() < opts.steps {
        for (_, batch) in stream.epoch(epoch) {
            if trace.len() == opts.steps {
                break;
            }
            teacher.zero_grad();
            let loss = {
                let tape = Tape::new();
                let out = teacher.forward(&tape, &batch.inputs, batch.batch, batch.seq)?;
                let loss = cross_entropy(out.logits, &batch.targets)?;
                let value = loss.item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "teacher loss {value} at step {}",
                        trace.len()
                    )));
                }
                let grads = tape.backward(loss)?;
                grads.accumulate_into(teacher.named_params_mut().into_iter().map(|(_, t)| t))?;
                value
            };
            let mut params: Vec<&mut Tensor> = teacher.named_params_mut().into_iter().map(|(_, t)| t).collect();
            if let Some(c) = opts.clip {
                clip_grad_norm(&mut params, c);
            }
            let lr = lr_at(opts.lr, opts.schedule, opts.warmup_ratio, trace.len(), opts.steps);
            opt.step(&mut params, lr)?;
            trace.push(loss);
        }
        epoch += 1;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::nn::check_module_gradients;
    use crate::tensor::GradCheckConfig;

    fn tiny(layers: usize, d: usize, heads: usize) -> TeacherConfig {
        TeacherConfig {
            vocab: 7,
            d_model: d,
            n_layers: layers,
            n_heads: heads,
            max_seq: 8,
            capture: CaptureMode::Block,
        }
    }

    fn attention(seed: u64) -> CausalSelfAttention {
        CausalSelfAttention::new(6, 2, 3, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn single_token_attention_returns_values() {
        let a = attention(0);
        let tape = Tape::new();
        let x = tape.constant(&[1, 1, 6], vec![0.3, -0.1, 0.2, 0.9, -0.5, 0.4]).unwrap();
        let out = a.forward(&tape, x).unwrap().to_vec();
        let v = a.w_v.forward(&tape, x).unwrap();
        let want = a.w_o.forward(&tape, v).unwrap().to_vec();
        for (p, q) in out.iter().zip(&want) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scores_give_running_mean_of_values() {
        let mut a = attention(1);
        a.w_q.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        a.w_k.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 4, 6], 1.0, &mut rng).unwrap();
        let tape = Tape::new();
        let xv = tape.leaf(&x);
        let (_, probs) = a.forward_with_probs(&tape, xv).unwrap();
        let p = probs.to_vec();
        for head in 0..2 {
            for t in 0..4 {
                for j in 0..4 {
                    let want = if j <= t { 1.0 / (t + 1) as f64 } else { 0.0 };
                    assert!((p[head * 16 + t * 4 + j] - want).abs() < 1e-15);
                }
            }
        }
        let out = a.forward(&tape, xv).unwrap().to_vec();
        let v = a.w_v.forward(&tape, xv).unwrap().to_vec();
        let mut mean = vec![0.0; 4 * 6];
        for t in 0..4 {
            for u in 0..6 {
                mean[t * 6 + u] = (0..=t).map(|j| v[j * 6 + u]).sum::<f64>() / (t + 1) as f64;
            }
        }
        let want = a
            .w_o
            .forward(&tape, tape.constant(&[1, 4, 6], mean).unwrap())
            .unwrap()
            .to_vec();
        for (p, q) in out.iter().zip(&want) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn capture_shapes_and_determinism() {
        let t = Teacher::new(tiny(3, 8, 3), 0).unwrap();
        let tokens = vec![1, 2, 3, 4, 5, 6, 0, 1];
        let tape = Tape::new();
        let a = t.forward(&tape, &tokens, 2, 4).unwrap();
        let b = t.forward(&tape, &tokens, 2, 4).unwrap();
        assert_eq!(a.capture.len(), 3);
        assert!(a.capture.iter().all(|c| c.shape() == vec![2, 4, 8]));
        assert_eq!(a.logits.shape(), vec![2, 4, 7]);
        assert!(a.logits.value().is_finite());
        let bits = |v: Var<'_>| v.to_vec().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.logits), bits(b.logits));
        assert!(t.forward(&tape, &[1, 9], 1, 2).is_err());
        assert!(t.forward(&tape, &[1; 9], 1, 9).is_err());
    }

    #[test]
    fn layerwise_mean_cases() {
        let tape = Tape::new();
        let x = tape.constant(&[1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(layerwise_mean_hidden(&[x]).unwrap().to_vec(), x.to_vec());
        assert_eq!(layerwise_mean_hidden(&[x, x, x]).unwrap().to_vec(), x.to_vec());
        assert_eq!(layerwise_mean_hidden(&[x, x.neg()]).unwrap().to_vec(), vec![0.0; 4]);
        assert!(layerwise_mean_hidden(&[]).is_err());
    }

    #[test]
    fn forward_gradients_on_tiny_config() {
        let mut t = Teacher::new(tiny(2, 16, 2), 3).unwrap();
        // Larger attention weights so the softmax is far from uniform.
        for l in &mut t.layers {
            l.attn.w_o.weight.data_mut().iter_mut().for_each(|v| *v *= 20.0);
            l.attn.w_q.weight.data_mut().iter_mut().for_each(|v| *v *= 20.0);
            l.attn.w_k.weight.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
        let tokens = vec![1, 4, 2, 6];
        let targets = vec![4, 2, 6, 3];
        let report = check_module_gradients(
            &mut t,
            |tape, t| {
                let out = t.forward(tape, &tokens, 1, 4)?;
                let h = layerwise_mean_hidden(&out.capture)?;
                cross_entropy(out.logits, &targets)?.add(h.square().mean())
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:#?}");
    }

    #[test]
    fn zero_steps_leave_the_model_unchanged() {
        let mut t = Teacher::new(tiny(1, 8, 2), 4).unwrap();
        let before: Vec<Vec<f64>> = t.named_params().iter().map(|(_, p)| p.data().to_vec()).collect();
        let stream = BatchStream::new((0..50).map(|i| i % 7).collect(), 4, 2, 0).unwrap();
        let opts = PretrainOptions {
            steps: 0,
            lr: 1e-2,
            warmup_ratio: 0.0,
            schedule: LrSchedule::Constant,
            clip: None,
        };
        assert!(pretrain_teacher(&mut t, &stream, &opts).unwrap().is_empty());
        let after: Vec<Vec<f64>> = t.named_params().iter().map(|(_, p)| p.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn learns_an_alternating_sequence() {
        let mut t = Teacher::new(
            TeacherConfig {
                vocab: 3,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                max_seq: 8,
                capture: CaptureMode::Block,
            },
            5,
        )
        .unwrap();
        let tokens: Vec<usize> = (0..400).map(|i| 1 + i % 2).collect();
        let stream = BatchStream::new(tokens, 8, 4, 1).unwrap();
        let opts = PretrainOptions {
            steps: 200,
            lr: 1e-2,
            warmup_ratio: 0.05,
            schedule: LrSchedule::Cosine,
            clip: Some(1.0),
        };
        let trace = pretrain_teacher(&mut t, &stream, &opts).unwrap();
        assert!(*trace.last().unwrap() < 0.1, "final loss {}", trace.last().unwrap());
        assert!(trace[..20].iter().sum::<f64>() > trace[trace.len() - 20..].iter().sum::<f64>());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn causal_at_every_depth(seed in 0u64..1000, pos in 1usize..6, tok in 0usize..7) {
            let t = Teacher::new(tiny(3, 8, 2), seed).unwrap();
            let base: Vec<usize> = (0..6).map(|i| (i * 3 + seed as usize) % 7).collect();
            let mut pert = base.clone();
            pert[pos] = tok;
            let tape = Tape::new();
            let a = t.forward(&tape, &base, 1, 6).unwrap();
            let b = t.forward(&tape, &pert, 1, 6).unwrap();
            for (ca, cb) in a.capture.iter().zip(&b.capture) {
                prop_assert_eq!(&ca.to_vec()[..pos * 8], &cb.to_vec()[..pos * 8]);
            }
            prop_assert_eq!(&a.logits.to_vec()[..pos * 7], &b.logits.to_vec()[..pos * 7]);
        }

        #[test]
        fn attention_rows_sum_to_one(seed in 0u64..1000, s in 1usize..6) {
            let a = attention(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[2, s, 6], 3.0, &mut rng).unwrap();
            let tape = Tape::new();
            let (_, p) = a.forward_with_probs(&tape, tape.leaf(&x)).unwrap();
            for row in p.to_vec().chunks(s) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
