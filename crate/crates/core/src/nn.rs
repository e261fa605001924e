//! Small layer building blocks shared by the teacher and the student.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{finite_difference_check_state, Fill, GradCheckConfig, GradCheckReport, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Anything that owns named trainable or frozen tensors.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn trainable_param_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(trainable);
        }
    }
}

/// Finite-difference check of every trainable tensor of `model`, with `f`
/// running the model's own forward pass.
pub fn check_module_gradients<M, F>(model: &mut M, f: F, config: GradCheckConfig) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: for<'t, 's> Fn(&'t Tape, &'s M) -> Result<Var<'t>>,
{
    finite_difference_check_state(
        model,
        |m| m.named_params_mut().into_iter().map(|(_, t)| t).collect(),
        f,
        config,
    )
}

pub(crate) fn prefixed<'a, T>(prefix: &str, items: Vec<(String, T)>) -> impl Iterator<Item = (String, T)> + 'a
where
    T: 'a,
{
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Tensor> {
    Ok(Tensor::randn(shape, std, rng)?.with_grad(true))
}

pub(crate) fn filled(shape: &[usize], v: f64) -> Result<Tensor> {
    Tensor::new(shape, Fill::Scalar(v), true)
}

/// Affine map `x·W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            weight: normal(&[d_in, d_out], std, rng)?,
            bias: filled(&[d_out], 0.0)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(tape.leaf(&self.weight))?.add_row(tape.leaf(&self.bias))
    }
}

impl Parameterized for Linear {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Normalisation over the last axis with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: filled(&[d], 1.0)?,
            bias: filled(&[d], 0.0)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        layer_norm(x, tape.leaf(&self.gain), tape.leaf(&self.bias))
    }
}

impl Parameterized for LayerNorm {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("gain".into(), &self.gain), ("bias".into(), &self.bias)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("gain".into(), &mut self.gain), ("bias".into(), &mut self.bias)]
    }
}

pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let d = *shape.last().expect("layer norm input has at least one axis");
    let rows = x.numel() / d;
    let x2 = x.reshape(&[rows, d])?;
    let mu = x2.mean_axis(1)?;
    let centered = x2.sub_col(mu)?;
    let inv_std = centered.square().mean_axis(1)?.add_scalar(LAYER_NORM_EPS).powf(-0.5);
    centered.mul_col(inv_std)?.mul_row(gain)?.add_row(bias)?.reshape(&shape)
}

/// tanh approximation of GELU.
pub fn gelu<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = x.add(x.square().mul(x)?.scale(0.044715))?.scale(c);
    Ok(x.mul(inner.tanh().add_scalar(1.0))?.scale(0.5))
}
