//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, UnaryKind, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged by absolute error instead.
    pub rel_floor: f64,
    /// Optional corrupted backward rule (negative control).
    pub fault: Option<(UnaryKind, f64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            rel_floor: 1e-6,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub shape: Vec<usize>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

fn scalar_output(out: Var<'_>) -> Result<f64> {
    if out.numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar output, got {:?}",
            out.shape()
        )));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("checked function returned {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of `f` at `params` against central differences.
///
/// Every entry of every parameter is perturbed, so keep the inputs tiny.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut work: Vec<Tensor> = params.iter().map(|p| p.clone().with_grad(true)).collect();
    finite_difference_check_state(
        &mut work,
        |w| w.iter_mut().collect(),
        |tape, w| {
            let vars: Vec<Var<'_>> = w.iter().map(|p| tape.leaf(p)).collect();
            f(tape, &vars)
        },
        config,
    )
}

/// Gradient check over tensors owned by some state (typically a model), so
/// the state's own forward pass is what gets differentiated.
///
/// Only tensors that require gradients are checked.
pub fn finite_difference_check_state<S, P, F>(
    state: &mut S,
    params: P,
    f: F,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    P: Fn(&mut S) -> Vec<&mut Tensor>,
    F: for<'t, 's> Fn(&'t Tape, &'s S) -> Result<Var<'t>>,
{
    if !(config.step > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {}",
            config.step
        )));
    }

    let analytic: Vec<Option<Vec<f64>>> = {
        let tape = Tape::new();
        if let Some((kind, factor)) = config.fault {
            tape.inject_fault(kind, factor);
        }
        let out = f(&tape, state)?;
        scalar_output(out)?;
        let grads = tape.backward(out)?;
        params(state)
            .into_iter()
            .map(|p| {
                p.requires_grad()
                    .then(|| grads.of(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
            })
            .collect()
    };

    let eval = |s: &S| -> Result<f64> {
        let tape = Tape::new();
        scalar_output(f(&tape, s)?)
    };

    let mut checks = Vec::new();
    for (pi, analytic) in analytic.iter().enumerate() {
        let Some(analytic) = analytic else { continue };
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = params(state)[pi].data()[j];
            params(state)[pi].data_mut()[j] = orig + config.step;
            let plus = eval(state)?;
            params(state)[pi].data_mut()[j] = orig - config.step;
            let minus = eval(state)?;
            params(state)[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(config.rel_floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        checks.push(ParamCheck {
            index: pi,
            shape: params(state)[pi].shape().to_vec(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err <= config.tol,
        params: checks,
        max_rel_err,
        tol: config.tol,
    })
}
