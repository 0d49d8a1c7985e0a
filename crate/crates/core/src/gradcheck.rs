//! Finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Param, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    Central,
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    pub stencil: Stencil,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            stencil: Stencil::Central,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

fn eval_loss<F>(f: &mut F, params: &[Param]) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Param]) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    Ok(g.value(loss).item())
}

/// Compares analytic gradients of the scalar built by `f` with finite
/// differences, perturbing every element of every trainable parameter.
///
/// `f` must be deterministic: any stochastic inputs have to be fixed by the
/// caller. Mismatches are reported, not raised; errors only come from `f`.
pub fn check_gradients<F>(params: &mut [Param], mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Param]) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let base = g.value(loss).item();
    g.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = params
        .iter()
        .map(|p| {
            p.trainable.then(|| {
                g.param_grad(p.id())
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.numel()])
            })
        })
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        tol: opts.tol,
        params: Vec::new(),
    };
    for (pi, grad) in analytic.into_iter().enumerate() {
        let Some(grad) = grad else { continue };
        let mut check = ParamCheck {
            name: params[pi].name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for (i, &a) in grad.iter().enumerate() {
            let orig = params[pi].value.data()[i];
            let numeric = match opts.stencil {
                Stencil::Central => {
                    params[pi].value.data_mut()[i] = orig + opts.eps;
                    let up = eval_loss(&mut f, params)?;
                    params[pi].value.data_mut()[i] = orig - opts.eps;
                    let down = eval_loss(&mut f, params)?;
                    (up - down) / (2.0 * opts.eps)
                }
                Stencil::Forward => {
                    params[pi].value.data_mut()[i] = orig + opts.eps;
                    (eval_loss(&mut f, params)? - base) / opts.eps
                }
                Stencil::Backward => {
                    params[pi].value.data_mut()[i] = orig - opts.eps;
                    (base - eval_loss(&mut f, params)?) / opts.eps
                }
            };
            params[pi].value.data_mut()[i] = orig;
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            check.max_abs_error = check.max_abs_error.max(abs);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
