//! Central finite-difference checks of reverse-mode gradients, in f64.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    /// Differences at or below this always pass.
    pub abs_floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-5,
            rel: 1e-6,
            abs_floor: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// Largest `|a - n| / max(|a|, |n|)` among elements above the floor.
    pub max_rel_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    if !g.shape(loss).is_empty() {
        return Err(Error::Contract("gradient check needs a scalar loss".into()));
    }
    Ok((g, vars, loss))
}

/// Compares autodiff gradients of the scalar `f(inputs)` against central
/// differences for every element of every input that requires a gradient.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, tol: Tolerance) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, loss) = eval(inputs, &f)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        mismatches: Vec::new(),
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = grads.get(vars[i]).expect("leaf gradient").to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let x = input.data()[j];
            let mut at = |v: f64| -> Result<f64> {
                probe[i].data_mut()[j] = v;
                let (g, _, l) = eval(&probe, &f)?;
                Ok(g.value(l)[0])
            };
            let numeric = (at(x + tol.step)? - at(x - tol.step)?) / (2.0 * tol.step);
            probe[i].data_mut()[j] = x;
            report.checked += 1;
            let diff = (a - numeric).abs();
            if diff <= tol.abs_floor {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tol.rel {
                report.mismatches.push(Mismatch {
                    input: i,
                    element: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
