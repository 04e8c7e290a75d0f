//! Central finite-difference gradient verification.
//!
//! The numeric side only ever calls the forward function, so it stays
//! independent of every backward rule it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Which elements of each input get perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elements {
    All,
    /// At most `per_tensor` randomly chosen elements per input tensor.
    Sample { per_tensor: usize, seed: u64 },
}

/// Worst element found by a check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Worst {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements left out because their perturbation crossed a kink.
    pub skipped: usize,
    pub worst: Option<Worst>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    /// Combines two reports, keeping the worst element.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let (checked, skipped) = (self.checked + other.checked, self.skipped + other.skipped);
        let mut out = if other.max_rel_error > self.max_rel_error { other } else { self };
        out.checked = checked;
        out.skipped = skipped;
        out
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
            worst: None,
        }
    }
}

fn selected(len: usize, elements: Elements, input: usize) -> Vec<usize> {
    match elements {
        Elements::All => (0..len).collect(),
        Elements::Sample { per_tensor, seed } if per_tensor < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (input as u64).wrapping_mul(0x9E37_79B9));
            rand::seq::index::sample(&mut rng, len, per_tensor).into_vec()
        }
        Elements::Sample { .. } => (0..len).collect(),
    }
}

/// Compares `analytic[i]` (the gradient of scalar `f` with respect to
/// `inputs[i]`) against central differences `(f(x+eps) - f(x-eps)) / 2eps`.
pub fn finite_difference_gradient<F>(
    f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    eps: f64,
    elements: Elements,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (i, grad) in analytic.iter().enumerate() {
        for e in selected(inputs[i].len(), elements, i) {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + eps;
            let plus = f(&work)?;
            work[i].data_mut()[e] = orig - eps;
            let minus = f(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grad[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Worst {
                    input: i,
                    element: e,
                    analytic: grad[e],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// [`finite_difference_gradient`] for piecewise-smooth functions. `f` also
/// returns its branch pattern (see [`Tape::branch_pattern`]); an element whose
/// `+eps` or `-eps` evaluation lands on a different piece than the
/// unperturbed point straddles a kink and is skipped.
pub fn finite_difference_gradient_piecewise<F>(
    f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    eps: f64,
    elements: Elements,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<u32>)>,
{
    let base = f(inputs)?.1;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (i, grad) in analytic.iter().enumerate() {
        for e in selected(inputs[i].len(), elements, i) {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + eps;
            let (plus, p_plus) = f(&work)?;
            work[i].data_mut()[e] = orig - eps;
            let (minus, p_minus) = f(&work)?;
            work[i].data_mut()[e] = orig;
            if p_plus != base || p_minus != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grad[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Worst {
                    input: i,
                    element: e,
                    analytic: grad[e],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Reduces a tape node to a scalar via a fixed linear projection so that
/// ops with tensor outputs can be checked.
pub fn project_to_scalar<'p>(tape: &mut Tape<'p, f64>, y: Var, projection: &[f64]) -> Result<Var> {
    let n = tape.value(y).len();
    let flat = tape.reshape(y, &[1, n])?;
    let w = tape.constant(Tensor::new(&[n, 1], projection.to_vec())?);
    let b = tape.constant(Tensor::zeros(&[1])?);
    let s = tape.linear(flat, w, b)?;
    tape.reshape(s, &[1])
}

/// Checks a tape operation end to end: builds the op on fresh tapes, projects
/// its output with random fixed weights, and compares backprop against
/// central differences for every input.
///
/// `negate_analytic` flips the sign of the analytic gradient; it exists so the
/// harness itself can be shown to catch a wrong backward rule.
pub fn check_tape_op<B>(
    inputs: &[Tensor<f64>],
    eps: f64,
    elements: Elements,
    seed: u64,
    negate_analytic: bool,
    build: B,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
        let y = build(&mut tape, &vars)?;
        tape.value(y).len()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let y = build(&mut tape, &vars)?;
    let loss = if tape.value(y).len() == 1 && out_len == 1 {
        tape.reshape(y, &[1])?
    } else {
        project_to_scalar(&mut tape, y, &projection)?
    };
    tape.backward(loss)?;
    let sign = if negate_analytic { -1.0 } else { 1.0 };
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.iter().map(|x| sign * x).collect())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let forward = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.input(t)).collect();
        let y = build(&mut tape, &vars)?;
        let s = if out_len == 1 {
            tape.reshape(y, &[1])?
        } else {
            project_to_scalar(&mut tape, y, &projection)?
        };
        Ok(tape.value(s).item())
    };
    finite_difference_gradient(forward, inputs, &analytic, eps, elements)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = finite_difference_gradient(|_| Ok(7.0), &[x], &[vec![0.0; 3]], 1e-3, Elements::All)
            .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn linear_op_is_accurate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand_t = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
        };
        let inputs = [rand_t(&[4, 8]), rand_t(&[8, 3]), rand_t(&[3])];
        let r = check_tape_op(&inputs, 1e-3, Elements::All, 1, false, |t, v| {
            t.linear(v[0], v[1], v[2])
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn negated_gradient_is_caught() {
        let inputs = [Tensor::new(&[2, 2], vec![0.5, -0.3, 0.2, 0.9]).unwrap()];
        let r = check_tape_op(&inputs, 1e-3, Elements::All, 1, true, |t, v| {
            t.reshape(v[0], &[4])
        })
        .unwrap();
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn sampling_limits_work() {
        let x = Tensor::<f64>::zeros(&[100]).unwrap();
        let r = finite_difference_gradient(
            |_| Ok(0.0),
            &[x],
            &[vec![0.0; 100]],
            1e-3,
            Elements::Sample { per_tensor: 7, seed: 3 },
        )
        .unwrap();
        assert_eq!(r.checked, 7);
    }
}
