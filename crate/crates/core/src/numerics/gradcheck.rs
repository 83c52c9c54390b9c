use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{DiffArray, ShapeError, Tape, Var};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    BadStep(f64),
    #[error("function value is not finite ({0})")]
    NonFinite(f64),
    #[error("function output must be a single element")]
    NotScalar,
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Which input coordinates a check perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordSelection {
    All,
    /// At most `per_input` coordinates of every input, chosen with `seed`.
    Sample {
        per_input: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic − numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// (input, coordinate) attaining the maximum
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences `(f(x+ε) − f(x−ε)) / 2ε`.
///
/// `f` receives a fresh tape and one gradient-requiring leaf per input.
pub fn finite_difference_check<F>(f: F, inputs: &[DiffArray<f64>], eps: f64, coords: CoordSelection) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, ShapeError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(GradCheckError::BadStep(eps));
    }
    let eval = |values: &[Vec<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>), GradCheckError> {
        let mut tape = Tape::new();
        let vars = inputs.iter().zip(values).map(|(a, v)| tape.leaf(v.clone(), a.shape(), true)).collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(GradCheckError::NotScalar);
        }
        let y = tape.scalar(out);
        if !y.is_finite() {
            return Err(GradCheckError::NonFinite(y));
        }
        let mut grads = Vec::new();
        if with_grad {
            tape.backward(out)?;
            for (v, a) in vars.iter().zip(inputs) {
                grads.push(tape.grad(*v).map_or_else(|| vec![0.0; a.len()], <[f64]>::to_vec));
            }
        }
        Ok((y, grads))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|a| a.data().to_vec()).collect();
    let (_, analytic) = eval(&base, true)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut work = base.clone();
    for (i, input) in inputs.iter().enumerate() {
        let picked: Vec<usize> = match coords {
            CoordSelection::All => (0..input.len()).collect(),
            CoordSelection::Sample { per_input, seed } if per_input < input.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut idx = sample(&mut rng, input.len(), per_input).into_vec();
                idx.sort_unstable();
                idx
            }
            CoordSelection::Sample { .. } => (0..input.len()).collect(),
        };
        for c in picked {
            let orig = work[i][c];
            work[i][c] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[i][c] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[i][c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][c];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((i, c));
                }
            }
        }
    }
    Ok(report)
}
