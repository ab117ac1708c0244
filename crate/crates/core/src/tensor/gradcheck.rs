//! Central finite-difference checks against the tape's reverse-mode gradients.
//!
//! The numeric side only ever evaluates the forward function, so it shares no
//! code path with `Tape::backward`.

use super::{Array, Real, Tape, TensorError, Var};

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: Real = 1e-5;

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: Real,
    pub numeric: Real,
    pub rel_error: Real,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub max_rel_error: Real,
    pub worst: Option<Mismatch>,
}

impl Report {
    pub fn passes(&self, tol: Real) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn rel_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of a scalar function at `x` along coordinate `i`.
pub fn central_difference<E>(
    x: &[Real],
    i: usize,
    step: Real,
    mut f: impl FnMut(&[Real]) -> Result<Real, E>,
) -> Result<Real, E> {
    let mut probe = x.to_vec();
    probe[i] = x[i] + step;
    let plus = f(&probe)?;
    probe[i] = x[i] - step;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Checks every element of every input of a scalar-valued tape function.
pub fn check<F, E>(inputs: &[Array], step: Real, f: F) -> Result<Report, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |which: usize, data: &[Real]| -> Result<Real, E> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(k, a)| {
                if k == which {
                    t.constant(Array::new(a.shape().to_vec(), data.to_vec()).unwrap())
                } else {
                    t.constant(a.clone())
                }
            })
            .collect();
        Ok(f(&t, &vs)?.value().item()?)
    };

    let mut report = Report::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for e in 0..input.len() {
            let numeric = central_difference(input.data(), e, step, |d| eval(k, d))?;
            let a = analytic.data()[e];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some(Mismatch {
                        input: k,
                        element: e,
                        analytic: a,
                        numeric,
                        rel_error: err,
                    });
                }
            }
        }
    }
    Ok(report)
}
