//! Central finite-difference oracle for tape gradients.

use rand::seq::index;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Which coordinates of each input get a finite-difference probe.
#[derive(Clone, Copy, Debug)]
pub enum CoordinateSelection {
    All,
    /// At most `per_input` coordinates per input, chosen with `seed`.
    Sample { per_input: usize, seed: u64 },
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out.value();
    if value.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

/// Max over probed coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`, with the numeric
/// derivative `(f(x+h) − f(x−h)) / 2h`.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], h: f64, selection: CoordinateSelection) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut rng = match selection {
        CoordinateSelection::Sample { seed, .. } => Some(RngStream::new(seed)),
        CoordinateSelection::All => None,
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match (selection, rng.as_mut()) {
            (CoordinateSelection::Sample { per_input, .. }, Some(rng)) if per_input < x.len() => {
                let mut picked = index::sample(rng.inner_mut(), x.len(), per_input).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..x.len()).collect(),
        };
        for i in coords {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[which].data()[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_inputs`] probing every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_inputs(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        h,
        CoordinateSelection::All,
    )
}
