//! Central finite-difference gradient checks (64-bit only).

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Contract(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    Ok(())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the tape gradient of the scalar `f(point)` with central
/// differences. Returns `max_i |a_i - n_i| / max(1, |a_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_step(h)?;
    let mut tape = Tape::new();
    let x = tape.var(point.clone());
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p.clone());
        let l = f(&mut tape, x)?;
        Ok(tape.value(l).item())
    };
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Coordinates of one stored parameter to probe.
#[derive(Clone, Debug)]
pub struct ParamSlice {
    pub name: String,
    pub indices: Vec<usize>,
}

impl ParamSlice {
    pub fn range(name: &str, start: usize, len: usize) -> Self {
        Self {
            name: name.to_string(),
            indices: (start..start + len).collect(),
        }
    }

    /// `count` indices `start, start+step, ...`.
    pub fn strided(name: &str, start: usize, step: usize, count: usize) -> Self {
        Self {
            name: name.to_string(),
            indices: (0..count).map(|i| start + i * step).collect(),
        }
    }
}

/// Like [`grad_check`] but perturbs entries of a [`ParamStore`] that `f`
/// binds through [`Tape::param`].
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    slices: &[ParamSlice],
    f: F,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_step(h)?;
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for slice in slices {
        let value = store
            .value(&slice.name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{}'", slice.name)))?;
        let zeros = Tensor::zeros(value.shape());
        let analytic = grads.param(&slice.name).unwrap_or(&zeros);
        for &i in &slice.indices {
            if i >= value.len() {
                return Err(Error::Contract(format!(
                    "index {i} out of range for '{}' ({} elements)",
                    slice.name,
                    value.len()
                )));
            }
            let orig = value.data()[i];
            let mut at = |delta: f64| -> Result<f64> {
                probe.value_mut(&slice.name).expect("exists").data_mut()[i] = orig + delta;
                let mut tape = Tape::new();
                let l = f(&mut tape, &probe)?;
                Ok(tape.value(l).item())
            };
            let up = at(h)?;
            let down = at(-h)?;
            probe.value_mut(&slice.name).expect("exists").data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}
