use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Compares tape gradients against central finite differences.
///
/// Returns the maximum over parameters of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(model_fn: F, params: &ParameterStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = model_fn(&mut tape, params)?;
    let mut analytic = vec![0.0; params.len()];
    tape.backward(loss)?.accumulate_into(&mut analytic);

    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = model_fn(&mut t, store)?;
        Ok(t.value(l).data()[0])
    };

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.values_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
