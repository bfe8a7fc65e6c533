use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// One step's clipped-surrogate contribution, `−min(ratio·A, clip(ratio)·A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    -(ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Mean over steps of the clipped surrogate, negated for minimization.
pub fn actor_loss(logp_new: &[f64], logp_old: &[f64], advantages: &[f64], eps: f64) -> Result<f64> {
    if logp_new.len() != logp_old.len() || logp_new.len() != advantages.len() {
        return Err(Error::shape(
            "actor_loss",
            format!("{} / {} / {}", logp_new.len(), logp_old.len(), advantages.len()),
        ));
    }
    let n = logp_new.len().max(1) as f64;
    Ok(logp_new
        .iter()
        .zip(logp_old)
        .zip(advantages)
        .map(|((new, old), a)| clipped_term((new - old).exp(), *a, eps))
        .sum::<f64>()
        / n)
}

/// Records `Σ_t weights_t · (−min(ratio_t·A_t, clip(ratio_t)·A_t))` where
/// `logp_new` is an `n × 1` column.
pub fn actor_loss_on(
    tape: &mut Tape,
    logp_new: Var,
    logp_old: &[f64],
    advantages: &[f64],
    weights: &[f64],
    eps: f64,
) -> Result<Var> {
    let n = tape.value(logp_new).rows();
    if logp_old.len() != n || advantages.len() != n || weights.len() != n {
        return Err(Error::shape(
            "actor_loss",
            format!("{n} steps, {} old, {} advantages, {} weights", logp_old.len(), advantages.len(), weights.len()),
        ));
    }
    let old = tape.constant(Tensor::new(n, 1, logp_old.to_vec())?);
    let adv = tape.constant(Tensor::new(n, 1, advantages.to_vec())?);
    let w = tape.constant(Tensor::new(n, 1, weights.to_vec())?);
    let diff = tape.sub(logp_new, old)?;
    let ratio = tape.exp(diff);
    let unclipped = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = tape.mul(clipped, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let weighted = tape.mul(surrogate, w)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, -1.0))
}

/// Mean of `(V_t − G_t)²`.
pub fn critic_loss(values: &[f64], returns: &[f64]) -> Result<f64> {
    if values.len() != returns.len() {
        return Err(Error::shape("critic_loss", format!("{} vs {}", values.len(), returns.len())));
    }
    let n = values.len().max(1) as f64;
    Ok(values.iter().zip(returns).map(|(v, g)| (v - g) * (v - g)).sum::<f64>() / n)
}

/// Records `scale · Σ_t (V_t − G_t)²` for an `n × 1` value column.
pub fn critic_loss_on(tape: &mut Tape, values: Var, returns: &[f64], scale: f64) -> Result<Var> {
    let n = tape.value(values).rows();
    let g = tape.constant(Tensor::new(n, 1, returns.to_vec())?);
    let se = tape.squared_error(values, g)?;
    Ok(tape.scale(se, scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        assert!((clipped_term(1.3, 1.0, 0.2) + 1.2).abs() < 1e-12);
        assert!((clipped_term(0.5, -1.0, 0.2) - 0.8).abs() < 1e-12);
        assert_eq!(critic_loss(&[0.0], &[2.0]).unwrap(), 4.0);
        let a = [0.5, -0.25];
        let l = actor_loss(&[-1.0, -2.0], &[-1.0, -2.0], &a, 0.2).unwrap();
        assert!((l - (-0.125)).abs() < 1e-12);
    }
}
