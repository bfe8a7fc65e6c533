//! Margin contrastive, symmetric InfoNCE and pairwise preference losses, each
//! as a plain function and as a tape recording.

use crate::error::{Error, Result};
use crate::numerics::{kernels, softplus, Tape, Tensor, Var};

/// Keeps the Euclidean distance differentiable at zero.
const DIST_EPS: f64 = 1e-12;

/// `y·‖f_t − f_m‖² + (1 − y)·max(0, margin − ‖f_t − f_m‖)²`
pub fn contrastive_loss(f_t: &[f64], f_m: &[f64], matched: bool, margin: f64) -> f64 {
    let sq: f64 = f_t.iter().zip(f_m).map(|(a, b)| (a - b) * (a - b)).sum();
    if matched {
        sq
    } else {
        let hinge = (margin - sq.sqrt()).max(0.0);
        hinge * hinge
    }
}

/// Mean margin loss over the rows of two `B × d` embedding batches.
pub fn contrastive_loss_on(tape: &mut Tape, f_t: Var, f_m: Var, labels: &[bool], margin: f64) -> Result<Var> {
    if tape.value(f_t).rows() != labels.len() {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{} labels for batch {:?}", labels.len(), tape.value(f_t).shape()),
        ));
    }
    let diff = tape.sub(f_t, f_m)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.sum_cols(sq);
    let d = tape.add_scalar(sq, DIST_EPS);
    let d = tape.sqrt(d);
    let neg_d = tape.scale(d, -1.0);
    let gap = tape.add_scalar(neg_d, margin);
    let hinge = tape.relu(gap);
    let hinge_sq = tape.mul(hinge, hinge)?;
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let n = labels.len();
    let y = tape.constant(Tensor::new(n, 1, y)?);
    let not_y = tape.constant(Tensor::new(n, 1, not_y)?);
    let pos = tape.mul(y, sq)?;
    let neg = tape.mul(not_y, hinge_sq)?;
    let total = tape.add(pos, neg)?;
    Ok(tape.mean(total))
}

/// Symmetric InfoNCE on rows assumed already L2-normalized.
pub fn infonce_loss(f_t: &Tensor, f_m: &Tensor, tau: f64) -> Result<f64> {
    let b = f_t.rows();
    if b == 0 || f_t.shape() != f_m.shape() {
        return Err(Error::shape(
            "infonce_loss",
            format!("{:?} vs {:?}", f_t.shape(), f_m.shape()),
        ));
    }
    let d = f_t.cols();
    let mut sim = vec![0.0; b * b];
    kernels::matmul_t_acc(f_t.data(), f_m.data(), &mut sim, b, d, b);
    sim.iter_mut().for_each(|s| *s /= tau);
    let mut total = 0.0;
    let mut logp = vec![0.0; b];
    for i in 0..b {
        kernels::log_softmax_row(&sim[i * b..(i + 1) * b], &mut logp);
        total += logp[i];
        let col: Vec<f64> = (0..b).map(|j| sim[j * b + i]).collect();
        kernels::log_softmax_row(&col, &mut logp);
        total += logp[i];
    }
    Ok(-total / b as f64)
}

/// Records InfoNCE with `τ = exp(log_tau)`; rows are L2-normalized first.
pub fn infonce_loss_on(tape: &mut Tape, f_t: Var, f_m: Var, log_tau: Var) -> Result<Var> {
    let (st, sm) = (tape.value(f_t).shape(), tape.value(f_m).shape());
    if st[0] == 0 || st != sm {
        return Err(Error::shape("infonce_loss", format!("{st:?} vs {sm:?}")));
    }
    let b = st[0];
    let nt = tape.l2_normalize_rows(f_t);
    let nm = tape.l2_normalize_rows(f_m);
    let sim = tape.matmul_t(nt, nm)?;
    let neg_log_tau = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg_log_tau);
    let logits = tape.scale_by(sim, inv_tau)?;
    let diag: Vec<usize> = (0..b).collect();
    let rows = tape.log_softmax_rows(logits);
    let a = tape.pick_per_row(rows, &diag)?;
    let lt = tape.transpose(logits);
    let cols = tape.log_softmax_rows(lt);
    let c = tape.pick_per_row(cols, &diag)?;
    let both = tape.add(a, c)?;
    let s = tape.sum(both);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// `−log σ(score_h − score_l)`
pub fn preference_loss(score_h: f64, score_l: f64) -> f64 {
    softplus(score_l - score_h)
}

/// Mean preference loss over aligned `B × 1` score columns.
pub fn preference_loss_on(tape: &mut Tape, better: Var, worse: Var) -> Result<Var> {
    let gap = tape.sub(worse, better)?;
    let l = tape.softplus(gap);
    Ok(tape.mean(l))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_loss_values() {
        assert_eq!(contrastive_loss(&[0.3, 0.1], &[0.3, 0.1], true, 1.0), 0.0);
        assert_eq!(contrastive_loss(&[0.0, 0.0], &[1.5, 0.0], false, 1.0), 0.0);
        let v = contrastive_loss(&[0.0, 0.0], &[0.4, 0.0], false, 1.0);
        assert!((v - 0.36).abs() < 1e-12);
    }

    #[test]
    fn tape_margin_loss_matches_plain() {
        let ft = Tensor::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let fm = Tensor::new(2, 2, vec![0.4, 0.0, 1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(ft), tape.constant(fm));
        let l = contrastive_loss_on(&mut tape, a, b, &[false, true], 1.0).unwrap();
        let want = (contrastive_loss(&[0.0, 0.0], &[0.4, 0.0], false, 1.0) + 1.0) / 2.0;
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn infonce_closed_forms() {
        let one = Tensor::new(1, 2, vec![0.6, 0.8]).unwrap();
        assert!(infonce_loss(&one, &one, 0.07).unwrap().abs() < 1e-12);
        let eye = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = infonce_loss(&eye, &eye, 1.0).unwrap();
        let want = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((v - want).abs() < 1e-12);
        assert!(infonce_loss(&Tensor::zeros(0, 2), &Tensor::zeros(0, 2), 1.0).is_err());
    }

    #[test]
    fn preference_values() {
        assert!((preference_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-12);
        let want = -(1.0 / (1.0 + (-1.0f64).exp())).ln();
        assert!((preference_loss(1.0, 0.0) - want).abs() < 1e-12);
        assert!(preference_loss(800.0, 0.0) < 1e-300);
    }
}
