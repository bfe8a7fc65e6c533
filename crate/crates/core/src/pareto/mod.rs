//! Dominance, batch non-dominated sets and hypervolume.

use crate::error::{Error, Result};

/// `a` dominates `b`: no worse in every channel, strictly better in one.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::shape("dominates", format!("lengths {} vs {}", a.len(), b.len())));
    }
    Ok(dominates_unchecked(a, b))
}

fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strict = true;
        }
    }
    strict
}

/// Indices of the rows not dominated by any other row, in ascending order.
/// Identical rows never dominate each other, so duplicates are all kept.
///
/// Plain pairwise scan: for each candidate, stop at the first row that
/// dominates it.
pub fn non_dominated_set(rows: &[Vec<f64>]) -> Result<Vec<usize>> {
    let Some(first) = rows.first() else {
        return Ok(Vec::new());
    };
    let k = first.len();
    if let Some(bad) = rows.iter().position(|r| r.len() != k) {
        return Err(Error::shape("non_dominated_set", format!("row {bad} has {} channels, expected {k}", rows[bad].len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite reward in dominance check".into()));
    }
    let mut members = Vec::new();
    for (i, ri) in rows.iter().enumerate() {
        let mut dominated = false;
        for (j, rj) in rows.iter().enumerate() {
            if i != j && dominates_unchecked(rj, ri) {
                dominated = true;
                break;
            }
        }
        if !dominated {
            members.push(i);
        }
    }
    Ok(members)
}

/// Boolean membership mask built from [`non_dominated_set`].
pub fn pareto_mask(rows: &[Vec<f64>]) -> Result<Vec<bool>> {
    let mut mask = vec![false; rows.len()];
    for i in non_dominated_set(rows)? {
        mask[i] = true;
    }
    Ok(mask)
}

/// Measure of the union of boxes `[reference, p]` for `K ∈ {2, 3}`.
///
/// Points not strictly above the reference in every channel add nothing and
/// are dropped with a warning.
pub fn hypervolume(points: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    let k = reference.len();
    if !(2..=3).contains(&k) {
        return Err(Error::InvalidArgument(format!("hypervolume supports 2 or 3 channels, got {k}")));
    }
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if p.len() != k {
            return Err(Error::shape("hypervolume", format!("point {i} has {} channels, expected {k}", p.len())));
        }
        if p.iter().zip(reference).all(|(x, r)| x > r) {
            kept.push(p.clone());
        } else {
            log::warn!("hypervolume: point {i} is not above the reference point and is ignored");
        }
    }
    let front: Vec<Vec<f64>> = non_dominated_set(&kept)?.into_iter().map(|i| kept[i].clone()).collect();
    Ok(match k {
        2 => area_2d(front.iter().map(|p| (p[0], p[1])).collect(), reference[0], reference[1]),
        _ => volume_3d(&front, reference),
    })
}

/// Area above `(rx, ry)` dominated by the points: sweep in decreasing `x`.
fn area_2d(mut pts: Vec<(f64, f64)>, rx: f64, ry: f64) -> f64 {
    pts.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut area = 0.0;
    let mut best_y = ry;
    for (i, &(x, y)) in pts.iter().enumerate() {
        best_y = best_y.max(y);
        let next_x = pts.get(i + 1).map_or(rx, |p| p.0);
        area += (x - next_x) * (best_y - ry);
    }
    area
}

/// Slices along the third channel: between consecutive distinct heights the
/// cross-section is the 2-D area of the points at least that tall.
fn volume_3d(front: &[Vec<f64>], reference: &[f64]) -> f64 {
    let mut heights: Vec<f64> = front.iter().map(|p| p[2]).collect();
    heights.sort_by(|a, b| b.total_cmp(a));
    heights.dedup();
    let mut volume = 0.0;
    for (i, &z) in heights.iter().enumerate() {
        let below = heights.get(i + 1).copied().unwrap_or(reference[2]);
        let slice: Vec<(f64, f64)> = front.iter().filter(|p| p[2] >= z).map(|p| (p[0], p[1])).collect();
        volume += area_2d(slice, reference[0], reference[1]) * (z - below);
    }
    volume
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dominance_cases() {
        assert!(dominates(&[1.0, 1.0], &[0.0, 0.0]).unwrap());
        assert!(!dominates(&[1.0, 0.0], &[0.0, 1.0]).unwrap());
        assert!(!dominates(&[0.0, 1.0], &[1.0, 0.0]).unwrap());
        assert!(!dominates(&[1.0, 1.0], &[1.0, 1.0]).unwrap());
        assert!(dominates(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn small_sets() {
        assert_eq!(non_dominated_set(&[vec![0.3, 0.2]]).unwrap(), vec![0]);
        let rows = vec![vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(non_dominated_set(&rows).unwrap(), vec![0]);
        let dup = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(non_dominated_set(&dup).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn hypervolume_values() {
        assert_eq!(hypervolume(&[vec![1.0, 1.0]], &[0.0, 0.0]).unwrap(), 1.0);
        let two = vec![vec![1.0, 0.5], vec![0.5, 1.0]];
        assert!((hypervolume(&two, &[0.0, 0.0]).unwrap() - 0.75).abs() < 1e-12);
        let cube = vec![vec![1.0, 1.0, 1.0], vec![0.5, 0.5, 2.0]];
        let want = 1.0 + 0.25;
        assert!((hypervolume(&cube, &[0.0, 0.0, 0.0]).unwrap() - want).abs() < 1e-12);
        assert!(hypervolume(&[vec![1.0]], &[0.0]).is_err());
    }
}
