use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::round_single;
use crate::policy::{TokenSequence, Vocabulary};

/// Number of first-difference statistics appended to the projection.
pub const DIFF_STATS: usize = 4;

/// Fixed, untrained map from a token sequence to `d_g` reals: a random
/// projection of the token one-hots, mean-pooled over content tokens,
/// followed by first-difference statistics of the token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTransform {
    codebook_size: usize,
    dim: usize,
    projection: Vec<f64>,
}

impl FeatureTransform {
    pub fn new<R: Rng>(codebook_size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if dim <= DIFF_STATS || codebook_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature dim {dim} must exceed {DIFF_STATS}"
            )));
        }
        let width = dim - DIFF_STATS;
        let projection = (0..codebook_size * width)
            .map(|_| round_single(rng.gen_range(-1.0..1.0)))
            .collect();
        Ok(Self {
            codebook_size,
            dim,
            projection,
        })
    }

    /// Rebuilds a transform from a stored projection matrix.
    pub fn from_projection(codebook_size: usize, dim: usize, projection: Vec<f64>) -> Result<Self> {
        if dim <= DIFF_STATS || projection.len() != codebook_size * (dim - DIFF_STATS) {
            return Err(Error::shape(
                "feature_transform",
                format!("{} projection values for V={codebook_size}, d_g={dim}", projection.len()),
            ));
        }
        Ok(Self {
            codebook_size,
            dim,
            projection,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn apply(&self, seq: &TokenSequence) -> Vec<f64> {
        self.apply_content(seq.content())
    }

    /// Features of a content-token slice (End excluded).
    pub fn apply_content(&self, content: &[usize]) -> Vec<f64> {
        let width = self.dim - DIFF_STATS;
        let mut out = vec![0.0; self.dim];
        if !content.is_empty() {
            for &t in content {
                let row = &self.projection[t * width..(t + 1) * width];
                for (o, r) in out.iter_mut().zip(row) {
                    *o += r;
                }
            }
            let n = content.len() as f64;
            out[..width].iter_mut().for_each(|v| *v /= n);
        }
        let v = self.codebook_size as f64;
        let diffs: Vec<f64> = content.windows(2).map(|w| w[1] as f64 - w[0] as f64).collect();
        if !diffs.is_empty() {
            let m = diffs.len() as f64;
            out[width] = diffs.iter().map(|d| d.abs()).sum::<f64>() / m / v;
            out[width + 1] = (diffs.iter().map(|d| d * d).sum::<f64>() / m).sqrt() / v;
            out[width + 2] = diffs.iter().filter(|d| d.abs() <= 1.0).count() as f64 / m;
        }
        out[width + 3] = content.len() as f64 / v;
        out
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.codebook_size).expect("non-empty codebook")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pure_fixed_width_and_sensitive() {
        let g = FeatureTransform::new(8, 12, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let v = g.vocab();
        let a = TokenSequence::from_content(&[1, 2, 3], &v, 10).unwrap();
        let b = TokenSequence::from_content(&[1, 5, 3], &v, 10).unwrap();
        let e = TokenSequence::from_content(&[], &v, 10).unwrap();
        assert_eq!(g.apply(&a), g.apply(&a));
        assert_eq!(g.apply(&a).len(), 12);
        assert_eq!(g.apply(&e).len(), 12);
        assert_ne!(g.apply(&a), g.apply(&b));
    }
}
