//! Paired prompt/sequence encoders and the pairwise preference scorer.

mod features;
mod losses;
mod model;
mod scorer;

pub use features::{FeatureTransform, DIFF_STATS};
pub use losses::{
    contrastive_loss, contrastive_loss_on, infonce_loss, infonce_loss_on, preference_loss, preference_loss_on,
};
pub use model::{retrieval_top1, sq_dist, train_encoders, EncoderConfig, EncoderFamily, EncoderSet, LossKind};
pub use scorer::{train_preference_scorer, PreferenceScorer, ScorerConfig};

use crate::policy::TokenSequence;

/// A prompt paired with a sequence and whether the two match.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedExample {
    pub prompt_id: usize,
    pub sequence: TokenSequence,
    pub matched: bool,
}

/// Two sequences for one prompt, `better` preferred over `worse`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferencePair {
    pub prompt_id: usize,
    pub better: TokenSequence,
    pub worse: TokenSequence,
}
