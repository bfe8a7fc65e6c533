//! Synthetic multi-objective sequence task: ground truth, hidden preference,
//! dataset generation, supervised pretraining and oracle evaluation.

pub mod io;
mod oracle;
mod pretrain;
mod synthetic;

pub use oracle::{oracle_eval, token_match, OracleScores};
pub use pretrain::{next_token_accuracy, pretrain_actor, PretrainConfig, PretrainReport};
pub use synthetic::{Dataset, DatasetSizes, SyntheticTask, TaskConfig};
