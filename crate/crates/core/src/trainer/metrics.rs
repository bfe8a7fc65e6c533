use std::fmt::Write as _;

use crate::rewards::{NormalizerState, CHANNEL_NAMES};

/// One row of the per-iteration metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub prompt_id: usize,
    pub raw_mean: Vec<f64>,
    pub normalized_mean: Vec<f64>,
    pub pareto_sizes: Vec<usize>,
    pub kl: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub rolled_back: bool,
    pub wall_ms: u64,
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

/// Comment line carrying the config hash and normalizer bounds.
pub fn csv_preamble(config_hash_hex: &str, normalizer: Option<&NormalizerState>) -> String {
    let mut s = format!("# config_hash={config_hash_hex}");
    if let Some(n) = normalizer {
        let _ = write!(s, " normalizer_min={} normalizer_max={}", join(n.min(), ";"), join(n.max(), ";"));
    }
    s
}

pub fn csv_header(channels: usize, with_wall: bool) -> String {
    let mut cols = vec!["iteration".to_string(), "prompt_id".to_string()];
    for name in &CHANNEL_NAMES[..channels] {
        cols.push(format!("raw_{name}"));
    }
    for name in &CHANNEL_NAMES[..channels] {
        cols.push(format!("norm_{name}"));
    }
    for k in 0..channels {
        cols.push(format!("pareto_size_{k}"));
    }
    cols.extend(["kl", "actor_loss", "critic_loss", "rolled_back"].map(String::from));
    if with_wall {
        cols.push("wall_ms".into());
    }
    cols.join(",")
}

impl IterationMetrics {
    /// Values use the shortest round-tripping representation, so equal rows
    /// mean bit-equal metrics.
    pub fn csv_row(&self, with_wall: bool) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.prompt_id,
            join(&self.raw_mean, ","),
            join(&self.normalized_mean, ","),
            join(&self.pareto_sizes, ","),
            self.kl,
            self.actor_loss,
            self.critic_loss,
            u8::from(self.rolled_back)
        );
        if with_wall {
            let _ = write!(s, ",{}", self.wall_ms);
        }
        s
    }

    pub fn total_normalized(&self) -> f64 {
        self.normalized_mean.iter().sum()
    }
}

/// Full CSV text: preamble, header and one row per iteration.
pub fn metrics_csv(
    config_hash_hex: &str,
    normalizer: Option<&NormalizerState>,
    channels: usize,
    rows: &[IterationMetrics],
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", csv_preamble(config_hash_hex, normalizer));
    let _ = writeln!(out, "{}", csv_header(channels, true));
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row(true));
    }
    out
}
