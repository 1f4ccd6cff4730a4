use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// Denominator convention for recall.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallMode {
    /// `|relevant|`
    #[default]
    Standard,
    /// `min(|relevant|, k)`
    Capped,
}

/// `|relevant ∩ top-k| / |relevant|`, or `None` when nothing is relevant.
pub fn recall_at_k(ranking: &[&str], relevant: &HashSet<&str>, k: usize, mode: RecallMode) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let found = ranking.iter().take(k).filter(|id| relevant.contains(*id)).count();
    let denom = match mode {
        RecallMode::Standard => relevant.len(),
        RecallMode::Capped => relevant.len().min(k).max(1),
    };
    Some(found as f64 / denom as f64)
}

/// 1 when any relevant passage is in the top `k`.
pub fn hit_at_k(ranking: &[&str], relevant: &HashSet<&str>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hit = ranking.iter().take(k).any(|id| relevant.contains(*id));
    Some(if hit { 1.0 } else { 0.0 })
}
