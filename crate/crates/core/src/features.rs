//! Historical rating-ratio features and the density-based score features
//! derived from them.

use crate::compute::{Tape, Var};
use crate::distributions::DistNet;
use crate::error::{GrpError, Result};
use crate::params::ParamStore;

/// Proportion of each rating level in an entity's history.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioFeature {
    pub q: Vec<f64>,
    pub support_count: usize,
}

impl RatioFeature {
    /// Uniform simplex, used when an entity has no history.
    pub fn uniform(c: usize) -> Self {
        RatioFeature {
            q: vec![1.0 / c as f64; c],
            support_count: 0,
        }
    }

    pub fn levels(&self) -> usize {
        self.q.len()
    }
}

/// `q_k = n_k / n` over rating levels `1..=c`.
pub fn ratio_feature(history: &[u32], c: usize) -> Result<RatioFeature> {
    if c == 0 {
        return Err(GrpError::config("number of rating levels must be positive"));
    }
    if history.is_empty() {
        return Ok(RatioFeature::uniform(c));
    }
    let mut counts = vec![0usize; c];
    for &r in history {
        if r == 0 || r as usize > c {
            return Err(GrpError::Data(format!("rating {r} outside 1..={c}")));
        }
        counts[r as usize - 1] += 1;
    }
    let n = history.len();
    Ok(RatioFeature {
        q: counts.iter().map(|&k| k as f64 / n as f64).collect(),
        support_count: n,
    })
}

/// The points `1, 2, …, c` at which each level's density is read.
pub fn sampling_scores(c: usize) -> Vec<f64> {
    (1..=c).map(|k| k as f64).collect()
}

/// Density values, one per rating level.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFeature {
    pub p: Vec<f64>,
}

/// Evaluates `c` separate densities, density `k` at sampling score `k`,
/// with parameters produced from `q` by `net`.
pub fn score_feature_on_tape(
    t: &mut Tape,
    store: &ParamStore,
    net: &DistNet,
    q: Var,
    scores: Var,
) -> Result<Var> {
    let params = net.forward(t, store, q)?;
    t.density(net.kind, scores, params.loc, params.scale, params.shape)
}

pub fn score_feature(q: &RatioFeature, net: &DistNet, store: &ParamStore) -> Result<ScoreFeature> {
    let mut t = Tape::inference();
    let qv = t.constant_vector(&q.q);
    let sv = t.constant_vector(&sampling_scores(q.levels()));
    let p = score_feature_on_tape(&mut t, store, net, qv, sv)?;
    Ok(ScoreFeature {
        p: t.value(p).as_slice().to_vec(),
    })
}
