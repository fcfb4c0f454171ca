//! Word-level triplet loss, frame-level cross-entropy, and their convex
//! combination `(1 - lambda) * triplet + lambda * ce`.

use serde::{Deserialize, Serialize};

use crate::corpus::TripletBatch;
use crate::encoder::{BatchForward, FrameStates, ParamVars, SoftmaxHead};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Var};

/// Added to both norms in every cosine distance.
pub const NORM_EPSILON: f64 = 1e-12;

/// Which triplet branches contribute frames to the cross-entropy term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeBranchPolicy {
    AnchorOnly,
    #[default]
    AllBranches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
    pub ce_branch_policy: CeBranchPolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.5,
            lambda: 0.1,
            ce_branch_policy: CeBranchPolicy::AllBranches,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.margin) {
            return Err(Error::config("loss.margin", "must be in [0, 2]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("loss.lambda", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// `1 - cos(a, b)` on plain vectors, clamped to `[0, 2]`. A zero vector is
/// at distance 1 from everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine distance of a zero-norm vector");
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Row-wise cosine distance of two `N x E` nodes, as `N x 1`.
pub fn cosine_distance_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let ab = g.mul(a, b)?;
    let dot = g.row_sums(ab);
    let na = g.row_norms(a);
    let nb = g.row_norms(b);
    if g.value(na).data().iter().chain(g.value(nb).data()).any(|&n| n == 0.0) {
        log::warn!("cosine distance of a zero-norm embedding");
    }
    let na = g.add_scalar(na, NORM_EPSILON);
    let nb = g.add_scalar(nb, NORM_EPSILON);
    let den = g.mul(na, nb)?;
    let cos = g.div(dot, den)?;
    let neg = g.scale(cos, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Per-row hinge `max(0, m + d+ - d-)`, as `N x 1`.
pub fn triplet_loss(g: &mut Graph, anchor: Var, same: Var, different: Var, margin: f64) -> Result<Var> {
    let d_pos = cosine_distance_rows(g, anchor, same)?;
    let d_neg = cosine_distance_rows(g, anchor, different)?;
    let gap = g.sub(d_pos, d_neg)?;
    let shifted = g.add_scalar(gap, margin);
    g.relu(shifted)
}

/// Frame-mean softmax cross-entropy of the head applied to `states`.
///
/// Returns the `1 x 1` mean and the number of labelled frames. Rows
/// labelled `None` are ignored.
pub fn frame_cross_entropy(
    g: &mut Graph,
    states: Var,
    labels: &[Option<usize>],
    head_weights: Var,
    head_bias: Var,
) -> Result<(Var, usize)> {
    let count = labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return Err(Error::invalid("cross entropy over zero labelled frames"));
    }
    let logits = g.matmul_nt(states, head_weights)?;
    let logits = g.add_row(logits, head_bias)?;
    let sum = g.softmax_cross_entropy(logits, labels)?;
    Ok((g.scale(sum, 1.0 / count as f64), count))
}

/// Cross-entropy value for one unpadded sequence.
pub fn frame_cross_entropy_value(states: &FrameStates, labels: &[usize], head: &SoftmaxHead) -> Result<f64> {
    if labels.len() != states.per_frame.rows() {
        return Err(Error::invalid(format!(
            "{} labels for {} frames",
            labels.len(),
            states.per_frame.rows()
        )));
    }
    let mut g = Graph::new();
    let s = g.leaf(states.per_frame.clone());
    let w = g.leaf(head.weights.clone());
    let b = g.leaf(head.bias.clone());
    let labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    let (ce, _) = frame_cross_entropy(&mut g, s, &labels, w, b)?;
    Ok(g.value(ce).scalar())
}

/// Loss of one triplet batch.
#[derive(Clone, Debug)]
pub struct TripletBatchLoss {
    pub total: Var,
    pub triplet_term: f64,
    pub ce_term: f64,
    pub active_fraction: f64,
}

fn branch_labels(batch: &TripletBatch, policy: CeBranchPolicy) -> Vec<Option<usize>> {
    match policy {
        CeBranchPolicy::AllBranches => batch.labels.clone(),
        CeBranchPolicy::AnchorOnly => {
            let n = batch.sequences.len();
            batch
                .labels
                .iter()
                .enumerate()
                .map(|(r, &l)| if r % n < batch.num_triplets { l } else { None })
                .collect()
        }
    }
}

/// Mean hinge over the batch's triplets, plus the fraction with an active
/// hinge.
pub fn batch_triplet_term(g: &mut Graph, fwd: &BatchForward, batch: &TripletBatch, margin: f64) -> Result<(Var, f64)> {
    let b = batch.num_triplets;
    if fwd.n != 3 * b {
        return Err(Error::invalid(format!(
            "batch holds {} sequences for {b} triplets",
            fwd.n
        )));
    }
    let anchor = g.slice_rows(fwd.embeddings, 0, b)?;
    let same = g.slice_rows(fwd.embeddings, b, b)?;
    let different = g.slice_rows(fwd.embeddings, 2 * b, b)?;
    let hinge = triplet_loss(g, anchor, same, different, margin)?;
    let active = g.value(hinge).data().iter().filter(|&&x| x > 0.0).count();
    Ok((g.mean(hinge), active as f64 / b as f64))
}

/// `(1 - lambda) * triplet_term + lambda * ce_term` on one batch.
pub fn patn_loss(
    g: &mut Graph,
    vars: &ParamVars,
    fwd: &BatchForward,
    batch: &TripletBatch,
    cfg: &LossConfig,
) -> Result<TripletBatchLoss> {
    cfg.validate()?;
    let (triplet, active_fraction) = batch_triplet_term(g, fwd, batch, cfg.margin)?;
    let labels = branch_labels(batch, cfg.ce_branch_policy);
    if cfg.lambda > 0.0 && labels.iter().all(Option::is_none) {
        return Err(Error::config(
            "loss.lambda",
            "lambda > 0 needs frame labels, but the batch has none",
        ));
    }
    let (ce, _) = frame_cross_entropy(g, fwd.tap_states, &labels, vars.head_weights, vars.head_bias)?;
    let wt = g.scale(triplet, 1.0 - cfg.lambda);
    let wc = g.scale(ce, cfg.lambda);
    let total = g.add(wt, wc)?;
    Ok(TripletBatchLoss {
        total,
        triplet_term: g.value(triplet).scalar(),
        ce_term: g.value(ce).scalar(),
        active_fraction,
    })
}

/// The plain triplet-network objective with no cross-entropy branch in the
/// graph at all.
pub fn triplet_only_loss(g: &mut Graph, fwd: &BatchForward, batch: &TripletBatch, margin: f64) -> Result<TripletBatchLoss> {
    let (triplet, active_fraction) = batch_triplet_term(g, fwd, batch, margin)?;
    Ok(TripletBatchLoss {
        total: triplet,
        triplet_term: g.value(triplet).scalar(),
        ce_term: f64::NAN,
        active_fraction,
    })
}
