//! Common-feature covariance-intersection update across neighboring robots.
//!
//! For a feature observed by several robots, each robot keeps the
//! feature-dependent top block of its own nullspace projection and shares it
//! with its neighbors. The receiving robot stacks its own top block with the
//! neighbors' (block-diagonal state Jacobian, stacked feature Jacobians),
//! projects the common feature out a second time, and applies a CI-weighted
//! gain so the fused estimate stays consistent even though cross-robot
//! correlations are unknown:
//!
//! ```text
//! K_i = (P_i H_iᵀ / ω_i) (Σ_r (1/ω_r) H_r P_r H_rᵀ + R)⁻¹
//! Δx_i = K_i r'          P_i ← (1/ω_i)(I − K_i H_i) P_i
//! ```
//!
//! with positive weights summing to one across the participants. Each block
//! is whitened by its sender's noise level before stacking, so `R` is the
//! identity. With no neighbors the stacked system is square in the feature
//! and the second projection leaves nothing: the cooperative path reduces
//! exactly to the independent filter.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CPLine, UnitQuaternion};
use crate::meas::FeatureEstimate;
use crate::msckf::{touched_columns, TopBlock};
use crate::state::RobotState;

/// Wire schema version for [`CommonFeatureMessage`].
pub const MESSAGE_SCHEMA_VERSION: u32 = 1;

/// Wire form of the sender's feature linearization point.
///
/// Participants triangulate the common feature independently; the receiver
/// shifts every incoming residual onto its own linearization point, so the
/// stacked system eliminates one shared feature error.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MessageFeature {
    Point { p: [f64; 3] },
    Line { q: [f64; 4], d: f64 },
}

impl MessageFeature {
    pub fn from_estimate(est: &FeatureEstimate) -> Self {
        match est {
            FeatureEstimate::Point(p) => MessageFeature::Point { p: [p.x, p.y, p.z] },
            FeatureEstimate::Line(l) => {
                MessageFeature::Line { q: [l.q.x, l.q.y, l.q.z, l.q.w], d: l.d }
            }
        }
    }

    /// Error-state offset `self ⊟ other` (3-vector for points, 4 for lines).
    pub fn boxminus(&self, other: &MessageFeature) -> Result<DVector<f64>> {
        match (self, other) {
            (MessageFeature::Point { p: a }, MessageFeature::Point { p: b }) => {
                Ok(DVector::from_vec(vec![a[0] - b[0], a[1] - b[1], a[2] - b[2]]))
            }
            (MessageFeature::Line { q: qa, d: da }, MessageFeature::Line { q: qb, d: db }) => {
                let a = UnitQuaternion::new(qa[0], qa[1], qa[2], qa[3]);
                let mut b = UnitQuaternion::new(qb[0], qb[1], qb[2], qb[3]);
                // the closest-point triad is two-fold ambiguous: (n_e, v_e)
                // and (−n_e, −v_e) describe the same line. Left errors are
                // invariant under the flip, so align the conventions first.
                let flip = UnitQuaternion::new(0.0, 0.0, 1.0, 0.0);
                let flipped = b.multiply(&flip);
                if a.multiply(&flipped.inverse()).angle() < a.multiply(&b.inverse()).angle() {
                    b = flipped;
                }
                let dth = a.boxminus(&b);
                Ok(DVector::from_vec(vec![dth.x, dth.y, dth.z, da - db]))
            }
            _ => Err(Error::FeatureMismatch(0, 0)),
        }
    }

    pub fn as_line(&self) -> Option<CPLine> {
        match self {
            MessageFeature::Line { q, d } => {
                Some(CPLine { q: UnitQuaternion::new(q[0], q[1], q[2], q[3]), d: *d })
            }
            _ => None,
        }
    }
}

/// The block a robot shares for one common feature: its top-block residual,
/// state Jacobian restricted to the touched columns, the covariance slice
/// over those columns, the sender's feature linearization point, the noise
/// level, and the clone timestamps the columns refer to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommonFeatureMessage {
    pub version: u32,
    pub sender_id: usize,
    pub feature_id: u64,
    pub r1: DVector<f64>,
    #[serde(rename = "H_x1")]
    pub h_x1: DMatrix<f64>,
    #[serde(rename = "H_f1")]
    pub h_f1: DMatrix<f64>,
    #[serde(rename = "P_block")]
    pub p_block: DMatrix<f64>,
    pub feature: MessageFeature,
    pub sigma: f64,
    pub clone_timestamps: Vec<f64>,
}

impl CommonFeatureMessage {
    /// Builds the message from a sender's top block, restricting the state
    /// Jacobian to the calibration and clone columns (vision never touches
    /// the IMU or time-offset columns) and slicing the covariance to match.
    ///
    /// Every message a robot sends within one frame shares the same column
    /// set, so receivers can fuse several features against one consistent
    /// covariance slice.
    pub fn from_top(
        state: &RobotState,
        feature_id: u64,
        top: &TopBlock,
        feature: &FeatureEstimate,
        sigma: f64,
    ) -> Self {
        let layout = state.layout();
        let cols: Vec<usize> = (layout.calib_theta()..layout.td()).collect();
        debug_assert!(touched_columns(&top.h_x1).iter().all(|c| cols.contains(c)));
        let rows = top.r1.len();
        let mut h = DMatrix::zeros(rows, cols.len());
        for (cj, &j) in cols.iter().enumerate() {
            for i in 0..rows {
                h[(i, cj)] = top.h_x1[(i, j)];
            }
        }
        let mut p = DMatrix::zeros(cols.len(), cols.len());
        for (ci, &i) in cols.iter().enumerate() {
            for (cj, &j) in cols.iter().enumerate() {
                p[(ci, cj)] = state.cov[(i, j)];
            }
        }
        Self {
            version: MESSAGE_SCHEMA_VERSION,
            sender_id: state.robot_id,
            feature_id,
            r1: top.r1.clone(),
            h_x1: h,
            h_f1: top.h_f1.clone(),
            p_block: p,
            feature: MessageFeature::from_estimate(feature),
            sigma,
            clone_timestamps: state.clones.iter().map(|c| c.timestamp).collect(),
        }
    }

    pub fn payload_bytes(&self) -> usize {
        serde_json::to_string(self).map(|s| s.len()).unwrap_or(0)
    }
}

/// Convex CI weights over the participating robots.
#[derive(Debug, Clone)]
pub struct CIWeights {
    w: BTreeMap<usize, f64>,
}

impl CIWeights {
    pub fn new(weights: BTreeMap<usize, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("no participants".into()));
        }
        let sum: f64 = weights.values().sum();
        if weights.values().any(|&w| w <= 0.0) {
            return Err(Error::InvalidWeights("weights must be positive".into()));
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}")));
        }
        Ok(Self { w: weights })
    }

    pub fn equal(participants: &[usize]) -> Result<Self> {
        let n = participants.len();
        if n == 0 {
            return Err(Error::InvalidWeights("no participants".into()));
        }
        // distribute the residual of the equal split onto the first entry so
        // the sum is exactly one
        let share = 1.0 / n as f64;
        let mut w: BTreeMap<usize, f64> = participants.iter().map(|&id| (id, share)).collect();
        let sum: f64 = w.values().sum();
        if let Some(first) = w.values_mut().next() {
            *first += 1.0 - sum;
        }
        Self::new(w)
    }

    pub fn get(&self, id: usize) -> Option<f64> {
        self.w.get(&id).copied()
    }

    pub fn participants(&self) -> impl Iterator<Item = (&usize, &f64)> {
        self.w.iter()
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Weight-selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum WeightMode {
    /// Equal split across participants.
    Equal,
    /// Scalar search over the own weight minimizing the post-update trace,
    /// with the remaining mass split equally among neighbors.
    #[default]
    TraceMin,
    /// Fixed own weight; the remaining mass splits equally among neighbors.
    FixedOwn(f64),
}

/// The stacked common-feature system before the second projection.
#[derive(Debug)]
pub struct StackedCommon {
    pub feature_id: u64,
    /// Whitened residual, own rows first, then neighbors in sender order.
    pub r: DVector<f64>,
    /// Whitened stacked feature Jacobian.
    pub h_f: DMatrix<f64>,
    /// Whitened own state-Jacobian block (full own error-state width).
    pub own_h: DMatrix<f64>,
    /// Whitened neighbor blocks: (sender, compact H, P slice).
    pub neighbors: Vec<(usize, DMatrix<f64>, DMatrix<f64>)>,
}

/// Stacks the robot's own top block with neighbor messages for one feature.
///
/// Messages are ordered by sender id internally, so delivery order does not
/// affect the result. Every block is whitened by its own sigma, and each
/// neighbor residual is shifted onto the receiver's feature linearization
/// point before stacking.
pub fn stack_common(
    own_id: usize,
    feature_id: u64,
    own_top: &TopBlock,
    own_feature: &FeatureEstimate,
    own_sigma: f64,
    msgs: &[CommonFeatureMessage],
) -> Result<StackedCommon> {
    let d = own_top.h_f1.ncols();
    let mut sorted: Vec<&CommonFeatureMessage> = msgs.iter().collect();
    sorted.sort_by_key(|m| m.sender_id);
    for m in &sorted {
        if m.feature_id != feature_id {
            return Err(Error::FeatureMismatch(m.feature_id, feature_id));
        }
        if m.sender_id == own_id {
            return Err(Error::InvalidWeights("own message echoed back".into()));
        }
        if m.h_f1.ncols() != d || m.r1.len() != m.h_f1.nrows() {
            return Err(Error::DimensionMismatch { expected: d, got: m.h_f1.ncols() });
        }
    }

    let w_own = 1.0 / own_sigma;
    let own_h = own_top.h_x1.clone() * w_own;

    let own_wire = MessageFeature::from_estimate(own_feature);
    // participants whose estimate is too far from ours cannot be fused by a
    // first-order shift; drop them rather than poison the stack
    let fusable = |delta: &DVector<f64>| match own_wire {
        MessageFeature::Point { .. } => delta.norm() < 0.5,
        MessageFeature::Line { .. } => {
            delta.fixed_rows::<3>(0).norm() < 0.02 && delta[3].abs() < 0.1
        }
    };
    let mut kept: Vec<(&CommonFeatureMessage, DVector<f64>)> = Vec::new();
    for m in &sorted {
        let delta = own_wire.boxminus(&m.feature)?;
        if fusable(&delta) {
            kept.push((m, delta));
        }
    }
    let total_rows = own_top.r1.len() + kept.iter().map(|(m, _)| m.r1.len()).sum::<usize>();
    let mut r = DVector::zeros(total_rows);
    let mut h_f = DMatrix::zeros(total_rows, d);
    for i in 0..own_top.r1.len() {
        r[i] = own_top.r1[i] * w_own;
        for j in 0..d {
            h_f[(i, j)] = own_top.h_f1[(i, j)] * w_own;
        }
    }
    let mut neighbors = Vec::with_capacity(kept.len());
    let mut row = own_top.r1.len();
    for (m, delta) in &kept {
        let w = 1.0 / m.sigma;
        // shift the sender's residual onto the receiver's feature estimate
        let shifted = &m.r1 - &m.h_f1 * delta;
        for i in 0..m.r1.len() {
            r[row + i] = shifted[i] * w;
            for j in 0..d {
                h_f[(row + i, j)] = m.h_f1[(i, j)] * w;
            }
        }
        neighbors.push((m.sender_id, m.h_x1.clone() * w, m.p_block.clone()));
        row += m.r1.len();
    }
    Ok(StackedCommon { feature_id, r, h_f, own_h, neighbors })
}

/// The feature-free common system after the second nullspace projection,
/// with the per-robot column blocks kept separate.
#[derive(Debug)]
pub struct ProjectedCommon {
    pub feature_id: u64,
    pub r: DVector<f64>,
    pub own_h: DMatrix<f64>,
    pub neighbors: Vec<(usize, DMatrix<f64>, DMatrix<f64>)>,
}

/// Projects the stacked common feature out, keeping per-robot blocks.
pub fn project_common(stacked: &StackedCommon) -> Result<ProjectedCommon> {
    let rows = stacked.r.len();
    let d = stacked.h_f.ncols();
    if rows <= d {
        // a single participant carries no feature-free information
        return Err(Error::RankDeficientFeature);
    }
    let qr = stacked.h_f.clone().qr();
    let r_factor = qr.r();
    let max_diag = (0..d).map(|i| r_factor[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..d {
        if max_diag <= 0.0 || r_factor[(i, i)].abs() < 1e-8 * max_diag {
            return Err(Error::RankDeficientFeature);
        }
    }

    let own_rows = stacked.own_h.nrows();
    let own_cols = stacked.own_h.ncols();
    let apply = |block: &DMatrix<f64>, row0: usize| -> DMatrix<f64> {
        let mut padded = DMatrix::zeros(rows, block.ncols());
        padded.view_mut((row0, 0), (block.nrows(), block.ncols())).copy_from(block);
        qr.q_tr_mul(&mut padded);
        padded.view((d, 0), (rows - d, block.ncols())).clone_owned()
    };

    let mut r_col = DMatrix::zeros(rows, 1);
    r_col.view_mut((0, 0), (rows, 1)).copy_from(&stacked.r);
    qr.q_tr_mul(&mut r_col);
    let r_prime = r_col.view((d, 0), (rows - d, 1)).column(0).clone_owned();

    let own_h = apply(&stacked.own_h, 0);
    let mut row0 = own_rows;
    let mut neighbors = Vec::with_capacity(stacked.neighbors.len());
    for (id, h, p) in &stacked.neighbors {
        neighbors.push((*id, apply(h, row0), p.clone()));
        row0 += h.nrows();
    }
    let _ = own_cols;
    Ok(ProjectedCommon { feature_id: stacked.feature_id, r: r_prime, own_h, neighbors })
}

/// Selects CI weights for the given participants.
///
/// In [`WeightMode::TraceMin`] the own weight is chosen by a grid search over
/// (0, 1) minimizing the trace of the post-update covariance, with the
/// remaining mass split equally among the neighbors. The `1/ω_i` factor in
/// the covariance update inflates unconstrained directions, so the optimum
/// adapts: the larger the unconstrained covariance already is, the closer
/// the own weight moves to one. Equal weights do not adapt and inflate those
/// directions geometrically when applied every frame.
pub fn select_weights(
    own_id: usize,
    projected: &ProjectedCommon,
    state: &RobotState,
    mode: WeightMode,
) -> Result<CIWeights> {
    let mut ids: Vec<usize> = vec![own_id];
    ids.extend(projected.neighbors.iter().map(|(id, _, _)| *id));
    match mode {
        WeightMode::Equal => CIWeights::equal(&ids),
        WeightMode::FixedOwn(w_own) => {
            if ids.len() == 1 {
                return CIWeights::equal(&ids);
            }
            let w_own = w_own.clamp(1e-3, 1.0 - 1e-3);
            let share = (1.0 - w_own) / (ids.len() - 1) as f64;
            let mut w = BTreeMap::new();
            w.insert(own_id, w_own);
            for (id, _, _) in &projected.neighbors {
                w.insert(*id, share);
            }
            CIWeights::new(w)
        }
        WeightMode::TraceMin => {
            if ids.len() == 1 {
                return CIWeights::equal(&ids);
            }
            let j = ids.len() - 1;
            // precompute the candidate-independent pieces:
            //   S(ω) = A/ω + Σ B_l·j/(1−ω) + I,  tr(K H P) = tr(S⁻¹ C)/ω
            let rows = projected.r.len();
            let hp = &projected.own_h * &state.cov;
            let a = &hp * projected.own_h.transpose();
            let c = &hp * hp.transpose();
            let mut b_sum = DMatrix::zeros(rows, rows);
            for (_, h, p) in &projected.neighbors {
                b_sum += h * p * h.transpose();
            }
            let tr_p = state.cov.trace();
            let eval_k = |k: usize| -> Option<f64> {
                let w_own = k as f64 / 1000.0;
                let share = (1.0 - w_own) / j as f64;
                let mut s = &a / w_own + &b_sum / share;
                for i in 0..rows {
                    s[(i, i)] += 1.0;
                }
                let ch = s.cholesky()?;
                let tr_gain = ch.solve(&c).trace() / w_own;
                Some((tr_p - tr_gain) / w_own)
            };
            // coarse-to-fine over the 1/1000 grid (the objective is smooth
            // in the own weight)
            let mut best = (f64::INFINITY, 500usize);
            for k in (25..1000).step_by(25) {
                if let Some(tr) = eval_k(k) {
                    if tr < best.0 {
                        best = (tr, k);
                    }
                }
            }
            let lo = best.1.saturating_sub(24).max(1);
            let hi = (best.1 + 24).min(999);
            for k in lo..=hi {
                if let Some(tr) = eval_k(k) {
                    if tr < best.0 {
                        best = (tr, k);
                    }
                }
            }
            let w_own = best.1 as f64 / 1000.0;
            let share = (1.0 - w_own) / j as f64;
            let mut w = BTreeMap::new();
            w.insert(own_id, w_own);
            for (id, _, _) in &projected.neighbors {
                w.insert(*id, share);
            }
            CIWeights::new(w)
        }
    }
}

fn ci_innovation(
    state: &RobotState,
    projected: &ProjectedCommon,
    weights: &CIWeights,
    own_id: usize,
    naive: bool,
) -> Result<DMatrix<f64>> {
    let rows = projected.r.len();
    let w_own = if naive { 1.0 } else { weights.get(own_id).ok_or_else(|| Error::InvalidWeights("missing own weight".into()))? };
    let mut s = &projected.own_h * &state.cov * projected.own_h.transpose() / w_own;
    for (id, h, p) in &projected.neighbors {
        let w = if naive { 1.0 } else { weights.get(*id).ok_or_else(|| Error::InvalidWeights(format!("missing weight for {id}")))? };
        s += h * p * h.transpose() / w;
    }
    for i in 0..rows {
        s[(i, i)] += 1.0;
    }
    Ok(s)
}

/// Merges several per-feature projected systems into one frame-level system
/// over the union of participants.
///
/// Each input is the second-projection output of one common feature; blocks
/// of senders that did not participate in a given feature are zero-padded,
/// and every sender's covariance slice is frame-wise identical, so a single
/// CI update (one weight vector, one inflation) fuses the whole frame.
pub fn merge_projected(
    feature_systems: Vec<ProjectedCommon>,
) -> Result<ProjectedCommon> {
    if feature_systems.is_empty() {
        return Err(Error::RankDeficientFeature);
    }
    let own_cols = feature_systems[0].own_h.ncols();
    let mut senders: Vec<usize> = Vec::new();
    let mut widths: BTreeMap<usize, usize> = BTreeMap::new();
    let mut p_blocks: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
    for sys in &feature_systems {
        for (id, h, p) in &sys.neighbors {
            if !senders.contains(id) {
                senders.push(*id);
                widths.insert(*id, h.ncols());
                p_blocks.insert(*id, p.clone());
            } else if widths[id] != h.ncols() {
                return Err(Error::DimensionMismatch { expected: widths[id], got: h.ncols() });
            }
        }
    }
    senders.sort_unstable();
    let total_rows: usize = feature_systems.iter().map(|s| s.r.len()).sum();
    let mut r = DVector::zeros(total_rows);
    let mut own_h = DMatrix::zeros(total_rows, own_cols);
    let mut stacked: BTreeMap<usize, DMatrix<f64>> = senders
        .iter()
        .map(|id| (*id, DMatrix::zeros(total_rows, widths[id])))
        .collect();
    let mut row = 0;
    for sys in &feature_systems {
        let n = sys.r.len();
        r.rows_mut(row, n).copy_from(&sys.r);
        own_h.view_mut((row, 0), (n, own_cols)).copy_from(&sys.own_h);
        for (id, h, _) in &sys.neighbors {
            stacked.get_mut(id).unwrap().view_mut((row, 0), (n, h.ncols())).copy_from(h);
        }
        row += n;
    }
    Ok(ProjectedCommon {
        feature_id: feature_systems[0].feature_id,
        r,
        own_h,
        neighbors: senders
            .into_iter()
            .map(|id| {
                let h = stacked.remove(&id).unwrap();
                let p = p_blocks.remove(&id).unwrap();
                (id, h, p)
            })
            .collect(),
    })
}

/// Outcome counters of one CI update.
#[derive(Debug, Clone, Copy, Default)]
pub struct CiOutcome {
    pub applied: bool,
    pub neighbors: usize,
    pub rows: usize,
}

/// Applies the covariance-intersection update for one common feature.
///
/// With `naive` set, the weights are ignored (all treated as one), which
/// double-counts shared information over time; it exists as a consistency
/// baseline for the benchmark and must not be used in production.
pub fn ci_update(
    state: &mut RobotState,
    projected: &ProjectedCommon,
    weights: &CIWeights,
    naive: bool,
) -> Result<CiOutcome> {
    if projected.r.is_empty() {
        return Ok(CiOutcome::default());
    }
    let expected = 1 + projected.neighbors.len();
    if !naive && weights.len() != expected {
        return Err(Error::InvalidWeights(format!(
            "{} weights for {} participants",
            weights.len(),
            expected
        )));
    }
    let own_id = state.robot_id;
    let w_own = if naive { 1.0 } else { weights.get(own_id).ok_or_else(|| Error::InvalidWeights("missing own weight".into()))? };

    let s = ci_innovation(state, projected, weights, own_id, naive)?;
    // condition gate: skip the update rather than destabilize the filter
    let svd = s.clone().svd(false, false);
    let smax = svd.singular_values[0];
    let smin = svd.singular_values[svd.singular_values.len() - 1];
    if smin <= 0.0 || smax / smin > 1e12 {
        return Err(Error::SingularInnovation(smax / smin.max(f64::MIN_POSITIVE)));
    }
    let ch = s.cholesky().ok_or(Error::SingularInnovation(f64::INFINITY))?;
    let hp = &projected.own_h * &state.cov;
    let solved = ch.solve(&hp);
    if !naive {
        // fusing pays only when the contraction outweighs the 1/ω inflation;
        // otherwise the no-op is strictly better and the update is skipped
        let gain = solved.component_mul(&hp).sum() / w_own;
        let tr_post = (state.cov.trace() - gain) / w_own;
        if tr_post >= state.cov.trace() {
            return Ok(CiOutcome::default());
        }
    }
    let k = solved.transpose() / w_own;
    let dx = &k * &projected.r;

    state.cov = (&state.cov - &k * &hp) / w_own;
    state.symmetrize();
    state.apply_correction(&dx)?;
    state.check_psd(1e-9)?;
    Ok(CiOutcome { applied: true, neighbors: projected.neighbors.len(), rows: projected.r.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::UnitQuaternion;
    use crate::meas::{CameraModel, FeatureEstimate, PointObservation, TriangulatedFeature};
    use crate::msckf::{nullspace_project, stack_point_feature, LinearizationOptions};
    use crate::state::{CalibState, ImuState};
    use nalgebra::{Vector2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// reference implementation of the post-update trace, used as the
    /// grid-search oracle
    fn ci_posterior_trace(
        state: &RobotState,
        projected: &ProjectedCommon,
        weights: &CIWeights,
        own_id: usize,
    ) -> Result<f64> {
        let w_own = weights.get(own_id).unwrap();
        let s = ci_innovation(state, projected, weights, own_id, false)?;
        let ch = s.cholesky().ok_or(Error::SingularInnovation(f64::INFINITY))?;
        let hp = &projected.own_h * &state.cov;
        let k = ch.solve(&hp).transpose() / w_own;
        let post = (&state.cov - &k * &hp) / w_own;
        Ok(post.trace())
    }

    fn make_state(robot_id: usize, num_clones: usize, shift: f64) -> RobotState {
        let base: Vec<f64> = (0..22).map(|i| 0.01 + 0.001 * i as f64).collect();
        let mut s = RobotState::new(robot_id, ImuState::default(), CalibState::default(), 0.0, &base, 11);
        for k in 0..num_clones {
            s.imu.p_iing = Vector3::new(0.3 * k as f64 + shift, 0.05 * k as f64, 0.0);
            s.imu.q_gtoi = UnitQuaternion::from_axis_angle(&Vector3::z(), 0.02 * k as f64);
            s.clone_at(k as f64 * 0.05).unwrap();
        }
        s
    }

    fn top_for(
        state: &RobotState,
        p_g: &Vector3<f64>,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> (TopBlock, FeatureEstimate, f64) {
        let mut track: Vec<PointObservation> = state
            .clones
            .iter()
            .map(|c| PointObservation {
                feature_id: 9,
                robot_id: state.robot_id,
                cam_timestamp: c.timestamp,
                uv_normalized: {
                    let uv = crate::meas::predict_point(p_g, c, &state.calib, 1e-4).unwrap();
                    Vector2::new(uv.x, uv.y)
                },
            })
            .collect();
        if noise > 0.0 {
            for o in &mut track {
                o.uv_normalized.x += rng.random_range(-noise..noise);
                o.uv_normalized.y += rng.random_range(-noise..noise);
            }
        }
        let feature = TriangulatedFeature { feature_id: 9, estimate: FeatureEstimate::Point(*p_g) };
        let cam = CameraModel::default();
        let opts = LinearizationOptions { fej: false, ..Default::default() };
        let s = stack_point_feature(state, &feature, &track, &cam, &opts).unwrap();
        let p = nullspace_project(&s).unwrap();
        (p.top, feature.estimate, p.sigma)
    }

    #[test]
    fn weights_validation() {
        let w = CIWeights::equal(&[0, 1, 2]).unwrap();
        let sum: f64 = w.participants().map(|(_, v)| v).sum();
        assert!((sum - 1.0).abs() < 1e-15);
        assert!((w.get(0).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        let solo = CIWeights::equal(&[5]).unwrap();
        assert_eq!(solo.get(5), Some(1.0));

        let mut bad = BTreeMap::new();
        bad.insert(0usize, 0.7);
        bad.insert(1usize, 0.7);
        assert!(matches!(CIWeights::new(bad), Err(Error::InvalidWeights(_))));
        let mut neg = BTreeMap::new();
        neg.insert(0usize, 1.5);
        neg.insert(1usize, -0.5);
        assert!(matches!(CIWeights::new(neg), Err(Error::InvalidWeights(_))));
    }

    #[test]
    fn own_only_stack_is_square_and_projection_degenerates() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let state = make_state(0, 4, 0.0);
        let (top, est, sigma) = top_for(&state, &Vector3::new(0.4, -0.2, 5.0), 1e-3, &mut rng);
        let stacked = stack_common(0, 9, &top, &est, sigma, &[]).unwrap();
        assert_eq!(stacked.r.len(), 3);
        assert_eq!(stacked.h_f.shape(), (3, 3));
        // whitened copy of the own block
        assert!((&stacked.r * sigma - &top.r1).norm() < 1e-12);
        // no feature-free rows remain for a single participant
        assert!(matches!(project_common(&stacked), Err(Error::RankDeficientFeature)));
    }

    #[test]
    fn one_neighbor_dimension_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let state_a = make_state(0, 4, 0.0);
        let state_b = make_state(1, 4, 0.5);
        let p_g = Vector3::new(0.4, -0.2, 5.0);
        let (top_a, est_a, sig_a) = top_for(&state_a, &p_g, 1e-3, &mut rng);
        let (top_b, est_b, sig_b) = top_for(&state_b, &p_g, 1e-3, &mut rng);
        let msg = CommonFeatureMessage::from_top(&state_b, 9, &top_b, &est_b, sig_b);
        assert_eq!(msg.r1.len(), 3);
        let stacked = stack_common(0, 9, &top_a, &est_a, sig_a, &[msg]).unwrap();
        assert_eq!(stacked.r.len(), 6);
        assert_eq!(stacked.h_f.shape(), (6, 3));
        assert_eq!(stacked.neighbors.len(), 1);
        let projected = project_common(&stacked).unwrap();
        assert_eq!(projected.r.len(), 3);
        // post-projection stacked feature Jacobian vanished: verify via QR
        let qr = stacked.h_f.clone().qr();
        let mut hf = stacked.h_f.clone();
        qr.q_tr_mul(&mut hf);
        assert!(hf.view((3, 0), (3, 3)).abs().max() < 1e-10);
    }

    #[test]
    fn mismatched_feature_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let state_a = make_state(0, 4, 0.0);
        let state_b = make_state(1, 4, 0.5);
        let p_g = Vector3::new(0.4, -0.2, 5.0);
        let (top_a, est_a, sig_a) = top_for(&state_a, &p_g, 1e-3, &mut rng);
        let (top_b, est_b, sig_b) = top_for(&state_b, &p_g, 1e-3, &mut rng);
        let mut msg = CommonFeatureMessage::from_top(&state_b, 9, &top_b, &est_b, sig_b);
        msg.feature_id = 77;
        assert!(matches!(
            stack_common(0, 9, &top_a, &est_a, sig_a, &[msg]),
            Err(Error::FeatureMismatch(77, 9))
        ));
    }

    #[test]
    fn single_robot_unit_weight_reduces_to_ekf() {
        // CI with one participant and weight one must equal the plain EKF
        // update on the same rows
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let state = make_state(0, 4, 0.0);
        let p_g = Vector3::new(0.4, -0.2, 5.0);
        let (top, _est, _sig) = top_for(&state, &p_g, 1e-3, &mut rng);

        // fabricate a two-block system, then strip the neighbor so the
        // projected rows exist: instead, build the projected system by hand
        // from the whitened own top (rows > d requires a neighbor; use the
        // bottom rows of a taller stack).
        let d = top.h_f1.ncols();
        let rows = top.r1.len();
        assert_eq!(rows, d);
        // use the raw top as a feature-free system directly (H_f ignored):
        let projected = ProjectedCommon {
            feature_id: 9,
            r: top.r1.clone(),
            own_h: top.h_x1.clone(),
            neighbors: vec![],
        };
        let weights = CIWeights::equal(&[0]).unwrap();

        let mut ci_state = state.clone();
        // whiten manually for the EKF comparison: ci path assumes whitened
        ci_update(&mut ci_state, &projected, &weights, false).unwrap();

        let mut ekf_state = state.clone();
        crate::msckf::ekf_update(
            &mut ekf_state,
            &[(top.r1.clone(), top.h_x1.clone(), 1.0)],
        )
        .unwrap();

        assert!((ci_state.cov.clone() - ekf_state.cov.clone()).abs().max() < 1e-10);
        assert!((ci_state.imu.p_iing - ekf_state.imu.p_iing).norm() < 1e-12);
    }

    #[test]
    fn zero_residual_changes_covariance_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let state_a = make_state(0, 4, 0.0);
        let mut state_b = make_state(1, 4, 0.5);
        // a confident neighbor makes the fusion clearly worthwhile
        state_b.cov *= 0.01;
        let p_g = Vector3::new(0.4, -0.2, 5.0);
        let (top_a, est_a, sig_a) = top_for(&state_a, &p_g, 0.0, &mut rng);
        let (top_b, est_b, sig_b) = top_for(&state_b, &p_g, 0.0, &mut rng);
        let msg = CommonFeatureMessage::from_top(&state_b, 9, &top_b, &est_b, sig_b);
        let stacked = stack_common(0, 9, &top_a, &est_a, sig_a, &[msg]).unwrap();
        let mut projected = project_common(&stacked).unwrap();
        projected.r.fill(0.0);
        let weights = CIWeights::equal(&[0, 1]).unwrap();
        let mut state = state_a.clone();
        let before = state.clone();
        ci_update(&mut state, &projected, &weights, false).unwrap();
        assert!((state.imu.p_iing - before.imu.p_iing).norm() < 1e-12);
        assert!((state.cov.clone() - before.cov.clone()).abs().max() > 0.0);
    }

    #[test]
    fn permutation_of_messages_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let state_a = make_state(0, 4, 0.0);
        let state_b = make_state(1, 4, 0.5);
        let state_c = make_state(2, 4, -0.5);
        let p_g = Vector3::new(0.4, -0.2, 5.0);
        let (top_a, est_a, sig_a) = top_for(&state_a, &p_g, 1e-3, &mut rng);
        let (top_b, est_b, sig_b) = top_for(&state_b, &p_g, 1e-3, &mut rng);
        let (top_c, est_c, sig_c) = top_for(&state_c, &p_g, 1e-3, &mut rng);
        let m_b = CommonFeatureMessage::from_top(&state_b, 9, &top_b, &est_b, sig_b);
        let m_c = CommonFeatureMessage::from_top(&state_c, 9, &top_c, &est_c, sig_c);

        let weights = CIWeights::equal(&[0, 1, 2]).unwrap();
        let run = |msgs: Vec<CommonFeatureMessage>| {
            let stacked = stack_common(0, 9, &top_a, &est_a, sig_a, &msgs).unwrap();
            let projected = project_common(&stacked).unwrap();
            let mut st = state_a.clone();
            ci_update(&mut st, &projected, &weights, false).unwrap();
            st
        };
        let fwd = run(vec![m_b.clone(), m_c.clone()]);
        let rev = run(vec![m_c, m_b]);
        assert!((fwd.cov.clone() - rev.cov.clone()).abs().max() < 1e-12);
        assert!((fwd.imu.p_iing - rev.imu.p_iing).norm() < 1e-12);
    }

    #[test]
    fn symmetric_two_robot_case_produces_identical_gains() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        // identical states and observations: both robots compute the same update
        let state_a = make_state(0, 4, 0.0);
        let mut state_b = state_a.clone();
        state_b.robot_id = 1;
        let p_g = Vector3::new(0.4, -0.2, 5.0);
        let (top_a, est_a, sig_a) = top_for(&state_a, &p_g, 1e-3, &mut rng);
        // identical geometry: reuse the same top for B
        let top_b = top_a.clone();
        let est_b = est_a.clone();
        let m_a = CommonFeatureMessage::from_top(&state_a, 9, &top_a, &est_a, sig_a);
        let m_b = CommonFeatureMessage::from_top(&state_b, 9, &top_b, &est_b, sig_a);

        let weights = CIWeights::equal(&[0, 1]).unwrap();
        let mut sa = state_a.clone();
        let stacked_a = stack_common(0, 9, &top_a, &est_a, sig_a, &[m_b]).unwrap();
        ci_update(&mut sa, &project_common(&stacked_a).unwrap(), &weights, false).unwrap();

        let mut sb = state_b.clone();
        let stacked_b = stack_common(1, 9, &top_b, &est_b, sig_a, &[m_a]).unwrap();
        ci_update(&mut sb, &project_common(&stacked_b).unwrap(), &weights, false).unwrap();

        assert!((sa.cov.clone() - sb.cov.clone()).abs().max() < 1e-10);
        assert!((sa.imu.p_iing - sb.imu.p_iing).norm() < 1e-10);
    }

    #[test]
    fn trace_min_weights_beat_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let state_a = make_state(0, 4, 0.0);
        let mut state_b = make_state(1, 4, 0.5);
        // make the neighbor much more certain so the optimum is asymmetric
        state_b.cov *= 0.1;
        let p_g = Vector3::new(0.4, -0.2, 5.0);
        let (top_a, est_a, sig_a) = top_for(&state_a, &p_g, 1e-3, &mut rng);
        let (top_b, est_b, sig_b) = top_for(&state_b, &p_g, 1e-3, &mut rng);
        let msg = CommonFeatureMessage::from_top(&state_b, 9, &top_b, &est_b, sig_b);
        let stacked = stack_common(0, 9, &top_a, &est_a, sig_a, &[msg]).unwrap();
        let projected = project_common(&stacked).unwrap();

        let best = select_weights(0, &projected, &state_a, WeightMode::TraceMin).unwrap();
        let best_trace = ci_posterior_trace(&state_a, &projected, &best, 0).unwrap();
        // oracle: independent grid of 999 candidates
        let mut oracle_best = f64::INFINITY;
        for k in 1..1000 {
            let w_own = k as f64 / 1000.0;
            let mut w = BTreeMap::new();
            w.insert(0usize, w_own);
            w.insert(1usize, 1.0 - w_own);
            let Ok(ws) = CIWeights::new(w) else { continue };
            if let Ok(tr) = ci_posterior_trace(&state_a, &projected, &ws, 0) {
                oracle_best = oracle_best.min(tr);
            }
        }
        assert!(best_trace <= oracle_best + 1e-9);
    }

    #[test]
    fn message_json_schema_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let state = make_state(1, 4, 0.5);
        let (top, est, sigma) = top_for(&state, &Vector3::new(0.4, -0.2, 5.0), 1e-3, &mut rng);
        let msg = CommonFeatureMessage::from_top(&state, 9, &top, &est, sigma);
        let text = serde_json::to_string(&msg).unwrap();
        for key in ["version", "sender_id", "feature_id", "r1", "H_x1", "H_f1", "P_block", "feature", "sigma", "clone_timestamps"] {
            assert!(text.contains(&format!("\"{key}\"")), "missing {key}");
        }
        assert!(msg.payload_bytes() > 0);
        let back: CommonFeatureMessage = serde_json::from_str(&text).unwrap();
        assert_eq!(back.sender_id, 1);
        assert_eq!(back.h_x1, msg.h_x1);
        // compact block: only touched columns travel
        assert!(msg.h_x1.ncols() < state.err_dim());
        assert_eq!(msg.p_block.nrows(), msg.h_x1.ncols());
    }
}
