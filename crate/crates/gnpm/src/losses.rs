//! Loss terms, their schedules, and the assembled training/test objectives.
//!
//! Per-point sums are averaged over the point count so loss magnitudes are
//! invariant to cloud size and the same weights work across resolutions.
//! Code regularizers multiply the squared code norm by sigma directly
//! (the divisor reading of sigma = 1e-4 would swamp every other term).

use thiserror::Error;

use crate::knn::{self, KnnError};
use crate::model::Cycle;
use crate::tensor::{Scalar, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Knn(#[from] KnnError),
}

/// Loss weights and schedules. `lambda_icp` is cosine-annealed per epoch;
/// the loop term always has weight 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_icp_init: f64,
    pub lambda_icp_min: f64,
    pub lambda_temp: f64,
    pub sigma_shape: f64,
    pub sigma_pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_icp_init: 1e-1,
            lambda_icp_min: 1e-2,
            lambda_temp: 5e-2,
            sigma_shape: 1e-4,
            sigma_pose: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn lambda_icp(&self, epoch: usize, total_epochs: usize) -> f64 {
        cosine_anneal(
            self.lambda_icp_init,
            self.lambda_icp_min,
            epoch,
            total_epochs,
        )
    }
}

/// `min + 0.5 (init - min) (1 + cos(pi epoch / total))`.
pub fn cosine_anneal(init: f64, min: f64, epoch: usize, total_epochs: usize) -> f64 {
    let t = if total_epochs == 0 {
        1.0
    } else {
        epoch as f64 / total_epochs as f64
    };
    min + 0.5 * (init - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Mean over points of the L1 distance between the cycle output and the
/// input: `sum |x_tilde - x| / N`.
pub fn l_loop<E: Scalar>(tape: &Tape<E>, x_tilde: Var, x: Var) -> Result<Var, LossError> {
    let n = tape.shape(x)[0];
    let d = tape.sub(x_tilde, x)?;
    let s = tape.reduce_sum(tape.abs(d));
    Ok(tape.mul_scalar(s, 1.0 / n as f64))
}

/// Anchor the predicted canonical cloud to the ground-truth canonical cloud:
/// mean squared distance from each predicted point to its nearest-neighbor
/// match. Matches are selected by the symmetric two-pass construction and are
/// fixed within the step; gradient flows through the prediction only.
pub fn l_icp<E: Scalar>(
    tape: &Tape<E>,
    y_tilde: Var,
    canonical_gt: &[E],
) -> Result<Var, LossError> {
    let shape = tape.shape(y_tilde);
    let (n, d) = (shape[0], shape[1]);
    let p = canonical_gt.len() / d;
    let pred = tape.values(y_tilde);
    let (idx, _) = knn::nn_symmetric(&pred, n, canonical_gt, p, d)?;
    let mut matched = Vec::with_capacity(n * d);
    for &j in &idx {
        matched.extend_from_slice(&canonical_gt[j * d..(j + 1) * d]);
    }
    let target = tape.constant(&[n, d], matched);
    let diff = tape.sub(y_tilde, target)?;
    let s = tape.reduce_sum(tape.square(diff));
    Ok(tape.mul_scalar(s, 1.0 / n as f64))
}

/// Mean L1 between consecutive pose codes.
pub fn l_latent_temporal<E: Scalar>(
    tape: &Tape<E>,
    pose_cur: Var,
    pose_next: Var,
) -> Result<Var, LossError> {
    let d = tape.sub(pose_cur, pose_next)?;
    Ok(tape.reduce_mean(tape.abs(d)))
}

/// Mean L1 between the current per-point displacements and the displacements
/// of each point's nearest neighbor in the next frame (precomputed, fixed).
pub fn l_spatial_temporal<E: Scalar>(
    tape: &Tape<E>,
    delta_cur: Var,
    matched_next: Var,
) -> Result<Var, LossError> {
    let n = tape.shape(delta_cur)[0];
    let d = tape.sub(delta_cur, matched_next)?;
    let s = tape.reduce_sum(tape.abs(d));
    Ok(tape.mul_scalar(s, 1.0 / n as f64))
}

/// Squared L2 norm of a latent code.
pub fn l_code_prior<E: Scalar>(tape: &Tape<E>, code: Var) -> Var {
    tape.reduce_sum(tape.square(code))
}

/// Mean L1 between supervised predictions and ground-truth correspondences.
pub fn l_reco<E: Scalar>(tape: &Tape<E>, pred: Var, gt: Var) -> Result<Var, LossError> {
    let n = tape.shape(pred)[0];
    let d = tape.sub(pred, gt)?;
    let s = tape.reduce_sum(tape.abs(d));
    Ok(tape.mul_scalar(s, 1.0 / n as f64))
}

/// Differentiable Chamfer-l2 between a predicted cloud and a fixed target:
/// both direction terms flow gradient through the prediction; matches are
/// fixed within the step.
pub fn chamfer_l2_var<E: Scalar>(tape: &Tape<E>, pred: Var, gt: &[E]) -> Result<Var, LossError> {
    let shape = tape.shape(pred);
    let (n, d) = (shape[0], shape[1]);
    let p = gt.len() / d;
    let pv = tape.values(pred);
    let (fwd_idx, _) = knn::nn_query(&pv, n, gt, p, d)?;
    let mut matched = Vec::with_capacity(n * d);
    for &j in &fwd_idx {
        matched.extend_from_slice(&gt[j * d..(j + 1) * d]);
    }
    let target = tape.constant(&[n, d], matched);
    let diff = tape.sub(pred, target)?;
    let fwd = tape.mul_scalar(tape.reduce_sum(tape.square(diff)), 1.0 / n as f64);

    let (rev_idx, _) = knn::nn_query(gt, p, &pv, n, d)?;
    let gathered = tape.gather_rows(pred, &rev_idx)?;
    let gt_t = tape.constant(&[p, d], gt.to_vec());
    let rdiff = tape.sub(gathered, gt_t)?;
    let rev = tape.mul_scalar(tape.reduce_sum(tape.square(rdiff)), 1.0 / p as f64);
    Ok(tape.add(fwd, rev)?)
}

/// Per-frame loss terms, as tape vars and plain values for logging.
pub struct FrameTerms {
    pub total: Var,
    pub loop_: f64,
    pub icp: f64,
    pub lt: f64,
    pub st_a: f64,
    pub st_b: f64,
    pub prior_shape: f64,
    pub prior_pose: f64,
}

/// Matched next-frame displacement targets for the spatial-temporal terms,
/// evaluated without gradient and gathered by the input-to-input
/// nearest-neighbor matching.
pub struct StTargets {
    pub fwd_delta: Var,
    pub bwd_delta: Var,
}

/// Assemble the full self-supervised training objective for one frame:
/// `L_loop + lambda_icp L_icp + lambda_temp (L_lt + L_st_a + L_st_b)
/// + sigma_s ||s||^2 + sigma_p ||p||^2`.
#[allow(clippy::too_many_arguments)]
pub fn train_objective<E: Scalar>(
    tape: &Tape<E>,
    cycle: &Cycle,
    x: Var,
    canonical_gt: &[E],
    shape_code: Var,
    pose_code: Var,
    pose_next: Option<Var>,
    st_targets: Option<&StTargets>,
    weights: &LossWeights,
    lambda_icp: f64,
) -> Result<FrameTerms, LossError> {
    let loop_term = l_loop(tape, cycle.x_tilde, x)?;
    let icp_term = l_icp(tape, cycle.y_tilde, canonical_gt)?;
    let prior_s = l_code_prior(tape, shape_code);
    let prior_p = l_code_prior(tape, pose_code);

    let zero = tape.scalar(E::zero());
    let lt_term = match pose_next {
        Some(pn) => l_latent_temporal(tape, pose_code, pn)?,
        None => zero,
    };
    let (st_a, st_b) = match st_targets {
        Some(t) => (
            l_spatial_temporal(tape, cycle.delta_x, t.fwd_delta)?,
            l_spatial_temporal(tape, cycle.delta_y, t.bwd_delta)?,
        ),
        None => (zero, zero),
    };

    let mut total = loop_term;
    total = tape.add(total, tape.mul_scalar(icp_term, lambda_icp))?;
    total = tape.add(total, tape.mul_scalar(lt_term, weights.lambda_temp))?;
    total = tape.add(total, tape.mul_scalar(st_a, weights.lambda_temp))?;
    total = tape.add(total, tape.mul_scalar(st_b, weights.lambda_temp))?;
    total = tape.add(total, tape.mul_scalar(prior_s, weights.sigma_shape))?;
    total = tape.add(total, tape.mul_scalar(prior_p, weights.sigma_pose))?;

    Ok(FrameTerms {
        total,
        loop_: tape.value_scalar(loop_term).to_f64(),
        icp: tape.value_scalar(icp_term).to_f64(),
        lt: tape.value_scalar(lt_term).to_f64(),
        st_a: tape.value_scalar(st_a).to_f64(),
        st_b: tape.value_scalar(st_b).to_f64(),
        prior_shape: tape.value_scalar(prior_s).to_f64(),
        prior_pose: tape.value_scalar(prior_p).to_f64(),
    })
}

/// Test-time objective: loop consistency plus code priors only, with frozen
/// network weights. Gradients reach the codes alone.
pub fn test_objective<E: Scalar>(
    tape: &Tape<E>,
    x_tilde: Var,
    x: Var,
    shape_code: Var,
    pose_code: Var,
    weights: &LossWeights,
) -> Result<Var, LossError> {
    let loop_term = l_loop(tape, x_tilde, x)?;
    let prior_s = tape.mul_scalar(l_code_prior(tape, shape_code), weights.sigma_shape);
    let prior_p = tape.mul_scalar(l_code_prior(tape, pose_code), weights.sigma_pose);
    let t = tape.add(loop_term, prior_s)?;
    Ok(tape.add(t, prior_p)?)
}

/// Column order of the per-step loss log.
pub const LOSS_LOG_HEADER: &str =
    "step,epoch,loop,icp,lt,st_a,st_b,prior_s,prior_p,total,lambda_icp";

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn loop_zero_on_equal_clouds() {
        let tape: Tape<f64> = Tape::new();
        let pts = cloud(10, 0);
        let a = tape.constant(&[10, 3], pts.clone());
        let b = tape.constant(&[10, 3], pts);
        let l = l_loop(&tape, a, b).unwrap();
        assert_eq!(tape.value_scalar(l), 0.0);
    }

    #[test]
    fn loop_unit_offset() {
        let tape: Tape<f64> = Tape::new();
        let pts = cloud(10, 1);
        let shifted: Vec<f64> = pts
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % 3 == 0 { v + 1.0 } else { v })
            .collect();
        let a = tape.constant(&[10, 3], shifted);
        let b = tape.constant(&[10, 3], pts);
        let l = l_loop(&tape, a, b).unwrap();
        assert!((tape.value_scalar(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loop_matches_double_loop_oracle() {
        let tape: Tape<f64> = Tape::new();
        let a_v = cloud(17, 2);
        let b_v = cloud(17, 3);
        let a = tape.constant(&[17, 3], a_v.clone());
        let b = tape.constant(&[17, 3], b_v.clone());
        let l = l_loop(&tape, a, b).unwrap();
        let mut expect = 0.0;
        for i in 0..17 {
            for c in 0..3 {
                expect += (a_v[i * 3 + c] - b_v[i * 3 + c]).abs();
            }
        }
        expect /= 17.0;
        assert!((tape.value_scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn icp_zero_when_drawn_from_gt() {
        let tape: Tape<f64> = Tape::new();
        let gt = cloud(20, 4);
        let pred = tape.constant(&[10, 3], gt[..30].to_vec());
        let l = l_icp(&tape, pred, &gt).unwrap();
        assert_eq!(tape.value_scalar(l), 0.0);
    }

    #[test]
    fn icp_single_point_distance_squared() {
        let tape: Tape<f64> = Tape::new();
        let gt = vec![0.0, 0.0, 0.0];
        let pred = tape.constant(&[1, 3], vec![0.0, 3.0, 4.0]);
        let l = l_icp(&tape, pred, &gt).unwrap();
        assert!((tape.value_scalar(l) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn latent_temporal_values() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(&[128], vec![0.5; 128]);
        let b = tape.constant(&[128], vec![0.5; 128]);
        let l = l_latent_temporal(&tape, a, b).unwrap();
        assert_eq!(tape.value_scalar(l), 0.0);
        let mut v = vec![0.5; 128];
        v[7] += 1.0;
        let c = tape.constant(&[128], v);
        let l2 = l_latent_temporal(&tape, a, c).unwrap();
        assert!((tape.value_scalar(l2) - 1.0 / 128.0).abs() < 1e-15);
    }

    #[test]
    fn spatial_temporal_zero_on_static_sequence() {
        let tape: Tape<f64> = Tape::new();
        let d = cloud(12, 5);
        let a = tape.constant(&[12, 3], d.clone());
        let b = tape.constant(&[12, 3], d);
        let l = l_spatial_temporal(&tape, a, b).unwrap();
        assert_eq!(tape.value_scalar(l), 0.0);
    }

    #[test]
    fn spatial_temporal_matches_oracle() {
        let tape: Tape<f64> = Tape::new();
        let a_v = cloud(9, 6);
        let b_v = cloud(9, 7);
        let a = tape.constant(&[9, 3], a_v.clone());
        let b = tape.constant(&[9, 3], b_v.clone());
        let l = l_spatial_temporal(&tape, a, b).unwrap();
        let expect: f64 = a_v
            .iter()
            .zip(b_v.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 9.0;
        assert!((tape.value_scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn code_prior_values() {
        let tape: Tape<f64> = Tape::new();
        let z = tape.constant(&[8], vec![0.0; 8]);
        assert_eq!(tape.value_scalar(l_code_prior(&tape, z)), 0.0);
        let mut one_hot = vec![0.0; 8];
        one_hot[3] = 1.0;
        let o = tape.constant(&[8], one_hot);
        assert_eq!(tape.value_scalar(l_code_prior(&tape, o)), 1.0);
        let v: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let expect: f64 = v.iter().map(|x| x * x).sum();
        let r = tape.constant(&[8], v);
        assert!((tape.value_scalar(l_code_prior(&tape, r)) - expect).abs() < 1e-12);
    }

    #[test]
    fn cosine_anneal_endpoints() {
        assert!((cosine_anneal(0.1, 0.01, 0, 300) - 0.1).abs() < 1e-15);
        assert!((cosine_anneal(0.1, 0.01, 300, 300) - 0.01).abs() < 1e-15);
        assert!((cosine_anneal(0.1, 0.01, 150, 300) - 0.055).abs() < 1e-15);
    }

    #[test]
    fn cosine_anneal_monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for e in 0..=300 {
            let v = cosine_anneal(0.1, 0.01, e, 300);
            assert!(v <= prev + 1e-15);
            assert!((0.01..=0.1).contains(&v));
            prev = v;
        }
    }

    #[test]
    fn chamfer_var_zero_on_identical() {
        let tape: Tape<f64> = Tape::new();
        let pts = cloud(15, 8);
        let pred = tape.constant(&[15, 3], pts.clone());
        let l = chamfer_l2_var(&tape, pred, &pts).unwrap();
        assert_eq!(tape.value_scalar(l), 0.0);
    }
}
