//! Metrics (EPE, Chamfer-l2, correspondence accuracy), unsupervised part
//! segmentation via k-means on first-layer EdgeConv features, and latent
//! applications: transfer, interpolation, densification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graphnet::{pos_encode, Binder, NetError};
use crate::knn::{self, KnnError};
use crate::model::GnpmModel;
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("cannot form {clusters} clusters from {points} points")]
    TooManyClusters { clusters: usize, points: usize },
    #[error("point counts differ: {a} vs {b}")]
    CountMismatch { a: usize, b: usize },
}

/// Symmetric Chamfer-l2: mean squared nearest-neighbor distance from A to B
/// plus the same from B to A. Inputs are `[N,3]` and `[P,3]` row-major.
pub fn chamfer_l2(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    let n = a.len() / 3;
    let p = b.len() / 3;
    let (_, d_ab) = knn::nn_query(a, n, b, p, 3)?;
    let (_, d_ba) = knn::nn_query(b, p, a, n, 3)?;
    let fwd: f64 = d_ab.iter().sum::<f64>() / n as f64;
    let rev: f64 = d_ba.iter().sum::<f64>() / p as f64;
    Ok(fwd + rev)
}

/// End-point error: mean Euclidean norm of the difference between predicted
/// and ground-truth keyframe-to-frame deformation vectors. The keyframe is
/// each sequence's first frame.
pub fn epe(pred_deform: &[f64], gt_deform: &[f64]) -> Result<f64, EvalError> {
    if pred_deform.len() != gt_deform.len() {
        return Err(EvalError::CountMismatch {
            a: pred_deform.len() / 3,
            b: gt_deform.len() / 3,
        });
    }
    let n = pred_deform.len() / 3;
    let mut sum = 0.0;
    for i in 0..n {
        let mut d2 = 0.0;
        for c in 0..3 {
            let d = pred_deform[i * 3 + c] - gt_deform[i * 3 + c];
            d2 += d * d;
        }
        sum += d2.sqrt();
    }
    Ok(sum / n as f64)
}

/// Fraction of points whose predicted position lies within `radius` of the
/// ground-truth position of the same index.
pub fn correspondence_accuracy(pred: &[f64], gt: &[f64], radius: f64) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::CountMismatch {
            a: pred.len() / 3,
            b: gt.len() / 3,
        });
    }
    let n = pred.len() / 3;
    let r2 = radius * radius;
    let hits = (0..n)
        .filter(|&i| {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = pred[i * 3 + c] - gt[i * 3 + c];
                d2 += d * d;
            }
            d2 <= r2
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Default correspondence-accuracy radius: 5% of the bounding-box diagonal.
pub fn default_accuracy_radius(diagonal: f64) -> f64 {
    0.05 * diagonal
}

#[derive(Debug, Clone)]
pub struct FrameMetrics {
    pub sequence: String,
    pub frame: usize,
    pub epe: f64,
    pub chamfer: f64,
    pub corr_accuracy: f64,
}

/// Per-frame metric rows plus their means. Aggregates are recomputed from
/// the rows, never stored independently.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub seed: u64,
    pub rows: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn aggregate(&self) -> (f64, f64, f64) {
        let n = self.rows.len().max(1) as f64;
        let e = self.rows.iter().map(|r| r.epe).sum::<f64>() / n;
        let c = self.rows.iter().map(|r| r.chamfer).sum::<f64>() / n;
        let a = self.rows.iter().map(|r| r.corr_accuracy).sum::<f64>() / n;
        (e, c, a)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,frame,epe,chamfer_l2,corr_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.sequence, r.frame, r.epe, r.chamfer, r.corr_accuracy
            ));
        }
        let (e, c, a) = self.aggregate();
        out.push_str(&format!("AGGREGATE,,{e},{c},{a}\n"));
        out
    }

    pub fn summary(&self) -> String {
        let (e, c, a) = self.aggregate();
        format!(
            "checkpoint {} dataset {} seed {}: {} frames, mean EPE {:.6}, mean Chamfer-l2 {:.6}, corr accuracy {:.4}",
            self.checkpoint_id,
            self.dataset_id,
            self.seed,
            self.rows.len(),
            e,
            c,
            a
        )
    }
}

/// Seeded k-means with k-means++ initialization. Runs `iters` iterations or
/// until assignments stop changing; an emptied cluster is reseeded to the
/// point farthest from its centroid.
pub fn kmeans(
    features: &[f64],
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
    iters: usize,
) -> Result<Vec<usize>, EvalError> {
    if k == 0 || k > n {
        return Err(EvalError::TooManyClusters {
            clusters: k,
            points: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |i: usize| &features[i * d..(i + 1) * d];
    let dist2 =
        |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    // k-means++ seeding: first centroid uniform, then proportional to the
    // squared distance to the nearest chosen centroid.
    let mut centroids: Vec<f64> = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut best = vec![f64::INFINITY; n];
    while centroids.len() < k * d {
        let c = &centroids[centroids.len() - d..];
        for i in 0..n {
            best[i] = best[i].min(dist2(row(i), c));
        }
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(row(next));
    }
    let mut labels = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for i in 0..n {
            let mut bl = 0;
            let mut bd = f64::INFINITY;
            for c in 0..k {
                let dd = dist2(row(i), &centroids[c * d..(c + 1) * d]);
                if dd < bd {
                    bd = dd;
                    bl = c;
                }
            }
            if labels[i] != bl {
                labels[i] = bl;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0f64; k * d];
        for i in 0..n {
            counts[labels[i]] += 1;
            for c in 0..d {
                sums[labels[i] * d + c] += features[i * d + c];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed to the point farthest from its current centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(row(a), &centroids[labels[a] * d..(labels[a] + 1) * d]);
                        let db = dist2(row(b), &centroids[labels[b] * d..(labels[b] + 1) * d]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c * d..(c + 1) * d].copy_from_slice(row(far));
                labels[far] = c;
                changed = true;
            } else {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(labels)
}

/// Unsupervised part segmentation: cluster the first EdgeConv layer's
/// per-point features of the forward network.
pub fn segment_parts<E: Scalar>(
    model: &GnpmModel<E>,
    points: &[E],
    n: usize,
    shape_code: &[E],
    pose_code: &[E],
    n_clusters: usize,
    seed: u64,
) -> Result<Vec<usize>, EvalError> {
    let tape = crate::tensor::Tape::new();
    let x = tape.constant(&[n, 3], points.to_vec());
    let s = tape.constant(&[shape_code.len()], shape_code.to_vec());
    let p = tape.constant(&[pose_code.len()], pose_code.to_vec());
    let enc = pos_encode(&tape, x, &model.cfg.pe)?;
    let feats = model.fwd.first_layer_features(&tape, enc, s, p)?;
    let d = tape.shape(feats)[1];
    let fv: Vec<f64> = tape.values(feats).iter().map(|&v| v.to_f64()).collect();
    kmeans(&fv, n, d, n_clusters, seed, 50)
}

/// Cluster purity against ground-truth labels: each cluster votes for its
/// majority label; purity is the covered fraction.
pub fn purity(labels: &[usize], gt: &[usize]) -> f64 {
    assert_eq!(labels.len(), gt.len());
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let g = gt.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0usize; k * g];
    for (&l, &t) in labels.iter().zip(gt) {
        table[l * g + t] += 1;
    }
    let covered: usize = (0..k)
        .map(|c| (0..g).map(|t| table[c * g + t]).max().unwrap_or(0))
        .sum();
    covered as f64 / labels.len() as f64
}

/// Pose a canonical cloud with arbitrary codes: the backward network maps
/// canonical points to the posed configuration. Swapping the shape code
/// transfers identity; swapping the pose code transfers pose.
pub fn transfer<E: Scalar>(
    model: &GnpmModel<E>,
    canonical: &[E],
    n: usize,
    shape_code: &[E],
    pose_code: &[E],
) -> Result<Vec<E>, EvalError> {
    let tape = crate::tensor::Tape::new();
    let y = tape.constant(&[n, 3], canonical.to_vec());
    let s = tape.constant(&[shape_code.len()], shape_code.to_vec());
    let p = tape.constant(&[pose_code.len()], pose_code.to_vec());
    let mut binder = Binder::frozen();
    let out = model.backward_deform(&tape, y, s, p, &mut binder)?;
    Ok(tape.values(out.points))
}

/// Predict frame `f` from the sequence's keyframe: map the keyframe cloud
/// to canonical with the forward network under the keyframe's pose code,
/// then back out with the backward network under frame f's pose code.
/// Output point `i` corresponds to keyframe point `i`.
pub fn reconstruct_from_keyframe<E: Scalar>(
    model: &GnpmModel<E>,
    keyframe: &[E],
    n: usize,
    shape_code: &[E],
    pose_key: &[E],
    pose_f: &[E],
) -> Result<Vec<E>, EvalError> {
    let tape = crate::tensor::Tape::new();
    let x = tape.constant(&[n, 3], keyframe.to_vec());
    let s = tape.constant(&[shape_code.len()], shape_code.to_vec());
    let pk = tape.constant(&[pose_key.len()], pose_key.to_vec());
    let pf = tape.constant(&[pose_f.len()], pose_f.to_vec());
    let mut binder = Binder::frozen();
    let canon = model.forward_deform(&tape, x, s, pk, &mut binder)?;
    let posed = model.backward_deform(&tape, canon.points, s, pf, &mut binder)?;
    Ok(tape.values(posed.points))
}

/// Linear interpolation between two codes, `t` in [0, 1].
pub fn interpolate<E: Scalar>(a: &[E], b: &[E], t: f64) -> Vec<E> {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| E::from_f64((1.0 - t) * x.to_f64() + t * y.to_f64()))
        .collect()
}

/// Densify a fitted frame: sample `target_n` canonical points (uniform,
/// seeded, without replacement) and evaluate the backward deformation in
/// chunks of `chunk` points. Chunking only bounds peak tape size; outputs
/// are concatenated in sample order.
pub fn densify<E: Scalar>(
    model: &GnpmModel<E>,
    canonical: &[E],
    n0: usize,
    shape_code: &[E],
    pose_code: &[E],
    target_n: usize,
    chunk: usize,
    seed: u64,
) -> Result<Vec<E>, EvalError> {
    assert!(target_n <= n0, "cannot densify beyond the canonical cloud");
    let idx = crate::data::sample_points(n0, target_n, seed);
    let mut out = Vec::with_capacity(target_n * 3);
    let chunk = chunk.max(model.cfg.k + 1);
    for ch in idx.chunks(chunk) {
        let mut pts = Vec::with_capacity(ch.len() * 3);
        for &i in ch {
            pts.extend_from_slice(&canonical[i * 3..i * 3 + 3]);
        }
        let posed = transfer(model, &pts, ch.len(), shape_code, pose_code)?;
        out.extend_from_slice(&posed);
    }
    Ok(out)
}
