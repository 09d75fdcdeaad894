//! Adam optimizer, learning-rate schedule, the full training loop, and
//! frozen-weight test-time latent fitting.
//!
//! One optimizer owns its model and latent bank. A batch is `batch_size`
//! frames, each evaluated on its own tape; gradients are accumulated by
//! parameter name and averaged before a single dense Adam update.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::TrainConfig;
use crate::data::{sample_points, Dataset};
use crate::graphnet::{Binder, NetError, Param};
use crate::knn;
use crate::losses::{
    l_code_prior, l_reco, test_objective, train_objective, LossError, LossWeights, StTargets,
    LOSS_LOG_HEADER,
};
use crate::model::{GnpmModel, LatentBank, SupervisedGnpm};
use crate::tensor::{Scalar, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Knn(#[from] knn::KnnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("gradient for {name} has {found} elements, parameter has {expected}")]
    GradShapeMismatch {
        name: String,
        found: usize,
        expected: usize,
    },
    #[error("identity {identity} has no canonical cloud")]
    MissingCanonical { identity: String },
    #[error("sequence {sequence} references unknown identity {identity}")]
    UnknownIdentity { sequence: String, identity: String },
    #[error("dataset has no training frames")]
    EmptyDataset,
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// Bias-corrected Adam with per-parameter moment vectors keyed by name.
/// Moments are kept in f64 regardless of parameter precision.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Advance the step counter. Call once per optimizer step, before the
    /// per-parameter updates of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update<E: Scalar>(
        &mut self,
        lr: f64,
        param: &mut Param<E>,
        grad: &[f64],
    ) -> Result<(), OptimError> {
        if grad.len() != param.values.len() {
            return Err(OptimError::GradShapeMismatch {
                name: param.name.clone(),
                found: grad.len(),
                expected: param.values.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGrad {
                name: param.name.clone(),
            });
        }
        let (m, v) = self
            .moments
            .entry(param.name.clone())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..grad.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let w = param.values[i].to_f64() - lr * mhat / (vhat.sqrt() + self.eps);
            param.values[i] = E::from_f64(w);
        }
        Ok(())
    }

    fn to_records(&self, ck: &mut Checkpoint) {
        ck.push_scalar_u64("adam.step", self.step);
        let mut names: Vec<&String> = self.moments.keys().collect();
        names.sort();
        for name in names {
            let (m, v) = &self.moments[name];
            ck.push::<f64>(&format!("adam.m.{name}"), &[m.len()], m);
            ck.push::<f64>(&format!("adam.v.{name}"), &[v.len()], v);
        }
    }

    fn from_records(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let mut adam = Adam::new();
        adam.step = ck.scalar_u64("adam.step")?;
        for rec in &ck.records {
            if let Some(name) = rec.name.strip_prefix("adam.m.") {
                let m: Vec<f64> = rec.values();
                let v: Vec<f64> = ck.require(&format!("adam.v.{name}"))?.values();
                adam.moments.insert(name.to_string(), (m, v));
            }
        }
        Ok(adam)
    }
}

/// Stepped decay: `base * factor^(epoch / every)`.
pub fn lr_schedule(base: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    base * factor.powi((epoch / every.max(1)) as i32)
}

/// One row of the training loss log.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loop_: f64,
    pub icp: f64,
    pub lt: f64,
    pub st_a: f64,
    pub st_b: f64,
    pub prior_s: f64,
    pub prior_p: f64,
    pub total: f64,
    pub lambda_icp: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.loop_,
            self.icp,
            self.lt,
            self.st_a,
            self.st_b,
            self.prior_s,
            self.prior_p,
            self.total,
            self.lambda_icp
        )
    }
}

pub fn write_loss_log(path: &Path, rows: &[StepLog]) -> Result<(), OptimError> {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| OptimError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A trainable frame: indices into the dataset plus its global pose slot.
#[derive(Debug, Clone, Copy)]
struct FrameSlot {
    seq: usize,
    frame: usize,
    identity: usize,
    pose_slot: usize,
    /// Pose slot of the successor frame in the same sequence, if any.
    next: Option<(usize, usize)>,
}

fn train_frame_slots(ds: &Dataset) -> Result<Vec<FrameSlot>, OptimError> {
    let mut slots = Vec::new();
    let mut pose_slot = 0usize;
    for (seq_idx, seq) in ds.sequences.iter().enumerate() {
        if seq.split != crate::data::Split::Train {
            continue;
        }
        let identity =
            ds.identity_index(&seq.identity)
                .ok_or_else(|| OptimError::UnknownIdentity {
                    sequence: seq.id.clone(),
                    identity: seq.identity.clone(),
                })?;
        if ds.identities[identity].canonical.is_empty() {
            return Err(OptimError::MissingCanonical {
                identity: seq.identity.clone(),
            });
        }
        let base = pose_slot;
        for f in 0..seq.frames.len() {
            let next = if f + 1 < seq.frames.len() {
                Some((f + 1, base + f + 1))
            } else {
                None
            };
            slots.push(FrameSlot {
                seq: seq_idx,
                frame: f,
                identity,
                pose_slot: base + f,
                next,
            });
        }
        pose_slot += seq.frames.len();
    }
    if slots.is_empty() {
        return Err(OptimError::EmptyDataset);
    }
    Ok(slots)
}

/// Number of pose-code slots the training split needs.
pub fn train_frame_count(ds: &Dataset) -> usize {
    ds.sequences
        .iter()
        .filter(|s| s.split == crate::data::Split::Train)
        .map(|s| s.frames.len())
        .sum()
}

/// Pose slot of frame `frame` of training sequence index `seq_idx`.
pub fn pose_slot(ds: &Dataset, seq_idx: usize, frame: usize) -> usize {
    ds.sequences[..seq_idx]
        .iter()
        .filter(|s| s.split == crate::data::Split::Train)
        .map(|s| s.frames.len())
        .sum::<usize>()
        + frame
}

/// Everything the training loop mutates, resumable from a checkpoint.
#[derive(Debug)]
pub struct TrainState<E> {
    pub cfg: TrainConfig,
    pub model: GnpmModel<E>,
    pub bank: LatentBank<E>,
    pub adam: Adam,
    /// Epochs fully completed.
    pub epoch: usize,
    pub step: u64,
}

impl<E: Scalar> TrainState<E> {
    pub fn new(cfg: TrainConfig, ds: &Dataset) -> Result<Self, OptimError> {
        let slots = train_frame_slots(ds)?;
        let frames = slots.iter().map(|s| s.pose_slot).max().unwrap() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = GnpmModel::new(cfg.stack_config(), &mut rng);
        let bank = LatentBank::new(
            ds.identities.len(),
            frames,
            cfg.d_shape,
            cfg.d_pose,
            &mut rng,
        );
        Ok(TrainState {
            cfg,
            model,
            bank,
            adam: Adam::new(),
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_scalar_u64("meta.epoch", self.epoch as u64);
        ck.push_scalar_u64("meta.step", self.step);
        if let Ok(snapshot) = toml::to_string(&self.cfg) {
            ck.push_bytes("meta.config", snapshot.as_bytes());
        }
        for p in self.model.params() {
            ck.push::<E>(&p.name, &p.shape, &p.values);
        }
        for p in [&self.bank.shape_codes, &self.bank.pose_codes] {
            ck.push::<E>(&p.name, &p.shape, &p.values);
        }
        self.adam.to_records(&mut ck);
        ck
    }

    pub fn save(&self, path: &Path) -> Result<(), OptimError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    /// Rebuild a state from a checkpoint. Architecture comes from `cfg`,
    /// which must match the one the checkpoint was written with.
    pub fn from_checkpoint(
        cfg: TrainConfig,
        ds: &Dataset,
        ck: &Checkpoint,
    ) -> Result<Self, OptimError> {
        let mut state = TrainState::new(cfg, ds)?;
        state.epoch = ck.scalar_u64("meta.epoch")? as usize;
        state.step = ck.scalar_u64("meta.step")?;
        for p in state.model.params_mut() {
            p.values = ck.require_values::<E>(&p.name, &p.shape)?;
        }
        for p in [&mut state.bank.shape_codes, &mut state.bank.pose_codes] {
            p.values = ck.require_values::<E>(&p.name, &p.shape)?;
        }
        state.adam = Adam::from_records(ck)?;
        Ok(state)
    }

    pub fn load(cfg: TrainConfig, ds: &Dataset, path: &Path) -> Result<Self, OptimError> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(cfg, ds, &ck)
    }
}

/// Read the training-config snapshot embedded in a checkpoint, if present
/// and parseable.
pub fn config_from_checkpoint(ck: &Checkpoint) -> Option<TrainConfig> {
    let bytes = ck.bytes("meta.config")?;
    let text = std::str::from_utf8(bytes).ok()?;
    toml::from_str(text).ok()
}

/// Rebuild just the model and latent bank from a checkpoint, without a
/// dataset; bank dimensions come from the stored records.
pub fn load_model_bank<E: Scalar>(
    cfg: &TrainConfig,
    ck: &Checkpoint,
) -> Result<(GnpmModel<E>, LatentBank<E>), OptimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = GnpmModel::new(cfg.stack_config(), &mut rng);
    for p in model.params_mut() {
        p.values = ck.require_values::<E>(&p.name, &p.shape)?;
    }
    let srec = ck.require("bank.shape")?;
    let prec = ck.require("bank.pose")?;
    let mut bank = LatentBank::new(
        srec.dims[0],
        prec.dims[0],
        cfg.d_shape,
        cfg.d_pose,
        &mut rng,
    );
    bank.shape_codes.values = ck.require_values::<E>("bank.shape", &bank.shape_codes.shape)?;
    bank.pose_codes.values = ck.require_values::<E>("bank.pose", &bank.pose_codes.shape)?;
    Ok((model, bank))
}

fn gather_cloud<E: Scalar>(points: &[f64], idx: &[usize]) -> Vec<E> {
    let mut out = Vec::with_capacity(idx.len() * 3);
    for &i in idx {
        for c in 0..3 {
            out.push(E::from_f64(points[i * 3 + c]));
        }
    }
    out
}

struct GradBag {
    grads: HashMap<String, Vec<f64>>,
}

impl GradBag {
    fn new() -> Self {
        GradBag {
            grads: HashMap::new(),
        }
    }

    fn add<E: Scalar>(&mut self, name: &str, len: usize, offset: usize, grad: &[E]) {
        let acc = self
            .grads
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; len]);
        for (i, &g) in grad.iter().enumerate() {
            acc[offset + i] += g.to_f64();
        }
    }

    fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Per-epoch RNG derived from the base seed, so a resumed run draws the
/// same samples as an uninterrupted one.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Frozen evaluation of the next frame's displacement fields, used as
/// constant targets for the temporal smoothness terms.
fn next_frame_targets<E: Scalar>(
    model: &GnpmModel<E>,
    x_next: &[E],
    n: usize,
    shape_code: &[E],
    pose_code: &[E],
) -> Result<(Vec<E>, Vec<E>), OptimError> {
    let tape: Tape<E> = Tape::new();
    let x = tape.constant(&[n, 3], x_next.to_vec());
    let s = tape.constant(&[shape_code.len()], shape_code.to_vec());
    let p = tape.constant(&[pose_code.len()], pose_code.to_vec());
    let mut binder = Binder::frozen();
    let cyc = model.cycle(&tape, x, s, p, &mut binder)?;
    Ok((tape.values(cyc.delta_x), tape.values(cyc.delta_y)))
}

/// Run training from `state.epoch` up to (not beyond) `until_epoch`,
/// appending one loss-log row per optimizer step. With `verbose` a one-line
/// epoch summary goes to standard output.
pub fn train_epochs<E: Scalar>(
    state: &mut TrainState<E>,
    ds: &Dataset,
    until_epoch: usize,
    verbose: bool,
    log: &mut Vec<StepLog>,
) -> Result<(), OptimError> {
    let slots = train_frame_slots(ds)?;
    let cfg = state.cfg.clone();
    let weights = cfg.loss_weights();
    let n = cfg.points_per_frame;
    while state.epoch < until_epoch {
        let epoch = state.epoch;
        let lr = lr_schedule(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every, epoch);
        let lambda_icp = weights.lambda_icp(epoch, cfg.epochs);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order = slots.clone();
        // Seeded Fisher-Yates shuffle of the frame order.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_total = 0.0;
        let mut epoch_loop = 0.0;
        let mut steps_in_epoch = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut bag = GradBag::new();
            let mut sums = StepLog {
                step: 0,
                epoch,
                loop_: 0.0,
                icp: 0.0,
                lt: 0.0,
                st_a: 0.0,
                st_b: 0.0,
                prior_s: 0.0,
                prior_p: 0.0,
                total: 0.0,
                lambda_icp,
            };
            for slot in batch {
                let seq = &ds.sequences[slot.seq];
                let frame = &seq.frames[slot.frame];
                let identity = &ds.identities[slot.identity];
                let n_frame = n.min(frame.cloud.len());
                let idx = sample_points(frame.cloud.len(), n_frame, rng.gen());
                let x_vals: Vec<E> = gather_cloud(&frame.cloud.points, &idx);
                // GT canonical positions of the sampled points, via the
                // frame's correspondence ids.
                let canon_vals: Vec<E> = match &frame.cloud.corr {
                    Some(corr) => {
                        let cidx: Vec<usize> = idx.iter().map(|&i| corr[i]).collect();
                        gather_cloud(&identity.canonical.points, &cidx)
                    }
                    None => gather_cloud(
                        &identity.canonical.points,
                        &sample_points(identity.canonical.len(), n_frame, rng.gen()),
                    ),
                };

                let shape_vals = state.bank.shape_code(slot.identity).to_vec();
                let pose_vals = state.bank.pose_code(slot.pose_slot).to_vec();

                let tape: Tape<E> = Tape::new();
                let x = tape.leaf(&[n_frame, 3], x_vals.clone(), false);
                let s = tape.leaf(&[cfg.d_shape], shape_vals.clone(), true);
                let p = tape.leaf(&[cfg.d_pose], pose_vals.clone(), true);
                let mut binder = Binder::new();
                let cyc = state.model.cycle(&tape, x, s, p, &mut binder)?;

                // Next-frame terms: pose code of the successor gets L_lt
                // gradient; displacement targets are frozen and matched by
                // input-to-input nearest neighbor.
                let mut p_next_var: Option<Var> = None;
                let mut next_slot_for_grad: Option<(usize, Var)> = None;
                let st = match slot.next {
                    Some((next_f, next_slot)) => {
                        let next_frame = &seq.frames[next_f];
                        let n_next = n.min(next_frame.cloud.len());
                        let nidx = sample_points(next_frame.cloud.len(), n_next, rng.gen());
                        let xn_vals: Vec<E> = gather_cloud(&next_frame.cloud.points, &nidx);
                        let pn_vals = state.bank.pose_code(next_slot).to_vec();
                        let (df, db) = next_frame_targets(
                            &state.model,
                            &xn_vals,
                            n_next,
                            &shape_vals,
                            &pn_vals,
                        )?;
                        // Match current inputs to next inputs; gather the
                        // matched rows of the frozen displacement fields.
                        let (midx, _) = knn::nn_query(&x_vals, n_frame, &xn_vals, n_next, 3)?;
                        let gather3 = |src: &[E]| -> Vec<E> {
                            let mut out = Vec::with_capacity(n_frame * 3);
                            for &j in &midx {
                                out.extend_from_slice(&src[j * 3..j * 3 + 3]);
                            }
                            out
                        };
                        let fwd_delta = tape.constant(&[n_frame, 3], gather3(&df));
                        let bwd_delta = tape.constant(&[n_frame, 3], gather3(&db));
                        let pn = tape.leaf(&[cfg.d_pose], pn_vals, true);
                        p_next_var = Some(pn);
                        next_slot_for_grad = Some((next_slot, pn));
                        Some(StTargets {
                            fwd_delta,
                            bwd_delta,
                        })
                    }
                    None => None,
                };

                let terms = train_objective(
                    &tape,
                    &cyc,
                    x,
                    &canon_vals,
                    s,
                    p,
                    p_next_var,
                    st.as_ref(),
                    &weights,
                    lambda_icp,
                )?;
                tape.backward(terms.total)?;

                for (name, var) in &binder.bound {
                    let g = tape.grad(*var);
                    let len = g.len();
                    bag.add(name, len, 0, &g);
                }
                let ds_len = state.bank.shape_codes.values.len();
                let dp_len = state.bank.pose_codes.values.len();
                bag.add(
                    "bank.shape",
                    ds_len,
                    slot.identity * cfg.d_shape,
                    &tape.grad(s),
                );
                bag.add(
                    "bank.pose",
                    dp_len,
                    slot.pose_slot * cfg.d_pose,
                    &tape.grad(p),
                );
                if let Some((next_slot, pn)) = next_slot_for_grad {
                    bag.add("bank.pose", dp_len, next_slot * cfg.d_pose, &tape.grad(pn));
                }

                sums.loop_ += terms.loop_;
                sums.icp += terms.icp;
                sums.lt += terms.lt;
                sums.st_a += terms.st_a;
                sums.st_b += terms.st_b;
                sums.prior_s += terms.prior_shape;
                sums.prior_p += terms.prior_pose;
                sums.total += tape.value_scalar(terms.total).to_f64();
            }
            let bsz = batch.len() as f64;
            bag.scale(1.0 / bsz);
            state.adam.begin_step();
            state.step += 1;
            for p in state.model.params_mut() {
                if let Some(g) = bag.grads.get(&p.name) {
                    let g = g.clone();
                    state.adam.update(lr, p, &g)?;
                }
            }
            for p in [&mut state.bank.shape_codes, &mut state.bank.pose_codes] {
                if let Some(g) = bag.grads.get(&p.name) {
                    let g = g.clone();
                    state.adam.update(lr, p, &g)?;
                }
            }
            sums.step = state.step;
            sums.loop_ /= bsz;
            sums.icp /= bsz;
            sums.lt /= bsz;
            sums.st_a /= bsz;
            sums.st_b /= bsz;
            sums.prior_s /= bsz;
            sums.prior_p /= bsz;
            sums.total /= bsz;
            epoch_total += sums.total;
            epoch_loop += sums.loop_;
            steps_in_epoch += 1;
            log.push(sums);
        }
        state.epoch += 1;
        if verbose {
            println!(
                "epoch {} lr {:.3e} lambda_icp {:.3e} loop {:.5e} total {:.5e}",
                state.epoch,
                lr,
                lambda_icp,
                epoch_loop / steps_in_epoch as f64,
                epoch_total / steps_in_epoch as f64
            );
        }
    }
    Ok(())
}

/// Train a fresh model for `cfg.epochs` epochs.
pub fn train<E: Scalar>(
    cfg: TrainConfig,
    ds: &Dataset,
    verbose: bool,
) -> Result<(TrainState<E>, Vec<StepLog>), OptimError> {
    let mut state = TrainState::new(cfg, ds)?;
    let mut log = Vec::new();
    let epochs = state.cfg.epochs;
    train_epochs(&mut state, ds, epochs, verbose, &mut log)?;
    Ok((state, log))
}

// ---------------------------------------------------------------------------
// Supervised variant: one network maps canonical points plus codes to posed
// positions, trained with an L1 reconstruction loss on GT correspondences.
// ---------------------------------------------------------------------------

pub struct SupervisedState<E> {
    pub cfg: TrainConfig,
    pub model: SupervisedGnpm<E>,
    pub bank: LatentBank<E>,
    pub adam: Adam,
    pub epoch: usize,
    pub step: u64,
}

impl<E: Scalar> SupervisedState<E> {
    pub fn new(cfg: TrainConfig, ds: &Dataset) -> Result<Self, OptimError> {
        let frames = train_frame_count(ds).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = SupervisedGnpm::new(cfg.stack_config(), &mut rng);
        let bank = LatentBank::new(
            ds.identities.len(),
            frames,
            cfg.d_shape,
            cfg.d_pose,
            &mut rng,
        );
        Ok(SupervisedState {
            cfg,
            model,
            bank,
            adam: Adam::new(),
            epoch: 0,
            step: 0,
        })
    }
}

/// Train the supervised variant in place up to `until_epoch`. Returns per
/// step mean reconstruction loss values.
pub fn train_supervised_epochs<E: Scalar>(
    state: &mut SupervisedState<E>,
    ds: &Dataset,
    until_epoch: usize,
) -> Result<Vec<f64>, OptimError> {
    let slots = train_frame_slots(ds)?;
    let cfg = state.cfg.clone();
    let weights = cfg.loss_weights();
    let n = cfg.points_per_frame;
    let mut losses = Vec::new();
    while state.epoch < until_epoch {
        let epoch = state.epoch;
        let lr = lr_schedule(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every, epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order = slots.clone();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            let mut bag = GradBag::new();
            let mut batch_loss = 0.0;
            for slot in batch {
                let seq = &ds.sequences[slot.seq];
                let frame = &seq.frames[slot.frame];
                let identity = &ds.identities[slot.identity];
                let n_frame = n.min(frame.cloud.len());
                let idx = sample_points(frame.cloud.len(), n_frame, rng.gen());
                // Input is the canonical position of each sampled point;
                // target is its observed posed position.
                let corr = frame.cloud.corr.as_ref();
                let cidx: Vec<usize> = match corr {
                    Some(c) => idx.iter().map(|&i| c[i]).collect(),
                    None => idx.clone(),
                };
                let canon_vals: Vec<E> = gather_cloud(&identity.canonical.points, &cidx);
                let posed_vals: Vec<E> = gather_cloud(&frame.cloud.points, &idx);

                let tape: Tape<E> = Tape::new();
                let xc = tape.leaf(&[n_frame, 3], canon_vals, false);
                let gt = tape.leaf(&[n_frame, 3], posed_vals, false);
                let s = tape.leaf(
                    &[cfg.d_shape],
                    state.bank.shape_code(slot.identity).to_vec(),
                    true,
                );
                let p = tape.leaf(
                    &[cfg.d_pose],
                    state.bank.pose_code(slot.pose_slot).to_vec(),
                    true,
                );
                let mut binder = Binder::new();
                let out = state.model.deform(&tape, xc, s, p, &mut binder)?;
                let reco = l_reco(&tape, out.points, gt)?;
                let prior_s = tape.mul_scalar(l_code_prior(&tape, s), weights.sigma_shape);
                let prior_p = tape.mul_scalar(l_code_prior(&tape, p), weights.sigma_pose);
                let total = tape.add(tape.add(reco, prior_s)?, prior_p)?;
                tape.backward(total)?;
                for (name, var) in &binder.bound {
                    let g = tape.grad(*var);
                    let len = g.len();
                    bag.add(name, len, 0, &g);
                }
                bag.add(
                    "bank.shape",
                    state.bank.shape_codes.values.len(),
                    slot.identity * cfg.d_shape,
                    &tape.grad(s),
                );
                bag.add(
                    "bank.pose",
                    state.bank.pose_codes.values.len(),
                    slot.pose_slot * cfg.d_pose,
                    &tape.grad(p),
                );
                batch_loss += tape.value_scalar(reco).to_f64();
            }
            let bsz = batch.len() as f64;
            bag.scale(1.0 / bsz);
            state.adam.begin_step();
            state.step += 1;
            for p in state.model.params_mut() {
                if let Some(g) = bag.grads.get(&p.name) {
                    let g = g.clone();
                    state.adam.update(lr, p, &g)?;
                }
            }
            for p in [&mut state.bank.shape_codes, &mut state.bank.pose_codes] {
                if let Some(g) = bag.grads.get(&p.name) {
                    let g = g.clone();
                    state.adam.update(lr, p, &g)?;
                }
            }
            losses.push(batch_loss / bsz);
        }
        state.epoch += 1;
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// Test-time latent fitting with frozen weights.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub iters: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        // Decay per 30 iterations freezes the step too early inside a
        // 200-iteration fit; 100 keeps the late iterations productive.
        FitOptions {
            iters: 200,
            lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 100,
        }
    }
}

/// Result of fitting one sequence: the shared shape code, one pose code per
/// frame, and the per-iteration objective trace of each frame.
pub struct FitResult<E> {
    pub shape_code: Vec<E>,
    pub pose_codes: Vec<Vec<E>>,
    pub traces: Vec<Vec<f64>>,
}

/// Optimize shape and pose codes for one frame, weights frozen. Codes are
/// updated in place; returns the objective value at each iteration (before
/// that iteration's update).
pub fn fit_frame<E: Scalar>(
    model: &GnpmModel<E>,
    x_vals: &[E],
    n: usize,
    shape: &mut Vec<E>,
    pose: &mut Vec<E>,
    fit_shape: bool,
    weights: &LossWeights,
    opts: &FitOptions,
) -> Result<Vec<f64>, OptimError> {
    let mut adam = Adam::new();
    let mut sp = Param {
        name: "fit.shape".into(),
        shape: vec![shape.len()],
        values: shape.clone(),
    };
    let mut pp = Param {
        name: "fit.pose".into(),
        shape: vec![pose.len()],
        values: pose.clone(),
    };
    let mut trace = Vec::with_capacity(opts.iters);
    for it in 0..opts.iters {
        let lr = lr_schedule(opts.lr, opts.lr_decay_factor, opts.lr_decay_every, it);
        let tape: Tape<E> = Tape::new();
        let x = tape.constant(&[n, 3], x_vals.to_vec());
        let s = tape.leaf(&[sp.values.len()], sp.values.clone(), fit_shape);
        let p = tape.leaf(&[pp.values.len()], pp.values.clone(), true);
        let mut binder = Binder::frozen();
        let cyc = model.cycle(&tape, x, s, p, &mut binder)?;
        let obj = test_objective(&tape, cyc.x_tilde, x, s, p, weights)?;
        trace.push(tape.value_scalar(obj).to_f64());
        tape.backward(obj)?;
        let gp: Vec<f64> = tape.grad(p).iter().map(|&g| g.to_f64()).collect();
        adam.begin_step();
        if fit_shape {
            let gs: Vec<f64> = tape.grad(s).iter().map(|&g| g.to_f64()).collect();
            adam.update(lr, &mut sp, &gs)?;
        }
        adam.update(lr, &mut pp, &gp)?;
    }
    *shape = sp.values;
    *pose = pp.values;
    Ok(trace)
}

/// Fit codes to a held-out sequence of sampled clouds, each `[n, 3]`.
/// The shared shape code is fitted jointly with pose on frame 0 and then
/// frozen, so every later pose code is optimized against the shape that is
/// finally reported. Frame 0's pose starts at `init_pose` (the trained
/// mean) and later frames warm-start from their predecessor.
pub fn fit_sequence<E: Scalar>(
    model: &GnpmModel<E>,
    frames: &[Vec<E>],
    n: usize,
    init_shape: &[E],
    init_pose: &[E],
    weights: &LossWeights,
    opts: &FitOptions,
) -> Result<FitResult<E>, OptimError> {
    let mut shape = init_shape.to_vec();
    let mut pose = init_pose.to_vec();
    let mut pose_codes = Vec::with_capacity(frames.len());
    let mut traces = Vec::with_capacity(frames.len());
    for (f, x_vals) in frames.iter().enumerate() {
        let trace = fit_frame(
            model,
            x_vals,
            n,
            &mut shape,
            &mut pose,
            f == 0,
            weights,
            opts,
        )?;
        pose_codes.push(pose.clone());
        traces.push(trace);
    }
    Ok(FitResult {
        shape_code: shape,
        pose_codes,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::data::{generate, GeneratorSpec};
    use crate::graphnet::PosEncodeConfig;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 2,
            points_per_frame: 48,
            k: 6,
            edgeconv_dims: [8, 8, 16],
            head_hidden: 16,
            d_shape: 8,
            d_pose: 8,
            pe_bands: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> crate::data::Dataset {
        generate(&GeneratorSpec {
            identities: 1,
            links: 2,
            seqs_per_identity: 1,
            heldout_seqs_per_identity: 0,
            frames_per_seq: 3,
            points: 64,
            amplitude: 0.4,
            noise: 0.0,
            blend: 0.0,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn adam_zero_grad_is_noop_on_values() {
        let mut adam = Adam::new();
        let mut p = Param {
            name: "w".into(),
            shape: vec![3],
            values: vec![1.0f64, -2.0, 0.5],
        };
        adam.begin_step();
        adam.update(1e-3, &mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.values, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // With constant gradient g, the bias corrections cancel at t=1 and
        // the update is lr * g / (|g| + eps).
        let mut adam = Adam::new();
        let mut p = Param {
            name: "w".into(),
            shape: vec![1],
            values: vec![0.0f64],
        };
        let g = 0.37;
        adam.begin_step();
        adam.update(1e-3, &mut p, &[g]).unwrap();
        let expect = -1e-3 * g / (g + 1e-8);
        assert!((p.values[0] - expect).abs() < 1e-15, "{}", p.values[0]);
    }

    fn quadratic_descent(w0: f64, steps: usize) -> Vec<f64> {
        let mut adam = Adam::new();
        let mut p = Param {
            name: "w".into(),
            shape: vec![1],
            values: vec![w0],
        };
        let mut history = Vec::new();
        for _ in 0..steps {
            let g = 2.0 * p.values[0];
            adam.begin_step();
            adam.update(1e-1, &mut p, &[g]).unwrap();
            history.push(p.values[0].abs());
        }
        history
    }

    #[test]
    fn adam_minimizes_scalar_quadratic() {
        let history = quadratic_descent(0.25, 100);
        assert!(
            history.last().unwrap() < &1e-3,
            "final {}",
            history.last().unwrap()
        );
        // Monotone decrease after warm-up, checked on window maxima.
        let late: Vec<f64> = history[20..]
            .chunks(20)
            .map(|c| c.iter().cloned().fold(0.0, f64::max))
            .collect();
        for w in late.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "window maxima {late:?}");
        }
    }

    #[test]
    fn adam_trajectory_matches_external_simulation() {
        // Value frozen from an independent scalar simulation of
        // bias-corrected Adam (w0 = 1, lr = 1e-1, 100 steps on w^2).
        let history = quadratic_descent(1.0, 100);
        assert!(
            (history.last().unwrap() - 0.002936675681102549).abs() < 1e-12,
            "final {}",
            history.last().unwrap()
        );
    }

    #[test]
    fn adam_rejects_non_finite_grads() {
        let mut adam = Adam::new();
        let mut p = Param {
            name: "layer.w".into(),
            shape: vec![1],
            values: vec![1.0f64],
        };
        adam.begin_step();
        let e = adam.update(1e-3, &mut p, &[f64::NAN]).unwrap_err();
        assert!(e.to_string().contains("layer.w"));
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_schedule(1e-3, 0.5, 30, 0), 1e-3);
        assert_eq!(lr_schedule(1e-3, 0.5, 30, 30), 5e-4);
        assert_eq!(lr_schedule(1e-3, 0.5, 30, 65), 2.5e-4);
    }

    #[test]
    fn loss_log_row_count_equals_steps() {
        let ds = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.epochs = 2;
        let (state, log) = train::<f32>(cfg, &ds, false).unwrap();
        assert_eq!(log.len() as u64, state.step);
        // 3 frames, batch 2 -> 2 steps per epoch.
        assert_eq!(state.step, 4);
        for (i, row) in log.iter().enumerate() {
            assert_eq!(row.step, i as u64 + 1);
        }
    }

    #[test]
    fn static_frame_converges_to_small_loss() {
        // One identity, one frame identical to canonical.
        let ds = generate(&GeneratorSpec {
            identities: 1,
            links: 2,
            seqs_per_identity: 1,
            heldout_seqs_per_identity: 0,
            frames_per_seq: 1,
            points: 48,
            amplitude: 0.0,
            noise: 0.0,
            blend: 0.0,
            seed: 2,
        })
        .unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 60;
        cfg.points_per_frame = 32;
        let (_, log) = train::<f32>(cfg, &ds, false).unwrap();
        let last = log.last().unwrap();
        assert!(last.total < 1e-3, "final total {}", last.total);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.epochs = 2;
        let (sa, la) = train::<f32>(cfg.clone(), &ds, false).unwrap();
        let (sb, lb) = train::<f32>(cfg, &ds, false).unwrap();
        for (a, b) in la.iter().zip(lb.iter()) {
            assert_eq!(a.total, b.total);
        }
        for (pa, pb) in sa.model.params().iter().zip(sb.model.params().iter()) {
            assert_eq!(pa.values, pb.values);
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let ds = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.epochs = 4;
        let (full, full_log) = train::<f32>(cfg.clone(), &ds, false).unwrap();

        let mut half = TrainState::<f32>::new(cfg.clone(), &ds).unwrap();
        let mut log = Vec::new();
        train_epochs(&mut half, &ds, 2, false, &mut log).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        half.save(&path).unwrap();
        let mut resumed = TrainState::<f32>::load(cfg, &ds, &path).unwrap();
        assert_eq!(resumed.epoch, 2);
        train_epochs(&mut resumed, &ds, 4, false, &mut log).unwrap();

        assert_eq!(log.len(), full_log.len());
        for (a, b) in log.iter().zip(full_log.iter()) {
            let rel = (a.total - b.total).abs() / b.total.abs().max(1e-12);
            assert!(
                rel < 1e-6,
                "step {} totals {} vs {}",
                b.step,
                a.total,
                b.total
            );
        }
        for (pa, pb) in resumed
            .model
            .params()
            .iter()
            .zip(full.model.params().iter())
        {
            assert_eq!(pa.values, pb.values, "param {}", pa.name);
        }
    }

    #[test]
    fn missing_canonical_refused_by_name() {
        let mut ds = tiny_data();
        ds.identities[0].canonical.points.clear();
        let e = TrainState::<f32>::new(tiny_cfg(), &ds).unwrap_err();
        assert!(e.to_string().contains("I0"), "{e}");
    }

    #[test]
    fn fit_from_trained_codes_does_not_increase_objective() {
        let ds = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.epochs = 3;
        let (state, _) = train::<f32>(cfg.clone(), &ds, false).unwrap();
        let frame = &ds.sequences[0].frames[0];
        let n = cfg.points_per_frame.min(frame.cloud.len());
        let idx = sample_points(frame.cloud.len(), n, 5);
        let x: Vec<f32> = gather_cloud(&frame.cloud.points, &idx);
        let mut shape = state.bank.shape_code(0).to_vec();
        let mut pose = state.bank.pose_code(0).to_vec();
        let opts = FitOptions {
            iters: 30,
            ..FitOptions::default()
        };
        let trace = fit_frame(
            &state.model,
            &x,
            n,
            &mut shape,
            &mut pose,
            true,
            &cfg.loss_weights(),
            &opts,
        )
        .unwrap();
        let first = trace[0];
        let last = *trace.last().unwrap();
        assert!(last <= first * 1.05, "objective rose: {first} -> {last}");
    }

    #[test]
    fn pose_encode_dims_sanity() {
        // Guard that the tiny config yields the planned conditioned width.
        let cfg = tiny_cfg();
        let pe = PosEncodeConfig {
            bands: 2,
            include_input: true,
        };
        assert_eq!(cfg.stack_config().pe, pe);
        assert_eq!(cfg.stack_config().layer1_in(), 15 + 8 + 8);
    }
}
