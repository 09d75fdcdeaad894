//! The parametric model proper: latent banks, forward network (posed to
//! canonical) and backward network (canonical to posed), the composed
//! self-supervision cycle, and the supervised single-network variant.
//!
//! Point `i` of the input keeps its index through both maps; correspondence
//! by index is the method's output.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graphnet::{pos_encode, Binder, EdgeConvStack, NetError, Param, StackConfig};
use crate::tensor::{Scalar, Tape, Var};

/// Learnable per-identity shape codes and per-frame pose codes. Pose codes
/// are global per frame across all sequences.
#[derive(Debug, Clone)]
pub struct LatentBank<E> {
    pub shape_codes: Param<E>,
    pub pose_codes: Param<E>,
    pub d_shape: usize,
    pub d_pose: usize,
}

impl<E: Scalar> LatentBank<E> {
    /// Codes initialized from a normal distribution with small scale so the
    /// initial code priors are cheap.
    pub fn new(
        identities: usize,
        frames: usize,
        d_shape: usize,
        d_pose: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0f64, 0.01).unwrap();
        let shape_values = (0..identities * d_shape)
            .map(|_| E::from_f64(normal.sample(rng)))
            .collect();
        let pose_values = (0..frames * d_pose)
            .map(|_| E::from_f64(normal.sample(rng)))
            .collect();
        LatentBank {
            shape_codes: Param {
                name: "bank.shape".into(),
                shape: vec![identities, d_shape],
                values: shape_values,
            },
            pose_codes: Param {
                name: "bank.pose".into(),
                shape: vec![frames, d_pose],
                values: pose_values,
            },
            d_shape,
            d_pose,
        }
    }

    pub fn identities(&self) -> usize {
        self.shape_codes.shape[0]
    }

    pub fn frames(&self) -> usize {
        self.pose_codes.shape[0]
    }

    pub fn shape_code(&self, c: usize) -> &[E] {
        &self.shape_codes.values[c * self.d_shape..(c + 1) * self.d_shape]
    }

    pub fn pose_code(&self, f: usize) -> &[E] {
        &self.pose_codes.values[f * self.d_pose..(f + 1) * self.d_pose]
    }

    pub fn mean_shape_code(&self) -> Vec<E> {
        mean_rows(&self.shape_codes.values, self.identities(), self.d_shape)
    }

    pub fn mean_pose_code(&self) -> Vec<E> {
        mean_rows(&self.pose_codes.values, self.frames(), self.d_pose)
    }
}

fn mean_rows<E: Scalar>(values: &[E], rows: usize, d: usize) -> Vec<E> {
    let mut m = vec![E::zero(); d];
    for r in 0..rows {
        for c in 0..d {
            m[c] += values[r * d + c];
        }
    }
    let inv = E::from_f64(1.0 / rows as f64);
    for c in &mut m {
        *c *= inv;
    }
    m
}

/// Forward deformation network (theta_a) and backward deformation network
/// (theta_b). Architectures match; parameters are never shared.
#[derive(Debug, Clone)]
pub struct GnpmModel<E> {
    pub cfg: StackConfig,
    pub fwd: EdgeConvStack<E>,
    pub bwd: EdgeConvStack<E>,
}

/// Outputs of one deformation evaluation.
pub struct Deformed {
    pub delta: Var,
    pub points: Var,
}

/// Outputs of one full cycle evaluation.
pub struct Cycle {
    pub delta_x: Var,
    pub y_tilde: Var,
    pub delta_y: Var,
    pub x_tilde: Var,
}

impl<E: Scalar> GnpmModel<E> {
    pub fn new(cfg: StackConfig, rng: &mut impl Rng) -> Self {
        let fwd = EdgeConvStack::new("fwd", cfg.clone(), rng);
        let bwd = EdgeConvStack::new("bwd", cfg.clone(), rng);
        GnpmModel { cfg, fwd, bwd }
    }

    /// Posed points to canonical: `y_tilde = x + delta_x`.
    pub fn forward_deform(
        &self,
        tape: &Tape<E>,
        x: Var,
        shape_code: Var,
        pose_code: Var,
        binder: &mut Binder,
    ) -> Result<Deformed, NetError> {
        let enc = pos_encode(tape, x, &self.cfg.pe)?;
        let delta = self.fwd.forward(tape, enc, shape_code, pose_code, binder)?;
        let points = tape.add(x, delta)?;
        Ok(Deformed { delta, points })
    }

    /// Canonical points to posed: `x_tilde = y + delta_y`.
    pub fn backward_deform(
        &self,
        tape: &Tape<E>,
        y: Var,
        shape_code: Var,
        pose_code: Var,
        binder: &mut Binder,
    ) -> Result<Deformed, NetError> {
        let enc = pos_encode(tape, y, &self.cfg.pe)?;
        let delta = self.bwd.forward(tape, enc, shape_code, pose_code, binder)?;
        let points = tape.add(y, delta)?;
        Ok(Deformed { delta, points })
    }

    /// Close the self-supervision loop: backward(forward(x)). Both the
    /// intermediate canonical prediction and the final cloud are returned
    /// for loss assembly.
    pub fn cycle(
        &self,
        tape: &Tape<E>,
        x: Var,
        shape_code: Var,
        pose_code: Var,
        binder: &mut Binder,
    ) -> Result<Cycle, NetError> {
        let f = self.forward_deform(tape, x, shape_code, pose_code, binder)?;
        let b = self.backward_deform(tape, f.points, shape_code, pose_code, binder)?;
        Ok(Cycle {
            delta_x: f.delta,
            y_tilde: f.points,
            delta_y: b.delta,
            x_tilde: b.points,
        })
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut p = self.fwd.params();
        p.extend(self.bwd.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.fwd.params_mut();
        p.extend(self.bwd.params_mut());
        p
    }
}

/// Single-network variant trained with ground-truth correspondences: one
/// stack maps canonical points plus codes to posed displacements.
#[derive(Debug, Clone)]
pub struct SupervisedGnpm<E> {
    pub cfg: StackConfig,
    pub net: EdgeConvStack<E>,
}

impl<E: Scalar> SupervisedGnpm<E> {
    pub fn new(cfg: StackConfig, rng: &mut impl Rng) -> Self {
        let net = EdgeConvStack::new("sup", cfg.clone(), rng);
        SupervisedGnpm { cfg, net }
    }

    pub fn deform(
        &self,
        tape: &Tape<E>,
        x_canonical: Var,
        shape_code: Var,
        pose_code: Var,
        binder: &mut Binder,
    ) -> Result<Deformed, NetError> {
        let enc = pos_encode(tape, x_canonical, &self.cfg.pe)?;
        let delta = self.net.forward(tape, enc, shape_code, pose_code, binder)?;
        let points = tape.add(x_canonical, delta)?;
        Ok(Deformed { delta, points })
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        self.net.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphnet::PosEncodeConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(head_init_scale: f64) -> StackConfig {
        StackConfig {
            dims: [8, 8, 16],
            head_hidden: 16,
            d_shape: 4,
            d_pose: 4,
            k: 3,
            pe: PosEncodeConfig::default(),
            head_init_scale,
        }
    }

    fn random_cloud(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_head_cycle_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model: GnpmModel<f64> = GnpmModel::new(tiny_cfg(0.0), &mut rng);
        let pts = random_cloud(12, 1);
        let tape = Tape::new();
        let x = tape.constant(&[12, 3], pts.clone());
        let s = tape.constant(&[4], vec![0.1; 4]);
        let p = tape.constant(&[4], vec![0.2; 4]);
        let mut binder = Binder::frozen();
        let cyc = model.cycle(&tape, x, s, p, &mut binder).unwrap();
        assert_eq!(tape.values(cyc.y_tilde), pts);
        assert_eq!(tape.values(cyc.x_tilde), pts);
    }

    #[test]
    fn forward_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model: GnpmModel<f64> = GnpmModel::new(tiny_cfg(1.0), &mut rng);
        let tape = Tape::new();
        let x = tape.constant(&[9, 3], random_cloud(9, 2));
        let s = tape.constant(&[4], vec![0.0; 4]);
        let p = tape.constant(&[4], vec![0.0; 4]);
        let mut binder = Binder::frozen();
        let out = model.forward_deform(&tape, x, s, p, &mut binder).unwrap();
        assert_eq!(tape.shape(out.points), vec![9, 3]);
        assert_eq!(tape.shape(out.delta), vec![9, 3]);
    }

    #[test]
    fn parameter_disjointness() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model: GnpmModel<f64> = GnpmModel::new(tiny_cfg(1.0), &mut rng);
        let pts = random_cloud(10, 3);
        let eval_bwd = |model: &GnpmModel<f64>| -> Vec<f64> {
            let tape = Tape::new();
            let y = tape.constant(&[10, 3], pts.clone());
            let s = tape.constant(&[4], vec![0.1; 4]);
            let p = tape.constant(&[4], vec![0.1; 4]);
            let mut binder = Binder::frozen();
            let out = model.backward_deform(&tape, y, s, p, &mut binder).unwrap();
            tape.values(out.points)
        };
        let before = eval_bwd(&model);
        for p in model.fwd.params_mut() {
            for v in &mut p.values {
                *v += 0.5;
            }
        }
        let after = eval_bwd(&model);
        assert_eq!(before, after);
    }

    #[test]
    fn supervised_zero_head_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model: SupervisedGnpm<f64> = SupervisedGnpm::new(tiny_cfg(0.0), &mut rng);
        let pts = random_cloud(8, 4);
        let tape = Tape::new();
        let x = tape.constant(&[8, 3], pts.clone());
        let s = tape.constant(&[4], vec![0.0; 4]);
        let p = tape.constant(&[4], vec![0.0; 4]);
        let mut binder = Binder::frozen();
        let out = model.deform(&tape, x, s, p, &mut binder).unwrap();
        assert_eq!(tape.values(out.points), pts);
    }

    #[test]
    fn bank_mean_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bank: LatentBank<f64> = LatentBank::new(3, 5, 4, 4, &mut rng);
        let mean = bank.mean_shape_code();
        for c in 0..4 {
            let expect: f64 = (0..3).map(|r| bank.shape_code(r)[c]).sum::<f64>() / 3.0;
            assert!((mean[c] - expect).abs() < 1e-15);
        }
        assert_eq!(bank.identities(), 3);
        assert_eq!(bank.frames(), 5);
    }
}
