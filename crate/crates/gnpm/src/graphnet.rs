//! Network building blocks: positional encoding, dynamic-graph EdgeConv
//! layers, MLP heads, and the three-layer EdgeConv stack with feature
//! concatenation.

use rand::Rng;
use thiserror::Error;

use crate::knn::{self, KnnError};
use crate::tensor::{Scalar, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error("{op}: expected {expected} input features, got {got}")]
    DimMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Fourier positional encoding configuration. Output width per input
/// coordinate is `1 + 2 * bands` when the raw input is included; for 3-D
/// input with 8 bands that is 51.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosEncodeConfig {
    pub bands: usize,
    pub include_input: bool,
}

impl Default for PosEncodeConfig {
    fn default() -> Self {
        PosEncodeConfig {
            bands: 8,
            include_input: true,
        }
    }
}

impl PosEncodeConfig {
    pub fn out_dim(&self, d_in: usize) -> usize {
        let raw = if self.include_input { d_in } else { 0 };
        raw + 2 * self.bands * d_in
    }
}

/// Encode `[N, D]` points as `[raw | sin(2^0 pi x) | cos(2^0 pi x) | ...]`,
/// all raw coordinates first, then per-band sin/cos blocks.
pub fn pos_encode<E: Scalar>(
    tape: &Tape<E>,
    points: Var,
    cfg: &PosEncodeConfig,
) -> Result<Var, NetError> {
    let mut parts = Vec::with_capacity(1 + 2 * cfg.bands);
    if cfg.include_input {
        parts.push(points);
    }
    for band in 0..cfg.bands {
        let freq = (1u64 << band) as f64 * std::f64::consts::PI;
        let scaled = tape.mul_scalar(points, freq);
        parts.push(tape.sin(scaled));
        parts.push(tape.cos(scaled));
    }
    Ok(tape.concat(&parts)?)
}

/// A learnable dense array with a stable name used for gradient lookup and
/// checkpoint serialization.
#[derive(Debug, Clone)]
pub struct Param<E> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<E>,
}

impl<E: Scalar> Param<E> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            values: vec![E::zero(); len],
        }
    }

    /// Uniform init in +-sqrt(6 / (fan_in + fan_out)), optionally scaled.
    pub fn glorot(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len: usize = shape.iter().product();
        let values = (0..len)
            .map(|_| {
                if bound > 0.0 {
                    E::from_f64(rng.gen_range(-bound..bound))
                } else {
                    E::zero()
                }
            })
            .collect();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        }
    }
}

/// Records which tape variable each parameter was bound to during a forward
/// pass, so the optimizer can collect gradients by name. A frozen binder
/// binds parameters as constants (no gradient).
pub struct Binder {
    pub trainable: bool,
    pub bound: Vec<(String, Var)>,
}

impl Binder {
    pub fn new() -> Self {
        Binder {
            trainable: true,
            bound: Vec::new(),
        }
    }

    pub fn frozen() -> Self {
        Binder {
            trainable: false,
            bound: Vec::new(),
        }
    }

    /// Bind a parameter onto the tape. Each parameter must be bound at most
    /// once per tape; model forward passes uphold this.
    pub fn bind<E: Scalar>(&mut self, tape: &Tape<E>, p: &Param<E>) -> Var {
        let v = tape.leaf(&p.shape, p.values.clone(), self.trainable);
        if self.trainable {
            self.bound.push((p.name.clone(), v));
        }
        v
    }
}

impl Default for Binder {
    fn default() -> Self {
        Self::new()
    }
}

/// Dense layer y = x W + b with W stored `[fan_in, fan_out]`.
#[derive(Debug, Clone)]
pub struct Linear<E> {
    pub w: Param<E>,
    pub b: Param<E>,
}

impl<E: Scalar> Linear<E> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::glorot(
                format!("{name}.w"),
                &[fan_in, fan_out],
                fan_in,
                fan_out,
                scale,
                rng,
            ),
            b: Param::zeros(format!("{name}.b"), &[fan_out]),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: Var, binder: &mut Binder) -> Result<Var, NetError> {
        let w = binder.bind(tape, &self.w);
        let b = binder.bind(tape, &self.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.w, &mut self.b]
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// One dynamic-graph edge convolution: a k-NN graph is rebuilt on the current
/// features, the edge MLP h is applied to `[x_i | x_j - x_i]`, and edge
/// features are max-aggregated channel-wise per vertex. Gradients flow through
/// h and the gathered feature values, never through the graph indices.
#[derive(Debug, Clone)]
pub struct EdgeConvLayer<E> {
    pub lin1: Linear<E>,
    pub lin2: Linear<E>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<E: Scalar> EdgeConvLayer<E> {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        EdgeConvLayer {
            lin1: Linear::new(&format!("{name}.h1"), 2 * d_in, d_out, 1.0, rng),
            lin2: Linear::new(&format!("{name}.h2"), d_out, d_out, 1.0, rng),
            d_in,
            d_out,
        }
    }

    pub fn forward(
        &self,
        tape: &Tape<E>,
        x: Var,
        k: usize,
        binder: &mut Binder,
    ) -> Result<Var, NetError> {
        let shape = tape.shape(x);
        let n = shape[0];
        if shape[1] != self.d_in {
            return Err(NetError::DimMismatch {
                op: "edgeconv",
                expected: self.d_in,
                got: shape[1],
            });
        }
        // Graph built on detached feature values; the blocked kernel bounds
        // auxiliary memory for larger clouds.
        let feats = tape.values(x);
        let block = n.min(256);
        let graph = knn::knn_blocked(&feats, n, self.d_in, k, block)?;
        let mut idx_i = Vec::with_capacity(n * k);
        for i in 0..n {
            idx_i.extend(std::iter::repeat(i).take(k));
        }
        let xi = tape.gather_rows(x, &idx_i)?;
        let xj = tape.gather_rows(x, &graph.idx)?;
        let rel = tape.sub(xj, xi)?;
        let edge = tape.concat(&[xi, rel])?;
        let h = self.lin1.forward(tape, edge, binder)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.lin2.forward(tape, h, binder)?;
        let h = tape.reshape(h, &[n, k, self.d_out])?;
        Ok(tape.reduce_max(h, 1)?)
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut p = self.lin1.params();
        p.extend(self.lin2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.lin1.params_mut();
        p.extend(self.lin2.params_mut());
        p
    }
}

/// Architecture hyperparameters of one deformation network.
#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    /// EdgeConv output widths, outermost first.
    pub dims: [usize; 3],
    /// Hidden width of the prediction head.
    pub head_hidden: usize,
    pub d_shape: usize,
    pub d_pose: usize,
    pub k: usize,
    pub pe: PosEncodeConfig,
    /// Scale applied to the head's final layer init so initial displacements
    /// start near zero.
    pub head_init_scale: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            dims: [128, 128, 256],
            head_hidden: 256,
            d_shape: 128,
            d_pose: 128,
            k: 10,
            pe: PosEncodeConfig::default(),
            head_init_scale: 0.01,
        }
    }
}

impl StackConfig {
    /// Feature width entering the first EdgeConv layer: encoded points plus
    /// both broadcast latent codes.
    pub fn layer1_in(&self) -> usize {
        self.pe.out_dim(3) + self.d_shape + self.d_pose
    }
}

/// Three EdgeConv layers whose outputs are concatenated and passed through a
/// shallow MLP head predicting a per-point 3-D displacement.
#[derive(Debug, Clone)]
pub struct EdgeConvStack<E> {
    pub cfg: StackConfig,
    pub layers: Vec<EdgeConvLayer<E>>,
    pub head1: Linear<E>,
    pub head2: Linear<E>,
}

impl<E: Scalar> EdgeConvStack<E> {
    pub fn new(name: &str, cfg: StackConfig, rng: &mut impl Rng) -> Self {
        let d0 = cfg.layer1_in();
        let layers = vec![
            EdgeConvLayer::new(&format!("{name}.ec1"), d0, cfg.dims[0], rng),
            EdgeConvLayer::new(&format!("{name}.ec2"), cfg.dims[0], cfg.dims[1], rng),
            EdgeConvLayer::new(&format!("{name}.ec3"), cfg.dims[1], cfg.dims[2], rng),
        ];
        let concat_dim: usize = cfg.dims.iter().sum();
        let head1 = Linear::new(
            &format!("{name}.head1"),
            concat_dim,
            cfg.head_hidden,
            1.0,
            rng,
        );
        let head2 = Linear::new(
            &format!("{name}.head2"),
            cfg.head_hidden,
            3,
            cfg.head_init_scale,
            rng,
        );
        EdgeConvStack {
            cfg,
            layers,
            head1,
            head2,
        }
    }

    fn conditioned_input(
        &self,
        tape: &Tape<E>,
        encoded: Var,
        shape_code: Var,
        pose_code: Var,
    ) -> Result<Var, NetError> {
        let n = tape.shape(encoded)[0];
        let s = tape.broadcast_row(shape_code, n)?;
        let p = tape.broadcast_row(pose_code, n)?;
        let x = tape.concat(&[encoded, s, p])?;
        let got = tape.shape(x)[1];
        if got != self.cfg.layer1_in() {
            return Err(NetError::DimMismatch {
                op: "stack_forward",
                expected: self.cfg.layer1_in(),
                got,
            });
        }
        Ok(x)
    }

    /// Predict per-point displacements for encoded points conditioned on the
    /// shape and pose codes.
    pub fn forward(
        &self,
        tape: &Tape<E>,
        encoded: Var,
        shape_code: Var,
        pose_code: Var,
        binder: &mut Binder,
    ) -> Result<Var, NetError> {
        let x = self.conditioned_input(tape, encoded, shape_code, pose_code)?;
        let f1 = self.layers[0].forward(tape, x, self.cfg.k, binder)?;
        let f2 = self.layers[1].forward(tape, f1, self.cfg.k, binder)?;
        let f3 = self.layers[2].forward(tape, f2, self.cfg.k, binder)?;
        let cat = tape.concat(&[f1, f2, f3])?;
        let h = self.head1.forward(tape, cat, binder)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        Ok(self.head2.forward(tape, h, binder)?)
    }

    /// First EdgeConv layer's per-point features, used by unsupervised part
    /// segmentation.
    pub fn first_layer_features(
        &self,
        tape: &Tape<E>,
        encoded: Var,
        shape_code: Var,
        pose_code: Var,
    ) -> Result<Var, NetError> {
        let mut binder = Binder::frozen();
        let x = self.conditioned_input(tape, encoded, shape_code, pose_code)?;
        self.layers[0].forward(tape, x, self.cfg.k, &mut binder)
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut p = Vec::new();
        for l in &self.layers {
            p.extend(l.params());
        }
        p.extend(self.head1.params());
        p.extend(self.head2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut p = Vec::new();
        for l in &mut self.layers {
            p.extend(l.params_mut());
        }
        p.extend(self.head1.params_mut());
        p.extend(self.head2.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn pos_encode_zero_point() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[1, 3], vec![0.0, 0.0, 0.0]);
        let e = pos_encode(&tape, x, &PosEncodeConfig::default()).unwrap();
        let v = tape.values(e);
        assert_eq!(v.len(), 51);
        assert!(v[0..3].iter().all(|&c| c == 0.0));
        for band in 0..8 {
            let base = 3 + band * 6;
            assert!(v[base..base + 3].iter().all(|&s| s == 0.0));
            assert!(v[base + 3..base + 6].iter().all(|&c| c == 1.0));
        }
    }

    #[test]
    fn pos_encode_width_is_51_for_3d_8_bands() {
        assert_eq!(PosEncodeConfig::default().out_dim(3), 51);
    }

    #[test]
    fn pos_encode_matches_scalar_evaluation() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[1, 3], vec![0.5, 0.0, 0.0]);
        let e = pos_encode(&tape, x, &PosEncodeConfig::default()).unwrap();
        let v = tape.values(e);
        for band in 0..8 {
            let freq = (1u64 << band) as f64 * std::f64::consts::PI;
            let base = 3 + band * 6;
            assert!((v[base] - (freq * 0.5).sin()).abs() < 1e-15);
            assert!((v[base + 3] - (freq * 0.5).cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn edgeconv_constructed_weights_recover_displacement() {
        // Two points, k=1: with h2 = identity passthrough of (x_j - x_i) the
        // layer outputs the displacement to the other point.
        let mut r = rng(0);
        let mut layer: EdgeConvLayer<f64> = EdgeConvLayer::new("t", 3, 6, &mut r);
        // lin1: edge [x_i | x_j - x_i] (6 wide) -> channels [rel | -rel].
        layer.lin1.w.values = vec![0.0; 6 * 6];
        for c in 0..3 {
            layer.lin1.w.values[(3 + c) * 6 + c] = 1.0;
            layer.lin1.w.values[(3 + c) * 6 + 3 + c] = -1.0;
        }
        layer.lin1.b.values = vec![0.0; 6];
        // lrelu(x) - lrelu(-x) = (1 + slope) x, so lin2 undoes the
        // activation: out_c = (in_c - in_{3+c}) / 1.2.
        layer.lin2.w.values = vec![0.0; 36];
        for c in 0..3 {
            layer.lin2.w.values[c * 6 + c] = 1.0 / (1.0 + LEAKY_SLOPE);
            layer.lin2.w.values[(3 + c) * 6 + c] = -1.0 / (1.0 + LEAKY_SLOPE);
        }
        layer.lin2.b.values = vec![0.0; 6];
        let tape = Tape::new();
        let x = tape.constant(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, -1.0]);
        let mut binder = Binder::frozen();
        let out = layer.forward(&tape, x, 1, &mut binder).unwrap();
        let v = tape.values(out);
        for (row, expect) in [[1.0, 2.0, -1.0], [-1.0, -2.0, 1.0]].iter().enumerate() {
            for c in 0..3 {
                assert!((v[row * 6 + c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stack_zero_head_outputs_zero() {
        let mut r = rng(1);
        let cfg = StackConfig {
            dims: [8, 8, 16],
            head_hidden: 16,
            d_shape: 4,
            d_pose: 4,
            k: 3,
            pe: PosEncodeConfig::default(),
            head_init_scale: 0.0,
        };
        let stack: EdgeConvStack<f64> = EdgeConvStack::new("fwd", cfg, &mut r);
        let tape = Tape::new();
        let mut rr = rng(2);
        let pts: Vec<f64> = (0..10 * 3).map(|_| rr.gen_range(-1.0..1.0)).collect();
        let x = tape.constant(&[10, 3], pts);
        let enc = pos_encode(&tape, x, &stack.cfg.pe).unwrap();
        let s = tape.constant(&[4], vec![0.1; 4]);
        let p = tape.constant(&[4], vec![-0.2; 4]);
        let mut binder = Binder::frozen();
        let out = stack.forward(&tape, enc, s, p, &mut binder).unwrap();
        assert!(tape.values(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stack_layer1_input_width() {
        let cfg = StackConfig::default();
        assert_eq!(cfg.layer1_in(), 51 + 128 + 128);
    }

    #[test]
    fn permutation_equivariance_exact() {
        let mut r = rng(3);
        let cfg = StackConfig {
            dims: [8, 8, 16],
            head_hidden: 16,
            d_shape: 4,
            d_pose: 4,
            k: 4,
            pe: PosEncodeConfig::default(),
            head_init_scale: 1.0,
        };
        let stack: EdgeConvStack<f64> = EdgeConvStack::new("fwd", cfg, &mut r);
        let n = 12;
        let mut rr = rng(4);
        let pts: Vec<f64> = (0..n * 3).map(|_| rr.gen_range(-1.0..1.0)).collect();
        let scode = vec![0.3; 4];
        let pcode = vec![-0.1; 4];

        let run = |points: &[f64]| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.constant(&[n, 3], points.to_vec());
            let enc = pos_encode(&tape, x, &stack.cfg.pe).unwrap();
            let s = tape.constant(&[4], scode.clone());
            let p = tape.constant(&[4], pcode.clone());
            let mut binder = Binder::frozen();
            let out = stack.forward(&tape, enc, s, p, &mut binder).unwrap();
            tape.values(out)
        };

        let base = run(&pts);
        // Rotate point order by 5.
        let perm: Vec<usize> = (0..n).map(|i| (i + 5) % n).collect();
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&i| pts[i * 3..(i + 1) * 3].to_vec())
            .collect();
        let out_p = run(&permuted);
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(
                &out_p[row * 3..(row + 1) * 3],
                &base[src * 3..(src + 1) * 3]
            );
        }
    }
}
