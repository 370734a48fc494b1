//! Feedforward keypoint regressor with hand-written backpropagation.
//!
//! `input (F) → [affine → tanh]* → affine → reshape 3×d → center`. The final
//! centering is part of the model, so every prediction has its centroid at
//! the origin and gradients flow through the centering projection.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3xX};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::KeypointConfig;
use crate::io;

/// Layer sizes of the regressor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub keypoints: usize,
}

impl Architecture {
    /// One tanh hidden layer of width 64.
    pub fn with_default_hidden(input_dim: usize, keypoints: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64],
            keypoints,
        }
    }

    pub fn output_dim(&self) -> usize {
        3 * self.keypoints
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim())) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if self.keypoints < 2 {
            return Err(Error::invalid("at least 2 keypoints are required"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }
}

/// Weights (`fan_out × fan_in`) and bias of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: DMatrix::zeros(fan_out, fan_in),
            bias: DVector::zeros(fan_out),
        }
    }
}

fn zeros_like(layers: &[Layer]) -> Vec<Layer> {
    layers
        .iter()
        .map(|l| Layer::zeros(l.weights.ncols(), l.weights.nrows()))
        .collect()
}

fn values(layers: &[Layer]) -> impl Iterator<Item = &f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
}

fn values_mut(layers: &mut [Layer]) -> impl Iterator<Item = &mut f64> {
    layers
        .iter_mut()
        .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
}

/// Network parameters `θ` together with the architecture and init seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    arch: Architecture,
    seed: u64,
    layers: Vec<Layer>,
}

/// Gradient of a scalar loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        values(&self.layers)
    }

    /// `self += scale·other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in values_mut(&mut self.layers).zip(values(&other.layers)) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in values_mut(&mut self.layers) {
            *v *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Activations of one forward pass over a batch, kept for backpropagation.
pub struct ForwardCache {
    /// Layer inputs: `activations[0]` is the input batch, then each tanh output.
    activations: Vec<DMatrix<f64>>,
    outputs: Vec<KeypointConfig>,
}

impl ForwardCache {
    pub fn outputs(&self) -> &[KeypointConfig] {
        &self.outputs
    }

    pub fn into_outputs(self) -> Vec<KeypointConfig> {
        self.outputs
    }
}

impl PredictorParams {
    /// Uniform `[−1/√fan_in, 1/√fan_in]` initialization of weights and biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights =
                    DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..=bound));
                let bias = DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..=bound));
                Layer { weights, bias }
            })
            .collect();
        Ok(Self { arch, seed, layers })
    }

    /// Builds parameters from explicit layers, checking shapes against `arch`.
    pub fn from_layers(arch: Architecture, seed: u64, layers: Vec<Layer>) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::invalid(format!(
                "architecture has {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (k, ((fan_in, fan_out), layer)) in dims.iter().zip(&layers).enumerate() {
            if layer.weights.shape() != (*fan_out, *fan_in) || layer.bias.len() != *fan_out {
                return Err(Error::invalid(format!("layer {k} has the wrong shape")));
            }
        }
        if values(&layers).any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(Self { arch, seed, layers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        values(&self.layers).count()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        values(&self.layers)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        values_mut(&mut self.layers)
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            layers: zeros_like(&self.layers),
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.arch.input_dim {
            return Err(Error::invalid(format!(
                "input has length {}, expected {}",
                input.len(),
                self.arch.input_dim
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input has non-finite entries"));
        }
        Ok(())
    }

    /// Predicted, centered keypoints for one input.
    pub fn forward(&self, input: &[f64]) -> Result<KeypointConfig> {
        let cache = self.forward_batch(&[input])?;
        Ok(cache.into_outputs().pop().expect("one output per input"))
    }

    /// Forward pass over a batch, keeping the activations.
    pub fn forward_batch(&self, inputs: &[&[f64]]) -> Result<ForwardCache> {
        for input in inputs {
            self.check_input(input)?;
        }
        let f = self.arch.input_dim;
        let mut x = DMatrix::zeros(f, inputs.len());
        for (b, input) in inputs.iter().enumerate() {
            x.column_mut(b).copy_from_slice(input);
        }
        let mut activations = vec![x];
        let last = self.layers.len() - 1;
        let mut raw = DMatrix::zeros(0, 0);
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * activations.last().expect("input present");
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if k == last {
                raw = z;
            } else {
                z.apply(|v| *v = v.tanh());
                activations.push(z);
            }
        }
        let outputs = raw
            .column_iter()
            .map(|col| {
                KeypointConfig::center_unchecked(Matrix3xX::from_column_slice(
                    col.as_slice(),
                ))
            })
            .collect();
        Ok(ForwardCache {
            activations,
            outputs,
        })
    }

    /// `∂L/∂θ` for one input given `∂L/∂(output)`.
    pub fn backward(&self, input: &[f64], output_grad: &Matrix3xX<f64>) -> Result<ParamGrads> {
        let cache = self.forward_batch(&[input])?;
        self.backward_batch(&cache, std::slice::from_ref(output_grad))
    }

    /// Sum over the batch of `∂Lᵦ/∂θ` given each `∂Lᵦ/∂(outputᵦ)`.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        output_grads: &[Matrix3xX<f64>],
    ) -> Result<ParamGrads> {
        let batch = cache.outputs.len();
        if output_grads.len() != batch {
            return Err(Error::invalid(format!(
                "{} output gradients for a batch of {batch}",
                output_grads.len()
            )));
        }
        let out_dim = self.arch.output_dim();
        let mut delta = DMatrix::zeros(out_dim, batch);
        for (b, g) in output_grads.iter().enumerate() {
            if g.ncols() != self.arch.keypoints {
                return Err(Error::invalid(format!(
                    "output gradient has {} keypoints, expected {}",
                    g.ncols(),
                    self.arch.keypoints
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("output gradient has non-finite entries"));
            }
            // centering is an orthogonal projection, so its adjoint is itself
            let mut projected = g.clone();
            let mean = projected.column_mean();
            for mut col in projected.column_iter_mut() {
                col -= mean;
            }
            delta.column_mut(b).copy_from_slice(projected.as_slice());
        }

        let mut grads = zeros_like(&self.layers);
        for k in (0..self.layers.len()).rev() {
            let input = &cache.activations[k];
            grads[k].weights = &delta * input.transpose();
            grads[k].bias = delta.column_sum();
            if k > 0 {
                let mut upstream = self.layers[k].weights.transpose() * &delta;
                upstream.zip_apply(input, |u, a| *u *= 1.0 - a * a);
                delta = upstream;
            }
        }
        Ok(ParamGrads { layers: grads })
    }

    /// Writes a JSON checkpoint with row-major parameter arrays.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &Checkpoint::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = io::read_json(path)?;
        ckpt.into_params().map_err(|e| Error::format(path, e))
    }
}

const CHECKPOINT_FORMAT: &str = "viewconsist-predictor";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    architecture: Architecture,
    seed: u64,
    layers: Vec<CheckpointLayer>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    rows: usize,
    cols: usize,
    /// Row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl From<&PredictorParams> for Checkpoint {
    fn from(p: &PredictorParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            architecture: p.arch.clone(),
            seed: p.seed,
            layers: p
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.transpose().as_slice().to_vec(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
        }
    }
}

impl Checkpoint {
    fn into_params(self) -> Result<PredictorParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let layers = self
            .layers
            .into_iter()
            .map(|l| {
                if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                    return Err(Error::invalid("layer array lengths do not match its shape"));
                }
                Ok(Layer {
                    weights: DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
                    bias: DVector::from_vec(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PredictorParams::from_layers(self.architecture, self.seed, layers)
    }
}

/// Minibatch SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epoch (0-based, counted per training phase) from which the rate is dropped.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 64,
            lr_drop_epoch: 80,
            lr_drop_factor: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.lr_drop_epoch == 0 {
            return Err(Error::invalid("lr_drop_epoch must be positive"));
        }
        if !(self.lr_drop_factor > 0.0) {
            return Err(Error::invalid("lr_drop_factor must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

/// Velocity buffers for momentum SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    velocity: Vec<Layer>,
}

impl MomentumState {
    pub fn new(params: &PredictorParams) -> Self {
        Self {
            velocity: zeros_like(&params.layers),
        }
    }
}

/// `v ← m·v + (g + wd·θ)`, then `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut PredictorParams,
    grads: &ParamGrads,
    state: &mut MomentumState,
    cfg: &SgdConfig,
    learning_rate: f64,
) -> Result<()> {
    let shapes_match = |a: &[Layer], b: &[Layer]| {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| x.weights.shape() == y.weights.shape() && x.bias.len() == y.bias.len())
    };
    if !shapes_match(&params.layers, &grads.layers) || !shapes_match(&params.layers, &state.velocity)
    {
        return Err(Error::invalid("gradient or momentum shape does not match parameters"));
    }
    for ((theta, g), v) in values_mut(&mut params.layers)
        .zip(values(&grads.layers))
        .zip(values_mut(&mut state.velocity))
    {
        *v = cfg.momentum * *v + (g + cfg.weight_decay * *theta);
        *theta -= learning_rate * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PredictorParams {
        let arch = Architecture {
            input_dim: 6,
            hidden: vec![4],
            keypoints: 3,
        };
        PredictorParams::init(arch, 5).unwrap()
    }

    fn input(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let mut p = tiny();
        let last = p.layers_mut().last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
        let out = p.forward(&input(1, 6)).unwrap();
        assert_eq!(out, KeypointConfig::zeros(3));
    }

    #[test]
    fn linear_identity_passes_centered_keypoints() {
        let arch = Architecture {
            input_dim: 12,
            hidden: vec![],
            keypoints: 4,
        };
        let layer = Layer {
            weights: DMatrix::identity(12, 12),
            bias: DVector::zeros(12),
        };
        let p = PredictorParams::from_layers(arch, 0, vec![layer]).unwrap();
        let kp = KeypointConfig::from_column_slice(&input(2, 12)).unwrap();
        let out = p.forward(&kp.to_column_vec()).unwrap();
        assert!((out.coords() - kp.coords()).amax() < 1e-15);
    }

    #[test]
    fn outputs_are_centered() {
        let p = tiny();
        let out = p.forward(&input(3, 6)).unwrap();
        for row in out.coords().row_iter() {
            assert!(row.sum().abs() < 1e-9);
        }
    }

    #[test]
    fn shape_errors() {
        let p = tiny();
        assert!(p.forward(&input(4, 5)).is_err());
        assert!(p.forward(&[f64::NAN; 6]).is_err());
        assert!(p.backward(&input(4, 6), &Matrix3xX::zeros(4)).is_err());
        let bad = Architecture {
            input_dim: 6,
            hidden: vec![0],
            keypoints: 3,
        };
        assert!(PredictorParams::init(bad, 0).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grad() {
        let p = tiny();
        let g = p.backward(&input(5, 6), &Matrix3xX::zeros(3)).unwrap();
        assert!(g.values().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_single_gradients() {
        let p = tiny();
        let xs = [input(6, 6), input(7, 6)];
        let gs = [
            Matrix3xX::from_column_slice(&input(8, 9)),
            Matrix3xX::from_column_slice(&input(9, 9)),
        ];
        let cache = p.forward_batch(&[&xs[0], &xs[1]]).unwrap();
        let batch = p.backward_batch(&cache, &gs).unwrap();
        let mut sum = p.backward(&xs[0], &gs[0]).unwrap();
        sum.add_scaled(&p.backward(&xs[1], &gs[1]).unwrap(), 1.0);
        for (a, b) in batch.values().zip(sum.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_zero_rate_is_noop() {
        let mut p = tiny();
        let before = p.clone();
        let grads = p.backward(&input(10, 6), &Matrix3xX::from_element(3, 1.0)).unwrap();
        let mut state = MomentumState::new(&p);
        sgd_step(&mut p, &grads, &mut state, &SgdConfig::default(), 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = tiny();
        let before = p.clone();
        let grads = p.backward(&input(11, 6), &Matrix3xX::from_element(3, 0.5)).unwrap();
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = MomentumState::new(&p);
        sgd_step(&mut p, &grads, &mut state, &cfg, 0.1).unwrap();
        for ((a, b), g) in p.values().zip(before.values()).zip(grads.values()) {
            assert_eq!(*a, b - 0.1 * g);
        }
    }

    #[test]
    fn sgd_two_momentum_steps() {
        let mut p = tiny();
        let before = p.clone();
        let grads = p.backward(&input(12, 6), &Matrix3xX::from_element(3, 0.5)).unwrap();
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = MomentumState::new(&p);
        sgd_step(&mut p, &grads, &mut state, &cfg, 0.05).unwrap();
        sgd_step(&mut p, &grads, &mut state, &cfg, 0.05).unwrap();
        for ((a, b), g) in p.values().zip(before.values()).zip(grads.values()) {
            assert!((a - (b - 0.05 * 2.9 * g)).abs() < 1e-15);
        }
    }

    #[test]
    fn learning_rate_drop() {
        // 0.01 dropped to 0.001 after 20 epochs
        let cfg = SgdConfig {
            lr_drop_epoch: 20,
            ..SgdConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(19), 0.01);
        assert!((cfg.learning_rate_at(20) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        let q = PredictorParams::load(&path).unwrap();
        assert_eq!(p, q);
        for (a, b) in p.values().zip(q.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
