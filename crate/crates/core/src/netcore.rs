//! Fully connected networks with explicit forward and backward passes.
//!
//! Layer `k` computes `h_b = W h_a (+ b)`. The forward pass records every
//! `h_a` and `h_b`; the backward pass materializes the per-sample neuron
//! gradients `g = −∇_h ℓ` for both sides of every linear map. When a layer
//! has a bias, its tape appends a constant `1` to `h_a` and treats the bias as
//! an extra weight column, so `h_b = W' h_a'` and `g_a' = W'ᵀ g_b` hold exactly.
//!
//! Layer indices are zero-based throughout.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CrhError, Result};
use crate::linalg::SymMatrix;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Sin,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sin => x.sin(),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Sin => x.cos(),
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Loss {
    /// `ℓ = ½‖f − y‖²`
    Mse,
    /// Softmax cross-entropy against class indices.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    Regression(Array2<T>),
    Classes(Vec<usize>),
}

impl<T: Real> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.nrows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `d_out × d_in`
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Real> Linear<T> {
    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }

    /// `W' = [W | b]`, or `W` when there is no bias.
    pub fn augmented_weight(&self) -> Array2<T> {
        match &self.bias {
            None => self.weight.clone(),
            Some(b) => {
                let mut w = Array2::zeros((self.d_out(), self.d_in() + 1));
                w.slice_mut(s![.., ..self.d_in()]).assign(&self.weight);
                w.column_mut(self.d_in()).assign(b);
                w
            }
        }
    }

    fn set_augmented(&mut self, w: &Array2<T>) {
        let d_in = self.d_in();
        self.weight.assign(&w.slice(s![.., ..d_in]));
        if let Some(b) = self.bias.as_mut() {
            b.assign(&w.column(d_in));
        }
    }

    fn apply(&self, h: ArrayView2<T>) -> Array2<T> {
        let mut out = h.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            out += &b.view().insert_axis(Axis(0));
        }
        out
    }
}

/// Multilayer perceptron. The activation is applied between consecutive
/// linear layers; the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    layers: Vec<Linear<T>>,
    activation: Activation,
}

impl<T: Real> MlpModel<T> {
    pub fn new(layers: Vec<Linear<T>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(CrhError::Empty("model layers"));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(CrhError::DimensionMismatch {
                    context: "consecutive layer dims",
                    expected: pair[0].d_out(),
                    got: pair[1].d_in(),
                });
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if let Some(b) = &l.bias {
                if b.len() != l.d_out() {
                    return Err(CrhError::DimensionMismatch {
                        context: "bias length",
                        expected: l.d_out(),
                        got: b.len(),
                    });
                }
            }
            let finite = l.weight.iter().all(|v| v.is_finite())
                && l.bias.iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(CrhError::NonFinite {
                    context: format!("layer {k} parameters"),
                });
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layer(&self, k: usize) -> &Linear<T> {
        &self.layers[k]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.d_out()))
            .collect()
    }

    pub fn forward_capture(&self, x: ArrayView2<T>) -> Result<ForwardRecord<T>> {
        if x.ncols() != self.input_dim() {
            return Err(CrhError::DimensionMismatch {
                context: "input batch columns",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.depth());
        let mut pre = Vec::with_capacity(self.depth());
        let mut h = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let hb = layer.apply(h.view());
            if hb.iter().any(|v| !v.is_finite()) {
                return Err(CrhError::NonFiniteActivation { layer: k });
            }
            let next = if k + 1 < self.depth() {
                let act = self.activation;
                Some(hb.mapv(|v| act.apply(v)))
            } else {
                None
            };
            inputs.push(h);
            pre.push(hb);
            if let Some(n) = next {
                h = n;
            } else {
                break;
            }
        }
        Ok(ForwardRecord { inputs, pre })
    }

    pub fn predict(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.forward_capture(x)?.into_prediction())
    }

    /// Runs layers `layer..` starting from a given `h_a` (without the bias
    /// coordinate).
    pub fn forward_from(&self, layer: usize, h_a: ArrayView2<T>) -> Result<Array2<T>> {
        if layer >= self.depth() {
            return Err(CrhError::InvalidArgument(format!("no layer {layer}")));
        }
        if h_a.ncols() != self.layers[layer].d_in() {
            return Err(CrhError::DimensionMismatch {
                context: "forward_from input",
                expected: self.layers[layer].d_in(),
                got: h_a.ncols(),
            });
        }
        let mut h = self.layers[layer].apply(h_a);
        for k in (layer + 1)..self.depth() {
            let act = self.activation;
            h.mapv_inplace(|v| act.apply(v));
            h = self.layers[k].apply(h.view());
        }
        Ok(h)
    }

    /// Propagates a gradient with respect to the output back to `h_b` of
    /// layer `to_layer`, without any sign change.
    fn pull_back(&self, record: &ForwardRecord<T>, output_grad: Array2<T>, to_layer: usize) -> Array2<T> {
        let mut grad = output_grad;
        for k in ((to_layer + 1)..self.depth()).rev() {
            let upstream = grad.dot(&self.layers[k].weight);
            let act = self.activation;
            grad = ndarray::Zip::from(&upstream)
                .and(&record.pre[k - 1])
                .map_collect(|g, z| *g * act.derivative(*z));
        }
        grad
    }

    pub fn backward_capture(&self, record: &ForwardRecord<T>, targets: &Targets<T>, loss: Loss) -> Result<Backward<T>> {
        let prediction = record.prediction();
        if targets.len() != prediction.nrows() {
            return Err(CrhError::DimensionMismatch {
                context: "target batch size",
                expected: prediction.nrows(),
                got: targets.len(),
            });
        }
        let eval = loss_eval(prediction.view(), targets, loss)?;
        let mut tapes = Vec::with_capacity(self.depth());
        let mut g_b = eval.gradient.mapv(|v| -v);
        for k in (0..self.depth()).rev() {
            let layer = &self.layers[k];
            let g_a_plain = g_b.dot(&layer.weight);
            let (h_a, g_a) = match &layer.bias {
                None => (record.inputs[k].clone(), g_a_plain.clone()),
                Some(b) => {
                    let h = append_column(record.inputs[k].view(), |_| T::one());
                    let gb_dot_b = g_b.dot(b);
                    let g = append_column(g_a_plain.view(), |i| gb_dot_b[i]);
                    (h, g)
                }
            };
            let next_g_b = if k > 0 {
                let act = self.activation;
                Some(
                    ndarray::Zip::from(&g_a_plain)
                        .and(&record.pre[k - 1])
                        .map_collect(|g, z| *g * act.derivative(*z)),
                )
            } else {
                None
            };
            tapes.push(LayerTape {
                layer_index: k,
                h_a,
                h_b: record.pre[k].clone(),
                g_a,
                g_b,
            });
            match next_g_b {
                Some(g) => g_b = g,
                None => break,
            }
        }
        tapes.reverse();
        Ok(Backward { tapes, loss: eval })
    }

    /// Per-output-unit Jacobians `∂f_j/∂h_a'` of layer `layer`, each `N × d_in'`
    /// (the bias coordinate included when present).
    pub fn output_jacobians(&self, record: &ForwardRecord<T>, layer: usize) -> Vec<Array2<T>> {
        let n = record.batch_size();
        let w = self.layers[layer].augmented_weight();
        (0..self.output_dim())
            .map(|j| {
                let mut seed = Array2::zeros((n, self.output_dim()));
                seed.column_mut(j).fill(T::one());
                self.pull_back(record, seed, layer).dot(&w)
            })
            .collect()
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn cast<U: Real>(&self) -> MlpModel<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        MlpModel {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: c(&l.weight),
                    bias: l.bias.as_ref().map(|b| b.mapv(|v| U::lit(v.to_f64_lossy()))),
                })
                .collect(),
            activation: self.activation,
        }
    }
}

fn append_column<T: Real>(a: ArrayView2<T>, f: impl Fn(usize) -> T) -> Array2<T> {
    let (n, d) = a.dim();
    let mut out = Array2::zeros((n, d + 1));
    out.slice_mut(s![.., ..d]).assign(&a);
    for i in 0..n {
        out[[i, d]] = f(i);
    }
    out
}

/// Gaussian initialization with standard deviation `1/√d_in`, zero biases.
pub fn init_mlp<T: Real>(dims: &[usize], activation: Activation, bias: bool, seed: u64) -> Result<MlpModel<T>> {
    if dims.len() < 2 {
        return Err(CrhError::InvalidArgument(format!(
            "need at least input and output dims, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(CrhError::InvalidArgument(format!("zero width in {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (d_in, d_out) = (w[0], w[1]);
            let std = 1.0 / (d_in as f64).sqrt();
            let weight = Array2::from_shape_fn((d_out, d_in), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(z * std)
            });
            Linear {
                weight,
                bias: bias.then(|| Array1::zeros(d_out)),
            }
        })
        .collect();
    MlpModel::new(layers, activation)
}

#[derive(Debug, Clone)]
pub struct ForwardRecord<T> {
    /// `h_a` per layer, without the bias coordinate.
    pub inputs: Vec<Array2<T>>,
    /// `h_b` per layer.
    pub pre: Vec<Array2<T>>,
}

impl<T: Real> ForwardRecord<T> {
    pub fn prediction(&self) -> &Array2<T> {
        self.pre.last().expect("record has at least one layer")
    }

    pub fn into_prediction(mut self) -> Array2<T> {
        self.pre.pop().expect("record has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Per-sample capture for one linear layer; rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTape<T> {
    pub layer_index: usize,
    /// `N × d_in'` post-activation input (constant `1` appended with bias).
    pub h_a: Array2<T>,
    /// `N × d_out` pre-activation output.
    pub h_b: Array2<T>,
    /// `N × d_in'`, `g_a = −∇_{h_a} ℓ`.
    pub g_a: Array2<T>,
    /// `N × d_out`, `g_b = −∇_{h_b} ℓ`.
    pub g_b: Array2<T>,
}

impl<T: Real> LayerTape<T> {
    pub fn batch_size(&self) -> usize {
        self.h_a.nrows()
    }

    /// Largest violation of `h_b = W'h_a'` and `g_a' = W'ᵀg_b` over the batch.
    pub fn chain_rule_error(&self, layer: &Linear<T>) -> T {
        let w = layer.augmented_weight();
        let hb = self.h_a.dot(&w.t());
        let ga = self.g_b.dot(&w);
        let e1 = (&hb - &self.h_b).iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let e2 = (&ga - &self.g_a).iter().fold(T::zero(), |m, v| m.max(v.abs()));
        e1.max(e2)
    }
}

#[derive(Debug, Clone)]
pub struct Backward<T> {
    pub tapes: Vec<LayerTape<T>>,
    pub loss: LossEval<T>,
}

#[derive(Debug, Clone)]
pub struct LossEval<T> {
    /// Batch-mean loss.
    pub value: T,
    pub per_sample: Array1<T>,
    /// `∇_f ℓ`, one row per sample.
    pub gradient: Array2<T>,
    /// `E[∇_f ℓ ∇_f ℓᵀ]` over the batch.
    pub b_matrix: SymMatrix<T>,
}

pub fn loss_eval<T: Real>(prediction: ArrayView2<T>, targets: &Targets<T>, loss: Loss) -> Result<LossEval<T>> {
    let (n, d) = prediction.dim();
    if n == 0 {
        return Err(CrhError::Empty("prediction batch"));
    }
    let (per_sample, gradient) = match (loss, targets) {
        (Loss::Mse, Targets::Regression(y)) => {
            if y.dim() != prediction.dim() {
                return Err(CrhError::DimensionMismatch {
                    context: "regression target shape",
                    expected: prediction.len(),
                    got: y.len(),
                });
            }
            let diff = &prediction - y;
            let half = T::lit(0.5);
            let per = diff.map_axis(Axis(1), |r| r.iter().map(|v| *v * *v).sum::<T>() * half);
            (per, diff)
        }
        (Loss::Mse, Targets::Classes(labels)) => {
            let y = one_hot(labels, d)?;
            return loss_eval(prediction, &Targets::Regression(y), Loss::Mse);
        }
        (Loss::CrossEntropy, Targets::Classes(labels)) => {
            let mut per = Array1::zeros(n);
            let mut grad = Array2::zeros((n, d));
            for (i, &c) in labels.iter().enumerate() {
                if c >= d {
                    return Err(CrhError::InvalidClass { index: c, classes: d });
                }
                let row = prediction.row(i);
                let m = row.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
                let exps: Vec<T> = row.iter().map(|v| (*v - m).exp()).collect();
                let z: T = exps.iter().copied().sum();
                per[i] = z.ln() + m - row[c];
                for j in 0..d {
                    grad[[i, j]] = exps[j] / z;
                }
                grad[[i, c]] -= T::one();
            }
            (per, grad)
        }
        (Loss::CrossEntropy, Targets::Regression(_)) => {
            return Err(CrhError::InvalidArgument(
                "cross-entropy needs class-index targets".into(),
            ))
        }
    };
    let nf = T::from_usize_lossy(n);
    let value = per_sample.sum() / nf;
    let b_matrix = SymMatrix::symmetrize(gradient.t().dot(&gradient) / nf);
    Ok(LossEval {
        value,
        per_sample,
        gradient,
        b_matrix,
    })
}

pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Array2<T>> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(CrhError::InvalidClass { index: c, classes });
        }
        y[[i, c]] = T::one();
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer<T> {
    Sgd,
    SgdMomentum { beta: T },
    Adam { beta1: T, beta2: T, eps: T },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub learning_rate: T,
    pub weight_decay: T,
    pub batch_size: usize,
    pub steps: u64,
    pub optimizer: Optimizer<T>,
    pub seed: u64,
    pub loss: Loss,
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CrhError::InvalidArgument(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > T::zero()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= T::zero()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.learning_rate * self.weight_decay >= T::one() {
            return bad("learning_rate * weight_decay must be < 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        match self.optimizer {
            Optimizer::Sgd => {}
            Optimizer::SgdMomentum { beta } => {
                if !(beta >= T::zero() && beta < T::one()) {
                    return bad(format!("momentum must lie in [0, 1), got {beta}"));
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let unit = |b: T| b >= T::zero() && b < T::one();
                if !(unit(beta1) && unit(beta2) && eps > T::zero() && eps.is_finite()) {
                    return bad("adam betas must lie in [0, 1) and eps > 0".into());
                }
            }
        }
        Ok(())
    }
}

/// Optimizer buffers, one entry per layer in the augmented-weight layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<Array2<T>>,
    pub second: Vec<Array2<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &MlpModel<T>) -> Self {
        let zeros: Vec<Array2<T>> = model
            .layers()
            .iter()
            .map(|l| Array2::zeros(l.augmented_weight().dim()))
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// Batch-mean descent direction `E[g_b h_aᵀ] − γW'` for every layer.
pub fn descent_directions<T: Real>(model: &MlpModel<T>, tapes: &[LayerTape<T>], weight_decay: T) -> Result<Vec<Array2<T>>> {
    if tapes.len() != model.depth() {
        return Err(CrhError::DimensionMismatch {
            context: "tapes per layer",
            expected: model.depth(),
            got: tapes.len(),
        });
    }
    model
        .layers()
        .iter()
        .zip(tapes)
        .map(|(layer, tape)| {
            let n = T::from_usize_lossy(tape.batch_size());
            let w = layer.augmented_weight();
            if tape.g_b.ncols() != w.nrows() || tape.h_a.ncols() != w.ncols() {
                return Err(CrhError::DimensionMismatch {
                    context: "tape vs layer shape",
                    expected: w.len(),
                    got: tape.g_b.ncols() * tape.h_a.ncols(),
                });
            }
            Ok(tape.g_b.t().dot(&tape.h_a) / n - w * weight_decay)
        })
        .collect()
}

fn commit<T: Real>(model: &mut MlpModel<T>, updated: Vec<Array2<T>>) -> Result<()> {
    for (k, w) in updated.iter().enumerate() {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(CrhError::NonFiniteUpdate { layer: k });
        }
    }
    for (layer, w) in model.layers_mut().iter_mut().zip(&updated) {
        layer.set_augmented(w);
    }
    Ok(())
}

/// `W ← W + η(E[g_b h_aᵀ] − γW)`, or with a heavy-ball velocity
/// `v ← βv + (E[g_b h_aᵀ] − γW)`, `W ← W + ηv`.
pub fn sgd_step<T: Real>(
    model: &mut MlpModel<T>,
    tapes: &[LayerTape<T>],
    config: &TrainConfig<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let dirs = descent_directions(model, tapes, config.weight_decay)?;
    let eta = config.learning_rate;
    let mut velocity = state.first.clone();
    let updated = model
        .layers()
        .iter()
        .zip(dirs)
        .zip(velocity.iter_mut())
        .map(|((layer, d), v)| {
            let step = match config.optimizer {
                Optimizer::SgdMomentum { beta } => {
                    *v = &*v * beta + &d;
                    v.clone()
                }
                _ => d,
            };
            layer.augmented_weight() + step * eta
        })
        .collect();
    commit(model, updated)?;
    if matches!(config.optimizer, Optimizer::SgdMomentum { .. }) {
        state.first = velocity;
    }
    state.step += 1;
    Ok(())
}

/// Adam with bias correction. Weight decay is coupled: the gradient fed to
/// the moment estimates is `−(E[g_b h_aᵀ] − γW)`.
pub fn adam_step<T: Real>(
    model: &mut MlpModel<T>,
    tapes: &[LayerTape<T>],
    config: &TrainConfig<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let (beta1, beta2, eps) = match config.optimizer {
        Optimizer::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
        _ => return Err(CrhError::InvalidArgument("adam_step needs an Adam config".into())),
    };
    let dirs = descent_directions(model, tapes, config.weight_decay)?;
    let t = state.step + 1;
    let t_i32 = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = T::one() - beta1.powi(t_i32);
    let c2 = T::one() - beta2.powi(t_i32);
    let mut first = state.first.clone();
    let mut second = state.second.clone();
    let eta = config.learning_rate;
    let mut updated = Vec::with_capacity(model.depth());
    for (k, (layer, d)) in model.layers().iter().zip(dirs).enumerate() {
        let g = d.mapv(|v| -v);
        first[k] = &first[k] * beta1 + &(&g * (T::one() - beta1));
        second[k] = &second[k] * beta2 + &(g.mapv(|v| v * v) * (T::one() - beta2));
        let step = ndarray::Zip::from(&first[k])
            .and(&second[k])
            .map_collect(|m, v| (*m / c1) / ((*v / c2).sqrt() + eps));
        updated.push(layer.augmented_weight() - step * eta);
    }
    commit(model, updated)?;
    state.first = first;
    state.second = second;
    state.step = t;
    Ok(())
}

pub fn optimizer_step<T: Real>(
    model: &mut MlpModel<T>,
    tapes: &[LayerTape<T>],
    config: &TrainConfig<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    match config.optimizer {
        Optimizer::Adam { .. } => adam_step(model, tapes, config, state),
        _ => sgd_step(model, tapes, config, state),
    }
}

/// Forward, backward and one optimizer step on a batch; returns the batch loss
/// measured before the update.
pub fn train_step<T: Real>(
    model: &mut MlpModel<T>,
    x: ArrayView2<T>,
    targets: &Targets<T>,
    config: &TrainConfig<T>,
    state: &mut OptimizerState<T>,
) -> Result<T> {
    let record = model.forward_capture(x)?;
    let back = model.backward_capture(&record, targets, config.loss)?;
    if !back.loss.value.is_finite() {
        return Err(CrhError::NonFinite {
            context: "training loss".into(),
        });
    }
    optimizer_step(model, &back.tapes, config, state)?;
    Ok(back.loss.value)
}
