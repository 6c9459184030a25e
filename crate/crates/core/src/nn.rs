//! Minimal feed-forward engine with manual backpropagation: dense layers with
//! ReLU, inverted dropout, embedding tables, and SGD/Adam updates. Training is
//! single-threaded and deterministic per seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Dropout {
        rate: f64,
    },
    Embedding {
        vocab: usize,
        dim: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Layer {
    Dense(DenseLayer),
    Dropout { rate: f64 },
}

/// A chain of dense/dropout layers. Embedding tables live outside the chain
/// (see [`EmbeddingTable`]); their outputs are assembled into the input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

pub struct ForwardCache {
    /// Per dense layer: (input activations, pre-activation z).
    dense: Vec<(DenseMatrix, DenseMatrix)>,
    /// Per dropout layer: scaled keep mask, or None in evaluation mode.
    masks: Vec<Option<DenseMatrix>>,
    batch: usize,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub dw: Vec<DenseMatrix>,
    pub db: Vec<Vec<f64>>,
}

impl Mlp {
    /// Build from a layer chain. Dense input widths must match the previous
    /// layer's output; dropout layers keep the width. Weights use a uniform
    /// Glorot range, biases start at zero.
    pub fn new(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width: Option<usize> = None;
        let mut input_dim = 0;
        for spec in specs {
            match *spec {
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    activation,
                } => {
                    if inputs == 0 || outputs == 0 {
                        return Err(Error::InvalidSpec("layer dims must be positive".into()));
                    }
                    if let Some(w) = width {
                        if w != inputs {
                            return Err(Error::DimensionMismatch {
                                context: "dense layer input",
                                expected: w,
                                actual: inputs,
                            });
                        }
                    } else {
                        input_dim = inputs;
                    }
                    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                    let w =
                        DenseMatrix::from_fn(inputs, outputs, |_, _| rng.gen_range(-limit..limit));
                    layers.push(Layer::Dense(DenseLayer {
                        w,
                        b: vec![0.0; outputs],
                        activation,
                    }));
                    width = Some(outputs);
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::InvalidSpec(format!(
                            "dropout rate {rate} not in [0, 1)"
                        )));
                    }
                    if width.is_none() {
                        return Err(Error::InvalidSpec(
                            "dropout cannot be the first layer".into(),
                        ));
                    }
                    layers.push(Layer::Dropout { rate });
                }
                LayerSpec::Embedding { .. } => {
                    return Err(Error::InvalidSpec(
                        "embedding layers are separate tables, not chain layers".into(),
                    ));
                }
            }
        }
        let output_dim = width.ok_or_else(|| Error::InvalidSpec("empty layer chain".into()))?;
        Ok(Mlp {
            layers,
            input_dim,
            output_dim,
        })
    }

    /// The usual architecture here: ReLU hidden layers each followed by
    /// dropout, then a linear scalar output.
    pub fn regression(
        input_dim: usize,
        hidden: &[usize],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut specs = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            specs.push(LayerSpec::Dense {
                inputs: prev,
                outputs: h,
                activation: Activation::Relu,
            });
            if dropout > 0.0 {
                specs.push(LayerSpec::Dropout { rate: dropout });
            }
            prev = h;
        }
        specs.push(LayerSpec::Dense {
            inputs: prev,
            outputs: 1,
            activation: Activation::Linear,
        });
        Mlp::new(&specs, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn forward(
        &self,
        x: &DenseMatrix,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(DenseMatrix, ForwardCache)> {
        if x.cols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "mlp forward",
                expected: self.input_dim,
                actual: x.cols(),
            });
        }
        let mut cache = ForwardCache {
            dense: Vec::new(),
            masks: Vec::new(),
            batch: x.rows(),
        };
        let mut act = x.clone();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    let mut z = act.matmul(&d.w);
                    for i in 0..z.rows() {
                        for (v, b) in z.row_mut(i).iter_mut().zip(&d.b) {
                            *v += b;
                        }
                    }
                    cache.dense.push((act, z.clone()));
                    if d.activation == Activation::Relu {
                        for v in z.data_mut().iter_mut() {
                            if *v < 0.0 {
                                *v = 0.0;
                            }
                        }
                    }
                    act = z;
                }
                Layer::Dropout { rate } => {
                    if training && *rate > 0.0 {
                        let keep = 1.0 - rate;
                        let mask = DenseMatrix::from_fn(act.rows(), act.cols(), |_, _| {
                            if rng.gen::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        for (a, m) in act.data_mut().iter_mut().zip(mask.data()) {
                            *a *= m;
                        }
                        cache.masks.push(Some(mask));
                    } else {
                        cache.masks.push(None);
                    }
                }
            }
        }
        Ok((act, cache))
    }

    /// Forward for a scalar-output net, returning the outputs as a vector.
    pub fn forward_vec(
        &self,
        x: &DenseMatrix,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let (out, cache) = self.forward(x, training, rng)?;
        debug_assert_eq!(out.cols(), 1);
        Ok((out.data().to_vec(), cache))
    }

    /// Backpropagate. Returns per-layer parameter gradients and the gradient
    /// with respect to the inputs.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &DenseMatrix,
    ) -> Result<(MlpGrads, DenseMatrix)> {
        if grad_out.rows() != cache.batch || grad_out.cols() != self.output_dim {
            return Err(Error::DimensionMismatch {
                context: "mlp backward",
                expected: cache.batch * self.output_dim,
                actual: grad_out.rows() * grad_out.cols(),
            });
        }
        let n_dense = cache.dense.len();
        let mut dw = vec![DenseMatrix::zeros(0, 0); n_dense];
        let mut db = vec![Vec::new(); n_dense];
        let mut grad = grad_out.clone();
        let mut dense_idx = n_dense;
        let mut mask_idx = cache.masks.len();
        for layer in self.layers.iter().rev() {
            match layer {
                Layer::Dense(d) => {
                    dense_idx -= 1;
                    let (input, z) = &cache.dense[dense_idx];
                    let mut gz = grad;
                    if d.activation == Activation::Relu {
                        for (g, &zv) in gz.data_mut().iter_mut().zip(z.data()) {
                            if zv <= 0.0 {
                                *g = 0.0;
                            }
                        }
                    }
                    dw[dense_idx] = input.atmul(&gz);
                    let mut bias = vec![0.0; gz.cols()];
                    for i in 0..gz.rows() {
                        for (bv, g) in bias.iter_mut().zip(gz.row(i)) {
                            *bv += g;
                        }
                    }
                    db[dense_idx] = bias;
                    grad = gz.matmul_bt(&d.w);
                }
                Layer::Dropout { .. } => {
                    mask_idx -= 1;
                    if let Some(mask) = &cache.masks[mask_idx] {
                        for (g, m) in grad.data_mut().iter_mut().zip(mask.data()) {
                            *g *= m;
                        }
                    }
                }
            }
        }
        Ok((MlpGrads { dw, db }, grad))
    }

    /// Mutable (values, grads) pairing for the optimizer, in layer order.
    pub fn params_with_grads<'a>(
        &'a mut self,
        grads: &'a MlpGrads,
        prefix: &str,
    ) -> Vec<Param<'a>> {
        let mut out = Vec::new();
        let mut idx = 0;
        for layer in self.layers.iter_mut() {
            if let Layer::Dense(d) = layer {
                out.push(Param {
                    name: format!("{prefix}.w{idx}"),
                    value: d.w.data_mut(),
                    grad: grads.dw[idx].data(),
                });
                out.push(Param {
                    name: format!("{prefix}.b{idx}"),
                    value: &mut d.b,
                    grad: &grads.db[idx],
                });
                idx += 1;
            }
        }
        out
    }

    pub fn dense_layers(&self) -> Vec<&DenseLayer> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some(d),
                _ => None,
            })
            .collect()
    }
}

/// A learnable lookup table mapping level ids to d-dimensional rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub weights: DenseMatrix,
}

impl EmbeddingTable {
    pub fn new(vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        EmbeddingTable {
            weights: DenseMatrix::from_fn(vocab, dim, |_, _| rng.gen_range(-0.05..0.05)),
        }
    }

    pub fn vocab(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn lookup(&self, ids: &[usize]) -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(ids.len(), self.dim());
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.vocab() {
                return Err(Error::IdOutOfRange {
                    feature: 0,
                    id,
                    max: self.vocab(),
                });
            }
            out.row_mut(i).copy_from_slice(self.weights.row(id));
        }
        Ok(out)
    }

    /// Accumulate output-row gradients back into table rows; rows never
    /// looked up get exactly zero gradient.
    pub fn backward(&self, ids: &[usize], grad_rows: &DenseMatrix) -> Result<DenseMatrix> {
        if grad_rows.rows() != ids.len() || grad_rows.cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "embedding backward",
                expected: ids.len() * self.dim(),
                actual: grad_rows.rows() * grad_rows.cols(),
            });
        }
        let mut grad = DenseMatrix::zeros(self.vocab(), self.dim());
        for (i, &id) in ids.iter().enumerate() {
            for (g, v) in grad.row_mut(id).iter_mut().zip(grad_rows.row(i)) {
                *g += v;
            }
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimAlgo {
    Sgd,
    Adam,
}

/// One named parameter block for an optimizer step.
pub struct Param<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

/// SGD or Adam with (beta1, beta2, eps) = (0.9, 0.999, 1e-8). Moment slots are
/// keyed by position, so callers must pass parameter blocks in a fixed order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub algo: OptimAlgo,
    pub lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(algo: OptimAlgo, lr: f64) -> Self {
        Optimizer {
            algo,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Param<'_>]) -> Result<()> {
        for p in params.iter() {
            if p.value.len() != p.grad.len() {
                return Err(Error::DimensionMismatch {
                    context: "optimizer step",
                    expected: p.value.len(),
                    actual: p.grad.len(),
                });
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: p.name.clone(),
                });
            }
        }
        match self.algo {
            OptimAlgo::Sgd => {
                for p in params.iter_mut() {
                    for (v, g) in p.value.iter_mut().zip(p.grad) {
                        *v -= self.lr * g;
                    }
                }
            }
            OptimAlgo::Adam => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
                    self.v = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
                }
                if self.m.len() != params.len() {
                    return Err(Error::DimensionMismatch {
                        context: "optimizer slots",
                        expected: self.m.len(),
                        actual: params.len(),
                    });
                }
                self.t += 1;
                let bc1 = 1.0 - BETA1.powi(self.t as i32);
                let bc2 = 1.0 - BETA2.powi(self.t as i32);
                for (i, p) in params.iter_mut().enumerate() {
                    let (ms, vs) = (&mut self.m[i], &mut self.v[i]);
                    for ((pv, &g), (m, v)) in p
                        .value
                        .iter_mut()
                        .zip(p.grad)
                        .zip(ms.iter_mut().zip(vs.iter_mut()))
                    {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *pv -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
