//! Local model training: small dense models with hand-written gradients and
//! mini-batch SGD on mean squared error.
//!
//! Two architectures are supported: a linear map and a one-hidden-layer
//! perceptron with tanh activation. Parameters live in one flat vector whose
//! layout is fixed (it is also the wire order):
//!
//! * linear: `W` (output_dim x input_dim, row-major), then `b` (output_dim)
//! * mlp: `W1` (hidden x input, row-major), `b1` (hidden),
//!   `W2` (output x hidden, row-major), `b2` (output)
//!
//! The loss is `(1 / (n * output_dim)) * sum_i sum_j (pred_ij - y_ij)^2`,
//! i.e. normalized per example and per output component. Gradients carry the
//! matching `2 / (n * output_dim)` factor.
//!
//! Everything here is a pure function of its inputs; training is
//! deterministic given [`TrainConfig`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Linear,
    Mlp,
}

/// Shape of a model. `hidden_dim` is zero for linear models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl ArchSpec {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        ArchSpec {
            kind: ArchKind::Linear,
            input_dim,
            hidden_dim: 0,
            output_dim,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        ArchSpec {
            kind: ArchKind::Mlp,
            input_dim,
            hidden_dim,
            output_dim,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self.kind {
            ArchKind::Linear => self.input_dim * self.output_dim + self.output_dim,
            ArchKind::Mlp => {
                self.input_dim * self.hidden_dim
                    + self.hidden_dim
                    + self.hidden_dim * self.output_dim
                    + self.output_dim
            }
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "arch dims must be positive, got {}x{}",
                self.input_dim, self.output_dim
            )));
        }
        match self.kind {
            ArchKind::Linear if self.hidden_dim != 0 => Err(CoreError::InvalidConfig(
                "linear arch carries no hidden layer".into(),
            )),
            ArchKind::Mlp if self.hidden_dim == 0 => Err(CoreError::InvalidConfig(
                "mlp arch needs hidden_dim >= 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// A model: its shape plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    arch: ArchSpec,
    values: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Length must equal `arch.parameter_count()` and all values be finite.
    pub fn new(arch: ArchSpec, values: Vec<T>) -> Result<Self, CoreError> {
        arch.validate()?;
        if values.len() != arch.parameter_count() {
            return Err(CoreError::DimMismatch {
                what: "parameter vector",
                expected: arch.parameter_count(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("model parameters"));
        }
        Ok(ModelParams { arch, values })
    }

    pub fn arch(&self) -> ArchSpec {
        self.arch
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

/// One client's supervised data. `env_id` is harness-side ground truth used
/// by experiments and never leaves the process over the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset<T> {
    pub inputs: Vec<Vec<T>>,
    pub targets: Vec<Vec<T>>,
    pub env_id: usize,
}

impl<T: Scalar> ClientDataset<T> {
    pub fn new(inputs: Vec<Vec<T>>, targets: Vec<Vec<T>>, env_id: usize) -> Result<Self, CoreError> {
        if inputs.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        if inputs.len() != targets.len() {
            return Err(CoreError::DimMismatch {
                what: "inputs vs targets",
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        let in_dim = inputs[0].len();
        let out_dim = targets[0].len();
        if in_dim == 0 || out_dim == 0 {
            return Err(CoreError::InvalidConfig("zero-width example".into()));
        }
        for (x, y) in inputs.iter().zip(&targets) {
            if x.len() != in_dim {
                return Err(CoreError::DimMismatch {
                    what: "input row",
                    expected: in_dim,
                    got: x.len(),
                });
            }
            if y.len() != out_dim {
                return Err(CoreError::DimMismatch {
                    what: "target row",
                    expected: out_dim,
                    got: y.len(),
                });
            }
            if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite("dataset values"));
            }
        }
        Ok(ClientDataset {
            inputs,
            targets,
            env_id,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.targets[0].len()
    }

    pub fn check_arch(&self, arch: ArchSpec) -> Result<(), CoreError> {
        if self.input_dim() != arch.input_dim {
            return Err(CoreError::DimMismatch {
                what: "dataset input dim",
                expected: arch.input_dim,
                got: self.input_dim(),
            });
        }
        if self.output_dim() != arch.output_dim {
            return Err(CoreError::DimMismatch {
                what: "dataset output dim",
                expected: arch.output_dim,
                got: self.output_dim(),
            });
        }
        Ok(())
    }

    /// Concatenation in argument order; `env_id` of the result is meaningless
    /// and set to `usize::MAX`.
    pub fn concat(sets: &[&ClientDataset<T>]) -> Result<ClientDataset<T>, CoreError> {
        let first = sets.first().ok_or(CoreError::EmptyDataset)?;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for s in sets {
            if s.input_dim() != first.input_dim() || s.output_dim() != first.output_dim() {
                return Err(CoreError::DimMismatch {
                    what: "concat dims",
                    expected: first.input_dim(),
                    got: s.input_dim(),
                });
            }
            inputs.extend(s.inputs.iter().cloned());
            targets.extend(s.targets.iter().cloned());
        }
        ClientDataset::new(inputs, targets, usize::MAX)
    }
}

/// Training hyper-parameters.
///
/// Epoch `e` of a call shuffles with a generator seeded by
/// `shuffle_seed + e`. A caller that splits one logical training run across
/// several calls advances `shuffle_seed` by the epochs already done, which
/// makes the combined schedule identical to a single longer call.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
}

impl TrainConfig {
    /// Defaults: 5 epochs, batch 16; rate 0.05 for linear, 0.01 for mlp.
    pub fn for_arch(kind: ArchKind) -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            learning_rate: match kind {
                ArchKind::Linear => 0.05,
                ArchKind::Mlp => 0.01,
            },
            shuffle_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.epochs == 0 {
            return Err(CoreError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(CoreError::InvalidConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Fresh model with parameters drawn uniformly from [-0.1, 0.1).
pub fn init_model<T: Scalar>(arch: ArchSpec, seed: u64) -> Result<ModelParams<T>, CoreError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..arch.parameter_count())
        .map(|_| T::from_real(rng.gen_range(-0.1..0.1)))
        .collect();
    ModelParams::new(arch, values)
}

fn forward_into<T: Scalar>(
    arch: ArchSpec,
    values: &[T],
    input: &[T],
    hidden: &mut [T],
    out: &mut [T],
) {
    let d_in = arch.input_dim;
    let d_out = arch.output_dim;
    match arch.kind {
        ArchKind::Linear => {
            let bias = d_in * d_out;
            for j in 0..d_out {
                let mut acc = values[bias + j];
                let row = &values[j * d_in..(j + 1) * d_in];
                for i in 0..d_in {
                    acc += row[i] * input[i];
                }
                out[j] = acc;
            }
        }
        ArchKind::Mlp => {
            let h = arch.hidden_dim;
            let w1 = 0;
            let b1 = h * d_in;
            let w2 = b1 + h;
            let b2 = w2 + d_out * h;
            for k in 0..h {
                let mut acc = values[b1 + k];
                let row = &values[w1 + k * d_in..w1 + (k + 1) * d_in];
                for i in 0..d_in {
                    acc += row[i] * input[i];
                }
                hidden[k] = acc.tanh();
            }
            for j in 0..d_out {
                let mut acc = values[b2 + j];
                let row = &values[w2 + j * h..w2 + (j + 1) * h];
                for k in 0..h {
                    acc += row[k] * hidden[k];
                }
                out[j] = acc;
            }
        }
    }
}

/// Model output for a single input.
pub fn forward<T: Scalar>(model: &ModelParams<T>, input: &[T]) -> Result<Vec<T>, CoreError> {
    let arch = model.arch;
    if input.len() != arch.input_dim {
        return Err(CoreError::DimMismatch {
            what: "forward input",
            expected: arch.input_dim,
            got: input.len(),
        });
    }
    let mut hidden = vec![T::zero(); arch.hidden_dim];
    let mut out = vec![T::zero(); arch.output_dim];
    forward_into(arch, &model.values, input, &mut hidden, &mut out);
    Ok(out)
}

/// Accumulates raw residual products over `idx`, then scales by
/// `2 / (|idx| * output_dim)` into `grad` (which must be zeroed).
fn gradient_into<T: Scalar>(
    arch: ArchSpec,
    values: &[T],
    inputs: &[Vec<T>],
    targets: &[Vec<T>],
    idx: &[usize],
    grad: &mut [T],
) {
    let d_in = arch.input_dim;
    let d_out = arch.output_dim;
    let h = arch.hidden_dim;
    let mut hidden = vec![T::zero(); h];
    let mut out = vec![T::zero(); d_out];
    match arch.kind {
        ArchKind::Linear => {
            let bias = d_in * d_out;
            for &s in idx {
                let x = &inputs[s];
                let y = &targets[s];
                forward_into(arch, values, x, &mut hidden, &mut out);
                for j in 0..d_out {
                    let r = out[j] - y[j];
                    let row = &mut grad[j * d_in..(j + 1) * d_in];
                    for i in 0..d_in {
                        row[i] += r * x[i];
                    }
                    grad[bias + j] += r;
                }
            }
        }
        ArchKind::Mlp => {
            let w1 = 0;
            let b1 = h * d_in;
            let w2 = b1 + h;
            let b2 = w2 + d_out * h;
            let mut dz1 = vec![T::zero(); h];
            for &s in idx {
                let x = &inputs[s];
                let y = &targets[s];
                forward_into(arch, values, x, &mut hidden, &mut out);
                for k in 0..h {
                    dz1[k] = T::zero();
                }
                for j in 0..d_out {
                    let r = out[j] - y[j];
                    let row = &mut grad[w2 + j * h..w2 + (j + 1) * h];
                    for k in 0..h {
                        row[k] += r * hidden[k];
                    }
                    grad[b2 + j] += r;
                    let wrow = &values[w2 + j * h..w2 + (j + 1) * h];
                    for k in 0..h {
                        dz1[k] += r * wrow[k];
                    }
                }
                for k in 0..h {
                    // d tanh(z) / dz = 1 - tanh(z)^2
                    let g = dz1[k] * (T::one() - hidden[k] * hidden[k]);
                    let row = &mut grad[w1 + k * d_in..w1 + (k + 1) * d_in];
                    for i in 0..d_in {
                        row[i] += g * x[i];
                    }
                    grad[b1 + k] += g;
                }
            }
        }
    }
    let scale = T::from_real(2.0 / (idx.len() as f64 * d_out as f64));
    for g in grad.iter_mut() {
        *g *= scale;
    }
}

/// Gradient of the batch MSE at `model`, flattened in parameter order.
pub fn gradient<T: Scalar>(
    model: &ModelParams<T>,
    batch: &ClientDataset<T>,
) -> Result<Vec<T>, CoreError> {
    batch.check_arch(model.arch)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![T::zero(); model.values.len()];
    gradient_into(
        model.arch,
        &model.values,
        &batch.inputs,
        &batch.targets,
        &idx,
        &mut grad,
    );
    Ok(grad)
}

/// Mean squared error of `model` over `data`.
pub fn eval_loss<T: Scalar>(model: &ModelParams<T>, data: &ClientDataset<T>) -> Result<T, CoreError> {
    data.check_arch(model.arch)?;
    let arch = model.arch;
    let mut hidden = vec![T::zero(); arch.hidden_dim];
    let mut out = vec![T::zero(); arch.output_dim];
    let mut acc = T::zero();
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        forward_into(arch, &model.values, x, &mut hidden, &mut out);
        for j in 0..arch.output_dim {
            let r = out[j] - y[j];
            acc += r * r;
        }
    }
    let loss = acc / T::from_real((data.len() * arch.output_dim) as f64);
    if !loss.is_finite() {
        return Err(CoreError::NonFinite("loss"));
    }
    Ok(loss)
}

/// Mini-batch SGD for `cfg.epochs` passes over `data`. Returns the trained
/// model; the input model is untouched. Examples are shuffled once per epoch
/// (seed contract on [`TrainConfig`]); a short final batch is kept, not
/// dropped. Non-finite parameters abort with an error, which is the visible
/// symptom of a divergent learning rate.
pub fn train_epochs<T: Scalar>(
    model: &ModelParams<T>,
    data: &ClientDataset<T>,
    cfg: &TrainConfig,
) -> Result<ModelParams<T>, CoreError> {
    cfg.validate()?;
    data.check_arch(model.arch)?;
    let arch = model.arch;
    let mut values = model.values.clone();
    let mut grad = vec![T::zero(); values.len()];
    let lr = T::from_real(cfg.learning_rate);
    let n = data.len();
    for e in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed.wrapping_add(e as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            for g in grad.iter_mut() {
                *g = T::zero();
            }
            gradient_into(arch, &values, &data.inputs, &data.targets, chunk, &mut grad);
            for (v, g) in values.iter_mut().zip(&grad) {
                *v = *v - lr * *g;
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite("parameters after SGD step"));
            }
        }
    }
    Ok(ModelParams { arch, values })
}
