//! Desk-scale supervised fine-tuning: tiny dense binary classifiers trained
//! from a shared base with a cross-entropy loss regularized toward the
//! pre-trained weights, updated by AdamW. Everything is single-threaded and
//! seeded, so a run reproduces bit-for-bit.
//!
//! The optimizer applies the printed update rule literally:
//! θ ← θ − η·m/(√v + ε) − η·λ·θ, with no bias correction of the moment
//! estimates unless [`OptimState::bias_correction`] is switched on.

use crate::checkpoint::{Checkpoint, Dtype};
use crate::error::TrainError;
use crate::rng::SplitMix64;

/// Input width of the fixed tiny architecture.
pub const INPUT_DIM: usize = 4;
/// Hidden width of the fixed tiny architecture.
pub const HIDDEN_DIM: usize = 32;

/// One labelled example: feature vector and a {0, 1} class.
pub type Sample = (Vec<f64>, u8);

/// Dense binary classifier: input → tanh hidden → logistic output.
///
/// Parameters live in one flat buffer in the order `l0.w` (hidden×input,
/// row-major), `l0.b`, `l1.w` (1×hidden), `l1.b`, which is also the layout
/// used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    params: Vec<f64>,
}

impl TinyModel {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let n = hidden_dim * input_dim + hidden_dim + hidden_dim + 1;
        Self {
            input_dim,
            hidden_dim,
            params: vec![0.0; n],
        }
    }

    /// Random base model of the fixed architecture: weights uniform in
    /// ±1/√fan_in, biases zero.
    pub fn random(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut model = Self::zeros(INPUT_DIM, HIDDEN_DIM);
        let w0_bound = 1.0 / (INPUT_DIM as f64).sqrt();
        let w1_bound = 1.0 / (HIDDEN_DIM as f64).sqrt();
        let (w0_len, b0_len) = (HIDDEN_DIM * INPUT_DIM, HIDDEN_DIM);
        for i in 0..w0_len {
            model.params[i] = rng.uniform(-w0_bound, w0_bound);
        }
        for i in 0..HIDDEN_DIM {
            model.params[w0_len + b0_len + i] = rng.uniform(-w1_bound, w1_bound);
        }
        model
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w0(&self) -> &[f64] {
        &self.params[..self.hidden_dim * self.input_dim]
    }

    fn b0(&self) -> &[f64] {
        let start = self.hidden_dim * self.input_dim;
        &self.params[start..start + self.hidden_dim]
    }

    fn w1(&self) -> &[f64] {
        let start = self.hidden_dim * self.input_dim + self.hidden_dim;
        &self.params[start..start + self.hidden_dim]
    }

    fn b1(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    /// Hidden activations and the raw output probability.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut hidden = Vec::with_capacity(self.hidden_dim);
        for j in 0..self.hidden_dim {
            let row = &self.w0()[j * self.input_dim..(j + 1) * self.input_dim];
            let pre: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.b0()[j];
            hidden.push(pre.tanh());
        }
        let z: f64 = self
            .w1()
            .iter()
            .zip(&hidden)
            .map(|(w, h)| w * h)
            .sum::<f64>()
            + self.b1();
        (hidden, 1.0 / (1.0 + (-z).exp()))
    }

    /// Probability of the positive class.
    pub fn predict_prob(&self, x: &[f64]) -> f64 {
        self.forward(x).1
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.insert_tensor(
            "l0.w",
            Dtype::F64,
            vec![self.hidden_dim, self.input_dim],
            self.w0().to_vec(),
        )
        .expect("valid layout");
        ckpt.insert_tensor(
            "l0.b",
            Dtype::F64,
            vec![self.hidden_dim],
            self.b0().to_vec(),
        )
        .expect("valid layout");
        ckpt.insert_tensor(
            "l1.w",
            Dtype::F64,
            vec![1, self.hidden_dim],
            self.w1().to_vec(),
        )
        .expect("valid layout");
        ckpt.insert_tensor("l1.b", Dtype::F64, vec![1], vec![self.b1()])
            .expect("valid layout");
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let get = |name: &str| {
            ckpt.tensor(name)
                .ok_or_else(|| TrainError::BadArchitecture(format!("missing tensor {name:?}")))
        };
        let w0 = get("l0.w")?;
        let b0 = get("l0.b")?;
        let w1 = get("l1.w")?;
        let b1 = get("l1.b")?;
        if w0.shape.len() != 2 {
            return Err(TrainError::BadArchitecture(format!(
                "l0.w must be rank 2, got shape {:?}",
                w0.shape
            )));
        }
        let (hidden_dim, input_dim) = (w0.shape[0], w0.shape[1]);
        if b0.shape != vec![hidden_dim] {
            return Err(TrainError::BadArchitecture(format!(
                "l0.b shape {:?} does not match hidden dim {hidden_dim}",
                b0.shape
            )));
        }
        if w1.shape != vec![1, hidden_dim] {
            return Err(TrainError::BadArchitecture(format!(
                "l1.w shape {:?} does not match [1, {hidden_dim}]",
                w1.shape
            )));
        }
        if b1.shape != vec![1] {
            return Err(TrainError::BadArchitecture(format!(
                "l1.b shape {:?} must be [1]",
                b1.shape
            )));
        }
        let mut params = Vec::with_capacity(hidden_dim * input_dim + 2 * hidden_dim + 1);
        params.extend_from_slice(&w0.values);
        params.extend_from_slice(&b0.values);
        params.extend_from_slice(&w1.values);
        params.extend_from_slice(&b1.values);
        Ok(Self {
            input_dim,
            hidden_dim,
            params,
        })
    }
}

/// AdamW moment buffers and hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub weight_decay: f64,
    /// Off by default: the update uses the raw moment estimates. Switch on
    /// for the canonical bias-corrected variant.
    pub bias_correction: bool,
}

impl OptimState {
    pub fn new(n_params: usize, eta: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            eta,
            weight_decay,
            bias_correction: false,
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// One AdamW update over flat parameter/gradient buffers:
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², then
/// θ ← θ − η·m/(√v + ε) − η·λ·θ with the decay term taken on the pre-update θ.
#[allow(clippy::needless_range_loop)]
pub fn adamw_step(theta: &mut [f64], grads: &[f64], state: &mut OptimState) {
    assert_eq!(
        theta.len(),
        grads.len(),
        "parameter/gradient length mismatch"
    );
    assert_eq!(
        theta.len(),
        state.m.len(),
        "parameter/state length mismatch"
    );
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let correction1 = 1.0 - b1.powi(state.step as i32);
    let correction2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..theta.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let (m_hat, v_hat) = if state.bias_correction {
            (state.m[i] / correction1, state.v[i] / correction2)
        } else {
            (state.m[i], state.v[i])
        };
        let old = theta[i];
        theta[i] = old
            - state.eta * m_hat / (v_hat.sqrt() + state.epsilon)
            - state.eta * state.weight_decay * old;
    }
}

const PROB_CLAMP: f64 = 1e-12;

/// Batch loss and gradients: binary cross-entropy summed over the batch plus
/// `reg_lambda · ‖θ − θ_pre‖²`, with predicted probabilities clamped to
/// [1e-12, 1−1e-12] before the logs. Gradients come from backpropagation and
/// include the 2·λ·(θ − θ_pre) regularizer term; a clamped (saturated)
/// sample contributes zero data gradient, matching the flat loss there.
pub fn sft_loss(
    theta: &TinyModel,
    theta_pre: &TinyModel,
    batch: &[Sample],
    reg_lambda: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if theta.params.len() != theta_pre.params.len() {
        return Err(TrainError::BadArchitecture(
            "model and pre-trained model differ in size".into(),
        ));
    }
    let (input_dim, hidden_dim) = (theta.input_dim, theta.hidden_dim);
    let w0_len = hidden_dim * input_dim;

    let mut loss = 0.0;
    let mut grads = vec![0.0; theta.params.len()];
    for (x, y) in batch {
        if x.len() != input_dim {
            return Err(TrainError::BadConfig(format!(
                "feature vector has {} entries, model expects {input_dim}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteInput);
        }
        let y = f64::from(*y);
        let (hidden, p_raw) = theta.forward(x);
        let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();

        // dL/dz = p − y; zero where the clamp flattened the loss.
        let dz = if p_raw == p { p - y } else { 0.0 };
        if dz != 0.0 {
            let b1_idx = theta.params.len() - 1;
            grads[b1_idx] += dz;
            for j in 0..hidden_dim {
                grads[w0_len + hidden_dim + j] += dz * hidden[j];
                let dh = dz * theta.w1()[j] * (1.0 - hidden[j] * hidden[j]);
                grads[w0_len + j] += dh;
                for i in 0..input_dim {
                    grads[j * input_dim + i] += dh * x[i];
                }
            }
        }
    }

    if reg_lambda != 0.0 {
        for ((g, a), b) in grads.iter_mut().zip(&theta.params).zip(&theta_pre.params) {
            let d = a - b;
            loss += reg_lambda * d * d;
            *g += 2.0 * reg_lambda * d;
        }
    }
    Ok((loss, grads))
}

/// Training hyperparameters. `seed` fixes every random draw.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Coefficient of the L2 pull toward the pre-trained weights.
    pub reg_lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay coefficient of the optimizer update.
    pub weight_decay: f64,
    pub bias_correction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            reg_lambda: 0.01,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            eta: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            bias_correction: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::BadConfig(msg.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad("learning rate must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be positive and finite");
        }
        if !(self.reg_lambda.is_finite() && self.reg_lambda >= 0.0) {
            return bad("reg_lambda must be non-negative and finite");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative and finite");
        }
        Ok(())
    }
}

/// Mini-batch training loop: deterministic shuffling from the seed, one
/// [`sft_loss`] + [`adamw_step`] per batch, divergence guard on the loss.
/// Returns the final model as a checkpoint loadable by the merger.
pub fn train(
    theta_pre: &TinyModel,
    dataset: &[Sample],
    cfg: &TrainConfig,
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = theta_pre.clone();
    let mut state = OptimState::new(model.param_count(), cfg.eta, cfg.weight_decay);
    state.beta1 = cfg.beta1;
    state.beta2 = cfg.beta2;
    state.epsilon = cfg.epsilon;
    state.bias_correction = cfg.bias_correction;

    let mut rng = SplitMix64::new(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch: Vec<Sample> = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let (loss, grads) = sft_loss(&model, theta_pre, &batch, cfg.reg_lambda)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_no,
                });
            }
            adamw_step(model.params_mut(), &grads, &mut state);
        }
    }
    Ok(model.to_checkpoint())
}

/// Synthetic binary-classification task identifiers. Tasks A and B are
/// separable by different hyperplanes, so specialists genuinely differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskId {
    A,
    B,
}

impl TaskId {
    fn boundary(self) -> [f64; INPUT_DIM] {
        match self {
            TaskId::A => [1.2, -0.8, 0.5, 1.0],
            TaskId::B => [0.9, 0.8, 1.1, 0.2],
        }
    }

    fn salt(self) -> u64 {
        match self {
            TaskId::A => 0xA11C_E5ED,
            TaskId::B => 0xB0B5_EEDD,
        }
    }
}

impl std::str::FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(TaskId::A),
            "B" | "b" => Ok(TaskId::B),
            other => Err(format!("unknown task {other:?}, expected A or B")),
        }
    }
}

/// Deterministic synthetic dataset: features uniform in (−1, 1)^4, labelled
/// by which side of the task's hyperplane they fall on.
pub fn make_task_dataset(task: TaskId, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = SplitMix64::new(seed ^ task.salt());
    let w = task.boundary();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..INPUT_DIM).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let label = u8::from(w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>() > 0.0);
            (x, label)
        })
        .collect()
}

/// Fraction of samples classified correctly at the 0.5 threshold.
pub fn accuracy(model: &TinyModel, dataset: &[Sample]) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let correct = dataset
        .iter()
        .filter(|(x, y)| u8::from(model.predict_prob(x) > 0.5) == *y)
        .count();
    correct as f64 / dataset.len() as f64
}
