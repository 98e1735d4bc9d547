//! Likelihood training with Adam, validation-based early stopping, and
//! binary checkpoints.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{forward_graph, nll_graph, ModelError, ModelParams, Normalization};
use crate::tasks::{Task, TaskSet};
use crate::tensor::{self, Graph, NodeId, Tensor, TensorError};

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("task {task} has no targets")]
    NoTargets { task: usize },
    #[error("non-finite loss at epoch {epoch}, task {task}")]
    NonFinite { epoch: usize, task: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Tasks per optimizer step.
    pub batch_size: usize,
    /// Epochs without a new best validation NLL before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 500,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 1,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment coefficients must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// Per-epoch losses. Equality ignores wall-clock times.
#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub train_nll: Vec<f64>,
    pub val_nll: Vec<f64>,
    pub wall_seconds: Vec<f64>,
    /// Zero-based epoch with the lowest validation NLL.
    pub best_epoch: usize,
}

impl PartialEq for TrainHistory {
    fn eq(&self, other: &Self) -> bool {
        self.best_epoch == other.best_epoch
            && bits(&self.train_nll) == bits(&other.train_nll)
            && bits(&self.val_nll) == bits(&other.val_nll)
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_nll.len()
    }
}

/// Records the loss of `task` on `g` with parameters already bound.
pub fn nll_loss_graph(
    g: &mut Graph,
    params: &ModelParams,
    bound: &crate::model::BoundParams,
    task: &Task,
) -> std::result::Result<NodeId, ModelError> {
    if task.targets.is_empty() {
        return Err(ModelError::Config("task has no targets".into()));
    }
    let m = forward_graph(g, params, bound, &task.context, &task.target_points())?;
    nll_graph(g, &m, &task.target_values())
}

/// Mean negative log-likelihood of the task's targets, as a one-element tensor.
pub fn nll_loss(params: &ModelParams, task: &Task) -> std::result::Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let loss = nll_loss_graph(&mut g, params, &bound, task)?;
    Ok(Tensor::scalar(g.scalar_value(loss)))
}

/// Loss of `task`, adding its gradient into every parameter's `grad`.
pub fn loss_and_grad(params: &mut ModelParams, task: &Task) -> std::result::Result<f64, ModelError> {
    params.set_requires_grad(true);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = nll_loss_graph(&mut g, params, &bound, task)?;
    g.backward(loss)?;
    params.accumulate_grads(&g, &bound);
    Ok(g.scalar_value(loss))
}

/// Mean loss over `tasks` without gradients. Tasks are scored in parallel
/// and summed in order, so the result does not depend on the thread count.
pub fn mean_loss(params: &ModelParams, tasks: &[Task]) -> std::result::Result<f64, ModelError> {
    let losses: Vec<f64> = tasks
        .par_iter()
        .map(|t| nll_loss(params, t).map(|l| l.values()[0]))
        .collect::<std::result::Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Euclidean norm of all accumulated gradients.
pub fn grad_norm(params: &ModelParams) -> f64 {
    params
        .named_tensors()
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.named_tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies `grad / scale` to every tensor and clears the gradients.
    pub fn step(&mut self, params: &mut ModelParams, scale: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((t, m), v) in params.tensors_mut().into_iter().zip(&mut self.first).zip(&mut self.second) {
            let Some(grad) = t.grad.take() else { continue };
            for (((w, g), m), v) in t.values_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g / scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Trains `model` and returns the parameters of the best validation epoch.
///
/// The output normalisation is fitted to the training targets first. Task
/// order is reshuffled every epoch from `config.seed`.
pub fn fit(
    config: &TrainConfig,
    mut model: ModelParams,
    train: &TaskSet,
    val: &TaskSet,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    if train.tasks.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if val.tasks.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    if let Some(task) = train.tasks.iter().chain(&val.tasks).position(|t| t.targets.is_empty()) {
        return Err(TrainError::NoTargets { task });
    }
    model.normalization = Normalization::from_values(train.tasks.iter().flat_map(|t| t.target_values()));
    model.zero_grad();
    let mut adam = Adam::new(config, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train.tasks.len()).collect();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            for &i in batch {
                let loss = loss_and_grad(&mut model, &train.tasks[i])?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite { epoch, task: i });
                }
                total += loss;
            }
            adam.step(&mut model, batch.len() as f64);
        }
        let val_nll = mean_loss(&model, &val.tasks)?;
        if !val_nll.is_finite() {
            return Err(TrainError::NonFinite { epoch, task: usize::MAX });
        }
        history.train_nll.push(total / train.tasks.len() as f64);
        history.val_nll.push(val_nll);
        history.wall_seconds.push(start.elapsed().as_secs_f64());
        if val_nll < best_val {
            best_val = val_nll;
            history.best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    best.zero_grad();
    best.set_requires_grad(false);
    Ok((best, history))
}

/// Worst relative gradient error per parameter tensor for the mean loss over
/// `tasks`, comparing backpropagation with central differences of step `h`.
pub fn grad_check_params(params: &ModelParams, tasks: &[Task], h: f64) -> Result<Vec<(String, f64)>> {
    if tasks.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let named = params.named_tensors();
    let mut out = Vec::with_capacity(named.len());
    for (i, (name, t)) in named.iter().enumerate() {
        let err = tensor::grad_check(
            |g, x| {
                let bound = params.bind_with(g, |g, j, t| {
                    if j == i {
                        x
                    } else {
                        g.constant(t.shape().to_vec(), t.values().to_vec()).expect("valid tensor")
                    }
                });
                let mut total: Option<NodeId> = None;
                for task in tasks {
                    let l = nll_loss_graph(g, params, &bound, task).map_err(|e| match e {
                        ModelError::Tensor(t) => t,
                        _ => TensorError::NonFinite,
                    })?;
                    total = Some(match total {
                        Some(acc) => g.add(acc, l)?,
                        None => l,
                    });
                }
                Ok(g.scale(total.expect("tasks checked nonempty"), 1.0 / tasks.len() as f64))
            },
            t,
            h,
        )?;
        out.push((name.clone(), err));
    }
    Ok(out)
}
