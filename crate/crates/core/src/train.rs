//! Training loop, early stopping, and fine-tuning with a classifier head.

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, PairedEmbeddingSet};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_check_with, FdConfig, GradCheckReport, Parameters};
use crate::graph::{Graph, Var};
use crate::model::{encode_modality, DfeParameters, Modality};
use crate::objective::{gram, soft_targets, total_loss, total_loss_with_targets, LossReport};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::tensor::{Real, Tensor};

/// Minimum absolute drop in validation loss that resets patience.
pub const MIN_IMPROVEMENT: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_k: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps_opt: f64,
    pub seed: u64,
    /// Fraction of the training file held out when no validation set is given.
    pub val_fraction: f64,
    pub precision: u32,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_k: 64,
            max_epochs: 500,
            patience: 20,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps_opt: 1e-8,
            seed: 0,
            val_fraction: 0.1,
            precision: 32,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.batch_k == 0 || self.batch_k > n_train {
            return Err(Error::contract(format!(
                "batch_k {} must be in 1..={n_train}",
                self.batch_k
            )));
        }
        if self.patience == 0 {
            return Err(Error::contract("patience must be ≥ 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::contract(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::contract(format!(
                "precision must be 32 or 64, got {}",
                self.precision
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps_opt,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub tau: f64,
    pub steps: u64,
}

/// Forward pass of one minibatch with gradients accumulated into `params`.
pub fn loss_and_grad<F: Real>(
    params: &mut DfeParameters<F>,
    m1: &Tensor<F>,
    m2: &Tensor<F>,
) -> Result<LossReport<F>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let (loss, report) = batch_loss(&mut g, &bound, m1, m2)?;
    g.backward(loss)?;
    params.absorb_grads(&g, &bound)?;
    Ok(report)
}

/// The objective for one minibatch on an already bound model.
pub fn batch_loss<F: Real>(
    g: &mut Graph<F>,
    bound: &crate::model::Dfe<Var>,
    m1: &Tensor<F>,
    m2: &Tensor<F>,
) -> Result<(Var, LossReport<F>)> {
    let x1 = g.constant(m1.clone());
    let x2 = g.constant(m2.clone());
    let z1 = encode_modality(g, bound, x1, Modality::First)?;
    let z2 = encode_modality(g, bound, x2, Modality::Second)?;
    let tau = g.exp(bound.log_tau);
    total_loss(g, z1, z2, tau)
}

/// Checks the backpropagated gradient of the batch objective against finite
/// differences for every trainable coordinate of `params`.
///
/// The soft targets are computed once at `params` and held fixed while
/// perturbing, since training never differentiates through them.
pub fn gradient_check<F: Real>(
    params: &DfeParameters<F>,
    m1: &Tensor<F>,
    m2: &Tensor<F>,
    cfg: &FdConfig,
) -> Result<GradCheckReport> {
    let mut p = params.clone();
    p.set_trainable(true);
    p.zero_grad();
    let z1 = p.encode(m1, Modality::First)?;
    let z2 = p.encode(m2, Modality::Second)?;
    let targets = soft_targets(&gram(&z1), &gram(&z2), p.tau())?;
    let fixed = |g: &mut Graph<F>, bound: &crate::model::Dfe<Var>| -> Result<Var> {
        let x1 = g.constant(m1.clone());
        let x2 = g.constant(m2.clone());
        let z1 = encode_modality(g, bound, x1, Modality::First)?;
        let z2 = encode_modality(g, bound, x2, Modality::Second)?;
        let tau = g.exp(bound.log_tau);
        Ok(total_loss_with_targets(g, z1, z2, tau, &targets)?.0)
    };

    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let loss = fixed(&mut g, &bound)?;
    g.backward(loss)?;
    p.absorb_grads(&g, &bound)?;

    finite_difference_check_with(
        |q: &DfeParameters<F>| {
            let mut g = Graph::new();
            let bound = q.bind_frozen(&mut g);
            let loss = fixed(&mut g, &bound)?;
            Ok(g.value(loss).item())
        },
        &p,
        cfg,
    )
}

/// Validation loss: contiguous batches of `k` rows, averaged with batch
/// sizes as weights. No gradients are recorded.
pub fn validation_loss<F: Real>(
    params: &DfeParameters<F>,
    val: &PairedEmbeddingSet,
    k: usize,
) -> Result<f64> {
    if val.n() == 0 {
        return Err(Error::contract("validation set is empty"));
    }
    let k = k.max(1);
    let z1 = params.encode(&val.m1().cast(), Modality::First)?;
    let z2 = params.encode(&val.m2().cast(), Modality::Second)?;
    let mut acc = 0.0;
    for start in (0..val.n()).step_by(k) {
        let idx: Vec<usize> = (start..(start + k).min(val.n())).collect();
        let r = crate::objective::evaluate_loss(
            &z1.select_rows(&idx),
            &z2.select_rows(&idx),
            params.tau(),
        )?;
        acc += r.total.as_f64() * idx.len() as f64;
    }
    Ok(acc / val.n() as f64)
}

/// The full state of a training run. Everything needed to resume lives
/// here, and a resumed run replays the same batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<F> {
    pub config: TrainConfig,
    pub params: DfeParameters<F>,
    pub optimizer: OptimizerState<F>,
    pub best: DfeParameters<F>,
    pub best_val: f64,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Consecutive epochs without sufficient improvement.
    pub stall: usize,
    pub stopped: bool,
    pub history: Vec<EpochRecord>,
}

impl<F: Real> Trainer<F> {
    pub fn new(mut params: DfeParameters<F>, config: TrainConfig) -> Self {
        params.set_trainable(true);
        params.zero_grad();
        let optimizer = OptimizerState::for_params(&params);
        Trainer {
            config,
            best: params.clone(),
            params,
            optimizer,
            best_val: f64::INFINITY,
            epoch: 0,
            stall: 0,
            stopped: false,
            history: Vec::new(),
        }
    }

    /// One pass over `train` in this epoch's batch order. Returns the mean
    /// batch loss.
    pub fn train_epoch(&mut self, train: &PairedEmbeddingSet) -> Result<f64> {
        self.config.validate(train.n())?;
        let adam = self.config.adam();
        let batches = epoch_batches(train.n(), self.config.batch_k, self.config.seed, self.epoch as u64)?;
        let mut sum = 0.0;
        for idx in &batches {
            let (m1, m2) = train.batch::<F>(idx);
            self.params.zero_grad();
            let report = loss_and_grad(&mut self.params, &m1, &m2)?;
            let loss = report.total.as_f64();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {} step {}",
                    self.epoch + 1,
                    self.optimizer.step + 1
                )));
            }
            adam_step(&mut self.params, &mut self.optimizer, &adam)?;
            if let Some((name, _)) = self.params.named_tensors().into_iter().find(|(_, t)| !t.all_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite parameter {name} after step {} (epoch {}); lower the learning rate or set a gradient clip",
                    self.optimizer.step,
                    self.epoch + 1
                )));
            }
            sum += loss;
        }
        self.params.zero_grad();
        Ok(sum / batches.len() as f64)
    }

    /// Trains one epoch, evaluates on `val`, and updates the early-stopping
    /// state.
    pub fn step_epoch(
        &mut self,
        train: &PairedEmbeddingSet,
        val: &PairedEmbeddingSet,
    ) -> Result<&EpochRecord> {
        let train_loss = self.train_epoch(train)?;
        let val_loss = validation_loss(&self.params, val, self.config.batch_k)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite validation loss at epoch {}",
                self.epoch + 1
            )));
        }
        self.epoch += 1;
        if val_loss < self.best_val - MIN_IMPROVEMENT {
            self.stall = 0;
        } else {
            self.stall += 1;
        }
        if val_loss < self.best_val {
            self.best_val = val_loss;
            self.best = self.params.clone();
        }
        if self.stall >= self.config.patience {
            self.stopped = true;
        }
        self.history.push(EpochRecord {
            epoch: self.epoch,
            train_loss,
            val_loss,
            tau: self.params.tau().as_f64(),
            steps: self.optimizer.step,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn finished(&self) -> bool {
        self.stopped || self.epoch >= self.config.max_epochs
    }

    /// Runs until early stopping or `max_epochs`, calling `on_epoch` after
    /// each epoch.
    pub fn run(
        &mut self,
        train: &PairedEmbeddingSet,
        val: &PairedEmbeddingSet,
        mut on_epoch: impl FnMut(&Trainer<F>) -> Result<()>,
    ) -> Result<()> {
        if val.n() == 0 {
            return Err(Error::contract("validation set is empty"));
        }
        self.config.validate(train.n())?;
        while !self.finished() {
            self.step_epoch(train, val)?;
            on_epoch(self)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitResult<F> {
    pub best: DfeParameters<F>,
    pub best_val: f64,
    pub initial_val: f64,
    pub history: Vec<EpochRecord>,
    pub trainer: Trainer<F>,
}

/// Splits off a validation set when `val` is `None`, then trains to
/// completion and returns the best-validation snapshot.
pub fn fit<F: Real>(
    params: DfeParameters<F>,
    data: &PairedEmbeddingSet,
    val: Option<&PairedEmbeddingSet>,
    config: &TrainConfig,
) -> Result<FitResult<F>> {
    let (train, val) = match val {
        Some(v) => (data.clone(), v.clone()),
        None => data.split_validation(config.val_fraction, config.seed)?,
    };
    let mut trainer = Trainer::new(params, config.clone());
    let initial_val = validation_loss(&trainer.params, &val, config.batch_k)?;
    trainer.run(&train, &val, |_| Ok(()))?;
    Ok(FitResult {
        best: trainer.best.clone(),
        best_val: trainer.best_val,
        initial_val,
        history: trainer.history.clone(),
        trainer,
    })
}

// -------------------------------------------------------------------
// Classifier head

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub epochs: usize,
    pub lr: f64,
    pub eval_every: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            epochs: 100,
            lr: 1e-2,
            eval_every: 20,
        }
    }
}

/// Linear classifier `logits = x·w + b`, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<F> {
    pub params: Vec<Tensor<F>>,
}

impl<F: Real> ClassifierHead<F> {
    pub fn zeros(d_in: usize, classes: usize) -> Self {
        ClassifierHead {
            params: vec![
                Tensor::zeros(&[d_in, classes]).with_grad(),
                Tensor::zeros(&[classes]).with_grad(),
            ],
        }
    }

    pub fn classes(&self) -> usize {
        self.params[1].numel()
    }

    pub fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let w = g.constant(self.params[0].detached());
        let b = g.constant(self.params[1].detached());
        let xv = g.constant(x.clone());
        let y = g.matmul(xv, w)?;
        let y = g.add_bias(y, b)?;
        Ok(g.value(y).clone())
    }

    /// Argmax per row, lowest index on ties.
    pub fn predict(&self, x: &Tensor<F>) -> Result<Vec<u32>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i)) as u32).collect())
    }

    pub fn accuracy(&self, x: &Tensor<F>, labels: &[u32]) -> Result<f64> {
        let pred = self.predict(x)?;
        crate::eval::accuracy(&pred, labels)
    }
}

pub(crate) fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean softmax cross-entropy of `logits` against `labels`.
pub fn cross_entropy<F: Real>(g: &mut Graph<F>, logits: Var, labels: &[u32]) -> Result<Var> {
    let (n, c) = (g.value(logits).rows(), g.value(logits).cols());
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    let mut onehot = vec![F::zero(); n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= c {
            return Err(Error::contract(format!("label {y} outside {c} classes")));
        }
        onehot[i * c + y as usize] = F::one();
    }
    let t = g.constant(Tensor::new(&[n, c], onehot)?);
    let lsm = g.log_softmax_rows(logits)?;
    let picked = g.mul(t, lsm)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// One full-batch step on the head given fixed features. Shared by the
/// probe and the frozen branch of fine-tuning.
pub(crate) fn head_step<F: Real>(
    head: &mut ClassifierHead<F>,
    state: &mut OptimizerState<F>,
    features: &Tensor<F>,
    labels: &[u32],
    adam: &AdamConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let w = g.leaf(&head.params[0]);
    let b = g.leaf(&head.params[1]);
    let x = g.constant(features.clone());
    let y = g.matmul(x, w)?;
    let y = g.add_bias(y, b)?;
    let loss = cross_entropy(&mut g, y, labels)?;
    g.backward(loss)?;
    for (t, v) in head.params.iter_mut().zip([w, b]) {
        t.zero_grad();
        t.accumulate_grad(g.grad(v).expect("leaf"))?;
    }
    adam_step(&mut head.params, state, adam)?;
    Ok(g.value(loss).item().as_f64())
}

#[derive(Clone, Debug)]
pub struct HeadRun<F> {
    pub params: DfeParameters<F>,
    pub head: ClassifierHead<F>,
    /// `(epoch, test accuracy)` every `eval_every` epochs and at the end.
    pub curve: Vec<(usize, f64)>,
    pub final_accuracy: f64,
    pub losses: Vec<f64>,
}

/// Trains a zero-initialized head with softmax cross-entropy on modality-1
/// features. With `freeze` the encoder is held fixed and this is exactly
/// the linear probe; otherwise the encoder is updated jointly.
pub fn finetune<F: Real>(
    params: &DfeParameters<F>,
    train: &PairedEmbeddingSet,
    test: &PairedEmbeddingSet,
    config: &HeadConfig,
    freeze: bool,
) -> Result<HeadRun<F>> {
    let train_labels = train.require_labels("finetune")?;
    let test_labels = test.require_labels("finetune")?;
    let classes = train.num_classes().max(test.num_classes());
    if classes < 2 {
        return Err(Error::contract("need at least two classes"));
    }
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let x_train: Tensor<F> = train.m1().cast();
    let x_test: Tensor<F> = test.m1().cast();

    let mut params = params.clone();
    let mut head = ClassifierHead::zeros(params.config.d_out, classes);
    let mut head_state = OptimizerState::for_params(&head.params);
    params.set_trainable(!freeze);
    let mut dfe_state = OptimizerState::for_params(&params);
    let frozen_features = if freeze {
        Some(params.encode(&x_train, Modality::First)?)
    } else {
        None
    };

    let mut curve = Vec::new();
    let mut losses = Vec::with_capacity(config.epochs);
    let every = config.eval_every.max(1);
    for epoch in 1..=config.epochs {
        let loss = match &frozen_features {
            Some(f) => head_step(&mut head, &mut head_state, f, train_labels, &adam)?,
            None => joint_step(
                &mut params,
                &mut head,
                (&mut dfe_state, &mut head_state),
                &x_train,
                train_labels,
                &adam,
            )?,
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite classification loss at epoch {epoch}"
            )));
        }
        losses.push(loss);
        if epoch % every == 0 {
            let feats = params.encode(&x_test, Modality::First)?;
            curve.push((epoch, head.accuracy(&feats, test_labels)?));
        }
    }
    let final_accuracy = match curve.last() {
        Some(&(e, acc)) if e == config.epochs => acc,
        _ => {
            let feats = params.encode(&x_test, Modality::First)?;
            let acc = head.accuracy(&feats, test_labels)?;
            curve.push((config.epochs, acc));
            acc
        }
    };
    params.set_trainable(true);
    Ok(HeadRun {
        params,
        head,
        curve,
        final_accuracy,
        losses,
    })
}

fn joint_step<F: Real>(
    params: &mut DfeParameters<F>,
    head: &mut ClassifierHead<F>,
    states: (&mut OptimizerState<F>, &mut OptimizerState<F>),
    x: &Tensor<F>,
    labels: &[u32],
    adam: &AdamConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let w = g.leaf(&head.params[0]);
    let b = g.leaf(&head.params[1]);
    let xv = g.constant(x.clone());
    let z = encode_modality(&mut g, &bound, xv, Modality::First)?;
    let y = g.matmul(z, w)?;
    let y = g.add_bias(y, b)?;
    let loss = cross_entropy(&mut g, y, labels)?;
    g.backward(loss)?;
    params.zero_grad();
    params.absorb_grads(&g, &bound)?;
    for (t, v) in head.params.iter_mut().zip([w, b]) {
        t.zero_grad();
        t.accumulate_grad(g.grad(v).expect("leaf"))?;
    }
    adam_step(params, states.0, adam)?;
    adam_step(&mut head.params, states.1, adam)?;
    Ok(g.value(loss).item().as_f64())
}
