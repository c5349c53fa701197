//! Staged training: set sampling, one-vs-all logistic loss over the target
//! and the hardest negative classes, SGD with momentum and per-group learning
//! rates, and plateau-driven learning-rate decay.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{LabeledDescriptor, TrainingData};
use crate::error::{Error, Result};
use crate::evaluation::{all_pairs, verify};
use crate::ghostvlad;
use crate::head::{head_backward, head_forward_batch, HeadBatch, Pooling};
use crate::linalg::{axpy, sigmoid, softplus, Matrix};
use crate::model::Model;

/// FAR at which validation TAR is tracked.
pub const VALIDATION_FAR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Examples per training set in stage 3.
    pub set_size: usize,
    /// Images per mini-batch; the batch holds `batch_images / set_size` sets,
    /// capped at the number of identities.
    pub batch_images: usize,
    pub base_lr: f64,
    pub assign_lr: f64,
    pub classifier_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub neg_classes: usize,
    pub lr_drop_factor: f64,
    pub plateau_patience: usize,
    /// Single-example epochs without ghosts or degraded inputs.
    pub stage2_epochs: usize,
    /// Set-based epochs with ghosts and degraded inputs.
    pub stage3_epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the stage's examples.
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            set_size: 2,
            batch_images: 84,
            base_lr: 1e-4,
            assign_lr: 0.1,
            classifier_lr: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            neg_classes: 20,
            lr_drop_factor: 0.1,
            plateau_patience: 3,
            stage2_epochs: 2,
            stage3_epochs: 10,
            steps_per_epoch: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.set_size == 0 || self.batch_images == 0 || self.neg_classes == 0 || self.plateau_patience == 0 {
            return bad("set_size, batch_images, neg_classes and plateau_patience must be positive");
        }
        if !(self.base_lr > 0.0 && self.assign_lr > 0.0 && self.classifier_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0,1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return bad("lr_drop_factor must be in (0,1)");
        }
        Ok(())
    }

    pub fn batch_sets(&self, set_size: usize, identities: usize) -> usize {
        (self.batch_images / set_size).clamp(1, identities.max(1))
    }
}

/// `T × D` classification layer used only during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub weights: Matrix,
}

impl ClassifierParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ClassifierParams { weights: Matrix::zeros(classes, dim) }
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }
}

/// One training set: `set_size` examples of a single identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet<'a> {
    pub identity: u32,
    pub examples: Vec<&'a LabeledDescriptor>,
}

/// Draws sets for distinct identities, each without replacement.
pub struct SetSampler<'a> {
    by_identity: BTreeMap<u32, Vec<&'a LabeledDescriptor>>,
}

impl<'a> SetSampler<'a> {
    pub fn new(examples: &'a [LabeledDescriptor]) -> Self {
        let mut by_identity: BTreeMap<u32, Vec<&LabeledDescriptor>> = BTreeMap::new();
        for e in examples {
            by_identity.entry(e.identity).or_default().push(e);
        }
        SetSampler { by_identity }
    }

    pub fn len(&self) -> usize {
        self.by_identity.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_identity.is_empty()
    }

    pub fn identities(&self) -> usize {
        self.by_identity.len()
    }

    pub fn sample_batch(&self, sets: usize, set_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TrainSet<'a>>> {
        let eligible: Vec<(&u32, &Vec<&LabeledDescriptor>)> =
            self.by_identity.iter().filter(|(_, v)| v.len() >= set_size).collect();
        if eligible.len() < sets {
            return Err(Error::InsufficientExamples(format!(
                "{} identities have >= {set_size} examples, batch needs {sets}",
                eligible.len()
            )));
        }
        let mut chosen = sample(rng, eligible.len(), sets).into_vec();
        chosen.sort_unstable();
        Ok(chosen
            .into_iter()
            .map(|i| {
                let (&identity, pool) = eligible[i];
                let picks = sample(rng, pool.len(), set_size);
                TrainSet { identity, examples: picks.into_iter().map(|j| pool[j]).collect() }
            })
            .collect())
    }
}

/// Loss, embedding gradient and the sparse classifier gradient of one
/// example.
#[derive(Debug, Clone, PartialEq)]
pub struct OvaOutput {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    /// `(row, gradient)` for the target followed by the selected negatives;
    /// every other row has zero gradient.
    pub rows: Vec<(usize, Vec<f64>)>,
}

/// One-vs-all logistic loss over the target class and the `neg_classes`
/// highest-scoring other classes (ties broken by lower index).
pub fn ova_loss_and_grad(
    embedding: &[f64],
    target: usize,
    classifier: &ClassifierParams,
    neg_classes: usize,
) -> Result<OvaOutput> {
    let t = classifier.classes();
    if target >= t {
        return Err(Error::BadLabel { label: target, classes: t });
    }
    if embedding.len() != classifier.weights.cols() {
        return Err(Error::dims(classifier.weights.cols(), embedding.len()));
    }
    let scores = classifier.weights.matvec(embedding);
    let mut negatives: Vec<usize> = (0..t).filter(|&j| j != target).collect();
    negatives.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    negatives.truncate(neg_classes);

    let mut loss = softplus(-scores[target]);
    let mut rows = Vec::with_capacity(negatives.len() + 1);
    let mut grad_embedding = vec![0.0; embedding.len()];
    let dt = sigmoid(scores[target]) - 1.0;
    rows.push((target, embedding.iter().map(|e| dt * e).collect()));
    axpy(dt, classifier.weights.row(target), &mut grad_embedding);
    for &j in &negatives {
        loss += softplus(scores[j]);
        let dj = sigmoid(scores[j]);
        rows.push((j, embedding.iter().map(|e| dj * e).collect()));
        axpy(dj, classifier.weights.row(j), &mut grad_embedding);
    }
    Ok(OvaOutput { loss, grad_embedding, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    AssignWeights,
    AssignBias,
    Centers,
    Projection,
    ProjectionBias,
    BnGamma,
    BnBeta,
    Classifier,
}

impl ParamKind {
    pub fn learning_rate(self, cfg: &TrainConfig) -> f64 {
        match self {
            ParamKind::AssignWeights | ParamKind::AssignBias => cfg.assign_lr,
            ParamKind::Classifier => cfg.classifier_lr,
            _ => cfg.base_lr,
        }
    }

    /// Biases and BN parameters are exempt from weight decay.
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::AssignBias | ParamKind::ProjectionBias | ParamKind::BnGamma | ParamKind::BnBeta)
    }
}

/// `v ← momentum·v − lr·(g + wd·p); p ← p + v`
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != param.len() || velocity.len() != param.len() {
        return Err(Error::ShapeMismatch(format!(
            "param {} grad {} velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * (g + weight_decay * *p);
        *p += *v;
    }
    Ok(())
}

/// Trainable tensors of a model in a fixed order.
pub fn param_tensors(model: &mut Model) -> Result<Vec<(ParamKind, &mut [f64])>> {
    let Model { pooling, head, classifier } = model;
    let classifier = classifier.as_mut().ok_or_else(|| Error::Config("training needs a classifier".into()))?;
    let mut out: Vec<(ParamKind, &mut [f64])> = Vec::new();
    if let Pooling::GhostVlad(gv) = pooling {
        out.push((ParamKind::AssignWeights, gv.assign_w.as_mut_slice()));
        out.push((ParamKind::AssignBias, gv.assign_b.as_mut_slice()));
        out.push((ParamKind::Centers, gv.centers.as_mut_slice()));
    }
    out.push((ParamKind::Projection, head.proj.as_mut_slice()));
    out.push((ParamKind::ProjectionBias, head.proj_bias.as_mut_slice()));
    out.push((ParamKind::BnGamma, head.bn_gamma.as_mut_slice()));
    out.push((ParamKind::BnBeta, head.bn_beta.as_mut_slice()));
    out.push((ParamKind::Classifier, classifier.weights.as_mut_slice()));
    Ok(out)
}

/// Gradients matching [`param_tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub tensors: Vec<Vec<f64>>,
}

pub struct BatchResult {
    /// Mean loss over the sets of the batch.
    pub loss: f64,
    pub grads: ModelGrads,
    pub head_batch: HeadBatch,
}

/// Mean batch loss and its gradient with respect to every trainable tensor.
/// Per-set work runs in parallel; reductions happen in batch order.
pub fn batch_loss_and_grads(model: &Model, batch: &[TrainSet], neg_classes: usize) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let classifier = model.classifier.as_ref().ok_or_else(|| Error::Config("training needs a classifier".into()))?;
    let scale = 1.0 / batch.len() as f64;

    let inputs: Vec<Vec<&[f64]>> =
        batch.iter().map(|s| s.examples.iter().map(|e| e.descriptor.values()).collect()).collect();
    let pooled = inputs
        .par_iter()
        .map(|xs| model.pooling.pool(xs, &vec![1.0; xs.len()]))
        .collect::<Result<Vec<_>>>()?;
    let head_batch = head_forward_batch(&pooled, &model.head)?;

    let mut loss = 0.0;
    let mut grad_classifier = Matrix::zeros(classifier.classes(), classifier.weights.cols());
    let mut upstream = Vec::with_capacity(batch.len());
    for (set, e) in batch.iter().zip(&head_batch.outputs) {
        let out = ova_loss_and_grad(e.values(), set.identity as usize, classifier, neg_classes)?;
        loss += out.loss * scale;
        for (row, g) in &out.rows {
            axpy(scale, g, grad_classifier.row_mut(*row));
        }
        upstream.push(out.grad_embedding.iter().map(|g| g * scale).collect::<Vec<f64>>());
    }
    let hg = head_backward(&head_batch, &model.head, &upstream)?;

    let mut tensors = Vec::new();
    if let Pooling::GhostVlad(gv) = &model.pooling {
        let per_set = inputs
            .par_iter()
            .zip(hg.pooled.par_iter())
            .map(|(xs, g)| ghostvlad::backward(xs, &vec![1.0; xs.len()], gv, g, true))
            .collect::<Result<Vec<_>>>()?;
        let mut w = vec![0.0; gv.assign_w.as_slice().len()];
        let mut b = vec![0.0; gv.assign_b.len()];
        let mut c = vec![0.0; gv.centers.as_slice().len()];
        for g in &per_set {
            axpy(1.0, g.assign_w.as_slice(), &mut w);
            axpy(1.0, &g.assign_b, &mut b);
            axpy(1.0, g.centers.as_slice(), &mut c);
        }
        tensors.extend([w, b, c]);
    }
    tensors.extend([
        hg.proj.as_slice().to_vec(),
        hg.proj_bias,
        hg.bn_gamma,
        hg.bn_beta,
        grad_classifier.as_slice().to_vec(),
    ]);
    Ok(BatchResult { loss, grads: ModelGrads { tensors }, head_batch })
}

/// Momentum buffers, one per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub tensors: Vec<Vec<f64>>,
}

impl Velocity {
    pub fn zeros_like(model: &mut Model) -> Result<Self> {
        Ok(Velocity { tensors: param_tensors(model)?.iter().map(|(_, t)| vec![0.0; t.len()]).collect() })
    }
}

/// Applies one SGD step to every tensor with its group's learning rate
/// multiplied by `lr_scale`. Masked ghost rows are held fixed.
pub fn apply_sgd(model: &mut Model, grads: &ModelGrads, velocity: &mut Velocity, cfg: &TrainConfig, lr_scale: f64) -> Result<()> {
    let frozen_ghosts = model.ghostvlad().filter(|gv| gv.ghosts_masked && gv.ghosts() > 0).map(|gv| {
        let k = gv.clusters();
        ((k..gv.assign_w.rows()).map(|r| gv.assign_w.row(r).to_vec()).collect::<Vec<_>>(), gv.assign_b[k..].to_vec())
    });
    let tensors = param_tensors(model)?;
    if tensors.len() != grads.tensors.len() || tensors.len() != velocity.tensors.len() {
        return Err(Error::ShapeMismatch("gradient/velocity layout does not match model".into()));
    }
    for ((kind, param), (grad, vel)) in tensors.into_iter().zip(grads.tensors.iter().zip(velocity.tensors.iter_mut())) {
        let wd = if kind.decays() { cfg.weight_decay } else { 0.0 };
        sgd_step(param, grad, vel, kind.learning_rate(cfg) * lr_scale, cfg.momentum, wd)?;
    }
    if let Some((rows, biases)) = frozen_ghosts {
        let dim = model.pooling.input_dim();
        let gv = model.ghostvlad_mut().expect("ghost rows come from a GhostVLAD model");
        let k = gv.clusters();
        for (i, row) in rows.iter().enumerate() {
            gv.assign_w.row_mut(k + i).copy_from_slice(row);
        }
        gv.assign_b[k..].copy_from_slice(&biases);
        // reset ghost momentum so unmasking starts from rest
        velocity.tensors[0][k * dim..].iter_mut().for_each(|v| *v = 0.0);
        velocity.tensors[1][k..].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    /// Single examples, no degraded inputs, ghosts masked.
    Singles,
    /// Sets with degraded inputs and ghosts active.
    Sets,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Singles => 2,
            Stage::Sets => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    /// Base-group learning rate in effect during the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_tar_far2: f64,
}

pub fn write_log_csv(log: &[EpochLog], out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "epoch,stage,lr,train_loss,val_tar_far2")?;
    for e in log {
        writeln!(out, "{},{},{},{},{}", e.epoch, e.stage, e.lr, e.train_loss, e.val_tar_far2)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// TAR at [`VALIDATION_FAR`] over all pairs of the validation templates;
/// NaN when the split has no genuine or no impostor pairs.
pub fn validation_tar(model: &Model, data: &TrainingData) -> Result<f64> {
    if data.validation.is_empty() {
        return Ok(f64::NAN);
    }
    let embeddings = model.embed_all(&data.validation)?;
    let subjects: Vec<u32> = data.validation.iter().map(|t| t.subject()).collect();
    match verify(&all_pairs(&subjects), &embeddings) {
        Ok(v) => Ok(v.tar_at_far(VALIDATION_FAR)),
        Err(Error::NoGenuine) | Err(Error::NoImpostor) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Tracks validation error and decides when to drop the learning rate.
#[derive(Debug, Clone)]
pub struct Plateau {
    best: f64,
    stale: usize,
    patience: usize,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Plateau { best: f64::INFINITY, stale: 0, patience }
    }

    /// Records one evaluation; returns true when the rate should drop.
    pub fn observe(&mut self, error: f64) -> bool {
        if error.is_nan() {
            return false;
        }
        if error < self.best {
            self.best = error;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return true;
        }
        false
    }
}

struct StagePlan<'a> {
    stage: Stage,
    epochs: usize,
    sampler: SetSampler<'a>,
    set_size: usize,
}

fn set_stage_mask(model: &mut Model, stage: Stage) {
    if let Some(gv) = model.ghostvlad_mut() {
        gv.ghosts_masked = stage == Stage::Singles;
    }
}

/// Runs stage 2 then stage 3. Deterministic for a given seed and independent
/// of the worker count.
pub fn train(data: &TrainingData, init: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage2_epochs + cfg.stage3_epochs == 0 {
        return Ok(TrainOutcome { model: init, log: Vec::new() });
    }
    let mut model = init;
    model.validate()?;
    let classes = model.classifier.as_ref().map(ClassifierParams::classes).unwrap_or(0);
    if classes < data.identities {
        return Err(Error::BadLabel { label: data.identities.saturating_sub(1), classes });
    }

    let all = data.all_training();
    let plans = [
        StagePlan { stage: Stage::Singles, epochs: cfg.stage2_epochs, sampler: SetSampler::new(&data.originals), set_size: 1 },
        StagePlan { stage: Stage::Sets, epochs: cfg.stage3_epochs, sampler: SetSampler::new(&all), set_size: cfg.set_size },
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Velocity::zeros_like(&mut model)?;
    let mut plateau = Plateau::new(cfg.plateau_patience);
    let mut lr_scale = 1.0;
    let mut log = Vec::new();
    let mut epoch = 0;

    for plan in plans.iter().filter(|p| p.epochs > 0) {
        set_stage_mask(&mut model, plan.stage);
        let sets = cfg.batch_sets(plan.set_size, plan.sampler.identities());
        let steps = if cfg.steps_per_epoch > 0 {
            cfg.steps_per_epoch
        } else {
            plan.sampler.len().div_ceil(sets * plan.set_size).max(1)
        };

        if epoch == 0 {
            // Epoch 0: the initial model on an independent draw of batches.
            let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            probe_rng.set_stream(1);
            let mut total = 0.0;
            for _ in 0..steps {
                let batch = plan.sampler.sample_batch(sets, plan.set_size, &mut probe_rng)?;
                total += batch_loss_and_grads(&model, &batch, cfg.neg_classes)?.loss;
            }
            log.push(EpochLog {
                epoch: 0,
                stage: plan.stage.number(),
                lr: cfg.base_lr * lr_scale,
                train_loss: total / steps as f64,
                val_tar_far2: validation_tar(&model, data)?,
            });
        }

        for _ in 0..plan.epochs {
            epoch += 1;
            let lr_used = cfg.base_lr * lr_scale;
            let mut total = 0.0;
            for _ in 0..steps {
                let batch = plan.sampler.sample_batch(sets, plan.set_size, &mut rng)?;
                let res = batch_loss_and_grads(&model, &batch, cfg.neg_classes)?;
                total += res.loss;
                model.head.update_running(&res.head_batch);
                apply_sgd(&mut model, &res.grads, &mut velocity, cfg, lr_scale)?;
            }
            let val = validation_tar(&model, data)?;
            log.push(EpochLog {
                epoch,
                stage: plan.stage.number(),
                lr: lr_used,
                train_loss: total / steps as f64,
                val_tar_far2: val,
            });
            if plateau.observe(1.0 - val) {
                lr_scale *= cfg.lr_drop_factor;
            }
        }
    }
    set_stage_mask(&mut model, Stage::Sets);
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::Descriptor;

    fn classifier(t: usize, d: usize, seed: u64) -> ClassifierParams {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ClassifierParams {
            weights: Matrix::from_vec(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        }
    }

    #[test]
    fn zero_scores_give_21_ln2() {
        let c = ClassifierParams::zeros(30, 4);
        let out = ova_loss_and_grad(&[0.5, 0.5, 0.5, 0.5], 3, &c, 20).unwrap();
        assert!((out.loss - 21.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(out.rows.len(), 21);
        // all ties: negatives are the 20 lowest non-target indices
        let negs: Vec<usize> = out.rows[1..].iter().map(|r| r.0).collect();
        let expected: Vec<usize> = (0..30).filter(|&j| j != 3).take(20).collect();
        assert_eq!(negs, expected);
    }

    #[test]
    fn separable_limit_loss_vanishes() {
        let mut c = ClassifierParams::zeros(5, 2);
        c.weights.row_mut(1).copy_from_slice(&[1000.0, 0.0]);
        for j in [0, 2, 3, 4] {
            c.weights.row_mut(j).copy_from_slice(&[-1000.0, 0.0]);
        }
        let out = ova_loss_and_grad(&[1.0, 0.0], 1, &c, 20).unwrap();
        assert!(out.loss < 1e-300);
    }

    #[test]
    fn bad_label() {
        let c = ClassifierParams::zeros(3, 2);
        assert!(matches!(ova_loss_and_grad(&[1.0, 0.0], 3, &c, 2), Err(Error::BadLabel { .. })));
    }

    #[test]
    fn negatives_are_the_highest_scores() {
        let c = classifier(30, 6, 1);
        let e = [0.3, -0.2, 0.5, 0.1, 0.7, -0.1];
        let out = ova_loss_and_grad(&e, 4, &c, 5).unwrap();
        let scores = c.weights.matvec(&e);
        let mut order: Vec<usize> = (0..30).filter(|&j| j != 4).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let negs: Vec<usize> = out.rows[1..].iter().map(|r| r.0).collect();
        assert_eq!(negs, order[..5].to_vec());
    }

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn momentum_coasts_on_zero_gradient() {
        let mut p = vec![1.0];
        let mut v = vec![0.3];
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - (1.0 + 0.9 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_on_a_quadratic() {
        // f(p) = 0.5 · a · p², grad = a·p; lr 0.1, momentum 0.9, wd 0.01
        let (a, lr, m, wd) = (2.0, 0.1, 0.9, 0.01);
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        for _ in 0..2 {
            let g = [a * p[0]];
            sgd_step(&mut p, &g, &mut v, lr, m, wd).unwrap();
        }
        // v1 = -0.1·(2 + 0.01) = -0.201, p1 = 0.799
        // v2 = 0.9·(-0.201) - 0.1·(1.598 + 0.00799) = -0.341499, p2 = 0.457501
        assert!((v[0] + 0.341499).abs() < 1e-12);
        assert!((p[0] - 0.457501).abs() < 1e-12);
    }

    #[test]
    fn sgd_shape_mismatch() {
        assert!(matches!(sgd_step(&mut [0.0], &[1.0, 2.0], &mut [0.0], 0.1, 0.0, 0.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn parameter_groups() {
        let cfg = TrainConfig::default();
        assert_eq!(ParamKind::AssignWeights.learning_rate(&cfg), 0.1);
        assert_eq!(ParamKind::AssignBias.learning_rate(&cfg), 0.1);
        assert_eq!(ParamKind::Classifier.learning_rate(&cfg), 1.0);
        assert_eq!(ParamKind::Centers.learning_rate(&cfg), 1e-4);
        assert!(!ParamKind::BnGamma.decays() && !ParamKind::ProjectionBias.decays());
        assert!(ParamKind::Centers.decays() && ParamKind::Classifier.decays());
    }

    fn examples(t: u32, per: usize) -> Vec<LabeledDescriptor> {
        (0..t)
            .flat_map(|id| {
                (0..per).map(move |i| LabeledDescriptor {
                    descriptor: Descriptor::from_raw(vec![id as f64, i as f64]),
                    identity: id,
                })
            })
            .collect()
    }

    #[test]
    fn batches_have_distinct_identities_and_no_repeats() {
        let ex = examples(50, 4);
        let s = SetSampler::new(&ex);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TrainConfig::default();
        let sets = cfg.batch_sets(2, s.identities());
        assert_eq!(sets, 42);
        let batch = s.sample_batch(sets, 2, &mut rng).unwrap();
        assert_eq!(batch.len(), 42);
        let mut ids: Vec<u32> = batch.iter().map(|b| b.identity).collect();
        ids.dedup();
        assert_eq!(ids.len(), 42);
        for set in &batch {
            assert_eq!(set.examples.len(), 2);
            assert_ne!(set.examples[0], set.examples[1]);
            assert!(set.examples.iter().all(|e| e.identity == set.identity));
        }
        let singles = s.sample_batch(10, 1, &mut rng).unwrap();
        assert!(singles.iter().all(|b| b.examples.len() == 1));
    }

    #[test]
    fn sampling_replays_with_the_same_state() {
        let ex = examples(10, 5);
        let s = SetSampler::new(&ex);
        let a = s.sample_batch(4, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = s.sample_batch(4, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_examples() {
        let ex = examples(3, 2);
        let s = SetSampler::new(&ex);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(s.sample_batch(2, 3, &mut rng), Err(Error::InsufficientExamples(_))));
        assert!(matches!(s.sample_batch(4, 1, &mut rng), Err(Error::InsufficientExamples(_))));
    }

    #[test]
    fn plateau_drops_only_after_patience() {
        let mut p = Plateau::new(3);
        assert!(!p.observe(0.5));
        assert!(!p.observe(0.5));
        assert!(!p.observe(0.6));
        assert!(p.observe(0.5));
        assert!(!p.observe(0.4));
        assert!(!p.observe(0.4));
    }
}
