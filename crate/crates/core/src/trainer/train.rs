use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dist::uniform_rotation;
use super::eval::{evaluate, Metrics};
use super::loss::{LossContext, LossInputs, LossTerms, LossWeights};
use super::TrainError;
use crate::bodymodel::{BodyModel, Dataset, SampleRecord};
use crate::equinet::EquiNet;
use crate::group60::RotationGroup;
use crate::microtensor::{AdamConfig, AdamState, Graph, ParamStore};

/// Optimisation settings of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Rotate every training cloud by a fresh uniform rotation (stage 2 only).
    pub augment_so3: bool,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 4, learning_rate: 1e-3, seed: 0, augment_so3: false, loss: LossWeights::default() }
    }
}

/// Stage 1 pools part features with ground-truth memberships; stage 2 uses
/// the predicted ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Mean training losses of one epoch, plus optional validation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub terms: LossTerms,
    pub train_seg_accuracy: f64,
    pub val: Option<Metrics>,
    pub wall_seconds: f64,
}

fn shuffled(n: usize, seed: u64, stage: u8, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs one training stage and returns the updated weights and per-epoch
/// log. `on_epoch` sees each record as soon as it is complete.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    net: &EquiNet,
    group: &RotationGroup,
    model: &BodyModel,
    mut params: ParamStore<f32>,
    stage: Stage,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ParamStore<f32>, Vec<EpochRecord>), TrainError> {
    cfg.loss.validate()?;
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(TrainError::InvalidConfig("batch size and learning rate must be positive".into()));
    }
    if train.records.is_empty() {
        return Err(TrainError::InvalidConfig("training set is empty".into()));
    }
    if train.header.part_map.parts() != net.layout.parts || train.header.body.joints != net.layout.joints() {
        return Err(TrainError::Shape("dataset does not match the network layout".into()));
    }
    let ctx = LossContext::<f32>::new(model);
    let mut adam = AdamState::new(&params, AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(0xa5 + stage.number() as u64);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = shuffled(train.records.len(), cfg.seed, stage.number(), epoch);
        let mut sum = LossTerms::default();
        let (mut correct, mut seen) = (0usize, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = params.zeros_like();
            for &i in batch {
                let augmented;
                let record: &SampleRecord = if stage == Stage::Two && cfg.augment_so3 {
                    let r = uniform_rotation(&mut aug_rng);
                    let base = &train.records[i];
                    let rest_root = model.forward_kinematics(&base.gt_params)?.rest_joints[0];
                    augmented = base.rotated(&r, &rest_root);
                    &augmented
                } else {
                    &train.records[i]
                };
                let prepared = net.prepare(group, &record.points)?;
                let mut g = Graph::new();
                let gt = (stage == Stage::One).then_some(record.labels.as_slice());
                let out = net.build(&mut g, &params, group, &prepared.plan, gt)?;
                let inputs = LossInputs { logits: out.logits, rot_sums: out.rot_sums, beta: out.beta };
                let loss = ctx.total_loss(&mut g, &inputs, record, &cfg.loss)?;
                let terms = loss.values(&g);
                if !terms.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss { stage: stage.number(), epoch, batch: b });
                }
                sum.add_scaled(&terms, 1.0 / train.records.len() as f64);
                let alpha = g.value(out.alpha).to_f64_vec();
                let p = net.layout.parts;
                for (row, &l) in alpha.chunks(p).zip(&record.labels) {
                    let arg = row.iter().enumerate().fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
                    correct += (arg == l) as usize;
                    seen += 1;
                }
                g.backward(loss.total)?;
                for (name, var) in g.params() {
                    if let (Some(dst), Some(src)) = (grads.get_mut(name), g.grad(*var)) {
                        for (d, s) in dst.data_mut().iter_mut().zip(src) {
                            *d += *s as f64 / batch.len() as f64;
                        }
                    }
                }
            }
            if grads.iter().any(|(_, t)| !t.all_finite()) {
                return Err(TrainError::NonFiniteLoss { stage: stage.number(), epoch, batch: b });
            }
            adam.update(&mut params, &grads)?;
        }
        let val = match val {
            Some(ds) => Some(evaluate(net, group, model, &params, ds)?.mean),
            None => None,
        };
        let record = EpochRecord {
            stage: stage.number(),
            epoch: epoch + 1,
            terms: sum,
            train_seg_accuracy: 100.0 * correct as f64 / seen.max(1) as f64,
            val,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok((params, log))
}
