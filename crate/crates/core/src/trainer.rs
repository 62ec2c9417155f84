//! Per-task training loop.
//!
//! Each step samples old class names once, then for every example of the
//! batch selects a prompt among the task's new prototypes, builds the text
//! classifier, and evaluates the full objective. Gradients are averaged over
//! the batch and applied with plain SGD on a cosine schedule. Prototype rows
//! are renormalized after each update; frozen rows are never touched.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ProtoMode, Selection, TrainConfig};
use crate::embedding_io::{ClassTokenTable, Task};
use crate::encoders::ToyTextEncoder;
use crate::error::{Error, Result};
use crate::losses::{total_loss, Gradients, LossBreakdown, LossContext};
use crate::model::{build_text_classifier, sample_old_classes, select_prompt, Banks};
use crate::numerics::{cosine_lr, unit, LrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub c1: f64,
    pub c2: f64,
    pub pp: f64,
    pub total: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub lrs: Vec<f64>,
}

/// Seed for the RNG stream of one task.
pub fn task_seed(seed: u64, task_index: usize) -> u64 {
    seed ^ (task_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// How one example's objective is assembled; resolved once per step.
struct StepPlan<'a> {
    banks: &'a Banks,
    enc: &'a ToyTextEncoder,
    tokens: &'a ClassTokenTable,
    cfg: &'a TrainConfig,
    new_range: Range<usize>,
    tc_class_ids: Vec<u32>,
    tc_bank_rows: Vec<usize>,
}

impl StepPlan<'_> {
    fn example(&self, z: &[f64], class_id: u32) -> Result<LossBreakdown> {
        let target = self
            .banks
            .index_of(class_id)
            .ok_or_else(|| Error::Index(format!("class {class_id} is not in the bank")))?;
        let tc = match self.cfg.selection {
            Selection::WeightTop1 => {
                // A task made only of recurring classes adds no prototypes;
                // selection then falls back to the whole bank.
                let range = if self.new_range.is_empty() {
                    0..self.banks.len()
                } else {
                    self.new_range.clone()
                };
                let (sel, mut lambda) = select_prompt(z, &self.banks.prototypes, range)?;
                if self.cfg.clamp_lambda {
                    lambda = lambda.clamp(0.0, 1.0);
                }
                build_text_classifier(
                    self.enc,
                    self.banks.prompt(sel),
                    sel,
                    lambda,
                    &self.tc_class_ids,
                    self.tokens,
                )?
            }
            // Ablation: the example's own class prompt at unit scale.
            Selection::None => build_text_classifier(
                self.enc,
                self.banks.prompt(target),
                target,
                1.0,
                &self.tc_class_ids,
                self.tokens,
            )?,
        };
        total_loss(&LossContext {
            z,
            banks: self.banks,
            enc: self.enc,
            target,
            c1_range: self.new_range.clone(),
            tc: &tc,
            tc_bank_rows: &self.tc_bank_rows,
            tau: self.cfg.tau,
            lambda_pp: self.cfg.lambda_pp,
            pair_loss: self.cfg.loss_variant,
        })
    }
}

/// Trains the banks on one task. `new_range` is the bank range the task
/// added (as returned by [`Banks::expand`]); `task_index` seeds the RNG.
pub fn train_task(
    banks: &mut Banks,
    enc: &ToyTextEncoder,
    task: &Task,
    tokens: &ClassTokenTable,
    cfg: &TrainConfig,
    new_range: Range<usize>,
    task_index: usize,
) -> Result<TrainLog> {
    cfg.validate()?;
    if task.train.is_empty() {
        return Err(Error::NoData(task.task_id));
    }
    let n = task.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let sched = LrSchedule {
        lr0: cfg.lr0,
        lr_min: cfg.lr_min,
        total_steps,
    };

    // Text-classifier rows: new classes first, then the task's recurring
    // classes, then sampled earlier classes.
    let mut current: Vec<usize> = new_range.clone().collect();
    let mut recurring: Vec<usize> = Vec::new();
    for &c in &task.class_ids {
        let idx = banks
            .index_of(c)
            .ok_or_else(|| Error::Index(format!("class {c} was not added to the bank")))?;
        if !new_range.contains(&idx) {
            recurring.push(idx);
        }
    }
    recurring.sort_unstable();
    current.extend(&recurring);
    let old_pool: Vec<u32> = (0..new_range.start)
        .filter(|i| !recurring.contains(i))
        .map(|i| banks.class_ids()[i])
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(task_seed(cfg.seed, task_index));
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut lr = cfg.lr0;
        for batch in order.chunks(cfg.batch_size) {
            let sampled = sample_old_classes(&old_pool, cfg.sample_old, &mut rng);
            let mut tc_class_ids: Vec<u32> =
                current.iter().map(|&i| banks.class_ids()[i]).collect();
            tc_class_ids.extend(&sampled);
            let tc_bank_rows: Vec<usize> = tc_class_ids
                .iter()
                .map(|&c| banks.index_of(c).expect("sampled from bank"))
                .collect();

            let plan = StepPlan {
                banks,
                enc,
                tokens,
                cfg,
                new_range: new_range.clone(),
                tc_class_ids,
                tc_bank_rows,
            };
            let results: Vec<Result<LossBreakdown>> = batch
                .par_iter()
                .map(|&i| {
                    let r = &task.train[i];
                    plan.example(&r.vector, r.class_id)
                })
                .collect();

            let mut grads = Gradients::default();
            let inv = 1.0 / batch.len() as f64;
            for res in results {
                let b = res?;
                sums[0] += b.c1;
                sums[1] += b.c2;
                sums[2] += b.pp;
                sums[3] += b.total;
                grads.add_scaled(inv, &b.grads);
            }

            step += 1;
            lr = cosine_lr(step, &sched);
            log.lrs.push(lr);
            apply_update(banks, &grads, lr, cfg)?;
        }
        let nf = n as f64;
        log.epochs.push(EpochLog {
            task: task_index,
            epoch,
            c1: sums[0] / nf,
            c2: sums[1] / nf,
            pp: sums[2] / nf,
            total: sums[3] / nf,
            lr,
        });
    }
    log.steps = step;
    Ok(log)
}

fn apply_update(banks: &mut Banks, grads: &Gradients, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if lr == 0.0 {
        return Ok(());
    }
    if cfg.proto_mode != ProtoMode::Frozen {
        for (&idx, g) in &grads.prototypes {
            if banks.prototypes.frozen[idx] {
                continue;
            }
            let row = banks.prototypes.rows.row_mut(idx);
            for (p, gi) in row.iter_mut().zip(g) {
                *p -= lr * (gi + cfg.weight_decay * *p);
            }
            let (u, _) = unit(row)?;
            row.copy_from_slice(&u);
        }
    }
    for (&idx, g) in &grads.prompts {
        if banks.prompts.frozen[idx] {
            continue;
        }
        let block = banks.prompts.blocks[idx].as_mut_slice();
        for (p, gi) in block.iter_mut().zip(g.as_slice()) {
            *p -= lr * (gi + cfg.weight_decay * *p);
        }
    }
    Ok(())
}

/// SHA-256 over every parameter and flag of the banks.
pub fn snapshot(banks: &Banks) -> [u8; 32] {
    snapshot_classes(banks, 0..banks.len())
}

/// SHA-256 over the parameters of the classes in `range`.
pub fn snapshot_classes(banks: &Banks, range: Range<usize>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((banks.dim() as u64).to_le_bytes());
    h.update((banks.prompt_len() as u64).to_le_bytes());
    for i in range {
        h.update(banks.class_ids()[i].to_le_bytes());
        h.update([
            banks.prototypes.frozen[i] as u8,
            banks.prompts.frozen[i] as u8,
        ]);
        h.update((banks.prototypes.task_of[i] as u64).to_le_bytes());
        h.update((banks.prompts.task_of[i] as u64).to_le_bytes());
        for x in banks.prototype(i) {
            h.update(x.to_le_bytes());
        }
        for x in banks.prompt(i).as_slice() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_io::{gen_synthetic, StreamMode, SynthConfig, TaskStream};
    use crate::evaluator::{InferenceConfig, PredictMode, Predictor};
    use crate::model::{PromptInit, PrototypeInit};
    use std::collections::BTreeMap;

    fn stream(num_tasks: usize) -> TaskStream {
        gen_synthetic(
            &SynthConfig {
                num_tasks,
                samples_per_class: 100,
                ..SynthConfig::default()
            },
            StreamMode::Ci,
        )
        .unwrap()
    }

    fn expand(banks: &mut Banks, task: &Task, idx: usize) -> Range<usize> {
        let mut feats: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
        for r in &task.train {
            feats.entry(r.class_id).or_default().push(&r.vector);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(idx as u64);
        banks
            .expand(
                idx,
                &task.new_class_ids,
                &feats,
                &PrototypeInit::ClassMean,
                &PromptInit::default(),
                &mut rng,
            )
            .unwrap()
    }

    fn setup(s: &TaskStream) -> (Banks, ToyTextEncoder, Range<usize>) {
        let mut banks = Banks::new(s.d, 6);
        let range = expand(&mut banks, &s.tasks[0], 0);
        (banks, ToyTextEncoder::new(s.d, 6, 1234).unwrap(), range)
    }

    #[test]
    fn zero_epochs_or_zero_rate_change_nothing() {
        let s = stream(1);
        let (mut banks, enc, range) = setup(&s);
        let before = banks.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let log = train_task(
            &mut banks,
            &enc,
            &s.tasks[0],
            &s.tokens,
            &cfg,
            range.clone(),
            0,
        )
        .unwrap();
        assert_eq!(log.steps, 0);
        assert_eq!(banks, before);

        let cfg = TrainConfig {
            epochs: 2,
            lr0: 0.0,
            lr_min: 0.0,
            ..TrainConfig::default()
        };
        let log = train_task(&mut banks, &enc, &s.tasks[0], &s.tokens, &cfg, range, 0).unwrap();
        assert!(log.steps > 0);
        assert_eq!(snapshot(&banks), snapshot(&before));
    }

    #[test]
    fn step_count_and_final_rate() {
        let s = stream(1);
        let (mut banks, enc, range) = setup(&s);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 48,
            ..TrainConfig::default()
        };
        let log = train_task(&mut banks, &enc, &s.tasks[0], &s.tokens, &cfg, range, 0).unwrap();
        // 400 records in batches of 48 → 9 steps per epoch.
        assert_eq!(log.steps, 27);
        assert_eq!(log.lrs.len(), 27);
        assert_eq!(*log.lrs.last().unwrap(), cfg.lr_min);
        assert_eq!(log.epochs.len(), 3);
    }

    #[test]
    fn separable_task_is_learned() {
        let s = gen_synthetic(&SynthConfig::default(), StreamMode::Ci).unwrap();
        let (mut banks, enc, range) = setup(&s);
        let cfg = TrainConfig::default();
        let log = train_task(&mut banks, &enc, &s.tasks[0], &s.tokens, &cfg, range, 0).unwrap();
        for w in log.epochs[..5].windows(2) {
            assert!(w[1].total < w[0].total, "{} !< {}", w[1].total, w[0].total);
        }
        let p = Predictor::new(&banks, &enc, &s.tokens, InferenceConfig::from(&cfg)).unwrap();
        let train = &s.tasks[0].train;
        let correct = train
            .iter()
            .filter(|r| p.predict(&r.vector, PredictMode::Aggregated).unwrap() == r.class_id)
            .count();
        assert!(correct as f64 / train.len() as f64 >= 0.95);
    }

    #[test]
    fn frozen_parameters_survive_training() {
        let s = stream(2);
        let (mut banks, enc, range) = setup(&s);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        train_task(&mut banks, &enc, &s.tasks[0], &s.tokens, &cfg, range, 0).unwrap();
        let range = expand(&mut banks, &s.tasks[1], 1);
        let old = snapshot_classes(&banks, 0..range.start);
        let new = snapshot_classes(&banks, range.clone());
        train_task(
            &mut banks,
            &enc,
            &s.tasks[1],
            &s.tokens,
            &cfg,
            range.clone(),
            1,
        )
        .unwrap();
        assert_eq!(snapshot_classes(&banks, 0..range.start), old);
        assert_ne!(snapshot_classes(&banks, range), new);
    }

    #[test]
    fn deterministic() {
        let s = stream(1);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut banks, enc, range) = setup(&s);
            let log = train_task(&mut banks, &enc, &s.tasks[0], &s.tokens, &cfg, range, 0).unwrap();
            (snapshot(&banks), log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn snapshot_sees_one_bit() {
        let s = stream(1);
        let (mut banks, _, _) = setup(&s);
        let a = snapshot(&banks);
        assert_eq!(a, snapshot(&banks));
        let x = banks.prompts.blocks[2].get(1, 3);
        banks.prompts.blocks[2].set(1, 3, f64::from_bits(x.to_bits() ^ 1));
        assert_ne!(a, snapshot(&banks));
    }

    #[test]
    fn empty_task_is_an_error() {
        let s = stream(1);
        let (mut banks, enc, range) = setup(&s);
        let mut task = s.tasks[0].clone();
        task.train.clear();
        let err = train_task(
            &mut banks,
            &enc,
            &task,
            &s.tokens,
            &TrainConfig::default(),
            range,
            0,
        );
        assert!(matches!(err, Err(Error::NoData(_))));
    }
}
