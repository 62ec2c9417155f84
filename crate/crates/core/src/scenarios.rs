//! Experimental settings over task streams: class-incremental (CI),
//! cross-dataset continual (CDC), class-and-domain incremental (CDI), and the
//! untrained nearest-prototype baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CdcEval, ProtoMode, TrainConfig};
use crate::embedding_io::{ClassTokenTable, EmbeddingRecord, Task, TaskStream};
use crate::encoders::ToyTextEncoder;
use crate::error::{Error, Result};
use crate::evaluator::{
    forward_transfer, gen_avg_accuracy, trajectory_point, EvalReport, InferenceConfig,
    TaskPredictions, TrajectoryPoint,
};
use crate::model::{init_prototype, Banks, PromptInit, PrototypeInit};
use crate::numerics::{cosine_sim, Mat};
use crate::trainer::{task_seed, train_task, TrainLog};

const EXPAND_SALT: u64 = 0xE4A7_D5EE_D000_0001;

/// Result of one scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: EvalReport,
    pub banks: Banks,
    pub encoder_seed: u64,
    pub train_logs: Vec<TrainLog>,
    /// Banks after each trained task.
    pub checkpoints: Vec<Banks>,
    pub notes: Vec<String>,
}

/// Cross-dataset run plus the standalone second-dataset run it is compared to.
#[derive(Debug, Clone)]
pub struct CdcRun {
    pub run: ScenarioRun,
    pub standalone: ScenarioRun,
    /// Last accuracy on the second dataset alone (I2C), before pooling.
    pub i2c_last: f64,
    pub forward_transfer: f64,
}

/// For each new prototype, the prompt block of the most cosine-similar
/// prototype among `old_range` (ties to the lowest index). `None` when the
/// old range is empty.
pub fn transfer_init_prompts(
    new_prototypes: &[&[f64]],
    old: &Banks,
    old_range: Range<usize>,
) -> Result<Option<Vec<Mat>>> {
    if old_range.is_empty() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(new_prototypes.len());
    for p in new_prototypes {
        let mut best = (old_range.start, f64::NEG_INFINITY);
        for k in old_range.clone() {
            let s = cosine_sim(p, old.prototype(k))?;
            if s > best.1 {
                best = (k, s);
            }
        }
        out.push(old.prompt(best.0).clone());
    }
    Ok(Some(out))
}

struct Learner<'a> {
    banks: Banks,
    enc: ToyTextEncoder,
    tokens: &'a ClassTokenTable,
    cfg: &'a TrainConfig,
    task_index: usize,
    logs: Vec<TrainLog>,
    checkpoints: Vec<Banks>,
    notes: Vec<String>,
}

impl<'a> Learner<'a> {
    fn new(d: usize, tokens: &'a ClassTokenTable, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            banks: Banks::new(d, cfg.prompt_len),
            enc: ToyTextEncoder::new(d, cfg.prompt_len, cfg.encoder_seed)?,
            tokens,
            cfg,
            task_index: 0,
            logs: Vec::new(),
            checkpoints: Vec::new(),
            notes: Vec::new(),
        })
    }

    /// Expands for the task's new classes, optionally transfers prompts from
    /// `transfer_from`, then trains.
    fn learn(&mut self, task: &Task, transfer_from: Option<Range<usize>>) -> Result<()> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(task_seed(self.cfg.seed ^ EXPAND_SALT, self.task_index));
        let mut features: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
        for r in &task.train {
            features.entry(r.class_id).or_default().push(&r.vector);
        }
        let proto_init = match self.cfg.proto_mode {
            ProtoMode::Scratch => PrototypeInit::Random,
            _ => PrototypeInit::ClassMean,
        };
        let prompt_init = PromptInit::Gaussian {
            sigma: self.cfg.prompt_init_sigma,
        };
        let new_range = self.banks.expand(
            self.task_index,
            &task.new_class_ids,
            &features,
            &proto_init,
            &prompt_init,
            &mut rng,
        )?;

        if let Some(old_range) = transfer_from {
            let protos: Vec<&[f64]> = new_range.clone().map(|i| self.banks.prototype(i)).collect();
            match transfer_init_prompts(&protos, &self.banks, old_range)? {
                Some(blocks) => {
                    for (i, b) in new_range.clone().zip(blocks) {
                        self.banks.prompts.blocks[i] = b;
                    }
                }
                None => self.notes.push(format!(
                    "task {}: no earlier-dataset prompts to transfer, kept Gaussian init",
                    self.task_index
                )),
            }
        }

        let log = train_task(
            &mut self.banks,
            &self.enc,
            task,
            self.tokens,
            self.cfg,
            new_range,
            self.task_index,
        )?;
        self.logs.push(log);
        self.checkpoints.push(self.banks.clone());
        self.task_index += 1;
        Ok(())
    }

    fn evaluate(&self, task: usize, groups: &[&[EmbeddingRecord]]) -> Result<TrajectoryPoint> {
        self.evaluate_on(&self.banks, task, groups)
    }

    fn evaluate_on(
        &self,
        banks: &Banks,
        task: usize,
        groups: &[&[EmbeddingRecord]],
    ) -> Result<TrajectoryPoint> {
        trajectory_point(
            banks,
            &self.enc,
            self.tokens,
            InferenceConfig::from(self.cfg),
            task,
            groups,
        )
    }

    fn finish(self, report: EvalReport) -> ScenarioRun {
        ScenarioRun {
            report,
            encoder_seed: self.enc.seed(),
            banks: self.banks,
            train_logs: self.logs,
            checkpoints: self.checkpoints,
            notes: self.notes,
        }
    }
}

fn test_groups(tasks: &[Task]) -> Vec<&[EmbeddingRecord]> {
    tasks.iter().map(|t| t.test.as_slice()).collect()
}

fn run_sequence(stream: &TaskStream, cfg: &TrainConfig) -> Result<ScenarioRun> {
    let mut learner = Learner::new(stream.d, &stream.tokens, cfg)?;
    let mut report = EvalReport::default();
    for (t, task) in stream.tasks.iter().enumerate() {
        learner.learn(task, None)?;
        let point = learner.evaluate(t, &test_groups(&stream.tasks[..=t]))?;
        report.push(point);
    }
    Ok(learner.finish(report))
}

/// Class-incremental run: expand, train, and evaluate on all tasks so far.
pub fn run_ci(stream: &TaskStream, cfg: &TrainConfig) -> Result<ScenarioRun> {
    stream.check_disjoint()?;
    run_sequence(stream, cfg)
}

/// Class-and-domain incremental run. Recurring classes keep their frozen
/// parameters; their new-domain data still trains the current task's prompts
/// and prototypes through the text and pair terms.
pub fn run_cdi(stream: &TaskStream, cfg: &TrainConfig) -> Result<ScenarioRun> {
    run_sequence(stream, cfg)
}

/// Trains on `stream_a`, then continues on `stream_b` with prompts of new
/// classes copied from the nearest first-dataset prototype.
pub fn run_cdc(
    stream_a: &TaskStream,
    stream_b: &TaskStream,
    cfg: &TrainConfig,
    eval: CdcEval,
) -> Result<CdcRun> {
    stream_a.check_disjoint()?;
    stream_b.check_disjoint()?;
    let ids_a = stream_a.class_ids();
    let overlap: BTreeSet<u32> = stream_b.class_ids().intersection(&ids_a).copied().collect();
    if !overlap.is_empty() {
        return Err(Error::Config(format!(
            "cross-dataset streams share class ids {overlap:?}"
        )));
    }
    if !stream_a.tasks.is_empty() && !stream_b.tasks.is_empty() && stream_a.d != stream_b.d {
        return Err(Error::Config(format!(
            "datasets have dimensions {} and {}",
            stream_a.d, stream_b.d
        )));
    }
    let d = if stream_a.tasks.is_empty() {
        stream_b.d
    } else {
        stream_a.d
    };

    let mut tokens = stream_a.tokens.clone();
    tokens.extend(&stream_b.tokens);

    let mut learner = Learner::new(d, &tokens, cfg)?;
    for task in &stream_a.tasks {
        learner.learn(task, None)?;
    }
    let a_range = 0..learner.banks.len();

    let a_tests = test_groups(&stream_a.tasks);
    let mut report = EvalReport::default();
    let mut i2c_last = f64::NAN;
    for (t, task) in stream_b.tasks.iter().enumerate() {
        let transfer = cfg.cdc_transfer.then(|| a_range.clone());
        learner.learn(task, transfer)?;
        let b_tests = test_groups(&stream_b.tasks[..=t]);
        // I2C predicts over the second dataset's classes only, like the
        // standalone run it is compared against.
        let b_only = learner.banks.subset(a_range.end..learner.banks.len());
        let i2c = learner.evaluate_on(&b_only, t, &b_tests)?;
        if t + 1 == stream_b.tasks.len() {
            i2c_last = i2c.aggregated;
        }
        let point = match eval {
            CdcEval::I2c => i2c,
            CdcEval::IPlusC => {
                let pooled: Vec<&[EmbeddingRecord]> =
                    a_tests.iter().chain(&b_tests).copied().collect();
                learner.evaluate(t, &pooled)?
            }
        };
        report.push(point);
    }

    let standalone = run_sequence(stream_b, cfg)?;
    let ft = forward_transfer(i2c_last, standalone.report.last_accuracy);
    report.forward_transfer = Some(ft);
    Ok(CdcRun {
        run: learner.finish(report),
        standalone,
        i2c_last,
        forward_transfer: ft,
    })
}

/// Nearest-prototype classifier over untrained class-mean prototypes.
pub fn prototypes_only_baseline(stream: &TaskStream) -> Result<EvalReport> {
    let mut ids: Vec<u32> = Vec::new();
    let mut protos: Vec<Vec<f64>> = Vec::new();
    let mut report = EvalReport::default();
    for (t, task) in stream.tasks.iter().enumerate() {
        for &c in &task.new_class_ids {
            let feats: Vec<&[f64]> = task
                .train
                .iter()
                .filter(|r| r.class_id == c)
                .map(|r| r.vector.as_slice())
                .collect();
            protos.push(init_prototype(c, &feats)?);
            ids.push(c);
        }
        if ids.is_empty() {
            return Err(Error::NoClasses);
        }
        let mut groups: Vec<TaskPredictions> = Vec::with_capacity(t + 1);
        for prev in &stream.tasks[..=t] {
            let mut g = Vec::with_capacity(prev.test.len());
            for r in &prev.test {
                let mut best = 0usize;
                let mut best_s = f64::NEG_INFINITY;
                for (k, p) in protos.iter().enumerate() {
                    let s = cosine_sim(&r.vector, p)?;
                    if s > best_s || (s == best_s && ids[k] < ids[best]) {
                        best = k;
                        best_s = s;
                    }
                }
                g.push((ids[best], r.class_id));
            }
            groups.push(g);
        }
        let acc = gen_avg_accuracy(&groups, t + 1)?;
        report.push(TrajectoryPoint {
            task: t,
            n_test: groups.iter().map(Vec::len).sum(),
            aggregated: acc,
            vision: Some(acc),
            text: None,
        });
    }
    Ok(report)
}
