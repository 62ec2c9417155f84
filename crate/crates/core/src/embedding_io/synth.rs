//! Seeded synthetic task streams.
//!
//! Class means are uniform on the unit sphere; a sample is
//! `normalize(mean + domain_offset + noise)` with per-coordinate Gaussian
//! noise of standard deviation `noise_scale`. Every task is written under
//! its own `domain_id` (the task index), so a stream survives a round trip
//! through the flat file format.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassTokenTable, EmbeddingRecord, Split, Task, TaskStream};
use crate::error::{Error, Result};
use crate::numerics::{axpy, unit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    /// Class-incremental: disjoint classes, balanced counts.
    #[default]
    Ci,
    /// Cross-dataset: `num_tasks` tasks of dataset A followed by `num_tasks`
    /// tasks of a geometrically related dataset B with its own class ids.
    Cdc,
    /// Class-and-domain incremental: long-tailed counts, recurring classes
    /// under fresh domain offsets.
    Cdi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub d: usize,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Train samples per class; the head-class count under a long tail.
    pub samples_per_class: usize,
    /// Ratio of the largest to the smallest per-class train count (CDI only).
    pub imbalance_factor: f64,
    /// Norm of the additive per-task domain offset (CDI and dataset B of CDC).
    pub domain_shift_scale: f64,
    /// Per-coordinate standard deviation of the sample noise.
    pub noise_scale: f64,
    pub test_per_class_per_domain: usize,
    /// Fraction of previously seen classes that reappear in each later CDI task.
    pub recur_fraction: f64,
    /// Per-coordinate jitter applied to dataset A's class means to form dataset B (CDC).
    pub cdc_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 16,
            num_tasks: 5,
            classes_per_task: 4,
            samples_per_class: 200,
            imbalance_factor: 1.0,
            domain_shift_scale: 0.0,
            noise_scale: 0.05,
            test_per_class_per_domain: 10,
            recur_fraction: 0.5,
            cdc_jitter: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("num_tasks", self.num_tasks),
            ("classes_per_task", self.classes_per_task),
            ("samples_per_class", self.samples_per_class),
            ("test_per_class_per_domain", self.test_per_class_per_domain),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.imbalance_factor >= 1.0) {
            return Err(Error::Config(format!(
                "imbalance_factor must be >= 1, got {}",
                self.imbalance_factor
            )));
        }
        for (name, v) in [
            ("domain_shift_scale", self.domain_shift_scale),
            ("noise_scale", self.noise_scale),
            ("cdc_jitter", self.cdc_jitter),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.recur_fraction) {
            return Err(Error::Config("recur_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Long-tail train counts `round(n_max · IF^(−c/(C−1)))` for class index
    /// `c` of `C`.
    pub fn long_tail_counts(&self, num_classes: usize) -> Result<Vec<usize>> {
        let n_max = self.samples_per_class as f64;
        let counts: Vec<usize> = (0..num_classes)
            .map(|c| {
                if num_classes == 1 {
                    return self.samples_per_class;
                }
                let exp = -(c as f64) / (num_classes as f64 - 1.0);
                (n_max * self.imbalance_factor.powf(exp)).round() as usize
            })
            .collect();
        if counts.contains(&0) {
            return Err(Error::Config(format!(
                "samples_per_class {} with imbalance_factor {} leaves a class with zero samples",
                self.samples_per_class, self.imbalance_factor
            )));
        }
        Ok(counts)
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok((u, _)) = unit(&v) {
            return u;
        }
    }
}

struct Sampler<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn draw(&mut self, mean: &[f64], offset: &[f64]) -> Vec<f64> {
        loop {
            let mut v = mean.to_vec();
            axpy(1.0, offset, &mut v);
            for x in &mut v {
                let n: f64 = StandardNormal.sample(&mut self.rng);
                *x += self.cfg.noise_scale * n;
            }
            if let Ok((u, _)) = unit(&v) {
                return u;
            }
        }
    }

    fn offset(&mut self) -> Vec<f64> {
        let d = self.cfg.d;
        if self.cfg.domain_shift_scale == 0.0 {
            return vec![0.0; d];
        }
        random_unit(&mut self.rng, d)
            .into_iter()
            .map(|x| x * self.cfg.domain_shift_scale)
            .collect()
    }

    fn emit(
        &mut self,
        class_id: u32,
        domain: u32,
        mean: &[f64],
        offset: &[f64],
        n_train: usize,
        train: &mut Vec<EmbeddingRecord>,
        test: &mut Vec<EmbeddingRecord>,
    ) {
        for _ in 0..n_train {
            train.push(EmbeddingRecord {
                class_id,
                domain_id: domain,
                split: Split::Train,
                vector: self.draw(mean, offset),
            });
        }
        for _ in 0..self.cfg.test_per_class_per_domain {
            test.push(EmbeddingRecord {
                class_id,
                domain_id: domain,
                split: Split::Test,
                vector: self.draw(mean, offset),
            });
        }
    }
}

/// Generates a seeded task stream. Identical configs give identical streams.
pub fn gen_synthetic(cfg: &SynthConfig, mode: StreamMode) -> Result<TaskStream> {
    cfg.validate()?;
    let d = cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_tasks = match mode {
        StreamMode::Cdc => cfg.num_tasks * 2,
        _ => cfg.num_tasks,
    };
    let n_classes = cfg.num_tasks * cfg.classes_per_task;
    let total_classes = match mode {
        StreamMode::Cdc => n_classes * 2,
        _ => n_classes,
    };

    let mut means: Vec<Vec<f64>> = (0..n_classes).map(|_| random_unit(&mut rng, d)).collect();
    if mode == StreamMode::Cdc {
        let related: Vec<Vec<f64>> = means
            .iter()
            .map(|m| loop {
                let v: Vec<f64> = m
                    .iter()
                    .map(|&x| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        x + cfg.cdc_jitter * n
                    })
                    .collect();
                if let Ok((u, _)) = unit(&v) {
                    break u;
                }
            })
            .collect();
        means.extend(related);
    }

    let mut tokens = ClassTokenTable::new();
    for c in 0..total_classes {
        tokens.insert(c as u32, format!("class_{c:03}"), random_unit(&mut rng, d));
    }

    let counts = match mode {
        StreamMode::Cdi => cfg.long_tail_counts(n_classes)?,
        _ => vec![cfg.samples_per_class; total_classes],
    };

    let mut sampler = Sampler {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0ff5_e7c1_a55e),
    };
    let zero = vec![0.0; d];
    // dataset B of a CDC stream shares one shift
    let cdc_offset = match mode {
        StreamMode::Cdc => sampler.offset(),
        _ => zero.clone(),
    };
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let first_class = t * cfg.classes_per_task;
        let new_ids: Vec<u32> = (first_class..first_class + cfg.classes_per_task)
            .map(|c| c as u32)
            .collect();

        let mut recurring: Vec<u32> = Vec::new();
        if mode == StreamMode::Cdi && t > 0 {
            let n_prev = first_class;
            let k = ((cfg.recur_fraction * n_prev as f64).round() as usize).min(n_prev);
            let mut picked: Vec<usize> = sample(&mut rng, n_prev, k).into_vec();
            picked.sort_unstable();
            recurring = picked.into_iter().map(|c| c as u32).collect();
        }

        let offset = match mode {
            StreamMode::Cdi => sampler.offset(),
            StreamMode::Cdc if t >= cfg.num_tasks => cdc_offset.clone(),
            _ => zero.clone(),
        };

        let domain = t as u32;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in new_ids.iter().chain(&recurring) {
            let ci = c as usize;
            sampler.emit(
                c, domain, &means[ci], &offset, counts[ci], &mut train, &mut test,
            );
        }
        let mut class_ids: Vec<u32> = new_ids.iter().chain(&recurring).copied().collect();
        class_ids.sort_unstable();
        tasks.push(Task {
            task_id: t,
            new_class_ids: new_ids,
            class_ids,
            domain_ids: vec![domain],
            train,
            test,
        });
    }

    Ok(TaskStream { d, tasks, tokens })
}
