//! Inference and metrics.
//!
//! [`Predictor`] caches `W·t_k` for every class token and `W·ΣP_k` for every
//! prompt, so a text row for any (prompt, λ, class) triple costs O(d):
//! `T = normalize((λ·WΣP + W t)/(M+1))`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Selection;
use crate::embedding_io::{ClassTokenTable, EmbeddingRecord};
use crate::encoders::ToyTextEncoder;
use crate::error::{Error, Result};
use crate::model::{aggregate_scores, select_prompt, Aggregation, Banks};
use crate::numerics::{cosine_sim, dot, norm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    Aggregated,
    Vision,
    Text,
}

/// Inference-time knobs shared with training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub aggregation: Aggregation,
    pub selection: Selection,
    pub clamp_lambda: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Average,
            selection: Selection::WeightTop1,
            clamp_lambda: false,
        }
    }
}

impl From<&crate::config::TrainConfig> for InferenceConfig {
    fn from(c: &crate::config::TrainConfig) -> Self {
        Self {
            aggregation: c.aggregation,
            selection: c.selection,
            clamp_lambda: c.clamp_lambda,
        }
    }
}

/// Predicted class id under each mode for one input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Predictions {
    pub aggregated: u32,
    pub vision: u32,
    pub text: u32,
}

impl Predictions {
    pub fn get(&self, mode: PredictMode) -> u32 {
        match mode {
            PredictMode::Aggregated => self.aggregated,
            PredictMode::Vision => self.vision,
            PredictMode::Text => self.text,
        }
    }
}

/// Read-only inference over a bank snapshot.
pub struct Predictor<'a> {
    banks: &'a Banks,
    cfg: InferenceConfig,
    denom: f64,
    /// `W t_k` per bank class.
    token_proj: Vec<Vec<f64>>,
    /// `W ΣP_k` per bank prompt.
    prompt_proj: Vec<Vec<f64>>,
}

/// Index of the largest score; ties go to the smallest class id.
fn argmax_by_class(scores: &[f64], class_ids: &[u32]) -> u32 {
    let mut best = 0;
    for k in 1..scores.len() {
        if scores[k] > scores[best] || (scores[k] == scores[best] && class_ids[k] < class_ids[best])
        {
            best = k;
        }
    }
    class_ids[best]
}

impl<'a> Predictor<'a> {
    pub fn new(
        banks: &'a Banks,
        enc: &ToyTextEncoder,
        tokens: &ClassTokenTable,
        cfg: InferenceConfig,
    ) -> Result<Self> {
        if banks.is_empty() {
            return Err(Error::NoClasses);
        }
        let w = enc.weights();
        let token_proj = banks
            .class_ids()
            .iter()
            .map(|&c| tokens.token(c).map(|t| w.matvec(t)))
            .collect::<Result<Vec<_>>>()?;
        let prompt_proj = (0..banks.len())
            .map(|k| enc.pool_prompt(banks.prompt(k)).map(|s| w.matvec(&s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            banks,
            cfg,
            denom: (enc.prompt_len() + 1) as f64,
            token_proj,
            prompt_proj,
        })
    }

    pub fn vision_scores(&self, z: &[f64]) -> Result<Vec<f64>> {
        (0..self.banks.len())
            .map(|k| cosine_sim(z, self.banks.prototype(k)))
            .collect()
    }

    fn text_score(
        &self,
        z: &[f64],
        z_norm: f64,
        prompt: usize,
        scale: f64,
        class: usize,
    ) -> Result<f64> {
        let y: Vec<f64> = self.prompt_proj[prompt]
            .iter()
            .zip(&self.token_proj[class])
            .map(|(p, t)| (scale * p + t) / self.denom)
            .collect();
        let n = norm(&y);
        if !(n > crate::numerics::MIN_NORM) {
            return Err(Error::ZeroNorm { norm: n });
        }
        Ok(dot(z, &y) / (z_norm * n))
    }

    pub fn text_scores(&self, z: &[f64]) -> Result<Vec<f64>> {
        let z_norm = norm(z);
        if z_norm == 0.0 {
            return Err(Error::ZeroNorm { norm: 0.0 });
        }
        match self.cfg.selection {
            Selection::WeightTop1 => {
                let (sel, mut lambda) =
                    select_prompt(z, &self.banks.prototypes, 0..self.banks.len())?;
                if self.cfg.clamp_lambda {
                    lambda = lambda.clamp(0.0, 1.0);
                }
                (0..self.banks.len())
                    .map(|k| self.text_score(z, z_norm, sel, lambda, k))
                    .collect()
            }
            Selection::None => (0..self.banks.len())
                .map(|k| self.text_score(z, z_norm, k, 1.0, k))
                .collect(),
        }
    }

    pub fn predict_all(&self, z: &[f64]) -> Result<Predictions> {
        let ids = self.banks.class_ids();
        let v = self.vision_scores(z)?;
        let t = self.text_scores(z)?;
        let a = aggregate_scores(&v, &t, self.cfg.aggregation)?;
        Ok(Predictions {
            aggregated: argmax_by_class(&a, ids),
            vision: argmax_by_class(&v, ids),
            text: argmax_by_class(&t, ids),
        })
    }

    pub fn predict(&self, z: &[f64], mode: PredictMode) -> Result<u32> {
        let ids = self.banks.class_ids();
        match mode {
            PredictMode::Vision => Ok(argmax_by_class(&self.vision_scores(z)?, ids)),
            PredictMode::Text => Ok(argmax_by_class(&self.text_scores(z)?, ids)),
            PredictMode::Aggregated => Ok(self.predict_all(z)?.aggregated),
        }
    }
}

/// One-shot prediction; builds a [`Predictor`] internally.
pub fn predict(
    z: &[f64],
    banks: &Banks,
    enc: &ToyTextEncoder,
    tokens: &ClassTokenTable,
    mode: PredictMode,
    cfg: InferenceConfig,
) -> Result<u32> {
    Predictor::new(banks, enc, tokens, cfg)?.predict(z, mode)
}

/// `(predicted, truth)` pairs of one source task.
pub type TaskPredictions = Vec<(u32, u32)>;

/// Correct predictions over tasks `1..=t` divided by their test count.
pub fn gen_avg_accuracy(groups: &[TaskPredictions], t: usize) -> Result<f64> {
    let upto = &groups[..t.min(groups.len())];
    let total: usize = upto.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyEval);
    }
    let correct: usize = upto
        .iter()
        .flat_map(|g| g.iter())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / total as f64)
}

/// Accuracy after sequential training minus standalone accuracy.
pub fn forward_transfer(acc_after_transfer: f64, acc_standalone: f64) -> f64 {
    acc_after_transfer - acc_standalone
}

/// Pairwise cosine similarities of all prototypes.
pub fn prototype_similarity_matrix(banks: &Banks) -> Result<Mat> {
    let c = banks.len();
    let mut m = Mat::zeros(c, c);
    for i in 0..c {
        m.set(i, i, 1.0);
        for j in (i + 1)..c {
            let s = cosine_sim(banks.prototype(i), banks.prototype(j))?;
            m.set(i, j, s);
            m.set(j, i, s);
        }
    }
    Ok(m)
}

pub fn write_similarity_csv(banks: &Banks, path: impl AsRef<Path>) -> Result<()> {
    let m = prototype_similarity_matrix(banks)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = banks.class_ids().iter().map(|c| c.to_string()).collect();
    writeln!(out, "class,{}", header.join(","))?;
    for (i, row) in m.iter_rows().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{},{}", banks.class_ids()[i], vals.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub task: usize,
    /// Test records of tasks `1..=task`.
    pub n_test: usize,
    pub aggregated: f64,
    pub vision: Option<f64>,
    pub text: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trajectory: Vec<TrajectoryPoint>,
    pub last_accuracy: f64,
    pub forward_transfer: Option<f64>,
}

impl EvalReport {
    pub fn push(&mut self, point: TrajectoryPoint) {
        self.last_accuracy = point.aggregated;
        self.trajectory.push(point);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,n_test,aggregated,vision,text\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for p in &self.trajectory {
            s.push_str(&format!(
                "{},{},{:.6},{},{}\n",
                p.task + 1,
                p.n_test,
                p.aggregated,
                opt(p.vision),
                opt(p.text)
            ));
        }
        s
    }
}

/// Evaluates every mode over test groups, one group per source task.
pub fn evaluate_groups(
    predictor: &Predictor<'_>,
    groups: &[&[EmbeddingRecord]],
) -> Result<[Vec<TaskPredictions>; 3]> {
    use rayon::prelude::*;
    let mut out: [Vec<TaskPredictions>; 3] = Default::default();
    for g in groups {
        let preds: Vec<Result<(Predictions, u32)>> = g
            .par_iter()
            .map(|r| predictor.predict_all(&r.vector).map(|p| (p, r.class_id)))
            .collect();
        let mut per_mode: [TaskPredictions; 3] = Default::default();
        for res in preds {
            let (p, y) = res?;
            per_mode[0].push((p.aggregated, y));
            per_mode[1].push((p.vision, y));
            per_mode[2].push((p.text, y));
        }
        for (o, m) in out.iter_mut().zip(per_mode) {
            o.push(m);
        }
    }
    Ok(out)
}

/// Scores the banks on test groups `1..=groups.len()` under every mode.
pub fn trajectory_point(
    banks: &Banks,
    enc: &ToyTextEncoder,
    tokens: &ClassTokenTable,
    cfg: InferenceConfig,
    task: usize,
    groups: &[&[EmbeddingRecord]],
) -> Result<TrajectoryPoint> {
    let predictor = Predictor::new(banks, enc, tokens, cfg)?;
    let [agg, vis, txt] = evaluate_groups(&predictor, groups)?;
    let n = groups.len();
    Ok(TrajectoryPoint {
        task,
        n_test: groups.iter().map(|g| g.len()).sum(),
        aggregated: gen_avg_accuracy(&agg, n)?,
        vision: Some(gen_avg_accuracy(&vis, n)?),
        text: Some(gen_avg_accuracy(&txt, n)?),
    })
}
