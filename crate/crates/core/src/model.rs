//! Model state: the prototype bank (vision classifier), the prompt bank, and
//! the structural operations on them.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding_io::ClassTokenTable;
use crate::encoders::{TextEncoding, ToyTextEncoder};
use crate::error::{Error, Result};
use crate::numerics::{axpy, cosine_sim, norm, unit, Mat};

/// Default standard deviation of freshly initialized prompt tokens.
pub const PROMPT_INIT_SIGMA: f64 = 0.02;

/// Per-class prototype rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub rows: Mat,
    pub frozen: Vec<bool>,
    pub task_of: Vec<usize>,
}

/// Per-class `M × d` prompt blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub blocks: Vec<Mat>,
    pub frozen: Vec<bool>,
    pub task_of: Vec<usize>,
}

/// Prototype and prompt banks, aligned by class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Banks {
    d: usize,
    prompt_len: usize,
    class_ids: Vec<u32>,
    index: BTreeMap<u32, usize>,
    pub prototypes: PrototypeBank,
    pub prompts: PromptBank,
}

/// Text classifier: one encoded row per class id.
///
/// Under prompt selection every row shares the selected, λ-scaled prompt;
/// `prompt_source` records which bank prompt produced each row so gradients
/// can be routed back to it.
#[derive(Debug, Clone, PartialEq)]
pub struct TextClassifier {
    pub weights: Mat,
    pub class_ids: Vec<u32>,
    pub encodings: Vec<TextEncoding>,
    pub prompt_source: Vec<usize>,
}

impl TextClassifier {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn position(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Average,
    Max,
}

#[derive(Debug, Clone)]
pub enum PrototypeInit {
    /// Normalized mean of the class's training features.
    ClassMean,
    /// Seeded random unit vector; learning starts from nothing.
    Random,
}

#[derive(Debug, Clone)]
pub enum PromptInit {
    Gaussian {
        sigma: f64,
    },
    /// One block per new class, in the order of the new ids.
    Blocks(Vec<Mat>),
}

impl Default for PromptInit {
    fn default() -> Self {
        PromptInit::Gaussian {
            sigma: PROMPT_INIT_SIGMA,
        }
    }
}

impl Banks {
    pub fn new(d: usize, prompt_len: usize) -> Self {
        Self {
            d,
            prompt_len,
            class_ids: Vec::new(),
            index: BTreeMap::new(),
            prototypes: PrototypeBank {
                rows: Mat::zeros(0, d),
                frozen: Vec::new(),
                task_of: Vec::new(),
            },
            prompts: PromptBank {
                blocks: Vec::new(),
                frozen: Vec::new(),
                task_of: Vec::new(),
            },
        }
    }

    /// Reassembles banks from raw parts, checking that everything lines up.
    pub fn from_parts(
        d: usize,
        prompt_len: usize,
        class_ids: Vec<u32>,
        prototypes: PrototypeBank,
        prompts: PromptBank,
    ) -> Result<Self> {
        let n = class_ids.len();
        let aligned = prototypes.rows.rows() == n
            && (n == 0 || prototypes.rows.cols() == d)
            && prototypes.frozen.len() == n
            && prototypes.task_of.len() == n
            && prompts.blocks.len() == n
            && prompts.frozen.len() == n
            && prompts.task_of.len() == n
            && prompts
                .blocks
                .iter()
                .all(|b| b.rows() == prompt_len && b.cols() == d);
        if !aligned {
            return Err(Error::Shape("bank parts are not aligned".into()));
        }
        let mut index = BTreeMap::new();
        for (i, &c) in class_ids.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::DuplicateClass(c));
            }
        }
        Ok(Self {
            d,
            prompt_len,
            class_ids,
            index,
            prototypes,
            prompts,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Class ids in insertion (index) order.
    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn index_of(&self, class_id: u32) -> Option<usize> {
        self.index.get(&class_id).copied()
    }

    pub fn prototype(&self, idx: usize) -> &[f64] {
        self.prototypes.rows.row(idx)
    }

    pub fn prompt(&self, idx: usize) -> &Mat {
        &self.prompts.blocks[idx]
    }

    /// Indices of classes added by `task_id`.
    pub fn task_range(&self, task_id: usize) -> std::ops::Range<usize> {
        let start = self.prototypes.task_of.partition_point(|&t| t < task_id);
        let end = self.prototypes.task_of.partition_point(|&t| t <= task_id);
        start..end
    }

    /// Copy holding only the classes in `range`.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Banks {
        let mut proto_rows = Mat::zeros(0, self.d);
        for i in range.clone() {
            proto_rows
                .push_row(self.prototype(i))
                .expect("rows share the bank dimension");
        }
        Banks::from_parts(
            self.d,
            self.prompt_len,
            self.class_ids[range.clone()].to_vec(),
            PrototypeBank {
                rows: proto_rows,
                frozen: self.prototypes.frozen[range.clone()].to_vec(),
                task_of: self.prototypes.task_of[range.clone()].to_vec(),
            },
            PromptBank {
                blocks: self.prompts.blocks[range.clone()].to_vec(),
                frozen: self.prompts.frozen[range.clone()].to_vec(),
                task_of: self.prompts.task_of[range].to_vec(),
            },
        )
        .expect("a slice of an aligned bank is aligned")
    }

    pub fn freeze_all(&mut self) {
        self.prototypes.frozen.iter_mut().for_each(|f| *f = true);
        self.prompts.frozen.iter_mut().for_each(|f| *f = true);
    }

    /// Freezes every existing row, then appends one prototype and one prompt
    /// per new class. Returns the index range of the new classes.
    pub fn expand<R: Rng + ?Sized>(
        &mut self,
        task_id: usize,
        new_class_ids: &[u32],
        features: &BTreeMap<u32, Vec<&[f64]>>,
        prototype_init: &PrototypeInit,
        prompt_init: &PromptInit,
        rng: &mut R,
    ) -> Result<std::ops::Range<usize>> {
        if let Some(&last) = self.prototypes.task_of.last() {
            if task_id < last {
                return Err(Error::Config(format!(
                    "cannot expand for task {task_id} after task {last}"
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for &c in new_class_ids {
            if self.index.contains_key(&c) || !seen.insert(c) {
                return Err(Error::DuplicateClass(c));
            }
        }
        if let PromptInit::Blocks(blocks) = prompt_init {
            if blocks.len() != new_class_ids.len() {
                return Err(Error::Shape(format!(
                    "{} prompt blocks for {} new classes",
                    blocks.len(),
                    new_class_ids.len()
                )));
            }
        }

        // compute everything before mutating so a failure leaves banks intact
        let mut new_rows = Vec::with_capacity(new_class_ids.len());
        for &c in new_class_ids {
            let row = match prototype_init {
                PrototypeInit::ClassMean => {
                    let feats = features.get(&c).map(Vec::as_slice).unwrap_or(&[]);
                    init_prototype(c, feats)?
                }
                PrototypeInit::Random => random_unit(rng, self.d),
            };
            if row.len() != self.d {
                return Err(Error::Shape(format!(
                    "class {c} features have dimension {}, bank has {}",
                    row.len(),
                    self.d
                )));
            }
            new_rows.push(row);
        }
        let mut new_blocks = Vec::with_capacity(new_class_ids.len());
        for k in 0..new_class_ids.len() {
            let block = match prompt_init {
                PromptInit::Gaussian { sigma } => {
                    gaussian_block(rng, self.prompt_len, self.d, *sigma)?
                }
                PromptInit::Blocks(blocks) => {
                    let b = &blocks[k];
                    if b.rows() != self.prompt_len || b.cols() != self.d {
                        return Err(Error::Shape(
                            "transferred prompt block has wrong shape".into(),
                        ));
                    }
                    b.clone()
                }
            };
            new_blocks.push(block);
        }

        self.freeze_all();
        let start = self.len();
        for ((&c, row), block) in new_class_ids.iter().zip(new_rows).zip(new_blocks) {
            self.index.insert(c, self.class_ids.len());
            self.class_ids.push(c);
            self.prototypes.rows.push_row(&row)?;
            self.prototypes.frozen.push(false);
            self.prototypes.task_of.push(task_id);
            self.prompts.blocks.push(block);
            self.prompts.frozen.push(false);
            self.prompts.task_of.push(task_id);
        }
        Ok(start..self.len())
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok((u, _)) = unit(&v) {
            return u;
        }
    }
}

fn gaussian_block<R: Rng + ?Sized>(rng: &mut R, m: usize, d: usize, sigma: f64) -> Result<Mat> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::Config(format!("invalid prompt init sigma {sigma}: {e}")))?;
    Mat::from_vec(m, d, (0..m * d).map(|_| normal.sample(rng)).collect())
}

/// Normalized mean of one class's features.
pub fn init_prototype(class_id: u32, features: &[&[f64]]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Config(format!("class {class_id} has no training features")))?;
    let mut mean = vec![0.0; first.len()];
    for f in features {
        if f.len() != mean.len() {
            return Err(Error::Shape(format!(
                "class {class_id} features have mixed dimensions"
            )));
        }
        axpy(1.0, f, &mut mean);
    }
    let n = features.len() as f64;
    mean.iter_mut().for_each(|x| *x /= n);
    let mean_norm = norm(&mean);
    if mean_norm < 1e-9 {
        return Err(Error::DegenerateClass {
            class_id,
            norm: mean_norm,
        });
    }
    Ok(mean.iter().map(|x| x / mean_norm).collect())
}

/// Prototypes for several classes at once, keyed by class id.
pub fn init_prototypes(features: &BTreeMap<u32, Vec<&[f64]>>) -> Result<BTreeMap<u32, Vec<f64>>> {
    features
        .iter()
        .map(|(&c, f)| init_prototype(c, f).map(|p| (c, p)))
        .collect()
}

/// Picks the prototype in `range` most cosine-similar to `z`.
///
/// Returns the winning bank index and its similarity λ; ties go to the
/// lowest index.
pub fn select_prompt(
    z: &[f64],
    bank: &PrototypeBank,
    range: std::ops::Range<usize>,
) -> Result<(usize, f64)> {
    if range.is_empty() || range.end > bank.rows.rows() {
        return Err(Error::Index(format!(
            "selection range {range:?} is empty or outside a bank of {} rows",
            bank.rows.rows()
        )));
    }
    let mut best = (range.start, f64::NEG_INFINITY);
    for k in range {
        let s = cosine_sim(z, bank.rows.row(k))?;
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(best)
}

/// Encodes `prompt` (scaled by `lambda`) with each class's name token.
/// `prompt_index` is the bank index the block came from.
pub fn build_text_classifier(
    enc: &ToyTextEncoder,
    prompt: &Mat,
    prompt_index: usize,
    lambda: f64,
    class_ids: &[u32],
    tokens: &ClassTokenTable,
) -> Result<TextClassifier> {
    if class_ids.is_empty() {
        return Err(Error::Index(
            "text classifier needs at least one class".into(),
        ));
    }
    let mut weights = Mat::zeros(0, enc.dim());
    let mut encodings = Vec::with_capacity(class_ids.len());
    for &c in class_ids {
        let e = enc.encode(prompt, lambda, tokens.token(c)?)?;
        weights.push_row(&e.feature)?;
        encodings.push(e);
    }
    Ok(TextClassifier {
        weights,
        class_ids: class_ids.to_vec(),
        encodings,
        prompt_source: vec![prompt_index; class_ids.len()],
    })
}

/// Uniform sample of `min(s, |previous|)` distinct ids, kept in their
/// original order.
pub fn sample_old_classes<R: Rng + ?Sized>(previous: &[u32], s: usize, rng: &mut R) -> Vec<u32> {
    if s >= previous.len() {
        return previous.to_vec();
    }
    let mut idx = sample(rng, previous.len(), s).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| previous[i]).collect()
}

/// Combines vision and text scores class by class.
pub fn aggregate_scores(vision: &[f64], text: &[f64], mode: Aggregation) -> Result<Vec<f64>> {
    if vision.len() != text.len() {
        return Err(Error::Shape(format!(
            "{} vision scores vs {} text scores",
            vision.len(),
            text.len()
        )));
    }
    Ok(vision
        .iter()
        .zip(text)
        .map(|(&v, &t)| match mode {
            Aggregation::Average => (v + t) / 2.0,
            Aggregation::Max => v.max(t),
        })
        .collect())
}
