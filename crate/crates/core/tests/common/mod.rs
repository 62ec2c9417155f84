#![allow(clippy::needless_range_loop)]

//! Random instance builders and independent reference implementations.
//!
//! The oracles below recompute every quantity with plain loops and their own
//! arithmetic; none of them call the library routine they are checking.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ops::Range;

use protps::embedding_io::ClassTokenTable;
use protps::encoders::ToyTextEncoder;
use protps::losses::{
    loss_c1, loss_c2, loss_pp, supcon_variant, total_loss, Gradients, LossBreakdown, LossContext,
    PairLoss,
};
use protps::model::{
    build_text_classifier, select_prompt, Aggregation, Banks, PromptInit, PrototypeInit,
    TextClassifier,
};
use protps::numerics::{fd_check, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = gauss(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, ids: &[u32], d: usize) -> ClassTokenTable {
    let mut t = ClassTokenTable::new();
    for &c in ids {
        t.insert(c, format!("class_{c}"), unit(rng, d));
    }
    t
}

/// One random training example with a partly frozen bank, ready for every loss.
pub struct Instance {
    pub banks: Banks,
    pub enc: ToyTextEncoder,
    pub tokens: ClassTokenTable,
    pub z: Vec<f64>,
    /// Bank index of the ground-truth class.
    pub target: usize,
    pub c1_range: Range<usize>,
    pub tc_ids: Vec<u32>,
    pub tc_rows: Vec<usize>,
    pub sel: usize,
    pub lambda: f64,
    pub tau: f64,
    pub lambda_pp: f64,
}

impl Instance {
    /// `n_classes` classes, the first `n_old` of them frozen by a second expansion.
    pub fn random(seed: u64, d: usize, m: usize, n_classes: usize, n_old: usize) -> Instance {
        let mut r = rng(seed);
        let ids: Vec<u32> = (0..n_classes as u32).map(|i| 10 + 3 * i).collect();
        let tokens = random_tokens(&mut r, &ids, d);
        let enc = ToyTextEncoder::new(d, m, r.random()).unwrap();
        let mut banks = Banks::new(d, m);
        let init = PromptInit::Gaussian { sigma: 0.3 };
        let none = BTreeMap::new();
        banks
            .expand(
                0,
                &ids[..n_old],
                &none,
                &PrototypeInit::Random,
                &init,
                &mut r,
            )
            .unwrap();
        let c1_range = banks
            .expand(
                1,
                &ids[n_old..],
                &none,
                &PrototypeInit::Random,
                &init,
                &mut r,
            )
            .unwrap();
        let target = r.random_range(c1_range.clone());
        // Input near the target prototype so selection is not arbitrary.
        let noise = gauss(&mut r, d);
        let z: Vec<f64> = banks
            .prototype(target)
            .iter()
            .zip(&noise)
            .map(|(p, n)| p + 0.4 * n)
            .collect();
        let (sel, lambda) = select_prompt(&z, &banks.prototypes, c1_range.clone()).unwrap();
        let mut tc_ids: Vec<u32> = c1_range.clone().map(|i| banks.class_ids()[i]).collect();
        tc_ids.extend(&ids[..n_old]);
        let tc_rows = tc_ids.iter().map(|&c| banks.index_of(c).unwrap()).collect();
        Instance {
            tau: r.random_range(0.05..1.0),
            lambda_pp: r.random_range(0.0..3.0),
            banks,
            enc,
            tokens,
            z,
            target,
            c1_range,
            tc_ids,
            tc_rows,
            sel,
            lambda,
        }
    }

    pub fn target_class(&self) -> u32 {
        self.banks.class_ids()[self.target]
    }

    /// Text classifier of `banks` under this instance's (fixed) selection and λ.
    pub fn tc(&self, banks: &Banks) -> TextClassifier {
        build_text_classifier(
            &self.enc,
            banks.prompt(self.sel),
            self.sel,
            self.lambda,
            &self.tc_ids,
            &self.tokens,
        )
        .unwrap()
    }

    pub fn c1(&self, banks: &Banks) -> (f64, Gradients) {
        loss_c1(
            &self.z,
            &banks.prototypes,
            self.target,
            self.c1_range.clone(),
            self.tau,
        )
        .unwrap()
    }

    pub fn c2(&self, banks: &Banks) -> (f64, Gradients) {
        let tc = self.tc(banks);
        loss_c2(
            &self.z,
            &tc,
            self.target_class(),
            self.tau,
            &self.enc,
            &banks.prompts,
        )
        .unwrap()
    }

    pub fn pp(&self, banks: &Banks) -> (f64, Gradients) {
        let tc = self.tc(banks);
        let (l, g, _) = loss_pp(
            &tc,
            &banks.prototypes,
            &self.tc_rows,
            self.target_class(),
            &self.enc,
            &banks.prompts,
        )
        .unwrap();
        (l, g)
    }

    pub fn supcon(&self, banks: &Banks) -> (f64, Gradients) {
        let tc = self.tc(banks);
        let (l, g, _) = supcon_variant(
            &tc,
            &banks.prototypes,
            &self.tc_rows,
            self.target_class(),
            self.tau,
            &self.enc,
            &banks.prompts,
        )
        .unwrap();
        (l, g)
    }

    pub fn total_with(&self, banks: &Banks, pair_loss: PairLoss) -> LossBreakdown {
        let tc = self.tc(banks);
        total_loss(&LossContext {
            z: &self.z,
            banks,
            enc: &self.enc,
            target: self.target,
            c1_range: self.c1_range.clone(),
            tc: &tc,
            tc_bank_rows: &self.tc_rows,
            tau: self.tau,
            lambda_pp: self.lambda_pp,
            pair_loss,
        })
        .unwrap()
    }

    pub fn total(&self, banks: &Banks) -> (f64, Gradients) {
        let b = self.total_with(banks, PairLoss::Pp);
        (b.total, b.grads)
    }
}

/// Worst finite-difference relative error over every trainable prototype row
/// and prompt block. Also fails (returns infinity) if a frozen parameter
/// received a gradient.
pub fn fd_worst<F>(inst: &Instance, f: F) -> f64
where
    F: Fn(&Banks) -> (f64, Gradients),
{
    let (_, grads) = f(&inst.banks);
    let b = &inst.banks;
    for &k in grads.prototypes.keys() {
        if b.prototypes.frozen[k] {
            return f64::INFINITY;
        }
    }
    for &k in grads.prompts.keys() {
        if b.prompts.frozen[k] {
            return f64::INFINITY;
        }
    }
    let d = b.dim();
    let mut worst = 0.0_f64;
    for k in 0..b.len() {
        if !b.prototypes.frozen[k] {
            let zero = vec![0.0; d];
            let g = grads.prototypes.get(&k).unwrap_or(&zero);
            let err = fd_check(
                |x| {
                    let mut bb = b.clone();
                    bb.prototypes.rows.row_mut(k).copy_from_slice(x);
                    f(&bb).0
                },
                b.prototype(k),
                g,
            );
            worst = worst.max(err);
        }
        if !b.prompts.frozen[k] {
            let zero = Mat::zeros(b.prompt_len(), d);
            let g = grads.prompts.get(&k).unwrap_or(&zero);
            let err = fd_check(
                |x| {
                    let mut bb = b.clone();
                    bb.prompts.blocks[k].as_mut_slice().copy_from_slice(x);
                    f(&bb).0
                },
                b.prompt(k).as_slice(),
                g.as_slice(),
            );
            worst = worst.max(err);
        }
    }
    worst
}

// ---- reference implementations ----

pub fn ref_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn ref_cos(a: &[f64], b: &[f64]) -> f64 {
    ref_dot(a, b) / (ref_dot(a, a).sqrt() * ref_dot(b, b).sqrt())
}

/// `−log softmax(logits/τ)[target]` computed directly.
pub fn ref_ce(logits: &[f64], target: usize, tau: f64) -> f64 {
    let mut sum = 0.0;
    for l in logits {
        sum += (l / tau).exp();
    }
    -((logits[target] / tau).exp() / sum).ln()
}

/// Text feature `normalize(W · (scale·Σ_m P_m + t)/(M+1))`.
pub fn ref_text_feature(w: &Mat, prompt: &Mat, scale: f64, token: &[f64]) -> Vec<f64> {
    let d = token.len();
    let m = prompt.rows();
    let mut h = vec![0.0; d];
    for c in 0..d {
        let mut s = 0.0;
        for r in 0..m {
            s += prompt.get(r, c);
        }
        h[c] = (scale * s + token[c]) / (m as f64 + 1.0);
    }
    let mut y = vec![0.0; d];
    for r in 0..d {
        for c in 0..d {
            y[r] += w.get(r, c) * h[c];
        }
    }
    let n = ref_dot(&y, &y).sqrt();
    y.into_iter().map(|v| v / n).collect()
}

/// Double loop over all (text row, prototype row) pairs.
pub fn ref_pp(text: &[Vec<f64>], protos: &[Vec<f64>], i: usize) -> f64 {
    let r = text.len();
    let mut neg = 0.0;
    for j in 0..r {
        for k in 0..r {
            if j == i && k == i {
                continue;
            }
            neg += ref_cos(&text[j], &protos[k]);
        }
    }
    let positive = 1.0 - ref_cos(&text[i], &protos[i]);
    if r == 1 {
        positive
    } else {
        positive + neg / (r * r - 1) as f64
    }
}

pub fn ref_supcon(text: &[Vec<f64>], protos: &[Vec<f64>], i: usize, tau: f64) -> f64 {
    let r = text.len();
    let mut denom = 0.0;
    for j in 0..r {
        for k in 0..r {
            if j == i && k == i {
                continue;
            }
            denom += (ref_cos(&protos[j], &text[k]) / tau).exp();
        }
    }
    let pos = (ref_cos(&protos[i], &text[i]) / tau).exp();
    -(pos / denom).ln()
}

/// Prediction re-derived with explicit loops over classes and both classifiers.
pub fn ref_predict(
    z: &[f64],
    banks: &Banks,
    enc: &ToyTextEncoder,
    tokens: &ClassTokenTable,
    mode: &str,
    aggregation: Aggregation,
) -> u32 {
    let c = banks.len();
    let ids = banks.class_ids();
    let vision: Vec<f64> = (0..c).map(|k| ref_cos(z, banks.prototype(k))).collect();
    let mut sel = 0;
    for k in 1..c {
        if vision[k] > vision[sel] {
            sel = k;
        }
    }
    let lambda = vision[sel];
    let text: Vec<f64> = (0..c)
        .map(|k| {
            let t = ref_text_feature(
                enc.weights(),
                banks.prompt(sel),
                lambda,
                tokens.token(ids[k]).unwrap(),
            );
            ref_cos(z, &t)
        })
        .collect();
    let scores: Vec<f64> = match mode {
        "vision" => vision,
        "text" => text,
        _ => (0..c)
            .map(|k| match aggregation {
                Aggregation::Average => (vision[k] + text[k]) / 2.0,
                Aggregation::Max => vision[k].max(text[k]),
            })
            .collect(),
    };
    let mut best = 0;
    for k in 1..c {
        if scores[k] > scores[best] || (scores[k] == scores[best] && ids[k] < ids[best]) {
            best = k;
        }
    }
    ids[best]
}

/// Correct over total, counted by hand.
pub fn ref_accuracy(groups: &[Vec<(u32, u32)>], t: usize) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for g in groups.iter().take(t) {
        for &(p, y) in g {
            total += 1;
            if p == y {
                correct += 1;
            }
        }
    }
    correct as f64 / total as f64
}

/// Random banks with trained-looking prompts over `ids`.
pub fn random_banks(r: &mut ChaCha8Rng, ids: &[u32], d: usize, m: usize) -> Banks {
    let mut banks = Banks::new(d, m);
    banks
        .expand(
            0,
            ids,
            &BTreeMap::new(),
            &PrototypeInit::Random,
            &PromptInit::Gaussian { sigma: 0.5 },
            r,
        )
        .unwrap();
    banks
}
