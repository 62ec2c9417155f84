//! Training objective: the two classification losses, the prompt-prototype
//! contrastive loss (or its SupCon-style replacement), and their weighted
//! sum, each with analytic gradients on trainable prototypes and prompts.
//!
//! Gradients are reported only for parameters whose frozen flag is false.
//! λ from prompt selection is a constant here: no gradient flows through it.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encoders::ToyTextEncoder;
use crate::error::{Error, Result};
use crate::model::{Banks, PromptBank, PrototypeBank, TextClassifier};
use crate::numerics::{axpy, cosine_sim_grad, masked_softmax_ce, Mat};

/// Default weight of the prompt-prototype term.
pub const DEFAULT_LAMBDA_PP: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PairLoss {
    /// Positive cosine distance plus mean negative similarity.
    #[default]
    Pp,
    /// Single-positive SupCon form.
    Supcon,
}

/// Gradients keyed by bank index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub prototypes: BTreeMap<usize, Vec<f64>>,
    /// Full `M × d` gradient per prompt block.
    pub prompts: BTreeMap<usize, Mat>,
}

impl Gradients {
    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty() && self.prompts.is_empty()
    }

    fn add_prototype(&mut self, idx: usize, g: &[f64]) {
        let e = self
            .prototypes
            .entry(idx)
            .or_insert_with(|| vec![0.0; g.len()]);
        axpy(1.0, g, e);
    }

    fn add_prompt_token_grad(&mut self, idx: usize, prompt_len: usize, g_token: &[f64]) {
        let d = g_token.len();
        let e = self
            .prompts
            .entry(idx)
            .or_insert_with(|| Mat::zeros(prompt_len, d));
        for m in 0..prompt_len {
            axpy(1.0, g_token, e.row_mut(m));
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        for (&i, g) in &other.prototypes {
            let e = self
                .prototypes
                .entry(i)
                .or_insert_with(|| vec![0.0; g.len()]);
            axpy(alpha, g, e);
        }
        for (&i, g) in &other.prompts {
            let e = self
                .prompts
                .entry(i)
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            axpy(alpha, g.as_slice(), e.as_mut_slice());
        }
    }
}

/// Per-example loss values and merged gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub c1: f64,
    pub c2: f64,
    pub pp: f64,
    pub total: f64,
    pub grads: Gradients,
    /// True when the pair term had no negative pairs and fell back to the
    /// positive term alone.
    pub pp_degenerate: bool,
}

fn prompt_grads_from_rows(
    enc: &ToyTextEncoder,
    tc: &TextClassifier,
    prompts: &PromptBank,
    row_grads: &[Vec<f64>],
    out: &mut Gradients,
) {
    let mut per_prompt: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (r, g) in row_grads.iter().enumerate() {
        let src = tc.prompt_source[r];
        if prompts.frozen[src] {
            continue;
        }
        let acc = per_prompt
            .entry(src)
            .or_insert_with(|| vec![0.0; enc.dim()]);
        if g.iter().any(|&x| x != 0.0) {
            axpy(1.0, &enc.prompt_vjp(&tc.encodings[r], g), acc);
        }
    }
    for (src, g_tok) in per_prompt {
        out.add_prompt_token_grad(src, enc.prompt_len(), &g_tok);
    }
}

/// Cross-entropy of the vision classifier restricted to `range`.
pub fn loss_c1(
    z: &[f64],
    bank: &PrototypeBank,
    target: usize,
    range: Range<usize>,
    tau: f64,
) -> Result<(f64, Gradients)> {
    if !range.contains(&target) || range.end > bank.rows.rows() {
        return Err(Error::Index(format!(
            "target {target} / range {range:?} invalid for {} prototypes",
            bank.rows.rows()
        )));
    }
    let mut logits = Vec::with_capacity(range.len());
    let mut dlogit = Vec::with_capacity(range.len());
    for k in range.clone() {
        let (c, _, g_proto) = cosine_sim_grad(z, bank.rows.row(k))?;
        logits.push(c);
        dlogit.push(g_proto);
    }
    let local = target - range.start;
    let (loss, g_logits) = masked_softmax_ce(&logits, local, 0, logits.len() - 1, tau)?;
    let mut grads = Gradients::default();
    for (j, k) in range.enumerate() {
        if bank.frozen[k] {
            continue;
        }
        let g: Vec<f64> = dlogit[j].iter().map(|x| x * g_logits[j]).collect();
        grads.add_prototype(k, &g);
    }
    Ok((loss, grads))
}

/// Cross-entropy of the text classifier over all of its rows, with the
/// gradient carried through the encoder onto the prompt(s) that produced its rows.
pub fn loss_c2(
    z: &[f64],
    tc: &TextClassifier,
    target_class: u32,
    tau: f64,
    enc: &ToyTextEncoder,
    prompts: &PromptBank,
) -> Result<(f64, Gradients)> {
    let target = tc.position(target_class).ok_or_else(|| {
        Error::Index(format!(
            "class {target_class} is not in the text classifier"
        ))
    })?;
    let mut logits = Vec::with_capacity(tc.len());
    let mut dlogit_dt = Vec::with_capacity(tc.len());
    for r in 0..tc.len() {
        let (c, _, g_t) = cosine_sim_grad(z, tc.weights.row(r))?;
        logits.push(c);
        dlogit_dt.push(g_t);
    }
    let (loss, g_logits) = masked_softmax_ce(&logits, target, 0, tc.len() - 1, tau)?;
    let row_grads: Vec<Vec<f64>> = dlogit_dt
        .iter()
        .zip(&g_logits)
        .map(|(g, &s)| g.iter().map(|x| x * s).collect())
        .collect();
    let mut grads = Gradients::default();
    prompt_grads_from_rows(enc, tc, prompts, &row_grads, &mut grads);
    Ok((loss, grads))
}

/// Cosine matrix `C[j][k] = ⟨T_j, I_k⟩` over aligned rows, plus gradients
/// of every entry on both operands.
struct PairMatrix {
    sims: Vec<Vec<f64>>,
    d_text: Vec<Vec<Vec<f64>>>,
    d_proto: Vec<Vec<Vec<f64>>>,
}

fn pair_matrix(
    tc: &TextClassifier,
    bank: &PrototypeBank,
    bank_rows: &[usize],
) -> Result<PairMatrix> {
    if bank_rows.len() != tc.len() {
        return Err(Error::Shape(format!(
            "{} aligned prototypes for {} text rows",
            bank_rows.len(),
            tc.len()
        )));
    }
    let r = tc.len();
    let mut sims = vec![vec![0.0; r]; r];
    let mut d_text = vec![Vec::with_capacity(r); r];
    let mut d_proto = vec![Vec::with_capacity(r); r];
    for j in 0..r {
        for (k, &bk) in bank_rows.iter().enumerate() {
            let (c, gt, gp) = cosine_sim_grad(tc.weights.row(j), bank.rows.row(bk))?;
            sims[j][k] = c;
            d_text[j].push(gt);
            d_proto[j].push(gp);
        }
    }
    Ok(PairMatrix {
        sims,
        d_text,
        d_proto,
    })
}

/// Backpropagates per-entry weights `w[j][k] = ∂L/∂C[j][k]`.
#[allow(clippy::too_many_arguments)]
fn backprop_pairs(
    pm: &PairMatrix,
    weights: &[Vec<f64>],
    tc: &TextClassifier,
    bank: &PrototypeBank,
    bank_rows: &[usize],
    enc: &ToyTextEncoder,
    prompts: &PromptBank,
) -> Gradients {
    let r = tc.len();
    let d = enc.dim();
    let mut grads = Gradients::default();
    let mut row_grads = vec![vec![0.0; d]; r];
    for j in 0..r {
        for (k, &bk) in bank_rows.iter().enumerate() {
            let w = weights[j][k];
            if w == 0.0 {
                continue;
            }
            axpy(w, &pm.d_text[j][k], &mut row_grads[j]);
            if !bank.frozen[bk] {
                let g: Vec<f64> = pm.d_proto[j][k].iter().map(|x| x * w).collect();
                grads.add_prototype(bk, &g);
            }
        }
    }
    prompt_grads_from_rows(enc, tc, prompts, &row_grads, &mut grads);
    grads
}

/// Prompt-prototype contrastive loss over the aligned text/prototype rows.
///
/// `(1 − ⟨T_i, I_i⟩) + (1/N)·Σ_{(j,k) ≠ (i,i)} ⟨T_j, I_k⟩` with `N = R² − 1`.
/// With a single row the negative term is dropped and the returned flag is set.
#[allow(clippy::too_many_arguments)]
pub fn loss_pp(
    tc: &TextClassifier,
    bank: &PrototypeBank,
    bank_rows: &[usize],
    target_class: u32,
    enc: &ToyTextEncoder,
    prompts: &PromptBank,
) -> Result<(f64, Gradients, bool)> {
    let i = tc.position(target_class).ok_or_else(|| {
        Error::Index(format!(
            "class {target_class} is not in the text classifier"
        ))
    })?;
    let pm = pair_matrix(tc, bank, bank_rows)?;
    let r = tc.len();
    let n_neg = r * r - 1;
    let degenerate = n_neg == 0;

    let mut loss = 1.0 - pm.sims[i][i];
    let mut weights = vec![vec![0.0; r]; r];
    weights[i][i] = -1.0;
    if !degenerate {
        let inv_n = 1.0 / n_neg as f64;
        let mut neg_sum = 0.0;
        for j in 0..r {
            for k in 0..r {
                if j != i || k != i {
                    neg_sum += pm.sims[j][k];
                    weights[j][k] = inv_n;
                }
            }
        }
        loss += neg_sum * inv_n;
    }
    let grads = backprop_pairs(&pm, &weights, tc, bank, bank_rows, enc, prompts);
    Ok((loss, grads, degenerate))
}

/// SupCon-style replacement for [`loss_pp`] with a single positive pair:
/// `−log( exp(⟨I_i,T_i⟩/τ) / Σ_{(j,k) ≠ (i,i)} exp(⟨I_j,T_k⟩/τ) )`.
/// With a single row the log-sum term is dropped and the flag is set.
#[allow(clippy::too_many_arguments)]
pub fn supcon_variant(
    tc: &TextClassifier,
    bank: &PrototypeBank,
    bank_rows: &[usize],
    target_class: u32,
    tau: f64,
    enc: &ToyTextEncoder,
    prompts: &PromptBank,
) -> Result<(f64, Gradients, bool)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let i = tc.position(target_class).ok_or_else(|| {
        Error::Index(format!(
            "class {target_class} is not in the text classifier"
        ))
    })?;
    let pm = pair_matrix(tc, bank, bank_rows)?;
    let r = tc.len();
    let degenerate = r == 1;

    let mut loss = -pm.sims[i][i] / tau;
    let mut weights = vec![vec![0.0; r]; r];
    weights[i][i] = -1.0 / tau;
    if !degenerate {
        let max = (0..r)
            .flat_map(|j| (0..r).map(move |k| (j, k)))
            .filter(|&(j, k)| j != i || k != i)
            .map(|(j, k)| pm.sims[j][k])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..r {
            for k in 0..r {
                if j != i || k != i {
                    let e = ((pm.sims[j][k] - max) / tau).exp();
                    weights[j][k] = e;
                    sum += e;
                }
            }
        }
        loss += sum.ln() + max / tau;
        for j in 0..r {
            for k in 0..r {
                if j != i || k != i {
                    weights[j][k] /= sum * tau;
                }
            }
        }
    }
    let grads = backprop_pairs(&pm, &weights, tc, bank, bank_rows, enc, prompts);
    Ok((loss, grads, degenerate))
}

/// Everything needed to evaluate the full objective for one example.
#[derive(Debug, Clone)]
pub struct LossContext<'a> {
    pub z: &'a [f64],
    pub banks: &'a Banks,
    pub enc: &'a ToyTextEncoder,
    /// Bank index of the ground-truth class.
    pub target: usize,
    /// Prototype range of the vision cross-entropy. When the target lies
    /// outside it (a recurring class), the vision term is skipped.
    pub c1_range: Range<usize>,
    pub tc: &'a TextClassifier,
    /// Bank index of the prototype aligned with each text-classifier row.
    pub tc_bank_rows: &'a [usize],
    pub tau: f64,
    pub lambda_pp: f64,
    pub pair_loss: PairLoss,
}

/// Weighted objective `c1 + c2 + λ_pp·pp` with merged gradients.
pub fn total_loss(ctx: &LossContext<'_>) -> Result<LossBreakdown> {
    let banks = ctx.banks;
    let target_class = *banks
        .class_ids()
        .get(ctx.target)
        .ok_or_else(|| Error::Index(format!("target index {} out of bounds", ctx.target)))?;

    let mut grads = Gradients::default();
    let c1 = if ctx.c1_range.contains(&ctx.target) {
        let (l, g) = loss_c1(
            ctx.z,
            &banks.prototypes,
            ctx.target,
            ctx.c1_range.clone(),
            ctx.tau,
        )?;
        grads.add_scaled(1.0, &g);
        l
    } else {
        0.0
    };

    let (c2, g2) = loss_c2(
        ctx.z,
        ctx.tc,
        target_class,
        ctx.tau,
        ctx.enc,
        &banks.prompts,
    )?;
    grads.add_scaled(1.0, &g2);

    let (pp, gpp, pp_degenerate) = match ctx.pair_loss {
        PairLoss::Pp => loss_pp(
            ctx.tc,
            &banks.prototypes,
            ctx.tc_bank_rows,
            target_class,
            ctx.enc,
            &banks.prompts,
        )?,
        PairLoss::Supcon => supcon_variant(
            ctx.tc,
            &banks.prototypes,
            ctx.tc_bank_rows,
            target_class,
            ctx.tau,
            ctx.enc,
            &banks.prompts,
        )?,
    };
    if ctx.lambda_pp != 0.0 {
        grads.add_scaled(ctx.lambda_pp, &gpp);
    }

    Ok(LossBreakdown {
        c1,
        c2,
        pp,
        total: c1 + c2 + ctx.lambda_pp * pp,
        grads,
        pp_degenerate,
    })
}
