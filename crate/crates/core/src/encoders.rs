//! Frozen text encoder stand-in.
//!
//! A prompt block `P` (M × d) scaled by `s` is mean-pooled with a class token
//! and pushed through a fixed orthogonal map:
//! `h = (s·Σ_m P_m + t)/(M+1)`, `T = normalize(W h)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, normalize_vjp, unit, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTextEncoder {
    w: Mat,
    d: usize,
    prompt_len: usize,
    seed: u64,
}

/// Output of [`ToyTextEncoder::encode`]: the unit text feature plus what is
/// needed to backpropagate into the prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    pub feature: Vec<f64>,
    /// `‖W h‖` before normalization.
    pub pre_norm: f64,
    /// `∂h/∂P_m = scale/(M+1)`, identical for every token.
    pub token_gain: f64,
}

impl ToyTextEncoder {
    pub fn new(d: usize, prompt_len: usize, seed: u64) -> Result<Self> {
        if d == 0 || prompt_len == 0 {
            return Err(Error::Config(format!(
                "encoder needs d >= 1 and prompt length >= 1, got d={d}, M={prompt_len}"
            )));
        }
        Ok(Self {
            w: crate::numerics::seeded_orthogonal(d, seed),
            d,
            prompt_len,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &Mat {
        &self.w
    }

    fn check_prompt(&self, prompt: &Mat) -> Result<()> {
        if prompt.rows() != self.prompt_len || prompt.cols() != self.d {
            return Err(Error::Shape(format!(
                "prompt is {}x{}, encoder expects {}x{}",
                prompt.rows(),
                prompt.cols(),
                self.prompt_len,
                self.d
            )));
        }
        Ok(())
    }

    /// Sum of the prompt's token rows.
    pub fn pool_prompt(&self, prompt: &Mat) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        let mut s = vec![0.0; self.d];
        for row in prompt.iter_rows() {
            axpy(1.0, row, &mut s);
        }
        Ok(s)
    }

    pub fn encode(&self, prompt: &Mat, scale: f64, class_token: &[f64]) -> Result<TextEncoding> {
        if class_token.len() != self.d {
            return Err(Error::Shape(format!(
                "class token has dimension {}, encoder expects {}",
                class_token.len(),
                self.d
            )));
        }
        let pooled = self.pool_prompt(prompt)?;
        let denom = (self.prompt_len + 1) as f64;
        let h: Vec<f64> = pooled
            .iter()
            .zip(class_token)
            .map(|(p, t)| (scale * p + t) / denom)
            .collect();
        let (feature, pre_norm) = unit(&self.w.matvec(&h))?;
        Ok(TextEncoding {
            feature,
            pre_norm,
            token_gain: scale / denom,
        })
    }

    /// Jacobian `∂T/∂P_m` (d × d), shared by every token `m`.
    pub fn prompt_jacobian(&self, enc: &TextEncoding) -> Mat {
        let d = self.d;
        let mut proj = Mat::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let id = if i == j { 1.0 } else { 0.0 };
                proj.set(
                    i,
                    j,
                    (id - enc.feature[i] * enc.feature[j]) / enc.pre_norm * enc.token_gain,
                );
            }
        }
        proj.matmul(&self.w).expect("square matrices of equal size")
    }

    /// Gradient on each prompt token given an upstream gradient on `T`.
    pub fn prompt_vjp(&self, enc: &TextEncoding, upstream: &[f64]) -> Vec<f64> {
        let g_y = normalize_vjp(&enc.feature, enc.pre_norm, upstream);
        let mut g = self.w.matvec_t(&g_y);
        for x in &mut g {
            *x *= enc.token_gain;
        }
        g
    }
}

/// Free-function form of [`ToyTextEncoder::encode`].
pub fn encode_text(
    enc: &ToyTextEncoder,
    prompt: &Mat,
    scale: f64,
    class_token: &[f64],
) -> Result<TextEncoding> {
    enc.encode(prompt, scale, class_token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine_sim, fd_check, norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_prompt(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Mat {
        Mat::from_vec(
            m,
            d,
            (0..m * d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        unit(&v).unwrap().0
    }

    #[test]
    fn zero_scale_ignores_prompt() {
        let enc = ToyTextEncoder::new(8, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tok = random_unit(&mut rng, 8);
        let a = enc
            .encode(&random_prompt(&mut rng, 3, 8), 0.0, &tok)
            .unwrap();
        let b = enc
            .encode(&random_prompt(&mut rng, 3, 8), 0.0, &tok)
            .unwrap();
        assert_eq!(a.feature, b.feature);
        let direct = unit(&enc.weights().matvec(&tok)).unwrap().0;
        for (x, y) in a.feature.iter().zip(&direct) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic() {
        let enc = ToyTextEncoder::new(8, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_prompt(&mut rng, 3, 8);
        let tok = random_unit(&mut rng, 8);
        assert_eq!(
            enc.encode(&p, 0.7, &tok).unwrap(),
            enc.encode(&p, 0.7, &tok).unwrap()
        );
    }

    #[test]
    fn prompt_gradient_matches_fd() {
        let (d, m) = (8, 3);
        let enc = ToyTextEncoder::new(d, m, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_prompt(&mut rng, m, d);
        let tok = random_unit(&mut rng, d);
        let upstream: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale = 0.8;
        let out = enc.encode(&p, scale, &tok).unwrap();
        let g_tok = enc.prompt_vjp(&out, &upstream);
        let analytic: Vec<f64> = (0..m).flat_map(|_| g_tok.clone()).collect();

        let f = |x: &[f64]| {
            let pm = Mat::from_vec(m, d, x.to_vec()).unwrap();
            let t = enc.encode(&pm, scale, &tok).unwrap().feature;
            t.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let err = fd_check(f, p.as_slice(), &analytic);
        assert!(err < 1e-5, "fd err {err}");

        // the explicit Jacobian agrees with the vjp
        let jac = enc.prompt_jacobian(&out);
        let via_jac = jac.matvec_t(&upstream);
        for (a, b) in via_jac.iter().zip(&g_tok) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_unit_norm_and_homogeneous() {
        let enc = ToyTextEncoder::new(8, 2, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let p = random_prompt(&mut rng, 2, 8);
            let tok = random_unit(&mut rng, 8);
            let t = enc.encode(&p, 0.9, &tok).unwrap();
            assert!((norm(&t.feature) - 1.0).abs() < 1e-9);

            // scaling h by c > 0: scale prompt and token together
            let c = 3.5;
            let p2 = Mat::from_vec(2, 8, p.as_slice().iter().map(|x| x * c).collect()).unwrap();
            let tok2: Vec<f64> = tok.iter().map(|x| x * c).collect();
            let t2 = enc.encode(&p2, 0.9, &tok2).unwrap();
            for (a, b) in t.feature.iter().zip(&t2.feature) {
                assert!((a - b).abs() < 1e-12);
            }

            let other = random_unit(&mut rng, 8);
            let t3 = enc.encode(&p, 0.9, &other).unwrap();
            assert!(cosine_sim(&t.feature, &t3.feature).unwrap() < 1.0 - 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let enc = ToyTextEncoder::new(4, 2, 0).unwrap();
        assert!(matches!(
            enc.encode(&Mat::zeros(3, 4), 1.0, &[1.0, 0.0, 0.0, 0.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            enc.encode(&Mat::zeros(2, 4), 1.0, &[0.0; 4]),
            Err(Error::ZeroNorm { .. })
        ));
    }
}
