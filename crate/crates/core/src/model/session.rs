//! Incremental decoding with cached keys and values.

use super::params::Parameters;
use super::scalar::Scalar;
use super::transformer::gelu;
use super::ModelError;

const LN_EPS: f64 = 1e-5;

/// Feeds tokens one at a time and returns next-token logits, reusing the
/// keys and values of earlier positions.
#[derive(Debug, Clone)]
pub struct Session<'a, T: Scalar> {
    params: &'a Parameters<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T]) -> Vec<T> {
    let d = x.len();
    let inv_d = T::c(1.0 / d as f64);
    let mean = x.iter().copied().sum::<T>() * inv_d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
    let rstd = T::one() / (var + T::c(LN_EPS)).sqrt();
    (0..d).map(|i| (x[i] - mean) * rstd * g[i] + b[i]).collect()
}

/// `x · W (+ b)` for a row-major `[x.len() × out_dim]` weight.
fn vec_mat<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, out_dim: usize) -> Vec<T> {
    let mut out = match b {
        Some(b) => b.to_vec(),
        None => vec![T::zero(); out_dim],
    };
    for (&xi, row) in x.iter().zip(w.chunks_exact(out_dim)) {
        out.iter_mut().zip(row).for_each(|(o, &wv)| *o += xi * wv);
    }
    out
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(params: &'a Parameters<T>) -> Self {
        let cfg = &params.config;
        let cap = cfg.context_window * cfg.embed_dim;
        Session {
            params,
            keys: vec![Vec::with_capacity(cap); cfg.layers],
            values: vec![Vec::with_capacity(cap); cfg.layers],
            len: 0,
        }
    }

    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn remaining(&self) -> usize {
        self.params.config.context_window - self.len
    }

    /// Consumes `token` and returns the logits for the following position.
    pub fn push(&mut self, token: u32) -> Result<Vec<T>, ModelError> {
        let p = self.params;
        let cfg = &p.config;
        if self.len >= cfg.context_window {
            return Err(ModelError::SequenceTooLong {
                len: self.len + 1,
                context: cfg.context_window,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "token id {token} outside the vocabulary"
            )));
        }
        let d = cfg.embed_dim;
        let heads = cfg.heads;
        let hd = d / heads;
        let scale = T::c(1.0 / (hd as f64).sqrt());
        let lay = &p.layout;
        let e = p.slice(lay.wte + token as usize * d, d);
        let pe = p.slice(lay.wpe + self.len * d, d);
        let mut x: Vec<T> = e.iter().zip(pe).map(|(&a, &b)| a + b).collect();
        let t = self.len + 1;

        for (l, lo) in lay.layers.iter().enumerate() {
            let h = layer_norm(&x, p.slice(lo.ln1_g, d), p.slice(lo.ln1_b, d));
            let qkv = vec_mat(
                &h,
                p.slice(lo.qkv_w, 3 * d * d),
                Some(p.slice(lo.qkv_b, 3 * d)),
                3 * d,
            );
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut att = vec![T::zero(); d];
            let mut scores = vec![T::zero(); t];
            for hh in 0..heads {
                let q = &qkv[hh * hd..(hh + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &keys[j * d + hh * hd..j * d + (hh + 1) * hd];
                    *s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut att[hh * hd..(hh + 1) * hd];
                for (j, &s) in scores.iter().enumerate() {
                    let w = s / sum;
                    let v = &values[j * d + hh * hd..j * d + (hh + 1) * hd];
                    out.iter_mut().zip(v).for_each(|(o, &vv)| *o += w * vv);
                }
            }
            let y = vec_mat(
                &att,
                p.slice(lo.proj_w, d * d),
                Some(p.slice(lo.proj_b, d)),
                d,
            );
            x.iter_mut().zip(&y).for_each(|(a, &b)| *a += b);
            let h2 = layer_norm(&x, p.slice(lo.ln2_g, d), p.slice(lo.ln2_b, d));
            let f: Vec<T> = vec_mat(
                &h2,
                p.slice(lo.fc_w, 4 * d * d),
                Some(p.slice(lo.fc_b, 4 * d)),
                4 * d,
            )
            .into_iter()
            .map(gelu)
            .collect();
            let y2 = vec_mat(
                &f,
                p.slice(lo.fc2_w, 4 * d * d),
                Some(p.slice(lo.fc2_b, d)),
                d,
            );
            x.iter_mut().zip(&y2).for_each(|(a, &b)| *a += b);
        }
        let xf = layer_norm(&x, p.slice(lay.lnf_g, d), p.slice(lay.lnf_b, d));
        let v = cfg.vocab_size;
        let logits: Vec<T> = p
            .slice(lay.wte, v * d)
            .chunks_exact(d)
            .map(|e| e.iter().zip(&xf).map(|(&a, &b)| a * b).sum())
            .collect();
        self.len = t;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};

    #[test]
    fn matches_full_forward() {
        let cfg = ModelConfig {
            vocab_size: 17,
            context_window: 12,
            layers: 2,
            heads: 4,
            embed_dim: 16,
            dropout: 0.0,
            seed: 2,
        };
        let p = Parameters::<f64>::init(&cfg).unwrap();
        let tokens = vec![0u32, 5, 9, 3, 16, 4, 4, 8];
        let full = forward(&p, &[tokens.clone()]).unwrap();
        let mut s = Session::new(&p);
        for (pos, &t) in tokens.iter().enumerate() {
            let l = s.push(t).unwrap();
            for (a, b) in l.iter().zip(full.row(0, pos)) {
                assert!((a - b).abs() < 1e-10, "pos {pos}: {a} vs {b}");
            }
        }
        assert_eq!(s.len(), 8);
    }

    #[test]
    fn context_overflow() {
        let mut cfg = ModelConfig::new(5);
        cfg.context_window = 2;
        cfg.embed_dim = 8;
        let p = Parameters::<f32>::init(&cfg).unwrap();
        let mut s = Session::new(&p);
        s.push(0).unwrap();
        s.push(1).unwrap();
        assert!(matches!(s.push(2), Err(ModelError::SequenceTooLong { .. })));
    }
}
