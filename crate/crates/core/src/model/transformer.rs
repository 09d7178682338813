//! Forward and backward passes over a packed batch.
//!
//! Sequences of a batch are concatenated row-wise so the dense layers run as
//! one matrix product; attention is evaluated per sequence. Trailing PAD
//! positions are trimmed before packing, which by causality leaves every
//! remaining logit unchanged.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{LayerOffsets, Parameters};
use super::scalar::{gemm, Mat, Scalar};
use super::ModelError;
use crate::tokenizer::PAD;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Input rows of several sequences laid end to end.
#[derive(Debug, Clone, Default)]
pub(crate) struct Packed {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    /// `(first row, length)` per sequence.
    pub segments: Vec<(usize, usize)>,
}

impl Packed {
    pub fn new(seqs: &[&[u32]], context: usize) -> Result<Self, ModelError> {
        let mut p = Packed::default();
        for s in seqs {
            if s.len() > context {
                return Err(ModelError::SequenceTooLong {
                    len: s.len(),
                    context,
                });
            }
            p.segments.push((p.tokens.len(), s.len()));
            p.tokens.extend_from_slice(s);
            p.positions.extend(0..s.len());
        }
        Ok(p)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, Default)]
struct LayerCache<T> {
    x_in: Vec<T>,
    ln1: Vec<T>,
    ln1_stats: Vec<(T, T)>,
    qkv: Vec<T>,
    /// Attention probabilities, per sequence `[heads × len × len]`, concatenated.
    probs: Vec<T>,
    att: Vec<T>,
    drop1: Vec<T>,
    x_mid: Vec<T>,
    ln2: Vec<T>,
    ln2_stats: Vec<(T, T)>,
    fc: Vec<T>,
    gelu: Vec<T>,
    drop2: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache<T> {
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    lnf: Vec<T>,
    lnf_stats: Vec<(T, T)>,
}

fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T], out: &mut [T], stats: &mut Vec<(T, T)>) {
    let d = g.len();
    stats.clear();
    let inv_d = T::c(1.0 / d as f64);
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + T::c(LN_EPS)).sqrt();
        for i in 0..d {
            orow[i] = (row[i] - mean) * rstd * g[i] + b[i];
        }
        stats.push((mean, rstd));
    }
}

/// Accumulates parameter gradients and returns the input gradient.
fn layer_norm_backward<T: Scalar>(
    x: &[T],
    stats: &[(T, T)],
    g: &[T],
    dy: &[T],
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let d = g.len();
    let inv_d = T::c(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, &(mean, rstd)) in stats.iter().enumerate() {
        let row = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..d {
            let xhat = (row[i] - mean) * rstd;
            dg[i] += dyr[i] * xhat;
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            sum_dxhat += dxhat[i];
            sum_dxhat_xhat += dxhat[i] * xhat;
        }
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (row[i] - mean) * rstd;
            dxr[i] += rstd * (dxhat[i] - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
        }
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let a = T::c(GELU_A);
    T::c(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let a = T::c(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    T::c(0.5) * (T::one() + t)
        + T::c(0.5) * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * a * x * x)
}

fn add_bias<T: Scalar>(out: &mut [T], b: &[T]) {
    for row in out.chunks_exact_mut(b.len()) {
        for (o, &bi) in row.iter_mut().zip(b) {
            *o += bi;
        }
    }
}

fn sum_rows<T: Scalar>(dy: &[T], db: &mut [T]) {
    for row in dy.chunks_exact(db.len()) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// `out = x · w + b`, with `x: [n × k]`, `w: [k × m]`.
fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    gemm(
        n,
        k,
        m,
        T::one(),
        Mat::n(x, k),
        Mat::n(w, m),
        T::zero(),
        &mut out,
        m,
    );
    add_bias(&mut out, b);
    out
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    k: usize,
    m: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    gemm(
        k,
        n,
        m,
        T::one(),
        Mat::t(x, k),
        Mat::n(dy, m),
        T::one(),
        dw,
        m,
    );
    sum_rows(dy, db);
    let mut dx = vec![T::zero(); n * k];
    gemm(
        n,
        m,
        k,
        T::one(),
        Mat::n(dy, m),
        Mat::t(w, m),
        T::zero(),
        &mut dx,
        k,
    );
    dx
}

/// Scaled-dot-product causal attention for every sequence and head.
fn attention<T: Scalar>(
    qkv: &[T],
    packed: &Packed,
    d: usize,
    heads: usize,
    probs: &mut Vec<T>,
    att: &mut [T],
) {
    let hd = d / heads;
    let scale = T::c(1.0 / (hd as f64).sqrt());
    let ld = 3 * d;
    probs.clear();
    for &(start, len) in &packed.segments {
        let base = probs.len();
        probs.resize(base + heads * len * len, T::zero());
        for h in 0..heads {
            let p = &mut probs[base + h * len * len..base + (h + 1) * len * len];
            let q = &qkv[start * ld + h * hd..];
            let k = &qkv[start * ld + d + h * hd..];
            gemm(
                len,
                hd,
                len,
                scale,
                Mat::n(q, ld),
                Mat::t(k, ld),
                T::zero(),
                p,
                len,
            );
            for i in 0..len {
                let row = &mut p[i * len..(i + 1) * len];
                let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row[..=i].iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = T::one() / sum;
                row[..=i].iter_mut().for_each(|v| *v *= inv);
                row[i + 1..].iter_mut().for_each(|v| *v = T::zero());
            }
            let v = &qkv[start * ld + 2 * d + h * hd..];
            gemm(
                len,
                len,
                hd,
                T::one(),
                Mat::n(p, len),
                Mat::n(v, ld),
                T::zero(),
                &mut att[start * d + h * hd..],
                d,
            );
        }
    }
}

fn attention_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    datt: &[T],
    packed: &Packed,
    d: usize,
    heads: usize,
) -> Vec<T> {
    let hd = d / heads;
    let scale = T::c(1.0 / (hd as f64).sqrt());
    let ld = 3 * d;
    let mut dqkv = vec![T::zero(); packed.rows() * ld];
    let mut base = 0;
    for &(start, len) in &packed.segments {
        let mut dp = vec![T::zero(); len * len];
        for h in 0..heads {
            let p = &probs[base + h * len * len..base + (h + 1) * len * len];
            let q = &qkv[start * ld + h * hd..];
            let k = &qkv[start * ld + d + h * hd..];
            let v = &qkv[start * ld + 2 * d + h * hd..];
            let dout = &datt[start * d + h * hd..];
            // dV = Pᵀ·dO
            gemm(
                len,
                len,
                hd,
                T::one(),
                Mat::t(p, len),
                Mat::n(dout, d),
                T::zero(),
                &mut dqkv[start * ld + 2 * d + h * hd..],
                ld,
            );
            // dP = dO·Vᵀ, then the softmax Jacobian
            gemm(
                len,
                hd,
                len,
                T::one(),
                Mat::n(dout, d),
                Mat::t(v, ld),
                T::zero(),
                &mut dp,
                len,
            );
            for i in 0..len {
                let prow = &p[i * len..(i + 1) * len];
                let drow = &mut dp[i * len..(i + 1) * len];
                let dot: T = (0..=i).map(|j| prow[j] * drow[j]).sum();
                for j in 0..len {
                    drow[j] = if j <= i {
                        prow[j] * (drow[j] - dot) * scale
                    } else {
                        T::zero()
                    };
                }
            }
            // dQ = dS·K, dK = dSᵀ·Q
            gemm(
                len,
                len,
                hd,
                T::one(),
                Mat::n(&dp, len),
                Mat::n(k, ld),
                T::zero(),
                &mut dqkv[start * ld + h * hd..],
                ld,
            );
            gemm(
                len,
                len,
                hd,
                T::one(),
                Mat::t(&dp, len),
                Mat::n(q, ld),
                T::zero(),
                &mut dqkv[start * ld + d + h * hd..],
                ld,
            );
        }
        base += heads * len * len;
    }
    dqkv
}

fn dropout_mask<T: Scalar>(n: usize, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Vec<T> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = T::c(1.0 / (1.0 - p));
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < p {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect()
        }
        _ => Vec::new(),
    }
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &[T]) {
    if !mask.is_empty() {
        x.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
    }
}

/// Runs the network up to the final layer norm, keeping activations for backward.
pub(crate) fn forward_cache<T: Scalar>(
    params: &Parameters<T>,
    packed: &Packed,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Cache<T> {
    let cfg = &params.config;
    let d = cfg.embed_dim;
    let n = packed.rows();
    let wte = params.slice(params.layout.wte, cfg.vocab_size * d);
    let wpe = params.slice(params.layout.wpe, cfg.context_window * d);
    let mut x = vec![T::zero(); n * d];
    for (r, (&t, &pos)) in packed.tokens.iter().zip(&packed.positions).enumerate() {
        let (e, p) = (&wte[t as usize * d..][..d], &wpe[pos * d..][..d]);
        for i in 0..d {
            x[r * d + i] = e[i] + p[i];
        }
    }
    let mut layers = Vec::with_capacity(cfg.layers);
    for lo in &params.layout.layers {
        let w = |off: usize, len: usize| params.slice(off, len);
        let mut c = LayerCache {
            x_in: x,
            ..Default::default()
        };
        c.ln1 = vec![T::zero(); n * d];
        layer_norm(
            &c.x_in,
            w(lo.ln1_g, d),
            w(lo.ln1_b, d),
            &mut c.ln1,
            &mut c.ln1_stats,
        );
        c.qkv = linear(
            &c.ln1,
            w(lo.qkv_w, 3 * d * d),
            w(lo.qkv_b, 3 * d),
            n,
            d,
            3 * d,
        );
        c.att = vec![T::zero(); n * d];
        attention(&c.qkv, packed, d, cfg.heads, &mut c.probs, &mut c.att);
        let mut y = linear(&c.att, w(lo.proj_w, d * d), w(lo.proj_b, d), n, d, d);
        c.drop1 = dropout_mask(n * d, cfg.dropout, &mut dropout_rng);
        apply_mask(&mut y, &c.drop1);
        c.x_mid = c.x_in.iter().zip(&y).map(|(&a, &b)| a + b).collect();

        c.ln2 = vec![T::zero(); n * d];
        layer_norm(
            &c.x_mid,
            w(lo.ln2_g, d),
            w(lo.ln2_b, d),
            &mut c.ln2,
            &mut c.ln2_stats,
        );
        c.fc = linear(
            &c.ln2,
            w(lo.fc_w, 4 * d * d),
            w(lo.fc_b, 4 * d),
            n,
            d,
            4 * d,
        );
        c.gelu = c.fc.iter().map(|&v| gelu(v)).collect();
        let mut y2 = linear(&c.gelu, w(lo.fc2_w, 4 * d * d), w(lo.fc2_b, d), n, 4 * d, d);
        c.drop2 = dropout_mask(n * d, cfg.dropout, &mut dropout_rng);
        apply_mask(&mut y2, &c.drop2);
        x = c.x_mid.iter().zip(&y2).map(|(&a, &b)| a + b).collect();
        layers.push(c);
    }
    let mut lnf = vec![T::zero(); n * d];
    let mut lnf_stats = Vec::new();
    layer_norm(
        &x,
        params.slice(params.layout.lnf_g, d),
        params.slice(params.layout.lnf_b, d),
        &mut lnf,
        &mut lnf_stats,
    );
    Cache {
        layers,
        x_final: x,
        lnf,
        lnf_stats,
    }
}

/// Logits `[rows × V]` from the final hidden states (tied output projection).
pub(crate) fn logits<T: Scalar>(params: &Parameters<T>, hidden: &[T]) -> Vec<T> {
    let d = params.config.embed_dim;
    let v = params.config.vocab_size;
    let n = hidden.len() / d;
    let wte = params.slice(params.layout.wte, v * d);
    let mut out = vec![T::zero(); n * v];
    gemm(
        n,
        d,
        v,
        T::one(),
        Mat::n(hidden, d),
        Mat::t(wte, d),
        T::zero(),
        &mut out,
        v,
    );
    out
}

pub(crate) fn forward_logits<T: Scalar>(params: &Parameters<T>, packed: &Packed) -> Vec<T> {
    let cache = forward_cache(params, packed, None);
    logits(params, &cache.lnf)
}

/// In-place log-softmax of one row; returns nothing, row holds log-probabilities.
pub(crate) fn log_softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter_mut().for_each(|v| *v -= lse);
}

/// Splits each sequence into model inputs and next-token targets, dropping
/// trailing PAD. Sequences with fewer than two real tokens contribute nothing.
pub(crate) fn inputs_and_targets(batch: &[Vec<u32>]) -> (Vec<&[u32]>, Vec<u32>) {
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for s in batch {
        let end = s.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
        if end < 2 {
            continue;
        }
        inputs.push(&s[..end - 1]);
        targets.extend_from_slice(&s[1..end]);
    }
    (inputs, targets)
}

/// Mean next-token NLL over non-PAD targets and its gradient w.r.t. every parameter.
pub(crate) fn loss_and_grad<T: Scalar>(
    params: &Parameters<T>,
    batch: &[Vec<u32>],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(T, Vec<T>), ModelError> {
    let cfg = &params.config;
    let (inputs, targets) = inputs_and_targets(batch);
    let counted = targets.iter().filter(|&&t| t != PAD).count();
    if counted == 0 {
        return Err(ModelError::AllPadded);
    }
    let packed = Packed::new(&inputs, cfg.context_window)?;
    let cache = forward_cache(params, &packed, dropout_rng);
    let d = cfg.embed_dim;
    let v = cfg.vocab_size;
    let n = packed.rows();
    let mut grad = vec![T::zero(); params.len()];

    // Loss and dlogits.
    let mut dlogits = logits(params, &cache.lnf);
    let inv_n = T::c(1.0 / counted as f64);
    let mut loss = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        let row = &mut dlogits[r * v..(r + 1) * v];
        if t == PAD {
            row.fill(T::zero());
            continue;
        }
        log_softmax_row(row);
        loss -= row[t as usize];
        row.iter_mut().for_each(|x| *x = x.exp() * inv_n);
        row[t as usize] -= inv_n;
    }
    loss *= inv_n;

    let lay = &params.layout;
    let wte = params.slice(lay.wte, v * d);
    // d(hidden) = dlogits·wte, d(wte) += dlogitsᵀ·hidden
    let mut dh = vec![T::zero(); n * d];
    gemm(
        n,
        v,
        d,
        T::one(),
        Mat::n(&dlogits, v),
        Mat::n(wte, d),
        T::zero(),
        &mut dh,
        d,
    );
    gemm(
        v,
        n,
        d,
        T::one(),
        Mat::t(&dlogits, v),
        Mat::n(&cache.lnf, d),
        T::one(),
        &mut grad[lay.wte..lay.wte + v * d],
        d,
    );

    let mut dx = vec![T::zero(); n * d];
    {
        let (dg, db) = split_two(&mut grad, lay.lnf_g, d, lay.lnf_b, d);
        layer_norm_backward(
            &cache.x_final,
            &cache.lnf_stats,
            params.slice(lay.lnf_g, d),
            &dh,
            dg,
            db,
            &mut dx,
        );
    }

    for (lo, c) in lay.layers.iter().zip(&cache.layers).rev() {
        dx = layer_backward(params, lo, c, &packed, dx, &mut grad);
    }

    for (r, (&t, &pos)) in packed.tokens.iter().zip(&packed.positions).enumerate() {
        let g = &dx[r * d..(r + 1) * d];
        let e = lay.wte + t as usize * d;
        grad[e..e + d].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        let p = lay.wpe + pos * d;
        grad[p..p + d].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }
    Ok((loss, grad))
}

/// Disjoint mutable views `buf[a..a + alen]` and `buf[b..b + blen]`, with `a + alen <= b`.
fn split_two<T>(
    buf: &mut [T],
    a: usize,
    alen: usize,
    b: usize,
    blen: usize,
) -> (&mut [T], &mut [T]) {
    assert!(a + alen <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + alen], &mut hi[..blen])
}

fn layer_backward<T: Scalar>(
    params: &Parameters<T>,
    lo: &LayerOffsets,
    c: &LayerCache<T>,
    packed: &Packed,
    dx_out: Vec<T>,
    grad: &mut [T],
) -> Vec<T> {
    let d = params.config.embed_dim;
    let heads = params.config.heads;
    let n = packed.rows();
    let w = |off: usize, len: usize| params.slice(off, len);

    // MLP branch
    let mut dy2 = dx_out.clone();
    apply_mask(&mut dy2, &c.drop2);
    let mut dgelu = {
        let (dw, db) = split_two(grad, lo.fc2_w, 4 * d * d, lo.fc2_b, d);
        linear_backward(&c.gelu, w(lo.fc2_w, 4 * d * d), &dy2, n, 4 * d, d, dw, db)
    };
    dgelu
        .iter_mut()
        .zip(&c.fc)
        .for_each(|(g, &x)| *g *= gelu_grad(x));
    let dln2 = {
        let (dw, db) = split_two(grad, lo.fc_w, 4 * d * d, lo.fc_b, 4 * d);
        linear_backward(&c.ln2, w(lo.fc_w, 4 * d * d), &dgelu, n, d, 4 * d, dw, db)
    };
    let mut dx_mid = dx_out;
    {
        let (dg, db) = split_two(grad, lo.ln2_g, d, lo.ln2_b, d);
        layer_norm_backward(
            &c.x_mid,
            &c.ln2_stats,
            w(lo.ln2_g, d),
            &dln2,
            dg,
            db,
            &mut dx_mid,
        );
    }

    // Attention branch
    let mut dy = dx_mid.clone();
    apply_mask(&mut dy, &c.drop1);
    let datt = {
        let (dw, db) = split_two(grad, lo.proj_w, d * d, lo.proj_b, d);
        linear_backward(&c.att, w(lo.proj_w, d * d), &dy, n, d, d, dw, db)
    };
    let dqkv = attention_backward(&c.qkv, &c.probs, &datt, packed, d, heads);
    let dln1 = {
        let (dw, db) = split_two(grad, lo.qkv_w, 3 * d * d, lo.qkv_b, 3 * d);
        linear_backward(&c.ln1, w(lo.qkv_w, 3 * d * d), &dqkv, n, d, 3 * d, dw, db)
    };
    let mut dx_in = dx_mid;
    {
        let (dg, db) = split_two(grad, lo.ln1_g, d, lo.ln1_b, d);
        layer_norm_backward(
            &c.x_in,
            &c.ln1_stats,
            w(lo.ln1_g, d),
            &dln1,
            dg,
            db,
            &mut dx_in,
        );
    }
    dx_in
}
