//! Pre-norm causal transformer forward pass and exact backward pass.
//!
//! Sequence rows are `[prompt rows; real tokens]`. There are no positional
//! embeddings: order reaches the model only through the causal mask, so a
//! question token looks the same whether or not context precedes it. In prefix mode
//! every layer's attention additionally sees `T` key/value slots that sit
//! before all sequence positions and are visible to every query.

use super::{AnswerModel, LmConfig, PrefixMode, VirtualPrefix};
use crate::rng;
use crate::scalar::{dot, Scalar};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of every tensor in the flat parameter buffer. Weight matrices
/// are stored `[in][out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub d: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub heads: usize,
    pub tok: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(config: &LmConfig, vocab: usize) -> Self {
        let d = config.model_dim;
        let ffn = d * config.ffn_multiplier;
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let tok = take(vocab * d);
        let layers = (0..config.layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * ffn),
                b1: take(ffn),
                w2: take(ffn * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let head = take(d * vocab);
        Self {
            d,
            ffn,
            vocab,
            heads: config.heads,
            tok,
            layers,
            lnf_g,
            lnf_b,
            head,
            total: at,
        }
    }

    pub(crate) fn init<T: Scalar>(&self, config: &LmConfig) -> Vec<T> {
        let mut rng = rng::seeded(config.seed);
        let std = T::lit(config.init_scale);
        let residual_std = T::lit(config.init_scale / (2.0 * config.layers as f64).sqrt());
        let mut p = vec![T::zero(); self.total];
        let mut fill = |p: &mut [T], start: usize, len: usize, std: T| {
            for x in &mut p[start..start + len] {
                *x = T::gaussian(&mut rng, std);
            }
        };
        let d = self.d;
        fill(&mut p, self.tok, self.vocab * d, std);
        for l in &self.layers {
            p[l.ln1_g..l.ln1_g + d].iter_mut().for_each(|x| *x = T::one());
            p[l.ln2_g..l.ln2_g + d].iter_mut().for_each(|x| *x = T::one());
            fill(&mut p, l.wq, d * d, std);
            fill(&mut p, l.wk, d * d, std);
            fill(&mut p, l.wv, d * d, std);
            fill(&mut p, l.wo, d * d, residual_std);
            fill(&mut p, l.w1, d * self.ffn, std);
            fill(&mut p, l.w2, self.ffn * d, residual_std);
        }
        p[self.lnf_g..self.lnf_g + d].iter_mut().for_each(|x| *x = T::one());
        fill(&mut p, self.head, d * self.vocab, std);
        p
    }
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    h: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[head][query][slot]`, slot count = prefix slots + sequence rows.
    att: Vec<T>,
    ctx: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

pub(crate) struct Cache<'a, T> {
    tokens: Vec<usize>,
    prefix: Option<&'a VirtualPrefix<T>>,
    /// prompt rows at the start of the sequence
    n_prompt: usize,
    /// key/value slots per layer
    n_slots: usize,
    rows: usize,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    hf: Vec<T>,
}

pub(crate) struct Grads<T> {
    pub params: Option<Vec<T>>,
    pub prefix: Option<Vec<T>>,
}

fn layer_norm<T: Scalar>(x: &[T], rows: usize, d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let mut y = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    let n = T::from_count(d);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (row[i] - mean) * rs;
            xhat[r * d + i] = xh;
            y[r * d + i] = g[i] * xh + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates dg, db when a parameter gradient buffer is given.
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    rows: usize,
    d: usize,
    g: &[T],
    mut grads: Option<(&mut Vec<T>, usize, usize)>,
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * d];
    let n = T::from_count(d);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        if dyr.iter().all(|&v| v == T::zero()) {
            continue;
        }
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            let dxhat = dyr[i] * g[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh[i];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        for i in 0..d {
            let dxhat = dyr[i] * g[i];
            dx[r * d + i] = cache.rstd[r] * (dxhat - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
        if let Some((buf, g_off, b_off)) = grads.as_mut() {
            for i in 0..d {
                buf[*g_off + i] += dyr[i] * xh[i];
                buf[*b_off + i] += dyr[i];
            }
        }
    }
    dx
}

/// y = x W + b with W stored `[din][dout]`.
fn linear<T: Scalar>(x: &[T], rows: usize, w: &[T], b: &[T], din: usize, dout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * dout];
    for r in 0..rows {
        let yr = &mut y[r * dout..(r + 1) * dout];
        yr.copy_from_slice(b);
        for i in 0..din {
            let xi = x[r * din + i];
            if xi == T::zero() {
                continue;
            }
            let wrow = &w[i * dout..(i + 1) * dout];
            for (yo, &wo) in yr.iter_mut().zip(wrow) {
                *yo += xi * wo;
            }
        }
    }
    y
}

/// Accumulates dx += dy W^T; and dW += x^T dy, db += sum(dy) when requested.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    rows: usize,
    w: &[T],
    din: usize,
    dout: usize,
    dx: &mut [T],
    grads: Option<(&mut Vec<T>, usize, usize)>,
) {
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        if dyr.iter().all(|&v| v == T::zero()) {
            continue;
        }
        for i in 0..din {
            dx[r * din + i] += dot(dyr, &w[i * dout..(i + 1) * dout]);
        }
    }
    if let Some((buf, w_off, b_off)) = grads {
        for r in 0..rows {
            let dyr = &dy[r * dout..(r + 1) * dout];
            if dyr.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for i in 0..din {
                let xi = x[r * din + i];
                let gw = &mut buf[w_off + i * dout..w_off + (i + 1) * dout];
                for (g, &d) in gw.iter_mut().zip(dyr) {
                    *g += xi * d;
                }
            }
            for (o, &d) in dyr.iter().enumerate() {
                buf[b_off + o] += d;
            }
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

pub(crate) fn forward<'a, T: Scalar>(
    model: &AnswerModel<T>,
    prefix: Option<&'a VirtualPrefix<T>>,
    tokens: &[usize],
) -> Cache<'a, T> {
    let lay = model.layout();
    let p = model.parameters();
    let d = lay.d;
    let heads = lay.heads;
    let dh = d / heads;
    let (n_prompt, n_slots) = match prefix {
        Some(v) if v.mode == PrefixMode::Prompt => (v.tokens, 0),
        Some(v) => (0, v.tokens),
        None => (0, 0),
    };
    let rows = n_prompt + tokens.len();
    let width = n_slots + rows;
    let scale = T::one() / T::from_count(dh).sqrt();

    let mut x = vec![T::zero(); rows * d];
    for t in 0..n_prompt {
        x[t * d..(t + 1) * d].copy_from_slice(prefix.unwrap().prompt_row(t));
    }
    for (i, &tok) in tokens.iter().enumerate() {
        let r = n_prompt + i;
        x[r * d..(r + 1) * d].copy_from_slice(&p[lay.tok + tok * d..lay.tok + (tok + 1) * d]);
    }

    let mut layers = Vec::with_capacity(lay.layers.len());
    for (li, off) in lay.layers.iter().enumerate() {
        let (h, ln1) = layer_norm(&x, rows, d, &p[off.ln1_g..off.ln1_g + d], &p[off.ln1_b..off.ln1_b + d]);
        let q = linear(&h, rows, &p[off.wq..off.wq + d * d], &p[off.bq..off.bq + d], d, d);
        let k = linear(&h, rows, &p[off.wk..off.wk + d * d], &p[off.bk..off.bk + d], d, d);
        let v = linear(&h, rows, &p[off.wv..off.wv + d * d], &p[off.bv..off.bv + d], d, d);
        let mut att = vec![T::zero(); heads * rows * width];
        let mut ctx = vec![T::zero(); rows * d];
        let slot_key = |j: usize, hd: usize| -> &[T] {
            if j < n_slots {
                &prefix.unwrap().kv_row(j, li, 0)[hd * dh..(hd + 1) * dh]
            } else {
                let r = j - n_slots;
                &k[r * d + hd * dh..r * d + (hd + 1) * dh]
            }
        };
        let slot_value = |j: usize, hd: usize| -> &[T] {
            if j < n_slots {
                &prefix.unwrap().kv_row(j, li, 1)[hd * dh..(hd + 1) * dh]
            } else {
                let r = j - n_slots;
                &v[r * d + hd * dh..r * d + (hd + 1) * dh]
            }
        };
        for hd in 0..heads {
            for s in 0..rows {
                let visible = n_slots + s + 1;
                let qs = &q[s * d + hd * dh..s * d + (hd + 1) * dh];
                let row = &mut att[(hd * rows + s) * width..(hd * rows + s) * width + width];
                let mut max = T::neg_infinity();
                for (j, a) in row.iter_mut().enumerate().take(visible) {
                    *a = dot(qs, slot_key(j, hd)) * scale;
                    max = max.max(*a);
                }
                let mut total = T::zero();
                for a in row.iter_mut().take(visible) {
                    *a = (*a - max).exp();
                    total += *a;
                }
                for a in row.iter_mut().take(visible) {
                    *a /= total;
                }
                let out = &mut ctx[s * d + hd * dh..s * d + (hd + 1) * dh];
                for (j, &a) in row.iter().enumerate().take(visible) {
                    for (o, &val) in out.iter_mut().zip(slot_value(j, hd)) {
                        *o += a * val;
                    }
                }
            }
        }
        let proj = linear(&ctx, rows, &p[off.wo..off.wo + d * d], &p[off.bo..off.bo + d], d, d);
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi += *pi;
        }
        let (h2, ln2) = layer_norm(&x, rows, d, &p[off.ln2_g..off.ln2_g + d], &p[off.ln2_b..off.ln2_b + d]);
        let f = lay.ffn;
        let pre = linear(&h2, rows, &p[off.w1..off.w1 + d * f], &p[off.b1..off.b1 + f], d, f);
        let act: Vec<T> = pre.iter().map(|&z| gelu(z)).collect();
        let mlp = linear(&act, rows, &p[off.w2..off.w2 + f * d], &p[off.b2..off.b2 + d], f, d);
        for (xi, mi) in x.iter_mut().zip(&mlp) {
            *xi += *mi;
        }
        layers.push(LayerCache {
            ln1,
            h,
            q,
            k,
            v,
            att,
            ctx,
            ln2,
            h2,
            pre,
            act,
        });
    }
    let (hf, lnf) = layer_norm(&x, rows, d, &p[lay.lnf_g..lay.lnf_g + d], &p[lay.lnf_b..lay.lnf_b + d]);
    Cache {
        tokens: tokens.to_vec(),
        prefix,
        n_prompt,
        n_slots,
        rows,
        layers,
        lnf,
        hf,
    }
}

/// Full-vocabulary logits at real-token position `position`.
pub(crate) fn logits_at<T: Scalar>(model: &AnswerModel<T>, cache: &Cache<'_, T>, position: usize) -> Vec<T> {
    let lay = model.layout();
    let p = model.parameters();
    let d = lay.d;
    let r = cache.n_prompt + position;
    linear(
        &cache.hf[r * d..(r + 1) * d],
        1,
        &p[lay.head..lay.head + d * lay.vocab],
        &vec![T::zero(); lay.vocab],
        d,
        lay.vocab,
    )
}

pub(crate) fn attention_rows<T: Scalar>(model: &AnswerModel<T>, cache: &Cache<'_, T>) -> Vec<Vec<T>> {
    let heads = model.config.heads;
    let width = cache.n_slots + cache.rows;
    let mut out = Vec::new();
    for layer in &cache.layers {
        for hd in 0..heads {
            for s in 0..cache.rows {
                let start = (hd * cache.rows + s) * width;
                out.push(layer.att[start..start + cache.n_slots + s + 1].to_vec());
            }
        }
    }
    out
}

/// Cross-entropy of the last position's restricted option distribution
/// against `targets` (a distribution over the first `targets.len()`
/// options). Returns the loss and d loss / d logits over the full vocabulary.
pub(crate) fn soft_cross_entropy<T: Scalar>(
    model: &AnswerModel<T>,
    cache: &Cache<'_, T>,
    targets: &[T],
) -> (T, Vec<T>) {
    let logits = logits_at(model, cache, cache.tokens.len() - 1);
    let restricted: Vec<T> = (0..targets.len()).map(|o| logits[1 + o]).collect();
    let probs = super::softmax(&restricted);
    let mut loss = T::zero();
    let mut dlogits = vec![T::zero(); logits.len()];
    for (o, (&pr, &t)) in probs.iter().zip(targets).enumerate() {
        if t > T::zero() {
            loss -= t * pr.ln();
        }
        dlogits[1 + o] = pr - t;
    }
    (loss, dlogits)
}

/// Backpropagate d loss / d logits (last position) through the network.
pub(crate) fn backward<T: Scalar>(
    model: &AnswerModel<T>,
    cache: &Cache<'_, T>,
    dlogits: &[T],
    want_params: bool,
) -> Grads<T> {
    let lay = model.layout();
    let p = model.parameters();
    let d = lay.d;
    let f = lay.ffn;
    let heads = lay.heads;
    let dh = d / heads;
    let rows = cache.rows;
    let n_slots = cache.n_slots;
    let width = n_slots + rows;
    let scale = T::one() / T::from_count(dh).sqrt();
    let mut gp = want_params.then(|| vec![T::zero(); lay.total]);
    let mut gprefix = cache.prefix.map(|v| vec![T::zero(); v.data.len()]);

    // output head and final norm
    let last = cache.n_prompt + cache.tokens.len() - 1;
    let mut dhf = vec![T::zero(); rows * d];
    linear_backward(
        dlogits,
        &cache.hf[last * d..(last + 1) * d],
        1,
        &p[lay.head..lay.head + d * lay.vocab],
        d,
        lay.vocab,
        &mut dhf[last * d..(last + 1) * d],
        None,
    );
    if let Some(buf) = gp.as_mut() {
        let hf = &cache.hf[last * d..(last + 1) * d];
        for i in 0..d {
            for (o, &g) in dlogits.iter().enumerate() {
                buf[lay.head + i * lay.vocab + o] += hf[i] * g;
            }
        }
    }
    let mut dx = layer_norm_backward(
        &dhf,
        &cache.lnf,
        rows,
        d,
        &p[lay.lnf_g..lay.lnf_g + d],
        gp.as_mut().map(|b| (b, lay.lnf_g, lay.lnf_b)),
    );

    for (li, off) in lay.layers.iter().enumerate().rev() {
        let c = &cache.layers[li];
        // feed-forward block
        let mut dact = vec![T::zero(); rows * f];
        linear_backward(
            &dx,
            &c.act,
            rows,
            &p[off.w2..off.w2 + f * d],
            f,
            d,
            &mut dact,
            gp.as_mut().map(|b| (b, off.w2, off.b2)),
        );
        for (g, &z) in dact.iter_mut().zip(&c.pre) {
            *g *= gelu_grad(z);
        }
        let mut dh2 = vec![T::zero(); rows * d];
        linear_backward(
            &dact,
            &c.h2,
            rows,
            &p[off.w1..off.w1 + d * f],
            d,
            f,
            &mut dh2,
            gp.as_mut().map(|b| (b, off.w1, off.b1)),
        );
        let dmid = layer_norm_backward(
            &dh2,
            &c.ln2,
            rows,
            d,
            &p[off.ln2_g..off.ln2_g + d],
            gp.as_mut().map(|b| (b, off.ln2_g, off.ln2_b)),
        );
        for (a, &b) in dx.iter_mut().zip(&dmid) {
            *a += b;
        }

        // attention block
        let mut dctx = vec![T::zero(); rows * d];
        linear_backward(
            &dx,
            &c.ctx,
            rows,
            &p[off.wo..off.wo + d * d],
            d,
            d,
            &mut dctx,
            gp.as_mut().map(|b| (b, off.wo, off.bo)),
        );
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let prefix = cache.prefix;
        for hd in 0..heads {
            let hs = hd * dh..(hd + 1) * dh;
            for s in 0..rows {
                let dout = &dctx[s * d + hs.start..s * d + hs.end];
                if dout.iter().all(|&x| x == T::zero()) {
                    continue;
                }
                let visible = n_slots + s + 1;
                let arow = &c.att[(hd * rows + s) * width..(hd * rows + s) * width + width];
                let mut da = vec![T::zero(); visible];
                for j in 0..visible {
                    let val = if j < n_slots {
                        &prefix.unwrap().kv_row(j, li, 1)[hs.clone()]
                    } else {
                        let r = j - n_slots;
                        &c.v[r * d + hs.start..r * d + hs.end]
                    };
                    da[j] = dot(dout, val);
                    let dst: &mut [T] = if j < n_slots {
                        let g = gprefix.as_mut().unwrap();
                        let start = ((j * lay.layers.len() + li) * 2 + 1) * d;
                        &mut g[start + hs.start..start + hs.end]
                    } else {
                        let r = j - n_slots;
                        &mut dv[r * d + hs.start..r * d + hs.end]
                    };
                    for (g, &o) in dst.iter_mut().zip(dout) {
                        *g += arow[j] * o;
                    }
                }
                let weighted: T = (0..visible).map(|j| arow[j] * da[j]).sum();
                let qs = &c.q[s * d + hs.start..s * d + hs.end];
                for j in 0..visible {
                    let ds = arow[j] * (da[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let key = if j < n_slots {
                        &prefix.unwrap().kv_row(j, li, 0)[hs.clone()]
                    } else {
                        let r = j - n_slots;
                        &c.k[r * d + hs.start..r * d + hs.end]
                    };
                    for (g, &kk) in dq[s * d + hs.start..s * d + hs.end].iter_mut().zip(key) {
                        *g += ds * kk;
                    }
                    let dst: &mut [T] = if j < n_slots {
                        let g = gprefix.as_mut().unwrap();
                        let start = (j * lay.layers.len() + li) * 2 * d;
                        &mut g[start + hs.start..start + hs.end]
                    } else {
                        let r = j - n_slots;
                        &mut dk[r * d + hs.start..r * d + hs.end]
                    };
                    for (g, &qq) in dst.iter_mut().zip(qs) {
                        *g += ds * qq;
                    }
                }
            }
        }
        let mut dh = vec![T::zero(); rows * d];
        linear_backward(
            &dq,
            &c.h,
            rows,
            &p[off.wq..off.wq + d * d],
            d,
            d,
            &mut dh,
            gp.as_mut().map(|b| (b, off.wq, off.bq)),
        );
        linear_backward(
            &dk,
            &c.h,
            rows,
            &p[off.wk..off.wk + d * d],
            d,
            d,
            &mut dh,
            gp.as_mut().map(|b| (b, off.wk, off.bk)),
        );
        linear_backward(
            &dv,
            &c.h,
            rows,
            &p[off.wv..off.wv + d * d],
            d,
            d,
            &mut dh,
            gp.as_mut().map(|b| (b, off.wv, off.bv)),
        );
        let din = layer_norm_backward(
            &dh,
            &c.ln1,
            rows,
            d,
            &p[off.ln1_g..off.ln1_g + d],
            gp.as_mut().map(|b| (b, off.ln1_g, off.ln1_b)),
        );
        for (a, &b) in dx.iter_mut().zip(&din) {
            *a += b;
        }
    }

    // embeddings
    if let Some(g) = gprefix.as_mut() {
        if cache.n_prompt > 0 {
            g[..cache.n_prompt * d].copy_from_slice(&dx[..cache.n_prompt * d]);
        }
    }
    if let Some(buf) = gp.as_mut() {
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let r = cache.n_prompt + i;
            for k in 0..d {
                buf[lay.tok + tok * d + k] += dx[r * d + k];
            }
        }
    }
    Grads {
        params: gp,
        prefix: gprefix,
    }
}
