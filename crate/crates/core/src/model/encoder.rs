//! Post-norm transformer encoder with hand-written reverse-mode gradients.
//!
//! Per layer: `h = LN(x + drop(attn(x) W_o))`, `y = LN(h + drop(gelu(h W_1) W_2))`.
//! Hidden states are kept as `[batch * len, hidden]` matrices; attention
//! works on per-row, per-head `[len, head_dim]` blocks.

use ndarray::{s, Array1, Array2, Array3, Axis};

use super::attention::{attend_head, attend_head_backward, head_block, AttentionMask, HeadState, Qkv};
use super::params::{keep_mask, Linear, ModelParams, Norm};
use super::Scalar;
use crate::error::{Error, Result};
use crate::mlmdata::{MaskedBatch, IGNORE};
use crate::seed;

/// Whether dropout is active. Training mode draws its masks from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

fn cst<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("finite constant")
}

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let x = x.to_f64().expect("float");
    cst(0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let x = x.to_f64().expect("float");
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cst(cdf + x * pdf)
}

fn linear_forward<F: Scalar>(x: &Array2<F>, lin: &Linear<F>) -> Array2<F> {
    let mut y = x.dot(&lin.weight);
    y += &lin.bias;
    y
}

/// Accumulates parameter gradients and returns the input gradient.
fn linear_backward<F: Scalar>(x: &Array2<F>, dy: &Array2<F>, lin: &Linear<F>, grad: &mut Linear<F>) -> Array2<F> {
    ndarray::linalg::general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&lin.weight.t())
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

fn norm_forward<F: Scalar>(x: &Array2<F>, norm: &Norm<F>, eps: f64) -> (Array2<F>, NormCache<F>) {
    let width = cst::<F>(x.ncols() as f64);
    let eps = cst::<F>(eps);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / width;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *r = inv;
    }
    let mut y = &xhat * &norm.gain;
    y += &norm.bias;
    (y, NormCache { xhat, rstd })
}

fn norm_backward<F: Scalar>(dy: &Array2<F>, cache: &NormCache<F>, norm: &Norm<F>, grad: &mut Norm<F>) -> Array2<F> {
    grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let width = cst::<F>(dy.ncols() as f64);
    let mut dx = dy * &norm.gain;
    for ((mut row, xhat), &rstd) in dx.axis_iter_mut(Axis(0)).zip(cache.xhat.axis_iter(Axis(0))).zip(cache.rstd.iter()) {
        let mean_d = row.sum() / width;
        let mean_dx = row.iter().zip(xhat.iter()).fold(F::zero(), |acc, (&d, &x)| acc + d * x) / width;
        row.zip_mut_with(&xhat, |d, &x| *d = rstd * (*d - mean_d - x * mean_dx));
    }
    dx
}

fn apply_keep<F: Scalar>(x: &mut Array2<F>, keep: &Option<Array2<F>>) {
    if let Some(k) = keep {
        *x *= k;
    }
}

struct LayerCache<F> {
    input: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    global: Option<(Array2<F>, Array2<F>, Array2<F>)>,
    heads: Vec<HeadState<F>>,
    context: Array2<F>,
    attn_keep: Option<Array2<F>>,
    attn_norm: NormCache<F>,
    mid: Array2<F>,
    ffn_pre: Array2<F>,
    ffn_act: Array2<F>,
    ffn_keep: Option<Array2<F>>,
    ffn_norm: NormCache<F>,
}

pub(crate) struct EncoderCache<F> {
    batch: usize,
    len: usize,
    ids: Vec<u32>,
    embed_norm: NormCache<F>,
    embed_keep: Option<Array2<F>>,
    layers: Vec<LayerCache<F>>,
}

fn dropout_mask<F: Scalar>(shape: (usize, usize), p: f64, rng: &mut Option<seed::Rng>) -> Option<Array2<F>> {
    match rng {
        Some(rng) if p > 0.0 => Some(keep_mask(shape, p, rng)),
        _ => None,
    }
}

fn check_inputs<F: Scalar>(params: &ModelParams<F>, batch: &MaskedBatch) -> Result<()> {
    let cfg = &params.config;
    let n = batch.batch_size * batch.seq_len;
    if batch.input_ids.len() != n || batch.labels.len() != n || batch.attention_mask.len() != n {
        return Err(Error::Shape("batch buffers disagree with batch_size x seq_len".into()));
    }
    if batch.seq_len > cfg.max_positions {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds max_positions {}",
            batch.seq_len, cfg.max_positions
        )));
    }
    if let Some(&id) = batch.input_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!("token id {id} >= vocab size {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Runs the encoder, returning final hidden states `[batch * len, hidden]`.
pub(crate) fn encode<F: Scalar>(
    params: &ModelParams<F>,
    batch: &MaskedBatch,
    mode: Mode,
) -> Result<(Array2<F>, EncoderCache<F>)> {
    check_inputs(params, batch)?;
    let cfg = &params.config;
    let (b_size, len, hidden) = (batch.batch_size, batch.seq_len, cfg.hidden);
    let n = b_size * len;
    let (n_heads, d) = (cfg.n_heads, cfg.head_dim());
    let mut rng = match mode {
        Mode::Train { seed } => Some(seed::rng(seed, &[seed::DROPOUT])),
        Mode::Eval => None,
    };

    let masks = (0..b_size)
        .map(|b| {
            let real: Vec<bool> = batch.attention_mask[b * len..(b + 1) * len].iter().map(|&m| m != 0).collect();
            AttentionMask::new(&cfg.attention, &real)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut emb = Array2::<F>::zeros((n, hidden));
    for (r, mut row) in emb.axis_iter_mut(Axis(0)).enumerate() {
        let id = batch.input_ids[r] as usize;
        row.assign(&params.token_embedding.row(id));
        row += &params.position_embedding.row(r % len);
    }
    let (mut x, embed_norm) = norm_forward(&emb, &params.embed_norm, cfg.layer_norm_eps);
    let embed_keep = dropout_mask((n, hidden), cfg.dropout, &mut rng);
    apply_keep(&mut x, &embed_keep);

    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let q = linear_forward(&x, &layer.query);
        let k = linear_forward(&x, &layer.key);
        let v = linear_forward(&x, &layer.value);
        let any_global = masks.iter().any(|m| !m.global_rows().is_empty());
        let global = match (&layer.global, any_global) {
            (Some(g), true) => Some((
                linear_forward(&x, &g.query),
                linear_forward(&x, &g.key),
                linear_forward(&x, &g.value),
            )),
            _ => None,
        };

        let mut context = Array2::<F>::zeros((n, hidden));
        let mut heads = Vec::with_capacity(b_size * n_heads);
        for (b, mask) in masks.iter().enumerate() {
            for h in 0..n_heads {
                let local = Qkv {
                    q: head_block(&q, b, h, len, d),
                    k: head_block(&k, b, h, len, d),
                    v: head_block(&v, b, h, len, d),
                };
                let gqkv = global.as_ref().map(|(gq, gk, gv)| Qkv {
                    q: head_block(gq, b, h, len, d),
                    k: head_block(gk, b, h, len, d),
                    v: head_block(gv, b, h, len, d),
                });
                let dropout = match rng.as_mut() {
                    Some(r) if cfg.attn_dropout > 0.0 => Some((cfg.attn_dropout, r)),
                    _ => None,
                };
                let (ctx, state) = attend_head(&local, gqkv.as_ref(), mask, dropout);
                context.slice_mut(s![b * len..(b + 1) * len, h * d..(h + 1) * d]).assign(&ctx);
                heads.push(state);
            }
        }

        let mut attn_out = linear_forward(&context, &layer.output);
        let attn_keep = dropout_mask((n, hidden), cfg.dropout, &mut rng);
        apply_keep(&mut attn_out, &attn_keep);
        attn_out += &x;
        let (mid, attn_norm) = norm_forward(&attn_out, &layer.attn_norm, cfg.layer_norm_eps);

        let ffn_pre = linear_forward(&mid, &layer.ffn_inner);
        let ffn_act = ffn_pre.mapv(gelu);
        let mut ffn_out = linear_forward(&ffn_act, &layer.ffn_outer);
        let ffn_keep = dropout_mask((n, hidden), cfg.dropout, &mut rng);
        apply_keep(&mut ffn_out, &ffn_keep);
        ffn_out += &mid;
        let (out, ffn_norm) = norm_forward(&ffn_out, &layer.ffn_norm, cfg.layer_norm_eps);

        layer_caches.push(LayerCache {
            input: std::mem::replace(&mut x, out),
            q,
            k,
            v,
            global,
            heads,
            context,
            attn_keep,
            attn_norm,
            mid,
            ffn_pre,
            ffn_act,
            ffn_keep,
            ffn_norm,
        });
    }

    Ok((
        x,
        EncoderCache {
            batch: b_size,
            len,
            ids: batch.input_ids.clone(),
            embed_norm,
            embed_keep,
            layers: layer_caches,
        },
    ))
}

/// Propagates `d_out` (gradient of the final hidden states) back through
/// the encoder, accumulating into `grads`.
pub(crate) fn encode_backward<F: Scalar>(
    params: &ModelParams<F>,
    cache: &EncoderCache<F>,
    d_out: Array2<F>,
    grads: &mut ModelParams<F>,
) {
    let cfg = &params.config;
    let (len, n_heads, d) = (cache.len, cfg.n_heads, cfg.head_dim());
    let mut dx = d_out;

    for (li, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grads.layers[li];

        let dsum2 = norm_backward(&dx, &lc.ffn_norm, &layer.ffn_norm, &mut g.ffn_norm);
        let mut dmid = dsum2.clone();
        let mut dffn_out = dsum2;
        apply_keep(&mut dffn_out, &lc.ffn_keep);
        let mut dact = linear_backward(&lc.ffn_act, &dffn_out, &layer.ffn_outer, &mut g.ffn_outer);
        dact.zip_mut_with(&lc.ffn_pre, |da, &pre| *da = *da * gelu_grad(pre));
        dmid += &linear_backward(&lc.mid, &dact, &layer.ffn_inner, &mut g.ffn_inner);

        let dsum1 = norm_backward(&dmid, &lc.attn_norm, &layer.attn_norm, &mut g.attn_norm);
        let mut dinput = dsum1.clone();
        let mut dattn = dsum1;
        apply_keep(&mut dattn, &lc.attn_keep);
        let dcontext = linear_backward(&lc.context, &dattn, &layer.output, &mut g.output);

        let shape = lc.q.raw_dim();
        let (mut dq, mut dk, mut dv) = (Array2::zeros(shape.clone()), Array2::zeros(shape.clone()), Array2::zeros(shape.clone()));
        let mut dglobal = lc
            .global
            .as_ref()
            .map(|_| (Array2::zeros(shape.clone()), Array2::zeros(shape.clone()), Array2::zeros(shape)));

        for b in 0..cache.batch {
            for h in 0..n_heads {
                let local = Qkv {
                    q: head_block(&lc.q, b, h, len, d),
                    k: head_block(&lc.k, b, h, len, d),
                    v: head_block(&lc.v, b, h, len, d),
                };
                let gqkv = lc.global.as_ref().map(|(gq, gk, gv)| Qkv {
                    q: head_block(gq, b, h, len, d),
                    k: head_block(gk, b, h, len, d),
                    v: head_block(gv, b, h, len, d),
                });
                let state = &lc.heads[b * n_heads + h];
                let hg = attend_head_backward(&local, gqkv.as_ref(), state, head_block(&dcontext, b, h, len, d));
                let block = s![b * len..(b + 1) * len, h * d..(h + 1) * d];
                dq.slice_mut(block).assign(&hg.dq);
                dk.slice_mut(block).assign(&hg.dk);
                dv.slice_mut(block).assign(&hg.dv);
                if let (Some((gdq, gdk, gdv)), Some((a, bb, c))) = (dglobal.as_mut(), hg.global) {
                    gdq.slice_mut(block).assign(&a);
                    gdk.slice_mut(block).assign(&bb);
                    gdv.slice_mut(block).assign(&c);
                }
            }
        }

        dinput += &linear_backward(&lc.input, &dq, &layer.query, &mut g.query);
        dinput += &linear_backward(&lc.input, &dk, &layer.key, &mut g.key);
        dinput += &linear_backward(&lc.input, &dv, &layer.value, &mut g.value);
        if let (Some((gdq, gdk, gdv)), Some(gp), Some(gg)) = (dglobal, layer.global.as_ref(), g.global.as_mut()) {
            dinput += &linear_backward(&lc.input, &gdq, &gp.query, &mut gg.query);
            dinput += &linear_backward(&lc.input, &gdk, &gp.key, &mut gg.key);
            dinput += &linear_backward(&lc.input, &gdv, &gp.value, &mut gg.value);
        }
        dx = dinput;
    }

    apply_keep(&mut dx, &cache.embed_keep);
    let demb = norm_backward(&dx, &cache.embed_norm, &params.embed_norm, &mut grads.embed_norm);
    for (r, row) in demb.axis_iter(Axis(0)).enumerate() {
        let id = cache.ids[r] as usize;
        let mut tok = grads.token_embedding.row_mut(id);
        tok += &row;
        let mut pos = grads.position_embedding.row_mut(r % len);
        pos += &row;
    }
}

struct MlmHeadCache<F> {
    input: Array2<F>,
    pre: Array2<F>,
    norm: NormCache<F>,
    normed: Array2<F>,
}

fn mlm_head_forward<F: Scalar>(params: &ModelParams<F>, x: Array2<F>) -> (Array2<F>, MlmHeadCache<F>) {
    let head = &params.mlm_head;
    let pre = linear_forward(&x, &head.dense);
    let act = pre.mapv(gelu);
    let (normed, norm) = norm_forward(&act, &head.norm, params.config.layer_norm_eps);
    let mut logits = normed.dot(&params.mlm_output_weight().t());
    logits += &head.decoder_bias;
    (logits, MlmHeadCache { input: x, pre, norm, normed })
}

fn mlm_head_backward<F: Scalar>(
    params: &ModelParams<F>,
    cache: &MlmHeadCache<F>,
    dlogits: &Array2<F>,
    grads: &mut ModelParams<F>,
) -> Array2<F> {
    let head = &params.mlm_head;
    grads.mlm_head.decoder_bias += &dlogits.sum_axis(Axis(0));
    ndarray::linalg::general_mat_mul(F::one(), &dlogits.t(), &cache.normed, F::one(), &mut grads.token_embedding);
    let dnormed = dlogits.dot(params.mlm_output_weight());
    let mut dact = norm_backward(&dnormed, &cache.norm, &head.norm, &mut grads.mlm_head.norm);
    dact.zip_mut_with(&cache.pre, |da, &p| *da = *da * gelu_grad(p));
    linear_backward(&cache.input, &dact, &head.dense, &mut grads.mlm_head.dense)
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy<F: Scalar>(logits: &Array2<F>, targets: &[usize]) -> (F, Array2<F>) {
    let count = cst::<F>(targets.len() as f64);
    let mut grad = logits.clone();
    let mut total = F::zero();
    for (r, (mut row, &target)) in grad.axis_iter_mut(Axis(0)).zip(targets).enumerate() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        total = total + sum.ln() + max - logits[[r, target]];
        row.mapv_inplace(|v| v / sum / count);
        row[target] = row[target] - F::one() / count;
    }
    (total / count, grad)
}

fn labeled_rows(labels: &[i32]) -> (Vec<usize>, Vec<i32>) {
    labels
        .iter()
        .enumerate()
        .filter(|&(_, &l)| l != IGNORE)
        .map(|(r, &l)| (r, l))
        .unzip()
}

fn targets_within(labels: &[i32], classes: usize, what: &str) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            usize::try_from(l)
                .ok()
                .filter(|&l| l < classes)
                .ok_or_else(|| Error::invalid(format!("{what} label {l} outside 0..{classes}")))
        })
        .collect()
}

/// Output of [`forward_mlm`].
#[derive(Debug, Clone)]
pub struct MlmOutput<F> {
    /// `[batch, len, vocab]`.
    pub logits: Array3<F>,
    pub loss: F,
}

/// Full MLM forward: logits at every position and the mean cross-entropy
/// over labelled positions.
pub fn forward_mlm<F: Scalar>(params: &ModelParams<F>, batch: &MaskedBatch, mode: Mode) -> Result<MlmOutput<F>> {
    let (rows, labels) = labeled_rows(&batch.labels);
    if rows.is_empty() {
        return Err(Error::invalid("batch has no labelled positions; loss undefined"));
    }
    let targets = targets_within(&labels, params.config.vocab_size, "MLM")?;
    let (hidden, _) = encode(params, batch, mode)?;
    let (logits, _) = mlm_head_forward(params, hidden);
    let (loss, _) = cross_entropy(&logits.select(Axis(0), &rows), &targets);
    let vocab = params.config.vocab_size;
    let logits = logits
        .into_shape_with_order((batch.batch_size, batch.seq_len, vocab))
        .expect("row-major logits");
    Ok(MlmOutput { logits, loss })
}

/// MLM loss and exact gradients for every parameter tensor.
pub fn mlm_loss_and_grad<F: Scalar>(
    params: &ModelParams<F>,
    batch: &MaskedBatch,
    mode: Mode,
) -> Result<(F, ModelParams<F>)> {
    let (rows, labels) = labeled_rows(&batch.labels);
    if rows.is_empty() {
        return Err(Error::invalid("batch has no labelled positions; loss undefined"));
    }
    let targets = targets_within(&labels, params.config.vocab_size, "MLM")?;
    let (hidden, cache) = encode(params, batch, mode)?;
    let (logits, head_cache) = mlm_head_forward(params, hidden.select(Axis(0), &rows));
    let (loss, dlogits) = cross_entropy(&logits, &targets);

    let mut grads = params.zeros_like();
    let drows = mlm_head_backward(params, &head_cache, &dlogits, &mut grads);
    let mut dhidden = Array2::zeros(hidden.raw_dim());
    for (i, &r) in rows.iter().enumerate() {
        dhidden.row_mut(r).assign(&drows.row(i));
    }
    encode_backward(params, &cache, dhidden, &mut grads);
    Ok((loss, grads))
}

/// MLM loss only, computing the head on labelled positions.
pub fn mlm_loss<F: Scalar>(params: &ModelParams<F>, batch: &MaskedBatch, mode: Mode) -> Result<F> {
    let (rows, labels) = labeled_rows(&batch.labels);
    if rows.is_empty() {
        return Err(Error::invalid("batch has no labelled positions; loss undefined"));
    }
    let targets = targets_within(&labels, params.config.vocab_size, "MLM")?;
    let (hidden, _) = encode(params, batch, mode)?;
    let (logits, _) = mlm_head_forward(params, hidden.select(Axis(0), &rows));
    Ok(cross_entropy(&logits, &targets).0)
}

fn classifier<F: Scalar>(params: &ModelParams<F>) -> Result<&Linear<F>> {
    params
        .classifier
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no token-classification head"))
}

/// Token-classification logits `[batch, len, labels]`.
pub fn forward_classifier<F: Scalar>(params: &ModelParams<F>, batch: &MaskedBatch, mode: Mode) -> Result<Array3<F>> {
    let head = classifier(params)?;
    let (hidden, _) = encode(params, batch, mode)?;
    let logits = linear_forward(&hidden, head);
    let labels = head.bias.len();
    Ok(logits
        .into_shape_with_order((batch.batch_size, batch.seq_len, labels))
        .expect("row-major logits"))
}

/// Token-classification loss over labelled positions and its gradients.
pub fn classifier_loss_and_grad<F: Scalar>(
    params: &ModelParams<F>,
    batch: &MaskedBatch,
    mode: Mode,
) -> Result<(F, ModelParams<F>)> {
    let head = classifier(params)?;
    let (rows, labels) = labeled_rows(&batch.labels);
    if rows.is_empty() {
        return Err(Error::invalid("batch has no labelled positions; loss undefined"));
    }
    let targets = targets_within(&labels, head.bias.len(), "class")?;
    let (hidden, cache) = encode(params, batch, mode)?;
    let mut x = hidden.select(Axis(0), &rows);
    let keep = match mode {
        Mode::Train { seed } if params.config.dropout > 0.0 => {
            let mut rng = seed::rng(seed, &[seed::DROPOUT, 0xC1A5]);
            Some(keep_mask::<F>(x.dim(), params.config.dropout, &mut rng))
        }
        _ => None,
    };
    apply_keep(&mut x, &keep);
    let logits = linear_forward(&x, head);
    let (loss, dlogits) = cross_entropy(&logits, &targets);

    let mut grads = params.zeros_like();
    let mut drows = linear_backward(&x, &dlogits, head, grads.classifier.as_mut().expect("head present"));
    apply_keep(&mut drows, &keep);
    let mut dhidden = Array2::zeros(hidden.raw_dim());
    for (i, &r) in rows.iter().enumerate() {
        dhidden.row_mut(r).assign(&drows.row(i));
    }
    encode_backward(params, &cache, dhidden, &mut grads);
    Ok((loss, grads))
}

/// Final hidden states `[batch * len, hidden]`.
pub fn hidden_states<F: Scalar>(params: &ModelParams<F>, batch: &MaskedBatch) -> Result<Array2<F>> {
    Ok(encode(params, batch, Mode::Eval)?.0)
}
