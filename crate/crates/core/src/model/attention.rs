//! Scaled dot-product attention under dense or sliding-window masks.
//!
//! Sliding attention is computed as dense attention restricted by a band
//! mask, so memory stays `O(L^2)`; at desk scale that is acceptable.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::config::AttentionKind;
use super::params::keep_mask;
use super::Scalar;
use crate::error::{Error, Result};
use crate::seed;

/// Which keys each query may attend to for one input row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
    global: Vec<bool>,
}

impl AttentionMask {
    /// `real[s]` is false for padding keys, which are never attended.
    pub fn new(kind: &AttentionKind, real: &[bool]) -> Result<Self> {
        let len = real.len();
        let mut global = vec![false; len];
        let allowed = match kind {
            AttentionKind::Dense => (0..len * len).map(|i| real[i % len]).collect(),
            AttentionKind::Sliding { window, global: positions } => {
                if *window < 2 || window % 2 != 0 {
                    return Err(Error::invalid(format!("sliding window must be even and >= 2, got {window}")));
                }
                for &g in positions {
                    if g >= len {
                        return Err(Error::invalid(format!(
                            "global position {g} out of range for length {len}"
                        )));
                    }
                    global[g] = true;
                }
                let half = window / 2;
                let mut allowed = vec![false; len * len];
                for t in 0..len {
                    for s in 0..len {
                        allowed[t * len + s] =
                            real[s] && (t.abs_diff(s) <= half || global[t] || global[s]);
                    }
                }
                allowed
            }
        };
        Ok(AttentionMask { len, allowed, global })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }

    pub fn is_global(&self, t: usize) -> bool {
        self.global[t]
    }

    pub fn global_rows(&self) -> Vec<usize> {
        (0..self.len).filter(|&t| self.global[t]).collect()
    }

    /// Keys visible from `query`, ascending.
    pub fn support(&self, query: usize) -> Vec<usize> {
        (0..self.len).filter(|&s| self.allowed(query, s)).collect()
    }
}

/// Query/key/value rows of one head, `[L x d]` each.
#[derive(Debug, Clone, Copy)]
pub struct Qkv<'a, F> {
    pub q: ArrayView2<'a, F>,
    pub k: ArrayView2<'a, F>,
    pub v: ArrayView2<'a, F>,
}

/// What the backward pass needs from one head's forward pass.
#[derive(Debug, Clone)]
pub struct HeadState<F> {
    /// Softmax weights of the local projections. Rows served by the global
    /// projections are zero.
    pub probs: Array2<F>,
    pub keep: Option<Array2<F>>,
    /// Rows computed with the global projections, in ascending order.
    pub global_rows: Vec<usize>,
    /// `[global_rows x L]` weights of the global projections.
    pub global_probs: Option<Array2<F>>,
    pub global_keep: Option<Array2<F>>,
}

fn masked_softmax_row<F: Scalar>(mut row: ndarray::ArrayViewMut1<F>, mask: &AttentionMask, query: usize) {
    let mut max = F::neg_infinity();
    for (s, &x) in row.iter().enumerate() {
        if mask.allowed(query, s) && x > max {
            max = x;
        }
    }
    if max == F::neg_infinity() {
        row.fill(F::zero());
        return;
    }
    let mut sum = F::zero();
    for (s, x) in row.iter_mut().enumerate() {
        if mask.allowed(query, s) {
            *x = (*x - max).exp();
            sum = sum + *x;
        } else {
            *x = F::zero();
        }
    }
    row.mapv_inplace(|x| x / sum);
}

/// Forward pass of one head.
///
/// When `global` is given, rows flagged global in `mask` use those
/// projections against every key; otherwise all rows use `local`.
pub fn attend_head<F: Scalar>(
    local: &Qkv<'_, F>,
    global: Option<&Qkv<'_, F>>,
    mask: &AttentionMask,
    dropout: Option<(f64, &mut seed::Rng)>,
) -> (Array2<F>, HeadState<F>) {
    let len = mask.len();
    let scale = F::from_f64(1.0 / (local.q.ncols() as f64).sqrt()).expect("finite");
    let global_rows = if global.is_some() { mask.global_rows() } else { Vec::new() };

    let mut probs = local.q.dot(&local.k.t()) * scale;
    for (t, row) in probs.axis_iter_mut(Axis(0)).enumerate() {
        if global_rows.binary_search(&t).is_ok() {
            let mut row = row;
            row.fill(F::zero());
        } else {
            masked_softmax_row(row, mask, t);
        }
    }

    let (keep, global_keep) = match dropout {
        Some((p, rng)) if p > 0.0 => {
            let keep = keep_mask::<F>((len, len), p, rng);
            let gkeep = (!global_rows.is_empty()).then(|| keep_mask::<F>((global_rows.len(), len), p, rng));
            (Some(keep), gkeep)
        }
        _ => (None, None),
    };

    let mut context = match &keep {
        Some(k) => (&probs * k).dot(&local.v),
        None => probs.dot(&local.v),
    };

    let global_probs = global.filter(|_| !global_rows.is_empty()).map(|g| {
        let gq = g.q.select(Axis(0), &global_rows);
        let mut gp = gq.dot(&g.k.t()) * scale;
        for (i, row) in gp.axis_iter_mut(Axis(0)).enumerate() {
            masked_softmax_row(row, mask, global_rows[i]);
        }
        let gctx = match &global_keep {
            Some(k) => (&gp * k).dot(&g.v),
            None => gp.dot(&g.v),
        };
        for (i, &t) in global_rows.iter().enumerate() {
            context.row_mut(t).assign(&gctx.row(i));
        }
        gp
    });

    (
        context,
        HeadState {
            probs,
            keep,
            global_rows,
            global_probs,
            global_keep,
        },
    )
}

/// Gradients of one head with respect to its inputs.
pub struct HeadGrads<F> {
    pub dq: Array2<F>,
    pub dk: Array2<F>,
    pub dv: Array2<F>,
    /// `(dq, dk, dv)` of the global projections, full `[L x d]`.
    pub global: Option<(Array2<F>, Array2<F>, Array2<F>)>,
}

fn softmax_backward<F: Scalar>(probs: &Array2<F>, dprobs: &Array2<F>) -> Array2<F> {
    let mut ds = probs * dprobs;
    let dots: Array1<F> = ds.sum_axis(Axis(1));
    for (mut row, (p_row, &dot)) in ds.axis_iter_mut(Axis(0)).zip(probs.axis_iter(Axis(0)).zip(dots.iter())) {
        row.zip_mut_with(&p_row, |d, &p| *d = *d - p * dot);
    }
    ds
}

pub fn attend_head_backward<F: Scalar>(
    local: &Qkv<'_, F>,
    global: Option<&Qkv<'_, F>>,
    state: &HeadState<F>,
    dcontext: ArrayView2<'_, F>,
) -> HeadGrads<F> {
    let scale = F::from_f64(1.0 / (local.q.ncols() as f64).sqrt()).expect("finite");

    let used = match &state.keep {
        Some(k) => &state.probs * k,
        None => state.probs.clone(),
    };
    let dv = used.t().dot(&dcontext);
    let mut dprobs = dcontext.dot(&local.v.t());
    if let Some(k) = &state.keep {
        dprobs *= k;
    }
    let ds = softmax_backward(&state.probs, &dprobs) * scale;
    let dq = ds.dot(&local.k);
    let dk = ds.t().dot(&local.q);

    let global = match (global, &state.global_probs) {
        (Some(g), Some(gp)) => {
            let rows = &state.global_rows;
            let dctx_g = dcontext.select(Axis(0), rows);
            let used = match &state.global_keep {
                Some(k) => gp * k,
                None => gp.clone(),
            };
            let dvg = used.t().dot(&dctx_g);
            let mut dp = dctx_g.dot(&g.v.t());
            if let Some(k) = &state.global_keep {
                dp *= k;
            }
            let ds = softmax_backward(gp, &dp) * scale;
            let dq_rows = ds.dot(&g.k);
            let mut dqg = Array2::zeros(g.q.raw_dim());
            for (i, &t) in rows.iter().enumerate() {
                dqg.row_mut(t).assign(&dq_rows.row(i));
            }
            let gq = g.q.select(Axis(0), rows);
            let dkg = ds.t().dot(&gq);
            Some((dqg, dkg, dvg))
        }
        _ => None,
    };

    HeadGrads { dq, dk, dv, global }
}

/// Output of [`attention`].
#[derive(Debug, Clone)]
pub struct AttentionOutput<F> {
    pub context: Array2<F>,
    /// Row `t` holds the weights query `t` places on each key.
    pub weights: Array2<F>,
}

/// Single-head attention with shared projections for every row.
///
/// Dense: `softmax(q k^T / sqrt(d)) v` with padding keys excluded. Sliding:
/// the same restricted to `|t - s| <= window / 2`, widened to full rows and
/// columns for global positions.
pub fn attention<'a, F: Scalar>(
    q: ArrayView2<'a, F>,
    k: ArrayView2<'a, F>,
    v: ArrayView2<'a, F>,
    kind: &AttentionKind,
    real: &[bool],
) -> Result<AttentionOutput<F>> {
    let len = q.nrows();
    if k.nrows() != len || v.nrows() != len || real.len() != len || q.ncols() != k.ncols() {
        return Err(Error::Shape(format!(
            "attention inputs disagree: q {:?}, k {:?}, v {:?}, mask {}",
            q.dim(),
            k.dim(),
            v.dim(),
            real.len()
        )));
    }
    let mask = AttentionMask::new(kind, real)?;
    let (context, state) = attend_head(&Qkv { q, k, v }, None, &mask, None);
    Ok(AttentionOutput {
        context,
        weights: state.probs,
    })
}

/// Splits `[rows x hidden]` into the `[L x d]` block of batch row `b`, head `h`.
pub(crate) fn head_block<F>(m: &Array2<F>, b: usize, h: usize, len: usize, d: usize) -> ArrayView2<'_, F> {
    m.slice(s![b * len..(b + 1) * len, h * d..(h + 1) * d])
}
