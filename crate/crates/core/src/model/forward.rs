//! Masked forward pass: pre-norm blocks, rotary attention, GELU MLP.
//!
//! The per-layer pieces ([`project`], [`attend`], [`finish_block`]) are
//! shared with the incremental KV-cache path so both compute every row with
//! the same sequence of floating-point operations.

use super::params::{LayerParams, ModelParameters};
use super::tensor::{dot, Matrix, Real};
use crate::error::{invalid, EarError, Result};
use crate::mask::{EarAttentionMask, PositionIds, SequenceLayout, SlotRole};

pub(crate) const NORM_EPS: f64 = 1e-6;
const GELU_COEF: f64 = 0.044_715;

/// Which embedding fills the mask-token slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// A single learned mask row shared by every class.
    #[default]
    Unified,
    /// The class embedding row (the start token) doubles as the mask token.
    Class,
}

impl std::str::FromStr for MaskMode {
    type Err = EarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(MaskMode::Unified),
            "class" => Ok(MaskMode::Class),
            _ => invalid(format!("unknown mask mode {s:?}")),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Unified => "unified",
            MaskMode::Class => "class",
        })
    }
}

/// Input row for one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotInput {
    Class(usize),
    Token(u32),
    Mask,
}

pub(crate) fn embedding_row<F: Real>(
    params: &ModelParameters<F>,
    input: SlotInput,
    class_id: usize,
    mode: MaskMode,
) -> Result<&[F]> {
    let cfg = &params.config;
    match input {
        SlotInput::Class(c) => {
            if c >= cfg.num_classes {
                return invalid(format!("class id {c} out of range 0..{}", cfg.num_classes));
            }
            Ok(params.class_embedding.row(c))
        }
        SlotInput::Token(t) => {
            if t as usize >= cfg.vocab_size {
                return invalid(format!("token id {t} out of range 0..{}", cfg.vocab_size));
            }
            Ok(params.token_embedding.row(t as usize))
        }
        SlotInput::Mask => match mode {
            MaskMode::Unified => Ok(params.mask_embedding.row(0)),
            MaskMode::Class => embedding_row(params, SlotInput::Class(class_id), class_id, mode),
        },
    }
}

pub(crate) fn slot_inputs(
    layout: &SequenceLayout,
    gt_tokens: &[u32],
    class_id: usize,
) -> Result<Vec<SlotInput>> {
    if gt_tokens.len() != layout.tokens() {
        return invalid(format!(
            "expected {} ground-truth tokens, got {}",
            layout.tokens(),
            gt_tokens.len()
        ));
    }
    Ok(layout
        .roles()
        .iter()
        .map(|role| match *role {
            SlotRole::StartA | SlotRole::StartB => SlotInput::Class(class_id),
            SlotRole::Gt(r) => SlotInput::Token(gt_tokens[r]),
            SlotRole::Mt(_) => SlotInput::Mask,
        })
        .collect())
}

pub(crate) fn embed_inputs<F: Real>(
    params: &ModelParameters<F>,
    inputs: &[SlotInput],
    class_id: usize,
    mode: MaskMode,
) -> Result<Matrix<F>> {
    let d = params.config.model_dim;
    let mut out = Matrix::zeros(inputs.len(), d);
    for (i, &input) in inputs.iter().enumerate() {
        out.row_mut(i)
            .copy_from_slice(embedding_row(params, input, class_id, mode)?);
    }
    Ok(out)
}

/// Slot embeddings for a training sequence: class rows at both start slots,
/// token rows at GT slots, mask rows at MT slots.
pub fn embed_sequence<F: Real>(
    params: &ModelParameters<F>,
    layout: &SequenceLayout,
    gt_tokens: &[u32],
    class_id: usize,
    mode: MaskMode,
) -> Result<Matrix<F>> {
    let inputs = slot_inputs(layout, gt_tokens, class_id)?;
    embed_inputs(params, &inputs, class_id, mode)
}

pub(crate) fn rms_norm<F: Real>(x: &Matrix<F>, gain: &Matrix<F>) -> (Matrix<F>, Vec<F>) {
    let d = F::from_usize(x.cols).unwrap();
    let eps = F::of(NORM_EPS);
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let ms = dot(row, row) / d;
        let s = F::one() / (ms + eps).sqrt();
        inv.push(s);
        for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(&gain.data) {
            *o = v * s * g;
        }
    }
    (out, inv)
}

/// Per-pair rotation angles are computed in `f64` then rounded, so a given
/// position always yields the same `(cos, sin)` regardless of batch shape.
pub(crate) fn rope_rotate<F: Real>(
    row: &mut [F],
    position: usize,
    head_dim: usize,
    base: f64,
    inverse: bool,
) {
    if position == 0 {
        return;
    }
    let half = head_dim / 2;
    for p in 0..half {
        let freq = base.powf(-2.0 * p as f64 / head_dim as f64);
        let angle = position as f64 * freq;
        let (sin, cos) = angle.sin_cos();
        let (sin, cos) = (F::of(if inverse { -sin } else { sin }), F::of(cos));
        for head in row.chunks_exact_mut(head_dim) {
            let (a, b) = (head[2 * p], head[2 * p + 1]);
            head[2 * p] = a * cos - b * sin;
            head[2 * p + 1] = a * sin + b * cos;
        }
    }
}

pub(crate) fn gelu<F: Real>(u: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let half = F::of(0.5);
    half * u * (F::one() + (c * (u + F::of(GELU_COEF) * u * u * u)).tanh())
}

pub(crate) fn gelu_grad<F: Real>(u: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(GELU_COEF);
    let half = F::of(0.5);
    let t = (c * (u + k * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * u * u)
}

pub(crate) struct Projected<F> {
    pub inv: Vec<F>,
    pub h: Matrix<F>,
    pub q: Matrix<F>,
    pub k: Matrix<F>,
    pub v: Matrix<F>,
}

/// Attention pre-norm, q/k/v projections, rotary on q and k.
pub(crate) fn project<F: Real>(
    layer: &LayerParams<F>,
    x: &Matrix<F>,
    positions: &[usize],
    head_dim: usize,
    rope_base: f64,
) -> Projected<F> {
    let (h, inv) = rms_norm(x, &layer.attn_norm);
    let mut q = h.matmul(&layer.wq);
    let mut k = h.matmul(&layer.wk);
    let v = h.matmul(&layer.wv);
    for (r, &pos) in positions.iter().enumerate() {
        rope_rotate(q.row_mut(r), pos, head_dim, rope_base, false);
        rope_rotate(k.row_mut(r), pos, head_dim, rope_base, false);
    }
    Projected { inv, h, q, k, v }
}

/// Multi-head attention of `q` rows over `keys`/`values` rows, restricted to
/// pairs with `visible(query, key)`. Keys are visited in index order and
/// hidden keys contribute nothing. Returns the concatenated head outputs and
/// the dense probability tensor `[head][query][key]`.
pub(crate) fn attend<F: Real>(
    q: &Matrix<F>,
    keys: &Matrix<F>,
    values: &Matrix<F>,
    num_heads: usize,
    visible: impl Fn(usize, usize) -> bool,
) -> Result<(Matrix<F>, Vec<F>)> {
    let d = q.cols;
    let hd = d / num_heads;
    let nq = q.rows;
    let nk = keys.rows;
    let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
    let mut out = Matrix::zeros(nq, d);
    let mut probs = vec![F::zero(); num_heads * nq * nk];
    let mut scores = vec![F::zero(); nk];
    for i in 0..nq {
        let idx: Vec<usize> = (0..nk).filter(|&j| visible(i, j)).collect();
        if idx.is_empty() {
            return Err(EarError::Numeric(format!(
                "query row {i} has no visible keys"
            )));
        }
        for h in 0..num_heads {
            let span = h * hd..(h + 1) * hd;
            let qh = &q.row(i)[span.clone()];
            let mut max = F::neg_infinity();
            for &j in &idx {
                let s = dot(qh, &keys.row(j)[span.clone()]) * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let mut sum = F::zero();
            for &j in &idx {
                let e = (scores[j] - max).exp();
                scores[j] = e;
                sum = sum + e;
            }
            let prow = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let orow = &mut out.row_mut(i)[span.clone()];
            for &j in &idx {
                let p = scores[j] / sum;
                prow[j] = p;
                for (o, &v) in orow.iter_mut().zip(&values.row(j)[span.clone()]) {
                    *o = *o + p * v;
                }
            }
        }
    }
    Ok((out, probs))
}

pub(crate) struct Finished<F> {
    pub x_mid: Matrix<F>,
    pub inv2: Vec<F>,
    pub h2: Matrix<F>,
    pub u: Matrix<F>,
    pub a: Matrix<F>,
    pub x_out: Matrix<F>,
}

/// Output projection + residual, then the MLP sub-block + residual.
pub(crate) fn finish_block<F: Real>(
    layer: &LayerParams<F>,
    x_in: &Matrix<F>,
    concat: &Matrix<F>,
) -> Finished<F> {
    let mut x_mid = concat.matmul(&layer.wo);
    for (m, &x) in x_mid.data.iter_mut().zip(&x_in.data) {
        *m = x + *m;
    }
    let (h2, inv2) = rms_norm(&x_mid, &layer.mlp_norm);
    let mut u = h2.matmul(&layer.w1);
    for r in 0..u.rows {
        for (v, &b) in u.row_mut(r).iter_mut().zip(&layer.b1.data) {
            *v = *v + b;
        }
    }
    let a = Matrix::from_vec(u.rows, u.cols, u.data.iter().map(|&v| gelu(v)).collect());
    let mut x_out = a.matmul(&layer.w2);
    for r in 0..x_out.rows {
        let mid = x_mid.row(r);
        for ((o, &m), &b) in x_out.row_mut(r).iter_mut().zip(mid).zip(&layer.b2.data) {
            *o = m + (*o + b);
        }
    }
    Finished {
        x_mid,
        inv2,
        h2,
        u,
        a,
        x_out,
    }
}

pub(crate) fn output_head<F: Real>(
    params: &ModelParameters<F>,
    x: &Matrix<F>,
) -> (Matrix<F>, Vec<F>, Matrix<F>) {
    let (hf, invf) = rms_norm(x, &params.final_norm);
    let logits = hf.matmul(&params.head);
    (hf, invf, logits)
}

pub(crate) fn ensure_finite<F: Real>(m: &Matrix<F>, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(EarError::Numeric(format!("non-finite values in {what}")))
    }
}

pub(crate) struct LayerTape<F> {
    pub x_in: Matrix<F>,
    pub proj: Projected<F>,
    pub probs: Vec<F>,
    pub concat: Matrix<F>,
    pub fin: Finished<F>,
}

/// Activations kept for the backward pass.
pub(crate) struct ForwardTape<F> {
    pub layers: Vec<LayerTape<F>>,
    pub x_out: Matrix<F>,
    pub invf: Vec<F>,
    pub hf: Matrix<F>,
    pub logits: Matrix<F>,
}

pub(crate) fn forward_tape<F: Real>(
    params: &ModelParameters<F>,
    embeddings: &Matrix<F>,
    mask: &EarAttentionMask,
    positions: &PositionIds,
) -> Result<ForwardTape<F>> {
    let cfg = &params.config;
    let n = embeddings.rows;
    if embeddings.cols != cfg.model_dim {
        return invalid(format!(
            "embedding width {} does not match model_dim {}",
            embeddings.cols, cfg.model_dim
        ));
    }
    if mask.size() != n || positions.0.len() != n {
        return invalid(format!(
            "sequence of {n} slots does not match mask ({}) / positions ({})",
            mask.size(),
            positions.0.len()
        ));
    }
    let hd = cfg.head_dim();
    let mut x = embeddings.clone();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (li, layer) in params.layers.iter().enumerate() {
        let proj = project(layer, &x, &positions.0, hd, cfg.rope_base);
        let (concat, probs) = attend(&proj.q, &proj.k, &proj.v, cfg.num_heads, |i, j| {
            mask.allowed(i, j)
        })?;
        let fin = finish_block(layer, &x, &concat);
        ensure_finite(&fin.x_out, &format!("layer {li} output"))?;
        let next = fin.x_out.clone();
        layers.push(LayerTape {
            x_in: x,
            proj,
            probs,
            concat,
            fin,
        });
        x = next;
    }
    let (hf, invf, logits) = output_head(params, &x);
    ensure_finite(&logits, "logits")?;
    Ok(ForwardTape {
        layers,
        x_out: x,
        invf,
        hf,
        logits,
    })
}

/// Logits (one `V`-wide row per slot) under an arbitrary boolean mask.
pub fn forward_masked<F: Real>(
    params: &ModelParameters<F>,
    embeddings: &Matrix<F>,
    mask: &EarAttentionMask,
    positions: &PositionIds,
) -> Result<Matrix<F>> {
    Ok(forward_tape(params, embeddings, mask, positions)?.logits)
}

/// Raw pre-softmax attention scores of one head in one layer, for
/// inspecting positional behaviour. Scores are `q·k/√d_head` over all pairs.
pub fn attention_scores<F: Real>(
    params: &ModelParameters<F>,
    layer: usize,
    head: usize,
    embeddings: &Matrix<F>,
    positions: &[usize],
) -> Matrix<F> {
    let cfg = &params.config;
    let hd = cfg.head_dim();
    let proj = project(
        &params.layers[layer],
        embeddings,
        positions,
        hd,
        cfg.rope_base,
    );
    let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
    let span = head * hd..(head + 1) * hd;
    let n = embeddings.rows;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.data[i * n + j] =
                dot(&proj.q.row(i)[span.clone()], &proj.k.row(j)[span.clone()]) * scale;
        }
    }
    out
}
