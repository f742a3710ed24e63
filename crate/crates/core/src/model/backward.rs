//! Cross-entropy over mask-token slots and its exact reverse-mode gradient.

use rayon::prelude::*;

use super::forward::{
    embed_inputs, forward_tape, gelu_grad, rope_rotate, slot_inputs, ForwardTape, MaskMode,
    SlotInput,
};
use super::params::{GradientRecord, ModelParameters};
use super::tensor::{dot, Matrix, Real};
use crate::error::{invalid, EarError, Result};
use crate::mask::SequencePlan;

/// One teacher-forced example: rank-ordered tokens plus its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub tokens: Vec<u32>,
    pub class_id: usize,
}

/// `(mean loss, ∂loss/∂logits)` over the MT slots.
fn mt_cross_entropy<F: Real>(
    logits: &Matrix<F>,
    plan: &SequencePlan,
    tokens: &[u32],
) -> (F, Matrix<F>) {
    let layout = &plan.layout;
    let t = layout.tokens();
    let count = F::from_usize(t).unwrap();
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut total = F::zero();
    for (rank, &target) in tokens.iter().enumerate() {
        let slot = layout.mt_slot(rank);
        let row = logits.row(slot);
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total = total + (lse - row[target as usize]);
        for (g, &v) in grad.row_mut(slot).iter_mut().zip(row) {
            *g = (v - lse).exp() / count;
        }
        let g = &mut grad.row_mut(slot)[target as usize];
        *g = *g - F::one() / count;
    }
    (total / count, grad)
}

fn check_instance<F: Real>(
    params: &ModelParameters<F>,
    plan: &SequencePlan,
    inst: &TrainingInstance,
) -> Result<()> {
    if inst.tokens.len() != plan.layout.tokens() {
        return invalid(format!(
            "instance has {} tokens, plan expects {}",
            inst.tokens.len(),
            plan.layout.tokens()
        ));
    }
    if let Some(&bad) = inst
        .tokens
        .iter()
        .find(|&&t| t as usize >= params.config.vocab_size)
    {
        return invalid(format!(
            "token id {bad} out of range 0..{}",
            params.config.vocab_size
        ));
    }
    if inst.class_id >= params.config.num_classes {
        return invalid(format!("class id {} out of range", inst.class_id));
    }
    Ok(())
}

/// Mean cross-entropy between MT-slot logits and the rank-aligned tokens.
/// Start-token and GT-slot logits do not contribute.
pub fn training_loss<F: Real>(
    params: &ModelParameters<F>,
    plan: &SequencePlan,
    inst: &TrainingInstance,
    mode: MaskMode,
) -> Result<F> {
    check_instance(params, plan, inst)?;
    let inputs = slot_inputs(&plan.layout, &inst.tokens, inst.class_id)?;
    let emb = embed_inputs(params, &inputs, inst.class_id, mode)?;
    let tape = forward_tape(params, &emb, &plan.mask, &plan.positions)?;
    let (loss, _) = mt_cross_entropy(&tape.logits, plan, &inst.tokens);
    finite_loss(loss)
}

fn finite_loss<F: Real>(loss: F) -> Result<F> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(EarError::Numeric("non-finite loss".into()))
    }
}

/// Loss and exact gradient for one instance.
pub fn loss_and_gradient<F: Real>(
    params: &ModelParameters<F>,
    plan: &SequencePlan,
    inst: &TrainingInstance,
    mode: MaskMode,
) -> Result<(F, GradientRecord<F>)> {
    check_instance(params, plan, inst)?;
    let inputs = slot_inputs(&plan.layout, &inst.tokens, inst.class_id)?;
    let emb = embed_inputs(params, &inputs, inst.class_id, mode)?;
    let tape = forward_tape(params, &emb, &plan.mask, &plan.positions)?;
    let (loss, dlogits) = mt_cross_entropy(&tape.logits, plan, &inst.tokens);
    let loss = finite_loss(loss)?;
    let grad = backward(params, plan, &tape, dlogits, &inputs, inst.class_id, mode);
    if !grad.is_finite() {
        return Err(EarError::Numeric("non-finite gradient".into()));
    }
    Ok((loss, grad))
}

/// Mean loss and gradient over a batch. Items are evaluated in parallel and
/// reduced in batch order, so the result does not depend on thread count.
pub fn gradient<F: Real>(
    params: &ModelParameters<F>,
    plan: &SequencePlan,
    batch: &[TrainingInstance],
    mode: MaskMode,
) -> Result<(F, GradientRecord<F>)> {
    if batch.is_empty() {
        return invalid("gradient needs a non-empty batch");
    }
    let parts: Vec<(F, GradientRecord<F>)> = batch
        .par_iter()
        .map(|inst| loss_and_gradient(params, plan, inst, mode))
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grad) = iter.next().expect("non-empty");
    for (l, g) in iter {
        loss = loss + l;
        grad.accumulate(&g);
    }
    let inv = F::one() / F::from_usize(batch.len()).unwrap();
    grad.scale(inv);
    Ok((loss * inv, grad))
}

fn rms_norm_backward<F: Real>(
    x: &Matrix<F>,
    inv: &[F],
    gain: &Matrix<F>,
    dy: &Matrix<F>,
    dgain: &mut Matrix<F>,
) -> Matrix<F> {
    let d = F::from_usize(x.cols).unwrap();
    let mut dx = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let (xr, dyr, s) = (x.row(r), dy.row(r), inv[r]);
        for ((dg, &xv), &g) in dgain.data.iter_mut().zip(xr).zip(dyr) {
            *dg = *dg + g * xv * s;
        }
        let dxhat: Vec<F> = dyr.iter().zip(&gain.data).map(|(&a, &b)| a * b).collect();
        let proj = dot(&dxhat, xr) / d;
        for ((o, &dh), &xv) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xr) {
            *o = s * (dh - xv * s * s * proj);
        }
    }
    dx
}

fn sum_rows_into<F: Real>(m: &Matrix<F>, acc: &mut Matrix<F>) {
    for r in 0..m.rows {
        for (a, &v) in acc.data.iter_mut().zip(m.row(r)) {
            *a = *a + v;
        }
    }
}

fn backward<F: Real>(
    params: &ModelParameters<F>,
    plan: &SequencePlan,
    tape: &ForwardTape<F>,
    dlogits: Matrix<F>,
    inputs: &[SlotInput],
    class_id: usize,
    mode: MaskMode,
) -> GradientRecord<F> {
    let cfg = &params.config;
    let hd = cfg.head_dim();
    let heads = cfg.num_heads;
    let n = tape.logits.rows;
    let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
    let mut grad = params.zero_grad();

    tape.hf.t_matmul_acc(&dlogits, &mut grad.head);
    let dhf = dlogits.matmul_t(&params.head);
    let mut dx = rms_norm_backward(
        &tape.x_out,
        &tape.invf,
        &params.final_norm,
        &dhf,
        &mut grad.0.final_norm,
    );

    for (li, lt) in tape.layers.iter().enumerate().rev() {
        let layer = &params.layers[li];
        let g = &mut grad.0.layers[li];
        let fin = &lt.fin;

        // MLP
        fin.a.t_matmul_acc(&dx, &mut g.w2);
        sum_rows_into(&dx, &mut g.b2);
        let da = dx.matmul_t(&layer.w2);
        let du = Matrix::from_vec(
            da.rows,
            da.cols,
            da.data
                .iter()
                .zip(&fin.u.data)
                .map(|(&d, &u)| d * gelu_grad(u))
                .collect(),
        );
        fin.h2.t_matmul_acc(&du, &mut g.w1);
        sum_rows_into(&du, &mut g.b1);
        let dh2 = du.matmul_t(&layer.w1);
        let mut dx_mid = rms_norm_backward(
            &fin.x_mid,
            &fin.inv2,
            &layer.mlp_norm,
            &dh2,
            &mut g.mlp_norm,
        );
        dx_mid.add_assign(&dx);

        // attention output projection
        lt.concat.t_matmul_acc(&dx_mid, &mut g.wo);
        let dconcat = dx_mid.matmul_t(&layer.wo);

        let proj = &lt.proj;
        let mut dq = Matrix::zeros(n, cfg.model_dim);
        let mut dk = Matrix::zeros(n, cfg.model_dim);
        let mut dv = Matrix::zeros(n, cfg.model_dim);
        let mut dp = vec![F::zero(); n];
        for h in 0..heads {
            let span = h * hd..(h + 1) * hd;
            for i in 0..n {
                let prow = &lt.probs[(h * n + i) * n..(h * n + i + 1) * n];
                let dout = &dconcat.row(i)[span.clone()];
                let mut weighted = F::zero();
                for j in 0..n {
                    if prow[j] == F::zero() {
                        dp[j] = F::zero();
                        continue;
                    }
                    dp[j] = dot(dout, &proj.v.row(j)[span.clone()]);
                    weighted = weighted + prow[j] * dp[j];
                    for (o, &dvv) in dv.row_mut(j)[span.clone()].iter_mut().zip(dout) {
                        *o = *o + prow[j] * dvv;
                    }
                }
                for j in 0..n {
                    if prow[j] == F::zero() {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    let kj = &proj.k.row(j)[span.clone()];
                    for (o, &kv) in dq.row_mut(i)[span.clone()].iter_mut().zip(kj) {
                        *o = *o + ds * kv;
                    }
                    let qi = &proj.q.row(i)[span.clone()];
                    for (o, &qv) in dk.row_mut(j)[span.clone()].iter_mut().zip(qi) {
                        *o = *o + ds * qv;
                    }
                }
            }
        }
        for (r, &pos) in plan.positions.0.iter().enumerate() {
            rope_rotate(dq.row_mut(r), pos, hd, cfg.rope_base, true);
            rope_rotate(dk.row_mut(r), pos, hd, cfg.rope_base, true);
        }
        proj.h.t_matmul_acc(&dq, &mut g.wq);
        proj.h.t_matmul_acc(&dk, &mut g.wk);
        proj.h.t_matmul_acc(&dv, &mut g.wv);
        let mut dh = dq.matmul_t(&layer.wq);
        dh.add_assign(&dk.matmul_t(&layer.wk));
        dh.add_assign(&dv.matmul_t(&layer.wv));
        let mut dx_in =
            rms_norm_backward(&lt.x_in, &proj.inv, &layer.attn_norm, &dh, &mut g.attn_norm);
        dx_in.add_assign(&dx_mid);
        dx = dx_in;
    }

    for (slot, &input) in inputs.iter().enumerate() {
        let target = match (input, mode) {
            (SlotInput::Class(c), _) => grad.0.class_embedding.row_mut(c),
            (SlotInput::Token(t), _) => grad.0.token_embedding.row_mut(t as usize),
            (SlotInput::Mask, MaskMode::Unified) => grad.0.mask_embedding.row_mut(0),
            (SlotInput::Mask, MaskMode::Class) => grad.0.class_embedding.row_mut(class_id),
        };
        for (o, &v) in target.iter_mut().zip(dx.row(slot)) {
            *o = *o + v;
        }
    }
    grad
}

/// Teacher-forced argmax predictions at every MT slot, in rank order.
pub fn teacher_forced_predictions<F: Real>(
    params: &ModelParameters<F>,
    plan: &SequencePlan,
    inst: &TrainingInstance,
    mode: MaskMode,
) -> Result<Vec<u32>> {
    check_instance(params, plan, inst)?;
    let inputs = slot_inputs(&plan.layout, &inst.tokens, inst.class_id)?;
    let emb = embed_inputs(params, &inputs, inst.class_id, mode)?;
    let tape = forward_tape(params, &emb, &plan.mask, &plan.positions)?;
    Ok((0..plan.layout.tokens())
        .map(|r| argmax(tape.logits.row(plan.layout.mt_slot(r))) as u32)
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
