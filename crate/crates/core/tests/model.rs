mod common;

use common::{finite_difference_check, micro_config, random_instance};
use ear::mask::SequencePlan;
use ear::model::{
    attention_scores, embed_sequence, forward_masked, gradient, training_loss, MaskMode, Matrix,
    ModelConfig, ModelParameters, Precision, TrainingInstance,
};
use ear::schedule::{ScheduleKind, StepSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn odd9() -> SequencePlan {
    SequencePlan::new(&StepSchedule::new(&ScheduleKind::Odd, 9).unwrap())
}

#[test]
fn zero_weights_give_uniform_loss() {
    let cfg = micro_config(Precision::Fp64);
    let params = ModelParameters::<f64>::zeros(&cfg);
    let plan = odd9();
    let inst = TrainingInstance {
        tokens: vec![1, 2, 3, 4, 5, 6, 7, 0, 1],
        class_id: 2,
    };
    let emb = embed_sequence(&params, &plan.layout, &inst.tokens, 2, MaskMode::Unified).unwrap();
    let logits = forward_masked(&params, &emb, &plan.mask, &plan.positions).unwrap();
    assert!(logits.data.iter().all(|&v| v == 0.0));
    let loss = training_loss(&params, &plan, &inst, MaskMode::Unified).unwrap();
    assert!((loss - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn embedding_modes() {
    let cfg = micro_config(Precision::Fp64);
    let params = ModelParameters::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
    let plan = SequencePlan::new(&StepSchedule::from_lengths(vec![1, 3], 4).unwrap());
    let toks = [3, 1, 4, 1];
    let class = embed_sequence(&params, &plan.layout, &toks, 1, MaskMode::Class).unwrap();
    assert_eq!(class.rows, 10);
    for r in 0..4 {
        assert_eq!(class.row(plan.layout.mt_slot(r)), class.row(0));
    }
    let unified = embed_sequence(&params, &plan.layout, &toks, 1, MaskMode::Unified).unwrap();
    for r in 1..4 {
        assert_eq!(
            unified.row(plan.layout.mt_slot(r)),
            unified.row(plan.layout.mt_slot(0))
        );
    }
    assert_eq!(unified.row(0), unified.row(plan.layout.start_b_slot()));
    assert_eq!(
        unified.row(plan.layout.gt_slot(2)),
        params.token_embedding.row(4)
    );
    assert!(embed_sequence(&params, &plan.layout, &[8, 1, 4, 1], 1, MaskMode::Unified).is_err());
    assert!(embed_sequence(&params, &plan.layout, &toks, 3, MaskMode::Unified).is_err());
    assert!(embed_sequence(&params, &plan.layout, &toks[..3], 1, MaskMode::Unified).is_err());
}

#[test]
fn forward_rejects_mismatched_inputs() {
    let cfg = micro_config(Precision::Fp64);
    let params = ModelParameters::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
    let plan = odd9();
    let other = SequencePlan::new(&StepSchedule::new(&ScheduleKind::Ones, 4).unwrap());
    let emb = embed_sequence(&params, &plan.layout, &[0; 9], 0, MaskMode::Unified).unwrap();
    assert!(forward_masked(&params, &emb, &other.mask, &plan.positions).is_err());
    assert!(forward_masked(&params, &emb, &plan.mask, &other.positions).is_err());
    let mut blown = params.clone();
    blown.head.data[0] = f64::INFINITY;
    assert!(matches!(
        forward_masked(&blown, &emb, &plan.mask, &plan.positions),
        Err(ear::EarError::Numeric(_))
    ));
}

/// Softmax cross-entropy recomputed from the logits with plain f64 loops.
#[test]
fn loss_matches_independent_cross_entropy() {
    let cfg = micro_config(Precision::Fp64);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = ModelParameters::<f64>::init(&cfg, &mut rng);
    let plan = odd9();
    for _ in 0..5 {
        let inst = random_instance(&mut rng, 9, 8, 3);
        let emb = embed_sequence(
            &params,
            &plan.layout,
            &inst.tokens,
            inst.class_id,
            MaskMode::Unified,
        )
        .unwrap();
        let logits = forward_masked(&params, &emb, &plan.mask, &plan.positions).unwrap();
        let mut total = 0.0;
        for (rank, &tok) in inst.tokens.iter().enumerate() {
            let row = logits.row(11 + rank);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[tok as usize].exp() / z).ln();
        }
        let want = total / 9.0;
        let got = training_loss(&params, &plan, &inst, MaskMode::Unified).unwrap();
        assert!(
            (got - want).abs() <= 1e-10 * want.abs().max(1.0),
            "{got} vs {want}"
        );
    }
}

#[test]
fn loss_goes_to_zero_with_confident_head() {
    let cfg = ModelConfig {
        vocab_size: 2,
        ..micro_config(Precision::Fp64)
    };
    let mut params = ModelParameters::<f64>::zeros(&cfg);
    params.mask_embedding.data.fill(1.0);
    params.class_embedding.data.fill(1.0);
    let plan = SequencePlan::new(&StepSchedule::new(&ScheduleKind::Ones, 4).unwrap());
    let inst = TrainingInstance {
        tokens: vec![1; 4],
        class_id: 0,
    };
    let mut last = f64::INFINITY;
    for margin in [0.01, 0.1, 1.0] {
        params.head.data.iter_mut().enumerate().for_each(|(i, v)| {
            *v = if i % 2 == 1 { margin } else { -margin };
        });
        let loss = training_loss(&params, &plan, &inst, MaskMode::Unified).unwrap();
        assert!(loss < last);
        last = loss;
    }
    assert!(last < 1e-12);
}

#[test]
fn gradient_matches_finite_differences() {
    let unified = finite_difference_check(MaskMode::Unified, 5);
    assert!(unified < 1e-4, "unified worst rel err {unified}");
    let class = finite_difference_check(MaskMode::Class, 6);
    assert!(class < 1e-4, "class worst rel err {class}");
}

#[test]
fn gradient_batch_properties() {
    let cfg = micro_config(Precision::Fp64);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = ModelParameters::<f64>::init(&cfg, &mut rng);
    let plan = odd9();
    let mut batch: Vec<_> = (0..2).map(|_| random_instance(&mut rng, 9, 8, 2)).collect();
    batch.iter_mut().for_each(|b| b.class_id = 0);
    let (l1, g1) = gradient(&params, &plan, &batch, MaskMode::Unified).unwrap();
    let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
    let (l2, g2) = gradient(&params, &plan, &doubled, MaskMode::Unified).unwrap();
    assert!((l1 - l2).abs() < 1e-14);
    for ((_, a), (_, b)) in g1.named_tensors().iter().zip(g2.named_tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
        }
    }
    // classes 1 and 2 never appear
    assert!(g1.class_embedding.row(1).iter().all(|&v| v == 0.0));
    assert!(g1.class_embedding.row(2).iter().all(|&v| v == 0.0));
    assert!(g1.class_embedding.row(0).iter().any(|&v| v != 0.0));
    assert!(gradient(&params, &plan, &[], MaskMode::Unified).is_err());
}

#[test]
fn forward_is_deterministic() {
    let cfg = micro_config(Precision::Fp32);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = ModelParameters::<f32>::init(&cfg, &mut rng);
    let plan = SequencePlan::new(&StepSchedule::new(&ScheduleKind::Half, 16).unwrap());
    let toks: Vec<u32> = (0..16).map(|i| i % 8).collect();
    let emb = embed_sequence(&params, &plan.layout, &toks, 1, MaskMode::Unified).unwrap();
    let a = forward_masked(&params, &emb, &plan.mask, &plan.positions).unwrap();
    let b = forward_masked(&params, &emb, &plan.mask, &plan.positions).unwrap();
    let bits = |m: &Matrix<f32>| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn rotary_depends_on_relative_position_only() {
    let cfg = micro_config(Precision::Fp32);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ModelParameters::<f32>::init(&cfg, &mut rng);
    let n = 6;
    let mut emb = Matrix::<f32>::zeros(n, 16);
    emb.data
        .iter_mut()
        .for_each(|v| *v = rng.random::<f32>() - 0.5);
    let base: Vec<usize> = vec![0, 1, 2, 5, 7, 11];
    let shifted: Vec<usize> = base.iter().map(|p| p + 13).collect();
    for layer in 0..2 {
        for head in 0..2 {
            let a = attention_scores(&params, layer, head, &emb, &base);
            let b = attention_scores(&params, layer, head, &emb, &shifted);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }
    // position 0 leaves q and k untouched: scores equal the unrotated dot products
    let zeros = vec![0usize; n];
    let mut unrot = params.clone();
    unrot.config.rope_base = 2.0;
    let a = attention_scores(&params, 0, 0, &emb, &zeros);
    let b = attention_scores(&unrot, 0, 0, &emb, &zeros);
    assert_eq!(a, b);
}
