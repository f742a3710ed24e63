//! Step, token and FLOPs accounting for next-token, next-scale and
//! expanding (next-any-tokens) decoding.
//!
//! For a step that runs `B` query tokens against a context of `L` keys, the
//! estimate is
//!
//! ```text
//! layers · (8·B·d² + 4·B·L·d + 4·B·d·h) + 2·B·d·V
//! ```
//!
//! (q/k/v/o projections, scores plus weighted values, two MLP matmuls with
//! hidden width `h`, and the output head). Embedding lookups and norms are
//! not counted. KV memory is `2 · layers · d · peak_context` scalars.

use std::io::Write;

use crate::error::{invalid, Result};
use crate::model::ModelConfig;
use crate::schedule::StepSchedule;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParadigmSpec {
    /// One token per step after the start token.
    NextToken {
        tokens: usize,
    },
    /// Token count of every scale, coarse to fine.
    NextScale {
        scale_tokens: Vec<usize>,
    },
    Ear(StepSchedule),
}

impl ParadigmSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ParadigmSpec::NextToken { .. } => "next_token",
            ParadigmSpec::NextScale { .. } => "next_scale",
            ParadigmSpec::Ear(_) => "ear",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ParadigmSpec::NextToken { tokens } if *tokens == 0 => {
                invalid("token count must be positive")
            }
            ParadigmSpec::NextScale { scale_tokens }
                if scale_tokens.is_empty() || scale_tokens.contains(&0) =>
            {
                invalid("scale sizes must be a non-empty list of positive counts")
            }
            _ => Ok(()),
        }
    }

    /// `(query tokens, context length)` of every decoding step.
    pub fn step_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            // step s feeds the start token or token s-1 against s keys
            ParadigmSpec::NextToken { tokens } => (1..=*tokens).map(|s| (1, s)).collect(),
            ParadigmSpec::NextScale { scale_tokens } => scale_tokens
                .iter()
                .scan(0, |ctx, &r| {
                    *ctx += r;
                    Some((r, *ctx))
                })
                .collect(),
            // step 1 feeds [start, masks]; later steps re-feed the previous
            // step's tokens as GT plus the new masks
            ParadigmSpec::Ear(s) => (1..=s.num_steps())
                .map(|k| {
                    let cur = s.lengths()[k - 1];
                    let queries = if k == 1 {
                        1 + cur
                    } else {
                        s.lengths()[k - 2] + cur
                    };
                    (queries, 1 + s.offsets()[k - 1] + cur)
                })
                .collect(),
        }
    }

    /// Tokens the model is asked to predict (mask queries for EAR).
    pub fn predicted_tokens(&self) -> usize {
        match self {
            ParadigmSpec::NextToken { tokens } => *tokens,
            ParadigmSpec::NextScale { scale_tokens } => scale_tokens.iter().sum(),
            ParadigmSpec::Ear(s) => s.lengths().iter().sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub steps: usize,
    /// Query tokens summed over all steps.
    pub tokens: usize,
    pub peak_context: usize,
    pub flops: u64,
    pub kv_entries: u64,
}

pub fn count_steps(spec: &ParadigmSpec) -> usize {
    match spec {
        ParadigmSpec::NextToken { tokens } => *tokens,
        ParadigmSpec::NextScale { scale_tokens } => scale_tokens.len(),
        ParadigmSpec::Ear(s) => s.num_steps(),
    }
}

/// FLOPs of one step with `b` queries over `l` keys.
pub fn step_flops(config: &ModelConfig, b: usize, l: usize) -> u64 {
    let (b, l) = (b as u64, l as u64);
    let d = config.model_dim as u64;
    let h = config.mlp_hidden_dim as u64;
    let v = config.vocab_size as u64;
    let layers = config.num_layers as u64;
    layers * (8 * b * d * d + 4 * b * l * d + 4 * b * d * h) + 2 * b * d * v
}

pub fn flops_estimate(spec: &ParadigmSpec, config: &ModelConfig) -> Result<CostReport> {
    spec.validate()?;
    let shapes = spec.step_shapes();
    let tokens = shapes.iter().map(|&(b, _)| b).sum();
    let peak_context = shapes.iter().map(|&(_, l)| l).max().unwrap_or(0);
    let flops = shapes.iter().map(|&(b, l)| step_flops(config, b, l)).sum();
    let kv_entries = 2 * config.num_layers as u64 * config.model_dim as u64 * peak_context as u64;
    Ok(CostReport {
        steps: count_steps(spec),
        tokens,
        peak_context,
        flops,
        kv_entries,
    })
}

/// Square-grid scale list from side lengths (`[1, 2, 3]` → `[1, 4, 9]`).
pub fn scales_from_sides(sides: &[usize]) -> Vec<usize> {
    sides.iter().map(|s| s * s).collect()
}

/// `paradigm,steps,tokens,peak_ctx,flops,kv_entries` CSV.
pub fn write_comparison<W: Write>(rows: &[(String, CostReport)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "paradigm",
        "steps",
        "tokens",
        "peak_ctx",
        "flops",
        "kv_entries",
    ])?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            r.steps.to_string(),
            r.tokens.to_string(),
            r.peak_context.to_string(),
            r.flops.to_string(),
            r.kv_entries.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn unit() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 1,
            model_dim: 2,
            mlp_hidden_dim: 8,
            vocab_size: 3,
            ..Default::default()
        }
    }

    #[test]
    fn step_counts() {
        assert_eq!(count_steps(&ParadigmSpec::NextToken { tokens: 256 }), 256);
        let half = StepSchedule::new(&ScheduleKind::Half, 256).unwrap();
        assert_eq!(count_steps(&ParadigmSpec::Ear(half)), 31);
        let scales = ParadigmSpec::NextScale {
            scale_tokens: scales_from_sides(&[1, 2, 3, 4, 5, 6, 8, 10, 13, 16]),
        };
        assert_eq!(count_steps(&scales), 10);
    }

    #[test]
    fn single_step_formula() {
        // d=2, h=8, V=3, one layer: 8·4 + 4·2 + 4·2·8 + 2·2·3
        assert_eq!(step_flops(&unit(), 1, 1), 32 + 8 + 64 + 12);
        let r = flops_estimate(&ParadigmSpec::NextToken { tokens: 1 }, &unit()).unwrap();
        assert_eq!(r.flops, 116);
        assert_eq!(
            (r.steps, r.tokens, r.peak_context, r.kv_entries),
            (1, 1, 1, 4)
        );
    }

    #[test]
    fn ear_query_accounting() {
        for kind in [ScheduleKind::Odd, ScheduleKind::Half, ScheduleKind::Ones] {
            let s = StepSchedule::new(&kind, 64).unwrap();
            let last = *s.lengths().last().unwrap();
            let spec = ParadigmSpec::Ear(s);
            let r = flops_estimate(&spec, &ModelConfig::default()).unwrap();
            assert_eq!(r.tokens, 1 + 64 + (64 - last));
            assert_eq!(r.peak_context, 65);
            assert_eq!(spec.predicted_tokens(), 64);
        }
    }

    #[test]
    fn next_scale_totals() {
        let spec = ParadigmSpec::NextScale {
            scale_tokens: vec![1, 4, 9],
        };
        let r = flops_estimate(&spec, &unit()).unwrap();
        assert_eq!(r.tokens, 14);
        assert_eq!(r.peak_context, 14);
        assert!(flops_estimate(
            &ParadigmSpec::NextScale {
                scale_tokens: vec![]
            },
            &unit()
        )
        .is_err());
        assert!(flops_estimate(&ParadigmSpec::NextToken { tokens: 0 }, &unit()).is_err());
    }
}
