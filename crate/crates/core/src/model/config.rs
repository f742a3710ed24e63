use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, EarError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Fp32,
    Fp64,
}

impl FromStr for Precision {
    type Err = EarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(Precision::Fp32),
            "fp64" => Ok(Precision::Fp64),
            _ => invalid(format!("unknown precision {s:?}")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Fp32 => "fp32",
            Precision::Fp64 => "fp64",
        })
    }
}

/// Shape of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub mlp_hidden_dim: usize,
    /// Codebook size `V`.
    pub vocab_size: usize,
    pub num_classes: usize,
    pub rope_base: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            mlp_hidden_dim: 256,
            vocab_size: 64,
            num_classes: 4,
            rope_base: 10_000.0,
            precision: Precision::Fp32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("mlp_hidden_dim", self.mlp_hidden_dim),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return invalid(format!("{name} must be at least 1"));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return invalid(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return invalid("rotary embedding needs an even head dimension");
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return invalid("rope_base must be a finite value above 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Applies one `key=value` override; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| EarError::InvalidArgument(format!("bad value {v:?} for {key}")))
        };
        match key {
            "num_layers" | "layers" => self.num_layers = parse(value)?,
            "num_heads" | "heads" => self.num_heads = parse(value)?,
            "model_dim" | "dim" => self.model_dim = parse(value)?,
            "mlp_hidden_dim" | "mlp_hidden" => self.mlp_hidden_dim = parse(value)?,
            "vocab_size" | "vocab" => self.vocab_size = parse(value)?,
            "num_classes" | "classes" => self.num_classes = parse(value)?,
            "rope_base" => {
                self.rope_base = value
                    .parse()
                    .map_err(|_| EarError::InvalidArgument(format!("bad rope_base {value:?}")))?
            }
            "precision" => self.precision = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_layers", self.num_layers.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("mlp_hidden_dim", self.mlp_hidden_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("rope_base", format!("{:?}", self.rope_base)),
            ("precision", self.precision.to_string()),
        ]
    }
}
