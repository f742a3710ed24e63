use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::tensor::{Matrix, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm: Matrix<F>,
    pub wq: Matrix<F>,
    pub wk: Matrix<F>,
    pub wv: Matrix<F>,
    pub wo: Matrix<F>,
    pub mlp_norm: Matrix<F>,
    pub w1: Matrix<F>,
    pub b1: Matrix<F>,
    pub w2: Matrix<F>,
    pub b2: Matrix<F>,
}

/// All learnable tensors of the micro-transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<F> {
    pub config: ModelConfig,
    pub token_embedding: Matrix<F>,
    /// One row per class; supplies the start token (and class-mode mask tokens).
    pub class_embedding: Matrix<F>,
    pub mask_embedding: Matrix<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Matrix<F>,
    pub head: Matrix<F>,
}

/// `∂loss/∂θ`, congruent with [`ModelParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord<F>(pub ModelParameters<F>);

impl<F> std::ops::Deref for GradientRecord<F> {
    type Target = ModelParameters<F>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl<F> std::ops::DerefMut for GradientRecord<F> {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

impl<F: Real> ModelParameters<F> {
    /// All-zero weights with unit norm gains.
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut p = Self::filled(config, F::zero());
        for norm in p.norms_mut() {
            norm.data.fill(F::one());
        }
        p
    }

    fn filled(config: &ModelConfig, value: F) -> Self {
        let d = config.model_dim;
        let h = config.mlp_hidden_dim;
        let layer = LayerParams {
            attn_norm: Matrix::filled(1, d, value),
            wq: Matrix::filled(d, d, value),
            wk: Matrix::filled(d, d, value),
            wv: Matrix::filled(d, d, value),
            wo: Matrix::filled(d, d, value),
            mlp_norm: Matrix::filled(1, d, value),
            w1: Matrix::filled(d, h, value),
            b1: Matrix::filled(1, h, value),
            w2: Matrix::filled(h, d, value),
            b2: Matrix::filled(1, d, value),
        };
        Self {
            config: config.clone(),
            token_embedding: Matrix::filled(config.vocab_size, d, value),
            class_embedding: Matrix::filled(config.num_classes, d, value),
            mask_embedding: Matrix::filled(1, d, value),
            layers: vec![layer; config.num_layers],
            final_norm: Matrix::filled(1, d, value),
            head: Matrix::filled(d, config.vocab_size, value),
        }
    }

    /// Random initialization: unit-normal embeddings, `1/√fan_in` projections,
    /// residual outputs shrunk by `√(2·layers)`, unit gains, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let d = config.model_dim as f64;
        let h = config.mlp_hidden_dim as f64;
        let depth = (2.0 * config.num_layers as f64).sqrt();
        let mut fill = |m: &mut Matrix<F>, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut m.data {
                *v = F::of(normal.sample(rng));
            }
        };
        fill(&mut p.token_embedding, 1.0);
        fill(&mut p.class_embedding, 1.0);
        fill(&mut p.mask_embedding, 1.0);
        for layer in &mut p.layers {
            fill(&mut layer.wq, 1.0 / d.sqrt());
            fill(&mut layer.wk, 1.0 / d.sqrt());
            fill(&mut layer.wv, 1.0 / d.sqrt());
            fill(&mut layer.wo, 1.0 / (d.sqrt() * depth));
            fill(&mut layer.w1, 1.0 / d.sqrt());
            fill(&mut layer.w2, 1.0 / (h.sqrt() * depth));
        }
        fill(&mut p.head, 1.0 / d.sqrt());
        p
    }

    /// Zero-valued record with the same shapes.
    pub fn zero_grad(&self) -> GradientRecord<F> {
        GradientRecord(Self::filled(&self.config, F::zero()))
    }

    fn norms_mut(&mut self) -> Vec<&mut Matrix<F>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.push(&mut layer.mlp_norm);
        }
        out.push(&mut self.final_norm);
        out
    }

    /// Canonical tensor order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<F>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("class_embedding".to_string(), &self.class_embedding),
            ("mask_embedding".to_string(), &self.mask_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("mlp_norm", &l.mlp_norm),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<F>> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.class_embedding,
            &mut self.mask_embedding,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<G: Real>(&self) -> ModelParameters<G> {
        let mut out = ModelParameters::<G>::filled(&self.config, G::zero());
        for ((_, src), dst) in self.named_tensors().into_iter().zip(out.tensors_mut()) {
            *dst = src.cast();
        }
        out
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn axpy(&mut self, scale: F, other: &ModelParameters<F>) {
        let src = other.named_tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, &v) in dst.data.iter_mut().zip(&s.data) {
                *d = *d + scale * v;
            }
        }
    }
}

impl<F: Real> GradientRecord<F> {
    pub fn accumulate(&mut self, other: &GradientRecord<F>) {
        self.0.axpy(F::one(), &other.0);
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.0.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn max_abs(&self) -> F {
        self.0
            .named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .fold(F::zero(), |m, v| m.max(v.abs()))
    }
}
