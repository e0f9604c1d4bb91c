use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::{Binding, ParamSet, Tape, Tensor, Var};

/// Reference model: per-position token embeddings, flattened, then a ReLU MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub vocab_size: usize,
    pub sequence_length: usize,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("sequence_length", self.sequence_length),
            ("embed_dim", self.embed_dim),
            ("num_classes", self.num_classes),
        ];
        for (field, value) in extents {
            if value == 0 {
                return Err(ModelError::InvalidConfig {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        if self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidConfig {
                field: "hidden_dims",
                reason: "every layer width must be positive".into(),
            });
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.sequence_length * self.embed_dim];
        w.extend(&self.hidden_dims);
        w
    }

    pub fn param_count(&self) -> usize {
        let widths = self.widths();
        let hidden: usize = widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        let last = *widths.last().expect("non-empty");
        self.vocab_size * self.embed_dim + hidden + last * self.num_classes + self.num_classes
    }

    pub(crate) fn init_params(&self) -> Result<ParamSet, ModelError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut normal = |shape: [usize; 2], std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..shape[0] * shape[1]).map(|_| dist.sample(&mut rng)).collect();
            Tensor::from_parts(shape.to_vec(), data).with_requires_grad(true)
        };
        let mut params = ParamSet::new();
        params.insert(
            "embedding.token.weight",
            normal([self.vocab_size, self.embed_dim], 1.0),
        )?;
        let widths = self.widths();
        for (i, pair) in widths.windows(2).enumerate() {
            let std = (2.0 / pair[0] as f64).sqrt();
            params.insert(format!("encoder.mlp{i}.weight"), normal([pair[0], pair[1]], std))?;
            params.insert(
                format!("encoder.mlp{i}.bias"),
                Tensor::zeros(&[pair[1]]).with_requires_grad(true),
            )?;
        }
        let last = *widths.last().expect("non-empty");
        params.insert(
            "head.classifier.weight",
            normal([last, self.num_classes], 1.0 / (last as f64).sqrt()),
        )?;
        params.insert(
            "head.classifier.bias",
            Tensor::zeros(&[self.num_classes]).with_requires_grad(true),
        )?;
        Ok(params)
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        p: &Binding,
        tokens: &[usize],
        batch: usize,
    ) -> Result<Var, ModelError> {
        if batch == 0 || tokens.len() != batch * self.sequence_length {
            return Err(ModelError::BadBatch(format!(
                "{} tokens do not form {batch} sequences of length {}",
                tokens.len(),
                self.sequence_length
            )));
        }
        let emb = tape.embedding(p.var("embedding.token.weight")?, tokens)?;
        let mut x = tape.reshape(emb, &[batch, self.sequence_length * self.embed_dim])?;
        for i in 0..self.hidden_dims.len() {
            let y = tape.matmul(x, p.var(&format!("encoder.mlp{i}.weight"))?)?;
            let y = tape.add_row(y, p.var(&format!("encoder.mlp{i}.bias"))?)?;
            x = tape.relu(y);
        }
        let y = tape.matmul(x, p.var("head.classifier.weight")?)?;
        Ok(tape.add_row(y, p.var("head.classifier.bias")?)?)
    }
}
