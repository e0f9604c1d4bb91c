use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::{Binding, ParamSet, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// Post-norm transformer encoder with mean pooling and a linear classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyEncoderConfig {
    pub vocab_size: usize,
    pub max_sequence_length: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for TinyEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_sequence_length: 32,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            num_classes: 2,
            seed: 0,
        }
    }
}

impl TinyEncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("max_sequence_length", self.max_sequence_length),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
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
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::InvalidConfig {
                field: "num_heads",
                reason: format!(
                    "hidden_dim {} is not divisible by {} heads",
                    self.hidden_dim, self.num_heads
                ),
            });
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, s, d, f, c) = (
            self.vocab_size,
            self.max_sequence_length,
            self.hidden_dim,
            self.ffn_dim,
            self.num_classes,
        );
        let embedding = v * d + s * d + 2 * d;
        let attention = 4 * (d * d + d) + 2 * d;
        let ffn = d * f + f + f * d + d + 2 * d;
        embedding + self.num_layers * (attention + ffn) + d * c + c
    }

    pub(crate) fn init_params(&self) -> Result<ParamSet, ModelError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut params = ParamSet::new();
        let (d, f) = (self.hidden_dim, self.ffn_dim);
        let mut normal = |shape: &[usize], std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        let mut add = |name: String, t: Tensor| params.insert(name, t.with_requires_grad(true));

        add("embedding.token.weight".into(), normal(&[self.vocab_size, d], 1.0))?;
        add(
            "embedding.position.weight".into(),
            normal(&[self.max_sequence_length, d], 1.0),
        )?;
        add("embedding.norm.gamma".into(), Tensor::full(&[d], 1.0))?;
        add("embedding.norm.beta".into(), Tensor::zeros(&[d]))?;
        let dense_std = 1.0 / (d as f64).sqrt();
        for l in 0..self.num_layers {
            let p = format!("encoder.layer{l}");
            for proj in ["query", "key", "value", "output"] {
                add(format!("{p}.attention.{proj}.weight"), normal(&[d, d], dense_std))?;
                add(format!("{p}.attention.{proj}.bias"), Tensor::zeros(&[d]))?;
            }
            add(format!("{p}.attention.norm.gamma"), Tensor::full(&[d], 1.0))?;
            add(format!("{p}.attention.norm.beta"), Tensor::zeros(&[d]))?;
            add(format!("{p}.ffn.intermediate.weight"), normal(&[d, f], dense_std))?;
            add(format!("{p}.ffn.intermediate.bias"), Tensor::zeros(&[f]))?;
            add(
                format!("{p}.ffn.output.weight"),
                normal(&[f, d], 1.0 / (f as f64).sqrt()),
            )?;
            add(format!("{p}.ffn.output.bias"), Tensor::zeros(&[d]))?;
            add(format!("{p}.ffn.norm.gamma"), Tensor::full(&[d], 1.0))?;
            add(format!("{p}.ffn.norm.beta"), Tensor::zeros(&[d]))?;
        }
        add(
            "head.classifier.weight".into(),
            normal(&[d, self.num_classes], dense_std),
        )?;
        add("head.classifier.bias".into(), Tensor::zeros(&[self.num_classes]))?;
        Ok(params)
    }

    fn dense(&self, tape: &mut Tape, p: &Binding, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w = p.var(&format!("{prefix}.weight"))?;
        let b = p.var(&format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    fn norm(&self, tape: &mut Tape, p: &Binding, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let g = p.var(&format!("{prefix}.gamma"))?;
        let b = p.var(&format!("{prefix}.beta"))?;
        let y = tape.layer_norm(x, NORM_EPS)?;
        let y = tape.mul_row(y, g)?;
        Ok(tape.add_row(y, b)?)
    }

    /// Maps `batch` token sequences (row-major, equal length) to logits
    /// `[batch, num_classes]`.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        p: &Binding,
        tokens: &[usize],
        batch: usize,
    ) -> Result<Var, ModelError> {
        let seq = tokens.len() / batch.max(1);
        if batch == 0 || seq == 0 || seq * batch != tokens.len() {
            return Err(ModelError::BadBatch(format!(
                "{} tokens cannot form {batch} equal sequences",
                tokens.len()
            )));
        }
        if seq > self.max_sequence_length {
            return Err(ModelError::BadBatch(format!(
                "sequence length {seq} exceeds max_sequence_length {}",
                self.max_sequence_length
            )));
        }
        let (d, h) = (self.hidden_dim, self.num_heads);
        let dh = d / h;
        let rows = batch * seq;

        let tok = tape.embedding(p.var("embedding.token.weight")?, tokens)?;
        let positions: Vec<usize> = (0..rows).map(|i| i % seq).collect();
        let pos = tape.embedding(p.var("embedding.position.weight")?, &positions)?;
        let x = tape.add(tok, pos)?;
        let mut x = self.norm(tape, p, x, "embedding.norm")?;

        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.num_layers {
            let pre = format!("encoder.layer{l}");
            let q = self.dense(tape, p, x, &format!("{pre}.attention.query"))?;
            let k = self.dense(tape, p, x, &format!("{pre}.attention.key"))?;
            let v = self.dense(tape, p, x, &format!("{pre}.attention.value"))?;
            // [b*s, d] -> [b*h, s, dh]
            let split = |tape: &mut Tape, t: Var, axes: &[usize], last: [usize; 2]| -> Result<Var, ModelError> {
                let t = tape.reshape(t, &[batch, seq, h, dh])?;
                let t = tape.permute(t, axes)?;
                Ok(tape.reshape(t, &[batch * h, last[0], last[1]])?)
            };
            let q = split(tape, q, &[0, 2, 1, 3], [seq, dh])?;
            let kt = split(tape, k, &[0, 2, 3, 1], [dh, seq])?;
            let v = split(tape, v, &[0, 2, 1, 3], [seq, dh])?;
            let scores = tape.batch_matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores);
            let ctx = tape.batch_matmul(attn, v)?;
            let ctx = tape.reshape(ctx, &[batch, h, seq, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[rows, d])?;
            let out = self.dense(tape, p, ctx, &format!("{pre}.attention.output"))?;
            let res = tape.add(x, out)?;
            x = self.norm(tape, p, res, &format!("{pre}.attention.norm"))?;

            let hid = self.dense(tape, p, x, &format!("{pre}.ffn.intermediate"))?;
            let hid = tape.gelu(hid);
            let out = self.dense(tape, p, hid, &format!("{pre}.ffn.output"))?;
            let res = tape.add(x, out)?;
            x = self.norm(tape, p, res, &format!("{pre}.ffn.norm"))?;
        }
        let x = tape.reshape(x, &[batch, seq, d])?;
        let pooled = tape.mean_axis1(x)?;
        self.dense(tape, p, pooled, "head.classifier")
    }
}
