use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("invalid task: {field} {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Class `c` is the unique class whose key pair `(a_c, b_c)` appears as
    /// adjacent tokens in that order. Every sequence also carries the key
    /// tokens of other classes in reversed or separated positions, so
    /// token counts alone do not reveal the label.
    #[default]
    KeyedBigram,
}

/// Deterministic pattern-classification task.
///
/// Token 0 is unused, tokens `1..=2*num_classes` are key tokens and the
/// rest are filler. The label is a function of the sequence, so the Bayes
/// accuracy is 1.0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    #[serde(default)]
    pub kind: TaskKind,
    pub num_classes: usize,
    pub sequence_length: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub train_size: usize,
    pub validation_size: usize,
    /// Decoy key tokens inserted per sequence.
    #[serde(default = "default_decoys")]
    pub decoys: usize,
}

fn default_decoys() -> usize {
    2
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::KeyedBigram,
            num_classes: 4,
            sequence_length: 16,
            vocab_size: 64,
            seed: 0,
            train_size: 2048,
            validation_size: 512,
            decoys: default_decoys(),
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |field, reason: &str| {
            Err(TaskError::Invalid {
                field,
                reason: reason.to_string(),
            })
        };
        if self.num_classes < 2 {
            return bad("num_classes", "must be at least 2");
        }
        if self.sequence_length < 2 + 2 * self.decoys.div_ceil(2) {
            return bad("sequence_length", "too short for the key pair and decoys");
        }
        if self.vocab_size < 2 * self.num_classes + 3 {
            return bad("vocab_size", "needs at least two filler tokens beyond the key tokens");
        }
        if self.train_size < self.num_classes {
            return bad("train_size", "must hold at least one example per class");
        }
        if self.validation_size < self.num_classes {
            return bad("validation_size", "must hold at least one example per class");
        }
        Ok(())
    }

    fn first_filler(&self) -> usize {
        2 * self.num_classes + 1
    }

    fn key(&self, class: usize) -> (usize, usize) {
        (1 + 2 * class, 2 + 2 * class)
    }

    /// Class whose key pair occurs adjacently, if exactly one does.
    pub fn label_of(&self, seq: &[usize]) -> Option<usize> {
        let mut found = None;
        for w in seq.windows(2) {
            if let Some(c) = self.pair_class(w[0], w[1]) {
                if found.is_some() {
                    return None;
                }
                found = Some(c);
            }
        }
        found
    }

    fn pair_class(&self, a: usize, b: usize) -> Option<usize> {
        (a >= 1 && a < self.first_filler() && a % 2 == 1 && b == a + 1).then(|| (a - 1) / 2)
    }

    fn sample(&self, label: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let s = self.sequence_length;
        let filler = self.first_filler()..self.vocab_size;
        loop {
            let mut seq: Vec<usize> = (0..s).map(|_| rng.random_range(filler.clone())).collect();
            let mut used = vec![false; s];
            let p = rng.random_range(0..s - 1);
            let (a, b) = self.key(label);
            seq[p] = a;
            seq[p + 1] = b;
            used[p] = true;
            used[p + 1] = true;
            let mut placed = 0;
            let mut attempts = 0;
            while placed < self.decoys && attempts < 64 {
                attempts += 1;
                let class = rng.random_range(0..self.num_classes);
                let (ka, kb) = self.key(class);
                let candidate: Vec<(usize, usize)> = if self.decoys - placed >= 2 && rng.random_bool(0.5) {
                    // Reversed pair.
                    let q = rng.random_range(0..s - 1);
                    vec![(q, kb), (q + 1, ka)]
                } else {
                    let tok = if rng.random_bool(0.5) { ka } else { kb };
                    vec![(rng.random_range(0..s), tok)]
                };
                if candidate.iter().any(|&(q, _)| used[q]) {
                    continue;
                }
                let saved: Vec<usize> = candidate.iter().map(|&(q, _)| seq[q]).collect();
                for &(q, t) in &candidate {
                    seq[q] = t;
                }
                if self.label_of(&seq) == Some(label) {
                    for &(q, _) in &candidate {
                        used[q] = true;
                    }
                    placed += candidate.len();
                } else {
                    for (&(q, _), &old) in candidate.iter().zip(&saved) {
                        seq[q] = old;
                    }
                }
            }
            if placed == self.decoys {
                return seq;
            }
        }
    }

    fn split(&self, size: usize, stream: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut labels: Vec<usize> = (0..size).map(|i| i % self.num_classes).collect();
        labels.shuffle(&mut rng);
        let mut tokens = Vec::with_capacity(size * self.sequence_length);
        for &y in &labels {
            tokens.extend(self.sample(y, &mut rng));
        }
        Dataset {
            tokens,
            labels,
            sequence_length: self.sequence_length,
            num_classes: self.num_classes,
        }
    }
}

/// Token sequences (row-major) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    tokens: Vec<usize>,
    labels: Vec<usize>,
    sequence_length: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        tokens: Vec<usize>,
        labels: Vec<usize>,
        sequence_length: usize,
        num_classes: usize,
    ) -> Result<Self, TaskError> {
        if sequence_length == 0 || tokens.len() != labels.len() * sequence_length {
            return Err(TaskError::Invalid {
                field: "tokens",
                reason: "length is not labels x sequence_length".into(),
            });
        }
        if labels.iter().any(|&y| y >= num_classes) {
            return Err(TaskError::Invalid {
                field: "labels",
                reason: format!("label outside 0..{num_classes}"),
            });
        }
        Ok(Self {
            tokens,
            labels,
            sequence_length,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sequence_length(&self) -> usize {
        self.sequence_length
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.sequence_length..(i + 1) * self.sequence_length]
    }

    /// Tokens and labels of the examples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut tokens = Vec::with_capacity(indices.len() * self.sequence_length);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            tokens.extend_from_slice(self.sequence(i));
            labels.push(self.labels[i]);
        }
        (tokens, labels)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Generates the train and validation splits from independent streams of
/// the task seed.
pub fn generate_task(task: &SyntheticTask) -> Result<(Dataset, Dataset), TaskError> {
    task.validate()?;
    match task.kind {
        TaskKind::KeyedBigram => Ok((task.split(task.train_size, 1), task.split(task.validation_size, 2))),
    }
}
