//! Exactly evaluable categorical policies standing in for an LLM.
//!
//! Two forms are provided. [`TabularPolicy`] conditions on the prompt and a
//! bounded window of preceding tokens and has no hidden state, so weight
//! swaps never leave anything stale. [`RecurrentToyPolicy`] carries a hidden
//! vector that plays the role of a KV cache: after a weight swap it may still
//! hold values computed under older weights.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Schema identifier written into every serialized policy document.
pub const POLICY_SCHEMA: &str = "inflight.toy-policy/v1";

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Key of one logits row: the prompt and the (possibly shorter than the
/// context order) tuple of preceding tokens.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextKey {
    pub prompt_id: u64,
    pub context: Vec<u32>,
}

/// Rows of logits, one per context, plus a shared default row used by every
/// context that has no explicit entry. Also used for gradients, which have
/// the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitTable {
    pub vocab_size: usize,
    pub default_row: Vec<f64>,
    pub rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl LogitTable {
    pub fn zeros_like(other: &LogitTable) -> Self {
        LogitTable {
            vocab_size: other.vocab_size,
            default_row: vec![0.0; other.vocab_size],
            rows: other
                .rows
                .keys()
                .map(|k| (k.clone(), vec![0.0; other.vocab_size]))
                .collect(),
        }
    }

    pub fn row(&self, key: &ContextKey) -> &[f64] {
        self.rows.get(key).unwrap_or(&self.default_row)
    }

    /// The row that `key` resolves to, for writing. Missing keys resolve to
    /// the default row.
    pub fn row_mut(&mut self, key: &ContextKey) -> &mut Vec<f64> {
        match self.rows.get_mut(key) {
            Some(row) => row,
            None => &mut self.default_row,
        }
    }

    /// Number of scalar parameters (default row included).
    pub fn num_params(&self) -> usize {
        self.vocab_size * (self.rows.len() + 1)
    }

    /// All parameters in a fixed order: default row, then rows by key.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.default_row.clone();
        for row in self.rows.values() {
            out.extend_from_slice(row);
        }
        out
    }

    /// Mutable access to parameter `index` in [`LogitTable::flatten`] order.
    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let v = self.vocab_size;
        if index < v {
            return &mut self.default_row[index];
        }
        let (row, col) = ((index - v) / v, (index - v) % v);
        let row = self.rows.values_mut().nth(row).expect("parameter index out of range");
        &mut row[col]
    }

    pub fn scale(&mut self, factor: f64) {
        for x in self.default_row.iter_mut() {
            *x *= factor;
        }
        for row in self.rows.values_mut() {
            for x in row.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().into_iter().map(f64::abs).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub context_order: usize,
    pub table: LogitTable,
}

impl TabularPolicy {
    /// Policy where every context maps to `default_row`.
    pub fn single_row(default_row: Vec<f64>) -> Result<Self> {
        let policy = TabularPolicy {
            context_order: 0,
            table: LogitTable {
                vocab_size: default_row.len(),
                default_row,
                rows: BTreeMap::new(),
            },
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn uniform(vocab_size: usize) -> Result<Self> {
        Self::single_row(vec![0.0; vocab_size])
    }

    /// Fully populated table over `prompts` with standard-normal logits
    /// scaled by `scale`: one row for every context of length
    /// `0..=context_order`.
    pub fn random(vocab_size: usize, context_order: usize, prompts: &[u64], scale: f64, seed: u64) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        let mut rng = stream_rng(seed, 0);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        };
        let default_row = draw(vocab_size);
        let mut rows = BTreeMap::new();
        for &prompt_id in prompts {
            for context in all_contexts(vocab_size, context_order) {
                rows.insert(ContextKey { prompt_id, context }, draw(vocab_size));
            }
        }
        Ok(TabularPolicy {
            context_order,
            table: LogitTable {
                vocab_size,
                default_row,
                rows,
            },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.vocab_size
    }

    /// Row key used to predict the token at `position` of `tokens`.
    pub fn context_key(&self, prompt_id: u64, prefix: &[u32]) -> ContextKey {
        let start = prefix.len().saturating_sub(self.context_order);
        ContextKey {
            prompt_id,
            context: prefix[start..].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.table.vocab_size;
        if v == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        if self.table.default_row.len() != v {
            return Err(Error::invalid("default row length differs from vocab_size"));
        }
        for (key, row) in &self.table.rows {
            if row.len() != v {
                return Err(Error::invalid(format!(
                    "row {key:?} has {} entries, expected {v}",
                    row.len()
                )));
            }
            if key.context.len() > self.context_order {
                return Err(Error::invalid(format!(
                    "row {key:?} is longer than context_order {}",
                    self.context_order
                )));
            }
            if key.context.iter().any(|&t| t as usize >= v) {
                return Err(Error::invalid(format!("row {key:?} mentions out-of-vocab tokens")));
            }
        }
        let finite = self.table.flatten().iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid("logits must be finite"));
        }
        Ok(())
    }
}

/// Every token tuple of length `0..=order` over the vocabulary.
fn all_contexts(vocab_size: usize, order: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..order {
        let mut next = Vec::new();
        for ctx in &frontier {
            for t in 0..vocab_size as u32 {
                let mut c: Vec<u32> = ctx.clone();
                c.push(t);
                next.push(c);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Elman-style recurrent policy:
///
/// ```text
/// h_0     = tanh(E[prompt_id mod V])
/// h_{t+1} = tanh(E[y_t] + h_t R)
/// p(.|h)  = softmax(h O)
/// ```
///
/// Matrices are stored row-major: `E` is `V x D`, `R` is `D x D`, `O` is
/// `D x V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentToyPolicy {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub input_embedding: Vec<f64>,
    pub recurrence: Vec<f64>,
    pub output: Vec<f64>,
}

impl RecurrentToyPolicy {
    pub fn zeros(vocab_size: usize, hidden_dim: usize) -> Self {
        RecurrentToyPolicy {
            vocab_size,
            hidden_dim,
            input_embedding: vec![0.0; vocab_size * hidden_dim],
            recurrence: vec![0.0; hidden_dim * hidden_dim],
            output: vec![0.0; hidden_dim * vocab_size],
        }
    }

    /// Standard-normal weights scaled by `scale` (the recurrence by
    /// `scale / sqrt(hidden_dim)`).
    pub fn random(vocab_size: usize, hidden_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0);
        let mut p = Self::zeros(vocab_size, hidden_dim);
        let rec_scale = scale / (hidden_dim as f64).sqrt();
        for x in p.input_embedding.iter_mut() {
            *x = scale * rng.sample::<f64, _>(StandardNormal);
        }
        for x in p.recurrence.iter_mut() {
            *x = rec_scale * rng.sample::<f64, _>(StandardNormal);
        }
        for x in p.output.iter_mut() {
            *x = scale * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    fn embed(&self, token: usize, prev: Option<&[f64]>) -> Vec<f64> {
        let d = self.hidden_dim;
        let mut h: Vec<f64> = self.input_embedding[token * d..(token + 1) * d].to_vec();
        if let Some(prev) = prev {
            for (i, &hi) in prev.iter().enumerate() {
                if hi == 0.0 {
                    continue;
                }
                let row = &self.recurrence[i * d..(i + 1) * d];
                for (acc, r) in h.iter_mut().zip(row) {
                    *acc += hi * r;
                }
            }
        }
        for x in h.iter_mut() {
            *x = x.tanh();
        }
        h
    }

    fn initial_hidden(&self, prompt_id: u64) -> Vec<f64> {
        self.embed((prompt_id % self.vocab_size as u64) as usize, None)
    }

    fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let v = self.vocab_size;
        let mut out = vec![0.0; v];
        for (j, &hj) in hidden.iter().enumerate() {
            let row = &self.output[j * v..(j + 1) * v];
            for (o, w) in out.iter_mut().zip(row) {
                *o += hj * w;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let (v, d) = (self.vocab_size, self.hidden_dim);
        if v == 0 || d == 0 {
            return Err(Error::invalid("vocab_size and hidden_dim must be positive"));
        }
        if self.input_embedding.len() != v * d || self.recurrence.len() != d * d || self.output.len() != d * v {
            return Err(Error::invalid(
                "weight matrix shapes do not match vocab_size/hidden_dim",
            ));
        }
        let all_finite = self
            .input_embedding
            .iter()
            .chain(&self.recurrence)
            .chain(&self.output)
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::invalid("weights must be finite"));
        }
        Ok(())
    }
}

/// Either policy form.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Tabular(TabularPolicy),
    Recurrent(RecurrentToyPolicy),
}

/// Incremental decoding state: the prompt, the tokens consumed so far and,
/// for recurrent policies, the hidden vector (the "cache"). The hidden vector
/// records whatever weights were active when each token was pushed.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub prompt_id: u64,
    pub prefix: Vec<u32>,
    pub hidden: Vec<f64>,
}

impl Policy {
    pub fn vocab_size(&self) -> usize {
        match self {
            Policy::Tabular(p) => p.vocab_size(),
            Policy::Recurrent(p) => p.vocab_size,
        }
    }

    pub fn has_hidden_state(&self) -> bool {
        matches!(self, Policy::Recurrent(_))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Policy::Tabular(p) => p.validate(),
            Policy::Recurrent(p) => p.validate(),
        }
    }

    pub fn start(&self, prompt_id: u64) -> DecodeState {
        let hidden = match self {
            Policy::Tabular(_) => Vec::new(),
            Policy::Recurrent(p) => p.initial_hidden(prompt_id),
        };
        DecodeState {
            prompt_id,
            prefix: Vec::new(),
            hidden,
        }
    }

    /// Log-probabilities of the next token given `state`.
    pub fn next_logprobs(&self, state: &DecodeState) -> Vec<f64> {
        match self {
            Policy::Tabular(p) => {
                let key = p.context_key(state.prompt_id, &state.prefix);
                log_softmax(p.table.row(&key))
            }
            Policy::Recurrent(p) => log_softmax(&p.logits(&state.hidden)),
        }
    }

    /// Append `token`, advancing the hidden state under these weights.
    pub fn push(&self, state: &mut DecodeState, token: u32) -> Result<()> {
        self.check_token(token)?;
        if let Policy::Recurrent(p) = self {
            state.hidden = p.embed(token as usize, Some(&state.hidden));
        }
        state.prefix.push(token);
        Ok(())
    }

    /// Rebuild the hidden state from the prompt and prefix under these
    /// weights, discarding whatever older weights contributed.
    pub fn recompute(&self, state: &mut DecodeState) {
        if let Policy::Recurrent(p) = self {
            let mut h = p.initial_hidden(state.prompt_id);
            for &t in &state.prefix {
                h = p.embed(t as usize, Some(&h));
            }
            state.hidden = h;
        }
    }

    pub fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.vocab_size() {
            return Err(Error::invalid(format!(
                "token {token} outside vocabulary of size {}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string(&PolicyDocument::from(self.clone())).expect("policy documents always serialize")
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let doc: PolicyDocument = serde_json::from_str(text)?;
        if doc.schema != POLICY_SCHEMA {
            return Err(Error::invalid(format!(
                "unsupported policy schema {:?}, expected {POLICY_SCHEMA:?}",
                doc.schema
            )));
        }
        let policy = doc.body.into_policy();
        policy.validate()?;
        Ok(policy)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_document(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_document()).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// `log pi(y_t | x, y_<t)` for every position of `tokens`.
pub fn policy_logprobs(policy: &Policy, prompt_id: u64, tokens: &[u32]) -> Result<Vec<f64>> {
    let mut state = policy.start(prompt_id);
    let mut out = Vec::with_capacity(tokens.len());
    for &token in tokens {
        policy.check_token(token)?;
        out.push(policy.next_logprobs(&state)[token as usize]);
        policy.push(&mut state, token)?;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct PolicyDocument {
    schema: String,
    #[serde(flatten)]
    body: PolicyBody,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum PolicyBody {
    Tabular {
        vocab_size: usize,
        context_order: usize,
        default_row: Vec<f64>,
        rows: Vec<RowDocument>,
    },
    Recurrent {
        vocab_size: usize,
        hidden_dim: usize,
        input_embedding: Vec<f64>,
        recurrence: Vec<f64>,
        output: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct RowDocument {
    prompt_id: u64,
    context: Vec<u32>,
    logits: Vec<f64>,
}

impl From<Policy> for PolicyDocument {
    fn from(policy: Policy) -> Self {
        let body = match policy {
            Policy::Tabular(p) => PolicyBody::Tabular {
                vocab_size: p.table.vocab_size,
                context_order: p.context_order,
                default_row: p.table.default_row,
                rows: p
                    .table
                    .rows
                    .into_iter()
                    .map(|(k, logits)| RowDocument {
                        prompt_id: k.prompt_id,
                        context: k.context,
                        logits,
                    })
                    .collect(),
            },
            Policy::Recurrent(p) => PolicyBody::Recurrent {
                vocab_size: p.vocab_size,
                hidden_dim: p.hidden_dim,
                input_embedding: p.input_embedding,
                recurrence: p.recurrence,
                output: p.output,
            },
        };
        PolicyDocument {
            schema: POLICY_SCHEMA.to_string(),
            body,
        }
    }
}

impl PolicyBody {
    fn into_policy(self) -> Policy {
        match self {
            PolicyBody::Tabular {
                vocab_size,
                context_order,
                default_row,
                rows,
            } => Policy::Tabular(TabularPolicy {
                context_order,
                table: LogitTable {
                    vocab_size,
                    default_row,
                    rows: rows
                        .into_iter()
                        .map(|r| {
                            (
                                ContextKey {
                                    prompt_id: r.prompt_id,
                                    context: r.context,
                                },
                                r.logits,
                            )
                        })
                        .collect(),
                },
            }),
            PolicyBody::Recurrent {
                vocab_size,
                hidden_dim,
                input_embedding,
                recurrence,
                output,
            } => Policy::Recurrent(RecurrentToyPolicy {
                vocab_size,
                hidden_dim,
                input_embedding,
                recurrence,
                output,
            }),
        }
    }
}

/// Random-walk checkpoints: `count` policies where each one adds independent
/// `N(0, magnitude^2)` noise to every weight of its predecessor. The first
/// checkpoint is `base` itself.
pub fn drifting_checkpoints(base: &Policy, count: usize, magnitude: f64, seed: u64) -> Vec<Policy> {
    let mut out = Vec::with_capacity(count);
    let mut current = base.clone();
    for i in 0..count {
        if i > 0 {
            let mut rng = stream_rng(seed, i as u64);
            let mut perturb = |xs: &mut [f64]| {
                for x in xs {
                    *x += magnitude * rng.sample::<f64, _>(StandardNormal);
                }
            };
            match &mut current {
                Policy::Tabular(p) => {
                    perturb(&mut p.table.default_row);
                    for row in p.table.rows.values_mut() {
                        perturb(row);
                    }
                }
                Policy::Recurrent(p) => {
                    perturb(&mut p.input_embedding);
                    perturb(&mut p.recurrence);
                    perturb(&mut p.output);
                }
            }
        }
        out.push(current.clone());
    }
    out
}
