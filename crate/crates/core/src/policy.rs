//! A small pre-norm transformer policy over the task vocabulary.
//!
//! Parameters live in named dense arrays. Training builds the forward pass on
//! an [`autodiff::Tape`]; sampling runs an incremental decoder with a
//! key/value cache built from the same row kernels.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ensure_finite, kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::vocab::{TokenId, Vocabulary};

/// Upper bound on the total parameter count.
pub const MAX_PARAMETERS: usize = 1_000_000;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Transformer blocks, 1 or 2.
    pub layers: usize,
    pub mlp_hidden: usize,
    /// Length of the learned position table; positions restart at every
    /// document, so this bounds a single document, not a packed row.
    pub max_positions: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { d_model: 32, heads: 2, layers: 1, mlp_hidden: 64, max_positions: 192 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.mlp_hidden == 0 || self.max_positions == 0 {
            return bad("policy dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if !(1..=2).contains(&self.layers) {
            return bad("layers must be 1 or 2");
        }
        Ok(())
    }

    fn shapes(&self, vocab: usize) -> Vec<(String, usize, usize)> {
        let (d, h) = (self.d_model, self.mlp_hidden);
        let mut s = vec![("tok_emb".into(), vocab, d), ("pos_emb".into(), self.max_positions, d)];
        for l in 0..self.layers {
            for (name, rows, cols) in [
                ("ln1.g", 1, d),
                ("ln1.b", 1, d),
                ("attn.qkv.w", d, 3 * d),
                ("attn.qkv.b", 1, 3 * d),
                ("attn.out.w", d, d),
                ("attn.out.b", 1, d),
                ("ln2.g", 1, d),
                ("ln2.b", 1, d),
                ("mlp.in.w", d, h),
                ("mlp.in.b", 1, h),
                ("mlp.out.w", h, d),
                ("mlp.out.b", 1, d),
            ] {
                s.push((format!("l{l}.{name}"), rows, cols));
            }
        }
        s.push(("head.w".into(), d, vocab));
        s.push(("head.b".into(), 1, vocab));
        s
    }
}

const TOK: usize = 0;
const POS: usize = 1;
const PER_LAYER: usize = 12;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const QKV_W: usize = 2;
const QKV_B: usize = 3;
const OUT_W: usize = 4;
const OUT_B: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const IN_W: usize = 8;
const IN_B: usize = 9;
const MLP_W: usize = 10;
const MLP_B: usize = 11;

fn layer_index(l: usize, k: usize) -> usize {
    2 + l * PER_LAYER + k
}

/// Named parameter arrays of one policy.
///
/// Gradient records reuse this type: same names, same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    config: PolicyConfig,
    vocab: Vocabulary,
    names: Vec<String>,
    arrays: Vec<Tensor>,
}

impl PolicyParameters {
    pub fn zeros(config: PolicyConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let (names, arrays) = config
            .shapes(vocab.size())
            .into_iter()
            .map(|(n, r, c)| (n, Tensor::zeros(r, c)))
            .unzip();
        let p = Self { config, vocab, names, arrays };
        if p.num_parameters() > MAX_PARAMETERS {
            return Err(Error::Config(format!("{} parameters exceed the limit", p.num_parameters())));
        }
        Ok(p)
    }

    /// Random initialization: embeddings with standard deviation 0.1, linear
    /// layers uniform in ±1/√fan_in, layer-norm gains at one.
    pub fn init(config: PolicyConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config, vocab)?;
        let mut rng = seed::rng(&[0x1417, seed]);
        let emb = 0.1 * 3f64.sqrt();
        for (name, t) in p.names.iter().zip(p.arrays.iter_mut()) {
            let bound = if name.ends_with("_emb") {
                emb
            } else if name.ends_with(".g") {
                t.data.fill(1.0);
                continue;
            } else if name.contains("ln") {
                continue;
            } else {
                let fan_in = if name.ends_with(".w") { t.rows } else { bias_fan_in(name, &config) };
                1.0 / (fan_in as f64).sqrt()
            };
            for x in t.data.iter_mut() {
                *x = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    /// Builds parameters from named arrays, checking names and shapes.
    pub fn from_arrays(config: PolicyConfig, vocab: Vocabulary, arrays: Vec<(String, Tensor)>) -> Result<Self> {
        let mut p = Self::zeros(config, vocab)?;
        if arrays.len() != p.arrays.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} arrays, found {}",
                p.arrays.len(),
                arrays.len()
            )));
        }
        for (i, (name, t)) in arrays.into_iter().enumerate() {
            let want = &p.arrays[i];
            if name != p.names[i] || (t.rows, t.cols) != (want.rows, want.cols) {
                return Err(Error::ShapeMismatch(format!(
                    "array {i}: expected {} {}x{}, found {name} {}x{}",
                    p.names[i], want.rows, want.cols, t.rows, t.cols
                )));
            }
            p.arrays[i] = t;
        }
        Ok(p)
    }

    /// Same names and shapes, all zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            vocab: self.vocab.clone(),
            names: self.names.clone(),
            arrays: self.arrays.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Tensor] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Tensor] {
        &mut self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.arrays[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.arrays.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Entry `index` in the concatenation of all arrays.
    pub fn flat(&self, index: usize) -> f64 {
        let (a, e) = self.locate(index);
        self.arrays[a].data[e]
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let (a, e) = self.locate(index);
        self.arrays[a].data[e] = value;
    }

    /// Name of the array holding flat entry `index`.
    pub fn flat_name(&self, index: usize) -> &str {
        &self.names[self.locate(index).0]
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (a, t) in self.arrays.iter().enumerate() {
            if index < t.len() {
                return (a, index);
            }
            index -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    /// `self += scale * other`, array by array.
    pub fn add_scaled(&mut self, other: &PolicyParameters, scale: f64) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn dot(&self, other: &PolicyParameters) -> f64 {
        self.arrays
            .iter()
            .zip(&other.arrays)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(x, y)| x * y)
            .sum()
    }

    /// Puts every array on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(
            self.arrays
                .iter()
                .map(|t| if trainable { tape.variable(t.clone()) } else { tape.constant(t.clone()) })
                .collect(),
        )
    }
}

fn bias_fan_in(name: &str, config: &PolicyConfig) -> usize {
    if name.contains("mlp.out") {
        config.mlp_hidden
    } else {
        config.d_model
    }
}

impl fmt::Display for PolicyParameters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        write!(
            f,
            "policy d={} heads={} layers={} mlp={} positions={} vocab={} params={}",
            c.d_model,
            c.heads,
            c.layers,
            c.mlp_hidden,
            c.max_positions,
            self.vocab.size(),
            self.num_parameters()
        )
    }
}

/// Tape handles for every parameter array, in [`PolicyParameters`] order.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Document structure of one row: per-token positions and, for each token,
/// the index where its document starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub positions: Vec<usize>,
    pub starts: Vec<usize>,
}

impl Layout {
    pub fn single(len: usize) -> Self {
        Self { positions: (0..len).collect(), starts: vec![0; len] }
    }

    /// Contiguous runs of equal segment ids form documents.
    pub fn from_segments(segments: &[u32]) -> Self {
        let mut positions = Vec::with_capacity(segments.len());
        let mut starts = Vec::with_capacity(segments.len());
        let mut start = 0;
        for (i, s) in segments.iter().enumerate() {
            if i > 0 && segments[i - 1] != *s {
                start = i;
            }
            positions.push(i - start);
            starts.push(start);
        }
        Self { positions, starts }
    }
}

/// Logits (`T × V`) of one row on the tape.
pub fn forward_tape(
    tape: &mut Tape,
    params: &PolicyParameters,
    pv: &ParamVars,
    tokens: &[TokenId],
    layout: &Layout,
) -> Result<Var> {
    params.vocab.check(tokens)?;
    let cap = params.config.max_positions;
    if let Some(&p) = layout.positions.iter().max() {
        if p >= cap {
            return Err(Error::ExampleTooLong { length: p + 1, capacity: cap });
        }
    }
    let v = &pv.0;
    let mut x = tape.embed(v[TOK], v[POS], tokens, &layout.positions);
    for l in 0..params.config.layers {
        let p = |k| v[layer_index(l, k)];
        let a = tape.layer_norm(x, p(LN1_G), p(LN1_B));
        let qkv = tape.linear(a, p(QKV_W), p(QKV_B));
        let att = tape.attention(qkv, params.config.heads, &layout.starts);
        let o = tape.linear(att, p(OUT_W), p(OUT_B));
        x = tape.add(x, o);
        let a = tape.layer_norm(x, p(LN2_G), p(LN2_B));
        let h = tape.linear(a, p(IN_W), p(IN_B));
        let h = tape.gelu(h);
        let o = tape.linear(h, p(MLP_W), p(MLP_B));
        x = tape.add(x, o);
    }
    let n = v.len();
    Ok(tape.linear(x, v[n - 2], v[n - 1]))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(temperature))
    }
}

/// Completion log-probabilities of a single sequence as a column on the tape.
pub fn completion_logprobs_tape(
    tape: &mut Tape,
    params: &PolicyParameters,
    pv: &ParamVars,
    tokens: &[TokenId],
    prompt_length: usize,
    temperature: f64,
) -> Result<Var> {
    check_temperature(temperature)?;
    if prompt_length == 0 || prompt_length > tokens.len() {
        return Err(Error::LengthMismatch(format!(
            "prompt length {prompt_length} for a sequence of {}",
            tokens.len()
        )));
    }
    let logits = forward_tape(tape, params, pv, tokens, &Layout::single(tokens.len()))?;
    let rows: Vec<usize> = (prompt_length - 1..tokens.len() - 1).collect();
    Ok(tape.target_logprobs(logits, &rows, &tokens[prompt_length..], temperature))
}

/// `log softmax(logits / T)` at each realized completion token.
pub fn forward_logprobs(
    params: &PolicyParameters,
    tokens: &[TokenId],
    prompt_length: usize,
    temperature: f64,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let lp = completion_logprobs_tape(&mut tape, params, &pv, tokens, prompt_length, temperature)?;
    Ok(tape.value(lp).data.clone())
}

/// Full next-token distribution (log-probabilities) at every position.
pub fn forward_log_distributions(
    params: &PolicyParameters,
    tokens: &[TokenId],
    temperature: f64,
) -> Result<Vec<Vec<f64>>> {
    check_temperature(temperature)?;
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let logits = forward_tape(&mut tape, params, &pv, tokens, &Layout::single(tokens.len()))?;
    let t = tape.value(logits);
    Ok((0..t.rows)
        .map(|i| {
            let mut out = vec![0.0; t.cols];
            kernels::log_softmax_row(t.row(i), temperature, &mut out);
            out
        })
        .collect())
}

/// Incremental decoder holding per-layer `[q | k | v]` rows.
struct Decoder<'a> {
    params: &'a PolicyParameters,
    cache: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> Decoder<'a> {
    fn new(params: &'a PolicyParameters) -> Self {
        Self { params, cache: vec![Vec::new(); params.config.layers], len: 0 }
    }

    /// Feeds one token and returns the logits for the next.
    fn step(&mut self, token: TokenId) -> Vec<f64> {
        let p = self.params;
        let c = &p.config;
        let d = c.d_model;
        let arr = |i: usize| &p.arrays[i].data;
        let i = self.len;
        let (tok, pos) = (&p.arrays[TOK], &p.arrays[POS]);
        let mut x: Vec<f64> =
            tok.row(token as usize).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
        let mut a = vec![0.0; d];
        let mut qkv = vec![0.0; 3 * d];
        let mut att = vec![0.0; d];
        let mut o = vec![0.0; d];
        let mut h = vec![0.0; c.mlp_hidden];
        let mut probs = vec![0.0; c.heads * (i + 1)];
        for l in 0..c.layers {
            let k = |j| layer_index(l, j);
            kernels::layer_norm_row(&x, arr(k(LN1_G)), arr(k(LN1_B)), &mut a);
            kernels::linear_row(&a, arr(k(QKV_W)), arr(k(QKV_B)), &mut qkv);
            self.cache[l].extend_from_slice(&qkv);
            kernels::attention_row(&self.cache[l], d, c.heads, 0, i, &mut probs, &mut att);
            kernels::linear_row(&att, arr(k(OUT_W)), arr(k(OUT_B)), &mut o);
            for (xc, oc) in x.iter_mut().zip(&o) {
                *xc += oc;
            }
            kernels::layer_norm_row(&x, arr(k(LN2_G)), arr(k(LN2_B)), &mut a);
            kernels::linear_row(&a, arr(k(IN_W)), arr(k(IN_B)), &mut h);
            for v in h.iter_mut() {
                *v = kernels::gelu(*v);
            }
            kernels::linear_row(&h, arr(k(MLP_W)), arr(k(MLP_B)), &mut o);
            for (xc, oc) in x.iter_mut().zip(&o) {
                *xc += oc;
            }
        }
        let n = p.arrays.len();
        let mut logits = vec![0.0; p.vocab.size()];
        kernels::linear_row(&x, arr(n - 2), arr(n - 1), &mut logits);
        self.len += 1;
        logits
    }
}

/// One sampled continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSequence {
    pub prompt_length: usize,
    /// Prompt followed by the completion.
    pub tokens: Vec<TokenId>,
    /// Per completion token, from the temperature-scaled distribution before
    /// nucleus truncation.
    pub logprobs: Vec<f64>,
    /// Ended with the end-of-sequence marker rather than the length cap.
    pub terminated: bool,
}

impl SampledSequence {
    pub fn completion(&self) -> &[TokenId] {
        &self.tokens[self.prompt_length..]
    }
}

/// Smallest probability-sorted prefix whose mass reaches `top_p`, as
/// `(token, renormalized probability)`. Ties sort by token id.
pub fn top_p_support(probs: &[f64], top_p: f64) -> Result<Vec<(usize, f64)>> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::InvalidTopP(top_p));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = order.len();
    for (n, &j) in order.iter().enumerate() {
        mass += probs[j];
        if mass >= top_p {
            keep = n + 1;
            break;
        }
    }
    let kept = &order[..keep];
    let total: f64 = kept.iter().map(|&j| probs[j]).sum();
    Ok(kept.iter().map(|&j| (j, probs[j] / total)).collect())
}

/// Ancestral sampling with temperature and nucleus truncation.
///
/// Generation stops at the end marker, after `max_len` completion tokens, or
/// when the position table is exhausted.
pub fn sample(
    params: &PolicyParameters,
    prompt: &[TokenId],
    temperature: f64,
    top_p: f64,
    max_len: usize,
    seed: u64,
) -> Result<SampledSequence> {
    check_temperature(temperature)?;
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::InvalidTopP(top_p));
    }
    if prompt.is_empty() || max_len == 0 {
        return Err(Error::Config("sampling needs a non-empty prompt and max_len >= 1".into()));
    }
    params.vocab.check(prompt)?;
    let cap = params.config.max_positions;
    if prompt.len() >= cap {
        return Err(Error::ExampleTooLong { length: prompt.len() + 1, capacity: cap });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[0x5A4D, seed]));
    let eos = params.vocab.eos();
    let mut dec = Decoder::new(params);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t);
    }
    let mut tokens = prompt.to_vec();
    let mut logprobs = Vec::new();
    let mut lp = vec![0.0; logits.len()];
    let mut terminated = false;
    while logprobs.len() < max_len && tokens.len() < cap {
        kernels::log_softmax_row(&logits, temperature, &mut lp);
        let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let support = top_p_support(&probs, top_p)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut choice = support[support.len() - 1].0;
        for &(j, q) in &support {
            acc += q;
            if u < acc {
                choice = j;
                break;
            }
        }
        tokens.push(choice as TokenId);
        logprobs.push(lp[choice]);
        if choice as TokenId == eos {
            terminated = true;
            break;
        }
        if logprobs.len() < max_len && tokens.len() < cap {
            logits = dec.step(choice as TokenId);
        }
    }
    Ok(SampledSequence { prompt_length: prompt.len(), tokens, logprobs, terminated })
}

/// Loss value and exact reverse-mode gradient of a scalar loss built on a
/// fresh tape from the bound parameters.
pub fn gradient<F>(params: &PolicyParameters, build: F) -> Result<(f64, PolicyParameters)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, true);
    let loss = build(&mut tape, &pv)?;
    let value = ensure_finite(tape.scalar_value(loss))?;
    let mut grads = tape.backward(loss);
    let mut out = params.zeros_like();
    for (slot, var) in out.arrays.iter_mut().zip(pv.vars()) {
        if let Some(g) = grads[var.index()].take() {
            *slot = g;
        }
    }
    Ok((value, out))
}

/// Loss value only, for finite-difference checks.
pub fn loss_value<F>(params: &PolicyParameters, build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let loss = build(&mut tape, &pv)?;
    Ok(tape.scalar_value(loss))
}
