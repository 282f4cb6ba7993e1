//! A small, untrained masked-diffusion transformer for end-to-end runs.
//!
//! Pre-norm, bidirectional, learned absolute positions, GELU feed-forward
//! of width `4 · d_model`, untied output head. The last vocabulary id is the
//! mask token.
//!
//! Weights come from [`SeededRng`]: tensor number `i` in the order listed by
//! [`ToyModel::init`] is drawn row-major from stream `i` of the model seed,
//! each value uniform in `[-a, a)`:
//!
//! | tensor              | `a`                      |
//! |---------------------|--------------------------|
//! | token embedding     | `1`                      |
//! | position embedding  | `1`                      |
//! | `W_q`, `W_k`        | `QK_GAIN · √(3/d_model)` |
//! | `W_v`, `W_o`, `W_1` | `√(3/d_model)`           |
//! | `W_2`               | `√(3/ffn)`               |
//! | `b_1`, `b_2`        | `0.1`                    |
//! | output head         | `√(3/d_model)`           |
//!
//! Layer-norm gains start at 1 and biases at 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::attention::{attention_probabilities, AttentionHook, HeadInputs};
use crate::error::{Error, Result};
use crate::numerics::{axpy, Matrix};
use crate::pattern::SparseDConfig;
use crate::rng::SeededRng;
use crate::scheduler::{
    run_schedule, ScheduleMode, ScheduleOptions, ScheduleRun, StepObserver, StepTrace,
};

/// Extra gain on the query/key projections so attention maps are peaked
/// rather than near-uniform.
pub const QK_GAIN: f64 = 2.0;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            head_dim: 16,
            vocab_size: 64,
            max_len: 8192,
            seed: 42,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig(
                "vocab_size must be at least 2 (one id is reserved for the mask token)".into(),
            ));
        }
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model()
    }

    pub fn mask_token(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    pub fn parameter_count(&self) -> usize {
        let (dm, ff, v) = (self.d_model(), self.ffn_dim(), self.vocab_size);
        let per_layer = 2 * dm + 4 * dm * dm + 2 * dm + dm * ff + ff + ff * dm + dm;
        v * dm + self.max_len * dm + self.n_layers * per_layer + 2 * dm + dm * v
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_layers={}", self.n_layers);
        let _ = writeln!(s, "n_heads={}", self.n_heads);
        let _ = writeln!(s, "head_dim={}", self.head_dim);
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "max_len={}", self.max_len);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    /// Parses `key=value` lines; missing keys keep their defaults, `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut cfg = Self::default();
        for (key, value) in &kv {
            let num = || {
                value
                    .parse::<u64>()
                    .map_err(|_| Error::Parse(format!("{key}: expected an integer, got {value:?}")))
            };
            match key.as_str() {
                "n_layers" => cfg.n_layers = num()? as usize,
                "n_heads" => cfg.n_heads = num()? as usize,
                "head_dim" => cfg.head_dim = num()? as usize,
                "vocab_size" => cfg.vocab_size = num()? as usize,
                "max_len" => cfg.max_len = num()? as usize,
                "seed" => cfg.seed = num()?,
                other => return Err(Error::Parse(format!("unknown model key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Flat `key=value` text into an ordered map.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
struct LayerNorm {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        let n = x.cols() as f64;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gain[i] + self.bias[i];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    ln_attn: LayerNorm,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln_ffn: LayerNorm,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    token_embedding: Matrix,
    position_embedding: Matrix,
    layers: Vec<Layer>,
    ln_final: LayerNorm,
    head: Matrix,
}

struct TensorStreams {
    seed: u64,
    next: u64,
}

impl TensorStreams {
    fn matrix(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix {
        let mut rng = SeededRng::with_stream(self.seed, self.next);
        self.next += 1;
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
    }

    fn vector(&mut self, len: usize, bound: f64) -> Vec<f64> {
        self.matrix(1, len, bound).into_vec()
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // √(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Row-parallel `a · b`.
fn par_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    let cols = b.cols();
    out.data_mut()
        .par_chunks_mut(cols.max(1))
        .enumerate()
        .for_each(|(r, out_row)| {
            for (k, &x) in a.row(r).iter().enumerate() {
                if x != 0.0 {
                    axpy(x, b.row(k), out_row);
                }
            }
        });
    out
}

impl ToyModel {
    /// Draws every tensor; see the module docs for order and scales.
    pub fn init(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let dm = config.d_model();
        let ff = config.ffn_dim();
        let proj = (3.0 / dm as f64).sqrt();
        let down = (3.0 / ff as f64).sqrt();
        let mut s = TensorStreams {
            seed: config.seed,
            next: 0,
        };
        let token_embedding = s.matrix(config.vocab_size, dm, 1.0);
        let position_embedding = s.matrix(config.max_len, dm, 1.0);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                ln_attn: LayerNorm::new(dm),
                wq: s.matrix(dm, dm, QK_GAIN * proj),
                wk: s.matrix(dm, dm, QK_GAIN * proj),
                wv: s.matrix(dm, dm, proj),
                wo: s.matrix(dm, dm, proj),
                ln_ffn: LayerNorm::new(dm),
                w1: s.matrix(dm, ff, proj),
                b1: s.vector(ff, 0.1),
                w2: s.matrix(ff, dm, down),
                b2: s.vector(dm, 0.1),
            })
            .collect();
        let head = s.matrix(dm, config.vocab_size, proj);
        Ok(Self {
            ln_final: LayerNorm::new(dm),
            config,
            token_embedding,
            position_embedding,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    /// Total scalar parameters actually held, counted tensor by tensor.
    pub fn parameter_count(&self) -> usize {
        let m = |x: &Matrix| x.data().len();
        let ln = |x: &LayerNorm| x.gain.len() + x.bias.len();
        let layers: usize = self
            .layers
            .iter()
            .map(|l| {
                ln(&l.ln_attn)
                    + m(&l.wq)
                    + m(&l.wk)
                    + m(&l.wv)
                    + m(&l.wo)
                    + ln(&l.ln_ffn)
                    + m(&l.w1)
                    + l.b1.len()
                    + m(&l.w2)
                    + l.b2.len()
            })
            .sum();
        m(&self.token_embedding)
            + m(&self.position_embedding)
            + layers
            + ln(&self.ln_final)
            + m(&self.head)
    }

    /// All parameters flattened in a fixed order.
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        let mut m = |x: &[f64]| out.extend_from_slice(x);
        m(self.token_embedding.data());
        m(self.position_embedding.data());
        for l in &self.layers {
            m(&l.ln_attn.gain);
            m(&l.ln_attn.bias);
            m(l.wq.data());
            m(l.wk.data());
            m(l.wv.data());
            m(l.wo.data());
            m(&l.ln_ffn.gain);
            m(&l.ln_ffn.bias);
            m(l.w1.data());
            m(&l.b1);
            m(l.w2.data());
            m(&l.b2);
        }
        m(&self.ln_final.gain);
        m(&self.ln_final.bias);
        m(self.head.data());
        out
    }

    fn split_heads(&self, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Vec<HeadInputs>> {
        let d = self.config.head_dim;
        (0..self.config.n_heads)
            .map(|h| {
                HeadInputs::new(
                    q.column_slice(h * d, d),
                    k.column_slice(h * d, d),
                    v.column_slice(h * d, d),
                )
            })
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_len {
            return Err(Error::InvalidConfig(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::UnknownToken(bad));
        }
        Ok(())
    }

    /// Logits `l × vocab_size`; each layer's attention goes through `hook`.
    pub fn forward(&self, tokens: &[u32], hook: &mut dyn AttentionHook) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let dm = self.config.d_model();
        let d = self.config.head_dim;
        let mut x = Matrix::from_fn(tokens.len(), dm, |i, c| {
            self.token_embedding.get(tokens[i] as usize, c) + self.position_embedding.get(i, c)
        });

        for (li, layer) in self.layers.iter().enumerate() {
            let h = layer.ln_attn.apply(&x);
            let heads = self.split_heads(
                &par_matmul(&h, &layer.wq),
                &par_matmul(&h, &layer.wk),
                &par_matmul(&h, &layer.wv),
            )?;
            let outs = hook.attend(li, &heads)?;
            if outs.len() != heads.len() {
                return Err(Error::MaskCountMismatch {
                    masks: outs.len(),
                    heads: heads.len(),
                });
            }
            let merged = Matrix::from_fn(tokens.len(), dm, |i, c| outs[c / d].get(i, c % d));
            let attn = par_matmul(&merged, &layer.wo);
            for (xv, a) in x.data_mut().iter_mut().zip(attn.data()) {
                *xv += a;
            }

            let h = layer.ln_ffn.apply(&x);
            let mut hidden = par_matmul(&h, &layer.w1);
            for r in 0..hidden.rows() {
                for (v, b) in hidden.row_mut(r).iter_mut().zip(&layer.b1) {
                    *v = gelu(*v + b);
                }
            }
            let ffn = par_matmul(&hidden, &layer.w2);
            for r in 0..x.rows() {
                let row = x.row_mut(r);
                for ((xv, f), b) in row.iter_mut().zip(ffn.row(r)).zip(&layer.b2) {
                    *xv += f + b;
                }
            }
        }
        Ok(par_matmul(&self.ln_final.apply(&x), &self.head))
    }
}

impl crate::scheduler::Denoiser for ToyModel {
    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    fn forward(&self, tokens: &[u32], hook: &mut dyn AttentionHook) -> Result<Matrix> {
        ToyModel::forward(self, tokens, hook)
    }
}

/// Token sequence being denoised: a fixed prompt followed by generation
/// positions that start as the mask token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceState {
    tokens: Vec<u32>,
    prefill_len: usize,
    mask_token: u32,
    step: usize,
    unmasked: Vec<bool>,
}

impl SequenceState {
    pub fn new(prompt: &[u32], gen_len: usize, mask_token: u32) -> Result<Self> {
        if prompt.contains(&mask_token) {
            return Err(Error::InvalidConfig(
                "prompt contains the mask token".into(),
            ));
        }
        let mut tokens = prompt.to_vec();
        tokens.resize(prompt.len() + gen_len, mask_token);
        let mut unmasked = vec![true; prompt.len()];
        unmasked.resize(tokens.len(), false);
        Ok(Self {
            tokens,
            prefill_len: prompt.len(),
            mask_token,
            step: 0,
            unmasked,
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn prefill_len(&self) -> usize {
        self.prefill_len
    }

    pub fn mask_token(&self) -> u32 {
        self.mask_token
    }

    /// Denoising steps applied so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_unmasked(&self, pos: usize) -> bool {
        self.unmasked[pos]
    }

    pub fn masked_count(&self) -> usize {
        self.unmasked.iter().filter(|&&u| !u).count()
    }

    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prefill_len..]
    }
}

/// Tokens revealed at `step` (1-based) when `gen_len` positions are spread
/// over `total_steps`: `⌊step·G/T⌋ − ⌊(step−1)·G/T⌋`. The last step takes
/// whatever remains.
pub fn tokens_for_step(gen_len: usize, total_steps: usize, step: usize) -> usize {
    if step >= total_steps {
        return gen_len - (gen_len * (total_steps - 1)) / total_steps;
    }
    (gen_len * step) / total_steps - (gen_len * (step - 1)) / total_steps
}

/// Best non-mask token of a logit row: `(token, logit)`, ties to the lower id.
fn best_token(row: &[f64], mask_token: u32) -> (u32, f64) {
    let mut best = (0u32, f64::NEG_INFINITY);
    for (id, &v) in row.iter().enumerate() {
        if id as u32 == mask_token {
            continue;
        }
        if v > best.1 {
            best = (id as u32, v);
        }
    }
    best
}

/// Reveals the `k` still-masked positions with the highest max-logit, each
/// set to its argmax token. Ties go to the lower position.
pub fn unmask_step(state: &mut SequenceState, logits: &Matrix, k: usize) -> Result<()> {
    if logits.rows() != state.tokens.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for {} tokens",
            logits.rows(),
            state.tokens.len()
        )));
    }
    let mut candidates: Vec<(usize, u32, f64)> = (state.prefill_len..state.tokens.len())
        .filter(|&p| !state.unmasked[p])
        .map(|p| {
            let (tok, conf) = best_token(logits.row(p), state.mask_token);
            (p, tok, conf)
        })
        .collect();
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    for &(pos, tok, _) in candidates.iter().take(k) {
        state.tokens[pos] = tok;
        state.unmasked[pos] = true;
    }
    state.step += 1;
    Ok(())
}

/// Seeded prompt over the non-mask vocabulary, drawn from its own stream.
pub fn synthetic_prompt(len: usize, vocab_size: usize, seed: u64) -> Vec<u32> {
    const PROMPT_STREAM: u64 = 1 << 32;
    let mut rng = SeededRng::with_stream(seed, PROMPT_STREAM);
    (0..len)
        .map(|_| rng.below((vocab_size - 1) as u64) as u32)
        .collect()
}

/// Attention probabilities of one head at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub probs: Matrix,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GenerateOptions {
    pub schedule: ScheduleOptions,
    /// Keep every step's logits.
    pub record_logits: bool,
    /// Keep `softmax(QKᵀ/√d)` of every head at every step.
    pub dump_attention: bool,
}

#[derive(Clone, Debug)]
pub struct GenerateOutput {
    pub tokens: Vec<u32>,
    pub prefill_len: usize,
    pub run: ScheduleRun,
    pub step_logits: Vec<Matrix>,
    pub attention_dumps: Vec<AttentionDump>,
}

impl GenerateOutput {
    pub fn traces(&self) -> &[StepTrace] {
        &self.run.traces
    }
}

#[derive(Default)]
struct Recorder {
    logits: bool,
    attention: bool,
    step_logits: Vec<Matrix>,
    dumps: Vec<AttentionDump>,
}

impl StepObserver for Recorder {
    fn on_attention(&mut self, step: usize, layer: usize, heads: &[HeadInputs]) {
        if !self.attention {
            return;
        }
        for (head, h) in heads.iter().enumerate() {
            if let Ok(probs) = attention_probabilities(&h.q, &h.k) {
                self.dumps.push(AttentionDump {
                    step,
                    layer,
                    head,
                    probs,
                });
            }
        }
    }

    fn on_logits(&mut self, _step: usize, logits: &Matrix) {
        if self.logits {
            self.step_logits.push(logits.clone());
        }
    }
}

/// Denoises `gen_len` masked positions after `prompt` over
/// `sparse.total_steps` steps.
pub fn generate(
    model: &ToyModel,
    prompt: &[u32],
    gen_len: usize,
    mode: ScheduleMode,
    sparse: &SparseDConfig,
    options: &GenerateOptions,
) -> Result<GenerateOutput> {
    if prompt.len() + gen_len > model.config().max_len {
        return Err(Error::InvalidConfig(format!(
            "prompt {} + generation {gen_len} exceeds max_len {}",
            prompt.len(),
            model.config().max_len
        )));
    }
    if let Some(&bad) = prompt
        .iter()
        .find(|&&t| t as usize >= model.config().vocab_size)
    {
        return Err(Error::UnknownToken(bad));
    }
    let mut state = SequenceState::new(prompt, gen_len, model.config().mask_token())?;
    let mut recorder = Recorder {
        logits: options.record_logits,
        attention: options.dump_attention,
        ..Recorder::default()
    };
    let run = run_schedule(
        model,
        mode,
        sparse,
        &mut state,
        &options.schedule,
        &mut recorder,
    )?;
    Ok(GenerateOutput {
        tokens: state.tokens().to_vec(),
        prefill_len: state.prefill_len(),
        run,
        step_logits: recorder.step_logits,
        attention_dumps: recorder.dumps,
    })
}
