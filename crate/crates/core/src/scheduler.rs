//! Step scheduling for sparse attention across denoising steps.
//!
//! Steps are numbered `1..=T`. With capture step `s = max(1, round(T·skip))`,
//! steps before `s` run full attention, step `s` runs full attention and
//! additionally captures one mask per `(layer, head)`, and every later step
//! runs block-sparse attention with the captured masks.
//!
//! The ablation modes swap out one piece each: `AlwaysSparse` captures at
//! step 1, `RecomputeEveryStep` rebuilds masks at every sparse step instead
//! of reusing them, and `JointSelection` ranks key blocks over the whole row
//! instead of per region. `SlidingWindow` and `Streaming` apply a fixed mask
//! at every step.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;

use crate::attention::{multi_head_attention, AttentionHook, FlopCounter, HeadInputs};
use crate::error::{Error, Result};
use crate::masks::{sliding_window_mask, streaming_mask, BlockMask};
use crate::numerics::Matrix;
use crate::pattern::{
    build_pattern_with, joint_topk_row, PatternCache, SelectionRule, SparseDConfig,
    DEFAULT_CHUNK_BLOCKS,
};
use crate::toydlm::{tokens_for_step, unmask_step, SequenceState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Full,
    FullAndCapture,
    Sparse,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Full => "Full",
            Phase::FullAndCapture => "FullAndCapture",
            Phase::Sparse => "Sparse",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleMode {
    Dense,
    SparseD,
    /// Capture at step 1, sparse from step 2.
    AlwaysSparse,
    /// Rebuild masks from the current step's projections at every sparse step.
    RecomputeEveryStep,
    /// Rank key blocks over the whole row, no prefill/generation split.
    JointSelection,
    SlidingWindow {
        window: usize,
    },
    Streaming {
        window: usize,
        sink_fraction: f64,
    },
}

impl ScheduleMode {
    pub fn sliding_window(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::EmptyWindow);
        }
        Ok(Self::SlidingWindow { window })
    }

    pub fn streaming(window: usize, sink_fraction: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::EmptyWindow);
        }
        if !(0.0..=1.0).contains(&sink_fraction) {
            return Err(Error::InvalidConfig(format!(
                "sink fraction {sink_fraction} outside [0, 1]"
            )));
        }
        Ok(Self::Streaming {
            window,
            sink_fraction,
        })
    }

    /// Short name used on the command line and in reports.
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleMode::Dense => "dense",
            ScheduleMode::SparseD => "sparsed",
            ScheduleMode::AlwaysSparse => "always-sparse",
            ScheduleMode::RecomputeEveryStep => "recompute",
            ScheduleMode::JointSelection => "joint",
            ScheduleMode::SlidingWindow { .. } => "window",
            ScheduleMode::Streaming { .. } => "streaming",
        }
    }

    fn selection_rule(&self) -> SelectionRule {
        match self {
            ScheduleMode::JointSelection => SelectionRule::Joint,
            _ => SelectionRule::Isolated,
        }
    }

    fn uses_cache(&self) -> bool {
        matches!(
            self,
            ScheduleMode::SparseD | ScheduleMode::AlwaysSparse | ScheduleMode::JointSelection
        )
    }

    /// Phase of `step` under this mode.
    pub fn phase(&self, step: usize, config: &SparseDConfig) -> Result<Phase> {
        check_step(step, config)?;
        Ok(match self {
            ScheduleMode::Dense => Phase::Full,
            ScheduleMode::SlidingWindow { .. } | ScheduleMode::Streaming { .. } => Phase::Sparse,
            ScheduleMode::AlwaysSparse => {
                if step == 1 {
                    Phase::FullAndCapture
                } else {
                    Phase::Sparse
                }
            }
            ScheduleMode::SparseD
            | ScheduleMode::RecomputeEveryStep
            | ScheduleMode::JointSelection => plan_step(step, config)?,
        })
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_step(step: usize, config: &SparseDConfig) -> Result<()> {
    if step == 0 || step > config.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: config.total_steps,
        });
    }
    Ok(())
}

/// Full before the capture step, capture at it, sparse after it.
pub fn plan_step(step: usize, config: &SparseDConfig) -> Result<Phase> {
    check_step(step, config)?;
    let s = config.capture_step();
    Ok(match step.cmp(&s) {
        std::cmp::Ordering::Less => Phase::Full,
        std::cmp::Ordering::Equal => Phase::FullAndCapture,
        std::cmp::Ordering::Greater => Phase::Sparse,
    })
}

/// Row selection without the prefill/generation split.
pub fn joint_selection_variant(pooled_row: &[f64], rho: f64) -> Result<Vec<usize>> {
    joint_topk_row(pooled_row, rho)
}

/// What one denoising step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub phase: Phase,
    pub flops_score: u64,
    pub flops_av: u64,
    pub pooling_flops: u64,
    /// Time spent inside attention dispatch, nanoseconds.
    pub wall_ns: u64,
    pub cache_hits: usize,
    pub pattern_builds: usize,
    /// Mean density of the masks applied this step; 1 for full attention.
    pub density: f64,
}

impl StepTrace {
    pub fn attention_flops(&self) -> u64 {
        self.flops_score + self.flops_av
    }
}

pub const TRACE_CSV_HEADER: &str = "step,phase,flops_score,flops_av,wall_ns,cache_hits";

pub fn traces_to_csv(traces: &[StepTrace]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for t in traces {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.step, t.phase, t.flops_score, t.flops_av, t.wall_ns, t.cache_hits
        ));
    }
    out
}

/// A model that maps tokens to logits, routing attention through a hook.
pub trait Denoiser: Sync {
    fn n_layers(&self) -> usize;
    fn n_heads(&self) -> usize;
    fn forward(&self, tokens: &[u32], hook: &mut dyn AttentionHook) -> Result<Matrix>;
}

/// Side channel for inspecting a run. Nothing here is timed.
pub trait StepObserver {
    fn on_attention(&mut self, _step: usize, _layer: usize, _heads: &[HeadInputs]) {}
    fn on_logits(&mut self, _step: usize, _logits: &Matrix) {}
}

pub struct NoObserver;

impl StepObserver for NoObserver {}

#[derive(Clone, Copy, Debug)]
pub struct ScheduleOptions {
    /// Query blocks per chunk when pooling scores for capture.
    pub chunk_blocks: usize,
    /// Keep a copy of the masks applied at every sparse step.
    pub record_masks: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            chunk_blocks: DEFAULT_CHUNK_BLOCKS,
            record_masks: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ScheduleRun {
    pub traces: Vec<StepTrace>,
    pub cache: PatternCache,
    /// `(step, masks[layer][head])` for every sparse step, if recorded.
    pub applied_masks: Vec<(usize, Vec<Vec<BlockMask>>)>,
}

struct StepHook<'a> {
    step: usize,
    phase: Phase,
    mode: ScheduleMode,
    config: &'a SparseDConfig,
    prefill_len: usize,
    options: &'a ScheduleOptions,
    cache: &'a PatternCache,
    baseline: Option<&'a BlockMask>,
    observer: &'a mut dyn StepObserver,
    staged: Vec<Vec<BlockMask>>,
    applied: Vec<Vec<BlockMask>>,
    counter: FlopCounter,
    wall_ns: u64,
    cache_hits: usize,
    pattern_builds: usize,
    density_sum: f64,
    density_count: usize,
}

impl StepHook<'_> {
    fn build_masks(&mut self, heads: &[HeadInputs]) -> Result<Vec<BlockMask>> {
        let rule = self.mode.selection_rule();
        let masks = heads
            .par_iter()
            .map(|h| {
                build_pattern_with(
                    &h.q,
                    &h.k,
                    self.prefill_len,
                    self.config,
                    self.options.chunk_blocks,
                    rule,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        for h in heads {
            self.counter.charge_capture(h.seq_len(), h.head_dim());
        }
        self.pattern_builds += masks.len();
        Ok(masks)
    }

    fn sparse(&mut self, layer: usize, heads: &[HeadInputs]) -> Result<Vec<Matrix>> {
        let owned: Vec<BlockMask>;
        let masks: Vec<&BlockMask> = match self.mode {
            ScheduleMode::RecomputeEveryStep => {
                owned = self.build_masks(heads)?;
                owned.iter().collect()
            }
            ScheduleMode::SlidingWindow { .. } | ScheduleMode::Streaming { .. } => {
                let m = self
                    .baseline
                    .expect("baseline mask built for fixed-pattern modes");
                vec![m; heads.len()]
            }
            _ => {
                let cache = self.cache;
                let masks = (0..heads.len())
                    .map(|h| {
                        cache.get(layer, h).ok_or_else(|| {
                            Error::InvalidConfig(format!(
                                "no captured mask for layer {layer} head {h}"
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.cache_hits += masks.len();
                masks
            }
        };
        for m in &masks {
            self.density_sum += m.density();
            self.density_count += 1;
        }
        if self.options.record_masks {
            self.applied
                .push(masks.iter().map(|m| (*m).clone()).collect());
        }
        multi_head_attention(heads, Some(&masks), &mut self.counter)
    }
}

impl AttentionHook for StepHook<'_> {
    fn attend(&mut self, layer: usize, heads: &[HeadInputs]) -> Result<Vec<Matrix>> {
        self.observer.on_attention(self.step, layer, heads);
        let start = Instant::now();
        let out = match self.phase {
            Phase::Full => multi_head_attention(heads, None, &mut self.counter)?,
            Phase::FullAndCapture => {
                let out = multi_head_attention(heads, None, &mut self.counter)?;
                let masks = self.build_masks(heads)?;
                self.staged.push(masks);
                out
            }
            Phase::Sparse => self.sparse(layer, heads)?,
        };
        self.wall_ns += start.elapsed().as_nanos() as u64;
        Ok(out)
    }
}

/// Runs `config.total_steps` denoising steps on `state`, dispatching
/// attention per `mode`.
pub fn run_schedule(
    model: &dyn Denoiser,
    mode: ScheduleMode,
    config: &SparseDConfig,
    state: &mut SequenceState,
    options: &ScheduleOptions,
    observer: &mut dyn StepObserver,
) -> Result<ScheduleRun> {
    config.validate()?;
    let seq_len = state.tokens().len();
    let prefill_len = state.prefill_len();
    let gen_len = seq_len - prefill_len;
    let baseline = match mode {
        ScheduleMode::SlidingWindow { window } => Some(sliding_window_mask(
            seq_len,
            config.block_size,
            prefill_len,
            window,
        )?),
        ScheduleMode::Streaming {
            window,
            sink_fraction,
        } => Some(streaming_mask(
            seq_len,
            config.block_size,
            prefill_len,
            window,
            sink_fraction,
        )?),
        _ => None,
    };

    let mut run = ScheduleRun::default();
    for step in 1..=config.total_steps {
        let phase = mode.phase(step, config)?;
        let mut hook = StepHook {
            step,
            phase,
            mode,
            config,
            prefill_len,
            options,
            cache: &run.cache,
            baseline: baseline.as_ref(),
            observer: &mut *observer,
            staged: Vec::new(),
            applied: Vec::new(),
            counter: FlopCounter::new(),
            wall_ns: 0,
            cache_hits: 0,
            pattern_builds: 0,
            density_sum: 0.0,
            density_count: 0,
        };
        let logits = model.forward(state.tokens(), &mut hook)?;
        let StepHook {
            staged,
            applied,
            counter,
            wall_ns,
            cache_hits,
            pattern_builds,
            density_sum,
            density_count,
            ..
        } = hook;

        if phase == Phase::FullAndCapture && mode.uses_cache() {
            run.cache.install(staged, step)?;
        }
        if options.record_masks && phase == Phase::Sparse {
            run.applied_masks.push((step, applied));
        }
        observer.on_logits(step, &logits);
        let k = tokens_for_step(gen_len, config.total_steps, step);
        unmask_step(state, &logits, k)?;

        run.traces.push(StepTrace {
            step,
            phase,
            flops_score: counter.score_flops,
            flops_av: counter.weighted_sum_flops,
            pooling_flops: counter.pooling_flops,
            wall_ns,
            cache_hits,
            pattern_builds,
            density: if density_count == 0 {
                1.0
            } else {
                density_sum / density_count as f64
            },
        });
    }
    Ok(run)
}
