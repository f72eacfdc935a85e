//! Generation-phase latency, FLOP and fidelity comparison across strategies.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward_token, generate_with, prefill_tokens, FfnBackend, GenerationRequest, LayerWeights,
    ModelWeights, PrefillTrace, BOS,
};
use crate::sparsity::{
    dense_ffn_into, profile_for_sparsity, search_profile, Aggregation, CettReduce, FfnStrategy,
    LayerMaskSet, MagnitudeDef, StrategyRunner, StrategyStats, ThresholdProfile,
    DEFAULT_CETT_TARGET,
};
use crate::tensor::{argmax, ActivationKind, MulAddCounter};

/// Runs whose stddev/median exceeds this are flagged as noisy.
pub const NOISE_LIMIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Dense,
    Tt,
    Griffin,
    Tda,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Dense,
        StrategyKind::Tt,
        StrategyKind::Griffin,
        StrategyKind::Tda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Dense => "dense",
            StrategyKind::Tt => "tt",
            StrategyKind::Griffin => "griffin",
            StrategyKind::Tda => "tda",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dense" => Ok(StrategyKind::Dense),
            "tt" => Ok(StrategyKind::Tt),
            "griffin" => Ok(StrategyKind::Griffin),
            "tda" => Ok(StrategyKind::Tda),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchSpec {
    pub prompt_len: usize,
    pub new_tokens: usize,
    pub strategies: Vec<StrategyKind>,
    pub repetitions: usize,
    pub warmups: usize,
    pub seed: u64,
    /// Target sparsity for Griffin and the budgeted TDA profile.
    pub sparsity: f64,
    /// CETT target for the TT profile.
    pub cett_target: f64,
    /// Length of the separate calibration prompt.
    pub calibration_len: usize,
    /// Use these thresholds instead of calibrating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tt_profile: Option<ThresholdProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tda_profile: Option<ThresholdProfile>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            prompt_len: 128,
            new_tokens: 128,
            strategies: StrategyKind::ALL.to_vec(),
            repetitions: 5,
            warmups: 1,
            seed: 0,
            sparsity: 0.5,
            cett_target: DEFAULT_CETT_TARGET,
            calibration_len: 128,
            tt_profile: None,
            tda_profile: None,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self, weights: &ModelWeights) -> Result<()> {
        let max = weights.config.max_seq_len;
        if self.repetitions < 3 {
            return Err(Error::contract("timing needs at least 3 repetitions"));
        }
        if self.prompt_len == 0 || self.calibration_len == 0 {
            return Err(Error::contract(
                "prompt and calibration lengths must be positive",
            ));
        }
        if self.prompt_len + self.new_tokens > max || self.calibration_len > max {
            return Err(Error::contract(format!(
                "prompt {} + new tokens {} exceeds max_seq_len {max}",
                self.prompt_len, self.new_tokens
            )));
        }
        if self.strategies.is_empty() {
            return Err(Error::contract("no strategies selected"));
        }
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return Err(Error::contract(format!(
                "sparsity {} not in (0, 1)",
                self.sparsity
            )));
        }
        Ok(())
    }
}

/// BOS followed by `len − 1` printable ASCII bytes.
pub fn synthetic_prompt(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::once(BOS)
        .chain((1..len).map(|_| rng.gen_range(32u32..127)))
        .take(len)
        .collect()
}

/// Thresholds for each sparse strategy, derived once per benchmark from a
/// calibration prompt the timed runs never see.
#[derive(Clone, Debug)]
pub struct CalibratedProfiles {
    pub tt: ThresholdProfile,
    pub tda: ThresholdProfile,
}

pub fn calibrate(weights: &ModelWeights, spec: &BenchSpec) -> Result<CalibratedProfiles> {
    let needs_trace = spec.tt_profile.is_none() || spec.tda_profile.is_none();
    let trace = if needs_trace {
        let calib = synthetic_prompt(spec.calibration_len, spec.seed.wrapping_add(0x9e37_79b9));
        prefill_tokens(weights, &calib)?.trace
    } else {
        PrefillTrace::default()
    };
    let tt = match &spec.tt_profile {
        Some(p) => p.clone(),
        None => {
            search_profile(
                weights,
                &trace.ffn_inputs,
                spec.cett_target,
                MagnitudeDef::Full,
                CettReduce::Mean,
                "synthetic",
            )?
            .0
        }
    };
    let tda = match &spec.tda_profile {
        Some(p) => p.clone(),
        None => profile_for_sparsity(
            &trace,
            spec.sparsity,
            weights,
            MagnitudeDef::Full,
            Aggregation::Flocking,
            "synthetic",
        )?,
    };
    Ok(CalibratedProfiles { tt, tda })
}

fn strategy_for(
    kind: StrategyKind,
    spec: &BenchSpec,
    profiles: &CalibratedProfiles,
) -> FfnStrategy {
    match kind {
        StrategyKind::Dense => FfnStrategy::Dense,
        StrategyKind::Tt => FfnStrategy::Tt(profiles.tt.clone()),
        StrategyKind::Griffin => FfnStrategy::Griffin {
            sparsity: spec.sparsity,
        },
        StrategyKind::Tda => FfnStrategy::Tda(profiles.tda.clone()),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub median_s: f64,
    pub mean_s: f64,
    pub stddev_s: f64,
    pub samples_s: Vec<f64>,
}

impl TimingSummary {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            median_s: median,
            mean_s: mean,
            stddev_s: var.sqrt(),
            samples_s: samples,
        }
    }

    pub fn is_noisy(&self) -> bool {
        self.median_s > 0.0 && self.stddev_s / self.median_s > NOISE_LIMIT
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub strategy: String,
    pub timing: TimingSummary,
    pub noisy: bool,
    /// FFN multiply-adds of one generation run.
    pub ffn_mul_adds: u64,
    pub mean_active_fraction: f64,
    /// Share of generated tokens equal to the dense continuation.
    pub token_agreement: f64,
    /// Mean per-step ‖FFN − dense FFN‖ / ‖dense FFN‖ under teacher forcing.
    pub mean_ffn_rel_error: f64,
    /// `(dense − this) / dense` on the median; absent without a dense row.
    pub latency_reduction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub prompt_len: usize,
    pub new_tokens: usize,
    pub repetitions: usize,
    pub warmups: usize,
    pub seed: u64,
    pub entries: Vec<BenchEntry>,
    pub noisy: bool,
    pub note: String,
}

impl BenchReport {
    pub fn entry(&self, name: &str) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.strategy == name)
    }
}

/// Times the generation loop of every requested strategy on one synthetic
/// prompt. Prefill and mask construction are outside the timed region.
pub fn run_bench(weights: &ModelWeights, spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate(weights)?;
    let profiles = calibrate(weights, spec)?;
    let prompt = synthetic_prompt(spec.prompt_len, spec.seed);

    let dense_req = GenerationRequest::new(prompt.clone(), spec.new_tokens, FfnStrategy::Dense);
    let dense_tokens = generate_with(
        weights,
        &dense_req,
        &mut StrategyRunner::new(FfnStrategy::Dense, weights)?,
    )?
    .tokens;

    let strategies: Vec<FfnStrategy> = spec
        .strategies
        .iter()
        .map(|&kind| strategy_for(kind, spec, &profiles))
        .collect();
    let requests: Vec<GenerationRequest> = strategies
        .iter()
        .map(|s| GenerationRequest::new(prompt.clone(), spec.new_tokens, s.clone()))
        .collect();
    // Rounds cycle through the strategies so slow drift in machine speed
    // lands on every strategy alike.
    let mut samples = vec![Vec::with_capacity(spec.repetitions); strategies.len()];
    let mut last = vec![None; strategies.len()];
    for run in 0..spec.warmups + spec.repetitions {
        for (i, (strategy, req)) in strategies.iter().zip(&requests).enumerate() {
            let mut runner = StrategyRunner::new(strategy.clone(), weights)?;
            let out = generate_with(weights, req, &mut runner)?;
            if run >= spec.warmups {
                samples[i].push(out.generation_time().as_secs_f64());
            }
            last[i] = Some(out);
        }
    }

    let mut entries = Vec::with_capacity(spec.strategies.len());
    for (i, &kind) in spec.strategies.iter().enumerate() {
        let strategy = &strategies[i];
        let out = last[i].take().expect("at least one timed run");
        let agree = if dense_tokens.is_empty() {
            1.0
        } else {
            out.tokens
                .iter()
                .zip(&dense_tokens)
                .filter(|(a, b)| a == b)
                .count() as f64
                / dense_tokens.len() as f64
        };
        let probe = fidelity_probe(
            weights,
            &prompt,
            &FfnStrategy::Dense,
            strategy,
            spec.new_tokens,
        )?;
        let timing = TimingSummary::from_samples(std::mem::take(&mut samples[i]));
        entries.push(BenchEntry {
            strategy: kind.name().to_string(),
            noisy: timing.is_noisy(),
            timing,
            ffn_mul_adds: out.stats.ffn_mul_adds,
            mean_active_fraction: out.stats.mean_active_fraction,
            token_agreement: agree,
            mean_ffn_rel_error: probe.mean_ffn_rel_error,
            latency_reduction: None,
        });
    }
    if let Some(dense) = entries
        .iter()
        .find(|e| e.strategy == "dense")
        .map(|e| e.timing.median_s)
    {
        for e in &mut entries {
            e.latency_reduction = (dense > 0.0).then(|| (dense - e.timing.median_s) / dense);
        }
    }
    let cfg = &weights.config;
    Ok(BenchReport {
        n_layers: cfg.n_layers,
        d_model: cfg.d_model,
        d_ff: cfg.d_ff,
        prompt_len: spec.prompt_len,
        new_tokens: spec.new_tokens,
        repetitions: spec.repetitions,
        warmups: spec.warmups,
        seed: spec.seed,
        noisy: entries.iter().any(|e| e.noisy),
        entries,
        note: "single-threaded CPU generation phase; speedups are FFN-local at this scale".into(),
    })
}

/// Wraps a backend and measures its FFN output against the dense FFN on the
/// same input.
struct ErrorTracking<'a> {
    inner: &'a mut dyn FfnBackend,
    kind: ActivationKind,
    dense: Vec<f32>,
    h: Vec<f32>,
    errors: Vec<f64>,
}

impl FfnBackend for ErrorTracking<'_> {
    fn prepare(&mut self, weights: &ModelWeights, trace: &PrefillTrace) -> Result<()> {
        self.inner.prepare(weights, trace)
    }

    fn forward(&mut self, layer_idx: usize, layer: &LayerWeights, x: &[f32], out: &mut [f32]) {
        self.inner.forward(layer_idx, layer, x, out);
        dense_ffn_into(
            layer,
            x,
            self.kind,
            &mut self.h,
            &mut self.dense,
            &mut MulAddCounter::default(),
        );
        let (mut diff, mut norm) = (0f64, 0f64);
        for (a, b) in out.iter().zip(&self.dense) {
            diff += f64::from(a - b).powi(2);
            norm += f64::from(*b).powi(2);
        }
        self.errors.push(if norm > 0.0 {
            (diff / norm).sqrt()
        } else {
            0.0
        });
    }

    fn masks(&self) -> Option<&LayerMaskSet> {
        self.inner.masks()
    }

    fn stats(&self) -> StrategyStats {
        self.inner.stats()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// max |logit_A − logit_B| after each step.
    pub max_logit_gap: Vec<f64>,
    /// Relative FFN error of strategy B, averaged over layers, per step.
    pub ffn_rel_error: Vec<f64>,
    pub mean_ffn_rel_error: f64,
    /// Share of steps where both strategies pick the same next token.
    pub token_agreement: f64,
}

/// Runs two strategies in lockstep on strategy A's greedy tokens so every
/// divergence is attributable to a single step.
pub fn fidelity_probe(
    weights: &ModelWeights,
    prompt: &[u32],
    a: &FfnStrategy,
    b: &FfnStrategy,
    steps: usize,
) -> Result<FidelityReport> {
    if prompt.len() + steps > weights.config.max_seq_len {
        return Err(Error::CacheOverflow {
            needed: prompt.len() + steps,
            max: weights.config.max_seq_len,
        });
    }
    let pre = prefill_tokens(weights, prompt)?;
    let mut runner_a = StrategyRunner::new(a.clone(), weights)?;
    let mut runner_b = StrategyRunner::new(b.clone(), weights)?;
    runner_a.prepare(weights, &pre.trace)?;
    runner_b.prepare(weights, &pre.trace)?;
    let n_layers = weights.layers.len();
    let mut track = ErrorTracking {
        inner: &mut runner_b,
        kind: weights.config.activation_kind,
        dense: vec![0.0; weights.config.d_model],
        h: vec![0.0; weights.config.d_ff],
        errors: Vec::with_capacity(steps * n_layers),
    };
    let mut cache_a = pre.cache.clone();
    let mut cache_b = pre.cache;
    let mut token = argmax(&pre.logits) as u32;
    let mut gaps = Vec::with_capacity(steps);
    let mut agree = 0usize;
    for _ in 0..steps {
        let la = forward_token(weights, &mut cache_a, token, |l, layer, x, out| {
            runner_a.forward(l, layer, x, out)
        })?;
        let lb = forward_token(weights, &mut cache_b, token, |l, layer, x, out| {
            track.forward(l, layer, x, out)
        })?;
        gaps.push(
            la.iter()
                .zip(lb.iter())
                .map(|(x, y)| f64::from((x - y).abs()))
                .fold(0.0, f64::max),
        );
        let next = argmax(&la);
        agree += usize::from(next == argmax(&lb));
        token = next as u32;
    }
    let per_step: Vec<f64> = track
        .errors
        .chunks(n_layers.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let mean = if per_step.is_empty() {
        0.0
    } else {
        per_step.iter().sum::<f64>() / per_step.len() as f64
    };
    Ok(FidelityReport {
        max_logit_gap: gaps,
        mean_ffn_rel_error: mean,
        ffn_rel_error: per_step,
        token_agreement: if steps == 0 {
            1.0
        } else {
            agree as f64 / steps as f64
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" | "markdown_table" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

fn reduction_note(r: Option<f64>) -> String {
    match r {
        Some(r) if r >= 0.0 => format!(" (↓{:.1}%)", 100.0 * r),
        Some(r) => format!(" (↑{:.1}%)", -100.0 * r),
        None => String::new(),
    }
}

pub fn render_report(report: &BenchReport, format: ReportFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            out = serde_json::to_string_pretty(report)?;
            out.push('\n');
        }
        ReportFormat::Csv => {
            out.push_str(
                "strategy,median_s,mean_s,stddev_s,noisy,ffn_mul_adds,mean_active_fraction,token_agreement,mean_ffn_rel_error,latency_reduction\n",
            );
            for e in &report.entries {
                writeln!(
                    out,
                    "{},{:.6},{:.6},{:.6},{},{},{:.6},{:.6},{:.6},{}",
                    e.strategy,
                    e.timing.median_s,
                    e.timing.mean_s,
                    e.timing.stddev_s,
                    e.noisy,
                    e.ffn_mul_adds,
                    e.mean_active_fraction,
                    e.token_agreement,
                    e.mean_ffn_rel_error,
                    e.latency_reduction
                        .map_or(String::new(), |r| format!("{r:.6}")),
                )
                .unwrap();
            }
        }
        ReportFormat::Markdown => {
            let names: Vec<&str> = report.entries.iter().map(|e| e.strategy.as_str()).collect();
            writeln!(
                out,
                "Generation phase latency (s), {} layers, d_model {}, d_ff {}, prompt {}, new tokens {}\n",
                report.n_layers, report.d_model, report.d_ff, report.prompt_len, report.new_tokens
            )
            .unwrap();
            writeln!(out, "| metric | {} |", names.join(" | ")).unwrap();
            writeln!(out, "|---|{}", "---|".repeat(names.len())).unwrap();
            let row = |label: &str, f: &dyn Fn(&BenchEntry) -> String| {
                let cells: Vec<String> = report.entries.iter().map(f).collect();
                format!("| {label} | {} |\n", cells.join(" | "))
            };
            out += &row("median latency", &|e| {
                format!(
                    "{:.4}{}{}",
                    e.timing.median_s,
                    reduction_note(e.latency_reduction),
                    if e.noisy { " *" } else { "" }
                )
            });
            out += &row("FFN mul-adds", &|e| e.ffn_mul_adds.to_string());
            out += &row("active fraction", &|e| {
                format!("{:.3}", e.mean_active_fraction)
            });
            out += &row("token agreement", &|e| format!("{:.3}", e.token_agreement));
            out += &row("FFN rel. error", &|e| {
                format!("{:.4}", e.mean_ffn_rel_error)
            });
            if report.noisy {
                out.push_str("\n\\* noisy: stddev/median above 25%\n");
            }
            writeln!(out, "\n{}", report.note).unwrap();
        }
    }
    Ok(out)
}

pub fn emit_report(
    report: &BenchReport,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, render_report(report, format)?)?;
    Ok(())
}
