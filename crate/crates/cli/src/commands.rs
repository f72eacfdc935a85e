use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tda_core::analysis::{
    activation_frequency, builtin_samples, emergence_experiment, extract_pattern, flocking_csv,
    gini, inertia_battery, EmergenceConfig, InertiaOptions, PatternMode, ReportThreshold, Sample,
    SimilarityMetric, ToyVariant,
};
use tda_core::bench::{render_report, run_bench, BenchSpec, ReportFormat, StrategyKind};
use tda_core::model::{
    detokenize, generate, load_weights, prefill_tokens, tokenize, GenerationRequest, ModelConfig,
    ModelWeights, Sampling,
};
use tda_core::sparsity::{search_profile, CettReduce, FfnStrategy, MagnitudeDef, ThresholdProfile};
use tda_core::tensor::ActivationKind;
use tda_core::Error;

use crate::{
    ActivationArg, BenchArgs, Cli, CliError, Command, EmergenceArgs, FormatArg, GenerateArgs,
    Global, InertiaArgs, MagnitudeArg, MetricArg, ReduceArg, SearchArgs, StrategyArg, ToyModelArgs,
    VariantArg,
};

type CmdResult = Result<(), CliError>;

pub fn run(cli: &Cli) -> CmdResult {
    let g = &cli.global;
    match &cli.command {
        Command::SearchThresholds(a) => search_thresholds(g, a),
        Command::Generate(a) => generate_cmd(g, a),
        Command::AnalyzeInertia(a) => analyze_inertia(g, a),
        Command::Bench(a) => bench(g, a),
        Command::Emergence(a) => emergence(g, a),
        Command::MakeToyModel(a) => make_toy_model(g, a),
    }
}

fn model_path(g: &Global) -> Result<&Path, CliError> {
    g.model
        .as_deref()
        .ok_or_else(|| CliError::Usage("this subcommand needs --model".into()))
}

fn load_model(g: &Global) -> Result<ModelWeights, CliError> {
    let path = model_path(g)?;
    let cfg_path = g
        .config
        .clone()
        .unwrap_or_else(|| ModelConfig::sidecar_path(path));
    let config = ModelConfig::load(&cfg_path)?;
    let start = Instant::now();
    let w = load_weights(path, config)?;
    tracing::info!("loaded {} in {:?}", path.display(), start.elapsed());
    Ok(w)
}

fn load_profile(g: &Global) -> Result<Option<ThresholdProfile>, CliError> {
    g.profile
        .as_ref()
        .map(ThresholdProfile::load)
        .transpose()
        .map_err(CliError::from)
}

fn out_path(
    g: &Global,
    explicit: &Option<PathBuf>,
    default_name: &str,
) -> Result<PathBuf, CliError> {
    let path = explicit
        .clone()
        .unwrap_or_else(|| g.out_dir.join(default_name));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn search_thresholds(g: &Global, a: &SearchArgs) -> CmdResult {
    if !(a.cett_target > 0.0 && a.cett_target <= 1.0) {
        return Err(CliError::Usage(format!(
            "--cett-target {} not in (0, 1]",
            a.cett_target
        )));
    }
    model_path(g)?;
    let text = fs::read_to_string(&a.calibration)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::DegenerateCalibration(format!(
            "{} has no text",
            a.calibration.display()
        ))
        .into());
    }
    let w = load_model(g)?;
    let max = w.config.max_seq_len;
    let mut inputs: Vec<Vec<Vec<f32>>> = vec![Vec::new(); w.layers.len()];
    for line in &lines {
        let mut toks = tokenize(line);
        if toks.len() > max {
            tracing::warn!("calibration line truncated to {max} tokens");
            toks.truncate(max);
        }
        let trace = prefill_tokens(&w, &toks)?.trace;
        for (dst, src) in inputs.iter_mut().zip(trace.ffn_inputs) {
            dst.extend(src);
        }
    }
    let def = match a.magnitude {
        MagnitudeArg::Full => MagnitudeDef::Full,
        MagnitudeArg::GatedOnly => MagnitudeDef::GatedOnly,
    };
    let reduce = match a.reduce {
        ReduceArg::Mean => CettReduce::Mean,
        ReduceArg::Max => CettReduce::Max,
    };
    let tag = a.calibration.file_name().map_or_else(
        || "calibration".to_string(),
        |n| n.to_string_lossy().into_owned(),
    );
    let (profile, outcomes) = search_profile(&w, &inputs, a.cett_target, def, reduce, &tag)?;
    let path = out_path(g, &a.out, "profile.json")?;
    profile.save(&path)?;

    println!("layer  epsilon       cett      iters  monotone");
    for (l, o) in outcomes.iter().enumerate() {
        println!(
            "{l:>5}  {:<12.6e}  {:<8.5}  {:>5}  {}",
            o.epsilon, o.cett, o.iterations, o.monotone
        );
        if !o.monotone {
            tracing::warn!("layer {l}: feasibility was not monotone over the evaluated thresholds");
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn generate_cmd(g: &Global, a: &GenerateArgs) -> CmdResult {
    if matches!(a.strategy, StrategyArg::Tt | StrategyArg::Tda) && g.profile.is_none() {
        return Err(CliError::Usage("--strategy tt/tda needs --profile".into()));
    }
    if a.strategy == StrategyArg::Griffin && !(a.sparsity > 0.0 && a.sparsity < 1.0) {
        return Err(CliError::Usage(format!(
            "--sparsity {} not in (0, 1)",
            a.sparsity
        )));
    }
    if a.temperature.is_some_and(|t| !(t > 0.0)) {
        return Err(CliError::Usage("--temperature must be positive".into()));
    }
    if a.mask_refresh == Some(0) {
        return Err(CliError::Usage("--mask-refresh must be at least 1".into()));
    }
    model_path(g)?;
    let profile = load_profile(g)?;
    let w = load_model(g)?;
    let strategy = match a.strategy {
        StrategyArg::Dense => FfnStrategy::Dense,
        StrategyArg::Griffin => FfnStrategy::Griffin {
            sparsity: a.sparsity,
        },
        StrategyArg::Tt => FfnStrategy::Tt(profile.expect("checked above")),
        StrategyArg::Tda => FfnStrategy::Tda(profile.expect("checked above")),
    };
    let mut req = GenerationRequest::new(tokenize(&a.prompt), a.max_new_tokens, strategy);
    req.mask_refresh = a.mask_refresh;
    if let Some(temperature) = a.temperature {
        req.sampling = Sampling::Temperature {
            temperature,
            seed: g.seed,
        };
    }
    let r = generate(&w, &req)?;

    println!("{}", printable(&detokenize(&r.tokens)));
    println!("---");
    println!("strategy: {}", r.stats.strategy);
    println!("new_tokens: {}", r.tokens.len());
    println!("mean_active_fraction: {:.6}", r.stats.mean_active_fraction);
    let per: Vec<String> = r
        .stats
        .per_layer_active_fraction
        .iter()
        .map(|f| format!("{f:.4}"))
        .collect();
    println!("per_layer_active_fraction: {}", per.join(" "));
    println!("ffn_mul_adds: {}", r.stats.ffn_mul_adds);
    println!("time prefill_ms: {:.3}", r.prefill_time.as_secs_f64() * 1e3);
    println!(
        "time generation_ms: {:.3}",
        r.generation_time().as_secs_f64() * 1e3
    );
    Ok(())
}

/// Escapes control characters other than newline and tab.
fn printable(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\n' | '\t' => c.to_string(),
            c if c.is_control() => c.escape_default().to_string(),
            c => c.to_string(),
        })
        .collect()
}

fn read_samples(path: &Path) -> Result<Vec<Sample>, CliError> {
    let text = fs::read_to_string(path)?;
    let samples: Vec<Sample> = serde_json::from_str(&text).map_err(Error::from)?;
    Ok(samples)
}

fn analyze_inertia(g: &Global, a: &InertiaArgs) -> CmdResult {
    model_path(g)?;
    let samples = match &a.samples {
        Some(p) => read_samples(p)?,
        None => builtin_samples(),
    };
    if samples.len() < 2 {
        return Err(Error::Contract("the battery needs at least two samples".into()).into());
    }
    let profile = load_profile(g)?;
    let w = load_model(g)?;
    fs::create_dir_all(&g.out_dir)?;
    let opts = InertiaOptions {
        metric: match a.metric {
            MetricArg::Jaccard => SimilarityMetric::Jaccard,
            MetricArg::Cosine => SimilarityMetric::Cosine,
        },
        layer: a.layer,
        profile: profile.clone(),
        threshold: a.threshold,
    };
    let report = inertia_battery(&w, &samples, &opts)?;
    fs::write(g.out_dir.join("similarity.csv"), report.matrix.to_csv())?;
    let mut ordinal = serde_json::to_string_pretty(&report.checks).map_err(Error::from)?;
    ordinal.push('\n');
    fs::write(g.out_dir.join("ordinal.json"), ordinal)?;

    // heatmaps of the first sample at one layer, with and without context
    let layer = a.layer.unwrap_or(w.layers.len() - 1);
    let thr = match (&profile, a.threshold) {
        (Some(p), _) => ReportThreshold::Profile(p),
        (None, Some(t)) => ReportThreshold::Fixed(t),
        (None, None) => ReportThreshold::RelativeToMax,
    };
    let tokens = tokenize(&samples[0].text);
    let token_mode = extract_pattern(&w, &tokens[1..], PatternMode::PerToken, layer, thr)?;
    let mut seq_mode = extract_pattern(&w, &tokens, PatternMode::AsSequence, layer, thr)?;
    seq_mode.remove(0);
    fs::write(
        g.out_dir.join("heatmap_token.csv"),
        flocking_csv(&token_mode)?,
    )?;
    fs::write(
        g.out_dir.join("heatmap_sequence.csv"),
        flocking_csv(&seq_mode)?,
    )?;

    println!("samples: {}", report.matrix.n());
    println!(
        "gini layer {layer}: token {:.4} sequence {:.4}",
        gini(&activation_frequency(&token_mode)),
        gini(&activation_frequency(&seq_mode))
    );
    for c in &report.checks {
        let verdict = match c.pass {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "n/a",
        };
        println!("{:<16} {:.4} vs {:.4}  {verdict}", c.check_id, c.lhs, c.rhs);
    }
    if !report.checks.is_empty() && !report.pretrained {
        println!("ordinal checks not asserted: weights are not marked pretrained");
    }
    println!("wrote {}", g.out_dir.display());
    Ok(())
}

fn bench(g: &Global, a: &BenchArgs) -> CmdResult {
    if a.strategies.is_empty() {
        return Err(CliError::Usage("--strategies is empty".into()));
    }
    if a.repetitions < 3 {
        return Err(CliError::Usage("--repetitions must be at least 3".into()));
    }
    if !(a.sparsity > 0.0 && a.sparsity < 1.0) {
        return Err(CliError::Usage(format!(
            "--sparsity {} not in (0, 1)",
            a.sparsity
        )));
    }
    model_path(g)?;
    let profile = load_profile(g)?;
    let w = load_model(g)?;
    let mut strategies: Vec<StrategyKind> = Vec::new();
    for s in &a.strategies {
        let k = match s {
            StrategyArg::Dense => StrategyKind::Dense,
            StrategyArg::Tt => StrategyKind::Tt,
            StrategyArg::Griffin => StrategyKind::Griffin,
            StrategyArg::Tda => StrategyKind::Tda,
        };
        if !strategies.contains(&k) {
            strategies.push(k);
        }
    }
    let spec = BenchSpec {
        prompt_len: a.prompt_len,
        new_tokens: a.new_tokens,
        strategies,
        repetitions: a.repetitions,
        warmups: a.warmups,
        seed: g.seed,
        sparsity: a.sparsity,
        cett_target: a.cett_target,
        calibration_len: a.calibration_len,
        tt_profile: profile.clone(),
        tda_profile: profile,
    };
    let report = run_bench(&w, &spec)?;
    fs::create_dir_all(&g.out_dir)?;
    for f in &a.formats {
        let (fmt, name) = match f {
            FormatArg::Json => (ReportFormat::Json, "bench.json"),
            FormatArg::Csv => (ReportFormat::Csv, "bench.csv"),
            FormatArg::Markdown => (ReportFormat::Markdown, "bench.md"),
        };
        fs::write(g.out_dir.join(name), render_report(&report, fmt)?)?;
    }
    print!("{}", render_report(&report, ReportFormat::Markdown)?);
    if report.noisy {
        tracing::warn!("timings are noisy (stddev/median above 25%)");
    }
    Ok(())
}

fn emergence(g: &Global, a: &EmergenceArgs) -> CmdResult {
    let d = EmergenceConfig::default();
    let cfg = EmergenceConfig {
        seed: g.seed,
        steps: a.steps.unwrap_or(d.steps),
        lr: a.lr.unwrap_or(d.lr),
        d_in: a.d_in.unwrap_or(d.d_in),
        d_hidden: a.d_hidden.unwrap_or(d.d_hidden),
        classes: a.classes.unwrap_or(d.classes),
        record_every: a.record_every.unwrap_or(d.record_every),
        ..d
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let variants = match a.variant {
        VariantArg::Relu => vec![ToyVariant::Relu],
        VariantArg::Swiglu => vec![ToyVariant::Swiglu],
        VariantArg::Both => vec![ToyVariant::Relu, ToyVariant::Swiglu],
    };
    fs::create_dir_all(&g.out_dir)?;
    let mut finals = Vec::new();
    for v in variants {
        let t = emergence_experiment(&cfg, v)?;
        let path = g.out_dir.join(format!("trajectory_{}.csv", v.name()));
        fs::write(&path, t.to_csv())?;
        println!(
            "{}: near-zero fraction {:.4} -> {:.4}, mean positive pre-activation {:.4} -> {:.4} ({})",
            v.name(),
            t.initial().near_zero_fraction,
            t.last().near_zero_fraction,
            t.initial().mean_pos_magnitude,
            t.last().mean_pos_magnitude,
            path.display()
        );
        finals.push(t.last().near_zero_fraction);
    }
    if let [relu, swiglu] = finals[..] {
        let cmp = if relu > swiglu { ">" } else { "<=" };
        println!("final near-zero fraction: relu {relu:.4} {cmp} swiglu {swiglu:.4}");
    }
    Ok(())
}

fn make_toy_model(g: &Global, a: &ToyModelArgs) -> CmdResult {
    let config = ModelConfig {
        n_layers: a.layers,
        d_model: a.d_model,
        d_ff: a.d_ff,
        n_heads: a.heads,
        vocab_size: a.vocab,
        activation_kind: match a.activation {
            ActivationArg::Relu => ActivationKind::Relu,
            ActivationArg::Silu => ActivationKind::Silu,
            ActivationArg::ReluSquared => ActivationKind::ReluSquared,
        },
        max_seq_len: a.max_seq_len,
        sinusoidal_positions: a.sinusoidal_positions,
        ..ModelConfig::default()
    };
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let path = out_path(g, &a.out, "model.safetensors")?;
    let w = ModelWeights::random(config, g.seed)?;
    w.save(&path)?;
    w.config.save(ModelConfig::sidecar_path(&path))?;
    println!(
        "wrote {} and {}",
        path.display(),
        ModelConfig::sidecar_path(&path).display()
    );
    Ok(())
}
