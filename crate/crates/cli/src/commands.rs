use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use sundial::backbone::ModelConfig;
use sundial::checkpoint;
use sundial::data::{load_corpus, parse_corpus, save_corpus, synth_corpus, SeriesRecord};
use sundial::eval::{
    evaluate, forecast_header, rolling_forecast, series_rng, write_forecast_rows, EvalConfig, Metric, Report,
};
use sundial::fmt::g9;
use sundial::tensor::{multiply_count, reset_multiply_count};
use sundial::training::{fine_tune_config, grad_check, init_model, smooth, LossLog, StepRecord, TrainConfig, Trainer};
use sundial::SundialModel;

use crate::manifest::{beside, RunManifest};
use crate::{
    AblateArgs, Command, EvaluateArgs, FinetuneArgs, ForecastArgs, GradcheckArgs, Optim, Sampling, SynthArgs, Toggle,
    TrainArgs,
};

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Forecast(a) => forecast(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    }
    .map(|passed| if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Preset name or path to a JSON model configuration.
fn model_config(choice: &str) -> Result<ModelConfig> {
    let cfg = match choice {
        "tiny" => ModelConfig::tiny(),
        "toy" => ModelConfig::toy(),
        "small" => ModelConfig::small(),
        "base" => ModelConfig::base(),
        "large" => ModelConfig::large(),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading model config {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing model config {path}"))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(model: &ModelConfig, o: &Optim, seed: u64, base: TrainConfig) -> Result<TrainConfig> {
    let mut c = match &o.train_config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing training config {}", p.display()))?,
        None => base,
    };
    c.seed = seed;
    c.objective = model.head;
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => { $(if let Some(v) = o.$flag { c.$field = v; })* };
    }
    set!(steps <- steps, batch_size <- batch_size, lr_peak <- lr, warmup_steps <- warmup,
         weight_decay <- weight_decay, grad_clip_norm <- clip, min_context <- min_context,
         max_context <- max_context);
    c.validate(model)?;
    Ok(c)
}

/// Writes through a temporary sibling so the target either appears
/// complete or not at all.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn levels(s: &str) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad quantile level {p:?}")))
        .collect::<Result<Vec<_>>>()?;
    sundial::eval::check_levels(&v)?;
    Ok(v)
}

fn load(path: &Path, m: &mut RunManifest) -> Result<Vec<SeriesRecord>> {
    m.input(path)?;
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_model(path: &Path, m: &mut RunManifest) -> Result<SundialModel> {
    m.input(path)?;
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<bool> {
    let mut m = RunManifest::start("synth");
    m.seed = Some(a.common.seed);
    m.config(json!({"count": a.count, "length": a.length, "max_kernels": a.max_kernels}))?;
    let corpus = synth_corpus(a.common.seed, a.count, a.length, a.max_kernels)?;
    save_corpus(&a.out, &corpus)?;
    m.output(&a.out)?;
    m.finish(Some(a.common.manifest.unwrap_or_else(|| beside(&a.out))))?;
    Ok(true)
}

fn write_curves(path: &Path, records: &[StepRecord]) -> Result<()> {
    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let sm = smooth(&losses, 50);
    let mut out = String::from("step,loss,smoothed\n");
    for (r, s) in records.iter().zip(sm) {
        out.push_str(&format!("{},{},{}\n", r.step, g9(r.loss), g9(s)));
    }
    write_atomic(path, out.as_bytes())
}

/// Runs the schedule, streaming each record to the optional loss log.
fn run_training(
    model: &mut SundialModel,
    corpus: &[SeriesRecord],
    cfg: &TrainConfig,
    loss_log: Option<&Path>,
) -> Result<Vec<StepRecord>> {
    let mut log = match loss_log {
        Some(p) => Some(LossLog::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        ))?),
        None => None,
    };
    let records = Trainer::new(cfg.clone()).run(model, corpus, |r| match &mut log {
        Some(l) => l.record(r),
        None => Ok(()),
    });
    if let Some(l) = log {
        l.into_inner()?;
    }
    Ok(records?)
}

#[derive(Serialize)]
struct TrainSettings<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn finish_training(
    mut m: RunManifest,
    model: &SundialModel,
    records: &[StepRecord],
    out: &Path,
    loss_log: Option<&Path>,
    optim: &Optim,
    manifest: Option<PathBuf>,
) -> Result<bool> {
    checkpoint::save(model, out)?;
    m.output(out)?;
    if let Some(p) = loss_log {
        m.output(p)?;
    }
    if let Some(p) = &optim.emit_curves {
        write_curves(p, records)?;
        m.output(p)?;
    }
    if let Some(r) = records.last() {
        println!("trained {} steps, final loss {}", r.step, g9(r.loss));
    }
    m.finish(Some(manifest.unwrap_or_else(|| beside(out))))?;
    Ok(true)
}

fn train(a: TrainArgs) -> Result<bool> {
    let mut m = RunManifest::start("train");
    let mut cfg = model_config(&a.config)?;
    if let Some(o) = a.objective {
        cfg.head = o.into();
    }
    let tc = train_config(&cfg, &a.optim, a.common.seed, TrainConfig::for_model(&cfg))?;
    m.seed = Some(tc.seed);
    m.config(TrainSettings { model: &cfg, train: &tc })?;
    let corpus = load(&a.corpus, &mut m)?;
    let mut model = init_model(&cfg, tc.seed)?;
    let records = run_training(&mut model, &corpus, &tc, a.loss_log.as_deref())?;
    finish_training(m, &model, &records, &a.out_checkpoint, a.loss_log.as_deref(), &a.optim, a.common.manifest)
}

fn finetune(a: FinetuneArgs) -> Result<bool> {
    let mut m = RunManifest::start("finetune");
    let mut model = load_model(&a.checkpoint, &mut m)?;
    if let Some(choice) = &a.expect_config {
        let diff = checkpoint::architecture_diff(&model.config, &model_config(choice)?);
        if !diff.is_empty() {
            return Err(sundial::Error::Architecture(diff).into());
        }
    }
    let cfg = model.config.clone();
    let tc = train_config(&cfg, &a.optim, a.common.seed, fine_tune_config(&TrainConfig::for_model(&cfg)))?;
    m.seed = Some(tc.seed);
    m.config(TrainSettings { model: &cfg, train: &tc })?;
    let corpus = load(&a.corpus, &mut m)?;
    let records = run_training(&mut model, &corpus, &tc, a.loss_log.as_deref())?;
    finish_training(m, &model, &records, &a.out_checkpoint, a.loss_log.as_deref(), &a.optim, a.common.manifest)
}

/// A corpus file, or whitespace/comma separated numbers forming one series.
fn read_contexts(path: &Path) -> Result<Vec<SeriesRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.trim_start().chars().next();
    if first == Some('{') {
        return Ok(parse_corpus(&text)?);
    }
    let values = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("{}: {t:?} is not a number", path.display())))
        .collect::<Result<Vec<_>>>()?;
    let rec = SeriesRecord::new("context", values);
    rec.validate()?;
    Ok(vec![rec])
}

#[derive(Serialize)]
struct SamplingSettings<'a> {
    horizon: usize,
    samples: usize,
    steps: usize,
    levels: &'a [f64],
}

fn forecast(a: ForecastArgs) -> Result<bool> {
    let mut m = RunManifest::start("forecast");
    let lv = levels(&a.sampling.levels)?;
    m.seed = Some(a.common.seed);
    m.config(SamplingSettings {
        horizon: a.horizon,
        samples: a.sampling.samples,
        steps: a.sampling.steps,
        levels: &lv,
    })?;
    let model = load_model(&a.checkpoint, &mut m)?;
    m.input(&a.context_file)?;
    let contexts = read_contexts(&a.context_file)?;
    let mut out = Vec::new();
    writeln!(out, "{}", forecast_header(&lv))?;
    for (i, rec) in contexts.iter().enumerate() {
        let mut rng = series_rng(a.common.seed, i);
        let ens = rolling_forecast(&model, &rec.values, a.horizon, a.sampling.samples, a.sampling.steps, &lv, &mut rng)
            .with_context(|| format!("forecasting series {}", rec.id))?;
        write_forecast_rows(&mut out, &rec.id, &ens)?;
    }
    write_atomic(&a.out, &out)?;
    m.output(&a.out)?;
    m.finish(Some(a.common.manifest.unwrap_or_else(|| beside(&a.out))))?;
    Ok(true)
}

fn eval_config(horizon: usize, s: &Sampling, metrics: &str, seed: u64) -> Result<EvalConfig> {
    Ok(EvalConfig {
        horizon,
        members: s.samples,
        steps: s.steps,
        levels: levels(&s.levels)?,
        metrics: Metric::parse_list(metrics)?,
        seed,
    })
}

fn report_bytes(r: &Report) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    r.write_csv(&mut out)?;
    Ok(out)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<bool> {
    let mut m = RunManifest::start("evaluate");
    let ec = eval_config(a.horizon, &a.sampling, &a.metrics, a.common.seed)?;
    m.seed = Some(ec.seed);
    m.config(&ec)?;
    let model = load_model(&a.checkpoint, &mut m)?;
    let corpus = load(&a.corpus, &mut m)?;
    let report = evaluate(&model, &corpus, &ec)?;
    write_atomic(&a.out, &report_bytes(&report)?)?;
    for metric in report.metrics() {
        let (mean, inf) = report.aggregate(metric);
        let note = if inf > 0 { format!(" ({inf} undefined)") } else { String::new() };
        println!("{metric}: {}{note}", g9(mean));
    }
    m.output(&a.out)?;
    m.finish(Some(a.common.manifest.unwrap_or_else(|| beside(&a.out))))?;
    Ok(true)
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let mut m = RunManifest::start("gradcheck");
    let cfg = match &a.config {
        Some(choice) => model_config(choice)?,
        None => ModelConfig::tiny(),
    };
    m.seed = Some(a.common.seed);
    m.config(json!({"model": &cfg, "samples": a.samples, "tolerance": a.tolerance}))?;
    let r = grad_check(&cfg, a.common.seed, a.samples, a.tolerance)?;
    println!(
        "{}: {} entries, max relative error {} at {} (tolerance {})",
        if r.passed { "PASS" } else { "FAIL" },
        r.checked,
        g9(r.max_rel_error),
        r.worst,
        g9(r.tolerance)
    );
    let target = match &a.out {
        Some(p) => {
            write_atomic(p, (serde_json::to_string_pretty(&r)? + "\n").as_bytes())?;
            m.output(p)?;
            a.common.manifest.or_else(|| Some(beside(p)))
        }
        None => a.common.manifest,
    };
    m.finish(target)?;
    if !r.passed {
        eprintln!("error: gradient check failed");
    }
    Ok(r.passed)
}

struct VariantResult {
    name: String,
    config: ModelConfig,
    final_loss: f64,
    report: Report,
    multiplies: u64,
}

fn score_variant(
    name: &str,
    model: &SundialModel,
    records: &[StepRecord],
    held: &[SeriesRecord],
    ec: &EvalConfig,
) -> Result<VariantResult> {
    reset_multiply_count();
    let report = evaluate(model, held, ec)?;
    let multiplies = multiply_count();
    let tail = (records.len() / 10).max(1);
    let final_loss = if records.is_empty() {
        f64::NAN
    } else {
        records[records.len() - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64
    };
    Ok(VariantResult {
        name: name.into(),
        config: model.config.clone(),
        final_loss,
        report,
        multiplies,
    })
}

fn ablate(a: AblateArgs) -> Result<bool> {
    let mut m = RunManifest::start("ablate");
    let base = model_config(&a.config)?;
    let mut flipped = base.clone();
    match a.toggle {
        Toggle::Rope => flipped.rope = !flipped.rope,
        Toggle::PreLn => flipped.pre_ln = !flipped.pre_ln,
        Toggle::KvCache => flipped.kv_cache = !flipped.kv_cache,
    }
    let tc = train_config(&base, &a.optim, a.common.seed, TrainConfig::for_model(&base))?;
    let horizon = a.horizon.unwrap_or(base.horizon);
    let ec = EvalConfig {
        horizon,
        members: a.samples,
        steps: a.sample_steps,
        metrics: vec![Metric::Mse, Metric::Wql, Metric::Crps],
        ..EvalConfig::new(horizon)
    };
    m.seed = Some(tc.seed);
    m.config(json!({"baseline": &base, "variant": &flipped, "train": &tc, "eval": &ec}))?;
    let corpus = load(&a.corpus, &mut m)?;
    let held = match &a.eval_corpus {
        Some(p) => load(p, &mut m)?,
        None => corpus.clone(),
    };

    let mut results = Vec::new();
    let mut curves = Vec::new();
    if a.toggle == Toggle::KvCache {
        // the cache changes inference only, so one set of weights serves both
        let mut model = init_model(&base, tc.seed)?;
        let records = run_training(&mut model, &corpus, &tc, None)?;
        for (name, cfg) in [("baseline", &base), ("variant", &flipped)] {
            model.config.kv_cache = cfg.kv_cache;
            results.push(score_variant(name, &model, &records, &held, &ec)?);
        }
        curves.push(("shared", records));
    } else {
        for (name, cfg) in [("baseline", &base), ("variant", &flipped)] {
            let mut model = init_model(cfg, tc.seed)?;
            let records = run_training(&mut model, &corpus, &tc, None)?;
            results.push(score_variant(name, &model, &records, &held, &ec)?);
            curves.push((name, records));
        }
    }

    let mut out = String::from("variant,rope,pre_ln,kv_cache,final_loss,mse,wql,crps,forecast_multiplies\n");
    for r in &results {
        let agg = |metric| g9(r.report.aggregate(metric).0);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.name,
            r.config.rope,
            r.config.pre_ln,
            r.config.kv_cache,
            g9(r.final_loss),
            agg(Metric::Mse),
            agg(Metric::Wql),
            agg(Metric::Crps),
            r.multiplies
        ));
    }
    write_atomic(&a.out, out.as_bytes())?;
    print!("{out}");
    m.output(&a.out)?;
    if let Some(p) = &a.optim.emit_curves {
        let mut text = String::from("variant,step,loss,smoothed\n");
        for (name, records) in &curves {
            let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
            for (r, s) in records.iter().zip(smooth(&losses, 50)) {
                text.push_str(&format!("{name},{},{},{}\n", r.step, g9(r.loss), g9(s)));
            }
        }
        write_atomic(p, text.as_bytes())?;
        m.output(p)?;
    }
    if results.iter().any(|r| r.report.rows.is_empty()) {
        bail!("evaluation produced no scores");
    }
    m.finish(Some(a.common.manifest.unwrap_or_else(|| beside(&a.out))))?;
    Ok(true)
}
