//! Implementations behind the command-line subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use calm_core::elo::{self, ComparisonRecord, EloConfig, Outcome};
use calm_core::eval::bench::{BenchOptions, BenchReport, BenchRow, BenchSystem, COLUMNS};
use calm_core::eval::energy::{conditional_oracle_test, OracleOptions};
use calm_core::eval::{diversity, frechet_with_ci, Embedder};
use calm_core::heads::HeadKind;
use calm_core::model::Model;
use calm_core::optim::{AdamConfig, AdamW};
use calm_core::rng;
use calm_core::sampling::{generate as generate_seq, Clock, GenerationTrace, SamplerConfig};
use calm_core::source::rvq::RvqTrainer;
use calm_core::source::vae::{Posterior, Vae};
use calm_core::source::{LatentSequence, NormStats, SourceKind};
use calm_core::tensor::Scalar;
use calm_core::training::{self, TrainState};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_train_state, load_vae, read_header, save_train_state, save_vae};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::formats::{load_corpus, save_corpus, write_file, StatsFile};
use crate::manifest::{ExperimentLock, RunManifest};

pub const THREADS_ENV: &str = "CALM_THREADS";

/// Worker count from `CALM_THREADS`, defaulting to one.
pub fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub struct MonotonicClock {
    origin: std::time::Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        MonotonicClock {
            origin: std::time::Instant::now(),
        }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

pub fn corpus_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.train
        .corpus
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("corpus.bin"))
}

pub fn stats_path(dir: &Path) -> PathBuf {
    dir.join("stats.json")
}

pub fn model_path(dir: &Path) -> PathBuf {
    dir.join("model.ckpt")
}

pub fn vae_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.source
        .vae_checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("vae.ckpt"))
}

fn save_config_copy(cfg: &ExperimentConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let p = cfg.output_dir.join("config.toml");
    write_file(&p, cfg.to_toml().as_bytes())?;
    manifest.add(&p);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSummary {
    pub corpus: PathBuf,
    pub stats: PathBuf,
    pub sequences: usize,
    pub stats_file: StatsFile,
}

pub fn make_corpus(cfg: &ExperimentConfig) -> Result<CorpusSummary, CliError> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    let _lock = ExperimentLock::acquire(dir)?;
    let mut manifest = RunManifest::start("make-corpus", cfg);
    save_config_copy(cfg, &mut manifest)?;
    let seqs = match cfg.source_kind()? {
        SourceKind::ToyVae => vae_corpus(cfg)?,
        _ => cfg
            .source_spec()
            .sample_corpus(cfg.source.count, cfg.seed)?,
    };
    let channels = cfg.source.channels;
    let corpus = dir.join("corpus.bin");
    save_corpus(&corpus, channels, cfg.source.frame_rate, &seqs)?;
    let stats = if seqs.is_empty() {
        NormStats::identity(channels)
    } else {
        NormStats::fit(&seqs)?
    };
    let stats_file = StatsFile::new(&stats, &seqs);
    let sp = stats_path(dir);
    stats_file.save(&sp)?;
    manifest.add(&corpus);
    manifest.add(&sp);
    manifest.finish(dir)?;
    Ok(CorpusSummary {
        corpus,
        stats: sp,
        sequences: seqs.len(),
        stats_file,
    })
}

fn vae_corpus(cfg: &ExperimentConfig) -> Result<Vec<LatentSequence>, CliError> {
    let (_, vae) = load_vae::<f32>(&vae_path(cfg))?;
    let waves = cfg.waveform_spec();
    (0..cfg.source.count)
        .map(|i| {
            let seed = rng::mix(cfg.seed, i as u64);
            let post = if cfg.vae.sample_posterior {
                Posterior::Sample { seed }
            } else {
                Posterior::Mean
            };
            Ok(vae.latents(&waves.sample(seed), post)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeSummary {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    pub final_kl: f64,
}

pub fn train_vae(cfg: &ExperimentConfig) -> Result<VaeSummary, CliError> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    let _lock = ExperimentLock::acquire(dir)?;
    let mut manifest = RunManifest::start("train-vae", cfg);
    let v = &cfg.vae;
    let mut vae = Vae::<f32>::new(cfg.vae_config(), cfg.seed)?;
    let mut opt = AdamW::new(&vae.store, AdamConfig::default());
    let waves = cfg.waveform_spec();
    let mut last = None;
    for step in 0..v.steps {
        let batch: Vec<Vec<f64>> = (0..v.batch_size)
            .map(|i| {
                waves.sample(rng::mix(
                    cfg.seed ^ 0x5eed,
                    step * v.batch_size as u64 + i as u64,
                ))
            })
            .collect();
        let lr = calm_core::optim::lr_at(
            step,
            v.lr,
            calm_core::optim::default_warmup(v.steps),
            v.steps,
        );
        last = Some(vae.train_step(&mut opt, &batch, lr, rng::mix(cfg.seed, step))?);
    }
    let loss = last.map_or(f64::NAN, |l| l.total);
    let kl = last.map_or(f64::NAN, |l| l.kl);
    let path = dir.join("vae.ckpt");
    save_vae(&path, cfg, &vae, v.steps, loss)?;
    manifest.add(&path);
    manifest.finish(dir)?;
    Ok(VaeSummary {
        checkpoint: path,
        final_loss: loss,
        final_kl: kl,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) after this many total steps.
    pub until: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub mean_loss: f64,
    pub skipped: u64,
}

pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    match cfg.train.precision.as_str() {
        "f64" => train_typed::<f64>(cfg, opts),
        _ => train_typed::<f32>(cfg, opts),
    }
}

fn load_stats(dir: &Path, corpus: &[LatentSequence]) -> Result<NormStats, CliError> {
    let sp = stats_path(dir);
    if sp.exists() {
        Ok(StatsFile::load(&sp)?.norm())
    } else {
        Ok(NormStats::fit(corpus)?)
    }
}

fn fit_codebooks(
    cfg: &ExperimentConfig,
    frames: &[f64],
    channels: usize,
) -> Result<calm_core::source::rvq::RvqCodebooks, CliError> {
    let n = frames.len() / channels;
    let init_rows = n.min(4096);
    let mut trainer = RvqTrainer::new(
        channels,
        &cfg.head.codebooks,
        &frames[..init_rows * channels],
        rng::mix(cfg.seed, 77),
    )?;
    let mut r = rng::stream(cfg.seed, 78);
    let batch = 256.min(n);
    for _ in 0..cfg.head.rvq_steps {
        let mut b = Vec::with_capacity(batch * channels);
        for _ in 0..batch {
            let i = (rng::uniform(&mut r) * n as f64) as usize % n;
            b.extend_from_slice(&frames[i * channels..(i + 1) * channels]);
        }
        trainer.update(&b)?;
    }
    Ok(trainer.books)
}

fn train_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    opts: &TrainOptions,
) -> Result<TrainSummary, CliError> {
    let dir = &cfg.output_dir;
    let _lock = ExperimentLock::acquire(dir)?;
    let mut manifest = RunManifest::start("train", cfg);
    save_config_copy(cfg, &mut manifest)?;
    let cpath = corpus_path(cfg);
    let corpus = load_corpus(&cpath)?;
    if corpus.channels != cfg.source.channels {
        return Err(CliError::Config(format!(
            "corpus {} has {} channels but the model expects {}",
            cpath.display(),
            corpus.channels,
            cfg.source.channels
        )));
    }
    if corpus.sequences.is_empty() {
        return Err(CliError::Config(format!(
            "corpus {} is empty",
            cpath.display()
        )));
    }
    let tcfg = cfg.train_config();
    let (mut state, stats) = match &opts.resume {
        Some(p) => {
            let loaded = load_train_state::<T>(p)?;
            let stats = match loaded.norm {
                Some(n) => n,
                None => load_stats(dir, &corpus.sequences)?,
            };
            (loaded.state, stats)
        }
        None => {
            let stats = load_stats(dir, &corpus.sequences)?;
            let mut model = Model::<T>::new(cfg.model_config()?, cfg.seed)?;
            if model.head.kind() == HeadKind::Rq {
                let frames: Vec<f64> = corpus
                    .sequences
                    .iter()
                    .map(|s| stats.normalize(s))
                    .collect::<Result<Vec<_>, _>>()?
                    .into_iter()
                    .flat_map(|s| s.frames)
                    .collect();
                model.codebooks = Some(fit_codebooks(cfg, &frames, corpus.channels)?);
            }
            (TrainState::new(model, &tcfg), stats)
        }
    };
    let normed: Vec<LatentSequence> = corpus
        .sequences
        .iter()
        .map(|s| stats.normalize(s))
        .collect::<Result<_, _>>()?;
    let end = opts.until.unwrap_or(tcfg.total_steps).min(tcfg.total_steps);
    let mut log = String::from("step,loss,lr,grad_norm,skipped\n");
    let log_every = cfg.train.log_every.max(1);
    let ck_every = cfg.train.checkpoint_every;
    let ck_dir = dir.join("checkpoints");
    while state.step < end {
        let idx = training::batch_indices(normed.len(), tcfg.batch_size, tcfg.seed, state.step);
        let batch: Vec<LatentSequence> = idx.iter().map(|&i| normed[i].clone()).collect();
        let rep = training::train_step(&mut state, &batch, &tcfg)?;
        if rep.step % log_every == 0 || state.step == end {
            let _ = writeln!(
                log,
                "{},{},{},{},{}",
                rep.step, rep.loss, rep.lr, rep.grad_norm, rep.skipped as u8
            );
        }
        if ck_every > 0 && state.step % ck_every == 0 {
            let p = ck_dir.join(format!("step-{:08}.ckpt", state.step));
            save_train_state(&p, cfg, &state, Some(&stats))?;
            manifest.add(&p);
        }
    }
    let path = model_path(dir);
    save_train_state(&path, cfg, &state, Some(&stats))?;
    let log_path = dir.join(format!("train_log_{:08}.csv", end));
    write_file(&log_path, log.as_bytes())?;
    manifest.add(&path);
    manifest.add(&log_path);
    manifest.finish(dir)?;
    Ok(TrainSummary {
        checkpoint: path,
        steps: state.step,
        mean_loss: state.stats.mean,
        skipped: state.skipped,
    })
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub checkpoint: PathBuf,
    pub head: Option<HeadKind>,
    pub steps: Option<usize>,
    pub temperature: Option<f64>,
    pub seed: u64,
    pub prompt: Option<PathBuf>,
    /// Number of unprompted sequences when no prompt file is given.
    pub count: usize,
    pub out: PathBuf,
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub sequences: Vec<LatentSequence>,
    pub traces: Vec<GenerationTrace>,
}

fn sampler_with(
    cfg: &ExperimentConfig,
    o: &GenerateOptions,
    seed: u64,
) -> Result<SamplerConfig, CliError> {
    let mut s = cfg.sampler_config(seed)?;
    if let Some(h) = o.head {
        if h != s.head {
            return Err(CliError::Config(format!(
                "checkpoint has a {} head but --head {} was requested",
                s.head.name(),
                h.name()
            )));
        }
    }
    if let Some(n) = o.steps {
        s.steps = n;
    }
    if let Some(t) = o.temperature {
        s.temperature = t;
    }
    s.validate()?;
    Ok(s)
}

/// Prompts from the first `prompt_frames` frames of every sequence in a
/// corpus file, or `count` empty prompts.
pub fn prompts(
    cfg: &ExperimentConfig,
    file: Option<&Path>,
    count: usize,
) -> Result<Vec<LatentSequence>, CliError> {
    match file {
        Some(p) => {
            let c = load_corpus(p)?;
            if c.channels != cfg.source.channels {
                return Err(CliError::Config(format!(
                    "prompt file has {} channels, model expects {}",
                    c.channels, cfg.source.channels
                )));
            }
            Ok(c.sequences
                .iter()
                .map(|s| s.prefix(cfg.sample.prompt_frames.min(s.len())))
                .collect())
        }
        None => Ok(vec![
            LatentSequence::empty(
                cfg.source.channels,
                cfg.source.frame_rate
            );
            count
        ]),
    }
}

pub fn generate(o: &GenerateOptions) -> Result<GenerateSummary, CliError> {
    match read_header(&o.checkpoint)?.precision.as_str() {
        "f64" => generate_typed::<f64>(o),
        _ => generate_typed::<f32>(o),
    }
}

fn generate_typed<T: Scalar>(o: &GenerateOptions) -> Result<GenerateSummary, CliError> {
    let loaded = load_train_state::<T>(&o.checkpoint)?;
    let cfg = &loaded.header.config;
    let stats = loaded
        .norm
        .clone()
        .unwrap_or_else(|| NormStats::identity(cfg.source.channels));
    let ps = prompts(cfg, o.prompt.as_deref(), o.count.max(1))?;
    let clock = MonotonicClock::default();
    let mut sequences = Vec::with_capacity(ps.len());
    let mut traces = Vec::with_capacity(ps.len());
    let mut rows = String::from("sequence,frame,stage,microseconds\n");
    for (i, p) in ps.iter().enumerate() {
        let sc = sampler_with(cfg, o, rng::mix(o.seed, i as u64))?;
        let t = generate_seq(loaded.model(), p, &sc, Some(&stats), &clock)?;
        for (f, ft) in t.timings.iter().enumerate() {
            for (stage, secs) in [
                ("backbone", ft.backbone),
                ("head", ft.head),
                ("other", ft.other),
            ] {
                let _ = writeln!(rows, "{i},{f},{stage},{:.3}", secs * 1e6);
            }
        }
        sequences.push(t.frames.clone());
        traces.push(t);
    }
    save_corpus(
        &o.out,
        cfg.source.channels,
        cfg.source.frame_rate,
        &sequences,
    )?;
    if let Some(tp) = &o.trace {
        write_file(tp, rows.as_bytes())?;
    }
    Ok(GenerateSummary { sequences, traces })
}

#[derive(Debug, Clone)]
pub struct BenchEntry {
    pub name: String,
    pub checkpoint: PathBuf,
    pub steps: Option<usize>,
}

impl BenchEntry {
    /// `name=path` or `name=path:steps`.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let (name, rest) = s.split_once('=').ok_or_else(|| {
            CliError::Config(format!(
                "system `{s}` must look like name=checkpoint[:steps]"
            ))
        })?;
        let (path, steps) = match rest.rsplit_once(':') {
            Some((p, n)) if n.chars().all(|c| c.is_ascii_digit()) && !n.is_empty() => (
                p,
                Some(
                    n.parse()
                        .map_err(|_| CliError::Config(format!("bad step count in `{s}`")))?,
                ),
            ),
            _ => (rest, None),
        };
        Ok(BenchEntry {
            name: name.into(),
            checkpoint: path.into(),
            steps,
        })
    }
}

pub fn bench(
    entries: &[BenchEntry],
    prompt: Option<&Path>,
    options: BenchOptions,
    out_dir: &Path,
) -> Result<BenchReport, CliError> {
    if entries.is_empty() {
        return Err(CliError::Config("bench needs at least one system".into()));
    }
    let loaded: Vec<_> = entries
        .iter()
        .map(|e| load_train_state::<f32>(&e.checkpoint))
        .collect::<Result<_, _>>()?;
    let cfg0 = &loaded[0].header.config;
    let ps = prompts(cfg0, prompt, 1)?;
    let systems: Vec<BenchSystem<'_, f32>> = entries
        .iter()
        .zip(&loaded)
        .map(|(e, l)| {
            let mut s = l.header.config.sampler_config(0)?;
            if let Some(n) = e.steps {
                s.steps = n;
            }
            s.max_frames = cfg0.sample.max_frames;
            Ok(BenchSystem {
                name: e.name.clone(),
                model: l.model(),
                sampler: s,
            })
        })
        .collect::<Result<_, CliError>>()?;
    let clock = MonotonicClock::default();
    let report = calm_core::eval::bench(&systems, &ps, options, &clock)?;
    write_file(&out_dir.join("bench.csv"), report.to_csv().as_bytes())?;
    write_file(&out_dir.join("bench.txt"), report.render().as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub generations: usize,
    pub fad: f64,
    pub fad_ci: Option<(f64, f64)>,
    pub jittered: bool,
    pub similarity: f64,
    pub reference_similarity: f64,
    pub oracle_histories: usize,
    pub oracle_passed: Option<usize>,
}

/// Fréchet distance and diversity of unprompted generations against a
/// reference corpus; oracle tests when the source is analytic.
pub fn eval(
    checkpoint: &Path,
    reference: &Path,
    seed: u64,
    out_dir: &Path,
) -> Result<EvalReport, CliError> {
    let loaded = load_train_state::<f32>(checkpoint)?;
    let cfg = &loaded.header.config;
    let e = &cfg.eval;
    let stats = loaded
        .norm
        .clone()
        .unwrap_or_else(|| NormStats::identity(cfg.source.channels));
    let refc = load_corpus(reference)?;
    let len = cfg.sample.max_frames;
    let refs: Vec<LatentSequence> = refc
        .sequences
        .iter()
        .filter(|s| s.len() >= len)
        .map(|s| s.prefix(len))
        .take(e.generations)
        .collect();
    let emb = Embedder::new(
        cfg.source.channels,
        e.embed_window,
        e.embed_dim,
        e.embed_seed,
    )?;
    let workers = threads();
    let gens = parallel_generate(loaded.model(), cfg, &stats, e.generations, seed, workers)?;
    let ge = emb.embed_all(&gens)?;
    let re = emb.embed_all(&refs)?;
    let fr = frechet_with_ci(&ge, &re, e.bootstrap, seed)?;
    let mut oracle_passed = None;
    let spec = cfg.source_spec();
    if cfg.source_kind()? != SourceKind::ToyVae && e.oracle_histories > 0 {
        let held = spec.sample_corpus(e.oracle_histories, rng::mix(seed, 0xbeef))?;
        let mut passed = 0;
        for (i, s) in held.iter().enumerate() {
            let h = s.prefix(1 + i % (s.len().max(2) - 1));
            let o = OracleOptions {
                seed: rng::mix(seed, i as u64),
                steps: cfg.sample.steps,
                temperature: cfg.sample.temperature,
                ..OracleOptions::default()
            };
            if !conditional_oracle_test(loaded.model(), &stats, &spec, &h, e.oracle_samples, o)?
                .rejects(0.01)
            {
                passed += 1;
            }
        }
        oracle_passed = Some(passed);
    }
    let report = EvalReport {
        generations: gens.len(),
        fad: fr.distance,
        fad_ci: fr.ci,
        jittered: fr.jittered,
        similarity: diversity(&ge)?,
        reference_similarity: diversity(&re)?,
        oracle_histories: e.oracle_histories,
        oracle_passed,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out_dir.join("eval.json"), json.as_bytes())?;
    let csv = format!(
        "generations,fad,fad_ci_low,fad_ci_high,similarity,reference_similarity,oracle_passed\n{},{},{},{},{},{},{}\n",
        report.generations,
        report.fad,
        report.fad_ci.map_or(f64::NAN, |c| c.0),
        report.fad_ci.map_or(f64::NAN, |c| c.1),
        report.similarity,
        report.reference_similarity,
        report.oracle_passed.map_or(String::new(), |p| p.to_string()),
    );
    write_file(&out_dir.join("eval.csv"), csv.as_bytes())?;
    Ok(report)
}

/// Unprompted generations split across `workers` scoped threads.
pub fn parallel_generate<T: Scalar>(
    model: &Model<T>,
    cfg: &ExperimentConfig,
    stats: &NormStats,
    count: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<LatentSequence>, CliError> {
    let empty = LatentSequence::empty(cfg.source.channels, cfg.source.frame_rate);
    let one = |i: usize| -> Result<LatentSequence, CliError> {
        let sc = cfg.sampler_config(rng::mix(seed, i as u64))?;
        let clock = MonotonicClock::default();
        Ok(generate_seq(model, &empty, &sc, Some(stats), &clock)?.frames)
    };
    if workers <= 1 {
        return (0..count).map(one).collect();
    }
    let mut out: Vec<Option<Result<LatentSequence, CliError>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|s| {
        for (w, chunk) in out.chunks_mut(count.div_ceil(workers).max(1)).enumerate() {
            let one = &one;
            let base = w * count.div_ceil(workers).max(1);
            s.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(one(base + j));
                }
            });
        }
    });
    out.into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

pub fn parse_records(text: &str) -> Result<(Vec<String>, Vec<ComparisonRecord>), CliError> {
    let mut systems: Vec<String> = Vec::new();
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("system_a")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(CliError::Config(format!(
                "line {}: expected system_a,system_b,outcome",
                n + 1
            )));
        }
        let outcome = match cols[2] {
            "a_wins" | "a" => Outcome::AWins,
            "b_wins" | "b" => Outcome::BWins,
            "tie" => Outcome::Tie,
            o => {
                return Err(CliError::Config(format!(
                    "line {}: unknown outcome `{o}`",
                    n + 1
                )))
            }
        };
        for id in &cols[..2] {
            if !systems.iter().any(|s| s == id) {
                systems.push((*id).to_string());
            }
        }
        records.push(ComparisonRecord::new(cols[0], cols[1], outcome));
    }
    Ok((systems, records))
}

pub fn elo_fit(text: &str, cfg: &EloConfig) -> Result<String, CliError> {
    let (systems, records) = parse_records(text)?;
    let fit = elo::fit(&systems, &records, cfg)?;
    let mut out = String::from("id,S,E,ci_low,ci_high\n");
    for r in &fit.ratings {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.system, r.strength, r.elo, r.ci_low, r.ci_high
        );
    }
    Ok(out)
}

fn head_rank(head: &str) -> u8 {
    match head {
        "rq" => 0,
        "consistency" => 1,
        "trigflow" => 2,
        _ => 3,
    }
}

/// Parse bench CSV files; every file must carry every bench column.
pub fn read_bench_csv(path: &Path, text: &str) -> Result<Vec<BenchRow>, CliError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or_else(|| {
            CliError::format(path, format!("schema mismatch: missing column `{name}`"))
        })
    };
    let idx: Vec<usize> = COLUMNS.iter().map(|c| col(c)).collect::<Result<_, _>>()?;
    let num = |v: &str, name: &str| -> Result<f64, CliError> {
        v.parse::<f64>().map_err(|_| {
            CliError::format(path, format!("column `{name}` has non-numeric value `{v}`"))
        })
    };
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(CliError::format(
                path,
                format!(
                    "row `{line}` has {} cells, header has {}",
                    cells.len(),
                    header.len()
                ),
            ));
        }
        let get = |k: usize| cells[idx[k]];
        rows.push(BenchRow {
            system: get(0).into(),
            head_kind: get(1).into(),
            steps: num(get(2), COLUMNS[2])? as usize,
            frames: 0,
            wall: 0.0,
            head: 0.0,
            backbone: 0.0,
            overall_speedup: num(get(3), COLUMNS[3])?,
            sampler_speedup: num(get(4), COLUMNS[4])?,
            sampler_share: num(get(5), COLUMNS[5])?,
            rtf: num(get(6), COLUMNS[6])?,
            fad: if get(7).is_empty() {
                None
            } else {
                Some(num(get(7), COLUMNS[7])?)
            },
        });
    }
    Ok(rows)
}

/// Render bench outputs as one table, ordered discrete baseline first, then
/// consistency by step count, then flow.
pub fn report(paths: &[PathBuf]) -> Result<String, CliError> {
    let mut rows = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        rows.extend(read_bench_csv(p, &text)?);
    }
    rows.sort_by(|a, b| {
        (head_rank(&a.head_kind), a.steps).cmp(&(head_rank(&b.head_kind), b.steps))
    });
    let baseline = rows.first().map(|r| r.system.clone()).unwrap_or_default();
    Ok(BenchReport { baseline, rows }.render())
}
