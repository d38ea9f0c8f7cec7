//! Command-line entry point wiring the pipeline stages into reproducible
//! experiments. Every run directory receives the resolved configuration
//! snapshot before work starts and a manifest of artifact hashes after.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::distillpipe::{
    distill_student, export_teacher_logits, probe::probe_eval, probe::ProbeConfig,
    split_corpus, train_teacher, LogitCache, Mode, TrainConfig,
};
use crate::error::{Error, Result};
use crate::models::checkpoint::{bytes_sha256, file_sha256, load_model, save_model};
use crate::models::{count_parameters, parameter_itemization, MaskSpec, ModelConfig};
use crate::profiler::{sweep_profile, write_profile_svgs};
use crate::speechdata::{
    build_pseudo_labels, load_labels, read_wav, save_labels, synth_corpus, write_wav, MfccConfig,
    SynthConfig, Waveform,
};
use crate::verify;

pub const CONFIG_VERSION: u32 = 1;

/// Resolved experiment configuration; one copy is written into every
/// output directory before the run starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub teacher_train: TrainConfig,
    pub distill: TrainConfig,
    pub synth: SynthConfig,
    pub mfcc: MfccConfig,
    pub mask_span_length: usize,
    pub mask_start_probability: f64,
    pub kmeans_iters: usize,
    pub probe: ProbeConfig,
    pub heldout_fraction: f64,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Option<ExperimentConfig> {
        match name {
            "toy" => Some(ExperimentConfig {
                version: CONFIG_VERSION,
                seed: 7,
                teacher: ModelConfig::preset("toy-teacher").unwrap(),
                student: ModelConfig::preset("toy-student-bilstm").unwrap(),
                teacher_train: TrainConfig {
                    total_steps: 1500,
                    warmup_steps: 105,
                    ..TrainConfig::preset("toy").unwrap()
                },
                distill: TrainConfig::preset("toy").unwrap(),
                synth: SynthConfig {
                    num_utterances: 96,
                    duration_range: (0.5, 0.7),
                    num_latent_classes: 32,
                    sample_rate: 16000,
                    seed: 7,
                },
                mfcc: MfccConfig::default(),
                mask_span_length: 5,
                mask_start_probability: 0.10,
                kmeans_iters: 30,
                probe: ProbeConfig::default(),
                heldout_fraction: 0.15,
            }),
            "paper-shape" => Some(ExperimentConfig {
                teacher: ModelConfig::preset("hubert-large-shape").unwrap(),
                student: ModelConfig::preset("lstm-fullsize").unwrap(),
                teacher_train: TrainConfig::preset("paper-shape").unwrap(),
                distill: TrainConfig::preset("paper-shape").unwrap(),
                ..ExperimentConfig::preset("toy").unwrap()
            }),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::BadConfig(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Propagates one master seed into every stage seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.teacher_train.seed = seed;
        self.distill.seed = seed;
        self.probe.seed = seed;
        self
    }

    pub fn mask_spec(&self) -> Result<MaskSpec> {
        MaskSpec::new(self.mask_span_length, self.mask_start_probability, self.seed)
    }
}

#[derive(Parser)]
#[command(
    name = "distilkit",
    version,
    about = "Desk-scale knowledge distillation: masked cluster-prediction teacher, KD/DKD student, profiling harness"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Master seed; overrides every stage seed in the config.
    #[arg(long, global = false)]
    seed: Option<u64>,
    /// Experiment configuration file (JSON). Defaults to the named preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset used when no --config is given.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl CommonArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::preset(&self.preset).ok_or_else(|| {
                Error::BadConfig(format!(
                    "unknown preset '{}' (available: toy, paper-shape)",
                    self.preset
                ))
            })?,
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic WAV corpus with known latent classes.
    Synth(SynthCmd),
    /// Compute MFCC + k-means pseudo-labels for a WAV directory.
    PseudoLabels(PseudoLabelsCmd),
    /// Train the teacher with the masked cluster-prediction objective.
    TrainTeacher(TrainTeacherCmd),
    /// Export per-frame teacher logits over a corpus.
    ExportLogits(ExportLogitsCmd),
    /// Distill a student against cached teacher logits.
    Distill(DistillCmd),
    /// Linear-probe a frozen checkpoint on pseudo-labels.
    Probe(ProbeCmd),
    /// Profile models over increasing utterance lengths (CSV + SVG).
    Profile(ProfileCmd),
    /// Print the closed-form parameter itemization of a model preset.
    ParamCount(ParamCountCmd),
    /// Run the identity and gradient verification suites.
    Verify(VerifyCmd),
}

#[derive(Args)]
struct SynthCmd {
    #[command(flatten)]
    common: CommonArgs,
    /// Override the config's utterance count.
    #[arg(long)]
    utterances: Option<usize>,
}

#[derive(Args)]
struct PseudoLabelsCmd {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory of PCM16 mono WAV files.
    #[arg(long)]
    data: PathBuf,
    /// Override the config's cluster count.
    #[arg(long)]
    clusters: Option<usize>,
}

#[derive(Args)]
struct TrainTeacherCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    /// Pseudo-label cache from `pseudo-labels`.
    #[arg(long)]
    labels: PathBuf,
    /// Override the config's step count.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct ExportLogitsCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint from `train-teacher`.
    #[arg(long)]
    teacher: PathBuf,
}

#[derive(Args)]
struct DistillCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Teacher logit cache from `export-logits`.
    #[arg(long)]
    teacher_logits: PathBuf,
    /// Teacher checkpoint; when given, its hash must match the cache.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// kd or dkd.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct ProbeCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Frozen checkpoint to probe.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct ProfileCmd {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated model preset names.
    #[arg(long, default_value = "toy-student-bilstm,toy-student-transformer")]
    models: String,
    /// Comma-separated utterance lengths in seconds.
    #[arg(long, default_value = "1,2,4,8,16,30")]
    lengths: String,
    #[arg(long, default_value_t = 10)]
    repeats: u32,
}

#[derive(Args)]
struct ParamCountCmd {
    #[command(flatten)]
    common: CommonArgs,
    /// Model preset name (see `--list`).
    #[arg(long, default_value = "lstm-fullsize")]
    model: String,
    /// List available model presets and exit.
    #[arg(long, default_value_t = false)]
    list: bool,
}

#[derive(Args)]
struct VerifyCmd {
    #[command(flatten)]
    common: CommonArgs,
}

// ── Run-directory helpers ────────────────────────────────────────────

struct RunDir {
    root: PathBuf,
    artifacts: Vec<(String, String, u64)>, // path, sha256, bytes
}

impl RunDir {
    fn create(root: &Path, cfg: &ExperimentConfig) -> Result<RunDir> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut dir = RunDir { root: root.to_path_buf(), artifacts: Vec::new() };
        dir.write_bytes("config.json", (serde_json::to_string_pretty(cfg)? + "\n").as_bytes())?;
        Ok(dir)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push((rel.to_string(), bytes_sha256(bytes), bytes.len() as u64));
        Ok(())
    }

    /// Registers a file some other writer produced under the run root.
    fn register(&mut self, rel: &str) -> Result<()> {
        let path = self.path(rel);
        let bytes = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        self.artifacts.push((rel.to_string(), file_sha256(&path)?, bytes));
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.artifacts.sort();
        #[derive(Serialize)]
        struct Entry<'a> {
            path: &'a str,
            sha256: &'a str,
            bytes: u64,
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            artifacts: Vec<Entry<'a>>,
        }
        let manifest = Manifest {
            artifacts: self
                .artifacts
                .iter()
                .map(|(p, h, b)| Entry { path: p, sha256: h, bytes: *b })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let path = self.path("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Reads a directory of WAVs in filename order (deterministic).
fn read_corpus(dir: &Path, expected_rate: u32) -> Result<Vec<Waveform>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Precondition(format!("no .wav files under {}", dir.display())));
    }
    paths.iter().map(|p| read_wav(p, Some(expected_rate))).collect()
}

// ── Subcommand bodies ────────────────────────────────────────────────

fn cmd_synth(cmd: SynthCmd) -> Result<()> {
    let mut cfg = cmd.common.resolve()?;
    if let Some(n) = cmd.utterances {
        cfg.synth.num_utterances = n;
    }
    let mut run = RunDir::create(&cmd.common.out, &cfg)?;
    let corpus = synth_corpus(&cfg.synth)?;

    let wav_dir = run.path("wavs");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    #[derive(Serialize)]
    struct Latent<'a> {
        id: &'a str,
        frame_classes: &'a [u16],
    }
    let mut latents = Vec::new();
    for utt in &corpus {
        let rel = format!("wavs/{}.wav", utt.waveform.id);
        write_wav(&utt.waveform, &run.path(&rel))?;
        run.register(&rel)?;
        latents.push(Latent { id: &utt.waveform.id, frame_classes: &utt.frame_classes });
    }
    run.write_bytes(
        "latent_classes.json",
        (serde_json::to_string_pretty(&latents)? + "\n").as_bytes(),
    )?;
    println!(
        "synthesized {} utterances ({:.1} s of audio) into {}",
        corpus.len(),
        corpus.iter().map(|u| u.waveform.seconds()).sum::<f64>(),
        wav_dir.display()
    );
    run.finish()
}

fn cmd_pseudo_labels(cmd: PseudoLabelsCmd) -> Result<()> {
    let mut cfg = cmd.common.resolve()?;
    if let Some(c) = cmd.clusters {
        cfg.teacher.num_clusters = c;
        cfg.student.num_clusters = c;
    }
    let mut run = RunDir::create(&cmd.common.out, &cfg)?;
    let corpus = read_corpus(&cmd.data, cfg.synth.sample_rate)?;
    let frames: Vec<usize> = corpus
        .iter()
        .map(|w| cfg.teacher.frame_count(w.samples.len()))
        .collect::<Result<_>>()?;
    let (labels, fit) = build_pseudo_labels(
        &corpus,
        &frames,
        &cfg.mfcc,
        cfg.teacher.num_clusters,
        cfg.kmeans_iters,
        cfg.seed,
    )?;
    save_labels(&labels, &run.path("labels.bin"))?;
    run.register("labels.bin")?;
    #[derive(Serialize)]
    struct KmeansOut<'a> {
        clusters: usize,
        iterations: usize,
        inertia_per_iter: &'a [f64],
        centroids: &'a [Vec<f64>],
    }
    run.write_bytes(
        "kmeans.json",
        (serde_json::to_string(&KmeansOut {
            clusters: fit.centroids.len(),
            iterations: fit.iterations,
            inertia_per_iter: &fit.inertia_per_iter,
            centroids: &fit.centroids,
        })? + "\n")
            .as_bytes(),
    )?;
    println!(
        "labeled {} utterances with {} clusters in {} k-means iterations",
        labels.len(),
        cfg.teacher.num_clusters,
        fit.iterations
    );
    run.finish()
}

fn cmd_train_teacher(cmd: TrainTeacherCmd) -> Result<()> {
    let mut cfg = cmd.common.resolve()?;
    if let Some(s) = cmd.steps {
        cfg.teacher_train.total_steps = s;
        cfg.teacher_train.warmup_steps = cfg.teacher_train.warmup_steps.min(s);
    }
    let mut run = RunDir::create(&cmd.common.out, &cfg)?;
    let corpus = read_corpus(&cmd.data, cfg.synth.sample_rate)?;
    let labels = load_labels(&cmd.labels)?;
    let mask = cfg.mask_spec()?;
    let (train_idx, _) = split_corpus(corpus.len(), cfg.heldout_fraction);
    let train_waves: Vec<Waveform> = train_idx.iter().map(|&i| corpus[i].clone()).collect();
    let train_labels: Vec<_> = train_idx.iter().map(|&i| labels[i].clone()).collect();

    let outcome = train_teacher::<f32>(
        &train_waves,
        &train_labels,
        &cfg.teacher,
        &cfg.teacher_train,
        &mask,
    )?;
    save_model(&outcome.model, cfg.seed, &run.path("teacher.ckpt"))?;
    run.register("teacher.ckpt")?;
    run.write_bytes("teacher_metrics.csv", outcome.metrics.to_csv_string().as_bytes())?;

    let masked_acc = crate::distillpipe::eval_masked_accuracy(
        &outcome.model,
        &train_waves,
        &train_labels,
        &mask,
        cfg.seed ^ 0xe7a1,
    )?;
    #[derive(Serialize)]
    struct Summary {
        steps: u64,
        final_loss: f64,
        masked_accuracy_train: f64,
        empty_mask_batches: u64,
    }
    run.write_bytes(
        "summary.json",
        (serde_json::to_string_pretty(&Summary {
            steps: cfg.teacher_train.total_steps,
            final_loss: outcome.metrics.rows.last().map(|r| r.total).unwrap_or(f64::NAN),
            masked_accuracy_train: masked_acc,
            empty_mask_batches: outcome.empty_mask_count,
        })? + "\n")
            .as_bytes(),
    )?;
    println!(
        "teacher trained for {} steps; masked-frame accuracy {:.3} on training data",
        cfg.teacher_train.total_steps, masked_acc
    );
    run.finish()
}

fn cmd_export_logits(cmd: ExportLogitsCmd) -> Result<()> {
    let cfg = cmd.common.resolve()?;
    let mut run = RunDir::create(&cmd.common.out, &cfg)?;
    let (teacher, _) = load_model(&cmd.teacher)?;
    let corpus = read_corpus(&cmd.data, cfg.synth.sample_rate)?;
    let hash = file_sha256(&cmd.teacher)?;
    let cache = export_teacher_logits(&teacher, &corpus, hash)?;
    cache.save(&run.path("logits.cache"))?;
    run.register("logits.cache")?;
    println!("exported logits for {} utterances", cache.len());
    run.finish()
}

fn cmd_distill(cmd: DistillCmd) -> Result<()> {
    let mut cfg = cmd.common.resolve()?;
    if let Some(mode) = &cmd.mode {
        cfg.distill.mode = match mode.as_str() {
            "kd" => Mode::Kd,
            "dkd" => Mode::Dkd,
            other => return Err(Error::BadConfig(format!("unknown mode '{other}'"))),
        };
    }
    if let Some(a) = cmd.alpha {
        cfg.distill.alpha = a;
    }
    if let Some(b) = cmd.beta {
        cfg.distill.beta = b;
    }
    if let Some(t) = cmd.tau {
        cfg.distill.tau = t;
    }
    if let Some(s) = cmd.steps {
        cfg.distill.total_steps = s;
        cfg.distill.warmup_steps = cfg.distill.warmup_steps.min(s);
    }
    let mut run = RunDir::create(&cmd.common.out, &cfg)?;
    let corpus = read_corpus(&cmd.data, cfg.synth.sample_rate)?;
    let labels = load_labels(&cmd.labels)?;
    let cache = LogitCache::load(&cmd.teacher_logits)?;
    if let Some(teacher_path) = &cmd.teacher {
        let hash = file_sha256(teacher_path)?;
        if hash != cache.teacher_hash {
            return Err(Error::CacheMismatch(format!(
                "cache was exported from teacher {} but {} hashes to {hash}",
                cache.teacher_hash,
                teacher_path.display()
            )));
        }
    }
    let (train_idx, heldout_idx) = split_corpus(corpus.len(), cfg.heldout_fraction);
    let outcome = distill_student::<f32>(
        &corpus,
        &labels,
        &cache,
        &cfg.student,
        &cfg.distill,
        &train_idx,
        &heldout_idx,
        None,
    )?;
    save_model(&outcome.model, cfg.seed, &run.path("student.ckpt"))?;
    run.register("student.ckpt")?;
    run.write_bytes("student_metrics.csv", outcome.metrics.to_csv_string().as_bytes())?;
    #[derive(Serialize)]
    struct Summary {
        mode: Mode,
        alpha: f64,
        beta: f64,
        tau: f64,
        steps: u64,
        final_total_loss: f64,
        final_train_agreement: f64,
        heldout_agreement: Option<f64>,
    }
    let last = outcome.metrics.rows.last();
    run.write_bytes(
        "summary.json",
        (serde_json::to_string_pretty(&Summary {
            mode: cfg.distill.mode,
            alpha: cfg.distill.alpha,
            beta: cfg.distill.beta,
            tau: cfg.distill.tau,
            steps: cfg.distill.total_steps,
            final_total_loss: last.map(|r| r.total).unwrap_or(f64::NAN),
            final_train_agreement: last.map(|r| r.agreement).unwrap_or(f64::NAN),
            heldout_agreement: outcome.heldout_agreement,
        })? + "\n")
            .as_bytes(),
    )?;
    println!(
        "student distilled for {} steps; held-out teacher agreement {}",
        cfg.distill.total_steps,
        outcome
            .heldout_agreement
            .map(|a| format!("{a:.3}"))
            .unwrap_or_else(|| "n/a".into())
    );
    run.finish()
}

fn cmd_probe(cmd: ProbeCmd) -> Result<()> {
    let cfg = cmd.common.resolve()?;
    let mut run = RunDir::create(&cmd.common.out, &cfg)?;
    let (model, _) = load_model(&cmd.checkpoint)?;
    let corpus = read_corpus(&cmd.data, cfg.synth.sample_rate)?;
    let labels = load_labels(&cmd.labels)?;
    let (train_idx, heldout_idx) = split_corpus(corpus.len(), cfg.heldout_fraction);
    let report = probe_eval(&model, &corpus, &labels, &train_idx, &heldout_idx, &cfg.probe)?;
    run.write_bytes(
        "probe_report.json",
        (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
    )?;
    println!(
        "probe: train accuracy {:.3}, held-out accuracy {:.3} over {} layers",
        report.train_accuracy, report.heldout_accuracy, report.num_layers
    );
    run.finish()
}

fn cmd_profile(cmd: ProfileCmd) -> Result<()> {
    let cfg = cmd.common.resolve()?;
    let mut run = RunDir::create(&cmd.common.out, &cfg)?;
    let mut models = Vec::new();
    for name in cmd.models.split(',').filter(|s| !s.is_empty()) {
        let mc = ModelConfig::preset(name)
            .ok_or_else(|| Error::BadConfig(format!("unknown model preset '{name}'")))?;
        models.push((name.to_string(), mc));
    }
    let lengths: Vec<f64> = cmd
        .lengths
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::BadConfig(format!("bad length '{s}' in --lengths")))
        })
        .collect::<Result<_>>()?;
    let csv_path = run.path("profile.csv");
    let records = sweep_profile(
        &models,
        &lengths,
        cmd.repeats,
        cfg.synth.sample_rate,
        Some(&csv_path),
    )?;
    run.register("profile.csv")?;
    for svg in write_profile_svgs(&records, &run.root)? {
        let rel = svg.file_name().unwrap().to_string_lossy().into_owned();
        run.register(&rel)?;
    }
    println!("profiled {} model×length points into {}", records.len(), csv_path.display());
    run.finish()
}

fn cmd_param_count(cmd: ParamCountCmd) -> Result<()> {
    if cmd.list {
        for name in ModelConfig::preset_names() {
            println!("{name}");
        }
        return Ok(());
    }
    let mc = ModelConfig::preset(&cmd.model)
        .ok_or_else(|| Error::BadConfig(format!("unknown model preset '{}'", cmd.model)))?;
    let items = parameter_itemization(&mc)?;
    let total = count_parameters(&mc)?;
    println!("{:<24} {:>12}", "component", "parameters");
    for item in &items {
        println!("{:<24} {:>12}", item.name, item.count);
    }
    println!("{:<24} {:>12}", "total", total);
    Ok(())
}

fn cmd_verify(cmd: VerifyCmd) -> Result<()> {
    let cfg = cmd.common.resolve()?;
    let reports = verify::run_all(cfg.seed)?;
    for r in &reports {
        println!("{}", r.line());
    }
    println!("verify: {} suites passed", reports.len());
    Ok(())
}

/// Executes one parsed invocation.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::PseudoLabels(c) => cmd_pseudo_labels(c),
        Command::TrainTeacher(c) => cmd_train_teacher(c),
        Command::ExportLogits(c) => cmd_export_logits(c),
        Command::Distill(c) => cmd_distill(c),
        Command::Probe(c) => cmd_probe(c),
        Command::Profile(c) => cmd_profile(c),
        Command::ParamCount(c) => cmd_param_count(c),
        Command::Verify(c) => cmd_verify(c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_reseed() {
        let toy = ExperimentConfig::preset("toy").unwrap();
        assert_eq!(toy.version, CONFIG_VERSION);
        let reseeded = toy.with_seed(99);
        assert_eq!(reseeded.seed, 99);
        assert_eq!(reseeded.synth.seed, 99);
        assert_eq!(reseeded.teacher_train.seed, 99);
        assert_eq!(reseeded.distill.seed, 99);

        let shape = ExperimentConfig::preset("paper-shape").unwrap();
        assert_eq!(shape.student.num_clusters, 500);
        assert!(ExperimentConfig::preset("bogus").is_none());
    }

    #[test]
    fn config_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.json");
        let cfg = ExperimentConfig::preset("toy").unwrap();
        fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let back = ExperimentConfig::load(&p).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());
    }
}
