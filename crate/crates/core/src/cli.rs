//! The `sot` command line: corpus generation, mixing, training, decoding,
//! scoring, dominance scoring and bias analysis.
//!
//! Every subcommand writes `<command>.provenance.json` next to its outputs
//! with the arguments, seed, configuration and the files it read and wrote.
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::IndexedRandom;
use serde::Serialize;
use serde_json::json;

use crate::analysis::{adherence_rate, decide, factor_analysis, AdherenceReport, FactorReport, SampleDecision};
use crate::config::{ExperimentConfig, Strategy};
use crate::ctc::{dominance_scores, LogitGrid};
use crate::data::io::{read_corpus, read_manifest, write_corpus, write_manifest};
use crate::data::{
    build_eval_conditions, build_factor_set, generate_corpus, mix, FactorSetSpec, MixPolicy, MixtureSample, SynthSpec,
    Utterance,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::score_corpus;
use crate::model::Model;
use crate::rng::substream;
use crate::serialization::dom_order;
use crate::trainer::{evaluate, read_hypotheses, train, write_hypotheses, write_log, TrainSample};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "sot",
    version,
    about = "Serialized output training experiments on synthetic mixtures"
)]
pub struct Cli {
    /// Seed for every random substream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment configuration (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic single-talker corpus.
    Gen(GenArgs),
    /// Build mixture manifests from a corpus.
    Mix(MixArgs),
    /// Train a model on one or more manifests.
    Train(TrainArgs),
    /// Greedy-decode a manifest into a hypotheses file.
    Eval(EvalArgs),
    /// Score hypotheses against a manifest.
    Score(ScoreArgs),
    /// Per-component CTC dominance scores under a checkpoint.
    Dominance(ModelInputArgs),
    /// Dominance adherence and factor-bias proportions.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// JSON synthesis spec; defaults are used when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Partial,
    Always,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub n_speakers: usize,
    /// Number of mixtures (per condition when offsets are given).
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Fixed offsets in seconds; one evaluation manifest per value.
    #[arg(long = "offset")]
    pub offsets: Vec<f64>,
    /// Random-offset policy for training mixtures.
    #[arg(long, value_enum, default_value_t = PolicyArg::Partial)]
    pub policy: PolicyArg,
    /// Single-talker samples appended to a training manifest.
    #[arg(long, default_value_t = 0)]
    pub singles: usize,
    /// Balanced two-speaker factor set (gender and loudness stratified).
    #[arg(long)]
    pub factor_set: bool,
    /// Fixed loudness ratio for the factor set.
    #[arg(long)]
    pub loudness_ratio: Option<f64>,
    /// Use corpus utterances with index in `[from, to)`.
    #[arg(long, default_value_t = 0)]
    pub from: usize,
    #[arg(long)]
    pub to: Option<usize>,
    /// Manifest file name stem.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Fifo,
    Pit,
    Dom,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Fifo => Strategy::Fifo,
            StrategyArg::Pit => Strategy::Pit,
            StrategyArg::Dom => Strategy::Dom,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelInputArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: ModelInputArgs,
    /// Output file name inside the output directory.
    #[arg(long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub hypotheses: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Condition tag; defaults to the manifest file stem.
    #[arg(long)]
    pub condition: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub input: ModelInputArgs,
    #[arg(long)]
    pub condition: Option<String>,
}

/// Maps an error onto the documented exit codes.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Config(_) | Error::TooManySpeakers { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli, &args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    args: Vec<String>,
    seed: u64,
    config: Option<&'a ExperimentConfig>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    version: &'a str,
}

struct Run<'a> {
    cli: &'a Cli,
    args: &'a [OsString],
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run<'_> {
    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.cli.out_dir.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn finish(self, command: &str, seed: u64, config: Option<&ExperimentConfig>) -> Result<()> {
        let show = |p: &PathBuf| p.display().to_string();
        let record = Provenance {
            command,
            args: self
                .args
                .iter()
                .skip(1)
                .map(|a| a.to_string_lossy().into_owned())
                .collect(),
            seed,
            config,
            inputs: self.inputs.iter().map(show).collect(),
            outputs: self.outputs.iter().map(show).collect(),
            version: env!("CARGO_PKG_VERSION"),
        };
        write_json(&self.cli.out_dir.join(format!("{command}.provenance.json")), &record)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocabulary::from_text(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: &Cli, args: &[OsString]) -> Result<()> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    let mut cfg = experiment_config(cli)?;
    let mut run = Run {
        cli,
        args,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let name = match &cli.command {
        Command::Gen(a) => {
            gen(&mut run, a, cfg.seed)?;
            "gen"
        }
        Command::Mix(a) => {
            mix_cmd(&mut run, a, cfg.seed)?;
            "mix"
        }
        Command::Train(a) => {
            if let Some(s) = a.strategy {
                cfg.strategy = s.into();
            }
            if let Some(x) = a.alpha {
                cfg.alpha = x;
            }
            if let Some(x) = a.epochs {
                cfg.epochs = x;
                cfg.warmup_epochs = cfg.warmup_epochs.min(x);
                cfg.checkpoint_average_last = cfg.checkpoint_average_last.min(x);
            }
            if let Some(x) = a.lr {
                cfg.learning_rate = x;
            }
            cfg.validate()?;
            train_cmd(&mut run, a, &cfg)?;
            "train"
        }
        Command::Eval(a) => {
            eval_cmd(&mut run, a)?;
            "eval"
        }
        Command::Score(a) => {
            score_cmd(&mut run, a)?;
            "score"
        }
        Command::Dominance(a) => {
            dominance_cmd(&mut run, a)?;
            "dominance"
        }
        Command::Analyze(a) => {
            analyze_cmd(&mut run, a)?;
            "analyze"
        }
    };
    let config = matches!(cli.command, Command::Train(_)).then_some(&cfg);
    run.finish(name, cfg.seed, config)
}

fn gen(run: &mut Run, a: &GenArgs, seed: u64) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let p = run.input(p);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?
        }
        None => SynthSpec::default(),
    };
    spec.seed = seed;
    let corpus = generate_corpus(&spec, a.count)?;
    let vocab = spec.vocabulary()?;
    let vocab_path = run.output("vocab.txt");
    fs::write(&vocab_path, vocab.to_text()).map_err(|e| Error::io(&vocab_path, e))?;
    write_json(&run.output("synth_spec.json"), &spec)?;
    write_corpus(&run.output("corpus.jsonl"), "utterances", &corpus, &vocab)
}

fn mix_cmd(run: &mut Run, a: &MixArgs, seed: u64) -> Result<()> {
    let vocab = read_vocab(&run.input(&a.vocab))?;
    let corpus_path = run.input(&a.corpus);
    let corpus = read_corpus(&corpus_path, &vocab)?;
    let to = a.to.unwrap_or(corpus.len()).min(corpus.len());
    if a.from >= to {
        return Err(Error::Config(format!("empty utterance range {}..{to}", a.from)));
    }
    let pool: &[Utterance] = &corpus[a.from..to];

    if a.factor_set {
        if a.n_speakers != 2 {
            return Err(Error::Config("the factor set is two-speaker only".into()));
        }
        let spec = FactorSetSpec {
            count: a.count,
            offset_frames: crate::data::seconds_to_frames(a.offsets.first().copied().unwrap_or(0.0)),
            loudness_ratio: a.loudness_ratio,
            weight_floor: 0.1,
            seed,
        };
        let set = build_factor_set(pool, &spec)?;
        let name = a.name.clone().unwrap_or_else(|| "factor".into());
        return write_manifest(
            &run.output(&format!("{name}.jsonl")),
            &format!("features/{name}"),
            &set,
            &vocab,
        );
    }

    if !a.offsets.is_empty() {
        let n = a.n_speakers;
        if pool.len() < n * a.count {
            return Err(Error::Config(format!(
                "{} mixtures of {n} need {} utterances, range has {}",
                a.count,
                n * a.count,
                pool.len()
            )));
        }
        let groups: Vec<Vec<&Utterance>> = (0..a.count)
            .map(|i| pool[n * i..n * (i + 1)].iter().collect())
            .collect();
        for cond in build_eval_conditions(&groups, &a.offsets, seed)? {
            let name = match &a.name {
                Some(prefix) => format!("{prefix}_{}", cond.name),
                None => cond.name.clone(),
            };
            write_manifest(
                &run.output(&format!("{name}.jsonl")),
                &format!("features/{name}"),
                &cond.samples,
                &vocab,
            )?;
        }
        return Ok(());
    }

    let policy = match a.policy {
        PolicyArg::Partial => MixPolicy::partial_offset(a.n_speakers),
        PolicyArg::Always => MixPolicy::always_offset(a.n_speakers),
    };
    let mut rng = substream(seed, "mixing");
    let mut samples: Vec<MixtureSample> = Vec::with_capacity(a.count + a.singles);
    for i in 0..a.count {
        let utts: Vec<&Utterance> = (0..a.n_speakers)
            .map(|_| pool.choose(&mut rng).expect("non-empty pool"))
            .collect();
        samples.push(mix(format!("mix_{i:06}"), &utts, &policy, &mut rng)?);
    }
    let single = MixPolicy::fixed_offset(1, 0);
    for (i, u) in pool.iter().cycle().take(a.singles).enumerate() {
        samples.push(mix(format!("single_{i:06}"), &[u], &single, &mut rng)?);
    }
    let name = a.name.clone().unwrap_or_else(|| "train".into());
    write_manifest(
        &run.output(&format!("{name}.jsonl")),
        &format!("features/{name}"),
        &samples,
        &vocab,
    )
}

fn load_samples(run: &mut Run, manifest: &Path, vocab: &Vocabulary) -> Result<Vec<MixtureSample>> {
    read_manifest(&run.input(manifest), vocab)
}

fn train_cmd(run: &mut Run, a: &TrainArgs, cfg: &ExperimentConfig) -> Result<()> {
    let vocab = read_vocab(&run.input(&a.vocab))?;
    let mut samples: Vec<TrainSample<f32>> = Vec::new();
    for m in &a.manifests {
        samples.extend(load_samples(run, m, &vocab)?.iter().map(TrainSample::from_mixture));
    }
    let out = train(cfg, &samples, &vocab)?;
    if out.skipped > 0 {
        log::warn!("{} sample visits skipped as infeasible", out.skipped);
    }
    out.model.save(&run.output("model.sotm"))?;
    write_log(&run.output("train_log.jsonl"), &out.log)?;
    cfg.save(&run.output("experiment.cfg"))
}

fn load_model(run: &mut Run, a: &ModelInputArgs) -> Result<(Model<f32>, Vocabulary, Vec<MixtureSample>)> {
    let model = Model::load(&run.input(&a.checkpoint))?;
    let vocab = read_vocab(&run.input(&a.vocab))?;
    if vocab.content_size() != model.config.content_size {
        return Err(Error::format(&a.vocab, "vocabulary size does not match the checkpoint"));
    }
    let samples = load_samples(run, &a.manifest, &vocab)?;
    Ok((model, vocab, samples))
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "manifest".into(), |s| s.to_string_lossy().into_owned())
}

fn eval_cmd(run: &mut Run, a: &EvalArgs) -> Result<()> {
    let (model, vocab, samples) = load_model(run, &a.input)?;
    let samples: Vec<TrainSample<f32>> = samples.iter().map(TrainSample::from_mixture).collect();
    let hyps = evaluate(&model, &samples, a.input.max_len, &vocab)?;
    let name = a
        .output
        .clone()
        .unwrap_or_else(|| format!("{}.hyp", stem(&a.input.manifest)));
    write_hypotheses(&run.output(&name), &hyps, &vocab)?;
    let sc = hyps
        .iter()
        .map(|(_, h)| h.ids().iter().filter(|&&t| t == vocab.sc_id()).count())
        .sum::<usize>();
    log::info!("{} hypotheses, {sc} speaker-change tokens", hyps.len());
    Ok(())
}

fn score_cmd(run: &mut Run, a: &ScoreArgs) -> Result<()> {
    let vocab = read_vocab(&run.input(&a.vocab))?;
    let samples = load_samples(run, &a.manifest, &vocab)?;
    let hyp_path = run.input(&a.hypotheses);
    let hyps = read_hypotheses(&hyp_path, &vocab)?;
    let by_id: std::collections::HashMap<&str, &TokenSequence> = hyps.iter().map(|(id, h)| (id.as_str(), h)).collect();
    let refs: Vec<Vec<TokenSequence>> = samples.iter().map(MixtureSample::transcripts).collect();
    let mut items: Vec<(&str, &[TokenId], &[TokenSequence])> = Vec::with_capacity(samples.len());
    for (s, r) in samples.iter().zip(&refs) {
        let h = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::format(&hyp_path, format!("no hypothesis for sample {}", s.id)))?;
        items.push((s.id.as_str(), h.ids(), r));
    }
    let condition = a.condition.clone().unwrap_or_else(|| stem(&a.manifest));
    let report = score_corpus(&condition, items, &vocab)?;
    write_json(&run.output(&format!("{condition}.score.json")), &report)?;
    println!(
        "{condition}: speaker-blind WER {:.4}, speaker-aware WER {:.4}",
        report.speaker_blind_wer, report.speaker_aware_wer
    );
    Ok(())
}

fn dominance_cmd(run: &mut Run, a: &ModelInputArgs) -> Result<()> {
    let (model, _vocab, samples) = load_model(run, a)?;
    let mut lines = String::new();
    for s in &samples {
        let mut g = Graph::new();
        let enc = model
            .encode(&mut g, &s.features.cast())
            .map_err(|e| Error::format(&a.manifest, format!("{}: {e}", s.id)))?;
        let grid = LogitGrid::encoder(g.value(enc.grid).clone())?;
        let ts = s.transcripts();
        let labels: Vec<&[TokenId]> = ts.iter().map(TokenSequence::ids).collect();
        let scores = dominance_scores(&grid, &labels)?;
        let values: Vec<Option<f64>> = scores.iter().map(|x| x.map(f64::from)).collect();
        lines.push_str(&serde_json::to_string(
            &json!({ "id": s.id, "scores": values, "order": dom_order(&scores) }),
        )?);
        lines.push('\n');
    }
    let path = run.output(&format!("{}.dominance.jsonl", stem(&a.manifest)));
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))
}

#[derive(Serialize)]
struct AnalysisOutput<'a> {
    adherence: &'a AdherenceReport,
    factors: &'a FactorReport,
    samples: &'a [SampleDecision],
}

fn analyze_cmd(run: &mut Run, a: &AnalyzeArgs) -> Result<()> {
    let (model, vocab, samples) = load_model(run, &a.input)?;
    let decisions = decide(&model, &samples, a.input.max_len, &vocab)?;
    let adherence = adherence_rate(&decisions);
    let condition = a.condition.clone().unwrap_or_else(|| stem(&a.input.manifest));
    let first: Vec<Option<usize>> = decisions.iter().map(|d| d.first).collect();
    let factors = factor_analysis(&condition, &samples, &first)?;
    write_json(
        &run.output(&format!("{condition}.analysis.json")),
        &AnalysisOutput {
            adherence: &adherence,
            factors: &factors,
            samples: &decisions,
        },
    )?;
    let table = format!(
        "adherence {:.3} ({} of {} decided, {} undecidable)\n{}",
        adherence.rate,
        adherence.agree,
        adherence.decided,
        adherence.undecidable,
        factors.to_table()
    );
    let path = run.output(&format!("{condition}.analysis.txt"));
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    print!("{table}");
    Ok(())
}
