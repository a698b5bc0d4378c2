//! `povid`: corpus generation, pair forging, staged training, evaluation and
//! the dispreference ablation, driven from one root seed.

mod rundir;

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use povid_core::checkpoint::{load_checkpoint, save_checkpoint};
use povid_core::dispref::{forge_pairs, join_pairs, read_pair_records, write_pairs, Backend, PreferencePair};
use povid_core::evalsuite::{emit_compare, emit_report, Suite};
use povid_core::lexicon::Vocabulary;
use povid_core::pipeline::{
    ablate_seed, compare, eval_checkpoint, run_dpo, run_povid, run_sft, summarize, RunConfig, VARIANTS,
};
use povid_core::policy::PolicyParams;
use povid_core::scenegen::{generate_corpus, read_corpus, write_corpus, CooccurrencePrior, CorpusRecord};
use povid_core::trainer::{preference_examples, sft_examples, Stage, TrainOutcome};

use rundir::{prepare_output, Failure, RunDir};

#[derive(Parser)]
#[command(name = "povid", version, about = "Preference tuning with textual and noise-triggered dispreferences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (JSON lines) plus a dump of its prior.
    GenCorpus(GenCorpusArgs),
    /// Forge one preference pair per corpus record.
    ForgePrefs(ForgeArgs),
    /// Run one training stage into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate the dispreference ablation variants.
    Ablate(AblateArgs),
    /// Print the default run configuration.
    Config(ConfigArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
    /// Root seed; the corpus seed is derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "standard")]
    prior: String,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnnotatorArg {
    Oracle,
    Remote,
}

#[derive(Args)]
struct ForgeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "oracle")]
    annotator: AnnotatorArg,
    /// Root seed; the forging seed is derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fall back to the rule oracle when the remote annotator fails.
    #[arg(long)]
    fallback: bool,
    /// Annotator endpoint; defaults to $POVID_ANNOTATOR_URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// Directory caching remote replies by request hash.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Prior preset name or dump file; defaults to the dump written next to
    /// the corpus, else `standard`.
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Sft,
    Dpo,
    Povid,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Run configuration (JSON); defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Starting checkpoint: the supervised base for dpo, the stage-1
    /// checkpoint for povid.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Frozen reference checkpoint; defaults to the supervised base found
    /// next to --from or in the run directory.
    #[arg(long = "reference")]
    reference: Option<PathBuf>,
    /// Corpus file; generated from the configuration when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Pair file from forge-prefs; forged from the configuration when absent.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "chair,pope,attention")]
    suite: Vec<SuiteArg>,
    /// Number of evaluation seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Evaluation scenes per seed.
    #[arg(long)]
    scenes: Option<usize>,
    /// Run configuration; defaults to the run directory's config.json.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; defaults to report.json in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Chair,
    Pope,
    Attention,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Chair => Suite::Chair,
            SuiteArg::Pope => Suite::Pope,
            SuiteArg::Attention => Suite::Attention,
        }
    }
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "none,text,image,both")]
    variants: Vec<String>,
    /// Number of root seeds, counting up from the configured one.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for per-seed reports and compare.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::ForgePrefs(a) => forge_prefs(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Config(a) => print_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.derive_seeds();
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn read_corpus_file(path: &Path) -> anyhow::Result<Vec<CorpusRecord>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_corpus(BufReader::new(f)).with_context(|| format!("reading corpus {}", path.display()))
}

fn prior_dump_path(corpus: &Path) -> PathBuf {
    corpus.with_extension("prior.json")
}

fn resolve_prior(spec: Option<&str>, corpus: &Path) -> Result<CooccurrencePrior, Failure> {
    let from_file = |p: &Path| -> Result<CooccurrencePrior, Failure> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let prior: CooccurrencePrior =
            serde_json::from_str(&text).with_context(|| format!("parsing prior {}", p.display()))?;
        prior.validate().with_context(|| format!("prior {}", p.display()))?;
        Ok(prior)
    };
    match spec {
        Some(s) => match CooccurrencePrior::preset(s) {
            Some(p) => Ok(p),
            None if Path::new(s).is_file() => from_file(Path::new(s)),
            None => Err(Failure::Usage(format!("`{s}` is neither a prior preset nor a file"))),
        },
        None => {
            let dump = prior_dump_path(corpus);
            if dump.is_file() {
                from_file(&dump)
            } else {
                Ok(CooccurrencePrior::standard())
            }
        }
    }
}

fn gen_corpus(a: GenCorpusArgs) -> Result<(), Failure> {
    let prior = CooccurrencePrior::preset(&a.prior)
        .ok_or_else(|| Failure::Usage(format!("unknown prior preset `{}`", a.prior)))?;
    let dump = prior_dump_path(&a.out);
    prepare_output(&a.out, a.force)?;
    prepare_output(&dump, a.force)?;
    let seed = RunConfig::with_seed(a.seed).corpus_seed();
    let records = generate_corpus(&prior, a.scenes, seed);
    let f = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_corpus(BufWriter::new(f), &records)?;
    let mut text = serde_json::to_string_pretty(&prior).context("serializing prior")?;
    text.push('\n');
    fs::write(&dump, text).with_context(|| format!("writing {}", dump.display()))?;
    eprintln!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn forge_prefs(a: ForgeArgs) -> Result<(), Failure> {
    let prior = resolve_prior(a.prior.as_deref(), &a.corpus)?;
    let mut cfg = RunConfig::with_seed(a.seed);
    cfg.annotator.backend = match a.annotator {
        AnnotatorArg::Oracle => Backend::Oracle,
        AnnotatorArg::Remote => Backend::Remote,
    };
    if cfg.annotator.backend == Backend::Remote {
        cfg.annotator.endpoint = a.endpoint.clone().or_else(|| std::env::var(povid_core::dispref::ENDPOINT_ENV).ok());
    }
    cfg.annotator.fallback_on_error = a.fallback;
    cfg.annotator.cache_dir = a.cache_dir.clone();
    cfg.annotator.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    prepare_output(&a.out, a.force)?;
    let corpus = read_corpus_file(&a.corpus)?;
    let vocab = Vocabulary::standard();
    let outcome = forge_pairs(vocab, &corpus, &prior, &cfg.annotator, cfg.forge_seed()).context("forging pairs")?;
    let f = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_pairs(vocab, BufWriter::new(f), &outcome.pairs)?;
    eprintln!(
        "wrote {} pairs to {} ({} oracle fallbacks)",
        outcome.pairs.len(),
        a.out.display(),
        outcome.fallbacks.len()
    );
    Ok(())
}

fn corpus_for(cfg: &RunConfig, path: Option<&Path>) -> anyhow::Result<Vec<CorpusRecord>> {
    match path {
        Some(p) => read_corpus_file(p),
        None => Ok(generate_corpus(&cfg.prior()?, cfg.corpus.scenes, cfg.corpus_seed())),
    }
}

fn pairs_for(cfg: &RunConfig, corpus: &[CorpusRecord], path: Option<&Path>) -> anyhow::Result<Vec<PreferencePair>> {
    let vocab = Vocabulary::standard();
    match path {
        Some(p) => {
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let records = read_pair_records(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?;
            Ok(join_pairs(vocab, &records, corpus)?)
        }
        None => Ok(forge_pairs(vocab, corpus, &cfg.prior()?, &cfg.annotator, cfg.forge_seed())?.pairs),
    }
}

fn load_params(path: &Path) -> anyhow::Result<PolicyParams<f32>> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let stage = match a.stage {
        StageArg::Sft => Stage::Sft,
        StageArg::Dpo => Stage::Dpo,
        StageArg::Povid => Stage::Povid,
    };
    let run = RunDir::new(&a.out);
    let sft_ckpt = run.checkpoint(Stage::Sft);
    let from = match (stage, &a.from) {
        (Stage::Sft, Some(_)) => return Err(Failure::Usage("--from is not used by the sft stage".into())),
        (Stage::Sft, None) => None,
        (Stage::Dpo, Some(p)) => Some(p.clone()),
        (Stage::Dpo, None) if sft_ckpt.is_file() => Some(sft_ckpt.clone()),
        (Stage::Dpo, None) => {
            return Err(Failure::Usage(
                "dpo needs --from <sft checkpoint> (or an sft checkpoint in the run directory)".into(),
            ))
        }
        (Stage::Povid, Some(p)) => Some(p.clone()),
        (Stage::Povid, None) => return Err(Failure::Usage("povid needs --from <stage-1 checkpoint>".into())),
    };
    let reference = match (stage, &a.reference, &from) {
        (Stage::Sft, _, _) => None,
        (_, Some(r), _) => Some(r.clone()),
        (Stage::Dpo, None, f) => f.clone(),
        (Stage::Povid, None, Some(f)) => {
            let sibling = f.with_file_name(RunDir::checkpoint_name(Stage::Sft));
            if sibling.is_file() {
                Some(sibling)
            } else if sft_ckpt.is_file() {
                Some(sft_ckpt.clone())
            } else {
                return Err(Failure::Usage(
                    "povid needs --reference <sft checkpoint>; none found next to --from or in the run directory".into(),
                ));
            }
        }
        (Stage::Povid, None, None) => unreachable!("povid always has --from"),
    };

    run.begin(&cfg, stage, a.force)?;
    let started = Instant::now();
    let corpus = corpus_for(&cfg, a.corpus.as_deref())?;
    let outcome: TrainOutcome<f32> = match stage {
        Stage::Sft => {
            let data = sft_examples(Vocabulary::standard(), &corpus).context("tokenizing corpus")?;
            eprintln!("sft on {} examples", data.len());
            run_sft(&cfg, &data)?
        }
        Stage::Dpo | Stage::Povid => {
            let start = load_params(from.as_deref().expect("resolved above"))?;
            let reference = load_params(reference.as_deref().expect("resolved above"))?;
            let pairs = preference_examples(&pairs_for(&cfg, &corpus, a.pairs.as_deref())?);
            eprintln!("{} on {} pairs", stage.name(), pairs.len());
            if stage == Stage::Dpo {
                run_dpo(&cfg.dpo, start, &reference, &pairs)?
            } else {
                run_povid(&cfg.povid, start, &reference, &pairs)?
            }
        }
    };
    eprintln!("{} ({:.1}s)", summarize(&outcome.metrics), started.elapsed().as_secs_f64());
    run.append_metrics(stage, &outcome.metrics)?;
    if let Some(probe) = &outcome.probe {
        run.write_probe(probe)?;
        eprintln!("triggered dispreferences changed for {}/{} probe pairs", probe.changed(), probe.indices.len());
    }
    let ckpt = run.checkpoint(stage);
    save_checkpoint(&outcome.params, &ckpt).with_context(|| format!("saving {}", ckpt.display()))?;
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let run_root = RunDir::root_of_checkpoint(&a.ckpt);
    let run_config = run_root.join(rundir::CONFIG_FILE);
    let config_path = a.config.clone().or_else(|| run_config.is_file().then_some(run_config));
    let mut cfg = load_config(config_path.as_deref(), a.seed)?;
    if let Some(n) = a.seeds {
        cfg.eval.seeds = n;
    }
    if let Some(n) = a.scenes {
        cfg.eval.scenes = n;
    }
    if cfg.eval.seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    cfg.eval.suites = a.suite.iter().map(|&s| s.into()).collect();
    let out = a.out.clone().unwrap_or_else(|| run_root.join("report.json"));
    prepare_output(&out, a.force)?;
    let params = load_params(&a.ckpt)?;
    let name = a.ckpt.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    let report = eval_checkpoint(&cfg, &params, &name)?;
    emit_report(&report, &out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!(
        "{name}: chair_s {:.4} chair_i {:.4} pope {:.4} attention {:.4} -> {}",
        report.chair_s,
        report.chair_i,
        report.pope_accuracy,
        report.attention_image_mass,
        out.display()
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    for v in &a.variants {
        if !VARIANTS.contains(&v.as_str()) {
            return Err(Failure::Usage(format!("unknown variant `{v}` (expected one of {})", VARIANTS.join(", "))));
        }
    }
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let variants: Vec<&str> = VARIANTS.iter().copied().filter(|v| a.variants.iter().any(|w| w == v)).collect();
    let compare_path = a.out.join("compare.json");
    prepare_output(&compare_path, a.force)?;
    rundir::write_config(&a.out, &cfg)?;
    let started = Instant::now();
    let mut runs = Vec::new();
    for i in 0..a.seeds {
        let seed_cfg = {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i);
            c.derive_seeds();
            c
        };
        let run = ablate_seed(&seed_cfg, &variants, &mut |m| {
            eprintln!("[{:>6.1}s] {m}", started.elapsed().as_secs_f64())
        })?;
        let seed_dir = a.out.join(format!("seed-{}", run.seed));
        for (name, report) in &run.reports {
            let path = seed_dir.join(format!("{name}.report.json"));
            emit_report(report, &path).with_context(|| format!("writing {}", path.display()))?;
        }
        if let Some(probe) = &run.probe {
            rundir::write_probe(&seed_dir, probe)?;
        }
        runs.push(run);
    }
    let report = compare(&runs);
    emit_compare(&report, &compare_path).with_context(|| format!("writing {}", compare_path.display()))?;
    for row in &report.variants {
        eprintln!(
            "{:<6} chair_s {:.4} chair_i {:.4} pope {:.4} attention {:.4}",
            row.variant, row.chair_s, row.chair_i, row.pope_accuracy, row.attention_image_mass
        );
    }
    if report.variants.is_empty() {
        return Err(anyhow!("no variants evaluated").into());
    }
    Ok(())
}

fn print_config(a: ConfigArgs) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(&RunConfig::with_seed(a.seed)).context("serializing config")?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        // a closed pipe (`povid config | head`) is not an error
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(anyhow::Error::from(e).into()),
        _ => Ok(()),
    }
}
