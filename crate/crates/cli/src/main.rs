use clap::{Args, Parser, Subcommand, ValueEnum};
use interaug::augment::{self, AugPosition, MaskWidth};
use interaug::diffgraph::Tensor;
use interaug::encoder::{FeatureSequence, Model, SharedHeads};
use interaug::checkpoint;
use interaug::config::TrainConfig;
use interaug::ctc::{self, TokenSequence};
use interaug::data::{self, Utterance};
use interaug::oracle;
use interaug::rng::SeededRng;
use interaug::trainer::{self, Splits};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Self-conditioned CTC training with intermediate prediction augmentation.
#[derive(Debug, Parser)]
#[command(name = "interaug", version)]
struct Cli {
    /// Root seed: sets `training.seed` and `data.synth.seed` (and the case
    /// seed of `oracle-check`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override, `section.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Experiment TOML; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/dev/test corpora.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one model and write the averaged checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Greedy-decode a corpus and report WER.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary corpus file.
        #[arg(long)]
        data: PathBuf,
        /// Per-utterance CSV report; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and compare variants over several seeds.
    Matrix {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum, default_value_t = VariantSet::Standard)]
        variants: VariantSet,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write the rows as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Show the token-level corruption applied at each conditioning layer.
    AugmentDemo {
        #[command(flatten)]
        config: ConfigArg,
        /// Model to run; a freshly initialised one when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Utterance id, e.g. `dev-00000`.
        #[arg(long, default_value = "dev-00000")]
        utt_id: String,
    },
    /// Compare fast implementations with brute-force references.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        cases: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantSet {
    /// Plain CTC, self-conditioning, and each single operator.
    Standard,
    /// Time masking on encoder versus conditioning features.
    Position,
    /// Conditioning with and without gradient flow into the intermediate
    /// prediction.
    Detach,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(cli: &Cli, arg: &ConfigArg) -> Result<TrainConfig, Failure> {
    let base = match &arg.config {
        Some(p) => TrainConfig::load(p).map_err(usage)?,
        None => TrainConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides).map_err(usage)?;
    if let Some(s) = cli.seed {
        cfg.training.seed = s;
        cfg.data.synth.seed = s;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn gen_data(cfg: &TrainConfig, out_dir: &Path) -> Outcome {
    create_dir(out_dir)?;
    let splits = trainer::load_splits(cfg).map_err(runtime)?;
    for (name, set) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        data::save_corpus(&out_dir.join(format!("{name}.bin")), set).map_err(runtime)?;
        let labels = data::format_labels(set.iter().map(|u| (u.id.as_str(), &u.label)));
        write_file(&out_dir.join(format!("{name}.labels")), &labels)?;
        println!("{name}: {} utterances", set.len());
    }
    Ok(())
}

fn train(cfg: &TrainConfig, out_dir: &Path) -> Outcome {
    create_dir(out_dir)?;
    write_file(&out_dir.join("config.toml"), &cfg.to_toml())?;
    let splits = trainer::load_splits(cfg).map_err(runtime)?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(runtime)?);
    let out = trainer::train(cfg, &splits.train, &splits.dev, Some(&mut log)).map_err(runtime)?;
    log.flush().map_err(runtime)?;
    checkpoint::save(&out_dir.join("model.ckpt"), &out.model).map_err(runtime)?;
    let epochs = serde_json::to_string_pretty(&out.epochs).map_err(runtime)?;
    write_file(&out_dir.join("epochs.json"), &epochs)?;
    let report = trainer::evaluate(&out.model, &splits.test).map_err(runtime)?;
    write_file(&out_dir.join("test_report.csv"), &report.to_csv())?;
    println!(
        "averaged epochs {:?}; best validation loss {:.4}; test WER {:.2}%",
        out.averaged_epochs,
        out.best_val_loss(),
        100.0 * report.corpus.wer
    );
    Ok(())
}

fn eval(checkpoint_path: &Path, data_path: &Path, report: Option<&Path>) -> Outcome {
    let model = checkpoint::load(checkpoint_path).map_err(runtime)?;
    let corpus = data::load_corpus(data_path).map_err(runtime)?;
    let rep = trainer::evaluate(&model, &corpus).map_err(runtime)?;
    match report {
        Some(p) => {
            write_file(p, &rep.to_csv())?;
            let c = &rep.corpus;
            println!(
                "WER {:.2}% (sub {:.2}%, del {:.2}%, ins {:.2}%)",
                100.0 * c.wer,
                100.0 * c.sub_rate,
                100.0 * c.del_rate,
                100.0 * c.ins_rate
            );
        }
        None => print!("{}", rep.to_csv()),
    }
    Ok(())
}

fn matrix(cfg: &TrainConfig, set: VariantSet, seeds: &[u64], jobs: usize, json: Option<&Path>) -> Outcome {
    let variants = match set {
        VariantSet::Standard => trainer::standard_variants(&cfg.augmentation),
        VariantSet::Position => trainer::position_variants(MaskWidth::Fraction(0.1), 0.5),
        VariantSet::Detach => trainer::detach_variants(),
    };
    let splits: Splits = trainer::load_splits(cfg).map_err(runtime)?;
    let rows = trainer::run_matrix(cfg, &variants, seeds, &splits, jobs).map_err(runtime)?;
    print!("{}", trainer::format_matrix(&rows));
    if let Some(p) = json {
        write_file(p, &serde_json::to_string_pretty(&rows).map_err(runtime)?)?;
    }
    Ok(())
}

fn show(seq: &TokenSequence) -> String {
    let t: Vec<String> = seq.tokens().iter().map(|x| x.to_string()).collect();
    format!("[{}]", t.join(" "))
}

/// Index ranges where `flags` is set, e.g. `2-4, 9`.
fn runs(flags: &[bool]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < flags.len() {
        if flags[i] {
            let start = i;
            while i + 1 < flags.len() && flags[i + 1] {
                i += 1;
            }
            parts.push(if start == i { start.to_string() } else { format!("{start}-{i}") });
        }
        i += 1;
    }
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join(", ")
    }
}

fn augment_demo(cfg: &TrainConfig, ckpt: Option<&Path>, utt_id: &str) -> Outcome {
    let model = match ckpt {
        Some(p) => checkpoint::load(p).map_err(runtime)?,
        None => Model::new(cfg.encoder.clone(), cfg.training.seed).map_err(runtime)?,
    };
    let spec = &cfg.augmentation;
    let splits = trainer::load_splits(cfg).map_err(runtime)?;
    let utt: &Utterance = splits
        .dev
        .iter()
        .chain(&splits.test)
        .chain(&splits.train)
        .find(|u| u.id == utt_id)
        .ok_or_else(|| runtime(format!("unknown utterance id `{utt_id}`")))?;
    let rng = SeededRng::new(cfg.training.seed).derive(&["augment-demo", &utt.id]);
    let (_, inter) = model.forward_augmented(&utt.features, spec, &rng).map_err(runtime)?;
    println!("utterance {} ({} frames)", utt.id, utt.frames());
    println!("reference      {}", show(&utt.label));
    println!("operators      {}", spec.label());

    // A conditioning head that projects everything to ones exposes the
    // feature masks directly.
    let (dim, classes) = (model.config().model_dim, model.config().vocab_size_ext);
    let mut probe = SharedHeads::zeros(dim, classes);
    probe.cond_projection.bias.values_mut().fill(1.0);
    let frames = utt.frames();
    let ones = FeatureSequence::new(Tensor::matrix(frames, dim, vec![1.0; frames * dim]).map_err(runtime)?)
        .map_err(runtime)?;

    for (&layer, z) in model.config().intermediate_layers.iter().zip(&inter) {
        let before = ctc::argmax_path(z);
        let after = spec.token_path(z, layer, &rng).map_err(runtime)?.unwrap_or_else(|| before.clone());
        println!("layer {layer}");
        println!("  before path  {before}");
        println!("  after path   {after}");
        println!("  before       {}", show(&ctc::collapse(&before, classes).map_err(runtime)?));
        println!("  after        {}", show(&ctc::collapse(&after, classes).map_err(runtime)?));
        if spec.operators().iter().any(|o| o.is_feature()) {
            let (x_out, c) = augment::apply(spec, &ones, z, &probe, layer, &rng).map_err(runtime)?;
            let m = match spec.position {
                AugPosition::EncoderFeature => x_out,
                AugPosition::ConditioningFeature => c,
            };
            let t = m.tensor();
            let rows: Vec<bool> = (0..frames).map(|r| t.row(r).iter().all(|v| *v == 0.0)).collect();
            let cols: Vec<bool> = (0..dim).map(|d| (0..frames).all(|r| t.get(r, d) == 0.0)).collect();
            let target = match spec.position {
                AugPosition::EncoderFeature => "encoder",
                AugPosition::ConditioningFeature => "conditioning",
            };
            println!("  masked {target} frames  {}", runs(&rows));
            println!("  masked {target} dims    {}", runs(&cols));
        }
    }
    Ok(())
}

fn oracle_check(cases: usize, seed: u64) -> Outcome {
    let reports = oracle::run_all(cases, seed);
    let mut failed = false;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAILED" };
        println!("{:<44} {:>6} cases  {status}", r.name, r.cases);
        if let Some(case) = &r.first_failure {
            failed = true;
            println!("  failing case: {case}");
        }
    }
    if failed {
        Err(Failure::Runtime("oracle check failed".into()))
    } else {
        Ok(())
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::GenData { config, out_dir } => gen_data(&load_config(cli, config)?, out_dir),
        Command::Train { config, out_dir } => train(&load_config(cli, config)?, out_dir),
        Command::Eval {
            checkpoint,
            data,
            report,
        } => eval(checkpoint, data, report.as_deref()),
        Command::Matrix {
            config,
            variants,
            seeds,
            jobs,
            json,
        } => matrix(&load_config(cli, config)?, *variants, seeds, *jobs, json.as_deref()),
        Command::AugmentDemo {
            config,
            checkpoint,
            utt_id,
        } => augment_demo(&load_config(cli, config)?, checkpoint.as_deref(), utt_id),
        Command::OracleCheck { cases } => oracle_check(*cases, cli.seed.unwrap_or(1)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
