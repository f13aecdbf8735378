use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use faultformer::augment::preview_csv;
use faultformer::experiment::{compare_models, metrics_csv, pretrain, run_experiment, ExperimentConfig, MetricRow};
use faultformer::model::Model;
use faultformer::signal::{make_split, Dataset};
use faultformer::train::{evaluate, load_checkpoint};
use faultformer::{Error, Result};

/// Output root used when `--out` is absent.
const OUT_ENV: &str = "FAULTFORMER_OUT";

#[derive(Parser)]
#[command(name = "faultformer", version, about = "Transformer fault classification on vibration signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Relative paths inside resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; overrides $FAULTFORMER_OUT and the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Masked pretraining on the split's pretraining pool.
    Pretrain(Common),
    /// Fine-tune or train from scratch for one seed.
    Finetune(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full experiment; several configs are run as one comparison.
    Experiment {
        /// One or more experiment configs.
        #[arg(long, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every augmentation branch applied to one sample, as CSV.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Token matrix of one sample, as CSV.
    TokenizeDump {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Needed for the trainable CNN tokenizer.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Class-token attention per head for one sample, as CSV.
    AttnDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let root = out
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from));
    if let Some(r) = root {
        cfg.out_dir = std::path::absolute(&r).map_err(|e| Error::Config(format!("bad output path {}: {e}", r.display())))?;
    }
    Ok(cfg)
}

fn common_config(c: &Common) -> Result<ExperimentConfig> {
    load_config(&c.config, c.seed, c.out.as_deref())
}

fn write_out(cfg: &ExperimentConfig, file: &str, contents: &str) -> Result<PathBuf> {
    let dir = cfg.run_root();
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join(file);
    std::fs::write(&path, contents).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(path)
}

fn sample<'a>(data: &'a Dataset, index: usize) -> Result<&'a [f64]> {
    data.samples
        .get(index)
        .map(|s| s.values.as_slice())
        .ok_or_else(|| Error::Config(format!("sample index {index} out of range ({} samples)", data.len())))
}

fn first_plan(cfg: &ExperimentConfig, data: &Dataset) -> Result<faultformer::signal::SplitPlan> {
    let (_, exp) = cfg
        .experiment
        .splits()
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config("experiment defines no split".into()))?;
    make_split(data, &exp, cfg.seeds[0])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = common_config(&c)?;
            cfg.validate()?;
            if cfg.pretrain_epochs == 0 {
                return Err(Error::Config("pretrain_epochs must be positive".into()));
            }
            let data = cfg.data.load(&cfg.base_dir)?;
            let plan = first_plan(&cfg, &data)?;
            let (src, pool) = match &cfg.pretrain_data {
                Some(p) => {
                    let d = p.load(&cfg.base_dir)?;
                    let n = d.len();
                    (d, (0..n).collect())
                }
                None if plan.pretrain_indices.is_empty() => (data.clone(), plan.train_indices.clone()),
                None => (data.clone(), plan.pretrain_indices.clone()),
            };
            let spec = cfg.model_spec(data.n_classes)?;
            let mut rows = Vec::new();
            let (tr, _) = pretrain(spec, &src, &pool, &cfg.train, cfg.pretrain_epochs, cfg.seeds[0], |e, l, lr| {
                eprintln!("pretrain epoch {e} loss {l:.5}");
                rows.push(MetricRow {
                    epoch: e,
                    split: "pretrain",
                    loss: l,
                    accuracy: None,
                    lr,
                    seconds: None,
                });
            })?;
            write_out(&cfg, "pretrain_metrics.csv", &metrics_csv(&rows)?)?;
            let path = cfg.run_root().join(format!("pretrained-seed{}.ffck", cfg.seeds[0]));
            tr.checkpoint().save(&path)?;
            println!("{}", path.display());
        }
        Command::Finetune(c) => {
            let mut cfg = common_config(&c)?;
            cfg.seeds.truncate(1);
            let report = run_experiment(&cfg)?;
            print!("{}", report.table.to_csv()?);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common_config(&common)?;
            let data = cfg.data.load(&cfg.base_dir)?;
            let plan = first_plan(&cfg, &data)?;
            let model = load_checkpoint(&checkpoint)?.to_model()?;
            let m = evaluate(&model, &data, &plan.test_indices)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Experiment { config, seed, out } => {
            let cfgs = config
                .iter()
                .map(|p| load_config(p, seed, out.as_deref()))
                .collect::<Result<Vec<_>>>()?;
            if cfgs.len() == 1 {
                let report = run_experiment(&cfgs[0])?;
                print!("{}", report.table.to_csv()?);
            } else {
                let table = compare_models(&cfgs)?;
                let dir = cfgs[0].resolve(&cfgs[0].out_dir);
                table.write_csv(dir.join("comparison.csv"))?;
                print!("{}", table.to_csv()?);
            }
        }
        Command::AugmentPreview { common, index } => {
            let cfg = common_config(&common)?;
            let data = cfg.data.load(&cfg.base_dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
            let csv = preview_csv(sample(&data, index)?, &cfg.train.augment, &mut rng);
            println!("{}", write_out(&cfg, "augment_preview.csv", &csv)?.display());
        }
        Command::TokenizeDump {
            common,
            index,
            checkpoint,
        } => {
            let cfg = common_config(&common)?;
            let data = cfg.data.load(&cfg.base_dir)?;
            let model = match checkpoint {
                Some(p) => load_checkpoint(p)?.to_model()?,
                None => Model::seeded(cfg.model_spec(data.n_classes)?, cfg.seeds[0])?,
            };
            let tokens = model.tokenizer.tokenize(&model.store, sample(&data, index)?)?;
            println!("{}", write_out(&cfg, "tokens.csv", &tokens.to_csv())?.display());
        }
        Command::AttnDump {
            common,
            checkpoint,
            layer,
            index,
        } => {
            let cfg = common_config(&common)?;
            let data = cfg.data.load(&cfg.base_dir)?;
            let model = load_checkpoint(&checkpoint)?.to_model()?;
            let scores = model.attention_scores(sample(&data, index)?, layer)?;
            let mut csv = String::from("head,token,score\n");
            for (h, row) in scores.iter().enumerate() {
                for (t, s) in row.iter().enumerate() {
                    csv.push_str(&format!("{h},{t},{s}\n"));
                }
            }
            println!("{}", write_out(&cfg, "attention.csv", &csv)?.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Training { .. } => 3,
        Error::Config(_)
        | Error::Json(_)
        | Error::Io { .. }
        | Error::Transfer(_)
        | Error::Split(_)
        | Error::Ingestion(_)
        | Error::Format { .. }
        | Error::Parameter(_)
        | Error::Data(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
