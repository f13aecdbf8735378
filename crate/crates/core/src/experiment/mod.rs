//! Declarative experiment runs: split, optional pretraining, fine-tuning,
//! evaluation, and the CSV / SVG artifacts that go with them.

mod config;
mod report;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::signal::{make_split, Dataset, SplitPlan};
use crate::train::{load_checkpoint, transfer_for_finetune, Checkpoint, TrainConfig, TrainMetrics, Trainer};

pub use config::{
    DataSource, EncoderOverrides, ExperimentConfig, ExperimentKind, ModelChoice, Profile, DATASET_ADAPT_GRID,
    SCARCITY_GRID, TASK_ADAPT_GRID,
};
pub use report::{accuracy_svg, metrics_csv, MetricRow, ResultRow, ResultTable};

/// Outcome of one (sweep point, seed) pair.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub n_train: usize,
    pub run_dir: PathBuf,
    pub pretrain_losses: Vec<f64>,
    pub metrics: Vec<TrainMetrics>,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics.last().and_then(TrainMetrics::test_accuracy)
    }

    /// First epoch whose test accuracy reaches `target`.
    pub fn epochs_to(&self, target: f64) -> Option<u64> {
        self.metrics
            .iter()
            .find(|m| m.test_accuracy().is_some_and(|a| a >= target))
            .map(|m| m.epoch)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub table: ResultTable,
    pub runs: Vec<RunRecord>,
    /// `out_dir/name`.
    pub root: PathBuf,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn config_err(what: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config(_) => e,
        other => Error::Config(format!("{what}: {other}")),
    }
}

/// Masked pretraining of a fresh model on `pool`; returns the trainer and
/// per-epoch mean losses.
pub fn pretrain(
    spec: ModelSpec,
    data: &Dataset,
    pool: &[usize],
    train: &TrainConfig,
    epochs: u64,
    seed: u64,
    mut on_epoch: impl FnMut(u64, f64, f64),
) -> Result<(Trainer, Vec<f64>)> {
    let cfg = TrainConfig {
        epochs: epochs.max(1),
        ..train.clone()
    };
    let mut tr = Trainer::for_epochs(Model::seeded(spec, seed)?, cfg, seed, pool.len())?;
    let mut losses = Vec::with_capacity(epochs as usize);
    for _ in 0..epochs {
        let l = tr.pretrain_epoch(data, pool)?;
        on_epoch(tr.epoch, l, tr.opt.lr);
        losses.push(l);
    }
    Ok((tr, losses))
}

struct Inputs {
    data: Dataset,
    pretrain_data: Option<Dataset>,
    checkpoint: Option<Checkpoint>,
}

/// Loads data and any external checkpoint, failing with a config error
/// before anything is trained.
fn prepare(cfg: &ExperimentConfig) -> Result<Inputs> {
    cfg.validate()?;
    let data = cfg.data.load(&cfg.base_dir)?;
    let pretrain_data = match (&cfg.experiment, &cfg.pretrain_data) {
        (ExperimentKind::DatasetAdapt { .. }, Some(src)) => Some(src.load(&cfg.base_dir)?),
        _ => None,
    };
    let checkpoint = match (&cfg.model, cfg.pretrain_epochs, &cfg.checkpoint) {
        (ModelChoice::TransformerPretrained, 0, Some(p)) => {
            let ck = load_checkpoint(cfg.resolve(p)).map_err(config_err("cannot load checkpoint"))?;
            transfer_for_finetune(&ck, cfg.model_spec(data.n_classes)?, 0)
                .map_err(config_err("incompatible checkpoint"))?;
            Some(ck)
        }
        _ => None,
    };
    Ok(Inputs {
        data,
        pretrain_data,
        checkpoint,
    })
}

fn plans(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Vec<(usize, SplitPlan)>> {
    let mut out = Vec::new();
    for (n, exp) in cfg.experiment.splits() {
        for &seed in &cfg.seeds {
            let mut plan = make_split(&inputs.data, &exp, seed)?;
            if let Some(src) = &inputs.pretrain_data {
                plan = plan.with_pretrain_pool(src);
            } else {
                let test: BTreeSet<usize> = plan.test_indices.iter().copied().collect();
                if plan.pretrain_indices.iter().any(|i| test.contains(i)) {
                    return Err(Error::Split(format!("seed {seed}: pretraining pool overlaps the test set")));
                }
            }
            out.push((n, plan));
        }
    }
    Ok(out)
}

fn run_one(cfg: &ExperimentConfig, inputs: &Inputs, n_train: usize, plan: &SplitPlan, dir: &Path) -> Result<RunRecord> {
    mkdir(dir)?;
    write(&dir.join("split.json"), plan.to_json()?)?;
    let seed = plan.seed;
    let spec = cfg.model_spec(inputs.data.n_classes)?;
    let mut rows = Vec::new();
    let wall = |t: Instant| cfg.record_wall_time.then(|| t.elapsed().as_secs_f64());

    let mut pretrain_losses = Vec::new();
    let model = match cfg.model {
        ModelChoice::TransformerPretrained => {
            let ck = match &inputs.checkpoint {
                Some(ck) => ck.clone(),
                None => {
                    let (src, pool) = match &inputs.pretrain_data {
                        Some(d) => (d, plan.pretrain_indices.clone()),
                        None if plan.pretrain_indices.is_empty() => (&inputs.data, plan.train_indices.clone()),
                        None => (&inputs.data, plan.pretrain_indices.clone()),
                    };
                    let mut t0 = Instant::now();
                    let (tr, losses) = pretrain(spec.clone(), src, &pool, &cfg.train, cfg.pretrain_epochs, seed, |e, l, lr| {
                        log::info!("{} seed {seed} pretrain epoch {e} loss {l:.5}", cfg.name);
                        rows.push(MetricRow {
                            epoch: e,
                            split: "pretrain",
                            loss: l,
                            accuracy: None,
                            lr,
                            seconds: wall(t0),
                        });
                        t0 = Instant::now();
                    })?;
                    pretrain_losses = losses;
                    let ck = tr.checkpoint();
                    ck.save(dir.join("pretrained.ffck"))?;
                    ck
                }
            };
            transfer_for_finetune(&ck, spec, seed)?
        }
        _ => Model::seeded(spec, seed)?,
    };

    let mut tr = Trainer::for_epochs(model, cfg.train.clone(), seed, plan.train_indices.len())?;
    let metrics = tr.fit(
        &inputs.data,
        &plan.train_indices,
        &plan.test_indices,
        cfg.train.epochs,
        |m| {
            let seconds = cfg.record_wall_time.then_some(m.wall_seconds);
            rows.push(MetricRow {
                epoch: m.epoch,
                split: "train",
                loss: m.train_loss,
                accuracy: Some(m.train_accuracy),
                lr: m.lr,
                seconds,
            });
            if let Some(t) = &m.test {
                rows.push(MetricRow {
                    epoch: m.epoch,
                    split: "test",
                    loss: t.loss,
                    accuracy: Some(t.accuracy),
                    lr: m.lr,
                    seconds,
                });
                log::info!("{} seed {seed} epoch {} test accuracy {:.4}", cfg.name, m.epoch, t.accuracy);
            }
            Ok(())
        },
    )?;
    write(&dir.join("metrics.csv"), metrics_csv(&rows)?)?;
    tr.checkpoint().save(dir.join("final.ffck"))?;
    Ok(RunRecord {
        seed,
        n_train,
        run_dir: dir.to_path_buf(),
        pretrain_losses,
        metrics,
    })
}

fn mean_test_curve(runs: &[&RunRecord]) -> Vec<(u64, f64)> {
    let len = runs.iter().map(|r| r.metrics.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let acc: f64 = runs
                .iter()
                .map(|r| r.metrics[i].test_accuracy().unwrap_or(0.0))
                .sum::<f64>()
                / runs.len() as f64;
            (runs[0].metrics[i].epoch, acc)
        })
        .collect()
}

/// Runs every sweep point and seed of `cfg` and writes, under
/// `out_dir/name`: `config.json`, `results.csv`, `accuracy.svg`, and per run
/// `split.json`, `metrics.csv` and `final.ffck`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let inputs = prepare(cfg)?;
    let plans = plans(cfg, &inputs)?;
    let root = cfg.run_root();
    mkdir(&root)?;
    write(&root.join("config.json"), cfg.to_json()?)?;

    let mut runs = Vec::with_capacity(plans.len());
    for (n, plan) in &plans {
        let dir = if matches!(cfg.experiment, ExperimentKind::Scarcity { .. }) {
            root.join(format!("n{n}-seed{}", plan.seed))
        } else {
            root.join(format!("seed{}", plan.seed))
        };
        runs.push(run_one(cfg, &inputs, *n, plan, &dir)?);
    }

    let mut table = ResultTable::default();
    let mut series = Vec::new();
    let sizes: BTreeSet<usize> = runs.iter().map(|r| r.n_train).collect();
    for n in sizes {
        let group: Vec<&RunRecord> = runs.iter().filter(|r| r.n_train == n).collect();
        let curve = mean_test_curve(&group);
        let row = |epoch, accuracy| ResultRow {
            model: cfg.model.name().to_string(),
            tokenizer: cfg.tokenizer.id().to_string(),
            augment_p: cfg.augment_p(),
            n_train: n,
            epoch,
            accuracy,
        };
        for &e in cfg.experiment.report_epochs() {
            if let Some(&(_, a)) = curve.iter().find(|(ep, _)| *ep == e) {
                table.push(row(Some(e), a))?;
            }
        }
        if let Some(&(_, a)) = curve.last() {
            table.push(row(None, a))?;
        }
        let label = if n == 0 { cfg.model.name().to_string() } else { format!("n_train={n}") };
        series.push((label, curve));
    }
    table.sort();
    table.write_csv(root.join("results.csv"))?;
    write(
        &root.join("accuracy.svg"),
        accuracy_svg(&format!("{} test accuracy", cfg.name), &series),
    )?;
    Ok(ExperimentReport { table, runs, root })
}

/// Runs configs that share data, experiment and seeds (hence splits) and
/// merges their final rows into one table.
pub fn compare_models(cfgs: &[ExperimentConfig]) -> Result<ResultTable> {
    let first = cfgs
        .first()
        .ok_or_else(|| Error::Config("compare_models needs at least one config".into()))?;
    let mut names = BTreeSet::new();
    for c in cfgs {
        if c.seeds != first.seeds {
            return Err(Error::Config(format!(
                "inconsistent split seeds: {:?} in {} vs {:?} in {}",
                c.seeds, c.name, first.seeds, first.name
            )));
        }
        if c.experiment != first.experiment || c.data != first.data || c.pretrain_data != first.pretrain_data {
            return Err(Error::Config(format!("{} does not share the split of {}", c.name, first.name)));
        }
        if !names.insert(c.name.clone()) {
            return Err(Error::Config(format!("duplicate run name {}", c.name)));
        }
    }
    for c in cfgs {
        c.validate()?;
    }
    let mut merged = ResultTable::default();
    for c in cfgs {
        let report = run_experiment(c)?;
        merged.rows.extend(report.table.final_rows().cloned());
    }
    merged.sort();
    Ok(merged)
}
