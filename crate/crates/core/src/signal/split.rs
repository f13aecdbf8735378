use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassSet, Dataset};
use crate::error::{Error, Result};

/// The four experiment families and their split parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    /// Stratified train/test split, no pretraining.
    Baseline { test_fraction: f64 },
    /// Few labelled samples, a disjoint unlabelled pretraining pool.
    Scarcity {
        n_pretrain: usize,
        n_train: usize,
        n_test: usize,
    },
    /// Pretrain on every class except `held_out`, fine-tune on `held_out`.
    TaskAdapt { held_out: Vec<u8>, test_fraction: f64 },
    /// Pretrain on another dataset, stratified split of this one.
    DatasetAdapt { test_fraction: f64 },
}

impl Experiment {
    /// 80/20 stratified split (2240 / 560 on CWRU).
    pub fn baseline() -> Self {
        Experiment::Baseline { test_fraction: 0.2 }
    }

    /// 2000 unlabelled, `n_train` labelled, 100 test samples.
    pub fn scarcity(n_train: usize) -> Self {
        Experiment::Scarcity {
            n_pretrain: 2000,
            n_train,
            n_test: 100,
        }
    }

    /// Hold out the largest fault size of every fault type (classes 3, 6, 9).
    pub fn task_adapt() -> Self {
        Experiment::TaskAdapt {
            held_out: vec![3, 6, 9],
            test_fraction: 0.2,
        }
    }

    pub fn dataset_adapt() -> Self {
        Experiment::DatasetAdapt { test_fraction: 0.2 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Baseline { .. } => "baseline",
            Experiment::Scarcity { .. } => "scarcity",
            Experiment::TaskAdapt { .. } => "task_adapt",
            Experiment::DatasetAdapt { .. } => "dataset_adapt",
        }
    }
}

/// Index lists into a dataset for one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub experiment: Experiment,
    pub seed: u64,
    /// Labels of these samples are never read.
    pub pretrain_indices: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub allowed_classes_pretrain: ClassSet,
    pub allowed_classes_train: ClassSet,
    /// Name of the dataset the pretraining indices refer to, when it is not
    /// the split dataset itself.
    #[serde(default)]
    pub pretrain_source: Option<String>,
}

impl SplitPlan {
    /// Points the pretraining pool at every sample of another dataset.
    pub fn with_pretrain_pool(mut self, source: &Dataset) -> Self {
        self.pretrain_indices = (0..source.len()).collect();
        self.allowed_classes_pretrain = ClassSet::all(source.n_classes);
        self.pretrain_source = Some(source.name.clone());
        self
    }

    /// Checks disjointness and class membership against `dataset`.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let test: BTreeSet<_> = self.test_indices.iter().collect();
        if self.train_indices.iter().any(|i| test.contains(i)) {
            return Err(Error::Split("train and test overlap".into()));
        }
        let check = |idx: &[usize], allowed: &ClassSet, what: &str| -> Result<()> {
            for &i in idx {
                let s = dataset
                    .samples
                    .get(i)
                    .ok_or_else(|| Error::Split(format!("{what} index {i} out of range")))?;
                if let Some(l) = s.label {
                    if !allowed.contains(l) {
                        return Err(Error::Split(format!("{what} sample {i} has class {l}")));
                    }
                }
            }
            Ok(())
        };
        check(&self.train_indices, &self.allowed_classes_train, "train")?;
        check(&self.test_indices, &self.allowed_classes_train, "test")?;
        if self.pretrain_source.is_none() {
            if self.pretrain_indices.iter().any(|i| test.contains(i)) {
                return Err(Error::Split("pretrain and test overlap".into()));
            }
            check(&self.pretrain_indices, &self.allowed_classes_pretrain, "pretrain")?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn quota(total: usize, k: usize, c: usize) -> usize {
    total / k + usize::from(c < total % k)
}

/// Stratified train/test split over `classes`; returns (train, test).
fn stratify(
    by_class: &mut [Vec<usize>],
    classes: &[u8],
    test_fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for &c in classes {
        let idx = &by_class[c as usize];
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        if n_test == 0 || n_test >= idx.len() {
            return Err(Error::Split(format!(
                "class {c} has {} samples, too few for a {test_fraction} test fraction",
                idx.len()
            )));
        }
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    Ok((train, test))
}

/// Seeded, class-stratified split for `experiment`.
pub fn make_split(dataset: &Dataset, experiment: &Experiment, seed: u64) -> Result<SplitPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = dataset.indices_by_class();
    for v in &mut by_class {
        v.shuffle(&mut rng);
    }
    let all: Vec<u8> = (0..dataset.n_classes as u8).collect();
    let (mut pretrain, mut train, mut test, pre_classes, train_classes) = match experiment {
        Experiment::Baseline { test_fraction } => {
            let (tr, te) = stratify(&mut by_class, &all, *test_fraction)?;
            (Vec::new(), tr, te, ClassSet::default(), ClassSet::all(dataset.n_classes))
        }
        Experiment::Scarcity {
            n_pretrain,
            n_train,
            n_test,
        } => {
            let k = dataset.n_classes;
            let (mut tr, mut te, mut rest) = (Vec::new(), Vec::new(), Vec::new());
            for (c, idx) in by_class.iter().enumerate() {
                let (qtr, qte) = (quota(*n_train, k, c), quota(*n_test, k, c));
                if idx.len() < qtr + qte {
                    return Err(Error::Split(format!(
                        "class {c} has {} samples, needs {} for train+test",
                        idx.len(),
                        qtr + qte
                    )));
                }
                te.extend_from_slice(&idx[..qte]);
                tr.extend_from_slice(&idx[qte..qte + qtr]);
                rest.extend_from_slice(&idx[qte + qtr..]);
            }
            rest.extend(
                dataset
                    .samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.label.is_none())
                    .map(|(i, _)| i),
            );
            rest.sort_unstable();
            rest.shuffle(&mut rng);
            if rest.len() < *n_pretrain {
                return Err(Error::Split(format!(
                    "pretraining pool needs {n_pretrain} samples, only {} remain",
                    rest.len()
                )));
            }
            rest.truncate(*n_pretrain);
            (rest, tr, te, ClassSet::all(k), ClassSet::all(k))
        }
        Experiment::TaskAdapt {
            held_out,
            test_fraction,
        } => {
            if let Some(&c) = held_out.iter().find(|&&c| c as usize >= dataset.n_classes) {
                return Err(Error::Split(format!("held-out class {c} does not exist")));
            }
            let kept: Vec<u8> = all.iter().copied().filter(|c| !held_out.contains(c)).collect();
            let pre: Vec<usize> = kept
                .iter()
                .flat_map(|&c| by_class[c as usize].iter().copied())
                .collect();
            let (tr, te) = stratify(&mut by_class, held_out, *test_fraction)?;
            (
                pre,
                tr,
                te,
                kept.into_iter().collect(),
                held_out.iter().copied().collect(),
            )
        }
        Experiment::DatasetAdapt { test_fraction } => {
            let (tr, te) = stratify(&mut by_class, &all, *test_fraction)?;
            (Vec::new(), tr, te, ClassSet::default(), ClassSet::all(dataset.n_classes))
        }
    };
    pretrain.sort_unstable();
    train.sort_unstable();
    test.sort_unstable();
    let plan = SplitPlan {
        experiment: experiment.clone(),
        seed,
        pretrain_indices: pretrain,
        train_indices: train,
        test_indices: test,
        allowed_classes_pretrain: pre_classes,
        allowed_classes_train: train_classes,
        pretrain_source: None,
    };
    plan.validate(dataset)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SignalSample;

    /// Label-only stand-in for CWRU: 10 classes of 280 windows.
    fn cwru_like() -> Dataset {
        let samples = (0..2800)
            .map(|i| SignalSample::new(vec![0.0; 4], Some((i / 280) as u8), 48_000.0))
            .collect();
        Dataset::new("cwru", samples, 10).unwrap()
    }

    fn count_class(ds: &Dataset, idx: &[usize], c: u8) -> usize {
        idx.iter().filter(|&&i| ds.samples[i].label == Some(c)).count()
    }

    #[test]
    fn baseline_counts() {
        let ds = cwru_like();
        let p = make_split(&ds, &Experiment::baseline(), 0).unwrap();
        assert_eq!(p.train_indices.len(), 2240);
        assert_eq!(p.test_indices.len(), 560);
        for c in 0..10 {
            assert_eq!(count_class(&ds, &p.train_indices, c), 224);
            assert_eq!(count_class(&ds, &p.test_indices, c), 56);
        }
    }

    #[test]
    fn scarcity_counts_and_disjointness() {
        let ds = cwru_like();
        for n in [100, 200, 400] {
            let p = make_split(&ds, &Experiment::scarcity(n), 7).unwrap();
            assert_eq!(p.pretrain_indices.len(), 2000);
            assert_eq!(p.train_indices.len(), n);
            assert_eq!(p.test_indices.len(), 100);
            let pre: BTreeSet<_> = p.pretrain_indices.iter().collect();
            assert!(p.train_indices.iter().all(|i| !pre.contains(i)));
            assert!(p.test_indices.iter().all(|i| !pre.contains(i)));
        }
    }

    #[test]
    fn task_adapt_class_sets() {
        let ds = cwru_like();
        let p = make_split(&ds, &Experiment::task_adapt(), 1).unwrap();
        assert_eq!(p.pretrain_indices.len(), 1960);
        assert_eq!(p.train_indices.len(), 672);
        assert_eq!(p.test_indices.len(), 168);
        for &i in &p.pretrain_indices {
            assert!(![3, 6, 9].contains(&ds.samples[i].label.unwrap()));
        }
        for &i in p.train_indices.iter().chain(&p.test_indices) {
            assert!([3, 6, 9].contains(&ds.samples[i].label.unwrap()));
        }
    }

    #[test]
    fn dataset_adapt_counts() {
        let samples = (0..58_000)
            .map(|i| SignalSample::new(vec![0.0], Some((i % 4) as u8), 64_000.0))
            .collect();
        let pad = Dataset::new("paderborn", samples, 4).unwrap();
        let p = make_split(&pad, &Experiment::dataset_adapt(), 2)
            .unwrap()
            .with_pretrain_pool(&cwru_like());
        assert_eq!(p.train_indices.len(), 46_400);
        assert_eq!(p.test_indices.len(), 11_600);
        assert_eq!(p.pretrain_indices.len(), 2800);
        assert_eq!(p.pretrain_source.as_deref(), Some("cwru"));
    }

    #[test]
    fn insufficient_class_is_named() {
        let mut ds = cwru_like();
        ds.samples.retain(|s| s.label != Some(4) || s.values.len() == 99);
        ds.samples
            .push(SignalSample::new(vec![0.0; 4], Some(4), 48_000.0));
        match make_split(&ds, &Experiment::baseline(), 0) {
            Err(Error::Split(msg)) => assert!(msg.contains("class 4"), "{msg}"),
            other => panic!("expected split error, got {other:?}"),
        }
    }

    #[test]
    fn split_is_seeded() {
        let ds = cwru_like();
        let a = make_split(&ds, &Experiment::scarcity(100), 3).unwrap();
        let b = make_split(&ds, &Experiment::scarcity(100), 3).unwrap();
        let c = make_split(&ds, &Experiment::scarcity(100), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train_indices, c.train_indices);
        let json = a.to_json().unwrap();
        let back: SplitPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }
}
