//! How well a classifier tells inverted branches from plain ones.
//!
//! The pipeline: [`build_dataset`] pairs each program with its obfuscated
//! twin and takes one sample per branch of each; [`preprocess`] splits by
//! program, thins the plain class and encodes features; and
//! [`train_and_evaluate`] fits a model and scores the held-out programs.

pub mod cfg;
pub mod dataset;
pub mod features;
pub mod model;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{
    build_dataset, parse_dataset, relabel_with_coin, write_dataset, BbblSample, WindowRecord,
};
pub use features::{encode, FeatureVector};
pub use model::{DecisionTree, LogReg, LogRegParams, TreeParams};

use crate::hash::{HashScheme, ObfKey};
use crate::isa::Program;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StealthError {
    #[error("need at least 4 programs for a split by program, got {0}")]
    TooFewPrograms(usize),
    #[error("window size must be at least 1")]
    WindowSize,
    #[error("window sizes must be a non-empty ascending list")]
    WindowList,
    #[error("the training set has no {0} samples")]
    MissingClass(&'static str),
    #[error("the test set is empty")]
    EmptyTest,
}

/// Encoded samples with their labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub window: usize,
    pub x: Vec<FeatureVector>,
    pub y: Vec<bool>,
    pub programs: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&l| l).count()
    }

    fn encode(samples: &[&BbblSample], window: usize, programs: Vec<String>) -> Dataset {
        Dataset {
            window,
            x: samples.iter().map(|s| encode(s, window)).collect(),
            y: samples.iter().map(|s| s.label).collect(),
            programs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_fraction: f64,
    /// Fraction of plain training samples kept.
    pub plain_keep: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.25,
            plain_keep: 1.0 / 3.0,
        }
    }
}

/// Splits by program, subsamples plain training samples and encodes
/// windows of size `window`. Deterministic in `split_seed`.
pub fn preprocess(
    samples: &[BbblSample],
    window: usize,
    split_seed: u64,
) -> Result<(Dataset, Dataset), StealthError> {
    preprocess_with(samples, window, split_seed, &SplitConfig::default())
}

pub fn preprocess_with(
    samples: &[BbblSample],
    window: usize,
    split_seed: u64,
    split: &SplitConfig,
) -> Result<(Dataset, Dataset), StealthError> {
    if window == 0 {
        return Err(StealthError::WindowSize);
    }
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.program_id.as_str()).collect();
    if ids.len() < dataset::MIN_PROGRAMS {
        return Err(StealthError::TooFewPrograms(ids.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.shuffle(&mut rng);
    let n_test =
        ((ids.len() as f64 * split.test_fraction).round() as usize).clamp(1, ids.len() - 1);
    let test_ids: BTreeSet<&str> = ids[..n_test].iter().copied().collect();
    let train_ids: BTreeSet<&str> = ids[n_test..].iter().copied().collect();

    let (test, train): (Vec<&BbblSample>, Vec<&BbblSample>) = samples
        .iter()
        .partition(|s| test_ids.contains(s.program_id.as_str()));
    let (mut plain, obf): (Vec<&BbblSample>, Vec<&BbblSample>) =
        train.into_iter().partition(|s| !s.label);
    let keep = (plain.len() as f64 * split.plain_keep).ceil() as usize;
    let mut order: Vec<usize> = (0..plain.len()).collect();
    order.shuffle(&mut rng);
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    plain = kept.into_iter().map(|i| plain[i]).collect();
    if plain.is_empty() {
        return Err(StealthError::MissingClass("plain"));
    }
    if obf.is_empty() {
        return Err(StealthError::MissingClass("obfuscated"));
    }
    let mut train = plain;
    train.extend(obf);

    let names = |set: BTreeSet<&str>| set.into_iter().map(String::from).collect();
    Ok((
        Dataset::encode(&train, window, names(train_ids)),
        Dataset::encode(&test, window, names(test_ids)),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    LogisticRegression,
    DecisionTree,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::LogisticRegression, ModelKind::DecisionTree];

    pub fn cli_name(self) -> &'static str {
        match self {
            ModelKind::LogisticRegression => "logreg",
            ModelKind::DecisionTree => "tree",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.cli_name() == s)
            .ok_or_else(|| format!("unknown model `{s}` (expected logreg or tree)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub model: ModelKind,
    pub window_size: usize,
    pub accuracy: f64,
    /// `confusion[truth][prediction]`, index 0 plain and 1 obfuscated.
    pub confusion: [[u64; 2]; 2],
    pub train_programs: usize,
    pub test_programs: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// `false` if logistic regression hit its epoch limit.
    pub converged: bool,
}

impl ClassifierReport {
    pub fn test_total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub logreg: LogRegParams,
    pub tree: TreeParams,
}

pub fn train_and_evaluate(
    train: &Dataset,
    test: &Dataset,
    model: ModelKind,
) -> Result<ClassifierReport, StealthError> {
    train_and_evaluate_with(train, test, model, &ModelParams::default())
}

pub fn train_and_evaluate_with(
    train: &Dataset,
    test: &Dataset,
    model: ModelKind,
    params: &ModelParams,
) -> Result<ClassifierReport, StealthError> {
    let pos = train.positives();
    if pos == 0 {
        return Err(StealthError::MissingClass("obfuscated"));
    }
    if pos == train.len() {
        return Err(StealthError::MissingClass("plain"));
    }
    if test.is_empty() {
        return Err(StealthError::EmptyTest);
    }
    let (predictions, converged): (Vec<bool>, bool) = match model {
        ModelKind::LogisticRegression => {
            let m = LogReg::fit(&train.x, &train.y, &params.logreg);
            if !m.converged {
                log::warn!(
                    "logistic regression stopped after {} epochs without converging",
                    m.epochs
                );
            }
            (test.x.iter().map(|v| m.predict(v)).collect(), m.converged)
        }
        ModelKind::DecisionTree => {
            let t = DecisionTree::fit(&train.x, &train.y, &params.tree);
            (test.x.iter().map(|v| t.predict(v)).collect(), true)
        }
    };
    let mut confusion = [[0u64; 2]; 2];
    for (&truth, &pred) in test.y.iter().zip(&predictions) {
        confusion[truth as usize][pred as usize] += 1;
    }
    let correct = confusion[0][0] + confusion[1][1];
    Ok(ClassifierReport {
        model,
        window_size: train.window,
        accuracy: correct as f64 / test.len() as f64,
        confusion,
        train_programs: train.programs.len(),
        test_programs: test.programs.len(),
        train_samples: train.len(),
        test_samples: test.len(),
        converged,
    })
}

/// One report per window size, all with the same split.
pub fn window_sweep(
    corpus: &[(String, Program)],
    key: ObfKey,
    scheme: &HashScheme,
    windows: &[usize],
    model: ModelKind,
    split_seed: u64,
) -> Result<Vec<ClassifierReport>, StealthError> {
    if windows.is_empty() || windows.windows(2).any(|w| w[0] >= w[1]) {
        return Err(StealthError::WindowList);
    }
    let max = *windows.last().unwrap();
    let samples = build_dataset(corpus, key, scheme, max)?;
    sweep_samples(&samples, windows, model, split_seed)
}

/// [`window_sweep`] over prepared samples, whose windows must be at least
/// as long as the largest size requested.
pub fn sweep_samples(
    samples: &[BbblSample],
    windows: &[usize],
    model: ModelKind,
    split_seed: u64,
) -> Result<Vec<ClassifierReport>, StealthError> {
    use rayon::prelude::*;
    if windows.is_empty() || windows.windows(2).any(|w| w[0] >= w[1]) {
        return Err(StealthError::WindowList);
    }
    windows
        .par_iter()
        .map(|&w| {
            let (train, test) = preprocess(samples, w, split_seed)?;
            train_and_evaluate(&train, &test, model)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::parse_asm;
    use crate::obfuscate::InversionMask;

    fn four_branch_program() -> Program {
        parse_asm(
            "beq a0, a1, a\naddi t0, t0, 1\na: bne a0, a1, b\naddi t0, t0, 1\n\
             b: blt a0, a1, c\naddi t0, t0, 1\nc: bge a0, a1, d\naddi t0, t0, 1\nd: ecall\n",
        )
        .unwrap()
    }

    fn corpus(n: usize) -> Vec<(String, Program)> {
        (0..n)
            .map(|i| (format!("p{i}"), four_branch_program()))
            .collect()
    }

    #[test]
    fn construction_counts_and_labels() {
        let p = four_branch_program();
        let addrs: Vec<u32> = p.branches().map(|b| b.address).collect();
        let mask =
            InversionMask::from_entries(addrs.iter().copied().zip([true, false, true, false]));
        let samples = build_dataset(&corpus(4), ObfKey(0), &HashScheme::Mask(mask), 5).unwrap();
        let first: Vec<&BbblSample> = samples.iter().filter(|s| s.program_id == "p0").collect();
        assert_eq!(first.len(), 8);
        let labels: Vec<bool> = first.iter().map(|s| s.label).collect();
        assert_eq!(
            labels,
            [true, false, true, false, false, false, false, false]
        );
        for (obf, plain) in first[..4].iter().zip(&first[4..]) {
            assert_eq!(obf.branch_address, plain.branch_address);
            let (o, p) = (
                obf.branch().opcode.branch_kind(),
                plain.branch().opcode.branch_kind(),
            );
            if obf.label {
                assert_eq!(o, p.map(|k| k.invert()));
            } else {
                assert_eq!(o, p);
            }
        }
    }

    #[test]
    fn window_truncated_at_block_start() {
        let samples = build_dataset(&corpus(4), ObfKey(1), &HashScheme::Mix64, 5).unwrap();
        assert!(samples.iter().all(|s| s.window.len() == 1));
    }

    #[test]
    fn too_few_programs() {
        let err = build_dataset(&corpus(3), ObfKey(1), &HashScheme::Mix64, 2).unwrap_err();
        assert_eq!(err, StealthError::TooFewPrograms(3));
    }

    #[test]
    fn dataset_file_round_trip() {
        let samples = build_dataset(&corpus(4), ObfKey(7), &HashScheme::Mix64, 3).unwrap();
        let text = write_dataset(&samples);
        assert!(text.lines().next().unwrap().starts_with("p0,0x0,0,"));
        assert_eq!(parse_dataset(&text).unwrap(), samples);
    }

    #[test]
    fn dataset_file_rejects_bad_lines() {
        assert!(parse_dataset("p,0x0,0,1\n").is_err());
        assert!(parse_dataset("p,0x0,0,1,window:[addi;a0;-;a0]\n").is_err());
        let err = parse_dataset("p,0x0,0,1,window:[beq;a0;a1;-]\np,0x4,2,0,window:[beq;a0;a1;-]\n")
            .unwrap_err();
        assert_eq!(err.line, 2);
    }

    fn labelled(n_programs: usize) -> Vec<BbblSample> {
        let mut samples =
            build_dataset(&corpus(n_programs), ObfKey(3), &HashScheme::Mix64, 2).unwrap();
        relabel_with_coin(&mut samples, 11);
        samples
    }

    #[test]
    fn split_is_by_program_and_deterministic() {
        let samples = labelled(8);
        let (train, test) = preprocess(&samples, 2, 42).unwrap();
        assert_eq!(test.programs.len(), 2);
        assert_eq!(train.programs.len(), 6);
        for id in &test.programs {
            assert!(!train.programs.contains(id));
        }
        assert_eq!(preprocess(&samples, 2, 42).unwrap(), (train, test));
    }

    #[test]
    fn plain_subsampled_to_a_third() {
        let samples = labelled(8);
        let (train, _) = preprocess(&samples, 2, 5).unwrap();
        let (train_ids, plain_total) = {
            let ids: BTreeSet<&str> = train.programs.iter().map(String::as_str).collect();
            let n = samples
                .iter()
                .filter(|s| ids.contains(s.program_id.as_str()) && !s.label)
                .count();
            (ids, n)
        };
        assert!(!train_ids.is_empty());
        assert_eq!(train.len() - train.positives(), plain_total.div_ceil(3));
    }

    #[test]
    fn missing_class_is_an_error() {
        let mut samples = labelled(4);
        samples.iter_mut().for_each(|s| s.label = false);
        assert_eq!(
            preprocess(&samples, 2, 0).unwrap_err(),
            StealthError::MissingClass("obfuscated")
        );
    }

    #[test]
    fn report_is_consistent() {
        let samples = labelled(8);
        let (train, test) = preprocess(&samples, 2, 1).unwrap();
        for model in ModelKind::ALL {
            let r = train_and_evaluate(&train, &test, model).unwrap();
            assert_eq!(r.test_total() as usize, test.len());
            let diag = (r.confusion[0][0] + r.confusion[1][1]) as f64;
            assert!((r.accuracy - diag / test.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_shape() {
        let c = corpus(4);
        let one = window_sweep(
            &c,
            ObfKey(5),
            &HashScheme::Mix64,
            &[1],
            ModelKind::DecisionTree,
            0,
        );
        assert_eq!(one.unwrap().len(), 1);
        let bad = window_sweep(
            &c,
            ObfKey(5),
            &HashScheme::Mix64,
            &[2, 1],
            ModelKind::DecisionTree,
            0,
        );
        assert_eq!(bad.unwrap_err(), StealthError::WindowList);
    }
}
