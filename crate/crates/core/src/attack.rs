//! The keyless attacker: guess inversion masks, and observe how far an
//! obfuscated program strays from the original when run without a key.
//!
//! Nothing here reads an [`ObfKey`](crate::hash::ObfKey). The plain
//! program is used only as the oracle that scores a guess.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{BranchKind, MachineState, Program};
use crate::obfuscate::{apply_mask, InversionMask};
use crate::sim::{simulate_from, SimConfig, SimError, DEFAULT_MAX_CYCLES};

pub const MAX_EXHAUSTIVE_BRANCHES: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("exhaustive search over {0} branches exceeds the limit of {MAX_EXHAUSTIVE_BRANCHES}")]
    TooManyBranches(usize),
    #[error("programs differ outside conditional-branch opcodes (first at index {0})")]
    Topology(usize),
    #[error("exhaustive search found {0} reconstructing masks, expected exactly one")]
    NotUnique(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackMode {
    Exhaustive,
    Sampled { trials: u64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub n: usize,
    pub trials: u64,
    pub successes: u64,
    pub empirical_p: f64,
    pub theoretical_p: f64,
    /// Filled in by [`AttackReport::with_divergence`].
    pub divergence: Option<f64>,
    /// The reconstructing mask found by exhaustive search.
    pub recovered: Option<InversionMask>,
}

impl AttackReport {
    pub fn with_divergence(mut self, d: &DivergenceReport) -> Self {
        self.divergence = Some(d.divergence);
        self
    }
}

/// Branch kinds of `obf` and `plain`, after checking that the two are the
/// same program up to branch opcodes.
fn branch_pairs(
    obf: &Program,
    plain: &Program,
) -> Result<Vec<(u32, BranchKind, BranchKind)>, AttackError> {
    let (a, b) = (obf.text(), plain.text());
    if a.len() != b.len() {
        return Err(AttackError::Topology(a.len().min(b.len())));
    }
    let mut pairs = Vec::new();
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        match (x.branch_kind(), y.branch_kind()) {
            (Some(kx), Some(ky)) => {
                let same = x.address == y.address
                    && x.rs1 == y.rs1
                    && x.rs2 == y.rs2
                    && x.target == y.target
                    && x.imm == y.imm;
                if !same {
                    return Err(AttackError::Topology(i));
                }
                pairs.push((x.address, kx, ky));
            }
            _ if x == y => {}
            _ => return Err(AttackError::Topology(i)),
        }
    }
    if obf.labels() != plain.labels() || obf.data() != plain.data() || obf.entry() != plain.entry()
    {
        return Err(AttackError::Topology(a.len()));
    }
    Ok(pairs)
}

pub fn brute_force(
    obf: &Program,
    plain: &Program,
    mode: AttackMode,
) -> Result<AttackReport, AttackError> {
    let pairs = branch_pairs(obf, plain)?;
    let n = pairs.len();
    let theoretical_p = 0.5f64.powi(n as i32);
    // Bit i of the reconstructing mask: whether branch i must be flipped.
    let truth: Vec<bool> = pairs.iter().map(|&(_, o, p)| o != p).collect();

    let (trials, successes, recovered) = match mode {
        AttackMode::Exhaustive => {
            if n > MAX_EXHAUSTIVE_BRANCHES {
                return Err(AttackError::TooManyBranches(n));
            }
            let kinds: Vec<(BranchKind, BranchKind)> =
                pairs.iter().map(|&(_, o, p)| (o, p)).collect();
            let total = 1u64 << n;
            let hits: Vec<u64> = (0..total)
                .into_par_iter()
                .filter(|&m| {
                    kinds.iter().enumerate().all(|(i, &(o, p))| {
                        let guess = if m >> i & 1 == 1 { o.invert() } else { o };
                        guess == p
                    })
                })
                .collect();
            if hits.len() != 1 {
                return Err(AttackError::NotUnique(hits.len() as u64));
            }
            let mask = InversionMask::from_entries(
                pairs
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, _, _))| (a, hits[0] >> i & 1 == 1)),
            );
            if apply_mask(obf, &mask) != *plain {
                return Err(AttackError::NotUnique(0));
            }
            (total, 1, Some(mask))
        }
        AttackMode::Sampled { trials, seed } => {
            const CHUNK: u64 = 4096;
            let chunks = trials.div_ceil(CHUNK);
            let successes: u64 = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(c);
                    let count = CHUNK.min(trials - c * CHUNK);
                    (0..count)
                        .filter(|_| truth.iter().all(|&t| rng.gen::<bool>() == t))
                        .count() as u64
                })
                .sum();
            (trials, successes, None)
        }
    };
    let empirical_p = if trials == 0 {
        0.0
    } else {
        successes as f64 / trials as f64
    };
    Ok(AttackReport {
        n,
        trials,
        successes,
        empirical_p,
        theoretical_p,
        divergence: None,
        recovered,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Exited,
    Timeout,
    Trap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub status: RunStatus,
    pub exit_code: i32,
    pub output: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub inputs: usize,
    pub divergent: usize,
    /// Divergent inputs on which the obfuscated run hit the cycle limit.
    pub timeouts: usize,
    pub divergence: f64,
}

/// Runs `p` on an unkeyed machine with `input` stored at its `input`
/// label, if it has one.
pub fn run_with_input(p: &Program, input: u32, max_cycles: u64) -> Outcome {
    let mut state = MachineState::new(p);
    if let Some(addr) = p.input_address() {
        if state.store(addr, 4, input).is_err() {
            return Outcome {
                status: RunStatus::Trap,
                exit_code: 0,
                output: Vec::new(),
            };
        }
    }
    let cfg = SimConfig {
        max_cycles,
        ..SimConfig::baseline()
    };
    match simulate_from(p, &cfg, state) {
        Ok(r) => Outcome {
            status: RunStatus::Exited,
            exit_code: r.exit_code,
            output: r.output_bytes,
        },
        Err(e) => {
            let status = match e {
                SimError::CycleLimit { .. } => RunStatus::Timeout,
                _ => RunStatus::Trap,
            };
            let partial = e.partial().cloned().unwrap_or_default();
            Outcome {
                status,
                exit_code: partial.exit_code,
                output: partial.output_bytes,
            }
        }
    }
}

/// Fraction of `inputs` on which `plain` and `obf` differ in exit code,
/// output or termination.
pub fn measure_divergence(plain: &Program, obf: &Program, inputs: &[u32]) -> DivergenceReport {
    measure_divergence_with(plain, obf, inputs, DEFAULT_MAX_CYCLES)
}

pub fn measure_divergence_with(
    plain: &Program,
    obf: &Program,
    inputs: &[u32],
    max_cycles: u64,
) -> DivergenceReport {
    let results: Vec<(bool, bool)> = inputs
        .par_iter()
        .map(|&x| {
            let a = run_with_input(plain, x, max_cycles);
            let b = run_with_input(obf, x, max_cycles);
            let differs = a != b;
            (differs, differs && b.status == RunStatus::Timeout)
        })
        .collect();
    let divergent = results.iter().filter(|r| r.0).count();
    let timeouts = results.iter().filter(|r| r.1).count();
    DivergenceReport {
        inputs: inputs.len(),
        divergent,
        timeouts,
        divergence: if inputs.is_empty() {
            0.0
        } else {
            divergent as f64 / inputs.len() as f64
        },
    }
}
