//! Instruction-count cost of deobfuscating in software.
//!
//! The two JIT modes are charge models over a baseline profile. The runtime
//! mode is measured: the program is rewritten with [`emit_runtime_deobf`]
//! and the rewritten code is simulated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::Program;
use crate::obfuscate::{apply_mask, emit_runtime_deobf, InversionMask, ObfError};
use crate::sim::{simulate, simulate_profiled, SimConfig, SimError, SimReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SoftMode {
    JitCached,
    JitUncached,
    Runtime,
}

impl SoftMode {
    pub const ALL: [SoftMode; 3] = [
        SoftMode::JitCached,
        SoftMode::JitUncached,
        SoftMode::Runtime,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            SoftMode::JitCached => "jit-cached",
            SoftMode::JitUncached => "jit-uncached",
            SoftMode::Runtime => "runtime",
        }
    }
}

impl fmt::Display for SoftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for SoftMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SoftMode::ALL
            .into_iter()
            .find(|m| m.cli_name() == s)
            .ok_or_else(|| {
                format!("unknown mode `{s}` (expected jit-cached, jit-uncached or runtime)")
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftDeobfModel {
    pub mode: SoftMode,
    pub per_branch_cost: u64,
    pub mask_lookup_cost: u64,
}

impl SoftDeobfModel {
    pub fn new(mode: SoftMode) -> Self {
        SoftDeobfModel {
            mode,
            per_branch_cost: 10,
            mask_lookup_cost: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SoftError {
    #[error("per_branch_cost must be at least 1")]
    InvalidModel,
    #[error(transparent)]
    Rewrite(#[from] ObfError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("rewritten program exited with {got}, plain program with {want}")]
    Mismatch { got: i32, want: i32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftReport {
    pub mode: SoftMode,
    pub per_branch_cost: u64,
    pub baseline_instructions: u64,
    pub dynamic_branches: u64,
    pub distinct_branches: u64,
    pub extra_instructions: u64,
    /// Mask load and compare alone, `mask_lookup_cost` per dynamic branch.
    /// Runtime mode only.
    pub lookup_lower_bound: Option<u64>,
    pub overhead: f64,
}

/// Overhead of deobfuscating `plain` (obfuscated with `mask`) in software,
/// as extra instructions over `baseline.instructions`.
pub fn estimate_overhead(
    plain: &Program,
    mask: &InversionMask,
    model: &SoftDeobfModel,
    baseline: &SimReport,
) -> Result<SoftReport, SoftError> {
    if model.per_branch_cost == 0 {
        return Err(SoftError::InvalidModel);
    }
    let (_, profile) = simulate_profiled(plain, &SimConfig::baseline())?;
    let dynamic: u64 = profile.values().map(|s| s.executions).sum();
    let distinct = profile.len() as u64;

    let (extra, lookup_lower_bound) = match model.mode {
        SoftMode::JitCached => (model.per_branch_cost * distinct, None),
        SoftMode::JitUncached => (model.per_branch_cost * dynamic, None),
        SoftMode::Runtime => {
            let obf = apply_mask(plain, mask);
            let rt = emit_runtime_deobf(&obf, mask)?;
            let run = simulate(&rt.program, &SimConfig::baseline())?;
            if run.exit_code != baseline.exit_code || run.output_bytes != baseline.output_bytes {
                return Err(SoftError::Mismatch {
                    got: run.exit_code,
                    want: baseline.exit_code,
                });
            }
            (
                run.instructions.saturating_sub(baseline.instructions),
                Some(model.mask_lookup_cost * dynamic),
            )
        }
    };
    let overhead = if baseline.instructions == 0 {
        0.0
    } else {
        extra as f64 / baseline.instructions as f64
    };
    Ok(SoftReport {
        mode: model.mode,
        per_branch_cost: model.per_branch_cost,
        baseline_instructions: baseline.instructions,
        dynamic_branches: dynamic,
        distinct_branches: distinct,
        extra_instructions: extra,
        lookup_lower_bound,
        overhead,
    })
}
