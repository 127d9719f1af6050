//! Cycle-cost model of the pipelined core in its four branch-resolution
//! designs.
//!
//! Every retired instruction costs one cycle and a taken conditional branch
//! adds `branch_penalty`. The keyed designs XOR the branch outcome with the
//! inversion bit; they differ only in how long that bit takes to arrive:
//!
//! | design        | stall per conditional branch                  |
//! |---------------|-----------------------------------------------|
//! | `Baseline`    | 0 (no XOR)                                    |
//! | `StalledHash` | `max(0, hash_cycles - overlap)`               |
//! | `CachedHash`  | as `StalledHash` on a cache miss, 0 on a hit  |
//! | `MaskBased`   | 0                                             |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{HashScheme, ObfKey};
use crate::isa::{MachineState, Program, TraceDigest, Trap};
use crate::obfuscate::InversionMask;

pub const DEFAULT_MAX_CYCLES: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Design {
    Baseline,
    StalledHash,
    CachedHash,
    MaskBased,
}

impl Design {
    pub const ALL: [Design; 4] = [
        Design::Baseline,
        Design::StalledHash,
        Design::CachedHash,
        Design::MaskBased,
    ];

    /// Short name used on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            Design::Baseline => "baseline",
            Design::StalledHash => "stall",
            Design::CachedHash => "cache",
            Design::MaskBased => "mask",
        }
    }

    pub fn is_keyed(self) -> bool {
        matches!(self, Design::StalledHash | Design::CachedHash)
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for Design {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Design::ALL
            .into_iter()
            .find(|d| d.cli_name() == s)
            .ok_or_else(|| {
                format!("unknown design `{s}` (expected baseline, stall, cache or mask)")
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub design: Design,
    pub hash_cycles: u32,
    pub cache_lines: usize,
    pub branch_penalty: u32,
    pub decode_to_execute_overlap: u32,
    pub scheme: Option<HashScheme>,
    pub key: Option<ObfKey>,
    pub mask: Option<InversionMask>,
    pub max_cycles: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            design: Design::Baseline,
            hash_cycles: 16,
            cache_lines: 256,
            branch_penalty: 2,
            decode_to_execute_overlap: 1,
            scheme: None,
            key: None,
            mask: None,
            max_cycles: DEFAULT_MAX_CYCLES,
        }
    }
}

impl SimConfig {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn stalled(scheme: HashScheme, key: ObfKey) -> Self {
        SimConfig {
            design: Design::StalledHash,
            scheme: Some(scheme),
            key: Some(key),
            ..Self::default()
        }
    }

    pub fn cached(scheme: HashScheme, key: ObfKey) -> Self {
        SimConfig {
            design: Design::CachedHash,
            scheme: Some(scheme),
            key: Some(key),
            ..Self::default()
        }
    }

    pub fn mask_based(mask: InversionMask) -> Self {
        SimConfig {
            design: Design::MaskBased,
            mask: Some(mask),
            ..Self::default()
        }
    }

    /// Stall charged when a branch has to wait for the hash.
    pub fn hash_stall(&self) -> u64 {
        self.hash_cycles
            .saturating_sub(self.decode_to_execute_overlap) as u64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::Config(msg.to_string()));
        if self.hash_cycles == 0 {
            return bad("hash_cycles must be at least 1");
        }
        if !self.cache_lines.is_power_of_two() {
            return bad("cache_lines must be a power of two");
        }
        match self.design {
            Design::StalledHash | Design::CachedHash => {
                if self.scheme.is_none() || self.key.is_none() {
                    return bad("keyed designs need a hash scheme and a key");
                }
            }
            Design::MaskBased if self.mask.is_none() => {
                return bad("the mask-based design needs an inversion mask");
            }
            _ => {}
        }
        Ok(())
    }
}

/// Direct-mapped, one branch per line, indexed by word address.
#[derive(Clone, Debug)]
pub struct HashCache {
    lines: Vec<Option<(u32, bool)>>,
    index_bits: u32,
}

impl HashCache {
    /// # Panics
    ///
    /// Panics unless `lines` is a power of two.
    pub fn new(lines: usize) -> Self {
        assert!(
            lines.is_power_of_two(),
            "cache lines must be a power of two"
        );
        HashCache {
            lines: vec![None; lines],
            index_bits: lines.trailing_zeros(),
        }
    }

    fn slot(&self, address: u32) -> (usize, u32) {
        let word = address >> 2;
        let index = (word as usize) & (self.lines.len() - 1);
        (index, word.checked_shr(self.index_bits).unwrap_or(0))
    }

    pub fn lookup(&self, address: u32) -> Option<bool> {
        let (index, tag) = self.slot(address);
        match self.lines[index] {
            Some((t, bit)) if t == tag => Some(bit),
            _ => None,
        }
    }

    pub fn fill(&mut self, address: u32, bit: bool) {
        let (index, tag) = self.slot(address);
        self.lines[index] = Some((tag, bit));
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    pub cycles: u64,
    pub instructions: u64,
    pub branches: u64,
    pub taken_branches: u64,
    pub stall_cycles: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub trace_digest: u64,
    pub exit_code: i32,
    pub output_bytes: Vec<u8>,
}

/// Per-address counters from [`simulate_profiled`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchStats {
    pub executions: u64,
    pub taken: u64,
    pub stall_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("trap: {trap}")]
    Trap { trap: Trap, partial: Box<SimReport> },
    #[error("cycle limit of {limit} exceeded")]
    CycleLimit { limit: u64, partial: Box<SimReport> },
}

impl SimError {
    pub fn partial(&self) -> Option<&SimReport> {
        match self {
            SimError::Config(_) => None,
            SimError::Trap { partial, .. } | SimError::CycleLimit { partial, .. } => Some(partial),
        }
    }
}

pub fn simulate(p: &Program, cfg: &SimConfig) -> Result<SimReport, SimError> {
    simulate_from(p, cfg, MachineState::new(p))
}

/// Runs from a prepared machine state, e.g. one with an input word stored.
pub fn simulate_from(
    p: &Program,
    cfg: &SimConfig,
    state: MachineState,
) -> Result<SimReport, SimError> {
    run(p, cfg, state, None)
}

pub fn simulate_profiled(
    p: &Program,
    cfg: &SimConfig,
) -> Result<(SimReport, BTreeMap<u32, BranchStats>), SimError> {
    let mut profile = BTreeMap::new();
    let report = run(p, cfg, MachineState::new(p), Some(&mut profile))?;
    Ok((report, profile))
}

fn run(
    p: &Program,
    cfg: &SimConfig,
    mut state: MachineState,
    mut profile: Option<&mut BTreeMap<u32, BranchStats>>,
) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let mut cache = (cfg.design == Design::CachedHash).then(|| HashCache::new(cfg.cache_lines));
    let stall = cfg.hash_stall();
    let penalty = cfg.branch_penalty as u64;
    let mut digest = TraceDigest::default();
    let mut r = SimReport::default();

    let finish = |r: &mut SimReport, digest: TraceDigest, state: &MachineState| {
        r.trace_digest = digest.value();
        r.exit_code = state.exit_code;
        r.output_bytes = state.output.clone();
    };

    while !state.halted {
        if r.cycles > cfg.max_cycles {
            finish(&mut r, digest, &state);
            return Err(SimError::CycleLimit {
                limit: cfg.max_cycles,
                partial: Box::new(r),
            });
        }
        let instr = match state.fetch(p) {
            Ok(i) => i,
            Err(trap) => {
                finish(&mut r, digest, &state);
                return Err(SimError::Trap {
                    trap,
                    partial: Box::new(r),
                });
            }
        };
        let mut invert = false;
        let mut branch_stall = 0;
        if instr.is_cond_branch() {
            let addr = instr.address;
            match cfg.design {
                Design::Baseline => {}
                Design::StalledHash => {
                    invert = decide(cfg, addr);
                    branch_stall = stall;
                }
                Design::CachedHash => {
                    let cache = cache.as_mut().unwrap();
                    match cache.lookup(addr) {
                        Some(bit) => {
                            invert = bit;
                            r.cache_hits += 1;
                        }
                        None => {
                            invert = decide(cfg, addr);
                            cache.fill(addr, invert);
                            r.cache_misses += 1;
                            branch_stall = stall;
                        }
                    }
                }
                Design::MaskBased => {
                    invert = cfg.mask.as_ref().unwrap().get(addr).unwrap_or(false);
                }
            }
        }
        let retired = match state.execute(instr, invert) {
            Ok(ret) => ret,
            Err(trap) => {
                finish(&mut r, digest, &state);
                return Err(SimError::Trap {
                    trap,
                    partial: Box::new(r),
                });
            }
        };
        digest.record(&retired);
        r.instructions += 1;
        r.cycles += 1 + branch_stall;
        r.stall_cycles += branch_stall;
        if let Some(taken) = retired.branch_taken {
            r.branches += 1;
            if taken {
                r.taken_branches += 1;
                r.cycles += penalty;
            }
            if let Some(profile) = profile.as_deref_mut() {
                let s = profile.entry(retired.pc).or_default();
                s.executions += 1;
                s.taken += taken as u64;
                s.stall_cycles += branch_stall;
            }
        }
    }
    finish(&mut r, digest, &state);
    Ok(r)
}

fn decide(cfg: &SimConfig, addr: u32) -> bool {
    cfg.scheme.as_ref().unwrap().decide(addr, cfg.key.unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverheadError {
    #[error("trace digest {got:#018x} differs from baseline {want:#018x}")]
    DigestMismatch { got: u64, want: u64 },
    #[error("exit code {got} differs from baseline {want}")]
    ExitMismatch { got: i32, want: i32 },
}

/// `report.cycles / baseline.cycles - 1`, refused if the two runs did not
/// compute the same thing.
pub fn overhead(report: &SimReport, baseline: &SimReport) -> Result<f64, OverheadError> {
    if report.trace_digest != baseline.trace_digest {
        return Err(OverheadError::DigestMismatch {
            got: report.trace_digest,
            want: baseline.trace_digest,
        });
    }
    if report.exit_code != baseline.exit_code {
        return Err(OverheadError::ExitMismatch {
            got: report.exit_code,
            want: baseline.exit_code,
        });
    }
    if baseline.cycles == 0 {
        return Ok(0.0);
    }
    Ok(report.cycles as f64 / baseline.cycles as f64 - 1.0)
}
