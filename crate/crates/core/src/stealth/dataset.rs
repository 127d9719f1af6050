//! Branch samples taken from plain and obfuscated programs.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cfg::branch_windows;
use super::StealthError;
use crate::hash::{HashScheme, ObfKey};
use crate::isa::{Instruction, Opcode, Program, Reg};
use crate::obfuscate::obfuscate;

/// Fewest programs that still allow a split by program.
pub const MIN_PROGRAMS: usize = 4;

/// Operand fields of one window slot. Fields the format does not read or
/// write are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowRecord {
    pub opcode: Opcode,
    pub rs1: Option<Reg>,
    pub rs2: Option<Reg>,
    pub rd: Option<Reg>,
}

impl From<&Instruction> for WindowRecord {
    fn from(i: &Instruction) -> Self {
        let (rs1, rs2) = i.sources();
        WindowRecord {
            opcode: i.opcode,
            rs1,
            rs2,
            rd: i.dest(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BbblSample {
    pub program_id: String,
    pub branch_address: u32,
    /// Program order; the last record is the branch.
    pub window: Vec<WindowRecord>,
    /// Target below the branch.
    pub br_up: bool,
    /// The branch was inverted.
    pub label: bool,
}

impl BbblSample {
    pub fn branch(&self) -> &WindowRecord {
        self.window.last().expect("window is never empty")
    }
}

fn samples_of(id: &str, p: &Program, size: usize, label: impl Fn(u32) -> bool) -> Vec<BbblSample> {
    branch_windows(p, size)
        .into_iter()
        .map(|range| {
            let branch = &p.text()[range.end - 1];
            let target = branch.target_address().expect("branch has a target");
            BbblSample {
                program_id: id.to_string(),
                branch_address: branch.address,
                window: p.text()[range].iter().map(WindowRecord::from).collect(),
                br_up: target < branch.address,
                label: label(branch.address),
            }
        })
        .collect()
}

/// Per program: one sample per branch of the obfuscated program, labelled
/// with its mask bit, then one per branch of the plain program, labelled 0.
pub fn build_dataset(
    corpus: &[(String, Program)],
    key: ObfKey,
    scheme: &HashScheme,
    window: usize,
) -> Result<Vec<BbblSample>, StealthError> {
    if window == 0 {
        return Err(StealthError::WindowSize);
    }
    if corpus.len() < MIN_PROGRAMS {
        return Err(StealthError::TooFewPrograms(corpus.len()));
    }
    let per_program: Vec<Vec<BbblSample>> = corpus
        .par_iter()
        .map(|(id, plain)| {
            let (obf, mask) = obfuscate(plain, scheme, key);
            let mut out = samples_of(id, &obf, window, |a| mask.get(a).unwrap_or(false));
            out.extend(samples_of(id, plain, window, |_| false));
            out
        })
        .collect();
    Ok(per_program.into_iter().flatten().collect())
}

/// Replaces every label with a fair coin drawn from `seed`, independent of
/// the features. Used to measure what a classifier finds in pure noise.
pub fn relabel_with_coin(samples: &mut [BbblSample], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in samples {
        s.label = rng.gen_bool(0.5);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("dataset line {line}: {msg}")]
pub struct DatasetParseError {
    pub line: usize,
    pub msg: String,
}

struct Field(Option<Reg>);

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(r) => write!(f, "{r}"),
            None => f.write_str("-"),
        }
    }
}

/// `program_id,branch_addr,br_up,label,window:[op;rs1;rs2;rd|...]`, one
/// sample per line. Absent operands are written `-`.
pub fn write_dataset(samples: &[BbblSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let window: Vec<String> = s
            .window
            .iter()
            .map(|r| {
                format!(
                    "{};{};{};{}",
                    r.opcode,
                    Field(r.rs1),
                    Field(r.rs2),
                    Field(r.rd)
                )
            })
            .collect();
        let _ = writeln!(
            out,
            "{},{:#x},{},{},window:[{}]",
            s.program_id,
            s.branch_address,
            s.br_up as u8,
            s.label as u8,
            window.join("|")
        );
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<Vec<BbblSample>, DatasetParseError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DatasetParseError { line, msg };
        let fields: Vec<&str> = raw.trim().splitn(5, ',').collect();
        let [id, addr, br_up, label, window] = fields[..] else {
            return Err(err("expected 5 comma-separated fields".into()));
        };
        let bit = |s: &str, what: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(err(format!("{what} must be 0 or 1, got `{s}`"))),
        };
        let addr = addr
            .strip_prefix("0x")
            .and_then(|h| u32::from_str_radix(h, 16).ok())
            .ok_or_else(|| err(format!("bad branch address `{addr}`")))?;
        let inner = window
            .strip_prefix("window:[")
            .and_then(|w| w.strip_suffix(']'))
            .ok_or_else(|| err("window must look like `window:[...]`".into()))?;
        let mut records = Vec::new();
        for slot in inner.split('|') {
            let parts: Vec<&str> = slot.split(';').collect();
            let [op, rs1, rs2, rd] = parts[..] else {
                return Err(err(format!("window slot `{slot}` needs 4 fields")));
            };
            let opcode =
                Opcode::from_mnemonic(op).ok_or_else(|| err(format!("unknown opcode `{op}`")))?;
            let reg = |s: &str| -> Result<Option<Reg>, DatasetParseError> {
                if s == "-" {
                    Ok(None)
                } else {
                    Reg::parse(s)
                        .map(Some)
                        .ok_or_else(|| err(format!("unknown register `{s}`")))
                }
            };
            records.push(WindowRecord {
                opcode,
                rs1: reg(rs1)?,
                rs2: reg(rs2)?,
                rd: reg(rd)?,
            });
        }
        if !records
            .last()
            .is_some_and(|r| r.opcode.branch_kind().is_some())
        {
            return Err(err("window must end with a conditional branch".into()));
        }
        out.push(BbblSample {
            program_id: id.to_string(),
            branch_address: addr,
            window: records,
            br_up: bit(br_up, "br_up")?,
            label: bit(label, "label")?,
        });
    }
    Ok(out)
}
