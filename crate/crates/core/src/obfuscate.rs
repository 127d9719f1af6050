//! Keyed branch inversion, its inverse, and the runtime-deobfuscation
//! rewrite that checks a mask table before every branch.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{HashScheme, ObfKey};
use crate::isa::{BranchKind, InstrKind, Instruction, LayoutError, Opcode, Program, Reg};

/// Label attached to the first byte of the runtime mask table.
pub const MASK_TABLE_LABEL: &str = "__mask_table";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskParseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: address {addr:#x} listed twice")]
    Duplicate { line: usize, addr: u32 },
    #[error("missing `# n=<count>` header")]
    MissingHeader,
    #[error("header declares {declared} entries, file has {found}")]
    CountMismatch { declared: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObfError {
    #[error("mask does not cover branch at {0:#x}")]
    MaskMissing(u32),
    #[error("mask entry {0:#x} is not a conditional branch")]
    MaskExtra(u32),
    #[error("instruction at {addr:#x} uses reserved scratch register {reg}")]
    ScratchRegister { addr: u32, reg: Reg },
    #[error(
        "instruction at {addr:#x} (`{opcode}`) depends on its own address and cannot be moved"
    )]
    PcRelative { addr: u32, opcode: Opcode },
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

/// One inversion bit per conditional branch, keyed by branch address.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InversionMask {
    entries: BTreeMap<u32, bool>,
}

impl InversionMask {
    pub fn from_entries(entries: impl IntoIterator<Item = (u32, bool)>) -> Self {
        InversionMask {
            entries: entries.into_iter().collect(),
        }
    }

    /// All-zero mask over the branches of `p`.
    pub fn identity(p: &Program) -> Self {
        Self::from_entries(p.branches().map(|b| (b.address, false)))
    }

    pub fn get(&self, address: u32) -> Option<bool> {
        self.entries.get(&address).copied()
    }

    /// `n`, the number of conditional branches.
    pub fn branch_count(&self) -> usize {
        self.entries.len()
    }

    pub fn inverted_count(&self) -> usize {
        self.entries.values().filter(|b| **b).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, bool)> + '_ {
        self.entries.iter().map(|(a, b)| (*a, *b))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that the entries are exactly the conditional branches of `p`.
    pub fn check_covers(&self, p: &Program) -> Result<(), ObfError> {
        for b in p.branches() {
            if !self.entries.contains_key(&b.address) {
                return Err(ObfError::MaskMissing(b.address));
            }
        }
        for &addr in self.entries.keys() {
            if !p
                .instruction_at(addr)
                .is_some_and(Instruction::is_cond_branch)
            {
                return Err(ObfError::MaskExtra(addr));
            }
        }
        Ok(())
    }

    pub fn covers(&self, p: &Program) -> bool {
        self.check_covers(p).is_ok()
    }

    pub fn to_mask_file(&self) -> String {
        let mut out = format!("# n={}\n", self.branch_count());
        for (addr, bit) in self.iter() {
            let _ = writeln!(out, "{addr:#010x} {}", bit as u8);
        }
        out
    }

    pub fn parse_mask_file(text: &str) -> Result<Self, MaskParseError> {
        let mut declared = None;
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(count) = comment.trim().strip_prefix("n=") {
                    let n = count
                        .trim()
                        .parse::<usize>()
                        .map_err(|_| MaskParseError::Syntax {
                            line,
                            msg: format!("bad count `{count}`"),
                        })?;
                    declared = Some(n);
                }
                continue;
            }
            let syntax = |msg: String| MaskParseError::Syntax { line, msg };
            let mut fields = trimmed.split_whitespace();
            let (Some(addr), Some(bit), None) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(syntax(format!(
                    "expected `0x<addr> <0|1>`, got `{trimmed}`"
                )));
            };
            let hex = addr
                .strip_prefix("0x")
                .ok_or_else(|| syntax(format!("address `{addr}` must start with 0x")))?;
            let addr = u32::from_str_radix(hex, 16)
                .map_err(|_| syntax(format!("bad address `{addr}`")))?;
            let bit = match bit {
                "0" => false,
                "1" => true,
                other => return Err(syntax(format!("bit must be 0 or 1, got `{other}`"))),
            };
            if entries.insert(addr, bit).is_some() {
                return Err(MaskParseError::Duplicate { line, addr });
            }
        }
        let declared = declared.ok_or(MaskParseError::MissingHeader)?;
        if declared != entries.len() {
            return Err(MaskParseError::CountMismatch {
                declared,
                found: entries.len(),
            });
        }
        Ok(InversionMask { entries })
    }
}

/// Inverts every branch whose decision bit is set and returns the bits.
/// Non-branch instructions, addresses and labels are untouched.
pub fn obfuscate(p: &Program, scheme: &HashScheme, key: ObfKey) -> (Program, InversionMask) {
    let mut entries = Vec::with_capacity(p.branch_count());
    let out = p.map_branches(|b| {
        let bit = scheme.decide(b.address, key);
        entries.push((b.address, bit));
        let kind = b.branch_kind().unwrap();
        if bit {
            kind.invert()
        } else {
            kind
        }
    });
    (out, InversionMask::from_entries(entries))
}

/// Inversion is its own inverse, so this is `obfuscate` again.
pub fn deobfuscate(p: &Program, scheme: &HashScheme, key: ObfKey) -> Program {
    obfuscate(p, scheme, key).0
}

/// Applies an explicit mask. Branches missing from it keep their opcode.
pub fn apply_mask(p: &Program, mask: &InversionMask) -> Program {
    p.map_branches(|b| {
        let kind = b.branch_kind().unwrap();
        if mask.get(b.address).unwrap_or(false) {
            kind.invert()
        } else {
            kind
        }
    })
}

/// Instructions added per branch by [`emit_runtime_deobf`].
pub fn runtime_expansion(kind: BranchKind) -> usize {
    predicate_len(kind) + 3
}

fn predicate_len(kind: BranchKind) -> usize {
    match kind {
        BranchKind::Blt | BranchKind::Bltu => 1,
        _ => 2,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuntimeDeobf {
    pub program: Program,
    pub table_base: u32,
    /// Extra static instructions per branch, by the kind it replaced.
    pub expansion: BTreeMap<BranchKind, usize>,
}

impl RuntimeDeobf {
    pub fn static_growth(&self, original: &Program) -> usize {
        self.program.text().len() - original.text().len()
    }
}

fn instr(opcode: Opcode, rd: Reg, rs1: Reg, rs2: Reg, imm: i32) -> Instruction {
    Instruction {
        address: 0,
        opcode,
        rd,
        rs1,
        rs2,
        imm,
        target: None,
    }
}

/// Replaces each conditional branch of `p` by a sequence that computes its
/// predicate into `t6`, loads the branch's mask byte into `t5`, XORs the
/// two and branches with `bne t6, zero`. The table holds one byte per
/// branch in address order and is appended to the data segment.
///
/// Run on an obfuscated program with its mask, the result behaves like
/// the plain program on an unkeyed machine.
pub fn emit_runtime_deobf(p: &Program, mask: &InversionMask) -> Result<RuntimeDeobf, ObfError> {
    mask.check_covers(p)?;
    for i in p.text() {
        if i.kind() == InstrKind::Auipc && p.branch_count() > 0 {
            return Err(ObfError::PcRelative {
                addr: i.address,
                opcode: i.opcode,
            });
        }
        for reg in [Reg::T5, Reg::T6] {
            if i.uses_reg(reg) {
                return Err(ObfError::ScratchRegister {
                    addr: i.address,
                    reg,
                });
            }
        }
    }

    let grown: usize = p
        .branches()
        .map(|b| runtime_expansion(b.branch_kind().unwrap()))
        .sum();
    let new_text_end = p.text_end() + 4 * grown as u32;

    let mut data = p.data().clone();
    let table_base = if data.bytes.is_empty() && data.base == 0 {
        data.base = (new_text_end + 0xff) & !0xff;
        data.base
    } else {
        data.end()
    };
    data.bytes.extend(mask.iter().map(|(_, bit)| bit as u8));

    let mut new_index: HashMap<u32, u32> = HashMap::new();
    let mut text = Vec::with_capacity(p.text().len() + grown);
    for (slot, i) in p.text().iter().enumerate() {
        new_index.insert(i.address, text.len() as u32);
        let Some(kind) = i.branch_kind() else {
            text.push(i.clone());
            continue;
        };
        let (a, b) = (i.rs1, i.rs2);
        let t5 = Reg::T5;
        let t6 = Reg::T6;
        match kind {
            BranchKind::Blt => text.push(instr(Opcode::Slt, t6, a, b, 0)),
            BranchKind::Bltu => text.push(instr(Opcode::Sltu, t6, a, b, 0)),
            BranchKind::Bge => {
                text.push(instr(Opcode::Slt, t6, a, b, 0));
                text.push(instr(Opcode::Xori, t6, t6, Reg::ZERO, 1));
            }
            BranchKind::Bgeu => {
                text.push(instr(Opcode::Sltu, t6, a, b, 0));
                text.push(instr(Opcode::Xori, t6, t6, Reg::ZERO, 1));
            }
            BranchKind::Beq => {
                text.push(instr(Opcode::Xor, t6, a, b, 0));
                text.push(instr(Opcode::Sltiu, t6, t6, Reg::ZERO, 1));
            }
            BranchKind::Bne => {
                text.push(instr(Opcode::Xor, t6, a, b, 0));
                text.push(instr(Opcode::Sltu, t6, Reg::ZERO, t6, 0));
            }
        }
        let entry = table_base + mask_rank(mask, slot, p) as u32;
        let lo = ((entry << 20) as i32) >> 20;
        let hi = (entry.wrapping_sub(lo as u32) >> 12) as i32;
        text.push(instr(Opcode::Lui, t5, Reg::ZERO, Reg::ZERO, hi));
        text.push(instr(Opcode::Lbu, t5, t5, Reg::ZERO, lo));
        text.push(instr(Opcode::Xor, t6, t6, t5, 0));
        text.push(Instruction {
            opcode: Opcode::Bne,
            rs1: t6,
            rs2: Reg::ZERO,
            ..i.clone()
        });
    }

    let relocate = |addr: u32| -> u32 {
        if addr == p.text_end() {
            p.text_base() + 4 * text.len() as u32
        } else {
            p.text_base() + 4 * new_index[&addr]
        }
    };
    let mut labels: BTreeMap<String, u32> = p
        .labels()
        .iter()
        .map(|(name, &addr)| {
            let in_text = addr >= p.text_base() && addr <= p.text_end();
            (name.clone(), if in_text { relocate(addr) } else { addr })
        })
        .collect();
    if !mask.is_empty() {
        labels.insert(MASK_TABLE_LABEL.to_string(), table_base);
    }
    let entry = relocate(p.entry());

    let expansion = BranchKind::ALL
        .iter()
        .map(|&k| (k, runtime_expansion(k)))
        .collect();
    let program = Program::from_parts(p.text_base(), text, labels, data, entry)?;
    Ok(RuntimeDeobf {
        program,
        table_base,
        expansion,
    })
}

/// Position of the branch at text slot `slot` among all branches.
fn mask_rank(mask: &InversionMask, slot: usize, p: &Program) -> usize {
    let addr = p.text()[slot].address;
    mask.entries.range(..addr).count()
}
