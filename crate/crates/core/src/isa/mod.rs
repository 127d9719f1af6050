//! The RV32I subset used throughout the toolchain.
//!
//! Programs are kept at the assembly level: every instruction carries its
//! byte address and, for branches and `jal`, the label it targets. There is
//! no binary encoding; the simulator executes [`Instruction`] values directly.

mod asm;
mod exec;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use asm::{parse_asm, parse_asm_with, print_asm, AsmError, ParseOptions};
pub use exec::{MachineState, Retired, TraceDigest, Trap, STACK_SIZE, STACK_TOP};

/// Index of an integer register, `x0..=x31`.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Reg(u8);

const ABI_NAMES: [&str; 32] = [
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3", "a4",
    "a5", "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "t3", "t4",
    "t5", "t6",
];

impl Reg {
    pub const ZERO: Reg = Reg(0);
    pub const RA: Reg = Reg(1);
    pub const SP: Reg = Reg(2);
    pub const A0: Reg = Reg(10);
    pub const A7: Reg = Reg(17);
    pub const T5: Reg = Reg(30);
    pub const T6: Reg = Reg(31);

    /// Returns `None` for indices above 31.
    pub fn new(index: u8) -> Option<Reg> {
        (index < 32).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn abi_name(self) -> &'static str {
        ABI_NAMES[self.index()]
    }

    /// Accepts `x0..x31`, the ABI names and `fp` (alias of `s0`).
    pub fn parse(name: &str) -> Option<Reg> {
        if let Some(num) = name.strip_prefix('x') {
            if !num.is_empty() && num.chars().all(|c| c.is_ascii_digit()) {
                return num.parse::<u8>().ok().and_then(Reg::new);
            }
        }
        if name == "fp" {
            return Some(Reg(8));
        }
        ABI_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| Reg(i as u8))
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abi_name())
    }
}

/// Instruction format class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InstrKind {
    ArithReg,
    ArithImm,
    Load,
    Store,
    Lui,
    Auipc,
    Jal,
    Jalr,
    CondBranch,
    Ecall,
}

macro_rules! opcodes {
    ($($variant:ident => $mnemonic:literal, $kind:ident;)*) => {
        /// Every mnemonic of the supported subset.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum Opcode {
            $($variant,)*
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$variant,)*];

            pub fn mnemonic(self) -> &'static str {
                match self {
                    $(Opcode::$variant => $mnemonic,)*
                }
            }

            pub fn kind(self) -> InstrKind {
                match self {
                    $(Opcode::$variant => InstrKind::$kind,)*
                }
            }

            pub fn from_mnemonic(name: &str) -> Option<Opcode> {
                match name {
                    $($mnemonic => Some(Opcode::$variant),)*
                    _ => None,
                }
            }
        }
    };
}

opcodes! {
    Add => "add", ArithReg;
    Sub => "sub", ArithReg;
    And => "and", ArithReg;
    Or => "or", ArithReg;
    Xor => "xor", ArithReg;
    Slt => "slt", ArithReg;
    Sltu => "sltu", ArithReg;
    Slli => "slli", ArithImm;
    Srli => "srli", ArithImm;
    Srai => "srai", ArithImm;
    Addi => "addi", ArithImm;
    Andi => "andi", ArithImm;
    Ori => "ori", ArithImm;
    Xori => "xori", ArithImm;
    Slti => "slti", ArithImm;
    Sltiu => "sltiu", ArithImm;
    Lw => "lw", Load;
    Lb => "lb", Load;
    Lbu => "lbu", Load;
    Sw => "sw", Store;
    Sb => "sb", Store;
    Lui => "lui", Lui;
    Auipc => "auipc", Auipc;
    Jal => "jal", Jal;
    Jalr => "jalr", Jalr;
    Beq => "beq", CondBranch;
    Bne => "bne", CondBranch;
    Blt => "blt", CondBranch;
    Bge => "bge", CondBranch;
    Bltu => "bltu", CondBranch;
    Bgeu => "bgeu", CondBranch;
    Ecall => "ecall", Ecall;
}

impl Opcode {
    pub fn index(self) -> usize {
        Opcode::ALL.iter().position(|o| *o == self).unwrap()
    }

    pub fn branch_kind(self) -> Option<BranchKind> {
        BranchKind::ALL.iter().copied().find(|b| b.opcode() == self)
    }

    pub fn writes_rd(self) -> bool {
        !matches!(
            self.kind(),
            InstrKind::Store | InstrKind::CondBranch | InstrKind::Ecall
        )
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// The six conditional branches. Inversion pairs each with its logical
/// negation: `beq/bne`, `blt/bge`, `bltu/bgeu`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BranchKind {
    Beq,
    Bne,
    Blt,
    Bge,
    Bltu,
    Bgeu,
}

impl BranchKind {
    pub const ALL: [BranchKind; 6] = [
        BranchKind::Beq,
        BranchKind::Bne,
        BranchKind::Blt,
        BranchKind::Bge,
        BranchKind::Bltu,
        BranchKind::Bgeu,
    ];

    pub fn invert(self) -> BranchKind {
        match self {
            BranchKind::Beq => BranchKind::Bne,
            BranchKind::Bne => BranchKind::Beq,
            BranchKind::Blt => BranchKind::Bge,
            BranchKind::Bge => BranchKind::Blt,
            BranchKind::Bltu => BranchKind::Bgeu,
            BranchKind::Bgeu => BranchKind::Bltu,
        }
    }

    /// Branch condition per the base ISA.
    pub fn taken(self, lhs: u32, rhs: u32) -> bool {
        match self {
            BranchKind::Beq => lhs == rhs,
            BranchKind::Bne => lhs != rhs,
            BranchKind::Blt => (lhs as i32) < (rhs as i32),
            BranchKind::Bge => (lhs as i32) >= (rhs as i32),
            BranchKind::Bltu => lhs < rhs,
            BranchKind::Bgeu => lhs >= rhs,
        }
    }

    pub fn opcode(self) -> Opcode {
        match self {
            BranchKind::Beq => Opcode::Beq,
            BranchKind::Bne => Opcode::Bne,
            BranchKind::Blt => Opcode::Blt,
            BranchKind::Bge => Opcode::Bge,
            BranchKind::Bltu => Opcode::Bltu,
            BranchKind::Bgeu => Opcode::Bgeu,
        }
    }
}

/// One addressed instruction. Operand fields that the format does not use
/// are zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub address: u32,
    pub opcode: Opcode,
    pub rd: Reg,
    pub rs1: Reg,
    pub rs2: Reg,
    /// Sign-extended immediate. For branches and `jal` this is the resolved
    /// pc-relative byte offset of `target`; for `lui`/`auipc` it is the
    /// 20-bit upper immediate before shifting.
    pub imm: i32,
    pub target: Option<String>,
}

impl Instruction {
    pub fn kind(&self) -> InstrKind {
        self.opcode.kind()
    }

    pub fn is_cond_branch(&self) -> bool {
        self.kind() == InstrKind::CondBranch
    }

    pub fn branch_kind(&self) -> Option<BranchKind> {
        self.opcode.branch_kind()
    }

    /// Absolute target for branches and `jal`.
    pub fn target_address(&self) -> Option<u32> {
        match self.kind() {
            InstrKind::CondBranch | InstrKind::Jal => {
                Some(self.address.wrapping_add(self.imm as u32))
            }
            _ => None,
        }
    }

    /// Registers the instruction reads, in `(rs1, rs2)` order.
    pub fn sources(&self) -> (Option<Reg>, Option<Reg>) {
        match self.kind() {
            InstrKind::ArithReg | InstrKind::Store | InstrKind::CondBranch => {
                (Some(self.rs1), Some(self.rs2))
            }
            InstrKind::ArithImm | InstrKind::Load | InstrKind::Jalr => (Some(self.rs1), None),
            InstrKind::Lui | InstrKind::Auipc | InstrKind::Jal | InstrKind::Ecall => (None, None),
        }
    }

    pub fn dest(&self) -> Option<Reg> {
        self.opcode.writes_rd().then_some(self.rd)
    }

    /// `true` if the instruction names `reg` in any operand slot.
    pub fn uses_reg(&self, reg: Reg) -> bool {
        let (a, b) = self.sources();
        a == Some(reg) || b == Some(reg) || self.dest() == Some(reg)
    }
}

/// Swaps a conditional branch for its negation; operands, target and
/// address are untouched.
///
/// # Panics
///
/// Panics if `instr` is not a conditional branch.
pub fn invert_branch(instr: &Instruction) -> Instruction {
    let kind = instr
        .branch_kind()
        .unwrap_or_else(|| panic!("invert_branch called on `{}`", instr.opcode));
    Instruction {
        opcode: kind.invert().opcode(),
        ..instr.clone()
    }
}

/// Initialised data, placed at `base`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DataSegment {
    pub base: u32,
    pub bytes: Vec<u8>,
}

impl DataSegment {
    pub fn end(&self) -> u32 {
        self.base.wrapping_add(self.bytes.len() as u32)
    }
}

/// An assembled program. Immutable once built; construct it with
/// [`parse_asm`] or rewrite an existing one with the opcode-only helpers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    text_base: u32,
    text: Vec<Instruction>,
    labels: BTreeMap<String, u32>,
    data: DataSegment,
    entry: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("text base {0:#x} is not 4-byte aligned")]
    Misaligned(u32),
    #[error("entry {0:#x} is outside the text")]
    EntryOutOfRange(u32),
    #[error(
        "data segment {data_base:#x}..{data_end:#x} overlaps text {text_base:#x}..{text_end:#x}"
    )]
    Overlap {
        text_base: u32,
        text_end: u32,
        data_base: u32,
        data_end: u32,
    },
}

/// Label looked up by the attack harness to place its input word.
pub const INPUT_LABEL: &str = "input";

impl Program {
    /// Lays `text` out from `text_base` (instruction addresses are
    /// reassigned) and resolves every `target` against `labels`.
    pub fn from_parts(
        text_base: u32,
        mut text: Vec<Instruction>,
        labels: BTreeMap<String, u32>,
        data: DataSegment,
        entry: u32,
    ) -> Result<Program, LayoutError> {
        if !text_base.is_multiple_of(4) {
            return Err(LayoutError::Misaligned(text_base));
        }
        for (i, instr) in text.iter_mut().enumerate() {
            instr.address = text_base + 4 * i as u32;
            if let Some(label) = &instr.target {
                let addr = labels
                    .get(label)
                    .ok_or_else(|| LayoutError::UnresolvedLabel(label.clone()))?;
                instr.imm = addr.wrapping_sub(instr.address) as i32;
            }
        }
        let text_end = text_base + 4 * text.len() as u32;
        if !entry.is_multiple_of(4) || entry < text_base || entry > text_end {
            return Err(LayoutError::EntryOutOfRange(entry));
        }
        let has_data = data.base != 0 || !data.bytes.is_empty();
        if has_data && data.base <= text_end && text_base <= data.end() {
            return Err(LayoutError::Overlap {
                text_base,
                text_end,
                data_base: data.base,
                data_end: data.end(),
            });
        }
        Ok(Program {
            text_base,
            text,
            labels,
            data,
            entry,
        })
    }

    pub fn text(&self) -> &[Instruction] {
        &self.text
    }

    pub fn text_base(&self) -> u32 {
        self.text_base
    }

    /// One past the last instruction.
    pub fn text_end(&self) -> u32 {
        self.text_base + 4 * self.text.len() as u32
    }

    pub fn labels(&self) -> &BTreeMap<String, u32> {
        &self.labels
    }

    pub fn data(&self) -> &DataSegment {
        &self.data
    }

    pub fn entry(&self) -> u32 {
        self.entry
    }

    pub fn instruction_at(&self, address: u32) -> Option<&Instruction> {
        if address < self.text_base || !address.is_multiple_of(4) {
            return None;
        }
        self.text.get(((address - self.text_base) / 4) as usize)
    }

    pub fn branches(&self) -> impl Iterator<Item = &Instruction> {
        self.text.iter().filter(|i| i.is_cond_branch())
    }

    pub fn branch_count(&self) -> usize {
        self.branches().count()
    }

    /// Where the harness writes the input word: the `input` label if the
    /// program defines one.
    pub fn input_address(&self) -> Option<u32> {
        self.labels.get(INPUT_LABEL).copied()
    }

    /// Rewrites conditional-branch opcodes. `f` is called once per branch
    /// and must return another branch opcode; every other instruction is
    /// copied unchanged, so addresses, labels and topology are preserved.
    ///
    /// # Panics
    ///
    /// Panics if `f` returns an opcode that is not a conditional branch.
    pub fn map_branches(&self, mut f: impl FnMut(&Instruction) -> BranchKind) -> Program {
        let text = self
            .text
            .iter()
            .map(|i| {
                if i.is_cond_branch() {
                    Instruction {
                        opcode: f(i).opcode(),
                        ..i.clone()
                    }
                } else {
                    i.clone()
                }
            })
            .collect();
        Program {
            text,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOUNDARY: [u32; 6] = [
        0,
        1,
        u32::MAX,
        i32::MIN as u32,
        i32::MAX as u32,
        u32::MAX - 1,
    ];

    #[test]
    fn inversion_is_an_involution() {
        for b in BranchKind::ALL {
            assert_eq!(b.invert().invert(), b);
            assert_ne!(b.invert(), b);
        }
    }

    #[test]
    fn inversion_pairs() {
        assert_eq!(BranchKind::Beq.invert(), BranchKind::Bne);
        assert_eq!(BranchKind::Blt.invert(), BranchKind::Bge);
        assert_eq!(BranchKind::Bltu.invert(), BranchKind::Bgeu);
    }

    #[test]
    fn inverted_branch_negates_condition_on_boundaries() {
        for b in BranchKind::ALL {
            for &x in &BOUNDARY {
                for &y in &BOUNDARY {
                    assert_eq!(
                        b.taken(x, y),
                        !b.invert().taken(x, y),
                        "{b:?} {x:#x} {y:#x}"
                    );
                }
            }
        }
    }

    #[test]
    fn signed_versus_unsigned_compare() {
        let minus_one = -1i32 as u32;
        assert!(BranchKind::Blt.taken(minus_one, 0));
        assert!(!BranchKind::Bltu.taken(minus_one, 0));
    }

    #[test]
    fn invert_branch_keeps_operands() {
        let b = Instruction {
            address: 8,
            opcode: Opcode::Bltu,
            rd: Reg::ZERO,
            rs1: Reg::A0,
            rs2: Reg::new(11).unwrap(),
            imm: -8,
            target: Some("loop".into()),
        };
        let inv = invert_branch(&b);
        assert_eq!(inv.opcode, Opcode::Bgeu);
        assert_eq!(
            Instruction {
                opcode: b.opcode,
                ..inv.clone()
            },
            b
        );
        assert_eq!(invert_branch(&inv), b);
    }

    #[test]
    #[should_panic]
    fn invert_branch_rejects_non_branch() {
        let i = Instruction {
            address: 0,
            opcode: Opcode::Addi,
            rd: Reg::A0,
            rs1: Reg::ZERO,
            rs2: Reg::ZERO,
            imm: 1,
            target: None,
        };
        invert_branch(&i);
    }

    #[test]
    fn register_names() {
        assert_eq!(Reg::parse("a0"), Some(Reg::A0));
        assert_eq!(Reg::parse("x31"), Some(Reg::T6));
        assert_eq!(Reg::parse("fp"), Reg::parse("s0"));
        assert_eq!(Reg::parse("x32"), None);
        assert_eq!(Reg::parse("q1"), None);
        for i in 0..32u8 {
            let r = Reg::new(i).unwrap();
            assert_eq!(Reg::parse(r.abi_name()), Some(r));
        }
    }

    #[test]
    fn opcode_table_is_consistent() {
        for (i, op) in Opcode::ALL.iter().enumerate() {
            assert_eq!(op.index(), i);
            assert_eq!(Opcode::from_mnemonic(op.mnemonic()), Some(*op));
        }
        let branches = Opcode::ALL
            .iter()
            .filter(|o| o.kind() == InstrKind::CondBranch)
            .count();
        assert_eq!(branches, 6);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn inversion_negates_condition(kind in 0usize..6, x in any::<u32>(), y in any::<u32>()) {
            let b = BranchKind::ALL[kind];
            prop_assert_eq!(b.taken(x, y), !b.invert().taken(x, y));
        }
    }
}
