//! Line-oriented assembly dialect.
//!
//! ```text
//! # comment
//!         .text 0x0          # optional text base, must precede instructions
//!         .entry main
//! main:   addi a0, zero, 0
//! loop:   blt a0, a1, loop
//!         .data 0x10000
//! input:  .word 7
//!         .byte 1, 2, 3
//! ```

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use super::{DataSegment, InstrKind, Instruction, Opcode, Program, Reg};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: unresolved label `{label}`")]
    UnresolvedLabel { line: usize, label: String },
    #[error("line {line}: address {addr:#x} is not 4-byte aligned")]
    Misaligned { line: usize, addr: u32 },
    #[error("line {line}: label `{label}` defined twice")]
    DuplicateLabel { line: usize, label: String },
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

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Address of the first instruction unless the source sets `.text <addr>`.
    pub base: u32,
}

pub fn parse_asm(source: &str) -> Result<Program, AsmError> {
    parse_asm_with(source, &ParseOptions::default())
}

pub fn parse_asm_with(source: &str, opts: &ParseOptions) -> Result<Program, AsmError> {
    let mut asm = Assembler::new(opts.base);
    for (idx, raw) in source.lines().enumerate() {
        asm.line(idx + 1, raw)?;
    }
    asm.finish()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Text,
    Data,
}

struct Assembler {
    section: Section,
    text_base: u32,
    text_base_fixed: bool,
    text: Vec<(usize, Instruction)>,
    labels: BTreeMap<String, u32>,
    data_base: Option<u32>,
    data: Vec<u8>,
    entry: Option<(usize, String)>,
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_int(s: &str) -> Option<i64> {
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let value = if let Some(hex) = digits
        .strip_prefix("0x")
        .or_else(|| digits.strip_prefix("0X"))
    {
        i64::from_str_radix(hex, 16).ok()?
    } else if let Some(bin) = digits.strip_prefix("0b") {
        i64::from_str_radix(bin, 2).ok()?
    } else {
        if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        digits.parse::<i64>().ok()?
    };
    Some(if neg { -value } else { value })
}

fn imm_in(line: usize, s: &str, min: i64, max: i64) -> Result<i32, AsmError> {
    let v = parse_int(s).ok_or_else(|| syntax(line, format!("invalid immediate `{s}`")))?;
    if v < min || v > max {
        return Err(syntax(
            line,
            format!("immediate {v} out of range [{min}, {max}]"),
        ));
    }
    Ok(v as i32)
}

fn address(line: usize, s: &str) -> Result<u32, AsmError> {
    let v = parse_int(s).ok_or_else(|| syntax(line, format!("invalid address `{s}`")))?;
    u32::try_from(v).map_err(|_| syntax(line, format!("address `{s}` out of range")))
}

fn reg(line: usize, s: &str) -> Result<Reg, AsmError> {
    Reg::parse(s).ok_or_else(|| syntax(line, format!("unknown register `{s}`")))
}

/// `imm(reg)`, with an empty immediate meaning zero.
fn mem_operand(line: usize, s: &str) -> Result<(i32, Reg), AsmError> {
    let open = s
        .find('(')
        .ok_or_else(|| syntax(line, format!("expected `offset(reg)`, found `{s}`")))?;
    let inner = s[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| syntax(line, format!("expected `offset(reg)`, found `{s}`")))?;
    let off = s[..open].trim();
    let imm = if off.is_empty() {
        0
    } else {
        imm_in(line, off, -2048, 2047)?
    };
    Ok((imm, reg(line, inner.trim())?))
}

fn label_ref(line: usize, s: &str) -> Result<String, AsmError> {
    if is_ident(s) {
        Ok(s.to_string())
    } else {
        Err(syntax(line, format!("expected a label, found `{s}`")))
    }
}

impl Assembler {
    fn new(base: u32) -> Self {
        Assembler {
            section: Section::Text,
            text_base: base,
            text_base_fixed: false,
            text: Vec::new(),
            labels: BTreeMap::new(),
            data_base: None,
            data: Vec::new(),
            entry: None,
        }
    }

    fn here(&self) -> u32 {
        match self.section {
            Section::Text => self.text_base + 4 * self.text.len() as u32,
            Section::Data => self.data_base.unwrap_or(0) + self.data.len() as u32,
        }
    }

    fn line(&mut self, line: usize, raw: &str) -> Result<(), AsmError> {
        let code = raw.split('#').next().unwrap_or("").trim();
        let mut rest = code;
        while let Some(colon) = rest.find(':') {
            let name = rest[..colon].trim();
            if !is_ident(name) {
                return Err(syntax(line, format!("invalid label `{name}`")));
            }
            let addr = self.here();
            if self.labels.insert(name.to_string(), addr).is_some() {
                return Err(AsmError::DuplicateLabel {
                    line,
                    label: name.to_string(),
                });
            }
            rest = rest[colon + 1..].trim();
        }
        if rest.is_empty() {
            return Ok(());
        }
        let (head, operands) = match rest.find(char::is_whitespace) {
            Some(split) => (&rest[..split], rest[split..].trim()),
            None => (rest, ""),
        };
        let args: Vec<&str> = if operands.is_empty() {
            Vec::new()
        } else {
            operands.split(',').map(str::trim).collect()
        };
        if head.starts_with('.') {
            self.directive(line, head, &args)
        } else {
            self.instruction(line, head, &args)
        }
    }

    fn directive(&mut self, line: usize, name: &str, args: &[&str]) -> Result<(), AsmError> {
        match name {
            ".text" => {
                if let Some(arg) = args.first() {
                    let addr = address(line, arg)?;
                    if !self.text.is_empty() || self.text_base_fixed {
                        return Err(syntax(
                            line,
                            "`.text <addr>` must precede every instruction",
                        ));
                    }
                    if addr % 4 != 0 {
                        return Err(AsmError::Misaligned { line, addr });
                    }
                    if !self.labels.is_empty() {
                        return Err(syntax(line, "`.text <addr>` must precede every label"));
                    }
                    self.text_base = addr;
                    self.text_base_fixed = true;
                }
                self.section = Section::Text;
            }
            ".data" => {
                match (args.first(), self.data_base) {
                    (Some(arg), None) => {
                        let addr = address(line, arg)?;
                        if addr % 4 != 0 {
                            return Err(AsmError::Misaligned { line, addr });
                        }
                        self.data_base = Some(addr);
                    }
                    (Some(arg), Some(base)) => {
                        let addr = address(line, arg)?;
                        if addr != base + self.data.len() as u32 {
                            return Err(syntax(line, "data segment must be contiguous"));
                        }
                    }
                    (None, Some(_)) => {}
                    (None, None) => {
                        return Err(syntax(line, "the first `.data` needs an address"));
                    }
                }
                self.section = Section::Data;
            }
            ".byte" | ".word" => {
                if self.section != Section::Data {
                    return Err(syntax(line, format!("`{name}` outside the data section")));
                }
                if args.is_empty() {
                    return Err(syntax(line, format!("`{name}` needs at least one value")));
                }
                for arg in args {
                    if name == ".byte" {
                        let v = imm_in(line, arg, -128, 255)?;
                        self.data.push(v as u8);
                    } else {
                        let v = imm_in(line, arg, i32::MIN as i64, u32::MAX as i64)?;
                        self.data.extend_from_slice(&(v as u32).to_le_bytes());
                    }
                }
            }
            ".entry" => match args {
                [arg] => self.entry = Some((line, arg.to_string())),
                _ => return Err(syntax(line, "`.entry` takes one label or address")),
            },
            _ => return Err(syntax(line, format!("unknown directive `{name}`"))),
        }
        Ok(())
    }

    fn instruction(&mut self, line: usize, mnemonic: &str, args: &[&str]) -> Result<(), AsmError> {
        let opcode = Opcode::from_mnemonic(mnemonic).ok_or_else(|| AsmError::UnknownMnemonic {
            line,
            mnemonic: mnemonic.to_string(),
        })?;
        if self.section != Section::Text {
            return Err(syntax(line, "instruction in the data section"));
        }
        let arity = match opcode.kind() {
            InstrKind::ArithReg | InstrKind::ArithImm | InstrKind::CondBranch => 3,
            InstrKind::Load | InstrKind::Store | InstrKind::Lui | InstrKind::Auipc => 2,
            InstrKind::Jal | InstrKind::Jalr => 2,
            InstrKind::Ecall => 0,
        };
        if args.len() != arity {
            return Err(syntax(
                line,
                format!("`{mnemonic}` takes {arity} operands, found {}", args.len()),
            ));
        }
        let mut instr = Instruction {
            address: self.here(),
            opcode,
            rd: Reg::ZERO,
            rs1: Reg::ZERO,
            rs2: Reg::ZERO,
            imm: 0,
            target: None,
        };
        match opcode.kind() {
            InstrKind::ArithReg => {
                instr.rd = reg(line, args[0])?;
                instr.rs1 = reg(line, args[1])?;
                instr.rs2 = reg(line, args[2])?;
            }
            InstrKind::ArithImm => {
                instr.rd = reg(line, args[0])?;
                instr.rs1 = reg(line, args[1])?;
                instr.imm = match opcode {
                    Opcode::Slli | Opcode::Srli | Opcode::Srai => imm_in(line, args[2], 0, 31)?,
                    _ => imm_in(line, args[2], -2048, 2047)?,
                };
            }
            InstrKind::Load | InstrKind::Jalr => {
                instr.rd = reg(line, args[0])?;
                (instr.imm, instr.rs1) = mem_operand(line, args[1])?;
            }
            InstrKind::Store => {
                instr.rs2 = reg(line, args[0])?;
                (instr.imm, instr.rs1) = mem_operand(line, args[1])?;
            }
            InstrKind::Lui | InstrKind::Auipc => {
                instr.rd = reg(line, args[0])?;
                instr.imm = imm_in(line, args[1], 0, 0xF_FFFF)?;
            }
            InstrKind::Jal => {
                instr.rd = reg(line, args[0])?;
                instr.target = Some(label_ref(line, args[1])?);
            }
            InstrKind::CondBranch => {
                instr.rs1 = reg(line, args[0])?;
                instr.rs2 = reg(line, args[1])?;
                instr.target = Some(label_ref(line, args[2])?);
            }
            InstrKind::Ecall => {}
        }
        self.text.push((line, instr));
        Ok(())
    }

    fn finish(self) -> Result<Program, AsmError> {
        let text_base = self.text_base;
        let text_end = text_base + 4 * self.text.len() as u32;
        let data = DataSegment {
            base: self.data_base.unwrap_or(0),
            bytes: self.data,
        };
        if self.data_base.is_some() && data.base <= text_end && text_base <= data.end() {
            return Err(AsmError::Overlap {
                text_base,
                text_end,
                data_base: data.base,
                data_end: data.end(),
            });
        }
        let mut text = Vec::with_capacity(self.text.len());
        for (line, mut instr) in self.text {
            if let Some(label) = &instr.target {
                let addr = *self
                    .labels
                    .get(label)
                    .ok_or_else(|| AsmError::UnresolvedLabel {
                        line,
                        label: label.clone(),
                    })?;
                instr.imm = addr.wrapping_sub(instr.address) as i32;
            }
            text.push(instr);
        }
        let entry = match self.entry {
            None => text_base,
            Some((line, arg)) => {
                let addr = match parse_int(&arg) {
                    Some(_) => address(line, &arg)?,
                    None => *self
                        .labels
                        .get(&arg)
                        .ok_or(AsmError::UnresolvedLabel { line, label: arg })?,
                };
                if addr % 4 != 0 {
                    return Err(AsmError::Misaligned { line, addr });
                }
                if addr < text_base || addr > text_end {
                    return Err(syntax(line, format!("entry {addr:#x} is outside the text")));
                }
                addr
            }
        };
        Ok(Program {
            text_base,
            text,
            labels: self.labels,
            data,
            entry,
        })
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.opcode;
        let target = self.target.as_deref().unwrap_or("?");
        match op.kind() {
            InstrKind::ArithReg => write!(f, "{op} {}, {}, {}", self.rd, self.rs1, self.rs2),
            InstrKind::ArithImm => write!(f, "{op} {}, {}, {}", self.rd, self.rs1, self.imm),
            InstrKind::Load | InstrKind::Jalr => {
                write!(f, "{op} {}, {}({})", self.rd, self.imm, self.rs1)
            }
            InstrKind::Store => write!(f, "{op} {}, {}({})", self.rs2, self.imm, self.rs1),
            InstrKind::Lui | InstrKind::Auipc => write!(f, "{op} {}, {:#x}", self.rd, self.imm),
            InstrKind::Jal => write!(f, "{op} {}, {target}", self.rd),
            InstrKind::CondBranch => write!(f, "{op} {}, {}, {target}", self.rs1, self.rs2),
            InstrKind::Ecall => write!(f, "{op}"),
        }
    }
}

/// Renders a listing that [`parse_asm`] turns back into an equal program.
/// Data is always emitted as `.byte` runs.
pub fn print_asm(p: &Program) -> String {
    use std::fmt::Write;

    let mut text_labels: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    let mut data_labels: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for (name, &addr) in &p.labels {
        if addr >= p.text_base && addr <= p.text_end() {
            text_labels.entry(addr).or_default().push(name);
        } else {
            data_labels.entry(addr).or_default().push(name);
        }
    }

    let mut out = String::new();
    if p.text_base != 0 {
        let _ = writeln!(out, ".text {:#x}", p.text_base);
    }
    match text_labels.get(&p.entry).and_then(|names| names.first()) {
        Some(name) => {
            let _ = writeln!(out, ".entry {name}");
        }
        None => {
            let _ = writeln!(out, ".entry {:#x}", p.entry);
        }
    }
    let emit_labels = |out: &mut String, names: Option<&Vec<&str>>| {
        for name in names.into_iter().flatten() {
            let _ = writeln!(out, "{name}:");
        }
    };
    for instr in &p.text {
        emit_labels(&mut out, text_labels.get(&instr.address));
        let _ = writeln!(out, "    {instr}");
    }
    emit_labels(&mut out, text_labels.get(&p.text_end()));

    let data = &p.data;
    if data.base != 0 || !data.bytes.is_empty() || !data_labels.is_empty() {
        let _ = writeln!(out, ".data {:#x}", data.base);
        let mut run: Vec<String> = Vec::new();
        let flush = |out: &mut String, run: &mut Vec<String>| {
            if !run.is_empty() {
                let _ = writeln!(out, "    .byte {}", run.join(", "));
                run.clear();
            }
        };
        for (offset, byte) in data.bytes.iter().enumerate() {
            let addr = data.base + offset as u32;
            if let Some(names) = data_labels.get(&addr) {
                flush(&mut out, &mut run);
                emit_labels(&mut out, Some(names));
            }
            run.push(format!("{byte:#04x}"));
            if run.len() == 16 {
                flush(&mut out, &mut run);
            }
        }
        flush(&mut out, &mut run);
        emit_labels(&mut out, data_labels.get(&data.end()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_operands_and_address() {
        let p = parse_asm("addi a0, zero, 1\naddi a1, zero, 2\nbeq a0, a1, Ldone\nLdone: ecall\n")
            .unwrap();
        let b = &p.text()[2];
        assert_eq!(b.address, 8);
        assert_eq!(b.opcode, Opcode::Beq);
        assert_eq!(b.rs1.index(), 10);
        assert_eq!(b.rs2.index(), 11);
        assert_eq!(b.target.as_deref(), Some("Ldone"));
        assert_eq!(b.target_address(), Some(12));
    }

    #[test]
    fn empty_source() {
        let p = parse_asm("").unwrap();
        assert!(p.text().is_empty());
        assert_eq!(p.entry(), 0);
    }

    #[test]
    fn unknown_mnemonic_is_named() {
        let err = parse_asm("L: bxx a0, a1, L").unwrap_err();
        assert_eq!(
            err,
            AsmError::UnknownMnemonic {
                line: 1,
                mnemonic: "bxx".into()
            }
        );
        assert!(err.to_string().contains("bxx"));
    }

    #[test]
    fn unresolved_label() {
        let err = parse_asm("\n  beq a0, a1, nowhere\n").unwrap_err();
        assert_eq!(
            err,
            AsmError::UnresolvedLabel {
                line: 2,
                label: "nowhere".into()
            }
        );
    }

    #[test]
    fn misaligned_directives() {
        assert!(matches!(
            parse_asm(".text 0x6\naddi a0, a0, 1"),
            Err(AsmError::Misaligned { line: 1, addr: 6 })
        ));
        assert!(matches!(
            parse_asm(".data 0x1001\n.byte 1"),
            Err(AsmError::Misaligned { line: 1, .. })
        ));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let cases = [
            ("addi a0, a0", 1),
            ("nop\n", 1),
            ("\n\naddi a0, q9, 1", 3),
            ("addi a0, a0, 5000", 1),
            ("slli a0, a0, 32", 1),
            (".byte 1", 1),
            ("lw a0, 4[sp]", 1),
            (".bogus", 1),
        ];
        for (src, line) in cases {
            match parse_asm(src) {
                Err(AsmError::Syntax { line: l, .. })
                | Err(AsmError::UnknownMnemonic { line: l, .. }) => {
                    assert_eq!(l, line, "{src}")
                }
                other => panic!("{src}: {other:?}"),
            }
        }
    }

    #[test]
    fn duplicate_and_overlap() {
        assert!(matches!(
            parse_asm("a: ecall\na: ecall"),
            Err(AsmError::DuplicateLabel { line: 2, .. })
        ));
        assert!(matches!(
            parse_asm("ecall\n.data 0x4\n.byte 1"),
            Err(AsmError::Overlap { .. })
        ));
    }

    #[test]
    fn base_option_and_text_directive() {
        let p = parse_asm_with("ecall\necall", &ParseOptions { base: 0x400 }).unwrap();
        assert_eq!(p.text()[1].address, 0x404);
        let q = parse_asm(".text 0x1000\nstart: ecall").unwrap();
        assert_eq!(q.labels()["start"], 0x1000);
        assert_eq!(parse_asm(&print_asm(&q)).unwrap(), q);
    }

    #[test]
    fn single_addi_listing() {
        let p = parse_asm("addi a0, zero, 3").unwrap();
        let listing = print_asm(&p);
        assert_eq!(listing, ".entry 0x0\n    addi a0, zero, 3\n");
        assert_eq!(parse_asm(&listing).unwrap(), p);
    }

    #[test]
    fn data_round_trip() {
        let src = "\
.entry main
main: lui t0, 0x10
      lw a0, 0(t0)
      lbu a1, 4(t0)
      ecall
.data 0x10000
input: .word 0xdeadbeef, -2
bytes: .byte 1, 255, -1
tail:
";
        let p = parse_asm(src).unwrap();
        assert_eq!(p.data().base, 0x10000);
        assert_eq!(
            p.data().bytes,
            vec![0xef, 0xbe, 0xad, 0xde, 0xfe, 0xff, 0xff, 0xff, 1, 255, 255]
        );
        assert_eq!(p.input_address(), Some(0x10000));
        let listing = print_asm(&p);
        assert!(listing.contains(".data 0x10000"));
        assert_eq!(parse_asm(&listing).unwrap(), p);
    }

    #[test]
    fn comments_and_multiple_labels() {
        let p = parse_asm("# header\na: b: addi a0, a0, 1 # trailing\n\n  c:\n").unwrap();
        assert_eq!(p.labels()["a"], 0);
        assert_eq!(p.labels()["b"], 0);
        assert_eq!(p.labels()["c"], 4);
        assert_eq!(parse_asm(&print_asm(&p)).unwrap(), p);
    }

    #[test]
    fn memory_operands() {
        let p = parse_asm("sw a1, -4(sp)\nlb t0, (a0)\njalr zero, 0(ra)").unwrap();
        let sw = &p.text()[0];
        assert_eq!(
            (sw.rs2, sw.rs1, sw.imm),
            (Reg::new(11).unwrap(), Reg::SP, -4)
        );
        assert_eq!(p.text()[1].imm, 0);
        assert_eq!(p.text()[2].rs1, Reg::RA);
    }
}
