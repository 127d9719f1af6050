use std::collections::HashMap;

use thiserror::Error;

use super::{InstrKind, Instruction, Opcode, Program, Reg};
use crate::hash::splitmix64;

/// Initial stack pointer. The stack occupies `[STACK_TOP - STACK_SIZE, STACK_TOP)`.
pub const STACK_TOP: u32 = 0x8000_0000;
pub const STACK_SIZE: u32 = 0x1_0000;

const SYS_WRITE_BYTE: u32 = 64;
const SYS_EXIT: u32 = 93;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Trap {
    #[error("fetch from non-text address {pc:#x}")]
    Fetch { pc: u32 },
    #[error("pc {pc:#x}: access to unmapped address {addr:#x}")]
    Unmapped { pc: u32, addr: u32 },
    #[error("pc {pc:#x}: misaligned word access at {addr:#x}")]
    Misaligned { pc: u32, addr: u32 },
    #[error("pc {pc:#x}: unsupported ecall {number}")]
    Syscall { pc: u32, number: u32 },
    #[error("machine already halted")]
    Halted,
}

/// Architectural effect of one retired instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retired {
    pub pc: u32,
    pub next_pc: u32,
    /// Register write, omitted for `rd = x0`.
    pub write: Option<(Reg, u32)>,
    /// Final direction of a conditional branch.
    pub branch_taken: Option<bool>,
}

/// Registers, sparse memory and I/O of one running program.
#[derive(Debug, Clone)]
pub struct MachineState {
    pub pc: u32,
    regs: [u32; 32],
    mem: HashMap<u32, u8>,
    regions: Vec<(u32, u32)>,
    pub halted: bool,
    pub exit_code: i32,
    pub output: Vec<u8>,
}

impl MachineState {
    /// Fresh state at the program entry with the data segment loaded and
    /// `sp` at [`STACK_TOP`].
    pub fn new(program: &Program) -> Self {
        let data = program.data();
        let mem = data
            .bytes
            .iter()
            .enumerate()
            .map(|(i, b)| (data.base + i as u32, *b))
            .collect();
        let mut regs = [0u32; 32];
        regs[Reg::SP.index()] = STACK_TOP;
        MachineState {
            pc: program.entry(),
            regs,
            mem,
            regions: vec![(data.base, data.end()), (STACK_TOP - STACK_SIZE, STACK_TOP)],
            halted: false,
            exit_code: 0,
            output: Vec::new(),
        }
    }

    pub fn reg(&self, r: Reg) -> u32 {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, value: u32) {
        if r != Reg::ZERO {
            self.regs[r.index()] = value;
        }
    }

    pub fn regs(&self) -> &[u32; 32] {
        &self.regs
    }

    fn check(&self, addr: u32, len: u32) -> Result<(), Trap> {
        let end = addr as u64 + len as u64;
        let mapped = self
            .regions
            .iter()
            .any(|&(lo, hi)| addr >= lo && end <= hi as u64);
        if mapped {
            Ok(())
        } else {
            Err(Trap::Unmapped { pc: self.pc, addr })
        }
    }

    pub fn load(&self, addr: u32, len: u32) -> Result<u32, Trap> {
        if len == 4 && !addr.is_multiple_of(4) {
            return Err(Trap::Misaligned { pc: self.pc, addr });
        }
        self.check(addr, len)?;
        Ok((0..len).fold(0u32, |acc, i| {
            let byte = self.mem.get(&(addr + i)).copied().unwrap_or(0);
            acc | (byte as u32) << (8 * i)
        }))
    }

    pub fn store(&mut self, addr: u32, len: u32, value: u32) -> Result<(), Trap> {
        if len == 4 && !addr.is_multiple_of(4) {
            return Err(Trap::Misaligned { pc: self.pc, addr });
        }
        self.check(addr, len)?;
        for i in 0..len {
            self.mem.insert(addr + i, (value >> (8 * i)) as u8);
        }
        Ok(())
    }

    pub fn fetch<'p>(&self, program: &'p Program) -> Result<&'p Instruction, Trap> {
        program
            .instruction_at(self.pc)
            .ok_or(Trap::Fetch { pc: self.pc })
    }

    pub fn step(&mut self, program: &Program) -> Result<Retired, Trap> {
        let instr = self.fetch(program)?;
        self.execute(instr, false)
    }

    /// Executes `instr` at the current pc. With `invert` set, a conditional
    /// branch goes the opposite way of its condition.
    pub fn execute(&mut self, instr: &Instruction, invert: bool) -> Result<Retired, Trap> {
        if self.halted {
            return Err(Trap::Halted);
        }
        let pc = self.pc;
        let rs1 = self.reg(instr.rs1);
        let rs2 = self.reg(instr.rs2);
        let imm = instr.imm as u32;
        let mut next_pc = pc.wrapping_add(4);
        let mut value = None;
        let mut branch_taken = None;

        match instr.opcode {
            Opcode::Add => value = Some(rs1.wrapping_add(rs2)),
            Opcode::Sub => value = Some(rs1.wrapping_sub(rs2)),
            Opcode::And => value = Some(rs1 & rs2),
            Opcode::Or => value = Some(rs1 | rs2),
            Opcode::Xor => value = Some(rs1 ^ rs2),
            Opcode::Slt => value = Some(((rs1 as i32) < (rs2 as i32)) as u32),
            Opcode::Sltu => value = Some((rs1 < rs2) as u32),
            Opcode::Slli => value = Some(rs1 << (imm & 31)),
            Opcode::Srli => value = Some(rs1 >> (imm & 31)),
            Opcode::Srai => value = Some(((rs1 as i32) >> (imm & 31)) as u32),
            Opcode::Addi => value = Some(rs1.wrapping_add(imm)),
            Opcode::Andi => value = Some(rs1 & imm),
            Opcode::Ori => value = Some(rs1 | imm),
            Opcode::Xori => value = Some(rs1 ^ imm),
            Opcode::Slti => value = Some(((rs1 as i32) < instr.imm) as u32),
            Opcode::Sltiu => value = Some((rs1 < imm) as u32),
            Opcode::Lw => value = Some(self.load(rs1.wrapping_add(imm), 4)?),
            Opcode::Lb => {
                value = Some(self.load(rs1.wrapping_add(imm), 1)? as u8 as i8 as i32 as u32)
            }
            Opcode::Lbu => value = Some(self.load(rs1.wrapping_add(imm), 1)?),
            Opcode::Sw => self.store(rs1.wrapping_add(imm), 4, rs2)?,
            Opcode::Sb => self.store(rs1.wrapping_add(imm), 1, rs2)?,
            Opcode::Lui => value = Some(imm << 12),
            Opcode::Auipc => value = Some(pc.wrapping_add(imm << 12)),
            Opcode::Jal => {
                value = Some(pc.wrapping_add(4));
                next_pc = pc.wrapping_add(imm);
            }
            Opcode::Jalr => {
                value = Some(pc.wrapping_add(4));
                next_pc = rs1.wrapping_add(imm) & !1;
            }
            Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge | Opcode::Bltu | Opcode::Bgeu => {
                let kind = instr.branch_kind().expect("branch opcode");
                let taken = kind.taken(rs1, rs2) ^ invert;
                if taken {
                    next_pc = pc.wrapping_add(imm);
                }
                branch_taken = Some(taken);
            }
            Opcode::Ecall => {
                let number = self.reg(Reg::A7);
                let a0 = self.reg(Reg::A0);
                match number {
                    SYS_EXIT => {
                        self.halted = true;
                        self.exit_code = a0 as i32;
                    }
                    SYS_WRITE_BYTE => self.output.push(a0 as u8),
                    _ => return Err(Trap::Syscall { pc, number }),
                }
            }
        }

        debug_assert_eq!(
            value.is_some(),
            instr.kind() != InstrKind::Store
                && instr.kind() != InstrKind::CondBranch
                && instr.kind() != InstrKind::Ecall
        );
        let write = match value {
            Some(v) if instr.rd != Reg::ZERO => {
                self.regs[instr.rd.index()] = v;
                Some((instr.rd, v))
            }
            _ => None,
        };
        self.pc = next_pc;
        Ok(Retired {
            pc,
            next_pc,
            write,
            branch_taken,
        })
    }
}

/// Rolling 64-bit hash over `(pc, rd, written value)` of every retired
/// instruction. Instructions without a register write contribute `rd = 0,
/// value = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceDigest(u64);

impl Default for TraceDigest {
    fn default() -> Self {
        TraceDigest(0x6a09_e667_f3bc_c908)
    }
}

impl TraceDigest {
    pub fn record(&mut self, r: &Retired) {
        let (rd, value) = r
            .write
            .map(|(reg, v)| (reg.index() as u64, v as u64))
            .unwrap_or((0, 0));
        self.0 = splitmix64(self.0 ^ ((r.pc as u64) << 8 | rd));
        self.0 = splitmix64(self.0 ^ value);
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::parse_asm;

    fn run(src: &str) -> MachineState {
        let p = parse_asm(src).unwrap();
        let mut s = MachineState::new(&p);
        for _ in 0..10_000 {
            if s.halted {
                break;
            }
            s.step(&p).unwrap();
        }
        s
    }

    #[test]
    fn beq_zero_zero_is_taken() {
        let p = parse_asm("beq x0, x0, L\naddi a0, a0, 1\nL: ecall").unwrap();
        let mut s = MachineState::new(&p);
        let r = s.step(&p).unwrap();
        assert_eq!(r.branch_taken, Some(true));
        assert_eq!(s.pc, 8);
    }

    #[test]
    fn signed_and_unsigned_branches() {
        let src =
            |op| format!("addi a0, zero, -1\naddi a1, zero, 0\n{op} a0, a1, T\nF: ecall\nT: ecall");
        let p = parse_asm(&src("blt")).unwrap();
        let mut s = MachineState::new(&p);
        s.step(&p).unwrap();
        s.step(&p).unwrap();
        assert_eq!(s.step(&p).unwrap().branch_taken, Some(true));
        let p = parse_asm(&src("bltu")).unwrap();
        let mut s = MachineState::new(&p);
        s.step(&p).unwrap();
        s.step(&p).unwrap();
        assert_eq!(s.step(&p).unwrap().branch_taken, Some(false));
    }

    #[test]
    fn x0_stays_zero() {
        let s = run("addi zero, zero, 5\nlui x0, 0x1\njal zero, E\nE: addi a7, zero, 93\necall");
        assert_eq!(s.regs()[0], 0);
        assert!(s.halted);
    }

    #[test]
    fn exit_and_output() {
        let s = run("addi a0, zero, 72\naddi a7, zero, 64\necall\naddi a0, zero, 7\naddi a7, zero, 93\necall");
        assert_eq!(s.output, b"H");
        assert_eq!(s.exit_code, 7);
    }

    #[test]
    fn loads_stores_and_stack() {
        let s = run("\
lui t0, 0x10
lw a1, 0(t0)
lb a2, 4(t0)
lbu a3, 4(t0)
addi sp, sp, -4
sw a1, 0(sp)
lw a4, 0(sp)
sb a3, 5(t0)
lbu a5, 5(t0)
addi a7, zero, 93
ecall
.data 0x10000
.word 0x12345678
.byte 0xff, 0
");
        assert_eq!(s.regs()[11], 0x1234_5678);
        assert_eq!(s.regs()[12], u32::MAX);
        assert_eq!(s.regs()[13], 0xff);
        assert_eq!(s.regs()[14], 0x1234_5678);
        assert_eq!(s.regs()[15], 0xff);
    }

    #[test]
    fn traps() {
        let p = parse_asm("lw a0, 0(zero)").unwrap();
        let mut s = MachineState::new(&p);
        assert_eq!(s.step(&p), Err(Trap::Unmapped { pc: 0, addr: 0 }));

        let p = parse_asm("jal zero, L\nL:").unwrap();
        let mut s = MachineState::new(&p);
        s.step(&p).unwrap();
        assert_eq!(s.step(&p), Err(Trap::Fetch { pc: 4 }));

        let p = parse_asm("addi a7, zero, 1\necall").unwrap();
        let mut s = MachineState::new(&p);
        s.step(&p).unwrap();
        assert_eq!(s.step(&p), Err(Trap::Syscall { pc: 4, number: 1 }));

        let p = parse_asm("addi sp, sp, -2\nsw a0, 0(sp)").unwrap();
        let mut s = MachineState::new(&p);
        s.step(&p).unwrap();
        assert!(matches!(s.step(&p), Err(Trap::Misaligned { .. })));
    }

    #[test]
    fn jalr_returns() {
        let s = run("\
jal ra, f
addi a7, zero, 93
ecall
f: addi a0, zero, 9
jalr zero, 0(ra)
");
        assert_eq!(s.exit_code, 9);
    }
}
