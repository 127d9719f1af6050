//! A second, deliberately naive interpreter for the assembly dialect. It
//! shares no code with the crate and serves as the oracle for the bundled
//! programs' results.

use std::collections::HashMap;

use drndalo_core::corpus::{bundled, BUNDLED};
use drndalo_core::sim::{simulate, SimConfig};

struct RefMachine {
    text: Vec<Vec<String>>,
    labels: HashMap<String, u32>,
    mem: HashMap<u32, u8>,
    regs: [u32; 32],
    entry: u32,
}

const NAMES: [&str; 32] = [
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3", "a4",
    "a5", "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "t3", "t4",
    "t5", "t6",
];

fn reg(s: &str) -> usize {
    if let Some(n) = s.strip_prefix('x').and_then(|n| n.parse().ok()) {
        return n;
    }
    NAMES
        .iter()
        .position(|n| *n == s)
        .unwrap_or_else(|| panic!("register {s}"))
}

fn num(s: &str) -> i64 {
    let (neg, d) = s.strip_prefix('-').map_or((false, s), |r| (true, r));
    let v = match d.strip_prefix("0x") {
        Some(h) => i64::from_str_radix(h, 16).unwrap(),
        None => d.parse().unwrap(),
    };
    if neg {
        -v
    } else {
        v
    }
}

impl RefMachine {
    fn load(src: &str) -> RefMachine {
        let mut m = RefMachine {
            text: Vec::new(),
            labels: HashMap::new(),
            mem: HashMap::new(),
            regs: [0; 32],
            entry: 0,
        };
        let mut in_data = false;
        let mut data_ptr = 0u32;
        let mut entry_label = None;
        for raw in src.lines() {
            let mut line = raw.split('#').next().unwrap().trim().to_string();
            while let Some(i) = line.find(':') {
                let name = line[..i].trim().to_string();
                let here = if in_data {
                    data_ptr
                } else {
                    4 * m.text.len() as u32
                };
                m.labels.insert(name, here);
                line = line[i + 1..].trim().to_string();
            }
            if line.is_empty() {
                continue;
            }
            let toks: Vec<String> = line
                .replace(',', " ")
                .split_whitespace()
                .map(str::to_string)
                .collect();
            match toks[0].as_str() {
                ".entry" => entry_label = Some(toks[1].clone()),
                ".data" => {
                    if toks.len() > 1 {
                        data_ptr = num(&toks[1]) as u32;
                    }
                    in_data = true;
                }
                ".byte" => {
                    for t in &toks[1..] {
                        m.mem.insert(data_ptr, num(t) as u8);
                        data_ptr += 1;
                    }
                }
                ".word" => {
                    for t in &toks[1..] {
                        let v = num(t) as u32;
                        for b in 0..4 {
                            m.mem.insert(data_ptr, (v >> (8 * b)) as u8);
                            data_ptr += 1;
                        }
                    }
                }
                _ => m.text.push(toks),
            }
        }
        if let Some(l) = entry_label {
            m.entry = m.labels[&l];
        }
        m
    }

    fn rd_mem(&self, addr: u32, n: u32) -> u32 {
        (0..n).fold(0, |acc, i| {
            acc | (*self.mem.get(&(addr + i)).unwrap_or(&0) as u32) << (8 * i)
        })
    }

    /// `(base register, offset)` of `off(reg)`.
    fn mem_arg(&self, s: &str) -> u32 {
        let (off, rest) = s.split_once('(').unwrap();
        let base = self.regs[reg(rest.trim_end_matches(')'))];
        base.wrapping_add(if off.is_empty() { 0 } else { num(off) as u32 })
    }

    fn run(&mut self, limit: usize) -> (i32, Vec<u8>) {
        let mut out = Vec::new();
        let mut pc = self.entry;
        self.regs[2] = 0x8000_0000;
        for _ in 0..limit {
            let t = self.text[(pc / 4) as usize].clone();
            let r = |i: usize| self.regs[reg(&t[i])];
            let mut next = pc + 4;
            let mut write: Option<u32> = None;
            let imm = |i: usize| num(&t[i]) as u32;
            let sh = |i: usize| (num(&t[i]) as u32) & 31;
            match t[0].as_str() {
                "add" => write = Some(r(2).wrapping_add(r(3))),
                "sub" => write = Some(r(2).wrapping_sub(r(3))),
                "and" => write = Some(r(2) & r(3)),
                "or" => write = Some(r(2) | r(3)),
                "xor" => write = Some(r(2) ^ r(3)),
                "slt" => write = Some(((r(2) as i32) < (r(3) as i32)) as u32),
                "sltu" => write = Some((r(2) < r(3)) as u32),
                "addi" => write = Some(r(2).wrapping_add(imm(3))),
                "andi" => write = Some(r(2) & imm(3)),
                "ori" => write = Some(r(2) | imm(3)),
                "xori" => write = Some(r(2) ^ imm(3)),
                "slti" => write = Some(((r(2) as i32) < (imm(3) as i32)) as u32),
                "sltiu" => write = Some((r(2) < imm(3)) as u32),
                "slli" => write = Some(r(2) << sh(3)),
                "srli" => write = Some(r(2) >> sh(3)),
                "srai" => write = Some(((r(2) as i32) >> sh(3)) as u32),
                "lui" => write = Some(imm(2) << 12),
                "lw" => write = Some(self.rd_mem(self.mem_arg(&t[2]), 4)),
                "lbu" => write = Some(self.rd_mem(self.mem_arg(&t[2]), 1)),
                "lb" => write = Some(self.rd_mem(self.mem_arg(&t[2]), 1) as u8 as i8 as i32 as u32),
                "sw" | "sb" => {
                    let addr = self.mem_arg(&t[2]);
                    let n = if t[0] == "sw" { 4 } else { 1 };
                    let v = r(1);
                    for i in 0..n {
                        self.mem.insert(addr + i, (v >> (8 * i)) as u8);
                    }
                }
                "jal" => {
                    write = Some(pc + 4);
                    next = self.labels[&t[2]];
                }
                "jalr" => {
                    write = Some(pc + 4);
                    next = self.mem_arg(&t[2]) & !1;
                }
                "beq" | "bne" | "blt" | "bge" | "bltu" | "bgeu" => {
                    let (a, b) = (r(1), r(2));
                    let taken = match t[0].as_str() {
                        "beq" => a == b,
                        "bne" => a != b,
                        "blt" => (a as i32) < (b as i32),
                        "bge" => (a as i32) >= (b as i32),
                        "bltu" => a < b,
                        _ => a >= b,
                    };
                    if taken {
                        next = self.labels[&t[3]];
                    }
                }
                "ecall" => match self.regs[17] {
                    93 => return (self.regs[10] as i32, out),
                    64 => out.push(self.regs[10] as u8),
                    n => panic!("ecall {n}"),
                },
                op => panic!("reference interpreter: unsupported `{op}`"),
            }
            if let Some(v) = write {
                let d = reg(&t[1]);
                if d != 0 {
                    self.regs[d] = v;
                }
            }
            pc = next;
        }
        panic!("reference run did not finish");
    }
}

#[test]
fn sum10_exits_45_on_both_interpreters() {
    let src = BUNDLED.iter().find(|(n, _)| *n == "sum10").unwrap().1;
    assert_eq!(RefMachine::load(src).run(10_000), (45, vec![]));
    let p = drndalo_core::parse_asm(src).unwrap();
    assert_eq!(simulate(&p, &SimConfig::baseline()).unwrap().exit_code, 45);
}

#[test]
fn bundled_programs_agree_with_reference() {
    for ((name, src), (_, p)) in BUNDLED.iter().zip(bundled()) {
        let want = RefMachine::load(src).run(5_000_000);
        let got = simulate(&p, &SimConfig::baseline()).unwrap();
        assert_eq!((got.exit_code, got.output_bytes), want, "{name}");
    }
}

#[test]
fn documented_results() {
    let expected = [
        ("binsearch", 16),
        ("bubble_sort", 20),
        ("bytesum", -3),
        ("collatz", 111),
        ("fib", 46368),
        ("gcd", 21),
        ("hello", 13),
        ("minmax", 50),
        ("popcount", 74),
        ("primes", 25),
        ("rsum", 55),
        ("sum10", 45),
    ];
    for (name, code) in expected {
        let src = BUNDLED.iter().find(|(n, _)| *n == name).unwrap().1;
        assert_eq!(RefMachine::load(src).run(5_000_000).0, code, "{name}");
    }
    let hello = BUNDLED.iter().find(|(n, _)| *n == "hello").unwrap().1;
    assert_eq!(RefMachine::load(hello).run(10_000).1, b"hello, world\n");
}
