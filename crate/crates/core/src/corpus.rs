//! Bundled assembly programs and a synthetic program generator.

use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::isa::{parse_asm, BranchKind, Program};

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        /// `(name, source)` of every bundled program, sorted by name.
        pub const BUNDLED: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../corpus/", $name, ".s"))),)*
        ];
    };
}

bundled!(
    "bench_branchy",
    "binsearch",
    "bubble_sort",
    "bytesum",
    "collatz",
    "fib",
    "gcd",
    "hello",
    "minmax",
    "popcount",
    "primes",
    "rsum",
    "sum10",
);

/// The branch-dominated micro-benchmark.
pub const BRANCHY_BENCH: &str = "bench_branchy";

pub fn bundled() -> Vec<(String, Program)> {
    BUNDLED
        .iter()
        .map(|(name, src)| {
            let p = parse_asm(src).unwrap_or_else(|e| panic!("bundled program {name}: {e}"));
            (name.to_string(), p)
        })
        .collect()
}

pub fn bundled_program(name: &str) -> Option<Program> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, src)| parse_asm(src).expect("bundled programs parse"))
}

/// Shape of generated programs.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Top-level constructs (forward `if`s and counted loops).
    pub constructs: usize,
    /// Relative frequency of each branch kind, in [`BranchKind::ALL`] order.
    pub kind_weights: [u32; 6],
    pub loop_fraction: f64,
    pub max_trip: u32,
    pub max_filler: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            constructs: 40,
            kind_weights: [1; 6],
            loop_fraction: 0.3,
            max_trip: 6,
            max_filler: 4,
        }
    }
}

impl GenConfig {
    /// Plain code that prefers `blt` to `bge` four to one and uses no
    /// other kind.
    pub fn skewed() -> Self {
        GenConfig {
            kind_weights: [0, 0, 80, 20, 0, 0],
            ..GenConfig::default()
        }
    }
}

const WORK: [&str; 18] = [
    "t0", "t1", "t2", "t3", "t4", "a0", "a1", "a2", "a3", "a4", "a5", "a6", "s1", "s2", "s3", "s4",
    "s5", "s6",
];
const DATA_BASE_HI: u32 = 0x10;
const DATA_WORDS: u32 = 16;

struct Gen<'a> {
    cfg: &'a GenConfig,
    rng: ChaCha8Rng,
    kinds: WeightedIndex<u32>,
    out: String,
    labels: usize,
}

impl Gen<'_> {
    fn reg(&mut self) -> &'static str {
        WORK.choose(&mut self.rng).unwrap()
    }

    fn source(&mut self) -> &'static str {
        if self.rng.gen_bool(0.1) {
            "zero"
        } else {
            self.reg()
        }
    }

    fn label(&mut self, stem: &str) -> String {
        self.labels += 1;
        format!("{stem}{}", self.labels)
    }

    fn kind(&mut self) -> BranchKind {
        BranchKind::ALL[self.kinds.sample(&mut self.rng)]
    }

    fn filler(&mut self, min: usize) {
        let n = self.rng.gen_range(min..=self.cfg.max_filler.max(min));
        for _ in 0..n {
            let rd = self.reg();
            let line = match self.rng.gen_range(0..10) {
                0..=3 => {
                    let op = ["add", "sub", "and", "or", "xor", "slt", "sltu"]
                        .choose(&mut self.rng)
                        .unwrap();
                    format!("{op} {rd}, {}, {}", self.source(), self.source())
                }
                4..=6 => {
                    let op = ["addi", "andi", "ori", "xori", "slti", "sltiu"]
                        .choose(&mut self.rng)
                        .unwrap();
                    format!(
                        "{op} {rd}, {}, {}",
                        self.source(),
                        self.rng.gen_range(-64..64)
                    )
                }
                7 => {
                    let op = ["slli", "srli", "srai"].choose(&mut self.rng).unwrap();
                    format!(
                        "{op} {rd}, {}, {}",
                        self.source(),
                        self.rng.gen_range(0..32)
                    )
                }
                8 => format!("lw {rd}, {}(s0)", 4 * self.rng.gen_range(0..DATA_WORDS)),
                _ => format!(
                    "sw {}, {}(s0)",
                    self.source(),
                    4 * self.rng.gen_range(0..DATA_WORDS)
                ),
            };
            let _ = writeln!(self.out, "    {line}");
        }
    }

    fn forward_if(&mut self) {
        self.filler(0);
        let skip = self.label("skip");
        let kind = self.kind();
        let (a, b) = (self.source(), self.source());
        let _ = writeln!(self.out, "    {} {a}, {b}, {skip}", kind.opcode());
        self.filler(1);
        let _ = writeln!(self.out, "{skip}:");
    }

    /// `s10` counts up from 0; the loop runs `trip` times. `s11` and `s9`
    /// hold the bound and a flag; filler never writes any of the three.
    fn counted_loop(&mut self) {
        let trip = self.rng.gen_range(1..=self.cfg.max_trip.max(1));
        let kind = self.kind();
        let bound = match kind {
            BranchKind::Bge | BranchKind::Bgeu => trip - 1,
            _ => trip,
        };
        let top = self.label("loop");
        let _ = writeln!(
            self.out,
            "    addi s10, zero, 0\n    addi s11, zero, {bound}\n{top}:"
        );
        self.filler(1);
        if self.rng.gen_bool(0.5) {
            self.forward_if();
        }
        let _ = writeln!(self.out, "    addi s10, s10, 1");
        let close = match kind {
            BranchKind::Blt => format!("blt s10, s11, {top}"),
            BranchKind::Bltu => format!("bltu s10, s11, {top}"),
            BranchKind::Bne => format!("bne s10, s11, {top}"),
            BranchKind::Bge => format!("bge s11, s10, {top}"),
            BranchKind::Bgeu => format!("bgeu s11, s10, {top}"),
            BranchKind::Beq => {
                format!("slt s9, s10, s11\n    xori s9, s9, 1\n    beq s9, zero, {top}")
            }
        };
        let _ = writeln!(self.out, "    {close}");
    }
}

/// Source of a random terminating program. Branch kinds follow
/// `cfg.kind_weights`; no generated branch targets its own fall-through.
pub fn generate_source(cfg: &GenConfig, seed: u64) -> String {
    let mut g = Gen {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
        kinds: WeightedIndex::new(cfg.kind_weights).expect("at least one positive branch weight"),
        out: String::new(),
        labels: 0,
    };
    let _ = writeln!(g.out, ".entry main\nmain:\n    lui s0, {DATA_BASE_HI:#x}");
    for r in WORK {
        let v = g.rng.gen_range(-100..100);
        let _ = writeln!(g.out, "    addi {r}, zero, {v}");
    }
    for _ in 0..cfg.constructs {
        if g.rng.gen_bool(cfg.loop_fraction) {
            g.counted_loop();
        } else {
            g.forward_if();
        }
    }
    let _ = writeln!(
        g.out,
        "    andi a0, a0, 255\n    addi a7, zero, 93\n    ecall"
    );
    let _ = writeln!(g.out, ".data {:#x}", DATA_BASE_HI << 12);
    let words = vec!["0"; DATA_WORDS as usize].join(", ");
    let _ = writeln!(g.out, "scratch:\n    .word {words}");
    g.out
}

pub fn generate(cfg: &GenConfig, seed: u64) -> Program {
    parse_asm(&generate_source(cfg, seed)).expect("generated source parses")
}

/// `count` programs named `syn000`, `syn001`, ...
pub fn synthetic_corpus(cfg: &GenConfig, count: usize, seed: u64) -> Vec<(String, Program)> {
    (0..count)
        .map(|i| {
            let s = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(i as u64);
            (format!("syn{i:03}"), generate(cfg, s))
        })
        .collect()
}

/// A straight chain of exactly `n` forward branches of random kinds.
pub fn with_branch_count(n: usize, seed: u64) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = String::from(".entry main\nmain:\n");
    for i in 0..n {
        let kind = BranchKind::ALL.choose(&mut rng).unwrap();
        let a = WORK.choose(&mut rng).unwrap();
        let b = WORK.choose(&mut rng).unwrap();
        let _ = writeln!(
            src,
            "    {} {a}, {b}, c{i}\n    addi {a}, {a}, 1\nc{i}:",
            kind.opcode()
        );
    }
    src.push_str("    addi a7, zero, 93\n    ecall\n");
    parse_asm(&src).expect("chain parses")
}
