//! Keyed conditional-branch inversion for an RV32I subset.
//!
//! A program key decides, per branch address, whether a conditional branch
//! is replaced by its negation. The crate covers the whole loop around that
//! idea: assembling and executing programs ([`isa`]), the keyed decision
//! ([`hash`]), the rewrite and its inverse ([`obfuscate`]), a cycle-cost
//! model of the hardware deobfuscators ([`sim`]), software deobfuscation
//! costs ([`softdeobf`]), classifier-based stealth measurement
//! ([`stealth`]) and a brute-force attacker ([`attack`]).

pub mod attack;
pub mod corpus;
pub mod hash;
pub mod isa;
pub mod obfuscate;
pub mod sim;
pub mod softdeobf;
pub mod stealth;

pub use hash::{HashScheme, LfsrConfig, ObfKey};
pub use isa::{parse_asm, print_asm, BranchKind, Instruction, Opcode, Program};
pub use obfuscate::{deobfuscate, emit_runtime_deobf, obfuscate, InversionMask};
pub use sim::{simulate, Design, SimConfig, SimReport};
