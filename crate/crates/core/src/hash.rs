//! One-bit keyed decision functions over branch addresses.
//!
//! Two keyed hashes are provided:
//!
//! * a parametrisable Fibonacci LFSR ([`lfsr_bit`]), the cheap hardware
//!   option whose latency is its step count `k`;
//! * [`mix64_bit`], a keyed 64-bit avalanche mix. It is *not* a
//!   cryptographic hash; it stands in for one where bias and avalanche
//!   behaviour matter more than hardware cost.
//!
//! [`HashScheme::Mask`] replaces the hash with an explicit per-branch table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::obfuscate::InversionMask;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HashError {
    #[error("invalid key `{0}`: expected 16 hex digits")]
    InvalidKey(String),
    #[error("invalid LFSR configuration: {0}")]
    InvalidLfsr(String),
}

/// The 64-bit program key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObfKey(pub u64);

impl ObfKey {
    pub fn bits(self) -> u64 {
        self.0
    }
}

impl FromStr for ObfKey {
    type Err = HashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s.strip_prefix("0x").unwrap_or(s);
        if digits.len() != 16 || !digits.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(HashError::InvalidKey(s.to_string()));
        }
        u64::from_str_radix(digits, 16)
            .map(ObfKey)
            .map_err(|_| HashError::InvalidKey(s.to_string()))
    }
}

impl fmt::Display for ObfKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Shape of the LFSR hash: `n` state bits, `k > n` steps, feedback taps.
///
/// Tap bit `i` set means state bit `i` feeds the XOR. The characteristic
/// polynomial is `x^n + sum(x^i for each tap i)`; e.g. `n = 4, taps = 0b1001`
/// is `x^4 + x^3 + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LfsrConfig {
    n: u32,
    k: u32,
    taps: u64,
}

impl LfsrConfig {
    /// Validates the shape; logs a warning when the taps are not a
    /// maximal-length (primitive) polynomial.
    pub fn new(n: u32, k: u32, taps: u64) -> Result<Self, HashError> {
        if !(4..=64).contains(&n) {
            return Err(HashError::InvalidLfsr(format!("n = {n} outside 4..=64")));
        }
        if k <= n {
            return Err(HashError::InvalidLfsr(format!(
                "k = {k} must exceed n = {n}"
            )));
        }
        if taps == 0 {
            return Err(HashError::InvalidLfsr("taps must be non-zero".into()));
        }
        if n < 64 && taps >> n != 0 {
            return Err(HashError::InvalidLfsr(format!(
                "taps {taps:#x} do not fit in {n} bits"
            )));
        }
        let cfg = LfsrConfig { n, k, taps };
        if !cfg.is_maximal_length() {
            log::warn!("LFSR taps {taps:#x} (n = {n}) are not maximal-length");
        }
        Ok(cfg)
    }

    /// 16-step hash: `n = 15`, `x^15 + x + 1`. With `k = n + 1` the output
    /// bit is `s1 ^ s2` of the seed, so it follows address bit 2 and stays
    /// balanced over any aligned run of branch addresses.
    pub fn sixteen_cycle() -> Self {
        LfsrConfig {
            n: 15,
            k: 16,
            taps: 0x3,
        }
    }

    /// 8-step hash: `n = 7`, `x^7 + x + 1`.
    pub fn eight_cycle() -> Self {
        LfsrConfig {
            n: 7,
            k: 8,
            taps: 0x3,
        }
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn taps(&self) -> u64 {
        self.taps
    }

    fn state_mask(&self) -> u64 {
        if self.n == 64 {
            u64::MAX
        } else {
            (1u64 << self.n) - 1
        }
    }

    /// One Fibonacci step: the parity of the tapped bits enters at the top,
    /// everything shifts right by one.
    pub fn step(&self, state: u64) -> u64 {
        let feedback = ((state & self.taps).count_ones() & 1) as u64;
        (state >> 1) | (feedback << (self.n - 1))
    }

    /// True iff the characteristic polynomial is primitive, i.e. every
    /// non-zero seed cycles through all `2^n - 1` states.
    pub fn is_maximal_length(&self) -> bool {
        let poly = (1u128 << self.n) | self.taps as u128;
        primitive::is_primitive(poly, self.n)
    }
}

impl Default for LfsrConfig {
    fn default() -> Self {
        LfsrConfig::sixteen_cycle()
    }
}

/// Seeds the LFSR from `address ^ key ^ (key >> 32)` (low `n` bits, a zero
/// seed becomes all ones), runs `k` steps and returns the final low bit.
pub fn lfsr_bit(cfg: &LfsrConfig, key: ObfKey, address: u32) -> bool {
    let mut state = (address as u64 ^ key.0 ^ (key.0 >> 32)) & cfg.state_mask();
    if state == 0 {
        state = cfg.state_mask();
    }
    for _ in 0..cfg.k {
        state = cfg.step(state);
    }
    state & 1 == 1
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// The splitmix64 finaliser.
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keyed mix of the address:
///
/// ```text
/// z = key ^ (address * 0x9e3779b97f4a7c15)
/// z = splitmix64(z)
/// z = splitmix64(z ^ rotl(key, 29))
/// bit = z & 1
/// ```
pub fn mix64_bit(key: ObfKey, address: u32) -> bool {
    let mut z = key.0 ^ (address as u64).wrapping_mul(GOLDEN);
    z = splitmix64(z);
    z = splitmix64(z ^ key.0.rotate_left(29));
    z & 1 == 1
}

/// How a branch's inversion bit is decided.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HashScheme {
    Lfsr(LfsrConfig),
    Mix64,
    /// Explicit bits; the key is ignored and absent addresses decide 0.
    Mask(InversionMask),
}

impl HashScheme {
    pub fn decide(&self, address: u32, key: ObfKey) -> bool {
        match self {
            HashScheme::Lfsr(cfg) => lfsr_bit(cfg, key, address),
            HashScheme::Mix64 => mix64_bit(key, address),
            HashScheme::Mask(mask) => mask.get(address).unwrap_or(false),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HashScheme::Lfsr(_) => "lfsr",
            HashScheme::Mix64 => "mix64",
            HashScheme::Mask(_) => "mask",
        }
    }
}

/// Primitive-polynomial test over GF(2) for degrees up to 64.
mod primitive {
    /// Carry-less product of two polynomials of degree < 64, reduced
    /// modulo `poly` (degree `n`).
    fn mulmod(a: u128, b: u128, poly: u128, n: u32) -> u128 {
        let mut acc = 0u128;
        let mut a = a;
        let mut b = b;
        while b != 0 {
            if b & 1 == 1 {
                acc ^= a;
            }
            b >>= 1;
            a <<= 1;
            if a >> n & 1 == 1 {
                a ^= poly;
            }
        }
        acc
    }

    fn powmod(mut exp: u64, poly: u128, n: u32) -> u128 {
        let mut base = 0b10u128;
        let mut acc = 1u128;
        while exp != 0 {
            if exp & 1 == 1 {
                acc = mulmod(acc, base, poly, n);
            }
            base = mulmod(base, base, poly, n);
            exp >>= 1;
        }
        acc
    }

    /// `x` has multiplicative order `2^n - 1` modulo `poly`, which also
    /// implies `poly` is irreducible.
    pub(super) fn is_primitive(poly: u128, n: u32) -> bool {
        if poly & 1 == 0 {
            return false;
        }
        let order = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
        if powmod(order, poly, n) != 1 {
            return false;
        }
        prime_factors(order)
            .into_iter()
            .all(|q| powmod(order / q, poly, n) != 1)
    }

    fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
        ((a as u128 * b as u128) % m as u128) as u64
    }

    fn pow_mod(mut b: u64, mut e: u64, m: u64) -> u64 {
        let mut acc = 1 % m;
        b %= m;
        while e != 0 {
            if e & 1 == 1 {
                acc = mul_mod(acc, b, m);
            }
            b = mul_mod(b, b, m);
            e >>= 1;
        }
        acc
    }

    /// Deterministic Miller-Rabin for 64-bit inputs.
    fn is_prime(n: u64) -> bool {
        if n < 2 {
            return false;
        }
        const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
        for p in BASES {
            if n.is_multiple_of(p) {
                return n == p;
            }
        }
        let s = (n - 1).trailing_zeros();
        let d = (n - 1) >> s;
        'witness: for a in BASES {
            let mut x = pow_mod(a, d, n);
            if x == 1 || x == n - 1 {
                continue;
            }
            for _ in 1..s {
                x = mul_mod(x, x, n);
                if x == n - 1 {
                    continue 'witness;
                }
            }
            return false;
        }
        true
    }

    fn gcd(mut a: u64, mut b: u64) -> u64 {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    }

    /// Pollard's rho (Floyd cycle finding) for an odd composite `n`.
    fn rho(n: u64) -> u64 {
        for c in 1.. {
            let f = |x: u64| (mul_mod(x, x, n) + c) % n;
            let (mut x, mut y, mut d) = (2u64, 2u64, 1u64);
            while d == 1 {
                x = f(x);
                y = f(f(y));
                d = gcd(x.abs_diff(y), n);
            }
            if d != n {
                return d;
            }
        }
        unreachable!()
    }

    pub(super) fn prime_factors(n: u64) -> Vec<u64> {
        let mut out = Vec::new();
        let mut stack = vec![n];
        while let Some(m) = stack.pop() {
            if m == 1 {
                continue;
            }
            if is_prime(m) {
                out.push(m);
                continue;
            }
            let small = (2..1000u64).find(|p| m % p == 0);
            let d = small.unwrap_or_else(|| rho(m));
            stack.push(d);
            stack.push(m / d);
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn factors_of_mersenne_numbers() {
            assert_eq!(prime_factors(15), vec![3, 5]);
            assert_eq!(prime_factors((1 << 11) - 1), vec![23, 89]);
            assert_eq!(prime_factors((1 << 31) - 1), vec![(1 << 31) - 1]);
            assert_eq!(
                prime_factors(u64::MAX),
                vec![3, 5, 17, 257, 641, 65537, 6_700_417]
            );
            assert_eq!(
                prime_factors((1 << 59) - 1),
                vec![179_951, 3_203_431_780_337]
            );
        }
    }
}
