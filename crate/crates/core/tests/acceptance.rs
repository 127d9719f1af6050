//! Acceptance suite. Prints one line per criterion and exits non-zero if a
//! criterion fails that is not listed in `KNOWN_FAILURES`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drndalo_core::attack::{brute_force, measure_divergence, AttackMode};
use drndalo_core::corpus::{
    bundled, bundled_program, synthetic_corpus, with_branch_count, GenConfig, BRANCHY_BENCH,
};
use drndalo_core::hash::{lfsr_bit, mix64_bit, LfsrConfig};
use drndalo_core::obfuscate::apply_mask;
use drndalo_core::sim::{overhead, simulate, simulate_profiled, SimConfig};
use drndalo_core::softdeobf::{estimate_overhead, SoftDeobfModel, SoftMode};
use drndalo_core::stealth::{
    build_dataset, preprocess, relabel_with_coin, sweep_samples, train_and_evaluate, ModelKind,
};
use drndalo_core::{deobfuscate, obfuscate, parse_asm, HashScheme, InversionMask, ObfKey, Program};

/// Criteria expected to fail under the default parameters. See the README.
const KNOWN_FAILURES: &[u32] = &[7];

type Outcome = Result<String, String>;

/// `(id, check, time budget in seconds)`
type Criterion = (u32, fn() -> Outcome, u64);

fn keys(n: usize, seed: u64) -> Vec<ObfKey> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| ObfKey(rng.gen())).collect()
}

fn default_scheme() -> HashScheme {
    HashScheme::Lfsr(LfsrConfig::sixteen_cycle())
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ac1() -> Outcome {
    let corpus = bundled();
    let ks = keys(50, 1);
    let mut checked = 0;
    for (name, p) in &corpus {
        for s in [default_scheme(), HashScheme::Mix64] {
            for &k in &ks {
                let (obf, _) = obfuscate(p, &s, k);
                if deobfuscate(&obf, &s, k) != *p {
                    return Err(format!("{name} key {k} scheme {}", s.name()));
                }
                checked += 1;
            }
        }
    }
    check(
        corpus.len() >= 10,
        format!("{} programs, {checked} round trips", corpus.len()),
    )
}

fn ac2() -> Outcome {
    let corpus = bundled();
    let mut runs = 0;
    for (name, p) in &corpus {
        let base = simulate(p, &SimConfig::baseline()).map_err(|e| format!("{name}: {e}"))?;
        for k in keys(10, 2) {
            let s = default_scheme();
            let (obf, mask) = obfuscate(p, &s, k);
            for cfg in [
                SimConfig::stalled(s.clone(), k),
                SimConfig::cached(s.clone(), k),
                SimConfig::mask_based(mask),
            ] {
                let r = simulate(&obf, &cfg).map_err(|e| format!("{name}: {e}"))?;
                if r.trace_digest != base.trace_digest || r.exit_code != base.exit_code {
                    return Err(format!("{name} {} key {k}", cfg.design.cli_name()));
                }
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} keyed runs match the plain baseline"))
}

fn ac3() -> Outcome {
    let ks = keys(12, 3);
    for n in 1..=12 {
        let p = with_branch_count(n, n as u64);
        let (obf, mask) = obfuscate(&p, &HashScheme::Mix64, ks[n - 1]);
        let r = brute_force(&obf, &p, AttackMode::Exhaustive).map_err(|e| format!("n={n}: {e}"))?;
        if r.successes != 1 || r.trials != 1 << n || r.recovered.as_ref() != Some(&mask) {
            return Err(format!(
                "n={n}: {} of {} masks reconstruct",
                r.successes, r.trials
            ));
        }
    }
    let p = with_branch_count(10, 99);
    let (obf, _) = obfuscate(&p, &HashScheme::Mix64, ObfKey(0x0ac3));
    let trials = 100_000u64;
    let r = brute_force(&obf, &p, AttackMode::Sampled { trials, seed: 7 })
        .map_err(|e| e.to_string())?;
    let p0 = 0.5f64.powi(10);
    let sigma = (p0 * (1.0 - p0) / trials as f64).sqrt();
    let z = (r.empirical_p - p0) / sigma;
    check(
        z.abs() <= 3.0,
        format!(
            "exhaustive n=1..12 unique; sampled n=10 p={:.3e} vs {p0:.3e} (z={z:+.2})",
            r.empirical_p
        ),
    )
}

fn branchy() -> Program {
    bundled_program(BRANCHY_BENCH).expect("benchmark is bundled")
}

fn ac4() -> Outcome {
    let p = branchy();
    let s = default_scheme();
    let k = ObfKey(0x0ac4);
    let base = simulate(&p, &SimConfig::baseline()).map_err(|e| e.to_string())?;
    let (obf, _) = obfuscate(&p, &s, k);
    let cfg = SimConfig::stalled(s, k);
    let (hk, ov) = (cfg.hash_cycles, cfg.decode_to_execute_overlap);
    let r = simulate(&obf, &cfg).map_err(|e| e.to_string())?;
    let closed = base.cycles + base.branches * (hk - ov) as u64;
    let o = overhead(&r, &base).map_err(|e| e.to_string())?;
    check(
        hk == 16 && ov == 1 && r.cycles == closed && o >= 0.40,
        format!(
            "overhead {:.1}%, cycles {} (closed form {closed})",
            100.0 * o,
            r.cycles
        ),
    )
}

fn ac5() -> Outcome {
    let p = branchy();
    let s = default_scheme();
    let k = ObfKey(0x0ac5);
    let (base, profile) =
        simulate_profiled(&p, &SimConfig::baseline()).map_err(|e| e.to_string())?;
    let (obf, mask) = obfuscate(&p, &s, k);
    let cfg = SimConfig::cached(s, k);
    let r = simulate(&obf, &cfg).map_err(|e| e.to_string())?;
    let oc = overhead(&r, &base).map_err(|e| e.to_string())?;
    let m = simulate(&obf, &SimConfig::mask_based(mask)).map_err(|e| e.to_string())?;
    let om = overhead(&m, &base).map_err(|e| e.to_string())?;
    let iterations = profile.values().map(|s| s.executions).max().unwrap_or(0);
    check(
        cfg.cache_lines == 256
            && profile.len() <= 256
            && iterations >= 1000
            && oc <= 0.05
            && om == 0.0,
        format!(
            "cached {:.2}% ({} misses), mask {:.1}%, {} branches x {iterations} runs",
            100.0 * oc,
            r.cache_misses,
            100.0 * om,
            profile.len()
        ),
    )
}

fn ac6() -> Outcome {
    let s = default_scheme();
    let k = ObfKey(0x0ac6);
    let corpus = bundled();
    for (name, p) in &corpus {
        let b = simulate(p, &SimConfig::baseline())
            .map_err(|e| e.to_string())?
            .cycles;
        let (obf, mask) = obfuscate(p, &s, k);
        let st = simulate(&obf, &SimConfig::stalled(s.clone(), k))
            .map_err(|e| e.to_string())?
            .cycles;
        let ca = simulate(&obf, &SimConfig::cached(s.clone(), k))
            .map_err(|e| e.to_string())?
            .cycles;
        let ma = simulate(&obf, &SimConfig::mask_based(mask))
            .map_err(|e| e.to_string())?
            .cycles;
        if !(st >= ca && ca >= ma && ma == b) {
            return Err(format!(
                "{name}: stalled {st}, cached {ca}, mask {ma}, baseline {b}"
            ));
        }
    }
    Ok(format!(
        "stalled >= cached >= mask == baseline on {} programs",
        corpus.len()
    ))
}

fn counted_loop(n: u32) -> Program {
    parse_asm(&format!(
        "addi t0, zero, 0\nlui t1, {:#x}\naddi t1, t1, {}\ntop:\naddi t0, t0, 1\n\
         bne t0, t1, top\naddi a7, zero, 93\necall\n",
        (n + 0x800) >> 12,
        ((n << 20) as i32) >> 20
    ))
    .unwrap()
}

fn ac7() -> Outcome {
    let s = default_scheme();
    let k = ObfKey(0x0ac7);
    let mut violations = Vec::new();
    let mut looped = 0;
    for (name, p) in bundled() {
        if !p
            .branches()
            .any(|b| b.target_address().is_some_and(|t| t <= b.address))
        {
            continue;
        }
        looped += 1;
        let (_, mask) = obfuscate(&p, &s, k);
        let base = simulate(&p, &SimConfig::baseline()).map_err(|e| e.to_string())?;
        let o = |mode| {
            estimate_overhead(&p, &mask, &SoftDeobfModel::new(mode), &base)
                .map(|r| r.overhead)
                .map_err(|e| format!("{name}: {e}"))
        };
        let (rt, un, ca) = (
            o(SoftMode::Runtime)?,
            o(SoftMode::JitUncached)?,
            o(SoftMode::JitCached)?,
        );
        if !(rt >= un && un >= ca) {
            violations.push(format!("{name} {rt:.3}/{un:.3}/{ca:.3}"));
        }
    }
    let cached: Vec<u64> = [100, 1000, 10_000]
        .into_iter()
        .map(|n| {
            let p = counted_loop(n);
            let base = simulate(&p, &SimConfig::baseline()).unwrap();
            let mask = InversionMask::identity(&p);
            estimate_overhead(&p, &mask, &SoftDeobfModel::new(SoftMode::JitCached), &base)
                .unwrap()
                .extra_instructions
        })
        .collect();
    let invariant = cached.windows(2).all(|w| w[0] == w[1]);
    let detail = format!(
        "jit-cached extra {:?} over 1e2..1e4 iterations; runtime/uncached/cached ordering broken on {} of {looped} looping programs{}{}",
        cached,
        violations.len(),
        if violations.is_empty() { "" } else { ": " },
        violations.join(", ")
    );
    check(invariant && violations.is_empty() && looped > 0, detail)
}

fn ac8() -> Outcome {
    let key = ObfKey(0x0ac8);
    let s = default_scheme();
    let noise_corpus = synthetic_corpus(
        &GenConfig {
            constructs: 100,
            ..GenConfig::default()
        },
        48,
        8,
    );
    let mut noise = build_dataset(&noise_corpus, key, &s, 4).map_err(|e| e.to_string())?;
    relabel_with_coin(&mut noise, 88);
    let (train, test) = preprocess(&noise, 4, 8).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = test.len() >= 2000;
    for m in ModelKind::ALL {
        let r = train_and_evaluate(&train, &test, m).map_err(|e| e.to_string())?;
        ok &= (0.45..=0.55).contains(&r.accuracy);
        parts.push(format!("noise {} {:.3}", m.cli_name(), r.accuracy));
    }
    parts.push(format!("{} test samples", test.len()));

    let skewed = synthetic_corpus(&GenConfig::skewed(), 32, 9);
    let windows = [1, 2, 4, 8];
    let samples = build_dataset(&skewed, key, &s, 8).map_err(|e| e.to_string())?;
    for m in ModelKind::ALL {
        let reports = sweep_samples(&samples, &windows, m, 9).map_err(|e| e.to_string())?;
        let gains: Vec<f64> = reports.iter().map(|r| r.accuracy - 0.5).collect();
        let best = gains.iter().cloned().fold(f64::MIN, f64::max);
        ok &= reports.iter().all(|r| r.accuracy > 0.55) && gains[0] >= 0.8 * best;
        let accs: Vec<String> = reports
            .iter()
            .map(|r| format!("{:.3}", r.accuracy))
            .collect();
        parts.push(format!(
            "skewed {} I={windows:?} acc [{}]",
            m.cli_name(),
            accs.join(", ")
        ));
    }
    check(ok, parts.join("; "))
}

fn ac9() -> Outcome {
    let s = default_scheme();
    let mut diverged = 0;
    let mut eligible = 0;
    for (name, p) in bundled() {
        let (base, profile) =
            simulate_profiled(&p, &SimConfig::baseline()).map_err(|e| e.to_string())?;
        for k in keys(5, 9) {
            let (obf, mask) = obfuscate(&p, &s, k);
            let executes_inverted = profile.keys().any(|&a| mask.get(a) == Some(true));
            if !executes_inverted {
                continue;
            }
            eligible += 1;
            let unkeyed = simulate(&obf, &SimConfig::baseline());
            match unkeyed {
                Ok(r) if r.trace_digest == base.trace_digest => {
                    return Err(format!("{name} key {k}: no divergence"));
                }
                _ => diverged += 1,
            }
        }
        let empty = InversionMask::from_entries(p.branches().map(|b| (b.address, false)));
        let same = apply_mask(&p, &empty);
        let d = measure_divergence(&p, &same, &[0, 1, 27, 1000]);
        if d.divergent != 0 {
            return Err(format!("{name}: empty mask diverges"));
        }
    }
    check(
        diverged > 0,
        format!("{diverged}/{eligible} obfuscated runs diverge without the key; empty masks 0"),
    )
}

/// Steps a 4-bit `x^4 + x + 1` register by hand: the feedback is bit 0 xor
/// bit 1 and enters at bit 3.
fn ac10() -> Outcome {
    let cfg = LfsrConfig::new(4, 5, 0x3).map_err(|e| e.to_string())?;
    // (key, address, seed and the five states that follow it)
    let table: [(u64, u32, [u64; 6]); 4] = [
        (0, 0x4, [0b0100, 0b0010, 0b1001, 0b1100, 0b0110, 0b1011]),
        (0, 0x0, [0b1111, 0b0111, 0b0011, 0b0001, 0b1000, 0b0100]),
        (0x1, 0x8, [0b1001, 0b1100, 0b0110, 0b1011, 0b0101, 0b1010]),
        (
            0x3_0000_0000,
            0xc,
            [0b1111, 0b0111, 0b0011, 0b0001, 0b1000, 0b0100],
        ),
    ];
    for (key, addr, states) in table {
        for w in states.windows(2) {
            if cfg.step(w[0]) != w[1] {
                return Err(format!(
                    "step({:04b}) = {:04b}, want {:04b}",
                    w[0],
                    cfg.step(w[0]),
                    w[1]
                ));
            }
        }
        if lfsr_bit(&cfg, ObfKey(key), addr) != (states[5] & 1 == 1) {
            return Err(format!("lfsr_bit key {key:#x} addr {addr:#x}"));
        }
    }
    if !cfg.is_maximal_length() || LfsrConfig::new(4, 5, 0x5).unwrap().is_maximal_length() {
        return Err("primitivity of x^4+x+1 / x^4+x^2+1 misjudged".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let trials = 10_000;
    let mut addr_flips = 0;
    let mut key_flips = 0;
    for _ in 0..trials {
        let key = ObfKey(rng.gen());
        let addr: u32 = rng.gen();
        let a2 = addr ^ 1 << rng.gen_range(0..32);
        let k2 = ObfKey(key.0 ^ 1 << rng.gen_range(0..64));
        addr_flips += (mix64_bit(key, addr) != mix64_bit(key, a2)) as u32;
        key_flips += (mix64_bit(key, addr) != mix64_bit(k2, addr)) as u32;
    }
    let fa = addr_flips as f64 / trials as f64;
    let fk = key_flips as f64 / trials as f64;
    let band = 0.48..=0.52;
    check(
        band.contains(&fa) && band.contains(&fk),
        format!("4-bit table exact; mix64 flip rate {fa:.4} (address bit), {fk:.4} (key bit)"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, ac1, 5),
        (2, ac2, 30),
        (3, ac3, 60),
        (4, ac4, 5),
        (5, ac5, 5),
        (6, ac6, 10),
        (7, ac7, 10),
        (8, ac8, 120),
        (9, ac9, 10),
        (10, ac10, 10),
    ];
    let mut unexpected = Vec::new();
    for (id, f, budget) in criteria {
        let start = Instant::now();
        let result = f();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let (pass, detail) = match result {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        let status = match (pass, KNOWN_FAILURES.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected.push(id);
                "FAIL"
            }
        };
        println!(
            "AC{id} {status} {detail} [{:.2}s, budget {budget}s{}]",
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
