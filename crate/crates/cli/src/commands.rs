use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use drndalo_core::attack::{
    brute_force, measure_divergence_with, AttackMode, AttackReport, DivergenceReport,
    MAX_EXHAUSTIVE_BRANCHES,
};
use drndalo_core::corpus::{bundled, generate_source, GenConfig, BUNDLED};
use drndalo_core::isa::MachineState;
use drndalo_core::sim::{overhead, simulate, simulate_from, Design, SimConfig, DEFAULT_MAX_CYCLES};
use drndalo_core::softdeobf::{estimate_overhead, SoftDeobfModel, SoftMode};
use drndalo_core::stealth::{
    build_dataset, relabel_with_coin, sweep_samples, write_dataset, ModelKind,
};
use drndalo_core::{
    deobfuscate, obfuscate, parse_asm, print_asm, HashScheme, InversionMask, ObfKey, Program,
};

use crate::config::{parse_windows, ToolConfig};
use crate::{Command, KeyArgs, SimArgs};

/// A missing or unusable flag; reported with the subcommand's usage and
/// exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_program(path: &Path) -> Result<Program> {
    let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_asm(&src).with_context(|| format!("parsing {}", path.display()))
}

fn read_mask(path: &Path) -> Result<InversionMask> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    InversionMask::parse_mask_file(&text)
        .with_context(|| format!("parsing mask {}", path.display()))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// JSON to `flag`, else to `<paths.reports>/<default_name>`, else stdout.
fn emit_json<T: Serialize>(
    flag: Option<PathBuf>,
    default_name: &str,
    cfg: &ToolConfig,
    value: &T,
) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    let path = flag.or_else(|| cfg.report_dir.as_ref().map(|d| d.join(default_name)));
    if let Some(dir) = path
        .as_deref()
        .and_then(Path::parent)
        .filter(|d| !d.as_os_str().is_empty())
    {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_text(path.as_deref(), &json)
}

fn key_of(args: &KeyArgs, cfg: &ToolConfig) -> Result<Option<ObfKey>> {
    match &args.key {
        Some(k) => Ok(Some(k.parse().map_err(|e| usage(format!("--key: {e}")))?)),
        None => Ok(cfg.key),
    }
}

fn require_key(args: &KeyArgs, cfg: &ToolConfig) -> Result<ObfKey> {
    key_of(args, cfg)?
        .ok_or_else(|| usage("the following required argument was not provided: --key <KEY>"))
}

fn mask_from_key(p: &Program, scheme: &HashScheme, key: ObfKey) -> InversionMask {
    InversionMask::from_entries(
        p.branches()
            .map(|b| (b.address, scheme.decide(b.address, key))),
    )
}

fn sim_config(args: &SimArgs, cfg: &ToolConfig) -> SimConfig {
    let d = SimConfig::default();
    SimConfig {
        hash_cycles: args
            .hash_cycles
            .or(cfg.hash_cycles)
            .unwrap_or(d.hash_cycles),
        cache_lines: args
            .cache_lines
            .or(cfg.cache_lines)
            .unwrap_or(d.cache_lines),
        branch_penalty: args
            .branch_penalty
            .or(cfg.branch_penalty)
            .unwrap_or(d.branch_penalty),
        decode_to_execute_overlap: args
            .overlap
            .or(cfg.overlap)
            .unwrap_or(d.decode_to_execute_overlap),
        max_cycles: args.max_cycles.or(cfg.max_cycles).unwrap_or(d.max_cycles),
        ..d
    }
}

/// `.s` files of `dir` sorted by name, named by file stem.
fn load_corpus(dir: &Path) -> Result<Vec<(String, Program)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading corpus {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "s"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .s programs in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            Ok((name, read_program(p)?))
        })
        .collect()
}

fn corpus_or_bundled(flag: Option<PathBuf>, cfg: &ToolConfig) -> Result<Vec<(String, Program)>> {
    match flag.or_else(|| cfg.corpus_dir.clone()) {
        Some(dir) => load_corpus(&dir),
        None => Ok(bundled()),
    }
}

fn gen_config(skewed: bool) -> GenConfig {
    if skewed {
        GenConfig::skewed()
    } else {
        GenConfig::default()
    }
}

#[derive(Serialize)]
struct AttackOutput {
    #[serde(flatten)]
    attack: AttackReport,
    divergence_detail: DivergenceReport,
}

pub fn run(command: Command, cfg: &ToolConfig) -> Result<()> {
    match command {
        Command::Obfuscate {
            input,
            out,
            key,
            emit_mask,
        } => {
            let k = require_key(&key, cfg)?;
            let scheme = cfg.scheme(key.scheme.as_deref())?;
            let p = read_program(&input)?;
            let (obf, mask) = obfuscate(&p, &scheme, k);
            if let Some(path) = emit_mask {
                write_text(Some(&path), &mask.to_mask_file())?;
            }
            write_text(out.as_deref(), &print_asm(&obf))
        }
        Command::Deobfuscate {
            input,
            out,
            key,
            mask_file,
        } => {
            let p = read_program(&input)?;
            let plain = match mask_file {
                Some(m) => {
                    let mask = read_mask(&m)?;
                    mask.check_covers(&p)?;
                    drndalo_core::obfuscate::apply_mask(&p, &mask)
                }
                None => {
                    let k = require_key(&key, cfg)?;
                    deobfuscate(&p, &cfg.scheme(key.scheme.as_deref())?, k)
                }
            };
            write_text(out.as_deref(), &print_asm(&plain))
        }
        Command::Sim {
            input,
            design,
            key,
            sim,
            mask_file,
            input_word,
            report,
        } => {
            let design = match design {
                Some(d) => d.parse::<Design>().map_err(usage)?,
                None => cfg.design.unwrap_or(Design::Baseline),
            };
            let p = read_program(&input)?;
            let mut sc = sim_config(&sim, cfg);
            sc.design = design;
            match design {
                Design::Baseline => {}
                Design::StalledHash | Design::CachedHash => {
                    sc.key = Some(require_key(&key, cfg)?);
                    sc.scheme = Some(cfg.scheme(key.scheme.as_deref())?);
                }
                Design::MaskBased => {
                    sc.mask = Some(match mask_file {
                        Some(m) => read_mask(&m)?,
                        None => {
                            let k = require_key(&key, cfg)?;
                            mask_from_key(&p, &cfg.scheme(key.scheme.as_deref())?, k)
                        }
                    });
                }
            }
            let mut state = MachineState::new(&p);
            if let Some(word) = input_word {
                let Some(addr) = p.input_address() else {
                    bail!("--input given but {} has no `input` label", input.display());
                };
                state
                    .store(addr, 4, word)
                    .map_err(|t| anyhow::anyhow!("storing input: {t}"))?;
            }
            let r = simulate_from(&p, &sc, state)?;
            emit_json(report, "sim.json", cfg, &r)
        }
        Command::SoftDeobf {
            input,
            mode,
            key,
            mask_file,
            per_branch_cost,
            mask_lookup_cost,
            report,
        } => {
            let mode: SoftMode = mode.parse().map_err(usage)?;
            let p = read_program(&input)?;
            let mask = match (mask_file, key_of(&key, cfg)?) {
                (Some(m), _) => read_mask(&m)?,
                (None, Some(k)) => mask_from_key(&p, &cfg.scheme(key.scheme.as_deref())?, k),
                (None, None) => InversionMask::identity(&p),
            };
            let mut model = SoftDeobfModel::new(mode);
            model.per_branch_cost = per_branch_cost
                .or(cfg.per_branch_cost)
                .unwrap_or(model.per_branch_cost);
            model.mask_lookup_cost = mask_lookup_cost
                .or(cfg.mask_lookup_cost)
                .unwrap_or(model.mask_lookup_cost);
            let base = simulate(&p, &SimConfig::baseline())?;
            let r = estimate_overhead(&p, &mask, &model, &base)?;
            emit_json(report, "soft-deobf.json", cfg, &r)
        }
        Command::Stealth {
            corpus,
            synthetic,
            skewed,
            seed,
            key,
            window,
            model,
            split_seed,
            noise_labels,
            dataset,
            report,
        } => {
            let k = require_key(&key, cfg)?;
            let scheme = cfg.scheme(key.scheme.as_deref())?;
            let windows = match window {
                Some(w) => parse_windows(&w).map_err(|e| usage(format!("--window: {e}")))?,
                None => cfg.windows.clone().unwrap_or_else(|| vec![1]),
            };
            let model = match model {
                Some(m) => m.parse::<ModelKind>().map_err(usage)?,
                None => cfg.model.unwrap_or(ModelKind::LogisticRegression),
            };
            let split_seed = split_seed.or(cfg.split_seed).unwrap_or(0);
            let programs = match synthetic {
                Some(n) => drndalo_core::corpus::synthetic_corpus(&gen_config(skewed), n, seed),
                None => corpus_or_bundled(corpus, cfg)?,
            };
            let max = windows.iter().copied().max().unwrap_or(1);
            let mut samples = build_dataset(&programs, k, &scheme, max)?;
            if let Some(s) = noise_labels {
                relabel_with_coin(&mut samples, s);
            }
            if let Some(path) = dataset {
                write_text(Some(&path), &write_dataset(&samples))?;
            }
            let reports = sweep_samples(&samples, &windows, model, split_seed)?;
            emit_json(report, "stealth.json", cfg, &reports)
        }
        Command::Attack {
            obf,
            plain,
            exhaustive,
            trials,
            inputs,
            seed,
            max_cycles,
            report,
        } => {
            let o = read_program(&obf)?;
            let p = read_program(&plain)?;
            let mode = match (exhaustive, trials) {
                (true, _) => AttackMode::Exhaustive,
                (false, Some(t)) => AttackMode::Sampled { trials: t, seed },
                (false, None) if p.branch_count() <= MAX_EXHAUSTIVE_BRANCHES => {
                    AttackMode::Exhaustive
                }
                (false, None) => AttackMode::Sampled {
                    trials: 100_000,
                    seed,
                },
            };
            let r = brute_force(&o, &p, mode)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let words: Vec<u32> = (0..inputs).map(|_| rng.gen()).collect();
            let limit = max_cycles.or(cfg.max_cycles).unwrap_or(DEFAULT_MAX_CYCLES);
            let d = measure_divergence_with(&p, &o, &words, limit);
            let out = AttackOutput {
                attack: r.with_divergence(&d),
                divergence_detail: d,
            };
            emit_json(report, "attack.json", cfg, &out)
        }
        Command::Bench {
            corpus,
            key,
            sim,
            out,
        } => {
            let k = require_key(&key, cfg)?;
            let scheme = cfg.scheme(key.scheme.as_deref())?;
            let programs = corpus_or_bundled(corpus, cfg)?;
            let base_cfg = sim_config(&sim, cfg);
            let rows: Vec<Result<String>> = programs
                .par_iter()
                .map(|(name, p)| bench_rows(name, p, &scheme, k, &base_cfg))
                .collect();
            let mut csv = String::from(
                "program,design,cycles,instructions,branches,stall_cycles,cache_misses,normalized,overhead\n",
            );
            for r in rows {
                csv.push_str(&r?);
            }
            write_text(out.as_deref(), &csv)
        }
        Command::Corpus {
            out,
            synthetic,
            skewed,
            seed,
        } => {
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let files: Vec<(String, String)> = match synthetic {
                Some(n) => (0..n)
                    .map(|i| {
                        let s = seed
                            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                            .wrapping_add(i as u64);
                        (
                            format!("syn{i:03}"),
                            generate_source(&gen_config(skewed), s),
                        )
                    })
                    .collect(),
                None => BUNDLED
                    .iter()
                    .map(|(n, s)| (n.to_string(), s.to_string()))
                    .collect(),
            };
            for (name, src) in &files {
                let path = out.join(format!("{name}.s"));
                fs::write(&path, src).with_context(|| format!("writing {}", path.display()))?;
            }
            eprintln!("wrote {} programs to {}", files.len(), out.display());
            Ok(())
        }
    }
}

fn bench_rows(
    name: &str,
    p: &Program,
    scheme: &HashScheme,
    key: ObfKey,
    base_cfg: &SimConfig,
) -> Result<String> {
    let ctx = || format!("benchmarking {name}");
    let base = simulate(
        p,
        &SimConfig {
            design: Design::Baseline,
            ..base_cfg.clone()
        },
    )
    .with_context(ctx)?;
    let (obf, mask) = obfuscate(p, scheme, key);
    let mut text = String::new();
    for design in Design::ALL {
        let cfg = SimConfig {
            design,
            scheme: design.is_keyed().then(|| scheme.clone()),
            key: design.is_keyed().then_some(key),
            mask: (design == Design::MaskBased).then(|| mask.clone()),
            ..base_cfg.clone()
        };
        let prog = if design == Design::Baseline { p } else { &obf };
        let r = simulate(prog, &cfg).with_context(ctx)?;
        let o = overhead(&r, &base).with_context(ctx)?;
        let _ = writeln!(
            text,
            "{name},{},{},{},{},{},{},{:.6},{:.6}",
            design.cli_name(),
            r.cycles,
            r.instructions,
            r.branches,
            r.stall_cycles,
            r.cache_misses,
            r.cycles as f64 / base.cycles as f64,
            o
        );
    }
    Ok(text)
}
