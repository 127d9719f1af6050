//! `key = value` tool configuration, loaded from `$DRNDALO_CONFIG`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use drndalo_core::hash::LfsrConfig;
use drndalo_core::sim::Design;
use drndalo_core::stealth::ModelKind;
use drndalo_core::{HashScheme, ObfKey};

pub const ENV_VAR: &str = "DRNDALO_CONFIG";

/// Every value is optional; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ToolConfig {
    pub key: Option<ObfKey>,
    pub scheme: Option<String>,
    pub lfsr_n: Option<u32>,
    pub lfsr_k: Option<u32>,
    pub lfsr_taps: Option<u64>,
    pub design: Option<Design>,
    pub hash_cycles: Option<u32>,
    pub cache_lines: Option<usize>,
    pub branch_penalty: Option<u32>,
    pub overlap: Option<u32>,
    pub max_cycles: Option<u64>,
    pub per_branch_cost: Option<u64>,
    pub mask_lookup_cost: Option<u64>,
    pub windows: Option<Vec<usize>>,
    pub model: Option<ModelKind>,
    pub split_seed: Option<u64>,
    pub corpus_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

fn parse_hex(v: &str) -> Result<u64> {
    let digits = v.strip_prefix("0x").unwrap_or(v);
    u64::from_str_radix(digits, 16).map_err(|_| anyhow!("`{v}` is not a hex number"))
}

pub fn parse_windows(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("`{w}` is not a window size"))
        })
        .collect()
}

pub fn parse_scheme_name(v: &str) -> Result<String> {
    match v {
        "lfsr" | "mix64" => Ok(v.to_string()),
        _ => bail!("unknown scheme `{v}` (expected lfsr or mix64)"),
    }
}

impl ToolConfig {
    pub fn parse(text: &str) -> Result<ToolConfig> {
        let mut c = ToolConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            c.set(k, v)
                .with_context(|| format!("line {}: `{k}`", i + 1))?;
        }
        Ok(c)
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let int = || {
            v.parse::<u64>()
                .map_err(|_| anyhow!("`{v}` is not a number"))
        };
        match k {
            "key" => self.key = Some(v.parse()?),
            "scheme" => self.scheme = Some(parse_scheme_name(v)?),
            "lfsr.n" => self.lfsr_n = Some(int()? as u32),
            "lfsr.k" => self.lfsr_k = Some(int()? as u32),
            "lfsr.taps" => self.lfsr_taps = Some(parse_hex(v)?),
            "sim.design" => self.design = Some(v.parse().map_err(|e: String| anyhow!(e))?),
            "sim.hash_cycles" => self.hash_cycles = Some(int()? as u32),
            "sim.cache_lines" => self.cache_lines = Some(int()? as usize),
            "sim.branch_penalty" => self.branch_penalty = Some(int()? as u32),
            "sim.overlap" => self.overlap = Some(int()? as u32),
            "sim.max_cycles" => self.max_cycles = Some(int()?),
            "soft.per_branch_cost" => self.per_branch_cost = Some(int()?),
            "soft.mask_lookup_cost" => self.mask_lookup_cost = Some(int()?),
            "stealth.windows" => self.windows = Some(parse_windows(v)?),
            "stealth.model" => self.model = Some(v.parse().map_err(|e: String| anyhow!(e))?),
            "stealth.split_seed" => self.split_seed = Some(int()?),
            "paths.corpus" => self.corpus_dir = Some(PathBuf::from(v)),
            "paths.reports" => self.report_dir = Some(PathBuf::from(v)),
            _ => bail!("unknown configuration key"),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ToolConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        ToolConfig::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// The file named by `$DRNDALO_CONFIG`, or an empty config.
    pub fn from_env() -> Result<ToolConfig> {
        match std::env::var_os(ENV_VAR) {
            Some(p) if !p.is_empty() => ToolConfig::load(Path::new(&p)),
            _ => Ok(ToolConfig::default()),
        }
    }

    /// The hash scheme named by `flag`, else by the config, else LFSR.
    pub fn scheme(&self, flag: Option<&str>) -> Result<HashScheme> {
        let name = flag.or(self.scheme.as_deref()).unwrap_or("lfsr");
        match parse_scheme_name(name)?.as_str() {
            "mix64" => Ok(HashScheme::Mix64),
            _ => Ok(HashScheme::Lfsr(self.lfsr()?)),
        }
    }

    pub fn lfsr(&self) -> Result<LfsrConfig> {
        let d = LfsrConfig::default();
        Ok(LfsrConfig::new(
            self.lfsr_n.unwrap_or(d.n()),
            self.lfsr_k.unwrap_or(d.k()),
            self.lfsr_taps.unwrap_or(d.taps()),
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let c = ToolConfig::parse(
            "# comment\nkey = 00000000deadbeef\nscheme = mix64\nlfsr.n = 7\nlfsr.k = 8\n\
             lfsr.taps = 0x3\nsim.design = cache\nsim.hash_cycles = 8\nsim.cache_lines = 64\n\
             sim.branch_penalty = 3\nsim.overlap = 0\nsim.max_cycles = 1000\n\
             soft.per_branch_cost = 4\nsoft.mask_lookup_cost = 2\nstealth.windows = 1, 2,4\n\
             stealth.model = tree\nstealth.split_seed = 5\npaths.corpus = c\npaths.reports = r\n",
        )
        .unwrap();
        assert_eq!(c.key, Some(ObfKey(0xdead_beef)));
        assert_eq!(c.design, Some(Design::CachedHash));
        assert_eq!(c.windows, Some(vec![1, 2, 4]));
        assert_eq!(c.model, Some(ModelKind::DecisionTree));
        assert_eq!(c.lfsr().unwrap(), LfsrConfig::eight_cycle());
        assert_eq!(c.scheme(None).unwrap(), HashScheme::Mix64);
        assert!(matches!(
            c.scheme(Some("lfsr")).unwrap(),
            HashScheme::Lfsr(_)
        ));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(ToolConfig::parse("colour = red").is_err());
        assert!(ToolConfig::parse("key").is_err());
        assert!(ToolConfig::parse("key = 12").is_err());
        assert!(ToolConfig::parse("lfsr.taps = zz").is_err());
        assert!(ToolConfig::parse("scheme = aes").is_err());
    }

    #[test]
    fn invalid_lfsr_rejected_on_use() {
        let c = ToolConfig::parse("lfsr.n = 16\nlfsr.k = 16").unwrap();
        assert!(c.lfsr().is_err());
    }
}
