//! Python bindings: `import drndalo`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use drndalo_core::attack::{brute_force, measure_divergence, AttackMode};
use drndalo_core::corpus;
use drndalo_core::hash::LfsrConfig;
use drndalo_core::obfuscate as obf;
use drndalo_core::sim::{self, Design, SimConfig};
use drndalo_core::softdeobf::{estimate_overhead, SoftDeobfModel, SoftMode};
use drndalo_core::stealth::{self, ModelKind};
use drndalo_core::{HashScheme, InversionMask, ObfKey};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_key(key: &str) -> PyResult<ObfKey> {
    key.parse().map_err(value_err)
}

fn parse_scheme(name: &str) -> PyResult<HashScheme> {
    match name {
        "lfsr" => Ok(HashScheme::Lfsr(LfsrConfig::sixteen_cycle())),
        "lfsr8" => Ok(HashScheme::Lfsr(LfsrConfig::eight_cycle())),
        "mix64" => Ok(HashScheme::Mix64),
        _ => Err(PyValueError::new_err(format!(
            "unknown scheme `{name}` (expected lfsr, lfsr8 or mix64)"
        ))),
    }
}

/// An assembled program.
#[pyclass(name = "Program", module = "drndalo", eq, frozen, from_py_object)]
#[derive(Clone, Debug, PartialEq)]
pub struct PyProgram(drndalo_core::Program);

#[pymethods]
impl PyProgram {
    #[new]
    fn new(source: &str) -> PyResult<Self> {
        drndalo_core::parse_asm(source)
            .map(PyProgram)
            .map_err(value_err)
    }

    fn to_asm(&self) -> String {
        drndalo_core::print_asm(&self.0)
    }

    #[getter]
    fn branch_count(&self) -> usize {
        self.0.branch_count()
    }

    fn branch_addresses(&self) -> Vec<u32> {
        self.0.branches().map(|b| b.address).collect()
    }

    /// Mnemonic of every conditional branch, in address order.
    fn branch_opcodes(&self) -> Vec<&'static str> {
        self.0.branches().map(|b| b.opcode.mnemonic()).collect()
    }

    fn __len__(&self) -> usize {
        self.0.text().len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Program({} instructions, {} branches)",
            self.0.text().len(),
            self.0.branch_count()
        )
    }
}

/// Per-branch inversion bits.
#[pyclass(name = "Mask", module = "drndalo", eq, frozen, skip_from_py_object)]
#[derive(Clone, Debug, PartialEq)]
pub struct PyMask(InversionMask);

#[pymethods]
impl PyMask {
    #[staticmethod]
    fn from_file(text: &str) -> PyResult<Self> {
        InversionMask::parse_mask_file(text)
            .map(PyMask)
            .map_err(value_err)
    }

    #[staticmethod]
    fn from_bits(bits: Vec<(u32, bool)>) -> Self {
        PyMask(InversionMask::from_entries(bits))
    }

    fn to_file(&self) -> String {
        self.0.to_mask_file()
    }

    fn bits(&self) -> Vec<(u32, bool)> {
        self.0.iter().collect()
    }

    #[getter]
    fn inverted_count(&self) -> usize {
        self.0.inverted_count()
    }

    fn __len__(&self) -> usize {
        self.0.branch_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mask({} branches, {} inverted)",
            self.0.branch_count(),
            self.0.inverted_count()
        )
    }
}

#[pyclass(
    name = "SimReport",
    module = "drndalo",
    get_all,
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
pub struct PySimReport {
    cycles: u64,
    instructions: u64,
    branches: u64,
    taken_branches: u64,
    stall_cycles: u64,
    cache_hits: u64,
    cache_misses: u64,
    trace_digest: u64,
    exit_code: i32,
    output_bytes: Vec<u8>,
}

impl From<sim::SimReport> for PySimReport {
    fn from(r: sim::SimReport) -> Self {
        PySimReport {
            cycles: r.cycles,
            instructions: r.instructions,
            branches: r.branches,
            taken_branches: r.taken_branches,
            stall_cycles: r.stall_cycles,
            cache_hits: r.cache_hits,
            cache_misses: r.cache_misses,
            trace_digest: r.trace_digest,
            exit_code: r.exit_code,
            output_bytes: r.output_bytes,
        }
    }
}

#[pymethods]
impl PySimReport {
    #[getter]
    fn output(&self) -> String {
        String::from_utf8_lossy(&self.output_bytes).into_owned()
    }

    fn __repr__(&self) -> String {
        format!(
            "SimReport(cycles={}, instructions={}, exit_code={})",
            self.cycles, self.instructions, self.exit_code
        )
    }
}

#[pyfunction]
fn parse_asm(source: &str) -> PyResult<PyProgram> {
    PyProgram::new(source)
}

#[pyfunction]
fn print_asm(program: &PyProgram) -> String {
    program.to_asm()
}

#[pyfunction]
#[pyo3(signature = (program, key, scheme = "lfsr"))]
fn obfuscate(program: &PyProgram, key: &str, scheme: &str) -> PyResult<(PyProgram, PyMask)> {
    let (p, m) = obf::obfuscate(&program.0, &parse_scheme(scheme)?, parse_key(key)?);
    Ok((PyProgram(p), PyMask(m)))
}

#[pyfunction]
#[pyo3(signature = (program, key, scheme = "lfsr"))]
fn deobfuscate(program: &PyProgram, key: &str, scheme: &str) -> PyResult<PyProgram> {
    Ok(PyProgram(obf::deobfuscate(
        &program.0,
        &parse_scheme(scheme)?,
        parse_key(key)?,
    )))
}

#[pyfunction]
fn apply_mask(program: &PyProgram, mask: &PyMask) -> PyResult<PyProgram> {
    mask.0.check_covers(&program.0).map_err(value_err)?;
    Ok(PyProgram(obf::apply_mask(&program.0, &mask.0)))
}

/// Rewrites an obfuscated program so that it undoes its own inversions
/// from a mask table. Returns the new program.
#[pyfunction]
fn emit_runtime_deobf(program: &PyProgram, mask: &PyMask) -> PyResult<PyProgram> {
    obf::emit_runtime_deobf(&program.0, &mask.0)
        .map(|rt| PyProgram(rt.program))
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (
    program,
    design = "baseline",
    key = None,
    scheme = "lfsr",
    mask = None,
    hash_cycles = 16,
    cache_lines = 256,
    max_cycles = sim::DEFAULT_MAX_CYCLES,
))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    program: &PyProgram,
    design: &str,
    key: Option<&str>,
    scheme: &str,
    mask: Option<&PyMask>,
    hash_cycles: u32,
    cache_lines: usize,
    max_cycles: u64,
) -> PyResult<PySimReport> {
    let design: Design = design.parse().map_err(PyValueError::new_err)?;
    let mut cfg = SimConfig {
        design,
        hash_cycles,
        cache_lines,
        max_cycles,
        ..SimConfig::default()
    };
    if design.is_keyed() {
        let key = key.ok_or_else(|| PyValueError::new_err("this design needs a key"))?;
        cfg.key = Some(parse_key(key)?);
        cfg.scheme = Some(parse_scheme(scheme)?);
    }
    if design == Design::MaskBased {
        let mask = mask.ok_or_else(|| PyValueError::new_err("the mask design needs a mask"))?;
        cfg.mask = Some(mask.0.clone());
    }
    sim::simulate(&program.0, &cfg)
        .map(PySimReport::from)
        .map_err(runtime_err)
}

/// `cycles / baseline.cycles - 1`; raises if the two runs disagree.
#[pyfunction]
fn overhead(report: &PySimReport, baseline: &PySimReport) -> PyResult<f64> {
    let strip = |r: &PySimReport| sim::SimReport {
        cycles: r.cycles,
        instructions: r.instructions,
        branches: r.branches,
        taken_branches: r.taken_branches,
        stall_cycles: r.stall_cycles,
        cache_hits: r.cache_hits,
        cache_misses: r.cache_misses,
        trace_digest: r.trace_digest,
        exit_code: r.exit_code,
        output_bytes: r.output_bytes.clone(),
    };
    sim::overhead(&strip(report), &strip(baseline)).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (program, mode, mask = None, per_branch_cost = 10))]
fn soft_deobf<'py>(
    py: Python<'py>,
    program: &PyProgram,
    mode: &str,
    mask: Option<&PyMask>,
    per_branch_cost: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: SoftMode = mode.parse().map_err(PyValueError::new_err)?;
    let mask = mask.map_or_else(|| InversionMask::identity(&program.0), |m| m.0.clone());
    let model = SoftDeobfModel {
        per_branch_cost,
        ..SoftDeobfModel::new(mode)
    };
    let base = sim::simulate(&program.0, &SimConfig::baseline()).map_err(runtime_err)?;
    let r = estimate_overhead(&program.0, &mask, &model, &base).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("mode", r.mode.cli_name())?;
    d.set_item("per_branch_cost", r.per_branch_cost)?;
    d.set_item("baseline_instructions", r.baseline_instructions)?;
    d.set_item("dynamic_branches", r.dynamic_branches)?;
    d.set_item("distinct_branches", r.distinct_branches)?;
    d.set_item("extra_instructions", r.extra_instructions)?;
    d.set_item("overhead", r.overhead)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (obfuscated, plain, trials = None, seed = 0, inputs = Vec::new()))]
fn attack<'py>(
    py: Python<'py>,
    obfuscated: &PyProgram,
    plain: &PyProgram,
    trials: Option<u64>,
    seed: u64,
    inputs: Vec<u32>,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = match trials {
        Some(trials) => AttackMode::Sampled { trials, seed },
        None => AttackMode::Exhaustive,
    };
    let r = brute_force(&obfuscated.0, &plain.0, mode).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("n", r.n)?;
    d.set_item("trials", r.trials)?;
    d.set_item("successes", r.successes)?;
    d.set_item("empirical_p", r.empirical_p)?;
    d.set_item("theoretical_p", r.theoretical_p)?;
    d.set_item("recovered", r.recovered.map(PyMask))?;
    if !inputs.is_empty() {
        let div = measure_divergence(&plain.0, &obfuscated.0, &inputs);
        d.set_item("divergence", div.divergence)?;
        d.set_item("timeouts", div.timeouts)?;
    }
    Ok(d)
}

/// `(name, Program)` for every bundled program.
#[pyfunction]
fn bundled_corpus() -> Vec<(String, PyProgram)> {
    corpus::bundled()
        .into_iter()
        .map(|(n, p)| (n, PyProgram(p)))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (count, seed = 0, skewed = false))]
fn synthetic_corpus(count: usize, seed: u64, skewed: bool) -> Vec<(String, PyProgram)> {
    let cfg = if skewed {
        corpus::GenConfig::skewed()
    } else {
        corpus::GenConfig::default()
    };
    corpus::synthetic_corpus(&cfg, count, seed)
        .into_iter()
        .map(|(n, p)| (n, PyProgram(p)))
        .collect()
}

/// Classifier accuracy per window size, as a list of dicts.
#[pyfunction]
#[pyo3(signature = (programs, key, windows = vec![1], model = "logreg", scheme = "lfsr", split_seed = 0))]
fn stealth_sweep<'py>(
    py: Python<'py>,
    programs: Vec<(String, PyProgram)>,
    key: &str,
    windows: Vec<usize>,
    model: &str,
    scheme: &str,
    split_seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let model: ModelKind = model.parse().map_err(PyValueError::new_err)?;
    let corpus: Vec<_> = programs.into_iter().map(|(n, p)| (n, p.0)).collect();
    let reports = stealth::window_sweep(
        &corpus,
        parse_key(key)?,
        &parse_scheme(scheme)?,
        &windows,
        model,
        split_seed,
    )
    .map_err(value_err)?;
    reports
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("window_size", r.window_size)?;
            d.set_item("accuracy", r.accuracy)?;
            d.set_item("confusion", r.confusion.map(|row| row.to_vec()).to_vec())?;
            d.set_item("train_samples", r.train_samples)?;
            d.set_item("test_samples", r.test_samples)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn drndalo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProgram>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PySimReport>()?;
    m.add_function(wrap_pyfunction!(parse_asm, m)?)?;
    m.add_function(wrap_pyfunction!(print_asm, m)?)?;
    m.add_function(wrap_pyfunction!(obfuscate, m)?)?;
    m.add_function(wrap_pyfunction!(deobfuscate, m)?)?;
    m.add_function(wrap_pyfunction!(apply_mask, m)?)?;
    m.add_function(wrap_pyfunction!(emit_runtime_deobf, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(overhead, m)?)?;
    m.add_function(wrap_pyfunction!(soft_deobf, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(bundled_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(stealth_sweep, m)?)?;
    Ok(())
}
