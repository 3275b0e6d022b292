//! Python bindings: model construction, checkpoints, the semantic mask,
//! sampling, training phases, scoring and the synthetic world.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use motbridge::bridge::{build_mask, mask_from_states, SemanticMask};
use motbridge::evalkit::{overall_score, run_benchmark, scores_from_counts, BenchmarkConfig, Counts};
use motbridge::model::{load_checkpoint, sample_generate_full, save_checkpoint, Expert, MaskPolicy, ModelConfig, Weights};
use motbridge::numkit::Tensor;
use motbridge::probe::{context_activations, separation, top_fraction_mask};
use motbridge::synthworld::vocab::render_instruction;
use motbridge::synthworld::{gen_sample, Sample, SuiteSpec, TaskKind};
use motbridge::trainer::{run_phase, Phase, StageConfig};

fn err(e: motbridge::Error) -> PyErr {
    match e {
        e @ motbridge::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn policy(tau: Option<f64>) -> MaskPolicy {
    match tau {
        Some(tau) => MaskPolicy::Active { tau },
        None => MaskPolicy::Off,
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Tensor::new(vec![n, cols], rows.into_iter().flatten().collect()).map_err(err)
}

/// One generated task instance.
#[pyclass(name = "Sample", frozen, from_py_object)]
#[derive(Clone)]
struct PySample(Sample);

#[pymethods]
impl PySample {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(json_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(json_err)
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.0.task.name()
    }

    #[getter]
    fn instruction(&self) -> Vec<usize> {
        self.0.instruction.clone()
    }

    fn instruction_text(&self) -> String {
        render_instruction(&self.0.instruction)
    }

    /// Target scene as JSON.
    fn target_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0.target).map_err(json_err)
    }

    #[getter]
    fn n_references(&self) -> usize {
        self.0.references.len()
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, task={:?})", self.0.id, self.0.task.name())
    }
}

/// Per-reference-token visibility produced by the bridge.
#[pyclass(name = "SemanticMask", frozen)]
struct PyMask(SemanticMask);

#[pymethods]
impl PyMask {
    #[getter]
    fn visible(&self) -> Vec<bool> {
        self.0.visible.clone()
    }

    #[getter]
    fn relevance(&self) -> Vec<f64> {
        self.0.relevance.clone()
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.0.threshold
    }

    #[getter]
    fn fallback_applied(&self) -> bool {
        self.0.fallback_applied
    }

    fn visible_count(&self) -> usize {
        self.0.visible_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "SemanticMask(visible={}/{}, tau={}, fallback={})",
            self.0.visible_count(),
            self.0.visible.len(),
            self.0.threshold,
            self.0.fallback_applied
        )
    }
}

/// Two-expert transformer weights.
#[pyclass(name = "Model")]
struct PyModel(Weights<f32>);

#[pymethods]
impl PyModel {
    /// Fresh weights. `config_json` must be a complete model config; omit it
    /// for the default.
    #[new]
    #[pyo3(signature = (seed=0, config_json=None))]
    fn new(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let cfg = match config_json {
            Some(t) => serde_json::from_str(t).map_err(json_err)?,
            None => ModelConfig::default(),
        };
        Weights::init(&cfg, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.0, &path).map_err(err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0.config).map_err(json_err)
    }

    fn semantic_mask(&self, sample: &PySample, tau: f64) -> PyResult<PyMask> {
        let acts = context_activations(&sample.0, &self.0).map_err(err)?;
        motbridge::bridge::compute_mask_from_activations(&acts, &self.0.config, tau)
            .map(PyMask)
            .map_err(err)
    }

    /// Samples the target scene; returns its JSON. `tau=None` disables the mask.
    #[pyo3(signature = (sample, steps=8, tau=Some(0.88), seed=0))]
    fn generate(&self, sample: &PySample, steps: usize, tau: Option<f64>, seed: u64) -> PyResult<String> {
        let g = sample_generate_full(&sample.0.references, &sample.0.instruction, steps, policy(tau), &self.0, seed)
            .map_err(err)?;
        serde_json::to_string(&g.scene).map_err(json_err)
    }

    /// Runs one curriculum phase in place and returns the per-step losses.
    #[pyo3(signature = (phase, steps, seed=0, tau=0.88))]
    fn train_phase(&mut self, phase: &str, steps: usize, seed: u64, tau: f64) -> PyResult<Vec<f64>> {
        let phase: Phase = serde_json::from_value(serde_json::Value::String(phase.into())).map_err(json_err)?;
        let mut cfg = StageConfig::default_for(phase);
        cfg.steps = steps;
        cfg.seed = seed;
        cfg.tau = tau;
        let w = self.0.clone();
        let (w, report) = run_phase(&cfg, w, None).map_err(err)?;
        self.0 = w;
        Ok(report.losses)
    }

    /// Benchmark report as JSON.
    #[pyo3(signature = (samples, rounds=1, scorings=1, steps=8, tau=Some(0.88), base_seed=0))]
    fn evaluate(
        &self,
        samples: Vec<PySample>,
        rounds: usize,
        scorings: usize,
        steps: usize,
        tau: Option<f64>,
        base_seed: u64,
    ) -> PyResult<String> {
        let suite: Vec<Sample> = samples.into_iter().map(|s| s.0).collect();
        let cfg = BenchmarkConfig {
            rounds,
            scorings,
            base_seed,
            sampling_steps: steps,
            policy: policy(tau),
        };
        let (report, _) = run_benchmark("python", &suite, &self.0, &cfg).map_err(err)?;
        serde_json::to_string(&report).map_err(json_err)
    }

    /// Fraction of samples whose target cells out-score distractor cells at
    /// `layer` of the understanding expert.
    fn probe_separation(&self, samples: Vec<PySample>, layer: usize) -> PyResult<f64> {
        let suite: Vec<Sample> = samples.into_iter().map(|s| s.0).collect();
        separation(&suite, &self.0, layer, Expert::Understanding)
            .map(|s| s.fraction)
            .map_err(err)
    }
}

#[pyfunction(name = "gen_sample")]
#[pyo3(signature = (task, seed, grid=(6, 6)))]
fn py_gen_sample(task: &str, seed: u64, grid: (usize, usize)) -> PyResult<PySample> {
    let kind: TaskKind = task.parse().map_err(err)?;
    gen_sample(kind, seed, grid).map(PySample).map_err(err)
}

/// `per_task` samples of each listed task kind, seeds counting from `seed_start`.
#[pyfunction]
#[pyo3(signature = (tasks, per_task, seed_start=0, grid=(6, 6)))]
fn gen_suite(tasks: Vec<String>, per_task: usize, seed_start: u64, grid: (usize, usize)) -> PyResult<Vec<PySample>> {
    let tasks = tasks
        .iter()
        .map(|t| t.parse::<TaskKind>())
        .collect::<motbridge::Result<Vec<_>>>()
        .map_err(err)?;
    let spec = SuiteSpec {
        tasks,
        per_task,
        seed_start,
        grid,
    };
    Ok(spec.generate().map_err(err)?.into_iter().map(PySample).collect())
}

/// Relevance of each visual row to the text rows, and the mask at `tau`.
#[pyfunction]
fn semantic_mask(visual: Vec<Vec<f64>>, text: Vec<Vec<f64>>, tau: f64) -> PyResult<PyMask> {
    let hv = matrix(visual)?;
    let ht = matrix(text)?;
    mask_from_states(&hv, &ht, tau, 0).map(PyMask).map_err(err)
}

#[pyfunction]
fn mask_from_scores(scores: Vec<f64>, tau: f64) -> PyMask {
    PyMask(build_mask(&scores, tau))
}

/// (accuracy, precision, recall, f1, distinction) from confusion counts.
#[pyfunction]
fn distinction_scores(tp: usize, fp: usize, fn_: usize, tn: usize) -> PyResult<(f64, f64, f64, f64, f64)> {
    let s = scores_from_counts(Counts { tp, fp, fn_, tn }).map_err(err)?;
    Ok((s.accuracy, s.precision, s.recall, s.f1, s.distinction))
}

#[pyfunction]
fn overall(composition: f64, distinction: f64) -> f64 {
    overall_score(composition, distinction)
}

#[pyfunction(name = "top_fraction_mask")]
fn py_top_fraction_mask(scores: Vec<f64>, fraction: f64) -> PyResult<Vec<bool>> {
    top_fraction_mask(&scores, fraction).map_err(err)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    motbridge::cli::main_with(std::iter::once("motbridge".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "motbridge")]
fn motbridge_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(py_gen_sample, m)?)?;
    m.add_function(wrap_pyfunction!(gen_suite, m)?)?;
    m.add_function(wrap_pyfunction!(semantic_mask, m)?)?;
    m.add_function(wrap_pyfunction!(mask_from_scores, m)?)?;
    m.add_function(wrap_pyfunction!(distinction_scores, m)?)?;
    m.add_function(wrap_pyfunction!(overall, m)?)?;
    m.add_function(wrap_pyfunction!(py_top_fraction_mask, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
