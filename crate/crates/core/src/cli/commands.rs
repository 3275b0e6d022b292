//! The six pipeline commands. Each reads its inputs from files, writes its
//! results under the output root and returns a summary value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bridge::compute_mask_from_activations;
use crate::error::{Error, Result};
use crate::evalkit::{
    case_verdicts, run_benchmark, score_composition, write_report, write_verdict_log, BenchmarkConfig, ScoreReport,
};
use crate::model::{load_checkpoint, sample_generate_full, save_checkpoint, MaskPolicy, Weights};
use crate::probe::{context_activations, run_probe, ProbeIndex};
use crate::synthworld::{read_suite, write_suite, Sample, SuiteSpec};
use crate::trainer::{run_ablation_variant, run_curriculum, run_phase, AblationVariant, TrainReport};

use super::config::RunConfig;

/// Fixed directory names under the output root.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub root: PathBuf,
}

impl Outputs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn probes(&self) -> PathBuf {
        self.root.join("probes")
    }
    /// Wall-clock sidecars; kept apart so reports stay reproducible.
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn seed_checkpoints(&self, seed: u64) -> PathBuf {
        self.checkpoints().join(format!("seed-{seed}"))
    }
    pub fn eval_suite(&self) -> PathBuf {
        self.datasets().join("eval.jsonl")
    }
    pub fn ablation_suite(&self) -> PathBuf {
        self.datasets().join("ablation.jsonl")
    }
    pub fn probe_suite(&self) -> PathBuf {
        self.datasets().join("probe.jsonl")
    }

    /// `path` relative to the root when it lies below it.
    pub fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_config(value: impl Serialize, cfg: &RunConfig) -> Result<Value> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(m) = &mut v {
        m.insert("run_config".into(), cfg.echo());
    }
    Ok(v)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "suite".into())
}

/// Reads `path`, or generates `spec` when no file is given.
fn load_or_generate(path: Option<&Path>, spec: &SuiteSpec, default_name: &str) -> Result<(String, Vec<Sample>)> {
    match path {
        Some(p) => Ok((file_stem(p), read_suite(p)?)),
        None => Ok((default_name.to_string(), spec.generate()?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFile {
    pub name: String,
    pub path: String,
    pub samples: usize,
    pub per_task: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataIndex {
    pub suites: Vec<SuiteFile>,
}

/// Writes the evaluation, ablation and probe suites as NDJSON.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Outputs) -> Result<DataIndex> {
    let mut suites = Vec::new();
    for (name, spec, path) in [
        ("eval", &cfg.eval.suite, out.eval_suite()),
        ("ablation", &cfg.ablation.suite, out.ablation_suite()),
        ("probe", &cfg.probe.suite, out.probe_suite()),
    ] {
        let samples = spec.generate()?;
        write_suite(&path, &samples)?;
        let mut per_task = BTreeMap::new();
        for s in &samples {
            *per_task.entry(s.task.name().to_string()).or_insert(0) += 1;
        }
        suites.push(SuiteFile {
            name: name.into(),
            path: out.rel(&path),
            samples: samples.len(),
            per_task,
        });
    }
    let index = DataIndex { suites };
    write_json(&out.datasets().join("index.json"), &with_config(&index, cfg)?)?;
    Ok(index)
}

fn train_report_value(r: &TrainReport, out: &Outputs, cfg: &RunConfig) -> Result<Value> {
    let mut r = r.clone();
    r.checkpoint = r.checkpoint.map(|c| out.rel(Path::new(&c)));
    with_config(&r, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTraining {
    pub seed: u64,
    pub checkpoints: Vec<String>,
    pub final_losses: Vec<f64>,
}

/// Runs the three-phase curriculum once per configured seed.
pub fn cmd_train(cfg: &RunConfig, out: &Outputs) -> Result<Vec<SeedTraining>> {
    let mut summary = Vec::new();
    for &seed in &cfg.seeds {
        let stages = cfg.stages_for(seed);
        let ckpt_dir = out.seed_checkpoints(seed);
        let run = run_curriculum(&cfg.model, [&stages[0], &stages[1], &stages[2]], seed, Some(&ckpt_dir))?;
        let report_dir = out.reports().join("train").join(format!("seed-{seed}"));
        let mut timing = BTreeMap::new();
        for r in &run.reports {
            let phase = r.phase.name();
            write_json(&report_dir.join(format!("{phase}.json")), &train_report_value(r, out, cfg)?)?;
            write_text(&report_dir.join(format!("{phase}-loss.csv")), &r.loss_csv())?;
            timing.insert(phase.to_string(), r.wall_clock_secs);
        }
        write_json(&out.logs().join(format!("train-seed-{seed}-timing.json")), &timing)?;
        summary.push(SeedTraining {
            seed,
            checkpoints: run.checkpoints.iter().map(|p| out.rel(p)).collect(),
            final_losses: run.reports.iter().map(|r| r.losses.last().copied().unwrap_or(f64::NAN)).collect(),
        });
    }
    write_json(&out.reports().join("train").join("summary.json"), &with_config(&summary, cfg)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResult {
    pub sample_id: String,
    pub checkpoint: String,
    pub noise_seed: u64,
    pub sampling_steps: usize,
    pub policy: MaskPolicy,
    pub visible_tokens: Option<usize>,
    pub mask_fallback: Option<bool>,
    pub composition: f64,
    pub verdicts: Vec<crate::evalkit::PresenceVerdict>,
    pub output: crate::synthworld::Scene,
    pub target: crate::synthworld::Scene,
}

/// Generates one sample of a suite file with the noise seed `cfg.seeds[0]`.
pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    suite: &Path,
    index: usize,
    out: &Outputs,
) -> Result<GenerateResult> {
    let w = load_checkpoint(checkpoint)?;
    let samples = read_suite(suite)?;
    let sample = samples.get(index).ok_or_else(|| {
        Error::Precondition(format!("sample index {index} out of range ({} samples)", samples.len()))
    })?;
    let bench = cfg.benchmark();
    let seed = cfg.seeds[0];
    let g = sample_generate_full(
        &sample.references,
        &sample.instruction,
        bench.sampling_steps,
        bench.policy,
        &w,
        seed,
    )?;
    let result = GenerateResult {
        sample_id: sample.id.clone(),
        checkpoint: out.rel(checkpoint),
        noise_seed: seed,
        sampling_steps: bench.sampling_steps,
        policy: bench.policy,
        visible_tokens: g.mask.as_ref().map(|m| m.visible_count()),
        mask_fallback: g.mask.as_ref().map(|m| m.fallback_applied),
        composition: score_composition(&g.scene, sample),
        verdicts: case_verdicts(&g.scene, sample),
        output: g.scene,
        target: sample.target.clone(),
    };
    write_json(
        &out.reports().join("generate").join(format!("{}.json", sample.id)),
        &with_config(&result, cfg)?,
    )?;
    Ok(result)
}

fn evaluate(
    name: &str,
    samples: &[Sample],
    w: &Weights<f32>,
    bench: &BenchmarkConfig,
    provenance: Value,
    dir: &Path,
    stem: &str,
) -> Result<ScoreReport> {
    let (mut report, records) = run_benchmark(name, samples, w, bench)?;
    report.config = Some(provenance);
    write_report(&report, dir, stem)?;
    write_verdict_log(&records, &dir.join(format!("{stem}.verdicts.ndjson")))?;
    Ok(report)
}

/// `checkpoints/seed-1/stage1.ckpt` becomes `seed-1-stage1`; checkpoints
/// outside the output root are named by file stem alone.
fn checkpoint_tag(checkpoint: &Path, out: &Outputs) -> String {
    match checkpoint.strip_prefix(out.checkpoints()) {
        Ok(rel) => rel
            .with_extension("")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("-"),
        Err(_) => file_stem(checkpoint),
    }
}

/// Scores a checkpoint on a suite file (default: the generated eval suite,
/// or the configured suite if none was written).
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, suite: Option<&Path>, out: &Outputs) -> Result<ScoreReport> {
    let w = load_checkpoint(checkpoint)?;
    let default = out.eval_suite();
    let suite = suite.or(default.exists().then_some(default.as_path()));
    let (name, samples) = load_or_generate(suite, &cfg.eval.suite, "eval")?;
    let bench = cfg.benchmark();
    let provenance = json!({
        "run_config": cfg.echo(),
        "checkpoint": out.rel(checkpoint),
        "suite_file": suite.map(|p| out.rel(p)),
        "benchmark": bench,
    });
    let stem = format!("{name}-{}", checkpoint_tag(checkpoint, out));
    evaluate(&name, &samples, &w, &bench, provenance, &out.reports().join("eval"), &stem)
}

/// Writes relevance maps and top-fraction masks plus `index.json` under
/// `probes/<suite>/`.
pub fn cmd_probe(cfg: &RunConfig, checkpoint: &Path, suite: Option<&Path>, out: &Outputs) -> Result<ProbeIndex> {
    let w = load_checkpoint(checkpoint)?;
    let default = out.probe_suite();
    let suite = suite.or(default.exists().then_some(default.as_path()));
    let (name, samples) = load_or_generate(suite, &cfg.probe.suite, "probe")?;
    let dir = out.probes().join(&name);
    let index = run_probe(&samples, &w, &dir, cfg.probe.fraction)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "run_config": cfg.echo(),
            "checkpoint": out.rel(checkpoint),
            "suite_file": suite.map(|p| out.rel(p)),
            "separation": index.separation,
            "groups": index.groups,
        }),
    )?;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: AblationVariant,
    pub tau: f64,
    pub composition: f64,
    pub distinction: f64,
    pub overall: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub checkpoint: String,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "seed,variant,tau,COM,DIS,Overall,acc,P,R,F1";

    fn new(seed: u64, variant: AblationVariant, tau: f64, r: &ScoreReport, checkpoint: String) -> Self {
        Self {
            seed,
            variant,
            tau,
            composition: r.composition,
            distinction: r.distinction,
            overall: r.overall,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            checkpoint,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.2},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.seed,
            self.variant.name(),
            self.tau,
            self.composition,
            self.distinction,
            self.overall,
            self.accuracy,
            self.precision,
            self.recall,
            self.f1
        )
    }
}

/// Visible-token counts of one sample at every threshold of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub seed: u64,
    pub sample_id: String,
    pub visible: Vec<usize>,
    pub fallback: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauSweep {
    pub taus: Vec<f64>,
    pub entries: Vec<SweepEntry>,
}

impl TauSweep {
    /// Samples whose visible count grows with tau between two grid points
    /// where neither mask fell back.
    pub fn violations(&self) -> Vec<&SweepEntry> {
        let mut order: Vec<usize> = (0..self.taus.len()).collect();
        order.sort_by(|&a, &b| self.taus[a].total_cmp(&self.taus[b]));
        self.entries
            .iter()
            .filter(|e| {
                order.windows(2).any(|p| {
                    let (lo, hi) = (p[0], p[1]);
                    !e.fallback[lo] && !e.fallback[hi] && e.visible[hi] > e.visible[lo]
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub tau_sweep: TauSweep,
}

fn tau_tag(tau: f64) -> String {
    format!("tau{tau:.2}")
}

/// Mean of each metric over seeds, per (variant, tau).
pub fn ablation_means(rows: &[AblationRow]) -> Vec<(AblationVariant, f64, usize, [f64; 3])> {
    let mut out: Vec<(AblationVariant, f64, usize, [f64; 3])> = Vec::new();
    for r in rows {
        let slot = match out.iter_mut().find(|(v, t, _, _)| *v == r.variant && *t == r.tau) {
            Some(s) => s,
            None => {
                out.push((r.variant, r.tau, 0, [0.0; 3]));
                out.last_mut().expect("just pushed")
            }
        };
        slot.2 += 1;
        slot.3[0] += r.composition;
        slot.3[1] += r.distinction;
        slot.3[2] += r.overall;
    }
    for (_, _, n, m) in &mut out {
        for x in m.iter_mut() {
            *x /= *n as f64;
        }
    }
    out
}

/// Direct, two-step without bridge and two-step with bridge, after a shared
/// Stage I per seed. Bridge-less variants do not depend on tau: they train
/// once per seed and their row is repeated for each grid value.
pub fn cmd_ablate(cfg: &RunConfig, out: &Outputs) -> Result<AblationSummary> {
    let default = out.ablation_suite();
    let suite = default.exists().then_some(default.as_path());
    let (name, samples) = load_or_generate(suite, &cfg.ablation.suite, "ablation")?;
    let report_dir = out.reports().join("ablation");
    let mut rows = Vec::new();
    let mut sweep = TauSweep {
        taus: cfg.ablation.tau_grid.clone(),
        entries: Vec::new(),
    };
    let mut timing = BTreeMap::new();
    for &seed in &cfg.seeds {
        let [s1, s2s1, s2s2] = cfg.stages_for(seed);
        let ckpt_dir = out.checkpoints().join("ablation").join(format!("seed-{seed}"));
        let started = Instant::now();
        let stage1 = Weights::<f32>::init(&cfg.model, seed)?;
        let (stage1, r) = run_phase(&s1, stage1, Some(&ckpt_dir.join("stage1.ckpt")))?;
        let seed_reports = report_dir.join(format!("seed-{seed}"));
        write_json(&seed_reports.join("train-stage1.json"), &train_report_value(&r, out, cfg)?)?;
        let mut sweep_weights = None;
        for variant in AblationVariant::ALL {
            let taus: Vec<Option<f64>> = if variant.uses_mask() {
                cfg.ablation.tau_grid.iter().map(|&t| Some(t)).collect()
            } else {
                vec![None]
            };
            for tau in taus {
                let stem = match tau {
                    Some(t) => format!("{}-{}", variant.name(), tau_tag(t)),
                    None => variant.name().to_string(),
                };
                let (w, reports) = run_ablation_variant(&stage1, variant, &s2s1, &s2s2, tau.unwrap_or(cfg.tau))?;
                let ckpt = ckpt_dir.join(format!("{stem}.ckpt"));
                save_checkpoint(&w, &ckpt)?;
                for r in &reports {
                    let mut v = train_report_value(r, out, cfg)?;
                    v["checkpoint"] = json!(out.rel(&ckpt));
                    write_json(&seed_reports.join(format!("train-{stem}-{}.json", r.phase.name())), &v)?;
                }
                let bench = BenchmarkConfig {
                    policy: match tau {
                        Some(t) => MaskPolicy::Active { tau: t },
                        None => MaskPolicy::Off,
                    },
                    ..cfg.benchmark()
                };
                let provenance = json!({
                    "run_config": cfg.echo(),
                    "seed": seed,
                    "variant": variant,
                    "checkpoint": out.rel(&ckpt),
                    "benchmark": bench,
                });
                let report = evaluate(&name, &samples, &w, &bench, provenance, &seed_reports, &format!("eval-{stem}"))?;
                let grid: Vec<f64> = match tau {
                    Some(t) => vec![t],
                    None => cfg.ablation.tau_grid.clone(),
                };
                for t in grid {
                    rows.push(AblationRow::new(seed, variant, t, &report, out.rel(&ckpt)));
                }
                if variant.uses_mask() && tau == Some(cfg.tau) {
                    sweep_weights = Some(w);
                }
            }
        }
        let w = match sweep_weights {
            Some(w) => w,
            None => run_ablation_variant(&stage1, AblationVariant::TwoStepWithBridge, &s2s1, &s2s2, cfg.tau)?.0,
        };
        for s in &samples {
            let acts = context_activations(s, &w)?;
            let masks = cfg
                .ablation
                .tau_grid
                .iter()
                .map(|&t| compute_mask_from_activations(&acts, &w.config, t))
                .collect::<Result<Vec<_>>>()?;
            sweep.entries.push(SweepEntry {
                seed,
                sample_id: s.id.clone(),
                visible: masks.iter().map(|m| m.visible_count()).collect(),
                fallback: masks.iter().map(|m| m.fallback_applied).collect(),
            });
        }
        timing.insert(format!("seed-{seed}"), started.elapsed().as_secs_f64());
        log::info!("ablation seed {seed} done in {:.0}s", started.elapsed().as_secs_f64());
    }

    rows.sort_by(|a, b| {
        (a.seed, a.variant as u8)
            .cmp(&(b.seed, b.variant as u8))
            .then(a.tau.total_cmp(&b.tau))
    });
    let mut csv = format!("{}\n", AblationRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_text(&report_dir.join("ablation.csv"), &csv)?;
    let mut summary_csv = String::from("variant,tau,seeds,COM,DIS,Overall\n");
    for (v, t, n, m) in ablation_means(&rows) {
        summary_csv.push_str(&format!(
            "{},{t:.2},{n},{:.4},{:.4},{:.4}\n",
            v.name(),
            m[0],
            m[1],
            m[2]
        ));
    }
    write_text(&report_dir.join("summary.csv"), &summary_csv)?;
    write_json(&report_dir.join("tau_sweep.json"), &with_config(&sweep, cfg)?)?;
    write_json(&out.logs().join("ablation-timing.json"), &timing)?;
    let summary = AblationSummary { rows, tau_sweep: sweep };
    write_json(&report_dir.join("ablation.json"), &with_config(&summary, cfg)?)?;
    Ok(summary)
}
