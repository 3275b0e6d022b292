//! Composition and presence-based distinction scoring, averaged over
//! rounds of sampling and repeated scorings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_generate, MaskPolicy, Weights};
use crate::synthworld::{judge_presence, Sample, Scene, SubjectQuery, SubjectRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceVerdict {
    pub case_id: String,
    pub subject: SubjectRef,
    pub query: SubjectQuery,
    pub expected: bool,
    pub observed: bool,
}

impl PresenceVerdict {
    pub fn correct(&self) -> bool {
        self.expected == self.observed
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistinctionScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub distinction: f64,
    pub counts: Counts,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores from confusion counts. Zero denominators give zero precision or
/// recall; F1 is the arithmetic mean of precision and recall.
pub fn scores_from_counts(c: Counts) -> Result<DistinctionScores> {
    if c.total() == 0 {
        return Err(Error::EmptyInput("no presence verdicts"));
    }
    let accuracy = ratio(c.tp + c.tn, c.total());
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = (precision + recall) / 2.0;
    Ok(DistinctionScores {
        accuracy,
        precision,
        recall,
        f1,
        distinction: 10.0 * (accuracy + f1) / 2.0,
        counts: c,
    })
}

pub fn score_distinction(verdicts: &[PresenceVerdict]) -> Result<DistinctionScores> {
    let mut c = Counts::default();
    for v in verdicts {
        match (v.expected, v.observed) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    scores_from_counts(c)
}

/// Index of the output subject overlapping `cells` most (lowest index on ties).
fn best_overlap(output: &Scene, cells: &[(usize, usize)]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, s) in output.subjects.iter().enumerate() {
        let n = s.footprint.iter().filter(|c| cells.contains(c)).count();
        if n > 0 && best.is_none_or(|(_, bn)| n > bn) {
            best = Some((i, n));
        }
    }
    best.map(|(i, _)| i)
}

/// `10 * (prompt following + subject consistency) / 2`. A target counts as
/// present when an output subject overlaps its footprint; consistency is the
/// fraction of {shape, color} that subject gets right.
pub fn score_composition(output: &Scene, sample: &Sample) -> f64 {
    let targets = &sample.target_subjects;
    if targets.is_empty() {
        return 0.0;
    }
    let mut present = 0usize;
    let mut consistency = 0.0;
    for &r in targets {
        let want = sample.subject(r);
        if let Some(i) = best_overlap(output, &want.footprint) {
            let got = &output.subjects[i];
            present += 1;
            consistency += ((got.shape_id == want.shape_id) as u8 as f64
                + (got.color_id == want.color_id) as u8 as f64)
                / 2.0;
        }
    }
    let pf = present as f64 / targets.len() as f64;
    let sc = if present == 0 { 0.0 } else { consistency / present as f64 };
    10.0 * (pf + sc) / 2.0
}

/// One expected-present verdict per target, one expected-absent verdict per
/// distractor of the referenced images.
pub fn case_verdicts(output: &Scene, sample: &Sample) -> Vec<PresenceVerdict> {
    let mut out = Vec::new();
    for (refs, expected) in [(&sample.target_subjects, true), (&sample.distractor_subjects, false)] {
        for &r in refs {
            let query = SubjectQuery::exact(sample.subject(r));
            out.push(PresenceVerdict {
                case_id: sample.id.clone(),
                subject: r,
                query,
                expected,
                observed: judge_presence(output, &query),
            });
        }
    }
    out
}

/// Verdicts of a case whose generation failed: every answer wrong.
pub fn failed_case_verdicts(sample: &Sample) -> Vec<PresenceVerdict> {
    let mut v = case_verdicts(&Scene::empty(sample.grid_size()), sample);
    for x in &mut v {
        x.observed = !x.expected;
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEntry {
    pub round: usize,
    pub scoring: usize,
    pub composition: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub distinction: f64,
    pub overall: f64,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub suite: String,
    pub cases: usize,
    pub failed_cases: usize,
    pub composition: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub distinction: f64,
    pub overall: f64,
    /// Counts summed over all entries.
    pub counts: Counts,
    pub rounds: Vec<RoundEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl ScoreReport {
    /// Arithmetic mean of the entries.
    pub fn aggregate(suite: &str, cases: usize, failed_cases: usize, rounds: Vec<RoundEntry>) -> Result<Self> {
        if rounds.is_empty() {
            return Err(Error::EmptyInput("no round entries"));
        }
        let n = rounds.len() as f64;
        let mean = |f: fn(&RoundEntry) -> f64| rounds.iter().map(f).sum::<f64>() / n;
        let mut counts = Counts::default();
        for r in &rounds {
            counts.add(&r.counts);
        }
        Ok(Self {
            suite: suite.to_string(),
            cases,
            failed_cases,
            composition: mean(|r| r.composition),
            accuracy: mean(|r| r.accuracy),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
            distinction: mean(|r| r.distinction),
            overall: mean(|r| r.overall),
            counts,
            rounds,
            config: None,
        })
    }

    pub fn csv_header() -> &'static str {
        "suite,COM,DIS,Overall,acc,P,R,F1"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.suite,
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

/// `(composition + distinction) / 2`.
pub fn overall_score(composition: f64, distinction: f64) -> f64 {
    (composition + distinction) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub rounds: usize,
    pub scorings: usize,
    pub base_seed: u64,
    pub sampling_steps: usize,
    pub policy: MaskPolicy,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            scorings: 3,
            base_seed: 0,
            sampling_steps: 8,
            policy: MaskPolicy::Active { tau: 0.88 },
        }
    }
}

/// Output of one generated case in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub round: usize,
    pub case_id: String,
    pub composition: f64,
    pub failed: bool,
    pub output: Scene,
    pub verdicts: Vec<PresenceVerdict>,
}

fn case_seed(round_seed: u64, index: usize) -> u64 {
    round_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .rotate_left(17)
}

/// Generates every case once per round and scores each round `scorings`
/// times; the report holds the mean of all entries.
pub fn run_benchmark(
    suite_name: &str,
    suite: &[Sample],
    weights: &Weights<f32>,
    cfg: &BenchmarkConfig,
) -> Result<(ScoreReport, Vec<CaseRecord>)> {
    if suite.is_empty() {
        return Err(Error::EmptyInput("empty benchmark suite"));
    }
    if cfg.rounds == 0 || cfg.scorings == 0 {
        return Err(Error::Config("rounds and scorings must be positive".into()));
    }
    let mut entries = Vec::with_capacity(cfg.rounds * cfg.scorings);
    let mut records = Vec::with_capacity(cfg.rounds * suite.len());
    let mut failed = 0;
    for round in 0..cfg.rounds {
        let round_seed = cfg.base_seed + round as u64;
        let mut round_records = Vec::with_capacity(suite.len());
        for (i, sample) in suite.iter().enumerate() {
            let out = sample_generate(
                &sample.references,
                &sample.instruction,
                cfg.sampling_steps,
                cfg.policy,
                weights,
                case_seed(round_seed, i),
            );
            let rec = match out {
                Ok(scene) => CaseRecord {
                    round,
                    case_id: sample.id.clone(),
                    composition: score_composition(&scene, sample),
                    failed: false,
                    verdicts: case_verdicts(&scene, sample),
                    output: scene,
                },
                Err(e) => {
                    log::warn!("case {} failed in round {round}: {e}", sample.id);
                    failed += 1;
                    CaseRecord {
                        round,
                        case_id: sample.id.clone(),
                        composition: 0.0,
                        failed: true,
                        verdicts: failed_case_verdicts(sample),
                        output: Scene::empty(sample.grid_size()),
                    }
                }
            };
            round_records.push(rec);
        }
        for scoring in 0..cfg.scorings {
            let verdicts: Vec<PresenceVerdict> =
                round_records.iter().flat_map(|r| r.verdicts.iter().cloned()).collect();
            let d = score_distinction(&verdicts)?;
            let composition =
                round_records.iter().map(|r| r.composition).sum::<f64>() / round_records.len() as f64;
            entries.push(RoundEntry {
                round,
                scoring,
                composition,
                accuracy: d.accuracy,
                precision: d.precision,
                recall: d.recall,
                f1: d.f1,
                distinction: d.distinction,
                overall: overall_score(composition, d.distinction),
                counts: d.counts,
            });
        }
        records.extend(round_records);
    }
    let report = ScoreReport::aggregate(suite_name, suite.len(), failed, entries)?;
    Ok((report, records))
}

pub fn write_report(report: &ScoreReport, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    let body = format!("{}\n{}\n", ScoreReport::csv_header(), report.csv_row());
    std::fs::write(&csv, body).map_err(|e| Error::io(&csv, e))
}

pub fn write_verdict_log(records: &[CaseRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for r in records {
        for v in &r.verdicts {
            serde_json::to_writer(&mut buf, &serde_json::json!({
                "round": r.round,
                "case_id": v.case_id,
                "subject": v.subject,
                "query": v.query,
                "expected": v.expected,
                "observed": v.observed,
            }))?;
            buf.push(b'\n');
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
