use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::scene::{Scene, Subject};
use super::vocab::{shape_template, RelPos, Token, MAX_REFERENCES, N_COLORS, N_SHAPES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "composition-single")]
    CompositionSingle,
    #[serde(rename = "composition-multi")]
    CompositionMulti,
    #[serde(rename = "distinction-cross")]
    DistinctionCross,
    #[serde(rename = "distinction-intra")]
    DistinctionIntra,
    #[serde(rename = "distcomp-cross")]
    DistCompCross,
    #[serde(rename = "distcomp-intra")]
    DistCompIntra,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::CompositionSingle,
        TaskKind::CompositionMulti,
        TaskKind::DistinctionCross,
        TaskKind::DistinctionIntra,
        TaskKind::DistCompCross,
        TaskKind::DistCompIntra,
    ];

    /// Every reference image holds exactly one subject.
    pub fn is_single_candidate(self) -> bool {
        matches!(self, TaskKind::CompositionSingle | TaskKind::CompositionMulti)
    }

    pub fn is_distinction(self) -> bool {
        !self.is_single_candidate()
    }

    fn salt(self) -> u64 {
        self as u64 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::CompositionSingle => "composition-single",
            TaskKind::CompositionMulti => "composition-multi",
            TaskKind::DistinctionCross => "distinction-cross",
            TaskKind::DistinctionIntra => "distinction-intra",
            TaskKind::DistCompCross => "distcomp-cross",
            TaskKind::DistCompIntra => "distcomp-intra",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s || format!("{t:?}") == s)
            .ok_or_else(|| Error::Precondition(format!("unknown task {s:?}")))
    }
}

/// Position of a subject within `Sample::references`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubjectRef {
    pub image: usize,
    pub subject: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task: TaskKind,
    pub seed: u64,
    pub references: Vec<Scene>,
    pub instruction: Vec<usize>,
    pub target: Scene,
    pub target_subjects: Vec<SubjectRef>,
    pub distractor_subjects: Vec<SubjectRef>,
}

impl Sample {
    pub fn subject(&self, r: SubjectRef) -> &Subject {
        &self.references[r.image].subjects[r.subject]
    }

    pub fn grid_size(&self) -> (usize, usize) {
        self.target.grid_size
    }
}

/// One `image k [rel] [color] [shape]` phrase of an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clause {
    pub image: usize,
    pub rel: Option<RelPos>,
    pub color: Option<u8>,
    pub shape: Option<u8>,
}

impl Clause {
    fn tokens(&self) -> Vec<usize> {
        let mut t = vec![Token::Image(self.image as u8).id()];
        if let Some(r) = self.rel {
            t.push(Token::Rel(r).id());
        }
        if let Some(c) = self.color {
            t.push(Token::Color(c).id());
        }
        if let Some(s) = self.shape {
            t.push(Token::Shape(s).id());
        }
        t
    }

    /// Subjects of `scene` this phrase picks out. A relative-position word
    /// selects the unique extreme among attribute matches, or nothing on a tie.
    pub fn resolve(&self, scene: &Scene) -> Vec<usize> {
        let matches: Vec<usize> = scene
            .subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                self.color.is_none_or(|c| c == s.color_id) && self.shape.is_none_or(|v| v == s.shape_id)
            })
            .map(|(i, _)| i)
            .collect();
        let Some(rel) = self.rel else { return matches };
        let key = |i: usize| {
            let (r, c) = scene.subjects[i].center();
            match rel {
                RelPos::Left => c,
                RelPos::Right => -c,
                RelPos::Top => r,
                RelPos::Bottom => -r,
            }
        };
        let best = matches.iter().map(|&i| key(i)).fold(f64::INFINITY, f64::min);
        let winners: Vec<usize> = matches.into_iter().filter(|&i| key(i) == best).collect();
        if winners.len() == 1 {
            winners
        } else {
            Vec::new()
        }
    }
}

pub fn instruction_tokens(clauses: &[Clause]) -> Vec<usize> {
    let mut t = vec![Token::Bos.id()];
    for (i, c) in clauses.iter().enumerate() {
        if i > 0 {
            t.push(Token::And.id());
        }
        t.extend(c.tokens());
    }
    t.push(Token::Eos.id());
    t
}

pub fn parse_instruction(ids: &[usize]) -> Result<Vec<Clause>> {
    let mut clauses: Vec<Clause> = Vec::new();
    for &id in ids {
        let tok = Token::from_id(id).ok_or(Error::Vocabulary {
            id,
            vocab: super::vocab::TEXT_VOCAB,
        })?;
        match tok {
            Token::Bos | Token::Eos | Token::And => {}
            Token::Image(k) => clauses.push(Clause {
                image: k as usize,
                rel: None,
                color: None,
                shape: None,
            }),
            other => {
                let c = clauses
                    .last_mut()
                    .ok_or_else(|| Error::Precondition("attribute before image token".into()))?;
                match other {
                    Token::Rel(r) => c.rel = Some(r),
                    Token::Color(v) => c.color = Some(v),
                    Token::Shape(v) => c.shape = Some(v),
                    _ => unreachable!(),
                }
            }
        }
    }
    Ok(clauses)
}

/// Resolves an instruction against its references.
pub fn resolve_instruction(ids: &[usize], references: &[Scene]) -> Result<Vec<SubjectRef>> {
    let mut out = Vec::new();
    for clause in parse_instruction(ids)? {
        let scene = references
            .get(clause.image)
            .ok_or_else(|| Error::Precondition(format!("instruction names image {}", clause.image)))?;
        out.extend(clause.resolve(scene).into_iter().map(|subject| SubjectRef {
            image: clause.image,
            subject,
        }));
    }
    out.sort_unstable();
    Ok(out)
}

const PLACEMENT_RETRIES: usize = 400;

fn place(
    rng: &mut ChaCha8Rng,
    grid: (usize, usize),
    shape_id: u8,
    color_id: u8,
    avoid: &[&Subject],
) -> Result<Subject> {
    let t = shape_template(shape_id);
    let h = t.iter().map(|c| c.0).max().unwrap() + 1;
    let w = t.iter().map(|c| c.1).max().unwrap() + 1;
    if h > grid.0 || w > grid.1 {
        return Err(Error::Generation(format!("shape {shape_id} does not fit {grid:?}")));
    }
    for _ in 0..PLACEMENT_RETRIES {
        let anchor = (rng.random_range(0..=grid.0 - h), rng.random_range(0..=grid.1 - w));
        let s = Subject::new(shape_id, color_id, anchor);
        // keep a one-cell gap to every other subject
        let clear = avoid.iter().all(|o| {
            s.footprint.iter().all(|&(r, c)| {
                o.footprint
                    .iter()
                    .all(|&(r2, c2)| r.abs_diff(r2) + c.abs_diff(c2) > 1)
            })
        });
        if clear {
            return Ok(s);
        }
    }
    Err(Error::Generation(format!(
        "no free placement for shape {shape_id} after {PLACEMENT_RETRIES} tries"
    )))
}

/// How a reference image is populated.
struct RefPlan {
    target: (u8, u8),
    distractors: Vec<(u8, u8)>,
    intra: bool,
}

fn cross_plan(rng: &mut ChaCha8Rng, candidates: usize) -> RefPlan {
    let mut shapes: Vec<u8> = (0..N_SHAPES as u8).collect();
    shapes.shuffle(rng);
    let mut subjects: Vec<(u8, u8)> = shapes[..candidates]
        .iter()
        .map(|&s| (s, rng.random_range(0..N_COLORS as u8)))
        .collect();
    let target = subjects.remove(0);
    RefPlan {
        target,
        distractors: subjects,
        intra: false,
    }
}

fn intra_plan(rng: &mut ChaCha8Rng) -> RefPlan {
    let shape = rng.random_range(0..N_SHAPES as u8);
    let mut colors: Vec<u8> = (0..N_COLORS as u8).collect();
    colors.shuffle(rng);
    RefPlan {
        target: (shape, colors[0]),
        distractors: vec![(shape, colors[1])],
        intra: true,
    }
}

fn single_plan(rng: &mut ChaCha8Rng) -> RefPlan {
    RefPlan {
        target: (rng.random_range(0..N_SHAPES as u8), rng.random_range(0..N_COLORS as u8)),
        distractors: Vec::new(),
        intra: false,
    }
}

fn rng_for(task: TaskKind, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ task.salt())
}

/// Deterministic sample of `task` for `seed`. Targets keep their reference
/// positions on the target canvas, so targets from different references are
/// placed jointly.
pub fn gen_sample(task: TaskKind, seed: u64, grid: (usize, usize)) -> Result<Sample> {
    let mut rng = rng_for(task, seed);
    let mut plans = match task {
        TaskKind::CompositionSingle => vec![single_plan(&mut rng)],
        TaskKind::CompositionMulti => {
            let n = rng.random_range(2..=3);
            (0..n).map(|_| single_plan(&mut rng)).collect()
        }
        TaskKind::DistinctionCross => {
            let k = rng.random_range(2..=3);
            vec![cross_plan(&mut rng, k)]
        }
        TaskKind::DistinctionIntra => vec![intra_plan(&mut rng)],
        TaskKind::DistCompCross | TaskKind::DistCompIntra => {
            let multi = if task == TaskKind::DistCompCross {
                cross_plan(&mut rng, 2)
            } else {
                intra_plan(&mut rng)
            };
            let mut p = vec![multi, single_plan(&mut rng)];
            p.shuffle(&mut rng);
            p
        }
    };
    debug_assert!(plans.len() <= MAX_REFERENCES);

    let mut targets: Vec<Subject> = Vec::new();
    for plan in &plans {
        let avoid: Vec<&Subject> = targets.iter().collect();
        let s = place(&mut rng, grid, plan.target.0, plan.target.1, &avoid)?;
        targets.push(s);
    }

    let mut references = Vec::with_capacity(plans.len());
    let mut clauses = Vec::with_capacity(plans.len());
    let mut target_subjects = Vec::new();
    let mut distractor_subjects = Vec::new();
    for (image, plan) in plans.iter_mut().enumerate() {
        let mut subjects = vec![targets[image].clone()];
        for &(shape, color) in &plan.distractors {
            let avoid: Vec<&Subject> = subjects.iter().collect();
            let s = place(&mut rng, grid, shape, color, &avoid)?;
            subjects.push(s);
        }
        let target = targets[image].clone();
        let scene = Scene::new(grid, subjects)?;

        let mut clause = Clause {
            image,
            rel: None,
            color: Some(target.color_id),
            shape: Some(target.shape_id),
        };
        if plan.intra && rng.random_bool(0.5) {
            let others: Vec<&Subject> = scene.subjects.iter().filter(|s| **s != target).collect();
            let (tr, tc) = target.center();
            let options: Vec<RelPos> = RelPos::ALL
                .into_iter()
                .filter(|rel| {
                    others.iter().all(|o| {
                        let (or, oc) = o.center();
                        match rel {
                            RelPos::Left => tc < oc,
                            RelPos::Right => tc > oc,
                            RelPos::Top => tr < or,
                            RelPos::Bottom => tr > or,
                        }
                    })
                })
                .collect();
            if let Some(&rel) = options.choose(&mut rng) {
                clause.rel = Some(rel);
                clause.color = None;
            }
        }
        for (i, s) in scene.subjects.iter().enumerate() {
            let r = SubjectRef { image, subject: i };
            if *s == target {
                target_subjects.push(r);
            } else {
                distractor_subjects.push(r);
            }
        }
        references.push(scene);
        clauses.push(clause);
    }

    let instruction = instruction_tokens(&clauses);
    let target = Scene::new(grid, targets)?;
    let sample = Sample {
        id: format!("{}-{seed}", task.name()),
        task,
        seed,
        references,
        instruction,
        target,
        target_subjects,
        distractor_subjects,
    };
    let resolved = resolve_instruction(&sample.instruction, &sample.references)?;
    if resolved != sample.target_subjects {
        return Err(Error::Generation(format!(
            "instruction does not single out the targets of {}",
            sample.id
        )));
    }
    Ok(sample)
}

/// A benchmark or training suite addressed by task list and seed range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub tasks: Vec<TaskKind>,
    pub seed_start: u64,
    pub per_task: usize,
    pub grid: (usize, usize),
}

impl SuiteSpec {
    pub fn generate(&self) -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(self.tasks.len() * self.per_task);
        for &task in &self.tasks {
            for k in 0..self.per_task as u64 {
                out.push(gen_sample(task, self.seed_start + k, self.grid)?);
            }
        }
        Ok(out)
    }
}
