use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{NodeId, Scalar, Tape, Tensor};

use super::config::ModelConfig;

/// Starting logit bonus between tokens on the same grid cell. Large enough
/// that a Target token reads its own cell of each reference from the start.
pub const SAME_CELL_INIT: f64 = 6.0;

/// Freezing granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    UnderstandingExpert,
    GenerationExpert,
    SharedEmbeddings,
    FlowHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::UnderstandingExpert,
        ParamGroup::GenerationExpert,
        ParamGroup::SharedEmbeddings,
        ParamGroup::FlowHead,
    ];
}

pub type GroupSet = BTreeSet<ParamGroup>;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Indices into [`Weights::params`] for one expert's block in one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertBlock {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    /// Per-head logit bonus between tokens of the same grid cell.
    pub same_cell: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub text_emb: usize,
    pub cell_emb: usize,
    pub pos_emb: usize,
    pub text_pos_emb: usize,
    pub image_emb: usize,
    pub latent_in_w: usize,
    pub latent_in_b: usize,
    pub time_w: usize,
    pub time_b: usize,
    /// `[understanding, generation]` per layer.
    pub layers: Vec<[ExpertBlock; 2]>,
    pub head_ln_gain: usize,
    pub head_ln_bias: usize,
    pub head_w: usize,
    pub head_b: usize,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

struct Spec {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(cfg: &ModelConfig) -> (Vec<Spec>, Layout) {
    let d = cfg.d_model;
    let mut specs: Vec<Spec> = Vec::new();
    let mut add = |name: String, group: ParamGroup, shape: Vec<usize>, init: Init| {
        specs.push(Spec {
            name,
            group,
            shape,
            init,
        });
        specs.len() - 1
    };
    use ParamGroup::*;
    let proj = 1.0 / (d as f64).sqrt();
    let resid = proj / (2.0 * cfg.n_layers as f64).sqrt();

    let text_emb = add("embed.text".into(), SharedEmbeddings, vec![cfg.text_vocab, d], Init::Normal(0.5));
    let cell_emb = add("embed.cell".into(), SharedEmbeddings, vec![cfg.cell_vocab, d], Init::Normal(0.1));
    let pos_emb = add("embed.position".into(), SharedEmbeddings, vec![cfg.max_positions, d], Init::Normal(0.2));
    let text_pos_emb = add("embed.text_position".into(), SharedEmbeddings, vec![cfg.max_positions, d], Init::Normal(0.1));
    let image_emb = add("embed.image".into(), SharedEmbeddings, vec![cfg.max_images + 1, d], Init::Normal(0.2));
    let latent_in_w = add("gen.latent_in.w".into(), GenerationExpert, vec![cfg.d_latent, d], Init::Normal(1.0));
    let latent_in_b = add("gen.latent_in.b".into(), GenerationExpert, vec![d], Init::Zeros);
    let time_w = add("gen.time.w".into(), GenerationExpert, vec![2 * cfg.time_features, d], Init::Normal(0.5));
    let time_b = add("gen.time.b".into(), GenerationExpert, vec![d], Init::Zeros);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut block = |tag: &str, group: ParamGroup| {
            let p = |s: &str| format!("layers.{l}.{tag}.{s}");
            ExpertBlock {
                ln1_gain: add(p("ln1.gain"), group, vec![d], Init::Ones),
                ln1_bias: add(p("ln1.bias"), group, vec![d], Init::Zeros),
                wq: add(p("attn.wq"), group, vec![d, d], Init::Normal(proj)),
                wk: add(p("attn.wk"), group, vec![d, d], Init::Normal(proj)),
                wv: add(p("attn.wv"), group, vec![d, d], Init::Normal(proj)),
                wo: add(p("attn.wo"), group, vec![d, d], Init::Normal(resid)),
                same_cell: add(p("attn.same_cell"), group, vec![cfg.n_heads], Init::Const(SAME_CELL_INIT)),
                ln2_gain: add(p("ln2.gain"), group, vec![d], Init::Ones),
                ln2_bias: add(p("ln2.bias"), group, vec![d], Init::Zeros),
                w1: add(p("ff.w1"), group, vec![d, cfg.d_ff], Init::Normal(proj)),
                b1: add(p("ff.b1"), group, vec![cfg.d_ff], Init::Zeros),
                w2: add(p("ff.w2"), group, vec![cfg.d_ff, d], Init::Normal(resid)),
                b2: add(p("ff.b2"), group, vec![d], Init::Zeros),
            }
        };
        let und = block("und", UnderstandingExpert);
        let gen = block("gen", GenerationExpert);
        layers.push([und, gen]);
    }

    let head_ln_gain = add("head.ln.gain".into(), FlowHead, vec![d], Init::Ones);
    let head_ln_bias = add("head.ln.bias".into(), FlowHead, vec![d], Init::Zeros);
    let head_w = add("head.w".into(), FlowHead, vec![d, cfg.d_latent], Init::Normal(0.02));
    let head_b = add("head.b".into(), FlowHead, vec![cfg.d_latent], Init::Zeros);

    let layout = Layout {
        text_emb,
        cell_emb,
        pos_emb,
        text_pos_emb,
        image_emb,
        latent_in_w,
        latent_in_b,
        time_w,
        time_b,
        layers,
        head_ln_gain,
        head_ln_bias,
        head_w,
        head_b,
    };
    (specs, layout)
}

/// Complete parameter set of the model, in a fixed order that is a pure
/// function of the config.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    pub layout: Layout,
}

impl<T: Scalar> Weights<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = param_specs(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<T> = match s.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Const(c) => vec![T::lit(c); n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
                    }
                };
                Param {
                    name: s.name,
                    group: s.group,
                    value: Tensor::new(s.shape, data).expect("spec shape"),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            layout,
        })
    }

    /// Rebuilds weights from named tensors, checking names and shapes against
    /// the layout implied by `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = param_specs(config);
        if specs.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                specs.len(),
                named.len()
            )));
        }
        let params = specs
            .into_iter()
            .zip(named)
            .map(|(s, (name, value))| {
                if s.name != name || s.shape != value.shape() {
                    return Err(Error::Format(format!(
                        "parameter {name} {:?} does not match expected {} {:?}",
                        value.shape(),
                        s.name,
                        s.shape
                    )));
                }
                Ok(Param {
                    name,
                    group: s.group,
                    value,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            params,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Registers every parameter on `tape`; groups in `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn register(&self, tape: &mut Tape<T>, trainable: &GroupSet) -> ParamNodes {
        ParamNodes(
            self.params
                .iter()
                .map(|p| {
                    if trainable.contains(&p.group) {
                        tape.param(p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Tape nodes parallel to [`Weights::params`].
#[derive(Debug, Clone)]
pub struct ParamNodes(pub Vec<NodeId>);

impl ParamNodes {
    pub fn at(&self, i: usize) -> NodeId {
        self.0[i]
    }
}

pub fn all_groups() -> GroupSet {
    ParamGroup::ALL.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_depends_only_on_config() {
        let cfg = ModelConfig::default();
        let a = Weights::<f32>::init(&cfg, 1).unwrap();
        let b = Weights::<f32>::init(&cfg, 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a.params, b.params);
        let names: Vec<_> = a.params.iter().map(|p| &p.name).collect();
        let names_b: Vec<_> = b.params.iter().map(|p| &p.name).collect();
        assert_eq!(names, names_b);
        let unique: BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn every_group_is_populated() {
        let w = Weights::<f32>::init(&ModelConfig::default(), 0).unwrap();
        for g in ParamGroup::ALL {
            assert!(w.params.iter().any(|p| p.group == g), "{g:?}");
        }
        for p in &w.params {
            let expect = if p.name.contains(".und.") {
                ParamGroup::UnderstandingExpert
            } else if p.name.starts_with("gen.") || p.name.contains(".gen.") {
                ParamGroup::GenerationExpert
            } else if p.name.starts_with("embed.") {
                ParamGroup::SharedEmbeddings
            } else {
                ParamGroup::FlowHead
            };
            assert_eq!(p.group, expect, "{}", p.name);
        }
    }
}
