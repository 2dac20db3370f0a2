use std::fmt;

use serde::{Deserialize, Serialize};

use super::{MoeModelConfig, PARAM_WIDTH};
use crate::error::{Error, Result};
use crate::tensor::{seeded_init, Parameter, Partition, StorageWidth, Tensor};

/// Where a parameter lives in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamSite {
    Attention,
    DenseFfn,
    Gate,
    Expert(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamName {
    W1,
    B1,
    W2,
    B2,
    Gate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub layer: usize,
    pub site: ParamSite,
    pub name: ParamName,
}

impl ParamKey {
    pub fn family(&self) -> ParamFamily {
        match self.site {
            ParamSite::Expert(_) => ParamFamily::Expert,
            _ => ParamFamily::NonExpert,
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let site = match self.site {
            ParamSite::Attention => "attn".to_string(),
            ParamSite::DenseFfn => "ffn".to_string(),
            ParamSite::Gate => "gate".to_string(),
            ParamSite::Expert(e) => format!("expert{e}"),
        };
        let name = match self.name {
            ParamName::W1 => "w1",
            ParamName::B1 => "b1",
            ParamName::W2 => "w2",
            ParamName::B2 => "b2",
            ParamName::Gate => "w",
        };
        write!(f, "l{}.{site}.{name}", self.layer)
    }
}

/// Expert parameters are synchronized and sharded over the expert data
/// group, everything else over the non-expert data group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamFamily {
    NonExpert,
    Expert,
}

/// Column-parallel then row-parallel MLP: `gelu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub gate: Parameter,
    /// Locally held experts as (expert id, parameters), ascending by id.
    pub experts: Vec<(usize, MlpParams)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnParams {
    Dense(MlpParams),
    Moe(MoeParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn: MlpParams,
    pub ffn: FfnParams,
}

/// Parameters held by one executor: either a rank's shard or, for the
/// serial reference, the full model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn site_code(site: ParamSite) -> u64 {
    match site {
        ParamSite::Attention => 1,
        ParamSite::DenseFfn => 2,
        ParamSite::Gate => 3,
        ParamSite::Expert(e) => 1000 + e as u64,
    }
}

fn param_seed(model_seed: u64, key: ParamKey) -> u64 {
    derive_seed(&[model_seed, key.layer as u64, site_code(key.site), key.name as u64])
}

/// The global input batch for a step: `tokens × hidden`, uniform in [-1, 1).
pub fn make_batch(seed: u64, step: u64, tokens: usize, hidden: usize) -> Result<Tensor> {
    seeded_init(
        &[tokens, hidden],
        derive_seed(&[seed, 0xBA7C4, step]),
        Partition::Replicated,
        super::ACTIVATION_WIDTH,
    )
}

fn init_param(
    seed: u64,
    key: ParamKey,
    shape: &[usize],
    partition: Partition,
    scale: f64,
) -> Result<Parameter> {
    let value = seeded_init(shape, param_seed(seed, key), partition, PARAM_WIDTH)?.scaled(scale);
    Ok(Parameter::new(value, partition))
}

impl MlpParams {
    /// Initializes tensor shard `shard` of `of` for the MLP at `layer`/`site`.
    pub fn init(cfg: &MoeModelConfig, layer: usize, site: ParamSite, shard: usize, of: usize) -> Result<Self> {
        let (h, f) = (cfg.hidden, cfg.ffn_width());
        let key = |name| ParamKey { layer, site, name };
        let col = Partition::Column { shard, of };
        let row = Partition::Row { shard, of };
        let s1 = 1.0 / (h as f64).sqrt();
        let s2 = 1.0 / (f as f64).sqrt();
        Ok(Self {
            w1: init_param(cfg.seed, key(ParamName::W1), &[h, f], col, s1)?,
            b1: init_param(cfg.seed, key(ParamName::B1), &[f], col, 0.1)?,
            w2: init_param(cfg.seed, key(ParamName::W2), &[f, h], row, s2)?,
            b2: init_param(cfg.seed, key(ParamName::B2), &[h], Partition::Replicated, 0.1)?,
        })
    }

    fn named(&self) -> [(ParamName, &Parameter); 4] {
        [
            (ParamName::W1, &self.w1),
            (ParamName::B1, &self.b1),
            (ParamName::W2, &self.w2),
            (ParamName::B2, &self.b2),
        ]
    }

    fn named_mut(&mut self) -> [(ParamName, &mut Parameter); 4] {
        [
            (ParamName::W1, &mut self.w1),
            (ParamName::B1, &mut self.b1),
            (ParamName::W2, &mut self.w2),
            (ParamName::B2, &mut self.b2),
        ]
    }
}

impl ModelParams {
    /// Parameters for tensor shard `shard` of `of`, holding the listed experts.
    pub fn init(cfg: &MoeModelConfig, shard: usize, of: usize, experts: &[usize]) -> Result<Self> {
        if experts.iter().any(|&e| e >= cfg.experts) {
            return Err(Error::config(format!("expert index out of range for {} experts", cfg.experts)));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let attn = MlpParams::init(cfg, l, ParamSite::Attention, shard, of)?;
            let ffn = if MoeModelConfig::is_moe_layer(l) {
                let gate_key = ParamKey {
                    layer: l,
                    site: ParamSite::Gate,
                    name: ParamName::Gate,
                };
                let gate = init_param(
                    cfg.seed,
                    gate_key,
                    &[cfg.hidden, cfg.experts],
                    Partition::Replicated,
                    1.0 / (cfg.hidden as f64).sqrt(),
                )?;
                let experts = experts
                    .iter()
                    .map(|&e| Ok((e, MlpParams::init(cfg, l, ParamSite::Expert(e), shard, of)?)))
                    .collect::<Result<Vec<_>>>()?;
                FfnParams::Moe(MoeParams { gate, experts })
            } else {
                FfnParams::Dense(MlpParams::init(cfg, l, ParamSite::DenseFfn, shard, of)?)
            };
            layers.push(LayerParams { attn, ffn });
        }
        Ok(Self { layers })
    }

    /// The full, unsharded model with every expert.
    pub fn full(cfg: &MoeModelConfig) -> Result<Self> {
        let all: Vec<usize> = (0..cfg.experts).collect();
        Self::init(cfg, 0, 1, &all)
    }

    /// Every parameter in canonical order: layer by layer; within a layer
    /// the non-expert block, then the dense block or the gate followed by
    /// experts; within a block w1, b1, w2, b2.
    pub fn entries(&self) -> Vec<(ParamKey, &Parameter)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let key = |site, name| ParamKey { layer: l, site, name };
            for (name, p) in layer.attn.named() {
                out.push((key(ParamSite::Attention, name), p));
            }
            match &layer.ffn {
                FfnParams::Dense(m) => {
                    for (name, p) in m.named() {
                        out.push((key(ParamSite::DenseFfn, name), p));
                    }
                }
                FfnParams::Moe(moe) => {
                    out.push((key(ParamSite::Gate, ParamName::Gate), &moe.gate));
                    for (e, m) in &moe.experts {
                        for (name, p) in m.named() {
                            out.push((key(ParamSite::Expert(*e), name), p));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(ParamKey, &mut Parameter)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let key = |site, name| ParamKey { layer: l, site, name };
            for (name, p) in layer.attn.named_mut() {
                out.push((key(ParamSite::Attention, name), p));
            }
            match &mut layer.ffn {
                FfnParams::Dense(m) => {
                    for (name, p) in m.named_mut() {
                        out.push((key(ParamSite::DenseFfn, name), p));
                    }
                }
                FfnParams::Moe(moe) => {
                    out.push((key(ParamSite::Gate, ParamName::Gate), &mut moe.gate));
                    for (e, m) in moe.experts.iter_mut() {
                        for (name, p) in m.named_mut() {
                            out.push((key(ParamSite::Expert(*e), name), p));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn visit(&self, mut f: impl FnMut(ParamKey, &Parameter)) {
        for (k, p) in self.entries() {
            f(k, p);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(ParamKey, &mut Parameter)) {
        for (k, p) in self.entries_mut() {
            f(k, p);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(|_, p| p.zero_grad());
    }

    pub fn count(&self, family: ParamFamily) -> usize {
        let mut n = 0;
        self.visit(|k, p| {
            if k.family() == family {
                n += p.len();
            }
        });
        n
    }

    /// Concatenated values of one family in canonical order.
    pub fn flat_values(&self, family: ParamFamily) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(|k, p| {
            if k.family() == family {
                out.extend_from_slice(p.value.data());
            }
        });
        out
    }

    pub fn flat_grads(&self, family: ParamFamily) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(|k, p| {
            if k.family() == family {
                out.extend_from_slice(p.grad.data());
            }
        });
        out
    }

    pub fn set_flat_values(&mut self, family: ParamFamily, flat: &[f64]) -> Result<()> {
        self.scatter(family, flat, |p| p.value.data_mut())
    }

    pub fn set_flat_grads(&mut self, family: ParamFamily, flat: &[f64]) -> Result<()> {
        self.scatter(family, flat, |p| p.grad.data_mut())
    }

    fn scatter(
        &mut self,
        family: ParamFamily,
        flat: &[f64],
        target: impl Fn(&mut Parameter) -> &mut [f64],
    ) -> Result<()> {
        let expected = self.count(family);
        if flat.len() != expected {
            return Err(Error::shape(format!(
                "flat buffer of {} for {expected} parameters",
                flat.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut(|k, p| {
            if k.family() == family {
                let dst = target(p);
                dst.copy_from_slice(&flat[offset..offset + dst.len()]);
                offset += dst.len();
            }
        });
        Ok(())
    }

    pub fn get(&self, key: ParamKey) -> Option<&Parameter> {
        self.entries().into_iter().find(|(k, _)| *k == key).map(|(_, p)| p)
    }

    pub fn width(&self) -> StorageWidth {
        PARAM_WIDTH
    }
}
