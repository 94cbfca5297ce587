//! Adaptation methods as "which tensors train, and how the forward pass
//! changes": full fine-tuning, LoRA, soft language-code tuning (SLCT) and
//! soft prompt tuning (SPT).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gaussian, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{kernels, Tensor};

pub const LORA_INIT_STD: f64 = 0.01;
pub const PROMPT_TENSOR: &str = "spt.prompts";
pub const SLCT_TENSOR: &str = "slct.embedding";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    FullFt,
    Lora,
    Spt,
    Slct,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::FullFt => "FT",
            Method::Lora => "LoRA",
            Method::Spt => "SPT",
            Method::Slct => "SLCT",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ft" | "full_ft" | "full" => Ok(Method::FullFt),
            "lora" => Ok(Method::Lora),
            "spt" => Ok(Method::Spt),
            "slct" => Ok(Method::Slct),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Attention projection roles LoRA may target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnRole {
    Q,
    K,
    V,
    O,
}

impl AttnRole {
    pub const ALL: [AttnRole; 4] = [AttnRole::Q, AttnRole::K, AttnRole::V, AttnRole::O];

    fn suffix(self) -> &'static str {
        match self {
            AttnRole::Q => ".q",
            AttnRole::K => ".k",
            AttnRole::V => ".v",
            AttnRole::O => ".o",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlctInit {
    /// Copy an existing code's embedding row.
    Surrogate(String),
    /// Mean of the other language-code rows.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub method: Method,
    pub lora_rank: usize,
    pub lora_targets: BTreeSet<AttnRole>,
    pub prompt_count: usize,
    pub slct_code: String,
    pub slct_init: SlctInit,
}

impl AdapterSpec {
    pub fn new(method: Method) -> Self {
        AdapterSpec {
            method,
            lora_rank: 8,
            lora_targets: AttnRole::ALL.into_iter().collect(),
            prompt_count: 20,
            slct_code: "<L7>".to_string(),
            slct_init: SlctInit::Mean,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self.method {
            Method::FullFt => Ok(()),
            Method::Lora => {
                if self.lora_rank == 0 {
                    return Err(Error::InvalidConfig("lora_rank must be at least 1".into()));
                }
                if self.lora_targets.is_empty() {
                    return Err(Error::InvalidConfig("no LoRA target roles".into()));
                }
                let min_dim = config.d_model;
                if self.lora_rank >= min_dim {
                    return Err(Error::InvalidConfig(format!(
                        "lora_rank {} must be below min(d, k) = {min_dim}",
                        self.lora_rank
                    )));
                }
                Ok(())
            }
            Method::Spt => {
                if self.prompt_count == 0 {
                    return Err(Error::InvalidConfig("prompt count must be at least 1".into()));
                }
                Ok(())
            }
            Method::Slct => {
                config.code_id(&self.slct_code)?;
                if let SlctInit::Surrogate(code) = &self.slct_init {
                    config.code_id(code)?;
                }
                Ok(())
            }
        }
    }

    /// Attention matrices this spec adapts with LoRA.
    pub fn lora_matrices(&self, config: &ModelConfig) -> Vec<String> {
        config
            .attention_matrices()
            .into_iter()
            .filter(|name| self.lora_targets.iter().any(|r| name.ends_with(r.suffix())))
            .collect()
    }
}

pub fn lora_tensor_names(weight: &str) -> (String, String) {
    (format!("lora.{weight}.A"), format!("lora.{weight}.B"))
}

/// Trainable state of one adaptation run. Tensors are owned copies and never
/// share storage with a base [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    spec: AdapterSpec,
    tensors: ParamStore,
}

impl AdapterState {
    /// Reassembles a state (e.g. after loading), checking tensor shapes.
    pub fn from_parts(spec: AdapterSpec, tensors: ParamStore, config: &ModelConfig) -> Result<Self> {
        spec.validate(config)?;
        let expected = expected_shapes(&spec, config);
        let actual: Vec<(String, Vec<usize>)> = tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if expected != actual {
            return Err(Error::Adapter(format!(
                "tensors {:?} do not match spec {:?}",
                actual.iter().map(|(n, s)| format!("{n}{s:?}")).collect::<Vec<_>>(),
                spec.method
            )));
        }
        Ok(AdapterState { spec, tensors })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn method(&self) -> Method {
        self.spec.method
    }

    pub fn tensors(&self) -> &ParamStore {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut ParamStore {
        &mut self.tensors
    }

    /// Names of the (A, B) pair adapting `weight`, if any.
    pub fn lora_names(&self, weight: &str) -> Option<(String, String)> {
        if self.spec.method != Method::Lora {
            return None;
        }
        let names = lora_tensor_names(weight);
        self.tensors.get(&names.0).map(|_| names)
    }

    pub fn prompt_name(&self) -> Option<&'static str> {
        (self.spec.method == Method::Spt).then_some(PROMPT_TENSOR)
    }

    pub fn prompt_count(&self) -> usize {
        match self.spec.method {
            Method::Spt => self.spec.prompt_count,
            _ => 0,
        }
    }

    /// `(code token id, tensor name)` for an SLCT state.
    pub fn slct_binding(&self, config: &ModelConfig) -> Result<Option<(usize, String)>> {
        if self.spec.method != Method::Slct {
            return Ok(None);
        }
        Ok(Some((config.code_id(&self.spec.slct_code)?, SLCT_TENSOR.to_string())))
    }
}

fn expected_shapes(spec: &AdapterSpec, config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    match spec.method {
        Method::FullFt => vec![],
        Method::Lora => {
            let shapes = config.param_shapes();
            spec.lora_matrices(config)
                .into_iter()
                .flat_map(|w| {
                    let shape = &shapes.iter().find(|(n, _)| *n == w).expect("attention matrix").1;
                    let (a, b) = lora_tensor_names(&w);
                    [(a, vec![spec.lora_rank, shape[1]]), (b, vec![shape[0], spec.lora_rank])]
                })
                .collect()
        }
        Method::Spt => vec![(PROMPT_TENSOR.to_string(), vec![spec.prompt_count, d])],
        Method::Slct => vec![(SLCT_TENSOR.to_string(), vec![d])],
    }
}

/// Builds a fresh adapter. LoRA: `A ~ N(0, 0.01^2)`, `B = 0`; SPT: prompt
/// rows copied from randomly chosen vocabulary embeddings; SLCT: a copy of
/// a surrogate code's row, or the mean of the other code rows.
pub fn create_adapter(spec: &AdapterSpec, config: &ModelConfig, base: &ParamStore, seed: u64) -> Result<AdapterState> {
    spec.validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = base.expect("dec.embed")?;
    let d = config.d_model;
    let mut tensors = ParamStore::new();
    match spec.method {
        Method::FullFt => {}
        Method::Lora => {
            for (name, shape) in expected_shapes(spec, config) {
                let t = if name.ends_with(".A") {
                    Tensor::from_fn(&shape, |_| LORA_INIT_STD * gaussian(&mut rng))
                } else {
                    Tensor::zeros(&shape)
                };
                tensors.insert(name, t);
            }
        }
        Method::Spt => {
            let text: Vec<usize> = (0..config.vocab_size()).filter(|&i| config.is_text_id(i)).collect();
            let mut data = Vec::with_capacity(spec.prompt_count * d);
            for _ in 0..spec.prompt_count {
                data.extend_from_slice(embed.row(text[rng.random_range(0..text.len())]));
            }
            tensors.insert(PROMPT_TENSOR, Tensor::new(vec![spec.prompt_count, d], data)?);
        }
        Method::Slct => {
            let row = match &spec.slct_init {
                SlctInit::Surrogate(code) => embed.row(config.code_id(code)?).to_vec(),
                SlctInit::Mean => {
                    let target = config.code_id(&spec.slct_code)?;
                    let others: Vec<usize> = config.code_ids().into_iter().filter(|&c| c != target).collect();
                    let mut mean = vec![0.0; d];
                    for &c in &others {
                        for (m, v) in mean.iter_mut().zip(embed.row(c)) {
                            *m += v / others.len() as f64;
                        }
                    }
                    mean
                }
            };
            tensors.insert(SLCT_TENSOR, Tensor::new(vec![d], row)?);
        }
    }
    Ok(AdapterState {
        spec: spec.clone(),
        tensors,
    })
}

/// `base + B A` for `base: d x k`, `A: r x k`, `B: d x r`.
pub fn effective_weight(base: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ok = base.shape().len() == 2
        && a.shape().len() == 2
        && b.shape().len() == 2
        && b.rows() == base.rows()
        && a.cols() == base.cols()
        && b.cols() == a.rows();
    if !ok {
        return Err(Error::shape(
            "effective_weight",
            format!("base {:?}, A {:?}, B {:?}", base.shape(), a.shape(), b.shape()),
        ));
    }
    let delta = kernels::matmul(b.data(), a.data(), base.rows(), a.rows(), base.cols());
    let data = base.data().iter().zip(delta).map(|(w, dw)| w + dw).collect();
    Tensor::new(base.shape().to_vec(), data)
}

/// Folds a LoRA state into a copy of `base`. Refuses a store that already
/// carries a merged update.
pub fn merge_lora(base: &ParamStore, state: &AdapterState) -> Result<ParamStore> {
    if base.merged_lora {
        return Err(Error::Adapter("store already has a LoRA update merged in".into()));
    }
    fold_lora(base, state)
}

/// Applies `W + B A` without consulting the merged flag.
pub(crate) fn fold_lora(base: &ParamStore, state: &AdapterState) -> Result<ParamStore> {
    if state.method() != Method::Lora {
        return Err(Error::Adapter(format!("cannot merge a {} adapter", state.method())));
    }
    let mut merged = base.clone();
    for (name, w) in merged.iter_mut() {
        if let Some((a, b)) = state.lora_names(name) {
            *w = effective_weight(w, state.tensors.expect(&a)?, state.tensors.expect(&b)?)?;
        }
    }
    merged.merged_lora = true;
    Ok(merged)
}

/// Exact trainable scalar count and its share of the base model.
pub fn trainable_fraction(spec: &AdapterSpec, config: &ModelConfig) -> (usize, f64) {
    let total = config.param_count();
    let count = match spec.method {
        Method::FullFt => total,
        _ => expected_shapes(spec, config)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum(),
    };
    (count, count as f64 / total as f64)
}
