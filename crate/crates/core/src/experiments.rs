//! Canned experiments over the synthetic roster: zero-shot code choice,
//! method comparison, and forgetting with EWC mitigation, chained by
//! [`reproduce`] into one deterministic output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{trainable_fraction, AdapterState, Method, SlctInit};
use crate::checkpoint;
use crate::continual::{
    estimate_fisher, normalize_unit_mean, normalize_unit_trace, overlap_csv, overlap_matrix, FisherDiagonal,
};
use crate::error::{Error, Result};
use crate::metrics::{rank_codes, AffinityMeasure, Inventory, ScoreReport};
use crate::model::{init_model, ModelConfig};
use crate::params::ParamStore;
use crate::synthdata::{generate_corpus, resolve_roster, Corpus, Language, LanguageSpec, ParentLink, Split, SynthParams};
use crate::training::{
    base_lr, evaluate, select_lambda, train, write_run_dir, Artifact, DevScore, DevSet, EvalSet, Evaluation,
    LambdaCriterion, LambdaRow, TrainConfig, TrainOutcome,
};

/// Which code a job conditions the new language on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CodeChoice {
    /// The target language's own code token.
    Native,
    /// The existing code whose language best covers the target's text.
    Auto,
    Fixed(String),
}

impl FromStr for CodeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(CodeChoice::Native),
            "auto" | "surrogate:auto" => Ok(CodeChoice::Auto),
            s if ModelConfig::is_code_symbol(s) => Ok(CodeChoice::Fixed(s.to_string())),
            other => Err(Error::InvalidConfig(format!("bad code choice `{other}` (native|auto|<Lk>)"))),
        }
    }
}

impl TryFrom<String> for CodeChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CodeChoice> for String {
    fn from(c: CodeChoice) -> String {
        c.to_string()
    }
}

impl fmt::Display for CodeChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodeChoice::Native => f.write_str("native"),
            CodeChoice::Auto => f.write_str("auto"),
            CodeChoice::Fixed(c) => f.write_str(c),
        }
    }
}

/// Initialization of an SLCT row: `surrogate:auto`, `surrogate:<Lk>` or `mean`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InitChoice {
    Surrogate(CodeChoice),
    Mean,
}

impl FromStr for InitChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mean" {
            return Ok(InitChoice::Mean);
        }
        match s.strip_prefix("surrogate:") {
            Some("auto") => Ok(InitChoice::Surrogate(CodeChoice::Auto)),
            Some(code) if ModelConfig::is_code_symbol(code) => Ok(InitChoice::Surrogate(CodeChoice::Fixed(code.into()))),
            _ => Err(Error::InvalidConfig(format!(
                "bad init `{s}` (surrogate:auto|surrogate:<Lk>|mean)"
            ))),
        }
    }
}

impl TryFrom<String> for InitChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InitChoice> for String {
    fn from(c: InitChoice) -> String {
        c.to_string()
    }
}

impl fmt::Display for InitChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitChoice::Mean => f.write_str("mean"),
            InitChoice::Surrogate(CodeChoice::Auto) => f.write_str("surrogate:auto"),
            InitChoice::Surrogate(c) => write!(f, "surrogate:{c}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherNorm {
    Raw,
    UnitTrace,
    /// Unit trace times the parameter count, so the mean entry is 1.
    #[default]
    UnitMean,
}

impl FisherNorm {
    pub fn apply(self, f: &FisherDiagonal) -> Result<FisherDiagonal> {
        match self {
            FisherNorm::Raw => Ok(f.clone()),
            FisherNorm::UnitTrace => normalize_unit_trace(f),
            FisherNorm::UnitMean => normalize_unit_mean(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: Split::Train.default_size(),
            dev: Split::Dev.default_size(),
            test: Split::Test.default_size(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub context_prob: f64,
    pub context_len: usize,
    pub dev_eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplier on each method's base learning rate.
    pub lr_scale: BTreeMap<Method, f64>,
    pub lora_rank: usize,
    pub prompt_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherSettings {
    pub cap: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwcSettings {
    pub lambda_grid: Vec<f64>,
    pub criterion: LambdaCriterion,
    pub normalization: FisherNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptJob {
    pub name: String,
    pub method: Method,
    pub target: String,
    pub code: CodeChoice,
    /// SLCT only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slct_init: Option<InitChoice>,
    /// Full fine-tuning only: language whose Fisher anchors EWC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ewc_source: Option<String>,
}

/// Models x languages x splits to decode. `baseline` names the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub models: Vec<String>,
    pub languages: Vec<String>,
    pub splits: Vec<Split>,
    /// Split the summary tables are built from.
    pub report_split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    /// Corpora use `seed + 7`, model init `seed + 1`, training runs `seed`.
    pub seed: u64,
    pub roster: Vec<LanguageSpec>,
    pub synth: SynthParams,
    pub sizes: SplitSizes,
    pub model: ModelConfig,
    pub base_languages: Vec<String>,
    pub new_language: String,
    /// Code the zero-shot baseline decodes the new language with.
    pub baseline_code: String,
    pub affinity: AffinityMeasure,
    pub base_training: BaseTraining,
    pub adaptation: AdaptationSettings,
    pub fisher: FisherSettings,
    pub ewc: EwcSettings,
    pub jobs: Vec<AdaptJob>,
    pub evaluation: EvalMatrix,
}

pub const BASELINE: &str = "baseline";

pub fn default_roster() -> Vec<LanguageSpec> {
    let a0 = "abcdefghiklmnoprstu ";
    let a1 = "abdeghijklmnopqsvwyz ";
    let spec = |id: &str, alphabet: &str, seed: u64, parent: Option<(&str, f64)>| LanguageSpec {
        id: id.into(),
        code_token: format!("<{id}>"),
        alphabet: alphabet.into(),
        codebook_seed: seed,
        noise_sigma: 0.1,
        frames_per_char: 1,
        parent: parent.map(|(p, r)| ParentLink {
            id: p.into(),
            mutation_rate: r,
        }),
    };
    vec![
        spec("L0", a0, 101, None),
        spec("L1", a1, 202, None),
        spec("L2", a0, 303, Some(("L0", 0.3))),
        spec("L3", a0, 404, Some(("L0", 0.6))),
    ]
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        let job = |name: &str, method: Method, code: CodeChoice| AdaptJob {
            name: name.into(),
            method,
            target: "L3".into(),
            code,
            slct_init: None,
            ewc_source: None,
        };
        let mut jobs = vec![
            job("ft", Method::FullFt, CodeChoice::Native),
            job("lora", Method::Lora, CodeChoice::Auto),
            job("spt", Method::Spt, CodeChoice::Auto),
            job("slct", Method::Slct, CodeChoice::Fixed("<L7>".into())),
        ];
        jobs[3].slct_init = Some(InitChoice::Surrogate(CodeChoice::Auto));
        for src in ["L0", "L2"] {
            let mut j = job(&format!("ft_ewc_{src}"), Method::FullFt, CodeChoice::Native);
            j.ewc_source = Some(src.into());
            jobs.push(j);
        }
        let models = std::iter::once(BASELINE.to_string())
            .chain(jobs.iter().map(|j| j.name.clone()))
            .collect();
        ExperimentManifest {
            name: "default".into(),
            seed: 0,
            roster: default_roster(),
            synth: SynthParams::default(),
            sizes: SplitSizes::default(),
            model: ModelConfig::default(),
            base_languages: vec!["L0".into(), "L1".into(), "L2".into()],
            new_language: "L3".into(),
            baseline_code: "<L0>".into(),
            affinity: AffinityMeasure::Coverage,
            base_training: BaseTraining {
                epochs: 30,
                lr: 3e-3,
                batch_size: 8,
                context_prob: 0.5,
                context_len: 20,
                dev_eval_every: 5,
            },
            adaptation: AdaptationSettings {
                epochs: 1,
                batch_size: 8,
                lr_scale: [
                    (Method::FullFt, 100.0),
                    (Method::Lora, 60.0),
                    (Method::Spt, 60.0),
                    (Method::Slct, 0.01),
                ]
                .into_iter()
                .collect(),
                lora_rank: 8,
                prompt_count: 20,
            },
            fisher: FisherSettings {
                cap: 100,
                split: Split::Train,
            },
            ewc: EwcSettings {
                lambda_grid: crate::training::default_lambda_grid(),
                criterion: LambdaCriterion::Composite,
                normalization: FisherNorm::UnitMean,
            },
            jobs,
            evaluation: EvalMatrix {
                models,
                languages: vec!["L0".into(), "L1".into(), "L2".into(), "L3".into()],
                splits: vec![Split::Test],
                report_split: Split::Test,
            },
        }
    }
}

impl ExperimentManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: ExperimentManifest =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn corpus_seed(&self) -> u64 {
        self.seed.wrapping_add(7)
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// SHA-256 of the manifest's JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("manifest: {msg}")));
        self.model.validate()?;
        let ids: BTreeSet<&str> = self.roster.iter().map(|s| s.id.as_str()).collect();
        if ids.len() != self.roster.len() {
            return bad("duplicate language ids in roster".into());
        }
        for s in &self.roster {
            if self.model.code_id(&s.code_token).is_err() {
                return bad(format!("language {} has unusable code {}", s.id, s.code_token));
            }
        }
        for l in self.base_languages.iter().chain([&self.new_language]) {
            if !ids.contains(l.as_str()) {
                return bad(format!("language {l} is not in the roster"));
            }
        }
        if self.base_languages.is_empty() || self.base_languages.contains(&self.new_language) {
            return bad("base languages must be nonempty and exclude the new language".into());
        }
        self.model.code_id(&self.baseline_code)?;
        if self.sizes.train == 0 || self.sizes.dev == 0 || self.sizes.test == 0 {
            return bad("split sizes must be >= 1".into());
        }
        if self.fisher.cap == 0 {
            return bad("fisher cap must be >= 1".into());
        }
        let mut names = BTreeSet::new();
        for j in &self.jobs {
            if !names.insert(j.name.as_str()) || j.name == BASELINE {
                return bad(format!("job name `{}` repeated or reserved", j.name));
            }
            if !ids.contains(j.target.as_str()) {
                return bad(format!("job {}: target {} is not in the roster", j.name, j.target));
            }
            if let Some(src) = &j.ewc_source {
                if j.method != Method::FullFt {
                    return Err(Error::ConfigConflict(format!("job {}: EWC requires full fine-tuning", j.name)));
                }
                if !ids.contains(src.as_str()) {
                    return bad(format!("job {}: EWC source {src} is not in the roster", j.name));
                }
            }
            if j.slct_init.is_some() && j.method != Method::Slct {
                return Err(Error::ConfigConflict(format!("job {}: slct_init given for {}", j.name, j.method)));
            }
            if !self.adaptation.lr_scale.contains_key(&j.method) {
                return bad(format!("no learning-rate scale for {}", j.method));
            }
        }
        for m in &self.evaluation.models {
            if m != BASELINE && !names.contains(m.as_str()) {
                return bad(format!("evaluation model `{m}` is neither baseline nor a job"));
            }
        }
        for l in &self.evaluation.languages {
            if !ids.contains(l.as_str()) {
                return bad(format!("evaluation language {l} is not in the roster"));
            }
        }
        if !self.evaluation.splits.contains(&self.evaluation.report_split) {
            return bad("report split must be among the evaluated splits".into());
        }
        self.base_train_config().validate()?;
        TrainConfig {
            lambda_grid: self.ewc.lambda_grid.clone(),
            ..TrainConfig::new(Method::FullFt)
        }
        .validate()?;
        Ok(())
    }

    pub fn base_train_config(&self) -> TrainConfig {
        let b = &self.base_training;
        TrainConfig {
            lr_initial: b.lr,
            epochs: b.epochs,
            batch_size: b.batch_size,
            seed: self.seed,
            dev_eval_every: b.dev_eval_every,
            context_prob: b.context_prob,
            context_len: b.context_len,
            ..TrainConfig::new(Method::FullFt)
        }
    }

    fn job(&self, name: &str) -> Option<&AdaptJob> {
        self.jobs.iter().find(|j| j.name == name)
    }
}

/// Resolved roster plus every corpus the manifest needs.
pub struct DataSet {
    pub languages: Vec<Language>,
    pub corpora: BTreeMap<(String, Split), Corpus>,
}

impl DataSet {
    pub fn generate(m: &ExperimentManifest) -> Result<Self> {
        let languages = resolve_roster(&m.roster, &m.synth)?;
        let mut corpora = BTreeMap::new();
        for l in &languages {
            for split in Split::ALL {
                let c = generate_corpus(l, split, m.sizes.get(split), m.corpus_seed(), &m.synth);
                corpora.insert((l.id().to_string(), split), c);
            }
        }
        Ok(DataSet { languages, corpora })
    }

    /// Reads a directory written by [`DataSet::write`]. Missing corpus files
    /// are reported together.
    pub fn load(dir: &Path, synth: &SynthParams) -> Result<Self> {
        let specs = crate::synthdata::read_roster(&dir.join("roster.json"))?;
        let languages = resolve_roster(&specs, synth)?;
        let mut corpora = BTreeMap::new();
        let mut missing = Vec::new();
        for l in &languages {
            for split in Split::ALL {
                let path = dir.join(corpus_file_name(l.id(), split));
                if !path.is_file() {
                    missing.push(path.display().to_string());
                    continue;
                }
                let c = Corpus::read_jsonl(&path)?;
                if c.lang != l.id() || c.split != split {
                    return Err(Error::Data(format!("{}: holds {}/{}", path.display(), c.lang, c.split)));
                }
                corpora.insert((l.id().to_string(), split), c);
            }
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!("missing corpora: {}", missing.join(", "))));
        }
        Ok(DataSet { languages, corpora })
    }

    pub fn language(&self, id: &str) -> Result<&Language> {
        self.languages
            .iter()
            .find(|l| l.id() == id)
            .ok_or_else(|| Error::Data(format!("unknown language {id}")))
    }

    pub fn corpus(&self, id: &str, split: Split) -> Result<&Corpus> {
        self.corpora
            .get(&(id.to_string(), split))
            .ok_or_else(|| Error::Data(format!("no {split} corpus for {id}")))
    }

    pub fn eval_set(&self, id: &str, split: Split) -> Result<EvalSet> {
        EvalSet::from_corpus(self.language(id)?, self.corpus(id, split)?)
    }

    /// Writes `roster.json` and `<id>.<split>.jsonl` files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let specs: Vec<&LanguageSpec> = self.languages.iter().map(|l| &l.spec).collect();
        fs::write(dir.join("roster.json"), serde_json::to_string_pretty(&specs)? + "\n")?;
        for ((id, split), c) in &self.corpora {
            c.write_jsonl(&dir.join(corpus_file_name(id, *split)))?;
        }
        Ok(())
    }
}

pub fn corpus_file_name(id: &str, split: Split) -> String {
    format!("{id}.{split}.jsonl")
}

/// Ranks the codes of `candidates` by how well their training text covers
/// the target's training text.
pub fn affinity_ranking(
    data: &DataSet,
    target: &str,
    candidates: &[String],
    measure: AffinityMeasure,
) -> Result<Vec<(String, f64)>> {
    let tgt: Vec<&str> = data.corpus(target, Split::Train)?.texts().collect();
    let inventories = candidates
        .iter()
        .map(|id| {
            let inv = Inventory::from_texts(data.corpus(id, Split::Train)?.texts());
            Ok((data.language(id)?.code().to_string(), inv))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_codes(&tgt, &inventories, measure))
}

/// The code a job decodes its target with, and the SLCT surrogate if any.
pub fn resolve_code(choice: &CodeChoice, target: &Language, ranking: &[(String, f64)]) -> Result<String> {
    match choice {
        CodeChoice::Native => Ok(target.code().to_string()),
        CodeChoice::Fixed(c) => Ok(c.clone()),
        CodeChoice::Auto => ranking
            .first()
            .map(|(c, _)| c.clone())
            .ok_or_else(|| Error::InvalidConfig("no candidate codes for surrogate selection".into())),
    }
}

pub fn resolve_init(choice: &InitChoice, target: &Language, ranking: &[(String, f64)]) -> Result<SlctInit> {
    Ok(match choice {
        InitChoice::Mean => SlctInit::Mean,
        InitChoice::Surrogate(c) => SlctInit::Surrogate(resolve_code(c, target, ranking)?),
    })
}

/// Training configuration of an adaptation run.
pub fn adapt_config(
    settings: &AdaptationSettings,
    method: Method,
    seed: u64,
    code: &str,
    slct_init: Option<SlctInit>,
) -> TrainConfig {
    let mut cfg = TrainConfig::new(method);
    cfg.lr_initial = base_lr(method) * settings.lr_scale.get(&method).copied().unwrap_or(1.0);
    cfg.epochs = settings.epochs;
    cfg.batch_size = settings.batch_size;
    cfg.seed = seed;
    cfg.dev_eval_every = 0;
    cfg.adapter.lora_rank = settings.lora_rank;
    cfg.adapter.prompt_count = settings.prompt_count;
    if method == Method::Slct {
        cfg.adapter.slct_code = code.to_string();
        if let Some(init) = slct_init {
            cfg.adapter.slct_init = init;
        }
    }
    cfg
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRow {
    pub label: String,
    pub code: String,
    pub affinity: Option<f64>,
    pub cer: f64,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotTable {
    pub language: String,
    pub split: Split,
    pub rows: Vec<ZeroShotRow>,
    /// Existing codes by descending affinity.
    pub ranking: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub label: String,
    pub model: String,
    pub code: String,
    pub trainable: usize,
    pub fraction: f64,
    pub cer: f64,
    pub wer: f64,
    /// `1 - cer / baseline_cer`.
    pub relative_reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangScore {
    pub lang: String,
    pub cer: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub label: String,
    pub model: String,
    pub new_cer: f64,
    pub old: Vec<LangScore>,
    /// Sum of old-language CER deltas vs the baseline.
    pub total_degradation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaTable {
    pub job: String,
    pub source: String,
    pub lambda_star: f64,
    pub rows: Vec<LambdaRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingTable {
    pub split: Split,
    pub rows: Vec<ForgettingRow>,
    pub overlap_labels: Vec<String>,
    pub overlap: Vec<Vec<f64>>,
    /// Overlap of each old language's Fisher with the new language's.
    pub overlap_with_new: Vec<(String, f64)>,
    /// Rank correlation of FT degradation with overlap, over old languages.
    pub spearman: Option<f64>,
    pub lambda: Vec<LambdaTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub lang: String,
    pub split: Split,
    pub code: String,
    pub unit: String,
    pub report: ScoreReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub name: String,
    pub method: Method,
    pub code: String,
    pub artifact_hash: String,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub name: String,
    pub manifest_hash: String,
    pub seed: u64,
    /// Base model hash, taken before any adaptation job runs.
    pub base_hash: String,
    pub base_dev: Vec<DevScore>,
    pub jobs: Vec<JobSummary>,
    pub zero_shot: ZeroShotTable,
    pub methods: Vec<MethodRow>,
    pub forgetting: ForgettingTable,
    pub evaluations: Vec<EvalRow>,
}

/// A trained job: decode with `params` (+ `adapter`) and `code` for the target.
struct JobRun {
    job: AdaptJob,
    code: String,
    outcome: TrainOutcome,
    cfg: TrainConfig,
    lambda: Option<LambdaTable>,
}

struct Lab<'a> {
    m: &'a ExperimentManifest,
    data: &'a DataSet,
    config: &'a ModelConfig,
    base: &'a ParamStore,
    cache: BTreeMap<(String, String, Split, String), Evaluation>,
}

impl Lab<'_> {
    fn decode(&mut self, model: &str, params: &ParamStore, adapter: Option<&AdapterState>, lang: &str, split: Split, code: &str) -> Result<Evaluation> {
        let key = (model.to_string(), lang.to_string(), split, code.to_string());
        if let Some(e) = self.cache.get(&key) {
            return Ok(e.clone());
        }
        let set = self.data.eval_set(lang, split)?;
        let e = evaluate(self.config, params, adapter, &set, code)?;
        self.cache.insert(key, e.clone());
        Ok(e)
    }

    /// Decodes `lang` with model `name`: adapters are attached only for the
    /// job's target; other languages use their own code on the job's weights.
    fn eval_model(&mut self, name: &str, runs: &[JobRun], lang: &str, split: Split) -> Result<Evaluation> {
        let own = self.data.language(lang)?.code().to_string();
        if name == BASELINE {
            let code = if lang == self.m.new_language { self.m.baseline_code.clone() } else { own };
            let base = self.base;
            return self.decode(name, base, None, lang, split, &code);
        }
        let run = runs
            .iter()
            .find(|r| r.job.name == name)
            .ok_or_else(|| Error::Data(format!("no job named {name}")))?;
        let (params, adapter) = run.outcome.decoder(self.base);
        if lang == run.job.target {
            self.decode(name, params, adapter, lang, split, &run.code.clone())
        } else {
            self.decode(name, params, None, lang, split, &own)
        }
    }
}

/// Outputs of the pipeline before they are written to disk.
pub struct Pipeline {
    pub results: Results,
    pub base: ParamStore,
    pub base_outcome: TrainOutcome,
    pub fishers: Vec<FisherDiagonal>,
    pub hypotheses: Vec<(String, String, Split, Vec<String>)>,
    runs: Vec<JobRun>,
}

/// Trains the base model on the manifest's base languages.
pub fn train_base(m: &ExperimentManifest, data: &DataSet) -> Result<TrainOutcome> {
    let mut examples = Vec::new();
    let mut dev = Vec::new();
    for id in &m.base_languages {
        let code = data.language(id)?.code().to_string();
        examples.extend(data.eval_set(id, Split::Train)?.examples(&m.model, &code)?);
        dev.push(DevSet {
            set: data.eval_set(id, Split::Dev)?,
            code,
        });
    }
    let init = init_model(&m.model, m.init_seed())?;
    train(&m.model, &init, &examples, &dev, &m.base_train_config(), None)
}

/// Fisher diagonals of every roster language under the base model, each
/// conditioned on the language's own code.
pub fn roster_fishers(m: &ExperimentManifest, data: &DataSet, base: &ParamStore) -> Result<Vec<FisherDiagonal>> {
    data.languages
        .iter()
        .map(|l| {
            let ex = data.eval_set(l.id(), m.fisher.split)?.examples(&m.model, l.code())?;
            estimate_fisher(&m.model, base, &ex, m.fisher.cap, l.id())
        })
        .collect()
}

/// Dev sets of `languages` under their own codes and the base model's CER
/// on each, as used by lambda selection.
pub fn old_dev_sets(
    config: &ModelConfig,
    data: &DataSet,
    languages: &[String],
    base: &ParamStore,
) -> Result<(Vec<DevSet>, Vec<f64>)> {
    let mut sets = Vec::new();
    let mut baseline = Vec::new();
    for id in languages {
        let l = data.language(id)?;
        let set = data.eval_set(id, Split::Dev)?;
        baseline.push(evaluate(config, base, None, &set, l.code())?.cer.rate);
        sets.push(DevSet {
            set,
            code: l.code().to_string(),
        });
    }
    Ok((sets, baseline))
}

fn run_job(
    m: &ExperimentManifest,
    data: &DataSet,
    base: &ParamStore,
    fishers: &[FisherDiagonal],
    job: &AdaptJob,
) -> Result<JobRun> {
    let target = data.language(&job.target)?;
    let candidates: Vec<String> = m.base_languages.clone();
    let ranking = affinity_ranking(data, &job.target, &candidates, m.affinity)?;
    let code = resolve_code(&job.code, target, &ranking)?;
    let init = job.slct_init.as_ref().map(|i| resolve_init(i, target, &ranking)).transpose()?;
    let cfg = adapt_config(&m.adaptation, job.method, m.seed, &code, init);
    let train_new = data.eval_set(&job.target, Split::Train)?.examples(&m.model, &code)?;
    let Some(source) = &job.ewc_source else {
        let outcome = train(&m.model, base, &train_new, &[], &cfg, None)?;
        return Ok(JobRun {
            job: job.clone(),
            code,
            outcome,
            cfg,
            lambda: None,
        });
    };
    let fisher = fishers
        .iter()
        .find(|f| &f.source_tag == source)
        .ok_or_else(|| Error::Data(format!("no Fisher for {source}")))?;
    let fisher = m.ewc.normalization.apply(fisher)?;
    let dev_new = DevSet {
        set: data.eval_set(&job.target, Split::Dev)?,
        code: code.clone(),
    };
    let (dev_old, old_baseline) = old_dev_sets(&m.model, data, &m.base_languages, base)?;
    let mut lcfg = cfg.clone();
    lcfg.lambda_grid = m.ewc.lambda_grid.clone();
    let sel = select_lambda(&m.model, base, &train_new, &dev_new, &dev_old, &old_baseline, &lcfg, &fisher, m.ewc.criterion)?;
    let idx = sel
        .rows
        .iter()
        .position(|r| r.lambda == sel.lambda_star)
        .expect("lambda_star is a grid entry");
    let outcome = sel.runs.into_iter().nth(idx).expect("one run per grid entry");
    Ok(JobRun {
        job: job.clone(),
        code,
        outcome,
        cfg: lcfg,
        lambda: Some(LambdaTable {
            job: job.name.clone(),
            source: source.clone(),
            lambda_star: sel.lambda_star,
            rows: sel.rows,
        }),
    })
}

fn job_label(job: &AdaptJob) -> String {
    match &job.ewc_source {
        Some(src) => format!("FT+EWC({src})"),
        None => job.method.label().to_string(),
    }
}

/// Zero-shot decoding of the new language under every base-language code,
/// plus the SLCT job's row when one exists.
fn exp_zero_shot(lab: &mut Lab, runs: &[JobRun]) -> Result<ZeroShotTable> {
    let m = lab.m;
    let split = m.evaluation.report_split;
    let ranking = affinity_ranking(lab.data, &m.new_language, &m.base_languages, m.affinity)?;
    let mut rows = Vec::new();
    for id in &m.base_languages {
        let code = lab.data.language(id)?.code().to_string();
        let base = lab.base;
        let e = lab.decode(BASELINE, base, None, &m.new_language, split, &code)?;
        rows.push(ZeroShotRow {
            label: code.clone(),
            affinity: ranking.iter().find(|(c, _)| *c == code).map(|(_, a)| *a),
            code,
            cer: e.cer.rate,
            wer: e.wer.rate,
        });
    }
    if let Some(run) = runs.iter().find(|r| r.job.method == Method::Slct && r.job.target == m.new_language) {
        let e = lab.eval_model(&run.job.name, runs, &m.new_language, split)?;
        rows.push(ZeroShotRow {
            label: "SLCT".into(),
            code: run.code.clone(),
            affinity: None,
            cer: e.cer.rate,
            wer: e.wer.rate,
        });
    }
    Ok(ZeroShotTable {
        language: m.new_language.clone(),
        split,
        rows,
        ranking,
    })
}

/// Baseline plus every non-EWC job on the new language.
fn exp_methods(lab: &mut Lab, runs: &[JobRun]) -> Result<Vec<MethodRow>> {
    let m = lab.m;
    let split = m.evaluation.report_split;
    let baseline = lab.eval_model(BASELINE, runs, &m.new_language, split)?;
    let total = m.model.param_count();
    let mut rows = vec![MethodRow {
        label: "Baseline".into(),
        model: BASELINE.into(),
        code: m.baseline_code.clone(),
        trainable: 0,
        fraction: 0.0,
        cer: baseline.cer.rate,
        wer: baseline.wer.rate,
        relative_reduction: 0.0,
    }];
    for run in runs.iter().filter(|r| r.job.ewc_source.is_none() && r.job.target == m.new_language) {
        let e = lab.eval_model(&run.job.name, runs, &m.new_language, split)?;
        let (count, fraction) = trainable_fraction(&run.cfg.adapter, &m.model);
        debug_assert!(count <= total);
        rows.push(MethodRow {
            label: run.job.method.label().into(),
            model: run.job.name.clone(),
            code: run.code.clone(),
            trainable: count,
            fraction,
            cer: e.cer.rate,
            wer: e.wer.rate,
            relative_reduction: 1.0 - e.cer.rate / baseline.cer.rate,
        });
    }
    Ok(rows)
}

fn exp_forgetting(lab: &mut Lab, runs: &[JobRun], fishers: &[FisherDiagonal]) -> Result<ForgettingTable> {
    let m = lab.m;
    let split = m.evaluation.report_split;
    let mut base_old = Vec::new();
    for id in &m.base_languages {
        base_old.push(lab.eval_model(BASELINE, runs, id, split)?.cer.rate);
    }
    let mut rows = vec![ForgettingRow {
        label: "Baseline".into(),
        model: BASELINE.into(),
        new_cer: lab.eval_model(BASELINE, runs, &m.new_language, split)?.cer.rate,
        old: m
            .base_languages
            .iter()
            .zip(&base_old)
            .map(|(l, &c)| LangScore {
                lang: l.clone(),
                cer: c,
                delta: 0.0,
            })
            .collect(),
        total_degradation: 0.0,
        lambda: None,
    }];
    for run in runs.iter().filter(|r| r.job.target == m.new_language) {
        let new_cer = lab.eval_model(&run.job.name, runs, &m.new_language, split)?.cer.rate;
        let mut old = Vec::new();
        for (id, &b) in m.base_languages.iter().zip(&base_old) {
            let c = lab.eval_model(&run.job.name, runs, id, split)?.cer.rate;
            old.push(LangScore {
                lang: id.clone(),
                cer: c,
                delta: c - b,
            });
        }
        rows.push(ForgettingRow {
            label: job_label(&run.job),
            model: run.job.name.clone(),
            new_cer,
            total_degradation: old.iter().map(|s| s.delta).sum(),
            old,
            lambda: run.lambda.as_ref().map(|t| t.lambda_star),
        });
    }

    let overlap_labels: Vec<String> = fishers.iter().map(|f| f.source_tag.clone()).collect();
    let overlap = overlap_matrix(fishers)?;
    let new_idx = overlap_labels.iter().position(|l| *l == m.new_language);
    let overlap_with_new: Vec<(String, f64)> = match new_idx {
        Some(n) => m
            .base_languages
            .iter()
            .filter_map(|id| overlap_labels.iter().position(|l| l == id).map(|i| (id.clone(), overlap[n][i])))
            .collect(),
        None => Vec::new(),
    };
    let ft = rows
        .iter()
        .find(|r| m.job(&r.model).is_some_and(|j| j.method == Method::FullFt && j.ewc_source.is_none()));
    let spearman = ft.and_then(|ft| {
        let deg: Vec<f64> = overlap_with_new
            .iter()
            .map(|(id, _)| ft.old.iter().find(|s| s.lang == *id).map_or(0.0, |s| s.delta))
            .collect();
        let ov: Vec<f64> = overlap_with_new.iter().map(|(_, o)| *o).collect();
        spearman(&deg, &ov)
    });
    Ok(ForgettingTable {
        split,
        rows,
        overlap_labels,
        overlap,
        overlap_with_new,
        spearman,
        lambda: runs.iter().filter_map(|r| r.lambda.clone()).collect(),
    })
}

/// Runs the whole experiment in memory.
pub fn run_pipeline(m: &ExperimentManifest) -> Result<(DataSet, Pipeline)> {
    m.validate()?;
    let data = DataSet::generate(m)?;
    let base_outcome = train_base(m, &data)?;
    let Artifact::Model(base) = base_outcome.artifact.clone() else {
        unreachable!("base training is full training")
    };
    let base_hash = base.content_hash();
    let fishers = roster_fishers(m, &data, &base)?;
    let runs = m
        .jobs
        .iter()
        .map(|j| run_job(m, &data, &base, &fishers, j))
        .collect::<Result<Vec<_>>>()?;

    let mut lab = Lab {
        m,
        data: &data,
        config: &m.model,
        base: &base,
        cache: BTreeMap::new(),
    };
    let zero_shot = exp_zero_shot(&mut lab, &runs)?;
    let methods = exp_methods(&mut lab, &runs)?;
    let forgetting = exp_forgetting(&mut lab, &runs, &fishers)?;

    let mut evaluations = Vec::new();
    let mut hypotheses = Vec::new();
    for model in &m.evaluation.models {
        for lang in &m.evaluation.languages {
            for &split in &m.evaluation.splits {
                let e = lab.eval_model(model, &runs, lang, split)?;
                for (unit, report) in [("char", &e.cer), ("word", &e.wer)] {
                    evaluations.push(EvalRow {
                        model: model.clone(),
                        lang: lang.clone(),
                        split,
                        code: e.code.clone(),
                        unit: unit.into(),
                        report: report.clone(),
                    });
                }
                hypotheses.push((model.clone(), lang.clone(), split, e.hypotheses));
            }
        }
    }

    let jobs = runs
        .iter()
        .map(|r| JobSummary {
            name: r.job.name.clone(),
            method: r.job.method,
            code: r.code.clone(),
            artifact_hash: match &r.outcome.artifact {
                Artifact::Model(p) => p.content_hash(),
                Artifact::Adapter(a) => a.tensors().content_hash(),
            },
            final_loss: r.outcome.log.final_loss(),
        })
        .collect();
    let results = Results {
        name: m.name.clone(),
        manifest_hash: m.hash(),
        seed: m.seed,
        base_hash,
        base_dev: base_outcome.log.dev.clone(),
        jobs,
        zero_shot,
        methods,
        forgetting,
        evaluations,
    };
    Ok((
        data,
        Pipeline {
            results,
            base,
            base_outcome,
            fishers,
            hypotheses,
            runs,
        },
    ))
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

pub fn zero_shot_csv(r: &Results) -> String {
    let mut out = String::from("manifest,label,code,affinity,cer,wer\n");
    for row in &r.zero_shot.rows {
        let aff = row.affinity.map(f6).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.manifest_hash, row.label, row.code, aff, f6(row.cer), f6(row.wer)
        ));
    }
    out
}

pub fn methods_csv(r: &Results) -> String {
    let mut out = String::from("manifest,method,model,code,trainable,fraction,cer,wer,relative_reduction\n");
    for row in &r.methods {
        out.push_str(&format!(
            "{},{},{},{},{},{:.9},{},{},{}\n",
            r.manifest_hash,
            row.label,
            row.model,
            row.code,
            row.trainable,
            row.fraction,
            f6(row.cer),
            f6(row.wer),
            f6(row.relative_reduction)
        ));
    }
    out
}

pub fn forgetting_csv(r: &Results) -> String {
    let mut out = String::from("manifest,method,model,lambda,lang,cer,delta\n");
    for row in &r.forgetting.rows {
        let lambda = row.lambda.map(|l| format!("{l:e}")).unwrap_or_default();
        let new_lang = &r.zero_shot.language;
        out.push_str(&format!(
            "{},{},{},{},{},{},\n",
            r.manifest_hash, row.label, row.model, lambda, new_lang, f6(row.new_cer)
        ));
        for s in &row.old {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.manifest_hash, row.label, row.model, lambda, s.lang, f6(s.cer), f6(s.delta)
            ));
        }
        out.push_str(&format!(
            "{},{},{},{},old_total,,{}\n",
            r.manifest_hash, row.label, row.model, lambda, f6(row.total_degradation)
        ));
    }
    out
}

pub fn lambda_csv(r: &Results, t: &LambdaTable) -> String {
    let mut out = String::from("manifest,lambda,dev_cer_new,mean_regression,objective,weighted_distance,selected");
    let langs: Vec<&String> = t.rows.first().map(|row| row.dev_cer_old.iter().map(|(l, _)| l).collect()).unwrap_or_default();
    for l in &langs {
        out.push_str(&format!(",dev_cer_{l}"));
    }
    out.push('\n');
    for row in &t.rows {
        out.push_str(&format!(
            "{},{:e},{},{},{},{:e},{}",
            r.manifest_hash,
            row.lambda,
            f6(row.dev_cer_new),
            f6(row.mean_regression),
            f6(row.objective),
            row.weighted_distance,
            u8::from(row.lambda == t.lambda_star)
        ));
        for (_, c) in &row.dev_cer_old {
            out.push_str(&format!(",{}", f6(*c)));
        }
        out.push('\n');
    }
    out
}

pub fn eval_csv(r: &Results) -> String {
    let mut out = String::from("manifest,model,lang,split,code,unit,S,I,D,ref_len,rate\n");
    for e in &r.evaluations {
        let s = &e.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.manifest_hash, e.model, e.lang, e.split, e.code, e.unit, s.substitutions, s.insertions, s.deletions, s.ref_length, f6(s.rate)
        ));
    }
    out
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Markdown report: zero-shot, method and forgetting tables plus overlap.
pub fn render_report(r: &Results) -> String {
    let mut s = String::new();
    s.push_str(&format!("# Experiment `{}`\n\n", r.name));
    s.push_str(&format!("- manifest hash: `{}`\n- seed: {}\n- base model hash: `{}`\n\n", r.manifest_hash, r.seed, r.base_hash));

    s.push_str("## Base model dev scores\n\n| epoch | lang | CER | WER |\n|---|---|---|---|\n");
    let last = r.base_dev.last().map(|d| d.epoch);
    for d in r.base_dev.iter().filter(|d| Some(d.epoch) == last) {
        s.push_str(&format!("| {} | {} | {} | {} |\n", d.epoch, d.lang, pct(d.cer), pct(d.wer)));
    }

    let z = &r.zero_shot;
    s.push_str(&format!("\n## Zero-shot {} ({}) by language code\n\n", z.language, z.split));
    s.push_str("| code | affinity | CER | WER |\n|---|---|---|---|\n");
    for row in &z.rows {
        let aff = row.affinity.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into());
        let label = if row.label == row.code { row.code.clone() } else { format!("{} ({})", row.label, row.code) };
        s.push_str(&format!("| {label} | {aff} | {} | {} |\n", pct(row.cer), pct(row.wer)));
    }

    s.push_str(&format!("\n## Methods on {} ({})\n\n", z.language, z.split));
    s.push_str("| method | code | trainable | fraction % | CER | WER | rel. CER reduction % |\n|---|---|---|---|---|---|---|\n");
    for row in &r.methods {
        s.push_str(&format!(
            "| {} | {} | {} | {:.4} | {} | {} | {} |\n",
            row.label,
            row.code,
            row.trainable,
            100.0 * row.fraction,
            pct(row.cer),
            pct(row.wer),
            pct(row.relative_reduction)
        ));
    }

    let f = &r.forgetting;
    s.push_str(&format!("\n## Forgetting ({}, CER %, delta vs baseline)\n\n", f.split));
    let old_langs: Vec<&String> = f.rows.first().map(|row| row.old.iter().map(|o| &o.lang).collect()).unwrap_or_default();
    s.push_str(&format!("| method | λ | {} |", z.language));
    for l in &old_langs {
        s.push_str(&format!(" {l} |"));
    }
    s.push_str(" old total Δ |\n|---|---|---|");
    for _ in &old_langs {
        s.push_str("---|");
    }
    s.push_str("---|\n");
    for row in &f.rows {
        let lambda = row.lambda.map(|l| format!("{l:e}")).unwrap_or_else(|| "-".into());
        s.push_str(&format!("| {} | {lambda} | {} |", row.label, pct(row.new_cer)));
        for o in &row.old {
            if row.model == BASELINE {
                s.push_str(&format!(" {} |", pct(o.cer)));
            } else {
                s.push_str(&format!(" {} ({:+.1}) |", pct(o.cer), 100.0 * o.delta));
            }
        }
        s.push_str(&format!(" {:+.1} |\n", 100.0 * row.total_degradation));
    }

    s.push_str("\n## Fisher overlap\n\n```\n");
    s.push_str(&overlap_csv(&f.overlap_labels, &f.overlap));
    s.push_str("```\n\n");
    for (l, o) in &f.overlap_with_new {
        s.push_str(&format!("- overlap({}, {l}) = {o:.4}\n", z.language));
    }
    match f.spearman {
        Some(rho) => s.push_str(&format!("- Spearman(FT degradation, overlap) = {rho:.3}\n")),
        None => s.push_str("- Spearman(FT degradation, overlap) undefined\n"),
    }

    for t in &f.lambda {
        s.push_str(&format!("\n## λ selection for {} (Fisher of {}, λ* = {:e})\n\n", t.job, t.source, t.lambda_star));
        s.push_str("| λ | dev CER new | mean regression | objective | weighted distance |\n|---|---|---|---|---|\n");
        for row in &t.rows {
            s.push_str(&format!(
                "| {:e} | {} | {} | {} | {:.3e} |\n",
                row.lambda,
                pct(row.dev_cer_new),
                pct(row.mean_regression),
                pct(row.objective),
                row.weighted_distance
            ));
        }
    }
    s
}

/// Names the CSV and report files [`write_outputs`] produces.
pub fn output_files(r: &Results) -> Vec<String> {
    let mut v: Vec<String> = ["zero_shot.csv", "methods.csv", "forgetting.csv", "overlap.csv", "eval.csv", "report.md"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend(r.forgetting.lambda.iter().map(|t| format!("lambda_{}.csv", t.job)));
    v
}

/// Writes tables, `results.json` and `report.md` for `r` into `dir`.
pub fn write_tables(dir: &Path, r: &Results) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.json"), serde_json::to_string_pretty(r)? + "\n")?;
    fs::write(dir.join("zero_shot.csv"), zero_shot_csv(r))?;
    fs::write(dir.join("methods.csv"), methods_csv(r))?;
    fs::write(dir.join("forgetting.csv"), forgetting_csv(r))?;
    fs::write(
        dir.join("overlap.csv"),
        overlap_csv(&r.forgetting.overlap_labels, &r.forgetting.overlap),
    )?;
    for t in &r.forgetting.lambda {
        fs::write(dir.join(format!("lambda_{}.csv", t.job)), lambda_csv(r, t))?;
    }
    fs::write(dir.join("eval.csv"), eval_csv(r))?;
    fs::write(dir.join("report.md"), render_report(r))?;
    Ok(())
}

/// Writes every artifact of a finished pipeline under `dir`.
pub fn write_outputs(dir: &Path, m: &ExperimentManifest, data: &DataSet, p: &Pipeline) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)? + "\n")?;
    data.write(&dir.join("data"))?;
    write_run_dir(&dir.join("runs").join("base"), "base", &m.model, &m.base_train_config(), &p.base_outcome)?;
    for run in &p.runs {
        let rd = dir.join("runs").join(&run.job.name);
        write_run_dir(&rd, &run.job.name, &m.model, &run.cfg, &run.outcome)?;
        let meta = serde_json::json!({
            "manifest": p.results.manifest_hash,
            "job": run.job,
            "code": run.code,
            "lambda": run.lambda.as_ref().map(|t| t.lambda_star),
        });
        fs::write(rd.join("job.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    }
    let fdir = dir.join("fisher");
    fs::create_dir_all(&fdir)?;
    for f in &p.fishers {
        checkpoint::save_fisher(&fdir.join(format!("{}.bin", f.source_tag)), f)?;
    }
    let hdir = dir.join("hyps");
    fs::create_dir_all(&hdir)?;
    for (model, lang, split, hyps) in &p.hypotheses {
        let mut text = hyps.join("\n");
        text.push('\n');
        fs::write(hdir.join(format!("{model}.{lang}.{split}.txt")), text)?;
    }
    write_tables(dir, &p.results)
}

/// Runs every experiment of `m` and writes the results under `dir`.
pub fn reproduce(m: &ExperimentManifest, dir: &Path) -> Result<Results> {
    let (data, p) = run_pipeline(m)?;
    write_outputs(dir, m, &data, &p)?;
    Ok(p.results)
}

/// Lists run directories named by the manifest that lack a summary.
pub fn incomplete_runs(m: &ExperimentManifest, dir: &Path) -> Vec<String> {
    std::iter::once("base")
        .chain(m.jobs.iter().map(|j| j.name.as_str()))
        .filter(|n| !dir.join("runs").join(n).join("summary.json").is_file())
        .map(str::to_owned)
        .collect()
}

/// Reloads the adapted artifacts of a finished directory (used by tests and
/// the `report` command to confirm runs are loadable).
pub fn load_run_artifact(dir: &Path, config: &ModelConfig, name: &str) -> Result<Artifact> {
    let path = dir.join("runs").join(name).join("artifact.bin");
    if &checkpoint::sniff_magic(&path)? == checkpoint::MODEL_MAGIC {
        Ok(Artifact::Model(checkpoint::load_model(&path)?.1))
    } else {
        Ok(Artifact::Adapter(checkpoint::load_adapter(&path, config)?))
    }
}
