//! Optimization loops: base training, full fine-tuning, adapter training,
//! EWC-regularized fine-tuning and λ selection.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{create_adapter, AdapterSpec, AdapterState, Method};
use crate::autodiff::{GradScope, Gradients, Tape};
use crate::checkpoint;
use crate::continual::{ewc_penalty, EwcConfig};
use crate::error::{Error, Result};
use crate::metrics::{corpus_score, ScoreReport, Unit};
use crate::model::{nll_loss, transcribe, Example, ModelConfig};
use crate::params::ParamStore;
use crate::synthdata::{synthesize, Corpus, Language};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rates before the toy-scale multiplier.
pub fn base_lr(method: Method) -> f64 {
    match method {
        Method::FullFt => 1e-5,
        Method::Spt => 1e-4,
        Method::Slct => 1e-1,
        Method::Lora => 1e-4,
    }
}

/// Default toy-scale multiplier: 100 for full training, 1 for adapters.
pub fn default_lr_scale(method: Method) -> f64 {
    match method {
        Method::FullFt => 100.0,
        _ => 1.0,
    }
}

pub fn default_lambda_grid() -> Vec<f64> {
    vec![1e0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Adapter definition; `method == FullFt` trains every base parameter.
    pub adapter: AdapterSpec,
    pub lr_initial: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Score dev sets every this many epochs (and after the last); 0 disables.
    pub dev_eval_every: usize,
    pub lambda_grid: Vec<f64>,
    /// Probability that a training example is preceded by the tail of another
    /// example's transcript as previous-text context.
    #[serde(default)]
    pub context_prob: f64,
    /// Maximum context length in tokens.
    #[serde(default = "default_context_len")]
    pub context_len: usize,
}

fn default_context_len() -> usize {
    20
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            adapter: AdapterSpec::new(method),
            lr_initial: base_lr(method) * default_lr_scale(method),
            epochs: 10,
            batch_size: 8,
            seed: 0,
            dev_eval_every: 1,
            lambda_grid: default_lambda_grid(),
            context_prob: 0.0,
            context_len: default_context_len(),
        }
    }

    pub fn method(&self) -> Method {
        self.adapter.method
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial > 0.0) || !self.lr_initial.is_finite() {
            return Err(Error::InvalidConfig(format!("lr_initial must be > 0, got {}", self.lr_initial)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.context_prob) {
            return Err(Error::InvalidConfig("context_prob must lie in [0, 1]".into()));
        }
        if self.lambda_grid.is_empty() {
            return Err(Error::InvalidConfig("lambda grid is empty".into()));
        }
        if self.lambda_grid.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::InvalidConfig("lambda grid must be sorted strictly descending".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

/// `lr_initial · (1 − t/T)` for step `t` in `1..=T`.
pub fn linear_lr(lr_initial: f64, step: usize, total: usize) -> f64 {
    lr_initial * (1.0 - step as f64 / total as f64)
}

/// Adam moments for a set of named tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(trainable: &ParamStore) -> Self {
        let zeros: ParamStore = trainable.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update at 1-based step `t` with rate `lr`.
    /// Rejects non-finite gradients before touching any value.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, t: usize, lr: f64) -> Result<()> {
        params.check_aligned(&self.m, "adam moments")?;
        for (name, _) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Misaligned(format!("no gradient for trainable `{name}`")))?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}` at step {t}")));
            }
        }
        let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads[name.as_str()].data();
            let m = self.m.get_mut(name).expect("aligned").data_mut();
            let v = self.v.get_mut(name).expect("aligned").data_mut();
            for (((pi, mi), vi), gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Feature-ready utterances of one language and split.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub lang: String,
    pub split: String,
    pub features: Vec<Tensor>,
    pub references: Vec<String>,
}

impl EvalSet {
    pub fn from_corpus(lang: &Language, corpus: &Corpus) -> Result<Self> {
        if corpus.lang != lang.spec.id {
            return Err(Error::Data(format!(
                "corpus of {} paired with language {}",
                corpus.lang, lang.spec.id
            )));
        }
        let features = corpus
            .utterances
            .iter()
            .map(|u| synthesize(lang, &u.text, u.utt_seed))
            .collect::<Result<_>>()?;
        Ok(EvalSet {
            lang: lang.spec.id.clone(),
            split: corpus.split.to_string(),
            features,
            references: corpus.texts().map(str::to_owned).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }

    /// Training examples conditioned on `code`.
    pub fn examples(&self, config: &ModelConfig, code: &str) -> Result<Vec<Example>> {
        self.features
            .iter()
            .zip(&self.references)
            .map(|(f, t)| Example::new(config, f.clone(), code, t))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub lang: String,
    pub split: String,
    pub code: String,
    pub cer: ScoreReport,
    pub wer: ScoreReport,
    pub hypotheses: Vec<String>,
}

/// Greedy-decodes every utterance under `code` and scores it.
pub fn evaluate(
    config: &ModelConfig,
    params: &ParamStore,
    adapter: Option<&AdapterState>,
    set: &EvalSet,
    code: &str,
) -> Result<Evaluation> {
    let hypotheses: Vec<String> = set
        .features
        .iter()
        .map(|f| transcribe(config, params, f, code, adapter).map(|d| d.text))
        .collect::<Result<_>>()?;
    let pairs = || hypotheses.iter().map(String::as_str).zip(set.references.iter().map(String::as_str));
    Ok(Evaluation {
        lang: set.lang.clone(),
        split: set.split.clone(),
        code: code.to_string(),
        cer: corpus_score(pairs(), Unit::Char),
        wer: corpus_score(pairs(), Unit::Word),
        hypotheses,
    })
}

/// A dev set scored during training, with the code to decode it under.
#[derive(Clone, Debug)]
pub struct DevSet {
    pub set: EvalSet,
    pub code: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub penalty: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevScore {
    pub epoch: usize,
    pub lang: String,
    pub cer: f64,
    pub wer: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub dev: Vec<DevScore>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr,penalty\n");
        for s in &self.steps {
            let penalty = s.penalty.map(|p| format!("{p:e}")).unwrap_or_default();
            out.push_str(&format!("{},{:e},{:e},{}\n", s.step, s.loss, s.lr, penalty));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Dev CER of `lang` after the last scored epoch.
    pub fn final_dev_cer(&self, lang: &str) -> Option<f64> {
        self.dev.iter().rev().find(|d| d.lang == lang).map(|d| d.cer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Model(ParamStore),
    Adapter(AdapterState),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub artifact: Artifact,
    pub log: TrainLog,
}

impl TrainOutcome {
    /// Parameters and adapter to decode with, given the frozen base.
    pub fn decoder<'a>(&'a self, base: &'a ParamStore) -> (&'a ParamStore, Option<&'a AdapterState>) {
        match &self.artifact {
            Artifact::Model(p) => (p, None),
            Artifact::Adapter(a) => (base, Some(a)),
        }
    }
}

/// Trains on `examples` (each already carrying its conditioning code).
///
/// Full fine-tuning updates a copy of `base`; adapter methods build a fresh
/// adapter from `cfg.seed` and update only it. EWC applies to full
/// fine-tuning only.
pub fn train(
    config: &ModelConfig,
    base: &ParamStore,
    examples: &[Example],
    dev: &[DevSet],
    cfg: &TrainConfig,
    ewc: Option<&EwcConfig>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let method = cfg.method();
    if ewc.is_some() && method != Method::FullFt {
        return Err(Error::ConfigConflict(format!(
            "EWC applies to full fine-tuning only, not {method}"
        )));
    }
    let mut model = base.clone();
    let mut adapter = match method {
        Method::FullFt => None,
        _ => Some(create_adapter(&cfg.adapter, config, base, cfg.seed)?),
    };
    let scope = match &adapter {
        None => GradScope::All,
        Some(a) => GradScope::Only(a.tensors().names().cloned().collect::<BTreeSet<_>>()),
    };
    let mut adam = match &adapter {
        None => Adam::new(&model),
        Some(a) => Adam::new(a.tensors()),
    };
    let use_ewc = ewc.filter(|e| e.lambda != 0.0);

    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = cfg.total_steps(examples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut context_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for b in 0..batches_per_epoch {
            step += 1;
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
            let mut batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
            if cfg.context_prob > 0.0 {
                for ex in &mut batch {
                    if context_rng.random::<f64>() < cfg.context_prob {
                        let prev = &examples[context_rng.random_range(0..examples.len())].target;
                        ex.context = prev[prev.len().saturating_sub(cfg.context_len)..].to_vec();
                    }
                }
            }
            let mut tape = Tape::with_scope(scope.clone());
            let task = nll_loss(&mut tape, config, &model, &batch, adapter.as_ref())?;
            let task_value = tape.value(task).data()[0];
            let (loss, penalty) = match use_ewc {
                Some(e) => {
                    let p = ewc_penalty(&mut tape, &model, e)?;
                    let pv = tape.value(p).data()[0];
                    (tape.add(task, p)?, Some(pv))
                }
                None => (task, ewc.map(|_| 0.0)),
            };
            let total_value = tape.value(loss).data()[0];
            if !total_value.is_finite() {
                return Err(Error::NonFinite(format!("{method} loss {total_value} at step {step}")));
            }
            let grads = tape.backward(loss)?;
            let lr = linear_lr(cfg.lr_initial, step, total);
            match adapter.as_mut() {
                None => adam.step(&mut model, &grads, step, lr)?,
                Some(a) => adam.step(a.tensors_mut(), &grads, step, lr)?,
            }
            log.steps.push(StepLog {
                step,
                loss: task_value,
                lr,
                penalty,
            });
        }
        let due = cfg.dev_eval_every > 0 && (epoch % cfg.dev_eval_every == 0 || epoch == cfg.epochs);
        if due {
            for d in dev {
                let e = evaluate(config, &model, adapter.as_ref(), &d.set, &d.code)?;
                log.dev.push(DevScore {
                    epoch,
                    lang: d.set.lang.clone(),
                    cer: e.cer.rate,
                    wer: e.wer.rate,
                });
            }
        }
    }
    let artifact = match adapter {
        None => Artifact::Model(model),
        Some(a) => Artifact::Adapter(a),
    };
    Ok(TrainOutcome { artifact, log })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaCriterion {
    /// New-language dev CER plus mean old-language dev CER regression.
    #[default]
    Composite,
    /// New-language dev CER alone.
    NewOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub dev_cer_new: f64,
    pub dev_cer_old: Vec<(String, f64)>,
    pub mean_regression: f64,
    pub objective: f64,
    pub weighted_distance: f64,
}

pub struct LambdaSelection {
    pub lambda_star: f64,
    pub rows: Vec<LambdaRow>,
    /// One run per grid entry, in grid order.
    pub runs: Vec<TrainOutcome>,
}

/// Trains one EWC run per grid λ and picks the minimizer of the criterion.
/// `old_baseline[i]` is the base model's dev CER on `dev_old[i]`. Ties go to
/// the larger λ (earlier in the descending grid).
#[allow(clippy::too_many_arguments)]
pub fn select_lambda(
    config: &ModelConfig,
    base: &ParamStore,
    train_new: &[Example],
    dev_new: &DevSet,
    dev_old: &[DevSet],
    old_baseline: &[f64],
    cfg: &TrainConfig,
    anchor_fisher: &crate::continual::FisherDiagonal,
    criterion: LambdaCriterion,
) -> Result<LambdaSelection> {
    cfg.validate()?;
    if dev_old.len() != old_baseline.len() {
        return Err(Error::InvalidConfig("one baseline CER per old dev set required".into()));
    }
    let mut rows = Vec::with_capacity(cfg.lambda_grid.len());
    let mut runs = Vec::with_capacity(cfg.lambda_grid.len());
    for &lambda in &cfg.lambda_grid {
        let ewc = EwcConfig::new(lambda, base.clone(), anchor_fisher.clone())?;
        let mut run_cfg = cfg.clone();
        run_cfg.dev_eval_every = 0;
        let out = train(config, base, train_new, &[], &run_cfg, Some(&ewc))?;
        let Artifact::Model(params) = &out.artifact else {
            unreachable!("EWC runs are full fine-tuning")
        };
        let dev_cer_new = evaluate(config, params, None, &dev_new.set, &dev_new.code)?.cer.rate;
        let mut dev_cer_old = Vec::with_capacity(dev_old.len());
        let mut regression = 0.0;
        for (d, &b) in dev_old.iter().zip(old_baseline) {
            let c = evaluate(config, params, None, &d.set, &d.code)?.cer.rate;
            regression += (c - b).max(0.0);
            dev_cer_old.push((d.set.lang.clone(), c));
        }
        let mean_regression = if dev_old.is_empty() { 0.0 } else { regression / dev_old.len() as f64 };
        let objective = match criterion {
            LambdaCriterion::Composite => dev_cer_new + mean_regression,
            LambdaCriterion::NewOnly => dev_cer_new,
        };
        rows.push(LambdaRow {
            lambda,
            dev_cer_new,
            dev_cer_old,
            mean_regression,
            objective,
            weighted_distance: ewc.weighted_distance(params)?,
        });
        runs.push(out);
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if r.objective < rows[best].objective { i } else { best });
    Ok(LambdaSelection {
        lambda_star: rows[best].lambda,
        rows,
        runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: Method,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_dev: Vec<DevScore>,
    pub artifact_hash: String,
}

/// Writes `dir/{config.json, log.csv, summary.json, artifact.bin}`.
pub fn write_run_dir(
    dir: &Path,
    name: &str,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    outcome: &TrainOutcome,
) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    let config_json = serde_json::json!({ "model": model_config, "train": cfg });
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config_json)? + "\n")?;
    fs::write(dir.join("log.csv"), outcome.log.to_csv())?;
    let artifact_path = dir.join("artifact.bin");
    let artifact_hash = match &outcome.artifact {
        Artifact::Model(p) => {
            checkpoint::save_model(&artifact_path, model_config, p)?;
            p.content_hash()
        }
        Artifact::Adapter(a) => {
            checkpoint::save_adapter(&artifact_path, a)?;
            a.tensors().content_hash()
        }
    };
    let last_epoch = outcome.log.dev.last().map(|d| d.epoch);
    let summary = RunSummary {
        name: name.to_string(),
        method: cfg.method(),
        steps: outcome.log.steps.len(),
        final_loss: outcome.log.final_loss(),
        final_dev: outcome.log.dev.iter().filter(|d| Some(d.epoch) == last_epoch).cloned().collect(),
        artifact_hash,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        [("x".to_string(), Tensor::scalar(x))].into_iter().collect()
    }

    fn quad_grad(p: &ParamStore, target: f64) -> Gradients {
        let x = p.get("x").unwrap().data()[0];
        [("x".to_string(), Tensor::scalar(2.0 * (x - target)))].into_iter().collect()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(linear_lr(0.1, 10, 10), 0.0);
        assert!((linear_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_no_op() {
        let mut p = scalar_store(1.5);
        let mut adam = Adam::new(&p);
        let g: Gradients = [("x".to_string(), Tensor::scalar(0.0))].into_iter().collect();
        adam.step(&mut p, &g, 1, 0.1).unwrap();
        assert_eq!(p.get("x").unwrap().data()[0], 1.5);
    }

    #[test]
    fn final_scheduled_step_is_no_op() {
        let mut p = scalar_store(1.5);
        let mut adam = Adam::new(&p);
        let g = quad_grad(&p, 0.0);
        adam.step(&mut p, &g, 1, linear_lr(0.1, 2, 2)).unwrap();
        assert_eq!(p.get("x").unwrap().data()[0], 1.5);
    }

    #[test]
    fn one_step_descends() {
        let mut p = scalar_store(3.0);
        let mut adam = Adam::new(&p);
        let g = quad_grad(&p, 1.0);
        adam.step(&mut p, &g, 1, 0.01).unwrap();
        let x = p.get("x").unwrap().data()[0];
        assert!(x < 3.0 && x > 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar_store(3.0);
        let mut adam = Adam::new(&p);
        let g: Gradients = [("x".to_string(), Tensor::scalar(f64::NAN))].into_iter().collect();
        assert!(matches!(adam.step(&mut p, &g, 1, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(p.get("x").unwrap().data()[0], 3.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(Method::FullFt);
        assert!((c.lr_initial - 1e-3).abs() < 1e-18);
        assert!(c.validate().is_ok());
        c.lambda_grid = vec![1e-2, 1e-1];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(Method::Slct);
        assert!((c.lr_initial - 0.1).abs() < 1e-18);
        c.epochs = 0;
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::new(Method::Lora).total_steps(17), 10 * 3);
    }
}
