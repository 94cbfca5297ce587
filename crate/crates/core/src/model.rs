//! Toy encoder-decoder transcriber.
//!
//! Feature frames go through a linear projection and a pre-norm transformer
//! encoder. The decoder sees `[soft prompts] <sot> <code> text...` with
//! sinusoidal positions on the token rows only (soft prompts carry no
//! positional term, so `<sot>` stays at position 0) and predicts the next token through an output projection tied to
//! the token embedding table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterState;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{kernels, Tensor};

pub const SOT: &str = "<sot>";
pub const EOT: &str = "<eot>";
pub const PAD: &str = "<pad>";
pub const LANGUAGE_SLOTS: usize = 8;

/// The 28 text symbols: lowercase letters, space, apostrophe.
pub fn text_symbols() -> Vec<char> {
    ('a'..='z').chain([' ', '\'']).collect()
}

pub fn code_token(slot: usize) -> String {
    format!("<L{slot}>")
}

fn default_vocab() -> Vec<String> {
    let mut v: Vec<String> = text_symbols().into_iter().map(String::from).collect();
    v.extend([SOT, EOT, PAD].map(String::from));
    v.extend((0..LANGUAGE_SLOTS).map(code_token));
    v
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_mult: usize,
    pub vocab: Vec<String>,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ff_mult: 4,
            vocab: default_vocab(),
            max_src_len: 96,
            max_tgt_len: 64,
            feature_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.n_heads,
            self.enc_layers,
            self.dec_layers,
            self.ff_mult,
            self.max_src_len,
            self.max_tgt_len,
            self.feature_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::InvalidConfig("d_model must be even for sinusoidal positions".into()));
        }
        for special in [SOT, EOT, PAD] {
            self.token_id(special)?;
        }
        if self.code_ids().is_empty() {
            return Err(Error::InvalidConfig("vocabulary has no language-code tokens".into()));
        }
        if !self.vocab.iter().any(|s| s.chars().count() == 1) {
            return Err(Error::InvalidConfig("vocabulary has no text symbols".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.vocab.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::InvalidConfig(format!("duplicate vocabulary symbol `{dup}`")));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn token_id(&self, symbol: &str) -> Result<usize> {
        self.vocab
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::UnknownToken(symbol.to_string()))
    }

    pub fn sot(&self) -> usize {
        self.token_id(SOT).expect("validated vocabulary")
    }

    pub fn eot(&self) -> usize {
        self.token_id(EOT).expect("validated vocabulary")
    }

    pub fn is_code_symbol(symbol: &str) -> bool {
        symbol.starts_with("<L") && symbol.ends_with('>') && symbol[2..symbol.len() - 1].parse::<usize>().is_ok()
    }

    pub fn code_ids(&self) -> Vec<usize> {
        (0..self.vocab.len())
            .filter(|&i| Self::is_code_symbol(&self.vocab[i]))
            .collect()
    }

    /// Resolves a language-code token, rejecting anything else.
    pub fn code_id(&self, code: &str) -> Result<usize> {
        if !Self::is_code_symbol(code) {
            return Err(Error::NotALanguageCode(code.to_string()));
        }
        self.token_id(code)
    }

    pub fn is_text_id(&self, id: usize) -> bool {
        self.vocab[id].chars().count() == 1
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        let mut buf = [0u8; 4];
        text.chars()
            .map(|c| self.token_id(c.encode_utf8(&mut buf)))
            .collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| self.is_text_id(i))
            .map(|&i| self.vocab[i].as_str())
            .collect()
    }

    /// Parameter names and shapes in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let ff = d * self.ff_mult;
        let mut out = vec![
            ("enc.in_proj.w".to_string(), vec![self.feature_dim, d]),
            ("enc.in_proj.b".to_string(), vec![d]),
        ];
        let attn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            for role in ["q", "k", "v", "o"] {
                out.push((format!("{prefix}.{role}"), vec![d, d]));
            }
        };
        let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((format!("{prefix}.g"), vec![d]));
            out.push((format!("{prefix}.b"), vec![d]));
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((format!("{prefix}.w1"), vec![d, ff]));
            out.push((format!("{prefix}.b1"), vec![ff]));
            out.push((format!("{prefix}.w2"), vec![ff, d]));
            out.push((format!("{prefix}.b2"), vec![d]));
        };
        for l in 0..self.enc_layers {
            let p = format!("enc.layer{l}");
            norm(&mut out, &format!("{p}.ln1"));
            attn(&mut out, &format!("{p}.attn"));
            norm(&mut out, &format!("{p}.ln2"));
            ffn(&mut out, &format!("{p}.ff"));
        }
        norm(&mut out, "enc.ln_post");
        out.push(("dec.embed".to_string(), vec![self.vocab_size(), d]));
        for l in 0..self.dec_layers {
            let p = format!("dec.layer{l}");
            norm(&mut out, &format!("{p}.ln1"));
            attn(&mut out, &format!("{p}.attn"));
            norm(&mut out, &format!("{p}.ln2"));
            attn(&mut out, &format!("{p}.cross"));
            norm(&mut out, &format!("{p}.ln3"));
            ffn(&mut out, &format!("{p}.ff"));
        }
        norm(&mut out, "dec.ln_post");
        out
    }

    /// Names of every attention projection matrix, encoder first.
    pub fn attention_matrices(&self) -> Vec<String> {
        self.param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.contains(".attn.") || n.contains(".cross."))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

pub const EMBED_INIT_STD: f64 = 0.1;

pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministic initialization: `N(0, 1/fan_in)` matrices, zero biases,
/// unit layer-norm gains, `N(0, EMBED_INIT_STD^2)` embeddings.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name == "dec.embed" {
            (0..n).map(|_| EMBED_INIT_STD * gaussian(&mut rng)).collect()
        } else if shape.len() == 2 {
            let std = 1.0 / (shape[0] as f64).sqrt();
            (0..n).map(|_| std * gaussian(&mut rng)).collect()
        } else if name.ends_with(".g") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// One training or scoring example: feature frames, the language code the
/// decoder is conditioned on, and the reference text as token ids.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: Tensor,
    pub code: usize,
    pub target: Vec<usize>,
    /// Previous-text token ids placed before `<sot>` (and before any soft
    /// prompts). Unscored and without positional terms.
    pub context: Vec<usize>,
}

impl Example {
    pub fn new(config: &ModelConfig, features: Tensor, code: &str, text: &str) -> Result<Self> {
        Ok(Example {
            features,
            code: config.code_id(code)?,
            target: config.encode_text(text)?,
            context: Vec::new(),
        })
    }
}

fn check_source(config: &ModelConfig, features: &Tensor) -> Result<()> {
    if features.shape().len() != 2 || features.cols() != config.feature_dim {
        return Err(Error::shape(
            "features",
            format!("expected [frames, {}], got {:?}", config.feature_dim, features.shape()),
        ));
    }
    if features.rows() > config.max_src_len {
        return Err(Error::SourceTooLong {
            len: features.rows(),
            max: config.max_src_len,
        });
    }
    Ok(())
}

/// Taped forward pass.
struct Graph<'a> {
    cfg: &'a ModelConfig,
    params: &'a ParamStore,
    adapter: Option<&'a AdapterState>,
}

impl Graph<'_> {
    fn p(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.params.expect(name)?))
    }

    /// `x W (+ (x B) A when a LoRA pair targets W)`.
    fn project(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.p(tape, name)?;
        let y = tape.matmul(x, w)?;
        match self.adapter.and_then(|a| a.lora_names(name)) {
            Some((a_name, b_name)) => {
                let adapter = self.adapter.expect("checked above");
                let a = tape.param(&a_name, adapter.tensors().expect(&a_name)?);
                let b = tape.param(&b_name, adapter.tensors().expect(&b_name)?);
                let xb = tape.matmul(x, b)?;
                let delta = tape.matmul(xb, a)?;
                tape.add(y, delta)
            }
            None => Ok(y),
        }
    }

    fn norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(tape, &format!("{prefix}.g"))?;
        let b = self.p(tape, &format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b)
    }

    fn attention(&self, tape: &mut Tape, xq: Var, xkv: Var, prefix: &str, causal: bool) -> Result<Var> {
        let q = self.project(tape, xq, &format!("{prefix}.q"))?;
        let k = self.project(tape, xkv, &format!("{prefix}.k"))?;
        let v = self.project(tape, xkv, &format!("{prefix}.v"))?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.attention_scores(qh, kh, scale, causal.then_some(0))?;
            let p = tape.softmax_rows(s);
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.project(tape, cat, &format!("{prefix}.o"))
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w1 = self.p(tape, &format!("{prefix}.w1"))?;
        let b1 = self.p(tape, &format!("{prefix}.b1"))?;
        let w2 = self.p(tape, &format!("{prefix}.w2"))?;
        let b2 = self.p(tape, &format!("{prefix}.b2"))?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.tanh(h);
        let y = tape.matmul(h, w2)?;
        tape.add(y, b2)
    }

    fn encode(&self, tape: &mut Tape, features: &Tensor) -> Result<Var> {
        let s = features.rows();
        let d = self.cfg.d_model;
        let x = tape.constant(features.clone());
        let w = self.p(tape, "enc.in_proj.w")?;
        let b = self.p(tape, "enc.in_proj.b")?;
        let x = tape.matmul(x, w)?;
        let x = tape.add(x, b)?;
        let pe = tape.constant(Tensor::new(vec![s, d], kernels::sinusoid(0, s, d))?);
        let mut x = tape.add(x, pe)?;
        for l in 0..self.cfg.enc_layers {
            let p = format!("enc.layer{l}");
            let h = self.norm(tape, x, &format!("{p}.ln1"))?;
            let a = self.attention(tape, h, h, &format!("{p}.attn"), false)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &format!("{p}.ln2"))?;
            let f = self.feed_forward(tape, h, &format!("{p}.ff"))?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, x, "enc.ln_post")
    }

    /// Token embeddings, with the SLCT vector substituted wherever its code
    /// token occurs.
    fn embed_tokens(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let table = self.p(tape, "dec.embed")?;
        let slct = match self.adapter {
            Some(a) => a.slct_binding(self.cfg)?,
            None => None,
        };
        let Some((code, name)) = slct else {
            return tape.embedding(table, ids);
        };
        let vector = tape.param(&name, self.adapter.expect("slct").tensors().expect(&name)?);
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        for &id in ids {
            if id == code {
                if !run.is_empty() {
                    parts.push(tape.embedding(table, &run)?);
                    run.clear();
                }
                parts.push(vector);
            } else {
                run.push(id);
            }
        }
        if !run.is_empty() {
            parts.push(tape.embedding(table, &run)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat_rows(&parts)
    }

    /// Logits for every decoder position (prompt rows included).
    fn decode(&self, tape: &mut Tape, enc: Var, context: &[usize], ids: &[usize]) -> Result<Var> {
        let d = self.cfg.d_model;
        let tokens = self.embed_tokens(tape, ids)?;
        let pe = tape.constant(Tensor::new(vec![ids.len(), d], kernels::sinusoid(0, ids.len(), d))?);
        let mut rows = Vec::with_capacity(3);
        if !context.is_empty() {
            rows.push(self.embed_tokens(tape, context)?);
        }
        if let Some(name) = self.adapter.and_then(|a| a.prompt_name()) {
            rows.push(tape.param(name, self.adapter.expect("spt").tensors().expect(name)?));
        }
        rows.push(tape.add(tokens, pe)?);
        let mut x = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
        for l in 0..self.cfg.dec_layers {
            let p = format!("dec.layer{l}");
            let h = self.norm(tape, x, &format!("{p}.ln1"))?;
            let a = self.attention(tape, h, h, &format!("{p}.attn"), true)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &format!("{p}.ln2"))?;
            let c = self.attention(tape, h, enc, &format!("{p}.cross"), false)?;
            x = tape.add(x, c)?;
            let h = self.norm(tape, x, &format!("{p}.ln3"))?;
            let f = self.feed_forward(tape, h, &format!("{p}.ff"))?;
            x = tape.add(x, f)?;
        }
        let h = self.norm(tape, x, "dec.ln_post")?;
        let table = self.p(tape, "dec.embed")?;
        tape.matmul_bt(h, table)
    }
}

/// Teacher-forced mean per-token cross-entropy over a batch.
///
/// Each example contributes the targets `<code> text... <eot>` predicted
/// from `<sot> <code> text...`; soft-prompt rows carry no target.
pub fn nll_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParamStore,
    batch: &[Example],
    adapter: Option<&AdapterState>,
) -> Result<Var> {
    batch_nll(tape, config, params, batch, adapter, true)
}

fn batch_nll(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParamStore,
    batch: &[Example],
    adapter: Option<&AdapterState>,
    score_code: bool,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let graph = Graph {
        cfg: config,
        params,
        adapter,
    };
    let prompt_rows = adapter.map_or(0, |a| a.prompt_count());
    let (sot, eot) = (config.sot(), config.eot());
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for ex in batch {
        check_source(config, &ex.features)?;
        let tgt_len = ex.target.len() + 3;
        if tgt_len > config.max_tgt_len {
            return Err(Error::TargetTooLong {
                len: tgt_len,
                max: config.max_tgt_len,
            });
        }
        let mut ids = Vec::with_capacity(ex.target.len() + 2);
        ids.push(sot);
        ids.push(ex.code);
        ids.extend_from_slice(&ex.target);
        let mut targets: Vec<Option<usize>> = vec![None; ex.context.len() + prompt_rows];
        targets.push(score_code.then_some(ex.code));
        targets.extend(ex.target.iter().map(|&i| Some(i)));
        targets.push(Some(eot));
        let enc = graph.encode(tape, &ex.features)?;
        let logits = graph.decode(tape, enc, &ex.context, &ids)?;
        let ce = tape.cross_entropy(logits, &targets)?;
        count += ids.len() - usize::from(!score_code);
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Summed (not averaged) negative log-likelihood of one reference
/// transcription: its text tokens and `<eot>`, given `<sot>` and the code.
/// The code slot itself is not scored.
pub fn utterance_nll(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParamStore,
    example: &Example,
    adapter: Option<&AdapterState>,
) -> Result<Var> {
    let mean = batch_nll(tape, config, params, std::slice::from_ref(example), adapter, false)?;
    Ok(tape.scale(mean, (example.target.len() + 1) as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// Decoded text symbols, specials removed.
    pub tokens: Vec<String>,
    pub text: String,
    /// SHA-256 over the raw bits of every step's logits.
    pub per_step_logits_hash: String,
}

/// Untaped inference with per-layer key/value caches.
struct Runner<'a> {
    cfg: &'a ModelConfig,
    params: &'a ParamStore,
    adapter: Option<&'a AdapterState>,
}

struct LayerCache {
    self_k: Vec<f64>,
    self_v: Vec<f64>,
    cross_k: Vec<f64>,
    cross_v: Vec<f64>,
}

impl Runner<'_> {
    fn w(&self, name: &str) -> Result<&[f64]> {
        Ok(self.params.expect(name)?.data())
    }

    fn project(&self, x: &[f64], rows: usize, name: &str) -> Result<Vec<f64>> {
        let w = self.params.expect(name)?;
        let (k, n) = (w.rows(), w.cols());
        let mut y = kernels::matmul(x, w.data(), rows, k, n);
        if let Some((a_name, b_name)) = self.adapter.and_then(|a| a.lora_names(name)) {
            let t = self.adapter.expect("checked").tensors();
            let (a, b) = (t.expect(&a_name)?, t.expect(&b_name)?);
            let r = b.cols();
            let xb = kernels::matmul(x, b.data(), rows, k, r);
            let delta = kernels::matmul(&xb, a.data(), rows, r, n);
            for (yi, di) in y.iter_mut().zip(delta) {
                *yi += di;
            }
        }
        Ok(y)
    }

    fn norm(&self, x: &[f64], prefix: &str) -> Result<Vec<f64>> {
        let g = self.w(&format!("{prefix}.g"))?;
        let b = self.w(&format!("{prefix}.b"))?;
        Ok(kernels::layer_norm_rows(x, g, b).0)
    }

    fn heads(&self, q: &[f64], tq: usize, k: &[f64], v: &[f64], tk: usize, causal: Option<usize>) -> Vec<f64> {
        let d = self.cfg.d_model;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let cols = |x: &[f64], rows: usize, h: usize| -> Vec<f64> {
            (0..rows).flat_map(|i| x[i * d + h * dh..i * d + (h + 1) * dh].iter().copied()).collect()
        };
        let mut out = vec![0.0; tq * d];
        for h in 0..self.cfg.n_heads {
            let (qh, kh, vh) = (cols(q, tq, h), cols(k, tk, h), cols(v, tk, h));
            let s = kernels::attention_scores(&qh, &kh, tq, tk, dh, scale, causal);
            let p = kernels::softmax_rows(&s, tk);
            let o = kernels::matmul(&p, &vh, tq, tk, dh);
            for i in 0..tq {
                out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
            }
        }
        out
    }

    fn feed_forward(&self, x: &[f64], rows: usize, prefix: &str) -> Result<Vec<f64>> {
        let mut h = self.project(x, rows, &format!("{prefix}.w1"))?;
        kernels::add_row_bias(&mut h, self.w(&format!("{prefix}.b1"))?);
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        let mut y = self.project(&h, rows, &format!("{prefix}.w2"))?;
        kernels::add_row_bias(&mut y, self.w(&format!("{prefix}.b2"))?);
        Ok(y)
    }

    fn encode(&self, features: &Tensor) -> Result<Vec<f64>> {
        let s = features.rows();
        let d = self.cfg.d_model;
        let mut x = self.project(features.data(), s, "enc.in_proj.w")?;
        kernels::add_row_bias(&mut x, self.w("enc.in_proj.b")?);
        for (xi, pi) in x.iter_mut().zip(kernels::sinusoid(0, s, d)) {
            *xi += pi;
        }
        for l in 0..self.cfg.enc_layers {
            let p = format!("enc.layer{l}");
            let h = self.norm(&x, &format!("{p}.ln1"))?;
            let q = self.project(&h, s, &format!("{p}.attn.q"))?;
            let k = self.project(&h, s, &format!("{p}.attn.k"))?;
            let v = self.project(&h, s, &format!("{p}.attn.v"))?;
            let a = self.heads(&q, s, &k, &v, s, None);
            let a = self.project(&a, s, &format!("{p}.attn.o"))?;
            add_into(&mut x, &a);
            let h = self.norm(&x, &format!("{p}.ln2"))?;
            let f = self.feed_forward(&h, s, &format!("{p}.ff"))?;
            add_into(&mut x, &f);
        }
        self.norm(&x, "enc.ln_post")
    }

    fn embed_row(&self, id: usize, slct: &Option<(usize, String)>) -> Result<Vec<f64>> {
        if let Some((code, name)) = slct {
            if *code == id {
                return Ok(self.adapter.expect("slct").tensors().expect(name)?.data().to_vec());
            }
        }
        Ok(self.params.expect("dec.embed")?.row(id).to_vec())
    }

    /// Runs `rows` new decoder rows starting at cache slot `start`, extending
    /// the caches. The first `prompts` slots get no positional term. Returns
    /// the final-norm hidden state of the last row.
    fn step(
        &self,
        caches: &mut [LayerCache],
        input: Vec<f64>,
        rows: usize,
        start: usize,
        prompts: usize,
        src_len: usize,
    ) -> Result<Vec<f64>> {
        let d = self.cfg.d_model;
        let mut x = input;
        let skip = prompts.saturating_sub(start).min(rows);
        let pos0 = (start + skip) - prompts;
        for (xi, pi) in x[skip * d..].iter_mut().zip(kernels::sinusoid(pos0, rows - skip, d)) {
            *xi += pi;
        }
        for (l, cache) in caches.iter_mut().enumerate() {
            let p = format!("dec.layer{l}");
            let h = self.norm(&x, &format!("{p}.ln1"))?;
            let q = self.project(&h, rows, &format!("{p}.attn.q"))?;
            cache.self_k.extend(self.project(&h, rows, &format!("{p}.attn.k"))?);
            cache.self_v.extend(self.project(&h, rows, &format!("{p}.attn.v"))?);
            let total = start + rows;
            let a = self.heads(&q, rows, &cache.self_k, &cache.self_v, total, Some(start));
            let a = self.project(&a, rows, &format!("{p}.attn.o"))?;
            add_into(&mut x, &a);
            let h = self.norm(&x, &format!("{p}.ln2"))?;
            let q = self.project(&h, rows, &format!("{p}.cross.q"))?;
            let c = self.heads(&q, rows, &cache.cross_k, &cache.cross_v, src_len, None);
            let c = self.project(&c, rows, &format!("{p}.cross.o"))?;
            add_into(&mut x, &c);
            let h = self.norm(&x, &format!("{p}.ln3"))?;
            let f = self.feed_forward(&h, rows, &format!("{p}.ff"))?;
            add_into(&mut x, &f);
        }
        let last = x[(rows - 1) * d..].to_vec();
        self.norm(&last, "dec.ln_post")
    }

    fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        let e = self.params.expect("dec.embed")?;
        let mut out = vec![0.0; e.rows()];
        kernels::gemm(h, false, e.data(), true, 1, self.cfg.d_model, e.rows(), &mut out, false);
        Ok(out)
    }

    fn run(&self, features: &Tensor, code: usize, keep: bool) -> Result<(Vec<usize>, String, Vec<Vec<f64>>)> {
        let cfg = self.cfg;
        let d = cfg.d_model;
        let enc = self.encode(features)?;
        let s = features.rows();
        let mut caches = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let p = format!("dec.layer{l}");
            caches.push(LayerCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross_k: self.project(&enc, s, &format!("{p}.cross.k"))?,
                cross_v: self.project(&enc, s, &format!("{p}.cross.v"))?,
            });
        }
        let slct = match self.adapter {
            Some(a) => a.slct_binding(cfg)?,
            None => None,
        };
        let mut prefix = Vec::new();
        let prompts = self.adapter.map_or(0, |a| a.prompt_count());
        if let Some(name) = self.adapter.and_then(|a| a.prompt_name()) {
            prefix.extend_from_slice(self.adapter.expect("spt").tensors().expect(name)?.data());
        }
        prefix.extend(self.embed_row(cfg.sot(), &slct)?);
        prefix.extend(self.embed_row(code, &slct)?);
        let prefix_rows = prefix.len() / d;

        let eot = cfg.eot();
        let allowed: Vec<bool> = (0..cfg.vocab_size()).map(|i| i == eot || cfg.is_text_id(i)).collect();
        let mut hasher = Sha256::new();
        let mut kept = Vec::new();
        let mut out_ids = Vec::new();
        let mut h = self.step(&mut caches, prefix, prefix_rows, 0, prompts, s)?;
        let mut pos = prefix_rows;
        // <sot> and the code occupy two of the max_tgt_len target slots.
        while out_ids.len() + 2 < cfg.max_tgt_len {
            let logits = self.logits(&h)?;
            for v in &logits {
                hasher.update(v.to_le_bytes());
            }
            let next = argmax_allowed(&logits, &allowed);
            if keep {
                kept.push(logits);
            }
            if next == eot {
                break;
            }
            out_ids.push(next);
            let row = self.embed_row(next, &slct)?;
            h = self.step(&mut caches, row, 1, pos, prompts, s)?;
            pos += 1;
        }
        Ok((out_ids, hex::encode(hasher.finalize()), kept))
    }
}

fn add_into(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// First maximal allowed index; ties resolve to the lower id.
fn argmax_allowed(logits: &[f64], allowed: &[bool]) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in logits.iter().enumerate() {
        if allowed[i] && (best == usize::MAX || v > logits[best]) {
            best = i;
        }
    }
    best
}

fn transcribe_inner(
    config: &ModelConfig,
    params: &ParamStore,
    features: &Tensor,
    lang_code: &str,
    adapter: Option<&AdapterState>,
    keep: bool,
) -> Result<(DecodeOutput, Vec<Vec<f64>>)> {
    let code = config.code_id(lang_code)?;
    check_source(config, features)?;
    let runner = Runner {
        cfg: config,
        params,
        adapter,
    };
    let (ids, hash, kept) = runner.run(features, code, keep)?;
    let tokens: Vec<String> = ids.iter().map(|&i| config.vocab[i].clone()).collect();
    let text = tokens.concat();
    Ok((
        DecodeOutput {
            tokens,
            text,
            per_step_logits_hash: hash,
        },
        kept,
    ))
}

/// Greedy decoding from `[prompts] <sot> <code>` until `<eot>` or
/// `max_tgt_len`. Only text symbols and `<eot>` are eligible outputs.
pub fn transcribe(
    config: &ModelConfig,
    params: &ParamStore,
    features: &Tensor,
    lang_code: &str,
    adapter: Option<&AdapterState>,
) -> Result<DecodeOutput> {
    Ok(transcribe_inner(config, params, features, lang_code, adapter, false)?.0)
}

/// [`transcribe`] that also returns each step's full logit vector.
pub fn transcribe_traced(
    config: &ModelConfig,
    params: &ParamStore,
    features: &Tensor,
    lang_code: &str,
    adapter: Option<&AdapterState>,
) -> Result<(DecodeOutput, Vec<Vec<f64>>)> {
    transcribe_inner(config, params, features, lang_code, adapter, true)
}

/// Teacher-forced logits from the taped graph, one row per decoder input
/// position after any soft prompts. Used to cross-check the cached decoder.
pub fn teacher_forced_logits(
    config: &ModelConfig,
    params: &ParamStore,
    features: &Tensor,
    ids: &[usize],
    adapter: Option<&AdapterState>,
) -> Result<Vec<Vec<f64>>> {
    check_source(config, features)?;
    let mut tape = Tape::with_scope(crate::autodiff::GradScope::Frozen);
    let graph = Graph {
        cfg: config,
        params,
        adapter,
    };
    let enc = graph.encode(&mut tape, features)?;
    let logits = graph.decode(&mut tape, enc, &[], ids)?;
    let t = tape.value(logits);
    let skip = adapter.map_or(0, |a| a.prompt_count());
    Ok((skip..t.rows()).map(|r| t.row(r).to_vec()).collect())
}
