//! Synthetic "languages": each character of an alphabet owns a Gaussian
//! prototype feature vector, utterances are word sequences from a lexicon,
//! and features are prototype frames plus Gaussian noise.
//!
//! A child language drifts from its parent along a path fixed by the
//! parent's seed: the first `round(rate * n)` characters of the parent's
//! drift order have their prototypes rotated among themselves, and the
//! first `round(rate * W)` lexicon slots take the parent's alternate words.
//! Siblings therefore nest: a child at rate 0.6 shares the rate-0.3
//! child's mutations almost exactly. Because mutated characters reuse the
//! parent's prototypes, the same frame means different characters in
//! related languages and the language code is needed to disambiguate.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{gaussian, text_symbols};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParentLink {
    pub id: String,
    pub mutation_rate: f64,
}

/// Generative definition of a language, as stored in roster files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: String,
    pub code_token: String,
    pub alphabet: String,
    pub codebook_seed: u64,
    pub noise_sigma: f64,
    pub frames_per_char: usize,
    pub parent: Option<ParentLink>,
}

/// Generator-wide settings shared by every language of a roster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub feature_dim: usize,
    pub lexicon_size: usize,
    /// Upper bound on utterance length in characters.
    pub max_text_chars: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            feature_dim: 16,
            lexicon_size: 200,
            max_text_chars: 60,
        }
    }
}

/// A resolved language: prototypes, lexicon and the drift path its own
/// children follow.
#[derive(Clone, Debug, PartialEq)]
pub struct Language {
    pub spec: LanguageSpec,
    alphabet: Vec<char>,
    prototypes: BTreeMap<char, Vec<f64>>,
    lexicon: Vec<String>,
    drift_chars: Vec<char>,
    drift_words: Vec<usize>,
    alternate_words: Vec<String>,
}

fn mix(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn random_word(rng: &mut ChaCha8Rng, letters: &[char]) -> String {
    let len = rng.random_range(1..=8);
    (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect()
}

/// `n` distinct words not in `avoid`.
fn fresh_words(rng: &mut ChaCha8Rng, letters: &[char], n: usize, avoid: &HashSet<String>) -> Result<Vec<String>> {
    let mut seen = avoid.clone();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * n.max(1) {
            return Err(Error::InvalidConfig(format!(
                "alphabet {letters:?} too small for a lexicon of {n} distinct words"
            )));
        }
        let w = random_word(rng, letters);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    Ok(out)
}

/// Number of characters a rate mutates. A rotation needs at least two.
pub fn mutated_char_count(rate: f64, n: usize) -> usize {
    let k = (rate * n as f64).round() as usize;
    if k == 1 && n >= 2 {
        2
    } else {
        k.min(n)
    }
}

impl Language {
    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn code(&self) -> &str {
        &self.spec.code_token
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    pub fn prototype(&self, c: char) -> Option<&[f64]> {
        self.prototypes.get(&c).map(Vec::as_slice)
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.values().next().map_or(0, Vec::len)
    }

    pub fn min_prototype_distance(&self) -> f64 {
        let protos: Vec<&Vec<f64>> = self.prototypes.values().collect();
        let mut best = f64::INFINITY;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                let d2: f64 = protos[i].iter().zip(protos[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(d2.sqrt());
            }
        }
        best
    }

    /// Whether the closest prototypes lie more than four noise deviations apart.
    pub fn is_separable(&self) -> bool {
        self.alphabet.len() < 2 || self.min_prototype_distance() > 4.0 * self.spec.noise_sigma
    }

    /// Fraction of alphabet characters whose prototype is identical in both.
    pub fn prototype_overlap(&self, other: &Language) -> f64 {
        let same = self
            .alphabet
            .iter()
            .filter(|c| other.prototype(**c) == self.prototype(**c))
            .count();
        same as f64 / self.alphabet.len() as f64
    }

    /// Character whose prototype is nearest to `frame`.
    pub fn nearest_char(&self, frame: &[f64]) -> char {
        let mut best = (f64::INFINITY, ' ');
        for (&c, p) in &self.prototypes {
            let d2: f64 = p.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, c);
            }
        }
        best.1
    }
}

fn parse_alphabet(spec: &LanguageSpec) -> Result<Vec<char>> {
    let allowed = text_symbols();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in spec.alphabet.chars() {
        if !allowed.contains(&c) {
            return Err(Error::InvalidConfig(format!(
                "language {}: {c:?} is not one of the 28 text symbols",
                spec.id
            )));
        }
        if seen.insert(c) {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!("language {}: empty alphabet", spec.id)));
    }
    if !out.iter().any(|&c| c != ' ') {
        return Err(Error::InvalidConfig(format!("language {}: alphabet has no letters", spec.id)));
    }
    Ok(out)
}

/// Resolves a spec into a language. Children must be given their resolved
/// parent and share its alphabet.
pub fn make_language(spec: &LanguageSpec, parent: Option<&Language>, params: &SynthParams) -> Result<Language> {
    let alphabet = parse_alphabet(spec)?;
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("language {}: noise_sigma must be >= 0", spec.id)));
    }
    if spec.frames_per_char == 0 {
        return Err(Error::InvalidConfig(format!("language {}: frames_per_char must be >= 1", spec.id)));
    }
    let letters: Vec<char> = alphabet.iter().copied().filter(|&c| c != ' ').collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.codebook_seed);

    let (prototypes, lexicon) = match (&spec.parent, parent) {
        (None, _) => {
            let protos: BTreeMap<char, Vec<f64>> = alphabet
                .iter()
                .map(|&c| (c, (0..params.feature_dim).map(|_| gaussian(&mut rng)).collect()))
                .collect();
            let lexicon = fresh_words(&mut rng, &letters, params.lexicon_size, &HashSet::new())?;
            (protos, lexicon)
        }
        (Some(link), Some(p)) => {
            if link.id != p.spec.id {
                return Err(Error::InvalidConfig(format!(
                    "language {}: parent `{}` given, `{}` expected",
                    spec.id, p.spec.id, link.id
                )));
            }
            if !(0.0..=1.0).contains(&link.mutation_rate) {
                return Err(Error::InvalidConfig(format!(
                    "language {}: mutation_rate must lie in [0, 1]",
                    spec.id
                )));
            }
            if alphabet != p.alphabet {
                return Err(Error::InvalidConfig(format!(
                    "language {}: child alphabet must equal parent's",
                    spec.id
                )));
            }
            let mut protos = p.prototypes.clone();
            let k = mutated_char_count(link.mutation_rate, alphabet.len());
            let moved = &p.drift_chars[..k];
            for (i, c) in moved.iter().enumerate() {
                protos.insert(*c, p.prototypes[&moved[(i + 1) % k]].clone());
            }
            let mut lexicon = p.lexicon.clone();
            let kw = (link.mutation_rate * lexicon.len() as f64).round() as usize;
            for &slot in &p.drift_words[..kw] {
                lexicon[slot] = p.alternate_words[slot].clone();
            }
            (protos, lexicon)
        }
        (Some(link), None) => {
            return Err(Error::InvalidConfig(format!(
                "language {}: parent `{}` not resolved",
                spec.id, link.id
            )))
        }
    };

    let mut drift_chars = alphabet.clone();
    drift_chars.shuffle(&mut rng);
    let mut drift_words: Vec<usize> = (0..lexicon.len()).collect();
    drift_words.shuffle(&mut rng);
    let avoid: HashSet<String> = lexicon.iter().cloned().collect();
    let alternate_words = fresh_words(&mut rng, &letters, lexicon.len(), &avoid)?;

    let lang = Language {
        spec: spec.clone(),
        alphabet,
        prototypes,
        lexicon,
        drift_chars,
        drift_words,
        alternate_words,
    };
    Ok(lang)
}

/// Resolves a roster in order; each parent must precede its children.
pub fn resolve_roster(specs: &[LanguageSpec], params: &SynthParams) -> Result<Vec<Language>> {
    let mut out: Vec<Language> = Vec::with_capacity(specs.len());
    let mut ids = HashSet::new();
    for spec in specs {
        if !ids.insert(spec.id.clone()) {
            return Err(Error::InvalidConfig(format!("duplicate language id `{}`", spec.id)));
        }
        let parent = match &spec.parent {
            Some(link) => Some(out.iter().find(|l| l.spec.id == link.id).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "language {}: parent `{}` must appear earlier in the roster",
                    spec.id, link.id
                ))
            })?),
            None => None,
        };
        let lang = make_language(spec, parent, params)?;
        out.push(lang);
    }
    Ok(out)
}

/// Frames for `text`: `frames_per_char` noisy copies of each character's
/// prototype, noise drawn from a stream seeded by the language and `utt_seed`.
pub fn synthesize(lang: &Language, text: &str, utt_seed: u64) -> Result<Tensor> {
    let fpc = lang.spec.frames_per_char;
    let dim = lang.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[lang.spec.codebook_seed, utt_seed]));
    let mut data = Vec::with_capacity(text.len() * fpc * dim);
    for c in text.chars() {
        let proto = lang.prototype(c).ok_or_else(|| Error::OutOfAlphabet {
            ch: c,
            lang: lang.spec.id.clone(),
        })?;
        for _ in 0..fpc {
            for &p in proto {
                data.push(p + lang.spec.noise_sigma * gaussian(&mut rng));
            }
        }
    }
    if data.is_empty() {
        return Err(Error::Data("cannot synthesize an empty text".into()));
    }
    Tensor::new(vec![data.len() / dim, dim], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    /// Utterance seeds of a split start here, keeping splits disjoint.
    pub fn seed_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Dev => 1_000_000,
            Split::Test => 2_000_000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    /// Default utterance counts per split.
    pub fn default_size(self) -> usize {
        match self {
            Split::Train => 285,
            Split::Dev => 37,
            Split::Test => 84,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub utt_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub lang: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    lang: String,
    split: Split,
    text: String,
    utt_seed: u64,
}

fn sample_text(lang: &Language, rng: &mut ChaCha8Rng, max_chars: usize) -> String {
    let n_words = rng.random_range(3..=12);
    let mut text = String::new();
    for _ in 0..n_words {
        let w = &lang.lexicon[rng.random_range(0..lang.lexicon.len())];
        let extra = if text.is_empty() { w.len() } else { w.len() + 1 };
        if text.len() + extra > max_chars {
            break;
        }
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(w);
    }
    text
}

/// `n` utterances with seeds `split.seed_base() + i` and texts of 3-12
/// lexicon words, truncated to `max_text_chars`.
pub fn generate_corpus(lang: &Language, split: Split, n: usize, base_seed: u64, params: &SynthParams) -> Corpus {
    let utterances = (0..n as u64)
        .map(|i| {
            let utt_seed = split.seed_base() + i;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[base_seed, lang.spec.codebook_seed, utt_seed]));
            Utterance {
                text: sample_text(lang, &mut rng, params.max_text_chars),
                utt_seed,
            }
        })
        .collect();
    Corpus {
        lang: lang.spec.id.clone(),
        split,
        utterances,
    }
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.text.as_str())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            let rec = CorpusRecord {
                lang: self.lang.clone(),
                split: self.split,
                text: u.text.clone(),
                utt_seed: u.utt_seed,
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_jsonl().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut header: Option<(String, Split)> = None;
        let mut utterances = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            match &header {
                None => header = Some((rec.lang.clone(), rec.split)),
                Some((l, s)) if *l != rec.lang || *s != rec.split => {
                    return Err(Error::Data(format!(
                        "{}:{}: mixed corpus ({l}/{s} then {}/{})",
                        path.display(),
                        lineno + 1,
                        rec.lang,
                        rec.split
                    )))
                }
                _ => {}
            }
            utterances.push(Utterance {
                text: rec.text,
                utt_seed: rec.utt_seed,
            });
        }
        let (lang, split) = header.ok_or_else(|| Error::Data(format!("{}: empty corpus", path.display())))?;
        Ok(Corpus {
            lang,
            split,
            utterances,
        })
    }
}

pub fn read_roster(path: &Path) -> Result<Vec<LanguageSpec>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
