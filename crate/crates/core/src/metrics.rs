//! Character error rate, text normalization and code-affinity scoring.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Lowercases, drops Unicode punctuation and collapses whitespace runs to a
/// single space with no leading or trailing space.
pub fn normalize(text: &str) -> String {
    let stripped: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| !is_punctuation(*c))
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Levenshtein distance between two symbol sequences, with the operation
/// breakdown of one optimal alignment (insertions add hypothesis symbols).
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diag = d[(i - 1) * w + j - 1];
            let same = reference[i - 1] == hypothesis[j - 1];
            if here == diag + usize::from(!same) {
                if !same {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Char,
    Word,
}

impl Unit {
    pub fn name(self) -> &'static str {
        match self {
            Unit::Char => "char",
            Unit::Word => "word",
        }
    }

    /// Splits normalized text into scoring units. Spaces count as characters.
    fn split(self, normalized: &str) -> Vec<String> {
        match self {
            Unit::Char => normalized.chars().map(String::from).collect(),
            Unit::Word => normalized.split(' ').filter(|w| !w.is_empty()).map(str::to_owned).collect(),
        }
    }
}

impl std::fmt::Display for Unit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Unit {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "char" => Ok(Unit::Char),
            "word" => Ok(Unit::Word),
            other => Err(crate::Error::InvalidConfig(format!("unknown unit `{other}` (char|word)"))),
        }
    }
}

/// Corpus-level error rate: total edits over total reference length after
/// normalization (micro-average). Pairs whose normalized reference is empty
/// are skipped and counted in `excluded_empty`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub unit: Unit,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_length: usize,
    pub rate: f64,
    pub utterances: usize,
    pub excluded_empty: usize,
}

impl ScoreReport {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Scores `(hypothesis, reference)` pairs.
pub fn corpus_score<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>, unit: Unit) -> ScoreReport {
    let mut report = ScoreReport {
        unit,
        substitutions: 0,
        insertions: 0,
        deletions: 0,
        ref_length: 0,
        rate: 0.0,
        utterances: 0,
        excluded_empty: 0,
    };
    for (hypothesis, reference) in pairs {
        let r = unit.split(&normalize(reference));
        if r.is_empty() {
            report.excluded_empty += 1;
            continue;
        }
        let h = unit.split(&normalize(hypothesis));
        let e = edit_distance(&r, &h);
        report.substitutions += e.substitutions;
        report.insertions += e.insertions;
        report.deletions += e.deletions;
        report.ref_length += r.len();
        report.utterances += 1;
    }
    if report.ref_length > 0 {
        report.rate = report.distance() as f64 / report.ref_length as f64;
    }
    report
}

/// Character and word inventories of a language's training text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inventory {
    pub chars: HashSet<String>,
    pub words: HashSet<String>,
}

impl Inventory {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut inv = Inventory::default();
        for t in texts {
            let t = normalize(t);
            inv.chars.extend(affinity_units(&t, AffinityUnit::Char));
            inv.words.extend(affinity_units(&t, AffinityUnit::Token));
        }
        inv
    }

    fn units(&self, unit: AffinityUnit) -> &HashSet<String> {
        match unit {
            AffinityUnit::Char => &self.chars,
            AffinityUnit::Token => &self.words,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffinityUnit {
    /// Non-space characters.
    Char,
    /// Whitespace-separated words.
    Token,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffinityMeasure {
    /// Share of target occurrences whose unit appears in the source inventory.
    #[default]
    Coverage,
    /// Jaccard similarity of the two unit sets.
    Jaccard,
}

impl std::str::FromStr for AffinityMeasure {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "coverage" => Ok(AffinityMeasure::Coverage),
            "jaccard" => Ok(AffinityMeasure::Jaccard),
            other => Err(crate::Error::InvalidConfig(format!(
                "unknown affinity measure `{other}` (coverage|jaccard)"
            ))),
        }
    }
}

fn affinity_units(normalized: &str, unit: AffinityUnit) -> Vec<String> {
    match unit {
        AffinityUnit::Char => normalized.chars().filter(|c| *c != ' ').map(String::from).collect(),
        AffinityUnit::Token => normalized.split(' ').filter(|w| !w.is_empty()).map(str::to_owned).collect(),
    }
}

/// How well a source inventory explains the target texts at one unit
/// level. Lies in [0, 1]; an empty target scores 0.
pub fn code_affinity<'a>(
    target: impl IntoIterator<Item = &'a str>,
    source: &Inventory,
    unit: AffinityUnit,
    measure: AffinityMeasure,
) -> f64 {
    let occurrences: Vec<String> = target
        .into_iter()
        .flat_map(|t| affinity_units(&normalize(t), unit))
        .collect();
    if occurrences.is_empty() {
        return 0.0;
    }
    let src = source.units(unit);
    match measure {
        AffinityMeasure::Coverage => {
            let hits = occurrences.iter().filter(|u| src.contains(*u)).count();
            hits as f64 / occurrences.len() as f64
        }
        AffinityMeasure::Jaccard => {
            let tgt: HashSet<&String> = occurrences.iter().collect();
            let inter = tgt.iter().filter(|u| src.contains(**u)).count();
            let union = tgt.len() + src.len() - inter;
            inter as f64 / union as f64
        }
    }
}

/// Surrogate ranking score: the mean of character and token affinity.
pub fn combined_affinity(target: &[&str], source: &Inventory, measure: AffinityMeasure) -> f64 {
    0.5 * (code_affinity(target.iter().copied(), source, AffinityUnit::Char, measure)
        + code_affinity(target.iter().copied(), source, AffinityUnit::Token, measure))
}

/// Candidates sorted by descending combined affinity; ties keep input order.
pub fn rank_codes(target: &[&str], candidates: &[(String, Inventory)], measure: AffinityMeasure) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = candidates
        .iter()
        .map(|(code, inv)| (code.clone(), combined_affinity(target, inv, measure)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored
}
