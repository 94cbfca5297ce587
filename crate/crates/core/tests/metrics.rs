use clab_core::metrics::{code_affinity, edit_distance, normalize, AffinityMeasure, AffinityUnit, Inventory};
use proptest::prelude::*;

const MAX_LEN: usize = 6;

/// Every string over {0,1,2} of length <= MAX_LEN, shortest first.
fn all_strings() -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..MAX_LEN {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Index of a string in `all_strings` order.
fn index_of(s: &[u8]) -> usize {
    let offset: usize = (0..s.len()).map(|k| 3usize.pow(k as u32)).sum();
    offset + s.iter().fold(0, |acc, &c| acc * 3 + c as usize)
}

/// The recursive Levenshtein definition on suffixes, memoized across pairs.
struct Oracle {
    memo: Vec<u8>,
    n: usize,
}

impl Oracle {
    fn new(n: usize) -> Self {
        Oracle {
            memo: vec![u8::MAX; n * n],
            n,
        }
    }

    fn dist(&mut self, a: &[u8], b: &[u8]) -> u8 {
        if a.is_empty() {
            return b.len() as u8;
        }
        if b.is_empty() {
            return a.len() as u8;
        }
        let key = index_of(a) * self.n + index_of(b);
        if self.memo[key] != u8::MAX {
            return self.memo[key];
        }
        let d = (self.dist(&a[1..], b) + 1)
            .min(self.dist(a, &b[1..]) + 1)
            .min(self.dist(&a[1..], &b[1..]) + u8::from(a[0] != b[0]));
        self.memo[key] = d;
        d
    }
}

#[test]
fn dp_matches_recursive_oracle_exhaustively() {
    let strings = all_strings();
    assert_eq!(strings.len(), 1093);
    let mut oracle = Oracle::new(strings.len());
    for a in &strings {
        for b in &strings {
            let c = edit_distance(a, b);
            assert_eq!(c.total(), oracle.dist(a, b) as usize, "{a:?} vs {b:?}");
            assert_eq!(a.len() - c.deletions + c.insertions, b.len());
            assert!(c.total() >= a.len().abs_diff(b.len()));
            assert!(c.total() <= a.len().max(b.len()));
        }
    }
}

#[test]
fn kitten_sitting() {
    let a: Vec<char> = "kitten".chars().collect();
    let b: Vec<char> = "sitting".chars().collect();
    let c = edit_distance(&a, &b);
    assert_eq!(c.total(), 3);
    assert_eq!((c.substitutions, c.insertions, c.deletions), (2, 1, 0));
}

fn short() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..3u8, 0..=MAX_LEN)
}

proptest! {
    #[test]
    fn triangle_inequality(a in short(), b in short(), c in short()) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y).total();
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &b) == 0, a == b);
    }

    #[test]
    fn decomposition(a in prop::collection::vec(0..5u8, 0..30), b in prop::collection::vec(0..5u8, 0..30)) {
        let c = edit_distance(&a, &b);
        prop_assert_eq!(c.total(), c.substitutions + c.insertions + c.deletions);
        prop_assert_eq!(a.len() + c.insertions - c.deletions, b.len());
        prop_assert!(a.len().abs_diff(b.len()) <= c.total() && c.total() <= a.len().max(b.len()));
    }

    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once.clone());
        prop_assert!(!once.starts_with(' ') && !once.ends_with(' ') && !once.contains("  "));
    }

    #[test]
    fn coverage_never_drops_when_source_grows(
        target in prop::collection::vec("[a-e]{1,4}( [a-e]{1,4}){0,3}", 1..5),
        source in prop::collection::vec("[a-e]{1,4}( [a-e]{1,4}){0,3}", 0..5),
        extra in prop::collection::vec("[a-h]{1,4}", 1..4),
    ) {
        let small = Inventory::from_texts(source.iter().map(String::as_str));
        let large = Inventory::from_texts(source.iter().chain(&extra).map(String::as_str));
        for unit in [AffinityUnit::Char, AffinityUnit::Token] {
            let a = code_affinity(target.iter().map(String::as_str), &small, unit, AffinityMeasure::Coverage);
            let b = code_affinity(target.iter().map(String::as_str), &large, unit, AffinityMeasure::Coverage);
            prop_assert!(b >= a);
            prop_assert!((0.0..=1.0).contains(&b));
        }
    }
}

#[test]
fn affinity_closed_cases() {
    let src = Inventory::from_texts(["a"]);
    let c = |t: &str, s: &Inventory| code_affinity([t], s, AffinityUnit::Char, AffinityMeasure::Coverage);
    assert!((c("aab", &src) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(c("xyz", &src), 0.0);
    assert_eq!(c("ab ba", &Inventory::from_texts(["abc"])), 1.0);
}
