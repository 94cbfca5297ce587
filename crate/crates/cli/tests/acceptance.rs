//! End-to-end acceptance checks, one test per criterion. Each prints a
//! `criterion N (...): PASS|FAIL ...` line to stdout and fails on FAIL.
//!
//! `cargo test -p clab-tool --test acceptance -- --nocapture`

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use clab_core::adapters::{merge_lora, trainable_fraction, AdapterSpec, Method};
use clab_core::autodiff::Tape;
use clab_core::checkpoint;
use clab_core::continual::{ewc_penalty, fisher_overlap, EwcConfig, FisherDiagonal};
use clab_core::experiments::{adapt_config, default_roster, output_files, DataSet, ExperimentManifest, FisherNorm, Results};
use clab_core::gradcheck::{check_tape_gradients, primitive_suite, PRIMITIVES};
use clab_core::metrics::edit_distance;
use clab_core::model::{init_model, nll_loss, transcribe, transcribe_traced, Example, ModelConfig};
use clab_core::params::ParamStore;
use clab_core::synthdata::{resolve_roster, synthesize, Split, SynthParams};
use clab_core::tensor::Tensor;
use clab_core::training::{train, Artifact};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TIE: f64 = 0.005;

fn verdict(n: usize, what: &str, ok: bool, detail: &str) {
    let line = format!("criterion {n} ({what}): {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(ok, "criterion {n} failed: {detail}");
}

/// Serializes the tests so timed criteria do not share the CPU.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

struct Run {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    results: Results,
    elapsed: Duration,
}

fn reproduce_into(parent: &Path) -> (PathBuf, Duration) {
    let dir = parent.join("out");
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_clab"))
        .args(["reproduce", "--out"])
        .arg(&dir)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("spawning clab");
    assert!(status.success(), "clab reproduce exited with {status}");
    (dir, start.elapsed())
}

/// The default pipeline, run once and shared by every criterion.
fn pipeline() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let (dir, elapsed) = reproduce_into(tmp.path());
        let results = serde_json::from_str(&fs::read_to_string(dir.join("results.json")).unwrap()).unwrap();
        Run {
            _tmp: tmp,
            dir,
            results,
            elapsed,
        }
    })
}

fn manifest(run: &Run) -> ExperimentManifest {
    ExperimentManifest::from_json(&fs::read_to_string(run.dir.join("manifest.json")).unwrap()).unwrap()
}

fn data(run: &Run, m: &ExperimentManifest) -> DataSet {
    DataSet::load(&run.dir.join("data"), &m.synth).unwrap()
}

fn base_model(run: &Run) -> (ModelConfig, ParamStore) {
    checkpoint::load_model(&run.dir.join("runs/base/artifact.bin")).unwrap()
}

fn job_code(run: &Run, job: &str) -> String {
    run.results.jobs.iter().find(|j| j.name == job).unwrap().code.clone()
}

#[test]
fn criterion_01_gradient_suite() {
    let _cpu = exclusive();
    let start = Instant::now();
    let reports = primitive_suite(2024, 1e-5, 1e-6).unwrap();
    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| *n).collect();
    let worst_prim = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);

    let config = ModelConfig::default();
    let params = init_model(&config, 5).unwrap();
    let langs = resolve_roster(&default_roster(), &SynthParams::default()).unwrap();
    let text = "the stars";
    let ex = Example::new(&config, synthesize(&langs[0], text, 3).unwrap(), "<L0>", text).unwrap();
    let model = check_tape_gradients(
        |p, tape| nll_loss(tape, &config, p, std::slice::from_ref(&ex), None),
        &params,
        1e-5,
        1e-4,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = reports.len() == PRIMITIVES.len() && failed.is_empty() && model.passed() && secs < 60.0;
    verdict(
        1,
        "gradient suite",
        ok,
        &format!(
            "{} primitives, worst rel {worst_prim:.2e}, failing {failed:?}; full model {} coords worst rel {:.2e}; {secs:.1}s",
            reports.len(),
            model.coords_checked,
            model.max_rel_error
        ),
    );
}

#[test]
fn criterion_02_ewc_algebra() {
    let _cpu = exclusive();
    let run = pipeline();
    let m = manifest(run);
    let data = data(run, &m);
    let (config, base) = base_model(run);
    let code = data.language(&m.new_language).unwrap().code().to_string();
    let examples = data.eval_set(&m.new_language, Split::Train).unwrap().examples(&config, &code).unwrap();
    let cfg = adapt_config(&m.adaptation, Method::FullFt, m.seed, &code, None);
    let fisher = FisherNorm::apply(m.ewc.normalization, &checkpoint::load_fisher(&run.dir.join("fisher/L0.bin")).unwrap()).unwrap();
    let plain = train(&config, &base, &examples, &[], &cfg, None).unwrap();
    let ewc0 = EwcConfig::new(0.0, base.clone(), fisher.clone()).unwrap();
    let zero = train(&config, &base, &examples, &[], &cfg, Some(&ewc0)).unwrap();
    let bit_identical = match (&plain.artifact, &zero.artifact) {
        (Artifact::Model(a), Artifact::Model(b)) => a.bit_eq(b),
        _ => false,
    } && plain.log.steps.iter().zip(&zero.log.steps).all(|(a, b)| a.loss.to_bits() == b.loss.to_bits());

    let anchored = EwcConfig::new(3.0, base.clone(), fisher).unwrap();
    let mut tape = Tape::new();
    let p = ewc_penalty(&mut tape, &base, &anchored).unwrap();
    let at_anchor = tape.value(p).data()[0];

    // well-conditioned instance: F in [0.5, 2], |theta - anchor| in [0.5, 1]
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut draw = |n: usize, lo: f64, hi: f64, signed: bool| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v = rng.random_range(lo..hi);
                if signed && rng.random_bool(0.5) {
                    -v
                } else {
                    v
                }
            })
            .collect()
    };
    let n = 40;
    let anchor_v = draw(n, -1.0, 1.0, false);
    let delta = draw(n, 0.5, 1.0, true);
    let f = draw(n, 0.5, 2.0, false);
    let lambda = 2.5;
    let store = |v: Vec<f64>| -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![4, 10], v).unwrap());
        s
    };
    let theta = store(anchor_v.iter().zip(&delta).map(|(a, d)| a + d).collect());
    let cfg = EwcConfig::new(lambda, store(anchor_v.clone()), FisherDiagonal::new(store(f.clone()), 1, "syn").unwrap()).unwrap();
    let mut tape = Tape::new();
    let p = ewc_penalty(&mut tape, &theta, &cfg).unwrap();
    let g = tape.backward(p).unwrap();
    let analytic_err = (0..n)
        .map(|i| {
            let expected = 2.0 * lambda * f[i] * delta[i];
            (g["w"].data()[i] - expected).abs() / expected.abs()
        })
        .fold(0.0, f64::max);
    let fd = check_tape_gradients(|p, t| ewc_penalty(t, p, &cfg), &theta, 1e-5, 1e-6).unwrap();

    let ok = bit_identical && at_anchor == 0.0 && analytic_err < 1e-12 && fd.passed();
    verdict(
        2,
        "EWC algebra",
        ok,
        &format!(
            "lambda=0 vs FT bit-identical: {bit_identical}; penalty at anchor {at_anchor:e}; gradient vs 2*lambda*F*delta rel {analytic_err:.2e}; finite differences rel {:.2e}",
            fd.max_rel_error
        ),
    );
}

fn flat(f: &FisherDiagonal) -> Vec<f64> {
    f.values.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

/// Sum of sqrt(p_i q_i) over independently normalized entries.
fn overlap_oracle(x: &[f64], y: &[f64]) -> f64 {
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    x.iter().zip(y).map(|(a, b)| ((a / sx) * (b / sy)).sqrt()).sum()
}

fn scaled(f: &FisherDiagonal, c: f64) -> FisherDiagonal {
    let mut g = f.clone();
    for (_, t) in g.values.iter_mut() {
        for v in t.data_mut() {
            *v *= c;
        }
    }
    g
}

#[test]
fn criterion_03_fisher_overlap() {
    let _cpu = exclusive();
    let run = pipeline();
    let mut fishers: Vec<FisherDiagonal> = ["L0", "L1", "L2", "L3"]
        .iter()
        .map(|l| checkpoint::load_fisher(&run.dir.join(format!("fisher/{l}.bin"))).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..4 {
        let mut s = ParamStore::new();
        let v: Vec<f64> = (0..12).map(|i| if (i + k) % 5 == 0 { 0.0 } else { rng.random_range(1e-6..10.0) }).collect();
        s.insert("x", Tensor::new(vec![12], v).unwrap());
        fishers.push(FisherDiagonal::new(s, 1, format!("r{k}")).unwrap());
    }
    let mut worst_closed = 0f64;
    let mut props = true;
    for (i, a) in fishers.iter().enumerate() {
        for b in fishers.iter().skip(i) {
            if a.values.check_aligned(&b.values, "fisher").is_err() {
                continue;
            }
            let o = fisher_overlap(a, b).unwrap();
            props &= o == fisher_overlap(b, a).unwrap();
            props &= (0.0..=1.0).contains(&o);
            props &= (fisher_overlap(&scaled(a, 37.5), b).unwrap() - o).abs() < 1e-12;
            worst_closed = worst_closed.max((o - overlap_oracle(&flat(a), &flat(b))).abs());
        }
        props &= (fisher_overlap(a, a).unwrap() - 1.0).abs() < 1e-12;
    }
    let mk = |x: [f64; 2]| {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(vec![2], x.to_vec()).unwrap());
        FisherDiagonal::new(s, 1, "w").unwrap()
    };
    let worked = fisher_overlap(&mk([0.5, 0.5]), &mk([0.25, 0.75])).unwrap();
    let ok = props && worst_closed < 1e-12 && (worked - 0.965926).abs() < 1e-6;
    verdict(
        3,
        "Fisher overlap",
        ok,
        &format!("properties hold: {props}; closed-form gap {worst_closed:.2e}; worked value {worked:.6}"),
    );
}

#[test]
fn criterion_04_frozen_base() {
    let _cpu = exclusive();
    let run = pipeline();
    let m = manifest(run);
    let (config, base) = base_model(run);
    let hash_ok = base.content_hash() == run.results.base_hash;
    let mut mismatched = Vec::new();
    for job in ["lora", "spt", "slct"] {
        for lang in &m.base_languages {
            let read = |model: &str| fs::read(run.dir.join(format!("hyps/{model}.{lang}.test.txt"))).unwrap();
            if read(job) != read("baseline") {
                mismatched.push(format!("{job}/{lang}"));
            }
        }
    }
    let slct = checkpoint::load_adapter(&run.dir.join("runs/slct/artifact.bin"), &config).unwrap();
    let data = data(run, &m);
    let mut decodes = 0;
    let mut attached_same = true;
    for lang in &m.base_languages {
        let code = data.language(lang).unwrap().code().to_string();
        let set = data.eval_set(lang, Split::Test).unwrap();
        for f in &set.features {
            attached_same &= transcribe(&config, &base, f, &code, None).unwrap() == transcribe(&config, &base, f, &code, Some(&slct)).unwrap();
            decodes += 1;
        }
    }
    let ok = hash_ok && mismatched.is_empty() && attached_same;
    verdict(
        4,
        "frozen base",
        ok,
        &format!(
            "base hash unchanged: {hash_ok}; old-language hypothesis files differing from baseline: {mismatched:?}; {decodes} decodes with the SLCT adapter attached identical: {attached_same}"
        ),
    );
}

#[test]
fn criterion_05_lora_merge() {
    let _cpu = exclusive();
    let run = pipeline();
    let m = manifest(run);
    let (config, base) = base_model(run);
    let lora = checkpoint::load_adapter(&run.dir.join("runs/lora/artifact.bin"), &config).unwrap();
    let merged = merge_lora(&base, &lora).unwrap();
    let code = job_code(run, "lora");
    let data = data(run, &m);
    let mut features: Vec<Tensor> = Vec::new();
    for split in [Split::Test, Split::Dev, Split::Train] {
        features.extend(data.eval_set(&m.new_language, split).unwrap().features);
    }
    let mut worst = 0f64;
    let mut same_tokens = true;
    for f in features.iter().take(50) {
        let (a, la) = transcribe_traced(&config, &base, f, &code, Some(&lora)).unwrap();
        let (b, lb) = transcribe_traced(&config, &merged, f, &code, None).unwrap();
        same_tokens &= a.tokens == b.tokens && la.len() == lb.len();
        for (x, y) in la.iter().zip(&lb) {
            for (u, v) in x.iter().zip(y) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    let n = features.len().min(50);
    let ok = n == 50 && same_tokens && worst <= 1e-10;
    verdict(5, "LoRA merge", ok, &format!("{n} utterances, max logit gap {worst:.2e}, same tokens: {same_tokens}"));
}

fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<u8>> = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s| (0..3u8).map(move |c| [s.as_slice(), &[c]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn recursive_distance(a: &[u8], b: &[u8], memo: &mut std::collections::HashMap<(Vec<u8>, Vec<u8>), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return a.len() + b.len();
    }
    if let Some(&d) = memo.get(&(a.to_vec(), b.to_vec())) {
        return d;
    }
    let d = (recursive_distance(&a[1..], b, memo) + 1)
        .min(recursive_distance(a, &b[1..], memo) + 1)
        .min(recursive_distance(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]));
    memo.insert((a.to_vec(), b.to_vec()), d);
    d
}

#[test]
fn criterion_06_edit_distance_oracle() {
    let _cpu = exclusive();
    let strings = all_strings(6);
    let mut memo = std::collections::HashMap::new();
    let mut mismatches = 0usize;
    for a in &strings {
        for b in &strings {
            if edit_distance(a, b).total() != recursive_distance(a, b, &mut memo) {
                mismatches += 1;
            }
        }
    }
    let k: Vec<char> = "kitten".chars().collect();
    let s: Vec<char> = "sitting".chars().collect();
    let ks = edit_distance(&k, &s).total();
    let ok = mismatches == 0 && ks == 3;
    verdict(
        6,
        "edit-distance oracle",
        ok,
        &format!("{} pairs, {mismatches} mismatches; kitten/sitting = {ks}", strings.len() * strings.len()),
    );
}

#[test]
fn criterion_07_method_ordering() {
    let _cpu = exclusive();
    let run = pipeline();
    let order = ["FT", "LoRA", "SPT", "SLCT", "Baseline"];
    let rows = &run.results.methods;
    let cer: Vec<f64> = order
        .iter()
        .map(|l| rows.iter().find(|r| r.label == *l).unwrap_or_else(|| panic!("no {l} row")).cer)
        .collect();
    let mut ties = 0;
    let mut violations = 0;
    for w in cer.windows(2) {
        if (w[0] - w[1]).abs() <= TIE {
            ties += 1;
        } else if w[0] > w[1] {
            violations += 1;
        }
    }
    let ft = rows.iter().find(|r| r.label == "FT").unwrap().relative_reduction;
    let mins = run.elapsed.as_secs_f64() / 60.0;
    let ok = violations == 0 && ties <= 1 && ft >= 0.5 && mins < 15.0;
    let shown: Vec<String> = order.iter().zip(&cer).map(|(l, c)| format!("{l} {:.1}", 100.0 * c)).collect();
    verdict(
        7,
        "method ordering",
        ok,
        &format!(
            "L3 test CER {}; {violations} violations, {ties} ties; FT relative reduction {:.1}%; reproduce took {mins:.1} min",
            shown.join(" <= "),
            100.0 * ft
        ),
    );
}

#[test]
fn criterion_08_forgetting() {
    let _cpu = exclusive();
    let run = pipeline();
    let f = &run.results.forgetting;
    let ft = f.rows.iter().find(|r| r.label == "FT").unwrap();
    let delta = |lang: &str| ft.old.iter().find(|s| s.lang == lang).unwrap().delta;
    let related = delta("L2") > delta("L1");
    let rho = f.spearman.unwrap_or(f64::NAN);
    let ewc: Vec<_> = f.rows.iter().filter(|r| r.label.starts_with("FT+EWC")).collect();
    let mut parts = Vec::new();
    let mut ewc_ok = !ewc.is_empty();
    for r in &ewc {
        let ratio = r.total_degradation / ft.total_degradation;
        let new_ratio = r.new_cer / ft.new_cer;
        ewc_ok &= ratio <= 0.5 && new_ratio <= 1.5;
        parts.push(format!(
            "{} (lambda {:e}) keeps {:.0}% of FT degradation at {:.2}x FT's L3 CER",
            r.label,
            r.lambda.unwrap_or(f64::NAN),
            100.0 * ratio,
            new_ratio
        ));
    }
    let ok = related && rho >= 0.5 && ewc_ok;
    verdict(
        8,
        "forgetting",
        ok,
        &format!(
            "FT delta L2 {:+.1} vs L1 {:+.1}; Spearman {rho:.2}; {}",
            100.0 * delta("L2"),
            100.0 * delta("L1"),
            parts.join("; ")
        ),
    );
}

#[test]
fn criterion_09_parameter_accounting() {
    let _cpu = exclusive();
    let config = ModelConfig::default();
    let d = config.d_model;
    let spec = |m: Method| AdapterSpec::new(m);
    let attn = 4 * (config.enc_layers + 2 * config.dec_layers);
    let lora = spec(Method::Lora);
    let spt = spec(Method::Spt);
    let total: usize = config.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let expected = [
        (Method::Lora, attn * lora.lora_rank * 2 * d),
        (Method::Spt, spt.prompt_count * d),
        (Method::Slct, d),
        (Method::FullFt, total),
    ];
    let counts_ok = expected.iter().all(|&(m, n)| trainable_fraction(&spec(m), &config).0 == n);
    let run = pipeline();
    let rows_ok = run.results.methods.iter().all(|r| match r.label.as_str() {
        "Baseline" => r.trainable == 0,
        l => {
            let m = [Method::FullFt, Method::Lora, Method::Spt, Method::Slct].into_iter().find(|m| m.label() == l).unwrap();
            let n = expected.iter().find(|(e, _)| *e == m).unwrap().1;
            r.trainable == n && r.fraction == n as f64 / total as f64
        }
    });
    let frac = |m: Method| trainable_fraction(&spec(m), &config).1;
    let ordered = frac(Method::Slct) < frac(Method::Spt) && frac(Method::Spt) < frac(Method::Lora) && frac(Method::Lora) < 1.0;
    let ok = counts_ok && rows_ok && ordered;
    verdict(
        9,
        "parameter accounting",
        ok,
        &format!(
            "LoRA {} SPT {} SLCT {} of {total}; fractions {:.3e} < {:.3e} < {:.3e} < 1; table rows agree: {rows_ok}",
            expected[0].1,
            expected[1].1,
            expected[2].1,
            frac(Method::Slct),
            frac(Method::Spt),
            frac(Method::Lora)
        ),
    );
}

#[test]
fn criterion_10_determinism() {
    let _cpu = exclusive();
    let run = pipeline();
    let tmp = tempfile::tempdir().unwrap();
    let (second, _) = reproduce_into(tmp.path());
    let files = output_files(&run.results);
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| fs::read(run.dir.join(f)).unwrap() != fs::read(second.join(f)).unwrap())
        .collect();
    let ok = differing.is_empty() && files.iter().any(|f| f == "report.md");
    verdict(10, "determinism", ok, &format!("{} files compared, differing: {differing:?}", files.len()));
}

/// Preconditions the directional criteria rest on.
#[test]
fn pipeline_preconditions() {
    let _cpu = exclusive();
    let run = pipeline();
    let r = &run.results;
    let last = r.base_dev.last().map(|d| d.epoch);
    let base_dev_ok = last.is_some() && r.base_dev.iter().filter(|d| Some(d.epoch) == last).all(|d| d.cer < 0.05);
    let l0_test = r
        .evaluations
        .iter()
        .find(|e| e.model == "baseline" && e.lang == "L0" && e.split == Split::Test && e.unit == "char")
        .unwrap()
        .report
        .rate;
    let zs = &r.zero_shot;
    let fixed: Vec<_> = zs.rows.iter().filter(|row| row.affinity.is_some()).collect();
    let best_aff = fixed.iter().max_by(|a, b| a.affinity.partial_cmp(&b.affinity).unwrap()).unwrap();
    let best_cer = fixed.iter().map(|row| row.cer).fold(f64::INFINITY, f64::min);
    let worst_cer = fixed.iter().map(|row| row.cer).fold(0.0, f64::max);
    let slct = zs.rows.iter().find(|row| row.label == "SLCT").unwrap().cer;
    let overlap = |a: &str, b: &str| {
        let i = r.forgetting.overlap_labels.iter().position(|l| l == a).unwrap();
        let j = r.forgetting.overlap_labels.iter().position(|l| l == b).unwrap();
        r.forgetting.overlap[i][j]
    };
    let ok = base_dev_ok
        && l0_test < 0.05
        && best_aff.cer == best_cer
        && worst_cer - best_cer > 0.05
        && slct <= best_cer + TIE
        && overlap("L0", "L2") > overlap("L0", "L1");
    let line = format!(
        "preconditions: {} base dev CER < 5%: {base_dev_ok}; L0 test CER {:.1}%; highest-affinity code {} is best zero-shot: {}; SLCT {:.1}% vs best code {:.1}%; overlap L0-L2 {:.3} vs L0-L1 {:.3}\n",
        if ok { "PASS" } else { "FAIL" },
        100.0 * l0_test,
        best_aff.code,
        best_aff.cer == best_cer,
        100.0 * slct,
        100.0 * best_cer,
        overlap("L0", "L2"),
        overlap("L0", "L1")
    );
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(ok, "{line}");
}
