//! Diagonal Fisher estimation, the EWC penalty and Fisher overlap.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradScope, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{utterance_nll, Example, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Per-parameter Fisher importance, aligned with a model's [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiagonal {
    pub values: ParamStore,
    pub sample_count: usize,
    pub source_tag: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FisherHeader {
    pub sample_count: usize,
    pub source_tag: String,
}

impl FisherDiagonal {
    pub fn new(values: ParamStore, sample_count: usize, source_tag: impl Into<String>) -> Result<Self> {
        for (name, t) in values.iter() {
            if let Some(v) = t.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::Data(format!("fisher entry {v} in `{name}` is not a finite nonnegative value")));
            }
        }
        Ok(FisherDiagonal {
            values,
            sample_count,
            source_tag: source_tag.into(),
        })
    }

    pub fn trace(&self) -> f64 {
        self.values.iter().map(|(_, t)| t.sum()).sum()
    }

    pub fn header(&self) -> FisherHeader {
        FisherHeader {
            sample_count: self.sample_count,
            source_tag: self.source_tag.clone(),
        }
    }
}

/// Empirical Fisher: the mean over the first `min(N, cap)` examples of the
/// squared gradient of each example's summed reference NLL.
pub fn estimate_fisher(
    config: &ModelConfig,
    params: &ParamStore,
    examples: &[Example],
    cap: usize,
    source_tag: &str,
) -> Result<FisherDiagonal> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cap == 0 {
        return Err(Error::InvalidConfig("fisher sample cap must be >= 1".into()));
    }
    let used = &examples[..examples.len().min(cap)];
    let mut acc: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    for ex in used {
        let mut tape = Tape::with_scope(GradScope::All);
        let loss = utterance_nll(&mut tape, config, params, ex, None)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::NonFinite(format!("utterance NLL while estimating fisher for {source_tag}")));
        }
        let grads = tape.backward(loss)?;
        for ((name, _), a) in params.iter().zip(acc.iter_mut()) {
            let g = grads.get(name).expect("backward reports every parameter");
            for (s, gi) in a.iter_mut().zip(g.data()) {
                *s += gi * gi;
            }
        }
    }
    let n = used.len() as f64;
    let values = params
        .iter()
        .zip(acc)
        .map(|((name, t), a)| (name.clone(), t.with_data(a.into_iter().map(|s| s / n).collect())))
        .collect();
    FisherDiagonal::new(values, used.len(), source_tag)
}

/// Divides every entry by the trace.
pub fn normalize_unit_trace(f: &FisherDiagonal) -> Result<FisherDiagonal> {
    let trace = f.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::ZeroTrace(format!(
            "fisher `{}` has trace {trace}; every gradient was zero",
            f.source_tag
        )));
    }
    let values = f
        .values
        .iter()
        .map(|(n, t)| (n.clone(), t.map(|v| v / trace)))
        .collect();
    Ok(FisherDiagonal {
        values,
        sample_count: f.sample_count,
        source_tag: f.source_tag.clone(),
    })
}

/// Rescales to unit mean entry (trace equal to the parameter count), so an
/// EWC weight λ reads in units of average parameter importance.
pub fn normalize_unit_mean(f: &FisherDiagonal) -> Result<FisherDiagonal> {
    let mut out = normalize_unit_trace(f)?;
    let n = f.values.scalar_count() as f64;
    for (_, t) in out.values.iter_mut() {
        for v in t.data_mut() {
            *v *= n;
        }
    }
    Ok(out)
}

fn normalized_pair(f1: &FisherDiagonal, f2: &FisherDiagonal) -> Result<(Vec<f64>, Vec<f64>)> {
    f1.values.check_aligned(&f2.values, &format!("fisher `{}` vs `{}`", f1.source_tag, f2.source_tag))?;
    let flat = |f: &FisherDiagonal| -> Vec<f64> {
        f.values.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    };
    Ok((flat(&normalize_unit_trace(f1)?), flat(&normalize_unit_trace(f2)?)))
}

/// Squared Fréchet distance between unit-trace diagonal Fishers:
/// `½ Σ (√a − √b)²`.
pub fn frechet_distance_sq(f1: &FisherDiagonal, f2: &FisherDiagonal) -> Result<f64> {
    let (a, b) = normalized_pair(f1, f2)?;
    Ok(0.5 * a.iter().zip(&b).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>())
}

/// `1 − d²`, evaluated as `Σ √(a·b)` over unit-trace entries.
pub fn fisher_overlap(f1: &FisherDiagonal, f2: &FisherDiagonal) -> Result<f64> {
    let (a, b) = normalized_pair(f1, f2)?;
    let s: f64 = a.iter().zip(&b).map(|(x, y)| (x * y).sqrt()).sum();
    Ok(s.clamp(0.0, 1.0))
}

/// Symmetric overlap matrix with unit diagonal.
pub fn overlap_matrix(fishers: &[FisherDiagonal]) -> Result<Vec<Vec<f64>>> {
    let n = fishers.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        normalize_unit_trace(&fishers[i])?;
        for j in i + 1..n {
            let o = fisher_overlap(&fishers[i], &fishers[j])?;
            m[i][j] = o;
            m[j][i] = o;
        }
    }
    Ok(m)
}

/// CSV with a header row of labels and one labelled row per source.
pub fn overlap_csv(labels: &[String], matrix: &[Vec<f64>]) -> String {
    let mut out = String::from("source");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (l, row) in labels.iter().zip(matrix) {
        out.push_str(l);
        for v in row {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct EwcConfig {
    pub lambda: f64,
    pub anchor: ParamStore,
    pub fisher: FisherDiagonal,
}

impl EwcConfig {
    pub fn new(lambda: f64, anchor: ParamStore, fisher: FisherDiagonal) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("EWC lambda must be finite and >= 0, got {lambda}")));
        }
        anchor.check_aligned(&fisher.values, "EWC anchor vs fisher")?;
        Ok(EwcConfig { lambda, anchor, fisher })
    }

    /// `Σ_i F_i (θ_i − θ*_i)²`, without λ.
    pub fn weighted_distance(&self, params: &ParamStore) -> Result<f64> {
        params.check_aligned(&self.anchor, "EWC parameters vs anchor")?;
        let mut total = 0.0;
        for ((_, p), ((_, a), (_, f))) in params.iter().zip(self.anchor.iter().zip(self.fisher.values.iter())) {
            for ((pi, ai), fi) in p.data().iter().zip(a.data()).zip(f.data()) {
                total += fi * (pi - ai) * (pi - ai);
            }
        }
        Ok(total)
    }
}

/// Records `λ Σ_i F_i (θ_i − θ*_i)²` on the tape. Parameters are registered
/// by name, so they share nodes with a task loss built on the same tape.
pub fn ewc_penalty(tape: &mut Tape, params: &ParamStore, cfg: &EwcConfig) -> Result<Var> {
    params.check_aligned(&cfg.anchor, "EWC parameters vs anchor")?;
    let mut total: Option<Var> = None;
    for (name, value) in params.iter() {
        let theta = tape.param(name, value);
        let anchor = tape.constant(cfg.anchor.expect(name)?.clone());
        let fisher = tape.constant(cfg.fisher.values.expect(name)?.clone());
        let diff = tape.sub(theta, anchor)?;
        let sq = tape.mul(diff, diff)?;
        let weighted = tape.mul(sq, fisher)?;
        let s = tape.sum(weighted);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    Ok(tape.scale(total, cfg.lambda))
}

/// `task_loss + λ Σ F (θ − θ*)²`.
pub fn ewc_loss(tape: &mut Tape, task_loss: Var, params: &ParamStore, cfg: &EwcConfig) -> Result<Var> {
    let penalty = ewc_penalty(tape, params, cfg)?;
    tape.add(task_loss, penalty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(tag: &str, vals: &[f64]) -> FisherDiagonal {
        let values: ParamStore = [("w".to_string(), Tensor::new(vec![vals.len()], vals.to_vec()).unwrap())]
            .into_iter()
            .collect();
        FisherDiagonal::new(values, 1, tag).unwrap()
    }

    #[test]
    fn unit_trace_examples() {
        let n = normalize_unit_trace(&diag("a", &[1.0, 3.0])).unwrap();
        assert_eq!(n.values.get("w").unwrap().data(), &[0.25, 0.75]);
        let again = normalize_unit_trace(&n).unwrap();
        for (x, y) in again.values.get("w").unwrap().data().iter().zip(n.values.get("w").unwrap().data()) {
            assert!((x - y).abs() <= 1e-15);
        }
        assert!(matches!(normalize_unit_trace(&diag("z", &[0.0, 0.0])), Err(Error::ZeroTrace(_))));
    }

    #[test]
    fn unit_mean_example() {
        let n = normalize_unit_mean(&diag("a", &[1.0, 3.0])).unwrap();
        assert_eq!(n.values.get("w").unwrap().data(), &[0.5, 1.5]);
    }

    #[test]
    fn overlap_examples() {
        let a = diag("a", &[0.5, 0.5]);
        let b = diag("b", &[0.25, 0.75]);
        let o = fisher_overlap(&a, &b).unwrap();
        assert!((o - 0.965926).abs() < 1e-6);
        assert!((o - (1.0 - frechet_distance_sq(&a, &b).unwrap())).abs() < 1e-12);
        assert_eq!(fisher_overlap(&diag("x", &[1.0, 0.0]), &diag("y", &[0.0, 1.0])).unwrap(), 0.0);
        assert!((fisher_overlap(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_fisher_rejected() {
        let values: ParamStore = [("w".to_string(), Tensor::new(vec![1], vec![-1.0]).unwrap())].into_iter().collect();
        assert!(FisherDiagonal::new(values, 1, "bad").is_err());
    }

    #[test]
    fn misaligned_overlap_rejected() {
        let a = diag("a", &[0.5, 0.5]);
        let b = diag("b", &[0.2, 0.3, 0.5]);
        assert!(matches!(fisher_overlap(&a, &b), Err(Error::Misaligned(_))));
    }

    #[test]
    fn penalty_value_and_gradient() {
        let anchor: ParamStore = [("w".to_string(), Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())]
            .into_iter()
            .collect();
        let fisher = diag("f", &[1.0, 1.0, 1.0]);
        let cfg = EwcConfig::new(0.7, anchor.clone(), fisher).unwrap();
        let mut moved = anchor.clone();
        moved.get_mut("w").unwrap().data_mut()[1] += 0.3;
        let mut tape = Tape::new();
        let p = ewc_penalty(&mut tape, &moved, &cfg).unwrap();
        assert!((tape.value(p).data()[0] - 0.7 * 0.09).abs() < 1e-15);
        let g = tape.backward(p).unwrap();
        let gw = g.get("w").unwrap().data();
        assert_eq!(gw[0], 0.0);
        assert!((gw[1] - 2.0 * 0.7 * 0.3).abs() < 1e-12);

        let mut tape = Tape::new();
        let p = ewc_penalty(&mut tape, &anchor, &cfg).unwrap();
        assert_eq!(tape.value(p).data()[0], 0.0);
    }

    #[test]
    fn bad_lambda_rejected() {
        let anchor: ParamStore = [("w".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        assert!(EwcConfig::new(f64::NAN, anchor.clone(), diag("f", &[1.0, 1.0])).is_err());
        assert!(EwcConfig::new(-1.0, anchor, diag("f", &[1.0, 1.0])).is_err());
    }

    #[test]
    fn overlap_csv_layout() {
        let csv = overlap_csv(&["a".into(), "b".into()], &[vec![1.0, 0.5], vec![0.5, 1.0]]);
        assert_eq!(csv, "source,a,b\na,1.000000,0.500000\nb,0.500000,1.000000\n");
    }
}
