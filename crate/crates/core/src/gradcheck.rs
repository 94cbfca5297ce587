//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::model::gaussian;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Coordinates sampled per tensor.
pub const MAX_COORDS_PER_TENSOR: usize = 200;

/// Gradients smaller than this are compared absolutely: relative error is
/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|` over the sampled coordinates.
    pub max_abs_error: f64,
    pub worst: Option<Coordinate>,
    /// Coordinate where a perturbed loss was non-finite, if any.
    pub non_finite_at: Option<Coordinate>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite_at.is_none() && self.max_rel_error < self.tolerance
    }
}

/// Evenly spaced coordinate sample, at most [`MAX_COORDS_PER_TENSOR`].
fn sample_indices(n: usize) -> Vec<usize> {
    if n <= MAX_COORDS_PER_TENSOR {
        return (0..n).collect();
    }
    (0..MAX_COORDS_PER_TENSOR)
        .map(|i| i * n / MAX_COORDS_PER_TENSOR)
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares `grad(params)` with central differences of `loss` on a
/// deterministic sample of coordinates of every tensor in `params`.
pub fn check_gradients(
    loss: impl Fn(&ParamStore) -> Result<f64>,
    grad: impl Fn(&ParamStore) -> Result<Gradients>,
    params: &ParamStore,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = grad(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        non_finite_at: None,
        tolerance,
    };
    for (name, tensor) in params.iter() {
        let g = analytic.get(name);
        for idx in sample_indices(tensor.len()) {
            let orig = tensor.data()[idx];
            probe.get_mut(name).expect("probe mirrors params").data_mut()[idx] = orig + step;
            let up = loss(&probe)?;
            probe.get_mut(name).expect("probe mirrors params").data_mut()[idx] = orig - step;
            let down = loss(&probe)?;
            probe.get_mut(name).expect("probe mirrors params").data_mut()[idx] = orig;
            let coord = Coordinate {
                param: name.clone(),
                index: idx,
            };
            if !up.is_finite() || !down.is_finite() {
                report.non_finite_at.get_or_insert(coord);
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            let a = g.map(|t| t.data()[idx]).unwrap_or(0.0);
            let err = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(coord);
            }
        }
    }
    Ok(report)
}

/// [`check_gradients`] for a loss built on a tape: the analytic side comes
/// from [`Tape::backward`].
pub fn check_tape_gradients(
    f: impl Fn(&ParamStore, &mut Tape) -> Result<Var>,
    params: &ParamStore,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let loss = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = f(p, &mut tape)?;
        Ok(tape.value(l).data()[0])
    };
    let grad = |p: &ParamStore| -> Result<Gradients> {
        let mut tape = Tape::new();
        let l = f(p, &mut tape)?;
        tape.backward(l)
    };
    check_gradients(loss, grad, params, step, tolerance)
}

/// Every tape primitive, in the order [`primitive_suite`] reports them.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "matmul_bt",
    "add",
    "add_row",
    "sub",
    "mul",
    "scale",
    "sum",
    "softmax_rows",
    "layer_norm",
    "tanh",
    "embedding",
    "concat_rows",
    "slice_cols",
    "concat_cols",
    "attention_scores",
    "attention_scores_causal",
    "cross_entropy",
];

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| gaussian(rng))
}

/// Reduces `out` to a scalar through a fixed random projection, so every
/// output entry carries a distinct weight.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Checks one primitive on random inputs drawn from `seed`.
pub fn check_primitive(name: &str, seed: u64, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut input = |params: &mut ParamStore, key: &str, shape: &[usize]| {
        params.insert(key, random_tensor(&mut rng, shape));
    };
    let out_shape: Vec<usize> = match name {
        "matmul" => {
            input(&mut params, "a", &[3, 4]);
            input(&mut params, "b", &[4, 5]);
            vec![3, 5]
        }
        "matmul_bt" | "attention_scores" | "attention_scores_causal" => {
            input(&mut params, "a", &[3, 4]);
            input(&mut params, "b", &[5, 4]);
            vec![3, 5]
        }
        "add" | "sub" | "mul" => {
            input(&mut params, "a", &[3, 4]);
            input(&mut params, "b", &[3, 4]);
            vec![3, 4]
        }
        "add_row" => {
            input(&mut params, "a", &[3, 4]);
            input(&mut params, "b", &[4]);
            vec![3, 4]
        }
        "scale" | "tanh" | "softmax_rows" => {
            input(&mut params, "a", &[3, 5]);
            vec![3, 5]
        }
        "sum" => {
            input(&mut params, "a", &[3, 5]);
            vec![1]
        }
        "layer_norm" => {
            input(&mut params, "a", &[3, 6]);
            input(&mut params, "g", &[6]);
            input(&mut params, "b", &[6]);
            vec![3, 6]
        }
        "embedding" => {
            input(&mut params, "a", &[6, 4]);
            vec![5, 4]
        }
        "concat_rows" => {
            input(&mut params, "a", &[2, 4]);
            input(&mut params, "b", &[3, 4]);
            vec![5, 4]
        }
        "slice_cols" => {
            input(&mut params, "a", &[3, 6]);
            vec![3, 3]
        }
        "concat_cols" => {
            input(&mut params, "a", &[3, 2]);
            input(&mut params, "b", &[3, 4]);
            vec![3, 6]
        }
        "cross_entropy" => {
            input(&mut params, "a", &[4, 7]);
            vec![1]
        }
        other => return Err(crate::error::Error::InvalidConfig(format!("unknown primitive {other:?}"))),
    };
    let weights = random_tensor(&mut rng, &out_shape);
    let name = name.to_string();
    let f = move |p: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let a = tape.param("a", p.get("a").expect("input a"));
        let b = p.get("b").map(|t| tape.param("b", t));
        let b = || b.expect("input b");
        let out = match name.as_str() {
            "matmul" => tape.matmul(a, b())?,
            "matmul_bt" => tape.matmul_bt(a, b())?,
            "add" | "add_row" => tape.add(a, b())?,
            "sub" => tape.sub(a, b())?,
            "mul" => tape.mul(a, b())?,
            "scale" => tape.scale(a, -1.7),
            "sum" => tape.sum(a),
            "softmax_rows" => tape.softmax_rows(a),
            "layer_norm" => {
                let g = tape.param("g", p.get("g").expect("input g"));
                tape.layer_norm(a, g, b())?
            }
            "tanh" => tape.tanh(a),
            "embedding" => tape.embedding(a, &[0, 3, 3, 5, 1])?,
            "concat_rows" => tape.concat_rows(&[a, b()])?,
            "slice_cols" => tape.slice_cols(a, 2, 3)?,
            "concat_cols" => tape.concat_cols(&[a, b()])?,
            "attention_scores" => tape.attention_scores(a, b(), 0.5, None)?,
            "attention_scores_causal" => {
                // masked scores are huge constants; only their softmax is meaningful
                let s = tape.attention_scores(a, b(), 0.5, Some(1))?;
                tape.softmax_rows(s)
            }
            "cross_entropy" => tape.cross_entropy(a, &[Some(2), None, Some(6), Some(0)])?,
            _ => unreachable!("validated above"),
        };
        project(tape, out, &weights)
    };
    check_tape_gradients(f, &params, step, tolerance)
}

/// Runs [`check_primitive`] for every entry of [`PRIMITIVES`].
pub fn primitive_suite(seed: u64, step: f64, tolerance: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, &name)| Ok((name, check_primitive(name, seed.wrapping_add(i as u64), step, tolerance)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quad_store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_fn(&[3, 4], |i| 0.3 * i as f64 - 1.0));
        p.insert("b", Tensor::from_fn(&[4], |i| 0.5 - 0.2 * i as f64));
        p
    }

    fn quad(p: &ParamStore, tape: &mut Tape) -> Result<Var> {
        let w = tape.param("w", p.get("w").unwrap());
        let b = tape.param("b", p.get("b").unwrap());
        let ww = tape.mul(w, w)?;
        let s1 = tape.sum(ww);
        let bb = tape.mul(b, b)?;
        let s2 = tape.sum(bb);
        let s2 = tape.scale(s2, 3.0);
        tape.add(s1, s2)
    }

    #[test]
    fn quadratic_is_exact() {
        let r = check_tape_gradients(quad, &quad_store(), 1e-5, 1e-8).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.coords_checked, 16);
    }

    #[test]
    fn doubled_gradient_is_caught() {
        let params = quad_store();
        let loss = |p: &ParamStore| {
            let mut t = Tape::new();
            let l = quad(p, &mut t)?;
            Ok(t.value(l).data()[0])
        };
        let wrong = |p: &ParamStore| {
            let mut t = Tape::new();
            let l = quad(p, &mut t)?;
            let mut g = t.backward(l)?;
            for v in g.values_mut() {
                *v = v.map(|x| 2.0 * x);
            }
            Ok(g)
        };
        let r = check_gradients(loss, wrong, &params, 1e-5, 1e-4).unwrap();
        assert!(!r.passed());
        assert!(r.worst.is_some());
    }

    #[test]
    fn non_finite_perturbation_reported() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(0.0));
        // log(x) is -inf at the lower perturbation point x = -step.. NaN
        let loss = |p: &ParamStore| Ok(p.get("x").unwrap().data()[0].ln());
        let grad = |p: &ParamStore| {
            let mut g = Gradients::new();
            g.insert("x".into(), Tensor::scalar(1.0 / p.get("x").unwrap().data()[0]));
            Ok(g)
        };
        let r = check_gradients(loss, grad, &params, 1e-5, 1e-4).unwrap();
        assert!(!r.passed());
        assert_eq!(r.non_finite_at.unwrap().param, "x");
    }

    #[test]
    fn every_primitive_passes() {
        for (name, r) in primitive_suite(7, 1e-5, 1e-6).unwrap() {
            assert!(r.passed(), "{name}: {r:?}");
            assert!(r.coords_checked > 0, "{name}");
        }
    }

    #[test]
    fn sampling_caps_large_tensors() {
        let idx = sample_indices(10_000);
        assert_eq!(idx.len(), MAX_COORDS_PER_TENSOR);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }
}
