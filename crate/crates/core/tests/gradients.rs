use clab_core::adapters::{create_adapter, AdapterSpec, AdapterState, Method, SlctInit};
use clab_core::autodiff::Tape;
use clab_core::experiments::default_roster;
use clab_core::gradcheck::{check_primitive, check_tape_gradients, primitive_suite, PRIMITIVES};
use clab_core::model::{init_model, nll_loss, Example, ModelConfig};
use clab_core::params::ParamStore;
use clab_core::synthdata::{resolve_roster, synthesize, SynthParams};
use clab_core::tensor::Tensor;
use proptest::prelude::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_mult: 2,
        ..ModelConfig::default()
    }
}

fn example(config: &ModelConfig, text: &str, seed: u64) -> Example {
    let langs = resolve_roster(&default_roster(), &SynthParams::default()).unwrap();
    let features = synthesize(&langs[0], text, seed).unwrap();
    Example::new(config, features, "<L0>", text).unwrap()
}

#[test]
fn suite_covers_every_primitive() {
    let reports = primitive_suite(1, 1e-5, 1e-6).unwrap();
    assert_eq!(reports.len(), PRIMITIVES.len());
    for (name, r) in reports {
        assert!(r.passed(), "{name}: {r:?}");
    }
    assert!(check_primitive("conv2d", 0, 1e-5, 1e-6).is_err());
}

// On random inputs a coordinate occasionally has a gradient near 1e-5, where
// the central difference's own rounding error (about eps * |loss| / step)
// exceeds the relative bound; such cases must still agree absolutely.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn primitives_match_central_differences(seed in any::<u64>(), which in 0..PRIMITIVES.len()) {
        let r = check_primitive(PRIMITIVES[which], seed, 1e-5, 1e-6).unwrap();
        prop_assert!(r.non_finite_at.is_none());
        prop_assert!(r.passed() || r.max_abs_error < 1e-8, "{}: {:?}", PRIMITIVES[which], r);
    }
}

#[test]
fn two_layer_network() {
    let x = Tensor::from_fn(&[4, 3], |i| ((i * 7 % 11) as f64 - 5.0) / 4.0);
    let mut p = ParamStore::new();
    p.insert("w1", Tensor::from_fn(&[3, 5], |i| ((i * 5 % 13) as f64 - 6.0) / 8.0));
    p.insert("b1", Tensor::from_fn(&[5], |i| 0.1 * i as f64 - 0.2));
    p.insert("w2", Tensor::from_fn(&[5, 3], |i| ((i * 3 % 7) as f64 - 3.0) / 5.0));
    p.insert("b2", Tensor::from_fn(&[3], |i| 0.05 * i as f64));
    let report = check_tape_gradients(
        |p, tape: &mut Tape| {
            let x = tape.constant(x.clone());
            let w1 = tape.param("w1", p.get("w1").unwrap());
            let b1 = tape.param("b1", p.get("b1").unwrap());
            let w2 = tape.param("w2", p.get("w2").unwrap());
            let b2 = tape.param("b2", p.get("b2").unwrap());
            let h = tape.matmul(x, w1)?;
            let h = tape.add(h, b1)?;
            let h = tape.tanh(h);
            let o = tape.matmul(h, w2)?;
            let o = tape.add(o, b2)?;
            tape.cross_entropy(o, &[Some(0), Some(2), None, Some(1)])
        },
        &p,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.coords_checked, 15 + 5 + 15 + 3);
}

#[test]
fn full_model_nll() {
    let config = ModelConfig::default();
    let params = init_model(&config, 5).unwrap();
    let ex = example(&config, "hello tiger", 3);
    let report = check_tape_gradients(
        |p, tape| nll_loss(tape, &config, p, std::slice::from_ref(&ex), None),
        &params,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

/// Adapter tensors are perturbed away from their (degenerate) initial values
/// so every path carries gradient.
fn perturbed(state: &AdapterState) -> ParamStore {
    let mut t = state.tensors().clone();
    for (k, (_, v)) in t.iter_mut().enumerate() {
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += 0.05 * (((i + k) * 37 % 17) as f64 - 8.0) / 8.0;
        }
    }
    t
}

#[test]
fn adapter_gradients() {
    let config = small_config();
    let base = init_model(&config, 2).unwrap();
    for method in [Method::Lora, Method::Spt, Method::Slct] {
        let mut spec = AdapterSpec::new(method);
        spec.lora_rank = 2;
        spec.prompt_count = 3;
        spec.slct_init = SlctInit::Surrogate("<L0>".into());
        let state = create_adapter(&spec, &config, &base, 4).unwrap();
        let code = if method == Method::Slct { "<L7>" } else { "<L0>" };
        let langs = resolve_roster(&default_roster(), &SynthParams::default()).unwrap();
        let ex = Example::new(&config, synthesize(&langs[0], "hi all", 8).unwrap(), code, "hi all").unwrap();
        let report = check_tape_gradients(
            |p, tape| {
                let a = AdapterState::from_parts(spec.clone(), p.clone(), &config)?;
                nll_loss(tape, &config, &base, std::slice::from_ref(&ex), Some(&a))
            },
            &perturbed(&state),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{method:?}: {report:?}");
        assert!(report.coords_checked > 0);
    }
}
