use clab_core::adapters::Method;
use clab_core::autodiff::Tape;
use clab_core::continual::{estimate_fisher, normalize_unit_mean, EwcConfig, FisherDiagonal};
use clab_core::experiments::default_roster;
use clab_core::model::{init_model, Example, ModelConfig};
use clab_core::params::ParamStore;
use clab_core::synthdata::{generate_corpus, resolve_roster, Split, SynthParams};
use clab_core::tensor::Tensor;
use clab_core::training::{
    linear_lr, select_lambda, train, Adam, Artifact, DevSet, EvalSet, LambdaCriterion, TrainConfig,
};
use clab_core::Error;

struct Setup {
    config: ModelConfig,
    base: ParamStore,
    train_l3: Vec<Example>,
    train_l3_slct: Vec<Example>,
    dev_l3: DevSet,
    dev_l0: DevSet,
    fisher_l0: FisherDiagonal,
}

fn setup() -> Setup {
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_mult: 2,
        ..ModelConfig::default()
    };
    let params = SynthParams {
        max_text_chars: 20,
        ..SynthParams::default()
    };
    let langs = resolve_roster(&default_roster(), &params).unwrap();
    let set = |i: usize, split: Split, n: usize| {
        EvalSet::from_corpus(&langs[i], &generate_corpus(&langs[i], split, n, 0, &params)).unwrap()
    };
    let base = init_model(&config, 1).unwrap();
    let l3 = set(3, Split::Train, 10);
    let l0 = set(0, Split::Train, 6).examples(&config, "<L0>").unwrap();
    let fisher_l0 = normalize_unit_mean(&estimate_fisher(&config, &base, &l0, 100, "L0").unwrap()).unwrap();
    Setup {
        train_l3: l3.examples(&config, "<L3>").unwrap(),
        train_l3_slct: l3.examples(&config, "<L7>").unwrap(),
        dev_l3: DevSet {
            set: set(3, Split::Dev, 4),
            code: "<L3>".into(),
        },
        dev_l0: DevSet {
            set: set(0, Split::Dev, 4),
            code: "<L0>".into(),
        },
        config,
        base,
        fisher_l0,
    }
}

fn ft_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        dev_eval_every: 0,
        seed: 3,
        ..TrainConfig::new(Method::FullFt)
    }
}

fn model(a: &Artifact) -> &ParamStore {
    match a {
        Artifact::Model(p) => p,
        Artifact::Adapter(_) => panic!("expected a full model"),
    }
}

#[test]
fn lambda_zero_is_plain_fine_tuning() {
    let s = setup();
    let cfg = ft_config();
    let plain = train(&s.config, &s.base, &s.train_l3, &[], &cfg, None).unwrap();
    let ewc = EwcConfig::new(0.0, s.base.clone(), s.fisher_l0.clone()).unwrap();
    let zero = train(&s.config, &s.base, &s.train_l3, &[], &cfg, Some(&ewc)).unwrap();
    assert!(model(&plain.artifact).bit_eq(model(&zero.artifact)));
    let losses = |o: &clab_core::training::TrainOutcome| o.log.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&plain), losses(&zero));
    assert_eq!(plain.log.steps.len(), cfg.total_steps(s.train_l3.len()));
    assert_eq!(plain.log.steps.len(), 2 * 3);
}

#[test]
fn huge_lambda_pins_parameters_to_anchor() {
    let s = setup();
    let ewc = EwcConfig::new(1e6, s.base.clone(), s.fisher_l0.clone()).unwrap();
    let out = train(&s.config, &s.base, &s.train_l3, &[], &ft_config(), Some(&ewc)).unwrap();
    let d = ewc.weighted_distance(model(&out.artifact)).unwrap();
    assert!(d < 1e-3, "weighted distance {d}");
    let free = train(&s.config, &s.base, &s.train_l3, &[], &ft_config(), None).unwrap();
    assert!(ewc.weighted_distance(model(&free.artifact)).unwrap() > d);
}

#[test]
fn ewc_with_adapters_is_a_conflict() {
    let s = setup();
    let ewc = EwcConfig::new(1.0, s.base.clone(), s.fisher_l0.clone()).unwrap();
    for method in [Method::Lora, Method::Spt, Method::Slct] {
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::new(method)
        };
        let err = train(&s.config, &s.base, &s.train_l3, &[], &cfg, Some(&ewc)).unwrap_err();
        assert!(matches!(err, Error::ConfigConflict(_)), "{method:?}: {err}");
    }
}

#[test]
fn runs_are_seed_deterministic_and_leave_base_untouched() {
    let s = setup();
    let snapshot = s.base.clone();
    for method in [Method::FullFt, Method::Lora, Method::Spt, Method::Slct] {
        let mut cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            dev_eval_every: 1,
            seed: 11,
            context_prob: 0.5,
            ..TrainConfig::new(method)
        };
        cfg.adapter.lora_rank = 2;
        cfg.adapter.prompt_count = 3;
        let (examples, dev) = if method == Method::Slct {
            let mut d = s.dev_l3.clone();
            d.code = "<L7>".into();
            (&s.train_l3_slct, [d])
        } else {
            (&s.train_l3, [s.dev_l3.clone()])
        };
        let a = train(&s.config, &s.base, examples, &dev, &cfg, None).unwrap();
        let b = train(&s.config, &s.base, examples, &dev, &cfg, None).unwrap();
        assert_eq!(a.artifact, b.artifact, "{method:?}");
        assert_eq!(a.log, b.log, "{method:?}");
        assert!(s.base.bit_eq(&snapshot), "{method:?}");
        match &a.artifact {
            Artifact::Model(p) => assert!(!p.bit_eq(&snapshot)),
            Artifact::Adapter(st) => assert_eq!(st.method(), method),
        }
        let c = train(&s.config, &s.base, examples, &dev, &TrainConfig { seed: 12, ..cfg }, None).unwrap();
        assert_ne!(a.artifact, c.artifact, "{method:?}");
    }
}

#[test]
fn lambda_selection_contract() {
    let s = setup();
    let cfg = TrainConfig {
        lambda_grid: vec![1e3, 1e1, 1e-1, 1e-3],
        ..ft_config()
    };
    let base_cer = vec![1.0];
    let sel = select_lambda(
        &s.config,
        &s.base,
        &s.train_l3,
        &s.dev_l3,
        std::slice::from_ref(&s.dev_l0),
        &base_cer,
        &cfg,
        &s.fisher_l0,
        LambdaCriterion::Composite,
    )
    .unwrap();
    assert!(cfg.lambda_grid.contains(&sel.lambda_star));
    assert_eq!(sel.rows.len(), cfg.lambda_grid.len());
    assert_eq!(sel.runs.len(), cfg.lambda_grid.len());
    let star = sel.rows.iter().find(|r| r.lambda == sel.lambda_star).unwrap();
    for r in &sel.rows {
        assert!(r.dev_cer_new.is_finite() && r.objective.is_finite() && r.weighted_distance.is_finite());
        assert!(star.objective <= r.objective);
        assert_eq!(r.objective, r.dev_cer_new + r.mean_regression);
    }
    // descending λ: anchoring distance grows, allowing one inversion
    let inversions = sel
        .rows
        .windows(2)
        .filter(|w| w[1].weighted_distance < w[0].weighted_distance)
        .count();
    assert!(inversions <= 1, "{:?}", sel.rows.iter().map(|r| r.weighted_distance).collect::<Vec<_>>());
    assert!(select_lambda(
        &s.config,
        &s.base,
        &s.train_l3,
        &s.dev_l3,
        std::slice::from_ref(&s.dev_l0),
        &[],
        &cfg,
        &s.fisher_l0,
        LambdaCriterion::NewOnly,
    )
    .is_err());
}

#[test]
fn adam_converges_on_a_scalar_quadratic() {
    let target = 0.3;
    let mut p = ParamStore::new();
    p.insert("x", Tensor::scalar(1.0));
    let mut adam = Adam::new(&p);
    let lr = TrainConfig::new(Method::FullFt).lr_initial;
    let total = 5000;
    for t in 1..=total {
        let mut tape = Tape::new();
        let x = tape.param("x", p.get("x").unwrap());
        let c = tape.constant(Tensor::scalar(target));
        let d = tape.sub(x, c).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        adam.step(&mut p, &g, t, linear_lr(lr, t, total)).unwrap();
    }
    let x = p.get("x").unwrap().data()[0];
    assert!((x - target).abs() < 1e-6, "x = {x}");
}
