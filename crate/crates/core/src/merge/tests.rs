use super::*;
use crate::model::{AdapterConfig, AffineLayer, EncoderConfig, LoraAdapter};
use crate::numerics::SeededRng;

fn unit_base() -> BaseEncoder {
    BaseEncoder::from_layers(
        vec![AffineLayer {
            weight: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        }],
        0.07,
    )
    .unwrap()
}

fn scalar_plugin(a: f32, b: f32) -> PluginModule {
    PluginModule::new(
        vec![LoraAdapter {
            target_layer: 0,
            a: Tensor::matrix(1, 1, vec![a]).unwrap(),
            b: Tensor::matrix(1, 1, vec![b]).unwrap(),
            rank: 1,
            alpha: 1.0,
            dropout: 0.0,
        }],
        vec![],
    )
    .unwrap()
}

fn one() -> MergeCoefficients {
    MergeCoefficients::new(1.0, 1.0).unwrap()
}

fn half() -> MergeCoefficients {
    MergeCoefficients::new(0.5, 0.5).unwrap()
}

/// Single affine layer `in → out` with random weights.
fn single_layer_base(out: usize, inp: usize, rng: &mut SeededRng) -> BaseEncoder {
    BaseEncoder::from_layers(
        vec![AffineLayer {
            weight: Tensor::matrix(out, inp, rng.normal_vec(out * inp, 0.0, 0.5)).unwrap(),
            bias: Tensor::vector(rng.normal_vec(out, 0.0, 0.1)),
        }],
        0.07,
    )
    .unwrap()
}

fn random_plugin(base: &BaseEncoder, rank: usize, rng: &mut SeededRng) -> PluginModule {
    let cfg = AdapterConfig {
        rank,
        alpha: 2.0 * rank as f32,
        ..AdapterConfig::default()
    };
    let mut p = PluginModule::fresh(base, &cfg, rng).unwrap();
    for a in p.adapters_mut() {
        let n = a.b.numel();
        a.b.data_mut().copy_from_slice(&rng.normal_vec(n, 0.0, 0.3));
        let n = a.a.numel();
        a.a.data_mut().copy_from_slice(&rng.normal_vec(n, 0.0, 0.3));
    }
    p
}

/// Embedding minus the base-only embedding.
fn delta_out(base: &BaseEncoder, entries: &[(&PluginModule, f64)], x: &Tensor) -> Tensor {
    let y = mixture_forward(base, entries, x).unwrap();
    y.sub(&forward_mixture(base, &[], x).unwrap()).unwrap()
}

#[test]
fn scalar_fixture_fusion_vs_mixture() {
    let base = unit_base();
    let main = scalar_plugin(2.0, 3.0);
    let branch = scalar_plugin(4.0, 5.0);
    assert_eq!(main.adapter(0).unwrap().effective_delta().data(), &[6.0]);
    assert_eq!(branch.adapter(0).unwrap().effective_delta().data(), &[20.0]);
    let fused = fuse(&main, &branch, half()).unwrap();
    let ad = fused.adapter(0).unwrap();
    assert_eq!(ad.a.data(), &[3.0]);
    assert_eq!(ad.b.data(), &[4.0]);
    assert_eq!(ad.effective_delta().data(), &[12.0]);

    let x = Tensor::vector(vec![1.0]);
    assert_eq!(delta_out(&base, &[(&fused, 1.0)], &x).data(), &[12.0]);
    assert_eq!(
        delta_out(&base, &[(&main, 0.5), (&branch, 0.5)], &x).data(),
        &[13.0]
    );
}

#[test]
fn zero_coefficients_give_zero_factors() {
    let fused = fuse(
        &scalar_plugin(2.0, 3.0),
        &scalar_plugin(4.0, 5.0),
        MergeCoefficients::new(0.0, 0.0).unwrap(),
    )
    .unwrap();
    let ad = fused.adapter(0).unwrap();
    assert_eq!(ad.a.data(), &[0.0]);
    assert_eq!(ad.b.data(), &[0.0]);
}

#[test]
fn fusion_cross_terms() {
    let mut rng = SeededRng::new(5);
    for _ in 0..20 {
        let (a1, b1, a2, b2) = (
            rng.normal(0.0, 1.0),
            rng.normal(0.0, 1.0),
            rng.normal(0.0, 1.0),
            rng.normal(0.0, 1.0),
        );
        let (w, v) = (rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0));
        let fused = fuse(
            &scalar_plugin(a1, b1),
            &scalar_plugin(a2, b2),
            MergeCoefficients::new(w as f64, v as f64).unwrap(),
        )
        .unwrap();
        let expect = w * w * b1 * a1 + v * v * b2 * a2 + w * v * (b1 * a2 + b2 * a1);
        let got = fused.adapter(0).unwrap().effective_delta().data()[0];
        assert!(
            (got - expect).abs() < 1e-4 * (1.0 + expect.abs()),
            "{got} vs {expect}"
        );
    }
}

#[test]
fn identity_coefficients() {
    let main = scalar_plugin(1.5, -0.5);
    let branch = scalar_plugin(2.0, 3.0);
    let keep = fuse(&main, &branch, MergeCoefficients::new(1.0, 0.0).unwrap()).unwrap();
    assert_eq!(keep.to_bytes(), main.to_bytes());
    let take = fuse(&main, &branch, MergeCoefficients::new(0.0, 1.0).unwrap()).unwrap();
    assert_eq!(take.to_bytes(), branch.to_bytes());
}

#[test]
fn rank_mismatch_is_incompatible() {
    let base = BaseEncoder::seeded(1, &EncoderConfig::default()).unwrap();
    let mut rng = SeededRng::new(2);
    let p16 = PluginModule::fresh(&base, &AdapterConfig::default(), &mut rng).unwrap();
    let cfg8 = AdapterConfig {
        rank: 8,
        ..AdapterConfig::default()
    };
    let p8 = PluginModule::fresh(&base, &cfg8, &mut rng).unwrap();
    assert!(matches!(
        fuse(&p16, &p8, one()),
        Err(ForgeError::Incompatible(_))
    ));
    let x = Tensor::zeros(&[1, 256]);
    assert!(matches!(
        mixture_forward(&base, &[(&p16, 1.0), (&p8, 1.0)], &x),
        Err(ForgeError::Incompatible(_))
    ));
}

#[test]
fn mixture_two_round_coefficients() {
    let base = unit_base();
    let p1 = scalar_plugin(1.0, 1.0);
    let p2 = scalar_plugin(2.0, 1.0);
    let start =
        ForgeItem::initial(MergeStrategy::Mixture, &base, &AdapterConfig::default()).unwrap();
    let r1 = apply_mixture(&start, &p1, half()).unwrap();
    let ForgeState::Mixture(slots) = &r1.state else {
        panic!("expected mixture")
    };
    assert_eq!(slots.len(), 1);
    assert_eq!(slots[0].coeff, 0.5);
    let r2 = apply_mixture(&r1, &p2, MergeCoefficients::new(0.4, 0.6).unwrap()).unwrap();
    let ForgeState::Mixture(slots) = &r2.state else {
        panic!("expected mixture")
    };
    let coeffs: Vec<f64> = slots.iter().map(|s| s.coeff).collect();
    assert!((coeffs[0] - 0.2).abs() < 1e-15);
    assert!((coeffs[1] - 0.6).abs() < 1e-15);
    assert_eq!(r2.round, 2);
}

#[test]
fn flattened_mixture_matches_nested_evaluation() {
    let mut rng = SeededRng::new(21);
    let base = single_layer_base(5, 7, &mut rng);
    let plugins: Vec<PluginModule> = (0..3).map(|_| random_plugin(&base, 2, &mut rng)).collect();
    let rounds = [(0.0, 0.8), (0.7, 1.3), (1.1, 0.4)];
    let mut item =
        ForgeItem::initial(MergeStrategy::Mixture, &base, &AdapterConfig::default()).unwrap();
    let x = Tensor::matrix(4, 7, rng.normal_vec(28, 0.0, 1.0)).unwrap();
    let mut nested = Tensor::zeros(&[4, 5]);
    for (p, (w, v)) in plugins.iter().zip(rounds) {
        let prev = nested.clone();
        item = apply_mixture(&item, p, MergeCoefficients::new(w, v).unwrap()).unwrap();
        let branch = delta_out(&base, &[(p, 1.0)], &x);
        nested = prev.scale(w as f32);
        nested.axpy(v as f32, &branch).unwrap();
        let flat = item
            .embed(&base, &x)
            .unwrap()
            .sub(&forward_mixture(&base, &[], &x).unwrap())
            .unwrap();
        assert!(flat.max_abs_diff(&nested).unwrap() < 1e-5);
    }
}

#[test]
fn mixture_delta_is_linear_per_entry() {
    let mut rng = SeededRng::new(22);
    let base = single_layer_base(6, 9, &mut rng);
    let p = random_plugin(&base, 3, &mut rng);
    let q = random_plugin(&base, 3, &mut rng);
    let x = Tensor::matrix(5, 9, rng.normal_vec(45, 0.0, 1.0)).unwrap();
    for _ in 0..10 {
        let (c, d) = (rng.uniform(0.0, 2.0) as f64, rng.uniform(0.0, 2.0) as f64);
        let only_q = delta_out(&base, &[(&q, d)], &x);
        let one = delta_out(&base, &[(&p, c), (&q, d)], &x)
            .sub(&only_q)
            .unwrap();
        let two = delta_out(&base, &[(&p, 2.0 * c), (&q, d)], &x)
            .sub(&only_q)
            .unwrap();
        assert!(two.max_abs_diff(&one.scale(2.0)).unwrap() < 1e-6);
    }
}

#[test]
fn merging_a_module_with_itself() {
    let mut rng = SeededRng::new(23);
    let base = BaseEncoder::seeded(3, &EncoderConfig::default()).unwrap();
    let m = random_plugin(&base, 4, &mut rng);
    let table =
        LabelEmbeddingTable::for_labels("t", &["a".into(), "b".into()], base.embed_dim()).unwrap();
    let x = Tensor::matrix(6, 256, rng.normal_vec(6 * 256, 0.0, 1.0)).unwrap();
    let logits = |p: &PluginModule| {
        classify_batch(
            &base,
            &crate::model::forward(&base, Some(p), &x).unwrap(),
            &table,
        )
        .unwrap()
    };
    let reference = logits(&m);
    let item = ForgeItem {
        state: ForgeState::Fused(m.clone()),
        round: 1,
    };
    for w in [0.0, 0.25, 0.5, 0.9, 1.0] {
        let next = apply_fusion(&item, &m, MergeCoefficients::new(w, 1.0 - w).unwrap()).unwrap();
        let ForgeState::Fused(p) = &next.state else {
            panic!("expected fused")
        };
        assert!(logits(p).max_abs_diff(&reference).unwrap() < 1e-5);
    }
}

#[test]
fn first_fusion_round_recovers_branch() {
    let mut rng = SeededRng::new(24);
    let base = BaseEncoder::seeded(3, &EncoderConfig::default()).unwrap();
    let cfg = AdapterConfig {
        rank: 4,
        alpha: 8.0,
        ..AdapterConfig::default()
    };
    let branch = random_plugin(&base, 4, &mut rng);
    let start = ForgeItem::initial(MergeStrategy::Fusion, &base, &cfg).unwrap();
    let next = apply_fusion(&start, &branch, MergeCoefficients::new(0.5, 1.0).unwrap()).unwrap();
    let x = Tensor::matrix(3, 256, rng.normal_vec(768, 0.0, 1.0)).unwrap();
    let y = next.embed(&base, &x).unwrap();
    let expect = crate::model::forward(&base, Some(&branch), &x).unwrap();
    assert_eq!(y.data(), expect.data());
}

#[test]
fn modelsoup_fixtures() {
    let soup = baseline_modelsoup(&[&scalar_plugin(2.0, 3.0), &scalar_plugin(4.0, 5.0)]).unwrap();
    let ad = soup.adapter(0).unwrap();
    assert_eq!(ad.a.data(), &[3.0]);
    assert_eq!(ad.b.data(), &[4.0]);
    let mut rng = SeededRng::new(25);
    let base = single_layer_base(4, 6, &mut rng);
    let p = random_plugin(&base, 2, &mut rng);
    assert_eq!(
        baseline_modelsoup(&[&p, &p]).unwrap().to_bytes(),
        p.to_bytes()
    );
    assert!(matches!(baseline_modelsoup(&[]), Err(ForgeError::Input(_))));
}

#[test]
fn lorahub_combination_fixtures() {
    let mut rng = SeededRng::new(26);
    let base = single_layer_base(4, 6, &mut rng);
    let p = random_plugin(&base, 2, &mut rng);
    let q = random_plugin(&base, 2, &mut rng);
    assert_eq!(
        lorahub_combine(&[&p], &[1.0]).unwrap().to_bytes(),
        p.to_bytes()
    );
    assert_eq!(
        lorahub_combine(&[&p, &q], &[0.5, 0.5]).unwrap().to_bytes(),
        fuse(&p, &q, half()).unwrap().to_bytes()
    );
    assert!(lorahub_combine(&[&p, &q], &[0.5]).is_err());
}

#[test]
fn mixture_is_linear_in_coefficients() {
    let base = BaseEncoder::seeded(3, &EncoderConfig::default()).unwrap();
    let mut rng = SeededRng::new(4);
    let mut plugins: Vec<PluginModule> = (0..2)
        .map(|_| PluginModule::fresh(&base, &AdapterConfig::default(), &mut rng).unwrap())
        .collect();
    for p in &mut plugins {
        for a in p.adapters_mut() {
            let n = a.b.numel();
            a.b.data_mut()
                .copy_from_slice(&rng.normal_vec(n, 0.0, 0.05));
        }
    }
    let x = Tensor::matrix(3, 256, rng.normal_vec(768, 0.0, 1.0)).unwrap();
    let y0 = forward_mixture(&base, &[], &x).unwrap();
    let y = mixture_forward(&base, &[(&plugins[0], 0.0), (&plugins[1], 0.0)], &x).unwrap();
    assert!(y.max_abs_diff(&y0).unwrap() < 1e-6);
    let single = crate::model::forward(&base, Some(&plugins[1]), &x).unwrap();
    let y = mixture_forward(&base, &[(&plugins[0], 0.0), (&plugins[1], 1.0)], &x).unwrap();
    assert!(y.max_abs_diff(&single).unwrap() < 1e-6);
}

#[test]
fn item_round_trip() {
    let base = unit_base();
    let p1 = scalar_plugin(1.0, 2.0);
    let p2 = scalar_plugin(-1.0, 0.5);
    let fused = ForgeItem {
        state: ForgeState::Fused(p1.clone()),
        round: 4,
    };
    let back = ForgeItem::from_bytes(&fused.to_bytes(), |_| unreachable!()).unwrap();
    assert_eq!(back.to_bytes(), fused.to_bytes());
    assert_eq!(back.round, 4);

    let mix = ForgeItem {
        state: ForgeState::Mixture(vec![
            MixtureSlot {
                plugin: p1.clone(),
                coeff: 0.25,
            },
            MixtureSlot {
                plugin: p2.clone(),
                coeff: 1.5,
            },
        ]),
        round: 2,
    };
    let store = [p1.clone(), p2.clone()];
    let back = ForgeItem::from_bytes(&mix.to_bytes(), |id| {
        store
            .iter()
            .find(|p| p.id() == id)
            .cloned()
            .ok_or_else(|| ForgeError::Integrity(id.to_string()))
    })
    .unwrap();
    assert_eq!(back.id(), mix.id());
    let x = Tensor::vector(vec![2.0]);
    let y = back.embed(&base, &x).unwrap();
    assert!((y.data()[0] - 2.0 * (1.0 + 0.25 * 2.0 + 1.5 * -0.5)).abs() < 1e-6);

    let missing = ForgeItem::from_bytes(&mix.to_bytes(), |id| {
        Err(ForgeError::Integrity(format!("missing {id}")))
    });
    assert!(matches!(missing, Err(ForgeError::Integrity(_))));
    let mut bad = mix.to_bytes();
    bad.truncate(bad.len() - 3);
    assert!(ForgeItem::from_bytes(&bad, |_| Ok(p1.clone())).is_err());
}

#[test]
fn strategy_parse() {
    assert_eq!(
        "fusion".parse::<MergeStrategy>().unwrap(),
        MergeStrategy::Fusion
    );
    assert_eq!(
        "mixture".parse::<MergeStrategy>().unwrap(),
        MergeStrategy::Mixture
    );
    assert!(matches!(
        "soup".parse::<MergeStrategy>(),
        Err(ForgeError::Parameter(_))
    ));
}

fn separable_guidance(base: &BaseEncoder, rng: &mut SeededRng) -> (GuidanceSet, PluginModule) {
    let table =
        LabelEmbeddingTable::for_labels("t", &["a".into(), "b".into()], base.embed_dim()).unwrap();
    let n = 40;
    let mut x = Vec::with_capacity(n * 256);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        labels.push(c);
        let sign = if c == 0 { 1.0 } else { -1.0 };
        x.extend((0..256).map(|j| if j < 16 { sign } else { 0.0 } + rng.normal(0.0, 0.3)));
    }
    let inputs = Tensor::matrix(n, 256, x).unwrap();
    let cfg = crate::model::TrainConfig {
        seed: 9,
        ..Default::default()
    };
    let plugin =
        crate::model::train_for_iterations(base, &table, &inputs, &labels, &cfg, 150).unwrap();
    (
        GuidanceSet {
            task: "t".into(),
            inputs,
            labels,
            table,
        },
        plugin,
    )
}

#[test]
fn fusion_round_never_worse_than_start() {
    let base = BaseEncoder::seeded(11, &EncoderConfig::default()).unwrap();
    let mut rng = SeededRng::new(12);
    let (guidance, plugin) = separable_guidance(&base, &mut rng);
    let cfg = CoeffOptimConfig::default();
    let start =
        ForgeItem::initial(MergeStrategy::Fusion, &base, &AdapterConfig::default()).unwrap();
    let out = merge_round_fusion(&base, &start, &plugin, &[guidance.clone()], &cfg).unwrap();
    assert!(out.optim.trace.len() <= cfg.max_iterations);
    assert!(out.optim.best_value <= out.optim.initial_value);
    assert_eq!(out.item.round, 1);
    let before = guidance_loss(&base, &start.entries(), &[guidance.clone()]).unwrap();
    let after = guidance_loss(&base, &out.item.entries(), &[guidance]).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn mixture_round_and_replay_agree() {
    let base = BaseEncoder::seeded(11, &EncoderConfig::default()).unwrap();
    let mut rng = SeededRng::new(13);
    let (guidance, plugin) = separable_guidance(&base, &mut rng);
    let cfg = CoeffOptimConfig::default();
    let start =
        ForgeItem::initial(MergeStrategy::Mixture, &base, &AdapterConfig::default()).unwrap();
    let out = merge_round_mixture(&base, &start, &plugin, &[guidance], &cfg).unwrap();
    let replayed = replay_rounds(start, &[(&plugin, out.coeffs)]).unwrap();
    assert_eq!(replayed.id(), out.item.id());
}

#[test]
fn lorahub_with_identical_pair_matches_fusion_space() {
    let base = BaseEncoder::seeded(11, &EncoderConfig::default()).unwrap();
    let mut rng = SeededRng::new(14);
    let (guidance, plugin) = separable_guidance(&base, &mut rng);
    let cfg = CoeffOptimConfig::default();
    let (merged, optim) =
        baseline_lorahub(&base, &[&plugin, &plugin], &[guidance.clone()], &cfg).unwrap();
    assert_eq!(optim.best.len(), 2);
    let c = MergeCoefficients::new(optim.best[0], optim.best[1]).unwrap();
    let via_fuse = fuse(&plugin, &plugin, c).unwrap();
    assert_eq!(merged.to_bytes(), via_fuse.to_bytes());
    assert!(baseline_lorahub(&base, &[], &[guidance], &cfg).is_err());
}

#[test]
fn merge_needs_guidance() {
    let base = unit_base();
    let p = scalar_plugin(1.0, 1.0);
    let start = ForgeItem {
        state: ForgeState::Fused(p.clone()),
        round: 0,
    };
    let cfg = CoeffOptimConfig::default();
    assert!(matches!(
        merge_round_fusion(&base, &start, &p, &[], &cfg),
        Err(ForgeError::Input(_))
    ));
    assert!(matches!(
        merge_round_mixture(&base, &start, &p, &[], &cfg),
        Err(ForgeError::Validation(_))
    ));
}
