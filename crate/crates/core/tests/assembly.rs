use proptest::prelude::*;
use rmroute::assembly::{read_manifest, Method, MethodAssembly, Role};
use rmroute::data::{synth_generate, SynthOptions};
use rmroute::encoder::{init_body, init_with_head, EncoderConfig, ModelWeights};
use rmroute::lora::{attach_adapter, merge_adapter, AdapterSpec, AdapterWeights};
use rmroute::pipeline::{vocab_for, Settings};
use rmroute::router::{decide, Router, RouterInput, RouterModel};
use rmroute_autograd::rng;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        hidden_dim: 16,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 32,
        ..EncoderConfig::desk()
    }
}

/// Adapter with every tensor redrawn small and nonzero.
fn nonzero(a: AdapterWeights, seed: u64) -> AdapterWeights {
    let mut r = rng::stream(seed, "nonzero");
    let mut t = a.tensors().clone();
    for name in a.tensors().names().map(String::from).collect::<Vec<_>>() {
        for v in t.get_mut(&name).unwrap().data_mut() {
            *v = 0.05 * rng::normal(&mut r);
        }
    }
    AdapterWeights::from_tensors(a.id(), a.spec().clone(), t).unwrap()
}

fn arliss_fixture() -> (MethodAssembly, Vec<rmroute::data::RewardExample>) {
    let data = synth_generate(&SynthOptions {
        domains: 3,
        train_per_domain: 10,
        test_per_domain: 6,
        ..SynthOptions::default()
    })
    .unwrap();
    let cfg = tiny();
    let vocab = vocab_for(&data.train, cfg.vocab_size).unwrap();
    let backbone = init_body(&cfg, 1).unwrap();
    let spec = AdapterSpec::default();
    let adapters = data
        .domains
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let a = attach_adapter(&backbone, &spec, i as u64).unwrap().with_head(16, 1, i as u64).unwrap();
            nonzero(a, i as u64).with_id(d.clone())
        })
        .collect();
    let ra = attach_adapter(&backbone, &spec, 9).unwrap().with_head(16, 3, 9).unwrap();
    let router = Router::new(
        RouterModel::Adapter(nonzero(ra, 9).with_id("router")),
        data.domains.clone(),
        RouterInput::Prompt,
    )
    .unwrap();
    let a = MethodAssembly::arliss(vocab, data.domains.clone(), backbone, adapters, router).unwrap();
    (a, data.test)
}

#[test]
fn arliss_round_trips_through_disk() {
    let (a, test) = arliss_fixture();
    let dir = tempfile::tempdir().unwrap();
    let s = Settings::desk();
    let manifest = a.save(dir.path(), &s.manifest_info(Method::Arliss, 3)).unwrap();
    assert_eq!(manifest.seed, 3);
    let roles: Vec<Role> = manifest.components.iter().map(|c| c.role).collect();
    assert_eq!(roles.iter().filter(|r| **r == Role::RewardAdapter).count(), 3);
    assert_eq!(roles.iter().filter(|r| **r == Role::Backbone).count(), 1);
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);

    let (b, loaded) = MethodAssembly::load(dir.path()).unwrap();
    assert_eq!(loaded, manifest);
    let before = a.score_pairs(&test).unwrap();
    let after = b.score_pairs(&test).unwrap();
    assert_eq!(before.pairs(), after.pairs());
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let (a, _) = arliss_fixture();
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path(), &Default::default()).unwrap();
    let path = dir.path().join("backbone.ckpt");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(MethodAssembly::load(dir.path()).is_err());
}

#[test]
fn scoring_an_adapter_matches_its_merged_model() {
    let (a, test) = arliss_fixture();
    let rmroute::assembly::Parts::Arliss { host, .. } = a.parts() else {
        panic!("not arliss")
    };
    for d in a.domains() {
        let merged = merge_adapter(host.backbone(), host.adapter(d).unwrap()).unwrap();
        for e in test.iter().take(5) {
            let seq = a.tokens(&e.prompt, &e.chosen);
            let via_merge = rmroute::encoder::score_sequences(&merged, None, &[&seq]).unwrap()[0][0];
            let via_swap = a.arliss_score_forced(&e.prompt, &e.chosen, d).unwrap();
            assert!((via_merge - via_swap).abs() < 1e-5, "{d}: {via_merge} vs {via_swap}");
        }
    }
}

#[test]
fn swaps_count_only_domain_changes() {
    let (a, test) = arliss_fixture();
    a.reset_swap_count();
    let d0 = a.domains()[0].clone();
    let d1 = a.domains()[1].clone();
    let e = &test[0];
    for d in [&d0, &d0, &d1, &d1, &d0] {
        a.arliss_score_forced(&e.prompt, &e.chosen, d).unwrap();
    }
    // the first activation counts as a swap, repeats do not
    assert!(a.swap_count() <= 3 && a.swap_count() >= 2, "{}", a.swap_count());
    assert!(a.arliss_score_forced(&e.prompt, &e.chosen, "nowhere").is_err());
}

#[test]
fn rodos_rejects_mismatched_parts() {
    let cfg = tiny();
    let data = synth_generate(&SynthOptions {
        domains: 2,
        train_per_domain: 4,
        test_per_domain: 2,
        ..SynthOptions::default()
    })
    .unwrap();
    let vocab = vocab_for(&data.train, cfg.vocab_size).unwrap();
    let router = || {
        Router::new(
            RouterModel::Full(init_with_head(&cfg, 2, 1).unwrap()),
            data.domains.clone(),
            RouterInput::Prompt,
        )
        .unwrap()
    };
    let one: Vec<ModelWeights> = vec![init_with_head(&cfg, 1, 0).unwrap()];
    assert!(MethodAssembly::rodos(vocab.clone(), data.domains.clone(), one, router()).is_err());
    let two = vec![init_with_head(&cfg, 1, 0).unwrap(), init_with_head(&cfg, 1, 1).unwrap()];
    assert!(MethodAssembly::rodos(vocab, data.domains.clone(), two, router()).is_ok());
}

proptest! {
    #[test]
    fn router_probabilities_form_a_distribution(logits in prop::collection::vec(-50.0f32..50.0, 1..12)) {
        let domains: Vec<String> = (0..logits.len()).map(|i| format!("d{i}")).collect();
        let d = decide(&logits, &domains).unwrap();
        let sum: f64 = d.probabilities.iter().map(|&p| f64::from(p)).sum();
        prop_assert!((sum - 1.0).abs() < 1e-5);
        prop_assert!(d.probabilities.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let best = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(logits[d.index], best);
        prop_assert_eq!(logits.iter().position(|&l| l == best).unwrap(), d.index);
        prop_assert_eq!(&d.domain, &domains[d.index]);
    }

    #[test]
    fn decisions_shift_invariant(logits in prop::collection::vec(-5.0f32..5.0, 2..8), c in -10.0f32..10.0) {
        let domains: Vec<String> = (0..logits.len()).map(|i| format!("d{i}")).collect();
        let shifted: Vec<f32> = logits.iter().map(|l| l + c).collect();
        let a = decide(&logits, &domains).unwrap();
        let b = decide(&shifted, &domains).unwrap();
        for (p, q) in a.probabilities.iter().zip(&b.probabilities) {
            prop_assert!((p - q).abs() < 1e-4);
        }
    }
}
