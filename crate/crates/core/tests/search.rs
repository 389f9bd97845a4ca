mod common;

use adaptsearch::encoder::init_stage;
use adaptsearch::optim::Adam;
use adaptsearch::policyspace::{default_classifier_candidates, default_encoder_candidates, PersistentPolicyState, PolicyCandidate, PolicyKind};
use adaptsearch::rng;
use adaptsearch::search::{outer_step_alpha, outer_step_theta, run_search, SearchConfig};
use adaptsearch::supernet::GradMode;
use adaptsearch::Error;
use common::{logit_bits, small, theta_bits};

fn fix() -> PolicyCandidate {
    PolicyCandidate::fixed(PolicyKind::ReFix).unwrap()
}

fn di() -> PolicyCandidate {
    PolicyCandidate::fixed(PolicyKind::PlDi).unwrap()
}

fn cfg(episodes: usize, seed: u64) -> SearchConfig {
    SearchConfig { episodes_total: episodes, q_per_class: 5, seed, ..SearchConfig::default() }
}

#[test]
fn zero_outer_lr_leaves_parameters_unchanged() {
    let s = small(0, 1, 5);
    let mut net = s.supernet(&vec![default_encoder_candidates(); 2], &default_classifier_candidates(), 0);
    let before = theta_bits(&mut net);
    let ep = s.dist_a.sample(&mut rng::stream(0, "t", 0)).unwrap();
    outer_step_theta(&mut net, &ep, &mut Adam::new(0.0), 10.0).unwrap();
    assert_eq!(theta_bits(&mut net), before);
}

#[test]
fn step_one_descends_on_its_episode() {
    let mut wins = 0;
    for seed in 0..20 {
        let s = small(seed % 4, 1, 5);
        let mut net = s.supernet(&vec![vec![fix(), PolicyCandidate::strong(PolicyKind::ReFa)]; 2], &[di()], seed);
        let ep = s.dist_a.sample(&mut rng::stream(seed, "descent", 0)).unwrap();
        let before = net.query_loss(&ep, GradMode::Eval).unwrap().0.item();
        outer_step_theta(&mut net, &ep, &mut Adam::new(1e-3), 10.0).unwrap();
        let after = net.query_loss(&ep, GradMode::Eval).unwrap().0.item();
        wins += (after < before) as usize;
    }
    assert!(wins > 10, "descent in {wins}/20 seeds");
}

#[test]
fn planted_informative_weight_grows() {
    // Stage 1 offers the pretrained stage next to a random, untrained one.
    let mut grew = 0;
    for seed in 0..10 {
        let s = small(seed, 1, 5);
        let mut net =
            s.supernet(&[vec![fix()], vec![PolicyCandidate::weak(PolicyKind::ReFa), fix()]], &[di()], seed);
        let noise = init_stage(&s.encoder, 1, &mut rng::stream(seed, "noise", 0));
        net.stages[1].slots[0].state = PersistentPolicyState::Meta(noise.tensors);
        let a0 = net.stages[1].alphas()[1];
        let mut opt = Adam::new(3e-3);
        for t in 0..50 {
            let eb = s.dist_b.sample(&mut rng::stream(seed, "planted", t)).unwrap();
            outer_step_alpha(&mut net, &eb, &mut opt, 10.0).unwrap();
        }
        grew += (net.stages[1].alphas()[1] > a0) as usize;
    }
    assert!(grew >= 8, "informative weight grew in {grew}/10 seeds");
}

#[test]
fn zero_episodes_changes_nothing() {
    let s = small(1, 1, 5);
    let mut net = s.supernet(&vec![default_encoder_candidates(); 2], &default_classifier_candidates(), 1);
    let hash = net.state_hash();
    let h = run_search(&mut net, &s.dist_a, &s.dist_b, &cfg(0, 1)).unwrap();
    assert!(h.records.is_empty());
    assert_eq!(net.state_hash(), hash);
}

#[test]
fn history_tracks_iterations_on_the_simplex_and_is_deterministic() {
    let s = small(2, 1, 5);
    let build = || s.supernet(&vec![default_encoder_candidates(); 2], &default_classifier_candidates(), 2);
    let (mut a, mut b) = (build(), build());
    let ha = run_search(&mut a, &s.dist_a, &s.dist_b, &cfg(6, 9)).unwrap();
    let hb = run_search(&mut b, &s.dist_a, &s.dist_b, &cfg(6, 9)).unwrap();
    assert_eq!(ha.records.len(), 6);
    assert_eq!(ha, hb);
    assert_eq!(a.state_hash(), b.state_hash());
    for (t, r) in ha.records.iter().enumerate() {
        assert_eq!(r.iteration, t);
        assert!(r.step1_loss.is_finite() && r.step2_loss.unwrap().is_finite());
        for alpha in &r.alphas {
            assert!(alpha.iter().all(|&x| x > 0.0));
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let mut c = build();
    run_search(&mut c, &s.dist_a, &s.dist_b, &cfg(6, 10)).unwrap();
    assert_ne!(c.state_hash(), a.state_hash());
}

#[test]
fn steps_refuse_episodes_from_the_wrong_distribution() {
    let s = small(3, 1, 5);
    let mut net = s.supernet(&vec![default_encoder_candidates(); 2], &default_classifier_candidates(), 3);
    let ea = s.dist_a.sample(&mut rng::stream(3, "a", 0)).unwrap();
    let eb = s.dist_b.sample(&mut rng::stream(3, "b", 0)).unwrap();
    let et = s.dist_test.sample(&mut rng::stream(3, "t", 0)).unwrap();
    let hash = net.state_hash();
    for ep in [&eb, &et] {
        let e = outer_step_theta(&mut net, ep, &mut Adam::new(1e-3), 10.0).unwrap_err();
        assert!(matches!(e, Error::WrongDistribution { .. }), "{e}");
    }
    for ep in [&ea, &et] {
        let e = outer_step_alpha(&mut net, ep, &mut Adam::new(1e-3), 10.0).unwrap_err();
        assert!(matches!(e, Error::WrongDistribution { .. }), "{e}");
    }
    assert_eq!(net.state_hash(), hash);
}

#[test]
fn steps_touch_only_their_own_variables() {
    let s = small(4, 1, 5);
    let mut net = s.supernet(&vec![default_encoder_candidates(); 2], &default_classifier_candidates(), 4);
    let ea = s.dist_a.sample(&mut rng::stream(4, "a", 0)).unwrap();
    let eb = s.dist_b.sample(&mut rng::stream(4, "b", 0)).unwrap();
    let (theta, logits) = (theta_bits(&mut net), logit_bits(&net));
    outer_step_alpha(&mut net, &eb, &mut Adam::new(3e-3), 10.0).unwrap();
    assert_eq!(theta_bits(&mut net), theta);
    assert_ne!(logit_bits(&net), logits);
    let logits = logit_bits(&net);
    outer_step_theta(&mut net, &ea, &mut Adam::new(1e-3), 10.0).unwrap();
    assert_eq!(logit_bits(&net), logits);
    assert_ne!(theta_bits(&mut net), theta);
}
