mod common;

use adaptsearch::config::CandidateRoster;
use adaptsearch::encoder::{self, BlockFamily, EncoderConfig};
use adaptsearch::evalbench::{
    ci95, default_views, evaluate, multicrop_predict, preset_policy, random_search_baseline, BaselinePreset,
    EpisodicModel, EvalOptions, EvalReport, Metric, PresetContext, TrainBudget, ViewTransform, DEFAULT_VIEWS,
    RANDOM_SEARCH_MODELS,
};
use adaptsearch::policyspace::{PolicyKind, Strength, DEFAULT_TAU};
use adaptsearch::rng;
use adaptsearch::tasks::{Episode, SourceTag};
use adaptsearch::{Error, Result};
use gradtape::Tensor;
use rand_distr::{Distribution, StandardNormal};
use common::{small, Small};

fn ctx(s: &Small) -> PresetContext {
    PresetContext { encoder: s.encoder.clone(), pretrained: s.pretrained.clone(), n_way: 5, tau: DEFAULT_TAU }
}

fn preset(s: &Small, p: BaselinePreset, lr: f64) -> adaptsearch::evalbench::PolicyModel {
    preset_policy(p, &ctx(s), lr, &CandidateRoster::default().space(), &mut rng::stream(0, "preset", 0)).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

const IMG: [usize; 3] = [6, 5, 2];

fn conv_ctx() -> PresetContext {
    let cfg = EncoderConfig { block_family: BlockFamily::Conv, input_shape: IMG.to_vec(), widths: vec![3, 4], kernel: 3 };
    let pretrained = encoder::init(&cfg, &mut rng::stream(7, "conv", 0));
    PresetContext { encoder: cfg, pretrained, n_way: 3, tau: DEFAULT_TAU }
}

fn image_episode(seed: u64) -> Episode {
    let mut r = rng::stream(seed, "images", 0);
    let mut images = |n: usize| {
        let per: usize = IMG.iter().product();
        let data: Vec<f64> = (0..n * per).map(|_| StandardNormal.sample(&mut r)).collect();
        Tensor::new(vec![n, IMG[0], IMG[1], IMG[2]], data).unwrap()
    };
    Episode {
        n_way: 3,
        k_shot: 1,
        q_per_class: 2,
        support_x: images(3),
        support_y: vec![0, 1, 2],
        query_x: images(6),
        query_y: vec![0, 0, 1, 1, 2, 2],
        support_ids: Vec::new(),
        query_ids: Vec::new(),
        classes: vec![0, 1, 2],
        source_tag: SourceTag::Test,
    }
}

#[test]
fn ci95_examples() {
    assert_eq!(ci95(&[0.8; 20]), 0.0);
    assert_eq!(ci95(&[0.7]), 0.0);
    // {0, 1}: s = 1/sqrt(2), so 1.96 s / sqrt(2) = 0.98
    assert!((ci95(&[0.0, 1.0]) - 0.98).abs() < 1e-12);
    let r = EvalReport::from_accuracies("p", "h", vec![0.8; 4]);
    assert!((r.mean_accuracy - 0.8).abs() < 1e-12);
    assert_eq!(r.ci95, 0.0);
}

#[test]
fn report_serializes_exactly_the_documented_fields() {
    let r = EvalReport::from_accuracies("p", "h", vec![0.5, 0.75]);
    let v = serde_json::to_value(&r).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    let mut want = EvalReport::FIELDS.to_vec();
    keys.sort();
    want.sort();
    assert_eq!(keys, want);
}

#[test]
fn evaluation_is_deterministic_and_read_only() {
    let s = small(0, 1, 5);
    for (p, lr) in [(BaselinePreset::Protonet, 0.0), (BaselinePreset::Maml, 0.1)] {
        let model = preset(&s, p, lr);
        let hash = model.state_hash();
        let a = evaluate(&model, &s.dist_test, 8, 3, &EvalOptions::default()).unwrap();
        let b = evaluate(&model, &s.dist_test, 8, 3, &EvalOptions::default()).unwrap();
        assert_eq!(model.state_hash(), hash);
        assert_eq!(a.report.hash(), b.report.hash());
        assert_eq!(a.report.n_episodes, 8);
        assert_eq!(a.episodes.len(), 8);
        let mean = a.report.accuracies.iter().sum::<f64>() / 8.0;
        assert!((a.report.mean_accuracy - mean).abs() < 1e-12);
        let c = evaluate(&model, &s.dist_test, 8, 4, &EvalOptions::default()).unwrap();
        assert_ne!(c.report.hash(), a.report.hash());
    }
}

#[test]
fn protonet_predicts_identically_twice() {
    let s = small(1, 1, 5);
    let model = preset(&s, BaselinePreset::Protonet, 0.0);
    assert_eq!(model.metric, Metric::NegativeL2);
    let ep = s.dist_test.sample(&mut rng::stream(1, "twice", 0)).unwrap();
    let a = model.predict(&ep).unwrap();
    let b = model.predict(&ep).unwrap();
    assert!(a.bits().eq(b.bits()));
}

#[test]
fn matchnet_one_shot_is_cosine_protonet() {
    let s = small(2, 1, 5);
    let matchnet = preset(&s, BaselinePreset::Matchnet, 0.0);
    let mut cosine = preset(&s, BaselinePreset::Protonet, 0.0);
    cosine.metric = Metric::Cosine;
    for i in 0..10 {
        let ep = s.dist_test.sample(&mut rng::stream(2, "match", i)).unwrap();
        let d = max_abs_diff(&matchnet.predict(&ep).unwrap(), &cosine.predict(&ep).unwrap());
        assert!(d < 1e-12, "{d}");
    }
}

#[test]
fn maml_lowers_support_loss_in_most_episodes() {
    let s = small(3, 1, 5);
    let model = preset(&s, BaselinePreset::Maml, 0.1);
    let wins = (0..20)
        .filter(|&i| {
            let ep = s.dist_test.sample(&mut rng::stream(3, "maml", i)).unwrap();
            let l = model.adaptation_losses(&ep).unwrap();
            l.after < l.before
        })
        .count();
    assert!(wins > 10, "{wins}/20");
}

#[test]
fn unknown_preset_is_rejected() {
    let e = "protonett".parse::<BaselinePreset>().unwrap_err();
    assert!(matches!(e, Error::UnknownPreset(_)));
    for p in BaselinePreset::ALL {
        assert_eq!(p.name().parse::<BaselinePreset>().unwrap(), p);
    }
}

#[test]
fn random_sampler_omits_weak_classifier_fast_adaptation() {
    assert_eq!(RANDOM_SEARCH_MODELS, 10);
    let space = CandidateRoster::default().space();
    let mut r = rng::stream(0, "draws", 0);
    for _ in 0..1000 {
        let (enc, cls) = space.sample(2, &mut r).unwrap();
        assert_eq!(enc.len(), 2);
        assert!(!(cls.kind == PolicyKind::PlFa && cls.strength == Strength::Weak));
    }
}

#[test]
fn random_search_is_deterministic() {
    let s = small(4, 1, 5);
    let space = CandidateRoster::default().space();
    let budget = TrainBudget { iterations: 2, outer_lr: 1e-3, clip_norm: 10.0 };
    let run = || {
        random_search_baseline(&ctx(&s), &space, 3, &s.dist_a, &s.dist_test, budget, 3, 11, &EvalOptions::default())
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.models.len(), 3);
    for ((ca, ra), (cb, rb)) in a.models.iter().zip(&b.models) {
        assert_eq!(ca, cb);
        assert_eq!(ra.hash(), rb.hash());
    }
    let mean = a.models.iter().map(|(_, r)| r.mean_accuracy).sum::<f64>() / 3.0;
    assert_eq!(a.mean_accuracy, mean);
}

/// Fails with a divergence on every episode whose first query feature is
/// negative.
struct Flaky<'a>(&'a dyn EpisodicModel, bool);

impl EpisodicModel for Flaky<'_> {
    fn describe(&self) -> String {
        "flaky".into()
    }
    fn input_shape(&self) -> &[usize] {
        self.0.input_shape()
    }
    fn predict(&self, ep: &Episode) -> Result<Tensor> {
        if self.1 || ep.query_x.data()[0] < 0.0 {
            return Err(Error::AdaptationDiverged("planted".into()));
        }
        self.0.predict(ep)
    }
    fn state_hash(&self) -> String {
        self.0.state_hash()
    }
}

#[test]
fn failed_episodes_are_counted_not_scored() {
    let s = small(5, 1, 5);
    let model = preset(&s, BaselinePreset::Protonet, 0.0);
    let ev = evaluate(&Flaky(&model, false), &s.dist_test, 30, 5, &EvalOptions::default()).unwrap();
    assert!(ev.report.failed > 0 && ev.report.failed < 30, "{}", ev.report.failed);
    assert_eq!(ev.report.accuracies.len() + ev.report.failed, 30);
    assert_eq!(ev.report.n_episodes, 30);
    let e = evaluate(&Flaky(&model, true), &s.dist_test, 5, 5, &EvalOptions::default()).unwrap_err();
    assert!(matches!(e, Error::Numeric(_)), "{e}");
}

#[test]
fn multicrop_identity_and_fixed_points() {
    assert_eq!(default_views(DEFAULT_VIEWS).len(), 10);
    assert_eq!(DEFAULT_VIEWS, 10);
    let c = conv_ctx();
    let space = CandidateRoster::default().space();
    for p in [BaselinePreset::Protonet, BaselinePreset::Baselinepp] {
        let model = preset_policy(p, &c, 0.1, &space, &mut rng::stream(7, "p", 0)).unwrap();
        let ep = image_episode(1);
        let plain = model.predict(&ep).unwrap();
        let one = multicrop_predict(&model, &ep, &[ViewTransform::Identity]).unwrap();
        assert!(one.bits().eq(plain.bits()));
        let view = default_views(1)[0];
        let single = multicrop_predict(&model, &ep, &[view]).unwrap();
        let repeated = multicrop_predict(&model, &ep, &[view; 4]).unwrap();
        assert!(max_abs_diff(&single, &repeated) < 1e-12);
        let ten = multicrop_predict(&model, &ep, &default_views(10)).unwrap();
        assert_eq!(ten.shape(), plain.shape());
    }
}

#[test]
fn multicrop_commutes_with_query_permutation() {
    let c = conv_ctx();
    let model = preset_policy(BaselinePreset::Protonet, &c, 0.0, &CandidateRoster::default().space(), &mut rng::stream(7, "p", 0))
        .unwrap();
    let ep = image_episode(2);
    let perm = [4usize, 0, 5, 2, 1, 3];
    let per: usize = IMG.iter().product();
    let mut shuffled = ep.clone();
    let data: Vec<f64> = perm.iter().flat_map(|&i| ep.query_x.data()[i * per..(i + 1) * per].to_vec()).collect();
    shuffled.query_x = Tensor::new(ep.query_x.shape().to_vec(), data).unwrap();
    shuffled.query_y = perm.iter().map(|&i| ep.query_y[i]).collect();
    let views = default_views(10);
    let a = multicrop_predict(&model, &ep, &views).unwrap();
    let b = multicrop_predict(&model, &shuffled, &views).unwrap();
    let n = ep.n_way;
    for (row, &i) in perm.iter().enumerate() {
        for j in 0..n {
            assert!((b.data()[row * n + j] - a.data()[i * n + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn multicrop_rejects_vector_inputs() {
    let s = small(6, 1, 5);
    let model = preset(&s, BaselinePreset::Protonet, 0.0);
    let ep = s.dist_test.sample(&mut rng::stream(6, "v", 0)).unwrap();
    let e = multicrop_predict(&model, &ep, &default_views(10)).unwrap_err();
    assert!(matches!(e, Error::UnsupportedInput(_)), "{e}");
}
