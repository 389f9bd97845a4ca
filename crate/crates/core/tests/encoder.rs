mod common;

use adaptsearch::encoder::{self, encode_tensor, forward_stage, head_accuracy, pretrain_backbone, EncoderConfig, PretrainSchedule};
use adaptsearch::rng;
use adaptsearch::tasks::{load_dataset, DatasetSpec, Domain, ShiftParams, Split, SyntheticKind};
use gradtape::Var;

fn source(seed: u64) -> adaptsearch::tasks::Dataset {
    let fam = common::family(SyntheticKind::GaussianClusters, seed, ShiftParams::default());
    load_dataset(&DatasetSpec::synthetic(fam, Domain::Source, (20, 5, 5), 20)).unwrap()
}

#[test]
fn encode_is_the_chain_of_its_stages() {
    let cfg = EncoderConfig::dense(common::DIM, vec![12, 8, 6]);
    let stages = encoder::init(&cfg, &mut rng::stream(0, "chain", 0));
    let d = source(0);
    let ids: Vec<_> = d.split_examples(Split::Val).iter().take(9).map(|p| p.0).collect();
    let x = d.stack(&ids);
    let mut h = Var::constant(x.clone());
    for (l, s) in stages.iter().enumerate() {
        h = forward_stage(&cfg, l, &s.vars(false), &h).unwrap();
    }
    let y = encode_tensor(&cfg, &stages, &x).unwrap();
    assert_eq!(y.shape(), &[9, 6]);
    assert!(y.max_abs_diff(h.value()) < 1e-12);
}

#[test]
fn pretraining_beats_chance() {
    let d = source(1);
    let cfg = EncoderConfig::dense(common::DIM, vec![16, 16]);
    let pre = pretrain_backbone(&d, &cfg, &PretrainSchedule::default(), &mut rng::stream(1, "pretrain", 0)).unwrap();
    let acc = head_accuracy(&d, &cfg, &pre, Split::Train).unwrap();
    assert!(acc > 1.0 / 20.0, "{acc}");
    assert!(pre.losses.last().unwrap() < pre.losses.first().unwrap());
}

#[test]
fn zero_pretraining_steps_keeps_the_initialization() {
    let d = source(2);
    let cfg = EncoderConfig::dense(common::DIM, vec![8]);
    let schedule = PretrainSchedule { steps: 0, ..PretrainSchedule::default() };
    let pre = pretrain_backbone(&d, &cfg, &schedule, &mut rng::stream(2, "p", 0)).unwrap();
    let init = encoder::init(&cfg, &mut rng::stream(2, "p", 0));
    assert_eq!(pre.stages, init);
    assert!(pre.losses.is_empty());
}

#[test]
fn pretraining_is_deterministic() {
    let d = source(3);
    let cfg = EncoderConfig::dense(common::DIM, vec![8, 8]);
    let schedule = PretrainSchedule { steps: 30, ..PretrainSchedule::default() };
    let run = |seed| pretrain_backbone(&d, &cfg, &schedule, &mut rng::stream(seed, "p", 0)).unwrap();
    let (a, b, c) = (run(3), run(3), run(4));
    for (x, y) in a.stages.iter().zip(&b.stages) {
        for (s, t) in x.tensors.iter().zip(&y.tensors) {
            assert!(s.bits().eq(t.bits()));
        }
    }
    assert_ne!(a.stages, c.stages);
}
