//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use adaptsearch::config::{CandidateRoster, EvalSection, ExperimentConfig, SearchSection};
use adaptsearch::decode::DecodeSchedule;
use adaptsearch::encoder::{EncoderConfig, PretrainSchedule};
use adaptsearch::policyspace::DEFAULT_TAU;
use adaptsearch::tasks::{DatasetSpec, Domain, EpisodeShape, ShiftParams, SyntheticFamily, SyntheticKind};

pub const DIM: usize = 16;

pub fn family(kind: SyntheticKind, seed: u64, shift: ShiftParams) -> SyntheticFamily {
    SyntheticFamily {
        kind,
        dim: DIM,
        class_pool_size: 64,
        noise_scale: 1.0,
        shift_params: shift,
        seed,
        examples_per_class: 40,
    }
}

/// Two dense stages of width 16, 5-way 1-shot, 300 search iterations.
pub fn desk_config(seed: u64) -> ExperimentConfig {
    let fam = family(SyntheticKind::GaussianClusters, 1000 + seed, ShiftParams::default());
    ExperimentConfig {
        seed,
        output_dir: "unused".into(),
        dataset: DatasetSpec::synthetic(fam, Domain::Source, (32, 16, 16), 20),
        target: None,
        encoder: EncoderConfig::dense(DIM, vec![16, 16]),
        episode: EpisodeShape { n_way: 5, k_shot: 1, q_per_class: 15 },
        tau: DEFAULT_TAU,
        candidates: CandidateRoster::default(),
        pretrain: PretrainSchedule::default(),
        search: SearchSection { episodes_total: 300, ..SearchSection::default() },
        decode: DecodeSchedule { val_episodes: 50, recover_episodes: 100, final_episodes: 100 },
        eval: EvalSection { episodes: 300, ..EvalSection::default() },
    }
}

use std::sync::Arc;

use adaptsearch::encoder::{pretrain_backbone, StageParams};
use adaptsearch::policyspace::{PersistentPolicyState, PolicyCandidate};
use adaptsearch::rng;
use adaptsearch::supernet::{Slot, StageSearchSpace, Supernet};
use adaptsearch::tasks::{load_dataset, make_distributions, DistributionMode, TaskDistribution};
use gradtape::Tensor;

/// A small source-domain problem with a briefly pretrained two-stage
/// encoder.
pub struct Small {
    pub encoder: EncoderConfig,
    pub pretrained: Vec<StageParams>,
    pub dist_a: TaskDistribution,
    pub dist_b: TaskDistribution,
    pub dist_test: TaskDistribution,
}

pub fn small(seed: u64, k_shot: usize, q_per_class: usize) -> Small {
    let fam = family(SyntheticKind::GaussianClusters, 500 + seed, ShiftParams::default());
    let ds = Arc::new(load_dataset(&DatasetSpec::synthetic(fam, Domain::Source, (32, 16, 16), 20)).unwrap());
    let encoder = EncoderConfig::dense(DIM, vec![16, 16]);
    let schedule = PretrainSchedule { steps: 150, batch_size: 64, lr: 3e-3 };
    let pre = pretrain_backbone(&ds, &encoder, &schedule, &mut rng::stream(seed, "pretrain", 0)).unwrap();
    let shape = EpisodeShape { n_way: 5, k_shot, q_per_class };
    let (dist_a, dist_b, dist_test) = make_distributions(ds, shape, DistributionMode::Standard).unwrap();
    Small { encoder, pretrained: pre.stages, dist_a, dist_b, dist_test }
}

impl Small {
    /// Supernet offering `encoder[l]` at stage `l` and `classifier` last.
    pub fn supernet(&self, encoder: &[Vec<PolicyCandidate>], classifier: &[PolicyCandidate], seed: u64) -> Supernet {
        Supernet::new(
            self.encoder.clone(),
            &self.pretrained,
            encoder,
            classifier,
            5,
            DEFAULT_TAU,
            &mut rng::stream(seed, "supernet", 0),
        )
        .unwrap()
    }
}

/// Replaces the state of slot `i` at stage `l` by an all-zero copy: the
/// candidate emits zeros until adaptation moves it.
pub fn zero_slot(net: &mut Supernet, l: usize, i: usize) {
    let slot: &mut Slot = &mut net.stages[l].slots[i];
    if let PersistentPolicyState::Meta(ts) = &mut slot.state {
        for t in ts.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
    } else {
        panic!("zero_slot needs an RE_FA candidate");
    }
}

pub fn set_alphas(st: &mut StageSearchSpace, alphas: &[f64]) {
    st.logits = Tensor::vector(&alphas.iter().map(|a| a.ln()).collect::<Vec<_>>());
}

pub fn bits(ts: &[&Tensor]) -> Vec<u64> {
    ts.iter().flat_map(|t| t.bits()).collect()
}

pub fn theta_bits(net: &mut Supernet) -> Vec<u64> {
    net.theta_tensors_mut().iter().flat_map(|(_, t)| t.bits().collect::<Vec<_>>()).collect()
}

pub fn logit_bits(net: &Supernet) -> Vec<u64> {
    net.stages.iter().flat_map(|s| s.logits.bits().collect::<Vec<_>>()).collect()
}

/// Source/target pair of the domain-shifted family, 5-way 10-shot.
pub fn shifted_config(seed: u64, shift: ShiftParams) -> ExperimentConfig {
    let fam = family(SyntheticKind::DomainShiftedGaussian, 2000 + seed, shift);
    let mut cfg = desk_config(seed);
    cfg.dataset = DatasetSpec::synthetic(fam.clone(), Domain::Source, (32, 16, 16), 20);
    cfg.target = Some(DatasetSpec::synthetic(fam, Domain::Target, (32, 16, 16), 20));
    cfg.episode = EpisodeShape { n_way: 5, k_shot: 10, q_per_class: 10 };
    cfg
}
