//! Progressive, perturbation-based selection of one policy per stage, with
//! recovery training between rounds.

use std::fmt::Write as _;

use gradtape::{grad, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::evalbench::accuracy;
use crate::policyspace::{PolicyCandidate, PolicyKind};
use crate::rng;
use crate::search::{run_iterations, IterationRecord, SearchConfig, SearchState};
use crate::supernet::{InnerTrace, Masks, Supernet};
use crate::tasks::{Episode, TaskDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSchedule {
    /// Validation episodes per round, drawn from the selection distribution.
    pub val_episodes: usize,
    /// Alternating iterations after each decision.
    pub recover_episodes: usize,
    /// Fine-tuning iterations once every stage is decided.
    pub final_episodes: usize,
}

impl Default for DecodeSchedule {
    fn default() -> Self {
        Self { val_episodes: 50, recover_episodes: 100, final_episodes: 2000 }
    }
}

impl DecodeSchedule {
    /// Episodes consumed by search plus decoding of `stages` stage spaces.
    pub fn total_episodes(&self, search_episodes: usize, stages: usize) -> usize {
        search_episodes + stages * self.recover_episodes + self.final_episodes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub stage: usize,
    /// Validation accuracy with every candidate present.
    pub base_accuracy: f64,
    /// Accuracy with candidate `i` removed.
    pub masked_accuracy: Vec<f64>,
    /// `base_accuracy - masked_accuracy[i]`.
    pub drops: Vec<f64>,
    /// Set when the stage has a single candidate; nothing is evaluated.
    pub forced_winner: Option<usize>,
}

fn mean_accuracy(net: &Supernet, episodes: &[Episode], masks: Option<&Masks>) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        total += accuracy(&net.predict(ep, masks)?, &ep.query_y);
    }
    Ok(total / episodes.len() as f64)
}

/// Accuracy drop caused by removing each candidate of `stage` in turn.
/// Read-only with respect to the supernet.
pub fn perturbation_scores(net: &Supernet, stage: usize, episodes: &[Episode]) -> Result<PerturbationReport> {
    let st = net.stages.get(stage).ok_or_else(|| Error::Config(format!("no stage {stage}")))?;
    if st.decoded {
        return Err(Error::AlreadyDecoded(stage.to_string()));
    }
    let n = st.slots.len();
    if n == 1 {
        return Ok(PerturbationReport {
            stage,
            base_accuracy: f64::NAN,
            masked_accuracy: Vec::new(),
            drops: Vec::new(),
            forced_winner: Some(0),
        });
    }
    if episodes.is_empty() {
        return Err(Error::Config("perturbation needs at least one validation episode".into()));
    }
    let base = mean_accuracy(net, episodes, None)?;
    let mut masked_accuracy = Vec::with_capacity(n);
    for i in 0..n {
        let mut masks = Masks::new();
        masks.insert(stage, (0..n).map(|j| j != i).collect());
        masked_accuracy.push(mean_accuracy(net, episodes, Some(&masks))?);
    }
    let drops = masked_accuracy.iter().map(|a| base - a).collect();
    Ok(PerturbationReport { stage, base_accuracy: base, masked_accuracy, drops, forced_winner: None })
}

/// Largest drop; ties go to the larger weight, then the lower index.
pub fn select_winner(report: &PerturbationReport, alphas: &[f64]) -> usize {
    if let Some(w) = report.forced_winner {
        return w;
    }
    let mut best = 0;
    for i in 1..report.drops.len() {
        let (d, bd) = (report.drops[i], report.drops[best]);
        if d > bd || (d == bd && alphas[i] > alphas[best]) {
            best = i;
        }
    }
    best
}

/// Inner learning rate a decided candidate keeps: its own rate scaled by the
/// weight it held in the mixture.
pub fn fuse_learning_rate(beta: f64, alpha: f64) -> f64 {
    beta * alpha
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedStage {
    pub stage: usize,
    pub winner: usize,
    pub candidate: PolicyCandidate,
    /// The candidate with its fused learning rate.
    pub fused: PolicyCandidate,
    pub alpha: f64,
    pub drop: Option<f64>,
}

/// Keeps only `winner` at `stage`. Adaptive winners take the fused rate;
/// the shared store survives only if the winner reads it.
pub fn decode_stage(net: &mut Supernet, stage: usize, winner: usize) -> Result<DecodedStage> {
    let st = net.stages.get_mut(stage).ok_or_else(|| Error::Config(format!("no stage {stage}")))?;
    if st.decoded {
        return Err(Error::AlreadyDecoded(stage.to_string()));
    }
    if winner >= st.slots.len() {
        return Err(Error::Config(format!("stage {stage} has no candidate {winner}")));
    }
    let alpha = st.alphas()[winner];
    let mut slot = st.slots.swap_remove(winner);
    let candidate = slot.candidate.clone();
    if let Some(lr) = slot.candidate.inner_lr {
        slot.candidate.inner_lr = Some(fuse_learning_rate(lr, alpha));
    }
    let fused = slot.candidate.clone();
    if !matches!(candidate.kind, PolicyKind::ReFix | PolicyKind::ReFt) {
        st.shared = None;
    }
    st.slots = vec![slot];
    st.logits = Tensor::zeros(&[1]);
    st.decoded = true;
    net.validate()?;
    Ok(DecodedStage { stage, winner, candidate, fused, alpha, drop: None })
}

/// Replays a decided stage's inner loop against recorded stage inputs and
/// upstream gradients: `theta <- theta - lr * J(theta)^T u_t`.
pub fn replay_stage_updates(
    cfg: &EncoderConfig,
    stage: usize,
    theta0: &[Tensor],
    trace: &InnerTrace,
    lr: f64,
    steps: usize,
) -> Result<Vec<Tensor>> {
    if trace.steps.len() < steps {
        return Err(Error::Config(format!("trace has {} steps, {steps} requested", trace.steps.len())));
    }
    let mut theta: Vec<Tensor> = theta0.to_vec();
    for rec in &trace.steps[..steps] {
        let params: Vec<Var> = theta.iter().map(|t| Var::param(t.clone())).collect();
        let out = encoder::forward_stage(cfg, stage, &params, &Var::constant(rec.inputs[stage].clone()))?;
        let s = out.mul(&Var::constant(rec.upstream[stage].clone()))?.sum();
        let g = grad(&s, &params, false)?;
        theta = theta
            .iter()
            .zip(&g)
            .map(|(t, g)| t.zip_with(g.value(), |a, b| a - lr * b))
            .collect::<std::result::Result<_, _>>()?;
    }
    Ok(theta)
}

/// Validation episodes of round `round`, fixed by the seed.
pub fn validation_episodes(dist: &TaskDistribution, seed: u64, round: usize, count: usize) -> Result<Vec<Episode>> {
    let name = format!("decode/val/{round}");
    (0..count).map(|j| dist.sample(&mut rng::stream(seed, &name, j as u64))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPolicy {
    /// One entry per stage, encoder stages first.
    pub stages: Vec<DecodedStage>,
    pub reports: Vec<PerturbationReport>,
}

impl DecodedPolicy {
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:<14} {:>7} {:>8} {:>10}", "stage", "policy", "alpha", "drop", "fused_lr");
        for d in &self.stages {
            let drop = d.drop.map_or_else(|| "forced".to_string(), |v| format!("{v:.4}"));
            let lr = d.fused.inner_lr.map_or_else(|| "-".to_string(), |v| format!("{v:.5}"));
            let _ = writeln!(s, "{:<6} {:<14} {:>7.4} {:>8} {:>10}", d.stage, d.candidate.label(), d.alpha, drop, lr);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("stage,policy,alpha,drop,base_lr,fused_lr\n");
        for d in &self.stages {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                d.stage,
                d.candidate.label(),
                d.alpha,
                opt(d.drop),
                opt(d.candidate.inner_lr),
                opt(d.fused.inner_lr)
            );
        }
        s
    }
}

/// Decides encoder stages in order and the classifier last. Each decision
/// is followed by recovery iterations; a final fine-tuning phase runs once
/// everything is decided. `sink` sees every iteration with its phase name.
pub fn progressive_decode(
    net: &mut Supernet,
    dist_a: &TaskDistribution,
    dist_b: &TaskDistribution,
    cfg: &SearchConfig,
    schedule: &DecodeSchedule,
    state: &mut SearchState,
    sink: &mut dyn FnMut(&str, &IterationRecord) -> Result<()>,
) -> Result<DecodedPolicy> {
    let order: Vec<usize> = (0..net.stages.len()).collect();
    let mut stages = Vec::with_capacity(order.len());
    let mut reports = Vec::with_capacity(order.len());
    for (round, &l) in order.iter().enumerate() {
        if net.stages[l].decoded {
            return Err(Error::AlreadyDecoded(l.to_string()));
        }
        let episodes = if net.stages[l].slots.len() > 1 {
            validation_episodes(dist_b, cfg.seed, round, schedule.val_episodes)?
        } else {
            Vec::new()
        };
        let report = perturbation_scores(net, l, &episodes)?;
        let alphas = net.stages[l].alphas();
        let winner = select_winner(&report, &alphas);
        let before: Vec<usize> = net.stages[l].slots.iter().map(|s| s.id).collect();
        let mut decided = decode_stage(net, l, winner)?;
        decided.drop = report.forced_winner.is_none().then(|| report.drops[winner]);
        for (i, id) in before.iter().enumerate() {
            if i != winner {
                state.theta_opt.forget(&format!("s{l}/c{id}/"));
            }
        }
        if net.stages[l].shared.is_none() {
            state.theta_opt.forget(&format!("s{l}/shared/"));
        }
        state.alpha_opt.forget(&format!("s{l}/logits"));
        log::info!("decoded stage {l}: {} (alpha {:.3}, drop {:?})", decided.candidate.label(), decided.alpha, decided.drop);
        stages.push(decided);
        reports.push(report);

        let phase = format!("recover/{round}");
        run_phase(net, dist_a, dist_b, cfg, &phase, schedule.recover_episodes, state, sink)?;
    }
    run_phase(net, dist_a, dist_b, cfg, "final", schedule.final_episodes, state, sink)?;
    Ok(DecodedPolicy { stages, reports })
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    net: &mut Supernet,
    dist_a: &TaskDistribution,
    dist_b: &TaskDistribution,
    cfg: &SearchConfig,
    phase: &str,
    iterations: usize,
    state: &mut SearchState,
    sink: &mut dyn FnMut(&str, &IterationRecord) -> Result<()>,
) -> Result<()> {
    let mut local = SearchState { theta_opt: state.theta_opt.clone(), alpha_opt: state.alpha_opt.clone(), iteration: 0 };
    let stream = format!("decode/{phase}");
    run_iterations(net, dist_a, dist_b, cfg.seed, &stream, iterations, cfg.clip_norm, &mut local, &mut |r| sink(phase, r))?;
    state.theta_opt = local.theta_opt;
    state.alpha_opt = local.alpha_opt;
    Ok(())
}
