//! Alternating bi-level optimization: policy parameters on tasks from one
//! distribution, selection logits on tasks from another.

use gradtape::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, Adam};
use crate::rng;
use crate::supernet::Supernet;
use crate::tasks::{Episode, SourceTag, TaskDistribution, DEFAULT_QUERIES_PER_CLASS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub episodes_total: usize,
    pub outer_lr_theta: f64,
    pub outer_lr_alpha: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            episodes_total: 1000,
            outer_lr_theta: 1e-3,
            outer_lr_alpha: 3e-3,
            n_way: 5,
            k_shot: 1,
            q_per_class: DEFAULT_QUERIES_PER_CLASS,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_lr_theta > 0.0 && self.outer_lr_alpha > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("outer learning rates and clip norm must be positive".into()));
        }
        if self.n_way < 2 || self.k_shot < 1 || self.q_per_class < 1 {
            return Err(Error::Config("episodes need n_way >= 2, k_shot >= 1 and q_per_class >= 1".into()));
        }
        Ok(())
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub step1_loss: f64,
    /// Absent once every stage is decoded.
    pub step2_loss: Option<f64>,
    /// Selection weights of every stage after the iteration.
    pub alphas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchHistory {
    pub records: Vec<IterationRecord>,
}

/// Optimizer state carried across iterations (and across resumes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchState {
    pub theta_opt: Adam,
    pub alpha_opt: Adam,
    /// Iterations completed so far.
    pub iteration: usize,
}

impl SearchState {
    pub fn new(cfg: &SearchConfig) -> Self {
        Self { theta_opt: Adam::new(cfg.outer_lr_theta), alpha_opt: Adam::new(cfg.outer_lr_alpha), iteration: 0 }
    }
}

fn require_tag(episode: &Episode, expected: SourceTag) -> Result<()> {
    if episode.source_tag != expected {
        return Err(Error::WrongDistribution { expected: expected.to_string(), got: episode.source_tag.to_string() });
    }
    Ok(())
}

/// Step 1: one update of every persistent policy parameter from the query
/// loss of an episode of the first distribution. Logits are untouched.
pub fn outer_step_theta(net: &mut Supernet, episode: &Episode, opt: &mut Adam, clip_norm: f64) -> Result<f64> {
    require_tag(episode, SourceTag::A)?;
    let (loss, grads) = net.theta_gradients(episode)?;
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged(format!("step-1 query loss {loss}")));
    }
    let (names, mut gs): (Vec<String>, Vec<Tensor>) = grads.into_iter().unzip();
    if gs.iter().any(|g| !g.all_finite()) {
        return Err(Error::TrainingDiverged("non-finite step-1 gradient".into()));
    }
    clip_global_norm(&mut gs, clip_norm);
    let mut params = net.theta_tensors_mut();
    debug_assert!(params.iter().map(|(n, _)| n).eq(names.iter()));
    let mut refs: Vec<(&str, &mut Tensor)> = params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
    opt.step(&mut refs, &gs);
    Ok(loss)
}

/// Step 2: one update of the logits of every undecoded stage from the query
/// loss of an episode of the second distribution. Persistent parameters are
/// untouched. Returns `None` when every stage is decoded.
pub fn outer_step_alpha(net: &mut Supernet, episode: &Episode, opt: &mut Adam, clip_norm: f64) -> Result<Option<f64>> {
    require_tag(episode, SourceTag::B)?;
    if net.stages.iter().all(|s| s.decoded) {
        return Ok(None);
    }
    let (loss, grads) = net.alpha_gradients(episode)?;
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged(format!("step-2 query loss {loss}")));
    }
    let open: Vec<usize> = (0..net.stages.len()).filter(|&l| !net.stages[l].decoded).collect();
    let mut gs: Vec<Tensor> = open.iter().map(|&l| grads[l].clone()).collect();
    if gs.iter().any(|g| !g.all_finite()) {
        return Err(Error::TrainingDiverged("non-finite step-2 gradient".into()));
    }
    clip_global_norm(&mut gs, clip_norm);
    let names: Vec<String> = open.iter().map(|l| format!("s{l}/logits")).collect();
    let mut refs: Vec<(&str, &mut Tensor)> = Vec::with_capacity(open.len());
    let mut it = names.iter();
    for (l, st) in net.stages.iter_mut().enumerate() {
        if !st.decoded {
            debug_assert!(open.contains(&l));
            refs.push((it.next().expect("one name per open stage").as_str(), &mut st.logits));
        }
    }
    opt.step(&mut refs, &gs);
    Ok(Some(loss))
}

/// Episodes of iteration `t`: one from each distribution, each from its own
/// named stream, so any iteration can be replayed on its own.
pub fn iteration_episodes(
    seed: u64,
    stream: &str,
    t: usize,
    dist_a: &TaskDistribution,
    dist_b: &TaskDistribution,
) -> Result<(Episode, Episode)> {
    let a = dist_a.sample(&mut rng::stream(seed, &format!("{stream}/A"), t as u64))?;
    let b = dist_b.sample(&mut rng::stream(seed, &format!("{stream}/B"), t as u64))?;
    Ok((a, b))
}

/// Runs alternating iterations until `state.iteration == iterations`,
/// handing every record to `sink` as soon as it exists.
#[allow(clippy::too_many_arguments)]
pub fn run_iterations(
    net: &mut Supernet,
    dist_a: &TaskDistribution,
    dist_b: &TaskDistribution,
    seed: u64,
    stream: &str,
    iterations: usize,
    clip_norm: f64,
    state: &mut SearchState,
    sink: &mut dyn FnMut(&IterationRecord) -> Result<()>,
) -> Result<()> {
    check_disjoint(dist_a, dist_b)?;
    while state.iteration < iterations {
        let t = state.iteration;
        let (ea, eb) = iteration_episodes(seed, stream, t, dist_a, dist_b)?;
        let step1_loss = outer_step_theta(net, &ea, &mut state.theta_opt, clip_norm)?;
        let step2_loss = outer_step_alpha(net, &eb, &mut state.alpha_opt, clip_norm)?;
        state.iteration += 1;
        let rec = IterationRecord { iteration: t, step1_loss, step2_loss, alphas: net.alphas() };
        sink(&rec)?;
        if t % 25 == 0 {
            log::debug!("{stream} iteration {t}: step1 {step1_loss:.4} step2 {step2_loss:?}");
        }
    }
    Ok(())
}

fn check_disjoint(a: &TaskDistribution, b: &TaskDistribution) -> Result<()> {
    if std::sync::Arc::ptr_eq(&a.dataset, &b.dataset) && a.classes().iter().any(|c| b.classes().contains(c)) {
        return Err(Error::Config("the two task distributions share classes".into()));
    }
    Ok(())
}

/// `config.episodes_total` alternating iterations from a fresh optimizer
/// state.
pub fn run_search(
    net: &mut Supernet,
    dist_a: &TaskDistribution,
    dist_b: &TaskDistribution,
    cfg: &SearchConfig,
) -> Result<SearchHistory> {
    cfg.validate()?;
    let mut state = SearchState::new(cfg);
    let mut history = SearchHistory::default();
    run_iterations(net, dist_a, dist_b, cfg.seed, "search", cfg.episodes_total, cfg.clip_norm, &mut state, &mut |r| {
        history.records.push(r.clone());
        Ok(())
    })?;
    Ok(history)
}

/// Flat α table rows `(iteration, stage, candidate_label, alpha)`.
pub fn alpha_rows(net: &Supernet, history: &SearchHistory) -> Vec<(usize, usize, String, f64)> {
    let labels: Vec<Vec<String>> = net.stages.iter().map(|s| s.slots.iter().map(|x| x.candidate.label()).collect()).collect();
    let mut rows = Vec::new();
    for r in &history.records {
        for (l, a) in r.alphas.iter().enumerate() {
            for (i, v) in a.iter().enumerate() {
                let label = labels.get(l).and_then(|ls| ls.get(i)).cloned().unwrap_or_else(|| format!("c{i}"));
                rows.push((r.iteration, l, label, *v));
            }
        }
    }
    rows
}
