//! Softmax relaxation over per-stage candidate policies: joint inner-loop
//! adaptation and the mixture forward pass.

use std::collections::BTreeMap;
use std::sync::Arc;

use gradtape::{grad, nn, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{self, EncoderConfig, StageParams};
use crate::error::{Error, Result};
use crate::policyspace::{
    adapt_jointly, class_means, cosine_logits, init_candidate_params, AdaptGroup, GradientFlow, InitContext,
    PersistentPolicyState, PolicyCandidate, PolicyKind,
};
use crate::rng::Rng;
use crate::tasks::Episode;

/// Scale of the random prototype initialization of PL_FA candidates.
pub const PROTOTYPE_INIT_STD: f64 = 0.01;

/// Candidates to keep per stage (`true` = keep). Stages without an entry are
/// unmasked. Surviving weights are renormalized to sum to one.
pub type Masks = BTreeMap<usize, Vec<bool>>;

/// Which quantities an outer-loop gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Persistent policy parameters; fine-tuning increments are first order.
    Theta,
    /// Stage logits; the whole inner trajectory is differentiated.
    Alpha,
    /// No outer gradient.
    Eval,
}

impl GradMode {
    fn retains(self, kind: PolicyKind) -> bool {
        match self {
            GradMode::Eval => false,
            GradMode::Theta => matches!(kind, PolicyKind::ReFa | PolicyKind::PlFa),
            GradMode::Alpha => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    /// Stable identifier, unique within the supernet.
    pub id: usize,
    pub candidate: PolicyCandidate,
    pub state: PersistentPolicyState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSearchSpace {
    pub stage_index: usize,
    /// Shared store of RE_FIX, also the starting point of RE_FT. Encoder
    /// stages only.
    pub shared: Option<StageParams>,
    pub slots: Vec<Slot>,
    pub logits: Tensor,
    pub decoded: bool,
}

impl StageSearchSpace {
    pub fn alphas(&self) -> Vec<f64> {
        softmax_values(self.logits.data())
    }

    pub fn is_classifier(&self) -> bool {
        self.shared.is_none() && self.slots.iter().all(|s| !s.candidate.kind.is_encoder())
    }
}

fn softmax_values(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `alpha = softmax(z)`.
pub fn policy_weights(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric(format!("logits must be finite and non-empty, got {logits:?}")));
    }
    Ok(softmax_values(logits))
}

/// `(1 + ft + fa)^M * (1 + pl_ft + pl_fa)`.
pub fn search_space_size(m: u32, s_re_ft: u64, s_re_fa: u64, s_pl_ft: u64, s_pl_fa: u64) -> u64 {
    (1 + s_re_ft + s_re_fa).pow(m) * (1 + s_pl_ft + s_pl_fa)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supernet {
    pub encoder: EncoderConfig,
    pub n_way: usize,
    pub tau: f64,
    /// Encoder stages `0..M` followed by the classifier stage.
    pub stages: Vec<StageSearchSpace>,
    next_slot_id: usize,
}

/// Graph handles for one forward pass.
#[derive(Clone)]
pub struct SupernetVars {
    pub shared: Vec<Option<Vec<Var>>>,
    pub own: Vec<Vec<Option<Vec<Var>>>>,
    pub logits: Vec<Var>,
    pub mode: GradMode,
}

impl SupernetVars {
    /// Persistent parameters with their optimizer keys, in the order used by
    /// [`Supernet::theta_tensors_mut`].
    pub fn theta_params(&self, net: &Supernet) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (l, st) in net.stages.iter().enumerate() {
            if let Some(vars) = &self.shared[l] {
                for (k, v) in vars.iter().enumerate() {
                    out.push((format!("s{l}/shared/{k}"), v.clone()));
                }
            }
            for (i, slot) in st.slots.iter().enumerate() {
                if let Some(vars) = &self.own[l][i] {
                    for (k, v) in vars.iter().enumerate() {
                        out.push((format!("s{l}/c{}/{k}", slot.id), v.clone()));
                    }
                }
            }
        }
        out
    }
}

/// Per-step record of the stage inputs and the support-loss gradient with
/// respect to each stage output.
#[derive(Debug, Clone, Default)]
pub struct InnerTrace {
    pub steps: Vec<StepTrace>,
}

#[derive(Debug, Clone)]
pub struct StepTrace {
    pub loss: f64,
    /// `O^{l-1}` for every encoder stage (the episode input for stage 0).
    pub inputs: Vec<Tensor>,
    /// `dL_S/dO^l` for every encoder stage.
    pub upstream: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub enum ClassifierParams {
    /// Class means of the adapted support embeddings (PL_DI).
    FromSupport,
    Prototypes(Var),
}

/// Task-specific parameters after the inner loop. `None` marks a masked
/// candidate.
#[derive(Debug, Clone)]
pub struct AdaptedParams {
    pub encoder: Vec<Vec<Option<Vec<Var>>>>,
    pub classifier: Vec<Option<ClassifierParams>>,
    pub flows: Vec<Vec<Option<GradientFlow>>>,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub adapted: AdaptedParams,
    pub trace: Option<InnerTrace>,
}

/// `O^l = sum_i alpha_i g_l(O^{l-1}; theta_i)`. Candidates with zero weight
/// (masked) are skipped; every other candidate needs parameters.
pub fn stage_output(
    cfg: &EncoderConfig,
    l: usize,
    alpha: &Var,
    prev: &Var,
    params: &[Option<Vec<Var>>],
) -> Result<Var> {
    let a = alpha.value().data();
    if a.len() != params.len() {
        return Err(Error::StateMismatch(format!("{} weights for {} candidates at stage {l}", a.len(), params.len())));
    }
    let mut out: Option<Var> = None;
    for (i, p) in params.iter().enumerate() {
        if a[i] == 0.0 {
            continue;
        }
        let p = p.as_ref().ok_or_else(|| Error::StateMismatch(format!("no parameters for candidate {i} at stage {l}")))?;
        let y = encoder::forward_stage(cfg, l, p, prev)?;
        let term = y.mul(&pick(alpha, i)?)?;
        out = Some(match out {
            Some(o) => o.add(&term)?,
            None => term,
        });
    }
    out.ok_or_else(|| Error::StateMismatch(format!("every candidate at stage {l} is masked")))
}

fn pick(alpha: &Var, i: usize) -> Result<Var> {
    Ok(alpha.gather(Arc::from(vec![i]), &[1])?)
}

/// `sum_i alpha_i * tau * cos(W_i, v)`.
pub fn classifier_output(alpha: &Var, prototypes: &[Option<Var>], queries: &Var, tau: f64) -> Result<Var> {
    let a = alpha.value().data();
    let mut out: Option<Var> = None;
    for (i, w) in prototypes.iter().enumerate() {
        if a[i] == 0.0 {
            continue;
        }
        let w = w.as_ref().ok_or_else(|| Error::StateMismatch(format!("no prototypes for classifier candidate {i}")))?;
        let term = cosine_logits(w, queries, tau)?.mul(&pick(alpha, i)?)?;
        out = Some(match out {
            Some(o) => o.add(&term)?,
            None => term,
        });
    }
    out.ok_or_else(|| Error::StateMismatch("every classifier candidate is masked".into()))
}

fn legal(kind: PolicyKind, classifier: bool) -> bool {
    kind.is_encoder() != classifier
}

impl Supernet {
    /// Builds a supernet from pretrained stages. RE_FIX stores and RE_FA
    /// copies start from the pretrained weights; PL_FA prototypes start
    /// small and random. All logits start at zero.
    pub fn new(
        encoder: EncoderConfig,
        pretrained: &[StageParams],
        encoder_candidates: &[Vec<PolicyCandidate>],
        classifier_candidates: &[PolicyCandidate],
        n_way: usize,
        tau: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        encoder.validate()?;
        let m = encoder.num_stages();
        if pretrained.len() != m || encoder_candidates.len() != m {
            return Err(Error::Config(format!(
                "{m} encoder stages but {} pretrained stages and {} candidate lists",
                pretrained.len(),
                encoder_candidates.len()
            )));
        }
        if !(tau > 0.0) || n_way == 0 {
            return Err(Error::Config("tau must be positive and n_way at least 1".into()));
        }
        let mut next = 0;
        let mut stages = Vec::with_capacity(m + 1);
        for l in 0..m {
            let cands = &encoder_candidates[l];
            let slots = cands
                .iter()
                .map(|c| {
                    let state = match c.kind {
                        PolicyKind::ReFix => PersistentPolicyState::Shared,
                        PolicyKind::ReFa => PersistentPolicyState::Meta(pretrained[l].tensors.clone()),
                        _ => PersistentPolicyState::Online,
                    };
                    next += 1;
                    Slot { id: next - 1, candidate: c.clone(), state }
                })
                .collect();
            let shared = cands
                .iter()
                .any(|c| matches!(c.kind, PolicyKind::ReFix | PolicyKind::ReFt))
                .then(|| pretrained[l].clone());
            stages.push(StageSearchSpace { stage_index: l, shared, slots, logits: Tensor::zeros(&[cands.len()]), decoded: false });
        }
        let c = encoder.embedding_dim();
        let normal = Normal::new(0.0, PROTOTYPE_INIT_STD).expect("positive std");
        let slots = classifier_candidates
            .iter()
            .map(|cand| {
                let state = match cand.kind {
                    PolicyKind::PlFa => PersistentPolicyState::PrototypeInit(
                        Tensor::new(vec![n_way, c], (0..n_way * c).map(|_| normal.sample(rng)).collect())
                            .expect("prototype shape"),
                    ),
                    _ => PersistentPolicyState::Online,
                };
                next += 1;
                Slot { id: next - 1, candidate: cand.clone(), state }
            })
            .collect();
        stages.push(StageSearchSpace {
            stage_index: m,
            shared: None,
            slots,
            logits: Tensor::zeros(&[classifier_candidates.len()]),
            decoded: false,
        });
        let net = Self { encoder, n_way, tau, stages, next_slot_id: next };
        net.validate()?;
        Ok(net)
    }

    /// Assembles a supernet from explicit stages (used for single-candidate
    /// models and tests).
    pub fn from_stages(encoder: EncoderConfig, n_way: usize, tau: f64, stages: Vec<StageSearchSpace>) -> Result<Self> {
        let next_slot_id = stages.iter().flat_map(|s| s.slots.iter().map(|x| x.id + 1)).max().unwrap_or(0);
        let net = Self { encoder, n_way, tau, stages, next_slot_id };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.encoder.num_stages();
        if self.stages.len() != m + 1 {
            return Err(Error::Config(format!("{} stage spaces for {m} encoder stages + classifier", self.stages.len())));
        }
        let mut ids = std::collections::HashSet::new();
        for (l, st) in self.stages.iter().enumerate() {
            let classifier = l == m;
            if st.slots.is_empty() {
                return Err(Error::Config(format!("stage {l} has no candidates")));
            }
            if st.logits.len() != st.slots.len() || st.logits.rank() != 1 {
                return Err(Error::Config(format!("stage {l} logits do not match its candidates")));
            }
            for slot in &st.slots {
                slot.candidate.validate()?;
                if !legal(slot.candidate.kind, classifier) {
                    return Err(Error::Config(format!("{} is not allowed at stage {l}", slot.candidate.kind)));
                }
                if !slot.state.matches(slot.candidate.kind) {
                    return Err(Error::StateMismatch(format!(
                        "{} at stage {l} expects {} state",
                        slot.candidate.kind,
                        PersistentPolicyState::expected_for(slot.candidate.kind)
                    )));
                }
                if !ids.insert(slot.id) {
                    return Err(Error::Config(format!("duplicate candidate id {}", slot.id)));
                }
            }
            let needs_shared = st.slots.iter().any(|s| matches!(s.candidate.kind, PolicyKind::ReFix | PolicyKind::ReFt));
            if needs_shared && st.shared.is_none() {
                return Err(Error::StateMismatch(format!("stage {l} needs a shared store")));
            }
        }
        Ok(())
    }

    pub fn num_encoder_stages(&self) -> usize {
        self.encoder.num_stages()
    }

    pub fn classifier_index(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.stages.iter().map(|s| s.alphas()).collect()
    }

    pub fn next_slot_id(&self) -> usize {
        self.next_slot_id
    }

    /// Number of persistent parameter banks (shared stores and owned states).
    pub fn persistent_banks(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.shared.is_some() as usize + s.slots.iter().filter(|x| !x.state.tensors().is_empty()).count())
            .sum()
    }

    /// SHA-256 over the full serialized state.
    pub fn state_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("supernet serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn vars(&self, mode: GradMode) -> SupernetVars {
        let theta = mode == GradMode::Theta;
        let wrap = |t: &Tensor| if theta { Var::param(t.clone()) } else { Var::constant(t.clone()) };
        SupernetVars {
            shared: self.stages.iter().map(|s| s.shared.as_ref().map(|p| p.tensors.iter().map(wrap).collect())).collect(),
            own: self
                .stages
                .iter()
                .map(|s| {
                    s.slots
                        .iter()
                        .map(|slot| {
                            let ts = slot.state.tensors();
                            (!ts.is_empty()).then(|| ts.into_iter().map(wrap).collect())
                        })
                        .collect()
                })
                .collect(),
            logits: self
                .stages
                .iter()
                .map(|s| if mode == GradMode::Alpha && !s.decoded { Var::param(s.logits.clone()) } else { Var::constant(s.logits.clone()) })
                .collect(),
            mode,
        }
    }

    /// Mutable persistent tensors keyed like [`SupernetVars::theta_params`].
    pub fn theta_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, st) in self.stages.iter_mut().enumerate() {
            if let Some(p) = st.shared.as_mut() {
                for (k, t) in p.tensors.iter_mut().enumerate() {
                    out.push((format!("s{l}/shared/{k}"), t));
                }
            }
            for slot in st.slots.iter_mut() {
                let id = slot.id;
                for (k, t) in slot.state.tensors_mut().into_iter().enumerate() {
                    out.push((format!("s{l}/c{id}/{k}"), t));
                }
            }
        }
        out
    }

    /// Stage weights as graph nodes, with masking applied.
    fn alpha_vars(&self, vars: &SupernetVars, masks: Option<&Masks>) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len());
        for (l, z) in vars.logits.iter().enumerate() {
            if z.value().data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite logits at stage {l}")));
            }
            let alpha = nn::softmax(z)?;
            let alpha = match masks.and_then(|m| m.get(&l)) {
                Some(keep) if keep.iter().any(|k| !k) => {
                    if keep.len() != self.stages[l].slots.len() {
                        return Err(Error::StateMismatch(format!("mask for stage {l} has {} entries", keep.len())));
                    }
                    if !keep.iter().any(|&k| k) {
                        return Err(Error::StateMismatch(format!("mask removes every candidate at stage {l}")));
                    }
                    let m = Var::constant(Tensor::vector(&keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect::<Vec<_>>()));
                    let kept = alpha.mul(&m)?;
                    kept.div(&kept.sum())?
                }
                _ => alpha,
            };
            out.push(alpha);
        }
        Ok(out)
    }

    fn masked(alpha: &Var, i: usize) -> bool {
        alpha.value().data()[i] == 0.0
    }

    /// Embeds `x` through the encoder mixture; optionally records stage
    /// inputs and outputs.
    fn mixture_encode(
        &self,
        x: &Var,
        params: &[Vec<Option<Vec<Var>>>],
        alphas: &[Var],
        mut record: Option<(&mut Vec<Var>, &mut Vec<Var>)>,
    ) -> Result<Var> {
        let mut h = x.clone();
        for l in 0..self.num_encoder_stages() {
            let out = stage_output(&self.encoder, l, &alphas[l], &h, &params[l])?;
            if let Some((ins, outs)) = record.as_mut() {
                ins.push(h.clone());
                outs.push(out.clone());
            }
            h = out;
        }
        encoder::pool_output(&self.encoder, &h)
    }

    /// Joint inner-loop adaptation on the episode's support set.
    pub fn inner_adapt(
        &self,
        vars: &SupernetVars,
        episode: &Episode,
        masks: Option<&Masks>,
        want_trace: bool,
    ) -> Result<(AdaptedParams, Vec<Var>, Option<InnerTrace>)> {
        if episode.support_y.is_empty() {
            return Err(Error::Shape("empty support set".into()));
        }
        if episode.n_way != self.n_way && self.stages[self.classifier_index()].slots.iter().any(|s| s.candidate.kind == PolicyKind::PlFa) {
            return Err(Error::StateMismatch(format!(
                "prototype initialization is {}-way, episode is {}-way",
                self.n_way, episode.n_way
            )));
        }
        let alphas = self.alpha_vars(vars, masks)?;
        let m = self.num_encoder_stages();
        let mode = vars.mode;

        enum Target {
            Enc(usize, usize),
            Cls(usize),
        }
        let mut groups = Vec::new();
        let mut targets = Vec::new();
        let mut encoder_params: Vec<Vec<Option<Vec<Var>>>> = Vec::with_capacity(m);
        let mut flows: Vec<Vec<Option<GradientFlow>>> = Vec::with_capacity(m + 1);
        for l in 0..m {
            let st = &self.stages[l];
            let mut row = Vec::with_capacity(st.slots.len());
            let mut frow = Vec::with_capacity(st.slots.len());
            for (i, slot) in st.slots.iter().enumerate() {
                if Self::masked(&alphas[l], i) {
                    row.push(None);
                    frow.push(None);
                    continue;
                }
                let init = init_candidate_params(
                    &slot.candidate,
                    InitContext { shared: vars.shared[l].as_deref(), own: vars.own[l][i].as_deref(), support: None },
                )?;
                if slot.candidate.kind.adapts() {
                    groups.push(AdaptGroup {
                        vars: init.params.clone(),
                        lr: slot.candidate.lr(),
                        steps: slot.candidate.steps(),
                        retain: mode.retains(slot.candidate.kind),
                    });
                    targets.push(Target::Enc(l, i));
                }
                row.push(Some(init.params));
                frow.push(Some(init.flow));
            }
            encoder_params.push(row);
            flows.push(frow);
        }

        let cls = &self.stages[m];
        let mut cls_frow = Vec::with_capacity(cls.slots.len());
        for (i, slot) in cls.slots.iter().enumerate() {
            if Self::masked(&alphas[m], i) {
                cls_frow.push(None);
                continue;
            }
            match slot.candidate.kind {
                PolicyKind::PlDi => cls_frow.push(Some(GradientFlow::Data)),
                PolicyKind::PlFt => {
                    // increment on top of the step-0 class means
                    let c = self.encoder.embedding_dim();
                    groups.push(AdaptGroup {
                        vars: vec![Var::param(Tensor::zeros(&[episode.n_way, c]))],
                        lr: slot.candidate.lr(),
                        steps: slot.candidate.steps(),
                        retain: mode.retains(PolicyKind::PlFt),
                    });
                    targets.push(Target::Cls(i));
                    cls_frow.push(Some(GradientFlow::DataInitOnly));
                }
                PolicyKind::PlFa => {
                    let init = init_candidate_params(
                        &slot.candidate,
                        InitContext { shared: None, own: vars.own[m][i].as_deref(), support: None },
                    )?;
                    groups.push(AdaptGroup {
                        vars: init.params,
                        lr: slot.candidate.lr(),
                        steps: slot.candidate.steps(),
                        retain: mode.retains(PolicyKind::PlFa),
                    });
                    targets.push(Target::Cls(i));
                    cls_frow.push(Some(GradientFlow::Meta));
                }
                k => return Err(Error::StateMismatch(format!("{k} at the classifier stage"))),
            }
        }
        flows.push(cls_frow);

        let support_x = Var::constant(episode.support_x.clone());
        let labels = &episode.support_y;
        let n_way = episode.n_way;
        let mut w0: Vec<Option<Var>> = vec![None; cls.slots.len()];
        let mut trace = want_trace.then(InnerTrace::default);

        let mut loss_fn = |cur: &[Vec<Var>], t: usize| -> Result<Var> {
            let mut params = encoder_params.clone();
            let mut cls_cur: Vec<Option<Var>> = vec![None; cls.slots.len()];
            for (g, target) in targets.iter().enumerate() {
                match *target {
                    Target::Enc(l, i) => params[l][i] = Some(cur[g].clone()),
                    Target::Cls(i) => cls_cur[i] = Some(cur[g][0].clone()),
                }
            }
            let (mut ins, mut outs) = (Vec::new(), Vec::new());
            let emb = self.mixture_encode(
                &support_x,
                &params,
                &alphas,
                trace.as_ref().map(|_| (&mut ins, &mut outs)),
            )?;
            let mut protos: Vec<Option<Var>> = vec![None; cls.slots.len()];
            for (i, slot) in cls.slots.iter().enumerate() {
                if Self::masked(&alphas[m], i) {
                    continue;
                }
                protos[i] = Some(match slot.candidate.kind {
                    PolicyKind::PlDi => class_means(&emb, labels, n_way)?,
                    PolicyKind::PlFt => {
                        if t == 0 {
                            let init = init_candidate_params(
                                &slot.candidate,
                                InitContext { support: Some((&emb, labels, n_way)), ..Default::default() },
                            )?;
                            w0[i] = Some(init.params[0].clone());
                        }
                        let base = w0[i].as_ref().expect("set at step 0");
                        base.add(cls_cur[i].as_ref().expect("adapting"))?
                    }
                    _ => cls_cur[i].clone().expect("adapting"),
                });
            }
            let scores = classifier_output(&alphas[m], &protos, &emb, self.tau)?;
            let loss = nn::cross_entropy(&scores, labels)?;
            if let Some(tr) = trace.as_mut() {
                let ups = grad(&loss, &outs, false)?;
                tr.steps.push(StepTrace {
                    loss: loss.item(),
                    inputs: ins.iter().map(|v| v.value().clone()).collect(),
                    upstream: ups.iter().map(|v| v.value().clone()).collect(),
                });
            }
            Ok(loss)
        };
        let adapted = adapt_jointly(groups, &mut loss_fn)?;

        let detach = |v: Var| if mode == GradMode::Eval { v.detach() } else { v };
        let mut encoder_out = encoder_params;
        let mut cls_out: Vec<Option<ClassifierParams>> = cls
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (!Self::masked(&alphas[m], i) && s.candidate.kind == PolicyKind::PlDi).then_some(ClassifierParams::FromSupport)
            })
            .collect();
        for (g, target) in targets.iter().enumerate() {
            match *target {
                Target::Enc(l, i) => encoder_out[l][i] = Some(adapted[g].iter().cloned().map(detach).collect()),
                Target::Cls(i) => {
                    let w = match &w0[i] {
                        Some(base) => base.add(&adapted[g][0])?,
                        None => adapted[g][0].clone(),
                    };
                    cls_out[i] = Some(ClassifierParams::Prototypes(detach(w)));
                }
            }
        }
        Ok((AdaptedParams { encoder: encoder_out, classifier: cls_out, flows }, alphas, trace))
    }

    /// Adapts on the support set, then scores the queries: `[|Q|, N]`.
    pub fn forward(&self, vars: &SupernetVars, episode: &Episode, masks: Option<&Masks>, want_trace: bool) -> Result<ForwardOutput> {
        let (adapted, alphas, trace) = self.inner_adapt(vars, episode, masks, want_trace)?;
        let m = self.num_encoder_stages();
        let needs_support = adapted.classifier.iter().any(|c| matches!(c, Some(ClassifierParams::FromSupport)));
        let support_emb = if needs_support {
            Some(self.mixture_encode(&Var::constant(episode.support_x.clone()), &adapted.encoder, &alphas, None)?)
        } else {
            None
        };
        let query_emb = self.mixture_encode(&Var::constant(episode.query_x.clone()), &adapted.encoder, &alphas, None)?;
        let mut protos = Vec::with_capacity(adapted.classifier.len());
        for c in &adapted.classifier {
            protos.push(match c {
                None => None,
                Some(ClassifierParams::FromSupport) => {
                    Some(class_means(support_emb.as_ref().expect("computed"), &episode.support_y, episode.n_way)?)
                }
                Some(ClassifierParams::Prototypes(w)) => Some(w.clone()),
            });
        }
        let logits = classifier_output(&alphas[m], &protos, &query_emb, self.tau)?;
        Ok(ForwardOutput { logits, adapted, trace })
    }

    /// Query logits with no outer gradient.
    pub fn predict(&self, episode: &Episode, masks: Option<&Masks>) -> Result<Tensor> {
        let vars = self.vars(GradMode::Eval);
        Ok(self.forward(&vars, episode, masks, false)?.logits.value().clone())
    }

    /// Mean query cross-entropy under `mode`, plus the graph handles.
    pub fn query_loss(&self, episode: &Episode, mode: GradMode) -> Result<(Var, SupernetVars)> {
        let vars = self.vars(mode);
        let out = self.forward(&vars, episode, None, false)?;
        let loss = nn::cross_entropy(&out.logits, &episode.query_y)?;
        Ok((loss, vars))
    }

    /// Gradient of the query loss with respect to every persistent tensor,
    /// keyed by optimizer name.
    pub fn theta_gradients(&self, episode: &Episode) -> Result<(f64, Vec<(String, Tensor)>)> {
        let (loss, vars) = self.query_loss(episode, GradMode::Theta)?;
        let named = vars.theta_params(self);
        let wrt: Vec<Var> = named.iter().map(|(_, v)| v.clone()).collect();
        let grads = grad(&loss, &wrt, false)?;
        Ok((loss.item(), named.into_iter().map(|(n, _)| n).zip(grads.into_iter().map(|g| g.value().clone())).collect()))
    }

    /// Gradient of the query loss with respect to the logits of every
    /// undecoded stage (zero for decoded stages).
    pub fn alpha_gradients(&self, episode: &Episode) -> Result<(f64, Vec<Tensor>)> {
        let (loss, vars) = self.query_loss(episode, GradMode::Alpha)?;
        let grads = grad(&loss, &vars.logits, false)?;
        Ok((loss.item(), grads.into_iter().map(|g| g.value().clone()).collect()))
    }

    /// Allocates a fresh candidate id.
    pub fn allocate_slot_id(&mut self) -> usize {
        self.next_slot_id += 1;
        self.next_slot_id - 1
    }
}

/// Convenience: query logits of a supernet on an episode.
pub fn supernet_forward(net: &Supernet, episode: &Episode) -> Result<Tensor> {
    net.predict(episode, None)
}
