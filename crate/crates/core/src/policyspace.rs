//! The six adaptation policies, their initialization rules, inner-loop SGD
//! and prototype scoring.

use std::fmt;
use std::sync::Arc;

use gradtape::{grad, nn, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cosine temperature.
pub const DEFAULT_TAU: f64 = 10.0;
pub const STRONG_LR: f64 = 0.1;
pub const WEAK_LR: f64 = 0.01;
pub const DEFAULT_INNER_STEPS: usize = 10;
const COS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyKind {
    ReFix,
    ReFt,
    ReFa,
    PlDi,
    PlFt,
    PlFa,
}

impl PolicyKind {
    pub fn is_encoder(self) -> bool {
        matches!(self, PolicyKind::ReFix | PolicyKind::ReFt | PolicyKind::ReFa)
    }

    /// Whether the kind runs inner-loop SGD.
    pub fn adapts(self) -> bool {
        !matches!(self, PolicyKind::ReFix | PolicyKind::PlDi)
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::ReFix => "RE_FIX",
            PolicyKind::ReFt => "RE_FT",
            PolicyKind::ReFa => "RE_FA",
            PolicyKind::PlDi => "PL_DI",
            PolicyKind::PlFt => "PL_FT",
            PolicyKind::PlFa => "PL_FA",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Strong,
    Weak,
    Fixed,
}

/// One policy option at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCandidate {
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
    pub strength: Strength,
}

impl PolicyCandidate {
    pub fn fixed(kind: PolicyKind) -> Result<Self> {
        let c = Self { kind, inner_lr: None, inner_steps: None, strength: Strength::Fixed };
        c.validate()?;
        Ok(c)
    }

    pub fn adaptive(kind: PolicyKind, lr: f64, steps: usize, strength: Strength) -> Result<Self> {
        let c = Self { kind, inner_lr: Some(lr), inner_steps: Some(steps), strength };
        c.validate()?;
        Ok(c)
    }

    pub fn strong(kind: PolicyKind) -> Self {
        Self::adaptive(kind, STRONG_LR, DEFAULT_INNER_STEPS, Strength::Strong).expect("valid default")
    }

    pub fn weak(kind: PolicyKind) -> Self {
        Self::adaptive(kind, WEAK_LR, DEFAULT_INNER_STEPS, Strength::Weak).expect("valid default")
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.adapts(), self.inner_lr, self.inner_steps, self.strength) {
            (false, None, None, Strength::Fixed) => Ok(()),
            (true, Some(lr), Some(steps), s) if lr > 0.0 && lr.is_finite() && steps >= 1 && s != Strength::Fixed => Ok(()),
            _ => Err(Error::Config(format!("invalid candidate {self:?}"))),
        }
    }

    pub fn lr(&self) -> f64 {
        self.inner_lr.unwrap_or(0.0)
    }

    pub fn steps(&self) -> usize {
        self.inner_steps.unwrap_or(0)
    }

    /// Short label such as `RE_FT(0.1)`.
    pub fn label(&self) -> String {
        match self.inner_lr {
            Some(lr) => format!("{}({})", self.kind, lr),
            None => self.kind.to_string(),
        }
    }
}

/// Fixed candidate, both strengths of fine-tuning and both strengths of fast
/// adaptation: five options per encoder stage.
pub fn default_encoder_candidates() -> Vec<PolicyCandidate> {
    vec![
        PolicyCandidate::fixed(PolicyKind::ReFix).expect("valid"),
        PolicyCandidate::strong(PolicyKind::ReFt),
        PolicyCandidate::weak(PolicyKind::ReFt),
        PolicyCandidate::strong(PolicyKind::ReFa),
        PolicyCandidate::weak(PolicyKind::ReFa),
    ]
}

pub fn default_classifier_candidates() -> Vec<PolicyCandidate> {
    vec![
        PolicyCandidate::fixed(PolicyKind::PlDi).expect("valid"),
        PolicyCandidate::strong(PolicyKind::PlFt),
        PolicyCandidate::weak(PolicyKind::PlFt),
        PolicyCandidate::strong(PolicyKind::PlFa),
        PolicyCandidate::weak(PolicyKind::PlFa),
    ]
}

/// Learnable state a policy carries between episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PersistentPolicyState {
    /// Uses the stage's shared parameter store (RE_FIX).
    Shared,
    /// Meta-learned stage initialization owned by the policy (RE_FA).
    Meta(Vec<Tensor>),
    /// Meta-learned prototype initialization `W_init` (PL_FA).
    PrototypeInit(Tensor),
    /// Nothing persistent; parameters are generated per task.
    Online,
}

impl PersistentPolicyState {
    pub fn expected_for(kind: PolicyKind) -> &'static str {
        match kind {
            PolicyKind::ReFix => "shared",
            PolicyKind::ReFa => "meta",
            PolicyKind::PlFa => "prototype-init",
            _ => "online",
        }
    }

    pub fn matches(&self, kind: PolicyKind) -> bool {
        matches!(
            (self, kind),
            (PersistentPolicyState::Shared, PolicyKind::ReFix)
                | (PersistentPolicyState::Meta(_), PolicyKind::ReFa)
                | (PersistentPolicyState::PrototypeInit(_), PolicyKind::PlFa)
                | (PersistentPolicyState::Online, PolicyKind::ReFt | PolicyKind::PlDi | PolicyKind::PlFt)
        )
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            PersistentPolicyState::Meta(ts) => ts.iter().collect(),
            PersistentPolicyState::PrototypeInit(w) => vec![w],
            _ => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PersistentPolicyState::Meta(ts) => ts.iter_mut().collect(),
            PersistentPolicyState::PrototypeInit(w) => vec![w],
            _ => Vec::new(),
        }
    }
}

/// How outer-loop gradients reach a candidate's starting point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientFlow {
    /// The persistent parameters themselves, never updated in the inner loop.
    Alias,
    /// A fresh copy cut from the persistent parameters.
    Severed,
    /// The persistent initialization, differentiated through the whole
    /// inner trajectory.
    Meta,
    /// Derived from support embeddings; the encoder receives gradient.
    Data,
    /// Derived from support embeddings; gradient reaches the encoder only
    /// through the initialization, inner updates are first order.
    DataInitOnly,
}

/// Everything [`init_candidate_params`] may draw from.
#[derive(Default, Clone, Copy)]
pub struct InitContext<'a> {
    /// The stage's shared store.
    pub shared: Option<&'a [Var]>,
    /// The candidate's own persistent parameters.
    pub own: Option<&'a [Var]>,
    /// Support embeddings `[S, C]`, relabelled support labels and `n_way`.
    pub support: Option<(&'a Var, &'a [usize], usize)>,
}

#[derive(Debug, Clone)]
pub struct CandidateInit {
    pub params: Vec<Var>,
    pub flow: GradientFlow,
}

/// Per-task starting parameters of `candidate`.
pub fn init_candidate_params(candidate: &PolicyCandidate, ctx: InitContext<'_>) -> Result<CandidateInit> {
    let mismatch = |what: &str| Error::StateMismatch(format!("{} needs {what}", candidate.kind));
    match candidate.kind {
        PolicyKind::ReFix => {
            let s = ctx.shared.ok_or_else(|| mismatch("the shared stage store"))?;
            Ok(CandidateInit { params: s.to_vec(), flow: GradientFlow::Alias })
        }
        PolicyKind::ReFt => {
            let s = ctx.shared.ok_or_else(|| mismatch("the shared stage store"))?;
            Ok(CandidateInit {
                params: s.iter().map(|v| Var::param(v.value().clone())).collect(),
                flow: GradientFlow::Severed,
            })
        }
        PolicyKind::ReFa => {
            let own = ctx.own.ok_or_else(|| mismatch("a meta-learned stage copy"))?;
            Ok(CandidateInit { params: own.to_vec(), flow: GradientFlow::Meta })
        }
        PolicyKind::PlDi | PolicyKind::PlFt => {
            let (emb, labels, n) = ctx.support.ok_or_else(|| mismatch("support embeddings"))?;
            let w = class_means(emb, labels, n)?;
            let flow = if candidate.kind == PolicyKind::PlDi { GradientFlow::Data } else { GradientFlow::DataInitOnly };
            Ok(CandidateInit { params: vec![w], flow })
        }
        PolicyKind::PlFa => {
            let own = ctx.own.ok_or_else(|| mismatch("a prototype initialization"))?;
            let w = own.first().ok_or_else(|| mismatch("a prototype initialization"))?;
            if let Some((emb, _, n)) = ctx.support {
                if w.shape() != [n, emb.shape()[1]] {
                    return Err(Error::StateMismatch(format!(
                        "prototype initialization {:?} for a {n}-way episode with {}-d embeddings",
                        w.shape(),
                        emb.shape()[1]
                    )));
                }
            }
            Ok(CandidateInit { params: vec![w.clone()], flow: GradientFlow::Meta })
        }
    }
}

/// Class-mean rows: `W[c] = mean{ emb[s] : labels[s] = c }`.
pub fn class_means(emb: &Var, labels: &[usize], n: usize) -> Result<Var> {
    let (s, c) = match emb.shape() {
        [s, c] => (*s, *c),
        sh => return Err(Error::Shape(format!("support embeddings must be [S, C], got {sh:?}"))),
    };
    if labels.len() != s {
        return Err(Error::Shape(format!("{} labels for {s} embeddings", labels.len())));
    }
    let mut counts = vec![0.0; n];
    for &y in labels {
        if y >= n {
            return Err(Error::Shape(format!("label {y} out of range for {n} classes")));
        }
        counts[y] += 1.0;
    }
    if counts.iter().any(|&k| k == 0.0) {
        return Err(Error::Shape("every class needs at least one support example".into()));
    }
    let index: Arc<[usize]> = (0..s).flat_map(|i| (0..c).map(move |j| labels[i] * c + j)).collect();
    let sums = emb.scatter_add(index, &[n, c])?;
    let inv = Tensor::new(vec![n, 1], counts.iter().map(|k| 1.0 / k).collect())?;
    Ok(sums.mul(&Var::constant(inv))?)
}

/// Differentiable `tau * cos(w_i, v_q)` for all queries: `[Q, N]`. Zero rows
/// score zero instead of failing.
pub fn cosine_logits(w: &Var, v: &Var, tau: f64) -> Result<Var> {
    let wn = nn::normalize_rows(w, COS_EPS)?;
    let vn = nn::normalize_rows(v, COS_EPS)?;
    Ok(vn.matmul(&wn.t()?)?.scale(tau))
}

/// Differentiable `-||w_i - v_q||^2`: `[Q, N]`.
pub fn negative_l2_logits(w: &Var, v: &Var) -> Result<Var> {
    let vw = v.matmul(&w.t()?)?.scale(2.0);
    let vv = v.square().sum_axis(1)?;
    let ww = w.square().sum_axis(1)?.t()?;
    Ok(vw.sub(&vv)?.sub(&ww)?)
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, c] => Ok((*n, *c)),
        [c] => Ok((1, *c)),
        s => Err(Error::Shape(format!("expected a matrix or vector, got {s:?}"))),
    }
}

/// Class scores of one embedding `v` against prototypes `w` (`[N, C]`).
pub fn cosine_scores(w: &Tensor, v: &Tensor, tau: f64) -> Result<Tensor> {
    let (n, c) = rows(w)?;
    if v.len() != c {
        return Err(Error::Shape(format!("embedding of length {} against {c}-d prototypes", v.len())));
    }
    let vn = v.norm();
    if vn == 0.0 {
        return Err(Error::DegenerateVector("query embedding".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &w.data()[i * c..(i + 1) * c];
        let wn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return Err(Error::DegenerateVector(format!("prototype {i}")));
        }
        let dot: f64 = row.iter().zip(v.data()).map(|(a, b)| a * b).sum();
        out.push(tau * dot / (wn * vn));
    }
    Ok(Tensor::vector(&out))
}

pub fn negative_l2_scores(w: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, c) = rows(w)?;
    if v.len() != c {
        return Err(Error::Shape(format!("embedding of length {} against {c}-d prototypes", v.len())));
    }
    let out: Vec<f64> = (0..n)
        .map(|i| -w.data()[i * c..(i + 1) * c].iter().zip(v.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .collect();
    Ok(Tensor::vector(&out))
}

/// One set of parameters adapted together with its own step size.
#[derive(Debug, Clone)]
pub struct AdaptGroup {
    pub vars: Vec<Var>,
    pub lr: f64,
    pub steps: usize,
    /// Keep the trajectory differentiable (gradients of gradients). When
    /// unset, increments are applied as constants.
    pub retain: bool,
}

/// Joint full-batch gradient descent over several groups sharing one loss.
///
/// At step `t` every group with `t < steps` moves by `-lr * dL/dvars`; the
/// loss always sees every group's current value. `loss_fn` receives the
/// current values and the step index.
pub fn adapt_jointly(
    groups: Vec<AdaptGroup>,
    loss_fn: &mut dyn FnMut(&[Vec<Var>], usize) -> Result<Var>,
) -> Result<Vec<Vec<Var>>> {
    for g in &groups {
        if g.steps > 0 && !(g.lr > 0.0 && g.lr.is_finite()) {
            return Err(Error::Config(format!("inner learning rate must be positive, got {}", g.lr)));
        }
    }
    let total = groups.iter().map(|g| g.steps).max().unwrap_or(0);
    // Gradients are only defined for vars on the tape; constants get a
    // fresh leaf with the same value.
    let mut cur: Vec<Vec<Var>> = groups
        .iter()
        .map(|g| {
            g.vars
                .iter()
                .map(|v| if g.steps > 0 && !v.requires_grad() { Var::param(v.value().clone()) } else { v.clone() })
                .collect()
        })
        .collect();
    for t in 0..total {
        let active: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].steps > t).collect();
        let create_graph = active.iter().any(|&i| groups[i].retain);
        let loss = loss_fn(&cur, t)?;
        if !loss.item().is_finite() {
            return Err(Error::AdaptationDiverged(format!("support loss {} at step {t}", loss.item())));
        }
        let wrt: Vec<Var> = active.iter().flat_map(|&i| cur[i].iter().cloned()).collect();
        let grads = grad(&loss, &wrt, create_graph)?;
        if grads.iter().any(|g| !g.value().all_finite()) {
            return Err(Error::AdaptationDiverged(format!("non-finite gradient at step {t}")));
        }
        let mut it = grads.into_iter();
        for &i in &active {
            let g = &groups[i];
            for v in cur[i].iter_mut() {
                let gv = it.next().expect("one gradient per var");
                let gv = if g.retain { gv } else { gv.detach() };
                *v = v.sub(&gv.scale(g.lr))?;
            }
        }
    }
    Ok(cur)
}

/// `steps` plain gradient-descent updates `theta <- theta - lr * dL/dtheta`.
pub fn sgd_adapt(
    theta0: &[Var],
    loss_fn: &mut dyn FnMut(&[Var]) -> Result<Var>,
    lr: f64,
    steps: usize,
    retain_meta_gradient: bool,
) -> Result<Vec<Var>> {
    if !(lr > 0.0) || steps == 0 {
        return Err(Error::Config(format!("sgd_adapt needs lr > 0 and steps >= 1, got {lr} and {steps}")));
    }
    let start: Vec<Var> = if retain_meta_gradient {
        theta0.to_vec()
    } else {
        theta0.iter().map(|v| Var::param(v.value().clone())).collect()
    };
    let group = AdaptGroup { vars: start, lr, steps, retain: retain_meta_gradient };
    let mut out = adapt_jointly(vec![group], &mut |vars, _| loss_fn(&vars[0]))?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(target: &[f64]) -> impl FnMut(&[Var]) -> Result<Var> + '_ {
        move |v: &[Var]| Ok(v[0].sub(&Var::constant(Tensor::vector(target)))?.square().sum().scale(0.5))
    }

    #[test]
    fn one_step_closed_form() {
        let out = sgd_adapt(&[Var::param(Tensor::vector(&[0.0]))], &mut quad(&[2.0]), 0.5, 1, false).unwrap();
        assert!((out[0].item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_loss_keeps_theta() {
        let theta = Var::param(Tensor::vector(&[0.3, -1.0]));
        let out = sgd_adapt(&[theta.clone()], &mut |v| Ok(v[0].scale(0.0).sum().add_scalar(3.0)), 0.1, 5, false).unwrap();
        assert_eq!(out[0].value(), theta.value());
    }

    #[test]
    fn contraction_matches_closed_form() {
        let t = [1.5, -0.5, 2.0];
        let th0 = [0.2, 0.9, -3.0];
        let (beta, e) = (0.3, 7);
        let out = sgd_adapt(&[Var::param(Tensor::vector(&th0))], &mut quad(&t), beta, e, true).unwrap();
        for i in 0..3 {
            let expect = t[i] + (1.0f64 - beta).powi(e as i32) * (th0[i] - t[i]);
            assert!((out[0].value().data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn severed_trajectory_has_no_meta_gradient() {
        let theta = Var::param(Tensor::vector(&[0.5, 0.5]));
        let out = sgd_adapt(&[theta.clone()], &mut quad(&[1.0, 2.0]), 0.2, 3, false).unwrap();
        let g = grad(&out[0].sum(), &[theta.clone()], false).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
        let out = sgd_adapt(&[theta.clone()], &mut quad(&[1.0, 2.0]), 0.2, 3, true).unwrap();
        let g = grad(&out[0].sum(), &[theta], false).unwrap();
        assert!((g[0].value().data()[0] - 0.8f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn invalid_lr_is_rejected() {
        assert!(sgd_adapt(&[Var::param(Tensor::vector(&[0.0]))], &mut quad(&[1.0]), 0.0, 1, false).is_err());
    }

    #[test]
    fn diverging_loss_is_reported() {
        let r = sgd_adapt(&[Var::param(Tensor::vector(&[1.0]))], &mut |v| Ok(v[0].square().sum().scale(1e300)), 1e10, 3, false);
        assert!(matches!(r, Err(Error::AdaptationDiverged(_))));
    }

    #[test]
    fn candidate_validation() {
        assert!(PolicyCandidate::adaptive(PolicyKind::ReFt, 0.0, 10, Strength::Strong).is_err());
        assert!(PolicyCandidate::adaptive(PolicyKind::ReFt, 0.1, 0, Strength::Strong).is_err());
        assert!(PolicyCandidate::adaptive(PolicyKind::ReFix, 0.1, 10, Strength::Strong).is_err());
        let c = PolicyCandidate::weak(PolicyKind::PlFa);
        assert_eq!((c.lr(), c.steps(), c.label()), (0.01, 10, "PL_FA(0.01)".to_string()));
        assert_eq!(default_encoder_candidates().len(), 5);
        assert!(default_encoder_candidates().iter().all(|c| c.kind.is_encoder()));
        assert!(default_classifier_candidates().iter().all(|c| !c.kind.is_encoder()));
    }

    #[test]
    fn init_rules() {
        let shared = vec![Var::param(Tensor::vector(&[1.0, 2.0]))];
        let c = init_candidate_params(&PolicyCandidate::fixed(PolicyKind::ReFix).unwrap(), InitContext {
            shared: Some(&shared),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.params[0].value(), shared[0].value());
        assert_eq!(c.flow, GradientFlow::Alias);

        let ft = init_candidate_params(&PolicyCandidate::strong(PolicyKind::ReFt), InitContext {
            shared: Some(&shared),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(ft.params[0].value(), shared[0].value());
        assert_ne!(ft.params[0].id(), shared[0].id());

        let emb = Var::constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![3.0, 3.0]]).unwrap());
        let labels = [0, 0, 1];
        let di = init_candidate_params(&PolicyCandidate::fixed(PolicyKind::PlDi).unwrap(), InitContext {
            support: Some((&emb, &labels, 2)),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(di.params[0].value().data(), &[0.5, 0.5, 3.0, 3.0]);

        assert!(matches!(
            init_candidate_params(&PolicyCandidate::strong(PolicyKind::ReFa), InitContext::default()),
            Err(Error::StateMismatch(_))
        ));
        assert!(matches!(
            init_candidate_params(&PolicyCandidate::strong(PolicyKind::PlFt), InitContext {
                shared: Some(&shared),
                ..Default::default()
            }),
            Err(Error::StateMismatch(_))
        ));
        let w = vec![Var::param(Tensor::zeros(&[3, 2]))];
        assert!(matches!(
            init_candidate_params(&PolicyCandidate::strong(PolicyKind::PlFa), InitContext {
                own: Some(&w),
                support: Some((&emb, &labels, 2)),
                ..Default::default()
            }),
            Err(Error::StateMismatch(_))
        ));
    }

    #[test]
    fn persistent_state_kinds() {
        assert!(PersistentPolicyState::Online.matches(PolicyKind::ReFt));
        assert!(PersistentPolicyState::Online.matches(PolicyKind::PlFt));
        assert!(!PersistentPolicyState::Online.matches(PolicyKind::ReFa));
        assert!(PersistentPolicyState::Shared.matches(PolicyKind::ReFix));
        assert!(PersistentPolicyState::PrototypeInit(Tensor::zeros(&[1, 1])).matches(PolicyKind::PlFa));
    }

    #[test]
    fn score_examples() {
        let w = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let s = cosine_scores(&w, &Tensor::vector(&[3.0, 0.0]), 10.0).unwrap();
        assert!((s.data()[0] - 10.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
        let s2 = cosine_scores(&w, &Tensor::vector(&[6.0, 0.0]), 10.0).unwrap();
        assert_eq!(s, s2);
        assert!(matches!(cosine_scores(&w, &Tensor::vector(&[0.0, 0.0]), 10.0), Err(Error::DegenerateVector(_))));
        let z = Tensor::matrix(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(cosine_scores(&z, &Tensor::vector(&[1.0, 0.0]), 10.0), Err(Error::DegenerateVector(_))));

        let w = Tensor::matrix(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(negative_l2_scores(&w, &Tensor::vector(&[0.0, 0.0])).unwrap().data(), &[0.0, -25.0]);
        assert!(matches!(negative_l2_scores(&w, &Tensor::vector(&[0.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn network_scores_agree_with_tensor_scores() {
        let w = Tensor::matrix(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.5]]).unwrap();
        let v = Tensor::matrix(&[vec![0.1, 0.2, 0.3], vec![-2.0, 0.0, 1.0]]).unwrap();
        let cos = cosine_logits(&Var::constant(w.clone()), &Var::constant(v.clone()), 7.0).unwrap();
        let l2 = negative_l2_logits(&Var::constant(w.clone()), &Var::constant(v.clone())).unwrap();
        for q in 0..2 {
            let vq = v.select_rows(&[q]).unwrap().reshape(&[3]).unwrap();
            let a = cosine_scores(&w, &vq, 7.0).unwrap();
            let b = negative_l2_scores(&w, &vq).unwrap();
            for i in 0..2 {
                assert!((cos.value().data()[q * 2 + i] - a.data()[i]).abs() < 1e-9);
                assert!((l2.value().data()[q * 2 + i] - b.data()[i]).abs() < 1e-12);
            }
        }
    }
}
