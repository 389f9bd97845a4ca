//! Episodic evaluation, multi-crop prediction, baseline presets and the
//! random-search baseline.

use std::fmt;
use std::str::FromStr;

use gradtape::{nn, Tensor, Var};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{self, EncoderConfig, StageParams};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::policyspace::{
    adapt_jointly, class_means, cosine_logits, negative_l2_logits, AdaptGroup, PersistentPolicyState, PolicyCandidate,
    PolicyKind, Strength,
};
use crate::rng::{self, Rng};
use crate::search::outer_step_theta;
use crate::supernet::{Slot, StageSearchSpace, Supernet};
use crate::tasks::{Episode, TaskDistribution};

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let c = logits.len() / n;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| encoder::argmax(&logits.data()[i * c..(i + 1) * c]) == y)
        .count();
    correct as f64 / n as f64
}

/// `1.96 * s / sqrt(n)` with the sample standard deviation.
pub fn ci95(accuracies: &[f64]) -> f64 {
    let n = accuracies.len();
    // exact zero for constant inputs; the mean of equal floats can drift
    if n < 2 || accuracies.iter().all(|&a| a == accuracies[0]) {
        return 0.0;
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

/// Anything that classifies an episode's queries after looking at its
/// support set.
pub trait EpisodicModel {
    fn describe(&self) -> String;
    fn input_shape(&self) -> &[usize];
    /// Query logits `[|Q|, N]`.
    fn predict(&self, episode: &Episode) -> Result<Tensor>;
    fn state_hash(&self) -> String;
}

impl EpisodicModel for Supernet {
    fn describe(&self) -> String {
        self.stages
            .iter()
            .map(|s| s.slots.iter().map(|x| x.candidate.label()).collect::<Vec<_>>().join("|"))
            .collect::<Vec<_>>()
            .join(" + ")
    }

    fn input_shape(&self) -> &[usize] {
        &self.encoder.input_shape
    }

    fn predict(&self, episode: &Episode) -> Result<Tensor> {
        Supernet::predict(self, episode, None)
    }

    fn state_hash(&self) -> String {
        Supernet::state_hash(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Cosine,
    NegativeL2,
}

/// How support examples become class scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Score against class-mean prototypes.
    ClassMean,
    /// Score against every support example, then average per class.
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePolicy {
    pub candidate: PolicyCandidate,
    /// Stage store for RE_FIX/RE_FT, meta-learned copy for RE_FA.
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierPolicy {
    pub candidate: PolicyCandidate,
    /// `W_init` of PL_FA.
    pub prototype_init: Option<Tensor>,
}

/// One concrete policy per stage, evaluated without the mixture machinery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub name: String,
    pub encoder: EncoderConfig,
    pub n_way: usize,
    pub tau: f64,
    pub stages: Vec<StagePolicy>,
    pub classifier: ClassifierPolicy,
    pub metric: Metric,
    pub fusion: Fusion,
}

/// Support-set losses around the inner loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationLosses {
    pub before: f64,
    pub after: f64,
}

struct Adapted {
    encoder: Vec<Vec<Var>>,
    /// Prototypes for adaptive classifiers; `None` means derive from support.
    prototypes: Option<Var>,
    first_loss: Option<f64>,
}

impl PolicyModel {
    /// Reads the single candidate of every stage of `net`.
    pub fn from_supernet(net: &Supernet, name: &str) -> Result<Self> {
        let m = net.num_encoder_stages();
        let mut stages = Vec::with_capacity(m);
        for st in &net.stages[..m] {
            let slot = single_slot(st)?;
            let params = match (&slot.state, slot.candidate.kind) {
                (PersistentPolicyState::Meta(ts), PolicyKind::ReFa) => ts.clone(),
                (_, PolicyKind::ReFix | PolicyKind::ReFt) => {
                    st.shared.as_ref().ok_or_else(|| Error::StateMismatch(format!("stage {} has no store", st.stage_index)))?.tensors.clone()
                }
                (s, k) => return Err(Error::StateMismatch(format!("{k} with state {s:?}"))),
            };
            stages.push(StagePolicy { candidate: slot.candidate.clone(), params });
        }
        let slot = single_slot(&net.stages[m])?;
        let prototype_init = match &slot.state {
            PersistentPolicyState::PrototypeInit(w) => Some(w.clone()),
            _ => None,
        };
        Ok(Self {
            name: name.to_string(),
            encoder: net.encoder.clone(),
            n_way: net.n_way,
            tau: net.tau,
            stages,
            classifier: ClassifierPolicy { candidate: slot.candidate.clone(), prototype_init },
            metric: Metric::Cosine,
            fusion: Fusion::ClassMean,
        })
    }

    /// Single-candidate supernet holding the same parameters, every stage
    /// marked decided. Only cosine class-mean models have one.
    pub fn to_supernet(&self) -> Result<Supernet> {
        if self.metric != Metric::Cosine || self.fusion != Fusion::ClassMean {
            return Err(Error::Config(format!("{} has no mixture form", self.name)));
        }
        let mut spaces = Vec::with_capacity(self.stages.len() + 1);
        for (l, sp) in self.stages.iter().enumerate() {
            let store = StageParams { stage_index: l, tensors: sp.params.clone() };
            let (shared, state) = match sp.candidate.kind {
                PolicyKind::ReFix => (Some(store), PersistentPolicyState::Shared),
                PolicyKind::ReFt => (Some(store), PersistentPolicyState::Online),
                _ => (None, PersistentPolicyState::Meta(sp.params.clone())),
            };
            spaces.push(StageSearchSpace {
                stage_index: l,
                shared,
                slots: vec![Slot { id: l, candidate: sp.candidate.clone(), state }],
                logits: Tensor::zeros(&[1]),
                decoded: true,
            });
        }
        let state = match &self.classifier.prototype_init {
            Some(w) => PersistentPolicyState::PrototypeInit(w.clone()),
            None => PersistentPolicyState::Online,
        };
        let m = self.stages.len();
        spaces.push(StageSearchSpace {
            stage_index: m,
            shared: None,
            slots: vec![Slot { id: m, candidate: self.classifier.candidate.clone(), state }],
            logits: Tensor::zeros(&[1]),
            decoded: true,
        });
        Supernet::from_stages(self.encoder.clone(), self.n_way, self.tau, spaces)
    }

    pub fn composition(&self) -> Vec<PolicyCandidate> {
        self.stages.iter().map(|s| s.candidate.clone()).chain(std::iter::once(self.classifier.candidate.clone())).collect()
    }

    fn scores(&self, protos: &Var, support: Option<(&Var, &[usize], usize)>, queries: &Var) -> Result<Var> {
        let raw = |w: &Var| -> Result<Var> {
            match self.metric {
                Metric::Cosine => cosine_logits(w, queries, self.tau),
                Metric::NegativeL2 => negative_l2_logits(w, queries),
            }
        };
        match (self.fusion, support) {
            (Fusion::PerSample, Some((emb, labels, n))) => {
                let per = raw(emb)?;
                let mut counts = vec![0.0; n];
                labels.iter().for_each(|&y| counts[y] += 1.0);
                let mut avg = vec![0.0; labels.len() * n];
                for (s, &y) in labels.iter().enumerate() {
                    avg[s * n + y] = 1.0 / counts[y];
                }
                Ok(per.matmul(&Var::constant(Tensor::new(vec![labels.len(), n], avg)?))?)
            }
            _ => raw(protos),
        }
    }

    fn adapt(&self, episode: &Episode) -> Result<Adapted> {
        let c = self.encoder.embedding_dim();
        let n = episode.n_way;
        let mut params: Vec<Vec<Var>> = Vec::with_capacity(self.stages.len());
        let mut groups = Vec::new();
        let mut owners = Vec::new();
        for (l, sp) in self.stages.iter().enumerate() {
            let adapts = sp.candidate.kind.adapts();
            let vars: Vec<Var> =
                sp.params.iter().map(|t| if adapts { Var::param(t.clone()) } else { Var::constant(t.clone()) }).collect();
            if adapts {
                groups.push(AdaptGroup { vars: vars.clone(), lr: sp.candidate.lr(), steps: sp.candidate.steps(), retain: false });
                owners.push(Some(l));
            }
            params.push(vars);
        }
        let cls = &self.classifier.candidate;
        match cls.kind {
            PolicyKind::PlFt => {
                groups.push(AdaptGroup { vars: vec![Var::param(Tensor::zeros(&[n, c]))], lr: cls.lr(), steps: cls.steps(), retain: false });
                owners.push(None);
            }
            PolicyKind::PlFa => {
                let w = self.classifier.prototype_init.as_ref().ok_or_else(|| Error::StateMismatch("PL_FA without W_init".into()))?;
                if w.shape() != [n, c] {
                    return Err(Error::StateMismatch(format!("W_init {:?} for a {n}-way episode", w.shape())));
                }
                groups.push(AdaptGroup { vars: vec![Var::param(w.clone())], lr: cls.lr(), steps: cls.steps(), retain: false });
                owners.push(None);
            }
            _ => {}
        }
        if groups.is_empty() {
            return Ok(Adapted { encoder: params, prototypes: None, first_loss: None });
        }

        let sx = Var::constant(episode.support_x.clone());
        let labels = &episode.support_y;
        let mut w0: Option<Var> = None;
        let mut first_loss = None;
        let base = params.clone();
        let mut loss_fn = |cur: &[Vec<Var>], t: usize| -> Result<Var> {
            let mut p = base.clone();
            let mut cls_cur = None;
            for (g, owner) in owners.iter().enumerate() {
                match owner {
                    Some(l) => p[*l] = cur[g].clone(),
                    None => cls_cur = Some(cur[g][0].clone()),
                }
            }
            let emb = encoder::encode(&self.encoder, &p, &sx)?;
            let protos = match cls.kind {
                PolicyKind::PlFt => {
                    if t == 0 {
                        w0 = Some(class_means(&emb, labels, n)?);
                    }
                    w0.as_ref().expect("step 0 ran").add(cls_cur.as_ref().expect("classifier group"))?
                }
                PolicyKind::PlFa => cls_cur.expect("classifier group"),
                _ => class_means(&emb, labels, n)?,
            };
            let scores = self.scores(&protos, Some((&emb, labels, n)), &emb)?;
            let loss = nn::cross_entropy(&scores, labels)?;
            if t == 0 {
                first_loss = Some(loss.item());
            }
            Ok(loss)
        };
        let out = adapt_jointly(groups, &mut loss_fn)?;
        let mut prototypes = None;
        for (g, owner) in owners.iter().enumerate() {
            match owner {
                Some(l) => params[*l] = out[g].iter().map(Var::detach).collect(),
                None => {
                    let w = match &w0 {
                        Some(base) => base.add(&out[g][0])?,
                        None => out[g][0].clone(),
                    };
                    prototypes = Some(w.detach());
                }
            }
        }
        Ok(Adapted { encoder: params, prototypes, first_loss })
    }

    fn support_loss(&self, adapted: &Adapted, episode: &Episode) -> Result<f64> {
        let emb = encoder::encode(&self.encoder, &adapted.encoder, &Var::constant(episode.support_x.clone()))?;
        let protos = match &adapted.prototypes {
            Some(w) => w.clone(),
            None => class_means(&emb, &episode.support_y, episode.n_way)?,
        };
        let scores = self.scores(&protos, Some((&emb, &episode.support_y, episode.n_way)), &emb)?;
        Ok(nn::cross_entropy(&scores, &episode.support_y)?.item())
    }

    /// Support loss before and after the inner loop.
    pub fn adaptation_losses(&self, episode: &Episode) -> Result<AdaptationLosses> {
        let adapted = self.adapt(episode)?;
        let after = self.support_loss(&adapted, episode)?;
        let before = match adapted.first_loss {
            Some(l) => l,
            None => after,
        };
        Ok(AdaptationLosses { before, after })
    }
}

fn single_slot(st: &StageSearchSpace) -> Result<&Slot> {
    match st.slots.as_slice() {
        [s] => Ok(s),
        _ => Err(Error::StateMismatch(format!("stage {} holds {} candidates", st.stage_index, st.slots.len()))),
    }
}

impl EpisodicModel for PolicyModel {
    fn describe(&self) -> String {
        let parts: Vec<String> = self.composition().iter().map(|c| c.label()).collect();
        format!("{}: {}", self.name, parts.join(" + "))
    }

    fn input_shape(&self) -> &[usize] {
        &self.encoder.input_shape
    }

    fn predict(&self, episode: &Episode) -> Result<Tensor> {
        let adapted = self.adapt(episode)?;
        let q = encoder::encode(&self.encoder, &adapted.encoder, &Var::constant(episode.query_x.clone()))?;
        let (protos, support) = match &adapted.prototypes {
            Some(w) => (w.clone(), None),
            None => {
                let s = encoder::encode(&self.encoder, &adapted.encoder, &Var::constant(episode.support_x.clone()))?;
                (class_means(&s, &episode.support_y, episode.n_way)?, Some(s))
            }
        };
        let scores = self.scores(&protos, support.as_ref().map(|s| (s, episode.support_y.as_slice(), episode.n_way)), &q)?;
        Ok(scores.value().clone())
    }

    fn state_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("policy model serializes")))
    }
}

// ---------------------------------------------------------------- multi-crop

/// Paper-standard number of test-time views.
pub const DEFAULT_VIEWS: usize = 10;
/// Side of a crop relative to the image.
pub const CROP_SCALE: f64 = 0.875;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    Center,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ViewTransform {
    Identity,
    /// Crop a `scale`-sized window at `anchor`, resize back, optionally
    /// mirror horizontally.
    Crop { scale: f64, anchor: Anchor, flip: bool },
}

/// Five crops, each with and without mirroring, cycled to `n` views.
pub fn default_views(n: usize) -> Vec<ViewTransform> {
    let anchors = [Anchor::Center, Anchor::TopLeft, Anchor::TopRight, Anchor::BottomLeft, Anchor::BottomRight];
    let ten: Vec<ViewTransform> = [false, true]
        .iter()
        .flat_map(|&flip| anchors.iter().map(move |&anchor| ViewTransform::Crop { scale: CROP_SCALE, anchor, flip }))
        .collect();
    ten.iter().cycle().take(n).copied().collect()
}

impl ViewTransform {
    /// Applies the view to one HWC image.
    pub fn apply(&self, img: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
        let (scale, anchor, flip) = match *self {
            ViewTransform::Identity => return img.to_vec(),
            ViewTransform::Crop { scale, anchor, flip } => (scale, anchor, flip),
        };
        let ch = (h as f64 * scale).max(1.0);
        let cw = (w as f64 * scale).max(1.0);
        let (y0, x0) = match anchor {
            Anchor::Center => ((h as f64 - ch) / 2.0, (w as f64 - cw) / 2.0),
            Anchor::TopLeft => (0.0, 0.0),
            Anchor::TopRight => (0.0, w as f64 - cw),
            Anchor::BottomLeft => (h as f64 - ch, 0.0),
            Anchor::BottomRight => (h as f64 - ch, w as f64 - cw),
        };
        let at = |y: usize, x: usize, k: usize| img[(y * w + x) * c + k];
        let mut out = vec![0.0; h * w * c];
        for i in 0..h {
            // pixel-centre sampling inside the window, bilinear
            let sy = (y0 + (i as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (ya, fy) = (sy.floor() as usize, sy - sy.floor());
            let yb = (ya + 1).min(h - 1);
            for j in 0..w {
                let jj = if flip { w - 1 - j } else { j };
                let sx = (x0 + (jj as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (xa, fx) = (sx.floor() as usize, sx - sx.floor());
                let xb = (xa + 1).min(w - 1);
                for k in 0..c {
                    let top = at(ya, xa, k) * (1.0 - fx) + at(ya, xb, k) * fx;
                    let bot = at(yb, xa, k) * (1.0 - fx) + at(yb, xb, k) * fx;
                    out[(i * w + j) * c + k] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }
}

/// Mean query logits over `views` of the query images.
pub fn multicrop_predict(model: &dyn EpisodicModel, episode: &Episode, views: &[ViewTransform]) -> Result<Tensor> {
    if views.is_empty() {
        return Err(Error::Config("multi-crop needs at least one view".into()));
    }
    let (h, w, c) = match *model.input_shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::UnsupportedInput(format!("multi-crop needs HWC images, inputs are {s:?}"))),
    };
    let per = h * w * c;
    let mut sum: Option<Tensor> = None;
    for view in views {
        let data: Vec<f64> = episode.query_x.data().chunks(per).flat_map(|img| view.apply(img, h, w, c)).collect();
        let mut ep = episode.clone();
        ep.query_x = Tensor::new(episode.query_x.shape().to_vec(), data)?;
        let logits = model.predict(&ep)?;
        sum = Some(match sum {
            Some(s) => s.add_same(&logits)?,
            None => logits,
        });
    }
    let k = views.len() as f64;
    Ok(sum.expect("at least one view").map(|v| v / k))
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_query: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub policy: String,
    pub config_hash: String,
    pub seed: u64,
    pub n_way: usize,
    pub k_shot: usize,
    pub multicrop: bool,
    /// Episodes requested.
    pub n_episodes: usize,
    /// Episodes whose adaptation failed; excluded from the statistics.
    pub failed: usize,
    /// Accuracies of the successful episodes, in episode order.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci95: f64,
}

impl EvalReport {
    pub fn from_accuracies(policy: &str, config_hash: &str, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len();
        let mean = if n == 0 { 0.0 } else { accuracies.iter().sum::<f64>() / n as f64 };
        Self {
            policy: policy.to_string(),
            config_hash: config_hash.to_string(),
            seed: 0,
            n_way: 0,
            k_shot: 0,
            multicrop: false,
            n_episodes: n,
            failed: 0,
            ci95: ci95(&accuracies),
            accuracies,
            mean_accuracy: mean,
        }
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("report serializes")))
    }

    /// Field names of the serialized record.
    pub const FIELDS: [&'static str; 11] = [
        "policy",
        "config_hash",
        "seed",
        "n_way",
        "k_shot",
        "multicrop",
        "n_episodes",
        "failed",
        "accuracies",
        "mean_accuracy",
        "ci95",
    ];
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub config_hash: String,
    /// Multi-crop views; `None` evaluates plain.
    pub views: Option<Vec<ViewTransform>>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub episodes: Vec<EpisodeRecord>,
}

fn is_adaptation_failure(e: &Error) -> bool {
    matches!(e, Error::AdaptationDiverged(_) | Error::Numeric(_) | Error::DegenerateVector(_))
}

/// Evaluates `n_episodes` tasks; episode `i` comes from the stream
/// `("eval", i)` of `seed`.
pub fn evaluate(
    model: &dyn EpisodicModel,
    dist: &TaskDistribution,
    n_episodes: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut records = Vec::with_capacity(n_episodes);
    let mut failed = 0;
    for i in 0..n_episodes {
        let ep = dist.sample(&mut rng::stream(seed, "eval", i as u64))?;
        let logits = match &opts.views {
            Some(v) => multicrop_predict(model, &ep, v),
            None => model.predict(&ep),
        };
        let logits = match logits {
            Ok(l) => l,
            Err(e) if is_adaptation_failure(&e) => {
                log::warn!("episode {i} failed: {e}");
                failed += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let acc = accuracy(&logits, &ep.query_y);
        let n_query = ep.query_y.len();
        records.push(EpisodeRecord { episode: i, accuracy: acc, n_correct: (acc * n_query as f64).round() as usize, n_query });
    }
    if records.is_empty() {
        return Err(Error::Numeric(format!("all {n_episodes} evaluation episodes failed")));
    }
    let accuracies: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let mut report = EvalReport::from_accuracies(&model.describe(), &opts.config_hash, accuracies);
    report.seed = seed;
    report.n_way = dist.shape.n_way;
    report.k_shot = dist.shape.k_shot;
    report.multicrop = opts.views.is_some();
    report.n_episodes = n_episodes;
    report.failed = failed;
    Ok(Evaluation { report, episodes: records })
}

// ---------------------------------------------------------------- presets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselinePreset {
    Protonet,
    Matchnet,
    Maml,
    Baselinepp,
    Finetune,
    Random,
}

impl BaselinePreset {
    pub const ALL: [BaselinePreset; 6] = [
        BaselinePreset::Protonet,
        BaselinePreset::Matchnet,
        BaselinePreset::Maml,
        BaselinePreset::Baselinepp,
        BaselinePreset::Finetune,
        BaselinePreset::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselinePreset::Protonet => "protonet",
            BaselinePreset::Matchnet => "matchnet",
            BaselinePreset::Maml => "maml",
            BaselinePreset::Baselinepp => "baselinepp",
            BaselinePreset::Finetune => "finetune",
            BaselinePreset::Random => "random",
        }
    }

    /// Inner learning rates tried; empty for presets without an inner loop.
    pub fn learning_rates(self) -> &'static [f64] {
        match self {
            BaselinePreset::Maml | BaselinePreset::Baselinepp | BaselinePreset::Finetune => &[0.01, 0.1],
            _ => &[],
        }
    }

    /// Whether the preset's persistent parameters are meta-trained.
    pub fn is_meta_trained(self) -> bool {
        self == BaselinePreset::Maml
    }
}

impl fmt::Display for BaselinePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselinePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

/// Classifier fine-tuning iterations of baselinepp and finetune.
pub const PRESET_FINETUNE_STEPS: usize = 100;
/// Inner steps of the MAML preset.
pub const MAML_INNER_STEPS: usize = 10;

/// Pretrained encoder plus episode geometry shared by every preset.
#[derive(Debug, Clone)]
pub struct PresetContext {
    pub encoder: EncoderConfig,
    pub pretrained: Vec<StageParams>,
    pub n_way: usize,
    pub tau: f64,
}

fn strength_of(lr: f64) -> Strength {
    if lr >= 0.1 {
        Strength::Strong
    } else {
        Strength::Weak
    }
}

/// Builds a model from one candidate per stage. RE_FIX/RE_FT stages read the
/// pretrained weights; RE_FA copies them; PL_FA draws `W_init`.
pub fn compose_policy(
    ctx: &PresetContext,
    name: &str,
    encoder_stages: &[PolicyCandidate],
    classifier: &PolicyCandidate,
    rng: &mut Rng,
) -> Result<PolicyModel> {
    let lists: Vec<Vec<PolicyCandidate>> = encoder_stages.iter().map(|c| vec![c.clone()]).collect();
    let net = Supernet::new(
        ctx.encoder.clone(),
        &ctx.pretrained,
        &lists,
        std::slice::from_ref(classifier),
        ctx.n_way,
        ctx.tau,
        rng,
    )?;
    PolicyModel::from_supernet(&net, name)
}

/// The preset's model at inner learning rate `lr` (ignored by presets
/// without an inner loop). `Random` draws one composition from `space`.
pub fn preset_policy(
    preset: BaselinePreset,
    ctx: &PresetContext,
    lr: f64,
    space: &SearchSpace,
    rng: &mut Rng,
) -> Result<PolicyModel> {
    let m = ctx.encoder.num_stages();
    let fixed = |k| PolicyCandidate::fixed(k);
    let adaptive = |k, steps| PolicyCandidate::adaptive(k, lr, steps, strength_of(lr));
    let name = preset.name();
    let mut model = match preset {
        BaselinePreset::Protonet | BaselinePreset::Matchnet => {
            compose_policy(ctx, name, &vec![fixed(PolicyKind::ReFix)?; m], &fixed(PolicyKind::PlDi)?, rng)?
        }
        BaselinePreset::Maml => compose_policy(
            ctx,
            name,
            &vec![adaptive(PolicyKind::ReFa, MAML_INNER_STEPS)?; m],
            &adaptive(PolicyKind::PlFa, MAML_INNER_STEPS)?,
            rng,
        )?,
        BaselinePreset::Baselinepp => compose_policy(
            ctx,
            name,
            &vec![fixed(PolicyKind::ReFix)?; m],
            &adaptive(PolicyKind::PlFa, PRESET_FINETUNE_STEPS)?,
            rng,
        )?,
        BaselinePreset::Finetune => compose_policy(
            ctx,
            name,
            &vec![adaptive(PolicyKind::ReFt, PRESET_FINETUNE_STEPS)?; m],
            &adaptive(PolicyKind::PlFt, PRESET_FINETUNE_STEPS)?,
            rng,
        )?,
        BaselinePreset::Random => {
            let (enc, cls) = space.sample(m, rng)?;
            compose_policy(ctx, name, &enc, &cls, rng)?
        }
    };
    match preset {
        BaselinePreset::Protonet => model.metric = Metric::NegativeL2,
        BaselinePreset::Matchnet => model.fusion = Fusion::PerSample,
        _ => {}
    }
    Ok(model)
}

/// Outer training of a policy's persistent parameters on first-distribution
/// episodes, through its single-candidate supernet form.
pub fn train_policy(
    model: &PolicyModel,
    dist_a: &TaskDistribution,
    iterations: usize,
    outer_lr: f64,
    clip_norm: f64,
    seed: u64,
    stream: &str,
) -> Result<PolicyModel> {
    let mut net = model.to_supernet()?;
    let mut opt = Adam::new(outer_lr);
    for t in 0..iterations {
        let ep = dist_a.sample(&mut rng::stream(seed, stream, t as u64))?;
        outer_step_theta(&mut net, &ep, &mut opt, clip_norm)?;
    }
    let mut out = PolicyModel::from_supernet(&net, &model.name)?;
    out.metric = model.metric;
    out.fusion = model.fusion;
    Ok(out)
}

/// Candidate rosters the random baseline samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub encoder: Vec<PolicyCandidate>,
    pub classifier: Vec<PolicyCandidate>,
}

impl SearchSpace {
    /// Classifier candidates eligible for random sampling: PL_FA with the
    /// weak rate is left out.
    pub fn sampleable_classifiers(&self) -> Vec<&PolicyCandidate> {
        self.classifier.iter().filter(|c| !(c.kind == PolicyKind::PlFa && c.strength == Strength::Weak)).collect()
    }

    /// One uniform draw per stage.
    pub fn sample(&self, m: usize, rng: &mut Rng) -> Result<(Vec<PolicyCandidate>, PolicyCandidate)> {
        let enc = (0..m)
            .map(|_| self.encoder.choose(rng).cloned().ok_or_else(|| Error::Config("empty encoder roster".into())))
            .collect::<Result<Vec<_>>>()?;
        let cls = self
            .sampleable_classifiers()
            .choose(rng)
            .map(|c| (*c).clone())
            .ok_or_else(|| Error::Config("no sampleable classifier candidate".into()))?;
        Ok((enc, cls))
    }
}

/// Budget shared by every trained baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub iterations: usize,
    pub outer_lr: f64,
    pub clip_norm: f64,
}

/// Default number of sampled models.
pub const RANDOM_SEARCH_MODELS: usize = 10;

#[derive(Debug, Clone)]
pub struct RandomSearchResult {
    pub models: Vec<(Vec<PolicyCandidate>, EvalReport)>,
    pub mean_accuracy: f64,
}

/// Samples `n_models` compositions, trains each on the first distribution
/// with the same budget, evaluates each on the test distribution.
#[allow(clippy::too_many_arguments)]
pub fn random_search_baseline(
    ctx: &PresetContext,
    space: &SearchSpace,
    n_models: usize,
    dist_a: &TaskDistribution,
    dist_test: &TaskDistribution,
    budget: TrainBudget,
    eval_episodes: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<RandomSearchResult> {
    if n_models == 0 {
        return Err(Error::Config("random search needs at least one model".into()));
    }
    let mut models = Vec::with_capacity(n_models);
    for i in 0..n_models {
        let mut r = rng::stream(seed, "random-search", i as u64);
        let model = preset_policy(BaselinePreset::Random, ctx, 0.0, space, &mut r)?;
        let model = train_policy(&model, dist_a, budget.iterations, budget.outer_lr, budget.clip_norm, seed, &format!("random-search/train/{i}"))?;
        let ev = evaluate(&model, dist_test, eval_episodes, seed, opts)?;
        log::info!("random model {i}: {} -> {:.4}", model.describe(), ev.report.mean_accuracy);
        models.push((model.composition(), ev.report));
    }
    let mean_accuracy = models.iter().map(|(_, r)| r.mean_accuracy).sum::<f64>() / n_models as f64;
    Ok(RandomSearchResult { models, mean_accuracy })
}

/// Picks the inner learning rate with the best validation accuracy and
/// returns the (trained, for meta-trained presets) model.
#[allow(clippy::too_many_arguments)]
pub fn fit_preset(
    preset: BaselinePreset,
    ctx: &PresetContext,
    space: &SearchSpace,
    dist_a: &TaskDistribution,
    dist_val: &TaskDistribution,
    budget: TrainBudget,
    val_episodes: usize,
    seed: u64,
) -> Result<(PolicyModel, Option<f64>)> {
    let lrs = preset.learning_rates();
    let build = |lr: f64| -> Result<PolicyModel> {
        let mut r = rng::stream(seed, &format!("preset/{preset}"), 0);
        let model = preset_policy(preset, ctx, lr, space, &mut r)?;
        if preset.is_meta_trained() || preset == BaselinePreset::Random {
            train_policy(&model, dist_a, budget.iterations, budget.outer_lr, budget.clip_norm, seed, &format!("preset/{preset}/train"))
        } else {
            Ok(model)
        }
    };
    if lrs.is_empty() {
        return Ok((build(0.0)?, None));
    }
    let mut best: Option<(PolicyModel, f64, f64)> = None;
    for &lr in lrs {
        let model = build(lr)?;
        let acc = evaluate(&model, dist_val, val_episodes, seed, &EvalOptions::default())?.report.mean_accuracy;
        log::info!("{preset} lr {lr}: validation {acc:.4}");
        if best.as_ref().is_none_or(|b| acc > b.2) {
            best = Some((model, lr, acc));
        }
    }
    let (model, lr, _) = best.expect("at least one rate");
    Ok((model, Some(lr)))
}
