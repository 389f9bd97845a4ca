//! Staged feature encoder and whole-training-set pretraining.

use std::sync::Arc;

use gradtape::{grad, nn, Tensor, Var, PAD};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tasks::{Dataset, Split};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockFamily {
    Dense,
    Conv,
}

fn default_kernel() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub block_family: BlockFamily,
    /// Shape of one input example: `[dim]` (dense) or `[h, w, c]` (conv).
    pub input_shape: Vec<usize>,
    /// Output width of each stage; the last entry is the embedding size.
    pub widths: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

impl EncoderConfig {
    pub fn dense(input_dim: usize, widths: Vec<usize>) -> Self {
        Self { block_family: BlockFamily::Dense, input_shape: vec![input_dim], widths, kernel: default_kernel() }
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().expect("validated: at least one stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("encoder needs at least one stage and non-zero widths".into()));
        }
        match (self.block_family, self.input_shape.as_slice()) {
            (BlockFamily::Dense, [d]) if *d > 0 => Ok(()),
            (BlockFamily::Conv, [h, w, c]) if *h > 0 && *w > 0 && *c > 0 => {
                if self.kernel % 2 == 0 {
                    Err(Error::Config("conv kernel size must be odd".into()))
                } else {
                    Ok(())
                }
            }
            (f, s) => Err(Error::Config(format!("input shape {s:?} does not suit {f:?} blocks"))),
        }
    }

    /// Per-example input shape of stage `l` (0-based).
    pub fn stage_input_shape(&self, l: usize) -> Vec<usize> {
        match self.block_family {
            BlockFamily::Dense => vec![if l == 0 { self.input_shape[0] } else { self.widths[l - 1] }],
            BlockFamily::Conv => {
                let (mut h, mut w) = (self.input_shape[0], self.input_shape[1]);
                for _ in 0..l {
                    (h, w) = pooled(h, w);
                }
                let c = if l == 0 { self.input_shape[2] } else { self.widths[l - 1] };
                vec![h, w, c]
            }
        }
    }

    /// Shapes of `[W, b, gain, bias]` for stage `l`.
    pub fn stage_param_shapes(&self, l: usize) -> Vec<Vec<usize>> {
        let fan_in = match self.block_family {
            BlockFamily::Dense => self.stage_input_shape(l)[0],
            BlockFamily::Conv => self.kernel * self.kernel * self.stage_input_shape(l)[2],
        };
        let out = self.widths[l];
        vec![vec![fan_in, out], vec![out], vec![out], vec![out]]
    }
}

fn pooled(h: usize, w: usize) -> (usize, usize) {
    if h >= 2 && w >= 2 {
        (h / 2, w / 2)
    } else {
        (h, w)
    }
}

/// Parameters of one stage: `[W, b, gain, bias]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub stage_index: usize,
    pub tensors: Vec<Tensor>,
}

impl StageParams {
    pub fn vars(&self, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if requires_grad { Var::param(t.clone()) } else { Var::constant(t.clone()) })
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self { stage_index: self.stage_index, tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }
}

/// Random initialization: scaled-normal weights, zero bias, unit gain.
pub fn init_stage(cfg: &EncoderConfig, l: usize, rng: &mut Rng) -> StageParams {
    let shapes = cfg.stage_param_shapes(l);
    let fan_in = shapes[0][0] as f64;
    let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("positive std");
    let w: Vec<f64> = (0..shapes[0].iter().product::<usize>()).map(|_| normal.sample(rng)).collect();
    StageParams {
        stage_index: l,
        tensors: vec![
            Tensor::new(shapes[0].clone(), w).expect("weight shape"),
            Tensor::zeros(&shapes[1]),
            Tensor::ones(&shapes[2]),
            Tensor::zeros(&shapes[3]),
        ],
    }
}

pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Vec<StageParams> {
    (0..cfg.num_stages()).map(|l| init_stage(cfg, l, rng)).collect()
}

fn check_params(cfg: &EncoderConfig, l: usize, params: &[Var]) -> Result<()> {
    let shapes = cfg.stage_param_shapes(l);
    if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
        return Err(Error::Shape(format!(
            "stage {l} expects parameter shapes {shapes:?}, got {:?}",
            params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Index map turning `[b, h, w, c]` into `[b*h*w, k*k*c]` patches with zero
/// padding at the borders.
fn im2col_index(b: usize, h: usize, w: usize, c: usize, k: usize) -> Arc<[usize]> {
    let r = (k / 2) as isize;
    let mut idx = Vec::with_capacity(b * h * w * k * k * c);
    for n in 0..b {
        for y in 0..h as isize {
            for x in 0..w as isize {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        let inside = yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
                        for ch in 0..c {
                            idx.push(if inside {
                                ((n * h + yy as usize) * w + xx as usize) * c + ch
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Index maps for the four corners of each 2x2 pooling window.
fn pool_indices(b: usize, h: usize, w: usize, c: usize) -> [Arc<[usize]>; 4] {
    let (ho, wo) = (h / 2, w / 2);
    let corner = |oy: usize, ox: usize| -> Arc<[usize]> {
        let mut idx = Vec::with_capacity(b * ho * wo * c);
        for n in 0..b {
            for y in 0..ho {
                for x in 0..wo {
                    for ch in 0..c {
                        idx.push(((n * h + 2 * y + oy) * w + 2 * x + ox) * c + ch);
                    }
                }
            }
        }
        idx.into()
    };
    [corner(0, 0), corner(0, 1), corner(1, 0), corner(1, 1)]
}

/// One stage `g_l(input; params)`.
pub fn forward_stage(cfg: &EncoderConfig, l: usize, params: &[Var], input: &Var) -> Result<Var> {
    check_params(cfg, l, params)?;
    let expected = cfg.stage_input_shape(l);
    let shape = input.shape();
    if shape.len() != expected.len() + 1 || shape[1..] != expected[..] {
        return Err(Error::Shape(format!("stage {l} expects [batch, {expected:?}], got {shape:?}")));
    }
    let (w, b, gain, bias) = (&params[0], &params[1], &params[2], &params[3]);
    match cfg.block_family {
        BlockFamily::Dense => {
            let h = input.matmul(w)?.add(b)?.tanh();
            Ok(nn::feature_norm(&h, gain, bias, NORM_EPS)?)
        }
        BlockFamily::Conv => {
            let (n, hh, ww, c) = (shape[0], shape[1], shape[2], shape[3]);
            let k = cfg.kernel;
            let cols = input.gather(im2col_index(n, hh, ww, c, k), &[n * hh * ww, k * k * c])?;
            let h = cols.matmul(w)?.add(b)?.tanh();
            let h = nn::feature_norm(&h, gain, bias, NORM_EPS)?;
            let out = cfg.widths[l];
            if hh >= 2 && ww >= 2 {
                let [a, bb, cc, d] = pool_indices(n, hh, ww, out);
                let shape = [n, hh / 2, ww / 2, out];
                let sum = h
                    .gather(a, &shape)?
                    .add(&h.gather(bb, &shape)?)?
                    .add(&h.gather(cc, &shape)?)?
                    .add(&h.gather(d, &shape)?)?;
                Ok(sum.scale(0.25))
            } else {
                Ok(h.reshape(&[n, hh, ww, out])?)
            }
        }
    }
}

/// Final pooling applied after the last stage: global average for conv
/// features, identity for dense ones.
pub fn pool_output(cfg: &EncoderConfig, x: &Var) -> Result<Var> {
    match cfg.block_family {
        BlockFamily::Dense => Ok(x.clone()),
        BlockFamily::Conv => {
            let s = x.shape();
            let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
            Ok(x.reshape(&[n, hw, c])?.mean_axis(1)?.reshape(&[n, c])?)
        }
    }
}

/// Embeds a batch: all stages in order, then the final pooling.
pub fn encode(cfg: &EncoderConfig, stages: &[Vec<Var>], inputs: &Var) -> Result<Var> {
    if stages.len() != cfg.num_stages() {
        return Err(Error::Shape(format!("{} stage parameter sets for {} stages", stages.len(), cfg.num_stages())));
    }
    let mut x = inputs.clone();
    for (l, p) in stages.iter().enumerate() {
        x = forward_stage(cfg, l, p, &x)?;
    }
    pool_output(cfg, &x)
}

/// Convenience wrapper over plain tensors.
pub fn encode_tensor(cfg: &EncoderConfig, stages: &[StageParams], inputs: &Tensor) -> Result<Tensor> {
    let vars: Vec<Vec<Var>> = stages.iter().map(|s| s.vars(false)).collect();
    Ok(encode(cfg, &vars, &Var::constant(inputs.clone()))?.value().clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self { steps: 500, batch_size: 64, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pretrained {
    pub stages: Vec<StageParams>,
    /// `[C, n_train_classes]` linear head used only during pretraining.
    pub head: Tensor,
    pub head_bias: Tensor,
    pub losses: Vec<f64>,
}

/// Standard cross-entropy classification over all training classes.
pub fn pretrain_backbone(
    dataset: &Dataset,
    cfg: &EncoderConfig,
    schedule: &PretrainSchedule,
    rng: &mut Rng,
) -> Result<Pretrained> {
    cfg.validate()?;
    if dataset.input_shape() != cfg.input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "dataset examples {:?} do not match encoder input {:?}",
            dataset.input_shape(),
            cfg.input_shape
        )));
    }
    let pool = dataset.split_examples(Split::Train);
    if pool.is_empty() {
        return Err(Error::InsufficientClasses { have: 0, need: 1 });
    }
    let n_classes = dataset.split_classes(Split::Train).len();
    let mut stages = init(cfg, rng);
    let c = cfg.embedding_dim();
    let normal = Normal::new(0.0, 1.0 / (c as f64).sqrt()).expect("positive std");
    let mut head =
        Tensor::new(vec![c, n_classes], (0..c * n_classes).map(|_| normal.sample(rng)).collect()).expect("head shape");
    let mut head_bias = Tensor::zeros(&[n_classes]);
    let mut opt = Adam::new(schedule.lr);
    let mut losses = Vec::with_capacity(schedule.steps);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = order.len();
    for step in 0..schedule.steps {
        let mut ids = Vec::with_capacity(schedule.batch_size);
        let mut labels = Vec::with_capacity(schedule.batch_size);
        while ids.len() < schedule.batch_size.min(pool.len()) {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let (id, y) = pool[order[cursor]];
            ids.push(id);
            labels.push(y);
            cursor += 1;
        }
        let x = Var::constant(dataset.stack(&ids));
        let stage_vars: Vec<Vec<Var>> = stages.iter().map(|s| s.vars(true)).collect();
        let hv = Var::param(head.clone());
        let hb = Var::param(head_bias.clone());
        let emb = encode(cfg, &stage_vars, &x)?;
        let loss = nn::cross_entropy(&emb.matmul(&hv)?.add(&hb)?, &labels)?;
        let l = loss.item();
        if !l.is_finite() {
            return Err(Error::TrainingDiverged(format!("pretraining loss {l} at step {step}")));
        }
        losses.push(l);
        let mut wrt: Vec<Var> = stage_vars.iter().flatten().cloned().collect();
        wrt.push(hv);
        wrt.push(hb);
        let grads: Vec<Tensor> = grad(&loss, &wrt, false)?.into_iter().map(|g| g.value().clone()).collect();
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::TrainingDiverged(format!("non-finite gradient at step {step}")));
        }
        let mut named: Vec<(String, &mut Tensor)> = Vec::new();
        for s in stages.iter_mut() {
            let l = s.stage_index;
            for (k, t) in s.tensors.iter_mut().enumerate() {
                named.push((format!("s{l}/{k}"), t));
            }
        }
        named.push(("head/w".into(), &mut head));
        named.push(("head/b".into(), &mut head_bias));
        let mut refs: Vec<(&str, &mut Tensor)> = named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        opt.step(&mut refs, &grads);
    }
    Ok(Pretrained { stages, head, head_bias, losses })
}

/// Accuracy of the pretraining classifier on the given split's examples.
pub fn head_accuracy(dataset: &Dataset, cfg: &EncoderConfig, pre: &Pretrained, split: Split) -> Result<f64> {
    let pool = dataset.split_examples(split);
    let ids: Vec<_> = pool.iter().map(|p| p.0).collect();
    let emb = encode_tensor(cfg, &pre.stages, &dataset.stack(&ids))?;
    let logits = emb.matmul(&pre.head)?.zip_with(&pre.head_bias, |a, b| a + b)?;
    let n = pre.head.shape()[1];
    let correct = pool
        .iter()
        .enumerate()
        .filter(|(i, (_, y))| argmax(&logits.data()[i * n..(i + 1) * n]) == *y)
        .count();
    Ok(correct as f64 / pool.len() as f64)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
