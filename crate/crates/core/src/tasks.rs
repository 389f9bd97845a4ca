//! Datasets, class splits, synthetic task families and N-way K-shot episodes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gradtape::Tensor;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Default number of query examples per class.
pub const DEFAULT_QUERIES_PER_CLASS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn slot(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// Which task distribution an episode came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceTag {
    A,
    B,
    Test,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SourceTag::A => "A",
            SourceTag::B => "B",
            SourceTag::Test => "test",
        };
        f.write_str(s)
    }
}

/// Class-name lists for the three splits. Read from / written to the split
/// file format (`train`, `val`, `test` keys).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSplits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl ClassSplits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty() && self.test.is_empty()
    }

    /// Parses the split-file format.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("split file: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingClass(format!("split file {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Returns the first class name shared by two splits, if any.
    pub fn overlap(&self) -> Option<String> {
        let mut seen = HashSet::new();
        for split in Split::ALL {
            let mut local = HashSet::new();
            for c in self.get(split) {
                if !local.insert(c) {
                    continue;
                }
                if !seen.insert(c.clone()) {
                    return Some(c.clone());
                }
            }
        }
        None
    }

    /// Synthetic class names `class_000 ..`, split consecutively.
    pub fn consecutive(train: usize, val: usize, test: usize) -> Self {
        let name = |i: usize| format!("class_{i:03}");
        Self {
            train: (0..train).map(name).collect(),
            val: (train..train + val).map(name).collect(),
            test: (train + val..train + val + test).map(name).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    GaussianClusters,
    DomainShiftedGaussian,
    RingClusters,
}

/// Distortion applied to target-domain examples of the domain-shifted
/// family: `x' = scale ⊙ (x + mix · R x) + mean_shift · u`, with `R`, `u`
/// and the per-feature `scale = exp(scale_jitter · z)` fixed by the seed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftParams {
    pub mean_shift: f64,
    pub scale_jitter: f64,
    pub mix: f64,
}

impl ShiftParams {
    pub fn is_zero(&self) -> bool {
        self.mean_shift == 0.0 && self.scale_jitter == 0.0 && self.mix == 0.0
    }
}

fn default_examples_per_class() -> usize {
    40
}

/// Descriptor of a generated class pool. Every example is a pure function of
/// `(family, class id, example index, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFamily {
    pub kind: SyntheticKind,
    pub dim: usize,
    pub class_pool_size: usize,
    pub noise_scale: f64,
    #[serde(default)]
    pub shift_params: ShiftParams,
    pub seed: u64,
    #[serde(default = "default_examples_per_class")]
    pub examples_per_class: usize,
}

/// Which side of a domain shift a generated pool lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

struct Distortion {
    scale: Vec<f64>,
    mix: Vec<f64>, // dim x dim, row-major
    offset: Vec<f64>,
    mix_weight: f64,
}

impl Distortion {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|i| {
                let rx: f64 = (0..d).map(|j| self.mix[i * d + j] * x[j]).sum();
                self.scale[i] * (x[i] + self.mix_weight * rx) + self.offset[i]
            })
            .collect()
    }
}

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl SyntheticFamily {
    fn domain_salt(domain: Domain) -> u64 {
        match domain {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    fn class_rng(&self, domain: Domain, class: usize) -> Rng {
        rng::stream(self.seed ^ Self::domain_salt(domain).wrapping_mul(0x9e37_79b9), "class", class as u64)
    }

    /// Centre of a class (before any domain distortion).
    pub fn class_mean(&self, domain: Domain, class: usize) -> Vec<f64> {
        normal_vec(&mut self.class_rng(domain, class), self.dim)
    }

    fn distortion(&self) -> Distortion {
        let d = self.dim;
        let mut r = rng::stream(self.seed, "domain-shift", 0);
        let z = normal_vec(&mut r, d);
        let scale = z.iter().map(|v| (self.shift_params.scale_jitter * v).exp()).collect();
        let mix = normal_vec(&mut r, d * d).into_iter().map(|v| v / (d as f64).sqrt()).collect();
        let u = normal_vec(&mut r, d);
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let offset = u.iter().map(|v| self.shift_params.mean_shift * v / n).collect();
        Distortion { scale, mix, offset, mix_weight: self.shift_params.mix }
    }

    /// Generates one example. Target-domain examples of the domain-shifted
    /// family carry the configured distortion.
    pub fn example(&self, domain: Domain, class: usize, index: usize) -> Vec<f64> {
        let mut crng = self.class_rng(domain, class);
        let mean = normal_vec(&mut crng, self.dim);
        let mut erng = rng::stream(
            self.seed ^ Self::domain_salt(domain).wrapping_mul(0x9e37_79b9),
            "example",
            ((class as u64) << 32) | index as u64,
        );
        let noise = normal_vec(&mut erng, self.dim);
        let mut x: Vec<f64> = match self.kind {
            SyntheticKind::GaussianClusters | SyntheticKind::DomainShiftedGaussian => mean
                .iter()
                .zip(&noise)
                .map(|(m, e)| m + self.noise_scale * e)
                .collect(),
            SyntheticKind::RingClusters => {
                // Points on a circle around the class centre, in a class-specific plane.
                let u = normal_vec(&mut crng, self.dim);
                let v = normal_vec(&mut crng, self.dim);
                let (u, v) = orthonormal_pair(&u, &v);
                let phi: f64 = erng.random_range(0.0..std::f64::consts::TAU);
                let radius = 1.0;
                (0..self.dim)
                    .map(|i| {
                        mean[i]
                            + radius * (phi.cos() * u[i] + phi.sin() * v[i])
                            + self.noise_scale * noise[i]
                    })
                    .collect()
            }
        };
        if domain == Domain::Target
            && self.kind == SyntheticKind::DomainShiftedGaussian
            && !self.shift_params.is_zero()
        {
            x = self.distortion().apply(&x);
        }
        x
    }

    /// Applies the target-domain distortion to an arbitrary point.
    pub fn distort(&self, x: &[f64]) -> Vec<f64> {
        self.distortion().apply(x)
    }
}

fn orthonormal_pair(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    let u: Vec<f64> = u.iter().map(|a| a / nu).collect();
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let w: Vec<f64> = v.iter().zip(&u).map(|(b, a)| b - dot * a).collect();
    let nw = w.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    (u, w.iter().map(|a| a / nw).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic { family: SyntheticFamily, domain: Domain },
    /// One subdirectory per class under `root`; splits come from `split_file`.
    ImageManifest { root: PathBuf, split_file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    /// Inline splits. Image manifests may leave this out and use their
    /// split file instead.
    #[serde(default, skip_serializing_if = "ClassSplits::is_empty")]
    pub class_splits: ClassSplits,
    /// Shape of one example: `[dim]` for vectors, `[h, w, c]` for images.
    pub input_shape: Vec<usize>,
    /// Minimum examples every listed class must provide (`k_shot + q` of the
    /// largest configured episode).
    pub min_examples_per_class: usize,
}

impl DatasetSpec {
    /// A synthetic pool with consecutive train/val/test class counts.
    pub fn synthetic(family: SyntheticFamily, domain: Domain, counts: (usize, usize, usize), min_examples: usize) -> Self {
        let input_shape = vec![family.dim];
        Self {
            source: DatasetSource::Synthetic { family, domain },
            class_splits: ClassSplits::consecutive(counts.0, counts.1, counts.2),
            input_shape,
            min_examples_per_class: min_examples,
        }
    }

    /// The class splits in effect: inline ones, else the manifest's split
    /// file.
    pub fn splits(&self) -> Result<ClassSplits> {
        match &self.source {
            DatasetSource::ImageManifest { split_file, .. } if self.class_splits.is_empty() => ClassSplits::read(split_file),
            _ => Ok(self.class_splits.clone()),
        }
    }

    /// Image manifest: reads the split file next to the class directories.
    pub fn image_manifest(root: &Path, split_file: &Path, input_shape: Vec<usize>, min_examples: usize) -> Result<Self> {
        let class_splits = ClassSplits::read(split_file)?;
        Ok(Self {
            source: DatasetSource::ImageManifest { root: root.to_path_buf(), split_file: split_file.to_path_buf() },
            class_splits,
            input_shape,
            min_examples_per_class: min_examples,
        })
    }
}

/// Identifies one example inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExampleId {
    pub class: usize,
    pub index: usize,
}

/// Read-only collection of `(example, class)` pairs with split membership.
#[derive(Debug, Clone)]
pub struct Dataset {
    input_shape: Vec<usize>,
    class_names: Vec<String>,
    examples: Vec<Vec<f64>>, // per class, flat
    counts: Vec<usize>,
    splits: [Vec<usize>; 3],
    domain: Domain,
}

impl Dataset {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn example_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.class_names[class]
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn split_classes(&self, split: Split) -> &[usize] {
        &self.splits[split.slot()]
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (self.splits[0].len(), self.splits[1].len(), self.splits[2].len())
    }

    pub fn examples_in(&self, class: usize) -> usize {
        self.counts[class]
    }

    pub fn example(&self, id: ExampleId) -> &[f64] {
        let n = self.example_len();
        &self.examples[id.class][id.index * n..(id.index + 1) * n]
    }

    /// Stacks examples into a `[len, input_shape..]` tensor.
    pub fn stack(&self, ids: &[ExampleId]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.example_len());
        for &id in ids {
            data.extend_from_slice(self.example(id));
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&self.input_shape);
        Tensor::new(shape, data).expect("stacked shape")
    }

    /// Every example of the given split, with its split-local class index.
    pub fn split_examples(&self, split: Split) -> Vec<(ExampleId, usize)> {
        self.split_classes(split)
            .iter()
            .enumerate()
            .flat_map(|(local, &class)| (0..self.counts[class]).map(move |index| (ExampleId { class, index }, local)))
            .collect()
    }
}

/// Builds the in-memory dataset described by `spec`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let splits = spec.splits()?;
    if let Some(c) = splits.overlap() {
        return Err(Error::SplitOverlap(c));
    }
    let listed: Vec<&String> = Split::ALL.iter().flat_map(|&s| splits.get(s)).collect();
    let (class_names, examples, counts, domain) = match &spec.source {
        DatasetSource::Synthetic { family, domain } => {
            if spec.input_shape != [family.dim] {
                return Err(Error::Shape(format!(
                    "synthetic input shape {:?} does not match dim {}",
                    spec.input_shape, family.dim
                )));
            }
            let mut names = Vec::new();
            let mut examples = Vec::new();
            let mut counts = Vec::new();
            for name in &listed {
                let id = parse_synthetic_class(name)
                    .filter(|&i| i < family.class_pool_size)
                    .ok_or_else(|| Error::MissingClass(format!("{name} is not in the synthetic pool")))?;
                let data: Vec<f64> = (0..family.examples_per_class)
                    .flat_map(|j| family.example(*domain, id, j))
                    .collect();
                names.push((*name).clone());
                examples.push(data);
                counts.push(family.examples_per_class);
            }
            (names, examples, counts, *domain)
        }
        DatasetSource::ImageManifest { root, .. } => {
            let mut names = Vec::new();
            let mut examples = Vec::new();
            let mut counts = Vec::new();
            for name in &listed {
                let dir = root.join(name);
                if !dir.is_dir() {
                    return Err(Error::MissingClass(format!("{} (no directory {})", name, dir.display())));
                }
                let (data, n) = load_class_images(&dir, &spec.input_shape)?;
                names.push((*name).clone());
                examples.push(data);
                counts.push(n);
            }
            (names, examples, counts, Domain::Source)
        }
    };
    for (name, &n) in class_names.iter().zip(&counts) {
        if n < spec.min_examples_per_class {
            return Err(Error::InsufficientExamples { class: name.clone(), have: n, need: spec.min_examples_per_class });
        }
    }
    let index_of: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let split_ids = |s: Split| splits.get(s).iter().map(|n| index_of[n.as_str()]).collect::<Vec<_>>();
    let splits = [split_ids(Split::Train), split_ids(Split::Val), split_ids(Split::Test)];
    Ok(Dataset {
        input_shape: spec.input_shape.clone(),
        class_names,
        examples,
        counts,
        splits,
        domain,
    })
}

fn parse_synthetic_class(name: &str) -> Option<usize> {
    name.strip_prefix("class_")?.parse().ok()
}

fn load_class_images(dir: &Path, shape: &[usize]) -> Result<(Vec<f64>, usize)> {
    let (h, w, c) = match shape {
        [h, w, c] if *c == 1 || *c == 3 => (*h as u32, *w as u32, *c),
        _ => return Err(Error::Shape(format!("image input shape must be [h, w, 1|3], got {shape:?}"))),
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut data = Vec::new();
    let mut n = 0;
    for f in files {
        let img = match image::open(&f) {
            Ok(img) => img,
            Err(image::ImageError::Unsupported(_)) => continue,
            Err(e) => return Err(Error::Image(format!("{}: {e}", f.display()))),
        };
        let img = img.resize_exact(w, h, image::imageops::FilterType::Triangle);
        if c == 1 {
            data.extend(img.to_luma8().pixels().map(|p| p.0[0] as f64 / 255.0));
        } else {
            data.extend(img.to_rgb8().pixels().flat_map(|p| p.0.map(|v| v as f64 / 255.0)));
        }
        n += 1;
    }
    Ok((data, n))
}

/// One N-way K-shot task with per-episode relabelled classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub support_ids: Vec<ExampleId>,
    pub query_ids: Vec<ExampleId>,
    /// Dataset class behind each episode label (`classes[label]`).
    pub classes: Vec<usize>,
    pub source_tag: SourceTag,
}

/// Samples an episode from `split`. Identical rng state gives an identical
/// episode.
pub fn sample_episode(
    dataset: &Dataset,
    split: Split,
    n_way: usize,
    k_shot: usize,
    q_per_class: usize,
    tag: SourceTag,
    rng: &mut Rng,
) -> Result<Episode> {
    let pool = dataset.split_classes(split);
    if pool.len() < n_way || n_way == 0 {
        return Err(Error::InsufficientClasses { have: pool.len(), need: n_way.max(1) });
    }
    let picked: Vec<usize> = index::sample(rng, pool.len(), n_way).into_iter().map(|i| pool[i]).collect();
    let mut labels: Vec<usize> = (0..n_way).collect();
    labels.shuffle(rng);
    let mut classes = vec![0; n_way];
    for (&class, &label) in picked.iter().zip(&labels) {
        classes[label] = class;
    }

    let need = k_shot + q_per_class;
    let mut support_ids = Vec::with_capacity(n_way * k_shot);
    let mut query_ids = Vec::with_capacity(n_way * q_per_class);
    let mut support_y = Vec::with_capacity(n_way * k_shot);
    let mut query_y = Vec::with_capacity(n_way * q_per_class);
    for (label, &class) in classes.iter().enumerate() {
        let have = dataset.examples_in(class);
        if have < need {
            return Err(Error::InsufficientExamples { class: dataset.class_name(class).to_string(), have, need });
        }
        let chosen = index::sample(rng, have, need).into_vec();
        for (j, &index) in chosen.iter().enumerate() {
            let id = ExampleId { class, index };
            if j < k_shot {
                support_ids.push(id);
                support_y.push(label);
            } else {
                query_ids.push(id);
                query_y.push(label);
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        q_per_class,
        support_x: dataset.stack(&support_ids),
        support_y,
        query_x: dataset.stack(&query_ids),
        query_y,
        support_ids,
        query_ids,
        classes,
        source_tag: tag,
    })
}

/// Episode geometry shared by all distributions of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
}

/// A task distribution: episodes drawn from one split of one dataset.
#[derive(Debug, Clone)]
pub struct TaskDistribution {
    pub dataset: Arc<Dataset>,
    pub split: Split,
    pub tag: SourceTag,
    pub shape: EpisodeShape,
}

impl TaskDistribution {
    pub fn sample(&self, rng: &mut Rng) -> Result<Episode> {
        sample_episode(
            &self.dataset,
            self.split,
            self.shape.n_way,
            self.shape.k_shot,
            self.shape.q_per_class,
            self.tag,
            rng,
        )
    }

    /// Same classes, different episode geometry.
    pub fn with_shape(&self, shape: EpisodeShape) -> Self {
        Self { shape, ..self.clone() }
    }

    pub fn classes(&self) -> &[usize] {
        self.dataset.split_classes(self.split)
    }
}

pub enum DistributionMode {
    Standard,
    /// Step-2 and test tasks come from a target domain.
    CrossDomain { target: Option<Arc<Dataset>> },
}

/// Builds `(dist_A, dist_B, dist_test)`: train classes, validation classes
/// (of the target domain in cross-domain mode) and test classes.
pub fn make_distributions(
    dataset: Arc<Dataset>,
    shape: EpisodeShape,
    mode: DistributionMode,
) -> Result<(TaskDistribution, TaskDistribution, TaskDistribution)> {
    let a = TaskDistribution { dataset: dataset.clone(), split: Split::Train, tag: SourceTag::A, shape };
    let (b_source, test_source) = match mode {
        DistributionMode::Standard => (dataset.clone(), dataset),
        DistributionMode::CrossDomain { target: Some(t) } => (t.clone(), t),
        DistributionMode::CrossDomain { target: None } => return Err(Error::MissingTargetDomain),
    };
    let b = TaskDistribution { dataset: b_source, split: Split::Val, tag: SourceTag::B, shape };
    let test = TaskDistribution { dataset: test_source, split: Split::Test, tag: SourceTag::Test, shape };
    Ok((a, b, test))
}
