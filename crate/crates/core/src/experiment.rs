//! Command implementations behind the CLI: each reads a config, consumes and
//! produces files under the run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{Checkpoint, Payload};
use crate::config::ExperimentConfig;
use crate::decode::{progressive_decode, DecodedPolicy};
use crate::encoder::{pretrain_backbone, Pretrained};
use crate::error::{Error, Result};
use crate::evalbench::{
    default_views, evaluate, fit_preset, random_search_baseline, BaselinePreset, EvalOptions, EvalReport,
    Evaluation, PresetContext,
};
use crate::rng;
use crate::search::{run_iterations, IterationRecord, SearchState};
use crate::supernet::Supernet;
use crate::tasks::{load_dataset, make_distributions, Dataset, DistributionMode, TaskDistribution};

/// Iterations between search checkpoints.
pub const CHECKPOINT_EVERY: usize = 25;

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn pretrained(&self) -> PathBuf {
        self.dir.join("pretrained.json")
    }
    pub fn supernet(&self) -> PathBuf {
        self.dir.join("supernet.json")
    }
    pub fn decoded(&self) -> PathBuf {
        self.dir.join("decoded.json")
    }
    pub fn history(&self) -> PathBuf {
        self.dir.join("history.jsonl")
    }
    pub fn alpha_csv(&self) -> PathBuf {
        self.dir.join("alpha_trajectory.csv")
    }
    pub fn decode_history(&self) -> PathBuf {
        self.dir.join("decode_history.jsonl")
    }
    pub fn summary_txt(&self) -> PathBuf {
        self.dir.join("policy_summary.txt")
    }
    pub fn summary_csv(&self) -> PathBuf {
        self.dir.join("policy_summary.csv")
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.dir.join(format!("eval_{name}.json"))
    }
    pub fn episodes(&self, name: &str) -> PathBuf {
        self.dir.join(format!("eval_{name}.episodes.jsonl"))
    }
}

/// Datasets and the three task distributions of a config.
pub struct Prepared {
    pub dataset: Arc<Dataset>,
    pub dist_a: TaskDistribution,
    pub dist_b: TaskDistribution,
    pub dist_test: TaskDistribution,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let dataset = Arc::new(load_dataset(&cfg.dataset)?);
    let mode = match &cfg.target {
        Some(spec) => DistributionMode::CrossDomain { target: Some(Arc::new(load_dataset(spec)?)) },
        None => DistributionMode::Standard,
    };
    let (dist_a, dist_b, dist_test) = make_distributions(dataset.clone(), cfg.episode, mode)?;
    Ok(Prepared { dataset, dist_a, dist_b, dist_test })
}

pub fn pretrain(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Pretrained> {
    pretrain_backbone(&prepared.dataset, &cfg.encoder, &cfg.pretrain, &mut rng::stream(cfg.seed, "pretrain", 0))
}

pub fn build_supernet(cfg: &ExperimentConfig, pretrained: &Pretrained) -> Result<Supernet> {
    let m = cfg.encoder.num_stages();
    Supernet::new(
        cfg.encoder.clone(),
        &pretrained.stages,
        &vec![cfg.candidates.encoder.clone(); m],
        &cfg.candidates.classifier,
        cfg.episode.n_way,
        cfg.tau,
        &mut rng::stream(cfg.seed, "supernet", 0),
    )
}

pub fn preset_context(cfg: &ExperimentConfig, pretrained: &Pretrained) -> PresetContext {
    PresetContext { encoder: cfg.encoder.clone(), pretrained: pretrained.stages.clone(), n_way: cfg.episode.n_way, tau: cfg.tau }
}

/// Search followed by progressive decoding, entirely in memory.
pub fn search_and_decode(cfg: &ExperimentConfig, prepared: &Prepared, pretrained: &Pretrained) -> Result<(Supernet, DecodedPolicy)> {
    let mut net = build_supernet(cfg, pretrained)?;
    let scfg = cfg.search_config();
    let mut state = SearchState::new(&scfg);
    run_iterations(&mut net, &prepared.dist_a, &prepared.dist_b, scfg.seed, "search", scfg.episodes_total, scfg.clip_norm, &mut state, &mut |_| Ok(()))?;
    let policy = progressive_decode(&mut net, &prepared.dist_a, &prepared.dist_b, &scfg, &cfg.decode, &mut state, &mut |_, _| Ok(()))?;
    Ok((net, policy))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<RunPaths> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(RunPaths::new(&cfg.output_dir))
}

pub struct PretrainOutcome {
    pub path: PathBuf,
    pub checkpoint_hash: String,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    let paths = out_dir(cfg)?;
    let prepared = prepare(cfg)?;
    let pretrained = pretrain(cfg, &prepared)?;
    if let Some(last) = pretrained.losses.last() {
        log::info!("pretraining finished, final loss {last:.4}");
    }
    let path = paths.pretrained();
    let checkpoint_hash =
        Checkpoint::new(&cfg.hash(), Payload::Pretrained { encoder: cfg.encoder.clone(), pretrained }).save(&path)?;
    Ok(PretrainOutcome { path, checkpoint_hash })
}

fn load_pretrained(cfg: &ExperimentConfig, path: &Path) -> Result<Pretrained> {
    match Checkpoint::load_expecting(path, &cfg.hash(), "pretrained")?.payload {
        Payload::Pretrained { encoder, pretrained } => {
            if encoder != cfg.encoder {
                return Err(Error::Checkpoint(format!("{} was trained for a different encoder", path.display())));
            }
            Ok(pretrained)
        }
        _ => unreachable!("kind checked"),
    }
}

fn history_line(hash: &str, phase: &str, r: &IterationRecord) -> String {
    json!({
        "config_hash": hash,
        "phase": phase,
        "iteration": r.iteration,
        "step1_loss": r.step1_loss,
        "step2_loss": r.step2_loss,
        "alphas": r.alphas,
    })
    .to_string()
}

const ALPHA_HEADER: &str = "iteration,stage,candidate,alpha";

fn alpha_lines(labels: &[Vec<String>], r: &IterationRecord) -> Vec<String> {
    let mut out = Vec::new();
    for (l, a) in r.alphas.iter().enumerate() {
        for (i, v) in a.iter().enumerate() {
            out.push(format!("{},{l},{},{v}", r.iteration, labels[l][i]));
        }
    }
    out
}

/// Keeps the lines whose leading iteration is below `limit`.
fn truncate_history(path: &Path, limit: usize, iteration_of: impl Fn(&str) -> Option<usize>) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|l| iteration_of(l).is_none_or(|t| t < limit))
        .collect();
    let mut f = BufWriter::new(File::create(path)?);
    for l in kept {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

fn append(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?))
}

pub struct SearchOutcome {
    pub path: PathBuf,
    pub iterations: usize,
}

/// Runs (or resumes) the alternating search. History lines are flushed as
/// they are produced, so a failure leaves the completed prefix on disk.
pub fn cmd_search(cfg: &ExperimentConfig, pretrained_path: Option<&Path>, resume: bool) -> Result<SearchOutcome> {
    let paths = out_dir(cfg)?;
    let hash = cfg.hash();
    let scfg = cfg.search_config();
    let prepared = prepare(cfg)?;
    let ck_path = paths.supernet();
    let (mut net, mut state) = if resume && ck_path.exists() {
        match Checkpoint::load_expecting(&ck_path, &hash, "supernet")?.payload {
            Payload::Supernet { net, state } => (net, state),
            _ => unreachable!("kind checked"),
        }
    } else {
        let pre = load_pretrained(cfg, pretrained_path.unwrap_or(&paths.pretrained()))?;
        (build_supernet(cfg, &pre)?, SearchState::new(&scfg))
    };
    let labels: Vec<Vec<String>> = net.stages.iter().map(|s| s.slots.iter().map(|x| x.candidate.label()).collect()).collect();
    let done = state.iteration;
    if resume {
        truncate_history(&paths.history(), done, |l| {
            serde_json::from_str::<serde_json::Value>(l).ok()?.get("iteration")?.as_u64().map(|v| v as usize)
        })?;
        truncate_history(&paths.alpha_csv(), done, |l| l.split(',').next()?.parse().ok())?;
    } else {
        File::create(paths.history())?;
        File::create(paths.alpha_csv())?;
    }
    let mut hist = append(&paths.history())?;
    let mut csv = append(&paths.alpha_csv())?;
    if fs::metadata(paths.alpha_csv())?.len() == 0 {
        writeln!(csv, "# config_hash={hash}")?;
        writeln!(csv, "{ALPHA_HEADER}")?;
        csv.flush()?;
    }
    log::info!("search from iteration {done} to {}", scfg.episodes_total);

    let result = {
        let mut sink = |r: &IterationRecord| -> Result<()> {
            writeln!(hist, "{}", history_line(&hash, "search", r))?;
            hist.flush()?;
            for line in alpha_lines(&labels, r) {
                writeln!(csv, "{line}")?;
            }
            Ok(csv.flush()?)
        };
        // Run in chunks so a checkpoint lands every CHECKPOINT_EVERY iterations.
        let mut res = Ok(());
        while state.iteration < scfg.episodes_total {
            let target = ((state.iteration / CHECKPOINT_EVERY) + 1) * CHECKPOINT_EVERY;
            let target = target.min(scfg.episodes_total);
            res = run_iterations(&mut net, &prepared.dist_a, &prepared.dist_b, scfg.seed, "search", target, scfg.clip_norm, &mut state, &mut sink);
            if res.is_err() {
                break;
            }
            Checkpoint::new(&hash, Payload::Supernet { net: net.clone(), state: state.clone() }).save(&ck_path)?;
        }
        res
    };
    if let Err(e) = result {
        Checkpoint::new(&hash, Payload::Supernet { net, state: state.clone() }).save(&ck_path)?;
        return Err(e);
    }
    Checkpoint::new(&hash, Payload::Supernet { net, state: state.clone() }).save(&ck_path)?;
    Ok(SearchOutcome { path: ck_path, iterations: state.iteration })
}

pub struct DecodeOutcome {
    pub path: PathBuf,
    pub policy: DecodedPolicy,
}

pub fn cmd_decode(cfg: &ExperimentConfig, supernet_path: Option<&Path>) -> Result<DecodeOutcome> {
    let paths = out_dir(cfg)?;
    let hash = cfg.hash();
    let scfg = cfg.search_config();
    let prepared = prepare(cfg)?;
    let src = supernet_path.map(Path::to_path_buf).unwrap_or_else(|| paths.supernet());
    let (mut net, mut state) = match Checkpoint::load_expecting(&src, &hash, "supernet")?.payload {
        Payload::Supernet { net, state } => (net, state),
        _ => unreachable!("kind checked"),
    };
    let mut hist = BufWriter::new(File::create(paths.decode_history())?);
    let policy = progressive_decode(&mut net, &prepared.dist_a, &prepared.dist_b, &scfg, &cfg.decode, &mut state, &mut |phase, r| {
        writeln!(hist, "{}", history_line(&hash, phase, r))?;
        Ok(hist.flush()?)
    })?;
    fs::write(paths.summary_txt(), format!("config_hash: {hash}\n{}", policy.summary_text()))?;
    fs::write(paths.summary_csv(), format!("# config_hash={hash}\n{}", policy.summary_csv()))?;
    let path = paths.decoded();
    Checkpoint::new(&hash, Payload::Decoded { net, policy: policy.clone() }).save(&path)?;
    Ok(DecodeOutcome { path, policy })
}

fn write_evaluation(paths: &RunPaths, name: &str, hash: &str, ev: &Evaluation) -> Result<PathBuf> {
    let path = paths.report(name);
    fs::write(&path, serde_json::to_string_pretty(&ev.report)?)?;
    let mut f = BufWriter::new(File::create(paths.episodes(name))?);
    for r in &ev.episodes {
        let mut v = serde_json::to_value(r)?;
        v["config_hash"] = json!(hash);
        writeln!(f, "{v}")?;
    }
    f.flush()?;
    Ok(path)
}

/// What `eval` scores.
#[derive(Debug, Clone)]
pub enum EvalTarget {
    /// A supernet or decoded checkpoint.
    Checkpoint(PathBuf),
    /// A baseline preset fitted on the pretrained encoder of the run.
    Preset(BaselinePreset),
}

pub struct EvalOutcome {
    pub path: PathBuf,
    pub report: EvalReport,
}

fn eval_options(cfg: &ExperimentConfig, multicrop: bool) -> EvalOptions {
    EvalOptions { config_hash: cfg.hash(), views: multicrop.then(|| default_views(cfg.eval.multicrop_views)) }
}

pub fn cmd_eval(cfg: &ExperimentConfig, target: &EvalTarget, multicrop: bool) -> Result<EvalOutcome> {
    let paths = out_dir(cfg)?;
    let prepared = prepare(cfg)?;
    let opts = eval_options(cfg, multicrop);
    let seed = cfg.seed;
    let (name, ev) = match target {
        EvalTarget::Checkpoint(path) => {
            let ck = Checkpoint::load(path)?;
            let net = match ck.payload {
                Payload::Decoded { net, .. } | Payload::Supernet { net, .. } => net,
                Payload::Pretrained { .. } => {
                    return Err(Error::Checkpoint(format!("{} holds only a pretrained encoder", path.display())))
                }
            };
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
            (name, evaluate(&net, &prepared.dist_test, cfg.eval.episodes, seed, &opts)?)
        }
        EvalTarget::Preset(p) => {
            let pre = load_pretrained(cfg, &paths.pretrained())?;
            (p.name().to_string(), eval_preset(cfg, &prepared, &pre, *p, &opts)?)
        }
    };
    let path = write_evaluation(&paths, &name, &cfg.hash(), &ev)?;
    Ok(EvalOutcome { path, report: ev.report })
}

fn eval_preset(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    pre: &Pretrained,
    preset: BaselinePreset,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let ctx = preset_context(cfg, pre);
    let space = cfg.candidates.space();
    if preset == BaselinePreset::Random {
        let res = random_search_baseline(
            &ctx,
            &space,
            cfg.eval.random_models,
            &prepared.dist_a,
            &prepared.dist_test,
            cfg.train_budget(),
            cfg.eval.episodes,
            cfg.seed,
            opts,
        )?;
        // one accuracy per sampled model
        let accs: Vec<f64> = res.models.iter().map(|(_, r)| r.mean_accuracy).collect();
        let mut report = EvalReport::from_accuracies(&format!("random ({} models)", accs.len()), &opts.config_hash, accs);
        report.seed = cfg.seed;
        report.n_way = cfg.episode.n_way;
        report.k_shot = cfg.episode.k_shot;
        report.multicrop = opts.views.is_some();
        return Ok(Evaluation { report, episodes: Vec::new() });
    }
    let (model, lr) = fit_preset(
        preset,
        &ctx,
        &space,
        &prepared.dist_a,
        &prepared.dist_b,
        cfg.train_budget(),
        cfg.eval.preset_val_episodes,
        cfg.seed,
    )?;
    if let Some(lr) = lr {
        log::info!("{preset}: inner lr {lr}");
    }
    evaluate(&model, &prepared.dist_test, cfg.eval.episodes, cfg.seed, opts)
}

/// Fits and evaluates the given presets (all of them when empty).
pub fn cmd_baseline(cfg: &ExperimentConfig, presets: &[BaselinePreset], multicrop: bool) -> Result<Vec<EvalOutcome>> {
    let paths = out_dir(cfg)?;
    let prepared = prepare(cfg)?;
    let pre = load_pretrained(cfg, &paths.pretrained())?;
    let opts = eval_options(cfg, multicrop);
    let list: Vec<BaselinePreset> = if presets.is_empty() { BaselinePreset::ALL.to_vec() } else { presets.to_vec() };
    let mut out = Vec::with_capacity(list.len());
    for p in list {
        let ev = eval_preset(cfg, &prepared, &pre, p, &opts)?;
        let path = write_evaluation(&paths, p.name(), &opts.config_hash, &ev)?;
        out.push(EvalOutcome { path, report: ev.report });
    }
    Ok(out)
}

/// `65.91 ± 0.83`: percentages with two decimals.
pub fn format_cell(mean_accuracy: f64, ci95: f64) -> String {
    format!("{:.2} ± {:.2}", mean_accuracy * 100.0, ci95 * 100.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportOutcome {
    pub table: String,
    /// `(row, column, cell)` triples.
    pub cells: Vec<(String, String, String)>,
    pub files: Vec<PathBuf>,
}

fn read_reports(dir: &Path) -> Result<Vec<(PathBuf, EvalReport)>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if name.starts_with("eval_") && name.ends_with(".json") {
            let r: EvalReport = serde_json::from_str(&fs::read_to_string(&p)?)?;
            out.push((p, r));
        }
    }
    Ok(out)
}

/// Comparison table over every report in `dir` plus per-stage α plot data.
pub fn cmd_report(dir: &Path, allow_mixed: bool) -> Result<ReportOutcome> {
    let reports = read_reports(dir)?;
    if reports.is_empty() {
        return Err(Error::NothingToReport(dir.to_path_buf()));
    }
    let hashes: BTreeSet<&str> = reports.iter().map(|(_, r)| r.config_hash.as_str()).collect();
    if hashes.len() > 1 && !allow_mixed {
        return Err(Error::MixedConfigHashes(hashes.into_iter().collect::<Vec<_>>().join(", ")));
    }
    let column = |r: &EvalReport| format!("{}-way {}-shot{}", r.n_way, r.k_shot, if r.multicrop { " (multi-crop)" } else { "" });
    let columns: BTreeSet<String> = reports.iter().map(|(_, r)| column(r)).collect();
    let mut rows: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut cells = Vec::new();
    for (_, r) in &reports {
        let cell = format_cell(r.mean_accuracy, r.ci95);
        rows.entry(r.policy.clone()).or_default().insert(column(r), cell.clone());
        cells.push((r.policy.clone(), column(r), cell));
    }
    let mut table = String::new();
    if hashes.len() == 1 {
        table.push_str(&format!("config_hash: {}\n\n", hashes.iter().next().expect("one hash")));
    } else {
        table.push_str(&format!("config_hash: mixed ({})\n\n", hashes.iter().copied().collect::<Vec<_>>().join(", ")));
    }
    table.push_str(&format!("| policy | {} |\n", columns.iter().cloned().collect::<Vec<_>>().join(" | ")));
    table.push_str(&format!("|---|{}\n", "---|".repeat(columns.len())));
    for (policy, row) in &rows {
        let vals: Vec<String> = columns.iter().map(|c| row.get(c).cloned().unwrap_or_else(|| "-".into())).collect();
        table.push_str(&format!("| {policy} | {} |\n", vals.join(" | ")));
    }
    let mut files = vec![dir.join("comparison.md")];
    fs::write(&files[0], &table)?;
    files.extend(alpha_plot_data(dir)?);
    Ok(ReportOutcome { table, cells, files })
}

/// Splits the α trajectory into one wide CSV per stage: an iteration column
/// followed by one column per candidate.
fn alpha_plot_data(dir: &Path) -> Result<Vec<PathBuf>> {
    let src = RunPaths::new(dir).alpha_csv();
    if !src.exists() {
        return Ok(Vec::new());
    }
    let mut hash_line = String::new();
    let mut stages: BTreeMap<usize, (Vec<String>, BTreeMap<usize, Vec<String>>)> = BTreeMap::new();
    for line in BufReader::new(File::open(&src)?).lines() {
        let line = line?;
        if line.starts_with('#') {
            hash_line = line;
            continue;
        }
        if line == ALPHA_HEADER || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let (Some(t), Some(l)) = (f.first().and_then(|v| v.parse().ok()), f.get(1).and_then(|v| v.parse().ok())) else {
            continue;
        };
        let (labels, by_iter) = stages.entry(l).or_default();
        if by_iter.keys().next().is_none_or(|&first| first == t) {
            labels.push(f[2].to_string());
        }
        by_iter.entry(t).or_default().push(f[3].to_string());
    }
    let mut out = Vec::new();
    for (l, (labels, by_iter)) in stages {
        let path = dir.join(format!("alpha_stage_{l}.csv"));
        let mut s = format!("{hash_line}\niteration,{}\n", labels.join(","));
        for (t, vals) in by_iter {
            s.push_str(&format!("{t},{}\n", vals.join(",")));
        }
        fs::write(&path, s)?;
        out.push(path);
    }
    Ok(out)
}
