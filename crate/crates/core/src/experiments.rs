//! Experiment orchestration: configuration, run directories, checkpoints,
//! and the protocols behind the command-line tool (seed robustness,
//! posterior accuracy, capacity sweep, significance, amortization gap).
//!
//! Every run owns `<out>/<experiment>/<base_seed>/<run>/` holding
//! `checkpoint.json`, `epochs.csv` and `record.json`, where `<run>` is `vae`
//! for the base encoder and the run seed for IA-VAE models. A run whose
//! record exists is loaded instead of retrained, so sweeps are resumable.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypernet::HypernetCheckpoint;
use crate::models::{read_json, write_json, BlockRecord, EncoderCheckpoint, EncoderParams, OBS_DIM};
use crate::optim::ParamSet;
use crate::posterior::{
    density_ratio, find_map, laplace_fit, mahalanobis, moment_matched_fit, posterior_grid, GridHeader, GridMarker, LatentModel,
    MapSearch,
};
use crate::stats::{significance, PairedSample, SignificanceReport, DEFAULT_ALPHA};
use crate::synthetic::{generate, SyntheticDataset, DEFAULT_N, DEFAULT_SIGMA};
use crate::vae::{
    elbo_for_posterior, loglik_constant, per_instance_optimal_elbo, per_point_elbo, train, InferenceModel, Mode,
    NoiseTable, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: DEFAULT_N,
            sigma: DEFAULT_SIGMA,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub bounds: (f64, f64),
    pub resolution: usize,
    /// Dataset indices exported as posterior heatmaps.
    pub example_points: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            bounds: crate::posterior::GRID_BOUNDS,
            resolution: crate::posterior::GRID_RESOLUTION,
            example_points: vec![0, 1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Laplace,
    MomentMatched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorEvalConfig {
    pub map: MapSearch,
    pub fit: FitMethod,
    /// Evaluate only the first `points` observations (all when absent).
    pub points: Option<usize>,
    pub grid: GridConfig,
}

impl Default for PosteriorEvalConfig {
    fn default() -> Self {
        PosteriorEvalConfig {
            map: MapSearch::default(),
            fit: FitMethod::Laplace,
            points: None,
            grid: GridConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Evaluate only the first `points` observations (all when absent).
    pub points: Option<usize>,
}

impl Default for GapConfig {
    fn default() -> Self {
        GapConfig {
            steps: 500,
            learning_rate: 1e-2,
            points: None,
        }
    }
}

/// Full experiment configuration. Every field has a default, so `{}` is a
/// valid configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Overrides the experiment directory name (defaults to the command).
    pub experiment: Option<String>,
    pub base_seeds: Vec<u64>,
    pub iavae_seeds: Vec<u64>,
    pub widths: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub posterior: PosteriorEvalConfig,
    pub gap: GapConfig,
    pub alpha: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            experiment: None,
            base_seeds: (0..10).collect(),
            iavae_seeds: (0..10).collect(),
            widths: (1..=10).map(|k| 2 * k).collect(),
            sweep_seeds: (0..3).collect(),
            out_dir: PathBuf::from("out"),
            posterior: PosteriorEvalConfig::default(),
            gap: GapConfig::default(),
            alpha: DEFAULT_ALPHA,
        }
    }
}

fn check_seeds(name: &str, seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::invalid(format!("{name} must not be empty")));
    }
    let unique: BTreeSet<_> = seeds.iter().collect();
    if unique.len() != seeds.len() {
        return Err(Error::invalid(format!("{name} contains duplicates")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: ExperimentConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_seeds("base_seeds", &self.base_seeds)?;
        check_seeds("iavae_seeds", &self.iavae_seeds)?;
        check_seeds("sweep_seeds", &self.sweep_seeds)?;
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("widths must be non-empty and positive"));
        }
        if self.dataset.n == 0 {
            return Err(Error::invalid("dataset.N must be at least 1"));
        }
        if !(self.dataset.sigma > 0.0 && self.dataset.sigma.is_finite()) {
            return Err(Error::invalid("dataset.sigma must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1)"));
        }
        if self.posterior.grid.resolution < 2 || !(self.posterior.grid.bounds.1 > self.posterior.grid.bounds.0) {
            return Err(Error::invalid("grid needs resolution >= 2 and lo < hi"));
        }
        if self.posterior.map.restarts == 0 {
            return Err(Error::invalid("posterior.map.restarts must be at least 1"));
        }
        if !(self.gap.learning_rate > 0.0) {
            return Err(Error::invalid("gap.learning_rate must be positive"));
        }
        self.train.validate()
    }

    pub fn dataset(&self) -> Result<SyntheticDataset> {
        generate(self.dataset.n, self.dataset.sigma, self.dataset.seed)
    }

    pub fn experiment_dir(&self, default_name: &str) -> PathBuf {
        self.out_dir.join(self.experiment.as_deref().unwrap_or(default_name))
    }

    pub fn eval_noise(&self, points: usize) -> NoiseTable {
        NoiseTable::new(points, self.train.eval_samples, self.train.eval_seed)
    }
}

/// ELBO with the Gaussian normalizing constant removed, i.e. the scale on
/// which only the squared residual `‖x - f(z)‖² / 2σ²` enters.
pub fn elbo_without_constant(elbo: f64, sigma: f64) -> f64 {
    elbo - loglik_constant(sigma, OBS_DIM)
}

/// Model checkpoint: the encoder block scheme plus, for IA-VAE, the
/// hypernetwork section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub mode: Mode,
    pub seed: u64,
    pub encoder: EncoderCheckpoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypernet: Option<HypernetCheckpoint>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &InferenceModel, seed: u64) -> Self {
        let base = model.base();
        let encoder = EncoderCheckpoint {
            architecture: base.architecture.clone(),
            blocks: base.blocks.iter().map(BlockRecord::from).collect(),
            seed,
        };
        let hypernet = match model {
            InferenceModel::Vae(_) => None,
            InferenceModel::IaVae { hypernet, .. } => Some(hypernet.to_checkpoint()),
        };
        ModelCheckpoint {
            mode: model.mode(),
            seed,
            encoder,
            hypernet,
        }
    }

    pub fn into_model(self) -> Result<InferenceModel> {
        let base = self.encoder.into_params()?;
        match (self.mode, self.hypernet) {
            (Mode::Vae, None) => Ok(InferenceModel::Vae(base)),
            (Mode::IaVae, Some(h)) => {
                let hypernet = h.into_params()?;
                hypernet.check_layout(&base)?;
                Ok(InferenceModel::IaVae { base, hypernet })
            }
            (mode, h) => Err(Error::Layout(format!(
                "{mode} checkpoint {} a hypernetwork section",
                if h.is_some() { "has" } else { "lacks" }
            ))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<InferenceModel> {
    ModelCheckpoint::load(path)?.into_model()
}

/// Summary of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub base_seed: u64,
    pub run_seed: Option<u64>,
    pub hidden_width: usize,
    pub elbo: f64,
    pub elbo_no_const: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub d_map_mean: Option<f64>,
    pub r_map_mean: Option<f64>,
    /// Trainable encoder parameters (frozen, hence excluded from the
    /// trainable total, in IA-VAE mode).
    pub encoder_parameters: usize,
    pub hypernet_parameters: usize,
    pub embedding_parameters: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

impl RunRecord {
    /// Parameters evaluated at inference time: encoder plus hypernetwork.
    pub fn inference_parameters(&self) -> usize {
        self.encoder_parameters + self.hypernet_parameters
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunId {
    Vae,
    IaVae(u64),
}

pub fn run_dir(exp_dir: &Path, base_seed: u64, run: RunId) -> PathBuf {
    let leaf = match run {
        RunId::Vae => "vae".to_string(),
        RunId::IaVae(s) => s.to_string(),
    };
    exp_dir.join(base_seed.to_string()).join(leaf)
}

/// Trains (or resumes) one run and writes its directory.
pub fn execute_run(
    train_cfg: &TrainConfig,
    data: &SyntheticDataset,
    dir: &Path,
    base_seed: u64,
    run: RunId,
    base: Option<&EncoderParams>,
) -> Result<(InferenceModel, RunRecord)> {
    let ckpt_path = dir.join("checkpoint.json");
    let record_path = dir.join("record.json");
    if ckpt_path.exists() && record_path.exists() {
        let model = load_model(&ckpt_path)?;
        let record: RunRecord = read_json(&record_path)?;
        return Ok((model, record));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mode, seed) = match run {
        RunId::Vae => (Mode::Vae, base_seed),
        RunId::IaVae(s) => (Mode::IaVae, s),
    };
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let start = Instant::now();
    let out = train(data, mode, base, &cfg)?;
    let wall_seconds = start.elapsed().as_secs_f64();

    let mut w = csv::Writer::from_path(dir.join("epochs.csv"))?;
    for m in &out.history {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io(dir.join("epochs.csv"), e))?;
    ModelCheckpoint::from_model(&out.model, seed).save(&ckpt_path)?;

    let (encoder_parameters, hypernet_parameters, embedding_parameters) = match &out.model {
        InferenceModel::Vae(e) => (e.count(), 0, 0),
        InferenceModel::IaVae { base, hypernet } => (
            base.count(),
            hypernet.hypernet_parameter_count(),
            hypernet.embedding_parameter_count(),
        ),
    };
    let record = RunRecord {
        mode,
        base_seed,
        run_seed: match run {
            RunId::Vae => None,
            RunId::IaVae(s) => Some(s),
        },
        hidden_width: out.model.base().architecture.hidden_width,
        elbo: out.best.elbo,
        elbo_no_const: elbo_without_constant(out.best.elbo, data.sigma),
        reconstruction: out.best.reconstruction,
        kl: out.best.kl,
        d_map_mean: None,
        r_map_mean: None,
        encoder_parameters,
        hypernet_parameters,
        embedding_parameters,
        best_epoch: out.best_epoch,
        epochs_run: out.history.len() - 1,
        stopped_early: out.stopped_early,
        wall_seconds,
    };
    write_json(&record_path, &record)?;
    Ok((out.model, record))
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let data = cfg.dataset()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("data.csv");
    data.write_csv(&path)?;
    Ok(path)
}

/// Trains the base VAE for `base_seed` and one IA-VAE on top of it (run
/// seed: the first configured IA-VAE seed).
pub fn cmd_train(cfg: &ExperimentConfig, base_seed: u64) -> Result<(RunRecord, RunRecord)> {
    let data = cfg.dataset()?;
    let exp = cfg.experiment_dir("train");
    let (vae, vae_rec) = execute_run(&cfg.train, &data, &run_dir(&exp, base_seed, RunId::Vae), base_seed, RunId::Vae, None)?;
    let run = RunId::IaVae(cfg.iavae_seeds[0]);
    let (_, ia_rec) = execute_run(&cfg.train, &data, &run_dir(&exp, base_seed, run), base_seed, run, Some(vae.base()))?;
    Ok((vae_rec, ia_rec))
}

/// One row of the seed-robustness table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub base_seed: u64,
    pub vae_elbo: Option<f64>,
    pub vae_kl: Option<f64>,
    pub vae_elbo_no_const: Option<f64>,
    pub iavae_elbo_mean: Option<f64>,
    pub iavae_elbo_std: Option<f64>,
    pub iavae_kl_mean: Option<f64>,
    pub iavae_elbo_no_const_mean: Option<f64>,
    pub n_runs: usize,
    pub error: Option<String>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl RobustnessRow {
    fn from_records(base_seed: u64, vae: Option<&RunRecord>, runs: &[RunRecord], error: Option<String>) -> Self {
        let (mean, std, kl, nc) = if runs.is_empty() {
            (None, None, None, None)
        } else {
            let e: Vec<f64> = runs.iter().map(|r| r.elbo).collect();
            let (m, s) = mean_std(&e);
            let kl = runs.iter().map(|r| r.kl).sum::<f64>() / runs.len() as f64;
            let nc = runs.iter().map(|r| r.elbo_no_const).sum::<f64>() / runs.len() as f64;
            (Some(m), Some(s), Some(kl), Some(nc))
        };
        RobustnessRow {
            base_seed,
            vae_elbo: vae.map(|r| r.elbo),
            vae_kl: vae.map(|r| r.kl),
            vae_elbo_no_const: vae.map(|r| r.elbo_no_const),
            iavae_elbo_mean: mean,
            iavae_elbo_std: std,
            iavae_kl_mean: kl,
            iavae_elbo_no_const_mean: nc,
            n_runs: runs.len(),
            error,
        }
    }

    pub fn improvement(&self) -> Option<f64> {
        Some(self.iavae_elbo_mean? - self.vae_elbo?)
    }
}

/// Runs the seed-robustness protocol: one base VAE per base seed, then one
/// IA-VAE per run seed on top of it. A failing run marks its row with the
/// reason; other rows proceed. Runs execute on the current rayon pool.
pub fn run_robustness(cfg: &ExperimentConfig, data: &SyntheticDataset, exp_dir: &Path) -> Vec<RobustnessRow> {
    let vaes: Vec<(u64, Result<(InferenceModel, RunRecord)>)> = cfg
        .base_seeds
        .par_iter()
        .map(|&b| (b, execute_run(&cfg.train, data, &run_dir(exp_dir, b, RunId::Vae), b, RunId::Vae, None)))
        .collect();
    let jobs: Vec<(u64, u64, &EncoderParams)> = vaes
        .iter()
        .filter_map(|(b, r)| r.as_ref().ok().map(|(m, _)| (*b, m.base())))
        .flat_map(|(b, base)| cfg.iavae_seeds.iter().map(move |&s| (b, s, base)))
        .collect();
    let runs: Vec<(u64, u64, Result<RunRecord>)> = jobs
        .par_iter()
        .map(|&(b, s, base)| {
            let run = RunId::IaVae(s);
            let r = execute_run(&cfg.train, data, &run_dir(exp_dir, b, run), b, run, Some(base)).map(|(_, rec)| rec);
            (b, s, r)
        })
        .collect();
    vaes.iter()
        .map(|(b, vae)| match vae {
            Err(e) => RobustnessRow::from_records(*b, None, &[], Some(format!("base VAE failed: {e}"))),
            Ok((_, vae_rec)) => {
                let mine: Vec<&(u64, u64, Result<RunRecord>)> = runs.iter().filter(|(rb, _, _)| rb == b).collect();
                let errors: Vec<String> = mine
                    .iter()
                    .filter_map(|(_, s, r)| r.as_ref().err().map(|e| format!("run {s}: {e}")))
                    .collect();
                let ok: Vec<RunRecord> = mine.iter().filter_map(|(_, _, r)| r.as_ref().ok().cloned()).collect();
                if errors.is_empty() {
                    RobustnessRow::from_records(*b, Some(vae_rec), &ok, None)
                } else {
                    RobustnessRow::from_records(*b, Some(vae_rec), &[], Some(errors.join("; ")))
                }
            }
        })
        .collect()
}

/// Rebuilds robustness rows from the record files of a finished (or
/// partially finished) sweep.
pub fn robustness_rows_from_records(exp_dir: &Path, base_seeds: &[u64], run_seeds: &[u64]) -> Result<Vec<RobustnessRow>> {
    let read = |p: PathBuf| -> Result<Option<RunRecord>> {
        if p.exists() {
            read_json(p).map(Some)
        } else {
            Ok(None)
        }
    };
    base_seeds
        .iter()
        .map(|&b| {
            let vae = read(run_dir(exp_dir, b, RunId::Vae).join("record.json"))?;
            let mut runs = Vec::new();
            let mut missing = Vec::new();
            for &s in run_seeds {
                match read(run_dir(exp_dir, b, RunId::IaVae(s)).join("record.json"))? {
                    Some(r) => runs.push(r),
                    None => missing.push(s.to_string()),
                }
            }
            let error = match (&vae, missing.is_empty()) {
                (None, _) => Some("missing base VAE record".to_string()),
                (Some(_), false) => Some(format!("missing IA-VAE runs: {}", missing.join(", "))),
                _ => None,
            };
            Ok(RobustnessRow::from_records(b, vae.as_ref(), &runs, error))
        })
        .collect()
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

pub fn write_robustness_table(rows: &[RobustnessRow], sigma: f64, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("table.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(dir.join("table.csv"), e))?;
    let mut text = format!(
        "ELBO in nats with KL in parentheses; columns marked * omit the likelihood constant {:.4}\n",
        loglik_constant(sigma, OBS_DIM)
    );
    text.push_str(&format!(
        "{:>6}  {:>18}  {:>26}  {:>9}  {:>9}\n",
        "seed", "VAE", "IA-VAE (mean ± std)", "VAE*", "IA-VAE*"
    ));
    for r in rows {
        if let Some(e) = &r.error {
            text.push_str(&format!("{:>6}  failed: {e}\n", r.base_seed));
            continue;
        }
        let vae = format!("{} ({})", fmt_opt(r.vae_elbo, 3), fmt_opt(r.vae_kl, 2));
        let ia = format!(
            "{} ± {} ({})",
            fmt_opt(r.iavae_elbo_mean, 3),
            fmt_opt(r.iavae_elbo_std, 3),
            fmt_opt(r.iavae_kl_mean, 2)
        );
        text.push_str(&format!(
            "{:>6}  {:>18}  {:>26}  {:>9}  {:>9}\n",
            r.base_seed,
            vae,
            ia,
            fmt_opt(r.vae_elbo_no_const, 3),
            fmt_opt(r.iavae_elbo_no_const_mean, 3)
        ));
    }
    std::fs::write(dir.join("table.txt"), text).map_err(|e| Error::io(dir.join("table.txt"), e))
}

pub fn cmd_robustness(cfg: &ExperimentConfig) -> Result<Vec<RobustnessRow>> {
    let data = cfg.dataset()?;
    let exp = cfg.experiment_dir("robustness");
    std::fs::create_dir_all(&exp).map_err(|e| Error::io(&exp, e))?;
    let rows = run_robustness(cfg, &data, &exp);
    write_robustness_table(&rows, data.sigma, &exp)?;
    Ok(rows)
}

/// Seed-paired comparison: baseline is each base VAE's ELBO, treatment is
/// the mean ELBO of the IA-VAE runs built on it.
pub fn paired_from_rows(rows: &[RobustnessRow]) -> Result<PairedSample> {
    let missing: Vec<String> = rows
        .iter()
        .filter(|r| r.error.is_some() || r.improvement().is_none())
        .map(|r| format!("{} ({})", r.base_seed, r.error.as_deref().unwrap_or("incomplete")))
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("unpaired base seeds: {}", missing.join(", "))));
    }
    if rows.len() < 5 {
        return Err(Error::invalid(format!("significance needs at least 5 pairs, got {}", rows.len())));
    }
    PairedSample::new(
        rows.iter().map(|r| r.vae_elbo.expect("checked")).collect(),
        rows.iter().map(|r| r.iavae_elbo_mean.expect("checked")).collect(),
    )
}

pub fn cmd_significance(cfg: &ExperimentConfig, records_dir: Option<&Path>) -> Result<SignificanceReport> {
    let exp = records_dir.map_or_else(|| cfg.experiment_dir("robustness"), Path::to_path_buf);
    let rows = robustness_rows_from_records(&exp, &cfg.base_seeds, &cfg.iavae_seeds)?;
    let report = significance(&paired_from_rows(&rows)?, cfg.alpha)?;
    write_json(exp.join("significance.json"), &report)?;
    std::fs::write(exp.join("significance.txt"), report.hypotheses() + "\n").map_err(|e| Error::io(exp.join("significance.txt"), e))?;
    Ok(report)
}

/// Per-point posterior-accuracy diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointDiagnostics {
    pub index: usize,
    pub d_map_vae: f64,
    pub d_map_iavae: f64,
    pub r_map_vae: f64,
    pub r_map_iavae: f64,
    /// `ELBO_IA-VAE(x) - ELBO_VAE(x)`.
    pub elbo_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub elbo: f64,
    pub elbo_no_const: f64,
    pub kl: f64,
    pub d_map: f64,
    pub r_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEvalResult {
    pub vae: ModelSummary,
    pub iavae: ModelSummary,
    pub evaluated: usize,
    pub excluded: usize,
    pub fit: FitMethod,
    pub points: Vec<PointDiagnostics>,
}

/// Compares two inference models against the true posterior. Each point
/// gets one MAP (multi-start, seeded with both posterior means) and one
/// local Gaussian fit; points whose MAP search does not converge or whose
/// fit fails are excluded and counted. ELBO and KL are means over all
/// evaluated points; `d_MAP` and `r_MAP` over the retained ones.
pub fn posterior_eval(
    cfg: &PosteriorEvalConfig,
    data: &SyntheticDataset,
    vae: &InferenceModel,
    iavae: &InferenceModel,
    noise: &NoiseTable,
) -> Result<PosteriorEvalResult> {
    let n = cfg.points.map_or(data.len(), |p| p.min(data.len()));
    let subset = data.truncated(n);
    let elbo_v = per_point_elbo(vae, &subset, noise)?;
    let elbo_i = per_point_elbo(iavae, &subset, noise)?;
    let model = LatentModel::oracle(data.sigma);
    let outcomes: Vec<Result<Option<PointDiagnostics>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &subset.x[i];
            let mv = vae.posterior(x)?.mean;
            let mi = iavae.posterior(x)?.mean;
            let (mv, mi) = ([mv[0], mv[1]], [mi[0], mi[1]]);
            let search = MapSearch {
                seed: cfg.map.seed.wrapping_add(i as u64),
                ..cfg.map.clone()
            };
            let map = find_map(&model, x, &[mv, mi], &search)?;
            if !map.converged {
                return Ok(None);
            }
            let fit = match cfg.fit {
                FitMethod::Laplace => laplace_fit(&model, x, map.z),
                FitMethod::MomentMatched => moment_matched_fit(&model, x, map.z, 1.5, 201),
            };
            let Ok(fit) = fit else {
                return Ok(None);
            };
            Ok(Some(PointDiagnostics {
                index: i,
                d_map_vae: mahalanobis(mv, &fit),
                d_map_iavae: mahalanobis(mi, &fit),
                r_map_vae: density_ratio(&model, mv, x, map.z),
                r_map_iavae: density_ratio(&model, mi, x, map.z),
                elbo_gap: elbo_i[i].elbo - elbo_v[i].elbo,
            }))
        })
        .collect();
    let mut points = Vec::with_capacity(n);
    for o in outcomes {
        if let Some(d) = o? {
            points.push(d);
        }
    }
    let kept = points.len().max(1) as f64;
    let summary = |elbos: &[crate::vae::ElboEstimate], d: fn(&PointDiagnostics) -> f64, r: fn(&PointDiagnostics) -> f64| {
        let elbo = elbos.iter().map(|e| e.elbo).sum::<f64>() / n as f64;
        ModelSummary {
            elbo,
            elbo_no_const: elbo_without_constant(elbo, data.sigma),
            kl: elbos.iter().map(|e| e.kl).sum::<f64>() / n as f64,
            d_map: points.iter().map(d).sum::<f64>() / kept,
            r_map: points.iter().map(r).sum::<f64>() / kept,
        }
    };
    let vae_summary = summary(&elbo_v, |p| p.d_map_vae, |p| p.r_map_vae);
    let ia_summary = summary(&elbo_i, |p| p.d_map_iavae, |p| p.r_map_iavae);
    Ok(PosteriorEvalResult {
        vae: vae_summary,
        iavae: ia_summary,
        evaluated: n,
        excluded: n - points.len(),
        fit: cfg.fit,
        points,
    })
}

/// Writes a posterior heatmap for dataset point `index` with the true
/// latent, the MAP, and both posterior means as markers.
pub fn export_grid(
    cfg: &GridConfig,
    map_cfg: &MapSearch,
    data: &SyntheticDataset,
    index: usize,
    vae: &InferenceModel,
    iavae: &InferenceModel,
    path: &Path,
) -> Result<()> {
    let x = data
        .x
        .get(index)
        .ok_or_else(|| Error::invalid(format!("grid example {index} outside the dataset")))?;
    let model = LatentModel::oracle(data.sigma);
    let mv = vae.posterior(x)?.mean;
    let mi = iavae.posterior(x)?.mean;
    let (mv, mi) = ([mv[0], mv[1]], [mi[0], mi[1]]);
    let map = find_map(&model, x, &[mv, mi], map_cfg)?;
    let grid = posterior_grid(&model, x, cfg.bounds, cfg.resolution)?;
    let marker = |label: &str, z: [f64; 2]| GridMarker {
        label: label.to_string(),
        z,
    };
    let header = GridHeader {
        bounds: cfg.bounds,
        resolution: cfg.resolution,
        x: *x,
        sigma: data.sigma,
        markers: vec![
            marker("z_true", data.z_true[index]),
            marker("z_map", map.z),
            marker("mean_vae", mv),
            marker("mean_iavae", mi),
        ],
    };
    grid.write_csv(path, &header)
}

pub fn write_posterior_eval(result: &PosteriorEvalResult, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("points.csv"))?;
    for p in &result.points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(dir.join("points.csv"), e))?;

    let mut w = csv::Writer::from_path(dir.join("table.csv"))?;
    w.write_record(["model", "elbo", "kl", "elbo_no_const", "d_map", "r_map"])?;
    for (name, s) in [("vae", &result.vae), ("ia-vae", &result.iavae)] {
        w.write_record([
            name.to_string(),
            s.elbo.to_string(),
            s.kl.to_string(),
            s.elbo_no_const.to_string(),
            s.d_map.to_string(),
            s.r_map.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("table.csv"), e))?;

    let mut text = format!(
        "{:>8}  {:>16}  {:>9}  {:>7}  {:>7}\n",
        "model", "ELBO (KL)", "ELBO*", "d_MAP", "r_MAP"
    );
    for (name, s) in [("VAE", &result.vae), ("IA-VAE", &result.iavae)] {
        text.push_str(&format!(
            "{:>8}  {:>16}  {:>9.3}  {:>7.3}  {:>7.3}\n",
            name,
            format!("{:.3} ({:.2})", s.elbo, s.kl),
            s.elbo_no_const,
            s.d_map,
            s.r_map
        ));
    }
    text.push_str(&format!(
        "points evaluated: {}, excluded (unconverged MAP or failed fit): {}, fit: {:?}\n* omits the likelihood constant\n",
        result.evaluated, result.excluded, result.fit
    ));
    std::fs::write(dir.join("table.txt"), text).map_err(|e| Error::io(dir.join("table.txt"), e))?;
    let summary = serde_json::json!({
        "vae": result.vae,
        "iavae": result.iavae,
        "evaluated": result.evaluated,
        "excluded": result.excluded,
        "fit": result.fit,
    });
    write_json(dir.join("summary.json"), &summary)
}

/// Default checkpoint locations written by `cmd_train`.
pub fn default_checkpoints(cfg: &ExperimentConfig, base_seed: u64) -> (PathBuf, PathBuf) {
    let exp = cfg.out_dir.join("train");
    (
        run_dir(&exp, base_seed, RunId::Vae).join("checkpoint.json"),
        run_dir(&exp, base_seed, RunId::IaVae(cfg.iavae_seeds[0])).join("checkpoint.json"),
    )
}

pub fn cmd_posterior_eval(cfg: &ExperimentConfig, vae_path: &Path, iavae_path: &Path) -> Result<PosteriorEvalResult> {
    let data = cfg.dataset()?;
    let vae = load_model(vae_path)?;
    let iavae = load_model(iavae_path)?;
    let exp = cfg.experiment_dir("posterior-eval");
    std::fs::create_dir_all(&exp).map_err(|e| Error::io(&exp, e))?;
    let noise = cfg.eval_noise(data.len());
    let result = posterior_eval(&cfg.posterior, &data, &vae, &iavae, &noise)?;
    write_posterior_eval(&result, &exp)?;
    for &i in &cfg.posterior.grid.example_points {
        export_grid(
            &cfg.posterior.grid,
            &cfg.posterior.map,
            &data,
            i,
            &vae,
            &iavae,
            &exp.join(format!("grid_{i}.csv")),
        )?;
    }
    Ok(result)
}

/// One trained model of the capacity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub mode: Mode,
    pub hidden_width: usize,
    pub parameters: usize,
    pub seed: u64,
    pub elbo: f64,
    pub elbo_no_const: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacitySweep {
    pub runs: Vec<CapacityRow>,
    /// Best of the sweep seeds per width, in width order.
    pub best: Vec<CapacityRow>,
    /// IA-VAE reference on the configured base width.
    pub iavae: CapacityRow,
}

/// VAEs of every configured width (best of the sweep seeds), plus one
/// IA-VAE on the best base encoder of the configured training width.
pub fn capacity_sweep(cfg: &ExperimentConfig, data: &SyntheticDataset, exp_dir: &Path) -> Result<CapacitySweep> {
    let base_width = cfg.train.hidden_width;
    let mut widths = cfg.widths.clone();
    if !widths.contains(&base_width) {
        widths.push(base_width);
    }
    let jobs: Vec<(usize, u64)> = widths
        .iter()
        .flat_map(|&h| cfg.sweep_seeds.iter().map(move |&s| (h, s)))
        .collect();
    let results: Vec<Result<(InferenceModel, RunRecord)>> = jobs
        .par_iter()
        .map(|&(h, s)| {
            let tc = TrainConfig {
                hidden_width: h,
                ..cfg.train.clone()
            };
            execute_run(&tc, data, &run_dir(&exp_dir.join(format!("h{h}")), s, RunId::Vae), s, RunId::Vae, None)
        })
        .collect();
    let mut models = Vec::with_capacity(results.len());
    for r in results {
        models.push(r?);
    }
    let row = |rec: &RunRecord, params: usize, seed: u64| CapacityRow {
        mode: rec.mode,
        hidden_width: rec.hidden_width,
        parameters: params,
        seed,
        elbo: rec.elbo,
        elbo_no_const: rec.elbo_no_const,
    };
    let runs: Vec<CapacityRow> = models
        .iter()
        .map(|(_, rec)| row(rec, rec.inference_parameters(), rec.base_seed))
        .collect();
    let mut best = Vec::new();
    for &h in &cfg.widths {
        if let Some(b) = runs
            .iter()
            .filter(|r| r.hidden_width == h)
            .max_by(|a, b| a.elbo.total_cmp(&b.elbo))
        {
            best.push(b.clone());
        }
    }
    let (base_model, base_rec) = models
        .iter()
        .filter(|(_, rec)| rec.hidden_width == base_width)
        .max_by(|a, b| a.1.elbo.total_cmp(&b.1.elbo))
        .expect("base width is always trained");
    let ia_seed = cfg.iavae_seeds[0];
    let ia_dir = run_dir(&exp_dir.join("iavae"), base_rec.base_seed, RunId::IaVae(ia_seed));
    let (_, ia_rec) = execute_run(
        &cfg.train,
        data,
        &ia_dir,
        base_rec.base_seed,
        RunId::IaVae(ia_seed),
        Some(base_model.base()),
    )?;
    let iavae = row(&ia_rec, ia_rec.inference_parameters(), ia_seed);
    Ok(CapacitySweep { runs, best, iavae })
}

pub fn write_capacity(sweep: &CapacitySweep, dir: &Path) -> Result<()> {
    for (name, rows) in [("capacity_runs.csv", &sweep.runs), ("capacity.csv", &sweep.best)] {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        for r in rows.iter().chain(std::iter::once(&sweep.iavae)) {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(dir.join(name), e))?;
    }
    Ok(())
}

pub fn cmd_capacity_sweep(cfg: &ExperimentConfig) -> Result<CapacitySweep> {
    let data = cfg.dataset()?;
    let exp = cfg.experiment_dir("capacity-sweep");
    std::fs::create_dir_all(&exp).map_err(|e| Error::io(&exp, e))?;
    let sweep = capacity_sweep(cfg, &data, &exp)?;
    write_capacity(&sweep, &exp)?;
    Ok(sweep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub index: usize,
    pub elbo_model: f64,
    pub elbo_star: f64,
    pub gap: f64,
}

/// Per-point amortization gap `ELBO*(x) - ELBO_model(x)`, where `ELBO*`
/// optimizes the variational parameters of each point directly, starting
/// from the model's output and using the same Monte Carlo draws.
pub fn amortization_gap(cfg: &GapConfig, model: &InferenceModel, data: &SyntheticDataset, noise: &NoiseTable) -> Result<Vec<GapRow>> {
    let n = cfg.points.map_or(data.len(), |p| p.min(data.len()));
    if noise.points() < n {
        return Err(Error::invalid("noise table too small for the gap evaluation"));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &data.x[i];
            let q = model.posterior(x)?;
            let elbo_model = elbo_for_posterior(x, &q, noise.row(i), data.sigma)?.elbo;
            let (_, elbo_star) = per_instance_optimal_elbo(x, &q, cfg.steps, cfg.learning_rate, noise.row(i), data.sigma)?;
            Ok(GapRow {
                index: i,
                elbo_model,
                elbo_star,
                gap: elbo_star - elbo_model,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub points: usize,
    pub mean_gap_vae: f64,
    pub mean_gap_iavae: f64,
    pub min_gap_vae: f64,
    pub min_gap_iavae: f64,
}

pub fn summarize_gaps(vae: &[GapRow], iavae: &[GapRow]) -> GapSummary {
    let mean = |r: &[GapRow]| r.iter().map(|g| g.gap).sum::<f64>() / r.len().max(1) as f64;
    let min = |r: &[GapRow]| r.iter().map(|g| g.gap).fold(f64::INFINITY, f64::min);
    GapSummary {
        points: vae.len(),
        mean_gap_vae: mean(vae),
        mean_gap_iavae: mean(iavae),
        min_gap_vae: min(vae),
        min_gap_iavae: min(iavae),
    }
}

pub fn cmd_gap(cfg: &ExperimentConfig, vae_path: &Path, iavae_path: &Path) -> Result<GapSummary> {
    let data = cfg.dataset()?;
    let vae = load_model(vae_path)?;
    let iavae = load_model(iavae_path)?;
    let exp = cfg.experiment_dir("gap");
    std::fs::create_dir_all(&exp).map_err(|e| Error::io(&exp, e))?;
    let noise = cfg.eval_noise(data.len());
    let gv = amortization_gap(&cfg.gap, &vae, &data, &noise)?;
    let gi = amortization_gap(&cfg.gap, &iavae, &data, &noise)?;
    let mut w = csv::Writer::from_path(exp.join("gap.csv"))?;
    w.write_record([
        "index",
        "elbo_vae",
        "elbo_star_vae",
        "gap_vae",
        "elbo_iavae",
        "elbo_star_iavae",
        "gap_iavae",
    ])?;
    for (a, b) in gv.iter().zip(&gi) {
        w.write_record([
            a.index.to_string(),
            a.elbo_model.to_string(),
            a.elbo_star.to_string(),
            a.gap.to_string(),
            b.elbo_model.to_string(),
            b.elbo_star.to_string(),
            b.gap.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(exp.join("gap.csv"), e))?;
    let summary = summarize_gaps(&gv, &gi);
    write_json(exp.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Reassembles the robustness table and significance report from record
/// files and collects the summaries of the other protocols that exist
/// under the output directory into `report.txt`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let mut text = String::new();
    let rob = cfg.experiment_dir("robustness");
    if rob.exists() {
        let rows = robustness_rows_from_records(&rob, &cfg.base_seeds, &cfg.iavae_seeds)?;
        write_robustness_table(&rows, cfg.dataset.sigma, &rob)?;
        text.push_str("== seed robustness ==\n");
        text.push_str(&std::fs::read_to_string(rob.join("table.txt")).map_err(|e| Error::io(rob.join("table.txt"), e))?);
        match paired_from_rows(&rows).and_then(|p| significance(&p, cfg.alpha)) {
            Ok(r) => {
                write_json(rob.join("significance.json"), &r)?;
                text.push_str(&format!("{}\n", r.hypotheses()));
            }
            Err(e) => text.push_str(&format!("significance unavailable: {e}\n")),
        }
    }
    for (name, file) in [
        ("posterior accuracy", cfg.out_dir.join("posterior-eval").join("table.txt")),
        ("amortization gap", cfg.out_dir.join("gap").join("summary.json")),
        ("capacity sweep", cfg.out_dir.join("capacity-sweep").join("capacity.csv")),
    ] {
        if file.exists() {
            text.push_str(&format!("\n== {name} ==\n"));
            text.push_str(&std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?);
        }
    }
    if text.is_empty() {
        return Err(Error::invalid(format!("no results found under {}", cfg.out_dir.display())));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("report.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
