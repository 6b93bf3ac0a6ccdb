//! Commands behind the `c2vae` binary: dataset generation, training,
//! evaluation, latent traversals, γ sweeps and copula ablations.

mod manifest;
pub mod pgm;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use c2vae::data::{generate, FactorDataset, FactorSpec, DEFAULT_RESOLUTION};
use c2vae::metrics::{score_representation, threads_from_env, FacConfig, MetricReport, REPORT_HEADER};
use c2vae::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelBundle};
use c2vae::tensor::{sigmoid, Tensor};
use c2vae::training::{encode_dataset, train, NegativeSource, StepLog, TrainConfig, TrainEvent, STEP_LOG_HEADER};

pub use manifest::{unix_now, RunManifest, MANIFEST_FILE};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("training diverged at step {step}: non-finite {what}")]
    Diverged { step: usize, what: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Internal(c2vae::Error),
}

impl CliError {
    /// 2 for usage and configuration errors, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Io(_) | CliError::Internal(_) => 1,
        }
    }
}

impl From<c2vae::Error> for CliError {
    fn from(e: c2vae::Error) -> Self {
        use c2vae::Error as E;
        match e {
            E::Diverged { step, what } => CliError::Diverged { step, what },
            E::Io(io) => CliError::Io(io),
            E::Config(m) | E::Invalid(m) | E::Format(m) => CliError::Usage(m),
            other => CliError::Internal(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const CURVES_FILE: &str = "curves.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep_gamma.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRID_FILE: &str = "grid.pgm";
pub const NA: &str = "NA";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenDataArgs {
    pub shapes: usize,
    pub scales: usize,
    pub pos_x: usize,
    pub pos_y: usize,
    pub orientation: bool,
    pub resolution: usize,
}

impl Default for GenDataArgs {
    fn default() -> Self {
        Self { shapes: 3, scales: 4, pos_x: 8, pos_y: 8, orientation: false, resolution: DEFAULT_RESOLUTION }
    }
}

pub fn gen_data(args: &GenDataArgs, out: &Path) -> Result<FactorDataset> {
    let spec = FactorSpec::sprites(args.shapes, args.scales, args.pos_x, args.pos_y, args.orientation)?;
    let data = generate(&spec, args.resolution)?;
    data.save(out)?;
    log::info!("wrote {} images to {}", data.len(), out.display());
    Ok(data)
}

pub fn load_data(dir: &Path) -> Result<FactorDataset> {
    if !dir.join("images.ctf").is_file() || !dir.join("factors.ctf").is_file() {
        return Err(CliError::Usage(format!("{} holds no dataset (images.ctf, factors.ctf)", dir.display())));
    }
    Ok(FactorDataset::load(dir)?)
}

/// Config file (optional) followed by `key=value` overrides.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            TrainConfig::parse_text(&text)?
        }
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoints/step_{step:07}.ckpt")
}

/// Trains into `out`: curves.csv, config.txt, periodic and final checkpoints
/// and a run manifest. A diverged run keeps its partial curve and manifest
/// and returns [`CliError::Diverged`].
pub fn train_run(cfg: &TrainConfig, data: &FactorDataset, out: &Path) -> Result<(ModelBundle, Vec<StepLog>)> {
    fs::create_dir_all(out)?;
    if cfg.checkpoint_every > 0 {
        fs::create_dir_all(out.join("checkpoints"))?;
    }
    let mut manifest = RunManifest::start("train", cfg.seed, cfg.echo());
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let mut curves = BufWriter::new(File::create(out.join(CURVES_FILE))?);
    writeln!(curves, "{STEP_LOG_HEADER}")?;
    manifest.outputs.extend([CONFIG_FILE.to_string(), CURVES_FILE.to_string()]);

    let mut saved = Vec::new();
    let result = train(cfg, data, &mut |event| {
        match event {
            TrainEvent::Step(row) => writeln!(curves, "{}", row.csv_row())?,
            TrainEvent::Checkpoint { step, model } => {
                let name = checkpoint_name(step);
                save_checkpoint(out.join(&name), &Checkpoint { model: model.clone(), step: step as u64, config: cfg.echo() })?;
                saved.push(name);
            }
        }
        Ok(())
    });
    curves.flush()?;
    drop(curves);
    manifest.outputs.extend(saved);
    match result {
        Ok(run) => {
            let ckpt = Checkpoint { model: run.model, step: run.logs.len() as u64, config: cfg.echo() };
            save_checkpoint(out.join(FINAL_CHECKPOINT), &ckpt)?;
            manifest.outputs.push(FINAL_CHECKPOINT.into());
            manifest.finish(out, "ok")?;
            Ok((ckpt.model, run.logs))
        }
        Err(e) => {
            let e = CliError::from(e);
            manifest.finish(out, &format!("failed: {e}"))?;
            Err(e)
        }
    }
}

pub fn open_checkpoint(path: &Path, data: &FactorDataset) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    let ckpt = load_checkpoint(path)?;
    if ckpt.model.config.input != data.pixels() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} pixels per image but the dataset has {}",
            ckpt.model.config.input,
            data.pixels()
        )));
    }
    Ok(ckpt)
}

pub fn fac_config(seed: u64) -> FacConfig {
    FacConfig { seed, threads: threads_from_env(), ..FacConfig::default() }
}

/// Metric reports of one model under `seeds` metric-protocol seeds
/// `seed, seed + 1, ...`.
pub fn eval_model(model: &ModelBundle, data: &FactorDataset, seeds: usize, seed: u64) -> Result<Vec<(u64, MetricReport)>> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let enc = encode_dataset(model, data)?;
    (0..seeds as u64)
        .map(|i| Ok((seed + i, score_representation(&enc.means, data, &fac_config(seed + i), enc.recon, enc.kl)?)))
        .collect()
}

/// CSV with a leading `seed` column; more than one row gets a `mean±std` summary.
pub fn eval_csv(rows: &[(u64, MetricReport)]) -> String {
    let mut out = format!("seed,{REPORT_HEADER}\n");
    for (s, r) in rows {
        out += &format!("{s},{}\n", r.csv_row());
    }
    if rows.len() > 1 {
        let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
        let (mean, std) = MetricReport::summarize(&reports);
        let cells: Vec<String> = mean.values().iter().zip(std.values()).map(|(m, s)| format!("{m}±{s}")).collect();
        out += &format!("mean±std,{}\n", cells.join(","));
    }
    out
}

pub struct TraverseArgs {
    pub anchor: usize,
    /// Latent dimensions to sweep; empty means all.
    pub dims: Vec<usize>,
    pub steps: usize,
    pub range: f64,
}

/// Offsets `linspace(-range, range, steps)`; a single step is offset 0.
pub fn traversal_offsets(steps: usize, range: f64) -> Vec<f64> {
    if steps == 1 {
        return vec![0.0];
    }
    (0..steps).map(|i| -range + 2.0 * range * i as f64 / (steps - 1) as f64).collect()
}

/// Decoded pixel probabilities: one row per dim, one image per offset.
pub fn traversal(model: &ModelBundle, data: &FactorDataset, args: &TraverseArgs) -> Result<Vec<Vec<Vec<f64>>>> {
    let d = model.latent();
    if args.anchor >= data.len() {
        return Err(CliError::Usage(format!("anchor {} is outside the {} images", args.anchor, data.len())));
    }
    if let Some(&bad) = args.dims.iter().find(|&&k| k >= d) {
        return Err(CliError::Usage(format!("latent dim {bad} out of range (model has {d})")));
    }
    if args.steps == 0 || !(args.range >= 0.0) || !args.range.is_finite() {
        return Err(CliError::Usage("traversal needs steps >= 1 and a finite range >= 0".into()));
    }
    let dims: Vec<usize> = if args.dims.is_empty() { (0..d).collect() } else { args.dims.clone() };
    let mu = model.encode(data.image(args.anchor))?.mu;
    let offsets = traversal_offsets(args.steps, args.range);
    let mut rows = Vec::with_capacity(dims.len());
    for &k in &dims {
        let mut z = Vec::with_capacity(offsets.len() * d);
        for off in &offsets {
            let mut v = mu.clone();
            v[k] += off;
            z.extend(v);
        }
        let logits = model.decode_batch(&Tensor::new(vec![offsets.len(), d], z)?)?;
        rows.push((0..offsets.len()).map(|i| logits.row(i).iter().map(|&l| sigmoid(l)).collect()).collect());
    }
    Ok(rows)
}

/// Writes `traverse_d{dim}_s{step}.pgm` per cell and the tiled `grid.pgm`.
pub fn traverse_run(model: &ModelBundle, data: &FactorDataset, args: &TraverseArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let rows = traversal(model, data, args)?;
    let dims: Vec<usize> = if args.dims.is_empty() { (0..model.latent()).collect() } else { args.dims.clone() };
    let side = data.resolution;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut cells = Vec::new();
    for (row, &k) in rows.iter().zip(&dims) {
        for (s, img) in row.iter().enumerate() {
            let px: Vec<u8> = img.iter().map(|&p| pgm::gray(p)).collect();
            let path = out.join(format!("traverse_d{k}_s{s}.pgm"));
            pgm::write_pgm(&path, side, side, &px)?;
            files.push(path);
            cells.push(px);
        }
    }
    let (w, h, grid) = pgm::tile(&cells, dims.len(), args.steps, side);
    let path = out.join(GRID_FILE);
    pgm::write_pgm(&path, w, h, &grid)?;
    files.push(path);
    Ok(files)
}

/// A small string table: header plus rows, written as CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",") + "\n";
        for r in &self.rows {
            out += &(r.join(",") + "\n");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines.next().ok_or_else(|| CliError::Usage("empty table".into()))?.split(',').map(String::from).collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        if let Some(r) = rows.iter().find(|r| r.len() != header.len()) {
            return Err(CliError::Usage(format!("row {r:?} does not match header {header:?}")));
        }
        Ok(Self { header, rows })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

/// Trains into `dir`, evaluates with metric seed `cfg.seed`, writes
/// `metrics.csv`. Failures are logged and returned as `None`.
pub fn run_and_score(cfg: &TrainConfig, data: &FactorDataset, dir: &Path) -> Option<MetricReport> {
    let attempt = || -> Result<MetricReport> {
        let (model, _) = train_run(cfg, data, dir)?;
        let enc = encode_dataset(&model, data)?;
        let report = score_representation(&enc.means, data, &fac_config(cfg.seed), enc.recon, enc.kl)?;
        fs::write(dir.join(METRICS_FILE), report.to_csv())?;
        Ok(report)
    };
    match attempt() {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("run in {} failed: {e}", dir.display());
            None
        }
    }
}

/// Runs `jobs` at a time on worker threads; results keep input order.
fn run_all(configs: &[(TrainConfig, PathBuf)], data: &FactorDataset, jobs: usize) -> Vec<Option<MetricReport>> {
    let jobs = jobs.max(1);
    let mut results = Vec::with_capacity(configs.len());
    for chunk in configs.chunks(jobs) {
        let part: Vec<Option<MetricReport>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|(cfg, dir)| s.spawn(move || run_and_score(cfg, data, dir))).collect();
            handles.into_iter().map(|h| h.join().unwrap_or(None)).collect()
        });
        results.extend(part);
    }
    results
}

fn gamma_dir(g: f64) -> String {
    format!("gamma_{g}")
}

/// One training run per γ; the Table 4 schema `gamma,SAP,KL,recon` with NA
/// for failed runs.
pub fn sweep_gamma(base: &TrainConfig, data: &FactorDataset, gammas: &[f64], out: &Path, jobs: usize) -> Result<Table> {
    if gammas.is_empty() {
        return Err(CliError::Usage("no gammas given".into()));
    }
    let mut configs = Vec::new();
    for &g in gammas {
        let cfg = TrainConfig { gamma: g, ..base.clone() };
        cfg.validate()?;
        configs.push((cfg, out.join(gamma_dir(g))));
    }
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::start("sweep-gamma", base.seed, base.echo());
    let results = run_all(&configs, data, jobs);
    let rows = gammas
        .iter()
        .zip(&results)
        .map(|(g, r)| vec![g.to_string(), cell(r.map(|r| r.sap)), cell(r.map(|r| r.kl)), cell(r.map(|r| r.recon))])
        .collect();
    let table = Table { header: ["gamma", "SAP", "KL", "recon"].map(String::from).to_vec(), rows };
    fs::write(out.join(SWEEP_FILE), table.to_csv())?;
    manifest.outputs.push(SWEEP_FILE.into());
    manifest.outputs.extend(existing_outputs(out, &configs));
    manifest.finish(out, "ok")?;
    Ok(table)
}

pub const ABLATION_VARIANTS: [(&str, NegativeSource); 4] = [
    ("C2VAE-G", NegativeSource::CopulaGaussian),
    ("C2VAE-I", NegativeSource::Permute),
    ("C2VAE-S", NegativeSource::CopulaStudent),
    ("C2VAE-M", NegativeSource::CopulaGmm),
];

/// The four negative sources under one base config and one data seed; the
/// Table 3 schema with rows SAP, KL, recon.
pub fn ablate(base: &TrainConfig, data: &FactorDataset, out: &Path, jobs: usize) -> Result<Table> {
    let mut configs = Vec::new();
    for (name, source) in ABLATION_VARIANTS {
        let cfg = TrainConfig { negative_source: Some(source), data_seed: Some(base.data_seed()), ..base.clone() };
        cfg.validate()?;
        configs.push((cfg, out.join(name)));
    }
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::start("ablate", base.seed, base.echo());
    let results = run_all(&configs, data, jobs);
    let metric = |name: &str, f: fn(&MetricReport) -> f64| {
        let mut row = vec![name.to_string()];
        row.extend(results.iter().map(|r| cell(r.as_ref().map(f))));
        row
    };
    let mut header = vec!["metric".to_string()];
    header.extend(ABLATION_VARIANTS.iter().map(|(n, _)| n.to_string()));
    let table = Table { header, rows: vec![metric("SAP", |r| r.sap), metric("KL", |r| r.kl), metric("recon", |r| r.recon)] };
    fs::write(out.join(ABLATION_FILE), table.to_csv())?;
    manifest.outputs.push(ABLATION_FILE.into());
    manifest.outputs.extend(existing_outputs(out, &configs));
    manifest.finish(out, "ok")?;
    Ok(table)
}

fn existing_outputs(out: &Path, configs: &[(TrainConfig, PathBuf)]) -> Vec<String> {
    let mut found = Vec::new();
    for (_, dir) in configs {
        for name in [CURVES_FILE, FINAL_CHECKPOINT, METRICS_FILE, MANIFEST_FILE] {
            let p = dir.join(name);
            if p.is_file() {
                if let Ok(rel) = p.strip_prefix(out) {
                    found.push(rel.to_string_lossy().into_owned());
                }
            }
        }
    }
    found
}
