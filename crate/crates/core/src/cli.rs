//! Command-line front end. Every command writes its outputs and a
//! `run.json` manifest (resolved arguments and seed) into `--out`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndnet::Tensor;
use rand::seq::index::sample as sample_indices;
use serde::Serialize;
use serde_json::json;

use crate::data::{gen_textures, Dataset, SigmaRange, TextureClass};
use crate::divergence::{
    default_sigma_grid, embedding_check, embedding_csv, EmbeddingConfig, ModelDistanceConfig, MonteCarlo, MIN_PAIRS,
};
use crate::error::LabError;
use crate::geometry::{adjusted_rand_index, cluster_separation, kmeans, nearest_neighbors, Metric, Separation};
use crate::imageio::{load_folder, read_dataset, tile_row, write_dataset, write_image, write_json, ImageFormat, MANIFEST_FILE};
use crate::representation::{
    block_sparsity_profile, channel_selectivity, channel_stats, image_seed, phi, phi_dataset, stability_curves,
    top_activating_images,
};
use crate::sampler::{
    make_schedule, reconstruct, sample_unconditional, trajectory_csv, GuidanceConfig, Schedule, ScoreStep,
};
use crate::seed::{derive_seed, rng_for};
use crate::stats::median;
use crate::trainer::{load_checkpoint, loss_log_csv, save_checkpoint, train, HeldOut, TrainConfig, TrainState};
use crate::unet::{Probe, UNetConfig, UNetModel};

/// Noise level at which φ is computed unless `--sigma` says otherwise.
pub const DEFAULT_PHI_SIGMA: f64 = 0.2;
pub const DEFAULT_PHI_DRAWS: usize = 8;
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Parser, Serialize)]
#[command(name = "unetlab", version, about = "Train and dissect small UNet blind denoisers")]
pub struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic texture dataset or ingest an image folder.
    GenData(GenDataArgs),
    /// Train a denoiser.
    Train(TrainArgs),
    /// Representation analyses.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// K-means on φ with separation statistics.
    Cluster(ClusterArgs),
    /// Nearest neighbours of one image in φ or pixel space.
    Neighbors(NeighborsArgs),
    /// Unconditional samples.
    Sample(SampleArgs),
    /// Stochastic reconstructions from one image's representation.
    Reconstruct(ReconstructArgs),
    /// Compare ‖Δφ‖² with the conditional-density distance over image pairs.
    EmbedCheck(EmbedArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "gratings,checker,blobs,speckle")]
    pub classes: Vec<TextureClass>,
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value = "pnm")]
    pub format: ImageFormat,
    /// Ingest this folder of PGM/PPM/PNG files instead of generating textures.
    #[arg(long)]
    pub from_folder: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelSource {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset scored after every epoch.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs between learning-rate halvings.
    #[arg(long, default_value_t = 100)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 0.01)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 2)]
    pub encoder_blocks: usize,
    /// Continue from this checkpoint up to `--epochs` in total.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PhiArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelSource,
    /// Noise level of the analysis.
    #[arg(long, default_value_t = DEFAULT_PHI_SIGMA)]
    pub sigma: f64,
    /// Noise draws averaged into φ.
    #[arg(long, default_value_t = DEFAULT_PHI_DRAWS)]
    pub n_draws: usize,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeCommand {
    /// PR histograms of ā at every block input and output.
    Sparsity(PhiArgs),
    /// Per-channel selectivity of φ over the dataset.
    Selectivity {
        #[command(flatten)]
        common: PhiArgs,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Cosine of ā at a reference σ with ā across a σ grid, per probe.
    Stability {
        #[command(flatten)]
        common: PhiArgs,
        #[arg(long, default_value_t = 0.5)]
        sigma_ref: f64,
        #[arg(long, default_value_t = 11)]
        grid_points: usize,
        /// Images averaged into each curve.
        #[arg(long, default_value_t = 32)]
        images: usize,
    },
    /// Per-channel marginals, spatial sparsity and PCA at the middle block.
    Stats {
        #[command(flatten)]
        common: PhiArgs,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub common: PhiArgs,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    /// Images per exemplar grid.
    #[arg(long, default_value_t = 8)]
    pub exemplars: usize,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum NeighborMetric {
    Cosine,
    Euclidean,
    Pixel,
}

impl std::str::FromStr for NeighborMetric {
    type Err = LabError;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "euclidean" => Ok(Self::Euclidean),
            "pixel" => Ok(Self::Pixel),
            _ => Err(LabError::Invalid(format!("unknown metric '{s}' (cosine, euclidean or pixel)"))),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct NeighborsArgs {
    #[command(flatten)]
    pub common: PhiArgs,
    /// Dataset index of the target image.
    #[arg(long)]
    pub target: usize,
    #[arg(long, default_value = "cosine")]
    pub metric: NeighborMetric,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ScheduleArgs {
    /// Number of noise levels.
    #[arg(long = "T", default_value_t = 40)]
    pub t: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = 0.01)]
    pub sigma_min: f64,
    #[arg(long, default_value = "ancestral")]
    pub score_step: ScoreStep,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset whose mean image starts the chains (zero when absent).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 9)]
    pub n: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value = "pnm")]
    pub format: ImageFormat,
}

#[derive(Debug, Args, Serialize)]
pub struct GuidanceArgs {
    #[arg(long, default_value_t = GuidanceConfig::default().lr)]
    pub guidance_lr: f64,
    #[arg(long, default_value_t = GuidanceConfig::default().max_iterations)]
    pub guidance_iters: usize,
    #[arg(long, default_value_t = GuidanceConfig::default().tolerance)]
    pub guidance_tol: f64,
    /// Reuse one conditioner noise draw at every step.
    #[arg(long)]
    pub fixed_noise: bool,
    /// Skip matching; the run then equals `sample` with the same seed.
    #[arg(long)]
    pub no_guidance: bool,
}

impl GuidanceArgs {
    fn config(&self) -> GuidanceConfig {
        GuidanceConfig {
            lr: self.guidance_lr,
            max_iterations: if self.no_guidance { 0 } else { self.guidance_iters },
            tolerance: self.guidance_tol,
            n_draws: 1,
            fixed_conditioner_noise: self.fixed_noise,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset index, image name (`img_00042`, with or without extension) or image path.
    #[arg(long)]
    pub conditioner: String,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    /// Noise level and draws of the φ used to report the match.
    #[arg(long, default_value_t = DEFAULT_PHI_SIGMA)]
    pub phi_sigma: f64,
    #[arg(long, default_value_t = DEFAULT_PHI_DRAWS)]
    pub phi_draws: usize,
    #[arg(long, default_value = "pnm")]
    pub format: ImageFormat,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: PhiArgs,
    #[arg(long, default_value_t = 30)]
    pub pairs: usize,
    /// Conditional samples per side.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
}

/// Usage errors exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(LabError),
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::Runtime(e)
    }
}

impl From<ndnet::NdError> for CliError {
    fn from(e: ndnet::NdError) -> Self {
        CliError::Runtime(e.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => 2,
                CliError::Runtime(_) => 1,
            }
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::GenData(a) => gen_data(a, seed, cli),
        Command::Train(a) => cmd_train(a, seed, cli),
        Command::Analyze { what } => analyze(what, seed, cli),
        Command::Cluster(a) => cluster(a, seed, cli),
        Command::Neighbors(a) => neighbors(a, seed, cli),
        Command::Sample(a) => sample(a, seed, cli),
        Command::Reconstruct(a) => cmd_reconstruct(a, seed, cli),
        Command::EmbedCheck(a) => embed(a, seed, cli),
    }
}

/// Holds `<out>/.lock` for the lifetime of a command.
struct OutputDir {
    dir: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    fn open(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let lock = dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| LabError::io(&lock, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            lock,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> CliResult<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| LabError::io(&p, e))?;
        Ok(())
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        write_json(&self.path(name), value)?;
        Ok(())
    }

    /// Writes the run manifest; called last so its presence marks a finished run.
    fn finish(self, cli: &Cli, outputs: &[String]) -> CliResult<()> {
        let manifest = json!({
            "program": "unetlab",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cli.seed,
            "command": &cli.command,
            "outputs": outputs,
        });
        self.json(RUN_MANIFEST, &manifest)?;
        fs::remove_file(&self.lock).map_err(|e| LabError::io(&self.lock, e))?;
        Ok(())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn require_dir(p: &Path, what: &str) -> CliResult<()> {
    if !p.is_dir() {
        return usage(format!("{what} '{}' is not a directory", p.display()));
    }
    Ok(())
}

fn require_file(p: &Path, what: &str) -> CliResult<()> {
    if !p.is_file() {
        return usage(format!("{what} '{}' does not exist", p.display()));
    }
    Ok(())
}

fn load_data(p: &Path) -> CliResult<Dataset> {
    require_dir(p, "dataset")?;
    if !p.join(MANIFEST_FILE).is_file() {
        return usage(format!("'{}' has no {MANIFEST_FILE}; create it with gen-data", p.display()));
    }
    Ok(read_dataset(p)?)
}

fn load_model(src: &ModelSource) -> CliResult<UNetModel> {
    require_file(&src.checkpoint, "checkpoint")?;
    Ok(load_checkpoint(&src.checkpoint)?.model)
}

fn gen_data(a: &GenDataArgs, seed: u64, cli: &Cli) -> CliResult<()> {
    let ds = match &a.from_folder {
        Some(dir) => {
            require_dir(dir, "image folder")?;
            load_folder(dir, a.channels, a.size)?
        }
        None => {
            if a.n == 0 || a.size == 0 || a.channels == 0 {
                return usage("--n, --size and --channels must be positive");
            }
            gen_textures(a.n, a.size, a.channels, &a.classes, derive_seed(seed, "gen-data"))?
        }
    };
    let out = OutputDir::open(&a.out)?;
    write_dataset(&a.out, &ds, a.format)?;
    out.finish(cli, &[MANIFEST_FILE.to_string()])
}

fn cmd_train(a: &TrainArgs, seed: u64, cli: &Cli) -> CliResult<()> {
    let data = load_data(&a.data)?;
    let heldout_data = a.heldout.as_deref().map(load_data).transpose()?;
    if a.epochs == 0 || a.batch_size == 0 || a.decay_every == 0 {
        return usage("--epochs, --batch-size and --decay-every must be positive");
    }
    let range = SigmaRange::new(a.sigma_min, a.sigma_max).map_err(|e| CliError::Usage(e.to_string()))?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr_init: a.lr,
        lr_decay_every: a.decay_every,
        sigma_range: range,
        seed: derive_seed(seed, "train"),
        ..TrainConfig::default()
    };
    let (mut model, mut state) = match &a.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            let ck = load_checkpoint(p)?;
            (ck.model, ck.state)
        }
        None => {
            let shape = data.image_shape();
            let unet = UNetConfig {
                in_channels: shape[0],
                image_size: shape[1],
                base_channels: a.base_channels,
                encoder_blocks: a.encoder_blocks,
                ..UNetConfig::desk()
            };
            let model = UNetModel::build(unet, derive_seed(seed, "model"))?;
            let state = TrainState::new(&model);
            (model, state)
        }
    };
    let heldout = heldout_data
        .as_ref()
        .map(|d| HeldOut::new(d, &range, derive_seed(seed, "heldout")))
        .transpose()?;
    let out = OutputDir::open(&a.out)?;
    train(&mut model, &data, heldout.as_ref(), &config, &mut state)?;
    save_checkpoint(&out.path("checkpoint.bin"), &model, &state, Some(&config))?;
    out.write("loss.csv", &loss_log_csv(&state.log))?;
    out.finish(cli, &["checkpoint.bin".into(), "loss.csv".into()])
}

fn check_phi_args(a: &PhiArgs) -> CliResult<()> {
    if !(a.sigma >= 0.0) || a.n_draws == 0 {
        return usage("--sigma must be nonnegative and --n-draws positive");
    }
    Ok(())
}

fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &v in values {
        let t = ((v - lo) / (hi - lo) * bins as f64).floor();
        h[(t.max(0.0) as usize).min(bins - 1)] += 1;
    }
    h
}

fn analyze(what: &AnalyzeCommand, seed: u64, cli: &Cli) -> CliResult<()> {
    match what {
        AnalyzeCommand::Sparsity(a) => {
            check_phi_args(a)?;
            let (model, data) = (load_model(&a.model)?, load_data(&a.data)?);
            let out = OutputDir::open(&a.out)?;
            let profile = block_sparsity_profile(&model, &data, a.sigma, derive_seed(seed, "analyze.sparsity"))?;
            let mut files = Vec::new();
            let mut summary = String::from("probe,channels,median_pr\n");
            for p in &profile {
                let mut t = String::from("bin_lo,bin_hi,count\n");
                for (i, c) in histogram(&p.prs, 20, 0.0, 1.0).iter().enumerate() {
                    t.push_str(&format!("{},{},{c}\n", i as f64 / 20.0, (i + 1) as f64 / 20.0));
                }
                let name = format!("sparsity_{}.csv", p.probe);
                out.write(&name, &t)?;
                files.push(name);
                summary.push_str(&format!("{},{},{}\n", p.probe, p.channels, p.median));
            }
            out.write("sparsity_summary.csv", &summary)?;
            files.push("sparsity_summary.csv".into());
            out.finish(cli, &files)
        }
        AnalyzeCommand::Selectivity { common: a, top_k } => {
            check_phi_args(a)?;
            let (model, data) = (load_model(&a.model)?, load_data(&a.data)?);
            if *top_k > data.len() {
                return usage(format!("--top-k {top_k} exceeds the {} images", data.len()));
            }
            let out = OutputDir::open(&a.out)?;
            let prof = channel_selectivity(&model, &data, a.sigma, a.n_draws, derive_seed(seed, "phi"))?;
            let mut t = String::from("channel,pr,mean_activation,selective,top_images,top_class_fraction\n");
            for ch in 0..prof.pr.len() {
                let top = top_activating_images(&prof, ch, *top_k)?;
                let frac = data.labels.as_ref().map(|l| {
                    let mut counts = std::collections::BTreeMap::new();
                    for &i in &top {
                        *counts.entry(l[i]).or_insert(0usize) += 1;
                    }
                    *counts.values().max().unwrap_or(&0) as f64 / top.len().max(1) as f64
                });
                t.push_str(&format!(
                    "{ch},{},{},{},{},{}\n",
                    prof.pr[ch].map(|p| p.to_string()).unwrap_or_default(),
                    prof.mean_activation[ch],
                    prof.is_selective(ch),
                    top.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "),
                    frac.map(|f| f.to_string()).unwrap_or_default()
                ));
            }
            out.write("selectivity.csv", &t)?;
            out.finish(cli, &["selectivity.csv".into()])
        }
        AnalyzeCommand::Stability {
            common: a,
            sigma_ref,
            grid_points,
            images,
        } => {
            check_phi_args(a)?;
            if *grid_points < 2 || *images == 0 {
                return usage("--grid-points must be at least 2 and --images positive");
            }
            let (model, data) = (load_model(&a.model)?, load_data(&a.data)?);
            let out = OutputDir::open(&a.out)?;
            let range = SigmaRange::default();
            let grid: Vec<f64> = (0..*grid_points)
                .map(|i| range.sigma_min + (range.sigma_max - range.sigma_min) * i as f64 / (*grid_points - 1) as f64)
                .collect();
            let probes: Vec<Probe> = Probe::all(model.config()).into_iter().filter(|p| p.is_post_relu()).collect();
            let count = (*images).min(data.len());
            let mut mean = vec![vec![0.0; grid.len()]; probes.len()];
            for i in 0..count {
                let c = stability_curves(&model, &data.images[i], *sigma_ref, &grid, a.n_draws, &probes, image_seed(seed, i))?;
                for (m, row) in mean.iter_mut().zip(&c) {
                    for (x, y) in m.iter_mut().zip(row) {
                        *x += y / count as f64;
                    }
                }
            }
            let mut t = String::from("probe,sigma,cosine\n");
            for (p, row) in probes.iter().zip(&mean) {
                for (s, c) in grid.iter().zip(row) {
                    t.push_str(&format!("{p},{s},{c}\n"));
                }
            }
            out.write("stability.csv", &t)?;
            out.finish(cli, &["stability.csv".into()])
        }
        AnalyzeCommand::Stats { common: a, bins } => {
            check_phi_args(a)?;
            if *bins == 0 {
                return usage("--bins must be positive");
            }
            let (model, data) = (load_model(&a.model)?, load_data(&a.data)?);
            let out = OutputDir::open(&a.out)?;
            let stats = channel_stats(&model, &data, a.sigma, *bins, derive_seed(seed, "analyze.stats"))?;
            let mut t = String::from("channel,spatial_pr,pca_components_90\n");
            for s in &stats {
                let k90 = s
                    .pca_cumulative
                    .as_ref()
                    .and_then(|c| c.iter().position(|&v| v >= 0.9).map(|k| k + 1));
                t.push_str(&format!(
                    "{},{},{}\n",
                    s.channel,
                    s.spatial_pr.map(|v| v.to_string()).unwrap_or_default(),
                    k90.map(|v| v.to_string()).unwrap_or_default()
                ));
            }
            out.write("channel_stats.csv", &t)?;
            out.json("channel_stats.json", &stats)?;
            out.finish(cli, &["channel_stats.csv".into(), "channel_stats.json".into()])
        }
    }
}

fn cluster(a: &ClusterArgs, seed: u64, cli: &Cli) -> CliResult<()> {
    check_phi_args(&a.common)?;
    let (model, data) = (load_model(&a.common.model)?, load_data(&a.common.data)?);
    if a.k == 0 || a.k > data.len() || a.restarts == 0 {
        return usage(format!("--k must be in 1..={} and --restarts positive", data.len()));
    }
    let out = OutputDir::open(&a.common.out)?;
    let phis = phi_dataset(&model, &data, a.common.sigma, a.common.n_draws, derive_seed(seed, "phi"))?;
    let cl = kmeans(&phis, a.k, a.restarts, derive_seed(seed, "kmeans"))?;
    let mut t = String::from("image,cluster,label\n");
    for (i, c) in cl.assignments.iter().enumerate() {
        let label = data.labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default();
        t.push_str(&format!("{i},{c},{label}\n"));
    }
    out.write("assignments.csv", &t)?;
    let mut files = vec!["assignments.csv".to_string()];
    let separation = cluster_separation(&phis, &cl).ok();
    if let Some(sep) = &separation {
        let mut s = String::from("cluster_a,cluster_b,centroid_distance,spread,ratio\n");
        for p in &sep.pairs {
            let r = match p.ratio {
                Separation::Finite(v) => v.to_string(),
                Separation::Infinite => "inf".into(),
                Separation::Undefined => "undefined".into(),
            };
            s.push_str(&format!("{},{},{},{},{r}\n", p.a, p.b, p.centroid_distance, p.spread));
        }
        out.write("separation.csv", &s)?;
        files.push("separation.csv".into());
    }
    for j in 0..a.k {
        let members: Vec<Tensor> = (0..data.len())
            .filter(|&i| cl.assignments[i] == j)
            .take(a.exemplars)
            .map(|i| data.images[i].clone())
            .collect();
        if members.is_empty() {
            continue;
        }
        let name = format!("cluster_{j:02}.{}", ImageFormat::Pnm.extension(data.image_shape()[0]));
        write_image(&out.path(&name), &tile_row(&members)?)?;
        files.push(name);
    }
    let ari = data.labels.as_ref().map(|l| adjusted_rand_index(&cl.assignments, l)).transpose()?;
    let summary = json!({
        "k": a.k,
        "wcss": cl.wcss,
        "iterations": cl.wcss_history.len(),
        "best_restart": cl.best_restart,
        "ari": ari,
        "fraction_separated_2sd": separation.as_ref().map(|s| s.fraction_exceeding(2.0)),
    });
    out.json("cluster_summary.json", &summary)?;
    files.push("cluster_summary.json".into());
    out.finish(cli, &files)
}

fn neighbors(a: &NeighborsArgs, seed: u64, cli: &Cli) -> CliResult<()> {
    check_phi_args(&a.common)?;
    let (model, data) = (load_model(&a.common.model)?, load_data(&a.common.data)?);
    if a.target >= data.len() {
        return usage(format!("--target {} out of range (dataset has {} images)", a.target, data.len()));
    }
    let out = OutputDir::open(&a.common.out)?;
    let phis = phi_dataset(&model, &data, a.common.sigma, a.common.n_draws, derive_seed(seed, "phi"))?;
    let k = a.k.min(data.len());
    let phi_rank = |metric: Metric| nearest_neighbors(&phis[a.target], &phis, metric, k);
    let mut t;
    match a.metric {
        NeighborMetric::Cosine | NeighborMetric::Euclidean => {
            let metric = if a.metric == NeighborMetric::Cosine { Metric::Cosine } else { Metric::Euclidean };
            t = String::from("rank,id,score\n");
            for (r, (id, s)) in phi_rank(metric)?.iter().enumerate() {
                t.push_str(&format!("{r},{id},{s}\n"));
            }
        }
        NeighborMetric::Pixel => {
            let pixels: Vec<Vec<f64>> = data
                .images
                .iter()
                .map(|im| im.data().iter().map(|&v| v as f64).collect())
                .collect();
            let by_pixel = nearest_neighbors(&pixels[a.target], &pixels, Metric::Cosine, k)?;
            let by_phi = phi_rank(Metric::Cosine)?;
            t = String::from("rank,pixel_id,pixel_score,phi_id,phi_score\n");
            for (r, ((pi, ps), (fi, fs))) in by_pixel.iter().zip(&by_phi).enumerate() {
                t.push_str(&format!("{r},{pi},{ps},{fi},{fs}\n"));
            }
        }
    }
    out.write("neighbors.csv", &t)?;
    out.finish(cli, &["neighbors.csv".into()])
}

fn schedule_from(a: &ScheduleArgs, mean: Option<Tensor>) -> CliResult<Schedule> {
    let s = make_schedule(a.sigma_max, a.sigma_min, a.t).map_err(|e| CliError::Usage(e.to_string()))?;
    let s = s.with_step(a.score_step);
    Ok(match mean {
        Some(m) => s.with_mean(m),
        None => s,
    })
}

fn sample(a: &SampleArgs, seed: u64, cli: &Cli) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let data = a.data.as_deref().map(load_data).transpose()?;
    let schedule = schedule_from(&a.schedule, data.as_ref().map(Dataset::mean_image))?;
    if a.n == 0 {
        return usage("--n must be positive");
    }
    let out = OutputDir::open(&a.out)?;
    let cfg = model.config();
    let shape = [1, cfg.in_channels, cfg.image_size, cfg.image_size];
    let mut files = Vec::new();
    for i in 0..a.n {
        let run = sample_unconditional(&model, &shape, &schedule, derive_seed(seed, &format!("sample.{i}")))?;
        files.extend(write_sample(&out, i, &run.image, &trajectory_csv(&run.trajectory), a.format)?);
    }
    out.finish(cli, &files)
}

fn write_sample(out: &OutputDir, i: usize, image: &Tensor, log: &str, format: ImageFormat) -> CliResult<Vec<String>> {
    let im = image.index_axis0(0)?;
    let name = format!("sample_{i:03}.{}", format.extension(im.shape()[0]));
    write_image(&out.path(&name), &im)?;
    let log_name = format!("trajectory_{i:03}.csv");
    out.write(&log_name, log)?;
    Ok(vec![name, log_name])
}

fn resolve_conditioner(spec: &str, data: &Dataset, dir: &Path) -> CliResult<Tensor> {
    if let Ok(i) = spec.parse::<usize>() {
        return match data.images.get(i) {
            Some(im) => Ok(im.clone()),
            None => usage(format!("conditioner index {i} out of range")),
        };
    }
    if let Some(i) = spec
        .strip_prefix("img_")
        .and_then(|r| r.split('.').next())
        .and_then(|n| n.parse::<usize>().ok())
    {
        if i < data.len() {
            return Ok(data.images[i].clone());
        }
    }
    let p = Path::new(spec);
    let p = if p.is_file() { p.to_path_buf() } else { dir.join(spec) };
    if p.is_file() {
        let shape = data.image_shape();
        return Ok(crate::imageio::conform(&crate::imageio::read_image(&p)?, shape[0], shape[1])?);
    }
    usage(format!("conditioner '{spec}' is neither an index, a dataset image name nor a file"))
}

fn cmd_reconstruct(a: &ReconstructArgs, seed: u64, cli: &Cli) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let cond = resolve_conditioner(&a.conditioner, &data, &a.data)?;
    let schedule = schedule_from(&a.schedule, Some(data.mean_image()))?;
    let guidance = a.guidance.config();
    guidance.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.n == 0 || a.phi_draws == 0 {
        return usage("--n and --phi-draws must be positive");
    }
    let out = OutputDir::open(&a.out)?;
    let phi_seed = derive_seed(seed, "phi");
    let target = phi(&model, &cond, a.phi_sigma, a.phi_draws, phi_seed)?.values;
    let target_norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut files = Vec::new();
    let mut table = String::from("sample,phi_residual\n");
    let mut residuals = Vec::new();
    for i in 0..a.n {
        let run = reconstruct(&model, &cond, &schedule, &guidance, derive_seed(seed, &format!("sample.{i}")))?;
        files.extend(write_sample(&out, i, &run.image, &trajectory_csv(&run.trajectory), a.format)?);
        let got = phi(&model, &run.image.index_axis0(0)?, a.phi_sigma, a.phi_draws, phi_seed)?.values;
        let diff: f64 = got.iter().zip(&target).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let r = if target_norm > 0.0 { diff / target_norm } else { f64::NAN };
        residuals.push(r);
        table.push_str(&format!("{i},{r}\n"));
    }
    out.write("phi_match.csv", &table)?;
    files.push("phi_match.csv".into());
    let cname = format!("conditioner.{}", a.format.extension(cond.shape()[0]));
    write_image(&out.path(&cname), &cond)?;
    files.push(cname);
    out.json("reconstruct_summary.json", &json!({ "median_phi_residual": median(&residuals) }))?;
    files.push("reconstruct_summary.json".into());
    out.finish(cli, &files)
}

/// Field names and JSON types of `embedding_summary.json`.
pub const EMBED_SUMMARY_SCHEMA: &[(&str, &str)] = &[
    ("pairs", "integer"),
    ("excluded", "integer"),
    ("a", "number"),
    ("b", "number"),
    ("b_over_a", "number"),
    ("a_p05", "number"),
    ("b_p95", "number"),
    ("robust_ratio", "number"),
    ("spearman", "number"),
];

fn embed(a: &EmbedArgs, seed: u64, cli: &Cli) -> CliResult<()> {
    check_phi_args(&a.common)?;
    if a.pairs < MIN_PAIRS {
        return usage(format!("--pairs must be at least {MIN_PAIRS}, got {}", a.pairs));
    }
    if a.samples < 2 {
        return usage("--samples must be at least 2");
    }
    let (model, data) = (load_model(&a.common.model)?, load_data(&a.common.data)?);
    if data.len() < 2 {
        return usage("embedding check needs at least two images");
    }
    let guidance = a.guidance.config();
    guidance.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let schedule = schedule_from(&a.schedule, Some(data.mean_image()))?;
    let out = OutputDir::open(&a.common.out)?;
    let mut rng = rng_for(seed, "embed.pairs");
    let pairs: Vec<(Tensor, Tensor)> = (0..a.pairs)
        .map(|_| {
            let ij = sample_indices(&mut rng, data.len(), 2);
            (data.images[ij.index(0)].clone(), data.images[ij.index(1)].clone())
        })
        .collect();
    let config = EmbeddingConfig {
        distance: ModelDistanceConfig {
            sigma_grid: default_sigma_grid(&SigmaRange::default()),
            mc: MonteCarlo {
                samples_per_side: a.samples,
                noise_draws: 1,
            },
            schedule,
            guidance,
            phi_draws: a.common.n_draws,
        },
        phi_sigma: a.common.sigma,
        phi_draws: a.common.n_draws,
    };
    let report = embedding_check(&model, &pairs, &config, derive_seed(seed, "embed"))?;
    out.write("embedding.csv", &embedding_csv(&report))?;
    out.json(
        "embedding_summary.json",
        &json!({
            "pairs": report.pairs.len(),
            "excluded": report.excluded,
            "a": report.a,
            "b": report.b,
            "b_over_a": report.ratio,
            "a_p05": report.a_p05,
            "b_p95": report.b_p95,
            "robust_ratio": report.robust_ratio,
            "spearman": report.spearman,
        }),
    )?;
    out.finish(cli, &["embedding.csv".into(), "embedding_summary.json".into()])
}
