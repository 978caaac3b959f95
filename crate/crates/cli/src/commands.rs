use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use atlasflow_core::atlas::{self, log_density_mixture, train_with_report};
use atlasflow_core::cover::{cover_from_json, cover_to_json, mapper_cover};
use atlasflow_core::io::{read_points, write_points};
use atlasflow_core::synth::{generate_manifold, kde_density_diag, scott_bandwidth};
use atlasflow_core::{AtlasModel, ChartCover, PointCloud, TrainConfig};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{default_seed, manifold_spec, parse_manifold, Preset, RunConfig};
use crate::experiments::{boundary_table, compare_single, partition_cover, subsample};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "atlasflow", version, args_override_self = true, about = "Manifold learning and density estimation with atlases of normalizing flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a noisy synthetic manifold to a point CSV.
    Synth(SynthArgs),
    /// Build a Mapper chart cover of a point CSV.
    Cover(CoverArgs),
    /// Train an atlas on a point CSV and its cover.
    Train(TrainArgs),
    /// Generate points from a trained atlas.
    Sample(SampleArgs),
    /// Export per-point model log-densities and KDE densities.
    Density(DensityArgs),
    /// Compare cover- and partition-trained atlases on the overlap band.
    EvalBoundary(EvalBoundaryArgs),
    /// Compare reconstruction losses of one chart against a Mapper cover.
    CompareSingle(CompareSingleArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Manifold to sample: torus or trefoil [torus].
    #[arg(long)]
    pub manifold: Option<String>,
    /// Number of points [10000].
    #[arg(long)]
    pub n: Option<usize>,
    /// Standard deviation of the ambient Gaussian noise [0.1].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Random seed [default: $ATLASFLOW_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV path.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// JSON run configuration (its `dataset` and `outputs` sections apply).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Hyperparameter presets and the JSON configuration file.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hyperparameter preset [default: torus].
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct MapperFlags {
    /// Number of lens intervals [torus 5, trefoil 2, stylegan 2].
    #[arg(long)]
    pub n_cubes: Option<usize>,
    /// Fractional overlap of adjacent intervals [torus 0.45, trefoil 0.2, stylegan 0.33].
    #[arg(long)]
    pub perc_overlap: Option<f64>,
    /// Single-linkage distance threshold [1].
    #[arg(long)]
    pub linkage_threshold: Option<f64>,
    /// Intrinsic dimension n [torus 2, trefoil 1, stylegan 2].
    #[arg(long)]
    pub latent_dim: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainFlags {
    /// Coupling layers per flow [torus 13, trefoil 11, stylegan 13].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Conditioner hidden widths, comma separated [64,64].
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Initial Adam learning rate [torus/trefoil 0.0015, stylegan 0.0001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size b [torus/trefoil 256, stylegan 512].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Pretraining epochs e1 [torus 60, trefoil 15, stylegan 0].
    #[arg(long)]
    pub epochs_e1: Option<usize>,
    /// Annealing epochs e2 [torus 30, trefoil 30, stylegan 0].
    #[arg(long)]
    pub epochs_e2: Option<usize>,
    /// Joint epochs e3 [torus 60, trefoil 60, stylegan 40].
    #[arg(long)]
    pub epochs_e3: Option<usize>,
    /// Compatibility epochs e4 [torus 60, trefoil 60, stylegan 80].
    #[arg(long)]
    pub epochs_e4: Option<usize>,
    /// Density-only epochs e5 [60].
    #[arg(long)]
    pub epochs_e5: Option<usize>,
    /// Manifold loss weight lambda_m [100].
    #[arg(long)]
    pub lambda_m: Option<f64>,
    /// Final distance/reconstruction mix lambda_p [torus 0.1, trefoil 0.01, stylegan 0].
    #[arg(long)]
    pub lambda_p: Option<f64>,
    /// Compatibility weight lambda_o [torus 25, trefoil 100, stylegan 100].
    #[arg(long)]
    pub lambda_o: Option<f64>,
    /// Density loss weight lambda_d [torus 0.01, trefoil 0.1, stylegan 0.01].
    #[arg(long)]
    pub lambda_d: Option<f64>,
    /// Epochs between expected-point refreshes C_s [torus/trefoil 2, stylegan 5].
    #[arg(long)]
    pub refresh_every: Option<usize>,
    /// Global gradient-norm clip [torus/trefoil 5, stylegan 1].
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Decoupled weight decay [0.0001].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Isomap neighbour count [10].
    #[arg(long)]
    pub isomap_k: Option<usize>,
    /// Reconstruction distance under which a chart joins the mixture density [0.3].
    #[arg(long)]
    pub membership_threshold: Option<f64>,
    /// Random seed [default: $ATLASFLOW_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

impl MapperFlags {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.mapper.n_cubes, self.n_cubes);
        set(&mut cfg.mapper.perc_overlap, self.perc_overlap);
        set(&mut cfg.mapper.linkage_threshold, self.linkage_threshold);
        set(&mut cfg.latent_dim, self.latent_dim);
    }
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.flow.layers, self.layers);
        set(&mut cfg.flow.hidden, self.hidden.clone());
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.epochs.e1, self.epochs_e1);
        set(&mut cfg.epochs.e2, self.epochs_e2);
        set(&mut cfg.epochs.e3, self.epochs_e3);
        set(&mut cfg.epochs.e4, self.epochs_e4);
        set(&mut cfg.epochs.e5, self.epochs_e5);
        set(&mut cfg.lambda_m, self.lambda_m);
        set(&mut cfg.lambda_p, self.lambda_p);
        set(&mut cfg.lambda_o, self.lambda_o);
        set(&mut cfg.lambda_d, self.lambda_d);
        set(&mut cfg.refresh_every, self.refresh_every);
        set(&mut cfg.clip_norm, self.clip_norm);
        set(&mut cfg.weight_decay, self.weight_decay);
        set(&mut cfg.isomap_k, self.isomap_k);
        set(&mut cfg.membership_threshold, self.membership_threshold);
        set(&mut cfg.seed, self.seed);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Args)]
pub struct CoverArgs {
    /// Point CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Output cover JSON.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub mapper: MapperFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Point CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Cover JSON.
    #[arg(long)]
    pub cover: PathBuf,
    /// Train on the hard partition derived from the cover instead.
    #[arg(long)]
    pub partition: bool,
    /// Output checkpoint path.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Training-log CSV [default: <output>.log.csv].
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub mapper: MapperFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint path.
    #[arg(long)]
    pub model: PathBuf,
    /// Number of points to generate.
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Random seed [default: $ATLASFLOW_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV path.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    /// Points to evaluate.
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint; adds a log_density column.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Reference cloud for the KDE [default: the input itself].
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Isotropic KDE bandwidth [default: Scott's rule per axis].
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Output CSV path.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalBoundaryArgs {
    /// Point CSV both checkpoints were trained on.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint trained on the cover.
    #[arg(long)]
    pub cover_model: PathBuf,
    /// Checkpoint trained on the partition.
    #[arg(long)]
    pub partition_model: PathBuf,
    /// Output table CSV.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareSingleArgs {
    /// Point CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Train both models on a random subset of at most this many points.
    #[arg(long)]
    pub max_points: Option<usize>,
    /// Output loss-curve CSV.
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub mapper: MapperFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

fn read_cloud(path: &Path) -> Result<PointCloud, CliError> {
    let f = File::open(path).map_err(|e| CliError::other(format!("{}: {e}", path.display())))?;
    Ok(read_points(std::io::BufReader::new(f))?)
}

fn load_model(path: &Path) -> Result<AtlasModel, CliError> {
    if !path.exists() {
        return Err(CliError::other(format!("{}: no such checkpoint", path.display())));
    }
    AtlasModel::load(path).map_err(CliError::checkpoint)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::other(format!("{}: {e}", path.display())))
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| CliError::other(format!("no {what} path given (use --output or the config's outputs section)")))
}

fn resolve(config: &ConfigArgs, mapper: &MapperFlags, train: Option<&TrainFlags>) -> Result<RunConfig, CliError> {
    let mut run = RunConfig::load(config.config.as_deref(), config.preset)?;
    mapper.apply(&mut run.train);
    if let Some(t) = train {
        t.apply(&mut run.train);
    }
    run.train.validate()?;
    Ok(run)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Cover(a) => cmd_cover(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Density(a) => cmd_density(a),
        Command::EvalBoundary(a) => cmd_eval_boundary(a),
        Command::CompareSingle(a) => cmd_compare_single(a),
    }
}

pub fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let run = match &a.config {
        Some(p) => Some(RunConfig::load(Some(p), None)?),
        None => None,
    };
    let ds = run.as_ref().map(|r| r.dataset.clone()).unwrap_or_default();
    let name = a.manifold.or(ds.manifold).unwrap_or_else(|| "torus".into());
    let kind = parse_manifold(&name)?;
    let seed = match a.seed.or(ds.seed) {
        Some(s) => s,
        None => default_seed()?,
    };
    let n = a.n.or(ds.n).unwrap_or(10_000);
    let noise = a.noise.or(ds.noise).unwrap_or(0.1);
    let output = required(a.output.or(run.and_then(|r| r.outputs.data)), "output")?;
    let spec = manifold_spec(kind, n, noise, seed);
    spec.validate()?;
    let cloud = generate_manifold(&spec)?;
    let f = File::create(&output).map_err(|e| CliError::other(format!("{}: {e}", output.display())))?;
    write_points(&cloud, BufWriter::new(f))?;
    println!("{}", cloud.len());
    Ok(())
}

pub fn cmd_cover(a: CoverArgs) -> Result<(), CliError> {
    let run = resolve(&a.config, &a.mapper, None)?;
    let output = required(a.output.or(run.outputs.cover.clone()), "output")?;
    let cloud = read_cloud(&a.input)?;
    let cover = mapper_cover(cloud.points.view(), &run.train.mapper, run.train.latent_dim)?;
    write_text(&output, &cover_to_json(&cover))?;
    println!("charts: {}", cover.len());
    let edges: Vec<String> = cover.nerve_edges.iter().map(|(a, b)| format!("{}-{}", a + 1, b + 1)).collect();
    println!("nerve edges: {}", edges.join(" "));
    Ok(())
}

fn read_cover(path: &Path) -> Result<ChartCover, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::other(format!("{}: {e}", path.display())))?;
    Ok(cover_from_json(&text)?)
}

pub fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let run = resolve(&a.config, &a.mapper, Some(&a.train))?;
    let output = required(a.output.or(run.outputs.model.clone()), "output")?;
    let log = a.log.or(run.outputs.log.clone()).unwrap_or_else(|| {
        let mut p = output.clone().into_os_string();
        p.push(".log.csv");
        p.into()
    });
    let cloud = read_cloud(&a.data)?;
    let mut cover = read_cover(&a.cover)?;
    if a.partition {
        cover = partition_cover(&cover, cloud.points.view())?;
    }
    let (model, report) = train_with_report(&cloud, &cover, &run.train)?;
    model.save(&output)?;
    write_text(&log, &report.to_csv())?;
    let weights: Vec<String> = model.weights().iter().map(|w| format!("{w:.4}")).collect();
    println!("charts: {}", model.charts.len());
    println!("weights: {}", weights.join(" "));
    if let Some(r) = report.recon_curve().last() {
        println!("final reconstruction loss: {r}");
    }
    Ok(())
}

pub fn cmd_sample(a: SampleArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let seed = match a.seed {
        Some(s) => s,
        None => default_seed()?,
    };
    let (cloud, labels) = atlas::sample(&model, a.count, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let f = File::create(&a.output).map_err(|e| CliError::other(format!("{}: {e}", a.output.display())))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(BufWriter::new(f));
    let mut header: Vec<String> = (0..cloud.dim()).map(|j| format!("x{j}")).collect();
    header.push("chart".into());
    w.write_record(&header).map_err(|e| CliError::other(e.to_string()))?;
    for (i, k) in labels.iter().enumerate() {
        let mut row: Vec<String> = cloud.points.row(i).iter().map(|v| v.to_string()).collect();
        row.push((k + 1).to_string());
        w.write_record(&row).map_err(|e| CliError::other(e.to_string()))?;
    }
    w.flush()?;
    println!("{}", cloud.len());
    Ok(())
}

pub fn cmd_density(a: DensityArgs) -> Result<(), CliError> {
    let cloud = read_cloud(&a.input)?;
    let reference = match &a.reference {
        Some(p) => read_cloud(p)?,
        None => cloud.clone(),
    };
    let h = match a.bandwidth {
        Some(b) => vec![b; reference.dim()],
        None => scott_bandwidth(reference.points.view()),
    };
    let kde = kde_density_diag(reference.points.view(), cloud.points.view(), &h)?;
    let log_density = match &a.model {
        Some(p) => {
            let model = load_model(p)?;
            if model.ambient_dim != cloud.dim() {
                return Err(CliError::other("checkpoint and input dimensions differ"));
            }
            let vals: Vec<String> = (0..cloud.len())
                .map(|i| match log_density_mixture(&model, &cloud.points.row(i).to_vec()) {
                    Ok(v) => v.to_string(),
                    Err(_) => "NaN".to_string(),
                })
                .collect();
            Some(vals)
        }
        None => None,
    };
    let f = File::create(&a.output).map_err(|e| CliError::other(format!("{}: {e}", a.output.display())))?;
    let mut w = BufWriter::new(f);
    let mut header: Vec<String> = (0..cloud.dim()).map(|j| format!("x{j}")).collect();
    if log_density.is_some() {
        header.push("log_density".into());
    }
    header.push("kde".into());
    writeln!(w, "{}", header.join(","))?;
    for i in 0..cloud.len() {
        let mut row: Vec<String> = cloud.points.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(ld) = &log_density {
            row.push(ld[i].clone());
        }
        row.push(kde[i].to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    println!("{}", cloud.len());
    Ok(())
}

pub fn cmd_eval_boundary(a: EvalBoundaryArgs) -> Result<(), CliError> {
    let data = read_cloud(&a.data)?;
    let cover_model = load_model(&a.cover_model)?;
    let partition_model = load_model(&a.partition_model)?;
    let table = boundary_table(&data, &cover_model, &partition_model)?;
    let csv = table.to_csv();
    if let Some(p) = &a.output {
        write_text(p, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

pub fn cmd_compare_single(a: CompareSingleArgs) -> Result<(), CliError> {
    let run = resolve(&a.config, &a.mapper, Some(&a.train))?;
    let mut data = read_cloud(&a.data)?;
    if let Some(m) = a.max_points {
        data = subsample(&data, m, run.train.seed);
    }
    let result = compare_single(&data, &run.train)?;
    write_text(&a.output, &result.to_csv())?;
    if let (Some(s), Some(m)) = (result.single.last(), result.multi.last()) {
        println!("charts: {}", result.charts);
        println!("final reconstruction loss: single {s}, multi {m}");
    }
    Ok(())
}
