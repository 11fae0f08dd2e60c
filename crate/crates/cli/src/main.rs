use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ldm_core::dlm::{
    calibrate_threshold, infer_substrate, load_checkpoint, save_checkpoint, train, DlmConfig,
    ElboTerms, LabelKind, LatentMode,
};
use ldm_core::grids::{load_volume, save_volume, unflatten, VolumeGrid};
use ldm_core::harness::{
    run_experiment, run_fig1_replication, run_spatial_bias, write_rows, Complexity,
    ExperimentSpec, SpatialBiasSpec,
};
use ldm_core::metrics::EvalReport;
use ldm_core::rng::derive_seed;
use ldm_core::simulate::{
    generate_lesions, load_dataset, realize_substrate, save_dataset, simulate_dataset,
    DeficitModel, LabelType, LesionDistributionSpec, SubstrateSpec,
};

#[derive(Parser)]
#[command(name = "ldm", version, about = "Lesion-deficit mapping: simulation, model training and benchmarking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Seed for every random draw of the run
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON configuration for the subcommand
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (file for render)
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 uses every core
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a lesion-deficit dataset from a JSON spec
    Simulate,
    /// Train the latent-substrate model on a dataset
    Train {
        /// Dataset directory written by `simulate`
        #[arg(long)]
        data: PathBuf,
        /// Variant to train
        #[arg(long, value_enum, default_value_t = Ablation::Full)]
        ablation: Ablation,
    },
    /// Score a predicted map, or infer one from a checkpoint, against ground truth
    Evaluate {
        /// Ground-truth substrate volume
        #[arg(long)]
        truth: PathBuf,
        /// Binary prediction volume to score directly
        #[arg(long, conflicts_with = "checkpoint")]
        prediction: Option<PathBuf>,
        /// Trained checkpoint; the map is inferred and calibrated on --data
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory used for calibration
        #[arg(long)]
        data: Option<PathBuf>,
        /// Physical size of one voxel
        #[arg(long, default_value_t = 1.0)]
        voxel_size: f64,
    },
    /// Run an experiment matrix and write the results CSV
    Benchmark,
    /// Single-voxel substrate sweep measuring mislocalization per method
    SpatialBias {
        /// Dataset directory whose lesions are reused
        #[arg(long)]
        data: PathBuf,
    },
    /// Four-condition lesion/substrate complexity replication
    Fig1 {
        /// Number of seeds per condition
        #[arg(long, default_value_t = 10)]
        repeats: u64,
    },
    /// Render one plane of a volume as an ASCII graymap
    Render {
        /// Volume to render
        #[arg(long)]
        input: PathBuf,
        /// Plane of a 3D volume as axis:index
        #[arg(long, value_parser = parse_slice)]
        slice: Option<(usize, usize)>,
        /// Binary volume drawn as an outline at 255
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Full,
    LabelsOnly,
    Deterministic,
}

fn parse_slice(s: &str) -> Result<(usize, usize), String> {
    let (a, i) = s.split_once(':').ok_or("expected axis:index")?;
    Ok((
        a.parse().map_err(|e| format!("axis: {e}"))?,
        i.parse().map_err(|e| format!("index: {e}"))?,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimulateSpec {
    dims: Vec<usize>,
    lesions: LesionDistributionSpec,
    substrate: SubstrateSpec,
    deficit: DeficitModel,
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    spec: &'a SimulateSpec,
    n_lesions: usize,
    n_substrate_voxels: usize,
    label_type: &'a str,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.common.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.threads)
            .build_global()
            .context("configuring thread pool")?;
    }
    let c = &cli.common;
    match &cli.command {
        Command::Simulate => simulate(c),
        Command::Train { data, ablation } => train_cmd(c, data, *ablation),
        Command::Evaluate {
            truth,
            prediction,
            checkpoint,
            data,
            voxel_size,
        } => evaluate(c, truth, prediction.as_deref(), checkpoint.as_deref(), data.as_deref(), *voxel_size),
        Command::Benchmark => benchmark(c),
        Command::SpatialBias { data } => spatial_bias(c, data),
        Command::Fig1 { repeats } => fig1(c, *repeats),
        Command::Render {
            input,
            slice,
            overlay,
        } => render(c, input, *slice, overlay.as_deref()),
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(c: &Common) -> Result<T> {
    let path = c.config.as_ref().context("--config is required")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn simulate(c: &Common) -> Result<()> {
    let mut spec: SimulateSpec = read_config(c)?;
    spec.lesions.rng_seed = derive_seed(c.seed, 0);
    spec.deficit.rng_seed = derive_seed(c.seed, 1);
    let lesions = generate_lesions(&spec.lesions, &spec.dims)?;
    let truth = realize_substrate(&spec.substrate, &spec.dims)?.ground_truth;
    let dataset = simulate_dataset(lesions, &truth, &spec.deficit)?;
    save_dataset(&dataset, &c.out)?;
    save_volume(&truth, &c.out.join("substrate.vol"))?;
    let manifest = Manifest {
        seed: c.seed,
        spec: &spec,
        n_lesions: dataset.len(),
        n_substrate_voxels: truth.count_nonzero(),
        label_type: match dataset.label_type {
            LabelType::Binary => "binary",
            LabelType::Real => "real",
        },
    };
    write_json(&manifest, &c.out.join("manifest.json"))
}

fn train_cmd(c: &Common, data: &Path, ablation: Ablation) -> Result<()> {
    let dataset = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let mut config: DlmConfig = match c.config {
        Some(_) => read_config(c)?,
        None => DlmConfig::for_dims(dataset.dims()),
    };
    config.dims = dataset.dims().to_vec();
    config.label_kind = match dataset.label_type {
        LabelType::Binary => LabelKind::Bernoulli,
        LabelType::Real => LabelKind::Gaussian,
    };
    match ablation {
        Ablation::Full => {}
        Ablation::LabelsOnly => config.elbo_terms = ElboTerms::LabelsOnly,
        Ablation::Deterministic => config.latent_mode = LatentMode::Deterministic,
    }
    config.rng_seed = c.seed;
    let mut trained = train(&config, &dataset)?;
    fs::create_dir_all(&c.out)?;
    save_checkpoint(&mut trained.model, &c.out.join("checkpoint.json"))?;
    let with_lesion = config.elbo_terms == ElboTerms::Full;
    fs::write(c.out.join("training_log.csv"), trained.log.to_csv(with_lesion))?;
    Ok(())
}

fn evaluate(
    c: &Common,
    truth: &Path,
    prediction: Option<&Path>,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    voxel_size: f64,
) -> Result<()> {
    let truth = load_volume(truth).with_context(|| format!("loading {}", truth.display()))?;
    let predicted = match (prediction, checkpoint, data) {
        (Some(p), _, _) => load_volume(p).with_context(|| format!("loading {}", p.display()))?,
        (None, Some(ck), Some(data)) => {
            let mut model = load_checkpoint(ck)?;
            let dataset = load_dataset(data)?;
            let cfg = model.config().clone();
            let mean = infer_substrate(&mut model, cfg.n_substrate_samples, c.seed)?;
            calibrate_threshold(&mean, cfg.label_kind, cfg.sigma_floor, &dataset)?.binary_map
        }
        _ => bail!("pass --prediction, or --checkpoint with --data"),
    };
    let report = EvalReport::compute(&predicted, &truth, None)?.scaled(voxel_size);
    fs::create_dir_all(&c.out)?;
    write_json(&report, &c.out.join("report.json"))?;
    save_volume(&predicted, &c.out.join("map.vol"))?;
    Ok(())
}

fn benchmark(c: &Common) -> Result<()> {
    let mut spec: ExperimentSpec = read_config(c)?;
    spec.master_seed = c.seed;
    let rows = run_experiment(&spec)?;
    fs::create_dir_all(&c.out)?;
    let f = fs::File::create(c.out.join("results.csv"))?;
    write_rows(&rows, f)?;
    Ok(())
}

fn spatial_bias(c: &Common, data: &Path) -> Result<()> {
    let mut spec: SpatialBiasSpec = read_config(c)?;
    spec.seed = c.seed;
    let dataset = load_dataset(data)?;
    let (rows, summary) = run_spatial_bias(&dataset.lesions, &spec)?;
    fs::create_dir_all(&c.out)?;
    let mut text = String::from("method,target,displacement,reason\n");
    for r in &rows {
        let target: Vec<String> = r.target.iter().map(|v| v.to_string()).collect();
        let d = r.displacement.map(|d| d.to_string()).unwrap_or_default();
        writeln!(text, "{},{},{},{}", r.method, target.join(" "), d, r.reason)?;
    }
    fs::write(c.out.join("spatial_bias.csv"), text)?;
    write_json(&summary, &c.out.join("summary.json"))
}

fn fig1(c: &Common, repeats: u64) -> Result<()> {
    let conditions = [Complexity::Simple, Complexity::Complex];
    fs::create_dir_all(&c.out)?;
    let mut text = String::from("lesion,substrate,seed,positives,significant,displacement\n");
    for &l in &conditions {
        for &s in &conditions {
            for r in 0..repeats {
                let seed = derive_seed(c.seed, r);
                let res = run_fig1_replication(l, s, seed)?;
                let d = res.displacement_magnitude.map(|d| d.to_string()).unwrap_or_default();
                let name = |x: Complexity| match x {
                    Complexity::Simple => "simple",
                    Complexity::Complex => "complex",
                };
                writeln!(
                    text,
                    "{},{},{},{},{},{}",
                    name(l),
                    name(s),
                    seed,
                    res.positives,
                    res.statmap.significant.count_nonzero(),
                    d
                )?;
                if r == 0 {
                    let stem = format!("{}_{}", name(l), name(s));
                    save_volume(&res.statmap.statistic, &c.out.join(format!("{stem}_statistic.vol")))?;
                    save_volume(&res.statmap.significant, &c.out.join(format!("{stem}_significant.vol")))?;
                    save_volume(&res.ground_truth, &c.out.join(format!("{stem}_truth.vol")))?;
                }
            }
        }
    }
    fs::write(c.out.join("fig1.csv"), text)?;
    Ok(())
}

/// Plane of `grid` as row-major `(rows, cols, values)`.
fn plane(grid: &VolumeGrid, slice: Option<(usize, usize)>) -> Result<(usize, usize, Vec<f64>)> {
    let dims = grid.dims();
    let values = grid.to_f64();
    match (dims.len(), slice) {
        (2, None) => Ok((dims[0], dims[1], values)),
        (2, Some(_)) => bail!("--slice applies to 3D volumes only"),
        (3, Some((axis, index))) => {
            if axis > 2 || index >= dims[axis] {
                bail!("slice {axis}:{index} outside {dims:?}");
            }
            let keep: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
            let mut out = Vec::with_capacity(dims[keep[0]] * dims[keep[1]]);
            for (i, v) in values.iter().enumerate() {
                if unflatten(dims, i)[axis] == index {
                    out.push(*v);
                }
            }
            Ok((dims[keep[0]], dims[keep[1]], out))
        }
        (3, None) => bail!("3D volumes need --slice axis:index"),
        _ => bail!("unsupported rank {}", dims.len()),
    }
}

/// P2 graymap; values scaled by the plane maximum, outline pixels at 255.
fn graymap(rows: usize, cols: usize, values: &[f64], outline: Option<&[bool]>) -> String {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut px: Vec<u8> = values
        .iter()
        .map(|&v| if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 })
        .collect();
    if let Some(mask) = outline {
        for (p, e) in px.iter_mut().zip(ldm_core::metrics::surface(mask, &[rows, cols])) {
            if e {
                *p = 255;
            }
        }
    }
    let mut s = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = px[r * cols..(r + 1) * cols].iter().map(|p| p.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn render(c: &Common, input: &Path, slice: Option<(usize, usize)>, overlay: Option<&Path>) -> Result<()> {
    let grid = load_volume(input).with_context(|| format!("loading {}", input.display()))?;
    let (rows, cols, values) = plane(&grid, slice)?;
    let outline = match overlay {
        Some(p) => {
            let o = load_volume(p).with_context(|| format!("loading {}", p.display()))?;
            if o.dims() != grid.dims() {
                bail!("overlay dims {:?} differ from input {:?}", o.dims(), grid.dims());
            }
            let (_, _, ov) = plane(&o, slice)?;
            Some(ov.iter().map(|&v| v != 0.0).collect::<Vec<_>>())
        }
        None => None,
    };
    if let Some(parent) = c.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&c.out, graymap(rows, cols, &values, outline.as_deref()))
        .with_context(|| format!("writing {}", c.out.display()))
}
