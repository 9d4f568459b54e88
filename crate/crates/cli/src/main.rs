use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use voxad::baseline::{fit_baseline, score_zmap, BaselineModel, FitOptions, DEFAULT_SLAB_VOXELS};
use voxad::covariance::{fit_covariance, CovarianceModel};
use voxad::metrics::{
    median, pool_pair, pr_curve, roc_curve, voxel_task_eval, EvalReport, LabeledScores, Task, VoxelPair,
    VoxelPooling,
};
use voxad::model_file::{peek_header, ModelKind};
use voxad::phantom::{generate_phantom, PhantomConfig};
use voxad::pipeline::{run_pipeline, PipelineConfig};
use voxad::preprocess::{normalize_study, NormalizedStudy};
use voxad::projection::{fit_projection, BasisStorage, ProjectionModel, ProjectionOptions, ProjectionVariant};
use voxad::source::{read_list, NiftiFiles, StudySource};
use voxad::stats::{
    bootstrap_compare, wilcoxon_signed_rank, BootstrapConfig, Metric, PairedTestResult,
};
use voxad::volume::{read_head_mask, read_mask, read_multichannel, read_score_map, write_volume};
use voxad::HeadMask;

#[derive(Parser)]
#[command(name = "voxad", version, about = "Voxel-wise anomaly detection for multi-channel volumes")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed override for commands that use randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with lesion ground truth.
    Phantom {
        /// Phantom config JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize each channel of a study over the head mask.
    Normalize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model on normalized training studies.
    Fit(FitArgs),
    /// Score a normalized study with a fitted model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the baseline z-map (bm and pm models).
        #[arg(long)]
        zmap_out: Option<PathBuf>,
        /// Also write the projection residual (pm models).
        #[arg(long)]
        residual_out: Option<PathBuf>,
    },
    /// Compute AP and AUC for the voxel or sample task.
    Eval(EvalArgs),
    /// Compare two methods with a paired bootstrap or a Wilcoxon test.
    Compare(CompareArgs),
    /// Run the full protocol from a JSON config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Bm,
    Cm,
    Pm,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    /// List of normalized training studies, one per line.
    #[arg(long)]
    train_list: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep the raw training vectors instead of orthonormalizing (pm only).
    #[arg(long)]
    raw_projection: bool,
    #[arg(long, default_value_t = DEFAULT_SLAB_VOXELS)]
    slab_voxels: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Voxel,
    Sample,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// sample: CSV with one score per line. voxel: list file with
    /// `healthy.nii pathological.nii` score maps per line.
    #[arg(long)]
    scores: PathBuf,
    /// sample: CSV with one 0/1 label per line. voxel: list file with one
    /// lesion mask per line, matching the score list.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Head mask for voxel pooling (required unless --all-voxels).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Pool every array voxel instead of head-mask voxels.
    #[arg(long)]
    all_voxels: bool,
    /// Directory for ROC and PR curve CSV files.
    #[arg(long)]
    curves: Option<PathBuf>,
    #[arg(long, default_value = "method")]
    method: String,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TestArg {
    Bootstrap,
    Wilcoxon,
}

#[derive(Args)]
struct CompareArgs {
    /// CSV with one value per line.
    #[arg(long)]
    scores_a: PathBuf,
    #[arg(long)]
    scores_b: PathBuf,
    /// CSV with one 0/1 label per line (bootstrap only).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bootstrap")]
    test: TestArg,
    #[arg(long, default_value = "auc")]
    metric: Metric,
    #[arg(long, default_value_t = 100_000)]
    iters: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Bonferroni test count.
    #[arg(long, default_value_t = 1)]
    tests: usize,
    #[arg(long, default_value = "a")]
    name_a: String,
    #[arg(long, default_value = "b")]
    name_b: String,
    #[arg(long)]
    out: PathBuf,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_column(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            l.parse::<f64>()
                .with_context(|| format!("{}:{}: not a number: {l:?}", path.display(), i + 1))
        })
        .collect()
}

fn read_labels(path: &Path) -> Result<Vec<bool>> {
    read_column(path)?
        .into_iter()
        .map(|v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            other => bail!("{}: labels must be 0 or 1, found {other}", path.display()),
        })
        .collect()
}

fn phantom(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut c: PhantomConfig = match &config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => PhantomConfig::default(),
    };
    if let Some(s) = seed {
        c.seed = s;
    }
    let manifest = generate_phantom(&c, &out)?;
    let pipeline = PipelineConfig {
        seed: c.seed,
        ..PipelineConfig::for_phantom()
    };
    write_json(&out.join("pipeline.json"), &pipeline)?;
    info!("wrote {} studies to {}", manifest.studies.len(), out.display());
    Ok(())
}

fn normalize(input: PathBuf, mask: PathBuf, out: PathBuf) -> Result<()> {
    let mask = read_head_mask(&mask)?;
    let study = read_multichannel(&input)?;
    write_volume(normalize_study(&study, &mask)?.volume(), &out)?;
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let mask = read_head_mask(&args.mask)?;
    let paths: Vec<PathBuf> = read_list(&args.train_list)?.into_iter().map(|mut cols| cols.swap_remove(0)).collect();
    let source = NiftiFiles::open(paths)?;
    let opts = FitOptions {
        slab_voxels: args.slab_voxels,
    };
    match args.model {
        ModelArg::Bm => {
            let bm = fit_baseline(&source, &mask, opts)?;
            info!("{} voxel channels hit the sigma floor", bm.degenerate_count());
            bm.save(&args.out)?;
        }
        ModelArg::Cm => {
            let cm = fit_covariance(&source, &mask, opts)?;
            let (ridge, diagonal) = cm.regularized_counts();
            info!("{ridge} voxels needed a ridge, {diagonal} fell back to diagonal");
            cm.save(&args.out)?;
        }
        ModelArg::Pm => {
            let bm = fit_baseline(&source, &mask, opts)?;
            let zmaps = (0..source.len()).map(|i| bm.z_transform(&source.load(i)?));
            let opts = ProjectionOptions {
                variant: if args.raw_projection {
                    ProjectionVariant::RawSequential
                } else {
                    ProjectionVariant::Orthonormal
                },
                ..Default::default()
            };
            let pm = fit_projection(zmaps, &mask, opts, BasisStorage::File(args.out.clone()))?;
            info!("basis rank {} of {}, dropped {:?}", pm.rank(), pm.n_train(), pm.dropped());
            pm.save(&args.out, &bm)?;
        }
    }
    Ok(())
}

fn score(
    model: PathBuf,
    input: PathBuf,
    out: PathBuf,
    zmap_out: Option<PathBuf>,
    residual_out: Option<PathBuf>,
) -> Result<()> {
    let study = NormalizedStudy::assume_normalized(read_multichannel(&input)?);
    let kind = peek_header(&model)?.kind;
    if residual_out.is_some() && kind != ModelKind::Projection {
        bail!("--residual-out needs a projection model");
    }
    if zmap_out.is_some() && kind == ModelKind::Covariance {
        bail!("--zmap-out needs a baseline or projection model");
    }
    let map = match kind {
        ModelKind::Baseline => {
            let bm = BaselineModel::load(&model)?;
            let z = bm.z_transform(&study)?;
            if let Some(p) = &zmap_out {
                write_volume(z.volume(), p)?;
            }
            score_zmap(&z, bm.mask())?
        }
        ModelKind::Covariance => CovarianceModel::load(&model)?.score(&study)?,
        ModelKind::Projection => {
            let (pm, bm) = ProjectionModel::load(&model)?;
            let z = bm.z_transform(&study)?;
            if let Some(p) = &zmap_out {
                write_volume(z.volume(), p)?;
            }
            let (residual, map) = pm.score(&z)?;
            if let Some(p) = &residual_out {
                write_volume(residual.volume(), p)?;
            }
            map
        }
    };
    write_volume(&map, &out)?;
    Ok(())
}

fn write_curves(dir: &Path, stem: &str, data: &LabeledScores) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut roc = String::from("fpr,tpr\n");
    for (x, y) in roc_curve(data)? {
        roc += &format!("{x},{y}\n");
    }
    let mut pr = String::from("recall,precision\n");
    for (x, y) in pr_curve(data)? {
        pr += &format!("{x},{y}\n");
    }
    fs::write(dir.join(format!("{stem}roc.csv")), roc)?;
    fs::write(dir.join(format!("{stem}pr.csv")), pr)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    match args.task {
        TaskArg::Sample => {
            let data = LabeledScores::new(read_column(&args.scores)?, read_labels(&args.labels)?)?;
            let report = EvalReport::evaluate(&args.method, Task::Sample, &data)?;
            if let Some(dir) = &args.curves {
                write_curves(dir, "", &data)?;
            }
            println!("ap {:.6} auc {:.6}", report.ap, report.auc);
            write_json(&args.out, &report)
        }
        TaskArg::Voxel => {
            let pairs = read_list(&args.scores)?;
            let lesions = read_list(&args.labels)?;
            if pairs.len() != lesions.len() {
                bail!("{} score pairs but {} lesion masks", pairs.len(), lesions.len());
            }
            if let Some(bad) = pairs.iter().position(|cols| cols.len() != 2) {
                bail!("{}: line {} needs two score maps", args.scores.display(), bad + 1);
            }
            let maps = pairs
                .iter()
                .map(|cols| Ok((read_score_map(&cols[0])?, read_score_map(&cols[1])?)))
                .collect::<Result<Vec<_>>>()?;
            let lesions = lesions.iter().map(|cols| read_mask(&cols[0])).collect::<voxad::Result<Vec<_>>>()?;
            let (mask, pooling) = match (&args.mask, args.all_voxels) {
                (_, true) => {
                    let first = &maps.first().context("empty score list")?.0;
                    (HeadMask::full(first.dims(), first.spacing())?, VoxelPooling::AllVoxels)
                }
                (Some(p), false) => (read_head_mask(p)?, VoxelPooling::HeadMask),
                (None, false) => bail!("voxel task needs --mask or --all-voxels"),
            };
            let pairs: Vec<VoxelPair> = maps
                .iter()
                .zip(&lesions)
                .map(|((h, p), l)| VoxelPair {
                    healthy: h,
                    pathological: p,
                    lesion: l,
                })
                .collect();
            let reports = voxel_task_eval(&args.method, &pairs, &mask, pooling)?;
            if let Some(dir) = &args.curves {
                for (i, pair) in pairs.iter().enumerate() {
                    write_curves(dir, &format!("pair{i:03}_"), &pool_pair(pair, &mask, pooling)?)?;
                }
            }
            let aps: Vec<f64> = reports.iter().map(|r| r.ap).collect();
            let aucs: Vec<f64> = reports.iter().map(|r| r.auc).collect();
            let (median_ap, median_auc) = (median(&aps).unwrap(), median(&aucs).unwrap());
            println!("median ap {median_ap:.6} auc {median_auc:.6} over {} pairs", reports.len());
            write_json(
                &args.out,
                &serde_json::json!({
                    "method": args.method,
                    "task": Task::Voxel,
                    "pooling": pooling,
                    "pairs": reports,
                    "median_ap": median_ap,
                    "median_auc": median_auc,
                }),
            )
        }
    }
}

fn compare(args: CompareArgs, seed: Option<u64>) -> Result<()> {
    let a = read_column(&args.scores_a)?;
    let b = read_column(&args.scores_b)?;
    if a.len() != b.len() {
        bail!("{} values in --scores-a but {} in --scores-b", a.len(), b.len());
    }
    match args.test {
        TestArg::Bootstrap => {
            let labels = read_labels(args.labels.as_deref().context("bootstrap needs --labels")?)?;
            let cfg = BootstrapConfig {
                metric: args.metric,
                iters: args.iters,
                seed: seed.unwrap_or(0),
                alpha: args.alpha / args.tests.max(1) as f64,
            };
            let names = [args.name_a, args.name_b];
            let result = bootstrap_compare(&names, &[a, b], &labels, &cfg)?;
            let d = &result.differences[0];
            println!(
                "{} - {} = {:.6}, CI [{:.6}, {:.6}]",
                d.a, d.b, d.point, d.lower, d.upper
            );
            write_json(&args.out, &result)
        }
        TestArg::Wilcoxon => {
            let w = wilcoxon_signed_rank(&a, &b)?;
            let result = PairedTestResult::new(&args.name_a, &args.name_b, &w, args.tests)?;
            println!("W {} p {:.6} p_bonferroni {:.6}", result.w, result.p_two_sided, result.p_bonferroni);
            write_json(&args.out, &result)
        }
    }
}

fn pipeline(config: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut c = PipelineConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        c.seed = s;
    }
    let summary = run_pipeline(&c)?;
    print!("{}", summary.to_csv());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Phantom { config, out } => phantom(config, out, cli.seed).context("phantom"),
        Command::Normalize { input, mask, out } => normalize(input, mask, out).context("normalize"),
        Command::Fit(args) => fit(args).context("fit"),
        Command::Score {
            model,
            input,
            out,
            zmap_out,
            residual_out,
        } => score(model, input, out, zmap_out, residual_out).context("score"),
        Command::Eval(args) => eval(args).context("eval"),
        Command::Compare(args) => compare(args, cli.seed).context("compare"),
        Command::Pipeline { config } => pipeline(config, cli.seed).context("pipeline"),
    }
}
