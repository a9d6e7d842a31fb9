use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use maskinv::harness::bench::bench_decomposition;
use maskinv::harness::eval::{check_manifest, evaluate_manifest, Degradation, Task};
use maskinv::harness::fixture::{synth_fixture, FixtureSpec};
use maskinv::harness::manifest::Manifest;
use maskinv::harness::metrics::TextBank;
use maskinv::inversion::{AdamWConfig, LossTerms};
use maskinv::preprocess::{load_rgb, Preprocess};
use maskinv::vit::RandomInit;
use maskinv::{
    mask_inversion_batch, Error, GradPath, ImageTensor, InversionConfig, Model, ModelConfig,
    QueryMask, Real, Result,
};

#[derive(Parser)]
#[command(
    name = "maskinv",
    version,
    about = "Localized embeddings from query masks over a frozen ViT"
)]
struct Cli {
    /// Worker threads for per-mask and per-item parallelism (0 = all cores).
    #[arg(long, global = true, env = "MASKINV_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert masks into localized embeddings, one JSON line per mask.
    Invert {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        inv: InversionArgs,
        #[arg(long)]
        image: PathBuf,
        /// Binary mask PNG at the image's resolution; repeat for more masks.
        #[arg(long, required = true)]
        mask: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write explainability maps of the optimized embeddings as PNG and JSON.
    Explain {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        inv: InversionArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, required = true)]
        mask: Vec<PathBuf>,
        /// Output directory; with several masks each gets a subdirectory named after it.
        #[arg(long)]
        out_dir: PathBuf,
        /// Write step_000.png ... step_K.png instead of only the final map.
        #[arg(long)]
        per_step: bool,
    },
    /// Class or referring-expression retrieval over a dataset manifest.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        inv: InversionArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON object of label (or expression id) to embedding.
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::Class)]
        task: TaskArg,
        /// none, box, erode:R or dilate:R (pixels).
        #[arg(long, default_value = "none")]
        degrade: String,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        ks: Vec<usize>,
        /// JSON report.
        #[arg(long)]
        out: PathBuf,
        /// Plain-text table; printed to stdout when omitted.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Time the vanilla and decomposed gradient paths.
    Bench {
        /// Weight container; a random model from --config and --seed when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        /// Input image; seeded noise when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "5,10,50,100")]
        masks: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Threads of the timing pool, independent of --threads.
        #[arg(long, default_value_t = 1)]
        bench_threads: usize,
        #[arg(long, value_enum, default_value_t = Precision::Single)]
        precision: Precision,
        #[command(flatten)]
        inv: InversionArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Write the synthetic colored-rectangle dataset with its model and text banks.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        images: usize,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Weight container.
    #[arg(long)]
    model: PathBuf,
    /// Model config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::Single)]
    precision: Precision,
    /// Resample the positional embedding when the stored grid differs from the config.
    #[arg(long)]
    resample_pos: bool,
}

#[derive(Args)]
struct InversionArgs {
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, value_enum, default_value_t = GradPathArg::Decomposed)]
    grad_path: GradPathArg,
}

impl InversionArgs {
    fn config(&self, record_maps: bool) -> Result<InversionConfig> {
        let cfg = InversionConfig {
            steps: self.steps,
            alpha: self.alpha,
            epsilon: self.epsilon,
            learning_rate: self.lr,
            adamw: AdamWConfig::default(),
            grad_path: match self.grad_path {
                GradPathArg::Vanilla => GradPath::Vanilla,
                GradPathArg::Decomposed => GradPath::Decomposed,
            },
            record_trace: true,
            record_maps,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    Single,
    Double,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradPathArg {
    Vanilla,
    Decomposed,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Class,
    Referring,
}

fn load_model<T: Real>(args: &ModelArgs) -> Result<Model<T>> {
    let config = ModelConfig::from_json_file(&args.config)?;
    if args.resample_pos {
        Model::load_resampled(&args.model, &config)
    } else {
        Model::load(&args.model, &config)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads the image and its masks; masks must match the image and are
/// resampled with it to the model input.
fn load_inputs<T: Real>(
    model: &Model<T>,
    image: &Path,
    masks: &[PathBuf],
) -> Result<(ImageTensor<T>, Vec<QueryMask>)> {
    let size = model.config().image_size;
    let rgb = load_rgb(image)?;
    let dims = (rgb.width() as usize, rgb.height() as usize);
    let tensor = Preprocess::default().apply(&rgb, size);
    let masks = masks
        .iter()
        .map(|p| {
            let m = QueryMask::load(p, Some(dims))?;
            Ok(if dims == (size, size) {
                m
            } else {
                m.resize_nearest(size, size)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((tensor, masks))
}

#[derive(Serialize)]
struct Record<'a> {
    image_id: &'a str,
    mask_id: String,
    dim: usize,
    embedding: Vec<f64>,
    trace: &'a [LossTerms],
    degenerate: bool,
}

fn run_invert<T: Real>(
    model: &ModelArgs,
    inv: &InversionArgs,
    image: &Path,
    masks: &[PathBuf],
    out: &Path,
) -> Result<()> {
    let model = load_model::<T>(model)?;
    let cfg = inv.config(false)?;
    let (tensor, qmasks) = load_inputs(&model, image, masks)?;
    let results = mask_inversion_batch(&model, &tensor, &qmasks, &cfg)?;
    let image_id = stem(image);
    let mut w = BufWriter::new(File::create(out)?);
    for (path, e) in masks.iter().zip(&results) {
        let rec = Record {
            image_id: &image_id,
            mask_id: stem(path),
            dim: e.vector.len(),
            embedding: e.vector.iter().map(|v| v.as_f64()).collect(),
            trace: &e.loss_trace,
            degenerate: e.degenerate,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    log::info!("wrote {} embeddings to {}", results.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct StepMap {
    step: usize,
    dice: Option<f64>,
    degenerate: bool,
    grid: Vec<Vec<f64>>,
}

fn run_explain<T: Real>(
    model: &ModelArgs,
    inv: &InversionArgs,
    image: &Path,
    masks: &[PathBuf],
    out_dir: &Path,
    per_step: bool,
) -> Result<()> {
    let model = load_model::<T>(model)?;
    let cfg = inv.config(per_step)?;
    let (tensor, qmasks) = load_inputs(&model, image, masks)?;
    let results = mask_inversion_batch(&model, &tensor, &qmasks, &cfg)?;
    for (path, e) in masks.iter().zip(&results) {
        let dir = if masks.len() == 1 {
            out_dir.to_path_buf()
        } else {
            out_dir.join(stem(path))
        };
        std::fs::create_dir_all(&dir)?;
        let maps: Vec<_> = if per_step {
            e.step_maps.iter().collect()
        } else {
            vec![&e.final_map]
        };
        let mut json = Vec::with_capacity(maps.len());
        for (i, map) in maps.iter().enumerate() {
            let step = if per_step { i } else { cfg.steps };
            let name = if per_step {
                format!("step_{step:03}.png")
            } else {
                "final.png".to_string()
            };
            map.save_png(dir.join(name))?;
            json.push(StepMap {
                step,
                dice: e.loss_trace.get(step).map(|t| t.dice),
                degenerate: map.is_degenerate(),
                grid: map.to_rows(),
            });
        }
        std::fs::write(dir.join("maps.json"), serde_json::to_string(&json)?)?;
    }
    Ok(())
}

fn write_report(
    out: &Path,
    json: &impl Serialize,
    table: &str,
    table_path: Option<&Path>,
) -> Result<()> {
    std::fs::write(out, serde_json::to_string_pretty(json)?)?;
    match table_path {
        Some(p) => std::fs::write(p, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_evaluate<T: Real>(
    model: &ModelArgs,
    inv: &InversionArgs,
    manifest_path: &Path,
    bank: &Path,
    task: TaskArg,
    degrade: &str,
    ks: &[usize],
    out: &Path,
    table: Option<&Path>,
) -> Result<()> {
    let task = match task {
        TaskArg::Class => Task::Class,
        TaskArg::Referring => Task::Referring,
    };
    let degradation: Degradation = degrade.parse()?;
    let cfg = inv.config(false)?;
    let manifest = Manifest::load(manifest_path)?;
    check_manifest(&manifest, task)?;
    let bank = TextBank::<T>::load(bank)?;
    let model = load_model::<T>(model)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let report = evaluate_manifest(
        &model,
        &Preprocess::default(),
        &manifest,
        base,
        &bank,
        task,
        degradation,
        &cfg,
        ks,
    )?;
    write_report(out, &report, &report.to_table(), table)
}

#[allow(clippy::too_many_arguments)]
fn run_bench<T: Real>(
    model: Option<&Path>,
    config: &Path,
    image: Option<&Path>,
    seed: u64,
    masks: &[usize],
    repeats: usize,
    threads: usize,
    inv: &InversionArgs,
    out: &Path,
    table: Option<&Path>,
) -> Result<()> {
    let config = ModelConfig::from_json_file(config)?;
    let model = match model {
        Some(p) => Model::<T>::load(p, &config)?,
        None => Model::<T>::random(&config, seed, &RandomInit::default())?,
    };
    let size = config.image_size;
    let tensor = match image {
        Some(p) => Preprocess::default().apply(&load_rgb(p)?, size),
        None => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            ImageTensor::new(
                size,
                (0..3 * size * size)
                    .map(|_| T::lit(rng.random_range(-1.5..1.5)))
                    .collect(),
            )?
        }
    };
    let report = bench_decomposition(
        &model,
        &tensor,
        masks,
        &inv.config(false)?,
        repeats,
        threads,
    )?;
    write_report(out, &report, &report.to_table(), table)
}

fn run_synth(out_dir: &Path, seed: u64, images: usize) -> Result<()> {
    let spec = FixtureSpec {
        images,
        ..FixtureSpec::default()
    };
    let fixture = synth_fixture::<f32>(seed, &spec)?;
    let manifest = fixture.write(out_dir)?;
    log::info!(
        "wrote {} images to {}",
        manifest.images.len(),
        out_dir.display()
    );
    Ok(())
}

fn dispatch<F32, F64>(precision: Precision, single: F32, double: F64) -> Result<()>
where
    F32: FnOnce() -> Result<()>,
    F64: FnOnce() -> Result<()>,
{
    match precision {
        Precision::Single => single(),
        Precision::Double => double(),
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Invert {
            model,
            inv,
            image,
            mask,
            out,
        } => dispatch(
            model.precision,
            || run_invert::<f32>(model, inv, image, mask, out),
            || run_invert::<f64>(model, inv, image, mask, out),
        ),
        Command::Explain {
            model,
            inv,
            image,
            mask,
            out_dir,
            per_step,
        } => dispatch(
            model.precision,
            || run_explain::<f32>(model, inv, image, mask, out_dir, *per_step),
            || run_explain::<f64>(model, inv, image, mask, out_dir, *per_step),
        ),
        Command::Evaluate {
            model,
            inv,
            manifest,
            bank,
            task,
            degrade,
            ks,
            out,
            table,
        } => dispatch(
            model.precision,
            || {
                run_evaluate::<f32>(
                    model,
                    inv,
                    manifest,
                    bank,
                    *task,
                    degrade,
                    ks,
                    out,
                    table.as_deref(),
                )
            },
            || {
                run_evaluate::<f64>(
                    model,
                    inv,
                    manifest,
                    bank,
                    *task,
                    degrade,
                    ks,
                    out,
                    table.as_deref(),
                )
            },
        ),
        Command::Bench {
            model,
            config,
            image,
            seed,
            masks,
            repeats,
            bench_threads,
            precision,
            inv,
            out,
            table,
        } => {
            let (m, i, t) = (model.as_deref(), image.as_deref(), table.as_deref());
            dispatch(
                *precision,
                || {
                    run_bench::<f32>(
                        m,
                        config,
                        i,
                        *seed,
                        masks,
                        *repeats,
                        *bench_threads,
                        inv,
                        out,
                        t,
                    )
                },
                || {
                    run_bench::<f64>(
                        m,
                        config,
                        i,
                        *seed,
                        masks,
                        *repeats,
                        *bench_threads,
                        inv,
                        out,
                        t,
                    )
                },
            )
        }
        Command::Synth {
            out_dir,
            seed,
            images,
        } => run_synth(out_dir, *seed, *images),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("maskinv: {e}");
            ExitCode::FAILURE
        }
    }
}
