//! Command-line entry points.
//!
//! Every command reads its inputs, writes files only under `--out`, and
//! maps failures to an exit code: 0 success, 1 other, 2 usage or config,
//! 3 data format, 4 numerical divergence.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{binarize, encode_bitmatrix, hollow_lower_half, load_any, Binarization, Dataset, Split};
use crate::error::{Error, Result};
use crate::layers::{layer_sample_clamped, LayerParams, Matrix, Vector};
use crate::model::{ancestral_sample, recog_sample, GenerativeModel, ParamVector, RecognitionModel};
use crate::numerics::{Phase, RandomStream};
use crate::training::{
    evaluate, load_checkpoint, load_samples, save_checkpoint, save_samples, write_atomic, CsvSink, Manifest,
    SavedModel, TrainConfig, Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

pub const MODEL_FILE: &str = "model.json";
pub const SAMPLES_FILE: &str = "samples.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.conf";

#[derive(Debug, Parser)]
#[command(name = "dsmcmc", version, about = "Doubly stochastic gradient MCMC for deep generative models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and collect posterior samples.
    Train(TrainArgs),
    /// Estimate the test log-likelihood over a grid of K and M.
    Eval(EvalArgs),
    /// Draw ancestral samples.
    Sample(SampleArgs),
    /// Complete images whose lower half is missing.
    Impute(ImputeArgs),
    /// Write the likelihood layer's weights as images.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BinarizeMode {
    Threshold,
    Stochastic,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Data files as `train=PATH`, `val=PATH`, `test=PATH`, or bare paths
    /// taken in that order. IDX files (`*.idx`, `*-ubyte`) or bitmatrix text.
    #[arg(long = "data", required = true)]
    pub data: Vec<String>,
    /// Binarize non-binary inputs before use.
    #[arg(long)]
    pub binarize: Option<BinarizeMode>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from `<out>/checkpoint.json` if present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory of `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated sample counts; defaults to the config's `k_test`.
    #[arg(long = "K", value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Comma-separated posterior sample counts; defaults to all collected.
    #[arg(long = "M", value_delimiter = ',')]
    pub m: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Impute at most this many images.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Generative layer index; only a layer emitting the data has
    /// image-shaped weights.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure tagged with the stage it happened in.
#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    pub error: Error,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self.error {
            Error::Config(_) => EXIT_USAGE,
            Error::Format(_) | Error::Corruption(_) | Error::Incompatible(_) | Error::Shape(_) => EXIT_DATA,
            Error::Divergence(_) | Error::DegenerateWeights => EXIT_DIVERGENCE,
            _ => EXIT_OTHER,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error [{}]: {}", self.stage, self.error)
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|error| CliError { stage, error })
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Impute(a) => cmd_impute(&a),
        Command::ExportFeatures(a) => cmd_export_features(&a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Splits `--data` values into `(split, path)` pairs.
fn data_paths(args: &DataArgs) -> Result<Vec<(Split, PathBuf)>> {
    let order = [Split::Train, Split::Validation, Split::Test];
    let mut out: Vec<(Split, PathBuf)> = Vec::new();
    for (i, item) in args.data.iter().enumerate() {
        let (split, path) = match item.split_once('=') {
            Some((s, p)) => (s.parse::<Split>()?, PathBuf::from(p)),
            None => {
                let s = *order
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("too many --data values: {item}")))?;
                (s, PathBuf::from(item))
            }
        };
        if out.iter().any(|(s, _)| *s == split) {
            return Err(Error::Config(format!("{split} data given twice")));
        }
        out.push((split, path));
    }
    Ok(out)
}

fn load_split(path: &Path, split: Split, args: &DataArgs, seed: u64, image: Option<(usize, usize)>) -> Result<Dataset> {
    let mut ds = load_any(path)?.with_split(split);
    if ds.image_shape.is_none() {
        if let Some((r, c)) = image {
            if r * c == ds.dim() {
                ds.image_shape = image;
            }
        }
    }
    match args.binarize {
        Some(BinarizeMode::Threshold) => binarize(&ds, Binarization::ThresholdHalf),
        Some(BinarizeMode::Stochastic) => {
            let mut s = RandomStream::with_path(seed, vec![Phase::Binarize as u64, split as u64]);
            binarize(&ds, Binarization::Stochastic(&mut s))
        }
        None => Ok(ds),
    }
}

fn find_split(paths: &[(Split, PathBuf)], split: Split) -> Option<&Path> {
    paths.iter().find(|(s, _)| *s == split).map(|(_, p)| p.as_path())
}

/// A single data file for commands that take one (`eval`, `impute`): the
/// test split if named, otherwise the first given.
fn single_path(args: &DataArgs) -> Result<PathBuf> {
    let paths = data_paths(args)?;
    Ok(find_split(&paths, Split::Test).map_or_else(|| paths[0].1.clone(), Path::to_path_buf))
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let text = read_text(&a.config).stage("read-config")?;
    let mut cfg = TrainConfig::parse_from_env(&text).stage("config")?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let manifest = Manifest::parse(&read_text(&a.manifest).stage("read-manifest")?).stage("manifest")?;
    let paths = data_paths(&a.data).stage("arguments")?;
    let train_path =
        find_split(&paths, Split::Train).ok_or_else(|| Error::Config("no train data given".into())).stage("arguments")?;
    let val_path = find_split(&paths, Split::Validation)
        .ok_or_else(|| Error::Config("no validation data given".into()))
        .stage("arguments")?;
    let train = load_split(train_path, Split::Train, &a.data, cfg.seed, manifest.image_shape).stage("load-data")?;
    let val = load_split(val_path, Split::Validation, &a.data, cfg.seed, manifest.image_shape).stage("load-data")?;
    let test = find_split(&paths, Split::Test)
        .map(|p| load_split(p, Split::Test, &a.data, cfg.seed, manifest.image_shape))
        .transpose()
        .stage("load-data")?;

    create_out(&a.out).stage("output")?;
    let cp_path = a.out.join(CHECKPOINT_FILE);
    let metrics_path = a.out.join(METRICS_FILE);
    let resuming = a.resume && cp_path.exists();
    let mut trainer = if resuming {
        let cp = load_checkpoint(&cp_path, Some(&manifest.digest())).stage("load-checkpoint")?;
        Trainer::resume(&cfg, &manifest, cp, &train, &val).stage("setup")?
    } else {
        Trainer::new(&cfg, &manifest, &train, &val).stage("setup")?
    };
    write_atomic(&a.out.join(CONFIG_FILE), cfg.to_text().as_bytes()).stage("output")?;
    write_atomic(&a.out.join("manifest.txt"), manifest.to_text().as_bytes()).stage("output")?;

    let file = if resuming {
        fs::OpenOptions::new().append(true).open(&metrics_path)
    } else {
        fs::File::create(&metrics_path)
    }
    .map_err(Error::from)
    .stage("output")?;
    let out = std::io::BufWriter::new(file);
    let mut sink = if resuming { CsvSink::append(out) } else { CsvSink::new(out).stage("output")? };
    let mut on_epoch = |cp: &crate::training::Checkpoint| save_checkpoint(&cp_path, cp);
    let result = trainer.run(&mut sink, &mut on_epoch).stage("train")?;
    sink.into_inner().flush().map_err(Error::from).stage("output")?;

    let model = SavedModel {
        version: crate::training::MODEL_VERSION,
        manifest: manifest.to_text(),
        theta: result.theta_mean.clone(),
        phi: result.phi.clone(),
    };
    model.save(&a.out.join(MODEL_FILE)).stage("output")?;
    save_samples(&a.out.join(SAMPLES_FILE), &result.samples).stage("output")?;
    println!("trained {} epochs, {} posterior samples", trainer.checkpoint().epoch, result.samples.len());

    if let Some(test) = test {
        let (_, g, r) = model.instantiate(None).stage("evaluate")?;
        let ll = evaluate(&g, &r, &test, cfg.k_test, cfg.seed).stage("evaluate")?;
        println!("test Est. LL (K={}): {ll:.4}", cfg.k_test);
    }
    Ok(())
}

fn load_model_dir(dir: &Path) -> Result<(SavedModel, Manifest, GenerativeModel, RecognitionModel)> {
    let model = SavedModel::load(&dir.join(MODEL_FILE))?;
    let (manifest, g, r) = model.instantiate(None)?;
    Ok((model, manifest, g, r))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let (model, manifest, mut g, r) = load_model_dir(&a.model).stage("load-model")?;
    let samples = {
        let p = a.model.join(SAMPLES_FILE);
        if p.exists() {
            load_samples(&p).stage("load-model")?
        } else {
            vec![model.theta.clone()]
        }
    };
    let ks = if a.k.is_empty() {
        let cfg_path = a.model.join(CONFIG_FILE);
        let k = if cfg_path.exists() {
            TrainConfig::parse(&read_text(&cfg_path).stage("read-config")?).stage("config")?.k_test
        } else {
            500
        };
        vec![k]
    } else {
        a.k.clone()
    };
    let ms = if a.m.is_empty() { vec![samples.len()] } else { a.m.clone() };
    for &m in &ms {
        if m == 0 || m > samples.len() {
            return Err(CliError {
                stage: "arguments",
                error: Error::Config(format!("M={m} outside 1..={}", samples.len())),
            });
        }
    }
    let path = single_path(&a.data).stage("arguments")?;
    let ds = load_split(&path, Split::Test, &a.data, a.seed, manifest.image_shape).stage("load-data")?;
    create_out(&a.out).stage("output")?;
    let mut csv = String::from("K,M,est_ll\n");
    for &m in &ms {
        let theta = crate::estimators::posterior_mean(&samples[..m]).stage("evaluate")?;
        g.set_params(&theta).stage("evaluate")?;
        for &k in &ks {
            let ll = evaluate(&g, &r, &ds, k, a.seed).stage("evaluate")?;
            println!("mean Est. LL (K={k}, M={m}): {ll:.6}");
            csv.push_str(&format!("{k},{m},{ll}\n"));
        }
    }
    write_atomic(&a.out.join("eval.csv"), csv.as_bytes()).stage("output")?;
    Ok(())
}

/// Binary PGM (`P5`) bytes for pixel intensities in `[0, 1]`.
pub fn encode_pgm(rows: usize, cols: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn write_pgm(path: &Path, rows: usize, cols: usize, pixels: &[f64]) -> Result<()> {
    fs::write(path, encode_pgm(rows, cols, pixels))?;
    Ok(())
}

fn encode_rows(rows: &[Vector]) -> Result<String> {
    let ds = Dataset::from_rows(rows, Split::Test, None)?;
    if ds.is_binary() || ds.is_empty() {
        return encode_bitmatrix(&ds);
    }
    Ok(rows
        .iter()
        .map(|r| r.iter().map(f64::to_string).collect::<Vec<_>>().join(" ") + "\n")
        .collect())
}

pub fn cmd_sample(a: &SampleArgs) -> Result<(), CliError> {
    let (_, manifest, g, _) = load_model_dir(&a.model).stage("load-model")?;
    create_out(&a.out).stage("output")?;
    let rows = (0..a.count)
        .map(|i| {
            let mut s = RandomStream::with_path(a.seed, vec![Phase::Generate as u64, i as u64]);
            ancestral_sample(&g, &mut s).map(|(x, _)| x)
        })
        .collect::<Result<Vec<_>>>()
        .stage("sample")?;
    write_atomic(&a.out.join("samples.txt"), encode_rows(&rows).stage("output")?.as_bytes()).stage("output")?;
    if rows.is_empty() {
        return Ok(());
    }
    let (r, c) = manifest
        .image_shape
        .ok_or_else(|| Error::Capability("the manifest has no image shape; only samples.txt was written".into()))
        .stage("images")?;
    for (i, x) in rows.iter().enumerate() {
        write_pgm(&a.out.join(format!("sample_{i:04}.pgm")), r, c, x.as_slice().expect("contiguous"))
            .stage("images")?;
    }
    Ok(())
}

/// Iteratively fills the unobserved pixels: `z ~ q(z | current)`, then the
/// missing pixels from `p(x | z_1)` with the observed ones clamped.
pub fn impute_one(
    g: &GenerativeModel,
    r: &RecognitionModel,
    hollowed: &Vector,
    mask: &[bool],
    iterations: usize,
    stream: &mut RandomStream,
) -> Result<Vector> {
    let clamp: Vec<Option<f64>> = hollowed.iter().zip(mask).map(|(&v, &m)| m.then_some(v)).collect();
    let mut current = hollowed.clone();
    for _ in 0..iterations {
        let z = recog_sample(r, current.view(), stream)?;
        current = layer_sample_clamped(&g.layers()[0], z.layers[0].view(), Some(&clamp), stream)?;
    }
    Ok(current)
}

pub fn cmd_impute(a: &ImputeArgs) -> Result<(), CliError> {
    let (_, manifest, g, r) = load_model_dir(&a.model).stage("load-model")?;
    let path = single_path(&a.data).stage("arguments")?;
    let ds = load_split(&path, Split::Test, &a.data, a.seed, manifest.image_shape).stage("load-data")?;
    ds.require_binary().stage("load-data")?;
    let (rows, cols) = ds
        .image_shape
        .or(manifest.image_shape)
        .ok_or_else(|| Error::Capability("imputation needs an image shape".into()))
        .stage("load-data")?;
    create_out(&a.out).stage("output")?;
    let n = a.limit.map_or(ds.len(), |l| l.min(ds.len()));
    let mut csv = String::from("index,missing_pixels,errors,error_rate\n");
    let (mut total_err, mut total_missing) = (0usize, 0usize);
    for i in 0..n {
        let x = ds.row(i);
        let (mask, hollowed) = hollow_lower_half(x, (rows, cols)).stage("impute")?;
        let mut s = RandomStream::with_path(a.seed, vec![Phase::Impute as u64, i as u64]);
        let recon = impute_one(&g, &r, &hollowed, &mask, a.iterations, &mut s).stage("impute")?;
        let missing = mask.iter().filter(|m| !**m).count();
        let errors = (0..x.len()).filter(|&j| !mask[j] && recon[j] != x[j]).count();
        total_err += errors;
        total_missing += missing;
        csv.push_str(&format!("{i},{missing},{errors},{}\n", errors as f64 / missing.max(1) as f64));

        // original | hollowed | reconstruction, separated by gray columns
        let width = 3 * cols + 2;
        let mut panel = vec![0.5; rows * width];
        for (k, img) in [x.to_owned(), hollowed, recon].iter().enumerate() {
            for rr in 0..rows {
                for cc in 0..cols {
                    panel[rr * width + k * (cols + 1) + cc] = img[rr * cols + cc];
                }
            }
        }
        write_pgm(&a.out.join(format!("impute_{i:04}.pgm")), rows, width, &panel).stage("output")?;
    }
    write_atomic(&a.out.join("impute.csv"), csv.as_bytes()).stage("output")?;
    println!("missing-pixel error rate: {:.6}", total_err as f64 / total_missing.max(1) as f64);
    Ok(())
}

/// The matrix mapping a layer's input (or internal features) to its
/// outputs; column `j` holds the output-space pattern of feature `j`.
pub fn feature_matrix(layer: &LayerParams) -> Option<&Matrix> {
    match layer {
        LayerParams::Sbn { w, .. } => Some(w),
        LayerParams::Darn { u, .. } => Some(u),
        LayerParams::Nade { r, .. } => Some(r),
        LayerParams::VaeBinary { w, .. } => Some(w),
        LayerParams::VaeReal { w_mu, .. } => Some(w_mu),
        _ => None,
    }
}

/// Per-column min-max scaling to `[0, 1]`; constant columns become 0.5.
pub fn normalize_feature(col: &[f64]) -> Vec<f64> {
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        col.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; col.len()]
    }
}

pub fn cmd_export_features(a: &ExportArgs) -> Result<(), CliError> {
    let (_, manifest, g, _) = load_model_dir(&a.model).stage("load-model")?;
    let layer = g
        .layers()
        .get(a.layer)
        .ok_or_else(|| Error::Config(format!("no generative layer {}", a.layer)))
        .stage("arguments")?;
    let w = feature_matrix(layer)
        .ok_or_else(|| Error::Capability(format!("{} layers have no feature weights", layer.kind())))
        .stage("features")?;
    let (rows, cols) = manifest
        .image_shape
        .ok_or_else(|| Error::Capability("the manifest has no image shape".into()))
        .stage("features")?;
    if w.nrows() != rows * cols {
        return Err(CliError {
            stage: "features",
            error: Error::Capability(format!("layer {} does not emit {rows}x{cols} images", a.layer)),
        });
    }
    create_out(&a.out).stage("output")?;
    let mut csv = String::from("unit,l1\n");
    let mut norms = Vec::with_capacity(w.ncols());
    for (j, col) in w.columns().into_iter().enumerate() {
        let v = col.to_vec();
        let l1: f64 = v.iter().map(|x| x.abs()).sum();
        norms.push(l1);
        csv.push_str(&format!("{j},{l1}\n"));
        write_pgm(&a.out.join(format!("feature_{j:04}.pgm")), rows, cols, &normalize_feature(&v)).stage("output")?;
    }
    write_atomic(&a.out.join(format!("feature_l{}.csv", a.layer + 1)), csv.as_bytes()).stage("output")?;
    norms.sort_by(f64::total_cmp);
    if let Some(med) = norms.get(norms.len() / 2) {
        println!("median per-unit L1: {med:.6}");
    }
    Ok(())
}

/// Loads posterior samples written by `train`.
pub fn read_samples(dir: &Path) -> Result<Vec<ParamVector>> {
    load_samples(&dir.join(SAMPLES_FILE))
}
