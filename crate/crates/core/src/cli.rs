//! Command-line front end. Every subcommand writes its artifacts and a
//! `run.json` manifest (resolved configuration, seeds, SHA-256 of every
//! deterministic artifact) to its output directory.
//!
//! Environment: `RUST_LOG` sets verbosity and `VOXFLOW_THREADS` the
//! worker count; nothing else is read from the environment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Precision, Real};
use crate::error::{contract, Error, Result};
use crate::flow::{checkpoint, Flow, FlowConfig, LatentPyramid};
use crate::forecast::{write_forecast, Twin};
use crate::ingest::{ingest_dir, peek_dtype, DatasetManifest, Split, VolumeF32, VolumeU8, Voxel};
use crate::phantom::{gen_dataset, PhantomSpec};
use crate::pipeline::{evaluate_forecasts, Series};
use crate::quantify::{
    brain_mask, normalized_volume_curve, segment_ventricles, write_csv, write_slice_pgm, ComponentPolicy, CurveRow,
    Thresholds,
};
use crate::seed::{derive_seed, stage_rng};
use crate::temporal::{
    self, evaluate_levels, identity_levels, normalize_latent, pooled, train_temporal, FinalActivation,
    NormalizationParams, TemporalConfig, TemporalParams, TemporalTrainOptions,
};
use crate::train::{train_spatial, write_metrics_csv, TrainSchedule};
use crate::verify::{run_suite, VerifyOptions};

pub const MANIFEST: &str = "manifest.txt";
pub const RUN_MANIFEST: &str = "run.json";
pub const FLOW_FILE: &str = "flow.vflw";
pub const TEMPORAL_FILE: &str = "temporal.vftp";

#[derive(Debug, Parser)]
#[command(name = "voxflow", version, about = "Volumetric flow aging twin")]
pub struct Cli {
    /// Arithmetic precision of models (f32 or f64).
    #[arg(long, global = true, default_value = "f32")]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a longitudinal head-phantom dataset.
    PhantomGen(PhantomGenArgs),
    /// Window, crop and downsample CT volumes.
    Ingest(IngestArgs),
    /// Train the spatial flow with the progressive bit-depth schedule.
    TrainSpatial(TrainSpatialArgs),
    /// Encode every scan of a dataset into latent pyramids.
    Encode(EncodeArgs),
    /// Train the latent aging predictor on consecutive-year pairs.
    TrainTemporal(TrainTemporalArgs),
    /// Forecast a volume N years ahead.
    Forecast(ForecastArgs),
    /// Segment ventricles and write normalized volume curves.
    Quantify(QuantifyArgs),
    /// Forecast every test subject and score against its later scans.
    Evaluate(EvaluateArgs),
    /// Run the numerical self-checks; exits 3 on failure.
    Verify(VerifyArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PhantomGenArgs {
    #[arg(long)]
    pub subjects: usize,
    #[arg(long)]
    pub years: usize,
    #[arg(long, default_value_t = 16)]
    pub res: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Subjects in the test split, taken from the end [default: subjects / 8].
    #[arg(long)]
    pub test_subjects: Option<usize>,
    /// Yearly ventricle volume growth as a fraction [default: 0.08].
    #[arg(long)]
    pub growth: Option<f64>,
    #[arg(long)]
    pub texture_sigma: Option<f64>,
    #[arg(long)]
    pub supersample: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub dst: PathBuf,
    /// Edge of the cube cropped around the centre of gravity.
    #[arg(long)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub downsample: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct FlowArgs {
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    /// Flow steps per level.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Hidden channels of the coupling networks.
    #[arg(long, default_value_t = 32)]
    pub width: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainSpatialArgs {
    /// Dataset directory containing manifest.txt.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flow: FlowArgs,
    /// Schedule file, one `bits epochs lr` line per stage [default: desk schedule].
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use at most this many training scans, in manifest order.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationArg {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    /// All weights zero.
    Zero,
    /// Every layer Gaussian.
    Random,
    /// Gaussian hidden layers, zero last layer.
    NearIdentity,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainTemporalArgs {
    /// Output directory of `encode`.
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = TemporalTrainOptions::DESK_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub final_activation: ActivationArg,
    #[arg(long, value_enum, default_value_t = InitArg::NearIdentity)]
    pub init: InitArg,
    /// Kernel scale of the Gaussian initialization.
    #[arg(long, default_value_t = 1.0)]
    pub gain: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ForecastArgs {
    /// Volume file (8-bit or model-space f32).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub temporal: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    KeepAll,
    KeepLargest,
}

#[derive(Debug, Args, Serialize)]
pub struct SegmentArgs {
    #[arg(long, default_value_t = 80)]
    pub t_ventricle: u8,
    #[arg(long, default_value_t = 40)]
    pub t_air: u8,
    #[arg(long, default_value_t = 200)]
    pub t_skull: u8,
    #[arg(long, value_enum, default_value_t = PolicyArg::KeepAll)]
    pub policy: PolicyArg,
    /// Smallest kept component as a fraction of brain volume (keep-all).
    #[arg(long, default_value_t = 0.01)]
    pub min_fraction: f64,
}

impl SegmentArgs {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            ventricle: self.t_ventricle,
            air: self.t_air,
            skull: self.t_skull,
        }
    }

    pub fn policy(&self) -> ComponentPolicy {
        match self.policy {
            PolicyArg::KeepAll => ComponentPolicy::KeepAll {
                min_fraction: self.min_fraction,
            },
            PolicyArg::KeepLargest => ComponentPolicy::KeepLargest,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct QuantifyArgs {
    /// Dataset directory (manifest.txt) or forecast directory (forecast.csv).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub segment: SegmentArgs,
    /// Also write the middle axial slice of every mask as PGM.
    #[arg(long)]
    pub slices: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub temporal: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 8)]
    pub res: usize,
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Random volumes for the round-trip checks.
    #[arg(long, default_value_t = 100)]
    pub volumes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for checks.csv and run.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub precision: Precision,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    /// Files whose content depends on wall-clock time; listed, not hashed.
    pub volatile: Vec<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

struct Run<'a> {
    command: &'static str,
    precision: Precision,
    out: &'a Path,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    files: Vec<String>,
    volatile: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(command: &'static str, precision: Precision, out: &'a Path, config: &impl Serialize) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Run {
            command,
            precision,
            out,
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            files: Vec::new(),
            volatile: Vec::new(),
        })
    }

    fn seed(&mut self, label: &str, value: u64) {
        self.seeds.insert(label.to_string(), value);
    }

    fn finish(self) -> Result<RunManifest> {
        let artifacts = self
            .files
            .iter()
            .map(|f| {
                Ok(Artifact {
                    file: f.clone(),
                    sha256: crate::sha256_file(&self.out.join(f))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = RunManifest {
            tool: "voxflow".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            precision: self.precision,
            config: self.config,
            seeds: self.seeds,
            artifacts,
            volatile: self.volatile,
        };
        std::fs::write(self.out.join(RUN_MANIFEST), serde_json::to_string_pretty(&m)?)?;
        log::info!("{}: {} artifacts in {}", m.command, m.artifacts.len(), self.out.display());
        Ok(m)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| contract(e.to_string()))?;
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<()> {
    let p = cli.precision;
    match &cli.command {
        Command::PhantomGen(a) => phantom_gen(a, p),
        Command::Ingest(a) => ingest(a, p),
        Command::Quantify(a) => quantify(a, p),
        Command::Verify(a) => verify(a, p),
        c => match p {
            Precision::F32 => run_model::<f32>(c, p),
            Precision::F64 => run_model::<f64>(c, p),
        },
    }
}

fn run_model<T: Real>(c: &Command, p: Precision) -> Result<()> {
    match c {
        Command::TrainSpatial(a) => train_spatial_cmd::<T>(a, p),
        Command::Encode(a) => encode::<T>(a, p),
        Command::TrainTemporal(a) => train_temporal_cmd::<T>(a, p),
        Command::Forecast(a) => forecast::<T>(a, p),
        Command::Evaluate(a) => evaluate::<T>(a, p),
        _ => unreachable!("handled without a model type"),
    }
}

fn phantom_gen(a: &PhantomGenArgs, p: Precision) -> Result<()> {
    let mut spec = PhantomSpec::desk(a.res);
    if let Some(g) = a.growth {
        if !(g > -1.0) {
            return Err(contract(format!("growth {g} must exceed -1")));
        }
        spec.growth = (1.0 + g).cbrt();
    }
    if let Some(s) = a.texture_sigma {
        spec.texture_sigma = s;
    }
    if let Some(s) = a.supersample {
        spec.supersample = s;
    }
    let n_test = a.test_subjects.unwrap_or(a.subjects / 8);
    let mut run = Run::new("phantom-gen", p, &a.out, &(a, &spec))?;
    run.seed("root", a.seed);
    let manifest = gen_dataset(&spec, a.subjects, n_test, a.years, a.seed, &a.out)?;
    run.files.push(MANIFEST.into());
    run.files.push("truth.csv".into());
    for s in &manifest.subjects {
        for scan in &s.scans {
            run.files.push(scan.path.to_string_lossy().into_owned());
        }
    }
    run.finish()?;
    Ok(())
}

fn ingest(a: &IngestArgs, p: Precision) -> Result<()> {
    let mut run = Run::new("ingest", p, &a.dst, a)?;
    run.files = ingest_dir(&a.src, &a.dst, a.size, a.downsample)?;
    if a.dst.join(MANIFEST).exists() {
        run.files.push(MANIFEST.into());
    }
    run.finish()?;
    Ok(())
}

fn read_dataset(dir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::read(&dir.join(MANIFEST))
}

fn train_volumes(dir: &Path, m: &DatasetManifest, limit: Option<usize>) -> Result<Vec<VolumeU8>> {
    let paths: Vec<&Path> = m
        .subjects_in(Split::Train)
        .flat_map(|s| s.scans.iter().map(|s| s.path.as_path()))
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    if paths.is_empty() {
        return Err(contract(format!("no training scans in {}", dir.display())));
    }
    paths.iter().map(|p| VolumeU8::read(&dir.join(p))).collect()
}

fn train_spatial_cmd<T: Real>(a: &TrainSpatialArgs, p: Precision) -> Result<()> {
    let schedule = match &a.schedule {
        Some(path) => TrainSchedule::read(path)?,
        None => TrainSchedule::desk(),
    };
    let m = read_dataset(&a.data)?;
    let data = train_volumes(&a.data, &m, a.limit)?;
    let [d, h, w] = data[0].dims();
    if d != h || h != w {
        return Err(contract(format!("volumes must be cubes, got {d}x{h}x{w}")));
    }
    let config = FlowConfig::new(d, a.flow.levels, a.flow.depth, a.flow.width)?;
    let mut run = Run::new("train-spatial", p, &a.out, &(a, &config, &schedule))?;
    let seed = derive_seed(a.seed, "spatial");
    run.seed("root", a.seed);
    run.seed("spatial", seed);
    std::fs::write(a.out.join("schedule.txt"), schedule.to_text())?;
    run.files.push("schedule.txt".into());
    log::info!("training on {} volumes, {} epochs", data.len(), schedule.total_epochs());
    let result = train_spatial::<T>(&data, config, &schedule, seed, |m| {
        log::info!("epoch {} ({}-bit): nll {:.3} bpd {:.4}", m.epoch, m.stage_bits, m.nll, m.bpd)
    });
    run.volatile.push("metrics.csv".into());
    match result {
        Ok(t) => {
            write_metrics_csv(&a.out.join("metrics.csv"), &t.metrics)?;
            checkpoint::save(&t.flow, &a.out.join(FLOW_FILE))?;
            run.files.push(FLOW_FILE.into());
            run.finish()?;
            Ok(())
        }
        Err(abort) => {
            write_metrics_csv(&a.out.join("metrics.csv"), &abort.metrics)?;
            if let Some(f) = &abort.last_good {
                checkpoint::save(f, &a.out.join("flow.lastgood.vflw"))?;
                run.files.push("flow.lastgood.vflw".into());
            }
            run.finish()?;
            Err(abort.into())
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn latent_name(path: &Path) -> String {
    format!("{}.vlat", stem(path))
}

fn encode<T: Real>(a: &EncodeArgs, p: Precision) -> Result<()> {
    let m = read_dataset(&a.data)?;
    let flow: Flow<T> = checkpoint::load(&a.flow)?;
    let mut run = Run::new("encode", p, &a.out, a)?;
    let scans: Vec<(&str, Split, f64, &Path)> = m
        .subjects
        .iter()
        .flat_map(|s| s.scans.iter().map(move |c| (s.id.as_str(), s.split, c.age_years, c.path.as_path())))
        .collect();
    let written = crate::par::map(&scans, |&(_, _, _, path)| -> Result<String> {
        let v = VolumeU8::read(&a.data.join(path))?;
        let (z, _) = flow.encode(&v.to_model_input())?;
        let name = latent_name(path);
        z.save(&a.out.join(&name))?;
        Ok(name)
    });
    let mut out = DatasetManifest::default();
    for (&(id, split, age, _), name) in scans.iter().zip(written) {
        let name = name?;
        out.push(id, split, age, name.as_str())?;
        run.files.push(name);
    }
    out.write(&a.out.join(MANIFEST))?;
    run.files.push(MANIFEST.into());
    run.finish()?;
    Ok(())
}

type Pair<T> = (LatentPyramid<T>, LatentPyramid<T>);

fn latent_pairs_of<T: Real>(dir: &Path, m: &DatasetManifest, split: Split, norm: &NormalizationParams) -> Result<Vec<Pair<T>>> {
    let mut pairs = Vec::new();
    for s in m.subjects_in(split) {
        let z: Vec<LatentPyramid<T>> = s
            .scans
            .iter()
            .map(|c| LatentPyramid::load(&dir.join(&c.path)).map(|z| normalize_latent(&z, norm)))
            .collect::<Result<_>>()?;
        pairs.extend(z.windows(2).map(|w| (w[0].clone(), w[1].clone())));
    }
    Ok(pairs)
}

#[derive(Serialize)]
struct LevelEval {
    level: String,
    identity_mse: f64,
    model_mse: f64,
    ratio: f64,
}

fn train_temporal_cmd<T: Real>(a: &TrainTemporalArgs, p: Precision) -> Result<()> {
    let m = read_dataset(&a.latents)?;
    let norm = NormalizationParams::default();
    let pairs = latent_pairs_of::<T>(&a.latents, &m, Split::Train, &norm)?;
    let Some((first, _)) = pairs.first() else {
        return Err(contract("no consecutive-year training pairs"));
    };
    let fa = match a.final_activation {
        ActivationArg::Relu => FinalActivation::Relu,
        ActivationArg::Linear => FinalActivation::Linear,
    };
    let config = TemporalConfig::for_latents(first, fa)?;
    let mut run = Run::new("train-temporal", p, &a.out, &(a, &config))?;
    let opts = TemporalTrainOptions {
        lr: a.lr,
        epochs: a.epochs,
        seed: derive_seed(a.seed, "temporal"),
    };
    run.seed("root", a.seed);
    run.seed("temporal", opts.seed);
    let init_seed = derive_seed(a.seed, "temporal/init");
    run.seed("temporal/init", init_seed);
    let mut rng = stage_rng(a.seed, "temporal/init");
    let init = match a.init {
        InitArg::Zero => TemporalParams::zeros(config),
        InitArg::Random => TemporalParams::random(config, a.gain, &mut rng),
        InitArg::NearIdentity => TemporalParams::near_identity(config, a.gain, &mut rng),
    };
    if fa == FinalActivation::Relu && !matches!(a.init, InitArg::Random) {
        log::warn!("relu output with a zero last layer receives no gradient; the model will stay the identity");
    }
    log::info!("{} training pairs", pairs.len());
    let trained = train_temporal(&pairs, init, &opts)?;
    temporal::save(&trained.params, &a.out.join(TEMPORAL_FILE))?;
    write_csv(&a.out.join("losses.csv"), &trained.losses)?;
    run.files.push(TEMPORAL_FILE.into());
    run.files.push("losses.csv".into());
    let held_out = latent_pairs_of::<T>(&a.latents, &m, Split::Test, &norm)?;
    if let Some((z, _)) = held_out.first() {
        let id = identity_levels(&held_out);
        let model = evaluate_levels(&held_out, &trained.params)?;
        let mut rows: Vec<LevelEval> = id
            .iter()
            .zip(&model)
            .enumerate()
            .map(|(l, (&i, &m))| LevelEval {
                level: (l + 1).to_string(),
                identity_mse: i,
                model_mse: m,
                ratio: m / i,
            })
            .collect();
        let (pi, pm) = (pooled(&id, z), pooled(&model, z));
        rows.push(LevelEval {
            level: "all".into(),
            identity_mse: pi,
            model_mse: pm,
            ratio: pm / pi,
        });
        log::info!("held-out mse {pm:.3e} vs identity {pi:.3e}");
        write_csv(&a.out.join("eval.csv"), &rows)?;
        run.files.push("eval.csv".into());
    }
    run.finish()?;
    Ok(())
}

fn read_model_input<T: Real>(path: &Path) -> Result<(crate::diffcore::Tensor<T>, [f64; 3])> {
    let bytes = std::fs::read(path)?;
    let dtype = peek_dtype(&bytes)?;
    if dtype == u8::CODE {
        let v = VolumeU8::from_bytes(&bytes)?;
        Ok((v.to_model_input(), v.spacing()))
    } else if dtype == f32::CODE {
        let v = VolumeF32::from_bytes(&bytes)?;
        Ok((v.to_tensor(), v.spacing()))
    } else {
        Err(contract(format!("{}: forecasts take 8-bit or f32 volumes", path.display())))
    }
}

fn forecast<T: Real>(a: &ForecastArgs, p: Precision) -> Result<()> {
    let flow: Flow<T> = checkpoint::load(&a.flow)?;
    let temporal: TemporalParams<T> = temporal::load(&a.temporal)?;
    let (x, spacing) = read_model_input::<T>(&a.input)?;
    let mut run = Run::new("forecast", p, &a.out, a)?;
    let result = Twin::new(&flow, &temporal).forecast(&x, a.steps)?;
    for s in &result.steps[1..] {
        log::info!("step {}: recursive vs telescoped max abs {:.3e}", s.index, s.discrepancy);
    }
    run.files = write_forecast(&result, spacing, &a.out)?;
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct MeasurementRow {
    subject: String,
    year: usize,
    ventricle_vox: usize,
    brain_vox: usize,
    ventricle_mm3: f64,
    brain_mm3: f64,
}

#[derive(Deserialize)]
struct ForecastRow {
    step: usize,
    file: String,
}

fn quantify(a: &QuantifyArgs, p: Precision) -> Result<()> {
    let series: Vec<(String, Vec<(usize, VolumeU8, String)>)> = if a.input.join(MANIFEST).exists() {
        let m = read_dataset(&a.input)?;
        m.subjects
            .iter()
            .map(|s| {
                let scans = s
                    .scans
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let v = VolumeU8::read(&a.input.join(&c.path))?;
                        Ok((i, v, stem(&c.path)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((s.id.clone(), scans))
            })
            .collect::<Result<_>>()?
    } else if a.input.join("forecast.csv").exists() {
        let rows: Vec<ForecastRow> = crate::quantify::read_csv(&a.input.join("forecast.csv"))?;
        let scans = rows
            .iter()
            .map(|r| {
                let v = VolumeF32::read(&a.input.join(&r.file))?.model_output_to_u8();
                Ok((r.step, v, format!("step_{:02}", r.step)))
            })
            .collect::<Result<Vec<_>>>()?;
        vec![("forecast".to_string(), scans)]
    } else {
        return Err(contract(format!("{} has neither {MANIFEST} nor forecast.csv", a.input.display())));
    };
    let mut run = Run::new("quantify", p, &a.out, a)?;
    let t = a.segment.thresholds();
    let policy = a.segment.policy();
    let mut curves: Vec<CurveRow> = Vec::new();
    let mut rows = Vec::new();
    for (id, scans) in &series {
        let mut vent = Vec::new();
        let mut brain0 = None;
        for (year, v, stem) in scans {
            let brain = brain_mask(v, &t)?;
            let mask = segment_ventricles(v, &brain, t.ventricle, policy)?;
            let mm3 = v.voxel_volume_mm3();
            brain0.get_or_insert(brain.count() as f64);
            vent.push((*year, mask.count() as f64));
            rows.push(MeasurementRow {
                subject: id.clone(),
                year: *year,
                ventricle_vox: mask.count(),
                brain_vox: brain.count(),
                ventricle_mm3: mask.count() as f64 * mm3,
                brain_mm3: brain.count() as f64 * mm3,
            });
            if a.slices {
                let name = format!("{stem}_ventricles.pgm");
                write_slice_pgm(&a.out.join(&name), v, Some(&mask), v.dims()[0] / 2)?;
                run.files.push(name);
            }
        }
        curves.extend(normalized_volume_curve(id, &vent, brain0.unwrap_or(0.0))?);
    }
    write_csv(&a.out.join("curves.csv"), &curves)?;
    write_csv(&a.out.join("measurements.csv"), &rows)?;
    run.files.push("curves.csv".into());
    run.files.push("measurements.csv".into());
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluationSummary {
    subjects: usize,
    steps: usize,
    grew_after_one_step: usize,
    max_path_discrepancy: f64,
}

fn evaluate<T: Real>(a: &EvaluateArgs, p: Precision) -> Result<()> {
    let m = read_dataset(&a.data)?;
    let series: Vec<Series> = m
        .subjects_in(Split::Test)
        .map(|s| {
            Ok(Series {
                id: s.id.clone(),
                volumes: s
                    .scans
                    .iter()
                    .map(|c| VolumeU8::read(&a.data.join(&c.path)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    if series.is_empty() {
        return Err(contract("dataset has no test subjects"));
    }
    let flow: Flow<T> = checkpoint::load(&a.flow)?;
    let temporal: TemporalParams<T> = temporal::load(&a.temporal)?;
    let mut run = Run::new("evaluate", p, &a.out, a)?;
    let twin = Twin::new(&flow, &temporal);
    let ev = evaluate_forecasts(&twin, &series, a.steps, &a.segment.thresholds(), a.segment.policy())?;
    for (f, b) in ev.mae.iter().zip(&ev.frozen_mae) {
        log::info!("year {}: mae {:.3}% (frozen anatomy {:.3}%)", f.year, f.mae_percent, b.mae_percent);
    }
    let outputs: [(&str, &dyn Fn(&Path) -> Result<()>); 5] = [
        ("mae.csv", &|p| write_csv(p, &ev.mae)),
        ("mae_frozen.csv", &|p| write_csv(p, &ev.frozen_mae)),
        ("curves_predicted.csv", &|p| write_csv(p, &ev.predicted)),
        ("curves_measured.csv", &|p| write_csv(p, &ev.measured)),
        ("summary.json", &|p| {
            let s = EvaluationSummary {
                subjects: series.len(),
                steps: a.steps,
                grew_after_one_step: ev.grew_after_one_step,
                max_path_discrepancy: ev.max_discrepancy,
            };
            Ok(std::fs::write(p, serde_json::to_string_pretty(&s)?)?)
        }),
    ];
    for (name, write) in outputs {
        write(&a.out.join(name))?;
        run.files.push(name.into());
    }
    run.finish()?;
    Ok(())
}

fn verify(a: &VerifyArgs, p: Precision) -> Result<()> {
    let opts = VerifyOptions {
        resolution: a.res,
        levels: a.levels,
        depth: a.depth,
        width: a.width,
        volumes: a.volumes,
        seed: a.seed,
    };
    let checks = run_suite(&opts)?;
    for c in &checks {
        let verdict = if c.passed { "ok" } else { "FAILED" };
        println!("{verdict:>6}  {:<40} {:.3e} (< {:.0e})", c.name, c.value, c.tolerance);
    }
    if let Some(out) = &a.out {
        let mut run = Run::new("verify", p, out, a)?;
        run.seed("root", a.seed);
        write_csv(&out.join("checks.csv"), &checks)?;
        run.files.push("checks.csv".into());
        run.finish()?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(failed.join(", ")))
    }
}
