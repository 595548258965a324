//! Command-line surface: experiment configuration, subcommands and exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{hermitian_overlap, psf, summarize, Summary};
use crate::grad::Acquisition;
use crate::io::write_atomic;
use crate::mrisys::{center_fit, gen_phantoms, load_images, normalize_median, read_image, synth_coil_maps, write_f32_image, write_png_magnitude, Dataset};
use crate::recon::{Denoiser, UnrolledConfig, WaveletShrink};
use crate::train::{derive_seed, evaluate, history_jsonl, reconstruct, CsSettings, ReconMethod, TrainConfig, Trainer, HELDOUT_SALT};
use crate::trajectory::{export_waveform, gen_radial, gen_spiral, penalty, HardwareLimits, Trajectory};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "KJOINT_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::NonFinite(_) | Error::NotHermitianPd(_) | Error::NonFiniteCoord { .. } => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrajKind {
    Radial,
    Spiral,
    /// Read from `path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub kind: TrajKind,
    pub shots: usize,
    pub samples: usize,
    /// Radial only: spokes pass through DC (otherwise center-out).
    pub inout: bool,
    /// Spiral only: radius grows as `s^density`.
    pub density: f64,
    /// Spiral only: turns per shot; `None` picks the largest feasible count.
    pub turns: Option<f64>,
    pub path: Option<PathBuf>,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self { kind: TrajKind::Radial, shots: 32, samples: 1280, inout: true, density: 1.0, turns: None, path: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Phantoms,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub source: DataSource,
    /// Number of phantoms to generate.
    pub count: usize,
    pub seed: u64,
    /// Image directory for `source = "directory"`.
    pub path: Option<PathBuf>,
    /// Split sizes; the rest is the test split. Defaults to 80/10/10.
    pub n_train: Option<usize>,
    pub n_val: Option<usize>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { source: DataSource::Phantoms, count: 40, seed: 7, path: None, n_train: None, n_val: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionSpec {
    pub coils: usize,
    /// Noise std relative to the mean clean k-space magnitude.
    pub noise_ratio: f64,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self { coils: 4, noise_ratio: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub grid_n: usize,
    /// Field of view, meters.
    pub fov: f64,
    pub limits: HardwareLimits,
    pub trajectory: TrajectorySpec,
    pub data: DataSpec,
    pub acquisition: AcquisitionSpec,
    pub unrolled: UnrolledConfig,
    /// Starting detail-band threshold when `unrolled.denoiser_theta` is empty.
    pub initial_threshold: f64,
    pub train: TrainConfig,
    pub cs: CsSettings,
    pub eval_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            grid_n: 320,
            fov: 0.22,
            limits: HardwareLimits::default(),
            trajectory: TrajectorySpec::default(),
            data: DataSpec::default(),
            acquisition: AcquisitionSpec::default(),
            unrolled: UnrolledConfig::default(),
            initial_threshold: 0.02,
            train: TrainConfig::default(),
            cs: CsSettings::default(),
            eval_seed: 99,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.grid_n < 8 || self.grid_n % 2 != 0 {
            return bad(format!("grid_n {} must be even and >= 8", self.grid_n));
        }
        if !(self.fov > 0.0) || !self.fov.is_finite() {
            return bad("fov must be positive".into());
        }
        self.limits.validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.trajectory;
        match t.kind {
            TrajKind::File if t.path.is_none() => return bad("trajectory.kind = \"file\" needs trajectory.path".into()),
            TrajKind::Radial | TrajKind::Spiral if t.shots == 0 || t.samples < 3 => {
                return bad("trajectory needs >= 1 shot and >= 3 samples".into());
            }
            _ => {}
        }
        if !(t.density >= 1.0) {
            return bad("trajectory.density must be >= 1".into());
        }
        if self.data.source == DataSource::Directory && self.data.path.is_none() {
            return bad("data.source = \"directory\" needs data.path".into());
        }
        if self.data.source == DataSource::Phantoms && self.data.count == 0 {
            return bad("data.count must be >= 1".into());
        }
        if self.acquisition.coils == 0 {
            return bad("acquisition.coils must be >= 1".into());
        }
        if !(self.acquisition.noise_ratio >= 0.0) {
            return bad("acquisition.noise_ratio must be >= 0".into());
        }
        if !(self.initial_threshold >= 0.0) {
            return bad("initial_threshold must be >= 0".into());
        }
        if !(self.cs.ratio >= 0.0) || self.cs.iters == 0 {
            return bad("cs.ratio must be >= 0 and cs.iters >= 1".into());
        }
        self.train.validate()?;
        let d = WaveletShrink::new(self.grid_n, self.grid_n);
        self.unrolled_config().validate(d.num_params()).map_err(|e| Error::Config(e.to_string()))
    }

    /// Unrolled settings with the starting thresholds filled in.
    pub fn unrolled_config(&self) -> UnrolledConfig {
        let mut u = self.unrolled.clone();
        if u.denoiser_theta.is_empty() {
            u.denoiser_theta = WaveletShrink::new(self.grid_n, self.grid_n).default_theta(self.initial_threshold);
        }
        u
    }

    pub fn build_trajectory(&self) -> Result<Trajectory> {
        let t = &self.trajectory;
        let traj = match t.kind {
            TrajKind::Radial => gen_radial(t.shots, t.samples, t.inout, self.grid_n, self.fov, self.limits.dt)?,
            TrajKind::Spiral => gen_spiral(t.shots, t.samples, t.density, t.turns, self.grid_n, self.fov, &self.limits)?,
            TrajKind::File => Trajectory::load(t.path.as_ref().unwrap())?,
        };
        if traj.grid_n != self.grid_n {
            return Err(Error::Config(format!("trajectory grid {} differs from grid_n {}", traj.grid_n, self.grid_n)));
        }
        Ok(traj)
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        let ds = match self.data.source {
            DataSource::Phantoms => gen_phantoms(self.data.count, self.grid_n, self.data.seed)?,
            DataSource::Directory => load_images(self.data.path.as_ref().unwrap(), self.grid_n)?,
        };
        match (self.data.n_train, self.data.n_val) {
            (None, None) => Ok(ds),
            (a, b) => {
                let n_train = a.unwrap_or(ds.train.len());
                let n_val = b.unwrap_or(ds.val.len());
                Dataset::new(ds.images, self.grid_n, n_train, n_val).map_err(|e| Error::Config(e.to_string()))
            }
        }
    }

    pub fn build_acquisition(&self) -> Result<Acquisition> {
        Ok(Acquisition::new(synth_coil_maps(self.grid_n, self.acquisition.coils)?, self.grid_n, self.acquisition.noise_ratio))
    }
}

#[derive(Debug, Parser)]
#[command(name = "kjoint", version, about = "Joint k-space trajectory and reconstruction optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a radial or spiral trajectory file.
    GenTraj(GenTrajArgs),
    /// Jointly optimize the trajectory and the reconstruction.
    Optimize(OptimizeArgs),
    /// Reconstruct one simulated acquisition.
    Reconstruct(ReconstructArgs),
    /// Point spread function, FWHM and conjugate-symmetry overlap.
    Psf(PsfArgs),
    /// SSIM / PSNR over a dataset split.
    Eval(EvalArgs),
    /// Gradient and slew waveforms as CSV.
    ExportWaveform(ExportWaveformArgs),
}

#[derive(Debug, Args)]
pub struct GenTrajArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<TrajKind>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Radial spokes start at the center instead of crossing it.
    #[arg(long)]
    pub center_out: bool,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub turns: Option<f64>,
    #[arg(long)]
    pub grid_n: Option<usize>,
    #[arg(long)]
    pub fov: Option<f64>,
    /// Sampling and gradient raster time, seconds.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the file even if it violates the hardware limits.
    #[arg(long)]
    pub allow_infeasible: bool,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written with the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Steps between checkpoints (0: only at the end).
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: u64,
    /// Stop after this many steps in total (a checkpoint is written).
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long, value_enum, default_value = "unn")]
    pub method: MethodArg,
    #[arg(long)]
    pub traj: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Thresholds written by `optimize`.
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// Ground-truth image (png or f32); defaults to the first test image.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Dataset index of the ground truth when `--image` is absent.
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long)]
    pub cs_iters: Option<usize>,
    #[arg(long)]
    pub cs_ratio: Option<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Unn,
    Cs,
    Init,
}

impl From<MethodArg> for ReconMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Unn => ReconMethod::Unn,
            MethodArg::Cs => ReconMethod::Cs,
            MethodArg::Init => ReconMethod::Init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DcfArg {
    None,
    /// `|ω|` weights, floored at one grid step.
    Ramp,
}

#[derive(Debug, Args)]
pub struct PsfArgs {
    #[arg(long)]
    pub traj: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    pub dcf: DcfArg,
    /// Neighbourhood radius of the symmetry overlap, rad/pixel.
    #[arg(long, default_value_t = 0.01)]
    pub overlap_eps: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Trajectory files; one table row each.
    #[arg(long, required = true)]
    pub traj: Vec<PathBuf>,
    /// Threshold files matching `--traj` one to one.
    #[arg(long)]
    pub theta: Vec<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "unn,cs,init")]
    pub methods: Vec<MethodArg>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct ExportWaveformArgs {
    #[arg(long)]
    pub traj: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub allow_infeasible: bool,
}

/// Thresholds file written by `optimize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaFile {
    pub thresholds: Vec<f64>,
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_theta(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let t: ThetaFile = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(t.thresholds)
}

fn json_pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn feasibility(traj: &Trajectory, limits: &HardwareLimits) -> serde_json::Value {
    let thr = limits.thresholds(traj.fov, traj.grid_n);
    let p = penalty(&traj.coords, traj.layout(), thr, 0.0, 0.0);
    let w = export_waveform(traj, limits);
    serde_json::json!({
        "feasible": p.is_feasible(),
        "grad_hinge": p.grad_hinge,
        "slew_hinge": p.slew_hinge,
        "max_gradient_t_per_m": w.max_gradient(),
        "max_slew_t_per_m_per_s": w.max_slew(),
        "gmax": limits.gmax,
        "smax": limits.smax,
    })
}

fn check_feasible(traj: &Trajectory, limits: &HardwareLimits, allow: bool) -> Result<()> {
    let rep = feasibility(traj, limits);
    if rep["feasible"].as_bool() == Some(true) || allow {
        if rep["feasible"].as_bool() != Some(true) {
            eprintln!("warning: {rep}");
        }
        return Ok(());
    }
    Err(Error::Infeasible(rep.to_string()))
}

/// Parse arguments, set up the thread pool and run; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
    if n == 0 {
        return Err(Error::Config(format!("{THREADS_ENV} must be >= 1")));
    }
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTraj(a) => gen_traj(a),
        Command::Optimize(a) => optimize(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Psf(a) => psf_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ExportWaveform(a) => export_waveform_cmd(a),
    }
}

fn gen_traj(a: GenTrajArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    let t = &mut cfg.trajectory;
    if let Some(k) = a.kind {
        t.kind = k;
    }
    if let Some(v) = a.shots {
        t.shots = v;
    }
    if let Some(v) = a.samples {
        t.samples = v;
    }
    if a.center_out {
        t.inout = false;
    }
    if let Some(v) = a.density {
        t.density = v;
    }
    if a.turns.is_some() {
        t.turns = a.turns;
    }
    if let Some(v) = a.grid_n {
        cfg.grid_n = v;
    }
    if let Some(v) = a.fov {
        cfg.fov = v;
    }
    if let Some(v) = a.dt {
        cfg.limits.dt = v;
    }
    if cfg.trajectory.kind == TrajKind::File {
        return Err(Error::Config("gen-traj needs --kind radial or spiral".into()));
    }
    cfg.validate()?;
    let traj = cfg.build_trajectory()?;
    check_feasible(&traj, &cfg.limits, a.allow_infeasible)?;
    traj.save(&a.out)?;
    println!("{}", feasibility(&traj, &cfg.limits));
    Ok(())
}

fn optimize(a: OptimizeArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(d) = a.out_dir {
        cfg.output_dir = d;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let init = cfg.build_trajectory()?;
    check_feasible(&init, &cfg.limits, false)?;
    let ds = cfg.build_dataset()?;
    let acq = cfg.build_acquisition()?;
    let out = cfg.output_dir.clone();
    let ckpt = out.join("checkpoint.bin");
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.unrolled_config(), &ds, &acq, &init, &cfg.limits)?;
    if let Some(p) = &a.resume {
        trainer.load_checkpoint(p)?;
        eprintln!("resumed at step {}", trainer.state().step);
    }
    init.save(out.join("init.ktrj"))?;
    write_atomic(out.join("config.json"), &json_pretty(&cfg)?)?;
    let every = a.checkpoint_every;
    while !trainer.is_done() {
        if a.max_steps.is_some_and(|m| trainer.state().step >= m) {
            trainer.save_checkpoint(&ckpt)?;
            write_atomic(out.join("metrics.jsonl"), history_jsonl(&trainer.state().history).as_bytes())?;
            eprintln!("stopped at step {}; resume with --resume {}", trainer.state().step, ckpt.display());
            return Ok(());
        }
        trainer.step()?;
        let st = trainer.state();
        if let Some(r) = st.history.last() {
            eprintln!("step {} level {} epoch {} loss {:.6} g {:.3e} s {:.3e}", r.step, r.level, r.epoch, r.recon_loss, r.g_penalty, r.s_penalty);
        }
        if every > 0 && st.step % every == 0 {
            trainer.save_checkpoint(&ckpt)?;
        }
    }
    trainer.save_checkpoint(&ckpt)?;
    let traj = trainer.trajectory()?;
    let report = trainer.report()?;
    traj.save(out.join("trajectory.ktrj"))?;
    write_atomic(out.join("theta.json"), &json_pretty(&ThetaFile { thresholds: trainer.state().theta.clone() })?)?;
    write_atomic(out.join("metrics.jsonl"), report.to_jsonl().as_bytes())?;
    write_atomic(out.join("report.json"), &json_pretty(&report)?)?;
    if !report.feasible {
        return Err(Error::Infeasible(format!(
            "learned trajectory exceeds the limits (gradient hinge {:e}, slew hinge {:e}); outputs kept in {}",
            report.grad_hinge,
            report.slew_hinge,
            out.display()
        )));
    }
    println!("{}", out.join("trajectory.ktrj").display());
    Ok(())
}

fn reconstruct_cmd(a: ReconstructArgs) -> Result<()> {
    let cfg = load_config(a.config.as_ref())?;
    let traj = Trajectory::load(&a.traj)?;
    if traj.grid_n != cfg.grid_n {
        return Err(Error::Config(format!("trajectory grid {} differs from grid_n {}", traj.grid_n, cfg.grid_n)));
    }
    let n = cfg.grid_n;
    let (truth, seed) = match (&a.image, a.index) {
        (Some(p), _) => {
            let (img, r, c) = read_image(p)?;
            let mut x = center_fit(&img, r, c, n);
            normalize_median(&mut x)?;
            (x, derive_seed(&[cfg.eval_seed, HELDOUT_SALT, u64::MAX]))
        }
        (None, idx) => {
            let ds = cfg.build_dataset()?;
            let i = match idx {
                Some(i) if i < ds.len() => i,
                Some(i) => return Err(Error::Config(format!("index {i} outside the {} images", ds.len()))),
                None => *ds.test.first().ok_or_else(|| Error::Config("the test split is empty".into()))?,
            };
            (ds.images[i].clone(), derive_seed(&[cfg.eval_seed, HELDOUT_SALT, i as u64]))
        }
    };
    let mut unrolled = cfg.unrolled_config();
    if let Some(p) = &a.theta {
        unrolled.denoiser_theta = load_theta(p)?;
        unrolled.validate(WaveletShrink::new(n, n).num_params()).map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut cs = cfg.cs;
    if let Some(v) = a.cs_iters {
        cs.iters = v;
    }
    if let Some(v) = a.cs_ratio {
        cs.ratio = v;
    }
    let acq = cfg.build_acquisition()?;
    let model = acq.model(&traj.coords)?;
    let y = acq.acquire(&model, &truth, seed)?.y;
    let method = ReconMethod::from(a.method);
    let xhat = reconstruct(method, &model, &y, &unrolled, cs)?;
    write_f32_image(&a.out_dir.join("recon.f32"), &xhat, n, n)?;
    write_png_magnitude(&a.out_dir.join("recon.png"), &xhat, n, n)?;
    let metrics = serde_json::json!({
        "method": method,
        "ssim": crate::eval::ssim(&xhat, &truth, n)?,
        "psnr": crate::eval::psnr(&xhat, &truth)?,
    });
    write_atomic(a.out_dir.join("metrics.json"), &json_pretty(&metrics)?)?;
    println!("{metrics}");
    Ok(())
}

/// `|ω|` density weights with a floor of one grid step.
pub fn ramp_dcf(traj: &Trajectory) -> Vec<f64> {
    let floor = 2.0 * std::f64::consts::PI / traj.grid_n as f64;
    traj.coords.chunks_exact(traj.nd).map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt().max(floor)).collect()
}

fn psf_cmd(a: PsfArgs) -> Result<()> {
    let traj = Trajectory::load(&a.traj)?;
    let dcf = match a.dcf {
        DcfArg::None => None,
        DcfArg::Ramp => Some(ramp_dcf(&traj)),
    };
    let rep = psf(&traj, dcf.as_deref())?;
    let overlap = hermitian_overlap(&traj, a.overlap_eps)?;
    let n = traj.grid_n;
    write_f32_image(&a.out_dir.join("psf.f32"), &rep.psf, n, n)?;
    write_atomic(a.out_dir.join("psf_profiles.csv"), rep.profiles_csv().as_bytes())?;
    let summary = serde_json::json!({
        "grid_n": n,
        "dcf": matches!(a.dcf, DcfArg::Ramp),
        "fwhm_pixels": rep.fwhm_pixels,
        "sidelobe_energy_ratio": rep.sidelobe_energy_ratio,
        "hermitian_overlap": overlap,
        "overlap_eps": a.overlap_eps,
        "radii": rep.radii,
        "mean_profile": rep.mean_profile,
    });
    write_atomic(a.out_dir.join("psf_report.json"), &json_pretty(&summary)?)?;
    println!("fwhm {:.4} px, sidelobe energy {:.4}, hermitian overlap {:.4}", rep.fwhm_pixels, rep.sidelobe_energy_ratio, overlap);
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub trajectory: String,
    pub method: ReconMethod,
    pub ssim: Summary,
    pub psnr: Summary,
    pub n: usize,
}

/// `mean ± std` table, one row per trajectory, two columns per method.
pub fn format_table(rows: &[EvalRow], methods: &[ReconMethod]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<24}", "trajectory");
    for m in methods {
        let name = serde_json::to_value(m).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let _ = write!(s, " | {:^17} {:^17}", format!("{name} SSIM"), format!("{name} PSNR"));
    }
    s.push('\n');
    let mut seen: Vec<&str> = Vec::new();
    for r in rows {
        if !seen.contains(&r.trajectory.as_str()) {
            seen.push(&r.trajectory);
        }
    }
    for t in seen {
        let _ = write!(s, "{t:<24}");
        for m in methods {
            if let Some(r) = rows.iter().find(|r| r.trajectory == t && r.method == *m) {
                let _ = write!(s, " | {:>7.4} ± {:<7.4} {:>7.2} ± {:<7.2}", r.ssim.mean, r.ssim.std, r.psnr.mean, r.psnr.std);
            }
        }
        s.push('\n');
    }
    s
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    if !a.theta.is_empty() && a.theta.len() != a.traj.len() {
        return Err(Error::Config(format!("{} --theta files for {} --traj files", a.theta.len(), a.traj.len())));
    }
    let ds = cfg.build_dataset()?;
    let acq = cfg.build_acquisition()?;
    let idx = match a.split {
        SplitArg::Train => ds.train.clone(),
        SplitArg::Val => ds.val.clone(),
        SplitArg::Test => ds.test.clone(),
    };
    if idx.is_empty() {
        return Err(Error::Config("the selected split is empty".into()));
    }
    let methods: Vec<ReconMethod> = a.methods.iter().map(|&m| m.into()).collect();
    let mut rows = Vec::new();
    for (k, tp) in a.traj.iter().enumerate() {
        let traj = Trajectory::load(tp)?;
        if traj.grid_n != cfg.grid_n {
            return Err(Error::Config(format!("{}: grid {} differs from grid_n {}", tp.display(), traj.grid_n, cfg.grid_n)));
        }
        let mut unrolled = cfg.unrolled_config();
        if let Some(p) = a.theta.get(k) {
            unrolled.denoiser_theta = load_theta(p)?;
            unrolled.validate(WaveletShrink::new(cfg.grid_n, cfg.grid_n).num_params()).map_err(|e| Error::Config(e.to_string()))?;
        }
        let label = tp.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for &m in &methods {
            let res = evaluate(&ds, &idx, &traj.coords, &acq, m, &unrolled, cfg.cs, cfg.eval_seed)?;
            let ss: Vec<f64> = res.iter().map(|r| r.ssim).collect();
            let ps: Vec<f64> = res.iter().map(|r| r.psnr).collect();
            rows.push(EvalRow { trajectory: label.clone(), method: m, ssim: summarize(&ss), psnr: summarize(&ps), n: res.len() });
        }
    }
    print!("{}", format_table(&rows, &methods));
    if let Some(p) = &a.out {
        write_atomic(p, &json_pretty(&rows)?)?;
    }
    Ok(())
}

fn export_waveform_cmd(a: ExportWaveformArgs) -> Result<()> {
    let cfg = load_config(a.config.as_ref())?;
    let traj = Trajectory::load(&a.traj)?;
    let mut limits = cfg.limits;
    limits.dt = traj.dt;
    check_feasible(&traj, &limits, a.allow_infeasible)?;
    let w = export_waveform(&traj, &limits);
    write_atomic(&a.out, w.to_csv().as_bytes())?;
    println!("max gradient {:.4e} T/m, max slew {:.4e} T/m/s", w.max_gradient(), w.max_slew());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Infeasible("x".into())), EXIT_INFEASIBLE);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::NotHermitianPd("x".into())), EXIT_NUMERICAL);
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.limits.dt, 4e-6);
        assert_eq!(c.train.adam_betas, [0.5, 0.999]);
        assert_eq!(c.cs.iters, 50);
        assert!(matches!(ExperimentConfig::from_json(r#"{"grid": 64}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"train": {"lr": 1}}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"schema_version": 2}"#), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"train": {"n_levels": 2, "decim_schedule": [4, 8]}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(ExperimentConfig::from_json(r#"{"trajectory": {"kind": "file"}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips() {
        let c = ExperimentConfig { grid_n: 64, ..Default::default() };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn table_shape() {
        let s = Summary { mean: 0.9, std: 0.01 };
        let p = Summary { mean: 30.0, std: 1.0 };
        let rows = vec![
            EvalRow { trajectory: "radial".into(), method: ReconMethod::Unn, ssim: s, psnr: p, n: 3 },
            EvalRow { trajectory: "radial".into(), method: ReconMethod::Cs, ssim: s, psnr: p, n: 3 },
            EvalRow { trajectory: "learned".into(), method: ReconMethod::Unn, ssim: s, psnr: p, n: 3 },
            EvalRow { trajectory: "learned".into(), method: ReconMethod::Cs, ssim: s, psnr: p, n: 3 },
        ];
        let t = format_table(&rows, &[ReconMethod::Unn, ReconMethod::Cs]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("unn SSIM") && lines[0].contains("cs PSNR"));
        assert!(lines[1].starts_with("radial") && lines[1].contains("0.9000 ± 0.0100"));
    }

    #[test]
    fn parse_commands() {
        let c = Cli::try_parse_from(["kjoint", "gen-traj", "--kind", "spiral", "--shots", "4", "--out", "a.ktrj"]).unwrap();
        assert!(matches!(c.command, Command::GenTraj(GenTrajArgs { kind: Some(TrajKind::Spiral), shots: Some(4), .. })));
        let c = Cli::try_parse_from(["kjoint", "eval", "--config", "c.json", "--traj", "a", "--traj", "b", "--methods", "unn,init"]).unwrap();
        match c.command {
            Command::Eval(e) => {
                assert_eq!(e.traj.len(), 2);
                assert_eq!(e.methods, vec![MethodArg::Unn, MethodArg::Init]);
            }
            _ => panic!(),
        }
        assert!(Cli::try_parse_from(["kjoint", "reconstruct", "--method", "dl", "--traj", "t", "--out-dir", "o"]).is_err());
    }
}
