//! The `nfs` command line: train, render, evaluate, probe, gradient check
//! and capacity report, plus a synthetic dataset writer.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nfs_core::data::{self, DatasetManifest, ManifestRecord, PoseTrack, SourceKind, Split, SynthSource, SynthSpec};
use nfs_core::dsp::{AudioBuffer, SampleFormat};
use nfs_core::model::{NfsModel, RenderOptions};
use nfs_core::trainer::{self, TrainOutput};
use nfs_core::NfsError;
use nfs_gradcore::Coverage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

pub use config::{Overrides, Preset, RunConfig};

/// Largest per-tensor gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, files or configuration.
    #[error("{0}")]
    Input(String),
    /// An internal consistency check reported failure.
    #[error("check failed: {0}")]
    Check(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Check(_) => 3,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<NfsError> for CliError {
    fn from(e: NfsError) -> Self {
        if e.is_input_error() || matches!(e, NfsError::Contract(_)) {
            CliError::Input(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "nfs", version, about = "Binaural rendering by Fourier-domain shift and scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML file with optional `preset`, `[model]` and `[train]` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Dotted-key override such as `model.chan=8`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Disable noise injection (at render time: render without it).
    #[arg(long, global = true)]
    pub no_ni: bool,
    #[arg(long, global = true)]
    pub no_lff: bool,
    #[arg(long, global = true)]
    pub no_shifter: bool,
    #[arg(long, global = true)]
    pub no_geowarp: bool,
    #[arg(long, global = true)]
    pub frame_ms: Option<f64>,
    #[arg(long, global = true)]
    pub hop_ms: Option<f64>,
}

impl Common {
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let ov = Overrides {
            preset: self.preset,
            set: self.set.clone(),
            seed: self.seed,
            no_ni: self.no_ni,
            no_lff: self.no_lff,
            no_shifter: self.no_shifter,
            no_geowarp: self.no_geowarp,
            frame_ms: self.frame_ms,
            hop_ms: self.hop_ms,
        };
        let cfg = RunConfig::load(self.config.as_deref(), &ov)?;
        log::info!("effective config:\n{}", cfg.to_toml());
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Render a mono WAV to binaural with a pose track.
    Render(RenderArgs),
    /// Score a model on a dataset manifest.
    Eval(EvalArgs),
    /// Sweep the source along an axis and report the dominant channel per ear.
    Probe(ProbeArgs),
    /// Finite-difference check of the end-to-end gradient on the tiny config.
    Gradcheck(GradcheckArgs),
    /// Parameter and multiply-accumulate accounting.
    Count(CountArgs),
    /// Write a synthetic ground-truth dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset manifest (TOML with `[[record]]` entries).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the log, config and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub mono: PathBuf,
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = WavFormat::Float32)]
    pub format: WavFormat,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Records to score; by default the test split, or everything if there is none.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Also write the report as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = Axis::Lateral)]
    pub axis: Axis,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    pub from: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    pub to: f64,
    /// Number of probe positions.
    #[arg(long, default_value_t = 41)]
    pub steps: usize,
    /// Base position `x,y,z`; the swept coordinate is replaced.
    #[arg(long, default_value = "1,0,0", allow_hyphen_values = true)]
    pub at: String,
    /// Orientation quaternion `w,x,y,z`.
    #[arg(long, default_value = "1,0,0,0", allow_hyphen_values = true)]
    pub quat: String,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Entries checked per tensor; all when absent.
    #[arg(long)]
    pub coverage: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    /// Seconds of audio per source.
    #[arg(long, default_value_t = 60.0)]
    pub seconds: f64,
    /// Static source position `x,y,z`; repeatable, one record each.
    #[arg(long = "source", default_value = "1,-0.8,0", allow_hyphen_values = true)]
    pub sources: Vec<String>,
    #[arg(long, value_enum, default_value_t = KindArg::Speech)]
    pub kind: KindArg,
    #[arg(long, value_enum, default_value_t = WavFormat::Float32)]
    pub format: WavFormat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WavFormat {
    Pcm16,
    Pcm24,
    Float32,
}

impl From<WavFormat> for SampleFormat {
    fn from(f: WavFormat) -> Self {
        match f {
            WavFormat::Pcm16 => SampleFormat::Pcm16,
            WavFormat::Pcm24 => SampleFormat::Pcm24,
            WavFormat::Float32 => SampleFormat::Float32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Validation,
    Test,
}

/// `longitudinal` sweeps x (front/back), `lateral` sweeps y (left/right).
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Longitudinal,
    Lateral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Speech,
    Tones,
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, stdout),
        Command::Render(a) => cmd_render(&a),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::Probe(a) => cmd_probe(&a, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(&a, stdout),
        Command::Count(a) => cmd_count(&a, stdout),
        Command::Synth(a) => cmd_synth(&a, stdout),
    }
}

fn load_model(path: &Path) -> Result<NfsModel, CliError> {
    trainer::load_model(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn cmd_train(a: &TrainArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = a.common.run_config()?;
    let records = data::load_manifest(&a.data, None)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    let model = NfsModel::new(cfg.model.clone(), cfg.train.seed)?;
    let out = TrainOutput { dir: a.out.clone() };
    let outcome = trainer::train(&records, model, &cfg.train, Some(&out))?;
    let steps = &outcome.report.steps;
    let last = steps.last().map(|s| s.loss.total).unwrap_or(f64::NAN);
    let floor = steps.iter().map(|s| s.loss.l2 * 1e3).fold(f64::INFINITY, f64::min);
    let report = json!({
        "steps": steps.len(),
        "last_loss": last,
        "l2_e3_floor": floor,
        "best": outcome.report.best.map(|(s, l)| json!({"step": s, "loss": l})),
        "checkpoint": out.last_path(),
    });
    writeln!(stdout, "{report}")?;
    Ok(())
}

pub fn cmd_render(a: &RenderArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let mono = AudioBuffer::read_wav(&a.mono)?;
    if mono.num_channels() != 1 {
        return Err(CliError::input(format!("{}: expected mono input", a.mono.display())));
    }
    let track = PoseTrack::read_csv(&a.poses)?;
    let cond = data::frame_conditions(&track, model.config(), 0, mono.len())?;
    let opts = RenderOptions { noise: model.config().ablation.ni && !a.common.no_ni, seed: a.common.seed.unwrap_or(0) };
    let stereo = model.render(&mono, &cond, opts)?;

    let dir = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let tmp = tempfile::Builder::new().prefix(".nfs-render").suffix(".wav").tempfile_in(&dir)?;
    stereo.write_wav(tmp.path(), a.format.into())?;
    set_readable(tmp.path())?;
    tmp.persist(&a.out).map_err(|e| CliError::Input(e.to_string()))?;
    Ok(())
}

#[cfg(unix)]
fn set_readable(path: &Path) -> std::io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o644))
}

#[cfg(not(unix))]
fn set_readable(_: &Path) -> std::io::Result<()> {
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = a.common.run_config()?;
    let model = load_model(&a.model)?;
    let records = data::load_manifest(&a.data, None)?;
    let has_test = records.iter().any(|r| r.split == Split::Test);
    let want = |s: Split| match a.split {
        Some(SplitArg::All) => true,
        Some(SplitArg::Train) => s == Split::Train,
        Some(SplitArg::Validation) => s == Split::Validation,
        Some(SplitArg::Test) => s == Split::Test,
        None => !has_test || s == Split::Test,
    };
    let chosen: Vec<_> = records.into_iter().filter(|r| want(r.split)).collect();
    if chosen.is_empty() {
        return Err(CliError::input("no records in the selected split"));
    }
    let report = trainer::evaluate(&chosen, &model, &cfg.train.loss)?;
    write!(stdout, "{}", report.to_table())?;
    if let Some(p) = &a.out {
        std::fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn parse_floats<const N: usize>(s: &str, what: &str) -> Result<[f64; N], CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::input(format!("{what} `{s}`: {e}")))?;
    v.try_into().map_err(|_| CliError::input(format!("{what} `{s}` needs {N} comma-separated numbers")))
}

/// Probe positions: `steps` evenly spaced values of the swept coordinate.
pub fn probe_positions(axis: Axis, from: f64, to: f64, steps: usize, at: [f64; 3]) -> Vec<[f64; 3]> {
    let k = match axis {
        Axis::Longitudinal => 0,
        Axis::Lateral => 1,
    };
    (0..steps)
        .map(|i| {
            let t = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let mut p = at;
            p[k] = from + (to - from) * t;
            p
        })
        .collect()
}

pub const PROBE_HEADER: &str = "x,y,z,ear,channel,sigma,phi,intensity,gain,g";

pub fn cmd_probe(a: &ProbeArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let at = parse_floats::<3>(&a.at, "--at")?;
    let quat = parse_floats::<4>(&a.quat, "--quat")?;
    let rows = model.probe(&probe_positions(a.axis, a.from, a.to, a.steps, at), quat)?;
    let mut csv = format!("{PROBE_HEADER}\n");
    for r in &rows {
        for (ear, e) in ["left", "right"].iter().zip(&r.ears) {
            let [x, y, z] = r.position;
            csv.push_str(&format!(
                "{x},{y},{z},{ear},{},{},{},{},{},{}\n",
                e.channel, e.sigma, e.phi, e.intensity, e.gain, e.g
            ));
        }
    }
    match &a.out {
        Some(p) => std::fs::write(p, csv)?,
        None => stdout.write_all(csv.as_bytes())?,
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = a.common.run_config()?;
    let (model, item, loss) = trainer::tiny_check_setup(cfg.train.seed, cfg.model.ablation)?;
    let coverage = a.coverage.map_or(Coverage::All, Coverage::Strided);
    let noise = cfg.model.ablation.ni.then_some(cfg.train.seed);
    let r = trainer::model_grad_check(&model, &item, &loss, noise, a.eps, coverage)?;
    let worst_group = r.groups.iter().map(|g| g.2).fold(0.0, f64::max);
    let report = json!({
        "eps": a.eps,
        "entries": r.entries_checked,
        "max_group_error": worst_group,
        "max_entry_error": r.max_rel_error,
        "worst_entry": {"param": r.worst.0, "index": r.worst.1, "analytic": r.worst.2, "numeric": r.worst.3},
        "groups": r.groups.iter().map(|(n, e, s)| json!({"param": n, "entry_error": e, "group_error": s})).collect::<Vec<_>>(),
    });
    writeln!(stdout, "{report:#}")?;
    if !(worst_group < GRADCHECK_TOL) {
        return Err(CliError::Check(format!("gradient error {worst_group:.3e} exceeds {GRADCHECK_TOL:e}")));
    }
    Ok(())
}

pub fn cmd_count(a: &CountArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = a.common.run_config()?;
    let model = NfsModel::new(cfg.model, cfg.train.seed)?;
    let c = model.count();
    let report = json!({
        "params": c.params,
        "blocks": c.blocks.iter().map(|(k, n)| json!({"block": k, "params": n})).collect::<Vec<_>>(),
        "macs_per_second": c.macs_per_second,
        "mac_blocks": c.mac_blocks.iter().map(|(k, n)| json!({"stage": k, "macs": n})).collect::<Vec<_>>(),
    });
    writeln!(stdout, "{report:#}")?;
    let sum: usize = c.blocks.iter().map(|(_, n)| n).sum();
    if sum != c.params || c.params != model.params().numel() {
        return Err(CliError::Check(format!("block sum {sum} != total {}", c.params)));
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = a.common.run_config()?;
    if !(a.seconds > 0.0) {
        return Err(CliError::input("--seconds must be positive"));
    }
    let kind = match a.kind {
        KindArg::Speech => SourceKind::Speech,
        KindArg::Tones => SourceKind::Tones,
    };
    let sources = a
        .sources
        .iter()
        .map(|s| {
            let p = parse_floats::<3>(s, "--source")?;
            Ok(SynthSource { kind, ..SynthSource::fixed(p, a.seconds) })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut spec = SynthSpec::new(sources);
    spec.sample_rate = cfg.model.sample_rate;
    spec.speed_of_sound = cfg.model.speed_of_sound;
    spec.ear_offset = cfg.model.ear_offset;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let records = data::synth_dataset(&spec, &mut rng)?;
    std::fs::create_dir_all(&a.out)?;
    let mut manifest = DatasetManifest::default();
    for rec in &records {
        let paths = rec.write(&a.out, a.format.into())?;
        let name = |p: &PathBuf| PathBuf::from(p.file_name().expect("written files have names"));
        manifest.records.push(ManifestRecord {
            id: rec.id.clone(),
            mono: name(&paths[0]),
            binaural: name(&paths[1]),
            poses: name(&paths[2]),
            split: rec.split,
        });
    }
    let path = a.out.join("manifest.toml");
    manifest.write(&path)?;
    writeln!(stdout, "{}", path.display())?;
    Ok(())
}
