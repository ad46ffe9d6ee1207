//! Experiment configuration: a TOML file merged with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use rscope_core::dmd::RankPolicy;
use rscope_core::sensing::{SensingConfig, SensingKind};
use rscope_core::{Error, Result};
use serde::Deserialize;

pub const DEFAULT_SENSORS: usize = 20;
pub const DEFAULT_TRIALS: usize = 100;

/// On-disk experiment description. Relative paths are taken relative to the
/// file's directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub suite: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub library: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub rank_policy: Option<String>,
    pub sensing: Option<SensingConfig>,
    pub snr_db: Option<f64>,
    pub j: Option<usize>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
}

impl ExperimentFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut file: Self =
            toml::from_str(&text).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut file.suite, &mut file.data, &mut file.library, &mut file.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(file)
    }
}

/// Flags shared by the experiment subcommands; each overrides the config.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunArgs {
    /// Experiment config (TOML); flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Library directory written by `build-lib`.
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Data directory written by `synth` (or a directory of .rsnp files).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sensor kind: point, boundary, gaussian, bernoulli, identity, tomographic.
    #[arg(long)]
    pub sensing: Option<SensingKind>,
    /// Sensor count for point, gaussian, bernoulli and tomographic sensing.
    #[arg(long)]
    pub p: Option<usize>,
    /// Boundary sensing: temperature sensors.
    #[arg(long)]
    pub pt: Option<usize>,
    /// Boundary sensing: velocity sensors.
    #[arg(long)]
    pub pv: Option<usize>,
    /// Seed of the sensor placement (defaults to --seed).
    #[arg(long)]
    pub sensor_seed: Option<u64>,
    /// Signal-to-noise ratio in dB; `inf` for noiseless measurements.
    #[arg(long, allow_negative_numbers = true)]
    pub snr_db: Option<f64>,
    /// Time-augmentation depth (windows of j+1 snapshots).
    #[arg(long)]
    pub j: Option<usize>,
    /// Trials per test set.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Seed of window starts and noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `fixed:R` or `energy:T`.
    #[arg(long)]
    pub rank_policy: Option<String>,
    /// Use the held-out test sets instead of the library regimes' own.
    #[arg(long)]
    pub held_out: bool,
}

/// Fully resolved experiment; every random choice is seeded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub suite: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub library: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub rank_policy: Option<RankPolicy>,
    pub sensing: SensingConfig,
    /// Whether the sensing setup was given explicitly.
    pub sensing_given: bool,
    pub snr_db: Option<f64>,
    pub j: usize,
    pub trials: usize,
    pub seed: u64,
    pub held_out: bool,
}

impl Experiment {
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => ExperimentFile::read(path)?,
            None => ExperimentFile::default(),
        };
        let seed = args.seed.or(file.seed).unwrap_or(0);
        let sensing_given = file.sensing.is_some()
            || args.sensing.is_some()
            || args.p.is_some()
            || args.pt.is_some()
            || args.pv.is_some();
        let mut sensing = file.sensing.unwrap_or_else(|| SensingConfig {
            p: DEFAULT_SENSORS,
            seed,
            ..SensingConfig::new(SensingKind::Point)
        });
        if let Some(kind) = args.sensing {
            sensing.kind = kind;
        }
        if let Some(p) = args.p {
            sensing.p = p;
        }
        if let Some(pt) = args.pt {
            sensing.p_t = pt;
        }
        if let Some(pv) = args.pv {
            sensing.p_v = pv;
        }
        if let Some(s) = args.sensor_seed {
            sensing.seed = s;
        }
        let snr_db = match args.snr_db.or(file.snr_db) {
            Some(x) if x.is_nan() => return Err(Error::Argument("snr-db must be a number or inf".into())),
            Some(x) if x == f64::INFINITY => None,
            other => other,
        };
        let rank_policy = args
            .rank_policy
            .as_deref()
            .or(file.rank_policy.as_deref())
            .map(str::parse)
            .transpose()?;
        let trials = args.trials.or(file.trials).unwrap_or(DEFAULT_TRIALS);
        if trials == 0 {
            return Err(Error::Argument("trials must be at least 1".into()));
        }
        Ok(Self {
            suite: file.suite,
            data: args.data.clone().or(file.data),
            library: args.library.clone().or(file.library),
            out: args.out.clone().or(file.out),
            rank_policy,
            sensing,
            sensing_given,
            snr_db,
            j: args.j.or(file.j).unwrap_or(0),
            trials,
            seed,
            held_out: args.held_out,
        })
    }

    pub fn library(&self) -> Result<&Path> {
        self.library
            .as_deref()
            .ok_or_else(|| Error::Argument("no library given (--library or config)".into()))
    }

    pub fn data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Argument("no data directory given (--data or config)".into()))
    }

    pub fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Argument("no output directory given (--out or config)".into()))
    }
}
