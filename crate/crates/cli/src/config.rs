//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then the config file, then the
//! command line. The seed additionally falls back to `STORAGE_DISPATCH_SEED`
//! when neither the file nor the command line sets it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use storage_dispatch::harness::MseBasis;
use storage_dispatch::profiles::SynthParams;
use storage_dispatch::rl_agent::{Bins, TrainConfig};
use storage_dispatch::rl_env::Case;
use storage_dispatch::solver_dp::DpConfig;
use storage_dispatch::solver_pmp::PmpConfig;
use storage_dispatch::{CostModel, DispatchError, StorageSpec, TransmissionSpec};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "STORAGE_DISPATCH_SEED";

/// Every accepted key with its default.
const DEFAULTS: &[(&str, &str)] = &[
    ("case", "is"),
    ("e_max_kwh", "10"),
    ("eta_ch", "0.9"),
    ("eta_dis", "0.9"),
    ("eta_decay", "1"),
    ("alpha", "0.05"),
    ("eta_tr", "0.95"),
    ("quad_coeff", "1"),
    ("penalty_q", "auto"),
    ("m_levels", "101"),
    ("terminal_pinned", "true"),
    ("p_max_kw", "none"),
    ("pmp_tol_kwh", "auto"),
    ("physics_exact", "false"),
    ("data", "data/episodes.csv"),
    ("out_dir", "out"),
    ("n_test", "100"),
    ("n_val", "50"),
    ("seed", "0"),
    ("n_episodes", "500"),
    ("peak_load_kw", "5"),
    ("peak_pv_kw", "4"),
    ("noise", "0.05"),
    ("day_variation", "0.2"),
    ("n_steps", "48"),
    ("step_hours", "0.5"),
    ("episodes", "100000"),
    ("learning_rate", "0.2"),
    ("gamma", "0.99"),
    ("epsilon_start", "1"),
    ("epsilon_end", "0.01"),
    ("epsilon_decay", "0.99995"),
    ("eval_every", "1000"),
    ("soc_bins", "21"),
    ("hour_bins", "48"),
    ("load_bins", "16"),
    ("action_bins", "21"),
    ("action_span_kwh", "auto"),
    ("qtable", "auto"),
    ("mse_basis", "stage_cost"),
    ("method", "none"),
    ("episode", "none"),
];

/// Raw layered values, keyed by config name.
#[derive(Debug, Clone, Default)]
pub struct Layers {
    file: BTreeMap<String, String>,
    cli: BTreeMap<String, String>,
}

fn check_key(key: &str) -> CliResult<()> {
    if DEFAULTS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(CliError::config(key, "unknown key"))
    }
}

impl Layers {
    pub fn load_file(&mut self, path: &Path) -> CliResult<()> {
        let text = fs::read_to_string(path).map_err(|e| DispatchError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.file = parse_config_text(&text, path)?;
        Ok(())
    }

    /// Sets a command-line value; later calls win.
    pub fn set_cli(&mut self, key: &str, value: &str) -> CliResult<()> {
        check_key(key)?;
        self.cli.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parses a `KEY=VALUE` assignment from the command line.
    pub fn set_assignment(&mut self, assignment: &str) -> CliResult<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("`--set {assignment}` is not of the form KEY=VALUE"))
        })?;
        self.set_cli(k.trim(), v)
    }

    fn is_set(&self, key: &str) -> bool {
        self.cli.contains_key(key) || self.file.contains_key(key)
    }

    /// Effective string value of every key.
    pub fn resolve(&self, seed_env: Option<&str>) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        if !self.is_set("seed") {
            if let Some(s) = seed_env {
                out.insert("seed".into(), s.trim().to_string());
            }
        }
        for (k, v) in self.file.iter().chain(&self.cli) {
            out.insert(k.clone(), v.clone());
        }
        out
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, path: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "{}:{}: expected `key = value`, found `{line}`",
                path.display(),
                i + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        check_key(k)?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::config(
                k,
                format!("set twice in {} (line {})", path.display(), i + 1),
            ));
        }
    }
    Ok(out)
}

/// Typed configuration of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub cases: Vec<Case>,
    pub storage: StorageSpec,
    pub transmission: TransmissionSpec,
    pub cost: CostModel,
    pub physics_exact: bool,
    pub m_levels: usize,
    pub dp: DpConfig,
    pub pmp: PmpConfig,
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub n_test: usize,
    pub n_val: usize,
    pub seed: u64,
    pub n_episodes: usize,
    pub synth: SynthParams,
    pub train: TrainConfig,
    pub qtable: Option<PathBuf>,
    pub mse_basis: MseBasis,
    pub method: Option<String>,
    pub episode: Option<String>,
    /// Resolved values, for the record written next to the outputs.
    pub resolved: BTreeMap<String, String>,
}

struct Values<'a>(&'a BTreeMap<String, String>);

impl Values<'_> {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e: T::Err| CliError::config(key, format!("`{v}`: {e}")))
    }

    fn f64(&self, key: &str) -> CliResult<f64> {
        let v: f64 = self.parse(key)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::config(key, format!("{v} is not finite")))
        }
    }

    fn count(&self, key: &str) -> CliResult<usize> {
        let v: usize = self.parse(key)?;
        if v == 0 {
            return Err(CliError::config(key, "must be at least 1"));
        }
        Ok(v)
    }

    fn bool(&self, key: &str) -> CliResult<bool> {
        match self.raw(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(CliError::config(key, format!("`{v}` is not a boolean"))),
        }
    }

    /// `None` for the given sentinel (`auto`, `none`).
    fn optional<T: FromStr>(&self, key: &str, sentinel: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key) == sentinel {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }
}

/// Maps a core domain error onto the config key it came from.
fn keyed(err: DispatchError, rename: &[(&str, &str)]) -> CliError {
    match err {
        DispatchError::Domain { name, reason } => {
            let key = rename
                .iter()
                .find(|(from, _)| *from == name)
                .map_or(name, |(_, to)| *to);
            CliError::config(key, reason)
        }
        other => CliError::Core(other),
    }
}

impl RunConfig {
    pub fn from_values(map: BTreeMap<String, String>) -> CliResult<Self> {
        let v = Values(&map);
        let cases = match v.raw("case") {
            "all" => Case::ALL.to_vec(),
            s => vec![Case::from_str(s).map_err(|e| keyed(e, &[]))?],
        };
        let storage = StorageSpec::new(
            v.f64("e_max_kwh")?,
            v.f64("eta_ch")?,
            v.f64("eta_dis")?,
            v.f64("eta_decay")?,
        )
        .map_err(|e| keyed(e, &[]))?;
        let transmission =
            TransmissionSpec::new(v.f64("alpha")?, v.f64("eta_tr")?).map_err(|e| keyed(e, &[]))?;
        let penalty_q: Option<f64> = v.optional("penalty_q", "auto")?;
        let cost = CostModel::new(
            v.f64("quad_coeff")?,
            penalty_q.unwrap_or(CostModel::default().penalty_q),
        )
        .map_err(|e| keyed(e, &[]))?;

        let m_levels = v.count("m_levels")?;
        if m_levels < 2 {
            return Err(CliError::config("m_levels", "must be at least 2"));
        }
        let p_max_kw: Option<f64> = v.optional("p_max_kw", "none")?;
        if let Some(p) = p_max_kw {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(CliError::config(
                    "p_max_kw",
                    format!("{p} must be finite and >= 0"),
                ));
            }
        }
        let dp = DpConfig {
            m_levels,
            terminal_pinned: v.bool("terminal_pinned")?,
            p_max_kw,
        };
        let tol: Option<f64> = v.optional("pmp_tol_kwh", "auto")?;
        if let Some(t) = tol {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::config("pmp_tol_kwh", format!("{t} must be > 0")));
            }
        }
        let pmp = PmpConfig {
            tol_kwh: tol,
            auto_penalty: penalty_q.is_none(),
            ..PmpConfig::default()
        };

        let n_steps = v.count("n_steps")?;
        let step_hours = v.f64("step_hours")?;
        if step_hours <= 0.0 {
            return Err(CliError::config(
                "step_hours",
                format!("{step_hours} must be > 0"),
            ));
        }
        let synth = SynthParams {
            peak_load_kw: v.f64("peak_load_kw")?,
            peak_pv_kw: v.f64("peak_pv_kw")?,
            noise: v.f64("noise")?,
            day_variation: v.f64("day_variation")?,
            n_steps,
            step_hours,
        };
        for key in ["peak_load_kw", "peak_pv_kw", "noise", "day_variation"] {
            if v.f64(key)? < 0.0 {
                return Err(CliError::config(key, "must be >= 0"));
            }
        }

        let seed: u64 = v.parse("seed")?;
        let train = TrainConfig {
            episodes: v.parse("episodes")?,
            alpha: v.f64("learning_rate")?,
            gamma: v.f64("gamma")?,
            epsilon_start: v.f64("epsilon_start")?,
            epsilon_end: v.f64("epsilon_end")?,
            epsilon_decay: v.f64("epsilon_decay")?,
            seed,
            eval_every: v.count("eval_every")?,
            bins: Bins {
                soc: v.count("soc_bins")?,
                hour: v.count("hour_bins")?,
                load: v.count("load_bins")?,
                action: v.count("action_bins")?,
            },
            action_span_kwh: v.optional("action_span_kwh", "auto")?,
        };
        train
            .validate()
            .map_err(|e| keyed(e, &[("alpha", "learning_rate")]))?;

        let qtable: Option<PathBuf> = v.optional("qtable", "auto")?;
        if qtable.is_some() && cases.len() > 1 {
            return Err(CliError::config(
                "qtable",
                "names a single table; set a single case",
            ));
        }
        let mse_basis = MseBasis::from_str(v.raw("mse_basis")).map_err(|e| keyed(e, &[]))?;

        Ok(Self {
            cases,
            storage,
            transmission,
            cost,
            physics_exact: v.bool("physics_exact")?,
            m_levels,
            dp,
            pmp,
            data: v.parse("data")?,
            out_dir: v.parse("out_dir")?,
            n_test: v.parse("n_test")?,
            n_val: v.parse("n_val")?,
            seed,
            n_episodes: v.count("n_episodes")?,
            synth,
            train,
            qtable,
            mse_basis,
            method: v.optional("method", "none")?,
            episode: v.optional("episode", "none")?,
            resolved: map,
        })
    }

    /// Resolved configuration in the file format, one key per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn qtable_path(&self, case: Case) -> PathBuf {
        self.qtable.clone().unwrap_or_else(|| {
            self.out_dir
                .join(format!("qtable_{}.txt", case.as_str().to_ascii_lowercase()))
        })
    }
}
