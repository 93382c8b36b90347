//! Evaluation of solvers and policies over a test set, cost statistics,
//! normalised-MSE comparison tables and CSV export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::error::{DispatchError, Result};
use crate::grid_model::DispatchTrajectory;
use crate::profiles::EpisodeProfile;
use crate::rl_env::{rollout, Case, CaseConfig, Policy};
use crate::solver_dp::{dp_solve, DpConfig};
use crate::solver_pmp::{pmp_solve, PmpConfig};
use crate::solver_sp::solve_episode;

pub const SUMMARY_CSV_HEADER: &str = "case,method,mean_cost,var_cost,raw_mse,norm_mse,n_failed";

/// Row label of the classical baseline in the comparison table.
pub const BASELINE_ROW: &str = "baseline";

/// Something that turns an episode into a trajectory.
#[derive(Clone, Copy)]
pub enum Method<'a> {
    Sp {
        m_levels: usize,
    },
    Pmp(&'a PmpConfig),
    Dp(&'a DpConfig),
    Policy {
        name: &'a str,
        policy: &'a dyn Policy,
    },
}

impl Method<'_> {
    pub fn id(&self) -> String {
        match self {
            Method::Sp { .. } => "sp".into(),
            Method::Pmp(_) => "pmp".into(),
            Method::Dp(_) => "dp".into(),
            Method::Policy { name, .. } => (*name).into(),
        }
    }

    /// SP needs ideal storage and PMP a lossless line; DP and policies run
    /// anywhere.
    pub fn valid_for(&self, case: Case) -> bool {
        match self {
            Method::Sp { .. } => case == Case::Is,
            Method::Pmp(_) => case == Case::Ls,
            Method::Dp(_) | Method::Policy { .. } => true,
        }
    }

    fn run(&self, ep: &EpisodeProfile, cfg: &CaseConfig) -> Result<DispatchTrajectory> {
        match self {
            Method::Sp { m_levels } => {
                solve_episode(ep, &cfg.storage(), &cfg.cm, *m_levels).map(|(_, t)| t)
            }
            Method::Pmp(p) => pmp_solve(ep, &cfg.storage(), &cfg.cm, p).map(|s| s.trajectory),
            Method::Dp(d) => dp_solve(ep, &cfg.storage(), &cfg.transmission(), &cfg.cm, d),
            Method::Policy { policy, .. } => rollout(*policy, ep, cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: String,
    pub case: Case,
    pub episode_ids: Vec<String>,
    /// `None` where the method failed on the episode.
    pub trajectories: Vec<Option<DispatchTrajectory>>,
    /// Failure message per episode, aligned with `trajectories`.
    pub errors: Vec<Option<String>>,
    pub mean_cost: f64,
    /// Population variance of the successful episode costs.
    pub var_cost: f64,
}

impl MethodResult {
    pub fn from_runs(
        method: impl Into<String>,
        case: Case,
        episode_ids: Vec<String>,
        runs: Vec<Result<DispatchTrajectory>>,
    ) -> Result<Self> {
        if episode_ids.len() != runs.len() {
            return Err(DispatchError::Shape(format!(
                "{} episode ids for {} runs",
                episode_ids.len(),
                runs.len()
            )));
        }
        let (trajectories, errors) = runs
            .into_iter()
            .map(|r| match r {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            })
            .unzip();
        let mut r = Self {
            method: method.into(),
            case,
            episode_ids,
            trajectories,
            errors,
            mean_cost: f64::NAN,
            var_cost: f64::NAN,
        };
        (r.mean_cost, r.var_cost) = mean_var(&r.costs());
        Ok(r)
    }

    /// Total costs of the successful episodes, in episode order.
    pub fn costs(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .flatten()
            .map(|t| t.total_cost)
            .collect()
    }

    pub fn n_failed(&self) -> usize {
        self.errors.iter().filter(|e| e.is_some()).count()
    }
}

/// Mean and population variance, independent of input order; NaN when empty.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = sorted.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, sq.iter().sum::<f64>() / n)
}

/// Runs `method` on every episode in parallel. Episodes the method fails on
/// are kept as failures and left out of the statistics.
pub fn evaluate_method(
    method: &Method<'_>,
    episodes: &[&EpisodeProfile],
    cfg: &CaseConfig,
) -> Result<MethodResult> {
    if !method.valid_for(cfg.case) {
        return Err(DispatchError::domain(
            "method",
            format!("`{}` cannot solve case {}", method.id(), cfg.case),
        ));
    }
    let runs: Vec<Result<DispatchTrajectory>> =
        episodes.par_iter().map(|ep| method.run(ep, cfg)).collect();
    let ids = episodes.iter().map(|ep| ep.id.clone()).collect();
    let result = MethodResult::from_runs(method.id(), cfg.case, ids, runs)?;
    let failed = result.n_failed();
    if failed > 0 {
        warn!(
            "{} on {}: {failed} of {} episodes failed",
            result.method,
            cfg.case,
            episodes.len()
        );
    }
    Ok(result)
}

/// Series compared by [`normalized_mse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MseBasis {
    /// Per-step generation cost.
    #[default]
    StageCost,
    /// Total episode cost.
    EpisodeCost,
    /// End-of-step state of charge.
    Soc,
}

impl std::str::FromStr for MseBasis {
    type Err = DispatchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage_cost" => Ok(MseBasis::StageCost),
            "episode_cost" => Ok(MseBasis::EpisodeCost),
            "soc" => Ok(MseBasis::Soc),
            _ => Err(DispatchError::domain(
                "mse_basis",
                format!("`{s}` is not one of stage_cost, episode_cost, soc"),
            )),
        }
    }
}

/// Mean squared difference between two results over the episodes both
/// solved.
pub fn raw_mse(method: &MethodResult, baseline: &MethodResult, basis: MseBasis) -> Result<f64> {
    if method.case != baseline.case {
        return Err(DispatchError::Alignment(format!(
            "{} is case {}, baseline {} is case {}",
            method.method, method.case, baseline.method, baseline.case
        )));
    }
    if method.episode_ids != baseline.episode_ids {
        return Err(DispatchError::Alignment(format!(
            "{} and {} were evaluated on different episodes",
            method.method, baseline.method
        )));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, b) in method.trajectories.iter().zip(&baseline.trajectories) {
        let (Some(a), Some(b)) = (a, b) else { continue };
        let pairs: Vec<(f64, f64)> = match basis {
            MseBasis::StageCost => a
                .stage_cost
                .iter()
                .copied()
                .zip(b.stage_cost.iter().copied())
                .collect(),
            MseBasis::EpisodeCost => vec![(a.total_cost, b.total_cost)],
            MseBasis::Soc => a.soc_kwh[1..]
                .iter()
                .copied()
                .zip(b.soc_kwh[1..].iter().copied())
                .collect(),
        };
        if basis != MseBasis::EpisodeCost && a.n_steps() != b.n_steps() {
            return Err(DispatchError::Alignment(format!(
                "{} and {} disagree on the horizon",
                method.method, baseline.method
            )));
        }
        for (x, y) in pairs {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(DispatchError::Alignment(format!(
            "no episode succeeded under both {} and {}",
            method.method, baseline.method
        )));
    }
    Ok(sum / count as f64)
}

/// Divides by the largest entry so the worst method scores exactly 1.
/// All-zero input stays zero.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        raw.iter().map(|r| r / max).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// One column of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseColumn {
    pub case: Case,
    pub baseline: String,
    pub methods: Vec<String>,
    pub raw_mse: Vec<f64>,
    pub norm_mse: Vec<f64>,
}

impl CaseColumn {
    pub fn norm_of(&self, method: &str) -> Option<f64> {
        if method == self.baseline {
            return Some(0.0);
        }
        self.methods
            .iter()
            .position(|m| m == method)
            .map(|i| self.norm_mse[i])
    }

    pub fn raw_of(&self, method: &str) -> Option<f64> {
        if method == self.baseline {
            return Some(0.0);
        }
        self.methods
            .iter()
            .position(|m| m == method)
            .map(|i| self.raw_mse[i])
    }
}

pub fn normalized_mse(
    results: &[MethodResult],
    baseline: &MethodResult,
    basis: MseBasis,
) -> Result<CaseColumn> {
    let raw = results
        .iter()
        .map(|r| raw_mse(r, baseline, basis))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseColumn {
        case: baseline.case,
        baseline: baseline.method.clone(),
        methods: results.iter().map(|r| r.method.clone()).collect(),
        norm_mse: normalize(&raw),
        raw_mse: raw,
    })
}

/// Baseline and compared methods for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRun {
    pub baseline: MethodResult,
    pub methods: Vec<MethodResult>,
}

impl CaseRun {
    pub fn case(&self) -> Case {
        self.baseline.case
    }

    pub fn column(&self, basis: MseBasis) -> Result<CaseColumn> {
        normalized_mse(&self.methods, &self.baseline, basis)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonTable {
    pub columns: Vec<CaseColumn>,
}

impl ComparisonTable {
    pub fn from_runs(runs: &[CaseRun], basis: MseBasis) -> Result<Self> {
        Ok(Self {
            columns: runs
                .iter()
                .map(|r| r.column(basis))
                .collect::<Result<_>>()?,
        })
    }

    pub fn column(&self, case: Case) -> Option<&CaseColumn> {
        self.columns.iter().find(|c| c.case == case)
    }

    /// Rows are the baseline and every compared method in order of first
    /// appearance, columns are IS, LS, LT; blank where a method was not run.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<&str> = Vec::new();
        for col in &self.columns {
            for m in &col.methods {
                if !rows.contains(&m.as_str()) {
                    rows.push(m);
                }
            }
        }
        let mut out = String::from("method");
        for case in Case::ALL {
            let _ = write!(out, ",{case}");
        }
        out.push('\n');
        out.push_str(BASELINE_ROW);
        for case in Case::ALL {
            out.push(',');
            if self.column(case).is_some() {
                out.push('0');
            }
        }
        out.push('\n');
        for m in rows {
            out.push_str(m);
            for case in Case::ALL {
                out.push(',');
                if let Some(v) = self
                    .column(case)
                    .and_then(|c| c.methods.iter().position(|x| x == m).map(|i| c.norm_mse[i]))
                {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Summary CSV for one case: baseline row first, then the compared methods.
pub fn summary_csv(run: &CaseRun, column: &CaseColumn) -> String {
    let mut out = format!("{SUMMARY_CSV_HEADER}\n");
    for r in std::iter::once(&run.baseline).chain(&run.methods) {
        let raw = column.raw_of(&r.method).unwrap_or(f64::NAN);
        let norm = column.norm_of(&r.method).unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.case,
            r.method,
            r.mean_cost,
            r.var_cost,
            raw,
            norm,
            r.n_failed()
        );
    }
    out
}

fn file_token(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DispatchError::io(path, e))
}

/// Writes `trajectories/<case>_<method>_<episode>.csv` for every successful
/// episode, `summary_<case>.csv` per case and `comparison.csv`. Returns the
/// written paths in write order.
pub fn export_run(
    runs: &[CaseRun],
    table: &ComparisonTable,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let traj_dir = out_dir.join("trajectories");
    fs::create_dir_all(&traj_dir).map_err(|e| DispatchError::io(&traj_dir, e))?;
    let mut manifest = Vec::new();
    for run in runs {
        let case = run.case();
        let column = table.column(case).ok_or_else(|| {
            DispatchError::Alignment(format!("comparison table has no {case} column"))
        })?;
        for r in std::iter::once(&run.baseline).chain(&run.methods) {
            for (id, traj) in r.episode_ids.iter().zip(&r.trajectories) {
                let Some(traj) = traj else { continue };
                let name = format!(
                    "{}_{}_{}.csv",
                    case.as_str().to_ascii_lowercase(),
                    file_token(&r.method),
                    file_token(id)
                );
                let path = traj_dir.join(name);
                write_file(&path, &traj.to_csv(None))?;
                manifest.push(path);
            }
        }
        let path = out_dir.join(format!(
            "summary_{}.csv",
            case.as_str().to_ascii_lowercase()
        ));
        write_file(&path, &summary_csv(run, column))?;
        manifest.push(path);
    }
    let path = out_dir.join("comparison.csv");
    write_file(&path, &table.to_csv())?;
    manifest.push(path);
    Ok(manifest)
}
