use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use storage_dispatch::harness::{
    evaluate_method, export_run, CaseRun, ComparisonTable, Method, MethodResult,
};
use storage_dispatch::profiles::{load_csv, save_csv, split_dataset};
use storage_dispatch::rl_agent::{greedy_policy, train, QTable};
use storage_dispatch::rl_env::{rollout, Case, CaseConfig, IdlePolicy};
use storage_dispatch::{Dataset, DispatchError, DispatchTrajectory, EpisodeProfile};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

const VALID_PAIRS: &str = "sp->is, pmp->ls, dp->is|ls|lt";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(DispatchError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn case_config(cfg: &RunConfig, case: Case) -> CliResult<CaseConfig> {
    Ok(
        CaseConfig::new(case, cfg.storage, cfg.transmission, cfg.cost)?
            .with_physics_exact(cfg.physics_exact),
    )
}

fn load_split(cfg: &RunConfig) -> CliResult<Dataset> {
    if !cfg.data.exists() {
        return Err(CliError::MissingArtifact(format!(
            "dataset {} not found; run `storage-dispatch gen-data` first",
            cfg.data.display()
        )));
    }
    let ds = load_csv(&cfg.data)?;
    Ok(split_dataset(&ds, cfg.n_test, cfg.n_val, cfg.seed)?)
}

fn baseline_method(cfg: &RunConfig, case: Case) -> Method<'_> {
    match case {
        Case::Is => Method::Sp {
            m_levels: cfg.m_levels,
        },
        Case::Ls => Method::Pmp(&cfg.pmp),
        Case::Lt => Method::Dp(&cfg.dp),
    }
}

fn load_qtable(cfg: &RunConfig, case: Case) -> CliResult<QTable> {
    let path = cfg.qtable_path(case);
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "Q table {} for case {case} not found; run `storage-dispatch train` first",
            path.display()
        )));
    }
    Ok(QTable::load(&path)?)
}

fn record_config(cfg: &RunConfig, dir: &Path) -> CliResult<PathBuf> {
    let path = dir.join("config_used.txt");
    write(&path, &cfg.to_text())?;
    Ok(path)
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    let ds = Dataset::synthesize(cfg.n_episodes, cfg.seed, &cfg.synth)?;
    if let Some(dir) = cfg.data.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    save_csv(&ds, &cfg.data)?;
    println!("wrote {} episodes to {}", ds.len(), cfg.data.display());
    Ok(())
}

pub fn solve(cfg: &RunConfig) -> CliResult<()> {
    let method_name = cfg.method.as_deref().ok_or_else(|| {
        CliError::Usage(format!("solve needs --method; valid pairs: {VALID_PAIRS}"))
    })?;
    let [case] = cfg.cases[..] else {
        return Err(CliError::Usage(format!(
            "solve runs a single case; valid pairs: {VALID_PAIRS}"
        )));
    };
    let method = match method_name {
        "sp" => Method::Sp {
            m_levels: cfg.m_levels,
        },
        "pmp" => Method::Pmp(&cfg.pmp),
        "dp" => Method::Dp(&cfg.dp),
        other => {
            return Err(CliError::Usage(format!(
                "unknown method `{other}`; valid pairs: {VALID_PAIRS}"
            )))
        }
    };
    if !method.valid_for(case) {
        return Err(CliError::Usage(format!(
            "method `{method_name}` cannot solve case {case}; valid pairs: {VALID_PAIRS}"
        )));
    }
    let ds = load_split(cfg)?;
    let cc = case_config(cfg, case)?;
    let result = evaluate_method(&method, &ds.test(), &cc)?;
    if result.n_failed() == result.episode_ids.len() && !result.episode_ids.is_empty() {
        let first = result
            .errors
            .iter()
            .flatten()
            .next()
            .cloned()
            .unwrap_or_default();
        return Err(DispatchError::Infeasible(format!(
            "{method_name} failed on every test episode; first: {first}"
        ))
        .into());
    }
    let dir = cfg.out_dir.join(format!(
        "solve_{method_name}_{}",
        case.as_str().to_ascii_lowercase()
    ));
    let run = CaseRun {
        baseline: result,
        methods: Vec::new(),
    };
    let table = ComparisonTable::from_runs(std::slice::from_ref(&run), cfg.mse_basis)?;
    let manifest = export_run(std::slice::from_ref(&run), &table, &dir)?;
    record_config(cfg, &dir)?;
    println!(
        "{method_name} on {case}: mean cost {} over {} episodes ({} failed); {} files in {}",
        run.baseline.mean_cost,
        run.baseline.episode_ids.len(),
        run.baseline.n_failed(),
        manifest.len(),
        dir.display()
    );
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_split(cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    for &case in &cfg.cases {
        let cc = case_config(cfg, case)?;
        info!("training {case} on {} episodes", ds.train().len());
        let report = train(&ds, &cc, &cfg.train)?;
        let path = cfg.qtable_path(case);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        report.table.save(&path)?;

        let tag = case.as_str().to_ascii_lowercase();
        let mut epochs = String::from("epoch,mean_cost\n");
        for (i, c) in report.epoch_costs.iter().enumerate() {
            let _ = writeln!(epochs, "{i},{c}");
        }
        write(
            &cfg.out_dir.join(format!("train_{tag}_epochs.csv")),
            &epochs,
        )?;
        let mut val = String::from("episodes,validation_cost\n");
        for (t, c) in &report.validation_costs {
            let _ = writeln!(val, "{t},{c}");
        }
        write(
            &cfg.out_dir.join(format!("train_{tag}_validation.csv")),
            &val,
        )?;
        println!(
            "{case}: best validation cost {} after {} episodes; table in {}",
            report.best_validation_cost,
            cfg.train.episodes,
            path.display()
        );
    }
    record_config(cfg, &cfg.out_dir)?;
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CliResult<()> {
    let tables = cfg
        .cases
        .iter()
        .map(|&c| load_qtable(cfg, c).map(|t| (c, t)))
        .collect::<CliResult<Vec<_>>>()?;
    let ds = load_split(cfg)?;
    let test = ds.test();
    let mut runs = Vec::new();
    for (case, table) in &tables {
        let cc = case_config(cfg, *case)?;
        let baseline = evaluate_method(&baseline_method(cfg, *case), &test, &cc)?;
        let greedy = greedy_policy(table);
        let learned = evaluate_method(
            &Method::Policy {
                name: "qlearning",
                policy: &greedy,
            },
            &test,
            &cc,
        )?;
        let idle = evaluate_method(
            &Method::Policy {
                name: "idle",
                policy: &IdlePolicy,
            },
            &test,
            &cc,
        )?;
        runs.push(CaseRun {
            baseline,
            methods: vec![learned, idle],
        });
    }
    let table = ComparisonTable::from_runs(&runs, cfg.mse_basis)?;
    let dir = cfg.out_dir.join("eval");
    let manifest = export_run(&runs, &table, &dir)?;
    record_config(cfg, &dir)?;
    for (run, col) in runs.iter().zip(&table.columns) {
        let rows = std::iter::once(&run.baseline).chain(&run.methods);
        for r in rows {
            println!(
                "{} {:<10} mean {:>10.4}  norm_mse {}",
                r.case,
                r.method,
                r.mean_cost,
                col.norm_of(&r.method).unwrap_or(f64::NAN)
            );
        }
    }
    println!("{} files in {}", manifest.len(), dir.display());
    Ok(())
}

fn day_csv(ep: &EpisodeProfile, columns: &[(String, DispatchTrajectory)]) -> String {
    let mut out = String::from("step,hour,load_kw,pv_kw,net_load_kw");
    for (name, _) in columns {
        let _ = write!(out, ",{name}_p_g_kw,{name}_soc_kwh,{name}_stage_cost");
    }
    out.push('\n');
    for k in 0..ep.n_steps() {
        let _ = write!(
            out,
            "{k},{},{},{},{}",
            ep.hour_at(k),
            ep.load_kw[k],
            ep.pv_kw[k],
            ep.load_kw[k] - ep.pv_kw[k]
        );
        for (_, t) in columns {
            let _ = write!(
                out,
                ",{},{},{}",
                t.p_g_kw[k],
                t.soc_kwh[k + 1],
                t.stage_cost[k]
            );
        }
        out.push('\n');
    }
    out
}

/// One wide CSV per case with every method's dispatch for a single day.
pub fn export(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_split(cfg)?;
    let test = ds.test();
    let ep: &EpisodeProfile = match &cfg.episode {
        Some(id) => ds.episodes.iter().find(|e| &e.id == id).ok_or_else(|| {
            CliError::config(
                "episode",
                format!("no episode `{id}` in {}", cfg.data.display()),
            )
        })?,
        None => test
            .first()
            .copied()
            .ok_or_else(|| CliError::config("n_test", "the test partition is empty"))?,
    };
    for &case in &cfg.cases {
        let cc = case_config(cfg, case)?;
        let baseline = baseline_method(cfg, case);
        let mut columns = vec![(baseline.id(), run_one(&baseline, ep, &cc)?)];
        columns.push(("idle".into(), rollout(&IdlePolicy, ep, &cc)?));
        if cfg.qtable_path(case).exists() {
            let table = load_qtable(cfg, case)?;
            columns.push((
                "qlearning".into(),
                rollout(&greedy_policy(&table), ep, &cc)?,
            ));
        }
        let path = cfg.out_dir.join(format!(
            "day_{}_{}.csv",
            case.as_str().to_ascii_lowercase(),
            ep.id
        ));
        write(&path, &day_csv(ep, &columns))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_one(
    method: &Method<'_>,
    ep: &EpisodeProfile,
    cc: &CaseConfig,
) -> CliResult<DispatchTrajectory> {
    let r: MethodResult = evaluate_method(method, &[ep], cc)?;
    match (
        r.trajectories.into_iter().next().flatten(),
        r.errors.into_iter().next().flatten(),
    ) {
        (Some(t), _) => Ok(t),
        (None, e) => Err(DispatchError::Infeasible(e.unwrap_or_default()).into()),
    }
}
