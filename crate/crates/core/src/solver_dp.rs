//! Forward dynamic programming over a uniform state-of-charge grid with the
//! quadratic transmission loss folded into the stage cost.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{DispatchError, Result};
use crate::grid_model::{
    efficiency, gen_cost, transmission_injection, CostModel, DispatchTrajectory, StorageSpec,
    TransmissionSpec,
};
use crate::profiles::EpisodeProfile;

pub const VALUE_TABLE_CSV_HEADER: &str = "step,level,soc_kwh,value,argmin_level";

#[derive(Debug, Clone, PartialEq)]
pub struct DpConfig {
    pub m_levels: usize,
    /// Force the final state of charge back to zero.
    pub terminal_pinned: bool,
    /// Battery power rating, kW. Transitions above it are infeasible.
    pub p_max_kw: Option<f64>,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            m_levels: 101,
            terminal_pinned: true,
            p_max_kw: None,
        }
    }
}

/// Cost-to-come table and predecessor pointers.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub soc_levels: Vec<f64>,
    /// `values[k][j]`: cheapest cost of reaching level `j` at time `t_k`.
    pub values: Vec<Vec<f64>>,
    /// `argmin[k][j]`: predecessor level at `t_{k-1}`; `usize::MAX` if none.
    pub argmin: Vec<Vec<usize>>,
}

impl ValueTable {
    pub fn m_levels(&self) -> usize {
        self.soc_levels.len()
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(VALUE_TABLE_CSV_HEADER);
        out.push('\n');
        for (k, (row, arg)) in self.values.iter().zip(&self.argmin).enumerate() {
            for (j, (v, a)) in row.iter().zip(arg).enumerate() {
                let a = if *a == usize::MAX {
                    String::new()
                } else {
                    a.to_string()
                };
                let _ = writeln!(out, "{k},{j},{},{v},{a}", self.soc_levels[j]);
            }
        }
        out
    }
}

/// Generation cost rate for delivering `p_batt + p_l` over a lossy line.
pub fn stage_cost_lt(p_batt: f64, p_l: f64, ts: &TransmissionSpec, cm: &CostModel) -> Result<f64> {
    let delivered = p_batt + p_l;
    if delivered < 0.0 {
        return Err(DispatchError::domain(
            "delivered",
            format!("delivered power {delivered} is negative"),
        ));
    }
    gen_cost(transmission_injection(delivered, ts), cm)
}

/// Outcome of moving the battery between two grid levels during one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepFlow {
    pub p_batt_kw: f64,
    pub p_g_kw: f64,
    pub curtailed_kw: f64,
}

/// Flows for the transition `soc -> soc_next` under net load `p_l`.
///
/// Negative delivered power is allowed only as curtailment of PV surplus
/// while the battery is not discharging; anything else is infeasible.
pub fn transition(
    soc: f64,
    soc_next: f64,
    p_l: f64,
    dt: f64,
    spec: &StorageSpec,
    ts: &TransmissionSpec,
) -> Option<StepFlow> {
    let de = soc_next - soc;
    let p_batt = de / (dt * efficiency(de, spec));
    let delivered = p_batt + p_l;
    if delivered >= 0.0 {
        Some(StepFlow {
            p_batt_kw: p_batt,
            p_g_kw: transmission_injection(delivered, ts),
            curtailed_kw: 0.0,
        })
    } else if p_l < 0.0 && p_batt >= 0.0 {
        Some(StepFlow {
            p_batt_kw: p_batt,
            p_g_kw: 0.0,
            curtailed_kw: -delivered,
        })
    } else {
        None
    }
}

fn soc_grid(spec: &StorageSpec, m_levels: usize) -> Vec<f64> {
    if spec.e_max_kwh == 0.0 {
        return vec![0.0];
    }
    (0..m_levels)
        .map(|j| spec.e_max_kwh * j as f64 / (m_levels - 1) as f64)
        .collect()
}

/// Runs the forward recursion and returns the full value table.
pub fn dp_value_table(
    ep: &EpisodeProfile,
    spec: &StorageSpec,
    ts: &TransmissionSpec,
    cm: &CostModel,
    cfg: &DpConfig,
) -> Result<ValueTable> {
    if cfg.m_levels < 2 {
        return Err(DispatchError::domain(
            "m_levels",
            format!("{} < 2", cfg.m_levels),
        ));
    }
    spec.validate()?;
    ts.validate()?;
    let dt = ep.step_hours;
    let net = ep.net_load();
    let levels = soc_grid(spec, cfg.m_levels);
    let m = levels.len();

    let mut values = vec![vec![f64::INFINITY; m]];
    values[0][0] = 0.0;
    let mut argmin = vec![vec![usize::MAX; m]];

    for (k, &p_l) in net.iter().enumerate() {
        let prev = &values[k];
        // each target level scans sources in ascending order: the lowest
        // index wins ties, identical to the sequential sweep
        let row: Vec<(f64, usize)> = (0..m)
            .into_par_iter()
            .map(|to| {
                let mut best = (f64::INFINITY, usize::MAX);
                for (from, &v) in prev.iter().enumerate() {
                    if !v.is_finite() {
                        continue;
                    }
                    let Some(flow) = transition(levels[from], levels[to], p_l, dt, spec, ts) else {
                        continue;
                    };
                    if cfg.p_max_kw.is_some_and(|pm| flow.p_batt_kw.abs() > pm) {
                        continue;
                    }
                    let c = v + dt * gen_cost(flow.p_g_kw, cm).expect("p_g >= 0");
                    if c < best.0 {
                        best = (c, from);
                    }
                }
                best
            })
            .collect();
        values.push(row.iter().map(|r| r.0).collect());
        argmin.push(row.iter().map(|r| r.1).collect());
    }

    Ok(ValueTable {
        soc_levels: levels,
        values,
        argmin,
    })
}

/// Backtracks the optimal level sequence from a value table.
pub fn backtrack(table: &ValueTable, terminal_pinned: bool) -> Result<Vec<usize>> {
    let n = table.n_steps();
    let last = &table.values[n];
    let end = if terminal_pinned {
        0
    } else {
        let mut best = 0;
        for (j, v) in last.iter().enumerate() {
            if *v < last[best] {
                best = j;
            }
        }
        best
    };
    if !last[end].is_finite() {
        return Err(DispatchError::Infeasible(
            "no feasible terminal state of charge".to_string(),
        ));
    }
    let mut path = vec![0; n + 1];
    path[n] = end;
    for k in (1..=n).rev() {
        path[k - 1] = table.argmin[k][path[k]];
    }
    Ok(path)
}

/// Optimal dispatch on the grid, with the table used to find it.
pub fn dp_solve_with_table(
    ep: &EpisodeProfile,
    spec: &StorageSpec,
    ts: &TransmissionSpec,
    cm: &CostModel,
    cfg: &DpConfig,
) -> Result<(DispatchTrajectory, ValueTable)> {
    let table = dp_value_table(ep, spec, ts, cm, cfg)?;
    let path = backtrack(&table, cfg.terminal_pinned)?;
    let dt = ep.step_hours;
    let net = ep.net_load();
    let soc: Vec<f64> = path.iter().map(|&j| table.soc_levels[j]).collect();
    let mut p_g = Vec::with_capacity(net.len());
    let mut p_s = Vec::with_capacity(net.len());
    let mut curtailed = Vec::with_capacity(net.len());
    for (k, &p_l) in net.iter().enumerate() {
        let flow = transition(soc[k], soc[k + 1], p_l, dt, spec, ts)
            .expect("backtracked transitions are feasible");
        p_g.push(flow.p_g_kw);
        p_s.push(flow.p_batt_kw);
        curtailed.push(flow.curtailed_kw);
    }
    let traj = DispatchTrajectory::from_series(p_g, p_s, soc, curtailed, cm, dt)?;
    Ok((traj, table))
}

pub fn dp_solve(
    ep: &EpisodeProfile,
    spec: &StorageSpec,
    ts: &TransmissionSpec,
    cm: &CostModel,
    cfg: &DpConfig,
) -> Result<DispatchTrajectory> {
    dp_solve_with_table(ep, spec, ts, cm, cfg).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_cost_examples() {
        let cm = CostModel::default();
        let t0 = TransmissionSpec::lossless();
        let t1 = TransmissionSpec::new(0.1, 1.0).unwrap();
        assert_eq!(stage_cost_lt(0.0, 0.0, &t0, &cm).unwrap(), 0.0);
        assert_eq!(stage_cost_lt(1.0, 1.0, &t0, &cm).unwrap(), 4.0);
        assert!((stage_cost_lt(0.0, 2.0, &t1, &cm).unwrap() - 5.76).abs() < 1e-12);
        assert!(stage_cost_lt(-3.0, 1.0, &t0, &cm).is_err());
    }

    #[test]
    fn zero_load_stays_empty() {
        let ep = EpisodeProfile::new("z", 0.5, vec![0.0; 6], vec![0.0; 6]).unwrap();
        let spec = StorageSpec::new(4.0, 0.9, 0.9, 1.0).unwrap();
        let t = dp_solve(
            &ep,
            &spec,
            &TransmissionSpec::new(0.1, 1.0).unwrap(),
            &CostModel::default(),
            &DpConfig {
                m_levels: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(t.total_cost, 0.0);
        assert!(t.soc_kwh.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn bellman_consistency_along_path() {
        let ep = EpisodeProfile::new("b", 0.5, vec![1.0, 4.0, 0.5, 3.0], vec![0.0, 0.0, 1.5, 0.0])
            .unwrap();
        let spec = StorageSpec::new(3.0, 0.9, 0.85, 0.99).unwrap();
        let ts = TransmissionSpec::new(0.05, 1.0).unwrap();
        let cfg = DpConfig {
            m_levels: 13,
            ..Default::default()
        };
        let (traj, table) =
            dp_solve_with_table(&ep, &spec, &ts, &CostModel::default(), &cfg).unwrap();
        let path = backtrack(&table, true).unwrap();
        for k in 1..=4 {
            let lhs = table.values[k][path[k]];
            let rhs = table.values[k - 1][path[k - 1]] + 0.5 * traj.stage_cost[k - 1];
            assert!((lhs - rhs).abs() < 1e-10);
        }
        assert!((traj.total_cost - table.values[4][0]).abs() < 1e-10);
    }

    #[test]
    fn power_rating_prunes_transitions() {
        let ep = EpisodeProfile::new("p", 1.0, vec![0.0, 4.0], vec![0.0, 0.0]).unwrap();
        let spec = StorageSpec::ideal(4.0).unwrap();
        let ts = TransmissionSpec::lossless();
        let free = dp_solve(
            &ep,
            &spec,
            &ts,
            &CostModel::default(),
            &DpConfig {
                m_levels: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(free.total_cost, 8.0);
        let limited = dp_solve(
            &ep,
            &spec,
            &ts,
            &CostModel::default(),
            &DpConfig {
                m_levels: 5,
                p_max_kw: Some(1.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(limited.total_cost, 1.0 + 9.0);
    }

    #[test]
    fn infeasible_terminal() {
        // discharging can never happen at zero load; pinned end is reachable,
        // so force infeasibility through an unreachable power rating instead
        let ep = EpisodeProfile::new("i", 1.0, vec![0.0, 0.0], vec![5.0, 0.0]).unwrap();
        let spec = StorageSpec::ideal(10.0).unwrap();
        let r = dp_solve(
            &ep,
            &spec,
            &TransmissionSpec::lossless(),
            &CostModel::default(),
            &DpConfig {
                m_levels: 3,
                terminal_pinned: true,
                p_max_kw: None,
            },
        );
        // surplus can be curtailed, so this one is feasible
        assert_eq!(r.unwrap().total_cost, 0.0);

        let ep = EpisodeProfile::new("i", 1.0, vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let table = dp_value_table(
            &ep,
            &spec,
            &TransmissionSpec::lossless(),
            &CostModel::default(),
            &DpConfig {
                m_levels: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let mut blocked = table.clone();
        blocked.values[2][0] = f64::INFINITY;
        assert!(matches!(
            backtrack(&blocked, true),
            Err(DispatchError::Infeasible(_))
        ));
    }

    #[test]
    fn unpinned_terminal_picks_cheapest_level() {
        // leftover energy costs nothing extra when the end is free
        let ep = EpisodeProfile::new("u", 1.0, vec![2.0, 2.0], vec![0.0, 0.0]).unwrap();
        let spec = StorageSpec::ideal(2.0).unwrap();
        let cfg = DpConfig {
            m_levels: 3,
            terminal_pinned: false,
            p_max_kw: None,
        };
        let t = dp_solve(
            &ep,
            &spec,
            &TransmissionSpec::lossless(),
            &CostModel::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(t.total_cost, 8.0);
        assert_eq!(*t.soc_kwh.last().unwrap(), 0.0);
    }

    #[test]
    fn value_table_csv_shape() {
        let ep = EpisodeProfile::new("c", 1.0, vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let table = dp_value_table(
            &ep,
            &StorageSpec::ideal(1.0).unwrap(),
            &TransmissionSpec::lossless(),
            &CostModel::default(),
            &DpConfig {
                m_levels: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let csv = table.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(VALUE_TABLE_CSV_HEADER));
        assert_eq!(lines.count(), 9);
    }
}
