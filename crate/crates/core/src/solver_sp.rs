//! Ideal-storage dispatch as a shortest path over the cumulative-generation
//! lattice.
//!
//! Vertex `(i, j)` is the energy `E(t_i)` delivered into the house and the
//! battery up to `t_i`; every feasible value lies in the band
//! `[E_L(t_i), E_L(t_i) + E_max]` and the state of charge is its distance to
//! the lower edge. An edge between consecutive steps costs `dt * f(dE / dt)`.
//! Under PV surplus an edge may also go down by at most the surplus energy of
//! that step, which models curtailment at zero generation cost.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{DispatchError, Result};
use crate::grid_model::{gen_cost, CostModel, DispatchTrajectory, StorageSpec};
use crate::profiles::EpisodeProfile;

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLattice {
    pub step_hours: f64,
    pub e_max_kwh: f64,
    /// `E_L(t_i)`, `n_steps + 1` entries.
    pub lower: Vec<f64>,
    /// `E_L(t_i) + E_max`.
    pub upper: Vec<f64>,
    /// Energy levels available at each time point, ascending.
    pub values: Vec<Vec<f64>>,
    /// PV surplus energy of step `i` that may be curtailed, kWh.
    pub curtailable: Vec<f64>,
}

impl EnergyLattice {
    pub fn n_steps(&self) -> usize {
        self.lower.len() - 1
    }

    /// Interior level count (1 when the band is degenerate).
    pub fn m_levels(&self) -> usize {
        self.values.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Whether the edge `(i, j) -> (i + 1, k)` exists, and its energy step.
    ///
    /// Both ends lie in the band, so the state of charge changes by at most
    /// `E_max`; the only extra condition is that a downward step is covered
    /// by curtailable surplus.
    pub fn edge(&self, i: usize, j: usize, k: usize) -> Option<f64> {
        let (a, b) = (self.values[i][j], self.values[i + 1][k]);
        let de = b - a;
        // lattice values are prefix sums, so an idle step can round just below the surplus
        let slack = 4.0 * f64::EPSILON * (a.abs() + b.abs());
        if de >= -self.curtailable[i] - slack {
            Some(de)
        } else {
            None
        }
    }

    /// Weight of an energy step: `dt * f(max(dE, 0) / dt)`.
    pub fn weight(&self, de: f64, cm: &CostModel) -> f64 {
        let p_g = de.max(0.0) / self.step_hours;
        self.step_hours * gen_cost(p_g, cm).expect("non-negative by construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    /// Chosen level per time point (`n_steps + 1` entries).
    pub level_indices: Vec<usize>,
    /// Lattice value along the path, kWh.
    pub lattice_path: Vec<f64>,
    /// Cumulative generated energy `E_g(t_i)`, non-decreasing.
    pub energy_path: Vec<f64>,
    pub total_cost: f64,
}

/// Uniformly discretizes the feasible band with `m_levels` points per step.
///
/// The first and last time points are pinned to `E_L` (empty storage).
pub fn build_lattice(
    ep: &EpisodeProfile,
    spec: &StorageSpec,
    m_levels: usize,
) -> Result<EnergyLattice> {
    if m_levels < 2 {
        return Err(DispatchError::domain("m_levels", format!("{m_levels} < 2")));
    }
    spec.validate()?;
    let lower = ep.cumulative_load();
    let upper: Vec<f64> = lower.iter().map(|l| l + spec.e_max_kwh).collect();
    let n = ep.n_steps();
    let levels = if spec.e_max_kwh == 0.0 { 1 } else { m_levels };
    let gap = if levels > 1 {
        spec.e_max_kwh / (levels - 1) as f64
    } else {
        0.0
    };

    let values = (0..=n)
        .map(|i| {
            if i == 0 || i == n {
                vec![lower[i]]
            } else {
                let mut row: Vec<f64> = (0..levels).map(|j| lower[i] + j as f64 * gap).collect();
                // pin the top endpoint exactly
                *row.last_mut().expect("levels >= 1") = upper[i];
                row
            }
        })
        .collect::<Vec<_>>();
    for (i, row) in values.iter().enumerate() {
        if row.iter().any(|v| *v < lower[i] || *v > upper[i]) {
            return Err(DispatchError::Infeasible(format!(
                "lattice level outside band at step {i}"
            )));
        }
    }
    let curtailable = ep
        .net_load()
        .iter()
        .map(|p| (-p).max(0.0) * ep.step_hours)
        .collect();

    Ok(EnergyLattice {
        step_hours: ep.step_hours,
        e_max_kwh: spec.e_max_kwh,
        lower,
        upper,
        values,
        curtailable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueEntry {
    cost: f64,
    step: usize,
    level: usize,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then earlier step, then lower level
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.step.cmp(&self.step))
            .then_with(|| other.level.cmp(&self.level))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from the pinned start vertex to the pinned goal vertex.
///
/// Among equal-cost predecessors the lowest level index wins, so the result
/// does not depend on heap order.
pub fn sp_solve(lat: &EnergyLattice, cm: &CostModel) -> Result<PathResult> {
    let n = lat.n_steps();
    let mut dist: Vec<Vec<f64>> = lat
        .values
        .iter()
        .map(|r| vec![f64::INFINITY; r.len()])
        .collect();
    let mut pred: Vec<Vec<usize>> = lat
        .values
        .iter()
        .map(|r| vec![usize::MAX; r.len()])
        .collect();
    let mut settled: Vec<Vec<bool>> = lat.values.iter().map(|r| vec![false; r.len()]).collect();

    dist[0][0] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(QueueEntry {
        cost: 0.0,
        step: 0,
        level: 0,
    });

    while let Some(QueueEntry { cost, step, level }) = heap.pop() {
        if settled[step][level] {
            continue;
        }
        settled[step][level] = true;
        if step == n {
            break;
        }
        for k in 0..lat.values[step + 1].len() {
            let Some(de) = lat.edge(step, level, k) else {
                continue;
            };
            let cand = cost + lat.weight(de, cm);
            let cur = dist[step + 1][k];
            if cand < cur || (cand == cur && level < pred[step + 1][k]) {
                debug_assert!(!settled[step + 1][k] || cand == cur);
                dist[step + 1][k] = cand;
                pred[step + 1][k] = level;
                if cand < cur {
                    heap.push(QueueEntry {
                        cost: cand,
                        step: step + 1,
                        level: k,
                    });
                }
            }
        }
    }

    if !dist[n][0].is_finite() {
        let blocked = (1..=n)
            .find(|&i| dist[i].iter().all(|d| !d.is_finite()))
            .unwrap_or(n);
        return Err(DispatchError::Infeasible(format!(
            "no lattice path reaches step {blocked} (first blocked step); refine the lattice"
        )));
    }

    let mut level_indices = vec![0; n + 1];
    for i in (1..=n).rev() {
        level_indices[i - 1] = pred[i][level_indices[i]];
    }
    let lattice_path: Vec<f64> = level_indices
        .iter()
        .enumerate()
        .map(|(i, &j)| lat.values[i][j])
        .collect();
    let mut energy_path = Vec::with_capacity(n + 1);
    let mut acc = lat.lower[0];
    energy_path.push(acc);
    for w in lattice_path.windows(2) {
        acc += (w[1] - w[0]).max(0.0);
        energy_path.push(acc);
    }

    Ok(PathResult {
        level_indices,
        lattice_path,
        energy_path,
        total_cost: dist[n][0],
    })
}

/// Per-step generation, storage power and state of charge along a path.
pub fn recover_trajectory(
    path: &PathResult,
    ep: &EpisodeProfile,
    cm: &CostModel,
) -> Result<DispatchTrajectory> {
    let dt = ep.step_hours;
    let lower = ep.cumulative_load();
    let net = ep.net_load();
    let n = ep.n_steps();
    if path.lattice_path.len() != n + 1 {
        return Err(DispatchError::Shape(format!(
            "path has {} points, episode needs {}",
            path.lattice_path.len(),
            n + 1
        )));
    }
    let soc: Vec<f64> = path
        .lattice_path
        .iter()
        .zip(&lower)
        .map(|(v, l)| v - l)
        .collect();
    let mut p_g = Vec::with_capacity(n);
    let mut p_s = Vec::with_capacity(n);
    let mut curtailed = Vec::with_capacity(n);
    for (w, p_l) in path.lattice_path.windows(2).zip(&net) {
        let de = w[1] - w[0];
        let g = de.max(0.0) / dt;
        let c = (-de).max(0.0) / dt;
        p_g.push(g);
        curtailed.push(c);
        p_s.push(g - c - p_l);
    }
    DispatchTrajectory::from_series(p_g, p_s, soc, curtailed, cm, dt)
}

/// Builds the lattice, solves it and recovers the trajectory.
pub fn solve_episode(
    ep: &EpisodeProfile,
    spec: &StorageSpec,
    cm: &CostModel,
    m_levels: usize,
) -> Result<(PathResult, DispatchTrajectory)> {
    let lat = build_lattice(ep, spec, m_levels)?;
    let path = sp_solve(&lat, cm)?;
    let traj = recover_trajectory(&path, ep, cm)?;
    Ok((path, traj))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(load: &[f64], dt: f64) -> EpisodeProfile {
        EpisodeProfile::new("t", dt, load.to_vec(), vec![0.0; load.len()]).unwrap()
    }

    #[test]
    fn zero_capacity_collapses_band() {
        let e = ep(&[1.0, 3.0, 2.0], 0.5);
        let lat = build_lattice(&e, &StorageSpec::ideal(0.0).unwrap(), 5).unwrap();
        assert!(lat.values.iter().all(|r| r.len() == 1));
        for (row, l) in lat.values.iter().zip(&lat.lower) {
            assert_eq!(row[0], *l);
        }
        let path = sp_solve(&lat, &CostModel::default()).unwrap();
        assert_eq!(path.total_cost, 0.5 * (1.0 + 9.0 + 4.0));
    }

    #[test]
    fn two_levels_are_band_edges() {
        let e = ep(&[1.0, 3.0, 2.0], 0.5);
        let lat = build_lattice(&e, &StorageSpec::ideal(4.0).unwrap(), 2).unwrap();
        for i in 1..3 {
            assert_eq!(lat.values[i], vec![lat.lower[i], lat.upper[i]]);
        }
        assert_eq!(lat.values[0], vec![0.0]);
        assert_eq!(lat.values[3], vec![lat.lower[3]]);
    }

    #[test]
    fn uniform_spacing() {
        let e = ep(&[1.0, 3.0, 2.0, 0.5], 0.5);
        let lat = build_lattice(&e, &StorageSpec::ideal(3.0).unwrap(), 7).unwrap();
        for row in &lat.values[1..4] {
            for w in row.windows(2) {
                assert!((w[1] - w[0] - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_single_level() {
        let e = ep(&[1.0], 1.0);
        assert!(build_lattice(&e, &StorageSpec::ideal(1.0).unwrap(), 1).is_err());
    }

    #[test]
    fn flattens_two_step_load() {
        let e = ep(&[0.0, 4.0], 1.0);
        let (path, traj) = solve_episode(
            &e,
            &StorageSpec::ideal(10.0).unwrap(),
            &CostModel::default(),
            11,
        )
        .unwrap();
        assert_eq!(path.total_cost, 8.0);
        assert_eq!(traj.p_g_kw, vec![2.0, 2.0]);
        assert_eq!(traj.soc_kwh, vec![0.0, 2.0, 0.0]);
        assert_eq!(traj.total_cost, path.total_cost);
    }

    #[test]
    fn path_on_lower_edge_has_empty_storage() {
        let e = ep(&[2.0, 2.0, 2.0], 0.5);
        let (path, traj) = solve_episode(
            &e,
            &StorageSpec::ideal(5.0).unwrap(),
            &CostModel::default(),
            6,
        )
        .unwrap();
        assert!(path.level_indices.iter().all(|&j| j == 0));
        assert!(traj.soc_kwh.iter().all(|&s| s.abs() < 1e-12));
        assert!(traj.p_s_kw.iter().all(|&p| p.abs() < 1e-12));
    }

    #[test]
    fn infeasible_lattice_names_blocked_step() {
        // the built lattice always contains the lower edge, so a blocked
        // lattice has to be assembled by hand
        let lat = EnergyLattice {
            step_hours: 1.0,
            e_max_kwh: 1.0,
            lower: vec![0.0, 2.0, 1.0],
            upper: vec![1.0, 3.0, 2.0],
            values: vec![vec![0.0], vec![3.0], vec![1.0]],
            curtailable: vec![0.0, 0.0],
        };
        let err = sp_solve(&lat, &CostModel::default()).unwrap_err();
        assert!(
            matches!(err, DispatchError::Infeasible(ref m) if m.contains("step 2")),
            "{err}"
        );
    }

    #[test]
    fn surplus_is_stored_then_curtailed() {
        // PV surplus of 3 kWh with 1 kWh of storage: store 1, curtail 2
        let e = EpisodeProfile::new("s", 1.0, vec![0.0, 1.0], vec![3.0, 0.0]).unwrap();
        let (path, traj) = solve_episode(
            &e,
            &StorageSpec::ideal(1.0).unwrap(),
            &CostModel::default(),
            3,
        )
        .unwrap();
        assert_eq!(path.total_cost, 0.0);
        assert_eq!(traj.p_g_kw, vec![0.0, 0.0]);
        assert_eq!(traj.curtailed_kw, vec![2.0, 0.0]);
        assert_eq!(traj.soc_kwh, vec![0.0, 1.0, 0.0]);
        for w in path.energy_path.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }
}
