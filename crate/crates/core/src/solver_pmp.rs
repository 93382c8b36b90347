//! Lossy-storage dispatch from the minimum principle.
//!
//! The state bounds are replaced by the quadratic penalty of
//! [`grid_model::penalty`](crate::grid_model::penalty), which makes the
//! optimal control an explicit function of the costate:
//!
//! * charge so that generation sits at `eta_ch * lambda` when the net load is
//!   below that level,
//! * discharge so that generation sits at `lambda / eta_dis` when the net load
//!   is above that level,
//! * otherwise leave the battery idle.
//!
//! The costate only moves while the state of charge is outside
//! `[0, E_max]`. Shooting searches the initial costate for which the battery
//! ends the day empty.

use twofloat::TwoFloat;

use crate::error::{DispatchError, Result};
use crate::grid_model::{efficiency, CostModel, DispatchTrajectory, StorageSpec};
use crate::profiles::EpisodeProfile;

/// Right-hand side of the costate equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostateRhs {
    /// Slope of the penalty, `c'(E)`; flat inside the band.
    #[default]
    Derivative,
    /// The penalty value `c(E)` itself.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmpConfig {
    /// Terminal state-of-charge tolerance; `None` means `1e-4 * E_max`.
    pub tol_kwh: Option<f64>,
    pub max_iterations: usize,
    /// Bracket doublings tried before giving up.
    pub max_doublings: usize,
    pub costate_rhs: CostateRhs,
    /// Replace the cost model's `Q` with the per-episode default rule.
    pub auto_penalty: bool,
}

impl Default for PmpConfig {
    fn default() -> Self {
        Self {
            tol_kwh: None,
            max_iterations: 200,
            max_doublings: 40,
            costate_rhs: CostateRhs::Derivative,
            auto_penalty: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Charge,
    Discharge,
    Idle,
}

/// Which case of the optimal control is active for `(lambda, p_l)`.
pub fn active_branch(lambda: f64, p_l: f64, spec: &StorageSpec) -> Branch {
    if p_l < spec.eta_ch * lambda {
        Branch::Charge
    } else if p_l > lambda / spec.eta_dis {
        Branch::Discharge
    } else {
        Branch::Idle
    }
}

/// Optimal storage power for costate `lambda` and net load `p_l`.
pub fn control_from_costate(lambda: f64, p_l: f64, spec: &StorageSpec) -> f64 {
    match active_branch(lambda, p_l, spec) {
        Branch::Charge => spec.eta_ch * lambda - p_l,
        Branch::Discharge => lambda / spec.eta_dis - p_l,
        Branch::Idle => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmpSolution {
    /// Initial costate, rounded to `f64`.
    pub lambda0: f64,
    /// Low-order part of the initial costate; see [`integrate_split`].
    pub lambda0_lo: f64,
    /// Costate used for the control of each step.
    pub lambda_path: Vec<f64>,
    pub branches: Vec<Branch>,
    /// Unclipped control per step, kW.
    pub control_kw: Vec<f64>,
    pub trajectory: DispatchTrajectory,
    /// Final state of charge minus its target (zero), kWh.
    pub terminal_soc_error: f64,
    pub iterations: usize,
    /// Penalty weight actually used.
    pub penalty_q: f64,
}

impl PmpSolution {
    /// Largest excursion of the state of charge outside `[0, e_max]`, kWh.
    pub fn max_overshoot(&self, spec: &StorageSpec) -> f64 {
        self.trajectory
            .soc_kwh
            .iter()
            .map(|&e| (e - spec.e_max_kwh).max(-e).max(0.0))
            .fold(0.0, f64::max)
    }
}

fn effective_cost_model(
    ep: &EpisodeProfile,
    spec: &StorageSpec,
    cm: &CostModel,
    cfg: &PmpConfig,
) -> CostModel {
    if cfg.auto_penalty {
        cm.with_default_penalty(&ep.net_load(), spec)
    } else {
        *cm
    }
}

// Shooting through penalized bound contacts is a saddle: every step spent
// outside the band multiplies the sensitivity of E(T) to lambda0 by roughly
// `1 + dt * eta * sqrt(Q / E_max)`. A day with a few contacts exceeds 1e15,
// more than f64 can resolve, so the integration runs in double-double.
type Hp = TwoFloat;

fn hp_penalty_term(e: Hp, spec: &StorageSpec, cm: &CostModel, rhs: CostateRhs) -> Hp {
    let over = if e > spec.e_max_kwh {
        e - spec.e_max_kwh
    } else if e < 0.0 {
        e
    } else {
        return Hp::from(0.0);
    };
    match rhs {
        CostateRhs::Derivative => over * (cm.penalty_q / spec.e_max_kwh),
        CostateRhs::Literal => over * over * (cm.penalty_q / (2.0 * spec.e_max_kwh)),
    }
}

fn hp_control(lambda: Hp, p_l: f64, spec: &StorageSpec) -> (Hp, Branch) {
    if lambda * spec.eta_ch > p_l {
        (lambda * spec.eta_ch - p_l, Branch::Charge)
    } else if lambda / spec.eta_dis < p_l {
        (lambda / spec.eta_dis - p_l, Branch::Discharge)
    } else {
        (Hp::from(0.0), Branch::Idle)
    }
}

fn integrate_hp(
    lambda0: Hp,
    ep: &EpisodeProfile,
    spec: &StorageSpec,
    cm: &CostModel,
    rhs: CostateRhs,
) -> Result<PmpSolution> {
    let dt = ep.step_hours;
    let net = ep.net_load();
    let n = net.len();

    let mut soc = Vec::with_capacity(n + 1);
    let mut lambda_path = Vec::with_capacity(n);
    let mut branches = Vec::with_capacity(n);
    let mut control = Vec::with_capacity(n);
    let mut p_g = Vec::with_capacity(n);
    let mut p_s = Vec::with_capacity(n);
    let mut curtailed = Vec::with_capacity(n);

    let zero = Hp::from(0.0);
    let mut e = zero;
    let mut lambda = lambda0;
    soc.push(0.0);
    for (k, &p_l) in net.iter().enumerate() {
        if k > 0 {
            lambda += hp_penalty_term(e, spec, cm, rhs) * dt;
        }
        let (u, branch) = hp_control(lambda, p_l, spec);
        let (g, s) = if u + p_l < 0.0 {
            // battery takes what surplus it can, the rest is curtailed
            (zero, u.max(Hp::from((-p_l).min(0.0))))
        } else {
            (u + p_l, u)
        };
        let c = -(s + p_l).min(zero);
        e += s * (efficiency(f64::from(s), spec) * dt);
        let (e64, l64) = (f64::from(e), f64::from(lambda));
        if !e64.is_finite() || !l64.is_finite() {
            return Err(DispatchError::Divergence {
                step: k,
                reason: format!("state {e64}, costate {l64}"),
            });
        }
        lambda_path.push(l64);
        branches.push(branch);
        control.push(f64::from(u));
        p_g.push(f64::from(g));
        p_s.push(f64::from(s));
        curtailed.push(f64::from(c));
        soc.push(e64);
    }

    let terminal = f64::from(e);
    let trajectory = DispatchTrajectory::from_series(p_g, p_s, soc, curtailed, cm, dt)?;
    Ok(PmpSolution {
        lambda0: lambda0.hi(),
        lambda0_lo: lambda0.lo(),
        lambda_path,
        branches,
        control_kw: control,
        terminal_soc_error: terminal,
        trajectory,
        iterations: 0,
        penalty_q: cm.penalty_q,
    })
}

/// Forward Euler integration of state and costate from `lambda0`.
///
/// The costate for step `k` is updated with the state at the start of that
/// step, so inside the band it stays exactly constant. Generation that would
/// have to be negative is set to zero; the battery then takes what PV
/// surplus it can and the rest is curtailed.
pub fn integrate(
    lambda0: f64,
    ep: &EpisodeProfile,
    spec: &StorageSpec,
    cm: &CostModel,
    rhs: CostateRhs,
) -> Result<PmpSolution> {
    integrate_hp(Hp::from(lambda0), ep, spec, cm, rhs)
}

/// [`integrate`] from the extended-precision costate `lambda0 + lambda0_lo`,
/// as reported in a [`PmpSolution`].
pub fn integrate_split(
    lambda0: f64,
    lambda0_lo: f64,
    ep: &EpisodeProfile,
    spec: &StorageSpec,
    cm: &CostModel,
    rhs: CostateRhs,
) -> Result<PmpSolution> {
    integrate_hp(Hp::new_add(lambda0, lambda0_lo), ep, spec, cm, rhs)
}

/// Shooting on the initial costate: bracket, then bisect until the final
/// state of charge is within tolerance of zero.
///
/// The final state is non-decreasing in the initial costate, which makes
/// bisection safe.
pub fn pmp_solve(
    ep: &EpisodeProfile,
    spec: &StorageSpec,
    cm: &CostModel,
    cfg: &PmpConfig,
) -> Result<PmpSolution> {
    spec.validate()?;
    cm.validate()?;
    if spec.e_max_kwh <= 0.0 {
        return Err(DispatchError::domain(
            "e_max_kwh",
            "the penalty needs a positive capacity",
        ));
    }
    let tol = cfg.tol_kwh.unwrap_or(1e-4 * spec.e_max_kwh);
    if !(tol > 0.0) {
        return Err(DispatchError::domain(
            "tol_kwh",
            format!("{tol} must be > 0"),
        ));
    }
    let cm = effective_cost_model(ep, spec, cm, cfg);
    let shoot = |l: Hp| integrate_hp(l, ep, spec, &cm, cfg.costate_rhs);

    let at_zero = shoot(Hp::from(0.0))?;
    if at_zero.terminal_soc_error.abs() <= tol {
        return Ok(at_zero);
    }

    let peak = ep.net_load().iter().fold(0.0f64, |m, p| m.max(p.abs()));
    let mut half_width = if peak > 0.0 {
        4.0 * peak / spec.eta_ch.min(1.0 / spec.eta_dis)
    } else {
        1.0
    };
    let mut lo = Hp::from(-half_width);
    let mut hi = Hp::from(half_width);
    let (mut f_lo, mut f_hi) = (shoot(lo)?.terminal_soc_error, shoot(hi)?.terminal_soc_error);
    let mut doublings = 0;
    while f_lo > 0.0 || f_hi < 0.0 {
        if doublings == cfg.max_doublings {
            return Err(DispatchError::Infeasible(format!(
                "no costate bracket in [{}, {}]: terminal errors {f_lo} and {f_hi} kWh",
                -half_width, half_width
            )));
        }
        half_width *= 2.0;
        lo = Hp::from(-half_width);
        hi = Hp::from(half_width);
        f_lo = shoot(lo)?.terminal_soc_error;
        f_hi = shoot(hi)?.terminal_soc_error;
        doublings += 1;
    }

    let mut best_residual = f64::INFINITY;
    for it in 1..=cfg.max_iterations {
        let mid = (lo + hi) * 0.5;
        let mut sol = shoot(mid)?;
        sol.iterations = it;
        let err = sol.terminal_soc_error;
        if err.abs() <= tol {
            return Ok(sol);
        }
        if err.abs() < best_residual.abs() {
            best_residual = err;
        }
        if mid <= lo || mid >= hi {
            break;
        }
        if err < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(DispatchError::Infeasible(format!(
        "shooting did not reach |E(T)| <= {tol} kWh; best residual {best_residual} kWh near costate {}",
        f64::from(lo)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(ch: f64, dis: f64) -> StorageSpec {
        StorageSpec::new(10.0, ch, dis, 1.0).unwrap()
    }

    #[test]
    fn control_examples() {
        assert_eq!(control_from_costate(0.0, 0.0, &spec(0.9, 0.8)), 0.0);
        assert!((control_from_costate(2.0, 1.0, &spec(0.9, 1.0)) - 0.8).abs() < 1e-12);
        assert!((control_from_costate(2.0, 3.0, &spec(1.0, 0.8)) - (-0.5)).abs() < 1e-12);
        assert_eq!(active_branch(2.0, 2.0, &spec(0.9, 0.8)), Branch::Idle);
    }

    #[test]
    fn zero_load_accepts_zero_costate() {
        let ep = EpisodeProfile::new("z", 0.5, vec![0.0; 48], vec![0.0; 48]).unwrap();
        let sol = pmp_solve(
            &ep,
            &spec(0.9, 0.9),
            &CostModel::default(),
            &PmpConfig::default(),
        )
        .unwrap();
        assert_eq!(sol.lambda0, 0.0);
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.terminal_soc_error, 0.0);
        assert!(sol.trajectory.soc_kwh.iter().all(|&e| e == 0.0));
        assert!(sol.control_kw.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn interior_trajectory_has_flat_costate() {
        let ep = EpisodeProfile::new("f", 0.5, vec![1.0, 2.0, 3.0, 2.0], vec![0.0; 4]).unwrap();
        let sol = integrate(
            2.0,
            &ep,
            &spec(1.0, 1.0),
            &CostModel::default(),
            CostateRhs::Derivative,
        )
        .unwrap();
        assert!(sol
            .trajectory
            .soc_kwh
            .iter()
            .all(|&e| (0.0..=10.0).contains(&e)));
        assert!(sol.lambda_path.iter().all(|&l| l == 2.0));
        // generation flattened at lambda for a lossless battery
        assert!(sol
            .trajectory
            .p_g_kw
            .iter()
            .all(|&g| (g - 2.0).abs() < 1e-12));
    }

    #[test]
    fn single_step_idle() {
        let ep = EpisodeProfile::new("one", 0.5, vec![1.0], vec![0.0]).unwrap();
        // lambda = 1 puts P_L = 1 inside the dead zone [0.9, 1/0.9]
        let sol = integrate(
            1.0,
            &ep,
            &spec(0.9, 0.9),
            &CostModel::default(),
            CostateRhs::Derivative,
        )
        .unwrap();
        assert_eq!(sol.control_kw, vec![0.0]);
        assert_eq!(sol.trajectory.total_cost, 0.5);
    }

    #[test]
    fn clipped_generation_is_curtailed() {
        // large PV surplus and a negative costate: no generation, no charging
        let ep = EpisodeProfile::new("c", 1.0, vec![0.0], vec![3.0]).unwrap();
        let sol = integrate(
            -5.0,
            &ep,
            &spec(0.9, 0.9),
            &CostModel::default(),
            CostateRhs::Derivative,
        )
        .unwrap();
        assert_eq!(sol.trajectory.p_g_kw, vec![0.0]);
        assert_eq!(sol.trajectory.p_s_kw, vec![0.0]);
        assert_eq!(sol.trajectory.curtailed_kw, vec![3.0]);
    }

    #[test]
    fn divergence_is_reported() {
        let ep = EpisodeProfile::new("d", 0.5, vec![1.0; 48], vec![0.0; 48]).unwrap();
        let cm = CostModel::new(1.0, 1e300).unwrap();
        let r = integrate(1e3, &ep, &spec(1.0, 1.0), &cm, CostateRhs::Derivative);
        assert!(matches!(r, Err(DispatchError::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn literal_rhs_only_increases_costate() {
        let ep = EpisodeProfile::new("l", 0.5, vec![3.0, 3.0, 0.0, 0.0], vec![0.0; 4]).unwrap();
        let sol = integrate(
            0.0,
            &ep,
            &spec(1.0, 1.0),
            &CostModel::default(),
            CostateRhs::Literal,
        )
        .unwrap();
        for w in sol.lambda_path.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn split_costate_replays_solution() {
        use crate::profiles::{synth_episode, SynthParams};
        let ep = synth_episode(1, &SynthParams::default()).unwrap();
        let sp = spec(0.9, 0.9);
        let sol = pmp_solve(&ep, &sp, &CostModel::default(), &PmpConfig::default()).unwrap();
        assert!(sol.terminal_soc_error.abs() <= 1e-3);
        let cm = CostModel::new(1.0, sol.penalty_q).unwrap();
        let again = integrate_split(
            sol.lambda0,
            sol.lambda0_lo,
            &ep,
            &sp,
            &cm,
            CostateRhs::Derivative,
        )
        .unwrap();
        assert_eq!(again.trajectory, sol.trajectory);
    }
}
