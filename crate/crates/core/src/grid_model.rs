//! Physical and economic primitives shared by every solver.
//!
//! Units are kW, kWh and hours throughout. Storage power is positive when
//! charging and negative when discharging.

use std::fmt::Write as _;

use crate::error::{DispatchError, Result};

pub const TRAJECTORY_CSV_HEADER: &str = "step,p_g_kw,p_s_kw,soc_kwh,stage_cost";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageSpec {
    pub e_max_kwh: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
    /// Retention factor applied to every flow, including idle steps.
    pub eta_decay: f64,
}

fn unit_interval(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(DispatchError::domain(name, format!("{v} not in (0, 1]")))
    }
}

impl StorageSpec {
    pub fn new(e_max_kwh: f64, eta_ch: f64, eta_dis: f64, eta_decay: f64) -> Result<Self> {
        let s = Self {
            e_max_kwh,
            eta_ch,
            eta_dis,
            eta_decay,
        };
        s.validate()?;
        Ok(s)
    }

    /// Lossless storage of the given capacity.
    pub fn ideal(e_max_kwh: f64) -> Result<Self> {
        Self::new(e_max_kwh, 1.0, 1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        // zero capacity is allowed: it degenerates to the no-storage system
        if !(self.e_max_kwh >= 0.0 && self.e_max_kwh.is_finite()) {
            return Err(DispatchError::domain(
                "e_max_kwh",
                format!("{} must be >= 0", self.e_max_kwh),
            ));
        }
        unit_interval("eta_ch", self.eta_ch)?;
        unit_interval("eta_dis", self.eta_dis)?;
        unit_interval("eta_decay", self.eta_decay)
    }

    pub fn is_lossless(&self) -> bool {
        self.eta_ch == 1.0 && self.eta_dis == 1.0 && self.eta_decay == 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmissionSpec {
    /// Quadratic loss coefficient `R / |V_g|^2`, 1/kW.
    pub alpha: f64,
    /// Line efficiency used by the learning environment's transition.
    pub eta_tr: f64,
}

impl TransmissionSpec {
    pub fn new(alpha: f64, eta_tr: f64) -> Result<Self> {
        let t = Self { alpha, eta_tr };
        t.validate()?;
        Ok(t)
    }

    pub fn lossless() -> Self {
        Self {
            alpha: 0.0,
            eta_tr: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(DispatchError::domain(
                "alpha",
                format!("{} must be >= 0", self.alpha),
            ));
        }
        unit_interval("eta_tr", self.eta_tr)
    }
}

impl Default for TransmissionSpec {
    fn default() -> Self {
        Self::lossless()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Coefficient `a` of the fuel cost `a * P_g^2`.
    pub quad_coeff: f64,
    /// Weight `Q` of the state-of-charge penalty.
    pub penalty_q: f64,
}

impl CostModel {
    pub fn new(quad_coeff: f64, penalty_q: f64) -> Result<Self> {
        let c = Self {
            quad_coeff,
            penalty_q,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.quad_coeff > 0.0 && self.quad_coeff.is_finite()) {
            return Err(DispatchError::domain(
                "quad_coeff",
                format!("{} must be > 0", self.quad_coeff),
            ));
        }
        if !(self.penalty_q > 0.0 && self.penalty_q.is_finite()) {
            return Err(DispatchError::domain(
                "penalty_q",
                format!("{} must be > 0", self.penalty_q),
            ));
        }
        Ok(())
    }

    /// Penalty weight `Q = 1e3 * a * max(P_L)^2 / E_max` for an episode.
    pub fn default_penalty(quad_coeff: f64, max_abs_net_load_kw: f64, e_max_kwh: f64) -> f64 {
        let p = max_abs_net_load_kw.max(1e-3);
        1e3 * quad_coeff * p * p / e_max_kwh.max(1e-9)
    }

    /// Same model with `Q` set by [`CostModel::default_penalty`].
    pub fn with_default_penalty(self, net_load: &[f64], spec: &StorageSpec) -> Self {
        let peak = net_load.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        Self {
            penalty_q: Self::default_penalty(self.quad_coeff, peak, spec.e_max_kwh),
            ..self
        }
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            quad_coeff: 1.0,
            penalty_q: 1e4,
        }
    }
}

/// Per-step result of a dispatch policy over one episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DispatchTrajectory {
    /// Generator output, kW (after transmission loss where modelled).
    pub p_g_kw: Vec<f64>,
    /// Storage terminal power, kW (+charge / -discharge).
    pub p_s_kw: Vec<f64>,
    /// State of charge, `n_steps + 1` entries starting at t = 0.
    pub soc_kwh: Vec<f64>,
    /// PV surplus discarded, kW.
    pub curtailed_kw: Vec<f64>,
    /// Generation cost rate per step, cost/h.
    pub stage_cost: Vec<f64>,
    pub total_cost: f64,
}

impl DispatchTrajectory {
    pub fn n_steps(&self) -> usize {
        self.p_g_kw.len()
    }

    /// Builds a trajectory and fills its cost fields.
    pub fn from_series(
        p_g_kw: Vec<f64>,
        p_s_kw: Vec<f64>,
        soc_kwh: Vec<f64>,
        curtailed_kw: Vec<f64>,
        cm: &CostModel,
        dt: f64,
    ) -> Result<Self> {
        let mut t = Self {
            p_g_kw,
            p_s_kw,
            soc_kwh,
            curtailed_kw,
            stage_cost: Vec::new(),
            total_cost: 0.0,
        };
        episode_cost(&mut t, cm, dt)?;
        Ok(t)
    }

    /// CSV with header [`TRAJECTORY_CSV_HEADER`]; `soc_kwh` is the end-of-step
    /// state. An extra column (e.g. the costate) can be appended.
    pub fn to_csv(&self, extra: Option<(&str, &[f64])>) -> String {
        let mut out = String::from(TRAJECTORY_CSV_HEADER);
        if let Some((name, _)) = extra {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for k in 0..self.n_steps() {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                k,
                self.p_g_kw[k],
                self.p_s_kw[k],
                self.soc_kwh[k + 1],
                self.stage_cost[k]
            );
            if let Some((_, col)) = extra {
                let _ = write!(out, ",{}", col[k]);
            }
            out.push('\n');
        }
        out
    }
}

/// Storage efficiency as a function of the sign of the storage power.
pub fn efficiency(p_s: f64, spec: &StorageSpec) -> f64 {
    if p_s > 0.0 {
        spec.eta_ch * spec.eta_decay
    } else if p_s < 0.0 {
        spec.eta_decay / spec.eta_dis
    } else {
        spec.eta_decay
    }
}

/// Explicit Euler step of `dE/dt = eta(P_s) * P_s`. Bounds are not enforced.
pub fn storage_step(e_kwh: f64, p_s: f64, dt: f64, spec: &StorageSpec) -> f64 {
    e_kwh + efficiency(p_s, spec) * p_s * dt
}

/// Fuel cost rate `a * P_g^2`.
pub fn gen_cost(p_g: f64, cm: &CostModel) -> Result<f64> {
    if p_g < 0.0 || p_g.is_nan() {
        return Err(DispatchError::domain(
            "p_g",
            format!("generated power {p_g} is negative"),
        ));
    }
    Ok(cm.quad_coeff * p_g * p_g)
}

/// Quadratic state-of-charge penalty, zero on `[0, e_max]`.
pub fn penalty(e_kwh: f64, spec: &StorageSpec, cm: &CostModel) -> f64 {
    let w = cm.penalty_q / (2.0 * spec.e_max_kwh);
    if e_kwh > spec.e_max_kwh {
        w * (e_kwh - spec.e_max_kwh).powi(2)
    } else if e_kwh < 0.0 {
        w * e_kwh * e_kwh
    } else {
        0.0
    }
}

/// Derivative of [`penalty`] with respect to the stored energy.
pub fn penalty_slope(e_kwh: f64, spec: &StorageSpec, cm: &CostModel) -> f64 {
    let w = cm.penalty_q / spec.e_max_kwh;
    if e_kwh > spec.e_max_kwh {
        w * (e_kwh - spec.e_max_kwh)
    } else if e_kwh < 0.0 {
        w * e_kwh
    } else {
        0.0
    }
}

/// Generator output needed to deliver `p` kW over a resistive line.
pub fn transmission_injection(p: f64, ts: &TransmissionSpec) -> f64 {
    p + ts.alpha * p * p
}

/// `dt * sum_k gen_cost(p_g[k])`; also writes the trajectory's cost fields.
pub fn episode_cost(traj: &mut DispatchTrajectory, cm: &CostModel, dt: f64) -> Result<f64> {
    let n = traj.p_g_kw.len();
    if traj.p_s_kw.len() != n || traj.soc_kwh.len() != n + 1 || traj.curtailed_kw.len() != n {
        return Err(DispatchError::Shape(format!(
            "p_g {} / p_s {} / curtailed {} samples, soc {} (expected n and n+1)",
            n,
            traj.p_s_kw.len(),
            traj.curtailed_kw.len(),
            traj.soc_kwh.len()
        )));
    }
    let stage = traj
        .p_g_kw
        .iter()
        .map(|&p| gen_cost(p, cm))
        .collect::<Result<Vec<_>>>()?;
    let total = dt * stage.iter().sum::<f64>();
    traj.stage_cost = stage;
    traj.total_cost = total;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(ch: f64, dis: f64, decay: f64) -> StorageSpec {
        StorageSpec::new(5.0, ch, dis, decay).unwrap()
    }

    #[test]
    fn efficiency_cases() {
        assert_eq!(efficiency(1.0, &spec(0.9, 1.0, 1.0)), 0.9);
        assert_eq!(efficiency(0.0, &spec(1.0, 1.0, 0.99)), 0.99);
        assert_eq!(efficiency(-1.0, &spec(1.0, 0.8, 1.0)), 1.25);
    }

    #[test]
    fn storage_step_examples() {
        assert_eq!(storage_step(1.0, 0.0, 0.5, &spec(1.0, 1.0, 1.0)), 1.0);
        assert!((storage_step(0.0, 1.0, 0.5, &spec(0.9, 1.0, 1.0)) - 0.45).abs() < 1e-15);
        assert!((storage_step(1.0, -1.0, 0.5, &spec(1.0, 0.8, 1.0)) - 0.375).abs() < 1e-15);
    }

    #[test]
    fn gen_cost_examples() {
        let cm = CostModel::new(1.0, 1.0).unwrap();
        assert_eq!(gen_cost(0.0, &cm).unwrap(), 0.0);
        assert_eq!(gen_cost(2.0, &cm).unwrap(), 4.0);
        assert_eq!(
            gen_cost(3.0, &CostModel::new(2.0, 1.0).unwrap()).unwrap(),
            18.0
        );
        assert!(matches!(
            gen_cost(-0.1, &cm),
            Err(DispatchError::Domain { .. })
        ));
    }

    #[test]
    fn penalty_examples() {
        let s = spec(1.0, 1.0, 1.0);
        let cm = CostModel::new(1.0, 100.0).unwrap();
        assert_eq!(penalty(2.5, &s, &cm), 0.0);
        assert_eq!(penalty(5.0, &s, &cm), 0.0);
        assert_eq!(penalty(0.0, &s, &cm), 0.0);
        assert_eq!(penalty(-1.0, &s, &cm), 10.0);
        assert_eq!(penalty(6.0, &s, &cm), 10.0);
    }

    #[test]
    fn penalty_slope_matches_finite_difference() {
        let s = spec(1.0, 1.0, 1.0);
        let cm = CostModel::new(1.0, 100.0).unwrap();
        for &e in &[-2.0, -0.3, 1.0, 4.9, 5.4, 7.0] {
            let h = 1e-6;
            let fd = (penalty(e + h, &s, &cm) - penalty(e - h, &s, &cm)) / (2.0 * h);
            assert!((fd - penalty_slope(e, &s, &cm)).abs() < 1e-5, "e={e}");
        }
    }

    #[test]
    fn transmission_examples() {
        let t0 = TransmissionSpec::lossless();
        assert_eq!(transmission_injection(3.7, &t0), 3.7);
        assert!(
            (transmission_injection(2.0, &TransmissionSpec::new(0.1, 1.0).unwrap()) - 2.4).abs()
                < 1e-15
        );
        assert!(
            (transmission_injection(10.0, &TransmissionSpec::new(0.05, 1.0).unwrap()) - 15.0).abs()
                < 1e-12
        );
    }

    fn traj(p_g: &[f64]) -> DispatchTrajectory {
        let n = p_g.len();
        DispatchTrajectory {
            p_g_kw: p_g.to_vec(),
            p_s_kw: vec![0.0; n],
            soc_kwh: vec![0.0; n + 1],
            curtailed_kw: vec![0.0; n],
            ..Default::default()
        }
    }

    #[test]
    fn episode_cost_examples() {
        let cm = CostModel::default();
        assert_eq!(episode_cost(&mut traj(&[0.0, 0.0]), &cm, 0.5).unwrap(), 0.0);
        let mut flat = traj(&[2.0, 2.0]);
        assert_eq!(episode_cost(&mut flat, &cm, 0.5).unwrap(), 4.0);
        assert_eq!(flat.stage_cost, vec![4.0, 4.0]);
        assert_eq!(flat.total_cost, 4.0);
        assert_eq!(episode_cost(&mut traj(&[1.0, 3.0]), &cm, 0.5).unwrap(), 5.0);
    }

    #[test]
    fn episode_cost_shape_error() {
        let mut t = traj(&[1.0, 2.0]);
        t.soc_kwh.pop();
        assert!(matches!(
            episode_cost(&mut t, &CostModel::default(), 0.5),
            Err(DispatchError::Shape(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(StorageSpec::new(5.0, 1.1, 1.0, 1.0).is_err());
        assert!(StorageSpec::new(5.0, 0.0, 1.0, 1.0).is_err());
        assert!(StorageSpec::new(-1.0, 1.0, 1.0, 1.0).is_err());
        assert!(TransmissionSpec::new(-0.1, 1.0).is_err());
        assert!(CostModel::new(0.0, 1.0).is_err());
        assert!(CostModel::new(1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_extracts_at_most_product_of_efficiencies(
            e in 0.0f64..5.0,
            p in 0.01f64..10.0,
            ch in 0.5f64..=1.0,
            dis in 0.5f64..=1.0,
            decay in 0.9f64..=1.0,
        ) {
            let s = spec(ch, dis, decay);
            let dt = 0.5;
            let charged = p * dt;
            let e1 = storage_step(e, p, dt, &s);
            // discharge power that brings the state back to `e`
            let q = (e1 - e) / (dt * efficiency(-1.0, &s));
            let back = storage_step(e1, -q, dt, &s);
            prop_assert!((back - e).abs() < 1e-9);
            let extracted = q * dt;
            prop_assert!(extracted <= ch * dis * charged * (1.0 + 1e-12));
        }

        #[test]
        fn penalty_continuous_and_zero_only_inside(e in -10.0f64..15.0) {
            let s = spec(1.0, 1.0, 1.0);
            let cm = CostModel::new(1.0, 50.0).unwrap();
            let c = penalty(e, &s, &cm);
            prop_assert!(c >= 0.0);
            prop_assert_eq!(c == 0.0, (0.0..=5.0).contains(&e));
            let h = 1e-9;
            prop_assert!((penalty(e + h, &s, &cm) - c).abs() < 1e-5);
        }

        #[test]
        fn injection_dominates_delivered(p in 0.0f64..50.0, alpha in 0.0f64..1.0) {
            let t = TransmissionSpec::new(alpha, 1.0).unwrap();
            let g = transmission_injection(p, &t);
            prop_assert!(g >= p);
            prop_assert_eq!(g == p, alpha == 0.0 || p == 0.0);
        }

        #[test]
        fn cost_recomputes_from_generation(p in proptest::collection::vec(0.0f64..10.0, 1..48)) {
            let cm = CostModel::default();
            let mut t = traj(&p);
            let stored = episode_cost(&mut t, &cm, 0.5).unwrap();
            let recomputed: f64 = 0.5 * p.iter().map(|x| x * x).sum::<f64>();
            prop_assert!((stored - recomputed).abs() <= 1e-12 * stored.abs().max(1.0));
            prop_assert_eq!(t.total_cost, stored);
        }

        #[test]
        fn flat_profile_minimizes_cost(p in proptest::collection::vec(0.0f64..10.0, 2..48)) {
            let cm = CostModel::default();
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            let flat = episode_cost(&mut traj(&vec![mean; p.len()]), &cm, 0.5).unwrap();
            let varied = episode_cost(&mut traj(&p), &cm, 0.5).unwrap();
            prop_assert!(flat <= varied * (1.0 + 1e-12));
        }
    }
}
