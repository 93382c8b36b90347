//! The dispatch problem as a finite-horizon MDP.
//!
//! A state is `(soc, hour, net load)`, an action is the energy `delta_e` to
//! move into the battery during the step, and the reward is the negative
//! generation cost of the step. Out-of-range actions are clamped, never
//! rejected, so any learner can explore freely.
//!
//! Two transition conventions are available per [`CaseConfig`]:
//!
//! * the default per-case maps, where the lossy cases scale the whole stored
//!   energy: `s' = (s + dE) * eta` for LS and `s' = (s + dE * eta_tr) * eta`
//!   for LT, with `eta = eta_dis * eta_decay` when `dE != 0` and `eta_decay`
//!   otherwise;
//! * `physics_exact`, where `dE` is battery-terminal energy, the state follows
//!   [`storage_step`] and LT generation pays the quadratic line loss. This is
//!   the convention of the classical solvers and makes replay exact.

use std::fmt;
use std::str::FromStr;

use crate::error::{DispatchError, Result};
use crate::grid_model::{
    gen_cost, storage_step, transmission_injection, CostModel, DispatchTrajectory, StorageSpec,
    TransmissionSpec,
};
use crate::profiles::EpisodeProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Case {
    /// Ideal storage.
    Is,
    /// Lossy storage.
    Ls,
    /// Lossy storage and a lossy transmission line.
    Lt,
}

impl Case {
    pub const ALL: [Case; 3] = [Case::Is, Case::Ls, Case::Lt];

    pub fn as_str(self) -> &'static str {
        match self {
            Case::Is => "IS",
            Case::Ls => "LS",
            Case::Lt => "LT",
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Case {
    type Err = DispatchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "is" => Ok(Case::Is),
            "ls" => Ok(Case::Ls),
            "lt" => Ok(Case::Lt),
            _ => Err(DispatchError::domain(
                "case",
                format!("`{s}` is not one of is, ls, lt"),
            )),
        }
    }
}

/// Everything a transition needs besides the episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseConfig {
    pub case: Case,
    pub spec: StorageSpec,
    pub ts: TransmissionSpec,
    pub cm: CostModel,
    pub physics_exact: bool,
}

impl CaseConfig {
    pub fn new(case: Case, spec: StorageSpec, ts: TransmissionSpec, cm: CostModel) -> Result<Self> {
        spec.validate()?;
        ts.validate()?;
        cm.validate()?;
        Ok(Self {
            case,
            spec,
            ts,
            cm,
            physics_exact: false,
        })
    }

    pub fn with_physics_exact(mut self, on: bool) -> Self {
        self.physics_exact = on;
        self
    }

    /// Storage model the case actually uses: IS ignores the efficiencies.
    pub fn storage(&self) -> StorageSpec {
        match self.case {
            Case::Is => StorageSpec {
                e_max_kwh: self.spec.e_max_kwh,
                eta_ch: 1.0,
                eta_dis: 1.0,
                eta_decay: 1.0,
            },
            Case::Ls | Case::Lt => self.spec,
        }
    }

    /// Line model the case actually uses: only LT has losses.
    pub fn transmission(&self) -> TransmissionSpec {
        match self.case {
            Case::Lt => self.ts,
            Case::Is | Case::Ls => TransmissionSpec::lossless(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlState {
    pub soc_kwh: f64,
    /// Time of day in hours, `[0, 24)`.
    pub hour: f64,
    /// Net load of the current step.
    pub load_kw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlAction {
    pub delta_e_kwh: f64,
}

impl RlAction {
    pub fn new(delta_e_kwh: f64) -> Self {
        Self { delta_e_kwh }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: RlState,
    pub reward: f64,
    /// Action after clamping, kWh.
    pub applied_delta_kwh: f64,
    pub p_g_kw: f64,
    /// Power drawn into the battery terminal, kW.
    pub p_s_kw: f64,
    pub curtailed_kw: f64,
    /// The step was the last of the episode; `next` is absorbing.
    pub done: bool,
}

fn net_load_at(ep: &EpisodeProfile, k: usize) -> f64 {
    ep.load_kw[k] - ep.pv_kw[k]
}

fn wrap_hour(h: f64) -> f64 {
    h.rem_euclid(24.0)
}

pub fn env_reset(ep: &EpisodeProfile, _cfg: &CaseConfig) -> RlState {
    RlState {
        soc_kwh: 0.0,
        hour: wrap_hour(ep.hour_at(0)),
        load_kw: if ep.n_steps() > 0 {
            net_load_at(ep, 0)
        } else {
            0.0
        },
    }
}

pub fn env_step(
    state: &RlState,
    action: RlAction,
    ep: &EpisodeProfile,
    cfg: &CaseConfig,
    step_index: usize,
) -> Result<StepOutcome> {
    let n = ep.n_steps();
    if step_index >= n {
        return Err(DispatchError::EpisodeFinished {
            step: step_index,
            n_steps: n,
        });
    }
    let de = action.delta_e_kwh;
    if !de.is_finite() {
        return Err(DispatchError::domain(
            "delta_e_kwh",
            format!("{de} is not finite"),
        ));
    }
    let dt = ep.step_hours;
    let p_l = net_load_at(ep, step_index);
    let spec = cfg.storage();
    let e_max = spec.e_max_kwh;
    let soc = state.soc_kwh;

    let (applied, soc_next, p_s, delivered) = if cfg.physics_exact {
        let lo = -soc * spec.eta_dis / spec.eta_decay;
        let hi = (e_max - soc) / (spec.eta_ch * spec.eta_decay);
        let applied = de.clamp(lo.min(0.0), hi.max(0.0));
        let p_s = applied / dt;
        let next = storage_step(soc, p_s, dt, &spec).clamp(0.0, e_max);
        (applied, next, p_s, p_l + p_s)
    } else {
        let eta_tr = if cfg.case == Case::Lt {
            cfg.ts.eta_tr
        } else {
            1.0
        };
        let applied = de.clamp(-soc / eta_tr, (e_max - soc) / eta_tr);
        let eta = match cfg.case {
            Case::Is => 1.0,
            Case::Ls | Case::Lt if applied != 0.0 => spec.eta_dis * spec.eta_decay,
            Case::Ls | Case::Lt => spec.eta_decay,
        };
        let next = ((soc + applied * eta_tr) * eta).clamp(0.0, e_max);
        (applied, next, applied / dt, p_l + applied / dt)
    };

    let (p_g, curtailed) = if delivered >= 0.0 {
        let p_g = if cfg.physics_exact {
            transmission_injection(delivered, &cfg.transmission())
        } else {
            delivered
        };
        (p_g, 0.0)
    } else {
        (0.0, -delivered)
    };
    let reward = -dt * gen_cost(p_g, &cfg.cm)?;

    let done = step_index + 1 == n;
    let next = RlState {
        soc_kwh: soc_next,
        hour: wrap_hour(ep.hour_at(step_index + 1)),
        load_kw: if done {
            0.0
        } else {
            net_load_at(ep, step_index + 1)
        },
    };
    Ok(StepOutcome {
        next,
        reward,
        applied_delta_kwh: applied,
        p_g_kw: p_g,
        p_s_kw: p_s,
        curtailed_kw: curtailed,
        done,
    })
}

/// A decision rule; `step` is the index of the current step.
pub trait Policy: Sync {
    fn act(&self, state: &RlState, step: usize) -> RlAction;
}

/// Never touches the battery.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdlePolicy;

impl Policy for IdlePolicy {
    fn act(&self, _state: &RlState, _step: usize) -> RlAction {
        RlAction::new(0.0)
    }
}

/// Open-loop action list; idle past its end.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence(pub Vec<f64>);

impl ActionSequence {
    /// Actions that reproduce a solver trajectory: battery-terminal energy in
    /// the `physics_exact` convention, state-of-charge increments otherwise.
    pub fn from_trajectory(traj: &DispatchTrajectory, dt: f64, physics_exact: bool) -> Self {
        if physics_exact {
            Self(traj.p_s_kw.iter().map(|p| p * dt).collect())
        } else {
            Self(traj.soc_kwh.windows(2).map(|w| w[1] - w[0]).collect())
        }
    }
}

impl Policy for ActionSequence {
    fn act(&self, _state: &RlState, step: usize) -> RlAction {
        RlAction::new(self.0.get(step).copied().unwrap_or(0.0))
    }
}

/// Runs `policy` over the whole episode.
pub fn rollout(
    policy: &dyn Policy,
    ep: &EpisodeProfile,
    cfg: &CaseConfig,
) -> Result<DispatchTrajectory> {
    let n = ep.n_steps();
    let mut state = env_reset(ep, cfg);
    let mut soc = Vec::with_capacity(n + 1);
    let mut p_g = Vec::with_capacity(n);
    let mut p_s = Vec::with_capacity(n);
    let mut curtailed = Vec::with_capacity(n);
    soc.push(state.soc_kwh);
    for k in 0..n {
        let out = env_step(&state, policy.act(&state, k), ep, cfg, k)?;
        p_g.push(out.p_g_kw);
        p_s.push(out.p_s_kw);
        curtailed.push(out.curtailed_kw);
        soc.push(out.next.soc_kwh);
        state = out.next;
    }
    DispatchTrajectory::from_series(p_g, p_s, soc, curtailed, &cfg.cm, ep.step_hours)
}
