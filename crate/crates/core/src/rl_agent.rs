//! Tabular Q-learning over a uniform discretisation of the MDP.
//!
//! States are binned per dimension (state of charge, hour, net load) and the
//! action set is a uniform grid of energy moves in `[-span, +span]`. Training
//! is one sequential stream of updates driven by a seeded ChaCha RNG, so the
//! learned table is a pure function of the data, the case and the config.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{DispatchError, Result};
use crate::profiles::{Dataset, EpisodeProfile};
use crate::rl_env::{env_reset, env_step, rollout, CaseConfig, Policy, RlAction, RlState};

/// Bin counts per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bins {
    pub soc: usize,
    pub hour: usize,
    pub load: usize,
    pub action: usize,
}

impl Default for Bins {
    fn default() -> Self {
        Self {
            soc: 21,
            hour: 48,
            load: 16,
            action: 21,
        }
    }
}

impl Bins {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("soc_bins", self.soc),
            ("hour_bins", self.hour),
            ("load_bins", self.load),
            ("action_bins", self.action),
        ] {
            if v == 0 {
                return Err(DispatchError::Domain {
                    name,
                    reason: "must be at least 1".into(),
                });
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.soc * self.hour * self.load
    }
}

/// Bin counts plus the ranges they cover.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretization {
    pub bins: Bins,
    pub e_max_kwh: f64,
    pub load_min_kw: f64,
    pub load_max_kw: f64,
    /// Largest action magnitude, kWh.
    pub action_span_kwh: f64,
}

impl Discretization {
    pub fn validate(&self) -> Result<()> {
        self.bins.validate()?;
        let finite = [
            self.e_max_kwh,
            self.load_min_kw,
            self.load_max_kw,
            self.action_span_kwh,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.e_max_kwh < 0.0 || self.action_span_kwh < 0.0 {
            return Err(DispatchError::domain(
                "discretization",
                format!("bad ranges in {self:?}"),
            ));
        }
        if self.load_min_kw > self.load_max_kw {
            return Err(DispatchError::domain(
                "load_min_kw",
                format!(
                    "{} exceeds load_max_kw {}",
                    self.load_min_kw, self.load_max_kw
                ),
            ));
        }
        Ok(())
    }

    /// Ranges fitted to a set of training episodes.
    pub fn fit(
        bins: Bins,
        e_max_kwh: f64,
        episodes: &[&EpisodeProfile],
        action_span_kwh: Option<f64>,
    ) -> Self {
        let (mut lo, mut hi, mut peak_energy) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
        for ep in episodes {
            for p in ep.net_load() {
                lo = lo.min(p);
                hi = hi.max(p);
                peak_energy = peak_energy.max(p.abs() * ep.step_hours);
            }
        }
        if lo > hi {
            (lo, hi) = (0.0, 0.0);
        }
        let span = action_span_kwh.unwrap_or_else(|| peak_energy.min(e_max_kwh));
        Self {
            bins,
            e_max_kwh,
            load_min_kw: lo,
            load_max_kw: hi,
            action_span_kwh: span,
        }
    }

    /// Flat state index of `state`.
    pub fn discretize(&self, state: &RlState) -> usize {
        let b = &self.bins;
        let s = uniform_bin(state.soc_kwh, 0.0, self.e_max_kwh, b.soc);
        let h = uniform_bin(state.hour, 0.0, 24.0, b.hour);
        let l = uniform_bin(state.load_kw, self.load_min_kw, self.load_max_kw, b.load);
        (s * b.hour + h) * b.load + l
    }

    /// Energy move of action index `a`.
    pub fn action_value(&self, a: usize) -> f64 {
        let n = self.bins.action;
        if n == 1 {
            return 0.0;
        }
        let span = self.action_span_kwh;
        -span + 2.0 * span * a as f64 / (n - 1) as f64
    }
}

/// Uniform bin of `x` among `n` bins on `[lo, hi]`.
///
/// Values on an interior edge go to the upper bin, `hi` goes to the last bin
/// and values outside the range go to the nearest end.
pub fn uniform_bin(x: f64, lo: f64, hi: f64, n: usize) -> usize {
    if n <= 1 || !(hi > lo) {
        return 0;
    }
    let t = ((x - lo) / (hi - lo) * n as f64).floor();
    if t <= 0.0 || t.is_nan() {
        0
    } else {
        (t as usize).min(n - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub disc: Discretization,
    q: Vec<f64>,
    visits: Vec<u32>,
}

const QTABLE_TAGS: [&str; 8] = [
    "soc_bins",
    "hour_bins",
    "load_bins",
    "action_bins",
    "e_max_kwh",
    "load_min_kw",
    "load_max_kw",
    "action_span_kwh",
];

impl QTable {
    pub fn zeros(disc: Discretization) -> Result<Self> {
        disc.validate()?;
        let len = disc.bins.n_states() * disc.bins.action;
        Ok(Self {
            disc,
            q: vec![0.0; len],
            visits: vec![0; len],
        })
    }

    fn index(&self, state: usize, action: usize) -> usize {
        state * self.disc.bins.action + action
    }

    pub fn q(&self, state: usize, action: usize) -> f64 {
        self.q[self.index(state, action)]
    }

    pub fn set_q(&mut self, state: usize, action: usize, value: f64) {
        let i = self.index(state, action);
        self.q[i] = value;
    }

    pub fn visits(&self, state: usize, action: usize) -> u32 {
        self.visits[self.index(state, action)]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        let a = self.disc.bins.action;
        &self.q[state * a..(state + 1) * a]
    }

    /// All action values, state-major.
    pub fn values(&self) -> &[f64] {
        &self.q
    }

    /// Best action in `state`; ties go to the lowest index.
    pub fn greedy_action(&self, state: usize) -> usize {
        argmax_first(self.row(state))
    }

    /// Text form: one `key=value` header line, then
    /// `soc_bin,hour_bin,load_bin,action_bin,q_value` per cell.
    /// Visit counts are not stored.
    pub fn to_text(&self) -> String {
        let d = &self.disc;
        let b = &d.bins;
        let mut out = String::with_capacity(self.q.len() * 24);
        let header = [
            b.soc.to_string(),
            b.hour.to_string(),
            b.load.to_string(),
            b.action.to_string(),
            d.e_max_kwh.to_string(),
            d.load_min_kw.to_string(),
            d.load_max_kw.to_string(),
            d.action_span_kwh.to_string(),
        ];
        let fields: Vec<String> = QTABLE_TAGS
            .iter()
            .zip(&header)
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
        for s in 0..b.soc {
            for h in 0..b.hour {
                for l in 0..b.load {
                    let state = (s * b.hour + h) * b.load + l;
                    for a in 0..b.action {
                        let _ = writeln!(out, "{s},{h},{l},{a},{}", self.q(state, a));
                    }
                }
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| DispatchError::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let mut vals = [0.0f64; 8];
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() != QTABLE_TAGS.len() {
            return Err(err(
                1,
                format!("expected {} header fields", QTABLE_TAGS.len()),
            ));
        }
        for ((field, tag), slot) in fields.iter().zip(QTABLE_TAGS).zip(vals.iter_mut()) {
            let v = field
                .strip_prefix(tag)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| err(1, format!("expected `{tag}=` in `{field}`")))?;
            *slot = v
                .trim()
                .parse()
                .map_err(|e| err(1, format!("{tag}: {e}")))?;
        }
        let count = |v: f64, tag: &str| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(err(1, format!("{tag} must be a positive integer")))
            }
        };
        let disc = Discretization {
            bins: Bins {
                soc: count(vals[0], QTABLE_TAGS[0])?,
                hour: count(vals[1], QTABLE_TAGS[1])?,
                load: count(vals[2], QTABLE_TAGS[2])?,
                action: count(vals[3], QTABLE_TAGS[3])?,
            },
            e_max_kwh: vals[4],
            load_min_kw: vals[5],
            load_max_kw: vals[6],
            action_span_kwh: vals[7],
        };
        let mut table = QTable::zeros(disc).map_err(|e| err(1, e.to_string()))?;
        let b = disc.bins;
        let mut seen = vec![false; table.q.len()];
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(err(
                    lineno,
                    format!("expected 5 columns, found {}", cols.len()),
                ));
            }
            let mut ix = [0usize; 4];
            for (slot, (c, limit)) in ix
                .iter_mut()
                .zip(cols.iter().zip([b.soc, b.hour, b.load, b.action]))
            {
                *slot = c
                    .trim()
                    .parse()
                    .map_err(|e| err(lineno, format!("index `{c}`: {e}")))?;
                if *slot >= limit {
                    return Err(err(
                        lineno,
                        format!("index {slot} out of range (< {limit})"),
                    ));
                }
            }
            let q: f64 = cols[4]
                .trim()
                .parse()
                .map_err(|e| err(lineno, format!("q value: {e}")))?;
            if !q.is_finite() {
                return Err(err(lineno, format!("q value {q} is not finite")));
            }
            let state = (ix[0] * b.hour + ix[1]) * b.load + ix[2];
            let k = table.index(state, ix[3]);
            if seen[k] {
                return Err(err(lineno, "duplicate cell".into()));
            }
            seen[k] = true;
            table.q[k] = q;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(err(
                text.lines().count(),
                format!(
                    "{} cells missing, first at flat index {missing}",
                    seen.iter().filter(|s| !**s).count()
                ),
            ));
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| DispatchError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DispatchError::io(path, e))?;
        Self::parse(&text, path)
    }
}

fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (a, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = a;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of training episodes played.
    pub episodes: usize,
    /// Learning rate in `(0, 1]`.
    pub alpha: f64,
    /// Discount in `[0, 1]`.
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Per-episode multiplicative decay of epsilon.
    pub epsilon_decay: f64,
    pub seed: u64,
    /// Greedy validation every this many episodes.
    pub eval_every: usize,
    pub bins: Bins,
    /// Largest action magnitude; `None` fits it to the training data.
    pub action_span_kwh: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 100_000,
            alpha: 0.2,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_decay: 0.99995,
            seed: 0,
            eval_every: 1_000,
            bins: Bins::default(),
            action_span_kwh: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.bins.validate()?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(DispatchError::domain(
                "alpha",
                format!("{} is outside (0, 1]", self.alpha),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(DispatchError::domain(
                "gamma",
                format!("{} is outside [0, 1]", self.gamma),
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) {
            return Err(DispatchError::domain(
                "epsilon_start",
                format!("{} is outside [0, 1]", self.epsilon_start),
            ));
        }
        if !(0.0..=self.epsilon_start).contains(&self.epsilon_end) {
            return Err(DispatchError::domain(
                "epsilon_end",
                format!("{} is outside [0, epsilon_start]", self.epsilon_end),
            ));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err(DispatchError::domain(
                "epsilon_decay",
                format!("{} is outside (0, 1]", self.epsilon_decay),
            ));
        }
        if self.eval_every == 0 {
            return Err(DispatchError::domain("eval_every", "must be at least 1"));
        }
        if let Some(span) = self.action_span_kwh {
            if !(span >= 0.0 && span.is_finite()) {
                return Err(DispatchError::domain(
                    "action_span_kwh",
                    format!("{span} must be finite and >= 0"),
                ));
            }
        }
        Ok(())
    }

    pub fn epsilon_at(&self, episode: usize) -> f64 {
        let decayed = self.epsilon_start
            * self
                .epsilon_decay
                .powi(episode.min(i32::MAX as usize) as i32);
        decayed.max(self.epsilon_end)
    }
}

/// One-step Q-learning update; `next` is `None` after the last step.
pub fn q_update(
    qt: &mut QTable,
    state: usize,
    action: usize,
    reward: f64,
    next: Option<usize>,
    cfg: &TrainConfig,
) {
    let bootstrap = next.map_or(0.0, |s| qt.row(s)[qt.greedy_action(s)]);
    let i = qt.index(state, action);
    qt.q[i] = (1.0 - cfg.alpha) * qt.q[i] + cfg.alpha * (reward + cfg.gamma * bootstrap);
    qt.visits[i] = qt.visits[i].saturating_add(1);
}

/// Greedy policy of a frozen table.
#[derive(Debug, Clone, Copy)]
pub struct GreedyPolicy<'a> {
    pub table: &'a QTable,
}

impl Policy for GreedyPolicy<'_> {
    fn act(&self, state: &RlState, _step: usize) -> RlAction {
        let s = self.table.disc.discretize(state);
        RlAction::new(self.table.disc.action_value(self.table.greedy_action(s)))
    }
}

pub fn greedy_policy(qt: &QTable) -> GreedyPolicy<'_> {
    GreedyPolicy { table: qt }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Table with the best validation cost seen.
    pub table: QTable,
    /// Mean exploring-episode cost per pass over the training episodes.
    pub epoch_costs: Vec<f64>,
    /// `(episodes played, mean greedy validation cost)`.
    pub validation_costs: Vec<(usize, f64)>,
    pub best_validation_cost: f64,
}

/// Mean greedy cost over `episodes`.
pub fn greedy_cost(qt: &QTable, episodes: &[&EpisodeProfile], case: &CaseConfig) -> Result<f64> {
    if episodes.is_empty() {
        return Ok(0.0);
    }
    let policy = greedy_policy(qt);
    let costs = episodes
        .par_iter()
        .map(|ep| rollout(&policy, ep, case).map(|t| t.total_cost))
        .collect::<Result<Vec<_>>>()?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// Trains on `train`, validating greedily on `validation` (or on `train` when
/// it is empty) and keeping the best table.
pub fn train_on(
    train: &[&EpisodeProfile],
    validation: &[&EpisodeProfile],
    case: &CaseConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DispatchError::Size {
            requested: 1,
            available: 0,
        });
    }
    let validation = if validation.is_empty() {
        train
    } else {
        validation
    };
    let disc = Discretization::fit(
        cfg.bins,
        case.storage().e_max_kwh,
        train,
        cfg.action_span_kwh,
    );
    let mut qt = QTable::zeros(disc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_actions = disc.bins.action;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_costs = Vec::new();
    let mut epoch_sum = 0.0;
    let mut validation_costs = Vec::new();
    let mut best = (f64::INFINITY, qt.clone());

    for t in 0..cfg.episodes {
        let pos = t % train.len();
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let ep = train[order[pos]];
        let eps = cfg.epsilon_at(t);
        let mut state = env_reset(ep, case);
        let mut cell = disc.discretize(&state);
        let mut cost = 0.0;
        for k in 0..ep.n_steps() {
            let a = if rng.random::<f64>() < eps {
                rng.random_range(0..n_actions)
            } else {
                qt.greedy_action(cell)
            };
            let out = env_step(&state, RlAction::new(disc.action_value(a)), ep, case, k)?;
            let next = (!out.done).then(|| disc.discretize(&out.next));
            q_update(&mut qt, cell, a, out.reward, next, cfg);
            cost -= out.reward;
            state = out.next;
            if let Some(n) = next {
                cell = n;
            }
        }
        epoch_sum += cost;
        if pos + 1 == train.len() {
            let mean = epoch_sum / train.len() as f64;
            debug!(
                "epoch {}: mean episode cost {mean:.4} (epsilon {eps:.4})",
                epoch_costs.len()
            );
            epoch_costs.push(mean);
            epoch_sum = 0.0;
        }
        if (t + 1) % cfg.eval_every == 0 || t + 1 == cfg.episodes {
            let v = greedy_cost(&qt, validation, case)?;
            validation_costs.push((t + 1, v));
            if v < best.0 {
                best = (v, qt.clone());
            }
        }
    }
    if cfg.episodes == 0 {
        best.0 = greedy_cost(&qt, validation, case)?;
    }
    info!(
        "trained {} episodes; best validation cost {:.4} over {} checks",
        cfg.episodes,
        best.0,
        validation_costs.len()
    );
    Ok(TrainReport {
        table: best.1,
        epoch_costs,
        validation_costs,
        best_validation_cost: best.0,
    })
}

/// [`train_on`] with the dataset's training and validation partitions.
pub fn train(ds: &Dataset, case: &CaseConfig, cfg: &TrainConfig) -> Result<TrainReport> {
    train_on(&ds.train(), &ds.validation(), case, cfg)
}
