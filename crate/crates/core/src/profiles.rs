//! Daily load/PV episodes: synthesis, CSV ingestion and train/validation/test
//! splitting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{DispatchError, Result};

pub const CSV_HEADER: &str = "episode_id,step,load_kw,pv_kw";

/// One day of load and PV power at a fixed step width.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeProfile {
    pub id: String,
    pub step_hours: f64,
    /// Active-power demand, kW.
    pub load_kw: Vec<f64>,
    /// PV output, kW.
    pub pv_kw: Vec<f64>,
}

impl EpisodeProfile {
    pub fn new(
        id: impl Into<String>,
        step_hours: f64,
        load_kw: Vec<f64>,
        pv_kw: Vec<f64>,
    ) -> Result<Self> {
        if !(step_hours > 0.0 && step_hours.is_finite()) {
            return Err(DispatchError::domain(
                "step_hours",
                format!("{step_hours} is not > 0"),
            ));
        }
        if load_kw.len() != pv_kw.len() {
            return Err(DispatchError::Shape(format!(
                "load has {} samples, pv has {}",
                load_kw.len(),
                pv_kw.len()
            )));
        }
        if let Some((i, v)) = load_kw
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0 && v.is_finite()))
        {
            return Err(DispatchError::domain(
                "load_kw",
                format!("sample {i} is {v}"),
            ));
        }
        if let Some((i, v)) = pv_kw
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0 && v.is_finite()))
        {
            return Err(DispatchError::domain("pv_kw", format!("sample {i} is {v}")));
        }
        Ok(Self {
            id: id.into(),
            step_hours,
            load_kw,
            pv_kw,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.load_kw.len()
    }

    /// Hour of day at the start of step `k`.
    pub fn hour_at(&self, k: usize) -> f64 {
        k as f64 * self.step_hours
    }

    pub fn net_load(&self) -> Vec<f64> {
        net_load(self)
    }

    pub fn cumulative_load(&self) -> Vec<f64> {
        cumulative_load(self)
    }
}

/// Net power drawn by the house, `P_L = P_a - P_pv`. Negative under PV surplus.
pub fn net_load(ep: &EpisodeProfile) -> Vec<f64> {
    ep.load_kw
        .iter()
        .zip(&ep.pv_kw)
        .map(|(a, pv)| a - pv)
        .collect()
}

/// Cumulative net load energy `E_L(t_k)` in kWh, left-rectangle rule.
///
/// The result has `n_steps + 1` entries and starts at zero.
pub fn cumulative_load(ep: &EpisodeProfile) -> Vec<f64> {
    let mut out = Vec::with_capacity(ep.n_steps() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for p in net_load(ep) {
        acc += p * ep.step_hours;
        out.push(acc);
    }
    out
}

/// Shape parameters for [`synth_episode`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    /// Upper bound of the noiseless load curve, kW.
    pub peak_load_kw: f64,
    /// Upper bound of the noiseless PV curve, kW.
    pub peak_pv_kw: f64,
    /// Standard deviation of the multiplicative per-sample noise.
    pub noise: f64,
    /// Day-to-day variation of peak timing and amplitude, in [0, 1].
    pub day_variation: f64,
    pub n_steps: usize,
    pub step_hours: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            peak_load_kw: 5.0,
            peak_pv_kw: 4.0,
            noise: 0.05,
            day_variation: 0.2,
            n_steps: 48,
            step_hours: 0.5,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        let nonneg = |name: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(DispatchError::domain(
                    name,
                    format!("{v} must be finite and >= 0"),
                ))
            }
        };
        nonneg("peak_load_kw", self.peak_load_kw)?;
        nonneg("peak_pv_kw", self.peak_pv_kw)?;
        nonneg("noise", self.noise)?;
        if !(0.0..=1.0).contains(&self.day_variation) {
            return Err(DispatchError::domain(
                "day_variation",
                format!("{} not in [0, 1]", self.day_variation),
            ));
        }
        if self.n_steps == 0 {
            return Err(DispatchError::domain("n_steps", "must be >= 1"));
        }
        if !(self.step_hours > 0.0) {
            return Err(DispatchError::domain("step_hours", "must be > 0"));
        }
        Ok(())
    }
}

const SUNRISE_H: f64 = 6.0;
const SUNSET_H: f64 = 19.0;

fn bump(hour: f64, center: f64, width: f64) -> f64 {
    // circular distance so the evening peak wraps past midnight smoothly
    let d = (hour - center).abs() % 24.0;
    let d = d.min(24.0 - d);
    (-0.5 * (d / width).powi(2)).exp()
}

/// Synthetic day: two-peak load (morning, evening) and a midday PV bell that
/// is zero outside daylight hours. Pure function of `(seed, params)`.
pub fn synth_episode(seed: u64, params: &SynthParams) -> Result<EpisodeProfile> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new_inclusive(-1.0f64, 1.0).expect("valid range");
    let var = params.day_variation;

    let morning_center = 7.5 + var * unit.sample(&mut rng);
    let evening_center = 19.0 + var * 1.5 * unit.sample(&mut rng);
    let morning_amp = 0.55 * (1.0 + 0.5 * var * unit.sample(&mut rng));
    let load_scale = 1.0 - 0.5 * var * (1.0 + unit.sample(&mut rng));
    let clearness = 1.0 - 0.5 * var * (1.0 + unit.sample(&mut rng));

    let n = params.n_steps;
    let dt = params.step_hours;
    let hours: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) * dt).collect();

    let shape: Vec<f64> = hours
        .iter()
        .map(|&h| 0.35 + morning_amp * bump(h, morning_center, 1.5) + bump(h, evening_center, 2.0))
        .collect();
    let shape_max = shape.iter().cloned().fold(f64::MIN, f64::max);

    let mut load_kw = Vec::with_capacity(n);
    let mut pv_kw = Vec::with_capacity(n);
    for (&h, &s) in hours.iter().zip(&shape) {
        let base_load = params.peak_load_kw * load_scale * s / shape_max;
        let base_pv = if (SUNRISE_H..=SUNSET_H).contains(&h) {
            params.peak_pv_kw * clearness * bump(h, 12.5, 2.5)
        } else {
            0.0
        };
        let z_load: f64 = StandardNormal.sample(&mut rng);
        let z_pv: f64 = StandardNormal.sample(&mut rng);
        load_kw.push((base_load * (1.0 + params.noise * z_load.clamp(-3.0, 3.0))).max(0.0));
        pv_kw.push((base_pv * (1.0 + params.noise * z_pv.clamp(-3.0, 3.0))).max(0.0));
    }

    EpisodeProfile::new(format!("ep{seed:06}"), dt, load_kw, pv_kw)
}

/// Partition label of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<EpisodeProfile>,
    /// One label per episode.
    pub split: Vec<Partition>,
}

impl Dataset {
    /// All episodes labelled as training data.
    pub fn new(episodes: Vec<EpisodeProfile>) -> Self {
        let split = vec![Partition::Train; episodes.len()];
        Self { episodes, split }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn partition(&self, which: Partition) -> Vec<&EpisodeProfile> {
        self.episodes
            .iter()
            .zip(&self.split)
            .filter(|(_, p)| **p == which)
            .map(|(e, _)| e)
            .collect()
    }

    pub fn train(&self) -> Vec<&EpisodeProfile> {
        self.partition(Partition::Train)
    }

    pub fn validation(&self) -> Vec<&EpisodeProfile> {
        self.partition(Partition::Validation)
    }

    pub fn test(&self) -> Vec<&EpisodeProfile> {
        self.partition(Partition::Test)
    }

    /// Synthesizes `n` episodes with seeds derived from `seed`.
    pub fn synthesize(n: usize, seed: u64, params: &SynthParams) -> Result<Self> {
        let episodes = (0..n as u64)
            .map(|i| synth_episode(seed.wrapping_mul(1_000_003).wrapping_add(i), params))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(episodes))
    }
}

/// Seeded partition into train / validation / test of the requested sizes.
pub fn split_dataset(ds: &Dataset, n_test: usize, n_val: usize, seed: u64) -> Result<Dataset> {
    let requested = n_test + n_val;
    if requested > ds.len() {
        return Err(DispatchError::Size {
            requested,
            available: ds.len(),
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Partition::Train; ds.len()];
    for &i in &order[..n_test] {
        split[i] = Partition::Test;
    }
    for &i in &order[n_test..requested] {
        split[i] = Partition::Validation;
    }
    Ok(Dataset {
        episodes: ds.episodes.clone(),
        split,
    })
}

pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for ep in &ds.episodes {
        for (k, (l, p)) in ep.load_kw.iter().zip(&ep.pv_kw).enumerate() {
            let _ = writeln!(out, "{},{},{},{}", ep.id, k, l, p);
        }
    }
    out
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_csv(ds)).map_err(|e| DispatchError::io(path, e))
}

/// Reads an episode CSV. The step width is `24 h / n_steps` of each episode.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DispatchError::io(path, e))?;
    parse_csv(&text, path)
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, reason: String| DispatchError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((_, h)) => {
            return Err(err(
                1,
                format!("expected header `{CSV_HEADER}`, found `{h}`"),
            ))
        }
        None => return Ok(Dataset::new(Vec::new())),
    }

    struct Partial {
        id: String,
        load: Vec<f64>,
        pv: Vec<f64>,
    }
    let mut done: Vec<Partial> = Vec::new();
    let mut current: Option<Partial> = None;

    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(err(
                line_no,
                format!("expected 4 columns, found {}", cols.len()),
            ));
        }
        let step: usize = cols[1]
            .parse()
            .map_err(|_| err(line_no, format!("bad step `{}`", cols[1])))?;
        let num = |name: &str, s: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| err(line_no, format!("bad {name} `{s}`")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(err(
                    line_no,
                    format!("{name} must be finite and >= 0, got {v}"),
                ));
            }
            Ok(v)
        };
        let load = num("load_kw", cols[2])?;
        let pv = num("pv_kw", cols[3])?;

        let same_episode = current.as_ref().is_some_and(|c| c.id == cols[0]);
        if !same_episode {
            if let Some(c) = current.take() {
                done.push(c);
            }
            if done.iter().any(|d| d.id == cols[0]) {
                return Err(err(
                    line_no,
                    format!("episode `{}` rows are not contiguous", cols[0]),
                ));
            }
            current = Some(Partial {
                id: cols[0].to_string(),
                load: Vec::new(),
                pv: Vec::new(),
            });
        }
        let c = current.as_mut().expect("set above");
        if step != c.load.len() {
            return Err(err(
                line_no,
                format!(
                    "episode `{}`: expected step {}, found {step}",
                    c.id,
                    c.load.len()
                ),
            ));
        }
        c.load.push(load);
        c.pv.push(pv);
    }
    if let Some(c) = current.take() {
        done.push(c);
    }

    let episodes = done
        .into_iter()
        .map(|p| {
            let dt = 24.0 / p.load.len() as f64;
            EpisodeProfile::new(p.id, dt, p.load, p.pv)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(episodes))
}
