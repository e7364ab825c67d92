//! Synthetic driving-style episodes and the dialogue datasets built from
//! them.
//!
//! Episodes follow unicycle kinematics with constant speed and heading:
//! `p_{t+1} = p_t + v * dt * (cos(theta), sin(theta))`. All numbers shown
//! in dialogue text are rounded to two decimals *before* the targets are
//! derived, so every answer is an exact function of the literals in the
//! prompt.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::DigitCodec;
use crate::numtext::{format_fixed, Role, Turn};
use crate::parallel;
use crate::{Error, Result};

/// Observation feature count; must match the model's `obs_dim`.
pub const OBS_DIM: usize = 8;
pub const DEFAULT_HORIZON: usize = 3;
pub const DEFAULT_DT: f64 = 0.5;
/// Identifier for the number-conversion policy the datasets assume.
pub const POLICY_ID: &str = "default-v1";

/// Seed offset separating the test stream from the train stream.
const TEST_SEED_OFFSET: u64 = 1 << 32;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Copy,
    Speed,
    Traj,
}

impl TaskId {
    pub fn name(&self) -> &'static str {
        match self {
            TaskId::Copy => "copy",
            TaskId::Speed => "speed",
            TaskId::Traj => "traj",
        }
    }

    /// Numbers expected in the assistant answer.
    pub fn answer_count(&self, horizon: usize) -> usize {
        match self {
            TaskId::Copy | TaskId::Speed => 1,
            TaskId::Traj => 2 * horizon,
        }
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskId::Copy),
            "speed" => Ok(TaskId::Speed),
            "traj" => Ok(TaskId::Traj),
            _ => Err(Error::Config(format!("unknown task '{s}'"))),
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub dt: f64,
    pub horizon: usize,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        EpisodeParams { dt: DEFAULT_DT, horizon: DEFAULT_HORIZON }
    }
}

/// One sampled driving state with its derived targets.
#[derive(Clone, Debug)]
pub struct Episode {
    pub seed: u64,
    pub x: f64,
    pub y: f64,
    pub heading_deg: f64,
    pub speed: f64,
    pub accel: f64,
    pub copy_value: f64,
    pub next_speed: f64,
    pub waypoints: Vec<(f64, f64)>,
    pub obs: Vec<f64>,
}

/// Constant-control unicycle rollout, defined by the step recurrence (not
/// its closed form) so downstream consumers agree bit-for-bit.
pub fn rollout(x0: f64, y0: f64, heading_deg: f64, speed: f64, dt: f64, steps: usize) -> Vec<(f64, f64)> {
    let theta = heading_deg.to_radians();
    let (dx, dy) = (speed * dt * theta.cos(), speed * dt * theta.sin());
    let mut p = (x0, y0);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        p = (p.0 + dx, p.1 + dy);
        out.push(p);
    }
    out
}

impl Episode {
    pub fn generate(seed: u64, params: &EpisodeParams) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codec = DigitCodec::default();
        let mut r2 = |lo: f64, hi: f64| codec.round(rng.gen_range(lo..hi));
        let x = r2(-50.0, 50.0);
        let y = r2(-50.0, 50.0);
        let heading_deg = r2(-180.0, 180.0);
        let speed = r2(1.0, 15.0);
        let accel = r2(-2.0, 2.0);
        let copy_value = r2(-10.0, 10.0);
        let next_speed = codec.round(speed + accel * params.dt);
        let waypoints = rollout(x, y, heading_deg, speed, params.dt, params.horizon)
            .into_iter()
            .map(|(wx, wy)| (codec.round(wx), codec.round(wy)))
            .collect();
        let theta = heading_deg.to_radians();
        let obs = vec![
            x / 50.0,
            y / 50.0,
            theta.cos(),
            theta.sin(),
            speed / 15.0,
            accel / 2.0,
            params.dt,
            1.0,
        ];
        Episode { seed, x, y, heading_deg, speed, accel, copy_value, next_speed, waypoints, obs }
    }
}

/// One dialogue as stored on disk (JSONL, one record per line).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub turns: Vec<Turn>,
    pub numbers_policy_id: String,
    /// Observation vectors, one per `<obs_token>` in reading order.
    #[serde(default)]
    pub obs: Vec<Vec<f64>>,
    #[serde(default)]
    pub episode_seed: u64,
}

fn f2(x: f64) -> String {
    format_fixed(x, 2)
}

/// Render an episode as a prompt/answer dialogue. Prose avoids digits so
/// the only numbers extractable from the text are the intended ones.
pub fn make_dialogue(task: TaskId, ep: &Episode, params: &EpisodeParams) -> DialogueRecord {
    let (user, assistant) = match task {
        TaskId::Copy => (
            format!("<obs_token> repeat this value exactly: {}", f2(ep.copy_value)),
            format!("value: {}", f2(ep.copy_value)),
        ),
        TaskId::Speed => (
            format!(
                "<obs_token> current speed {} units, acceleration {} units, timestep {} seconds. predict the next speed.",
                f2(ep.speed),
                f2(ep.accel),
                f2(params.dt)
            ),
            format!("next speed: {}", f2(ep.next_speed)),
        ),
        TaskId::Traj => {
            let pts: Vec<String> =
                ep.waypoints.iter().map(|(wx, wy)| format!("{}, {}", f2(*wx), f2(*wy))).collect();
            (
                format!(
                    "<obs_token> start at x {} y {}, heading {} degrees, speed {} units, timestep {} seconds. predict the next three waypoints.",
                    f2(ep.x),
                    f2(ep.y),
                    f2(ep.heading_deg),
                    f2(ep.speed),
                    f2(params.dt)
                ),
                format!("waypoints: {}", pts.join("; ")),
            )
        }
    };
    DialogueRecord {
        turns: vec![
            Turn { role: Role::User, text: user },
            Turn { role: Role::Assistant, text: assistant },
        ],
        numbers_policy_id: POLICY_ID.to_string(),
        obs: vec![ep.obs.clone()],
        episode_seed: ep.seed,
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub task: TaskId,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub params: EpisodeParams,
}

impl SplitSpec {
    pub fn new(task: TaskId, seed: u64) -> Self {
        SplitSpec { task, n_train: 2000, n_test: 500, seed, params: EpisodeParams::default() }
    }
}

pub struct Dataset {
    pub train: Vec<DialogueRecord>,
    pub test: Vec<DialogueRecord>,
}

/// Generate a train/test split from disjoint per-episode seed ranges.
pub fn make_split(spec: &SplitSpec) -> Dataset {
    let gen = |base: u64, n: usize| {
        parallel::map_range(n, move |i| {
            let ep = Episode::generate(base.wrapping_add(i as u64), &spec.params);
            make_dialogue(spec.task, &ep, &spec.params)
        })
    };
    Dataset {
        train: gen(spec.seed, spec.n_train),
        test: gen(spec.seed.wrapping_add(TEST_SEED_OFFSET), spec.n_test),
    }
}

/// Sidecar manifest describing how a dataset file was produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataManifest {
    pub task: TaskId,
    pub split: String,
    pub count: usize,
    pub seed: u64,
    pub dt: f64,
    pub horizon: usize,
    pub numbers_policy_id: String,
}

pub fn save_jsonl(path: &Path, records: &[DialogueRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<DialogueRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
