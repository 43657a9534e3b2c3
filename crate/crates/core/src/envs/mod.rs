//! Kinematic task families with hidden, reward-defined sub-task schedules.
//!
//! Every family is a tiny integrator: point-robot and multi-goal move a 2D
//! position, the velocity family integrates a scalar speed and the direction
//! family sets a planar velocity directly. The active goal changes at hidden
//! switch steps and is only observable through the reward.

mod oracle;
mod taskset;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use oracle::{greedy_return, oracle_return};
pub use taskset::{TaskSet, TASKSET_VERSION};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment parameters: {0}")]
    InvalidParams(String),
    #[error("action has {got} entries, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("non-finite action")]
    NonFiniteAction,
    #[error("episode already finished at step {0}")]
    EpisodeOver(usize),
    #[error("task set: {0}")]
    TaskSet(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvFamily {
    /// 2D navigation to one goal on a half circle.
    PointRobot,
    /// 1D speed tracking.
    Velocity,
    /// 2D heading tracking.
    Direction,
    /// 2D navigation to a sequence of goals on a circle.
    MultiGoal,
}

impl EnvFamily {
    pub fn name(self) -> &'static str {
        match self {
            EnvFamily::PointRobot => "point_robot",
            EnvFamily::Velocity => "velocity",
            EnvFamily::Direction => "direction",
            EnvFamily::MultiGoal => "multi_goal",
        }
    }
}

impl std::str::FromStr for EnvFamily {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "point_robot" | "point" => Ok(EnvFamily::PointRobot),
            "velocity" | "vel" => Ok(EnvFamily::Velocity),
            "direction" | "dir" => Ok(EnvFamily::Direction),
            "multi_goal" | "goal" => Ok(EnvFamily::MultiGoal),
            other => Err(EnvError::InvalidParams(format!("unknown family `{other}`"))),
        }
    }
}

fn default_family() -> EnvFamily {
    EnvFamily::Velocity
}
fn default_horizon() -> usize {
    100
}
fn default_velocity_range() -> (f64, f64) {
    (-1.0, 3.0)
}
fn default_radius() -> f64 {
    1.0
}
fn default_concentration() -> f64 {
    0.2
}
fn default_subtasks() -> (usize, usize) {
    (2, 3)
}

/// Family parameters shared by every task of a task distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    #[serde(default = "default_family")]
    pub family: EnvFamily,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Goal speed range `(a, b)` of the velocity family; speeds are kept inside it.
    #[serde(default = "default_velocity_range")]
    pub velocity_range: (f64, f64),
    /// Goal circle radius of the multi-goal family.
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Half-circle radius of the point robot.
    #[serde(default = "default_radius")]
    pub half_circle_radius: f64,
    /// Symmetric concentration of the point-robot interpolation weight.
    #[serde(default = "default_concentration")]
    pub dirichlet_concentration: f64,
    /// Inclusive range of the number of sub-tasks per task.
    #[serde(default = "default_subtasks")]
    pub subtasks: (usize, usize),
    /// Optional finite goal set for the velocity family.
    #[serde(default)]
    pub goal_choices: Option<Vec<f64>>,
    /// Append `t / horizon` to observations (diagnostics only).
    #[serde(default)]
    pub expose_time: bool,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self::new(default_family())
    }
}

impl EnvParams {
    pub fn new(family: EnvFamily) -> Self {
        Self {
            family,
            horizon: default_horizon(),
            velocity_range: default_velocity_range(),
            radius: default_radius(),
            half_circle_radius: default_radius(),
            dirichlet_concentration: default_concentration(),
            subtasks: default_subtasks(),
            goal_choices: None,
            expose_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EnvError::InvalidParams(m));
        let (a, b) = self.velocity_range;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return bad(format!("velocity_range requires a < b, got ({a}, {b})"));
        }
        if !(a <= 0.0 && 0.0 <= b) {
            return bad("velocity_range must contain the initial speed 0".into());
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad(format!("radius must be positive, got {}", self.radius));
        }
        if !(self.half_circle_radius > 0.0 && self.half_circle_radius.is_finite()) {
            return bad(format!(
                "half_circle_radius must be positive, got {}",
                self.half_circle_radius
            ));
        }
        if !(self.dirichlet_concentration > 0.0 && self.dirichlet_concentration.is_finite()) {
            return bad("dirichlet_concentration must be positive".into());
        }
        if self.horizon < 1 {
            return bad("horizon must be >= 1".into());
        }
        let (lo, hi) = self.subtasks;
        if lo < 1 || lo > hi {
            return bad(format!("subtasks range ({lo}, {hi}) is invalid"));
        }
        if hi > 1 && self.switch_window().len() < hi - 1 {
            return bad(format!(
                "horizon {} leaves too few switch steps for {hi} sub-tasks",
                self.horizon
            ));
        }
        if let Some(choices) = &self.goal_choices {
            if self.family != EnvFamily::Velocity {
                return bad("goal_choices applies to the velocity family only".into());
            }
            if choices.is_empty() || choices.iter().any(|g| !(a..=b).contains(g)) {
                return bad("goal_choices must be nonempty and inside velocity_range".into());
            }
        }
        Ok(())
    }

    /// Candidate switch steps `[horizon / 5, 4 * horizon / 5)`, excluding 0.
    fn switch_window(&self) -> std::ops::Range<usize> {
        let lo = (self.horizon / 5).max(1);
        let hi = (4 * self.horizon / 5).max(lo);
        lo..hi
    }

    pub fn obs_dim(&self) -> usize {
        let base = match self.family {
            EnvFamily::PointRobot | EnvFamily::MultiGoal => 2,
            EnvFamily::Velocity => 1,
            EnvFamily::Direction => 4,
        };
        base + usize::from(self.expose_time)
    }

    pub fn action_dim(&self) -> usize {
        match self.family {
            EnvFamily::Velocity => 1,
            _ => 2,
        }
    }
}

/// One task: goal sequence and hidden switch schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub params: EnvParams,
    /// One goal per sub-task: a speed (velocity), a unit heading (direction)
    /// or a 2D position.
    pub goals: Vec<Vec<f64>>,
    pub switch_steps: Vec<usize>,
}

impl TaskSpec {
    pub fn family(&self) -> EnvFamily {
        self.params.family
    }

    pub fn horizon(&self) -> usize {
        self.params.horizon
    }

    /// Index of the goal in force while executing step `t`.
    pub fn goal_index(&self, t: usize) -> usize {
        self.switch_steps.iter().filter(|&&s| s <= t).count()
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let h = self.horizon();
        if self.goals.is_empty() || self.switch_steps.len() + 1 != self.goals.len() {
            return Err(EnvError::InvalidParams(
                "need exactly one more goal than switch steps".into(),
            ));
        }
        if self.switch_steps.windows(2).any(|w| w[0] >= w[1]) || self.switch_steps.iter().any(|&s| s == 0 || s >= h) {
            return Err(EnvError::InvalidParams(
                "switch steps must be strictly increasing inside (0, horizon)".into(),
            ));
        }
        let goal_dim = match self.family() {
            EnvFamily::Velocity => 1,
            _ => 2,
        };
        if self
            .goals
            .iter()
            .any(|g| g.len() != goal_dim || g.iter().any(|v| !v.is_finite()))
        {
            return Err(EnvError::InvalidParams("malformed goal".into()));
        }
        let (a, b) = self.params.velocity_range;
        if self.family() == EnvFamily::Velocity && self.goals.iter().any(|g| !(a..=b).contains(&g[0])) {
            return Err(EnvError::InvalidParams("goal speed outside velocity_range".into()));
        }
        Ok(())
    }
}

/// Kinematic state plus the hidden goal pointer.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub t: usize,
    /// Goal that will be in force for the next step.
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// The action was outside `[-1, 1]` and got clipped.
    pub clipped: bool,
}

pub const POSITION_STEP: f64 = 0.1;
pub const SPEED_STEP: f64 = 0.2;

/// Samples `n_train` then `n_test` tasks from one stream. Task ids are
/// distinct across the two sets.
pub fn sample_tasks<R: Rng + ?Sized>(
    params: &EnvParams,
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
    params.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(EnvError::InvalidParams(
            "need at least one train and one test task".into(),
        ));
    }
    let mut all = Vec::with_capacity(n_train + n_test);
    for id in 0..n_train + n_test {
        all.push(sample_task(params, id, rng)?);
    }
    let test = all.split_off(n_train);
    Ok((all, test))
}

fn sample_task<R: Rng + ?Sized>(params: &EnvParams, id: usize, rng: &mut R) -> Result<TaskSpec> {
    let (lo, hi) = params.subtasks;
    let n = rng.random_range(lo..=hi);
    let window = params.switch_window();
    let mut switch_steps: Vec<usize> = sample_indices(rng, window.len(), n - 1)
        .into_iter()
        .map(|i| window.start + i)
        .collect();
    switch_steps.sort_unstable();
    let goals = (0..n).map(|_| sample_goal(params, rng)).collect::<Result<_>>()?;
    let task = TaskSpec {
        id,
        params: params.clone(),
        goals,
        switch_steps,
    };
    task.validate()?;
    Ok(task)
}

fn sample_goal<R: Rng + ?Sized>(params: &EnvParams, rng: &mut R) -> Result<Vec<f64>> {
    use std::f64::consts::PI;
    Ok(match params.family {
        EnvFamily::Velocity => match &params.goal_choices {
            Some(choices) => vec![choices[rng.random_range(0..choices.len())]],
            None => {
                let (a, b) = params.velocity_range;
                vec![rng.random_range(a..=b)]
            }
        },
        EnvFamily::Direction => {
            let theta = rng.random_range(0.0..2.0 * PI);
            vec![theta.cos(), theta.sin()]
        }
        EnvFamily::MultiGoal => {
            let theta = rng.random_range(0.0..2.0 * PI);
            vec![params.radius * theta.cos(), params.radius * theta.sin()]
        }
        EnvFamily::PointRobot => {
            let gamma =
                Gamma::new(params.dirichlet_concentration, 1.0).map_err(|e| EnvError::InvalidParams(e.to_string()))?;
            // a 2-dim Dirichlet via normalized Gammas; retry the measure-zero 0/0 case
            let w = loop {
                let (x, y): (f64, f64) = (gamma.sample(rng), gamma.sample(rng));
                if x + y > 0.0 {
                    break [x / (x + y), y / (x + y)];
                }
            };
            half_circle_goal(params.half_circle_radius, w)
        }
    })
}

/// Goal on the upper half circle at angle `w[1] * pi`: weight `(1, 0)` is the
/// endpoint `(r, 0)` and `(0, 1)` the endpoint `(-r, 0)`.
pub fn half_circle_goal(radius: f64, w: [f64; 2]) -> Vec<f64> {
    let theta = w[1] / (w[0] + w[1]) * std::f64::consts::PI;
    vec![radius * theta.cos(), radius * theta.sin()]
}

/// Initial state; identical for every task of a family.
pub fn reset(task: &TaskSpec) -> (EnvState, Vec<f64>) {
    let state = EnvState {
        position: vec![0.0; 2],
        velocity: vec![0.0; task.params.action_dim()],
        t: 0,
        active: 0,
    };
    let obs = observe(&task.params, &state);
    (state, obs)
}

fn observe(params: &EnvParams, state: &EnvState) -> Vec<f64> {
    let mut obs = match params.family {
        EnvFamily::PointRobot | EnvFamily::MultiGoal => state.position.clone(),
        EnvFamily::Velocity => state.velocity.clone(),
        EnvFamily::Direction => {
            let mut o = state.position.clone();
            o.extend(&state.velocity);
            o
        }
    };
    if params.expose_time {
        obs.push(state.t as f64 / params.horizon as f64);
    }
    obs
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Advances one step. Actions are clipped to `[-1, 1]`.
pub fn step(task: &TaskSpec, state: &EnvState, action: &[f64]) -> Result<(EnvState, StepResult)> {
    let params = &task.params;
    if action.len() != params.action_dim() {
        return Err(EnvError::ActionDim {
            expected: params.action_dim(),
            got: action.len(),
        });
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(EnvError::NonFiniteAction);
    }
    if state.t >= params.horizon {
        return Err(EnvError::EpisodeOver(state.t));
    }
    let clipped = action.iter().any(|a| a.abs() > 1.0);
    let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
    let goal = &task.goals[task.goal_index(state.t)];
    let mut next = state.clone();
    let reward = match params.family {
        EnvFamily::PointRobot | EnvFamily::MultiGoal => {
            for (p, d) in next.position.iter_mut().zip(&a) {
                *p += POSITION_STEP * d;
            }
            -distance(&next.position, goal)
        }
        EnvFamily::Velocity => {
            let (lo, hi) = params.velocity_range;
            next.velocity[0] = (state.velocity[0] + SPEED_STEP * a[0]).clamp(lo, hi);
            -(next.velocity[0] - goal[0]).abs()
        }
        EnvFamily::Direction => {
            // project onto the unit disk so the reward stays in [-1, 1]
            let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let scale = if norm > 1.0 { 1.0 / norm } else { 1.0 };
            next.velocity = vec![a[0] * scale, a[1] * scale];
            for (p, v) in next.position.iter_mut().zip(&next.velocity) {
                *p += POSITION_STEP * v;
            }
            next.velocity[0] * goal[0] + next.velocity[1] * goal[1]
        }
    };
    next.t += 1;
    next.active = task.goal_index(next.t).min(task.goals.len() - 1);
    let result = StepResult {
        observation: observe(params, &next),
        reward,
        done: next.t == params.horizon,
        clipped,
    };
    Ok((next, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(family: EnvFamily, goal: Vec<f64>) -> TaskSpec {
        let mut params = EnvParams::new(family);
        params.subtasks = (1, 1);
        TaskSpec {
            id: 0,
            params,
            goals: vec![goal],
            switch_steps: vec![],
        }
    }

    #[test]
    fn step_examples() {
        let task = single(EnvFamily::Velocity, vec![3.0]);
        let (mut s, _) = reset(&task);
        s.velocity[0] = 2.0;
        let (_, r) = step(&task, &s, &[0.0]).unwrap();
        assert_eq!(r.reward, -1.0);

        let task = single(EnvFamily::Direction, vec![1.0, 0.0]);
        let (s, _) = reset(&task);
        assert_eq!(step(&task, &s, &[1.0, 0.0]).unwrap().1.reward, 1.0);

        let task = single(EnvFamily::PointRobot, vec![1.0, 0.0]);
        let (s, obs) = reset(&task);
        assert_eq!(obs, vec![0.0, 0.0]);
        let (s2, r) = step(&task, &s, &[1.0, 0.0]).unwrap();
        assert!((s2.position[0] - 0.1).abs() < 1e-15 && s2.position[1] == 0.0);
        assert!((r.reward + 0.9).abs() < 1e-12);
    }

    #[test]
    fn reset_is_deterministic() {
        let task = single(EnvFamily::MultiGoal, vec![0.0, 1.0]);
        let (a, oa) = reset(&task);
        let (b, ob) = reset(&task);
        assert_eq!(a, b);
        assert_eq!(oa, ob);
        assert_eq!((a.t, a.active), (0, 0));
    }

    #[test]
    fn clipping_is_flagged() {
        let task = single(EnvFamily::Velocity, vec![0.0]);
        let (s, _) = reset(&task);
        let (s2, r) = step(&task, &s, &[5.0]).unwrap();
        assert!(r.clipped);
        assert!((s2.velocity[0] - 0.2).abs() < 1e-15);
        assert!(step(&task, &s, &[f64::NAN]).is_err());
        assert!(step(&task, &s, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn episode_has_exact_length() {
        let params = EnvParams::new(EnvFamily::MultiGoal);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (train, _) = sample_tasks(&params, 3, 1, &mut rng).unwrap();
        for task in &train {
            let (mut s, _) = reset(task);
            let mut n = 0;
            loop {
                let (next, r) = step(task, &s, &[0.3, -0.2]).unwrap();
                n += 1;
                s = next;
                if r.done {
                    break;
                }
            }
            assert_eq!(n, params.horizon);
            assert!(step(task, &s, &[0.0, 0.0]).is_err());
        }
    }

    #[test]
    fn switches_follow_schedule() {
        let mut params = EnvParams::new(EnvFamily::Velocity);
        params.subtasks = (3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (tasks, _) = sample_tasks(&params, 20, 1, &mut rng).unwrap();
        for task in tasks {
            assert_eq!(task.switch_steps.len(), 2);
            for &s in &task.switch_steps {
                assert!((20..80).contains(&s));
            }
            let (mut st, _) = reset(&task);
            while st.t < task.horizon() {
                assert_eq!(st.active, task.goal_index(st.t));
                st = step(&task, &st, &[0.1]).unwrap().0;
            }
        }
    }

    #[test]
    fn sampling_ranges_and_determinism() {
        let params = EnvParams::new(EnvFamily::Velocity);
        let (a, b) = sample_tasks(&params, 50, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (c, d) = sample_tasks(&params, 50, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!((a.clone(), b.clone()), (c, d));
        for t in a.iter().chain(&b) {
            assert!(t.goals.iter().all(|g| (-1.0..=3.0).contains(&g[0])));
            assert!((2..=3).contains(&t.goals.len()));
        }
        let mut ids: Vec<usize> = a.iter().chain(&b).map(|t| t.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 60);
    }

    #[test]
    fn half_circle_endpoints() {
        assert_eq!(half_circle_goal(1.0, [1.0, 0.0]), vec![1.0, 0.0]);
        let g = half_circle_goal(2.0, [0.0, 1.0]);
        assert!((g[0] + 2.0).abs() < 1e-12 && g[1].abs() < 1e-12);
        let mut params = EnvParams::new(EnvFamily::PointRobot);
        params.subtasks = (1, 1);
        let (tasks, _) = sample_tasks(&params, 100, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for t in tasks {
            let g = &t.goals[0];
            assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1.0).abs() < 1e-12 && g[1] >= 0.0);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = EnvParams::new(EnvFamily::Velocity);
        p.velocity_range = (3.0, -1.0);
        assert!(p.validate().is_err());
        let mut p = EnvParams::new(EnvFamily::MultiGoal);
        p.radius = 0.0;
        assert!(p.validate().is_err());
        let mut p = EnvParams::new(EnvFamily::Velocity);
        p.goal_choices = Some(vec![5.0]);
        assert!(p.validate().is_err());
    }

    #[test]
    fn observations_hide_goal() {
        let a = single(EnvFamily::MultiGoal, vec![1.0, 0.0]);
        let b = single(EnvFamily::MultiGoal, vec![-1.0, 0.0]);
        let (mut sa, _) = reset(&a);
        let (mut sb, _) = reset(&b);
        for k in 0..10 {
            let act = [0.1 * k as f64, -0.5];
            let (na, ra) = step(&a, &sa, &act).unwrap();
            let (nb, rb) = step(&b, &sb, &act).unwrap();
            assert_eq!(ra.observation, rb.observation);
            sa = na;
            sb = nb;
        }
    }
}
