use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;

use super::{reset, step, EnvFamily, TaskSpec, POSITION_STEP, SPEED_STEP};

/// Upper bound on the return any policy can collect on `task`.
///
/// Exact for the velocity family (convex dynamic program over the speed),
/// the direction family (`horizon`) and single-goal navigation (greedy is
/// optimal there). For navigation with several goals it sums per-step
/// reachability bounds, which may not be jointly attainable.
pub fn oracle_return(task: &TaskSpec) -> f64 {
    match task.family() {
        EnvFamily::Velocity => velocity_optimum(task),
        EnvFamily::Direction => task.horizon() as f64,
        EnvFamily::PointRobot | EnvFamily::MultiGoal => reach_bound(task),
    }
}

/// Return of the scripted policy that heads straight for the active goal.
pub fn greedy_return(task: &TaskSpec) -> f64 {
    let (mut state, _) = reset(task);
    let mut total = 0.0;
    for t in 0..task.horizon() {
        let goal = &task.goals[task.goal_index(t)];
        let action: Vec<f64> = match task.family() {
            EnvFamily::Velocity => vec![((goal[0] - state.velocity[0]) / SPEED_STEP).clamp(-1.0, 1.0)],
            EnvFamily::Direction => goal.clone(),
            EnvFamily::PointRobot | EnvFamily::MultiGoal => state
                .position
                .iter()
                .zip(goal)
                .map(|(p, g)| ((g - p) / POSITION_STEP).clamp(-1.0, 1.0))
                .collect(),
        };
        let (next, result) = step(task, &state, &action).expect("scripted action is valid");
        total += result.reward;
        state = next;
    }
    total
}

/// Minimizes `sum_t |v_{t+1} - g_t|` subject to `|v_{t+1} - v_t| <= 0.2`,
/// `v_0 = 0`. The cost-to-come is convex piecewise linear; it is tracked by
/// its breakpoints (slope trick). Speed clipping to the goal range never
/// binds at the optimum because every goal lies inside that range.
fn velocity_optimum(task: &TaskSpec) -> f64 {
    let h = task.horizon();
    // the indicator of v = 0 is emulated by steeper slopes than h terms can undo
    let mut left: BinaryHeap<OrderedFloat<f64>> = (0..h + 2).map(|_| OrderedFloat(0.0)).collect();
    let mut right: BinaryHeap<Reverse<OrderedFloat<f64>>> = (0..h + 2).map(|_| Reverse(OrderedFloat(0.0))).collect();
    let (mut shift_l, mut shift_r) = (0.0, 0.0);
    let mut min_cost = 0.0;
    for t in 0..h {
        let g = task.goals[task.goal_index(t)][0];
        shift_l -= SPEED_STEP;
        shift_r += SPEED_STEP;
        // add max(0, v - g)
        let top_l = left.peek().expect("nonempty").0 + shift_l;
        min_cost += (top_l - g).max(0.0);
        left.push(OrderedFloat(g - shift_l));
        let moved = left.pop().expect("nonempty").0 + shift_l;
        right.push(Reverse(OrderedFloat(moved - shift_r)));
        // add max(0, g - v)
        let top_r = right.peek().expect("nonempty").0 .0 + shift_r;
        min_cost += (g - top_r).max(0.0);
        right.push(Reverse(OrderedFloat(g - shift_r)));
        let moved = right.pop().expect("nonempty").0 .0 + shift_r;
        left.push(OrderedFloat(moved - shift_l));
    }
    -min_cost
}

/// After `t + 1` steps the position lies in the box `[-0.1 (t + 1), 0.1 (t + 1)]^2`;
/// the distance from the goal to that box bounds the step's reward.
fn reach_bound(task: &TaskSpec) -> f64 {
    (0..task.horizon())
        .map(|t| {
            let reach = POSITION_STEP * (t + 1) as f64;
            let goal = &task.goals[task.goal_index(t)];
            -goal
                .iter()
                .map(|g| (g.abs() - reach).max(0.0).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{sample_tasks, EnvParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn velocity_task(goals: Vec<f64>, switch_steps: Vec<usize>, horizon: usize) -> TaskSpec {
        let mut params = EnvParams::new(EnvFamily::Velocity);
        params.horizon = horizon;
        params.subtasks = (goals.len(), goals.len());
        TaskSpec {
            id: 0,
            params,
            goals: goals.into_iter().map(|g| vec![g]).collect(),
            switch_steps,
        }
    }

    /// Exhaustive dynamic program on the 0.01 grid; with goals on that grid
    /// the linear program has a grid-aligned optimum.
    fn grid_optimum(task: &TaskSpec) -> f64 {
        let (lo, hi) = task.params.velocity_range;
        let to_idx = |v: f64| ((v - lo) * 100.0).round() as i64;
        let n = to_idx(hi) + 1;
        let reach = 20;
        let mut cost = vec![f64::INFINITY; n as usize];
        cost[to_idx(0.0) as usize] = 0.0;
        for t in 0..task.horizon() {
            let g = task.goals[task.goal_index(t)][0];
            let mut next = vec![f64::INFINITY; n as usize];
            for (j, slot) in next.iter_mut().enumerate() {
                let a = (j as i64 - reach).max(0) as usize;
                let b = ((j as i64 + reach).min(n - 1)) as usize;
                let best = cost[a..=b].iter().copied().fold(f64::INFINITY, f64::min);
                *slot = best + ((lo + j as f64 / 100.0) - g).abs();
            }
            cost = next;
        }
        -cost.into_iter().fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn perfect_tracking_from_start() {
        let task = velocity_task(vec![0.0], vec![], 50);
        assert_eq!(oracle_return(&task), 0.0);
        assert_eq!(greedy_return(&task), 0.0);
    }

    #[test]
    fn velocity_optimum_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let horizon = rng.random_range(5..40);
            let n = rng.random_range(1..4usize);
            let goals: Vec<f64> = (0..n).map(|_| rng.random_range(-100i32..=300) as f64 / 100.0).collect();
            let mut steps: Vec<usize> = rand::seq::index::sample(&mut rng, horizon - 1, n - 1)
                .into_iter()
                .map(|s| s + 1)
                .collect();
            steps.sort_unstable();
            let task = velocity_task(goals, steps, horizon);
            let exact = oracle_return(&task);
            assert!((exact - grid_optimum(&task)).abs() < 1e-9, "{task:?}");
            assert!(greedy_return(&task) <= exact + 1e-9);
        }
    }

    #[test]
    fn greedy_is_not_always_optimal() {
        // leaving early for a far goal beats hitting a brief nearby one
        let task = velocity_task(vec![0.1, -3.0], vec![1], 30);
        assert!(oracle_return(&task) > greedy_return(&task) + 0.1);
    }

    #[test]
    fn direction_oracle_is_horizon() {
        let params = EnvParams::new(EnvFamily::Direction);
        let (tasks, _) = sample_tasks(&params, 5, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for task in tasks {
            assert_eq!(oracle_return(&task), 100.0);
            assert!((greedy_return(&task) - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_goal_navigation_bound_is_attained() {
        let mut params = EnvParams::new(EnvFamily::PointRobot);
        params.subtasks = (1, 1);
        let (tasks, _) = sample_tasks(&params, 10, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for task in tasks {
            assert!((oracle_return(&task) - greedy_return(&task)).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_bounds_random_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for family in [
            EnvFamily::Velocity,
            EnvFamily::Direction,
            EnvFamily::MultiGoal,
            EnvFamily::PointRobot,
        ] {
            let params = EnvParams::new(family);
            let (tasks, _) = sample_tasks(&params, 5, 1, &mut rng).unwrap();
            for task in tasks {
                let bound = oracle_return(&task);
                assert!(greedy_return(&task) <= bound + 1e-9);
                for _ in 0..20 {
                    let (mut s, _) = reset(&task);
                    let mut total = 0.0;
                    for _ in 0..task.horizon() {
                        let a: Vec<f64> = (0..params.action_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let (n, r) = step(&task, &s, &a).unwrap();
                        total += r.reward;
                        s = n;
                    }
                    assert!(total <= bound + 1e-9);
                }
            }
        }
    }
}
