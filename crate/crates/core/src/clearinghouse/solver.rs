//! Assignment search over per-task portfolio choices under agent capacity
//! and resource budgets.

use super::{ClearingError, SolverConfig, SolverMode};

/// One admissible portfolio for a task.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    /// Objective contribution over leaving the task unassigned.
    pub gain: f64,
    /// Agent indices occupied (primary and backup).
    pub agents: Vec<usize>,
}

/// Per-task choices in preference order; leaving a task unassigned is
/// always allowed and contributes zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub choices: Vec<Vec<Choice>>,
    /// `demands[task][pool]`, consumed if the task is assigned.
    pub demands: Vec<Vec<f64>>,
    pub remaining: Vec<f64>,
    pub capacity: Vec<usize>,
    /// Task visiting order for greedy construction.
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub choice: Vec<Option<usize>>,
    pub objective: f64,
}

const POOL_TOLERANCE: f64 = 1e-9;

impl Problem {
    /// Objective of an assignment, summed in task order so equal
    /// assignments always produce identical values.
    pub fn objective(&self, choice: &[Option<usize>]) -> f64 {
        choice
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|j| self.choices[i][j].gain))
            .sum()
    }

    pub fn is_feasible(&self, choice: &[Option<usize>]) -> bool {
        let mut load = vec![0usize; self.capacity.len()];
        let mut used = vec![0.0; self.remaining.len()];
        for (i, c) in choice.iter().enumerate() {
            let Some(j) = c else { continue };
            for &a in &self.choices[i][*j].agents {
                load[a] += 1;
                if load[a] > self.capacity[a] {
                    return false;
                }
            }
            for (k, d) in self.demands[i].iter().enumerate() {
                used[k] += d;
            }
        }
        used.iter()
            .zip(&self.remaining)
            .all(|(u, r)| *u <= r + POOL_TOLERANCE)
    }

    /// Number of joint assignments, counting "unassigned" per task.
    pub fn joint_size(&self) -> u128 {
        self.choices
            .iter()
            .fold(1u128, |acc, c| acc.saturating_mul(c.len() as u128 + 1))
    }

    fn fits(&self, i: usize, j: usize, load: &[usize], used: &[f64]) -> bool {
        self.choices[i][j]
            .agents
            .iter()
            .all(|&a| load[a] < self.capacity[a])
            && self.demands[i]
                .iter()
                .zip(used)
                .zip(&self.remaining)
                .all(|((d, u), r)| u + d <= r + POOL_TOLERANCE)
    }

    fn exhaustive(&self) -> Vec<Option<usize>> {
        let n = self.choices.len();
        let mut best = (f64::NEG_INFINITY, vec![None; n]);
        let mut cur = vec![None; n];
        let mut load = vec![0usize; self.capacity.len()];
        let mut used = vec![0.0; self.remaining.len()];
        self.dfs(0, &mut cur, &mut load, &mut used, &mut best);
        best.1
    }

    fn dfs(
        &self,
        i: usize,
        cur: &mut Vec<Option<usize>>,
        load: &mut [usize],
        used: &mut [f64],
        best: &mut (f64, Vec<Option<usize>>),
    ) {
        if i == self.choices.len() {
            let v = self.objective(cur);
            if v > best.0 {
                *best = (v, cur.clone());
            }
            return;
        }
        for j in 0..self.choices[i].len() {
            if !self.fits(i, j, load, used) {
                continue;
            }
            for &a in &self.choices[i][j].agents {
                load[a] += 1;
            }
            let saved = used.to_vec();
            for (k, d) in self.demands[i].iter().enumerate() {
                used[k] += d;
            }
            cur[i] = Some(j);
            self.dfs(i + 1, cur, load, used, best);
            cur[i] = None;
            used.copy_from_slice(&saved);
            for &a in &self.choices[i][j].agents {
                load[a] -= 1;
            }
        }
        self.dfs(i + 1, cur, load, used, best);
    }

    fn greedy(&self) -> Vec<Option<usize>> {
        let mut choice = vec![None; self.choices.len()];
        let mut load = vec![0usize; self.capacity.len()];
        let mut used = vec![0.0; self.remaining.len()];
        for &i in &self.order {
            // choices are already in preference order
            if let Some(j) = (0..self.choices[i].len()).find(|&j| self.fits(i, j, &load, &used)) {
                for &a in &self.choices[i][j].agents {
                    load[a] += 1;
                }
                for (k, d) in self.demands[i].iter().enumerate() {
                    used[k] += d;
                }
                choice[i] = Some(j);
            }
        }
        choice
    }

    fn alternatives(&self, i: usize) -> impl Iterator<Item = Option<usize>> {
        (0..self.choices[i].len())
            .map(Some)
            .chain(std::iter::once(None))
    }

    fn improves(&self, candidate: &[Option<usize>], current: f64) -> Option<f64> {
        let v = self.objective(candidate);
        (v > current + 1e-12 * current.abs().max(1.0) && self.is_feasible(candidate)).then_some(v)
    }

    /// First-improvement hill climbing: single-task changes first, then
    /// simultaneous changes of two tasks.
    fn local_search(&self, mut choice: Vec<Option<usize>>, iters: usize) -> Vec<Option<usize>> {
        let n = self.choices.len();
        let mut value = self.objective(&choice);
        'outer: for _ in 0..iters {
            for i in 0..n {
                for alt in self.alternatives(i) {
                    if alt == choice[i] {
                        continue;
                    }
                    let mut c = choice.clone();
                    c[i] = alt;
                    if let Some(v) = self.improves(&c, value) {
                        choice = c;
                        value = v;
                        continue 'outer;
                    }
                }
            }
            for i in 0..n {
                for k in i + 1..n {
                    for ai in self.alternatives(i) {
                        if ai == choice[i] {
                            continue;
                        }
                        for ak in self.alternatives(k) {
                            if ak == choice[k] {
                                continue;
                            }
                            let mut c = choice.clone();
                            c[i] = ai;
                            c[k] = ak;
                            if let Some(v) = self.improves(&c, value) {
                                choice = c;
                                value = v;
                                continue 'outer;
                            }
                        }
                    }
                }
            }
            break;
        }
        choice
    }
}

pub fn solve(problem: &Problem, cfg: &SolverConfig) -> Result<Assignment, ClearingError> {
    let choice = match cfg.mode {
        SolverMode::Exhaustive => {
            let size = problem.joint_size();
            if size > cfg.exhaustive_limit as u128 {
                return Err(ClearingError::ExhaustiveLimit {
                    size,
                    limit: cfg.exhaustive_limit,
                });
            }
            problem.exhaustive()
        }
        SolverMode::Greedy => problem.greedy(),
        SolverMode::GreedyPlusLocalSearch => {
            problem.local_search(problem.greedy(), cfg.local_search_iters)
        }
    };
    Ok(Assignment {
        objective: problem.objective(&choice),
        choice,
    })
}
