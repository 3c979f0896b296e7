//! Slippery gridworld whose exact transition tensor is exported as a
//! [`TabularMdp`], so every finite-MDP oracle can run against a concrete
//! environment rather than only random instances.

use crate::error::{Error, Result};
use crate::tabular::TabularMdp;

/// Actions are indexed north, east, south, west.
pub const GRID_ACTIONS: usize = 4;
const MOVES: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// Grid with a single absorbing goal in the bottom-right cell. Each step
/// costs -1 until the goal is reached; the intended move succeeds with
/// probability 1 - slip, otherwise the agent veers to one of the two
/// perpendicular directions. Bumping a wall leaves the position unchanged.
#[derive(Debug, Clone)]
pub struct Gridworld {
    pub rows: usize,
    pub cols: usize,
    pub slip: f64,
    pub gamma: f64,
}

impl Gridworld {
    pub fn new(rows: usize, cols: usize, slip: f64, gamma: f64) -> Result<Gridworld> {
        if rows == 0 || cols == 0 || rows * cols < 2 {
            return Err(Error::Dim("gridworld needs at least two cells".into()));
        }
        if !(0.0..1.0).contains(&slip) {
            return Err(Error::Schema(format!("slip {slip} outside [0, 1)")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Schema(format!("gamma {gamma} outside [0, 1)")));
        }
        Ok(Gridworld { rows, cols, slip, gamma })
    }

    pub fn n_states(&self) -> usize {
        self.rows * self.cols
    }

    pub fn goal_state(&self) -> usize {
        self.n_states() - 1
    }

    fn cell(&self, state: usize) -> (usize, usize) {
        (state / self.cols, state % self.cols)
    }

    fn neighbor(&self, state: usize, dir: usize) -> usize {
        let (r, c) = self.cell(state);
        let (dr, dc) = MOVES[dir];
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        if nr < 0 || nc < 0 || nr >= self.rows as isize || nc >= self.cols as isize {
            state
        } else {
            nr as usize * self.cols + nc as usize
        }
    }

    /// Exact dense MDP: the goal self-loops at reward 0, every other pair
    /// pays -1 and spreads probability over intended and perpendicular
    /// moves.
    pub fn mdp(&self) -> TabularMdp {
        let n = self.n_states();
        let goal = self.goal_state();
        let mut p = vec![0.0; n * GRID_ACTIONS * n];
        let mut r = vec![0.0; n * GRID_ACTIONS];
        for s in 0..n {
            for a in 0..GRID_ACTIONS {
                let row = (s * GRID_ACTIONS + a) * n;
                if s == goal {
                    p[row + s] = 1.0;
                    continue;
                }
                r[s * GRID_ACTIONS + a] = -1.0;
                let spread = [
                    (a, 1.0 - self.slip),
                    ((a + 1) % 4, self.slip / 2.0),
                    ((a + 3) % 4, self.slip / 2.0),
                ];
                for (dir, prob) in spread {
                    if prob == 0.0 {
                        continue;
                    }
                    p[row + self.neighbor(s, dir)] += prob;
                }
            }
        }
        TabularMdp { n_states: n, n_actions: GRID_ACTIONS, p, r, gamma: self.gamma }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::ordinary_fixed_point;

    #[test]
    fn exported_mdp_is_valid_for_slippery_grids() {
        for slip in [0.0, 0.1, 0.3] {
            let world = Gridworld::new(3, 4, slip, 0.9).unwrap();
            world.mdp().validate().unwrap();
        }
        assert!(Gridworld::new(1, 1, 0.0, 0.9).is_err());
        assert!(Gridworld::new(2, 2, 1.5, 0.9).is_err());
    }

    #[test]
    fn two_cell_walk_has_geometric_value() {
        // One row, two cells, no slip. Always moving east reaches the goal
        // in one step: Q(0, east) = -1, and the goal stays at 0.
        let world = Gridworld::new(1, 2, 0.0, 0.9).unwrap();
        let mdp = world.mdp();
        let mut pi = vec![0.0; 2 * GRID_ACTIONS];
        pi[1] = 1.0;
        pi[GRID_ACTIONS + 1] = 1.0;
        let q = ordinary_fixed_point(&mdp, &pi).unwrap();
        assert!((q[1] + 1.0).abs() < 1e-12, "east from start");
        assert!(q[GRID_ACTIONS + 1].abs() < 1e-12, "goal is absorbing");
        // Moving west from the start bumps the wall forever:
        // Q = -1 / (1 - 0.9 * 1) with the policy still heading east after.
        assert!((q[3] - (-1.0 - 0.9)).abs() < 1e-12, "west bumps then recovers");
    }

    #[test]
    fn corner_to_corner_cost_matches_path_length() {
        // 3x3 grid, no slip, greedy east-then-south policy: the start is 4
        // steps from the goal, so Q(start, east) = -(1 + g + g^2 + g^3).
        let world = Gridworld::new(3, 3, 0.0, 0.9).unwrap();
        let mdp = world.mdp();
        let n = world.n_states();
        let mut pi = vec![0.0; n * GRID_ACTIONS];
        for s in 0..n {
            let (r, c) = (s / 3, s % 3);
            let a = if c < 2 { 1 } else if r < 2 { 2 } else { 1 };
            pi[s * GRID_ACTIONS + a] = 1.0;
        }
        let q = ordinary_fixed_point(&mdp, &pi).unwrap();
        let g = 0.9f64;
        let expected = -(1.0 + g + g * g + g * g * g);
        assert!((q[1] - expected).abs() < 1e-12, "got {}", q[1]);
    }
}
