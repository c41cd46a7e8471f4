//! Snake on a small square grid. The snake starts with length one, grows by
//! one per apple, and dies on leaving the grid or biting itself.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Environment, StepOutcome};
use crate::error::{Error, Result};

pub const GRID_SIZE: usize = 6;
pub const TIME_LIMIT: usize = 500;
pub const NUM_ACTIONS: usize = 4;
/// Observation planes: head, body (excluding head), tail, apple.
pub const CHANNELS: usize = 4;

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub fn from_action(a: usize) -> Result<Self> {
        match a {
            0 => Ok(Direction::Up),
            1 => Ok(Direction::Down),
            2 => Ok(Direction::Left),
            3 => Ok(Direction::Right),
            _ => Err(Error::Action {
                action: a,
                num_actions: NUM_ACTIONS,
            }),
        }
    }

    pub fn action(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnakeState {
    /// Head first.
    pub body: VecDeque<Cell>,
    /// `None` only once the body fills the grid.
    pub apple: Option<Cell>,
    pub timestep: usize,
    pub alive: bool,
    /// Set on death, on filling the grid, or at the time limit.
    pub done: bool,
    pub apples_eaten: usize,
}

impl SnakeState {
    pub fn head(&self) -> Cell {
        self.body[0]
    }

    /// Checks the structural invariants; used by tests.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for (i, a) in self.body.iter().enumerate() {
            if self.body.iter().skip(i + 1).any(|b| b == a) {
                return Err(format!("duplicate body cell {a:?}"));
            }
        }
        for w in self.body.iter().collect::<Vec<_>>().windows(2) {
            let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
            if d != 1 {
                return Err(format!("body cells {:?} and {:?} not adjacent", w[0], w[1]));
            }
        }
        if self.alive {
            if let Some(apple) = self.apple {
                if self.body.contains(&apple) {
                    return Err(format!("apple {apple:?} on the body"));
                }
            }
        }
        if self.body.len() != 1 + self.apples_eaten {
            return Err("length does not match apples eaten".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snake {
    size: usize,
    time_limit: usize,
}

impl Default for Snake {
    fn default() -> Self {
        Snake {
            size: GRID_SIZE,
            time_limit: TIME_LIMIT,
        }
    }
}

impl Snake {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_time_limit(time_limit: usize) -> Self {
        Snake {
            size: GRID_SIZE,
            time_limit,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn observation_len(&self) -> usize {
        self.size * self.size * CHANNELS
    }

    fn random_free_cell(&self, body: &VecDeque<Cell>, rng: &mut ChaCha8Rng) -> Option<Cell> {
        let free: Vec<Cell> = (0..self.size)
            .flat_map(|r| (0..self.size).map(move |c| (r, c)))
            .filter(|c| !body.contains(c))
            .collect();
        if free.is_empty() {
            None
        } else {
            Some(free[rng.gen_range(0..free.len())])
        }
    }

    pub fn reset_state(&self, rng: &mut ChaCha8Rng) -> SnakeState {
        let head = (rng.gen_range(0..self.size), rng.gen_range(0..self.size));
        let body = VecDeque::from([head]);
        let apple = self.random_free_cell(&body, rng);
        SnakeState {
            body,
            apple,
            timestep: 0,
            alive: true,
            done: false,
            apples_eaten: 0,
        }
    }

    /// Advances `state` in place. The tail vacates its cell before the head
    /// moves, so following one's own tail is legal unless the move eats.
    pub fn advance(&self, state: &mut SnakeState, action: usize, rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        let dir = Direction::from_action(action)?;
        if !state.alive || state.done {
            return Err(Error::State("step on a finished snake episode".into()));
        }
        state.timestep += 1;
        let (r, c) = state.head();
        let next = match dir {
            Direction::Up => r.checked_sub(1).map(|r| (r, c)),
            Direction::Down => (r + 1 < self.size).then_some((r + 1, c)),
            Direction::Left => c.checked_sub(1).map(|c| (r, c)),
            Direction::Right => (c + 1 < self.size).then_some((r, c + 1)),
        };
        let Some(next) = next else {
            return Ok(self.die(state));
        };
        let eats = state.apple == Some(next);
        if !eats {
            state.body.pop_back();
        }
        if state.body.contains(&next) {
            return Ok(self.die(state));
        }
        state.body.push_front(next);
        let mut reward = 0.0;
        if eats {
            reward = 1.0;
            state.apples_eaten += 1;
            state.apple = self.random_free_cell(&state.body, rng);
            if state.apple.is_none() {
                state.done = true;
            }
        }
        if state.timestep >= self.time_limit {
            state.done = true;
        }
        Ok(StepOutcome {
            reward,
            terminal: state.done,
        })
    }

    fn die(&self, state: &mut SnakeState) -> StepOutcome {
        state.alive = false;
        state.done = true;
        StepOutcome {
            reward: 0.0,
            terminal: true,
        }
    }

    /// NHWC planes flattened row-major: `[row, col, channel]`.
    pub fn write_observation(&self, state: &SnakeState, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let idx = |(r, c): Cell, ch: usize| (r * self.size + c) * CHANNELS + ch;
        if let Some(&head) = state.body.front() {
            out[idx(head, 0)] = 1.0;
        }
        for &cell in state.body.iter().skip(1) {
            out[idx(cell, 1)] = 1.0;
        }
        if let Some(&tail) = state.body.back() {
            out[idx(tail, 2)] = 1.0;
        }
        if let Some(apple) = state.apple {
            out[idx(apple, 3)] = 1.0;
        }
    }
}

impl Environment for Snake {
    type State = SnakeState;

    fn observation_shape(&self) -> Vec<usize> {
        vec![self.size, self.size, CHANNELS]
    }

    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> SnakeState {
        self.reset_state(rng)
    }

    fn step(&self, state: &mut SnakeState, action: usize, rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        self.advance(state, action, rng)
    }

    fn observe(&self, state: &SnakeState, out: &mut [f64]) {
        self.write_observation(state, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn state(body: &[Cell], apple: Cell) -> SnakeState {
        SnakeState {
            body: body.iter().copied().collect(),
            apple: Some(apple),
            timestep: 0,
            alive: true,
            done: false,
            apples_eaten: body.len() - 1,
        }
    }

    #[test]
    fn eating_grows_and_rewards() {
        let env = Snake::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = state(&[(2, 2)], (2, 3));
        let out = env.advance(&mut s, Direction::Right.action(), &mut rng).unwrap();
        assert_eq!(out.reward, 1.0);
        assert!(!out.terminal);
        assert_eq!(s.body.len(), 2);
        s.check_invariants().unwrap();
    }

    #[test]
    fn leaving_the_grid_terminates_without_reward() {
        let env = Snake::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = state(&[(0, 3)], (4, 4));
        let out = env.advance(&mut s, Direction::Up.action(), &mut rng).unwrap();
        assert_eq!((out.reward, out.terminal), (0.0, true));
        assert!(!s.alive);
        assert!(matches!(env.advance(&mut s, 0, &mut rng), Err(Error::State(_))));
    }

    #[test]
    fn biting_itself_terminates() {
        let env = Snake::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // head (2,2) moving down into (3,2), which stays occupied
        let mut s = state(&[(2, 2), (2, 3), (3, 3), (3, 2), (3, 1)], (0, 0));
        let out = env.advance(&mut s, Direction::Down.action(), &mut rng).unwrap();
        assert!(out.terminal);
        assert!(!s.alive);
    }

    #[test]
    fn following_the_tail_is_legal() {
        let env = Snake::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = state(&[(2, 2), (2, 3), (3, 3), (3, 2)], (0, 0));
        let out = env.advance(&mut s, Direction::Down.action(), &mut rng).unwrap();
        assert!(!out.terminal);
        s.check_invariants().unwrap();
    }

    #[test]
    fn time_limit_terminates() {
        let env = Snake::with_time_limit(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = state(&[(2, 2)], (5, 5));
        let moves = [Direction::Left, Direction::Right, Direction::Left];
        let outs: Vec<_> = moves
            .iter()
            .map(|d| env.advance(&mut s, d.action(), &mut rng).unwrap().terminal)
            .collect();
        assert_eq!(outs, vec![false, false, true]);
        assert!(s.alive);
    }

    #[test]
    fn bad_action() {
        let env = Snake::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = env.reset_state(&mut rng);
        assert!(matches!(env.advance(&mut s, 4, &mut rng), Err(Error::Action { .. })));
    }

    /// Boustrophedon Hamiltonian cycle on an even grid: column 0 is the
    /// return lane, the rest is swept row by row.
    fn cycle_action(size: usize, (r, c): Cell) -> Direction {
        if c == 0 {
            return if r == 0 { Direction::Right } else { Direction::Up };
        }
        if r % 2 == 0 {
            if c + 1 < size {
                Direction::Right
            } else {
                Direction::Down
            }
        } else if c > 1 {
            Direction::Left
        } else if r + 1 < size {
            Direction::Down
        } else {
            Direction::Left
        }
    }

    #[test]
    fn space_filling_tour_eats_every_apple() {
        let env = Snake::with_time_limit(100_000);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = env.reset_state(&mut rng);
            let mut total = 0.0;
            loop {
                let a = cycle_action(GRID_SIZE, s.head());
                let out = env.advance(&mut s, a.action(), &mut rng).unwrap();
                total += out.reward;
                s.check_invariants().unwrap();
                if out.terminal {
                    break;
                }
            }
            assert!(s.alive);
            assert_eq!(total, 35.0);
            assert_eq!(s.body.len(), GRID_SIZE * GRID_SIZE);
        }
    }

    #[test]
    fn observation_planes() {
        let env = Snake::new();
        let s = state(&[(1, 1), (1, 2), (2, 2)], (4, 0));
        let mut obs = vec![0.0; env.observation_len()];
        env.write_observation(&s, &mut obs);
        let at = |r: usize, c: usize, ch: usize| obs[(r * 6 + c) * CHANNELS + ch];
        assert_eq!(at(1, 1, 0), 1.0);
        assert_eq!(at(1, 2, 1), 1.0);
        assert_eq!(at(2, 2, 1), 1.0);
        assert_eq!(at(2, 2, 2), 1.0);
        assert_eq!(at(4, 0, 3), 1.0);
        assert_eq!(obs.iter().sum::<f64>(), 5.0);
    }
}
