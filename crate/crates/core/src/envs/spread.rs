use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{discrete, EnvError, EnvSpec, StepResult};
use crate::policies::Action;

/// stay, up, down, left, right
pub const N_MOVES: usize = 5;
const MOVES: [(i64, i64); N_MOVES] = [(0, 0), (0, 1), (0, -1), (-1, 0), (1, 0)];

/// Most assignments the matching search enumerates.
const MATCHING_BUDGET: usize = 40_320;
/// Most joint positions the exact dynamic program tabulates.
const DP_BUDGET: usize = 200_000;

/// Grid cover task: agents spread out over landmarks.
///
/// The layout is drawn once from `spec.seed`. Each agent observes its own
/// normalized position and offsets to its `nearest_k` closest landmarks.
#[derive(Clone, Debug)]
pub struct Spread {
    width: i64,
    height: i64,
    start: Vec<(i64, i64)>,
    landmarks: Vec<(i64, i64)>,
    speed: Vec<i64>,
    nearest_k: usize,
    length: usize,
    pos: Vec<(i64, i64)>,
    t: usize,
}

impl Spread {
    pub fn new(spec: &EnvSpec) -> Result<Self, EnvError> {
        let need = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| EnvError::InvalidSpec(format!("spread needs `{name}`")))
        };
        let width = need(spec.width, "width")?;
        let height = need(spec.height, "height")?;
        let n_land = need(spec.landmarks, "landmarks")?;
        let nearest_k = spec.nearest_k.unwrap_or(2);
        if width < 2 || height < 2 {
            return Err(EnvError::InvalidSpec("grid must be at least 2x2".into()));
        }
        if n_land == 0 || nearest_k == 0 || nearest_k > n_land {
            return Err(EnvError::InvalidSpec(format!(
                "need 1 <= nearest_k ({nearest_k}) <= landmarks ({n_land})"
            )));
        }
        let cells = width * height;
        if spec.n_agents + n_land > cells {
            return Err(EnvError::InvalidSpec("more entities than cells".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let picks = sample(&mut rng, cells, spec.n_agents + n_land).into_vec();
        let cell = |k: usize| ((k % width) as i64, (k / width) as i64);
        let start: Vec<_> = picks[..spec.n_agents].iter().map(|&k| cell(k)).collect();
        let landmarks = picks[spec.n_agents..].iter().map(|&k| cell(k)).collect();
        let speed = (0..spec.n_agents)
            .map(|i| if spec.heterogeneous && i == 0 { 2 } else { 1 })
            .collect();
        Ok(Self {
            width: width as i64,
            height: height as i64,
            pos: start.clone(),
            start,
            landmarks,
            speed,
            nearest_k,
            length: spec.episode_length,
            t: 0,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.start.len()
    }

    pub fn obs_dim(&self) -> usize {
        2 + 2 * self.nearest_k
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_agents() + 1
    }

    pub fn episode_length(&self) -> usize {
        self.length
    }

    pub fn positions(&self) -> &[(i64, i64)] {
        &self.pos
    }

    pub fn landmarks(&self) -> &[(i64, i64)] {
        &self.landmarks
    }

    pub fn start(&self) -> &[(i64, i64)] {
        &self.start
    }

    fn diameter(&self) -> f64 {
        ((self.width - 1) + (self.height - 1)) as f64
    }

    /// Per-step reward of a configuration, in `[-1, 0]`.
    pub fn reward_at(&self, pos: &[(i64, i64)]) -> f64 {
        let total: i64 = self
            .landmarks
            .iter()
            .map(|l| pos.iter().map(|p| manhattan(*p, *l)).min().unwrap_or(0))
            .sum();
        -(total as f64) / (self.landmarks.len() as f64 * self.diameter())
    }

    fn moved(&self, agent: usize, p: (i64, i64), m: usize) -> (i64, i64) {
        let (dx, dy) = MOVES[m];
        let s = self.speed[agent];
        (
            (p.0 + dx * s).clamp(0, self.width - 1),
            (p.1 + dy * s).clamp(0, self.height - 1),
        )
    }

    fn observe(&self, reward: f64) -> StepResult {
        let sx = (self.width - 1) as f64;
        let sy = (self.height - 1) as f64;
        let obs = self
            .pos
            .iter()
            .map(|&p| {
                let mut near: Vec<_> = self.landmarks.iter().enumerate().collect();
                near.sort_by_key(|(k, l)| (manhattan(p, **l), *k));
                let mut o = vec![p.0 as f64 / sx, p.1 as f64 / sy];
                for (_, l) in near.into_iter().take(self.nearest_k) {
                    o.push((l.0 - p.0) as f64 / sx);
                    o.push((l.1 - p.1) as f64 / sy);
                }
                o
            })
            .collect();
        let mut state: Vec<f64> = self
            .pos
            .iter()
            .flat_map(|p| [p.0 as f64 / sx, p.1 as f64 / sy])
            .collect();
        state.push(self.t as f64 / self.length as f64);
        StepResult {
            obs,
            state,
            reward,
            done: self.t == self.length,
        }
    }

    pub fn reset(&mut self) -> StepResult {
        self.t = 0;
        self.pos = self.start.clone();
        self.observe(0.0)
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult, EnvError> {
        if self.t >= self.length {
            return Err(EnvError::Finished);
        }
        let moves = actions
            .iter()
            .enumerate()
            .map(|(i, a)| discrete(i, a, N_MOVES))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, m) in moves.into_iter().enumerate() {
            self.pos[i] = self.moved(i, self.pos[i], m);
        }
        self.t += 1;
        Ok(self.observe(self.reward_at(&self.pos)))
    }

    /// Best return over landmark-to-agent matchings, each matched agent
    /// walking a shortest path and unmatched agents staying put.
    pub fn optimal_return(&self) -> Result<f64, EnvError> {
        let n = self.n_agents();
        let m = self.landmarks.len();
        if m > n {
            return Err(EnvError::Unsupported(format!(
                "{m} landmarks exceed {n} agents"
            )));
        }
        let count: usize = (n - m + 1..=n).product();
        if count > MATCHING_BUDGET {
            return Err(EnvError::Unsupported(format!("{count} matchings")));
        }
        let mut best = f64::NEG_INFINITY;
        let mut used = vec![false; n];
        let mut target = vec![None; n];
        self.search_matchings(0, &mut used, &mut target, &mut best);
        Ok(best)
    }

    fn search_matchings(
        &self,
        l: usize,
        used: &mut [bool],
        target: &mut [Option<(i64, i64)>],
        best: &mut f64,
    ) {
        if l == self.landmarks.len() {
            *best = best.max(self.walk(target));
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                target[i] = Some(self.landmarks[l]);
                self.search_matchings(l + 1, used, target, best);
                target[i] = None;
                used[i] = false;
            }
        }
    }

    fn walk(&self, target: &[Option<(i64, i64)>]) -> f64 {
        let mut pos = self.start.clone();
        let mut ret = 0.0;
        for _ in 0..self.length {
            for (i, p) in pos.iter_mut().enumerate() {
                if let Some(g) = target[i] {
                    for _ in 0..self.speed[i] {
                        *p = if p.0 != g.0 {
                            (p.0 + (g.0 - p.0).signum(), p.1)
                        } else {
                            (p.0, p.1 + (g.1 - p.1).signum())
                        };
                    }
                }
            }
            ret += self.reward_at(&pos);
        }
        ret
    }

    /// Exact optimum by backward induction over joint positions.
    pub fn exact_return(&self) -> Result<f64, EnvError> {
        let n = self.n_agents();
        let cells = (self.width * self.height) as usize;
        let states = u32::try_from(n)
            .ok()
            .and_then(|k| cells.checked_pow(k))
            .filter(|&s| s <= DP_BUDGET)
            .ok_or_else(|| EnvError::Unsupported("joint position space too large".into()))?;
        let decode = |mut k: usize| {
            let mut pos = vec![(0, 0); n];
            for p in pos.iter_mut().rev() {
                let c = k % cells;
                k /= cells;
                *p = ((c % self.width as usize) as i64, (c / self.width as usize) as i64);
            }
            pos
        };
        let encode = |pos: &[(i64, i64)]| {
            pos.iter()
                .fold(0, |acc, p| acc * cells + (p.1 * self.width + p.0) as usize)
        };
        // Successor sets per agent per cell.
        let succ: Vec<Vec<Vec<usize>>> = (0..n)
            .map(|i| {
                (0..cells)
                    .map(|c| {
                        let p = ((c % self.width as usize) as i64, (c / self.width as usize) as i64);
                        let mut s: Vec<usize> = (0..N_MOVES)
                            .map(|m| {
                                let q = self.moved(i, p, m);
                                (q.1 * self.width + q.0) as usize
                            })
                            .collect();
                        s.sort_unstable();
                        s.dedup();
                        s
                    })
                    .collect()
            })
            .collect();
        let reward: Vec<f64> = (0..states).map(|k| self.reward_at(&decode(k))).collect();
        let mut value = vec![0.0; states];
        for _ in 0..self.length {
            let mut next = vec![f64::NEG_INFINITY; states];
            for (k, out) in next.iter_mut().enumerate() {
                let pos = decode(k);
                let cell: Vec<usize> = pos
                    .iter()
                    .map(|p| (p.1 * self.width + p.0) as usize)
                    .collect();
                // enumerate the product of per-agent successor sets
                let mut idx = vec![0usize; n];
                loop {
                    let s = idx
                        .iter()
                        .enumerate()
                        .fold(0, |acc, (i, &j)| acc * cells + succ[i][cell[i]][j]);
                    *out = out.max(reward[s] + value[s]);
                    let mut a = n;
                    loop {
                        if a == 0 {
                            break;
                        }
                        a -= 1;
                        idx[a] += 1;
                        if idx[a] < succ[a][cell[a]].len() {
                            break;
                        }
                        idx[a] = 0;
                        if a == 0 {
                            a = usize::MAX;
                            break;
                        }
                    }
                    if a == usize::MAX {
                        break;
                    }
                }
            }
            value = next;
        }
        Ok(value[encode(&self.start)])
    }
}

fn manhattan(a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;

    fn default_env() -> Spread {
        Spread::new(&EnvSpec::default_for(EnvKind::Spread)).unwrap()
    }

    #[test]
    fn layout_is_seeded() {
        let a = default_env();
        let b = default_env();
        assert_eq!(a.start(), b.start());
        assert_eq!(a.landmarks(), b.landmarks());
        let mut spec = EnvSpec::default_for(EnvKind::Spread);
        spec.seed += 1;
        let c = Spread::new(&spec).unwrap();
        assert!(c.start() != a.start() || c.landmarks() != a.landmarks());
    }

    #[test]
    fn agents_on_landmarks_earn_zero() {
        let e = default_env();
        assert_eq!(e.reward_at(e.landmarks()), 0.0);
        let far = vec![(0, 0); 3];
        let r = e.reward_at(&far);
        assert!((-1.0..0.0).contains(&r));
    }

    #[test]
    fn matching_value_by_hand() {
        // Brute force over the 6 matchings, summing per-step distances directly.
        let e = default_env();
        let (s, l) = (e.start().to_vec(), e.landmarks().to_vec());
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut best = f64::NEG_INFINITY;
        for p in perms {
            let mut ret = 0.0;
            for t in 1..=e.episode_length() as i64 {
                // remaining distance of every agent to its own landmark
                let rem: Vec<i64> = (0..3).map(|i| (manhattan(s[i], l[p[i]]) - t).max(0)).collect();
                // a landmark may be closer to an agent that is not matched to it
                let pos: Vec<(i64, i64)> = (0..3)
                    .map(|i| {
                        let (a, b) = (s[i], l[p[i]]);
                        let dx = (b.0 - a.0).abs().min(t);
                        let dy = (t - dx).min((b.1 - a.1).abs());
                        (a.0 + dx * (b.0 - a.0).signum(), a.1 + dy * (b.1 - a.1).signum())
                    })
                    .collect();
                for i in 0..3 {
                    assert_eq!(manhattan(pos[i], l[p[i]]), rem[i]);
                }
                let cost: i64 = l.iter().map(|lm| pos.iter().map(|q| manhattan(*q, *lm)).min().unwrap()).sum();
                ret -= cost as f64 / (3.0 * 8.0);
            }
            best = best.max(ret);
        }
        assert!((e.optimal_return().unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn matching_equals_exact_dp() {
        let e = default_env();
        let m = e.optimal_return().unwrap();
        let x = e.exact_return().unwrap();
        assert!((m - x).abs() < 1e-12, "matching {m} vs dp {x}");
    }

    #[test]
    fn heterogeneous_speed_breaks_symmetry() {
        let mut spec = EnvSpec::default_for(EnvKind::Spread);
        spec.heterogeneous = true;
        spec.width = Some(7);
        let run = |first: usize| {
            let mut e = Spread::new(&spec).unwrap();
            e.reset();
            let mut acts = vec![Action::Discrete(0); 3];
            acts[first] = Action::Discrete(4);
            let start = e.start()[first];
            e.step(&acts).unwrap();
            e.positions()[first].0 - start.0
        };
        let a0 = run(0);
        let a1 = run(1);
        assert!(a0 != a1 || a0 == 0, "agent 0 moved {a0}, agent 1 moved {a1}");
        let mut e = Spread::new(&spec).unwrap();
        e.reset();
        e.pos = vec![(1, 1), (1, 2), (1, 3)];
        e.step(&vec![Action::Discrete(4); 3]).unwrap();
        assert_eq!(e.positions(), &[(3, 1), (2, 2), (2, 3)]);
    }

    #[test]
    fn too_many_landmarks_is_unsupported() {
        let spec = EnvSpec {
            landmarks: Some(4),
            ..EnvSpec::default_for(EnvKind::Spread)
        };
        assert!(matches!(
            Spread::new(&spec).unwrap().optimal_return(),
            Err(EnvError::Unsupported(_))
        ));
    }
}
