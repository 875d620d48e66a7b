//! Gauss-Markov vehicle mobility, SBPI sequences and ground-truth beam dynamics.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{Scenario, Segment, N_LANES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilityParams {
    pub mu_v: f64,
    pub sigma_v: f64,
    pub gamma_v: f64,
    /// Per-frame lane change probability.
    pub lane_change_prob: f64,
    /// Frame duration `T_fr` (s).
    pub frame_duration: f64,
    /// Probability of turning at the T-junction.
    pub turn_prob: f64,
}

impl Default for MobilityParams {
    fn default() -> Self {
        Self { mu_v: 30.0, sigma_v: 10.0, gamma_v: 0.2, lane_change_prob: 0.01, frame_duration: 0.02, turn_prob: 0.5 }
    }
}

impl MobilityParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.gamma_v) || !unit(self.lane_change_prob) || !unit(self.turn_prob) {
            return Err(Error::InvalidArgument("gamma_v, q and turn_prob must lie in [0, 1]".into()));
        }
        if !(self.frame_duration > 0.0) || !(self.sigma_v >= 0.0) {
            return Err(Error::InvalidArgument("frame duration must be positive and sigma_v nonnegative".into()));
        }
        Ok(())
    }
}

/// Kinematic state of a UE at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UeState {
    pub speed: f64,
    /// Position along the current segment (m).
    pub along: f64,
    pub lane: usize,
    pub segment: Segment,
}

/// One Gauss-Markov step. Speeds are clipped at zero. On the main road of
/// a T-shaped layout, crossing the junction turns onto the stem with
/// probability `turn_prob`, keeping the lane.
pub fn step_gauss_markov<R: Rng + ?Sized>(
    state: &UeState,
    params: &MobilityParams,
    scenario: &Scenario,
    rng: &mut R,
) -> UeState {
    let g = params.gamma_v;
    let xi: f64 = rng.sample(StandardNormal);
    let speed = (g * state.speed + (1.0 - g) * params.mu_v + params.sigma_v * (1.0 - g * g).sqrt() * xi).max(0.0);
    let mut along = state.along + params.frame_duration * state.speed;
    let mut segment = state.segment;
    let road = &scenario.config.road;
    if segment == Segment::Main && road.has_stem() {
        let j = road.junction();
        if state.along < j && along >= j && rng.random::<f64>() < params.turn_prob {
            segment = Segment::Stem;
            along -= j;
        }
    }
    let lane = if rng.random::<f64>() < params.lane_change_prob { N_LANES - 1 - state.lane } else { state.lane };
    UeState { speed, along, lane, segment }
}

/// Per-frame states while the UE is inside coverage.
pub type Trajectory = Vec<UeState>;

/// Entry at the upstream boundary with speed `N(mu, sigma^2)` truncated at
/// zero and a uniformly random lane. Stops at coverage exit or after
/// `max_frames` frames.
pub fn generate_trajectory<R: Rng + ?Sized>(
    params: &MobilityParams,
    scenario: &Scenario,
    max_frames: usize,
    rng: &mut R,
) -> Trajectory {
    let speed = if params.sigma_v > 0.0 {
        let normal = Normal::new(params.mu_v, params.sigma_v).expect("finite speed parameters");
        loop {
            let v: f64 = normal.sample(rng);
            if v >= 0.0 {
                break v;
            }
        }
    } else {
        params.mu_v.max(0.0)
    };
    let lane = rng.random_range(0..N_LANES);
    let mut state = UeState { speed, along: 0.0, lane, segment: Segment::Main };
    let mut out = Vec::new();
    while out.len() < max_frames.max(1) && scenario.cell_index(state.segment, state.lane, state.along).is_some() {
        out.push(state);
        state = step_gauss_markov(&state, params, scenario, rng);
    }
    out
}

/// States of a trajectory followed by the exit state `n_states`.
pub fn sbpi_sequence(traj: &[UeState], scenario: &Scenario) -> Vec<usize> {
    let mut seq: Vec<usize> = traj
        .iter()
        .map(|s| scenario.state_at(s.segment, s.lane, s.along).expect("trajectory stays in coverage"))
        .collect();
    seq.push(scenario.n_states());
    seq
}

/// Row-stochastic `n x (n + 1)` matrix; the last column is the exit state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub n: usize,
    /// Row-major probabilities.
    pub p: Vec<f64>,
}

impl TransitionModel {
    pub fn new(n: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != n * (n + 1) {
            return Err(Error::DimensionMismatch { expected: n * (n + 1), got: p.len() });
        }
        let m = Self { n, p };
        for s in 0..n {
            let row = m.row(s);
            if row.iter().any(|&x| !(x >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("row {s} is not a probability vector")));
            }
        }
        Ok(m)
    }

    /// Uniform over all `n + 1` successors.
    pub fn uniform(n: usize) -> Self {
        Self { n, p: vec![1.0 / (n + 1) as f64; n * (n + 1)] }
    }

    pub fn exit(&self) -> usize {
        self.n
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.p[s * (self.n + 1)..(s + 1) * (self.n + 1)]
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.p[from * (self.n + 1) + to]
    }

    pub fn exit_prob(&self, s: usize) -> f64 {
        self.prob(s, self.n)
    }

    /// Builds from an `n x n` core and per-state exit probabilities; each core
    /// row is rescaled to carry `1 - exit[s]`.
    pub fn from_core(core: &[f64], exit: &[f64]) -> Result<Self> {
        let n = exit.len();
        if core.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, got: core.len() });
        }
        let mut p = Vec::with_capacity(n * (n + 1));
        for s in 0..n {
            let row = &core[s * n..(s + 1) * n];
            let total: f64 = row.iter().sum();
            let e = exit[s].clamp(0.0, 1.0);
            if total > 0.0 {
                p.extend(row.iter().map(|x| (1.0 - e) * x / total));
            } else {
                p.extend(std::iter::repeat_n((1.0 - e) / n as f64, n));
            }
            p.push(e);
        }
        Self::new(n, p)
    }

    /// Draws the successor of `s`.
    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = self.row(s);
        let mut acc = 0.0;
        for (j, &x) in row.iter().enumerate() {
            acc += x;
            if u < acc {
                return j;
            }
        }
        row.iter().rposition(|&x| x > 0.0).unwrap_or(self.n)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.n).map(|j| format!("s{j}")).chain(std::iter::once("exit".into())).collect();
        writeln!(w, "from,{}", header.join(","))?;
        for s in 0..self.n {
            let row: Vec<String> = self.row(s).iter().map(|x| format!("{x:.12e}")).collect();
            writeln!(w, "s{s},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Mergeable transition counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCounts {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl TransitionCounts {
    pub fn new(n: usize) -> Self {
        Self { n, counts: vec![0; n * (n + 1)] }
    }

    /// Adds consecutive pairs of a sequence whose exit state is `n`.
    pub fn add_sequence(&mut self, seq: &[usize]) {
        for w in seq.windows(2) {
            if w[0] < self.n {
                self.counts[w[0] * (self.n + 1) + w[1]] += 1;
            }
        }
    }

    pub fn merge(mut self, other: &Self) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    /// Row-normalized counts; unvisited rows are uniform.
    pub fn to_model(&self) -> TransitionModel {
        let w = self.n + 1;
        let mut p = Vec::with_capacity(self.n * w);
        for s in 0..self.n {
            let row = &self.counts[s * w..(s + 1) * w];
            let total: u64 = row.iter().sum();
            if total == 0 {
                p.extend(std::iter::repeat_n(1.0 / w as f64, w));
            } else {
                p.extend(row.iter().map(|&c| c as f64 / total as f64));
            }
        }
        TransitionModel { n: self.n, p }
    }
}

/// RNG for item `index` of a seeded batch.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Ground-truth model from `n_traj` simulated trajectories.
pub fn estimate_ground_truth(
    n_traj: usize,
    params: &MobilityParams,
    scenario: &Scenario,
    max_frames: usize,
    seed: u64,
) -> Result<TransitionModel> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("need at least one trajectory".into()));
    }
    params.validate()?;
    let n = scenario.n_states();
    let counts = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let traj = generate_trajectory(params, scenario, max_frames, &mut rng);
            let mut c = TransitionCounts::new(n);
            c.add_sequence(&sbpi_sequence(&traj, scenario));
            c
        })
        .reduce(|| TransitionCounts::new(n), |a, b| a.merge(&b));
    Ok(counts.to_model())
}

/// Trajectory rows `traj,frame,segment,lane,along,speed,sbpi`.
pub fn write_trajectories_csv<W: Write>(trajs: &[Trajectory], scenario: &Scenario, mut w: W) -> Result<()> {
    writeln!(w, "traj,frame,segment,lane,along,speed,sbpi")?;
    for (i, t) in trajs.iter().enumerate() {
        for (f, s) in t.iter().enumerate() {
            let cell = scenario.cell_index(s.segment, s.lane, s.along).expect("in coverage");
            let seg = match s.segment {
                Segment::Main => "main",
                Segment::Stem => "stem",
            };
            writeln!(
                w,
                "{i},{f},{seg},{},{:.6},{:.6},{}",
                s.lane,
                s.along,
                s.speed,
                scenario.sector_map.sbpi_of_cell[cell].0
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioConfig;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn highway() -> Scenario {
        Scenario::build(ScenarioConfig::highway()).unwrap()
    }

    #[test]
    fn pure_memory_keeps_speed() {
        let sc = highway();
        let p = MobilityParams { gamma_v: 1.0, ..MobilityParams::default() };
        let mut rng = stream_rng(1, 0);
        let s0 = UeState { speed: 17.25, along: 1.0, lane: 0, segment: Segment::Main };
        let s1 = step_gauss_markov(&s0, &p, &sc, &mut rng);
        assert_eq!(s1.speed, 17.25);
        assert_relative_eq!(s1.along, 1.0 + 0.02 * 17.25, epsilon = 1e-15);
    }

    #[test]
    fn memoryless_speed_mean() {
        let sc = highway();
        let p = MobilityParams { gamma_v: 0.0, ..MobilityParams::default() };
        let mut rng = stream_rng(2, 0);
        let mut s = UeState { speed: 0.0, along: 0.0, lane: 0, segment: Segment::Main };
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            s = step_gauss_markov(&s, &p, &sc, &mut rng);
            sum += s.speed;
            s.along = 0.0;
        }
        // clipping at zero shifts the mean by < 1e-3 at mu = 3 sigma
        assert!((sum / n as f64 - 30.0).abs() < 3.0 * 10.0 / (n as f64).sqrt() + 1e-2);
    }

    #[test]
    fn stationary_moments() {
        let sc = highway();
        let p = MobilityParams::default();
        let mut rng = stream_rng(3, 0);
        let mut s = UeState { speed: 30.0, along: 0.0, lane: 0, segment: Segment::Main };
        let n = 400_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            s = step_gauss_markov(&s, &p, &sc, &mut rng);
            s.along = 0.0;
            sum += s.speed;
            sq += s.speed * s.speed;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        // AR(1) with coefficient 0.2: the effective sample size is n (1-g)/(1+g)
        let ess = n as f64 * 0.8 / 1.2;
        assert!((mean - 30.0).abs() < 4.0 * 10.0 / ess.sqrt());
        assert!((var - 100.0).abs() < 2.0);
    }

    #[test]
    fn stationary_ue_constant_sequence() {
        let sc = highway();
        let p = MobilityParams { mu_v: 0.0, sigma_v: 0.0, lane_change_prob: 0.0, ..MobilityParams::default() };
        let mut rng = stream_rng(4, 0);
        let traj = generate_trajectory(&p, &sc, 50, &mut rng);
        assert_eq!(traj.len(), 50);
        let seq = sbpi_sequence(&traj, &sc);
        assert!(seq[..50].iter().all(|&s| s == seq[0]));
        assert_eq!(seq[50], sc.n_states());
    }

    #[test]
    fn one_frame_trajectory() {
        let sc = highway();
        let p = MobilityParams { mu_v: 1e4, sigma_v: 0.0, ..MobilityParams::default() };
        let traj = generate_trajectory(&p, &sc, 100, &mut stream_rng(5, 0));
        assert_eq!(traj.len(), 1);
        assert_eq!(sbpi_sequence(&traj, &sc).len(), 2);
    }

    #[test]
    fn count_ratio_example() {
        let mut c = TransitionCounts::new(2);
        c.add_sequence(&[0, 0, 1, 2]);
        let m = c.to_model();
        assert_eq!(m.row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(m.row(1), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cycle_gives_permutation_rows() {
        let mut c = TransitionCounts::new(3);
        for _ in 0..5 {
            c.add_sequence(&[0, 1, 2, 0, 1, 2, 0]);
        }
        let m = c.to_model();
        assert_eq!(m.prob(0, 1), 1.0);
        assert_eq!(m.prob(1, 2), 1.0);
        assert_eq!(m.prob(2, 0), 1.0);
    }

    #[test]
    fn unvisited_rows_uniform() {
        let m = TransitionCounts::new(3).to_model();
        assert!(m.p.iter().all(|&x| x == 0.25));
    }

    #[test]
    fn highway_ground_truth_is_stochastic_and_sticky() {
        let sc = highway();
        let m = estimate_ground_truth(2000, &MobilityParams::default(), &sc, 10_000, 7).unwrap();
        let mut self_mass = 0.0;
        for s in 0..m.n {
            assert!((m.row(s).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            self_mass += m.prob(s, s);
        }
        assert!(self_mass / m.n as f64 > 0.5);
        // coverage is always eventually left
        let mut reach = vec![false; m.n + 1];
        reach[m.n] = true;
        for _ in 0..=m.n {
            for s in 0..m.n {
                if (0..=m.n).any(|j| m.prob(s, j) > 0.0 && reach[j]) {
                    reach[s] = true;
                }
            }
        }
        assert!(reach.iter().all(|&r| r));
    }

    #[test]
    fn ground_truth_is_deterministic() {
        let sc = highway();
        let p = MobilityParams::default();
        let a = estimate_ground_truth(50, &p, &sc, 10_000, 11).unwrap();
        let b = estimate_ground_truth(50, &p, &sc, 10_000, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sojourn_matches_sector_length() {
        let sc = highway();
        let p = MobilityParams { lane_change_prob: 0.0, ..MobilityParams::default() };
        let n = sc.n_states();
        let res = sc.config.road.grid_resolution;
        // frames spent per visit, on lane 0 only
        let mut lane_len = vec![0.0; n];
        for (c, &s) in sc.cells.iter().zip(&sc.sector_map.state_of_cell) {
            if c.lane == 0 {
                lane_len[s] += res;
            }
        }
        let (mut frames, mut visits) = (vec![0usize; n], vec![0usize; n]);
        for i in 0..4000 {
            let traj = generate_trajectory(&p, &sc, 10_000, &mut stream_rng(13, i));
            if traj[0].lane != 0 {
                continue;
            }
            let seq = sbpi_sequence(&traj, &sc);
            let (first, last) = (seq[0], seq[seq.len() - 2]);
            for (k, w) in seq.windows(2).enumerate() {
                if w[0] != first && w[0] != last {
                    frames[w[0]] += 1;
                    if k == 0 || seq[k - 1] != w[0] {
                        visits[w[0]] += 1;
                    }
                }
            }
        }
        let mut checked = 0;
        for s in 0..n {
            if visits[s] > 200 && lane_len[s] >= 2.0 {
                let got = frames[s] as f64 / visits[s] as f64;
                let want = lane_len[s] / (p.mu_v * p.frame_duration);
                assert!((got - want).abs() / want < 0.1, "state {s}: {got} vs {want}");
                checked += 1;
            }
        }
        assert!(checked >= 5);
    }

    #[test]
    fn csv_exports() {
        let sc = highway();
        let trajs: Vec<Trajectory> =
            (0..3).map(|i| generate_trajectory(&MobilityParams::default(), &sc, 1000, &mut stream_rng(1, i))).collect();
        let mut buf = Vec::new();
        write_trajectories_csv(&trajs, &sc, &mut buf).unwrap();
        let rows = String::from_utf8(buf).unwrap().lines().count();
        assert_eq!(rows, 1 + trajs.iter().map(|t| t.len()).sum::<usize>());
        let mut buf = Vec::new();
        TransitionModel::uniform(2).write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn t_junction_turns_about_half() {
        let sc = Scenario::build(ScenarioConfig::t_shaped()).unwrap();
        let p = MobilityParams::default();
        let turned = (0..2000)
            .filter(|&i| {
                generate_trajectory(&p, &sc, 10_000, &mut stream_rng(17, i)).iter().any(|s| s.segment == Segment::Stem)
            })
            .count();
        assert!((turned as f64 / 2000.0 - 0.5).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn from_core_rows_sum_to_one(core in proptest::collection::vec(0.0f64..1.0, 9), exit in proptest::collection::vec(0.0f64..1.0, 3)) {
            let m = TransitionModel::from_core(&core, &exit).unwrap();
            for s in 0..3 {
                prop_assert!((m.row(s).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!((m.exit_prob(s) - exit[s]).abs() < 1e-15);
            }
        }

        #[test]
        fn positions_nondecreasing(seed in 0u64..200) {
            let sc = highway();
            let traj = generate_trajectory(&MobilityParams::default(), &sc, 10_000, &mut stream_rng(seed, 0));
            prop_assert!(!traj.is_empty());
            for w in traj.windows(2) {
                if w[0].segment == w[1].segment {
                    prop_assert!(w[1].along >= w[0].along);
                }
            }
        }
    }
}
