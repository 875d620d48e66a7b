//! Error-free specialization: value iteration over the support index of the
//! sorted prior, and the plain and error-robust executors built on it.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{FeedbackModel, FrameReward};
use crate::frame::{BtRound, FrameEnv, FrameOutcome};
use crate::pomdp::{belief_update, Belief};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MdpAction {
    Dc,
    /// Scan the next `n` most likely states.
    Bt(usize),
}

/// Support-indexed policy for one frame prior. `u` is 0-based: the support
/// is sorted positions `u..n_states`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpPolicy {
    pub version: u32,
    pub reward: FrameReward,
    pub sorted_prior: Vec<f64>,
    /// `sorted_prior[i] = prior[perm[i]]`.
    pub perm: Vec<usize>,
    /// `values[k][u]` for `k = 0..=K`, `u = 0..=n_states`.
    pub values: Vec<Vec<f64>>,
    /// `actions[k][u]` for `k < K`, `u < n_states`.
    pub actions: Vec<Vec<MdpAction>>,
}

pub const MDP_POLICY_VERSION: u32 = 1;

/// Prior masses at or below this are treated as outside the support.
pub const SUPPORT_FLOOR: f64 = 1e-12;

fn dc_value(k: usize, r: &FrameReward) -> f64 {
    if k >= r.k {
        0.0
    } else {
        r.se_ba * (1.0 - k as f64 / r.k as f64)
    }
}

/// Backward induction over `(k, u)`. Accepts any prior; it is sorted here
/// with ties broken by index.
pub fn mdp_value_iteration(prior: &Belief, reward: &FrameReward) -> Result<MdpPolicy> {
    let k_total = reward.k;
    if k_total == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let (mut b, perm) = prior.sorted();
    // clamp residue is not support
    for x in b.iter_mut().filter(|x| **x <= SUPPORT_FLOOR) {
        *x = 0.0;
    }
    let n = b.len();
    // tail[u] = sum of b[u..]
    let mut tail = vec![0.0; n + 1];
    for u in (0..n).rev() {
        tail[u] = tail[u + 1] + b[u];
    }
    let mut values = vec![vec![0.0; n + 1]; k_total + 1];
    let mut actions = vec![vec![MdpAction::Dc; n]; k_total];
    for k in (0..k_total).rev() {
        for u in 0..n {
            if tail[u] <= 0.0 {
                continue;
            }
            let mut best = dc_value(k, reward) * b[u] / tail[u];
            let mut act = MdpAction::Dc;
            let mut hit = 0.0;
            for m in 1..=(k_total - 1 - k).min(n - u) {
                hit += b[u + m - 1];
                let k2 = k + m + 1;
                let v = (hit * dc_value(k2, reward) + tail[u + m] * values[k2][u + m]) / tail[u];
                if v > best {
                    best = v;
                    act = MdpAction::Bt(m);
                }
            }
            values[k][u] = best;
            actions[k][u] = act;
        }
    }
    Ok(MdpPolicy { version: MDP_POLICY_VERSION, reward: *reward, sorted_prior: b, perm, values, actions })
}

impl MdpPolicy {
    pub fn n_states(&self) -> usize {
        self.perm.len()
    }

    /// Expected frame SE under error-free feedback.
    pub fn value(&self) -> f64 {
        self.values[0][0]
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let p: Self = serde_json::from_reader(r)?;
        if p.version != MDP_POLICY_VERSION {
            return Err(Error::Version { found: p.version, expected: MDP_POLICY_VERSION });
        }
        Ok(p)
    }
}

/// Runs the MDP policy assuming error-free feedback. Misses shrink the
/// support; a detection ends BT with DC on the detected state. If noise
/// empties the support, DC falls back to the most likely prior state and
/// the end belief resets to uniform.
pub fn execute_mdp<E: FrameEnv>(policy: &MdpPolicy, env: &mut E) -> Result<FrameOutcome> {
    let n = policy.n_states();
    let k_total = policy.reward.k;
    let mut k = 0;
    let mut u = 0;
    let mut rounds = Vec::new();
    while k < k_total {
        // misses emptied the support: impossible without errors, so forget it
        if u >= n || policy.sorted_prior[u] <= 0.0 {
            let s = policy.perm[0];
            return Ok(FrameOutcome { k_dc: Some(k), s_dc: Some(s), rounds, belief: Belief::uniform(n) });
        }
        match policy.actions[k][u] {
            MdpAction::Dc => {
                let s = policy.perm[u];
                return Ok(FrameOutcome { k_dc: Some(k), s_dc: Some(s), rounds, belief: truncated(policy, u) });
            }
            MdpAction::Bt(m) => {
                let set: Vec<usize> = policy.perm[u..u + m].to_vec();
                let y = env.scan(&set);
                k += m + 1;
                rounds.push(BtRound { set: set.clone(), y });
                match y {
                    Some(j) if set.contains(&j) => {
                        let belief = Belief::corner(n, j);
                        if k < k_total {
                            return Ok(FrameOutcome { k_dc: Some(k), s_dc: Some(j), rounds, belief });
                        }
                        return Ok(FrameOutcome { k_dc: None, s_dc: None, rounds, belief });
                    }
                    Some(_) => return Err(Error::InconsistentFeedback(y)),
                    None => u += m,
                }
            }
        }
    }
    Ok(FrameOutcome { k_dc: None, s_dc: None, rounds, belief: truncated(policy, u) })
}

fn truncated(policy: &MdpPolicy, u: usize) -> Belief {
    let n = policy.n_states();
    let mut w = vec![0.0; n];
    for i in u.min(n)..n {
        w[policy.perm[i]] = policy.sorted_prior[i];
    }
    Belief::from_weights(w).unwrap_or_else(|_| {
        let mut w = vec![0.0; n];
        for i in 0..n {
            w[policy.perm[i]] = policy.sorted_prior[i];
        }
        Belief::from_weights(w).expect("prior is normalized")
    })
}

/// MDP actions with a noisy belief: the BT size comes from the policy at
/// the current support index, the scanned states are the most likely under
/// the posterior (fewer previous scans first on ties, then prior rank), and
/// a detection triggers DC on it. If misses exhaust the support, DC goes to
/// the posterior argmax.
pub fn execute_er_mdp<E: FrameEnv>(policy: &MdpPolicy, env: &mut E, model: &FeedbackModel) -> Result<FrameOutcome> {
    let n = policy.n_states();
    let k_total = policy.reward.k;
    let mut rank = vec![0; n];
    for (i, &s) in policy.perm.iter().enumerate() {
        rank[s] = i;
    }
    let mut scans = vec![0usize; n];
    let mut prior = vec![0.0; n];
    for (i, &s) in policy.perm.iter().enumerate() {
        prior[s] = policy.sorted_prior[i];
    }
    let mut beta = Belief::new(prior)?;
    let mut k = 0;
    let mut u = 0;
    let mut rounds = Vec::new();
    while k < k_total {
        let order = {
            let p = beta.probs();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                p[b].partial_cmp(&p[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(scans[a].cmp(&scans[b]))
                    .then(rank[a].cmp(&rank[b]))
            });
            idx
        };
        if u >= n {
            return Ok(FrameOutcome { k_dc: Some(k), s_dc: Some(order[0]), rounds, belief: beta });
        }
        match policy.actions[k][u] {
            MdpAction::Dc => return Ok(FrameOutcome { k_dc: Some(k), s_dc: Some(order[0]), rounds, belief: beta }),
            MdpAction::Bt(m) => {
                let set: Vec<usize> = order[..m].to_vec();
                let y = env.scan(&set);
                k += m + 1;
                for &s in &set {
                    scans[s] += 1;
                }
                beta = belief_update(&beta, y, &set, model)?;
                rounds.push(BtRound { set, y });
                match y {
                    Some(j) if k < k_total => {
                        return Ok(FrameOutcome { k_dc: Some(k), s_dc: Some(j), rounds, belief: beta })
                    }
                    Some(_) => return Ok(FrameOutcome { k_dc: None, s_dc: None, rounds, belief: beta }),
                    None => u += m,
                }
            }
        }
    }
    Ok(FrameOutcome { k_dc: None, s_dc: None, rounds, belief: beta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::BinarySnrParams;
    use crate::frame::FnEnv;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const R: FrameReward = FrameReward { se_ba: 3.0, k: 10 };

    fn random_prior(n: usize, rng: &mut ChaCha8Rng) -> Belief {
        Belief::from_weights((0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn singleton_support_is_dc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = mdp_value_iteration(&random_prior(5, &mut rng), &R).unwrap();
        for k in 0..R.k {
            assert_eq!(p.actions[k][4], MdpAction::Dc);
            assert_relative_eq!(p.values[k][4], 3.0 * (1.0 - k as f64 / 10.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn values_decrease_with_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = mdp_value_iteration(&random_prior(6, &mut rng), &R).unwrap();
            for k in 0..R.k {
                for u in 0..6 {
                    assert!(p.values[k][u] >= p.values[k + 1][u] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn corner_prior_dcs_immediately() {
        let p = mdp_value_iteration(&Belief::corner(4, 2), &R).unwrap();
        let mut env = FnEnv(|_: &[usize]| panic!("no scan"));
        let out = execute_mdp(&p, &mut env).unwrap();
        assert_eq!((out.k_dc, out.s_dc), (Some(0), Some(2)));
    }

    #[test]
    fn uniform_prior_always_aligns_error_free() {
        let r = FrameReward { se_ba: 3.0, k: 40 };
        let p = mdp_value_iteration(&Belief::uniform(4), &r).unwrap();
        for s in 0..4 {
            let mut env = FnEnv(|set: &[usize]| set.contains(&s).then_some(s));
            let out = execute_mdp(&p, &mut env).unwrap();
            assert_eq!(out.s_dc, Some(s));
            assert!(out.spectral_efficiency(s, &r) > 0.0);
        }
    }

    #[test]
    fn realized_value_matches_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prior = random_prior(6, &mut rng);
        let p = mdp_value_iteration(&prior, &R).unwrap();
        let trials = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..trials {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let s = prior.probs().iter().position(|&x| {
                acc += x;
                u < acc
            }).unwrap_or(5);
            let mut env = FnEnv(|set: &[usize]| set.contains(&s).then_some(s));
            let se = execute_mdp(&p, &mut env).unwrap().spectral_efficiency(s, &R);
            sum += se;
            sq += se * se;
        }
        let mean = sum / trials as f64;
        let sd = ((sq / trials as f64 - mean * mean) / trials as f64).sqrt();
        assert!((mean - p.value()).abs() < 4.0 * sd, "{mean} vs {}", p.value());
    }

    #[test]
    fn er_mdp_matches_mdp_when_error_free() {
        let params = BinarySnrParams::from_db(20.0, -10.0, 32.0).unwrap();
        let model = FeedbackModel::error_free(params, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let prior = random_prior(6, &mut rng);
            let p = mdp_value_iteration(&prior, &R).unwrap();
            let s = rng.random_range(0..6);
            let mut e1 = FnEnv(|set: &[usize]| set.contains(&s).then_some(s));
            let mut e2 = FnEnv(|set: &[usize]| set.contains(&s).then_some(s));
            let a = execute_mdp(&p, &mut e1).unwrap();
            let b = execute_er_mdp(&p, &mut e2, &model).unwrap();
            assert_eq!(a.rounds, b.rounds);
            assert_eq!((a.k_dc, a.s_dc), (b.k_dc, b.s_dc));
        }
    }

    #[test]
    fn inconsistent_feedback_rejected() {
        let p = mdp_value_iteration(&Belief::uniform(4), &FrameReward { se_ba: 3.0, k: 40 }).unwrap();
        let mut env = FnEnv(|set: &[usize]| Some((0..4).find(|s| !set.contains(s)).unwrap()));
        assert!(matches!(execute_mdp(&p, &mut env), Err(Error::InconsistentFeedback(_))));
    }

    #[test]
    fn json_roundtrip() {
        let p = mdp_value_iteration(&Belief::uniform(3), &R).unwrap();
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        assert_eq!(MdpPolicy::load(&buf[..]).unwrap(), p);
    }
}
