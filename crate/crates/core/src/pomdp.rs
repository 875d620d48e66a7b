//! Beliefs over SBPIs, point-based value iteration in the sorted-belief
//! frame, and online execution of the resulting policy.
//!
//! Hyperplanes and beliefs are stored sorted non-increasing. A hyperplane's
//! action refers to positions in that sorted frame; at execution the belief
//! is sorted and positions are mapped back through the sorting permutation.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{FeedbackModel, FrameReward, Observation};
use crate::frame::{BtRound, FrameEnv, FrameOutcome};
use crate::mobility::TransitionModel;

const CLAMP: f64 = 1e-15;

/// Probability vector over SBPIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("belief must be a probability vector".into()));
        }
        Ok(Self(probs))
    }

    /// Normalizes nonnegative weights; fails on an all-zero vector.
    pub fn from_weights(mut w: Vec<f64>) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::ZeroLikelihood);
        }
        for x in &mut w {
            *x /= total;
        }
        for x in &mut w {
            if *x < CLAMP {
                *x = 0.0;
            }
        }
        let total: f64 = w.iter().sum();
        for x in &mut w {
            *x /= total;
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn corner(n: usize, s: usize) -> Self {
        let mut v = vec![0.0; n];
        v[s] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most likely state, lowest index on ties.
    pub fn argmax(&self) -> usize {
        sort_permutation(&self.0)[0]
    }

    /// `(sorted, perm)` with `sorted[i] = self[perm[i]]`, non-increasing.
    pub fn sorted(&self) -> (Vec<f64>, Vec<usize>) {
        let perm = sort_permutation(&self.0);
        (perm.iter().map(|&i| self.0[i]).collect(), perm)
    }
}

/// Indices ordering `v` non-increasing; ties keep index order.
pub fn sort_permutation(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

fn sort_desc(v: &mut [f64]) {
    v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
}

pub fn belief_update(beta: &Belief, y: Observation, set: &[usize], model: &FeedbackModel) -> Result<Belief> {
    let lik = model.likelihoods(y, set, beta.len());
    Belief::from_weights(beta.0.iter().zip(&lik).map(|(b, l)| b * l).collect())
}

/// Next-frame prior `sum_s p(s'|s) beta(s)` over non-exit states, renormalized.
/// Falls back to uniform if every state exits with certainty.
pub fn prior_propagate(beta: &Belief, model: &TransitionModel) -> Belief {
    let n = model.n;
    let mut w = vec![0.0; n];
    for (s, &b) in beta.0.iter().enumerate() {
        if b > 0.0 {
            for (j, &p) in model.row(s)[..n].iter().enumerate() {
                w[j] += b * p;
            }
        }
    }
    Belief::from_weights(w).unwrap_or_else(|_| Belief::uniform(n))
}

/// Belief-set composition for [`sample_belief_set`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSetConfig {
    pub size: usize,
    /// Fraction of random draws taken from the sparse Dirichlet.
    pub sparse_fraction: f64,
    /// Concentration of the sparse Dirichlet, times `n_states`.
    pub sparse_concentration: f64,
}

impl Default for BeliefSetConfig {
    fn default() -> Self {
        Self { size: 200, sparse_fraction: 0.5, sparse_concentration: 1.0 }
    }
}

fn dirichlet<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let v: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
        let t: f64 = v.iter().sum();
        if t > 0.0 {
            return v.into_iter().map(|x| x / t).collect();
        }
    }
}

/// Distinct sorted beliefs: the top-`m` uniform shapes for `m = 1..=n`
/// (corner through uniform), then the sorted `extra` points, then sorted
/// Dirichlet draws, flat (concentration 1) or sparse.
pub fn sample_belief_set<R: Rng + ?Sized>(
    n_states: usize,
    cfg: &BeliefSetConfig,
    extra: &[Vec<f64>],
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cfg.size.max(n_states));
    let mut seen = HashSet::new();
    let mut push = |mut v: Vec<f64>, out: &mut Vec<Vec<f64>>| {
        sort_desc(&mut v);
        let key: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
        if seen.insert(key) {
            out.push(v);
        }
    };
    for m in 1..=n_states {
        let mut v = vec![0.0; n_states];
        v[..m].fill(1.0 / m as f64);
        push(v, &mut out);
    }
    for e in extra {
        if out.len() >= cfg.size {
            break;
        }
        if let Ok(b) = Belief::from_weights(e.clone()) {
            push(b.0, &mut out);
        }
    }
    let sparse = cfg.sparse_concentration / n_states as f64;
    let mut attempts = 0;
    while out.len() < cfg.size && attempts < 100 * cfg.size {
        attempts += 1;
        let alpha = if rng.random::<f64>() < cfg.sparse_fraction { sparse } else { 1.0 };
        let v = dirichlet(n_states, alpha, rng);
        push(v, &mut out);
    }
    out
}

/// Action in a hyperplane's sorted frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Dc(usize),
    Bt(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    /// Sorted non-increasing.
    pub alpha: Vec<f64>,
    pub action: Action,
    /// For BT: the successor hyperplane id per observation (set order, then
    /// the miss outcome) at slot `k + |set| + 1`, found at the backup belief.
    pub successors: Vec<usize>,
}

/// Per-slot sorted hyperplane sets for slots `0..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbviPolicy {
    pub version: u32,
    pub n_states: usize,
    pub reward: FrameReward,
    pub slots: Vec<Vec<Hyperplane>>,
}

pub const POLICY_VERSION: u32 = 1;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index and value of the hyperplane maximizing `<b, alpha>`; first wins ties.
fn best_hyperplane(set: &[Hyperplane], b: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, h) in set.iter().enumerate() {
        let v = dot(b, &h.alpha);
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

impl PbviPolicy {
    pub fn horizon(&self) -> usize {
        self.slots.len() - 1
    }

    /// Value of a (not necessarily sorted) belief at slot `k`.
    pub fn value(&self, k: usize, beta: &[f64]) -> f64 {
        let mut b = beta.to_vec();
        sort_desc(&mut b);
        best_hyperplane(&self.slots[k], &b).1
    }

    /// Action for `beta` at slot `k`, in `beta`'s own indexing.
    pub fn action(&self, k: usize, beta: &Belief) -> Action {
        let (b, perm) = beta.sorted();
        let (i, _) = best_hyperplane(&self.slots[k], &b);
        match &self.slots[k][i].action {
            Action::Dc(j) => Action::Dc(perm[*j]),
            Action::Bt(set) => Action::Bt(set.iter().map(|&j| perm[j]).collect()),
        }
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let p: Self = serde_json::from_reader(r)?;
        if p.version != POLICY_VERSION {
            return Err(Error::Version { found: p.version, expected: POLICY_VERSION });
        }
        Ok(p)
    }
}

fn backup(
    beta: &[f64],
    k: usize,
    k_total: usize,
    next: &[Vec<Hyperplane>],
    model: &FeedbackModel,
    reward: &FrameReward,
) -> Hyperplane {
    let n = beta.len();
    let dc_scale = reward.se_ba * (1.0 - k as f64 / k_total as f64);
    let mut best_alpha = vec![0.0; n];
    best_alpha[0] = dc_scale;
    let mut best_value = dc_scale * beta[0];
    let mut best_action = Action::Dc(0);
    let mut best_successors = Vec::new();

    let max_n = (k_total - 1 - k).min(n).min(model.max_size());
    let mut post = vec![0.0; n];
    for size in 1..=max_n {
        let set: Vec<usize> = (0..size).collect();
        let q = &next[size];
        let mut alpha = vec![0.0; n];
        let mut succ = Vec::with_capacity(size + 1);
        let outcomes = (0..size).map(Some).chain(std::iter::once(None));
        for y in outcomes {
            let lik = model.likelihoods(y, &set, n);
            for s in 0..n {
                post[s] = beta[s] * lik[s];
            }
            if post.iter().sum::<f64>() <= 0.0 {
                post.copy_from_slice(&lik);
            }
            if post.iter().all(|&x| x == 0.0) {
                // impossible under every state; contributes nothing
                succ.push(0);
                continue;
            }
            let perm = sort_permutation(&post);
            let sorted: Vec<f64> = perm.iter().map(|&i| post[i]).collect();
            let (id, _) = best_hyperplane(q, &sorted);
            succ.push(id);
            let a = &q[id].alpha;
            for (i, &s) in perm.iter().enumerate() {
                alpha[s] += lik[s] * a[i];
            }
        }
        let v = dot(beta, &alpha);
        if v > best_value {
            best_value = v;
            let perm = sort_permutation(&alpha);
            let mut pos = vec![0; n];
            for (i, &s) in perm.iter().enumerate() {
                pos[s] = i;
            }
            let mut mapped: Vec<(usize, usize)> = set.iter().map(|&s| (pos[s], succ[s])).collect();
            mapped.sort_unstable();
            best_alpha = perm.iter().map(|&s| alpha[s]).collect();
            best_action = Action::Bt(mapped.iter().map(|m| m.0).collect());
            best_successors = mapped.iter().map(|m| m.1).chain(std::iter::once(succ[size])).collect();
        }
    }
    Hyperplane { alpha: best_alpha, action: best_action, successors: best_successors }
}

/// Point-based value iteration over sorted beliefs with top-n BT sets.
pub fn pbvi_optimize(
    beliefs: &[Vec<f64>],
    model: &FeedbackModel,
    reward: &FrameReward,
) -> Result<PbviPolicy> {
    let k_total = reward.k;
    if k_total == 0 || beliefs.is_empty() {
        return Err(Error::InvalidArgument("need K >= 1 and a nonempty belief set".into()));
    }
    let n = beliefs[0].len();
    for b in beliefs {
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: b.len() });
        }
        if b.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("belief set entries must be sorted".into()));
        }
    }
    let zero = Hyperplane { alpha: vec![0.0; n], action: Action::Dc(0), successors: vec![] };
    let mut slots: Vec<Vec<Hyperplane>> = vec![Vec::new(); k_total + 1];
    slots[k_total].push(zero);
    for k in (0..k_total).rev() {
        let next = &slots[k + 1..];
        let backups: Vec<Hyperplane> = beliefs
            .par_iter()
            .map(|b| backup(b, k, k_total, next, model, reward))
            .collect();
        let mut seen = HashSet::new();
        let set: Vec<Hyperplane> = backups
            .into_iter()
            .filter(|h| seen.insert(h.alpha.iter().map(|x| x.to_bits()).collect::<Vec<u64>>()))
            .collect();
        slots[k] = set;
    }
    Ok(PbviPolicy { version: POLICY_VERSION, n_states: n, reward: *reward, slots })
}

/// Runs one frame of the PBVI policy from `prior`.
pub fn execute_pbvi<E: FrameEnv>(
    policy: &PbviPolicy,
    prior: &Belief,
    env: &mut E,
    model: &FeedbackModel,
) -> Result<FrameOutcome> {
    let k_total = policy.horizon();
    let mut beta = prior.clone();
    let mut k = 0;
    let mut rounds = Vec::new();
    while k < k_total {
        match policy.action(k, &beta) {
            Action::Dc(s) => return Ok(FrameOutcome { k_dc: Some(k), s_dc: Some(s), rounds, belief: beta }),
            Action::Bt(set) => {
                let y = env.scan(&set);
                beta = belief_update(&beta, y, &set, model)?;
                k += set.len() + 1;
                rounds.push(BtRound { set, y });
            }
        }
    }
    Ok(FrameOutcome { k_dc: None, s_dc: None, rounds, belief: beta })
}
