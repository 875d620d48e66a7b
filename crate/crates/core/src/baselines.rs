//! Reference policies: exhaustive scan of the active SBPIs, single-shot BT
//! of fixed duration, and the genie-aided bound.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{FeedbackModel, FrameReward};
use crate::frame::{BtRound, FnEnv, FrameEnv, FrameOutcome};
use crate::mdp::{execute_mdp, mdp_value_iteration};
use crate::pomdp::{belief_update, Belief};

/// Scans every state once, then DCs on the detection or, on a miss, on a
/// uniformly random state.
pub fn execute_exos<E: FrameEnv, R: Rng + ?Sized>(
    n_states: usize,
    reward: &FrameReward,
    env: &mut E,
    model: &FeedbackModel,
    rng: &mut R,
) -> Result<FrameOutcome> {
    if n_states + 1 >= reward.k {
        return Err(Error::InvalidArgument(format!("EXOS needs K > {}", n_states + 1)));
    }
    let set: Vec<usize> = (0..n_states).collect();
    let y = env.scan(&set);
    let belief = belief_update(&Belief::uniform(n_states), y, &set, model).unwrap_or_else(|_| Belief::uniform(n_states));
    let s = y.unwrap_or_else(|| rng.random_range(0..n_states));
    Ok(FrameOutcome { k_dc: Some(n_states + 1), s_dc: Some(s), rounds: vec![BtRound { set, y }], belief })
}

/// Closed-form mean EXOS frame SE under a calibrated model.
pub fn exos_expected_se(n_states: usize, reward: &FrameReward, model: &FeedbackModel) -> f64 {
    let e = model.entry(n_states);
    reward.se_ba * (1.0 - (n_states + 1) as f64 / reward.k as f64) * (e.p_corr + e.p_md / n_states as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StssConfig {
    /// Number of states scanned in the single BT round; 0 means DC at once.
    pub bt_duration: usize,
}

impl StssConfig {
    pub fn validate(&self, reward: &FrameReward) -> Result<()> {
        if self.bt_duration + 2 > reward.k {
            return Err(Error::InvalidArgument(format!("STSS duration must be at most K - 2, got {}", self.bt_duration)));
        }
        Ok(())
    }
}

/// Probability that DC on the posterior argmax after scanning `set` is correct.
pub fn single_shot_success(prior: &Belief, set: &[usize], model: &FeedbackModel) -> f64 {
    let n = prior.len();
    let outcomes = set.iter().map(|&j| Some(j)).chain(std::iter::once(None));
    outcomes
        .map(|y| {
            let lik = model.likelihoods(y, set, n);
            prior.probs().iter().zip(&lik).map(|(b, l)| b * l).fold(0.0, f64::max)
        })
        .sum()
}

/// Best size-`n` set among windows of consecutive prior ranks, with its
/// success probability. Ties keep the earliest window.
pub fn optimize_stss(prior: &Belief, model: &FeedbackModel, n: usize) -> (Vec<usize>, f64) {
    let (_, perm) = prior.sorted();
    if n == 0 {
        return (Vec::new(), prior.probs()[perm[0]]);
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for start in 0..=perm.len() - n {
        let set = perm[start..start + n].to_vec();
        let p = single_shot_success(prior, &set, model);
        if p > best.1 {
            best = (set, p);
        }
    }
    best
}

pub fn execute_stss<E: FrameEnv>(
    cfg: &StssConfig,
    prior: &Belief,
    env: &mut E,
    model: &FeedbackModel,
) -> Result<FrameOutcome> {
    let n = cfg.bt_duration.min(prior.len());
    if n == 0 {
        return Ok(FrameOutcome { k_dc: Some(0), s_dc: Some(prior.argmax()), rounds: vec![], belief: prior.clone() });
    }
    let (set, _) = optimize_stss(prior, model, n);
    let y = env.scan(&set);
    let belief = belief_update(prior, y, &set, model)?;
    Ok(FrameOutcome { k_dc: Some(n + 1), s_dc: Some(belief.argmax()), rounds: vec![BtRound { set, y }], belief })
}

/// Genie-aided frame: the optimal error-free policy for `prior` with exact
/// feedback about `s_true`. The prior must come from the true model.
pub fn execute_genie(prior: &Belief, reward: &FrameReward, s_true: usize) -> Result<FrameOutcome> {
    let policy = mdp_value_iteration(prior, reward)?;
    execute_mdp(&policy, &mut FnEnv(|set: &[usize]| set.contains(&s_true).then_some(s_true)))
}
