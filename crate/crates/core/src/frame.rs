//! Per-frame interface shared by every beam-training executor.

use serde::{Deserialize, Serialize};

use crate::feedback::{frame_spectral_efficiency, FrameReward, Observation};
use crate::pomdp::Belief;

/// Source of BT feedback for the current frame.
pub trait FrameEnv {
    /// Scans `set` (state indices) and returns the feedback signal.
    fn scan(&mut self, set: &[usize]) -> Observation;
}

/// One BT action and its feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BtRound {
    pub set: Vec<usize>,
    pub y: Observation,
}

/// What an executor did in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutcome {
    /// Slot at which data communication started; `None` if the frame ran out.
    pub k_dc: Option<usize>,
    pub s_dc: Option<usize>,
    pub rounds: Vec<BtRound>,
    /// Belief at the end of the frame, used to seed the next prior.
    pub belief: Belief,
}

impl FrameOutcome {
    /// Slots spent on beam training.
    pub fn bt_slots(&self) -> usize {
        self.rounds.iter().map(|r| r.set.len() + 1).sum()
    }

    /// Expected frame spectral efficiency for the true state `s_true`.
    pub fn spectral_efficiency(&self, s_true: usize, reward: &FrameReward) -> f64 {
        match (self.k_dc, self.s_dc) {
            (Some(k), Some(s)) => frame_spectral_efficiency(k, s, s_true, reward),
            _ => 0.0,
        }
    }
}

/// Environment driven by a fixed true state and a feedback closure.
pub struct FnEnv<F: FnMut(&[usize]) -> Observation>(pub F);

impl<F: FnMut(&[usize]) -> Observation> FrameEnv for FnEnv<F> {
    fn scan(&mut self, set: &[usize]) -> Observation {
        (self.0)(set)
    }
}
