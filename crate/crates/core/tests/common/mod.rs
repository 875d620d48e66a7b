//! Independent oracles shared by the integration tests. None of these use
//! the solvers under test; they enumerate everything exhaustively.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use beamtrack::feedback::{FeedbackModel, FrameReward, Observation};
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn dc_reward(k: usize, r: &FrameReward) -> f64 {
    if k >= r.k {
        0.0
    } else {
        r.se_ba * (1.0 - k as f64 / r.k as f64)
    }
}

/// Nonempty subsets of `0..n`, as sorted index lists.
pub fn subsets(n: usize) -> Vec<Vec<usize>> {
    (1u32..(1 << n)).map(|m| (0..n).filter(|&i| m >> i & 1 == 1).collect()).collect()
}

fn outcomes(set: &[usize]) -> Vec<Observation> {
    set.iter().map(|&j| Some(j)).chain(std::iter::once(None)).collect()
}

/// Drops exact duplicates and pointwise-dominated vectors.
fn prune(mut v: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    v.sort_by(|a, b| b.iter().sum::<f64>().partial_cmp(&a.iter().sum::<f64>()).unwrap());
    let mut out: Vec<Vec<f64>> = Vec::new();
    for a in v {
        let dominated = out.iter().any(|b| a.iter().zip(b).all(|(x, y)| x <= y));
        if !dominated {
            out.push(a);
        }
    }
    out
}

/// Full hyperplane sets `Q_k`, `k = 0..=K`, by exact backups over every BT
/// set and every assignment of successor vectors to observations.
pub fn exact_alpha_sets(n: usize, model: &FeedbackModel, r: &FrameReward) -> Vec<Vec<Vec<f64>>> {
    let k_total = r.k;
    let mut q: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k_total + 1];
    q[k_total] = vec![vec![0.0; n]];
    for k in (0..k_total).rev() {
        let mut cand = Vec::new();
        for s in 0..n {
            let mut a = vec![0.0; n];
            a[s] = dc_reward(k, r);
            cand.push(a);
        }
        for set in subsets(n) {
            if set.len() + 1 + k > k_total || set.len() > k_total - 1 - k {
                continue;
            }
            let next = &q[k + set.len() + 1];
            let obs = outcomes(&set);
            // every map from observations to successor vectors
            let total = next.len().pow(obs.len() as u32);
            for code in 0..total {
                let mut c = code;
                let mut a = vec![0.0; n];
                for y in &obs {
                    let succ = &next[c % next.len()];
                    c /= next.len();
                    for s in 0..n {
                        a[s] += model.prob(*y, s, &set) * succ[s];
                    }
                }
                cand.push(a);
            }
        }
        q[k] = prune(cand);
    }
    q
}

pub fn alpha_value(q: &[Vec<f64>], b: &[f64]) -> f64 {
    q.iter().map(|a| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max)
}

/// Exact finite-horizon POMDP value by recursion over the belief tree.
pub fn belief_tree_value(k: usize, b: &[f64], model: &FeedbackModel, r: &FrameReward) -> f64 {
    let n = b.len();
    if k >= r.k {
        return 0.0;
    }
    let mut best = dc_reward(k, r) * b.iter().cloned().fold(0.0, f64::max);
    for set in subsets(n) {
        if set.len() > r.k - 1 - k {
            continue;
        }
        let mut v = 0.0;
        for y in outcomes(&set) {
            let joint: Vec<f64> = (0..n).map(|s| b[s] * model.prob(y, s, &set)).collect();
            let py: f64 = joint.iter().sum();
            if py > 0.0 {
                let post: Vec<f64> = joint.iter().map(|x| x / py).collect();
                v += py * belief_tree_value(k + set.len() + 1, &post, model, r);
            }
        }
        best = best.max(v);
    }
    best
}

/// Error-free frame VI over every subset of the remaining support. The
/// state is `(k, U)` with `U` a bitmask; `prior` need not be sorted.
pub struct SubsetVi {
    pub prior: Vec<f64>,
    pub reward: FrameReward,
    memo: HashMap<(usize, u32), (f64, Vec<Vec<usize>>)>,
}

impl SubsetVi {
    pub fn new(prior: Vec<f64>, reward: FrameReward) -> Self {
        Self { prior, reward, memo: HashMap::new() }
    }

    fn mass(&self, u: u32) -> f64 {
        (0..self.prior.len()).filter(|&i| u >> i & 1 == 1).map(|i| self.prior[i]).sum()
    }

    /// Value of scanning `set` at `(k, u)` and acting optimally afterwards.
    pub fn bt_value(&mut self, k: usize, u: u32, set: &[usize]) -> f64 {
        let k2 = k + set.len() + 1;
        let mask: u32 = set.iter().map(|&i| 1u32 << i).sum();
        let hit: f64 = set.iter().map(|&i| self.prior[i]).sum();
        let rest = u & !mask;
        (hit * dc_reward(k2, &self.reward) + self.mass(rest) * self.solve(k2, rest).0) / self.mass(u)
    }

    /// Value and every BT set within `1e-12` of optimal when BT strictly
    /// beats DC (empty when DC is optimal).
    pub fn solve(&mut self, k: usize, u: u32) -> (f64, Vec<Vec<usize>>) {
        if let Some(v) = self.memo.get(&(k, u)) {
            return v.clone();
        }
        let total = self.mass(u);
        let out = if k >= self.reward.k || total <= 0.0 {
            (0.0, vec![])
        } else {
            let n = self.prior.len();
            let top = (0..n).filter(|&i| u >> i & 1 == 1).map(|i| self.prior[i]).fold(0.0, f64::max);
            let dc = dc_reward(k, &self.reward) * top / total;
            let mut cands: Vec<(f64, Vec<usize>)> = Vec::new();
            let members: Vec<usize> = (0..n).filter(|&i| u >> i & 1 == 1).collect();
            for m in 1u32..(1 << members.len()) {
                let set: Vec<usize> = (0..members.len()).filter(|&i| m >> i & 1 == 1).map(|i| members[i]).collect();
                if set.len() > self.reward.k - 1 - k {
                    continue;
                }
                let v = self.bt_value(k, u, &set);
                cands.push((v, set));
            }
            let bt = cands.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
            if bt > dc + 1e-12 {
                (bt, cands.into_iter().filter(|c| c.0 >= bt - 1e-12).map(|c| c.1).collect())
            } else {
                (dc.max(bt), vec![])
            }
        };
        self.memo.insert((k, u), out.clone());
        out
    }
}

/// Pearson chi-square goodness-of-fit p-value; zero-probability cells must
/// be empty and are skipped.
pub fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0;
    for (&c, &p) in counts.iter().zip(probs) {
        if p <= 0.0 {
            assert_eq!(c, 0, "event of probability zero observed");
            continue;
        }
        let e = p * n as f64;
        stat += (c as f64 - e).powi(2) / e;
        cells += 1;
    }
    if cells < 2 {
        return 1.0;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

/// Directory for acceptance artifacts.
pub fn artifact_dir(id: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(id);
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// Writes the manifest of a criterion that does not go through the harness.
pub fn emit_manifest(id: &str, params: serde_json::Value) -> PathBuf {
    let m = serde_json::json!({
        "tool": "beamtrack",
        "version": format!("v{}", env!("CARGO_PKG_VERSION")),
        "criterion": id,
        "params": params,
    });
    let p = artifact_dir(id).join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&m).unwrap()).unwrap();
    p
}

/// Prints the verdict line, then fails the test if it did not pass. Writes
/// through the stdout handle so the line survives output capture.
pub fn verdict(id: &str, name: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let line = format!("{id} {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(pass, "{id} {name} failed: {detail}");
}
