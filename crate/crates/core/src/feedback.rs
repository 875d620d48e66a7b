//! Beam-training feedback model and the frame reward.
//!
//! Under alignment the matched-filter statistic is exponential with mean
//! `a = 1 + SNR_BA * L_sy`, under misalignment with mean
//! `b = 1 + rho * SNR_BA * L_sy`. The UE reports the argmax of the scanned
//! statistics if it exceeds `eta`, otherwise 0 (`None`).

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A feedback signal: the detected state, or `None` for misalignment.
pub type Observation = Option<usize>;

pub const DEFAULT_L_SY: f64 = 32.0;

/// Parameters of the binary-SNR abstraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinarySnrParams {
    pub snr_ba: f64,
    pub rho: f64,
    pub l_sy: f64,
    /// Normalized rate `R / W` in bits/s/Hz.
    pub rate: f64,
    /// `P_succ * R / W`.
    pub se_ba: f64,
}

impl BinarySnrParams {
    /// Uses the rate that maximizes `SE_BA`.
    pub fn new(snr_ba: f64, rho: f64, l_sy: f64) -> Result<Self> {
        Self::with_rate(snr_ba, rho, l_sy, optimal_rate(snr_ba))
    }

    pub fn with_rate(snr_ba: f64, rho: f64, l_sy: f64, rate: f64) -> Result<Self> {
        if !(snr_ba > 0.0) || !(rho > 0.0 && rho < 1.0) || !(l_sy > 0.0) || !(rate >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need snr_ba > 0, 0 < rho < 1, l_sy > 0, rate >= 0; got {snr_ba}, {rho}, {l_sy}, {rate}"
            )));
        }
        let se_ba = success_probability(rate, snr_ba) * rate;
        Ok(Self { snr_ba, rho, l_sy, rate, se_ba })
    }

    pub fn from_db(snr_ba_db: f64, rho_db: f64, l_sy: f64) -> Result<Self> {
        Self::new(db_to_linear(snr_ba_db), db_to_linear(rho_db), l_sy)
    }

    /// Mean statistic under alignment.
    pub fn aligned_mean(&self) -> f64 {
        1.0 + self.snr_ba * self.l_sy
    }

    /// Mean statistic under misalignment.
    pub fn misaligned_mean(&self) -> f64 {
        1.0 + self.rho * self.snr_ba * self.l_sy
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// `exp(-(2^{R/W} - 1) / SNR_BA)`: no-outage probability under Rayleigh fading.
pub fn success_probability(rate: f64, snr_ba: f64) -> f64 {
    (-(2f64.powf(rate) - 1.0) / snr_ba).exp()
}

/// Rate maximizing `r * success_probability(r, snr_ba)` (unimodal in `r`).
pub fn optimal_rate(snr_ba: f64) -> f64 {
    let f = |r: f64| r * success_probability(r, snr_ba);
    let (mut lo, mut hi) = (0.0, (1.0 + snr_ba).log2() + 2.0);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) < f(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    0.5 * (lo + hi)
}

/// `1 - (1 - e^{-eta/b})^n`.
pub fn false_alarm_prob(eta: f64, p: &BinarySnrParams, n: usize) -> f64 {
    let t = (-eta / p.misaligned_mean()).exp();
    -(n as f64 * (-t).ln_1p()).exp_m1()
}

/// `(1 - e^{-eta/a}) (1 - e^{-eta/b})^{n-1}`.
pub fn misdetect_prob(eta: f64, p: &BinarySnrParams, n: usize) -> f64 {
    let qa = -(-eta / p.aligned_mean()).exp_m1();
    let tb = (-eta / p.misaligned_mean()).exp();
    qa * ((n as f64 - 1.0) * (-tb).ln_1p()).exp()
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `P(G_s > eta, G_s > max_j G_j)` with `n - 1` misaligned competitors.
pub fn correct_prob(eta: f64, p: &BinarySnrParams, n: usize) -> f64 {
    let (a, b) = (p.aligned_mean(), p.misaligned_mean());
    let m = n - 1;
    let (mut sum, mut abs) = (0.0, 0.0);
    for i in 0..=m {
        let t = binomial(m, i) * (-eta / a - i as f64 * eta / b).exp() / (1.0 + i as f64 * a / b);
        sum += if i % 2 == 0 { t } else { -t };
        abs += t;
    }
    if abs > 1e6 * sum.abs().max(f64::MIN_POSITIVE) {
        correct_prob_quadrature(eta, p, n, 20_000)
    } else {
        sum
    }
}

/// Same quantity by Simpson's rule after substituting `u = e^{-(x - eta)/a}`:
/// `e^{-eta/a} * int_0^1 (1 - e^{-eta/b} u^{a/b})^{n-1} du`.
pub fn correct_prob_quadrature(eta: f64, p: &BinarySnrParams, n: usize, intervals: usize) -> f64 {
    let (a, b) = (p.aligned_mean(), p.misaligned_mean());
    let c = (-eta / b).exp();
    let f = |u: f64| (1.0 - c * u.powf(a / b)).powi(n as i32 - 1);
    let m = intervals + intervals % 2;
    let h = 1.0 / m as f64;
    let mut s = f(0.0) + f(1.0);
    for i in 1..m {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    (-eta / a).exp() * s * h / 3.0
}

/// Bisection for `p_fa(eta) = p_md(eta)` on `[0, 50 (1 + SNR_BA L_sy)]`.
pub fn calibrate_threshold(p: &BinarySnrParams, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("set size must be at least 1".into()));
    }
    let eta_max = 50.0 * p.aligned_mean();
    let g = |eta: f64| false_alarm_prob(eta, p, n) - misdetect_prob(eta, p, n);
    if g(eta_max) > 0.0 {
        return Err(Error::NoThresholdCrossing { eta_max });
    }
    let (mut lo, mut hi) = (0.0, eta_max);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let v = g(mid);
        if v.abs() < 1e-12 || hi - lo < 1e-13 * eta_max {
            return Ok(mid);
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-set-size feedback probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeEntry {
    pub size: usize,
    /// Detection threshold; `None` when the probabilities were set directly.
    pub eta: Option<f64>,
    pub p_corr: f64,
    pub p_md: f64,
    pub p_fa: f64,
}

impl SizeEntry {
    /// Probability of reporting one particular wrong scanned beam.
    pub fn p_wrong(&self) -> f64 {
        if self.size <= 1 {
            0.0
        } else {
            ((1.0 - self.p_corr - self.p_md) / (self.size - 1) as f64).max(0.0)
        }
    }
}

/// The analytic observation model `P_Y(y | s, S_BT)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackModel {
    pub params: BinarySnrParams,
    /// Entry `n - 1` describes scans of `n` beams.
    pub sizes: Vec<SizeEntry>,
}

impl FeedbackModel {
    /// Calibrates a threshold per set size `1..=max_size`.
    pub fn calibrate(params: BinarySnrParams, max_size: usize) -> Result<Self> {
        let sizes = (1..=max_size)
            .map(|n| {
                let eta = calibrate_threshold(&params, n)?;
                Ok(SizeEntry {
                    size: n,
                    eta: Some(eta),
                    p_corr: correct_prob(eta, &params, n),
                    p_md: misdetect_prob(eta, &params, n),
                    p_fa: false_alarm_prob(eta, &params, n),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, sizes })
    }

    /// Same probabilities for every set size.
    pub fn with_probabilities(params: BinarySnrParams, max_size: usize, p_corr: f64, p_md: f64, p_fa: f64) -> Result<Self> {
        let ok = |x: f64| (0.0..=1.0).contains(&x);
        if !ok(p_corr) || !ok(p_md) || !ok(p_fa) || p_corr + p_md > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument("feedback probabilities out of range".into()));
        }
        let sizes = (1..=max_size)
            .map(|n| SizeEntry {
                size: n,
                eta: None,
                p_corr: if n == 1 { 1.0 - p_md } else { p_corr },
                p_md,
                p_fa,
            })
            .collect();
        Ok(Self { params, sizes })
    }

    /// Detection is always exact.
    pub fn error_free(params: BinarySnrParams, max_size: usize) -> Self {
        Self::with_probabilities(params, max_size, 1.0, 0.0, 0.0).expect("valid probabilities")
    }

    pub fn max_size(&self) -> usize {
        self.sizes.len()
    }

    pub fn entry(&self, n: usize) -> &SizeEntry {
        &self.sizes[n - 1]
    }

    pub fn is_error_free(&self) -> bool {
        self.sizes.iter().all(|e| e.p_corr == 1.0 && e.p_md == 0.0 && e.p_fa == 0.0)
    }

    /// `P(y | s, set)`.
    pub fn prob(&self, y: Observation, s: usize, set: &[usize]) -> f64 {
        let e = self.entry(set.len());
        let inside = set.contains(&s);
        match y {
            None if inside => e.p_md,
            None => 1.0 - e.p_fa,
            Some(j) if !set.contains(&j) => 0.0,
            Some(j) if j == s => e.p_corr,
            Some(_) if inside => e.p_wrong(),
            Some(_) => e.p_fa / set.len() as f64,
        }
    }

    /// `P(y | s, set)` for every state `s < n_states`.
    pub fn likelihoods(&self, y: Observation, set: &[usize], n_states: usize) -> Vec<f64> {
        let e = self.entry(set.len());
        let mut out = vec![0.0; n_states];
        match y {
            None => {
                out.fill(1.0 - e.p_fa);
                for &s in set {
                    out[s] = e.p_md;
                }
            }
            Some(j) if !set.contains(&j) => {}
            Some(j) => {
                out.fill(e.p_fa / set.len() as f64);
                let w = e.p_wrong();
                for &s in set {
                    out[s] = w;
                }
                out[j] = e.p_corr;
            }
        }
        out
    }

    /// Full distribution over `set ∪ {0}`, the miss outcome last.
    pub fn observation_distribution(&self, s: usize, set: &[usize]) -> Result<Vec<(Observation, f64)>> {
        if set.is_empty() || set.len() > self.max_size() {
            return Err(Error::InvalidArgument(format!("set size {} not calibrated", set.len())));
        }
        let mut out: Vec<(Observation, f64)> = set.iter().map(|&j| (Some(j), self.prob(Some(j), s, set))).collect();
        out.push((None, self.prob(None, s, set)));
        let total: f64 = out.iter().map(|x| x.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Unnormalized(total));
        }
        Ok(out)
    }

    /// Draws `y` from [`observation_distribution`](Self::observation_distribution).
    pub fn sample<R: Rng + ?Sized>(&self, s: usize, set: &[usize], rng: &mut R) -> Observation {
        let e = self.entry(set.len());
        let u: f64 = rng.random();
        let inside = set.contains(&s);
        if inside {
            if u < e.p_corr {
                return Some(s);
            }
            if u < e.p_corr + e.p_md || set.len() == 1 {
                return None;
            }
            let others: Vec<usize> = set.iter().copied().filter(|&j| j != s).collect();
            Some(others[rng.random_range(0..others.len())])
        } else if u < e.p_fa {
            Some(set[rng.random_range(0..set.len())])
        } else {
            None
        }
    }

    pub fn report(&self) -> CalibrationReport {
        CalibrationReport {
            snr_ba_db: linear_to_db(self.params.snr_ba),
            rho_db: linear_to_db(self.params.rho),
            l_sy: self.params.l_sy,
            rate: self.params.rate,
            se_ba: self.params.se_ba,
            sizes: self.sizes.clone(),
        }
    }
}

/// JSON-serializable calibration summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub snr_ba_db: f64,
    pub rho_db: f64,
    pub l_sy: f64,
    pub rate: f64,
    pub se_ba: f64,
    pub sizes: Vec<SizeEntry>,
}

pub fn sample_feedback_analytic<R: Rng + ?Sized>(s: usize, set: &[usize], model: &FeedbackModel, rng: &mut R) -> Observation {
    model.sample(s, set, rng)
}

/// `|x^H y|^2 / (sigma_w^2 ||x||^2)`.
pub fn matched_filter_snr(y: &[Complex64], x: &[Complex64], sigma_w: f64) -> f64 {
    let xy: Complex64 = x.iter().zip(y).map(|(a, b)| a.conj() * b).sum();
    let xx: f64 = x.iter().map(|a| a.norm_sqr()).sum();
    xy.norm_sqr() / (sigma_w * sigma_w * xx)
}

/// Argmax-and-threshold rule: `gammas[i]` belongs to `set[i]`.
pub fn detect(gammas: &[f64], set: &[usize], eta: f64) -> Observation {
    let mut best = 0;
    for (i, &g) in gammas.iter().enumerate() {
        if g > gammas[best] {
            best = i;
        }
    }
    (gammas[best] > eta).then(|| set[best])
}

/// Frame reward parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameReward {
    pub se_ba: f64,
    /// Slots per frame.
    pub k: usize,
}

/// `SE_BA (1 - k_dc / K) 1[s_dc = s_true]`.
pub fn frame_spectral_efficiency(k_dc: usize, s_dc: usize, s_true: usize, reward: &FrameReward) -> f64 {
    if s_dc != s_true || k_dc >= reward.k {
        return 0.0;
    }
    reward.se_ba * (1.0 - k_dc as f64 / reward.k as f64)
}
