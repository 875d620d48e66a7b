//! Transition-model estimation from BT feedback: naive counting, Baum-Welch
//! on per-frame likelihoods, and a recurrent variational autoencoder trained
//! with Gumbel-max sampling and a softmax-relaxed backward pass.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp1, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::FeedbackModel;
use crate::frame::BtRound;
use crate::mobility::{stream_rng, TransitionModel};
use crate::pomdp::Belief;

/// Log-likelihood assigned to impossible observations.
pub const LOGLIK_FLOOR: f64 = -50.0;

/// Laplace pseudo-count added to every transition count.
pub const PSEUDO_COUNT: f64 = 1e-3;

/// `sum_m ln P(y_m | s, set_m)` for every state, each term floored.
pub fn frame_loglik(rounds: &[BtRound], model: &FeedbackModel, n_states: usize) -> Vec<f64> {
    let mut l = vec![0.0; n_states];
    for r in rounds {
        let lik = model.likelihoods(r.y, &r.set, n_states);
        for (x, p) in l.iter_mut().zip(lik) {
            *x += if p > 0.0 { p.ln().max(LOGLIK_FLOOR) } else { LOGLIK_FLOOR };
        }
    }
    l
}

/// `beta0 * exp(L0)`, normalized in the log domain.
pub fn posterior_initial_belief(beta0: &Belief, l0: &[f64]) -> Belief {
    let w: Vec<f64> = beta0.probs().iter().zip(l0).map(|(b, l)| if *b > 0.0 { b.ln() + l } else { f64::NEG_INFINITY }).collect();
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Belief::from_weights(w.iter().map(|x| (x - m).exp()).collect()).unwrap_or_else(|_| beta0.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub rounds: Vec<BtRound>,
    pub loglik: Vec<f64>,
    /// Ground truth, used only for evaluation.
    pub s_true: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub initial_prior: Vec<f64>,
    pub frames: Vec<FrameRecord>,
    /// False when the episode was cut off before the UE left coverage.
    pub exited: bool,
}

impl EpisodeLog {
    pub fn n_states(&self) -> usize {
        self.initial_prior.len()
    }

    pub fn logliks(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(|f| f.loglik.clone()).collect()
    }

    /// Last detection in each frame, if any.
    pub fn detections(&self) -> Vec<Option<usize>> {
        self.frames.iter().map(|f| f.rounds.iter().rev().find_map(|r| r.y)).collect()
    }

    /// Consecutive detected pairs; the exit is state `n_states`.
    pub fn detected_pairs(&self) -> Vec<(usize, usize)> {
        let d = self.detections();
        let mut out: Vec<(usize, usize)> = d.windows(2).filter_map(|w| Some((w[0]?, w[1]?))).collect();
        if self.exited {
            if let Some(Some(last)) = d.last() {
                out.push((*last, self.n_states()));
            }
        }
        out
    }

    pub fn true_pairs(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self.frames.windows(2).map(|w| (w[0].s_true, w[1].s_true)).collect();
        if self.exited {
            if let Some(f) = self.frames.last() {
                out.push((f.s_true, self.n_states()));
            }
        }
        out
    }
}

fn counts_to_model(n: usize, counts: &[f64], pseudo: f64) -> TransitionModel {
    let mut p = Vec::with_capacity(n * (n + 1));
    for s in 0..n {
        let row = &counts[s * (n + 1)..(s + 1) * (n + 1)];
        let total: f64 = row.iter().sum::<f64>() + pseudo * (n + 1) as f64;
        if total > 0.0 {
            p.extend(row.iter().map(|c| (c + pseudo) / total));
        } else {
            p.extend(std::iter::repeat_n(1.0 / (n + 1) as f64, n + 1));
        }
    }
    TransitionModel::new(n, p).expect("rows are normalized")
}

/// Smoothed count ratios; unvisited rows are uniform.
pub fn naive_estimate(pairs: &[(usize, usize)], n_states: usize) -> TransitionModel {
    let mut counts = vec![0.0; n_states * (n_states + 1)];
    for &(a, b) in pairs {
        counts[a * (n_states + 1) + b] += 1.0;
    }
    counts_to_model(n_states, &counts, PSEUDO_COUNT)
}

/// Exit probabilities by naive counting of detected episode terminations.
pub fn naive_exit_probabilities(episodes: &[EpisodeLog], n_states: usize) -> Vec<f64> {
    let pairs: Vec<(usize, usize)> = episodes.iter().flat_map(|e| e.detected_pairs()).collect();
    let m = naive_estimate(&pairs, n_states);
    (0..n_states).map(|s| m.exit_prob(s)).collect()
}

/// Average row KL divergence in nats, exit column included, `p_hat` floored.
pub fn kl_scoreboard(p: &TransitionModel, p_hat: &TransitionModel) -> f64 {
    let n = p.n;
    let mut total = 0.0;
    for s in 0..n {
        for (a, b) in p.row(s).iter().zip(p_hat.row(s)) {
            if *a > 0.0 {
                total += a * (a / b.max(1e-12)).ln();
            }
        }
    }
    total / n as f64
}

fn scaled_emissions(logliks: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let mut offset = 0.0;
    let b = logliks
        .iter()
        .map(|l| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            offset += m;
            l.iter().map(|x| (x - m).exp()).collect()
        })
        .collect();
    (b, offset)
}

struct ForwardBackward {
    loglik: f64,
    /// Expected transition counts, `n x (n + 1)`.
    counts: Vec<f64>,
}

fn forward_backward(model: &TransitionModel, ep: &EpisodeLog, want_counts: bool) -> Result<ForwardBackward> {
    let n = model.n;
    let t_len = ep.frames.len();
    let mut counts = vec![0.0; if want_counts { n * (n + 1) } else { 0 }];
    if t_len == 0 {
        return Ok(ForwardBackward { loglik: 0.0, counts });
    }
    let (b, offset) = scaled_emissions(&ep.logliks());
    let mut alpha = vec![vec![0.0; n]; t_len];
    let mut c = vec![0.0; t_len];
    for t in 0..t_len {
        for j in 0..n {
            let pred = if t == 0 {
                ep.initial_prior[j]
            } else {
                (0..n).map(|i| alpha[t - 1][i] * model.prob(i, j)).sum()
            };
            alpha[t][j] = pred * b[t][j];
        }
        c[t] = alpha[t].iter().sum();
        if !(c[t] > 0.0) {
            return Err(Error::DegenerateEmission(t));
        }
        for x in &mut alpha[t] {
            *x /= c[t];
        }
    }
    let last = t_len - 1;
    let c_end = if ep.exited { (0..n).map(|i| alpha[last][i] * model.exit_prob(i)).sum() } else { 1.0 };
    if !(c_end > 0.0) {
        return Err(Error::DegenerateEmission(last));
    }
    let loglik = c.iter().map(|x| x.ln()).sum::<f64>() + offset + c_end.ln();
    if want_counts {
        let mut beta: Vec<f64> = (0..n).map(|i| if ep.exited { model.exit_prob(i) / c_end } else { 1.0 }).collect();
        if ep.exited {
            for i in 0..n {
                counts[i * (n + 1) + n] += alpha[last][i] * beta[i];
            }
        }
        for t in (0..last).rev() {
            let w: Vec<f64> = (0..n).map(|j| b[t + 1][j] * beta[j] / c[t + 1]).collect();
            for i in 0..n {
                for j in 0..n {
                    counts[i * (n + 1) + j] += alpha[t][i] * model.prob(i, j) * w[j];
                }
            }
            beta = (0..n).map(|i| (0..n).map(|j| model.prob(i, j) * w[j]).sum()).collect();
        }
    }
    Ok(ForwardBackward { loglik, counts })
}

/// Exact log marginal likelihood of the episode's feedback under `model`,
/// up to policy terms that do not depend on the model.
pub fn forward_loglik(model: &TransitionModel, ep: &EpisodeLog) -> Result<f64> {
    Ok(forward_backward(model, ep, false)?.loglik)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaumWelchConfig {
    pub max_iters: usize,
    /// Stop when no transition probability moves more than this.
    pub tol: f64,
    pub pseudo_count: f64,
}

impl Default for BaumWelchConfig {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-6, pseudo_count: PSEUDO_COUNT }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchResult {
    pub model: TransitionModel,
    /// Total log likelihood of the data under each iterate, starting with `init`.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
}

/// EM over episodes, exit column included. Starts from `init` or uniform.
pub fn baum_welch(
    episodes: &[EpisodeLog],
    n_states: usize,
    cfg: &BaumWelchConfig,
    init: Option<&TransitionModel>,
) -> Result<BaumWelchResult> {
    let mut model = init.cloned().unwrap_or_else(|| TransitionModel::uniform(n_states));
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let parts: Vec<ForwardBackward> =
            episodes.par_iter().map(|e| forward_backward(&model, e, true)).collect::<Result<_>>()?;
        trace.push(parts.iter().map(|p| p.loglik).sum());
        let mut counts = vec![0.0; n_states * (n_states + 1)];
        for p in &parts {
            for (a, b) in counts.iter_mut().zip(&p.counts) {
                *a += b;
            }
        }
        let next = counts_to_model(n_states, &counts, cfg.pseudo_count);
        let delta = next.p.iter().zip(&model.p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        model = next;
        iterations += 1;
        if delta < cfg.tol {
            break;
        }
    }
    trace.push(episodes.iter().map(|e| forward_loglik(&model, e)).sum::<Result<f64>>()?);
    Ok(BaumWelchResult { model, loglik_trace: trace, iterations })
}

/// Fully connected network with ReLU hidden layers and a linear output.
/// Parameters are flattened layer by layer, weights (out x in, row-major)
/// then biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn n_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self { sizes: sizes.to_vec(), params: vec![0.0; Self::n_params(sizes)] }
    }

    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(Self::n_params(sizes));
        for w in sizes.windows(2) {
            let a = 1.0 / (w[0] as f64).sqrt();
            let u = Uniform::new_inclusive(-a, a).expect("finite bound");
            params.extend((0..w[0] * w[1] + w[1]).map(|_| u.sample(rng)));
        }
        Self { sizes: sizes.to_vec(), params }
    }

    /// Activations of every layer, input first and output last.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let layers = self.sizes.len() - 1;
        for l in 0..layers {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + i * o];
            let b = &self.params[off + i * o..off + i * o + o];
            let a = &acts[l];
            let mut out: Vec<f64> = (0..o).map(|r| b[r] + dot(&w[r * i..(r + 1) * i], a)).collect();
            if l + 1 < layers {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
            off += i * o + o;
        }
        acts
    }

    /// Accumulates `d(out . dout)/dparams` into `grad`.
    pub fn backward(&self, acts: &[Vec<f64>], dout: &[f64], grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let mut offs = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offs.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = dout.to_vec();
        for l in (0..layers).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < layers {
                for (d, a) in delta.iter_mut().zip(&acts[l + 1]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let off = offs[l];
            let input = &acts[l];
            for r in 0..o {
                if delta[r] != 0.0 {
                    let g = &mut grad[off + r * i..off + (r + 1) * i];
                    for (gw, x) in g.iter_mut().zip(input) {
                        *gw += delta[r] * x;
                    }
                }
                grad[off + i * o + r] += delta[r];
            }
            if l > 0 {
                let w = &self.params[off..off + i * o];
                let mut prev = vec![0.0; i];
                for r in 0..o {
                    if delta[r] != 0.0 {
                        for (p, wv) in prev.iter_mut().zip(&w[r * i..(r + 1) * i]) {
                            *p += delta[r] * wv;
                        }
                    }
                }
                delta = prev;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Column-wise log-softmax of an `n x n` logit matrix stored row-major
/// (`[r * n + c]`, column `c` is the conditioning state).
pub fn column_log_softmax(logits: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for c in 0..n {
        let m = (0..n).map(|r| logits[r * n + c]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..n).map(|r| (logits[r * n + c] - m).exp()).sum::<f64>().ln();
        for r in 0..n {
            out[r * n + c] = logits[r * n + c] - lse;
        }
    }
    out
}

/// Pulls `d obj / d lnQ` back to the logits.
fn column_softmax_backward(ln_q: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for c in 0..n {
        let s: f64 = (0..n).map(|r| g[r * n + c]).sum();
        for r in 0..n {
            out[r * n + c] = g[r * n + c] - ln_q[r * n + c].exp() * s;
        }
    }
    out
}

/// Draws `argmax_i (logits_i + G_i)` with standard Gumbel noise `-ln E`.
pub fn gumbel_sample_state<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let noise: Vec<f64> = (0..logits.len()).map(|_| gumbel(rng)).collect();
    argmax_with(logits, &noise)
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let e: f64 = Exp1.sample(rng);
    -e.ln()
}

fn argmax_with(logits: &[f64], noise: &[f64]) -> usize {
    let mut best = 0;
    let mut v = f64::NEG_INFINITY;
    for (i, (l, g)) in logits.iter().zip(noise).enumerate() {
        if l + g > v {
            v = l + g;
            best = i;
        }
    }
    best
}

pub const ENCODER_HIDDEN: usize = 100;
pub const DECODER_HIDDEN: usize = 100;

/// Encoder input scaling: log-likelihoods are divided by `|LOGLIK_FLOOR|`.
fn encoder_input(l: &[f64]) -> Vec<f64> {
    l.iter().map(|x| x / -LOGLIK_FLOOR).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrVae {
    pub n_states: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Adjoints with respect to the log-transition matrices.
struct MatrixGrads {
    ln_q: Vec<Vec<f64>>,
    ln_p: Vec<f64>,
}

/// Gumbel noise and initial state for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryNoise {
    pub s0: usize,
    /// `r[t - 1]` is the noise vector of frame `t`.
    pub r: Vec<Vec<f64>>,
}

/// Which state values the forward pass propagates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relaxation {
    /// One-hot states forward, relaxed Jacobians backward.
    StraightThrough,
    /// Relaxed states in both directions.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    pub elbo: f64,
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl DrVae {
    pub fn new<R: Rng + ?Sized>(n_states: usize, rng: &mut R) -> Self {
        let n2 = n_states * n_states;
        Self {
            n_states,
            encoder: Mlp::random(&[n_states, ENCODER_HIDDEN, n2], rng),
            decoder: Mlp::random(&[1, DECODER_HIDDEN, DECODER_HIDDEN, n2], rng),
        }
    }

    pub fn zeros(n_states: usize) -> Self {
        let n2 = n_states * n_states;
        Self {
            n_states,
            encoder: Mlp::zeros(&[n_states, ENCODER_HIDDEN, n2]),
            decoder: Mlp::zeros(&[1, DECODER_HIDDEN, DECODER_HIDDEN, n2]),
        }
    }

    /// `[lnQ]_{s', s} = ln q(s' | s, L)`, row-major.
    pub fn encoder_forward(&self, l: &[f64]) -> Vec<f64> {
        let acts = self.encoder.forward(&encoder_input(l));
        column_log_softmax(acts.last().expect("output layer"), self.n_states)
    }

    /// `[lnP]_{s', s} = ln p(s' | s)`, row-major.
    pub fn decoder_forward(&self) -> Vec<f64> {
        let acts = self.decoder.forward(&[1.0]);
        column_log_softmax(acts.last().expect("output layer"), self.n_states)
    }

    /// Learned core `p(s'|s)` with the given exit probabilities grafted on.
    pub fn transition_model(&self, exit: &[f64]) -> Result<TransitionModel> {
        let n = self.n_states;
        let ln_p = self.decoder_forward();
        let core: Vec<f64> = (0..n * n).map(|i| ln_p[(i % n) * n + i / n].exp()).collect();
        TransitionModel::from_core(&core, exit)
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, beta0: &Belief, logliks: &[Vec<f64>], rng: &mut R) -> TrajectoryNoise {
        let post = posterior_initial_belief(beta0, &logliks[0]);
        let lp: Vec<f64> = post.probs().iter().map(|p| p.ln()).collect();
        let s0 = gumbel_sample_state(&lp, rng);
        let r = (1..logliks.len()).map(|_| (0..self.n_states).map(|_| gumbel(rng)).collect()).collect();
        TrajectoryNoise { s0, r }
    }

    /// One-trajectory objective and adjoints w.r.t. the log matrices.
    fn trajectory(
        &self,
        ln_q: &[Vec<f64>],
        ln_p: &[f64],
        logliks: &[Vec<f64>],
        noise: &TrajectoryNoise,
        tau: f64,
        mode: Relaxation,
        grads: Option<&mut MatrixGrads>,
    ) -> (f64, Vec<usize>) {
        let n = self.n_states;
        let t_len = logliks.len();
        let mut xs = vec![vec![0.0; n]; t_len];
        xs[0][noise.s0] = 1.0;
        let mut states = vec![noise.s0];
        let mut soft = Vec::with_capacity(t_len);
        let mut value = 0.0;
        for t in 1..t_len {
            let q = &ln_q[t];
            let r = &noise.r[t - 1];
            // column j of the relaxed selector
            let mut g = vec![0.0; n * n];
            for j in 0..n {
                let m = (0..n).map(|i| (r[i] + q[i * n + j]) / tau).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = ((r[i] + q[i * n + j]) / tau - m).exp();
                    g[i * n + j] = e;
                    z += e;
                }
                for i in 0..n {
                    g[i * n + j] /= z;
                }
            }
            let prev = states[t - 1];
            let hard = {
                let col: Vec<f64> = (0..n).map(|i| q[i * n + prev]).collect();
                argmax_with(&col, r)
            };
            states.push(hard);
            let x = match mode {
                Relaxation::StraightThrough => {
                    let mut v = vec![0.0; n];
                    v[hard] = 1.0;
                    v
                }
                Relaxation::Full => (0..n).map(|i| (0..n).map(|j| g[i * n + j] * xs[t - 1][j]).sum()).collect(),
            };
            let xp = &xs[t - 1];
            for i in 0..n {
                if x[i] != 0.0 {
                    let m: f64 = (0..n).map(|j| (ln_p[i * n + j] - q[i * n + j]) * xp[j]).sum();
                    value += x[i] * (logliks[t][i] + m);
                }
            }
            xs[t] = x;
            soft.push(g);
        }
        if let Some(gr) = grads {
            let mut xbar = vec![vec![0.0; n]; t_len];
            for t in (1..t_len).rev() {
                let q = &ln_q[t];
                let (x, xp) = (&xs[t], &xs[t - 1]);
                for i in 0..n {
                    let m: f64 = (0..n).map(|j| (ln_p[i * n + j] - q[i * n + j]) * xp[j]).sum();
                    xbar[t][i] += logliks[t][i] + m;
                }
                for i in 0..n {
                    if x[i] == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        let d = x[i] * xp[j];
                        let mij = ln_p[i * n + j] - q[i * n + j];
                        xbar[t - 1][j] += x[i] * mij;
                        gr.ln_p[i * n + j] += d;
                        gr.ln_q[t][i * n + j] -= d;
                    }
                }
                // through x_t = G~ x_{t-1}
                let g = &soft[t - 1];
                let xb = xbar[t].clone();
                for j in 0..n {
                    let col: Vec<f64> = (0..n).map(|i| g[i * n + j]).collect();
                    let gx: f64 = col.iter().zip(&xb).map(|(a, b)| a * b).sum();
                    xbar[t - 1][j] += gx;
                    if xp[j] != 0.0 {
                        for i in 0..n {
                            gr.ln_q[t][i * n + j] += xp[j] * col[i] * (xb[i] - gx) / tau;
                        }
                    }
                }
            }
        }
        (value, states)
    }

    fn log_matrices(&self, logliks: &[Vec<f64>]) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let n = self.n_states;
        let enc_acts: Vec<Vec<Vec<f64>>> = logliks.iter().map(|l| self.encoder.forward(&encoder_input(l))).collect();
        let ln_q: Vec<Vec<f64>> = enc_acts.iter().map(|a| column_log_softmax(a.last().expect("output"), n)).collect();
        let dec_acts = self.decoder.forward(&[1.0]);
        let ln_p = column_log_softmax(dec_acts.last().expect("output"), n);
        (enc_acts, ln_q, dec_acts, ln_p)
    }

    /// Objective and parameter gradient for fixed trajectory noise, averaged
    /// over the given noise draws.
    pub fn objective_with_noise(
        &self,
        logliks: &[Vec<f64>],
        noise: &[TrajectoryNoise],
        tau: f64,
        mode: Relaxation,
    ) -> ElboGradient {
        let n = self.n_states;
        let (enc_acts, ln_q, dec_acts, ln_p) = self.log_matrices(logliks);
        let mut gr = MatrixGrads { ln_q: vec![vec![0.0; n * n]; logliks.len()], ln_p: vec![0.0; n * n] };
        let mut total = 0.0;
        for nz in noise {
            total += self.trajectory(&ln_q, &ln_p, logliks, nz, tau, mode, Some(&mut gr)).0;
        }
        let scale = 1.0 / noise.len().max(1) as f64;
        let mut enc = vec![0.0; self.encoder.params.len()];
        let mut dec = vec![0.0; self.decoder.params.len()];
        for t in 1..logliks.len() {
            if gr.ln_q[t].iter().any(|&x| x != 0.0) {
                let g: Vec<f64> = gr.ln_q[t].iter().map(|x| x * scale).collect();
                let dl = column_softmax_backward(&ln_q[t], &g, n);
                self.encoder.backward(&enc_acts[t], &dl, &mut enc);
            }
        }
        let g: Vec<f64> = gr.ln_p.iter().map(|x| x * scale).collect();
        let dl = column_softmax_backward(&ln_p, &g, n);
        self.decoder.backward(&dec_acts, &dl, &mut dec);
        ElboGradient { elbo: total * scale, encoder: enc, decoder: dec }
    }

    /// Mean of `sum_t z_t` over `n_trg` sampled trajectories, with the samples.
    pub fn elbo_estimate<R: Rng + ?Sized>(
        &self,
        beta0: &Belief,
        logliks: &[Vec<f64>],
        n_trg: usize,
        rng: &mut R,
    ) -> (f64, Vec<Vec<usize>>) {
        if logliks.is_empty() {
            return (0.0, Vec::new());
        }
        let (_, ln_q, _, ln_p) = self.log_matrices(logliks);
        let mut total = 0.0;
        let mut trajs = Vec::with_capacity(n_trg);
        for _ in 0..n_trg {
            let nz = self.sample_noise(beta0, logliks, rng);
            let (v, s) = self.trajectory(&ln_q, &ln_p, logliks, &nz, 1.0, Relaxation::StraightThrough, None);
            total += v;
            trajs.push(s);
        }
        (total / n_trg as f64, trajs)
    }

    /// Straight-through ELBO gradient averaged over `n_trg` trajectories.
    pub fn elbo_gradient<R: Rng + ?Sized>(
        &self,
        beta0: &Belief,
        logliks: &[Vec<f64>],
        n_trg: usize,
        tau: f64,
        rng: &mut R,
    ) -> ElboGradient {
        if logliks.is_empty() {
            return ElboGradient {
                elbo: 0.0,
                encoder: vec![0.0; self.encoder.params.len()],
                decoder: vec![0.0; self.decoder.params.len()],
            };
        }
        let noise: Vec<TrajectoryNoise> = (0..n_trg).map(|_| self.sample_noise(beta0, logliks, rng)).collect();
        self.objective_with_noise(logliks, &noise, tau, Relaxation::StraightThrough)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Episodes per epoch.
    pub batch: usize,
    /// Sampled trajectories per episode.
    pub n_trg: usize,
    /// Adam base step size.
    pub step_size: f64,
    pub temperature: f64,
    pub max_epochs: usize,
    pub convergence_window: usize,
    /// Relative change of the windowed mean ELBO that counts as converged.
    pub convergence_tol: f64,
    pub stop_on_convergence: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 5,
            n_trg: 6,
            step_size: 1e-3,
            temperature: 1.0,
            max_epochs: 2000,
            convergence_window: 20,
            convergence_tol: 1e-3,
            stop_on_convergence: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.n_trg == 0 || !(self.step_size > 0.0) || !(self.temperature > 0.0) || self.convergence_window == 0 {
            return Err(Error::InvalidArgument("training needs N, N_trg >= 1 and positive step size, temperature, window".into()));
        }
        Ok(())
    }
}

/// True once the mean ELBO of the last window differs from the window
/// before it by less than `tol` relative.
pub fn elbo_converged(trace: &[f64], window: usize, tol: f64) -> bool {
    if trace.len() < 2 * window {
        return false;
    }
    let k = trace.len();
    let recent = trace[k - window..].iter().sum::<f64>() / window as f64;
    let before = trace[k - 2 * window..k - window].iter().sum::<f64>() / window as f64;
    (recent - before).abs() <= tol * before.abs().max(1e-12)
}

/// First epoch (0-based index into `trace`) at which [`elbo_converged`] holds.
pub fn convergence_epoch(trace: &[f64], window: usize, tol: f64) -> Option<usize> {
    (0..trace.len()).find(|&e| elbo_converged(&trace[..=e], window, tol))
}

/// Baum-Welch model until the ELBO trace converges, DR-VAE model after.
pub fn hybrid_schedule<'a>(
    bw: &'a TransitionModel,
    drvae: &'a TransitionModel,
    elbo_trace: &[f64],
    cfg: &TrainConfig,
) -> &'a TransitionModel {
    if convergence_epoch(elbo_trace, cfg.convergence_window, cfg.convergence_tol).is_some() {
        drvae
    } else {
        bw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Ascent step.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrVaeTrainer {
    pub version: u32,
    pub vae: DrVae,
    pub config: TrainConfig,
    pub epoch: usize,
    pub elbo_trace: Vec<f64>,
    adam_enc: Adam,
    adam_dec: Adam,
}

impl DrVaeTrainer {
    pub fn new<R: Rng + ?Sized>(n_states: usize, config: TrainConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let vae = DrVae::new(n_states, rng);
        let (ne, nd) = (vae.encoder.params.len(), vae.decoder.params.len());
        Ok(Self { version: CHECKPOINT_VERSION, vae, config, epoch: 0, elbo_trace: Vec::new(), adam_enc: Adam::new(ne), adam_dec: Adam::new(nd) })
    }

    /// One SGA step on a batch; returns the batch-mean ELBO.
    pub fn step<R: Rng + ?Sized>(&mut self, batch: &[&EpisodeLog], rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
        let cfg = &self.config;
        let vae = &self.vae;
        let parts: Vec<ElboGradient> = batch
            .par_iter()
            .zip(&seeds)
            .map(|(ep, &seed)| {
                let beta0 = Belief::new(ep.initial_prior.clone())?;
                Ok(vae.elbo_gradient(&beta0, &ep.logliks(), cfg.n_trg, cfg.temperature, &mut stream_rng(seed, 0)))
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut enc = vec![0.0; vae.encoder.params.len()];
        let mut dec = vec![0.0; vae.decoder.params.len()];
        let mut elbo = 0.0;
        for p in &parts {
            elbo += p.elbo * scale;
            for (a, b) in enc.iter_mut().zip(&p.encoder) {
                *a += b * scale;
            }
            for (a, b) in dec.iter_mut().zip(&p.decoder) {
                *a += b * scale;
            }
        }
        let lr = self.config.step_size;
        self.adam_enc.step(&mut self.vae.encoder.params, &enc, lr);
        self.adam_dec.step(&mut self.vae.decoder.params, &dec, lr);
        self.epoch += 1;
        self.elbo_trace.push(elbo);
        Ok(elbo)
    }

    pub fn converged(&self) -> bool {
        elbo_converged(&self.elbo_trace, self.config.convergence_window, self.config.convergence_tol)
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let t: Self = serde_json::from_reader(r)?;
        if t.version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: t.version, expected: CHECKPOINT_VERSION });
        }
        Ok(t)
    }
}

/// Trains on a fixed episode pool, cycling through it `batch` episodes per
/// epoch. `callback` runs after every epoch.
pub fn train_drvae<R: Rng + ?Sized, F: FnMut(&DrVaeTrainer)>(
    episodes: &[EpisodeLog],
    config: TrainConfig,
    rng: &mut R,
    mut callback: F,
) -> Result<DrVaeTrainer> {
    let n = episodes.first().ok_or_else(|| Error::InvalidArgument("no episodes".into()))?.n_states();
    let mut trainer = DrVaeTrainer::new(n, config, rng)?;
    let mut next = 0;
    while trainer.epoch < trainer.config.max_epochs {
        let batch: Vec<&EpisodeLog> = (0..trainer.config.batch).map(|i| &episodes[(next + i) % episodes.len()]).collect();
        next = (next + trainer.config.batch) % episodes.len();
        trainer.step(&batch, rng)?;
        callback(&trainer);
        if trainer.config.stop_on_convergence && trainer.converged() {
            break;
        }
    }
    Ok(trainer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub elbo: f64,
    pub kl: Option<f64>,
}

pub fn write_curves_csv<W: Write>(mut w: W, points: &[CurvePoint]) -> Result<()> {
    writeln!(w, "epoch,elbo,kl")?;
    for p in points {
        let kl = p.kl.map(|k| format!("{k:.9}")).unwrap_or_default();
        writeln!(w, "{},{:.9},{}", p.epoch, p.elbo, kl)?;
    }
    Ok(())
}

/// Synthetic episode on a known chain with one exhaustive BT round per frame.
pub fn synthetic_episode<R: Rng + ?Sized>(
    model: &TransitionModel,
    feedback: &FeedbackModel,
    initial: &Belief,
    max_frames: usize,
    rng: &mut R,
) -> EpisodeLog {
    let n = model.n;
    let set: Vec<usize> = (0..n).collect();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut s = initial.probs().iter().position(|&p| {
        acc += p;
        u < acc
    }).unwrap_or(n - 1);
    let mut frames = Vec::new();
    let mut exited = false;
    while frames.len() < max_frames {
        let y = feedback.sample(s, &set, rng);
        let rounds = vec![BtRound { set: set.clone(), y }];
        let loglik = frame_loglik(&rounds, feedback, n);
        frames.push(FrameRecord { rounds, loglik, s_true: s });
        let next = model.sample_next(s, rng);
        if next == n {
            exited = true;
            break;
        }
        s = next;
    }
    EpisodeLog { initial_prior: initial.probs().to_vec(), frames, exited }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::BinarySnrParams;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn params() -> BinarySnrParams {
        BinarySnrParams::from_db(20.0, -10.0, 32.0).unwrap()
    }

    fn chi2_p(counts: &[u64], probs: &[f64]) -> f64 {
        let n: u64 = counts.iter().sum();
        let stat: f64 = counts.iter().zip(probs).map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        }).sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn naive_counts() {
        let m = naive_estimate(&[(0, 0), (0, 1)], 3);
        assert_relative_eq!(m.prob(0, 0), 0.5, epsilon = 1e-3);
        assert_relative_eq!(m.prob(0, 1), 0.5, epsilon = 1e-3);
        let m = naive_estimate(&[(0, 1)], 3);
        assert!(m.prob(0, 1) > 0.99);
        assert_relative_eq!(m.prob(2, 1), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn loglik_terms() {
        let ef = FeedbackModel::error_free(params(), 3);
        assert_eq!(frame_loglik(&[], &ef, 3), vec![0.0; 3]);
        let l = frame_loglik(&[BtRound { set: vec![0, 1], y: Some(1) }], &ef, 3);
        assert_eq!(l, vec![LOGLIK_FLOOR, 0.0, LOGLIK_FLOOR]);
        let m = FeedbackModel::with_probabilities(params(), 3, 0.8, 0.1, 0.05).unwrap();
        let rounds = [BtRound { set: vec![0], y: None }, BtRound { set: vec![1, 2], y: Some(2) }];
        let l = frame_loglik(&rounds, &m, 3);
        for s in 0..3 {
            let want = m.prob(None, s, &[0]).ln() + m.prob(Some(2), s, &[1, 2]).ln();
            assert_relative_eq!(l[s], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn posterior_initial() {
        let b = Belief::new(vec![0.2, 0.3, 0.5]).unwrap();
        for (x, y) in posterior_initial_belief(&b, &[0.0; 3]).probs().iter().zip(b.probs()) {
            assert_relative_eq!(*x, *y, epsilon = 1e-15);
        }
        let p = posterior_initial_belief(&Belief::uniform(3), &[-40.0, 0.0, -40.0]);
        assert!(p.probs()[1] > 1.0 - 1e-12);
        let l = [-1.0, -0.5, -2.0];
        let p = posterior_initial_belief(&b, &l);
        let w: Vec<f64> = b.probs().iter().zip(&l).map(|(b, l)| b * l.exp()).collect();
        let t: f64 = w.iter().sum();
        for i in 0..3 {
            assert_relative_eq!(p.probs()[i], w[i] / t, epsilon = 1e-14);
        }
    }

    #[test]
    fn kl_closed_forms() {
        let mut p = vec![0.0; 20];
        for s in 0..4 {
            p[s * 5 + (s + 1) % 4] = 1.0;
        }
        let p = TransitionModel::new(4, p).unwrap();
        assert_eq!(kl_scoreboard(&p, &p), 0.0);
        assert_relative_eq!(kl_scoreboard(&p, &TransitionModel::uniform(4)), 5f64.ln(), epsilon = 1e-12);
    }

    fn chain(n: usize, rng: &mut ChaCha8Rng, exit: f64) -> TransitionModel {
        let core: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>().powi(3)).collect();
        TransitionModel::from_core(&core, &vec![exit; n]).unwrap()
    }

    #[test]
    fn baum_welch_fully_observed_equals_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = chain(4, &mut rng, 0.02);
        let ef = FeedbackModel::error_free(params(), 4);
        let eps: Vec<EpisodeLog> = (0..20).map(|_| synthetic_episode(&truth, &ef, &Belief::uniform(4), 500, &mut rng)).collect();
        let pairs: Vec<(usize, usize)> = eps.iter().flat_map(|e| e.detected_pairs()).collect();
        let naive = naive_estimate(&pairs, 4);
        let bw = baum_welch(&eps, 4, &BaumWelchConfig { max_iters: 50, tol: 1e-12, ..Default::default() }, None).unwrap();
        for (a, b) in bw.model.p.iter().zip(&naive.p) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn baum_welch_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = chain(2, &mut rng, 0.05);
        let m = FeedbackModel::with_probabilities(params(), 2, 0.7, 0.2, 0.1).unwrap();
        let eps: Vec<EpisodeLog> = (0..10).map(|_| synthetic_episode(&truth, &m, &Belief::uniform(2), 200, &mut rng)).collect();
        let cfg = BaumWelchConfig { max_iters: 40, tol: 0.0, pseudo_count: 0.0 };
        let bw = baum_welch(&eps, 2, &cfg, None).unwrap();
        for w in bw.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{:?}", w);
        }
    }

    #[test]
    fn forward_loglik_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = chain(3, &mut rng, 0.3);
        let m = FeedbackModel::with_probabilities(params(), 3, 0.7, 0.2, 0.1).unwrap();
        let ep = loop {
            let e = synthetic_episode(&truth, &m, &Belief::uniform(3), 4, &mut rng);
            if e.frames.len() == 4 && e.exited {
                break e;
            }
        };
        let mut total = 0.0;
        for code in 0..81usize {
            let s: Vec<usize> = (0..4).map(|t| code / 3usize.pow(t as u32) % 3).collect();
            let mut p = ep.initial_prior[s[0]] * ep.frames[0].loglik[s[0]].exp();
            for t in 1..4 {
                p *= truth.prob(s[t - 1], s[t]) * ep.frames[t].loglik[s[t]].exp();
            }
            total += p * truth.exit_prob(s[3]);
        }
        assert_relative_eq!(forward_loglik(&truth, &ep).unwrap(), total.ln(), epsilon = 1e-10);
    }

    #[test]
    fn encoder_decoder_columns() {
        let z = DrVae::zeros(4);
        for x in z.encoder_forward(&[0.0, -1.0, -50.0, 0.0]).iter().chain(&z.decoder_forward()) {
            assert_relative_eq!(*x, (0.25f64).ln(), epsilon = 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = DrVae::new(4, &mut rng);
        for m in [v.encoder_forward(&[-3.0, 0.0, -1.0, -50.0]), v.decoder_forward()] {
            for c in 0..4 {
                let s: f64 = (0..4).map(|r| m[r * 4 + c].exp()).sum();
                assert_relative_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
        let logits: Vec<f64> = (0..16).map(|i| i as f64 * 0.3).collect();
        let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, x)| x + (i % 4) as f64 * 7.0).collect();
        for (a, b) in column_log_softmax(&logits, 4).iter().zip(column_log_softmax(&shifted, 4)) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn gumbel_dominant_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..1000).all(|_| gumbel_sample_state(&[0.0, 50.0, 0.0], &mut rng) == 1));
        let mut counts = [0u64; 4];
        for _ in 0..100_000 {
            counts[gumbel_sample_state(&[0.0; 4], &mut rng)] += 1;
        }
        assert!(chi2_p(&counts, &[0.25; 4]) > 0.01);
        let logits = [0.3, -1.0, 1.2, 0.0];
        let z: f64 = logits.iter().map(|x: &f64| x.exp()).sum();
        let probs: Vec<f64> = logits.iter().map(|x| x.exp() / z).collect();
        let mut counts = [0u64; 4];
        for _ in 0..100_000 {
            counts[gumbel_sample_state(&logits, &mut rng)] += 1;
        }
        assert!(chi2_p(&counts, &probs) > 0.01);
    }

    #[test]
    fn elbo_empty_and_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = DrVae::new(3, &mut rng);
        assert_eq!(v.elbo_estimate(&Belief::uniform(3), &[], 4, &mut rng).0, 0.0);
        assert_eq!(v.elbo_estimate(&Belief::uniform(3), &[vec![0.0; 3]], 4, &mut rng).0, 0.0);
        // zero nets give q = p, so the ratio term vanishes
        let same = DrVae::zeros(3);
        let ls = vec![vec![-1.0, -2.0, 0.0], vec![0.0, -3.0, -1.0], vec![-0.5, 0.0, -2.0]];
        let nz = same.sample_noise(&Belief::uniform(3), &ls, &mut rng);
        let (val, states) = same.trajectory(
            &ls.iter().map(|l| same.encoder_forward(l)).collect::<Vec<_>>(),
            &same.decoder_forward(),
            &ls,
            &nz,
            1.0,
            Relaxation::StraightThrough,
            None,
        );
        let want: f64 = (1..3).map(|t| ls[t][states[t]]).sum();
        assert_relative_eq!(val, want, epsilon = 1e-12);
    }

    fn directional_fd<F: Fn(&DrVae) -> f64>(v: &DrVae, enc: bool, dir: &[f64], f: F) -> f64 {
        let h = 1e-5;
        let shift = |s: f64| {
            let mut w = v.clone();
            let p = if enc { &mut w.encoder.params } else { &mut w.decoder.params };
            for (x, d) in p.iter_mut().zip(dir) {
                *x += s * d;
            }
            f(&w)
        };
        (shift(h) - shift(-h)) / (2.0 * h)
    }

    #[test]
    fn decoder_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = DrVae::new(3, &mut rng);
        let ls: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| -rng.random::<f64>() * 3.0).collect()).collect();
        let noise: Vec<TrajectoryNoise> = (0..3).map(|_| v.sample_noise(&Belief::uniform(3), &ls, &mut rng)).collect();
        let g = v.objective_with_noise(&ls, &noise, 1.0, Relaxation::StraightThrough);
        let dir: Vec<f64> = (0..g.decoder.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let fd = directional_fd(&v, false, &dir, |w| w.objective_with_noise(&ls, &noise, 1.0, Relaxation::StraightThrough).elbo);
        let an = dot(&g.decoder, &dir);
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
    }

    #[test]
    fn relaxed_encoder_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = DrVae::new(3, &mut rng);
        let ls: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| -rng.random::<f64>() * 20.0).collect()).collect();
        let noise: Vec<TrajectoryNoise> = (0..2).map(|_| v.sample_noise(&Belief::uniform(3), &ls, &mut rng)).collect();
        let g = v.objective_with_noise(&ls, &noise, 1.0, Relaxation::Full);
        let dir: Vec<f64> = (0..g.encoder.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let fd = directional_fd(&v, true, &dir, |w| w.objective_with_noise(&ls, &noise, 1.0, Relaxation::Full).elbo);
        let an = dot(&g.encoder, &dir);
        assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
    }

    #[test]
    fn trainer_rows_stochastic_and_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = chain(3, &mut rng, 0.05);
        let ef = FeedbackModel::error_free(params(), 3);
        let eps: Vec<EpisodeLog> = (0..5).map(|_| synthetic_episode(&truth, &ef, &Belief::uniform(3), 100, &mut rng)).collect();
        let cfg = TrainConfig { max_epochs: 5, ..Default::default() };
        let exit = naive_exit_probabilities(&eps, 3);
        let t = train_drvae(&eps, cfg, &mut rng, |t| {
            let m = t.vae.transition_model(&exit).unwrap();
            for s in 0..3 {
                assert_relative_eq!(m.row(s).iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            }
        })
        .unwrap();
        assert_eq!(t.elbo_trace.len(), 5);
        let mut buf = Vec::new();
        t.save(&mut buf).unwrap();
        assert_eq!(DrVaeTrainer::load(&buf[..]).unwrap(), t);
    }

    #[test]
    fn convergence_and_hybrid() {
        let cfg = TrainConfig { convergence_window: 3, ..Default::default() };
        let trace = [-10.0, -8.0, -6.0, -5.0, -5.0, -5.0, -5.0, -5.0, -5.0];
        assert_eq!(convergence_epoch(&trace, 3, 1e-3), Some(8));
        let a = TransitionModel::uniform(2);
        let b = naive_estimate(&[(0, 1)], 2);
        assert!(std::ptr::eq(hybrid_schedule(&a, &b, &trace[..8], &cfg), &a));
        assert!(std::ptr::eq(hybrid_schedule(&a, &b, &trace, &cfg), &b));
    }

    #[test]
    fn curves_csv() {
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &[CurvePoint { epoch: 1, elbo: -2.5, kl: Some(0.1) }, CurvePoint { epoch: 2, elbo: -2.0, kl: None }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,elbo,kl\n1,-2.500000000,0.100000000\n2,-2.000000000,\n");
    }
}
