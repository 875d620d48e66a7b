//! Experiment orchestration: episodes of frames on a scenario, Monte Carlo
//! campaigns, the online learning loop and run manifests.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{execute_exos, execute_genie, execute_stss, StssConfig};
use crate::error::{Error, Result};
use crate::feedback::{
    detect, matched_filter_snr, success_probability, BinarySnrParams, FeedbackModel, FrameReward, Observation,
};
use crate::frame::{FrameEnv, FrameOutcome};
use crate::geometry::{effective_coefficients, sample_path_gains, PathSet};
use crate::learning::{
    baum_welch, frame_loglik, kl_scoreboard, naive_estimate, naive_exit_probabilities, BaumWelchConfig,
    DrVaeTrainer, EpisodeLog, FrameRecord, TrainConfig,
};
use crate::mdp::{execute_er_mdp, execute_mdp, mdp_value_iteration};
use crate::mobility::{estimate_ground_truth, generate_trajectory, sbpi_sequence, stream_rng, MobilityParams, TransitionModel};
use crate::pomdp::{execute_pbvi, pbvi_optimize, prior_propagate, sample_belief_set, Belief, BeliefSetConfig, PbviPolicy};
use crate::scenario::{Scenario, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Pbvi,
    Mdp,
    ErMdp,
    Exos,
    Stss,
    Genie,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [Self::Genie, Self::Pbvi, Self::ErMdp, Self::Mdp, Self::Stss, Self::Exos];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pbvi => "pbvi",
            Self::Mdp => "mdp",
            Self::ErMdp => "er_mdp",
            Self::Exos => "exos",
            Self::Stss => "stss",
            Self::Genie => "genie",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    None,
    Naive,
    Bw,
    Drvae,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    GroundTruth,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    Analytic,
    Full3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub mobility: MobilityParams,
    pub policy: PolicyKind,
    pub learner: LearnerKind,
    pub model_source: ModelSource,
    pub feedback_mode: FeedbackMode,
    pub snr_ba_db: f64,
    pub rho_db: f64,
    /// Slots per frame `K`.
    pub slots_per_frame: usize,
    /// Slot duration `T_s` (s).
    pub slot_duration: f64,
    /// Bandwidth `W_tot` (Hz).
    pub bandwidth: f64,
    /// Pilot length in symbols.
    pub l_sy: usize,
    /// STSS BT size; `None` picks the best of 1..=8 on training seeds.
    pub stss_duration: Option<usize>,
    pub belief_set_size: usize,
    pub episodes: usize,
    pub seed: u64,
    pub max_frames: usize,
    pub ground_truth_trajectories: usize,
    pub training: TrainConfig,
    pub learning_epochs: usize,
    pub eval_episodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::highway(),
            mobility: MobilityParams::default(),
            policy: PolicyKind::Pbvi,
            learner: LearnerKind::None,
            model_source: ModelSource::GroundTruth,
            feedback_mode: FeedbackMode::Analytic,
            snr_ba_db: 20.0,
            rho_db: -10.2,
            slots_per_frame: 50,
            slot_duration: 400e-6,
            bandwidth: 100e6,
            l_sy: 32,
            stss_duration: None,
            belief_set_size: 200,
            episodes: 1000,
            seed: 1,
            max_frames: 5000,
            ground_truth_trajectories: 2000,
            training: TrainConfig::default(),
            learning_epochs: 200,
            eval_episodes: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn t_shaped() -> Self {
        Self { scenario: ScenarioConfig::t_shaped(), rho_db: -8.2, ..Self::default() }
    }

    /// Table-scale belief set and episode count.
    pub fn full_scale(mut self) -> Self {
        self.belief_set_size = 2000;
        self.episodes = 100_000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.policy == PolicyKind::Genie && self.model_source != ModelSource::GroundTruth {
            return Err(Error::Config("genie needs the ground-truth model".into()));
        }
        if self.slots_per_frame < 3 || !(self.slot_duration > 0.0) || !(self.bandwidth > 0.0) || self.l_sy == 0 {
            return Err(Error::Config("need K >= 3 and positive T_s, W and L_sy".into()));
        }
        self.mobility.validate()?;
        self.training.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Everything shared by the episodes of a campaign.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scenario: Scenario,
    pub ground_truth: TransitionModel,
    pub feedback: FeedbackModel,
    pub error_free: FeedbackModel,
    pub reward: FrameReward,
    pub bits_per_slot: u64,
    pub pbvi: Option<PbviPolicy>,
    pub stss: StssConfig,
}

impl Experiment {
    /// Builds the scenario, ground truth and feedback model. The PBVI policy
    /// and STSS duration are prepared lazily by [`Experiment::prepare`].
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut sc = config.scenario.clone();
        sc.snr_ba_db = config.snr_ba_db;
        let scenario = Scenario::build(sc)?;
        let n = scenario.n_states();
        let ground_truth = estimate_ground_truth(
            config.ground_truth_trajectories,
            &config.mobility,
            &scenario,
            config.max_frames,
            config.seed ^ 0x6774_7275_7468,
        )?;
        let params = BinarySnrParams::from_db(config.snr_ba_db, config.rho_db, config.l_sy as f64)?;
        let feedback = FeedbackModel::calibrate(params, n)?;
        let error_free = FeedbackModel::error_free(params, n);
        let reward = FrameReward { se_ba: params.se_ba, k: config.slots_per_frame };
        let bits_per_slot = (params.rate * config.bandwidth * config.slot_duration).round() as u64;
        let stss = StssConfig { bt_duration: config.stss_duration.unwrap_or(1) };
        Ok(Self { config, scenario, ground_truth, feedback, error_free, reward, bits_per_slot, pbvi: None, stss })
    }

    /// Optimizes whatever `policies` need.
    pub fn prepare(&mut self, policies: &[PolicyKind]) -> Result<()> {
        if policies.contains(&PolicyKind::Pbvi) && self.pbvi.is_none() {
            self.pbvi = Some(self.optimize_pbvi(&self.ground_truth.clone())?);
        }
        if policies.contains(&PolicyKind::Stss) && self.config.stss_duration.is_none() {
            self.stss = self.sweep_stss()?;
        }
        Ok(())
    }

    /// Belief set with scenario rows of `model` as extra points.
    pub fn optimize_pbvi(&self, model: &TransitionModel) -> Result<PbviPolicy> {
        let n = self.scenario.n_states();
        let mut extra = Vec::new();
        for s in 0..n {
            let mut b = Belief::corner(n, s);
            for _ in 0..3 {
                b = prior_propagate(&b, model);
                extra.push(b.probs().to_vec());
            }
        }
        let cfg = BeliefSetConfig { size: self.config.belief_set_size, ..Default::default() };
        let set = sample_belief_set(n, &cfg, &extra, &mut stream_rng(self.config.seed ^ 0x6265_6c69_6566, 0));
        pbvi_optimize(&set, &self.feedback, &self.reward)
    }

    /// Best STSS duration in 1..=8 on training seeds.
    pub fn sweep_stss(&self) -> Result<StssConfig> {
        let episodes = (self.config.episodes / 5).clamp(50, 500);
        let mut best = (StssConfig { bt_duration: 1 }, f64::NEG_INFINITY);
        for d in 1..=8usize.min(self.config.slots_per_frame - 2) {
            let cfg = StssConfig { bt_duration: d };
            let m = self.campaign_with(PolicyKind::Stss, &self.ground_truth, episodes, self.config.seed ^ 0x7374_7373, Some(cfg))?;
            if m.metrics.mean_se > best.1 {
                best = (cfg, m.metrics.mean_se);
            }
        }
        Ok(best.0)
    }

    pub fn model_for(&self, source: ModelSource) -> TransitionModel {
        match source {
            ModelSource::GroundTruth => self.ground_truth.clone(),
            ModelSource::Learned => TransitionModel::uniform(self.scenario.n_states()),
        }
    }

    /// Runs episode `index` of the stream `seed`. Trajectories depend only on
    /// `(seed, index)`, so policies compared on the same pair are paired.
    pub fn run_episode(
        &self,
        policy: PolicyKind,
        model: &TransitionModel,
        seed: u64,
        index: u64,
        stss: Option<StssConfig>,
    ) -> Result<(EpisodeLog, EpisodeMetrics)> {
        let n = self.scenario.n_states();
        let k_total = self.reward.k;
        let mut traj_rng = stream_rng(seed, 3 * index);
        let mut fb_rng = stream_rng(seed, 3 * index + 1);
        let mut misc_rng = stream_rng(seed, 3 * index + 2);
        let traj = generate_trajectory(&self.config.mobility, &self.scenario, self.config.max_frames, &mut traj_rng);
        let seq = sbpi_sequence(&traj, &self.scenario);
        let exited = traj.len() < self.config.max_frames;
        let genie = policy == PolicyKind::Genie;
        let fb_model = if genie { &self.error_free } else { &self.feedback };
        let stss = stss.unwrap_or(self.stss);

        let mut frames = Vec::with_capacity(traj.len());
        let mut m = EpisodeMetrics::default();
        let mut belief = Belief::uniform(n);
        for (t, ue) in traj.iter().enumerate() {
            let s_true = seq[t];
            let prior = if t == 0 { Belief::uniform(n) } else { prior_propagate(&belief, model) };
            let pos = self.scenario.config.road.position(ue.segment, ue.lane, ue.along);
            let paths = self.scenario.sample_paths(pos, &mut misc_rng);
            let mut env = ScanEnv {
                exp: self,
                mode: self.config.feedback_mode,
                paths: &paths,
                s_true,
                error_free: genie,
                model: fb_model,
                rng: &mut fb_rng,
                cache: vec![None; n],
            };
            let out: FrameOutcome = match policy {
                PolicyKind::Pbvi => {
                    let p = self.pbvi.as_ref().ok_or_else(|| Error::Config("PBVI policy not prepared".into()))?;
                    execute_pbvi(p, &prior, &mut env, fb_model)?
                }
                PolicyKind::Mdp | PolicyKind::ErMdp => {
                    let p = mdp_value_iteration(&prior, &self.reward)?;
                    if policy == PolicyKind::Mdp {
                        execute_mdp(&p, &mut env)?
                    } else {
                        execute_er_mdp(&p, &mut env, fb_model)?
                    }
                }
                PolicyKind::Exos => execute_exos(n, &self.reward, &mut env, fb_model, &mut misc_rng)?,
                PolicyKind::Stss => execute_stss(&stss, &prior, &mut env, fb_model)?,
                PolicyKind::Genie => execute_genie(&prior, &self.reward, s_true)?,
            };
            let bt = out.bt_slots() as u64;
            if let (Some(k), Some(s)) = (out.k_dc, out.s_dc) {
                let dc = k_total.saturating_sub(k) as u64;
                m.dc_slots += dc;
                if dc > 0 && env.dc_succeeds(s) {
                    m.bits += dc * self.bits_per_slot;
                }
            }
            m.bt_slots += bt.min(k_total as u64);
            m.frames += 1;
            let loglik = frame_loglik(&out.rounds, fb_model, n);
            frames.push(FrameRecord { rounds: out.rounds, loglik, s_true });
            belief = if genie { Belief::corner(n, s_true) } else { out.belief };
        }
        m.finish(k_total, self.config.slot_duration, self.config.bandwidth);
        Ok((EpisodeLog { initial_prior: Belief::uniform(n).into_inner(), frames, exited }, m))
    }

    /// Parallel campaign over episodes `0..episodes` of stream `seed`.
    pub fn campaign_with(
        &self,
        policy: PolicyKind,
        model: &TransitionModel,
        episodes: usize,
        seed: u64,
        stss: Option<StssConfig>,
    ) -> Result<CampaignResult> {
        let rows: Vec<EpisodeMetrics> = (0..episodes as u64)
            .into_par_iter()
            .map(|i| self.run_episode(policy, model, seed, i, stss).map(|r| r.1))
            .collect::<Result<_>>()?;
        Ok(CampaignResult { policy, metrics: Metrics::from_episodes(&rows, None), episodes: rows })
    }
}

/// Per-frame feedback source bound to one UE position.
struct ScanEnv<'a, R: Rng> {
    exp: &'a Experiment,
    mode: FeedbackMode,
    paths: &'a PathSet,
    s_true: usize,
    error_free: bool,
    model: &'a FeedbackModel,
    rng: &'a mut R,
    cache: Vec<Option<Vec<Complex64>>>,
}

impl<R: Rng> ScanEnv<'_, R> {
    fn coefficients(&mut self, s: usize) -> &[Complex64] {
        if self.cache[s].is_none() {
            let bpi = self.exp.scenario.sector_map.active_sbpis[s];
            self.cache[s] = Some(effective_coefficients(&self.exp.scenario.codebooks, bpi, self.paths));
        }
        self.cache[s].as_deref().expect("filled above")
    }

    /// Fresh small-scale draw of the effective gain on state `s`, times its power.
    fn received_snr_amplitude(&mut self, s: usize) -> Complex64 {
        let draw = sample_path_gains(self.paths, self.rng);
        let a = self.coefficients(s).to_vec();
        let h: Complex64 = draw.gains.iter().zip(&a).map(|(g, c)| g * c).sum();
        h * self.exp.scenario.sector_map.tx_power[s].sqrt()
    }

    fn dc_succeeds(&mut self, s: usize) -> bool {
        let params = &self.model.params;
        match self.mode {
            FeedbackMode::Analytic => s == self.s_true && self.rng.random::<f64>() < success_probability(params.rate, params.snr_ba),
            FeedbackMode::Full3d => {
                let snr = self.received_snr_amplitude(s).norm_sqr();
                (1.0 + snr).log2() >= params.rate
            }
        }
    }
}

impl<R: Rng> FrameEnv for ScanEnv<'_, R> {
    fn scan(&mut self, set: &[usize]) -> Observation {
        if self.error_free {
            return set.contains(&self.s_true).then_some(self.s_true);
        }
        match self.mode {
            FeedbackMode::Analytic => self.model.sample(self.s_true, set, self.rng),
            FeedbackMode::Full3d => {
                let l = self.exp.config.l_sy;
                let x = vec![Complex64::new(1.0, 0.0); l];
                let gammas: Vec<f64> = set
                    .iter()
                    .map(|&j| {
                        let h = self.received_snr_amplitude(j);
                        let y: Vec<Complex64> = x
                            .iter()
                            .map(|xi| {
                                let w = Complex64::new(self.rng.sample(rand_distr::StandardNormal), self.rng.sample(rand_distr::StandardNormal))
                                    * std::f64::consts::FRAC_1_SQRT_2;
                                h * xi + w
                            })
                            .collect();
                        matched_filter_snr(&y, &x, 1.0)
                    })
                    .collect();
                let eta = self.model.entry(set.len()).eta.unwrap_or(0.0);
                detect(&gammas, set, eta)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub frames: u64,
    pub bits: u64,
    pub bt_slots: u64,
    pub dc_slots: u64,
    pub duration_s: f64,
    /// `bits / (duration W_tot)`.
    pub se: f64,
    pub bt_overhead: f64,
}

impl EpisodeMetrics {
    fn finish(&mut self, k: usize, slot: f64, bandwidth: f64) {
        let slots = self.frames * k as u64;
        self.duration_s = slots as f64 * slot;
        if slots > 0 {
            self.se = self.bits as f64 / (self.duration_s * bandwidth);
            self.bt_overhead = self.bt_slots as f64 / slots as f64;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub mean_se: f64,
    /// Half width of the 95% normal confidence interval.
    pub se_ci95: f64,
    pub bt_overhead: f64,
    pub total_bits: u64,
    pub episode_duration_s: f64,
    pub kl: Option<f64>,
}

impl Metrics {
    pub fn from_episodes(rows: &[EpisodeMetrics], kl: Option<f64>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_se = rows.iter().map(|r| r.se).sum::<f64>() / n;
        let var = if rows.len() > 1 {
            rows.iter().map(|r| (r.se - mean_se).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            episodes: rows.len(),
            mean_se,
            se_ci95: 1.96 * (var / n).sqrt(),
            bt_overhead: rows.iter().map(|r| r.bt_overhead).sum::<f64>() / n,
            total_bits: rows.iter().map(|r| r.bits).sum(),
            episode_duration_s: rows.iter().map(|r| r.duration_s).sum::<f64>() / n,
            kl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub policy: PolicyKind,
    pub metrics: Metrics,
    pub episodes: Vec<EpisodeMetrics>,
}

/// Builds the experiment and runs the configured policy.
pub fn run_campaign(config: &ExperimentConfig) -> Result<CampaignResult> {
    let mut exp = Experiment::new(config.clone())?;
    exp.prepare(&[config.policy])?;
    let model = exp.model_for(config.model_source);
    exp.campaign_with(config.policy, &model, config.episodes, config.seed, None)
}

pub fn write_metrics_csv<W: Write>(mut w: W, results: &[CampaignResult]) -> Result<()> {
    writeln!(w, "policy,episodes,mean_se,se_ci95,bt_overhead,total_bits,episode_duration_s,kl")?;
    for r in results {
        let m = &r.metrics;
        let kl = m.kl.map(|k| format!("{k:.9}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{:.9},{:.9},{:.9},{},{:.9},{}",
            r.policy.name(),
            m.episodes,
            m.mean_se,
            m.se_ci95,
            m.bt_overhead,
            m.total_bits,
            m.episode_duration_s,
            kl
        )?;
    }
    Ok(())
}

pub fn write_episodes_csv<W: Write>(mut w: W, rows: &[EpisodeMetrics]) -> Result<()> {
    writeln!(w, "episode,frames,bits,bt_slots,dc_slots,duration_s,se,bt_overhead")?;
    for (i, r) in rows.iter().enumerate() {
        writeln!(w, "{i},{},{},{},{},{:.9},{:.9},{:.9}", r.frames, r.bits, r.bt_slots, r.dc_slots, r.duration_s, r.se, r.bt_overhead)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub elbo: Option<f64>,
    pub kl: f64,
    pub mean_se: f64,
    pub bt_overhead: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningResult {
    pub curve: Vec<EpochRow>,
    pub model: TransitionModel,
}

/// Online loop: each epoch runs a batch of episodes with the current model,
/// updates the learner, and evaluates the model on held-out seeds. Epoch 0
/// uses the uniform model.
pub fn run_learning_loop(config: &ExperimentConfig) -> Result<LearningResult> {
    let mut exp = Experiment::new(config.clone())?;
    exp.prepare(&[config.policy])?;
    let n = exp.scenario.n_states();
    let mut rng = stream_rng(config.seed ^ 0x6c65_6172_6e, 0);
    let mut trainer = DrVaeTrainer::new(n, config.training.clone(), &mut rng)?;
    let mut model = TransitionModel::uniform(n);
    let mut bw_model = model.clone();
    let mut logs: Vec<EpisodeLog> = Vec::new();
    let mut pairs = Vec::new();
    let mut curve = Vec::with_capacity(config.learning_epochs + 1);
    let batch = config.training.batch;
    let eval_seed = config.seed ^ 0x6576_616c;
    for epoch in 0..=config.learning_epochs {
        let eval = exp.campaign_with(config.policy, &model, config.eval_episodes, eval_seed, None)?;
        curve.push(EpochRow {
            epoch,
            elbo: trainer.elbo_trace.last().copied(),
            kl: kl_scoreboard(&exp.ground_truth, &model),
            mean_se: eval.metrics.mean_se,
            bt_overhead: eval.metrics.bt_overhead,
        });
        if epoch == config.learning_epochs {
            break;
        }
        let new: Vec<EpisodeLog> = (0..batch as u64)
            .into_par_iter()
            .map(|i| exp.run_episode(config.policy, &model, config.seed, epoch as u64 * batch as u64 + i, None).map(|r| r.0))
            .collect::<Result<_>>()?;
        for e in &new {
            pairs.extend(e.detected_pairs());
        }
        logs.extend(new.iter().cloned());
        let uses_bw = matches!(config.learner, LearnerKind::Bw | LearnerKind::Hybrid);
        let uses_vae = matches!(config.learner, LearnerKind::Drvae | LearnerKind::Hybrid);
        if uses_bw {
            let cfg = BaumWelchConfig { max_iters: 1, ..Default::default() };
            bw_model = baum_welch(&logs, n, &cfg, Some(&bw_model))?.model;
        }
        if uses_vae {
            let refs: Vec<&EpisodeLog> = new.iter().collect();
            trainer.step(&refs, &mut rng)?;
        }
        model = match config.learner {
            LearnerKind::None => model,
            LearnerKind::Naive => naive_estimate(&pairs, n),
            LearnerKind::Bw => bw_model.clone(),
            LearnerKind::Drvae => trainer.vae.transition_model(&naive_exit_probabilities(&logs, n))?,
            LearnerKind::Hybrid => {
                if trainer.converged() {
                    trainer.vae.transition_model(&naive_exit_probabilities(&logs, n))?
                } else {
                    bw_model.clone()
                }
            }
        };
    }
    Ok(LearningResult { curve, model })
}

pub fn write_epochs_csv<W: Write>(mut w: W, rows: &[EpochRow]) -> Result<()> {
    writeln!(w, "epoch,elbo,kl,mean_se,bt_overhead")?;
    for r in rows {
        let elbo = r.elbo.map(|e| format!("{e:.9}")).unwrap_or_default();
        writeln!(w, "{},{},{:.9},{:.9},{:.9}", r.epoch, elbo, r.kl, r.mean_se, r.bt_overhead)?;
    }
    Ok(())
}

/// What a manifest runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunCommand {
    Simulate { policies: Vec<PolicyKind> },
    Learn,
}

/// Record of one run: enough to reproduce it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: RunCommand,
    pub config: ExperimentConfig,
    pub outputs: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(command: RunCommand, config: &ExperimentConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            command,
            config: config.clone(),
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Runs the command, writes its outputs and the manifest into `dir`,
    /// and returns the completed manifest.
    pub fn execute(&self, dir: &Path) -> Result<RunManifest> {
        std::fs::create_dir_all(dir)?;
        let mut outputs = Vec::new();
        let mut write = |name: String, bytes: Vec<u8>| -> Result<()> {
            std::fs::write(dir.join(&name), bytes)?;
            outputs.push(name);
            Ok(())
        };
        match &self.command {
            RunCommand::Simulate { policies } => {
                let mut exp = Experiment::new(self.config.clone())?;
                exp.prepare(policies)?;
                let model = exp.model_for(self.config.model_source);
                let mut results = Vec::new();
                for &p in policies {
                    let r = exp.campaign_with(p, &model, self.config.episodes, self.config.seed, None)?;
                    let mut buf = Vec::new();
                    write_episodes_csv(&mut buf, &r.episodes)?;
                    write(format!("episodes_{}.csv", p.name()), buf)?;
                    results.push(r);
                }
                let mut buf = Vec::new();
                write_metrics_csv(&mut buf, &results)?;
                write("metrics.csv".into(), buf)?;
            }
            RunCommand::Learn => {
                let r = run_learning_loop(&self.config)?;
                let mut buf = Vec::new();
                write_epochs_csv(&mut buf, &r.curve)?;
                write("curves.csv".into(), buf)?;
                let mut buf = Vec::new();
                r.model.write_csv(&mut buf)?;
                write("model.csv".into(), buf)?;
            }
        }
        let done = RunManifest { outputs, ..self.clone() };
        std::fs::write(dir.join(MANIFEST_FILE), done.to_json()?)?;
        Ok(done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig { episodes: 40, ground_truth_trajectories: 300, belief_set_size: 60, ..Default::default() }
    }

    #[test]
    fn config_toml_roundtrip() {
        let c = ExperimentConfig::t_shaped();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(), c);
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn genie_requires_ground_truth() {
        let c = ExperimentConfig { policy: PolicyKind::Genie, model_source: ModelSource::Learned, ..small() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn exos_overhead_is_fixed() {
        let exp = Experiment::new(small()).unwrap();
        let r = exp.campaign_with(PolicyKind::Exos, &exp.ground_truth, 10, 3, None).unwrap();
        let want = (exp.scenario.n_states() + 1) as f64 / 50.0;
        for e in &r.episodes {
            assert!((e.bt_overhead - want).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_ue_reaches_immediate_dc() {
        let mut c = small();
        c.mobility.mu_v = 0.0;
        c.mobility.sigma_v = 0.0;
        c.mobility.lane_change_prob = 0.0;
        c.max_frames = 30;
        c.ground_truth_trajectories = 5;
        let exp = Experiment::new(c).unwrap();
        let n = exp.scenario.n_states();
        // stationary UE: the true model keeps every state in place
        let mut p = vec![0.0; n * (n + 1)];
        for s in 0..n {
            p[s * (n + 1) + s] = 1.0;
        }
        let stay = TransitionModel::new(n, p).unwrap();
        let (log, m) = exp.run_episode(PolicyKind::Genie, &stay, 5, 0, None).unwrap();
        assert_eq!(log.frames.len(), 30);
        for f in &log.frames[1..] {
            assert!(f.rounds.is_empty());
        }
        assert!(m.bits > 0);
    }

    #[test]
    fn bits_add_up_and_rerun_identical() {
        let exp = Experiment::new(small()).unwrap();
        let a = exp.campaign_with(PolicyKind::Mdp, &exp.ground_truth, 20, 9, None).unwrap();
        let b = exp.campaign_with(PolicyKind::Mdp, &exp.ground_truth, 20, 9, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.total_bits, a.episodes.iter().map(|e| e.bits).sum::<u64>());
        for e in &a.episodes {
            assert_eq!(e.bits % exp.bits_per_slot, 0);
            assert!(e.bt_slots + e.dc_slots <= e.frames * 50);
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        write_metrics_csv(&mut x, &[a]).unwrap();
        write_metrics_csv(&mut y, &[b]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn manifest_roundtrip() {
        let m = RunManifest::new(RunCommand::Simulate { policies: vec![PolicyKind::Exos] }, &small());
        assert_eq!(RunManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
        let c = ExperimentConfig { episodes: 5, ..small() };
        let dir = tempfile::tempdir().unwrap();
        let done = RunManifest::new(RunCommand::Simulate { policies: vec![PolicyKind::Exos, PolicyKind::Stss] }, &c)
            .execute(dir.path())
            .unwrap();
        assert_eq!(done.outputs, ["episodes_exos.csv", "episodes_stss.csv", "metrics.csv"]);
        let again = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        again.execute(dir2.path()).unwrap();
        for f in done.outputs.iter().map(String::as_str).chain([MANIFEST_FILE]) {
            assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap());
        }
    }
}
