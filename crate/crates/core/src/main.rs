use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use beamtrack::baselines::StssConfig;
use beamtrack::feedback::{BinarySnrParams, FeedbackModel};
use beamtrack::harness::{
    Experiment, ExperimentConfig, FeedbackMode, LearnerKind, ModelSource, PolicyKind,
    RunCommand, RunManifest, MANIFEST_FILE,
};
use beamtrack::mdp::mdp_value_iteration;
use beamtrack::mobility::stream_rng;
use beamtrack::pomdp::Belief;
use beamtrack::scenario::Scenario;
use beamtrack::Result;

#[derive(Parser)]
#[command(name = "beamtrack", version, about = "Beam tracking policies and beam-dynamics learning for mm-wave links")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Highway,
    TShaped,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "highway")]
    preset: Preset,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    rho_db: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    feedback_mode: Option<FeedbackModeArg>,
    #[arg(long, value_enum)]
    model_source: Option<ModelSourceArg>,
    #[arg(long)]
    belief_set_size: Option<usize>,
    /// Table-scale belief set and episode count (slow).
    #[arg(long)]
    full_scale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeedbackModeArg {
    Analytic,
    Full3d,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelSourceArg {
    GroundTruth,
    Learned,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PolicyArg {
    Pbvi,
    Mdp,
    ErMdp,
    Exos,
    Stss,
    Genie,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum LearnerArg {
    Naive,
    Bw,
    Drvae,
    Hybrid,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate feedback thresholds and write per-size error probabilities.
    Calibrate {
        #[arg(long, default_value_t = 20.0)]
        snr_db: f64,
        #[arg(long, default_value_t = -10.2)]
        rho_db: f64,
        #[arg(long, default_value_t = 32.0)]
        l_sy: f64,
        #[arg(long, default_value_t = 15)]
        max_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a scenario and write its sector map.
    BuildScenario {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        rho_draws: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize a policy and save it as JSON.
    Optimize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        policy: PolicyArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo campaign.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "all")]
        policy: Vec<PolicyArg>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the online learning loop.
    Learn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "drvae")]
        learner: LearnerArg,
        #[arg(long, value_enum, default_value = "pbvi")]
        policy: PolicyArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Re-run a manifest into a directory and print its metrics.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn policy_kind(p: PolicyArg) -> Option<PolicyKind> {
    Some(match p {
        PolicyArg::Pbvi => PolicyKind::Pbvi,
        PolicyArg::Mdp => PolicyKind::Mdp,
        PolicyArg::ErMdp => PolicyKind::ErMdp,
        PolicyArg::Exos => PolicyKind::Exos,
        PolicyArg::Stss => PolicyKind::Stss,
        PolicyArg::Genie => PolicyKind::Genie,
        PolicyArg::All => return None,
    })
}

fn expand(ps: &[PolicyArg]) -> Vec<PolicyKind> {
    if ps.contains(&PolicyArg::All) {
        return PolicyKind::ALL.to_vec();
    }
    let mut out: Vec<PolicyKind> = ps.iter().filter_map(|&p| policy_kind(p)).collect();
    out.dedup();
    out
}

fn build_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::from_toml_str(&std::fs::read_to_string(p)?)?,
        None => match a.preset {
            Preset::Highway => ExperimentConfig::default(),
            Preset::TShaped => ExperimentConfig::t_shaped(),
        },
    };
    if a.full_scale {
        eprintln!("warning: full scale runs take hours on a desktop");
        c = c.full_scale();
    }
    if let Some(v) = a.snr_db {
        c.snr_ba_db = v;
    }
    if let Some(v) = a.rho_db {
        c.rho_db = v;
    }
    if let Some(v) = a.episodes {
        c.episodes = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.belief_set_size {
        c.belief_set_size = v;
    }
    if let Some(v) = a.feedback_mode {
        c.feedback_mode = match v {
            FeedbackModeArg::Analytic => FeedbackMode::Analytic,
            FeedbackModeArg::Full3d => FeedbackMode::Full3d,
        };
    }
    if let Some(v) = a.model_source {
        c.model_source = match v {
            ModelSourceArg::GroundTruth => ModelSource::GroundTruth,
            ModelSourceArg::Learned => ModelSource::Learned,
        };
    }
    Ok(c)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn print_metrics(dir: &Path) -> Result<()> {
    let metrics = dir.join("metrics.csv");
    if metrics.exists() {
        print!("{}", std::fs::read_to_string(metrics)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate { snr_db, rho_db, l_sy, max_size, out } => {
            let m = FeedbackModel::calibrate(BinarySnrParams::from_db(snr_db, rho_db, l_sy)?, max_size)?;
            let mut w = output(&out)?;
            writeln!(w, "size,eta,p_corr,p_md,p_fa,p_wrong")?;
            for e in &m.sizes {
                writeln!(w, "{},{:.9},{:.9},{:.9},{:.9},{:.9}", e.size, e.eta.unwrap_or(f64::NAN), e.p_corr, e.p_md, e.p_fa, e.p_wrong())?;
            }
        }
        Command::BuildScenario { cfg, rho_draws, out } => {
            let c = build_config(&cfg)?;
            let mut sc = c.scenario.clone();
            sc.snr_ba_db = c.snr_ba_db;
            let s = Scenario::build(sc)?;
            let rho = s.estimate_rho(rho_draws, &mut stream_rng(c.seed, 0));
            eprintln!(
                "active SBPIs {}  power ratio {:.2} dB  rho worst {:.2} dB mean {:.2} dB",
                s.n_states(),
                10.0 * s.sector_map.power_ratio().log10(),
                10.0 * rho.worst_case.log10(),
                10.0 * rho.mean.log10()
            );
            s.write_sector_csv(output(&out)?)?;
        }
        Command::Optimize { cfg, policy, out } => {
            let c = build_config(&cfg)?;
            let mut exp = Experiment::new(c)?;
            let w = BufWriter::new(File::create(&out)?);
            match policy_kind(policy) {
                Some(PolicyKind::Pbvi) => exp.optimize_pbvi(&exp.ground_truth)?.save(w)?,
                Some(PolicyKind::Mdp | PolicyKind::ErMdp) => {
                    mdp_value_iteration(&Belief::uniform(exp.scenario.n_states()), &exp.reward)?.save(w)?
                }
                Some(PolicyKind::Stss) => {
                    exp.prepare(&[PolicyKind::Stss])?;
                    let s: StssConfig = exp.stss;
                    serde_json::to_writer(w, &s)?;
                }
                _ => return Err(beamtrack::Error::Config("optimize supports pbvi, mdp, er_mdp and stss".into())),
            }
        }
        Command::Simulate { cfg, policy, out_dir } => {
            let c = build_config(&cfg)?;
            RunManifest::new(RunCommand::Simulate { policies: expand(&policy) }, &c).execute(&out_dir)?;
            print_metrics(&out_dir)?;
        }
        Command::Learn { cfg, learner, policy, epochs, out_dir } => {
            let mut c = build_config(&cfg)?;
            c.learner = match learner {
                LearnerArg::Naive => LearnerKind::Naive,
                LearnerArg::Bw => LearnerKind::Bw,
                LearnerArg::Drvae => LearnerKind::Drvae,
                LearnerArg::Hybrid => LearnerKind::Hybrid,
            };
            c.policy = policy_kind(policy).unwrap_or(PolicyKind::Pbvi);
            c.model_source = ModelSource::Learned;
            if let Some(e) = epochs {
                c.learning_epochs = e;
            }
            RunManifest::new(RunCommand::Learn, &c).execute(&out_dir)?;
            eprintln!("wrote {}", out_dir.join(MANIFEST_FILE).display());
        }
        Command::Report { manifest, out_dir } => {
            let m = RunManifest::load(&manifest)?;
            let done = m.execute(&out_dir)?;
            if !m.outputs.is_empty() {
                let base = manifest.parent().unwrap_or(Path::new("."));
                for f in &done.outputs {
                    let same = std::fs::read(base.join(f)).ok() == Some(std::fs::read(out_dir.join(f))?);
                    eprintln!("{f}: {}", if same { "identical" } else { "differs" });
                }
            }
            print_metrics(&out_dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
