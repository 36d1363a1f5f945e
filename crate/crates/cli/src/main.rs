//! `failgen`: Monte Carlo failure search, generator training, sampling,
//! evaluation, replay and plotting.
//!
//! Settings come from the built-in defaults, then the `--config` TOML file,
//! then command-line flags. Exit status is 0 on success, 1 on a runtime
//! failure and 2 on a usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use failgen_core::cem::{cem_train, GaussianProposal, ProposalFile};
use failgen_core::config::RunConfig;
use failgen_core::env::SimEnvironment;
use failgen_core::io::{self, EpisodeRecord, FileHeader, KIND_MC, KIND_SAMPLES};
use failgen_core::mc::{mc_search, replay, McRunSpec};
use failgen_core::plot;
use failgen_core::sampling::{evaluate, generate, Generator};
use failgen_core::sim::Scenario;
use failgen_core::trainer::{load_model, EliteTrainer, Persistence, StageReport};
use failgen_core::{Error, Result};

#[derive(Parser)]
#[command(name = "failgen", version, about = "Failure search and generation for an intersection driving scenario")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo failure search under the prior noise model.
    Mc(McArgs),
    /// Train a failure generator.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Draw episodes from a trained generator and simulate them.
    Sample(SampleArgs),
    /// Compare generated failures against reference failures.
    Evaluate(EvaluateArgs),
    /// Render failure trajectories in relative-position space as SVG.
    Plot(PlotArgs),
    /// Re-run recorded episodes and check their robustness.
    Replay(ReplayArgs),
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Multi-stage elite training of the conditional diffusion model.
    Diffusion(TrainArgs),
    /// Cross-entropy baseline with a diagonal Gaussian proposal.
    Cem(TrainArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core. Overrides `mc.workers`.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    scenario: Scenario,
    #[arg(long)]
    episodes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `mc.checkpoint_interval`.
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenario: Scenario,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from the latest stage checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["ckpt", "proposal"]))]
struct SampleArgs {
    /// Diffusion model checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Cross-entropy proposal file.
    #[arg(long)]
    proposal: Option<PathBuf>,
    #[arg(long)]
    scenario: Scenario,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Robustness the diffusion model is conditioned on.
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference failures, usually Monte Carlo output.
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    generated: PathBuf,
    /// Overrides `metrics.k`.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    max_trajectories: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReplayArgs {
    /// Monte Carlo or sample file.
    #[arg(long)]
    input: PathBuf,
    /// Only this episode index.
    #[arg(long)]
    episode: Option<u64>,
    /// Trajectory of the (single) replayed episode as JSON lines.
    #[arg(long, requires = "episode")]
    trajectory_out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = common.workers {
        cfg.mc.workers = w;
    }
    if cfg.mc.workers > 0 {
        // only the first call can size the global pool; later calls are no-ops
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.mc.workers).build_global();
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn cmd_mc(a: McArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(i) = a.checkpoint_interval {
        cfg.mc.checkpoint_interval = i;
    }
    let env = SimEnvironment::new(a.scenario, cfg.world.clone())?;
    let spec = McRunSpec {
        scenario: a.scenario,
        episode_count: a.episodes,
        master_seed: a.seed,
        output: a.out,
        checkpoint_interval: cfg.mc.checkpoint_interval,
        workers: cfg.mc.workers,
    };
    let summary = mc_search(&env, &spec, &cfg.hash(), |done, fails| {
        eprintln!("{done}/{} episodes, {fails} failures", a.episodes);
    })?;
    print_json(&summary)
}

fn stage_line(r: &StageReport) {
    eprintln!(
        "stage {}: cutoff {:.5}, batch failure rate {:.4}, elites {}, {:.1}s",
        r.stage, r.rho_tilde, r.batch_failure_rate, r.elite_count, r.seconds
    );
    let _ = print_json(r);
}

fn finish_report(out_dir: &Path, scenario: Scenario, report: &impl serde::Serialize, name: &str) -> Result<()> {
    let path = out_dir.join(format!("{scenario}-{name}.json"));
    io::write_atomic(&path, |w| Ok(serde_json::to_writer_pretty(&mut *w, report)?))?;
    print_json(report)
}

fn cmd_train_diffusion(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let env = SimEnvironment::new(a.scenario, cfg.world.clone())?;
    let hash = cfg.hash();
    let mut trainer = EliteTrainer::<f32, _>::new(&env, cfg.trainer.clone(), cfg.diffusion.clone(), a.seed)?
        .with_persistence(Persistence {
            out_dir: a.out_dir.clone(),
            config_hash: hash,
        });
    if a.resume {
        match trainer.resume()? {
            Some(stage) => {
                eprintln!("resuming after stage {stage}");
                for r in trainer.report().stages {
                    let _ = print_json(&r);
                }
            }
            None => eprintln!("nothing to resume, starting fresh"),
        }
    }
    let report = trainer.run(stage_line)?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    finish_report(&a.out_dir, a.scenario, &report, "diffusion-report")
}

fn cmd_train_cem(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    if a.resume {
        return Err(Error::Config("the cross-entropy baseline retrains in seconds and does not resume".into()));
    }
    let env = SimEnvironment::new(a.scenario, cfg.world.clone())?;
    let (proposal, report) = cem_train(&env, &cfg.trainer, &cfg.cem, a.seed, |r, _| stage_line(r))?;
    let file = ProposalFile::new(proposal, a.scenario, &cfg.hash());
    io::write_atomic(&a.out_dir.join(format!("{}-cem.json", a.scenario)), |w| {
        Ok(serde_json::to_writer(&mut *w, &file)?)
    })?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    finish_report(&a.out_dir, a.scenario, &report, "cem-report")
}

fn read_proposal(path: &Path, hash: &str, scenario: Scenario) -> Result<GaussianProposal> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let file: ProposalFile = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    file.check(Some(hash))?;
    if file.scenario != scenario {
        return Err(Error::Incompatible(format!("proposal is for scenario {}", file.scenario)));
    }
    Ok(file.proposal)
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let hash = cfg.hash();
    let env = SimEnvironment::new(a.scenario, cfg.world.clone())?;
    let mut header = FileHeader::new(KIND_SAMPLES, &hash, a.scenario);
    let records = if let Some(ck) = &a.ckpt {
        let (model, meta) = load_model::<f32>(ck)?;
        if meta.config_hash != hash {
            return Err(Error::Incompatible(format!(
                "checkpoint was produced with config {} but the current config is {hash}",
                meta.config_hash
            )));
        }
        if meta.scenario != a.scenario {
            return Err(Error::Incompatible(format!("checkpoint is for scenario {}", meta.scenario)));
        }
        header.meta = serde_json::json!({ "generator": "diffusion", "seed": a.seed, "threshold": a.threshold });
        generate(&env, &Generator::Diffusion(&model), a.count, a.threshold, a.seed)?
    } else {
        let path = a.proposal.as_ref().expect("clap enforces one source");
        let p = read_proposal(path, &hash, a.scenario)?;
        header.meta = serde_json::json!({ "generator": "cem", "seed": a.seed });
        generate::<f32, _>(&env, &Generator::Proposal(&p), a.count, a.threshold, a.seed)?
    };
    io::write_jsonl_file(&a.out, &header, &records)?;
    let failures = records.iter().filter(|r| r.is_failure()).count();
    print_json(&serde_json::json!({
        "count": records.len(),
        "failures": failures,
        "failure_rate": failures as f64 / records.len().max(1) as f64,
    }))
}

/// Records of a Monte Carlo or sample file written under `hash`.
fn read_episodes(path: &Path, hash: &str) -> Result<(FileHeader, Vec<EpisodeRecord>)> {
    let (h, recs) = io::read_jsonl_file::<EpisodeRecord>(path)?;
    let kind = if h.kind == KIND_MC { KIND_MC } else { KIND_SAMPLES };
    h.expect(kind, Some(hash))
        .map_err(|e| Error::Incompatible(format!("{}: {e}", path.display())))?;
    Ok((h, recs))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(k) = a.k {
        cfg.metrics.k = k;
    }
    let hash = cfg.hash();
    let (hr, real) = read_episodes(&a.real, &hash)?;
    let (hg, gen) = read_episodes(&a.generated, &hash)?;
    if hr.scenario != hg.scenario {
        return Err(Error::Incompatible(format!(
            "reference is {} but generated samples are {}",
            hr.scenario, hg.scenario
        )));
    }
    let report = evaluate(&real, &gen, &cfg.world, cfg.metrics.k)?;
    eprint!("{}", report.table());
    print_json(&report)
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let (_, recs) = read_episodes(&a.samples, &cfg.hash())?;
    let failures: Vec<&EpisodeRecord> = recs.iter().filter(|r| r.is_failure()).take(a.max_trajectories).collect();
    if failures.is_empty() {
        return Err(Error::Empty(format!("{} has no failure trajectories", a.samples.display())));
    }
    let trajs = failures
        .iter()
        .map(|r| Ok(replay(r, &cfg.world)?.relative_positions()))
        .collect::<Result<Vec<_>>>()?;
    let svg = plot::render(&trajs, &cfg.world);
    io::write_atomic(&a.out, |w| {
        std::io::Write::write_all(w, svg.as_bytes())?;
        Ok(())
    })?;
    print_json(&serde_json::json!({ "trajectories": trajs.len(), "out": a.out }))
}

fn cmd_replay(a: ReplayArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let (_, recs) = read_episodes(&a.input, &cfg.hash())?;
    let chosen: Vec<&EpisodeRecord> = recs
        .iter()
        .filter(|r| a.episode.is_none_or(|e| r.episode_index == e))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Empty("no matching episodes".into()));
    }
    let mut mismatches = 0;
    for r in &chosen {
        let res = replay(r, &cfg.world)?;
        let ok = res.rho.to_bits() == r.rho.to_bits();
        mismatches += usize::from(!ok);
        print_json(&serde_json::json!({
            "episode_index": r.episode_index,
            "rho_recorded": r.rho,
            "rho_replayed": res.rho,
            "collided": res.collided,
            "match": ok,
        }))?;
        if let Some(p) = &a.trajectory_out {
            io::write_atomic(p, |w| res.write_trajectory_jsonl(w))?;
        }
    }
    if mismatches > 0 {
        return Err(Error::Incompatible(format!("{mismatches} episodes did not reproduce")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mc(a) => cmd_mc(a),
        Command::Train(TrainCommand::Diffusion(a)) => cmd_train_diffusion(a),
        Command::Train(TrainCommand::Cem(a)) => cmd_train_cem(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
