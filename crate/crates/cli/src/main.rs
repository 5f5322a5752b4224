use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use segadapt::checkpoint::{load_checkpoint, load_for_resume};
use segadapt::config::{Phase, TrainConfig};
use segadapt::eval::ConfusionMatrix;
use segadapt::mil::PseudoLabel;
use segadapt::model;
use segadapt::report::{self, EvalRecord, RunReport};
use segadapt::stats::{compute_stats, save_stats};
use segadapt::synth::{self, Labels, Preset, Split};
use segadapt::trainer::{
    load_datasets, read_metrics, run_phase, EpochRecord, Observer, RunDir, StepRecord, TrainState,
    METRICS_FILE,
};

const LOCK_FILE: &str = ".segadapt.lock";

#[derive(Parser)]
#[command(name = "segadapt", version, about = "Adversarial and constraint-based domain adaptation for segmentation")]
struct Cli {
    /// Root for every relative path; SEGADAPT_WORKDIR takes precedence.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source, source_val, target and target_test splits.
    GenData {
        #[arg(long)]
        preset: PresetArg,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Training images per domain; validation and test splits get n/4.
        #[arg(long, default_value_t = 200)]
        n: usize,
    },
    /// Compute per-class coverage statistics from a labelled manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training phase.
    Train {
        #[arg(long)]
        phase: PhaseArg,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to continue from. Without it, `ga` and `ga-ca` start
        /// from the previous phase's final checkpoint in the run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write per-image constraint records under `constraints/`.
        #[arg(long)]
        dump_constraints: bool,
    },
    /// Score a checkpoint on a labelled manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate evaluation files into a table and a bar plot.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        evals: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Small,
    Medium,
    Large,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Small => Preset::Small,
            PresetArg::Medium => Preset::Medium,
            PresetArg::Large => Preset::Large,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Source,
    Ga,
    GaCa,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Source => Phase::Source,
            PhaseArg::Ga => Phase::Ga,
            PhaseArg::GaCa => Phase::GaCa,
        }
    }
}

/// Exclusive claim on a workdir, released on drop.
struct WorkdirLock(PathBuf);

impl WorkdirLock {
    fn acquire(workdir: &Path) -> Result<Self> {
        std::fs::create_dir_all(workdir)
            .with_context(|| format!("creating workdir {}", workdir.display()))?;
        let path = workdir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).ok();
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "workdir {} is locked by another segadapt process (remove {} if it is stale)",
                workdir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workdir = std::env::var_os("SEGADAPT_WORKDIR")
        .map(PathBuf::from)
        .unwrap_or(cli.workdir);
    let result = WorkdirLock::acquire(&workdir).and_then(|_lock| run(&workdir, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(wd: &Path, command: Command) -> Result<()> {
    match command {
        Command::GenData { preset, seed, out, n } => gen_data(wd, preset.into(), seed, &out, n),
        Command::Stats { manifest, out } => stats(wd, &manifest, &out),
        Command::Train {
            phase,
            config,
            resume,
            dump_constraints,
        } => train(wd, phase.into(), &config, resume.as_deref(), dump_constraints),
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => eval(wd, &checkpoint, &manifest, &out),
        Command::Report { evals, out } => report(wd, &evals, &out),
    }
}

fn gen_data(wd: &Path, preset: Preset, seed: u64, out: &Path, n: usize) -> Result<()> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let root = wd.join(out);
    for split in [Split::Source, Split::SourceVal, Split::Target, Split::TargetTest] {
        let count = match split {
            Split::Source | Split::Target => n,
            Split::SourceVal | Split::TargetTest => (n / 4).max(1),
        };
        let cfg = synth::preset_split_config(preset, seed, split)?;
        let dir = root.join(split.name());
        let m = synth::generate_domain(&cfg, count, split.name(), &dir)?;
        println!("{}\t{}\t{}", split.name(), m.count, dir.join(synth::MANIFEST_FILE).display());
    }
    Ok(())
}

fn stats(wd: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let (m, samples) = synth::load_dataset(&wd.join(manifest), Labels::Keep)?;
    let labels: Vec<_> = samples.into_iter().filter_map(|s| s.labels).collect();
    let stats = compute_stats(&labels, m.num_classes, &m.class_names)?;
    save_stats(&stats, &wd.join(out))?;
    for (name, s) in stats.class_names.iter().zip(&stats.classes) {
        println!(
            "{name}\talpha={:.4}\tdelta={:.4}\tgamma={:.4}\tn={}",
            s.alpha, s.delta, s.gamma, s.n
        );
    }
    Ok(())
}

/// Run-directory observer that also reports each epoch on stderr.
struct Progress(RunDir);

impl Observer for Progress {
    fn on_step(&mut self, rec: &StepRecord) -> segadapt::Result<()> {
        self.0.on_step(rec)
    }

    fn on_pseudo_labels(&mut self, phase: Phase, epoch: usize, labels: &[Option<PseudoLabel>]) -> segadapt::Result<()> {
        self.0.on_pseudo_labels(phase, epoch, labels)
    }

    fn on_epoch(&mut self, rec: &EpochRecord, state: &TrainState, phase_done: bool) -> segadapt::Result<()> {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "{} epoch {:>3}  loss {:.4}  source_val mIoU {}  target_test mIoU {}",
            rec.phase,
            rec.epoch,
            rec.total_loss,
            f(rec.source_val_miou),
            f(rec.target_test_miou)
        );
        self.0.on_epoch(rec, state, phase_done)
    }
}

fn train(wd: &Path, phase: Phase, config: &Path, resume: Option<&Path>, dump: bool) -> Result<()> {
    let cfg = TrainConfig::load(&wd.join(config))?;
    let hash = cfg.hash();
    let data = load_datasets(&cfg, wd)?;
    let out = wd.join(&cfg.output);
    let mut state = match resume {
        Some(p) => load_for_resume(&wd.join(p), &hash)?.state,
        None if phase == Phase::Source => TrainState::init(&cfg)?,
        None => {
            let prev = Phase::ALL[phase.index() - 1];
            let p = out.join("checkpoints").join(format!("{prev}.ckpt"));
            if !p.exists() {
                bail!(
                    "no --resume given and {} does not exist; run `train --phase {prev}` first",
                    p.display()
                );
            }
            load_for_resume(&p, &hash)?.state
        }
    };
    let mut run = RunDir::open(&out, &cfg, &state)?;
    run.dump_constraints = dump;
    let ckpt = run.phase_checkpoint(phase);
    let records = run_phase(&mut state, phase, &data, &cfg, &mut Progress(run))?;
    if records.is_empty() {
        eprintln!("{phase}: nothing to do, the state already completed this phase");
    }
    let history = read_metrics(&out.join(METRICS_FILE))?;
    report::save_png(&report::loss_chart(&history), &out.join("loss_curves.png"))?;
    println!("{}", ckpt.display());
    Ok(())
}

fn eval(wd: &Path, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(&wd.join(checkpoint))?;
    let params = &ck.state.params;
    let (m, samples) = synth::load_dataset(&wd.join(manifest), Labels::Keep)?;
    let c = params.arch.num_classes;
    if m.num_classes != c {
        bail!(
            "label-space mismatch: {} has {} classes, checkpoint {} predicts {c}",
            manifest.display(),
            m.num_classes,
            checkpoint.display()
        );
    }
    let mut cm = ConfusionMatrix::new(c);
    for s in &samples {
        let gt = s.labels.as_ref().expect("labels kept");
        let pred = model::predict(&model::forward_scores(params, &s.image)?);
        cm.accumulate(&pred, gt)?;
    }
    let rec = EvalRecord::new(
        ck.state.phase,
        ck.seed,
        &ck.config_hash,
        &checkpoint.display().to_string(),
        &manifest.display().to_string(),
        &m.split,
        m.class_names.clone(),
        &cm,
    )?;
    report::save_eval(&rec, &wd.join(out))?;
    let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for (name, v) in rec.class_names.iter().zip(&rec.iou) {
        println!("{name}\t{}", f(*v));
    }
    println!("mIoU\t{}", f(rec.miou));
    Ok(())
}

fn report(wd: &Path, evals: &[PathBuf], out: &Path) -> Result<()> {
    let records = evals
        .iter()
        .map(|p| report::load_eval(&wd.join(p)))
        .collect::<segadapt::Result<Vec<_>>>()?;
    let rep = RunReport::from_evals(&records)?;
    let dir = wd.join(out);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let tsv = rep.to_tsv();
    std::fs::write(dir.join("report.tsv"), &tsv).context("writing report.tsv")?;
    let json = serde_json::to_string_pretty(&rep)? + "\n";
    std::fs::write(dir.join("report.json"), json).context("writing report.json")?;
    report::save_png(&report::iou_bar_chart(&rep), &dir.join("iou_bars.png"))?;
    print!("{tsv}");
    Ok(())
}
