use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use discvae::checkpoint::Checkpoint;
use discvae::evaluation::{self, config_hash, ClusterReport, EvalReport};
use discvae::model::{AnyModel, ModelKind};
use discvae::seq::Sampling;
use discvae::synth::geometry::{integrate_commands, Pose, TICK_SECONDS};
use discvae::synth::{generate_dataset, Dataset};
use discvae::training::{self, history_table, HistoryRow, ResumeState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod config;

use config::{Overrides, Paths, Resolved, Size};

#[derive(Debug, Parser)]
#[command(name = "discvae", version, about = "Sequence clustering VAE experiments on synthetic wheelchair data")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, env = "DISCVAE_OUT", default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true, value_parser = parse_kind)]
    model: Option<ModelKind>,
    #[arg(long, global = true, value_enum)]
    size: Option<Size>,
    /// Number of clusters.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    dim_global: Option<usize>,
    #[arg(long, global = true)]
    dim_local: Option<usize>,
    #[arg(long, global = true)]
    beams: Option<usize>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    knn_k: Option<usize>,
    /// Dataset directory (default `<out>/data`).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Checkpoint directory (default `<out>/<model>/best`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate episodes and write the windowed dataset to `<out>/data`.
    GenData,
    /// Train a model and write checkpoints to `<out>/<model>`.
    Train {
        /// A previous training output directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split into `<out>/eval-<model>`.
    Eval,
    /// Cluster histogram and per-cluster rollouts for one test prefix.
    Sample {
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train one clustered model per candidate K and report test NMI.
    SelectK {
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<usize>,
    },
    /// Collect evaluation reports into one table.
    Report {
        /// Evaluation directories (default: every `<out>/eval-*`).
        #[arg(long = "from")]
        from: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval => "eval",
            Command::Sample { .. } => "sample",
            Command::SelectK { .. } => "select-k",
            Command::Report { .. } => "report",
        }
    }
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: discvae::Error| e.to_string())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut file = config::read_file(cli.config.as_deref())?;
    if let Command::Sample { index, steps, samples } = &cli.command {
        file.sample.index = index.unwrap_or(file.sample.index);
        file.sample.steps = steps.unwrap_or(file.sample.steps);
        file.sample.samples = samples.unwrap_or(file.sample.samples);
    }
    if let Command::SelectK { candidates } = &cli.command {
        if !candidates.is_empty() {
            file.select_k = candidates.clone();
        }
    }
    let flags = Overrides {
        seed: cli.seed,
        model: cli.model,
        size: cli.size,
        clusters: cli.k,
        dim_global: cli.dim_global,
        dim_local: cli.dim_local,
        beams: cli.beams,
        horizon: cli.horizon,
        epochs: cli.epochs,
        knn_k: cli.knn_k,
    };
    let kind = cli.model.unwrap_or(file.model);
    let paths = Paths {
        dataset: cli.dataset.clone().unwrap_or_else(|| cli.out.join("data")),
        checkpoint: cli
            .checkpoint
            .clone()
            .unwrap_or_else(|| cli.out.join(kind.name()).join("best")),
        out: cli.out.clone(),
    };
    let cfg = file.resolve(&flags, cli.command.name(), paths)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Train { resume } => train(&cfg, resume.as_deref()),
        Command::Eval => eval(&cfg),
        Command::Sample { .. } => sample(&cfg),
        Command::SelectK { .. } => select_k(&cfg),
        Command::Report { from } => report(&cfg, from),
    }
}

/// Builds an output directory under a temporary sibling name and renames
/// it into place only when `build` succeeds. The resolved config is
/// written first.
fn commit(target: &Path, cfg: &Resolved, build: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = target
        .file_name()
        .with_context(|| format!("output path {} has no final component", target.display()))?
        .to_string_lossy()
        .into_owned();
    let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    let result = fs::write(tmp.join("config.toml"), cfg.to_toml()?)
        .map_err(anyhow::Error::from)
        .and_then(|_| build(&tmp));
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if target.exists() {
        fs::remove_dir_all(target).with_context(|| format!("replacing {}", target.display()))?;
    }
    fs::rename(&tmp, target).with_context(|| format!("moving output into {}", target.display()))?;
    log::info!("wrote {}", target.display());
    Ok(())
}

fn load_dataset(cfg: &Resolved) -> Result<Dataset> {
    let path = &cfg.paths.dataset;
    ensure!(path.join("manifest.json").exists(), "no dataset at {} (run gen-data first)", path.display());
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(cfg: &Resolved, dataset: &Dataset) -> Result<Checkpoint> {
    let path = &cfg.paths.checkpoint;
    ensure!(path.join("manifest.json").exists(), "no checkpoint at {}", path.display());
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let beams = ckpt.model.config().beams;
    ensure!(
        beams == dataset.train.beams,
        "checkpoint expects {beams} beams but the dataset has {}",
        dataset.train.beams
    );
    Ok(ckpt)
}

fn gen_data(cfg: &Resolved) -> Result<()> {
    let dataset = generate_dataset(&cfg.data)?;
    log::info!(
        "{} train, {} validation, {} test windows",
        dataset.train.len(),
        dataset.validation.len(),
        dataset.test.len()
    );
    commit(&cfg.paths.dataset, cfg, |dir| Ok(dataset.save(dir)?))
}

fn train(cfg: &Resolved, resume: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    ensure!(
        cfg.model.beams == dataset.train.beams,
        "model expects {} beams but the dataset at {} has {}",
        cfg.model.beams,
        cfg.paths.dataset.display(),
        dataset.train.beams
    );
    let (model, state, mut history) = match resume {
        Some(dir) => {
            let ckpt = Checkpoint::load(&dir.join("last")).with_context(|| format!("loading {}", dir.display()))?;
            ensure!(
                ckpt.model.config() == cfg.model,
                "checkpoint model {:?} differs from the configured model",
                ckpt.model.config()
            );
            let optimizer = ckpt.optimizer.context("checkpoint has no optimizer state")?;
            ensure!(ckpt.epoch < cfg.train.max_epochs, "checkpoint already ran {} epochs", ckpt.epoch);
            let previous: Vec<HistoryRow> = read_json(&dir.join("history.json")).unwrap_or_default();
            let state = ResumeState {
                optimizer,
                step: ckpt.step,
                epoch: ckpt.epoch,
            };
            (ckpt.model, Some(state), previous)
        }
        None => {
            let model = AnyModel::new(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.init_seed))?;
            (model, None, Vec::new())
        }
    };
    let mut last = model.clone();
    let outcome = training::train_with(model, &dataset, &cfg.train, state, |_, m| {
        last = m.clone();
        Ok(())
    })?;
    history.extend_from_slice(&outcome.history);
    let stats = dataset.stats().clone();
    let target = cfg.paths.out.join(cfg.model.kind.name());
    commit(&target, cfg, |dir| {
        let best = Checkpoint {
            model: outcome.model.clone(),
            norm_stats: stats.clone(),
            seed: cfg.seed,
            step: outcome.step,
            epoch: outcome.best_epoch,
            train: Some(cfg.train.clone()),
            optimizer: None,
        };
        best.save(&dir.join("best"))?;
        let last = Checkpoint {
            model: last.clone(),
            norm_stats: stats.clone(),
            seed: cfg.seed,
            step: outcome.step,
            epoch: outcome.epochs_run,
            train: Some(cfg.train.clone()),
            optimizer: Some(outcome.optimizer.clone()),
        };
        last.save(&dir.join("last"))?;
        fs::write(dir.join("history.tsv"), history_table(&history))?;
        write_json(&dir.join("history.json"), &history)?;
        let summary = serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "best_validation": outcome.best_validation,
            "epochs_run": outcome.epochs_run,
            "steps": outcome.step,
            "stopped_early": outcome.stopped_early,
        });
        write_json(&dir.join("summary.json"), &summary)
    })
}

fn eval(cfg: &Resolved) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let ckpt = load_checkpoint(cfg, &dataset)?;
    let hash = config_hash(&(&ckpt.model.config(), &cfg.knn_k, &cfg.paths.dataset))?;
    let report = evaluation::evaluate(&ckpt.model, &dataset, cfg.knn_k, vec![cfg.seed], hash)?;
    let target = cfg.paths.out.join(format!("eval-{}", ckpt.model.kind().name()));
    commit(&target, cfg, |dir| write_report(dir, &report))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    let mut text = format!("{}\n{}\n", REPORT_HEADER, report_row(report));
    if let Some(c) = &report.clusters {
        for which in ["manoeuvre", "width", "mode"] {
            fs::write(dir.join(format!("clusters_{which}.tsv")), c.table(which))?;
        }
        text.push_str(&format!(
            "\nlargest single-cluster share per manoeuvre: {}\n",
            discvae::synth::Manoeuvre::ALL
                .iter()
                .map(|m| format!("{}={:.3}", m.name(), c.max_share(*m)))
                .collect::<Vec<_>>()
                .join(" ")
        ));
        debug_assert_eq!(ClusterReport::column_totals(&c.by_mode).iter().sum::<usize>(), report.test_windows);
    }
    fs::write(dir.join("summary.tsv"), text)?;
    Ok(())
}

const REPORT_HEADER: &str = "model\tknn_k\taccuracy\tmacro_f1\tmse_joystick\tmse_laser\tnmi_modes\tnmi_classes\ttest_windows";

fn report_row(r: &EvalReport) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    format!(
        "{}\t{}\t{:.3}\t{:.4}\t{}\t{}\t{}\t{}\t{}",
        r.model.kind,
        r.knn_k,
        r.accuracy,
        r.macro_f1,
        opt(r.forecast.map(|f| f.joystick)),
        opt(r.forecast.map(|f| f.laser)),
        opt(r.nmi_modes),
        opt(r.nmi_classes),
        r.test_windows
    )
}

fn sample(cfg: &Resolved) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let ckpt = load_checkpoint(cfg, &dataset)?;
    let AnyModel::Discvae(model) = &ckpt.model else {
        bail!("sampling needs a disentangled sequence model, not {}", ckpt.model.kind());
    };
    let s = cfg.sample;
    ensure!(s.index < dataset.test.len(), "test window {} out of range ({} windows)", s.index, dataset.test.len());
    ensure!(s.steps >= 1 && s.samples >= 1, "steps and samples must be positive");
    let window = dataset.test.frames(&[s.index]);
    let len = if s.prefix == 0 { window.len() } else { s.prefix };
    ensure!(len >= 1 && len <= window.len(), "prefix length must lie in 1..={}", window.len());
    let prefix = window.prefix(len);
    let probs = model.cluster_probs(&prefix)?;
    let clusters = model.components();
    let stats = &ckpt.norm_stats;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
    let mut tables = Vec::with_capacity(clusters);
    for c in 0..clusters {
        let override_cluster = model.is_mixture().then_some(c);
        let mut table = String::from("sample\tstep\tv\tomega\tx\ty\theading\tmin_range\n");
        for k in 0..s.samples {
            let r = model.predict_rollout_with(&prefix, s.steps, &mut rng, override_cluster, Sampling::Random)?;
            let commands: Vec<(f64, f64)> = r
                .steps
                .iter()
                .map(|st| stats.denormalize_command(st.joystick.row(0).as_slice().expect("contiguous")))
                .collect();
            let poses = integrate_commands(Pose::new(0.0, 0.0, 0.0), &commands, TICK_SECONDS)?;
            for (t, (st, (cmd, pose))) in r.steps.iter().zip(commands.iter().zip(&poses)).enumerate() {
                let ranges = stats.denormalize_ranges(st.laser.row(0).as_slice().expect("contiguous"));
                let min_range = ranges.iter().cloned().fold(f64::INFINITY, f64::min);
                table.push_str(&format!(
                    "{k}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                    t + 1,
                    cmd.0,
                    cmd.1,
                    pose.x,
                    pose.y,
                    pose.theta,
                    min_range
                ));
            }
        }
        tables.push(table);
    }
    let target = cfg.paths.out.join(format!("samples-{}", ckpt.model.kind().name()));
    commit(&target, cfg, |dir| {
        let mut hist = String::from("cluster\tprobability\n");
        for (c, p) in probs.row(0).iter().enumerate() {
            hist.push_str(&format!("{c}\t{p:.9}\n"));
        }
        fs::write(dir.join("histogram.tsv"), hist)?;
        for (c, t) in tables.iter().enumerate() {
            fs::write(dir.join(format!("cluster_{c:02}.tsv")), t)?;
        }
        Ok(())
    })
}

fn select_k(cfg: &Resolved) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let mut base = cfg.model.clone();
    ensure!(base.kind.is_clustered(), "model kind {} has no clusters", base.kind);
    base.beams = dataset.train.beams;
    let rows = evaluation::select_k(&dataset, &cfg.select_k, &base, &cfg.train)?;
    commit(&cfg.paths.out.join("select-k"), cfg, |dir| {
        let mut table = String::from("clusters\tnmi\tepochs\n");
        for r in &rows {
            table.push_str(&format!("{}\t{:.6}\t{}\n", r.clusters, r.nmi, r.epochs));
        }
        fs::write(dir.join("select_k.tsv"), table)?;
        write_json(&dir.join("select_k.json"), &rows)
    })
}

fn report(cfg: &Resolved, from: Vec<PathBuf>) -> Result<()> {
    let dirs = if from.is_empty() {
        let mut found: Vec<PathBuf> = fs::read_dir(&cfg.paths.out)
            .with_context(|| format!("listing {}", cfg.paths.out.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("eval-")))
            .collect();
        found.sort();
        found
    } else {
        from
    };
    ensure!(!dirs.is_empty(), "no evaluation directories found");
    let reports: Vec<EvalReport> = dirs
        .iter()
        .map(|d| read_json(&d.join("report.json")).with_context(|| format!("reading report in {}", d.display())))
        .collect::<Result<_>>()?;
    let mut table = format!("{REPORT_HEADER}\n");
    for r in &reports {
        table.push_str(&report_row(r));
        table.push('\n');
    }
    print!("{table}");
    commit(&cfg.paths.out.join("report"), cfg, |dir| Ok(fs::write(dir.join("report.tsv"), &table)?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
