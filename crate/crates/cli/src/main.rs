mod config;
mod report;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynexec::bandit::{simulate_cucb, ArmEnvironment};
use dynexec::data::{load_split, resolve_data_dir, DatasetKind, Split};
use dynexec::nn::checkpoint;
use dynexec::nn::ArchDescriptor;
use dynexec::saliency::{eval_taylor_saliencies, oracle_saliencies, spearman};
use dynexec::surgeon::{cost_report, FlopConvention};
use dynexec::trainer::{run, TrainConfig, TrainData, TrainError};

use config::{apply, fresh_run_dir, parse_pairs, Manifest};

#[derive(Parser)]
#[command(name = "dynexec", version, about = "Dynamic channel execution: training, accounting and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training pipeline and write its artifacts to a fresh run directory.
    Train(TrainArgs),
    /// Print parameter and MAC counts of an architecture.
    Count(CountArgs),
    /// Run the selection rule against synthetic arms.
    BanditSim(SimArgs),
    /// Compare Taylor saliencies with exact loss deltas on a checkpoint.
    SaliencyAudit(AuditArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run from a previous run's manifest.txt.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Root under which the run directory is created.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Dataset root (falls back to the manifest, then $DYNEXEC_DATA, then ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    selection: Option<String>,
    #[arg(long)]
    pipeline: Option<String>,
    #[arg(long)]
    freeze_epoch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    init_strategy: Option<String>,
    /// Any config key, e.g. --set lr0=0.05. Repeatable; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct CountArgs {
    /// tiny, desk or vgg19.
    #[arg(long, required_unless_present = "descriptor")]
    arch: Option<String>,
    /// JSON architecture descriptor instead of a named arch.
    #[arg(long, conflicts_with = "arch")]
    descriptor: Option<PathBuf>,
    /// CxHxW.
    #[arg(long, default_value = "3x32x32")]
    input: String,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// macs or macs+elementwise.
    #[arg(long, default_value = "macs")]
    flops: String,
    /// Also write the per-layer breakdown as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 20)]
    arms: usize,
    #[arg(long, default_value_t = 5)]
    cardinality: usize,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lowest and highest true mean; arms are evenly spaced between them.
    #[arg(long, default_value_t = 0.05)]
    lo: f64,
    #[arg(long, default_value_t = 1.0)]
    hi: f64,
    /// Steps per selection-frequency window.
    #[arg(long, default_value_t = 500)]
    window: usize,
    /// Directory for recovery.csv, frequencies.csv and state.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "mnist")]
    dataset: String,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    batches: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Per-channel CSV output; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Count(a) => cmd_count(a),
        Command::BanditSim(a) => cmd_bandit_sim(a),
        Command::SaliencyAudit(a) => cmd_saliency_audit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Usage(m) | CliError::Numeric(m) | CliError::Io(m)) = &e;
            eprintln!("error: {m}");
            ExitCode::from(e.code())
        }
    }
}

fn resolve_train(a: &TrainArgs) -> Result<Manifest, CliError> {
    let (mut cfg, manifest_dir) = match (&a.manifest, &a.config) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let m = Manifest::parse(&text, &path.display().to_string()).map_err(usage)?;
            (m.config, Some(m.data_dir))
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let mut cfg = TrainConfig::default();
            for (k, v) in parse_pairs(&text, &path.display().to_string()).map_err(usage)? {
                if k == "data_dir" {
                    continue;
                }
                apply(&mut cfg, &k, &v).map_err(usage)?;
            }
            (cfg, None)
        }
        (None, None) => (TrainConfig::default(), None),
    };
    let flags = [
        ("arch", &a.arch),
        ("dataset", &a.dataset),
        ("p", &a.p),
        ("selection", &a.selection),
        ("pipeline", &a.pipeline),
        ("freeze_epoch", &a.freeze_epoch),
        ("epochs", &a.epochs),
        ("seed", &a.seed),
        ("batch_size", &a.batch_size),
        ("init_strategy", &a.init_strategy),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            apply(&mut cfg, k, v).map_err(usage)?;
        }
    }
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        apply(&mut cfg, k.trim(), v).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    let data_dir = a
        .data_dir
        .clone()
        .or(manifest_dir)
        .unwrap_or_else(|| resolve_data_dir(None));
    Ok(Manifest::new(cfg, data_dir))
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let manifest = resolve_train(&a)?;
    let cfg = &manifest.config;
    let data = TrainData::load(cfg, &manifest.data_dir).map_err(usage)?;
    let dir = fresh_run_dir(&a.out, &manifest.run_id);
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    report::write(&dir.join("manifest.txt"), &manifest.render())?;
    eprintln!("run {} -> {}", manifest.run_id, dir.display());

    let quiet = a.quiet;
    let mut progress = |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    };
    let rec = match run(cfg, &data, &mut progress) {
        Ok(r) => r,
        Err(e @ TrainError::Diverged { .. }) => {
            let msg = format!("training diverged: {e}");
            report::write(&dir.join("diagnostics.txt"), &format!("{msg}\n"))?;
            return Err(CliError::Numeric(msg));
        }
        Err(TrainError::Model(dynexec::nn::ModelError::Tensor(
            t @ dynexec::tensor::TensorError::NonFinite { .. },
        ))) => {
            let msg = format!("training diverged: {t}");
            report::write(&dir.join("diagnostics.txt"), &format!("{msg}\n"))?;
            return Err(CliError::Numeric(msg));
        }
        Err(e) => return Err(usage(e)),
    };

    report::write(&dir.join("step_log.csv"), &report::step_csv(&rec.steps))?;
    report::write(&dir.join("epoch_log.csv"), &report::epoch_csv(&rec.epochs))?;
    if !rec.selection.is_empty() {
        report::write(&dir.join("selection_report.csv"), &report::selection_csv(&rec.selection))?;
    }
    for snap in &rec.snapshots {
        let path = dir.join("checkpoints").join(format!("{}.ckpt", snap.name));
        checkpoint::save(&path, &snap.model, snap.mask.as_ref(), cfg.precision)
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    let summary = format!(
        "run {}: {}  wall {:.1}s",
        manifest.run_id,
        rec.summary(),
        rec.wall_clock_secs
    );
    report::write(&dir.join("summary.txt"), &format!("{summary}\n"))?;
    println!("{summary}");
    Ok(())
}

fn parse_input(s: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = s.split('x').collect();
    let dims: Result<Vec<usize>, _> = parts.iter().map(|p| p.parse::<usize>()).collect();
    match dims {
        Ok(d) if d.len() == 3 => Ok([d[0], d[1], d[2]]),
        _ => Err(usage(format!("--input expects CxHxW, got {s:?}"))),
    }
}

fn cmd_count(a: CountArgs) -> Result<(), CliError> {
    let convention: FlopConvention = a.flops.parse().map_err(usage)?;
    let desc = match (&a.arch, &a.descriptor) {
        (_, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            ArchDescriptor::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        (Some(arch), None) => {
            ArchDescriptor::by_name(arch, parse_input(&a.input)?, a.classes).map_err(usage)?
        }
        (None, None) => return Err(usage("either --arch or --descriptor is required")),
    };
    let report = cost_report(&desc, convention).map_err(usage)?;
    print!("{}", report.to_table());
    println!(
        "{}: params {} ({:.3}e6)  macs {} ({:.3}e8)",
        desc.name,
        report.params(),
        report.params() as f64 / 1e6,
        report.macs(),
        report.macs() as f64 / 1e8
    );
    if let Some(path) = a.csv {
        report::write(&path, &report.to_csv())?;
    }
    Ok(())
}

fn cmd_bandit_sim(a: SimArgs) -> Result<(), CliError> {
    if a.cardinality == 0 || a.cardinality >= a.arms {
        return Err(usage("need 0 < cardinality < arms"));
    }
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(usage("sigma must be finite and non-negative"));
    }
    let env = ArmEnvironment::linear(a.arms, a.lo, a.hi, a.sigma);
    let truth = env.best_set(a.cardinality);
    let window = a.window.max(1);
    let mut recovery = String::from("seed,recovered,true_top,estimated_top\n");
    let mut freq = String::from("seed,window_end,arm,count\n");
    let mut state = String::from("seed,arm,true_mean,T,mu_hat\n");
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
    let mut hits = 0;
    for seed in a.seed..a.seed + a.seeds {
        let trace = simulate_cucb(&env, a.cardinality, a.steps, seed).map_err(usage)?;
        let est = trace.final_top(a.cardinality);
        let ok = est == truth;
        hits += ok as u64;
        writeln!(recovery, "{seed},{},{},{}", ok as u8, join(&truth), join(&est)).unwrap();
        for (w, chunk) in trace.chosen.chunks(window).enumerate() {
            let mut counts = vec![0usize; a.arms];
            for step in chunk {
                for &arm in step {
                    counts[arm] += 1;
                }
            }
            let end = w * window + chunk.len();
            for (arm, c) in counts.iter().enumerate() {
                writeln!(freq, "{seed},{end},{arm},{c}").unwrap();
            }
        }
        for arm in 0..a.arms {
            writeln!(
                state,
                "{seed},{arm},{},{},{}",
                env.means[arm],
                trace.state.counts()[arm],
                trace.state.means()[arm]
            )
            .unwrap();
        }
    }
    match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            report::write(&dir.join("recovery.csv"), &recovery)?;
            report::write(&dir.join("frequencies.csv"), &freq)?;
            report::write(&dir.join("state.csv"), &state)?;
        }
        None => print!("{recovery}"),
    }
    println!(
        "recovered true top-{} in {hits}/{} seeds ({:.1}%)",
        a.cardinality,
        a.seeds,
        100.0 * hits as f64 / a.seeds.max(1) as f64
    );
    Ok(())
}

fn cmd_saliency_audit(a: AuditArgs) -> Result<(), CliError> {
    let kind: DatasetKind = a.dataset.parse().map_err(usage)?;
    let ck = checkpoint::load(&a.checkpoint).map_err(|e| usage(format!("{}: {e}", a.checkpoint.display())))?;
    let model = ck.model;
    let mask = ck.mask.unwrap_or_else(|| model.all_active());
    let root = resolve_data_dir(a.data_dir.as_deref());
    let train = load_split(kind, &root, Split::Train).map_err(usage)?;
    let test = load_split(kind, &root, Split::Test).map_err(usage)?;
    let (_, test) = dynexec::data::normalize(train, test).map_err(usage)?;
    if test.shape() != model.descriptor().input_shape {
        return Err(usage(format!(
            "dataset shape {:?} does not match checkpoint input {:?}",
            test.shape(),
            model.descriptor().input_shape
        )));
    }
    let needed = a.batches * a.batch_size;
    if a.batches == 0 || needed > test.len() {
        return Err(usage(format!("need 1..={} batches of {}", test.len() / a.batch_size.max(1), a.batch_size)));
    }
    let mut csv = String::from("batch,l,k,oracle,taylor,taylor_unaveraged\n");
    let (mut rhos, mut rhos_inner) = (Vec::new(), Vec::new());
    for b in 0..a.batches {
        let idx: Vec<usize> = (b * a.batch_size..(b + 1) * a.batch_size).collect();
        let (x, y) = test.batch::<rand_chacha::ChaCha8Rng>(&idx, None);
        let oracle = oracle_saliencies(&model, &x, &y, &mask).map_err(|e| CliError::Numeric(e.to_string()))?;
        let taylor = eval_taylor_saliencies(&model, &x, &y, &mask).map_err(|e| CliError::Numeric(e.to_string()))?;
        let (mut o, mut t, mut u) = (Vec::new(), Vec::new(), Vec::new());
        for (id, ov) in &oracle {
            let (tv, uv) = (taylor.averaged[id], taylor.inner[id]);
            writeln!(csv, "{b},{},{},{ov},{tv},{uv}", id.layer, id.index).unwrap();
            o.push(*ov);
            t.push(tv);
            u.push(uv);
        }
        let (rho, rho_inner) = (spearman(&o, &t), spearman(&o, &u));
        eprintln!("batch {b}: spearman {rho:.4} (unaveraged {rho_inner:.4})");
        rhos.push(rho);
        rhos_inner.push(rho_inner);
    }
    match &a.out {
        Some(path) => report::write(path, &csv)?,
        None => print!("{csv}"),
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean spearman over {} batches: {:.4}", rhos.len(), mean(&rhos));
    println!("mean spearman (unaveraged taylor) over {} batches: {:.4}", rhos.len(), mean(&rhos_inner));
    Ok(())
}
