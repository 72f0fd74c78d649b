use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dan_core::data::frame::load_sequence_frame;
use dan_core::data::mot::{parse_mot_csv, write_mot_csv};
use dan_core::data::synth::{read_seqinfo, read_sequence, write_sequence, DET_FILE, SEQINFO};
use dan_core::data::{generate_synthetic, SynthConfig};
use dan_core::io::atomic_write;
use dan_core::metrics::{evaluate_with_events, format_events, DEFAULT_IOU_THRESHOLD};
use dan_core::model::gradcheck::{run_gradcheck, GradcheckOptions};
use dan_core::model::train::{format_log, train, PairDataset};
use dan_core::model::{DanModel, RunConfig, TrackConfig};
use dan_core::tracker::{track_sequence, ModelAffinity, OracleAffinity, Tracker};
use dan_core::DanError;

#[derive(Parser)]
#[command(name = "dan", version, about = "Multi-object tracking with a learned pairwise affinity network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence with ground truth and noisy detections.
    Synth(SynthArgs),
    /// Train a network on sequence directories.
    Train(TrainArgs),
    /// Track detections through a sequence.
    Track(TrackArgs),
    /// Score a hypothesis file against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on small networks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    frames: u32,
    #[arg(long, default_value_t = 6)]
    objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    width: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
    #[arg(long, default_value_t = 0.0)]
    occlusion_prob: f64,
    #[arg(long, default_value_t = 0.05)]
    det_dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    enter_prob: f64,
    #[arg(long, default_value_t = 0.0)]
    leave_prob: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// A sequence directory, or a directory of sequence directories.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to the model path with `.log.csv` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrackArgs {
    /// Model file; not needed with `--oracle`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seq: PathBuf,
    /// Detections; defaults to the sequence's det.csv.
    #[arg(long)]
    dets: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    delta_b: Option<usize>,
    #[arg(long)]
    delta_w: Option<usize>,
    /// Associate by the identities already present in the detection file.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f64,
    /// Results file; defaults to the hypothesis path with `.eval.txt` appended.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-frame event log.
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Scale analytic compression gradients to confirm the check fails.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

enum Failure {
    Check(String),
    Usage(String),
    Io(String),
}

impl From<DanError> for Failure {
    fn from(e: DanError) -> Self {
        match e {
            DanError::Config(_) => Failure::Usage(e.to_string()),
            DanError::Io(_) | DanError::Image(_) | DanError::Container(_) | DanError::Parse { .. } => {
                Failure::Io(e.to_string())
            }
            _ => Failure::Check(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) if !p.exists() => Err(Failure::Io(format!("config file {} not found", p.display()))),
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        name: a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        width: a.width,
        height: a.height,
        frames: a.frames,
        objects: a.objects,
        max_objects: a.objects.max(SynthConfig::default().max_objects),
        enter_prob: a.enter_prob,
        leave_prob: a.leave_prob,
        occlusion_prob: a.occlusion_prob,
        det_dropout: a.det_dropout,
        ..SynthConfig::default()
    };
    let seq = generate_synthetic(&cfg, a.seed)?;
    // Build next to the target and move into place only when complete.
    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(DanError::from)?;
    let tmp = parent.join(format!(".{}.tmp{}", cfg.name, std::process::id()));
    let _ = fs::remove_dir_all(&tmp);
    if let Err(e) = write_sequence(&tmp, &seq) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e.into());
    }
    if a.out.exists() {
        fs::remove_dir_all(&a.out).map_err(DanError::from)?;
    }
    fs::rename(&tmp, &a.out).map_err(DanError::from)?;
    println!(
        "wrote {} frames, {} ground-truth rows, {} detections to {}",
        seq.len(),
        seq.gt.len(),
        seq.dets.len(),
        a.out.display()
    );
    Ok(())
}

fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>, Failure> {
    if root.join(SEQINFO).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Failure::Io(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SEQINFO).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(p) = a.pairs {
        cfg.train.pairs = p;
    }
    let mut sequences = Vec::new();
    for root in &a.data {
        for dir in sequence_dirs(root)? {
            sequences.push(read_sequence(&dir)?);
        }
    }
    if sequences.is_empty() || cfg.train.pairs == 0 {
        return Err(DanError::EmptyDataset.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let data = PairDataset::sample(sequences, cfg.train.pairs, cfg.train.n_v, &mut rng)?;
    let mut model = DanModel::<f32>::new(cfg.model.clone(), &mut rng)?;
    let rows = train(&mut model, &data, &cfg.train, &mut rng, |r| {
        eprintln!("epoch {:>4}  lr {:<8}  loss {:.4}", r.epoch, r.lr, r.losses.total);
    })?;
    model.save(&a.out)?;
    let log = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.csv"));
    atomic_write(&log, format_log(&rows).as_bytes())?;
    println!("model written to {}, log to {}", a.out.display(), log.display());
    Ok(())
}

fn track_cmd(a: TrackArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(b) = a.delta_b {
        cfg.track.delta_b = b;
    }
    if let Some(w) = a.delta_w {
        cfg.track.delta_w = w;
    }
    let params: TrackConfig = cfg.track;
    let dets_path = a.dets.clone().unwrap_or_else(|| a.seq.join(DET_FILE));
    let dets = parse_mot_csv(&dets_path)?;
    let frames = match read_seqinfo(&a.seq) {
        Ok(info) => info.frames,
        Err(DanError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => dets.iter().map(|d| d.frame).max().unwrap_or(0),
        Err(e) => return Err(e.into()),
    };
    let hyp = if a.oracle {
        let mut tracker = Tracker::new(OracleAffinity, params, cfg.model.n_m)?;
        track_sequence(&mut tracker, frames, &dets, |_| Ok(None))?
    } else {
        let path = a
            .model
            .as_ref()
            .ok_or_else(|| Failure::Usage("--model is required unless --oracle is given".into()))?;
        let model = DanModel::<f32>::load(path, cfg.model.clone())?;
        let mut tracker = Tracker::new(ModelAffinity::new(&model), params, cfg.model.n_m)?;
        track_sequence(&mut tracker, frames, &dets, |t| load_sequence_frame(&a.seq, t).map(Some))?
    };
    write_mot_csv(&a.out, &hyp)?;
    println!("wrote {} track rows to {}", hyp.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.iou) {
        return Err(Failure::Usage(format!("--iou {} outside [0, 1]", a.iou)));
    }
    let gt = parse_mot_csv(&a.gt)?;
    let hyp = parse_mot_csv(&a.hyp)?;
    let (res, events) = evaluate_with_events(&gt, &hyp, a.iou)?;
    let out = a.out.unwrap_or_else(|| with_suffix(&a.hyp, ".eval.txt"));
    atomic_write(&out, res.to_key_values().as_bytes())?;
    if let Some(p) = &a.events {
        atomic_write(p, format_events(&events).as_bytes())?;
    }
    print!("{}", res.table());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    let opts = GradcheckOptions {
        instances: a.instances,
        corrupt: a.corrupt_gradient.then_some(1.5),
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(a.seed, &opts)?;
    print!("{}", report.table());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel()
        )))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Track(a) => track_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
