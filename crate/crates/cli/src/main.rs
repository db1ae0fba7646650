//! `billnet`: train, verify, evaluate and inspect BILLNET models.
//!
//! Exit codes: 0 success, 2 precondition error, 3 verification failure,
//! 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use billnet::checkpoint::{self, CheckpointError};
use billnet::cost;
use billnet::data::{self, SyntheticSpec};
use billnet::engine::{self, EngineError, VerifyError};
use billnet::model::{hex, Billnet, BillnetConfig, ModelError, Stage};
use billnet::refnet;
use billnet::tensor::Tensor5;
use billnet::train::{self, Samples, StageConfig, TrainError};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "billnet", version, about = "Binarized Conv3D-LSTM gesture models")]
struct Cli {
    /// Where to write the run manifest (defaults next to the main output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one training stage.
    Train {
        /// Preset name (toy, paper) or a JSON config file. Stage 1 only.
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        stage: u8,
        /// Dataset directory (with manifest.csv).
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset evaluated after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint of the previous stage.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CSV training log (default: <out>.log.csv).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Schedule::Desk)]
        schedule: Schedule,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Compare the reference and logic paths on random inputs.
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        inputs: usize,
    },
    /// Accuracy and confusion matrix on a dataset.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = PathKind::Ref)]
        path: PathKind,
        /// Per-clip CSV of `index,label,prediction` in manifest order.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// BOP and weight-memory report.
    Cost {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Preset or JSON config, when no checkpoint is given.
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        stage: Option<u8>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-step class responses of one clip, as CSV and PGM.
    Heatmap {
        #[arg(long = "in")]
        input: PathBuf,
        /// Clip directory of frame_%05d.pgm files.
        #[arg(long)]
        clip: PathBuf,
        /// Output prefix; writes <out>.csv and <out>.pgm (default: <in>.heatmap).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic gesture set as train/ and test/ datasets.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        clips: usize,
        /// Every k-th clip goes to the test split.
        #[arg(long, default_value_t = 5)]
        test_every: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Schedule {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PathKind {
    Ref,
    Logic,
}

enum Failure {
    Precondition(String),
    Verification(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn pre(e: impl std::fmt::Display) -> Failure {
    Failure::Precondition(e.to_string())
}

fn from_checkpoint(e: CheckpointError) -> Failure {
    match e {
        CheckpointError::Io(e) => Failure::Other(e.into()),
        other => pre(other),
    }
}

fn from_train(e: TrainError) -> Failure {
    match e {
        TrainError::StageOrderViolation { .. } | TrainError::Model(ModelError::BadConfig(_)) => pre(e),
        other => Failure::Other(other.into()),
    }
}

fn from_engine(e: EngineError) -> Failure {
    match e {
        EngineError::NotFullyQuantized(_) => pre(e),
        other => Failure::Other(other.into()),
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config_hash: Option<String>,
    seed: u64,
    stage: Option<u8>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    started_unix: u64,
    finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// SHA-256 of a file, or of a directory's sorted relative paths and contents.
fn content_hash(path: &Path) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        let mut stack = vec![path.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d)? {
                let p = e?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            if rel.to_string_lossy().ends_with(".manifest.json") {
                continue;
            }
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(fs::read(&f)?);
        }
    } else {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex(&h.finalize()))
}

struct Run {
    command: &'static str,
    seed: u64,
    started: u64,
    config_hash: Option<String>,
    stage: Option<u8>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str, seed: u64) -> Self {
        Self {
            command,
            seed,
            started: unix_now(),
            config_hash: None,
            stage: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn model(&mut self, m: &Billnet) {
        self.config_hash = Some(m.config.hash());
        self.stage = Some(m.stage.get());
    }

    fn write(self, path: &Path) -> anyhow::Result<()> {
        let hashes = |ps: &[PathBuf]| -> anyhow::Result<Vec<FileHash>> {
            ps.iter()
                .map(|p| {
                    Ok(FileHash {
                        path: p.display().to_string(),
                        sha256: content_hash(p)?,
                    })
                })
                .collect()
        };
        let m = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_hash: self.config_hash,
            seed: self.seed,
            stage: self.stage,
            inputs: hashes(&self.inputs)?,
            outputs: hashes(&self.outputs)?,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        fs::write(path, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(spec: &str) -> Result<BillnetConfig, Failure> {
    if let Some(c) = BillnetConfig::preset(spec) {
        return Ok(c);
    }
    let text = fs::read_to_string(spec).map_err(|e| pre(format!("config {spec}: {e}")))?;
    let cfg = BillnetConfig::from_json(&text).map_err(pre)?;
    cfg.validate().map_err(pre)?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Billnet, Failure> {
    checkpoint::load(path).map_err(from_checkpoint)
}

fn load_data(dir: &Path, m: &Billnet, seed: u64) -> Result<(Vec<Tensor5>, Vec<usize>), Failure> {
    let cfg = &m.config;
    let clips = data::read_dataset(dir, cfg.frames, cfg.height, cfg.width, seed)
        .with_context(|| format!("reading dataset {}", dir.display()))?;
    if let Some(c) = clips.iter().find(|c| c.label >= cfg.classes) {
        return Err(pre(format!("label {} outside the model's {} classes", c.label, cfg.classes)));
    }
    Ok(data::unzip(&clips))
}

/// Shuffling seed of a stage, derived from the command seed.
fn stage_seed(seed: u64, stage: u8) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(stage));
    rng.gen()
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cli: &Cli,
    config: &Option<String>,
    stage: u8,
    data_dir: &Path,
    val: &Option<PathBuf>,
    input: &Option<PathBuf>,
    out: &Path,
    log: &Option<PathBuf>,
    schedule: Schedule,
    overrides: (Option<usize>, Option<f64>, Option<usize>),
) -> CmdResult {
    let mut run = Run::new("train", cli.seed);
    Stage::new(stage).ok_or_else(|| pre(format!("stage {stage} is not in 1..=5")))?;
    let mut model = match (stage, input) {
        (1, None) => {
            let mut cfg = load_config(config.as_deref().unwrap_or("toy"))?;
            cfg.seed = cli.seed;
            Billnet::build(&cfg).map_err(pre)?
        }
        (_, Some(p)) => {
            if config.is_some() {
                return Err(pre("--config only applies to a fresh stage-1 model; the checkpoint carries its config"));
            }
            run.inputs.push(p.clone());
            load_model(p)?
        }
        (k, None) => return Err(pre(format!("stage {k} needs --in <stage {} checkpoint>", k - 1))),
    };
    if model.completed + 1 != stage {
        return Err(from_train(TrainError::StageOrderViolation {
            requested: stage,
            completed: model.completed,
        }));
    }
    model.rng_state = stage_seed(cli.seed, stage);
    let mut sc = match schedule {
        Schedule::Desk => StageConfig::desk(stage),
        Schedule::Paper => StageConfig::paper(stage),
    };
    let (epochs, lr, batch) = overrides;
    if let Some(e) = epochs {
        sc.epochs = e;
        sc.decay_epochs = sc.decay_epochs.min(e);
    }
    if let Some(v) = lr {
        sc.lr = v;
    }
    if let Some(b) = batch {
        sc.batch_size = b;
    }
    let (clips, labels) = load_data(data_dir, &model, cli.seed)?;
    run.inputs.push(data_dir.to_path_buf());
    let train_set = Samples::new(&clips, &labels).map_err(pre)?;
    let val_data = match val {
        Some(v) => {
            run.inputs.push(v.clone());
            Some(load_data(v, &model, cli.seed)?)
        }
        None => None,
    };
    let val_set = match &val_data {
        Some((c, l)) => Some(Samples::new(c, l).map_err(pre)?),
        None => None,
    };
    println!(
        "stage {stage}: {} epochs, lr {:e}, decay {} epochs at {:.4}, batch {}, {} clips",
        sc.epochs,
        sc.lr,
        sc.decay_epochs,
        sc.decay_rate,
        sc.batch_size,
        clips.len()
    );
    let logs = train::run_stage(&mut model, &sc, train_set, val_set, |r| {
        let val = r.val_accuracy.map(|v| format!(" val {v:.4}")).unwrap_or_default();
        println!("epoch {:>3} lr {:.3e} loss {:.5} acc {:.4}{val}", r.epoch, r.lr, r.loss, r.accuracy);
    })
    .map_err(from_train)?;
    let log_path = log.clone().unwrap_or_else(|| with_suffix(out, ".log.csv"));
    train::write_log_csv(fs::File::create(&log_path).context("creating log")?, &logs).map_err(from_train)?;
    checkpoint::save(&model, out).context("writing checkpoint")?;
    run.model(&model);
    run.outputs.extend([out.to_path_buf(), log_path]);
    run.write(&cli.manifest.clone().unwrap_or_else(|| with_suffix(out, ".manifest.json")))?;
    Ok(())
}

fn cmd_verify(cli: &Cli, input: &Path, inputs: usize) -> CmdResult {
    let mut run = Run::new("verify", cli.seed);
    let model = load_model(input)?;
    run.inputs.push(input.to_path_buf());
    run.model(&model);
    let plan = engine::compile(&model).map_err(from_engine)?;
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let mut matched = 0;
    for i in 0..inputs {
        let x = Tensor5::from_fn([1, cfg.frames, cfg.height, cfg.width, 1], |_| f64::from(rng.gen::<u8>()));
        match engine::verify_batch(&model, &plan, &x) {
            Ok(_) => matched += 1,
            Err(VerifyError::Diverged(d)) => {
                println!("input {i}: {d}");
                println!("{matched}/{inputs} exact matches before the first divergence");
                run.write(&cli.manifest.clone().unwrap_or_else(|| with_suffix(input, ".verify.manifest.json")))?;
                return Err(Failure::Verification(format!("paths diverge on input {i}")));
            }
            Err(VerifyError::Engine(e)) => return Err(from_engine(e)),
            Err(VerifyError::Net(e)) => return Err(Failure::Other(e.into())),
        }
    }
    println!("{matched}/{inputs} exact matches");
    run.write(&cli.manifest.clone().unwrap_or_else(|| with_suffix(input, ".verify.manifest.json")))?;
    Ok(())
}

fn cmd_eval(cli: &Cli, input: &Path, data_dir: &Path, path: PathKind, predictions: &Option<PathBuf>) -> CmdResult {
    let mut run = Run::new("eval", cli.seed);
    let model = load_model(input)?;
    run.model(&model);
    run.inputs.extend([input.to_path_buf(), data_dir.to_path_buf()]);
    let (clips, labels) = load_data(data_dir, &model, cli.seed)?;
    let refs: Vec<&Tensor5> = clips.iter().collect();
    let preds = match path {
        PathKind::Ref => refnet::predict(&model, &refs, 40).context("reference forward")?,
        PathKind::Logic => {
            let plan = engine::compile(&model).map_err(from_engine)?;
            engine::predict(&plan, &refs).map_err(from_engine)?
        }
    };
    let k = model.config.classes;
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &l) in preds.iter().zip(&labels) {
        confusion[l][p] += 1;
    }
    let hits: usize = (0..k).map(|i| confusion[i][i]).sum();
    println!(
        "path {:?}: accuracy {:.4} ({hits}/{})",
        path,
        hits as f64 / labels.len() as f64,
        labels.len()
    );
    println!("confusion (rows: label, columns: prediction)");
    for (i, row) in confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
        println!("{i:>3} {}", cells.join(""));
    }
    if let Some(p) = predictions {
        let mut text = String::from("index,label,prediction\n");
        for (i, (pr, l)) in preds.iter().zip(&labels).enumerate() {
            text.push_str(&format!("{i},{l},{pr}\n"));
        }
        fs::write(p, text).context("writing predictions")?;
        run.outputs.push(p.clone());
    }
    run.write(&cli.manifest.clone().unwrap_or_else(|| with_suffix(input, ".eval.manifest.json")))?;
    Ok(())
}

fn cmd_cost(cli: &Cli, input: &Option<PathBuf>, config: &Option<String>, stage: Option<u8>, csv: &Option<PathBuf>) -> CmdResult {
    let mut run = Run::new("cost", cli.seed);
    let (graph, st, default_manifest) = match (input, config) {
        (Some(p), None) => {
            let m = load_model(p)?;
            run.inputs.push(p.clone());
            run.model(&m);
            let st = match stage {
                Some(k) => Stage::new(k).ok_or_else(|| pre(format!("stage {k}")))?,
                None => m.stage,
            };
            (m.graph, st, with_suffix(p, ".cost.manifest.json"))
        }
        (None, Some(c)) => {
            let cfg = load_config(c)?;
            let st = Stage::new(stage.unwrap_or(1)).ok_or_else(|| pre("stage must be in 1..=5"))?;
            run.config_hash = Some(cfg.hash());
            run.stage = Some(st.get());
            (cfg.graph().map_err(pre)?, st, PathBuf::from("cost.manifest.json"))
        }
        _ => return Err(pre("give exactly one of --in or --config")),
    };
    let report = cost::cost_of(&graph, st);
    print!("{}", report.to_table());
    if let Some(p) = csv {
        fs::write(p, report.to_csv()).context("writing cost CSV")?;
        run.outputs.push(p.clone());
    }
    run.write(&cli.manifest.clone().unwrap_or(default_manifest))?;
    Ok(())
}

fn cmd_heatmap(cli: &Cli, input: &Path, clip: &Path, out: &Option<PathBuf>) -> CmdResult {
    let out = &out.clone().unwrap_or_else(|| with_suffix(input, ".heatmap"));
    let mut run = Run::new("heatmap", cli.seed);
    let model = load_model(input)?;
    run.model(&model);
    run.inputs.extend([input.to_path_buf(), clip.to_path_buf()]);
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let x = data::load_clip(clip, cfg.frames, cfg.height, cfg.width, &mut rng).context("loading clip")?;
    // rows are time steps, columns classes
    let rows: Vec<Vec<f64>> = if model.stage == Stage::FULL {
        let plan = engine::compile(&model).map_err(from_engine)?;
        let o = engine::execute(&plan, &engine::codes_from_tensor(&x).map_err(from_engine)?, false).map_err(from_engine)?;
        let [_, t, _, _, k] = o.logits.shape();
        (0..t).map(|ti| (0..k).map(|ki| f64::from(o.logits.get([0, ti, 0, 0, ki]))).collect()).collect()
    } else {
        let o = refnet::forward(&model, &x, false).context("reference forward")?;
        o.heatmap(0)
    };
    let mut text = String::new();
    let k = rows[0].len();
    text.push_str(&(0..k).map(|c| format!("class{c}")).collect::<Vec<_>>().join(","));
    text.push('\n');
    for r in &rows {
        text.push_str(&r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    let csv_path = with_suffix(out, ".csv");
    let pgm_path = with_suffix(out, ".pgm");
    fs::write(&csv_path, text).context("writing heatmap CSV")?;
    let (lo, hi) = rows
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = rows.iter().flatten().map(|v| ((v - lo) / span * 255.0).round() as u8).collect();
    data::write_pgm(&pgm_path, k, rows.len(), &pixels).context("writing heatmap PGM")?;
    println!("{}x{} response map -> {}, {}", rows.len(), k, csv_path.display(), pgm_path.display());
    run.outputs.extend([csv_path, pgm_path]);
    run.write(&cli.manifest.clone().unwrap_or_else(|| with_suffix(out, ".manifest.json")))?;
    Ok(())
}

fn cmd_synth(cli: &Cli, out: &Path, clips: usize, test_every: usize) -> CmdResult {
    let mut run = Run::new("synth", cli.seed);
    if test_every < 2 {
        return Err(pre("--test-every must be at least 2"));
    }
    let spec = SyntheticSpec {
        clips,
        ..SyntheticSpec::toy(cli.seed)
    };
    let all = data::generate_synthetic(&spec).map_err(pre)?;
    let (train, test) = data::split_every(all, test_every);
    for (name, set) in [("train", &train), ("test", &test)] {
        let dir = out.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        data::write_dataset(&dir, set).with_context(|| format!("writing {}", dir.display()))?;
        run.outputs.push(dir);
    }
    println!("{} train and {} test clips in {}", train.len(), test.len(), out.display());
    run.write(&cli.manifest.clone().unwrap_or_else(|| out.join("synth.manifest.json")))?;
    Ok(())
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Train {
            config,
            stage,
            data,
            val,
            input,
            out,
            log,
            schedule,
            epochs,
            lr,
            batch_size,
        } => cmd_train(cli, config, *stage, data, val, input, out, log, *schedule, (*epochs, *lr, *batch_size)),
        Command::Verify { input, inputs } => cmd_verify(cli, input, *inputs),
        Command::Eval {
            input,
            data,
            path,
            predictions,
        } => cmd_eval(cli, input, data, *path, predictions),
        Command::Cost {
            input,
            config,
            stage,
            csv,
        } => cmd_cost(cli, input, config, *stage, csv),
        Command::Heatmap { input, clip, out } => cmd_heatmap(cli, input, clip, out),
        Command::Synth { out, clips, test_every } => cmd_synth(cli, out, *clips, *test_every),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("BILLNET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: BILLNET_THREADS ignored: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Precondition(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
