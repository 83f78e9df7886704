//! `fido` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use fido_core::config::{ConcatMode, ProviderKind, TrainConfig};
use fido_core::dataset::{parse_manifest, synth_corpus, Manifest, Split};
use fido_core::dsp::{ingest, pad_or_truncate, stft_power, StftConfig};
use fido_core::metrics::{ablate_concat, attention_csv, attention_stats, evaluate, write_report, EvalReport};
use fido_core::provider::{logmel, read_header, write_embedding};
use fido_core::training::{load_examples, train, Checkpoint};
use fido_core::{Error, Model32};

#[derive(Parser, Debug)]
#[command(name = "fido", version, about = "Non-intrusive intelligibility prediction with cross-domain feature importance")]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML or JSON document with TrainConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["file", "surrogate"])]
    provider: Option<String>,
    #[arg(long, value_parser = ["feature", "temporal"])]
    concat: Option<String>,
    #[arg(long, value_parser = ["1", "2", "3", "all"])]
    track: Option<String>,
    /// STFT geometry as `n_fft,hop`; must give 50 frames/s.
    #[arg(long)]
    stft: Option<String>,
    /// Directory of `<id>.<l|r>.femb` files for the file provider.
    #[arg(long)]
    emb_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Cache PS and log-mel features keyed by audio content hash.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a seeded synthetic stereo corpus and its manifest.
    SynthData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the manifest's train split; best model by dev RMSE.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/manifest.jsonl`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write per-utterance predictions as JSON lines.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// RMSE, LCC and SRCC per track plus pooled.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train feature- and temporal-concat twins and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Per-frame mean/std of left-channel PS before and after attention.
    AttnStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Print FIDOEMB1 headers.
    InspectEmb { files: Vec<PathBuf> },
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn resolve_config(c: &Common, base: Option<TrainConfig>) -> CliResult<TrainConfig> {
    let mut cfg = match (&c.config, base) {
        (Some(p), _) => TrainConfig::from_file(p)?,
        (None, Some(b)) => b,
        (None, None) => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = &c.provider {
        cfg.provider.kind = if p == "file" { ProviderKind::File } else { ProviderKind::Surrogate };
    }
    if let Some(d) = &c.emb_dir {
        cfg.provider.embedding_dir = Some(d.clone());
    }
    if let Some(m) = &c.concat {
        cfg.model.concat = m.parse::<ConcatMode>()?;
    }
    if let Some(s) = &c.stft {
        let parts: Vec<usize> = s
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("--stft expects `n_fft,hop`, got `{s}`")))?;
        let [n_fft, hop] = parts[..] else {
            return Err(CliError::Usage(format!("--stft expects `n_fft,hop`, got `{s}`")));
        };
        cfg.model.n_fft = n_fft;
        cfg.model.hop = hop;
        cfg.model.check_whisper_rate()?;
    }
    cfg.checkpoint_dir = Some(c.out.clone());
    cfg.validate()?;
    log::info!("resolved config: {}", cfg.to_json());
    Ok(cfg)
}

fn track_filter(c: &Common) -> Option<u8> {
    c.track.as_deref().and_then(|t| t.parse().ok())
}

fn make_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn load_manifest(p: &Path, c: &Common) -> CliResult<Manifest> {
    let m = parse_manifest(p)?.track(track_filter(c));
    if m.is_empty() {
        return Err(Error::Label(format!("{}: no records for the selected track", p.display())).into());
    }
    Ok(m)
}

fn load_checkpoint(path: &Path, c: &Common) -> CliResult<(Model32, TrainConfig)> {
    let ck = Checkpoint::load(path)?;
    let mut cfg = ck.config.clone();
    if let Some(p) = &c.provider {
        cfg.provider.kind = if p == "file" { ProviderKind::File } else { ProviderKind::Surrogate };
    }
    if let Some(d) = &c.emb_dir {
        cfg.provider.embedding_dir = Some(d.clone());
    }
    let model = ck.to_model_with::<f32>(&cfg)?;
    make_out(&c.out)?;
    write(&c.out.join("config.json"), &cfg.to_json())?;
    log::info!("loaded {} (epoch {}, config {})", path.display(), ck.epoch, cfg.to_json());
    Ok((model, cfg))
}

fn cmd_extract(c: &Common, manifest: &Path) -> CliResult<()> {
    let cfg = resolve_config(c, None)?;
    let m = load_manifest(manifest, c)?;
    let cache = c.out.join("cache");
    make_out(&cache)?;
    write(&c.out.join("config.json"), &cfg.to_json())?;
    let model_key = serde_json::to_string(&cfg.model).expect("config serialises");
    let mut index = String::new();
    for r in &m.records {
        let audio = m.resolve(&r.audio);
        let bytes = std::fs::read(&audio).map_err(|e| Error::Io {
            path: audio.clone(),
            source: e,
        })?;
        let mut h = Sha256::new();
        h.update(&bytes);
        h.update(model_key.as_bytes());
        let key: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let (l, rr) = ingest::<f32>(&audio)?;
        let mut files = serde_json::Map::new();
        for (tag, w) in [("l", l), ("r", rr)] {
            let w = pad_or_truncate(&w, cfg.model.clip_samples);
            for (kind, compute) in [("ps", 0), ("logmel", 1)] {
                let p = cache.join(format!("{key}.{kind}.{tag}.femb"));
                if !p.exists() {
                    let t = if compute == 0 {
                        stft_power(&w, &StftConfig::from_model(&cfg.model))?.data
                    } else {
                        logmel(&w, &cfg.model)?.data
                    };
                    write_embedding(&p, &t)?;
                } else {
                    log::debug!("cache hit {}", p.display());
                }
                files.insert(format!("{kind}_{tag}"), p.display().to_string().into());
            }
        }
        files.insert("id".into(), r.id.clone().into());
        files.insert("key".into(), key.into());
        index.push_str(&serde_json::Value::Object(files).to_string());
        index.push('\n');
    }
    write(&c.out.join("features.jsonl"), &index)?;
    log::info!("cached features for {} records", m.len());
    Ok(())
}

fn cmd_train(c: &Common, manifest: Option<&Path>) -> CliResult<()> {
    make_out(&c.out)?;
    let cfg = resolve_config(c, None)?;
    let mpath = manifest.map_or_else(|| c.out.join("manifest.jsonl"), Path::to_path_buf);
    let m = load_manifest(&mpath, c)?;
    let tr = m.split(Split::Train);
    if tr.is_empty() {
        return Err(Error::Label(format!("{}: no training records", mpath.display())).into());
    }
    let dev = m.split(Split::Dev);
    let train_ex = load_examples::<f32>(&tr, &cfg)?;
    let dev_ex = load_examples::<f32>(&dev, &cfg)?;
    write(&c.out.join("config.json"), &cfg.to_json())?;
    let out = train(&cfg, &train_ex, &dev_ex)?;
    log::info!(
        "best epoch {} (selection RMSE {:.4}); wrote {}",
        out.checkpoint.epoch,
        out.checkpoint.dev_rmse.unwrap_or(f64::NAN),
        c.out.join("best.ckpt").display()
    );
    Ok(())
}

fn cmd_predict(c: &Common, checkpoint: &Path, manifest: &Path) -> CliResult<()> {
    let (model, cfg) = load_checkpoint(checkpoint, c)?;
    let m = load_manifest(manifest, c)?;
    make_out(&c.out)?;
    let ex = load_examples::<f32>(&m, &cfg)?;
    let mut lines = String::new();
    for e in &ex {
        let p = model.predict(&e.inputs)?;
        let v = serde_json::json!({
            "id": e.id,
            "intelligibility": p.intelligibility,
            "haspi": p.haspi,
            "class": p.class(),
        });
        lines.push_str(&v.to_string());
        lines.push('\n');
    }
    write(&c.out.join("predictions.jsonl"), &lines)
}

fn cmd_evaluate(c: &Common, checkpoint: &Path, manifest: &Path) -> CliResult<()> {
    let (model, cfg) = load_checkpoint(checkpoint, c)?;
    let m = load_manifest(manifest, c)?;
    make_out(&c.out)?;
    let ex = load_examples::<f32>(&m, &cfg)?;
    let rows = evaluate(&model, &ex)?;
    let rep = EvalReport::from_predictions(&rows, &checkpoint.display().to_string(), &manifest.display().to_string())?;
    if let Some(p) = rep.pooled() {
        log::info!("pooled: n={} rmse={:.3} lcc={:?} srcc={:?}", p.n, p.rmse, p.lcc, p.srcc);
    }
    write_report(&c.out, &rep, &rows)?;
    Ok(())
}

fn cmd_ablate(c: &Common, manifest: Option<&Path>) -> CliResult<()> {
    make_out(&c.out)?;
    let cfg = resolve_config(c, None)?;
    let mpath = manifest.map_or_else(|| c.out.join("manifest.jsonl"), Path::to_path_buf);
    let m = load_manifest(&mpath, c)?;
    let tr = load_examples::<f32>(&m.split(Split::Train), &cfg)?;
    let dev = load_examples::<f32>(&m.split(Split::Dev), &cfg)?;
    write(&c.out.join("config.json"), &cfg.to_json())?;
    let rep = ablate_concat(&cfg, &tr, &dev)?;
    write(&c.out.join("ablation.csv"), &rep.table())?;
    write(&c.out.join("ablation.json"), &serde_json::to_string_pretty(&rep).expect("report serialises"))?;
    print!("{}", rep.table());
    Ok(())
}

fn cmd_attn(c: &Common, checkpoint: &Path, manifest: &Path) -> CliResult<()> {
    let (model, cfg) = load_checkpoint(checkpoint, c)?;
    let m = load_manifest(manifest, c)?;
    make_out(&c.out)?;
    let ex = load_examples::<f32>(&m, &cfg)?;
    let rows = attention_stats(&model, &ex)?;
    write(&c.out.join("attention_stats.csv"), &attention_csv(&rows))
}

fn cmd_inspect(files: &[PathBuf]) -> CliResult<()> {
    if files.is_empty() {
        return Err(CliError::Usage("inspect-emb needs at least one file".into()));
    }
    let mut first_err = None;
    for f in files {
        match read_header(f).and_then(|h| {
            let size = std::fs::metadata(f).map_err(|e| Error::Io { path: f.clone(), source: e })?.len() as usize;
            Ok((h, size))
        }) {
            Ok((h, size)) => {
                let expected = 24 + h.payload_len();
                let status = if size == expected {
                    "ok".to_string()
                } else {
                    format!("size mismatch: {size} bytes, expected {expected}")
                };
                println!(
                    "{}: FIDOEMB1 v{} T={} d={} dtype={} ({status})",
                    f.display(),
                    h.version,
                    h.frames,
                    h.dim,
                    if h.dtype_code == 0 { "f32" } else { "?" }
                );
                if size != expected && first_err.is_none() {
                    first_err = Some(CliError::Core(Error::Format {
                        path: f.clone(),
                        msg: status,
                    }));
                }
            }
            Err(e) => {
                println!("{}: invalid ({e})", f.display());
                first_err.get_or_insert(CliError::Core(e));
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.cmd {
        Cmd::Extract { common, manifest } => cmd_extract(common, manifest),
        Cmd::SynthData { seed, n, out } => {
            let m = synth_corpus(*seed, *n, out)?;
            log::info!("wrote {} utterances to {}", m.len(), m.source.display());
            Ok(())
        }
        Cmd::Train { common, manifest } => cmd_train(common, manifest.as_deref()),
        Cmd::Predict {
            common,
            checkpoint,
            manifest,
        } => cmd_predict(common, checkpoint, manifest),
        Cmd::Evaluate {
            common,
            checkpoint,
            manifest,
        } => cmd_evaluate(common, checkpoint, manifest),
        Cmd::Ablate { common, manifest } => cmd_ablate(common, manifest.as_deref()),
        Cmd::AttnStats {
            common,
            checkpoint,
            manifest,
        } => cmd_attn(common, checkpoint, manifest),
        Cmd::InspectEmb { files } => cmd_inspect(files),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
