use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use emoagg::checkpoint::Checkpoint;
use emoagg::corpus::{self, CorpusHeader, Text, Utterance};
use emoagg::embed;
use emoagg::eval::{self, EvalMode, EvalOptions};
use emoagg::metrics;
use emoagg::model::{vae, Model};
use emoagg::plot;
use emoagg::train::Trainer;
use emoagg::{Emotion, Error, Exec, Result, SystemConfig, Variant};

const CHECKPOINT: &str = "checkpoint.emockpt";
const CORPUS: &str = "corpus.emoc";

#[derive(Parser)]
#[command(name = "emoagg", version, about = "Toy emotional sequence-to-sequence synthesis")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply to missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// BASE, BASE-SUS, SA-WA or SA-WAC
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Loaded {
    /// Checkpoint file (default: <out-dir>/checkpoint.emockpt)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// EMOC1 corpus; regenerated from the checkpoint config when absent
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus as <out-dir>/corpus.emoc
    GenCorpus(Common),
    /// Train one system, writing checkpoints and train_log.jsonl
    Train {
        #[command(flatten)]
        common: Common,
        /// EMOC1 corpus; generated from the config when absent
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue from this checkpoint (its config wins over --config)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides train.steps
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate on the held-out split: eval_<mode>.json and eval_<mode>.csv
    Eval {
        #[command(flatten)]
        io: Loaded,
        #[arg(long, default_value = "parallel")]
        mode: EvalMode,
        /// Score the references against themselves (all distortions 0)
        #[arg(long)]
        self_check: bool,
    },
    /// Export latent means with a PCA projection: embeddings.csv, embeddings.json
    Embed(Loaded),
    /// Free-running synthesis of a text file into a one-record EMOC1 file
    Synth {
        #[command(flatten)]
        io: Loaded,
        /// Whitespace-separated phone/tone/boundary triples
        #[arg(long)]
        text: PathBuf,
        /// Condition on the training-set centroid of this emotion
        #[arg(long, conflicts_with = "reference", required_unless_present = "reference")]
        emotion: Option<String>,
        /// Condition on the latent mean of this corpus utterance id
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        max_frames: Option<usize>,
        #[arg(long, default_value = "synth.emoc")]
        output: String,
    },
    /// Render SVG plots from embed and eval outputs
    Plot {
        /// embeddings.csv from `embed`
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// One or more eval CSV files
        #[arg(long, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus(c) => gen_corpus(&c),
        Command::Train {
            common,
            corpus,
            resume,
            steps,
        } => train(&common, corpus.as_deref(), resume.as_deref(), steps),
        Command::Eval { io, mode, self_check } => evaluate(&io, mode, self_check),
        Command::Embed(io) => embed_cmd(&io),
        Command::Synth {
            io,
            text,
            emotion,
            reference,
            max_frames,
            output,
        } => synth(&io, &text, emotion.as_deref(), reference.as_deref(), max_frames, &output),
        Command::Plot {
            embeddings,
            metrics,
            out_dir,
        } => plot_cmd(embeddings.as_deref(), &metrics, &out_dir),
    }
}

fn config(c: &Common) -> Result<SystemConfig> {
    let mut cfg = match &c.config {
        Some(p) => SystemConfig::load(p)?,
        None => SystemConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(v) = c.variant {
        cfg.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn generated(cfg: &SystemConfig) -> Result<Vec<Utterance>> {
    corpus::generate_corpus(&cfg.profiles(), &cfg.corpus, cfg.seed, Exec::from_env())
}

fn load_corpus(path: Option<&Path>, cfg: &SystemConfig) -> Result<Vec<Utterance>> {
    match path {
        Some(p) => {
            let file = corpus::read_corpus(p)?;
            if file.header.bands != cfg.corpus.bands {
                return Err(Error::Config(format!(
                    "corpus has {} bands, config expects {}",
                    file.header.bands, cfg.corpus.bands
                )));
            }
            Ok(file.utterances)
        }
        None => generated(cfg),
    }
}

fn split(cfg: &SystemConfig, utts: &[Utterance]) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    corpus::split_corpus(utts, cfg.corpus.split_ratio, cfg.seed)
}

fn gen_corpus(c: &Common) -> Result<()> {
    let cfg = config(c)?;
    out_dir(&c.out_dir)?;
    let utts = generated(&cfg)?;
    let header = CorpusHeader::new(cfg.corpus.bands, cfg.corpus.hop_ms, cfg.profiles(), utts.len(), Some(cfg.seed));
    let path = c.out_dir.join(CORPUS);
    corpus::write_corpus(&path, &header, &utts)?;
    info!("wrote {} utterances to {}", utts.len(), path.display());
    Ok(())
}

fn train(c: &Common, corpus_path: Option<&Path>, resume: Option<&Path>, steps: Option<u64>) -> Result<()> {
    let exec = Exec::from_env();
    let mut tr = match resume {
        Some(p) => Checkpoint::load(p)?.to_trainer(exec)?,
        None => Trainer::new(Model::new(&config(c)?)?, exec),
    };
    if let Some(s) = steps {
        tr.model.config.train.steps = s;
    }
    let cfg = tr.model.config.clone();
    out_dir(&c.out_dir)?;
    let utts = load_corpus(corpus_path, &cfg)?;
    let (train_set, _) = split(&cfg, &utts)?;
    write(&c.out_dir.join("config.toml"), cfg.to_toml_string())?;
    let ckpt = c.out_dir.join(CHECKPOINT);
    let log_path = c.out_dir.join("train_log.jsonl");
    let mut log = if resume.is_some() {
        read_text(&log_path).unwrap_or_default()
    } else {
        String::new()
    };
    info!(
        "training {} (seed {}) for {} steps on {} utterances",
        cfg.variant,
        cfg.seed,
        cfg.train.steps,
        train_set.len()
    );
    let result = tr.run(&train_set, cfg.train.steps, |tr, s| {
        if s.step % cfg.train.log_every == 0 || s.step == cfg.train.steps {
            let l = &s.loss;
            let gate = s.gate.map(|g| format!(" gate {g:.4}")).unwrap_or_default();
            info!(
                "step {} loss {:.4} recon {:.4} stop {:.4} reg {:.4} cls {:.4} grad_norm {:.3}{gate}",
                s.step, l.total, l.recon, l.stop, l.reg, l.cls, s.grad_norm
            );
            log.push_str(&s.to_json());
            log.push('\n');
            write(&log_path, &log)?;
        }
        if s.step % cfg.train.checkpoint_every == 0 || s.step == cfg.train.steps {
            Checkpoint::from_trainer(tr).save(&ckpt)?;
        }
        Ok(())
    });
    if let Err(e @ Error::NonFinite(_)) = &result {
        warn!("aborting: {e}; last good checkpoint kept at {}", ckpt.display());
    }
    result?;
    info!("wrote {}", ckpt.display());
    Ok(())
}

fn load(io: &Loaded) -> Result<(Model, Vec<Utterance>)> {
    let path = io.checkpoint.clone().unwrap_or_else(|| io.out_dir.join(CHECKPOINT));
    let model = Checkpoint::load(&path)?.to_model()?;
    let utts = load_corpus(io.corpus.as_deref(), &model.config)?;
    Ok((model, utts))
}

fn evaluate(io: &Loaded, mode: EvalMode, self_check: bool) -> Result<()> {
    let (model, utts) = load(io)?;
    let (train_set, test_set) = split(&model.config, &utts)?;
    let opts = EvalOptions {
        mode,
        self_check,
        exec: Exec::from_env(),
    };
    let report = eval::evaluate(&model, &train_set, &test_set, &opts)?;
    out_dir(&io.out_dir)?;
    let stem = io.out_dir.join(format!("eval_{mode}"));
    write(&stem.with_extension("json"), report.to_json())?;
    write(&stem.with_extension("csv"), report.to_csv())?;
    let o = &report.overall;
    info!(
        "{} {mode}: mcd {:.3} r_energy {:.3} r_duration {:.3} r_f0 {:.3} silhouette {:.3} accuracy {:.3}",
        report.system, o.mcd, o.r_energy, o.r_duration, o.r_f0, o.silhouette, o.accuracy
    );
    Ok(())
}

fn embed_cmd(io: &Loaded) -> Result<()> {
    let (model, utts) = load(io)?;
    let e = embed::embed_corpus(&model, &utts, Exec::from_env())?;
    out_dir(&io.out_dir)?;
    write(&io.out_dir.join("embeddings.csv"), embed::to_csv(&e.rows))?;
    write(&io.out_dir.join("embeddings.json"), e.summary.to_json())?;
    info!(
        "{} embeddings: silhouette {:.3} mean |mu| {:.3}",
        e.summary.count, e.summary.silhouette, e.summary.mean_mu_norm
    );
    Ok(())
}

fn synth(
    io: &Loaded,
    text_path: &Path,
    emotion: Option<&str>,
    reference: Option<&str>,
    max_frames: Option<usize>,
    output: &str,
) -> Result<()> {
    let text = Text::parse(&read_text(text_path)?)?;
    // resolve the cheap argument errors before loading anything
    let wanted: Option<Emotion> = emotion.map(str::parse).transpose()?;
    let max_frames = max_frames.unwrap_or(10 * text.len());
    if max_frames < text.len() {
        return Err(Error::Config(format!(
            "--max-frames {max_frames} is below the phoneme count {}",
            text.len()
        )));
    }
    let (model, utts) = load(io)?;
    let (z, label) = match (wanted, reference) {
        (Some(e), _) => {
            let (train_set, _) = split(&model.config, &utts)?;
            let mus = train_set
                .iter()
                .map(|u| model.embed(&u.mel))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<Emotion> = train_set.iter().map(|u| u.emotion).collect();
            let centroids = vae::emotion_centroids(&mus, &labels)?;
            (centroids.get(e).to_vec(), e)
        }
        (None, Some(id)) => {
            let u = utts
                .iter()
                .find(|u| u.id == id)
                .ok_or_else(|| Error::Config(format!("no utterance with id {id:?} in the corpus")))?;
            (model.embed(&u.mel)?, u.emotion)
        }
        (None, None) => return Err(Error::Config("pass --emotion or --reference".into())),
    };
    let pred = model.synthesize(&text, &z, max_frames)?;
    let alignment = metrics::monotone_alignment(&pred.attention, text.len())?;
    let utt = Utterance {
        id: "synth".into(),
        text,
        emotion: label,
        mel: pred.mel,
        alignment,
    };
    let cfg = &model.config;
    let header = CorpusHeader::new(cfg.corpus.bands, cfg.corpus.hop_ms, cfg.profiles(), 1, None);
    out_dir(&io.out_dir)?;
    let path = io.out_dir.join(output);
    corpus::write_corpus(&path, &header, std::slice::from_ref(&utt))?;
    info!("wrote {} frames to {}", utt.frames(), path.display());
    Ok(())
}

fn plot_cmd(embeddings: Option<&Path>, metric_files: &[PathBuf], dir: &Path) -> Result<()> {
    if embeddings.is_none() && metric_files.is_empty() {
        return Err(Error::Config("pass --embeddings and/or --metrics".into()));
    }
    // parse and render everything before writing anything
    let mut outputs = Vec::new();
    if let Some(p) = embeddings {
        let rows = embed::from_csv(&read_text(p)?)?;
        outputs.push(("embeddings.svg", plot::embedding_scatter(&rows, "Latent means (PCA)")?));
    }
    if !metric_files.is_empty() {
        let mut rows = Vec::new();
        for p in metric_files {
            rows.extend(plot::parse_metric_csv(&read_text(p)?)?);
        }
        outputs.push(("metrics.svg", plot::metric_bars(&rows, "Overall metrics")?));
    }
    out_dir(dir)?;
    for (name, svg) in outputs {
        let path = dir.join(name);
        write(&path, svg)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}
