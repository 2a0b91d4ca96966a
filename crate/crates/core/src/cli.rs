//! `ntt` command line: `gen-data`, `train`, `caption` and `eval`.
//!
//! Every subcommand accepts `--config FILE`, a `key=value` file with `#`
//! comments whose keys are the long flag names; flags given on the command
//! line take precedence. Worker count falls back to `NTT_WORKERS`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};
use crate::data::{
    build_vocab, gen_corpus, read_dataset, write_atomic, write_dataset, CorpusConfig, SplitConfig, SplitMode, Vocab,
};
use crate::decoder::{DecoderKind, MetaDropout};
use crate::error::{Error, Result};
use crate::inference::{caption_corpus, caption_words, write_captions, DEFAULT_MAX_LEN};
use crate::metrics::{bleu, cider, grounding_accuracy, EvalReport, EvalRow};
use crate::model::{Model, ModelConfig};
use crate::nn::InitConfig;
use crate::train::{train, Adam, Precision, TrainConfig};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Parser, Debug)]
#[command(name = "ntt", about = "Twin cascaded attention captioner on a synthetic grounded-scene corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a corpus and write train/val/test splits plus the vocabulary.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and training log.
    Train(TrainArgs),
    /// Caption a dataset file with a trained checkpoint.
    Caption(CaptionArgs),
    /// Score checkpoints on the test split and write a results table.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Comma-separated categories held out of training in novel mode.
    #[arg(long)]
    excluded: Option<String>,
    /// Category pair held out in robust mode, as `a,b`.
    #[arg(long)]
    held_out: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log path; defaults to the checkpoint path plus `.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    att_dim: Option<usize>,
    #[arg(long)]
    anneal_every: Option<usize>,
    #[arg(long)]
    anneal_factor: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Record per-epoch wall time in the log (makes logs run-dependent).
    #[arg(long)]
    wall_time: bool,
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated checkpoint paths; each becomes one row.
    #[arg(long)]
    ckpts: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Which split file of the data directory to score.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

/// Values from a `--config` file.
struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        let mut values = BTreeMap::new();
        let Some(path) = path else {
            return Ok(FileConfig { values });
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let key = k.trim().replace('-', "_");
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("unknown key '{key}' (allowed: {})", allowed.join(", ")),
                });
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("key '{key}' given twice"),
                });
            }
        }
        Ok(FileConfig { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key '{key}' has invalid value '{raw}'"))),
        }
    }

    /// Flag, then file, then default.
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => self.get(key)?.ok_or_else(|| Error::Config(format!("--{} is required", key.replace('_', "-")))),
        }
    }

    fn workers(&self, flag: Option<usize>) -> Result<usize> {
        let from_env = match std::env::var("NTT_WORKERS") {
            Ok(v) => Some(v.parse().map_err(|_| Error::Config(format!("NTT_WORKERS has invalid value '{v}'")))?),
            Err(_) => None,
        };
        let w = match flag {
            Some(w) => w,
            None => self.get("workers")?.or(from_env).unwrap_or(1),
        };
        if w == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(w)
    }
}

fn parse_pair(s: &str) -> Result<(String, String)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts[..] {
        [a, b] if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
        _ => Err(Error::Config(format!("expected two comma-separated categories, got '{s}'"))),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let f = FileConfig::load(
        a.config.as_deref(),
        &["seed", "n", "split", "out", "feature_dim", "noise", "excluded", "held_out"],
    )?;
    let seed = f.pick(a.seed, "seed", 7)?;
    let n = f.pick(a.n, "n", 200)?;
    let mode: SplitMode = f.pick(a.split, "split", "standard".to_string())?.parse()?;
    let out: PathBuf = f.require(a.out, "out")?;
    let defaults = CorpusConfig::default();
    let corpus_cfg = CorpusConfig {
        feature_dim: f.pick(a.feature_dim, "feature_dim", defaults.feature_dim)?,
        noise: f.pick(a.noise, "noise", defaults.noise)?,
        ..defaults
    };
    let split_defaults = SplitConfig::default();
    let excluded = match a.excluded.or(f.get("excluded")?) {
        Some(s) => s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect(),
        None => split_defaults.excluded,
    };
    let held_out_pair = match a.held_out.or(f.get("held_out")?) {
        Some(s) => parse_pair(&s)?,
        None => split_defaults.held_out_pair,
    };
    let split_cfg = SplitConfig {
        mode,
        excluded,
        held_out_pair,
    };
    corpus_cfg.validate()?;

    let records = gen_corpus(seed, n, &corpus_cfg)?;
    let splits = crate::data::split_corpus(&records, &split_cfg, seed)?;
    let vocab = build_vocab(&records);
    fs::create_dir_all(&out)?;
    write_dataset(&splits.train, &out.join(TRAIN_FILE))?;
    write_dataset(&splits.val, &out.join(VAL_FILE))?;
    write_dataset(&splits.test, &out.join(TEST_FILE))?;
    vocab.write(&out.join(VOCAB_FILE))?;
    eprintln!(
        "wrote {} train / {} val / {} test scenes ({} split) to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        mode,
        out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let f = FileConfig::load(
        a.config.as_deref(),
        &[
            "model", "data", "out", "log", "epochs", "batch", "lr", "seed", "hidden", "embed", "att_dim",
            "anneal_every", "anneal_factor", "clip", "precision", "workers",
        ],
    )?;
    let d = TrainConfig::default();
    let kind: DecoderKind = f.require(a.model, "model")?.parse()?;
    let data: PathBuf = f.require(a.data, "data")?;
    let out: PathBuf = f.require(a.out, "out")?;
    let log_path = match a.log.or(f.get("log")?) {
        Some(p) => p,
        None => {
            let mut s = out.clone().into_os_string();
            s.push(".log");
            PathBuf::from(s)
        }
    };
    let precision = match f.pick(a.precision, "precision", "f32".to_string())?.as_str() {
        "f32" => Precision::F32,
        "f64" => Precision::F64,
        other => return Err(Error::Config(format!("precision must be f32 or f64, got '{other}'"))),
    };
    let hidden = f.pick(a.hidden, "hidden", d.hidden)?;
    let cfg = TrainConfig {
        epochs: f.pick(a.epochs, "epochs", d.epochs)?,
        batch_size: f.pick(a.batch, "batch", d.batch_size)?,
        lr0: f.pick(a.lr, "lr", d.lr0)?,
        anneal_every: f.pick(a.anneal_every, "anneal_every", d.anneal_every)?,
        anneal_factor: f.pick(a.anneal_factor, "anneal_factor", d.anneal_factor)?,
        seed: f.pick(a.seed, "seed", d.seed)?,
        hidden,
        embed: f.pick(a.embed, "embed", d.embed)?,
        clip_norm: f.pick(a.clip, "clip", d.clip_norm)?,
        workers: f.workers(a.workers)?,
        precision,
        wall_time: a.wall_time,
        ..d
    };
    cfg.validate()?;
    let att_dim = f.pick(a.att_dim, "att_dim", hidden)?;
    if log_path == out {
        return Err(Error::Config("--log and --out name the same file".into()));
    }

    let corpus = read_dataset(&data.join(TRAIN_FILE))?;
    if corpus.is_empty() {
        return Err(Error::Config(format!("{} holds no scenes", data.join(TRAIN_FILE).display())));
    }
    let vocab = Vocab::read(&data.join(VOCAB_FILE))?;
    let model_cfg = ModelConfig {
        kind,
        embed: cfg.embed,
        hidden: cfg.hidden,
        att_dim,
        feature_dim: corpus[0].regions.feature_dim(),
        dropout: MetaDropout::default(),
        init: InitConfig::default(),
    };
    let (model, mut store) = Model::build(&model_cfg, &vocab, cfg.seed)?;
    let mut opt = Adam::new(&store, cfg.lr0);
    let log = train(&model, &mut store, &mut opt, &corpus, &vocab, &cfg)?;
    if cfg.precision == Precision::F32 {
        store.round_to_f32();
    }
    let extra = [
        ("seed", cfg.seed.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch", cfg.batch_size.to_string()),
        ("lr0", format!("{:?}", cfg.lr0)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let ck = Checkpoint {
        model: model_cfg,
        vocab,
        params: store,
        optimizer: opt,
        extra,
    };
    checkpoint_save(&ck, &out)?;
    write_atomic(&log_path, log.render().as_bytes())?;
    if let Some(last) = log.entries.last() {
        eprintln!("trained {} for {} epochs, final mean loss {:.4}", kind, cfg.epochs, last.mean_loss);
    }
    Ok(())
}

fn caption_cmd(a: CaptionArgs) -> Result<()> {
    let f = FileConfig::load(a.config.as_deref(), &["ckpt", "data", "beam", "max_len", "out", "workers"])?;
    let ckpt: PathBuf = f.require(a.ckpt, "ckpt")?;
    let data: PathBuf = f.require(a.data, "data")?;
    let out: PathBuf = f.require(a.out, "out")?;
    let beam = f.pick(a.beam, "beam", TrainConfig::default().beam)?;
    let max_len = f.pick(a.max_len, "max_len", DEFAULT_MAX_LEN)?;
    let workers = f.workers(a.workers)?;
    if beam == 0 || max_len == 0 {
        return Err(Error::Config("beam and max-len must be at least 1".into()));
    }
    let ck = checkpoint_load(&ckpt)?;
    let (model, store) = ck.restore()?;
    let records = read_dataset(&data)?;
    let hyps = caption_corpus(&model, &store, &records, &ck.vocab, beam, max_len, workers)?;
    write_captions(&out, &records, &hyps, &ck.vocab)?;
    eprintln!("captioned {} scenes", records.len());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let f = FileConfig::load(
        a.config.as_deref(),
        &["ckpts", "data", "out", "beam", "max_len", "split", "workers"],
    )?;
    let ckpts: String = f.require(a.ckpts, "ckpts")?;
    let data: PathBuf = f.require(a.data, "data")?;
    let out: PathBuf = f.require(a.out, "out")?;
    let beam = f.pick(a.beam, "beam", TrainConfig::default().beam)?;
    let max_len = f.pick(a.max_len, "max_len", DEFAULT_MAX_LEN)?;
    let split = f.pick(a.split, "split", "test".to_string())?;
    let workers = f.workers(a.workers)?;
    if beam == 0 || max_len == 0 {
        return Err(Error::Config("beam and max-len must be at least 1".into()));
    }
    let file = match split.as_str() {
        "train" => TRAIN_FILE,
        "val" => VAL_FILE,
        "test" => TEST_FILE,
        other => return Err(Error::Config(format!("split must be train, val or test, got '{other}'"))),
    };
    let paths: Vec<PathBuf> = ckpts.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect();
    if paths.is_empty() {
        return Err(Error::Config("--ckpts names no checkpoint".into()));
    }
    let records = read_dataset(&data.join(file))?;
    if records.is_empty() {
        return Err(Error::Config(format!("{} holds no scenes", data.join(file).display())));
    }
    // Load everything first so a bad checkpoint fails before any scoring.
    let loaded = paths
        .iter()
        .map(|p| checkpoint_load(p).map(|ck| (p, ck)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (path, ck) in loaded {
        let (model, store) = ck.restore()?;
        let hyps = caption_corpus(&model, &store, &records, &ck.vocab, beam, max_len, workers)?;
        let cands: Vec<Vec<String>> = hyps.iter().map(|h| caption_words(h, &ck.vocab)).collect();
        let refs: Vec<Vec<String>> = records.iter().map(|r| r.tokens.clone()).collect();
        let cider_score = if records.len() >= 2 { cider(&cands, &refs)? } else { 0.0 };
        rows.push(EvalRow {
            model: path
                .file_stem()
                .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned()),
            bleu1: bleu(&cands, &refs, 1)?,
            bleu4: bleu(&cands, &refs, 4)?,
            cider: cider_score,
            grounding: Some(grounding_accuracy(&hyps, &records)?),
        });
    }
    let report = EvalReport {
        split,
        corpus_size: records.len(),
        rows,
    };
    let mut jsonl = out.clone().into_os_string();
    jsonl.push(".jsonl");
    write_atomic(&out, report.render_table().as_bytes())?;
    write_atomic(Path::new(&jsonl), report.render_jsonl().as_bytes())?;
    print!("{}", report.render_table());
    Ok(())
}

/// Runs one invocation; returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Caption(a) => caption_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
