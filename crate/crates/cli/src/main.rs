use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use mbcap_cli::checkpoint;
use mbcap_cli::config::{BridgeMode, RunConfig};
use mbcap_cli::experiments::{self, Session};
use mbcap_cli::pipeline::{self, AudioInput, CaptionerSpec, CorpusDir, Frozen, Manifest};
use mbcap_core::bridge::{estimate_noise_std, LinearAdapter};
use mbcap_core::captioner::{DecoderLM, MappingNetwork, TrainMode};
use mbcap_core::corpus::Split;
use mbcap_core::jointspace::DualEncoder;
use mbcap_core::metrics::{evaluate_corpus, Prediction, Reference, Smoothing};
use mbcap_core::numerics::RngState;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "mbcap", version, about = "Text-only audio captioning on a synthetic paired corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Preset used for keys the config file leaves out.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// TOML run config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "MB_SEED")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(anyhow::Error::msg)?,
            None => RunConfig::preset(&self.preset).map_err(anyhow::Error::msg)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(anyhow::Error::msg)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (train/val/test JSONL and a manifest).
    Generate {
        #[arg(long, env = "MB_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        scenes: usize,
        #[arg(long, default_value_t = 12)]
        events: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the contrastive audio/text dual encoder.
    TrainJointspace {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the decoder language model that captioning keeps frozen.
    PretrainDecoder {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the linear text-to-audio adapter on held-in pairs.
    TrainAdapter {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the noise std from the text/audio gap of a few held-in pairs.
    EstimateGap {
        #[arg(long)]
        encoder: PathBuf,
        /// JSONL records with features and caption, such as a corpus train split.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, env = "MB_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the mapping network against the frozen encoder and decoder.
    TrainCaptioner {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        bridge: Option<BridgeMode>,
        #[arg(long)]
        noise_std: Option<f64>,
        /// Read audio features (audio-text mode only).
        #[arg(long)]
        audio: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption audio features with beam search.
    Infer {
        #[arg(long)]
        mapper: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// JSONL with `id` and `features` per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against references.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// JSONL with `captions` (list) or `caption` (single) per id.
        #[arg(long = "ref")]
        refs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one text-only captioner per noise std and tabulate the metrics.
    SweepNoise {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "0,0.005,0.01,0.015,0.05,0.1,0.5,1.0")]
        stds: String,
        /// Cache for the frozen encoder and decoder.
        #[arg(long)]
        work: Option<PathBuf>,
        /// Also write a gnuplot script plotting CIDEr-D against the std.
        #[arg(long)]
        gnuplot_script: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a paired experiment: compare-modes, augmented-text or style.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        name: String,
        #[arg(long)]
        work: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-hash the files of a run directory against its manifest.
    Verify {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string().replace('\n', " ")).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { seed, scenes, events, out } => {
            let corpus = mbcap_core::corpus::generate_corpus(seed, scenes, events)?;
            pipeline::write_corpus(&corpus, scenes, events, &out)?;
            println!("wrote {} records to {}", corpus.records.len(), out.display());
        }
        Command::TrainJointspace { cfg, corpus, out } => {
            let cfg = cfg.resolve()?;
            let corpus = CorpusDir::open(&corpus)?.regenerate()?;
            let (enc, log) = pipeline::train_encoder(&cfg, &corpus)?;
            let m = write_run(&out, "train-jointspace", &cfg, &[("encoder.mbck", &enc.params)], &log.to_csv())?;
            println!("encoder {}", m.files["encoder.mbck"]);
        }
        Command::PretrainDecoder { cfg, corpus, out } => {
            let cfg = cfg.resolve()?;
            let corpus = CorpusDir::open(&corpus)?.regenerate()?;
            let (dec, log) = pipeline::train_decoder(&cfg, &corpus)?;
            let m = write_run(&out, "pretrain-decoder", &cfg, &[("decoder.mbck", &dec.params)], &log.to_csv())?;
            println!("decoder {}", m.files["decoder.mbck"]);
        }
        Command::TrainAdapter { cfg, corpus, encoder, out } => {
            let cfg = cfg.resolve()?;
            let corpus = CorpusDir::open(&corpus)?.regenerate()?;
            let enc = load_encoder(&encoder)?;
            let (ad, fit) = pipeline::fit_adapter(&cfg, &enc, &corpus)?;
            write_run(&out, "train-adapter", &cfg, &[("adapter.mbck", &ad.params)], &fit.log.to_csv())?;
            println!("adapter train mse {:.6}", fit.final_mse);
        }
        Command::EstimateGap { encoder, pairs, n, seed, out } => {
            let enc = load_encoder(&encoder)?;
            let recs = mbcap_core::corpus::load_jsonl(&pairs)?;
            let refs: Vec<_> = recs.iter().collect();
            let pairs = pipeline::paired_examples(&refs, &pipeline::vocabulary())?;
            let (audio, text) = mbcap_core::jointspace::embed_pairs(&enc, &pairs)?;
            let mut rng = RngState::new(seed).derive(0x6A9);
            let eps = estimate_noise_std(&audio, &text, n, &mut rng)?;
            println!("{eps}");
            if let Some(p) = out {
                let v = serde_json::json!({ "noise_std": eps, "n": n, "seed": seed });
                fs::write(&p, serde_json::to_string_pretty(&v)? + "\n").with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::TrainCaptioner { cfg, corpus, encoder, decoder, adapter, mode, bridge, noise_std, audio, out } => {
            let mut cfg = cfg.resolve()?;
            if let Some(m) = mode {
                cfg.mode = parse_mode(&m)?;
            }
            if let Some(b) = bridge {
                cfg.bridge = b;
            }
            if noise_std.is_some() {
                cfg.noise_std = noise_std;
            }
            ensure!(!(audio && cfg.mode == TrainMode::TextOnly), "--audio conflicts with --mode text-only");
            let dir = CorpusDir::open(&corpus)?;
            let vocab = pipeline::vocabulary();
            let frozen = Frozen {
                encoder: load_encoder(&encoder)?,
                decoder: load_decoder(&decoder)?,
                adapter: adapter.as_deref().map(load_adapter).transpose()?,
            };
            let (data, eps) = match cfg.mode {
                TrainMode::TextOnly => {
                    // Only the text fields are parsed in this mode.
                    let recs = dir.text_records(Split::Train)?;
                    let data = pipeline::text_examples(recs.iter().map(|r| r.caption.as_str()), &vocab)?;
                    let eps = match cfg.noise_std {
                        Some(e) => e,
                        None if cfg.bridge.uses_noise() => {
                            let corpus = dir.regenerate()?;
                            pipeline::estimate_gap(&cfg, &frozen.encoder, &corpus)?
                        }
                        None => 0.0,
                    };
                    (data, eps)
                }
                TrainMode::AudioText => {
                    let recs = dir.records(Split::Train)?;
                    let refs: Vec<_> = recs.iter().collect();
                    (pipeline::audio_examples(&refs, &vocab)?, 0.0)
                }
            };
            cfg.noise_std = Some(eps);
            let spec = CaptionerSpec { mode: cfg.mode, bridge: cfg.bridge, noise_std: eps };
            let (mapper, log) = pipeline::train_mapper(&cfg, &frozen, spec, &data)?;
            write_run(&out, "train-captioner", &cfg, &[("mapper.mbck", &mapper.params)], &log.to_csv())?;
            println!(
                "mapper trained: mode {:?}, bridge {}, noise std {eps}, loss {:.4} -> {:.4}",
                cfg.mode,
                cfg.bridge,
                log.first_loss().unwrap_or(f64::NAN),
                log.last_loss().unwrap_or(f64::NAN)
            );
        }
        Command::Infer { mapper, decoder, encoder, input, beam, max_len, out } => {
            ensure!(beam >= 1, "--beam must be at least 1");
            let mut cfg = run_config_of(&mapper)?;
            cfg.beam_size = beam;
            if let Some(l) = max_len {
                cfg.max_caption_len = l;
            }
            let m = load_mapper(&mapper)?;
            let frozen = Frozen { encoder: load_encoder(&encoder)?, decoder: load_decoder(&decoder)?, adapter: None };
            let inputs: Vec<AudioInput> = read_jsonl(&input)?;
            ensure!(!inputs.is_empty(), "{} holds no inputs", input.display());
            let preds = pipeline::predict(&cfg, &m, &frozen, &inputs)?;
            fs::write(&out, pipeline::predictions_jsonl(&preds)).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} captions to {}", preds.len(), out.display());
        }
        Command::Evaluate { pred, refs, out } => {
            let preds: Vec<Prediction> = read_jsonl(&pred)?;
            let refs: Vec<RefLine> = read_jsonl(&refs)?;
            let refs = refs.into_iter().map(RefLine::into_reference).collect::<Result<Vec<_>>>()?;
            let report = evaluate_corpus(&preds, &refs, Smoothing::None)?;
            match out {
                Some(p) => {
                    fs::write(&p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
                    fs::write(p.with_extension("csv"), report.to_csv())?;
                }
                None => print!("{}", report.to_json()),
            }
            eprintln!("cider_d {:.4} bleu_4 {:.4}", report.cider_d, report.bleu_4);
        }
        Command::SweepNoise { cfg, stds, work, gnuplot_script, out } => {
            let stds = experiments::parse_stds(&stds)?;
            let cfg = cfg.resolve()?;
            let s = Session::prepare(&cfg, work.as_deref())?;
            fs::create_dir_all(&out)?;
            let rows = experiments::sweep_noise(&s, &stds)?;
            fs::write(out.join("sweep.csv"), experiments::sweep_csv(&rows))?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            let mut m = Manifest::new("sweep-noise").param("noise_std_estimate", s.eps_hat).param("stds", format!("{stds:?}"));
            for f in ["sweep.csv", "config.toml"] {
                m.add(&out, f)?;
            }
            if gnuplot_script {
                fs::write(out.join("sweep.gp"), experiments::gnuplot_script("sweep.csv"))?;
                m.add(&out, "sweep.gp")?;
            }
            m.write(&out)?;
            let best = experiments::sweep_best(&rows).expect("non-empty sweep");
            println!("noise std estimate {:.4}; best std {} (CIDEr-D {:.4})", s.eps_hat, best.std, best.metrics.cider_d);
        }
        Command::Experiment { cfg, name, work, out } => {
            ensure!(
                experiments::EXPERIMENTS.contains(&name.as_str()),
                "unknown experiment `{name}` (valid: {})",
                experiments::EXPERIMENTS.join(", ")
            );
            let cfg = cfg.resolve()?;
            let s = Session::prepare(&cfg, work.as_deref())?;
            let report = experiments::run_experiment(&s, &name)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("report.json"), report.to_json())?;
            fs::write(out.join("report.csv"), report.to_csv())?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            let mut m = Manifest::new("experiment").param("name", &name);
            for f in ["report.json", "report.csv", "config.toml"] {
                m.add(&out, f)?;
            }
            m.write(&out)?;
            print!("{}", report.to_csv());
        }
        Command::Verify { dir } => {
            let m = Manifest::read(&dir)?;
            let bad = m.verify(&dir);
            if !bad.is_empty() {
                bail!("hash mismatch in {}: {}", dir.display(), bad.join(", "));
            }
            println!("{} files verified", m.files.len());
        }
    }
    Ok(())
}

fn parse_mode(s: &str) -> Result<TrainMode> {
    match s {
        "text-only" => Ok(TrainMode::TextOnly),
        "audio-text" => Ok(TrainMode::AudioText),
        _ => bail!("unknown mode `{s}` (expected text-only or audio-text)"),
    }
}

/// Writes the resolved config, checkpoints, the training log and a manifest.
fn write_run(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    stores: &[(&str, &mbcap_core::numerics::ParamStore)],
    log_csv: &str,
) -> Result<Manifest> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    fs::write(out.join("log.csv"), log_csv)?;
    let mut m = Manifest::new(command);
    for (name, store) in stores {
        checkpoint::save(store, &out.join(name))?;
        m.add(out, name)?;
    }
    m.add(out, "config.toml")?;
    m.add(out, "log.csv")?;
    m.write(out)?;
    Ok(m)
}

/// The resolved config written next to a checkpoint.
fn run_config_of(ckpt: &Path) -> Result<RunConfig> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    RunConfig::load(&dir.join("config.toml")).map_err(anyhow::Error::msg).with_context(|| format!("config for {}", ckpt.display()))
}

fn load_encoder(path: &Path) -> Result<DualEncoder> {
    let cfg = run_config_of(path)?;
    let mut enc = DualEncoder::new(cfg.encoder_dims(pipeline::vocabulary().len()), cfg.seed);
    checkpoint::load_into(&mut enc.params, path).with_context(|| format!("loading {}", path.display()))?;
    Ok(enc)
}

fn load_decoder(path: &Path) -> Result<DecoderLM> {
    let cfg = run_config_of(path)?;
    let mut dec = DecoderLM::new(cfg.decoder_dims(pipeline::vocabulary().len()), cfg.seed);
    checkpoint::load_into(&mut dec.params, path).with_context(|| format!("loading {}", path.display()))?;
    Ok(dec)
}

fn load_mapper(path: &Path) -> Result<MappingNetwork> {
    let cfg = run_config_of(path)?;
    let mut m = MappingNetwork::new(cfg.mapper_dims(), cfg.seed);
    checkpoint::load_into(&mut m.params, path).with_context(|| format!("loading {}", path.display()))?;
    Ok(m)
}

fn load_adapter(path: &Path) -> Result<LinearAdapter> {
    let cfg = run_config_of(path)?;
    let mut a = LinearAdapter::identity(cfg.joint_dim);
    checkpoint::load_into(&mut a.params, path).with_context(|| format!("loading {}", path.display()))?;
    Ok(a)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

#[derive(Deserialize)]
struct RefLine {
    id: String,
    #[serde(default)]
    captions: Option<Vec<String>>,
    #[serde(default)]
    caption: Option<String>,
}

impl RefLine {
    fn into_reference(self) -> Result<Reference> {
        let captions = match (self.captions, self.caption) {
            (Some(c), _) => c,
            (None, Some(c)) => vec![c],
            (None, None) => bail!("reference `{}` has neither `captions` nor `caption`", self.id),
        };
        Ok(Reference { id: self.id, captions })
    }
}
