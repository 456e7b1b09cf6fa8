use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use soke::amg::DecodeMode;
use soke::deto::{train_tokenizer, DecoupledTokenizer};
use soke::metrics::{evaluate_split, EvalReport, EvalSample};
use soke::motion::{read_motion_file, write_motion_file, KinematicChain, Language, MotionSequence};
use soke::pipeline::{derive_seed, run_pipeline, synthesize_splits, RunConfig, TextToSign};
use soke::posefit::{fit_sequence, initial_camera, read_observations};
use soke::retrieval::{build_dictionary, SignDictionary, SuffixLemmatizer};

#[derive(Parser)]
#[command(
    name = "soke",
    version,
    about = "Text-to-sign generation on synthetic articulated motion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set amg.train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the training corpus (and optionally held-out sentences and isolated-sign instances).
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        instances: Option<PathBuf>,
    },
    /// Train the decoupled tokenizer.
    TrainDeto {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the word-level sign dictionary from isolated-sign instances.
    BuildDict {
        #[arg(long)]
        deto: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator; the output directory is a self-contained model bundle.
    TrainAmg {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        mode: Option<DecodeMode>,
        #[arg(long)]
        deto: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Dictionary for retrieval-augmented prompts.
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate motion for one sentence.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value = "ASL")]
        lang: Language,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on a motion file and write an evaluation report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Decode every sentence of a motion file and print step and latency statistics.
    BenchDecode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Refine upper-body poses against 2D keypoints.
    Posefit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines optimisation log.
        #[arg(long)]
        log: PathBuf,
    },
    /// Run every stage in a run directory, reusing current artifacts.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "run")]
        run_dir: PathBuf,
        /// Suppress per-event progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::TrainDeto { .. } => "train-deto",
            Command::BuildDict { .. } => "build-dict",
            Command::TrainAmg { .. } => "train-amg",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::BenchDecode { .. } => "bench-decode",
            Command::Posefit { .. } => "posefit",
            Command::Pipeline { .. } => "pipeline",
        }
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string(v)?)?;
    Ok(())
}

fn motion_file(path: &Path, config: &RunConfig) -> Result<Vec<(String, MotionSequence)>> {
    read_motion_file(path, config.synth.layout).with_context(|| format!("reading {}", path.display()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            cfg,
            out,
            heldout,
            instances,
        } => {
            let config = cfg.load()?;
            let [train, held, inst] = synthesize_splits(&config.synth, &config.data, config.seed)?;
            write_motion_file(&out, &train)?;
            if let Some(p) = heldout {
                write_motion_file(&p, &held)?;
            }
            if let Some(p) = instances {
                write_motion_file(&p, &inst)?;
            }
            print_json(&json!({"train": train.len(), "heldout": held.len(), "instances": inst.len()}))
        }
        Command::TrainDeto { cfg, data, out } => {
            let config = cfg.load()?;
            let corpus: Vec<MotionSequence> = motion_file(&data, &config)?.into_iter().map(|(_, m)| m).collect();
            let (deto, log) = train_tokenizer(&corpus, &config.deto, derive_seed(config.seed, "deto"))?;
            deto.save(&out)?;
            fs::write(out.join("train_log.json"), serde_json::to_string_pretty(&log)?)?;
            for p in &log.parts {
                print_json(&json!({"part": p.part, "first_rec": p.first_rec(), "last_rec": p.last_rec()}))?;
            }
            Ok(())
        }
        Command::BuildDict { deto, instances, out } => {
            let deto = DecoupledTokenizer::load(&deto)?;
            let inst = read_motion_file(&instances, deto.layout())?;
            let built = build_dictionary(&inst, &deto, &SuffixLemmatizer)?;
            for w in &built.warnings {
                eprintln!("build-dict: warning: {w}");
            }
            built.dictionary.save(&out)?;
            print_json(&json!({"entries": built.dictionary.len()}))
        }
        Command::TrainAmg {
            cfg,
            mode,
            deto,
            data,
            dict,
            out,
        } => {
            let mut config = cfg.load()?;
            if let Some(m) = mode {
                config.amg.mode = m;
            }
            let dict = match dict {
                Some(p) => SignDictionary::load(&p)?,
                None if config.retrieval.enabled => {
                    bail!("retrieval is enabled but no --dict was given (use --set retrieval.enabled=false)")
                }
                None => SignDictionary::default(),
            };
            let deto = DecoupledTokenizer::load(&deto)?;
            let corpus = motion_file(&data, &config)?;
            let (system, log) = TextToSign::train(
                &corpus,
                deto,
                dict,
                config.amg.clone(),
                config.retrieval.clone(),
                derive_seed(config.seed, "amg"),
            )?;
            for w in &log.warnings {
                eprintln!("train-amg: warning: {w}");
            }
            system.save(&out)?;
            fs::write(out.join("train_log.json"), serde_json::to_string_pretty(&log)?)?;
            print_json(&json!({"mode": log.mode, "first_loss": log.first_loss(), "last_loss": log.last_loss()}))
        }
        Command::Generate { model, text, lang, out } => {
            let system = TextToSign::load(&model)?;
            let g = system.generate_full(&text, &lang)?;
            write_motion_file(&out, &[(text, g.motion.clone())])?;
            print_json(
                &json!({"frames": g.motion.len(), "triples": g.decode.triples.len(), "step_count": g.decode.step_count}),
            )
        }
        Command::Eval {
            cfg,
            model,
            data,
            report,
        } => {
            let config = cfg.load()?;
            let system = TextToSign::load(&model)?;
            let name = data
                .file_stem()
                .map_or("data".into(), |s| s.to_string_lossy().into_owned());
            let samples: Vec<EvalSample> = motion_file(&data, &config)?
                .into_iter()
                .enumerate()
                .map(|(i, (text, reference))| EvalSample {
                    id: format!("{name}-{i}"),
                    text,
                    reference,
                })
                .collect();
            let chain = KinematicChain::toy(config.synth.layout)?;
            let split = evaluate_split(
                &name,
                &system,
                &samples,
                &chain,
                &config.metrics,
                soke::deto::thread_cap(),
            )?;
            let echo = json!({"run": config, "config_hash": config.hash(), "model": model});
            let r = EvalReport::new(echo, &config.metrics, vec![split]);
            fs::write(&report, serde_json::to_string_pretty(&r)?)?;
            print_json(&serde_json::to_value(&r.splits[0].aggregates)?)
        }
        Command::BenchDecode { model, data } => {
            let system = TextToSign::load(&model)?;
            let samples = read_motion_file(&data, system.deto.layout())?;
            if samples.is_empty() {
                bail!("no sentences in {}", data.display());
            }
            let (mut steps, mut ms) = (0.0, 0.0);
            for (text, seq) in &samples {
                let prompt = system.prompt(text, &seq.language)?;
                let start = Instant::now();
                let out = system.model.generate_tokens(&prompt, &seq.language)?;
                ms += start.elapsed().as_secs_f64() * 1e3;
                steps += out.step_count as f64;
            }
            let n = samples.len() as f64;
            print_json(&json!({"mode": system.model.mode(), "mean_step_count": steps / n, "mean_wall_ms": ms / n}))
        }
        Command::Posefit {
            cfg,
            init,
            obs,
            out,
            log,
        } => {
            let config = cfg.load()?;
            let mut items = motion_file(&init, &config)?;
            if items.len() != 1 {
                bail!(
                    "{} holds {} sequences; posefit takes exactly one",
                    init.display(),
                    items.len()
                );
            }
            let (text, seq) = items.remove(0);
            let observations = read_observations(&obs)?;
            let chain = KinematicChain::toy(config.synth.layout)?;
            let cam = initial_camera(&chain, &seq, &observations)?;
            let (fitted, fit_log) = fit_sequence(&chain, &seq, &observations, cam, &config.posefit)?;
            write_motion_file(&out, &[(text, fitted)])?;
            let mut lines = String::new();
            for it in &fit_log.iterations {
                lines.push_str(&serde_json::to_string(it)?);
                lines.push('\n');
            }
            let summary = json!({
                "camera": fit_log.camera,
                "stop_reason": fit_log.stop_reason,
                "monotone": fit_log.is_monotone(),
                "initial_total": fit_log.iterations.first().map(|i| i.terms.total),
                "final_total": fit_log.iterations.last().map(|i| i.terms.total),
            });
            lines.push_str(&serde_json::to_string(&summary)?);
            lines.push('\n');
            fs::write(&log, lines)?;
            print_json(&summary)
        }
        Command::Pipeline { cfg, run_dir, quiet } => {
            let config = cfg.load()?;
            let result = run_pipeline(&run_dir, &config, quiet)?;
            for s in &result.report.splits {
                print_json(&json!({"split": s.name, "aggregates": s.aggregates}))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("soke {name}: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
