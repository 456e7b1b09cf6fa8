use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{sha256_hex, RunConfig};
use super::system::TextToSign;
use crate::deto::{thread_cap, train_tokenizer, DecoupledTokenizer};
use crate::error::{Result, SokeError};
use crate::metrics::{evaluate_split, pa_mpjpe, EvalReport, EvalSample, SplitReport};
use crate::motion::{read_motion_file, write_motion_file, KinematicChain, MotionSequence, SynthConfig, SynthCorpus};
use crate::retrieval::{build_dictionary, SignDictionary, SuffixLemmatizer};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const DETO_DIR: &str = "deto";
pub const DETO_LOG: &str = "deto_log.json";
pub const DICT_FILE: &str = "dict.json";
pub const AMG_DIR: &str = "amg";
pub const AMG_LOG: &str = "amg_log.json";
pub const GENERATED_FILE: &str = "generated.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "log.jsonl";
const STAMP_DIR: &str = "stamps";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    TrainDeto,
    BuildDict,
    TrainAmg,
    Generate,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Synth,
        Stage::TrainDeto,
        Stage::BuildDict,
        Stage::TrainAmg,
        Stage::Generate,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainDeto => "train-deto",
            Stage::BuildDict => "build-dict",
            Stage::TrainAmg => "train-amg",
            Stage::Generate => "generate",
            Stage::Eval => "eval",
        }
    }

    /// Run-directory paths this stage reads.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &[],
            Stage::TrainDeto => &[CORPUS_FILE],
            Stage::BuildDict => &[INSTANCES_FILE, DETO_DIR],
            Stage::TrainAmg => &[CORPUS_FILE, DETO_DIR, DICT_FILE],
            Stage::Generate => &[HELDOUT_FILE, AMG_DIR],
            Stage::Eval => &[CORPUS_FILE, HELDOUT_FILE, AMG_DIR],
        }
    }

    /// Run-directory paths this stage writes.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &[CORPUS_FILE, HELDOUT_FILE, INSTANCES_FILE],
            Stage::TrainDeto => &[DETO_DIR, DETO_LOG],
            Stage::BuildDict => &[DICT_FILE],
            Stage::TrainAmg => &[AMG_DIR, AMG_LOG],
            Stage::Generate => &[GENERATED_FILE],
            Stage::Eval => &[REPORT_FILE],
        }
    }

    /// The configuration this stage depends on.
    fn config_slice(self, c: &RunConfig) -> serde_json::Value {
        match self {
            Stage::Synth => json!({"seed": c.seed, "synth": c.synth, "data": c.data}),
            Stage::TrainDeto => json!({"seed": c.seed, "deto": c.deto}),
            Stage::BuildDict => json!({}),
            Stage::TrainAmg => json!({"seed": c.seed, "amg": c.amg, "retrieval": c.retrieval}),
            Stage::Generate => json!({}),
            Stage::Eval => json!({"metrics": c.metrics}),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = SokeError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| SokeError::Config(format!("unknown stage {s:?}")))
    }
}

/// Derives an independent seed for one use of the run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let h = sha256_hex(format!("{seed}:{purpose}").as_bytes());
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

/// SHA-256 of a file, or of a directory as the sorted list of its files'
/// relative paths and digests.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries = Vec::new();
        collect_files(path, path, &mut entries)?;
        entries.sort();
        let listing: String = entries.iter().map(|(rel, h)| format!("{rel}\t{h}\n")).collect();
        Ok(sha256_hex(listing.as_bytes()))
    } else {
        Ok(sha256_hex(&fs::read(path)?))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p
                .strip_prefix(root)
                .expect("under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push((rel, sha256_hex(&fs::read(&p)?)));
        }
    }
    Ok(())
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Appends JSON-lines events to `log.jsonl` and echoes a one-line summary
/// to stderr.
pub struct RunLog {
    path: PathBuf,
    quiet: bool,
}

impl RunLog {
    pub fn new(run_dir: &Path, quiet: bool) -> Self {
        Self {
            path: run_dir.join(LOG_FILE),
            quiet,
        }
    }

    pub fn event(&self, stage: &str, event: &str, fields: serde_json::Value) -> Result<()> {
        let mut record = json!({"ts": unix_seconds(), "stage": stage, "event": event});
        if let (Some(r), Some(f)) = (record.as_object_mut(), fields.as_object()) {
            for (k, v) in f {
                r.insert(k.clone(), v.clone());
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(file, "{}", serde_json::to_string(&record)?)?;
        if !self.quiet {
            eprintln!("[{stage}] {event} {fields}");
        }
        Ok(())
    }
}

/// Proof that a stage ran: its key and the digests of what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: Stage,
    /// Hash of the stage's config slice and its input digests.
    pub key: String,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub stages: Vec<StageStamp>,
    /// Digest of every artifact, keyed by run-directory path.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    /// Re-hashes every artifact and reports the first mismatch.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for (rel, want) in &self.artifacts {
            let got = hash_path(&run_dir.join(rel))?;
            if &got != want {
                return Err(SokeError::Checkpoint(format!(
                    "artifact {rel} changed: {got} != {want}"
                )));
            }
        }
        Ok(())
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(run_dir.join(MANIFEST_FILE))?)?)
    }
}

/// Whether a stage ran or was reused from disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Reused,
}

/// Outcome of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: EvalReport,
    pub stages: Vec<(Stage, StageStatus)>,
    pub manifest: RunManifest,
}

impl PipelineRun {
    pub fn ran(&self) -> Vec<Stage> {
        self.stages
            .iter()
            .filter(|(_, s)| *s == StageStatus::Ran)
            .map(|(st, _)| *st)
            .collect()
    }
}

fn stamp_path(run_dir: &Path, stage: Stage) -> PathBuf {
    run_dir.join(STAMP_DIR).join(format!("{}.json", stage.name()))
}

fn stage_key(run_dir: &Path, stage: Stage, config: &RunConfig) -> Result<String> {
    let mut inputs = BTreeMap::new();
    for rel in stage.inputs() {
        let p = run_dir.join(rel);
        if !p.exists() {
            return Err(SokeError::Input(format!("missing input {rel}")));
        }
        inputs.insert(rel.to_string(), hash_path(&p)?);
    }
    let material = json!({"stage": stage.name(), "config": stage.config_slice(config), "inputs": inputs});
    Ok(sha256_hex(serde_json::to_string(&material)?.as_bytes()))
}

/// The stamp if it matches `key` and every output still hashes as recorded.
fn valid_stamp(run_dir: &Path, stage: Stage, key: &str) -> Option<StageStamp> {
    let stamp: StageStamp = serde_json::from_str(&fs::read_to_string(stamp_path(run_dir, stage)).ok()?).ok()?;
    if stamp.key != key || stamp.stage != stage {
        return None;
    }
    for rel in stage.outputs() {
        let h = hash_path(&run_dir.join(rel)).ok()?;
        if stamp.outputs.get(*rel) != Some(&h) {
            return None;
        }
    }
    Some(stamp)
}

fn read_split(path: &Path, config: &RunConfig) -> Result<Vec<(String, MotionSequence)>> {
    read_motion_file(path, config.synth.layout)
}

fn samples(split: &str, data: Vec<(String, MotionSequence)>) -> Vec<EvalSample> {
    data.into_iter()
        .enumerate()
        .map(|(i, (text, reference))| EvalSample {
            id: format!("{split}-{i}"),
            text,
            reference,
        })
        .collect()
}

/// Training sentences, held-out sentences with unseen word sequences, and
/// noisy isolated-sign instances of every lexicon word.
pub fn synthesize_splits(
    synth: &SynthConfig,
    data: &super::config::DataConfig,
    seed: u64,
) -> Result<[Vec<(String, MotionSequence)>; 3]> {
    let n_train = synth.n_sentences;
    let wide = SynthConfig {
        n_sentences: n_train + data.heldout_sentences,
        ..synth.clone()
    };
    let corpus = SynthCorpus::generate(&wide, seed)?;
    let mut sentences = corpus.sentences.clone();
    let mut heldout_all = sentences.split_off(n_train);
    if data.heldout_uniform_words {
        heldout_all = corpus.extra_sentences(data.heldout_sentences, 0.0, derive_seed(seed, "heldout"))?;
    }
    let seen: std::collections::HashSet<&str> = sentences.iter().map(|(t, _)| t.as_str()).collect();
    let heldout = heldout_all
        .into_iter()
        .filter(|(t, _)| !seen.contains(t.as_str()))
        .collect();
    let instances = corpus.word_instances(
        data.instances_per_word,
        data.instance_noise,
        derive_seed(seed, "instances"),
    );
    Ok([sentences, heldout, instances])
}

/// Mean round-trip PA-MPJPE of the tokenizer over `data`.
pub fn reconstruction_error(deto: &DecoupledTokenizer, data: &[(String, MotionSequence)]) -> Result<f64> {
    let chain = KinematicChain::toy(deto.layout())?;
    let mut total = 0.0;
    let mut n = 0;
    for (_, seq) in data {
        if seq.len() < deto.config.downsample {
            continue;
        }
        total += pa_mpjpe(&chain, &deto.round_trip(seq)?, seq)?;
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

/// Evaluates a generator on the training and held-out splits.
pub fn evaluate_system(
    system: &TextToSign,
    train: Vec<(String, MotionSequence)>,
    heldout: Vec<(String, MotionSequence)>,
    config: &RunConfig,
    provenance: serde_json::Value,
) -> Result<EvalReport> {
    let chain = KinematicChain::toy(config.synth.layout)?;
    let threads = thread_cap();
    let rec = reconstruction_error(&system.deto, &train)?;
    let mut splits: Vec<SplitReport> = Vec::new();
    for (name, data) in [("train", train), ("heldout", heldout)] {
        if data.is_empty() {
            continue;
        }
        let mut split = evaluate_split(name, system, &samples(name, data), &chain, &config.metrics, threads)?;
        if name == "train" {
            split.aggregates.pa_mpjpe = Some(rec);
        }
        splits.push(split);
    }
    let echo = json!({"run": config, "config_hash": config.hash(), "provenance": provenance});
    Ok(EvalReport::new(echo, &config.metrics, splits))
}

fn run_stage(run_dir: &Path, stage: Stage, config: &RunConfig, log: &RunLog) -> Result<()> {
    let p = |rel: &str| run_dir.join(rel);
    match stage {
        Stage::Synth => {
            let [train, heldout, instances] = synthesize_splits(&config.synth, &config.data, config.seed)?;
            write_motion_file(&p(CORPUS_FILE), &train)?;
            write_motion_file(&p(HELDOUT_FILE), &heldout)?;
            write_motion_file(&p(INSTANCES_FILE), &instances)?;
            log.event(
                stage.name(),
                "wrote",
                json!({"train": train.len(), "heldout": heldout.len(), "instances": instances.len()}),
            )?;
        }
        Stage::TrainDeto => {
            let corpus: Vec<MotionSequence> = read_split(&p(CORPUS_FILE), config)?
                .into_iter()
                .map(|(_, m)| m)
                .collect();
            let (deto, train_log) = train_tokenizer(&corpus, &config.deto, derive_seed(config.seed, "deto"))?;
            let _ = fs::remove_dir_all(p(DETO_DIR));
            deto.save(&p(DETO_DIR))?;
            fs::write(p(DETO_LOG), serde_json::to_string_pretty(&train_log)?)?;
            let rec: Vec<_> = train_log
                .parts
                .iter()
                .map(|l| json!({"part": l.part, "first_rec": l.first_rec(), "last_rec": l.last_rec()}))
                .collect();
            log.event(stage.name(), "trained", json!({ "parts": rec }))?;
        }
        Stage::BuildDict => {
            let deto = DecoupledTokenizer::load(&p(DETO_DIR))?;
            let instances = read_split(&p(INSTANCES_FILE), config)?;
            let built = build_dictionary(&instances, &deto, &SuffixLemmatizer)?;
            for w in &built.warnings {
                log.event(stage.name(), "warning", json!({ "message": w }))?;
            }
            built.dictionary.save(&p(DICT_FILE))?;
            log.event(stage.name(), "wrote", json!({"entries": built.dictionary.len()}))?;
        }
        Stage::TrainAmg => {
            let deto = DecoupledTokenizer::load(&p(DETO_DIR))?;
            let dict = SignDictionary::load(&p(DICT_FILE))?;
            let corpus = read_split(&p(CORPUS_FILE), config)?;
            let (system, train_log) = TextToSign::train(
                &corpus,
                deto,
                dict,
                config.amg.clone(),
                config.retrieval.clone(),
                derive_seed(config.seed, "amg"),
            )?;
            for w in &train_log.warnings {
                log.event(stage.name(), "warning", json!({ "message": w }))?;
            }
            let _ = fs::remove_dir_all(p(AMG_DIR));
            system.save(&p(AMG_DIR))?;
            fs::write(p(AMG_LOG), serde_json::to_string_pretty(&train_log)?)?;
            log.event(
                stage.name(),
                "trained",
                json!({"mode": train_log.mode, "first_loss": train_log.first_loss(), "last_loss": train_log.last_loss()}),
            )?;
        }
        Stage::Generate => {
            let system = TextToSign::load(&p(AMG_DIR))?;
            let heldout = read_split(&p(HELDOUT_FILE), config)?;
            let out = heldout
                .iter()
                .map(|(text, seq)| Ok((text.clone(), system.generate_full(text, &seq.language)?.motion)))
                .collect::<Result<Vec<_>>>()?;
            write_motion_file(&p(GENERATED_FILE), &out)?;
            log.event(stage.name(), "wrote", json!({"sequences": out.len()}))?;
        }
        Stage::Eval => {
            let system = TextToSign::load(&p(AMG_DIR))?;
            let mut provenance = Vec::new();
            for st in Stage::ALL.into_iter().filter(|s| *s != Stage::Eval) {
                let stamp: StageStamp = serde_json::from_str(&fs::read_to_string(stamp_path(run_dir, st))?)?;
                provenance.push(stamp);
            }
            let report = evaluate_system(
                &system,
                read_split(&p(CORPUS_FILE), config)?,
                read_split(&p(HELDOUT_FILE), config)?,
                config,
                serde_json::to_value(&provenance)?,
            )?;
            fs::write(p(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
            for s in &report.splits {
                log.event(
                    stage.name(),
                    "split",
                    json!({"name": s.name, "aggregates": s.aggregates}),
                )?;
            }
        }
    }
    Ok(())
}

fn tag(stage: Stage) -> impl FnOnce(SokeError) -> SokeError {
    move |e| SokeError::Stage {
        stage: stage.name().into(),
        source: Box::new(e),
    }
}

/// Runs one stage unless a valid stamp shows its outputs are current, or
/// unconditionally when `force` is set.
pub fn ensure_stage(
    run_dir: &Path,
    stage: Stage,
    config: &RunConfig,
    log: &RunLog,
    force: bool,
) -> Result<(StageStamp, StageStatus)> {
    let key = stage_key(run_dir, stage, config).map_err(tag(stage))?;
    if !force {
        if let Some(stamp) = valid_stamp(run_dir, stage, &key) {
            log.event(stage.name(), "reused", json!({}))?;
            return Ok((stamp, StageStatus::Reused));
        }
    }
    log.event(stage.name(), "start", json!({}))?;
    let _ = fs::remove_file(stamp_path(run_dir, stage));
    run_stage(run_dir, stage, config, log).map_err(tag(stage))?;
    let mut outputs = BTreeMap::new();
    for rel in stage.outputs() {
        outputs.insert(rel.to_string(), hash_path(&run_dir.join(rel)).map_err(tag(stage))?);
    }
    let stamp = StageStamp { stage, key, outputs };
    fs::create_dir_all(run_dir.join(STAMP_DIR))?;
    write_atomic(
        &stamp_path(run_dir, stage),
        serde_json::to_string_pretty(&stamp)?.as_bytes(),
    )?;
    log.event(stage.name(), "done", json!({}))?;
    Ok((stamp, StageStatus::Ran))
}

/// synth, train-deto, build-dict, train-amg, generate, eval. Stages whose
/// outputs are current on disk are reused; missing or stale ones rerun.
pub fn run_pipeline(run_dir: &Path, config: &RunConfig, quiet: bool) -> Result<PipelineRun> {
    config.validate()?;
    fs::create_dir_all(run_dir)?;
    let started = unix_seconds();
    let log = RunLog::new(run_dir, quiet);
    fs::write(run_dir.join("config.toml"), config.to_toml()?)?;
    let mut stages = Vec::new();
    let mut stamps = Vec::new();
    for stage in Stage::ALL {
        let (stamp, status) = ensure_stage(run_dir, stage, config, &log, false)?;
        stages.push((stage, status));
        stamps.push(stamp);
    }
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(run_dir.join(REPORT_FILE))?)?;
    let artifacts = stamps
        .iter()
        .flat_map(|s| s.outputs.iter().map(|(k, v)| (k.clone(), v.clone())))
        .collect();
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config_hash: config.hash(),
        started_unix: started,
        finished_unix: unix_seconds(),
        stages: stamps,
        artifacts,
    };
    write_atomic(
        &run_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    log.event("pipeline", "finished", json!({"ran": stages.iter().filter(|(_, s)| *s == StageStatus::Ran).map(|(st, _)| st.name()).collect::<Vec<_>>()}))?;
    Ok(PipelineRun {
        report,
        stages,
        manifest,
    })
}
