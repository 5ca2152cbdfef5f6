//! End-to-end orchestration: pretraining, the embedding attack, adversarial
//! augmentation, noisy test-set generation, evaluation, and grid sweeps.
//!
//! Every command owns an output directory (guarded by a lockfile), records
//! what it did in an append-only manifest, and derives all randomness from
//! `(seed, stage name)` substreams — so rerunning a stage with the same
//! configuration reproduces its artifacts byte for byte, and a finished
//! stage is skipped instead of recomputed.
//!
//! On-disk sentence format: one sentence per line, content-token ids in
//! decimal separated by single spaces (the same rendering the metrics
//! score). Specials never appear in data files; the unknown-token id may
//! appear in noisy sources, since replacement may select it.

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::attack::{attack_embedding, ids_as_text, trace_to_lines, AttackConfig};
use crate::checkpoint::{load_dual, load_embedding, save_dual, save_embedding, save_single};
use crate::checkpoint::load_single;
use crate::corpus::{batch_indices, read_lines, write_lines, ParallelCorpus};
use crate::dual::DualSystem;
use crate::eval::{
    corpus_metric, delta_metric, report_fingerprint, score_model, EvalCell, EvalReport, ModelKind,
};
use crate::objectives::{nll_loss, Objective};
use crate::param::{checksum_params, Param};
use crate::perturb::{
    adversarialize, make_noisy_testset, noisy_file_name, EmbeddingPair, NoiseSpec, NoiseType,
    PerturbationPolicy,
};
use crate::rng::Rng;
use crate::tape::Session;
use crate::tensor::Tensor;
use crate::transformer::{ModelConfig, Seq2Seq};
use crate::vocab::UNK;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// The four aligned corpora a run reads. Paths are resolved relative to the
/// directory the configuration file was loaded from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    pub train_src: String,
    pub train_tgt: String,
    pub valid1_src: String,
    pub valid1_tgt: String,
    pub valid2_src: String,
    pub valid2_tgt: String,
    pub test_src: String,
    pub test_tgt: String,
}

impl DataPaths {
    fn all(&self) -> [&String; 8] {
        [
            &self.train_src,
            &self.train_tgt,
            &self.valid1_src,
            &self.valid1_tgt,
            &self.valid2_src,
            &self.valid2_tgt,
            &self.test_src,
            &self.test_tgt,
        ]
    }
}

/// One NLL training run: epoch budget, batching, learning rate, and an
/// optional dev-score level that ends the run early once reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_score: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("training needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if let Some(t) = self.target_score {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::contract(format!(
                    "target_score must lie in (0, 1], got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything one run needs. A run is identified by this document plus its
/// seed; the output directory refuses to mix runs with different
/// configurations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: DataPaths,
    pub model: ModelConfig,
    pub attack: AttackConfig,
    /// Caps how many sentence pairs feed the embedding attack (the front of
    /// the augmentation corpus); `None` uses all of them.
    pub attack_pairs: Option<usize>,
    pub policy: PerturbationPolicy,
    pub pretrain: TrainConfig,
    pub augment: TrainConfig,
    /// Metric keys: the first drives model selection and sweep scoring, the
    /// second fills the `dual_metric2` variant.
    pub metrics: Vec<String>,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Flag-level overrides applied on top of a loaded configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub metric: Option<String>,
    pub mrt_k: Option<usize>,
    pub lambda: Option<f64>,
    pub adv_percent: Option<f64>,
}

impl PipelineConfig {
    /// The desk-scale reversal-task defaults; `data_dir`-relative paths,
    /// artifacts under `out_dir`.
    pub fn toy(base_dir: &Path, out_dir: &str, seed: u64) -> PipelineConfig {
        let mut attack = AttackConfig {
            e_max: 15,
            ..AttackConfig::default()
        };
        attack.loss.k = 8;
        PipelineConfig {
            seed,
            out_dir: out_dir.to_string(),
            data: DataPaths {
                train_src: "data/train.src".into(),
                train_tgt: "data/train.tgt".into(),
                valid1_src: "data/valid1.src".into(),
                valid1_tgt: "data/valid1.tgt".into(),
                valid2_src: "data/valid2.src".into(),
                valid2_tgt: "data/valid2.tgt".into(),
                test_src: "data/test.src".into(),
                test_tgt: "data/test.tgt".into(),
            },
            model: ModelConfig {
                vocab_size: 50,
                d_model: 64,
                n_heads: 2,
                n_layers: 2,
                d_ffn: 128,
                max_len: 12,
                tie_decoder_embed: true,
            },
            attack,
            attack_pairs: Some(64),
            policy: PerturbationPolicy::default(),
            pretrain: TrainConfig {
                epochs: 30,
                batch_size: 16,
                lr: 1e-3,
                target_score: Some(0.96),
            },
            // Noise-augmented fine-tuning wants small steps: larger rates
            // knock the model off its clean optimum faster than the best-dev
            // selection can recover, burying the robustness gain.
            augment: TrainConfig {
                epochs: 16,
                batch_size: 16,
                lr: 1e-4,
                target_score: None,
            },
            metrics: vec!["bleu".to_string(), "chrf".to_string()],
            base_dir: base_dir.to_path_buf(),
        }
    }

    /// Loads and validates a JSON configuration. Relative paths inside it
    /// are anchored at the file's directory; referenced data files must
    /// exist.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::contract(format!("malformed configuration: {e}")))?;
        cfg.base_dir = std::path::absolute(path)?
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        cfg.validate()?;
        cfg.validate_files()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("configuration serialization failed: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.attack.validate()?;
        self.policy.validate()?;
        self.pretrain.validate()?;
        self.augment.validate()?;
        if self.metrics.is_empty() {
            return Err(Error::contract("at least one metric key is required"));
        }
        for m in &self.metrics {
            crate::metrics::metric_by_name(m)?;
        }
        if self.out_dir.is_empty() {
            return Err(Error::contract("out_dir must not be empty"));
        }
        if self.attack_pairs == Some(0) {
            return Err(Error::contract("attack_pairs must be at least 1"));
        }
        Ok(())
    }

    /// Every referenced data file must already exist.
    pub fn validate_files(&self) -> Result<()> {
        for p in self.data.all() {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(Error::MissingArtifact(full));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// The artifact directory this run owns.
    pub fn out(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    /// Equivalent configuration with every path made absolute; this is the
    /// form snapshotted into the output directory and fingerprinted.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        let abs = |s: &str| self.resolve(s).to_string_lossy().into_owned();
        c.out_dir = abs(&c.out_dir);
        c.data = DataPaths {
            train_src: abs(&c.data.train_src),
            train_tgt: abs(&c.data.train_tgt),
            valid1_src: abs(&c.data.valid1_src),
            valid1_tgt: abs(&c.data.valid1_tgt),
            valid2_src: abs(&c.data.valid2_src),
            valid2_tgt: abs(&c.data.valid2_tgt),
            test_src: abs(&c.data.test_src),
            test_tgt: abs(&c.data.test_tgt),
        };
        c.base_dir = PathBuf::new();
        c
    }

    /// Hash of the resolved configuration; stage records embed it so a
    /// directory never silently mixes two runs.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(&self.resolved()).expect("config serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    /// Applies command-line overrides. The metric flag replaces the primary
    /// metric (selection, sweeps, and the standalone attack verb) and keeps
    /// the rest of the list.
    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(m) = &o.metric {
            crate::metrics::metric_by_name(m)?;
            if self.metrics.is_empty() {
                self.metrics.push(m.clone());
            } else {
                self.metrics[0] = m.clone();
            }
            self.attack.loss.metric = Some(m.clone());
        }
        if let Some(k) = o.mrt_k {
            self.attack.loss.k = k;
        }
        if let Some(l) = o.lambda {
            self.attack.loss.lambda = l;
        }
        if let Some(p) = o.adv_percent {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::contract(format!(
                    "adv-percent must lie in [0, 100], got {p}"
                )));
            }
            self.policy = PerturbationPolicy {
                p_np: 1.0 - p / 100.0,
                ..self.policy
            };
        }
        self.validate()
    }

    fn metric2(&self) -> &str {
        self.metrics.get(1).map(|s| s.as_str()).unwrap_or("chrf")
    }

    fn max_content(&self) -> usize {
        self.model.max_len - 2
    }
}

// ---------------------------------------------------------------------------
// Sentence files
// ---------------------------------------------------------------------------

/// Parses one line of space-separated content-token ids. Specials are
/// forbidden; the unknown id is allowed (noise may introduce it).
pub fn parse_id_line(line: &str, vocab_size: usize, lineno: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for tok in line.split_whitespace() {
        let id: usize = tok.parse().map_err(|_| {
            Error::contract(format!("line {lineno}: {tok:?} is not a token id"))
        })?;
        if id < UNK || id >= vocab_size {
            return Err(Error::contract(format!(
                "line {lineno}: token id {id} outside the content range {UNK}..{vocab_size}"
            )));
        }
        out.push(id);
    }
    if out.is_empty() {
        return Err(Error::contract(format!("line {lineno} is empty")));
    }
    Ok(out)
}

fn load_id_lines(path: &Path, vocab_size: usize, max_content: usize) -> Result<Vec<Vec<usize>>> {
    let lines = read_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let ids = parse_id_line(line, vocab_size, i + 1)
            .map_err(|e| Error::contract(format!("{}: {e}", path.display())))?;
        if ids.len() > max_content {
            return Err(Error::contract(format!(
                "{}: line {} has {} tokens, the model fits {max_content}",
                path.display(),
                i + 1,
                ids.len()
            )));
        }
        out.push(ids);
    }
    Ok(out)
}

/// Loads an aligned pair of id files as a corpus.
pub fn load_id_corpus(
    src: &Path,
    tgt: &Path,
    vocab_size: usize,
    max_content: usize,
) -> Result<ParallelCorpus> {
    let s = load_id_lines(src, vocab_size, max_content)?;
    let t = load_id_lines(tgt, vocab_size, max_content)?;
    if s.len() != t.len() {
        return Err(Error::contract(format!(
            "{} has {} sentences but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    Ok(ParallelCorpus {
        pairs: s.into_iter().zip(t).collect(),
    })
}

fn id_file_lines(sentences: &[Vec<usize>]) -> Vec<String> {
    sentences.iter().map(|s| ids_as_text(s)).collect()
}

// ---------------------------------------------------------------------------
// Manifest and directory ownership
// ---------------------------------------------------------------------------

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn file_checksum(path: &Path) -> Result<u64> {
    Ok(fnv1a(&std::fs::read(path)?))
}

/// One produced artifact: its path relative to the output directory and a
/// content checksum taken when the stage finished.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactId {
    pub path: String,
    pub checksum: String,
}

/// One executed stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub fingerprint: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<ArtifactId>,
    pub seconds: f64,
}

/// Append-only log of everything a run did. Reruns of a stage append a new
/// record; the latest record per stage describes the files on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_fingerprint: String,
    pub stages: Vec<StageRecord>,
}

const MANIFEST_FILE: &str = "manifest.json";
const CONFIG_SNAPSHOT: &str = "config.json";
const LOCK_FILE: &str = ".lock";

impl RunManifest {
    /// Opens the directory's manifest, creating an empty one on first use.
    /// A manifest written by a different configuration or seed is refused.
    pub fn load_or_new(out: &Path, cfg: &PipelineConfig) -> Result<RunManifest> {
        let path = out.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(RunManifest {
                seed: cfg.seed,
                config_fingerprint: cfg.fingerprint(),
                stages: Vec::new(),
            });
        }
        let text = std::fs::read_to_string(&path)?;
        let man: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Error::contract(format!("malformed manifest: {e}")))?;
        if man.seed != cfg.seed || man.config_fingerprint != cfg.fingerprint() {
            return Err(Error::contract(format!(
                "{} belongs to a different run (seed {} / fingerprint {}); \
                 use a fresh output directory",
                out.display(),
                man.seed,
                man.config_fingerprint
            )));
        }
        Ok(man)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("manifest serialization failed: {e}")))?;
        std::fs::write(out.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// The most recent record for a stage, if any.
    pub fn latest(&self, stage: &str) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|r| r.stage == stage)
    }

    /// Whether a stage already ran under this exact fingerprint and all of
    /// its outputs are still present.
    pub fn stage_current(&self, out: &Path, stage: &str, fingerprint: &str) -> bool {
        match self.latest(stage) {
            Some(rec) if rec.fingerprint == fingerprint => {
                rec.outputs.iter().all(|a| out.join(&a.path).is_file())
            }
            _ => false,
        }
    }

    /// Checks the completeness invariants: every file under the output
    /// directory (except the manifest, the config snapshot, and the lock)
    /// is an output of some stage's latest record, and every checkpoint is
    /// claimed by exactly one stage.
    pub fn verify_completeness(&self, out: &Path) -> Result<()> {
        let mut latest: BTreeMap<&str, &StageRecord> = BTreeMap::new();
        for rec in &self.stages {
            latest.insert(rec.stage.as_str(), rec);
        }
        let mut covered: HashSet<String> = HashSet::new();
        let mut ckpt_owner: BTreeMap<&str, &str> = BTreeMap::new();
        for rec in latest.values() {
            for a in &rec.outputs {
                covered.insert(a.path.clone());
                if a.path.ends_with(".ckpt") {
                    if let Some(prev) = ckpt_owner.insert(&a.path, &rec.stage) {
                        return Err(Error::contract(format!(
                            "checkpoint {} is claimed by both {} and {}",
                            a.path, prev, rec.stage
                        )));
                    }
                }
            }
        }
        let mut files = Vec::new();
        collect_files(out, out, &mut files)?;
        for rel in files {
            if matches!(rel.as_str(), MANIFEST_FILE | CONFIG_SNAPSHOT | LOCK_FILE) {
                continue;
            }
            if !covered.contains(&rel) {
                return Err(Error::contract(format!(
                    "{rel} is not reachable from the manifest"
                )));
            }
        }
        Ok(())
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .map_err(|_| Error::contract("directory walk escaped its root"))?;
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Exclusive ownership of an output directory for the duration of a
/// command. Acquisition fails while another pipeline holds the lock; a
/// crash can leave the file behind, in which case the error says what to
/// remove.
#[derive(Debug)]
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(out: &Path) -> Result<OutDirLock> {
        std::fs::create_dir_all(out)?;
        let path = out.join(LOCK_FILE);
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutDirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::contract(format!(
                    "{} is owned by another pipeline; remove {} if that run is dead",
                    out.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Locks the output directory, reconciles the config snapshot, opens the
/// manifest, and runs `f`.
fn with_run<T>(
    cfg: &PipelineConfig,
    f: impl FnOnce(&mut RunManifest) -> Result<T>,
) -> Result<T> {
    cfg.validate()?;
    cfg.validate_files()?;
    let out = cfg.out();
    let _lock = OutDirLock::acquire(&out)?;
    let snapshot = out.join(CONFIG_SNAPSHOT);
    let text = serde_json::to_string_pretty(&cfg.resolved())
        .map_err(|e| Error::contract(format!("configuration serialization failed: {e}")))?
        + "\n";
    if snapshot.exists() {
        if std::fs::read_to_string(&snapshot)? != text {
            return Err(Error::contract(format!(
                "{} was initialized with a different configuration; \
                 use a fresh output directory",
                out.display()
            )));
        }
    } else {
        std::fs::write(&snapshot, &text)?;
    }
    let mut manifest = RunManifest::load_or_new(&out, cfg)?;
    f(&mut manifest)
}

fn stage_fp(cfg: &PipelineConfig, stage: &str, extra: &str) -> String {
    let text = format!("{}|{stage}|{extra}", cfg.fingerprint());
    format!("{:016x}", fnv1a(text.as_bytes()))
}

fn record_stage(
    manifest: &mut RunManifest,
    out: &Path,
    stage: &str,
    fingerprint: &str,
    inputs: Vec<String>,
    outputs: &[PathBuf],
    started: Instant,
) -> Result<()> {
    let mut arts = Vec::with_capacity(outputs.len());
    for p in outputs {
        let rel = p
            .strip_prefix(out)
            .map(|r| r.to_string_lossy().replace('\\', "/"))
            .unwrap_or_else(|_| p.to_string_lossy().into_owned());
        arts.push(ArtifactId {
            path: rel,
            checksum: format!("{:016x}", file_checksum(p)?),
        });
    }
    manifest.stages.push(StageRecord {
        stage: stage.to_string(),
        fingerprint: fingerprint.to_string(),
        inputs,
        outputs: arts,
        seconds: started.elapsed().as_secs_f64(),
    });
    manifest.save(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochLog {
    phase: String,
    epoch: usize,
    loss: f64,
    dev: f64,
}

fn write_training_log(path: &Path, seed: u64, log: &[EpochLog]) -> Result<()> {
    let mut lines = vec![format!("# seed\t{seed}"), "phase\tepoch\ttrain_loss\tdev_score".to_string()];
    for row in log {
        lines.push(format!(
            "{}\t{}\t{}\t{}",
            row.phase, row.epoch, row.loss, row.dev
        ));
    }
    write_lines(path, &lines)
}

/// One NLL training run over `train`, scored on `dev` after every epoch.
///
/// With `noise`, each source sentence is re-perturbed every epoch from a
/// substream keyed by `(epoch, sentence index)`, so the samples a sentence
/// sees do not depend on batch order. With `select_best`, the parameters
/// giving the best dev score are restored at the end (earliest epoch wins
/// ties); otherwise the final epoch's weights stand. Returns the dev score
/// of the weights left in the model. A non-finite loss aborts with a
/// numeric error.
fn train_phase(
    model: &Seq2Seq,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    tc: &TrainConfig,
    metric_key: &str,
    rng: &Rng,
    phase: &str,
    noise: Option<(&EmbeddingPair, &PerturbationPolicy)>,
    select_best: bool,
    log: &mut Vec<EpochLog>,
) -> Result<f64> {
    tc.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::contract("training needs non-empty train and dev sets"));
    }
    let params = model.params();
    let mut opt = Adam::new(AdamConfig {
        lr: tc.lr,
        ..AdamConfig::default()
    });
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut dev_score = 0.0;
    for epoch in 1..=tc.epochs {
        let erng = rng.substream_indexed("epoch", epoch as u64);
        let batches = batch_indices(train.len(), tc.batch_size, &mut erng.substream("batch"));
        let mut epoch_loss = 0.0;
        for batch in batches {
            let mut pairs = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (src, tgt) = &train.pairs[i];
                let src = match noise {
                    Some((pair, policy)) => adversarialize(
                        src,
                        policy,
                        pair,
                        &mut erng.substream_indexed("noise", i as u64),
                    )?,
                    None => src.clone(),
                };
                pairs.push((src, tgt.clone()));
            }
            let mut sess = Session::new();
            let loss = nll_loss(&mut sess, model, &pairs)?;
            let value = sess.scalar(loss);
            if !value.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged: non-finite loss in {phase} epoch {epoch}"
                )));
            }
            sess.backward(loss)?;
            opt.step(&sess.param_grads())?;
            epoch_loss += value * pairs.len() as f64;
        }
        epoch_loss /= train.len() as f64;
        dev_score = score_model(model, dev, metric_key, &ids_as_text)?;
        log.push(EpochLog {
            phase: phase.to_string(),
            epoch,
            loss: epoch_loss,
            dev: dev_score,
        });
        if select_best && best.as_ref().map_or(true, |(b, _)| dev_score > *b) {
            best = Some((dev_score, params.iter().map(|p| p.value().clone()).collect()));
        }
        if tc.target_score.is_some_and(|t| dev_score >= t) {
            break;
        }
    }
    if let Some((score, values)) = best {
        for (p, v) in params.iter().zip(values) {
            p.assign(v);
        }
        dev_score = score;
    }
    Ok(dev_score)
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

const PRETRAINED_CKPT: &str = "pretrained.ckpt";

fn load_data(cfg: &PipelineConfig, src: &str, tgt: &str) -> Result<ParallelCorpus> {
    load_id_corpus(
        &cfg.resolve(src),
        &cfg.resolve(tgt),
        cfg.model.vocab_size,
        cfg.max_content(),
    )
}

fn model_file(kind: ModelKind) -> String {
    format!("model.{kind}.ckpt")
}

/// Comma-joined list of the model rows whose checkpoints exist right now.
/// Folded into the evaluation fingerprint so that training another variant
/// invalidates a cached report instead of being silently skipped.
fn present_models(out: &Path) -> String {
    ModelKind::ALL
        .iter()
        .filter(|&&kind| {
            let file = if kind == ModelKind::Baseline {
                PRETRAINED_CKPT.to_string()
            } else {
                model_file(kind)
            };
            out.join(file).is_file()
        })
        .map(|k| k.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

/// Trains both directions from scratch: the forward model first, then the
/// backward model with the shared source embedding frozen at the forward
/// model's values. Each direction keeps its best dev-score epoch. Writes
/// the dual checkpoint and a per-epoch training log with dev scores.
pub fn cmd_pretrain(cfg: &PipelineConfig) -> Result<PathBuf> {
    with_run(cfg, |manifest| {
        let out = cfg.out();
        let ckpt_path = out.join(PRETRAINED_CKPT);
        let fp = stage_fp(cfg, "pretrain", "");
        if manifest.stage_current(&out, "pretrain", &fp) {
            return Ok(ckpt_path);
        }
        let started = Instant::now();
        let train = load_data(cfg, &cfg.data.train_src, &cfg.data.train_tgt)?;
        let dev = load_data(cfg, &cfg.data.valid2_src, &cfg.data.valid2_tgt)?;
        let metric = &cfg.metrics[0];

        let rng = Rng::new(cfg.seed).substream("pretrain");
        let dual = DualSystem::init(&cfg.model, &mut rng.substream("init"))?;
        let mut log = Vec::new();
        train_phase(
            &dual.forward,
            &train,
            &dev,
            &cfg.pretrain,
            metric,
            &rng.substream("forward"),
            "forward",
            None,
            true,
            &mut log,
        )?;
        // The backward direction learns around the now-fixed source matrix:
        // its decoder embedding and output projection stay exactly the
        // forward model's encoder embedding.
        let shared = dual.shared_embed();
        shared.set_trainable(false);
        let result = train_phase(
            &dual.backward,
            &train.flipped(),
            &dev.flipped(),
            &cfg.pretrain,
            metric,
            &rng.substream("backward"),
            "backward",
            None,
            true,
            &mut log,
        );
        shared.set_trainable(true);
        result?;

        save_dual(&ckpt_path, &dual)?;
        let log_path = out.join("pretrain.log.tsv");
        write_training_log(&log_path, cfg.seed, &log)?;
        record_stage(
            manifest,
            &out,
            "pretrain",
            &fp,
            vec![
                cfg.resolve(&cfg.data.train_src).display().to_string(),
                cfg.resolve(&cfg.data.train_tgt).display().to_string(),
                cfg.resolve(&cfg.data.valid2_src).display().to_string(),
                cfg.resolve(&cfg.data.valid2_tgt).display().to_string(),
            ],
            &[ckpt_path.clone(), log_path],
            started,
        )?;
        Ok(ckpt_path)
    })
}

/// The attack corpus: the front of the augmentation split, capped by
/// `attack_pairs`.
fn attack_corpus(cfg: &PipelineConfig) -> Result<ParallelCorpus> {
    let valid1 = load_data(cfg, &cfg.data.valid1_src, &cfg.data.valid1_tgt)?;
    let cap = cfg.attack_pairs.unwrap_or(valid1.len()).min(valid1.len());
    Ok(ParallelCorpus {
        pairs: valid1.pairs[..cap].to_vec(),
    })
}

/// Which attack objective an augmentation mode runs, and the label naming
/// its artifacts.
fn attack_recipe(cfg: &PipelineConfig, mode: ModelKind) -> Result<(String, AttackConfig)> {
    let mut acfg = cfg.attack.clone();
    let label = match mode {
        ModelKind::DualNll => {
            acfg.loss.objective = Objective::Nll;
            "nll".to_string()
        }
        ModelKind::DualBleu => {
            acfg.loss.objective = Objective::Mrt;
            acfg.loss.metric = Some("bleu".to_string());
            "bleu".to_string()
        }
        ModelKind::DualMetric2 => {
            acfg.loss.objective = Objective::Mrt;
            acfg.loss.metric = Some(cfg.metric2().to_string());
            cfg.metric2().to_string()
        }
        other => {
            return Err(Error::contract(format!(
                "mode {other} does not involve an embedding attack"
            )))
        }
    };
    Ok((label, acfg))
}

/// Runs (or reuses) an embedding attack against the loaded pretrained
/// system, leaving the system's weights exactly as found. Returns the
/// original and attacked embedding matrices.
fn ensure_attack(
    cfg: &PipelineConfig,
    manifest: &mut RunManifest,
    dual: &DualSystem,
    stage: &str,
    dir_rel: &str,
    label: &str,
    acfg: &AttackConfig,
) -> Result<(Tensor, Tensor)> {
    let out = cfg.out();
    let dir = out.join(dir_rel);
    let ckpt_path = dir.join(format!("attacked.{label}.ckpt"));
    let trace_path = dir.join(format!("attack.{label}.trace.tsv"));
    let extra = serde_json::to_string(acfg).expect("attack config serializes");
    let fp = stage_fp(cfg, stage, &extra);
    if manifest.stage_current(&out, stage, &fp) {
        let (ckpt_cfg, e) = load_embedding(&ckpt_path)?;
        if ckpt_cfg != cfg.model {
            return Err(Error::contract(format!(
                "{} was attacked under a different model configuration",
                ckpt_path.display()
            )));
        }
        return Ok((dual.shared_embed().value().clone(), e.value().clone()));
    }
    let started = Instant::now();
    let corpus = attack_corpus(cfg)?;
    dual.set_attack_mode(true);
    let result = attack_embedding(dual, &corpus, acfg, &Rng::new(cfg.seed).substream(stage));
    dual.set_attack_mode(false);
    let result = result?;
    // The attack trained the live shared matrix; put the pretrained values
    // back so downstream training starts from the checkpointed model.
    dual.shared_embed().assign(result.original.clone());

    save_embedding(
        &ckpt_path,
        &cfg.model,
        &Param::new("attacked_embedding", result.attacked.clone()),
    )?;
    let trace_text = format!("# seed\t{}\n{}", cfg.seed, trace_to_lines(&result.trace));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(&trace_path, trace_text)?;
    record_stage(
        manifest,
        &out,
        stage,
        &fp,
        vec![
            PRETRAINED_CKPT.to_string(),
            cfg.resolve(&cfg.data.valid1_src).display().to_string(),
            cfg.resolve(&cfg.data.valid1_tgt).display().to_string(),
        ],
        &[ckpt_path, trace_path],
        started,
    )?;
    Ok((result.original, result.attacked))
}

/// Standalone attack stage under the configured objective; artifacts are
/// labeled by objective (`nll`) or metric name.
pub fn cmd_attack(cfg: &PipelineConfig) -> Result<PathBuf> {
    with_run(cfg, |manifest| {
        let out = cfg.out();
        let label = match cfg.attack.loss.objective {
            Objective::Nll => "nll".to_string(),
            Objective::Mrt => cfg
                .attack
                .loss
                .metric
                .clone()
                .unwrap_or_else(|| "bleu".to_string()),
        };
        let dual = load_dual(&out.join(PRETRAINED_CKPT))?;
        let stage = format!("attack.{label}");
        ensure_attack(cfg, manifest, &dual, &stage, "", &label, &cfg.attack)?;
        Ok(out.join(format!("attacked.{label}.ckpt")))
    })
}

/// Builds one augmented model. `dir_rel` places the artifacts (empty for
/// the run root; sweeps use subdirectories), and the overrides let sweeps
/// vary the attack and the perturbation policy without touching the base
/// configuration.
fn augment_into(
    cfg: &PipelineConfig,
    manifest: &mut RunManifest,
    mode: ModelKind,
    dir_rel: &str,
    attack_override: Option<&AttackConfig>,
    policy_override: Option<&PerturbationPolicy>,
) -> Result<PathBuf> {
    if matches!(mode, ModelKind::Baseline) {
        return Err(Error::contract(
            "the baseline is the pretrained forward model; there is nothing to train",
        ));
    }
    let out = cfg.out();
    let dir = out.join(dir_rel);
    let stage = if dir_rel.is_empty() {
        format!("augment.{mode}")
    } else {
        format!("{}.augment.{mode}", dir_rel.replace('/', "."))
    };
    let policy = policy_override.unwrap_or(&cfg.policy);
    let extra = format!(
        "{}|{}",
        attack_override
            .map(|a| serde_json::to_string(a).expect("attack config serializes"))
            .unwrap_or_default(),
        serde_json::to_string(policy).expect("policy serializes"),
    );
    let fp = stage_fp(cfg, &stage, &extra);
    let ckpt_path = dir.join(model_file(mode));
    if manifest.stage_current(&out, &stage, &fp) {
        return Ok(ckpt_path);
    }
    let started = Instant::now();
    let pre_path = out.join(PRETRAINED_CKPT);
    let dual = load_dual(&pre_path)?;
    let pretrained_sum = checksum_params(&dual.params());
    let mut inputs = vec![
        PRETRAINED_CKPT.to_string(),
        cfg.resolve(&cfg.data.valid1_src).display().to_string(),
        cfg.resolve(&cfg.data.valid1_tgt).display().to_string(),
        cfg.resolve(&cfg.data.valid2_src).display().to_string(),
        cfg.resolve(&cfg.data.valid2_tgt).display().to_string(),
    ];

    let noise = match mode {
        ModelKind::Finetune => None,
        ModelKind::SimpleReplacement => Some(EmbeddingPair::identical(
            dual.shared_embed().value().clone(),
        )?),
        _ => {
            let (label, acfg) = match attack_override {
                Some(a) => (attack_recipe(cfg, mode)?.0, a.clone()),
                None => attack_recipe(cfg, mode)?,
            };
            let attack_stage = if dir_rel.is_empty() {
                format!("attack.{label}")
            } else {
                format!("{}.attack.{label}", dir_rel.replace('/', "."))
            };
            let (original, attacked) =
                ensure_attack(cfg, manifest, &dual, &attack_stage, dir_rel, &label, &acfg)?;
            inputs.push(format!(
                "{}attacked.{label}.ckpt",
                if dir_rel.is_empty() {
                    String::new()
                } else {
                    format!("{dir_rel}/")
                }
            ));
            if attacked.data == original.data {
                eprintln!(
                    "warning: the {label} attack left the embedding unchanged; \
                     {mode} degenerates to simple replacement"
                );
            }
            Some(EmbeddingPair::new(original, attacked)?)
        }
    };
    // Training must start from the checkpointed weights: the attack only
    // ever borrows the live system, so nothing may have moved.
    if checksum_params(&dual.params()) != pretrained_sum {
        return Err(Error::contract(
            "model weights drifted between loading the pretrained checkpoint \
             and the start of augmentation training",
        ));
    }

    let valid1 = load_data(cfg, &cfg.data.valid1_src, &cfg.data.valid1_tgt)?;
    let valid2 = load_data(cfg, &cfg.data.valid2_src, &cfg.data.valid2_tgt)?;
    let mut log = Vec::new();
    // One substream for every mode: two modes whose sample generators agree
    // produce identical models, which keeps the degenerate cases exactly
    // equal instead of merely similar.
    let rng = Rng::new(cfg.seed).substream("augment");
    train_phase(
        &dual.forward,
        &valid1,
        &valid2,
        &cfg.augment,
        &cfg.metrics[0],
        &rng,
        "augment",
        noise.as_ref().map(|p| (p, policy)),
        true,
        &mut log,
    )?;
    save_single(&ckpt_path, &dual.forward)?;
    let log_path = dir.join(format!("model.{mode}.log.tsv"));
    write_training_log(&log_path, cfg.seed, &log)?;
    record_stage(
        manifest,
        &out,
        &stage,
        &fp,
        inputs,
        &[ckpt_path.clone(), log_path],
        started,
    )?;
    Ok(ckpt_path)
}

/// Trains one augmentation variant (anything but `baseline`): plain
/// fine-tuning, perturbation with the unattacked embedding, or the full
/// attack-then-augment recipe.
pub fn cmd_augment(cfg: &PipelineConfig, mode: ModelKind) -> Result<PathBuf> {
    with_run(cfg, |manifest| augment_into(cfg, manifest, mode, "", None, None))
}

/// The deletion/replacement family generated for the test set by default:
/// both types at 10%..30%.
pub fn default_noise_specs() -> Vec<NoiseSpec> {
    let mut specs = Vec::new();
    for ty in [NoiseType::Rd, NoiseType::Rp] {
        for pct in [10u32, 15, 20, 25, 30] {
            specs.push(NoiseSpec::new(ty, pct as f64 / 100.0).expect("valid ratio"));
        }
    }
    specs
}

/// Writes noisy copies of the test set's source side, one file per spec
/// (default: the full ten-file family). Replacement noise searches the
/// pretrained embedding, so the pretraining stage must have run.
pub fn cmd_noisegen(cfg: &PipelineConfig, only: Option<NoiseSpec>) -> Result<Vec<PathBuf>> {
    with_run(cfg, |manifest| {
        let out = cfg.out();
        let specs = match only {
            Some(s) => vec![s],
            None => default_noise_specs(),
        };
        let stage = match only {
            Some(s) => format!("noisegen.{}", noisy_file_name("test", &s)),
            None => "noisegen".to_string(),
        };
        let fp = stage_fp(cfg, &stage, "");
        let paths: Vec<PathBuf> = specs
            .iter()
            .map(|s| out.join(noisy_file_name("test", s)))
            .collect();
        if manifest.stage_current(&out, &stage, &fp) {
            return Ok(paths);
        }
        let started = Instant::now();
        let dual = load_dual(&out.join(PRETRAINED_CKPT))?;
        let embedding = dual.shared_embed().value().clone();
        let test = load_data(cfg, &cfg.data.test_src, &cfg.data.test_tgt)?;
        for (spec, path) in specs.iter().zip(&paths) {
            let name = noisy_file_name("test", spec);
            let noisy = make_noisy_testset(
                &test,
                spec,
                &embedding,
                &Rng::new(cfg.seed).substream(&name),
            )?;
            let sources: Vec<Vec<usize>> = noisy.pairs.into_iter().map(|(s, _)| s).collect();
            write_lines(path, &id_file_lines(&sources))?;
        }
        record_stage(
            manifest,
            &out,
            &stage,
            &fp,
            vec![
                cfg.resolve(&cfg.data.test_src).display().to_string(),
                PRETRAINED_CKPT.to_string(),
            ],
            &paths,
            started,
        )?;
        Ok(paths)
    })
}

/// The noisy test sets the evaluation matrix covers, as (name, sources
/// path) pairs.
fn noisy_set_names(out: &Path) -> Vec<(String, PathBuf)> {
    default_noise_specs()
        .iter()
        .map(|s| {
            let file = noisy_file_name("test", s);
            let name = file.trim_end_matches(".src").to_string();
            (name, out.join(file))
        })
        .collect()
}

fn load_model_rows(
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<Vec<(ModelKind, Option<Seq2Seq>)>> {
    let mut rows = Vec::new();
    for kind in ModelKind::ALL {
        let model = if kind == ModelKind::Baseline {
            let path = out.join(PRETRAINED_CKPT);
            if path.is_file() {
                Some(load_dual(&path)?.forward)
            } else {
                None
            }
        } else {
            let path = out.join(model_file(kind));
            if path.is_file() {
                Some(load_single(&path)?)
            } else {
                None
            }
        };
        if let Some(m) = &model {
            if m.cfg != cfg.model {
                return Err(Error::contract(format!(
                    "{kind} checkpoint was trained under a different model configuration"
                )));
            }
        }
        rows.push((kind, model));
    }
    Ok(rows)
}

fn decode_file(out: &Path, kind: ModelKind, testset: &str) -> PathBuf {
    out.join("decodes").join(format!("{kind}.{testset}.hyp"))
}

/// Builds the evaluation report from decode files already on disk.
/// Variants with no cached decodes are reported absent; a variant with a
/// clean-set decode must have one for every noisy set.
fn report_from_decodes(
    out: &Path,
    testset_names: &[String],
    refs: &[String],
    metrics: &[String],
    seed: u64,
) -> Result<EvalReport> {
    let mut cells = Vec::new();
    let mut absent = Vec::new();
    for kind in ModelKind::ALL {
        if !decode_file(out, kind, "test").is_file() {
            absent.push(kind);
            continue;
        }
        let mut hyps = BTreeMap::new();
        for name in testset_names {
            hyps.insert(name.clone(), read_lines(&decode_file(out, kind, name))?);
        }
        for metric in metrics {
            let clean_score = corpus_metric(&hyps["test"], refs, metric)?;
            for name in testset_names {
                let score = corpus_metric(&hyps[name], refs, metric)?;
                cells.push(EvalCell {
                    model: kind,
                    testset: name.clone(),
                    metric: metric.clone(),
                    score,
                    delta: delta_metric(score, clean_score)?,
                });
            }
        }
    }
    Ok(EvalReport {
        cells,
        absent,
        clean_set: "test".to_string(),
        testsets: testset_names.to_vec(),
        metrics: metrics.to_vec(),
        seed,
        fingerprint: report_fingerprint(seed, metrics),
    })
}

fn write_report_files(
    out: &Path,
    report: &EvalReport,
    metrics: &[String],
) -> Result<Vec<PathBuf>> {
    let mut outputs = Vec::new();
    let json_path = out.join("report.json");
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::contract(format!("report serialization failed: {e}")))?;
    std::fs::write(&json_path, text + "\n")?;
    outputs.push(json_path);
    let csv_path = out.join("report.csv");
    std::fs::write(&csv_path, report.to_csv())?;
    outputs.push(csv_path);
    for metric in metrics {
        let table_path = out.join(format!("report.{metric}.txt"));
        let table = format!("# seed\t{}\n{}", report.seed, report.to_table(metric));
        std::fs::write(&table_path, table)?;
        outputs.push(table_path);
    }
    Ok(outputs)
}

/// Greedy-decodes every available model variant on the clean test set and
/// the full noisy family, caches the decodes, and writes the report (JSON,
/// flat CSV, and one aligned table per metric).
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<EvalReport> {
    with_run(cfg, |manifest| {
        let out = cfg.out();
        let started = Instant::now();
        let fp = stage_fp(cfg, "evaluate", &present_models(&out));
        if manifest.stage_current(&out, "evaluate", &fp) {
            let text = std::fs::read_to_string(out.join("report.json"))?;
            return serde_json::from_str(&text)
                .map_err(|e| Error::contract(format!("malformed report: {e}")));
        }

        let clean = load_data(cfg, &cfg.data.test_src, &cfg.data.test_tgt)?;
        let mut testsets: Vec<(String, ParallelCorpus)> =
            vec![("test".to_string(), clean.clone())];
        for (name, path) in noisy_set_names(&out) {
            let sources = load_id_lines(&path, cfg.model.vocab_size, cfg.max_content())?;
            if sources.len() != clean.len() {
                return Err(Error::contract(format!(
                    "{} has {} sentences, the clean test set has {}",
                    path.display(),
                    sources.len(),
                    clean.len()
                )));
            }
            let pairs = sources
                .into_iter()
                .zip(clean.pairs.iter().map(|(_, t)| t.clone()))
                .collect();
            testsets.push((name, ParallelCorpus { pairs }));
        }

        let models = load_model_rows(cfg, &out)?;
        let mut outputs = Vec::new();
        let mut inputs = vec![
            cfg.resolve(&cfg.data.test_src).display().to_string(),
            cfg.resolve(&cfg.data.test_tgt).display().to_string(),
        ];
        let max_content = cfg.model.max_len - 1;
        for (kind, model) in &models {
            let Some(model) = model else { continue };
            inputs.push(if *kind == ModelKind::Baseline {
                PRETRAINED_CKPT.to_string()
            } else {
                model_file(*kind)
            });
            for (name, ts) in &testsets {
                let mut lines = Vec::with_capacity(ts.len());
                for (src, _) in &ts.pairs {
                    lines.push(ids_as_text(&crate::decode::greedy_decode(
                        model,
                        src,
                        max_content,
                    )?));
                }
                let path = decode_file(&out, *kind, name);
                write_lines(&path, &lines)?;
                outputs.push(path);
            }
        }

        let names: Vec<String> = testsets.iter().map(|(n, _)| n.clone()).collect();
        let refs: Vec<String> = clean.pairs.iter().map(|(_, t)| ids_as_text(t)).collect();
        let report = report_from_decodes(&out, &names, &refs, &cfg.metrics, cfg.seed)?;
        outputs.extend(write_report_files(&out, &report, &cfg.metrics)?);
        record_stage(manifest, &out, "evaluate", &fp, inputs, &outputs, started)?;
        Ok(report)
    })
}

/// Regenerates the report files from the decodes cached by `cmd_evaluate`,
/// without touching any model. Output bytes match the evaluation's.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<EvalReport> {
    with_run(cfg, |manifest| {
        let out = cfg.out();
        let started = Instant::now();
        let fp = stage_fp(cfg, "report", "");
        let clean = load_data(cfg, &cfg.data.test_src, &cfg.data.test_tgt)?;
        let mut names = vec!["test".to_string()];
        names.extend(noisy_set_names(&out).into_iter().map(|(n, _)| n));
        let refs: Vec<String> = clean.pairs.iter().map(|(_, t)| ids_as_text(t)).collect();
        let report = report_from_decodes(&out, &names, &refs, &cfg.metrics, cfg.seed)?;
        if report.absent.len() == ModelKind::ALL.len() {
            return Err(Error::MissingArtifact(out.join("decodes")));
        }
        let outputs = write_report_files(&out, &report, &cfg.metrics)?;
        record_stage(
            manifest,
            &out,
            "report",
            &fp,
            vec!["decodes".to_string()],
            &outputs,
            started,
        )?;
        Ok(report)
    })
}

/// A hyperparameter grid for `cmd_sweep`: the attack's loss weight, or the
/// perturbation policy's (keep, replace) probabilities.
#[derive(Debug, Clone)]
pub enum SweepGrid {
    Lambda(Vec<f64>),
    Policy(Vec<(f64, f64)>),
}

impl Default for SweepGrid {
    fn default() -> SweepGrid {
        SweepGrid::Lambda(vec![0.2, 0.5, 0.8])
    }
}

/// Runs the attack-and-augment recipe once per grid point (always the
/// `dual_bleu` variant) and tabulates each point's clean test score under
/// the primary metric. Lambda points each get their own attack; policy
/// points share one, since the perturbation policy only affects training.
pub fn cmd_sweep(cfg: &PipelineConfig, grid: &SweepGrid) -> Result<PathBuf> {
    with_run(cfg, |manifest| {
        let out = cfg.out();
        let started = Instant::now();
        let metric = cfg.metrics[0].clone();
        let test = load_data(cfg, &cfg.data.test_src, &cfg.data.test_tgt)?;
        let score_clean = |path: &Path| -> Result<f64> {
            let model = load_single(path)?;
            score_model(&model, &test, &metric, &ids_as_text)
        };

        let (stage, table_path, lines) = match grid {
            SweepGrid::Lambda(lambdas) => {
                if lambdas.is_empty() {
                    return Err(Error::contract("empty sweep grid"));
                }
                let mut lines = vec![
                    format!("# seed\t{}", cfg.seed),
                    format!("lambda\tclean_{metric}"),
                ];
                for &lambda in lambdas {
                    let pct = (lambda * 100.0).round() as u32;
                    let dir_rel = format!("sweep/lambda{pct:02}");
                    let mut acfg = cfg.attack.clone();
                    acfg.loss.lambda = lambda;
                    acfg.loss.objective = Objective::Mrt;
                    acfg.loss.metric = Some("bleu".to_string());
                    let ckpt = augment_into(
                        cfg,
                        manifest,
                        ModelKind::DualBleu,
                        &dir_rel,
                        Some(&acfg),
                        None,
                    )?;
                    lines.push(format!("{lambda}\t{}", score_clean(&ckpt)?));
                }
                ("sweep.lambda", out.join("sweep.lambda.tsv"), lines)
            }
            SweepGrid::Policy(points) => {
                if points.is_empty() {
                    return Err(Error::contract("empty sweep grid"));
                }
                let mut lines = vec![
                    format!("# seed\t{}", cfg.seed),
                    format!("p_np\tp_rp\tclean_{metric}"),
                ];
                for &(p_np, p_rp) in points {
                    let policy = PerturbationPolicy {
                        p_np,
                        p_rp,
                        p_rd: 1.0 - p_rp,
                    };
                    policy.validate()?;
                    let dir_rel = format!(
                        "sweep/policy{:02}x{:02}",
                        (p_np * 100.0).round() as u32,
                        (p_rp * 100.0).round() as u32
                    );
                    let ckpt = augment_into(
                        cfg,
                        manifest,
                        ModelKind::DualBleu,
                        &dir_rel,
                        None,
                        Some(&policy),
                    )?;
                    lines.push(format!("{p_np}\t{p_rp}\t{}", score_clean(&ckpt)?));
                }
                ("sweep.policy", out.join("sweep.policy.tsv"), lines)
            }
        };
        let fp = stage_fp(cfg, stage, &format!("{grid:?}"));
        write_lines(&table_path, &lines)?;
        record_stage(
            manifest,
            &out,
            stage,
            &fp,
            vec![PRETRAINED_CKPT.to_string()],
            &[table_path.clone()],
            started,
        )?;
        Ok(table_path)
    })
}

// ---------------------------------------------------------------------------
// Fixture generation
// ---------------------------------------------------------------------------

/// Writes the desk-scale token-reversal task — 2,000 training pairs and
/// three 200-pair splits over a 50-id vocabulary, sentence lengths 3..=8,
/// target = source reversed — plus a ready-to-run `config.json`. Returns
/// the configuration it wrote.
pub fn generate_fixture(dir: &Path, seed: u64) -> Result<PipelineConfig> {
    let cfg = PipelineConfig::toy(dir, "run", seed);
    let rng = Rng::new(seed).substream("fixture");
    for (split, count) in [("train", 2000usize), ("valid1", 200), ("valid2", 200), ("test", 200)]
    {
        let mut srng = rng.substream(split);
        let mut sources = Vec::with_capacity(count);
        let mut targets = Vec::with_capacity(count);
        for _ in 0..count {
            let len = 3 + srng.below(6);
            let sent: Vec<usize> = (0..len)
                .map(|_| UNK + 1 + srng.below(cfg.model.vocab_size - UNK - 1))
                .collect();
            let mut rev = sent.clone();
            rev.reverse();
            sources.push(ids_as_text(&sent));
            targets.push(ids_as_text(&rev));
        }
        write_lines(&dir.join(format!("data/{split}.src")), &sources)?;
        write_lines(&dir.join(format!("data/{split}.tgt")), &targets)?;
    }
    cfg.save(&dir.join("config.json"))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{BOS, EOS, PAD};

    /// A tiny copy-task workspace that trains in well under a second.
    fn micro_config(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::toy(dir, "run", 11);
        cfg.model = ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 24,
            max_len: 8,
            tie_decoder_embed: true,
        };
        cfg.pretrain = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            target_score: None,
        };
        cfg.augment = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            target_score: None,
        };
        cfg.attack.e_max = 2;
        cfg.attack.window = 1;
        cfg.attack.loss.k = 2;
        cfg.attack_pairs = Some(4);
        cfg.metrics = vec!["bleu".to_string()];
        let mut rng = Rng::new(3).substream("micro");
        for (split, count) in [("train", 24usize), ("valid1", 8), ("valid2", 8), ("test", 8)] {
            let lines: Vec<String> = (0..count)
                .map(|_| {
                    let len = 3 + rng.below(3);
                    let sent: Vec<usize> = (0..len).map(|_| 4 + rng.below(8)).collect();
                    ids_as_text(&sent)
                })
                .collect();
            write_lines(&dir.join(format!("data/{split}.src")), &lines).unwrap();
            write_lines(&dir.join(format!("data/{split}.tgt")), &lines).unwrap();
        }
        cfg
    }

    #[test]
    fn fixture_generator_writes_a_runnable_reversal_workspace() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = generate_fixture(dir.path(), 7).unwrap();
        let loaded = PipelineConfig::load(&dir.path().join("config.json")).unwrap();
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.model, cfg.model);

        let train = load_data(&loaded, &loaded.data.train_src, &loaded.data.train_tgt).unwrap();
        assert_eq!(train.len(), 2000);
        for split in ["valid1", "valid2", "test"] {
            let src = load_id_lines(
                &dir.path().join(format!("data/{split}.src")),
                50,
                loaded.max_content(),
            )
            .unwrap();
            assert_eq!(src.len(), 200);
        }
        for (src, tgt) in &train.pairs {
            assert!((3..=8).contains(&src.len()));
            let mut rev = src.clone();
            rev.reverse();
            assert_eq!(&rev, tgt);
            assert!(src.iter().all(|&t| t > UNK && t < 50));
        }

        // Same seed, same bytes; different seed, different data.
        let dir2 = tempfile::tempdir().unwrap();
        generate_fixture(dir2.path(), 7).unwrap();
        let a = std::fs::read(dir.path().join("data/train.src")).unwrap();
        let b = std::fs::read(dir2.path().join("data/train.src")).unwrap();
        assert_eq!(a, b);
        let dir3 = tempfile::tempdir().unwrap();
        generate_fixture(dir3.path(), 8).unwrap();
        let c = std::fs::read(dir3.path().join("data/train.src")).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn id_files_round_trip_and_reject_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.src");
        write_lines(&path, &["4 5 6", "7 8"]).unwrap();
        let lines = load_id_lines(&path, 12, 6).unwrap();
        assert_eq!(lines, vec![vec![4, 5, 6], vec![7, 8]]);

        assert!(parse_id_line("4 x 6", 12, 1).is_err());
        assert!(parse_id_line(&format!("{PAD} 4", ), 12, 1).is_err());
        assert!(parse_id_line(&format!("{BOS} 4"), 12, 1).is_err());
        assert!(parse_id_line(&format!("{EOS} 4"), 12, 1).is_err());
        assert!(parse_id_line("12 4", 12, 1).is_err(), "vocab bound");
        assert!(parse_id_line("", 12, 1).is_err());
        // The unknown id is legal content: replacement noise can emit it.
        assert_eq!(parse_id_line(&format!("{UNK} 4"), 12, 1).unwrap(), vec![UNK, 4]);

        write_lines(&path, &["4 5 6 7 8 9 4"]).unwrap();
        assert!(load_id_lines(&path, 12, 6).is_err(), "overlong sentence");
        let other = dir.path().join("y.tgt");
        write_lines(&other, &["4 5", "6 7", "8 9"]).unwrap();
        write_lines(&path, &["4 5 6", "7 8"]).unwrap();
        assert!(load_id_corpus(&path, &other, 12, 6).is_err(), "length mismatch");
    }

    #[test]
    fn lock_grants_exclusive_ownership() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutDirLock::acquire(dir.path()).unwrap();
        let second = OutDirLock::acquire(dir.path());
        assert!(second.is_err());
        assert!(second.unwrap_err().to_string().contains("another pipeline"));
        drop(lock);
        OutDirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn manifest_tracks_reachability_and_checkpoint_uniqueness() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = micro_config(out);
        let mut man = RunManifest::load_or_new(out, &cfg).unwrap();

        let run = out.join("run");
        std::fs::create_dir_all(&run).unwrap();
        std::fs::write(run.join("a.ckpt"), b"a").unwrap();
        std::fs::write(run.join("notes.tsv"), b"n").unwrap();
        record_stage(
            &mut man,
            &run,
            "one",
            "f1",
            vec![],
            &[run.join("a.ckpt"), run.join("notes.tsv")],
            Instant::now(),
        )
        .unwrap();
        man.verify_completeness(&run).unwrap();

        // A stray file is flagged...
        std::fs::write(run.join("stray.bin"), b"s").unwrap();
        let err = man.verify_completeness(&run).unwrap_err();
        assert!(err.to_string().contains("not reachable"));
        std::fs::remove_file(run.join("stray.bin")).unwrap();

        // ...and so is a checkpoint claimed by two stages.
        record_stage(
            &mut man,
            &run,
            "two",
            "f2",
            vec![],
            &[run.join("a.ckpt")],
            Instant::now(),
        )
        .unwrap();
        let err = man.verify_completeness(&run).unwrap_err();
        assert!(err.to_string().contains("claimed by both"));

        // Rerunning a stage replaces its coverage rather than doubling it.
        let mut man2 = RunManifest {
            seed: cfg.seed,
            config_fingerprint: cfg.fingerprint(),
            stages: Vec::new(),
        };
        for fp in ["f1", "f1b"] {
            record_stage(
                &mut man2,
                &run,
                "one",
                fp,
                vec![],
                &[run.join("a.ckpt"), run.join("notes.tsv")],
                Instant::now(),
            )
            .unwrap();
        }
        man2.verify_completeness(&run).unwrap();
        assert_eq!(man2.stages.len(), 2, "the log itself stays append-only");
    }

    #[test]
    fn manifest_refuses_a_directory_from_a_different_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        let out = cfg.out();
        std::fs::create_dir_all(&out).unwrap();
        let man = RunManifest {
            seed: cfg.seed + 1,
            config_fingerprint: "feedfacefeedface".to_string(),
            stages: Vec::new(),
        };
        man.save(&out).unwrap();
        let err = RunManifest::load_or_new(&out, &cfg).unwrap_err();
        assert!(err.to_string().contains("different run"));
    }

    #[test]
    fn pretrain_writes_checkpoint_log_and_manifest_then_skips_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        let path = cmd_pretrain(&cfg).unwrap();
        assert!(path.is_file());
        let dual = load_dual(&path).unwrap();
        assert_eq!(dual.cfg, cfg.model);

        let log = std::fs::read_to_string(cfg.out().join("pretrain.log.tsv")).unwrap();
        assert!(log.starts_with("# seed\t11\n"));
        assert_eq!(log.matches("\nforward\t").count(), 2);
        assert_eq!(log.matches("\nbackward\t").count(), 2);

        let man = RunManifest::load_or_new(&cfg.out(), &cfg).unwrap();
        assert_eq!(man.stages.len(), 1);
        man.verify_completeness(&cfg.out()).unwrap();

        // Second invocation finds the stage current and does nothing.
        let before = std::fs::read(&path).unwrap();
        cmd_pretrain(&cfg).unwrap();
        let man = RunManifest::load_or_new(&cfg.out(), &cfg).unwrap();
        assert_eq!(man.stages.len(), 1);
        assert_eq!(std::fs::read(&path).unwrap(), before);
    }

    #[test]
    fn backward_pretraining_freezes_the_shared_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        cmd_pretrain(&cfg).unwrap();
        let trained = load_dual(&cfg.out().join(PRETRAINED_CKPT)).unwrap();

        // Replay only the forward phase from the same substreams: the
        // checkpoint's shared matrix must match it bit for bit, proving the
        // backward phase never moved it.
        let train = load_data(&cfg, &cfg.data.train_src, &cfg.data.train_tgt).unwrap();
        let dev = load_data(&cfg, &cfg.data.valid2_src, &cfg.data.valid2_tgt).unwrap();
        let rng = Rng::new(cfg.seed).substream("pretrain");
        let replay = DualSystem::init(&cfg.model, &mut rng.substream("init")).unwrap();
        let mut log = Vec::new();
        train_phase(
            &replay.forward,
            &train,
            &dev,
            &cfg.pretrain,
            "bleu",
            &rng.substream("forward"),
            "forward",
            None,
            true,
            &mut log,
        )
        .unwrap();
        assert_eq!(
            trained.shared_embed().value().data,
            replay.shared_embed().value().data
        );
        // The backward phase did train its own (non-shared) weights.
        assert_ne!(
            checksum_params(&trained.backward.params()),
            checksum_params(&replay.backward.params())
        );
    }

    #[test]
    fn pretrain_is_byte_identical_across_fresh_runs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = cmd_pretrain(&micro_config(dir_a.path())).unwrap();
        let b = cmd_pretrain(&micro_config(dir_b.path())).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn finetune_mode_equals_a_direct_fine_tuning_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        cmd_pretrain(&cfg).unwrap();
        let ckpt = cmd_augment(&cfg, ModelKind::Finetune).unwrap();
        let produced = load_single(&ckpt).unwrap();

        let replay = load_dual(&cfg.out().join(PRETRAINED_CKPT)).unwrap();
        let valid1 = load_data(&cfg, &cfg.data.valid1_src, &cfg.data.valid1_tgt).unwrap();
        let valid2 = load_data(&cfg, &cfg.data.valid2_src, &cfg.data.valid2_tgt).unwrap();
        let mut log = Vec::new();
        train_phase(
            &replay.forward,
            &valid1,
            &valid2,
            &cfg.augment,
            "bleu",
            &Rng::new(cfg.seed).substream("augment"),
            "augment",
            None,
            true,
            &mut log,
        )
        .unwrap();
        // Slot order matches; prefixes differ, so compare values not names.
        let got = produced.params();
        let want = replay.forward.params();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.value().data, w.value().data, "{} differs", w.name());
        }
    }

    #[test]
    fn degenerate_modes_collapse_to_their_simpler_equivalents() {
        // With the keep-everything policy, replacement fine-tuning is plain
        // fine-tuning; with a zero-epoch attack window, the attacked matrix
        // equals the original and the dual mode is simple replacement.
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(dir.path());
        cfg.policy = PerturbationPolicy {
            p_np: 1.0,
            ..PerturbationPolicy::default()
        };
        cfg.attack.window = 0;
        cmd_pretrain(&cfg).unwrap();
        let fin = cmd_augment(&cfg, ModelKind::Finetune).unwrap();
        let rep = cmd_augment(&cfg, ModelKind::SimpleReplacement).unwrap();
        let dual = cmd_augment(&cfg, ModelKind::DualNll).unwrap();

        let fin = load_single(&fin).unwrap();
        let rep = load_single(&rep).unwrap();
        let dual = load_single(&dual).unwrap();
        assert_eq!(
            checksum_params(&fin.params()),
            checksum_params(&rep.params())
        );
        assert_eq!(
            checksum_params(&rep.params()),
            checksum_params(&dual.params())
        );
    }

    #[test]
    fn noisegen_emits_the_ten_file_family_with_expected_structure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        cmd_pretrain(&cfg).unwrap();
        let paths = cmd_noisegen(&cfg, None).unwrap();
        assert_eq!(paths.len(), 10);

        let clean: usize = load_data(&cfg, &cfg.data.test_src, &cfg.data.test_tgt)
            .unwrap()
            .pairs
            .iter()
            .map(|(s, _)| s.len())
            .sum();
        for path in &paths {
            assert!(path.is_file(), "{} missing", path.display());
            let lines = read_lines(path).unwrap();
            assert_eq!(lines.len(), 8);
            let tokens: usize = lines.iter().map(|l| l.split(' ').count()).sum();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            if name.contains(".rd") {
                assert!(tokens < clean, "{name}: deletion must shrink the corpus");
            } else {
                assert_eq!(tokens, clean, "{name}: replacement preserves lengths");
            }
        }

        // Deterministic: a fresh directory reproduces the bytes.
        let dir2 = tempfile::tempdir().unwrap();
        let cfg2 = micro_config(dir2.path());
        cmd_pretrain(&cfg2).unwrap();
        let paths2 = cmd_noisegen(&cfg2, None).unwrap();
        for (a, b) in paths.iter().zip(&paths2) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }

        // Single-spec mode writes exactly one extra file.
        let one = cmd_noisegen(&cfg, Some(NoiseSpec::new(NoiseType::Rd, 0.05).unwrap())).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].ends_with("test.rd05.src"));
    }

    #[test]
    fn evaluate_reports_available_rows_and_report_rerenders_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        cmd_pretrain(&cfg).unwrap();
        cmd_noisegen(&cfg, None).unwrap();
        cmd_augment(&cfg, ModelKind::Finetune).unwrap();
        let report = cmd_evaluate(&cfg).unwrap();

        assert_eq!(report.absent.len(), 4);
        assert!(!report.absent.contains(&ModelKind::Baseline));
        assert!(!report.absent.contains(&ModelKind::Finetune));
        // 2 present models x 11 test sets x 1 metric.
        assert_eq!(report.cells.len(), 22);
        assert_eq!(report.testsets.len(), 11);
        for kind in [ModelKind::Baseline, ModelKind::Finetune] {
            let clean = report.cell(kind, "test", "bleu").unwrap();
            assert_eq!(clean.delta, 0.0);
        }

        let out = cfg.out();
        let csv = std::fs::read(out.join("report.csv")).unwrap();
        assert!(out.join("report.bleu.txt").is_file());
        assert!(out.join("report.json").is_file());
        let man = RunManifest::load_or_new(&out, &cfg).unwrap();
        man.verify_completeness(&out).unwrap();

        // Re-rendering from the cached decodes reproduces the CSV exactly.
        cmd_report(&cfg).unwrap();
        assert_eq!(std::fs::read(out.join("report.csv")).unwrap(), csv);
        let man = RunManifest::load_or_new(&out, &cfg).unwrap();
        man.verify_completeness(&out).unwrap();

        // A second evaluation finds the stage current and reloads the
        // stored report instead of decoding again.
        let stages_before = man.stages.len();
        let again = cmd_evaluate(&cfg).unwrap();
        assert_eq!(again.cells.len(), report.cells.len());
        let man = RunManifest::load_or_new(&out, &cfg).unwrap();
        assert_eq!(man.stages.len(), stages_before);

        // Training another variant invalidates the cached evaluation, so
        // the next run re-decodes and the new row appears.
        cmd_augment(&cfg, ModelKind::SimpleReplacement).unwrap();
        let refreshed = cmd_evaluate(&cfg).unwrap();
        assert_eq!(refreshed.absent.len(), 3);
        assert!(refreshed
            .cell(ModelKind::SimpleReplacement, "test", "bleu")
            .is_some());
        assert_eq!(refreshed.cells.len(), 33);
        let man = RunManifest::load_or_new(&out, &cfg).unwrap();
        man.verify_completeness(&out).unwrap();
    }

    #[test]
    fn sweep_tabulates_one_row_per_grid_point() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        cmd_pretrain(&cfg).unwrap();
        let table = cmd_sweep(&cfg, &SweepGrid::Lambda(vec![0.2, 0.8])).unwrap();
        let text = std::fs::read_to_string(&table).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# seed\t11");
        assert_eq!(lines[1], "lambda\tclean_bleu");
        assert_eq!(lines.len(), 4);
        for line in &lines[2..] {
            let score: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&score));
        }
        let man = RunManifest::load_or_new(&cfg.out(), &cfg).unwrap();
        assert!(man.latest("sweep.lambda20.attack.bleu").is_some());
        assert!(man.latest("sweep.lambda80.augment.dual_bleu").is_some());
        man.verify_completeness(&cfg.out()).unwrap();
    }

    #[test]
    fn overrides_touch_exactly_the_advertised_fields() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(dir.path());
        cfg.apply_overrides(&Overrides {
            seed: Some(99),
            out: Some("elsewhere".to_string()),
            metric: Some("chrf".to_string()),
            mrt_k: Some(4),
            lambda: Some(0.5),
            adv_percent: Some(40.0),
        })
        .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.out_dir, "elsewhere");
        assert_eq!(cfg.metrics[0], "chrf");
        assert_eq!(cfg.attack.loss.metric.as_deref(), Some("chrf"));
        assert_eq!(cfg.attack.loss.k, 4);
        assert_eq!(cfg.attack.loss.lambda, 0.5);
        crate::tensor::assert_close(cfg.policy.p_np, 0.6, 1e-12);
        crate::tensor::assert_close(cfg.policy.adv_percent(), 40.0, 1e-12);

        assert!(cfg
            .apply_overrides(&Overrides {
                adv_percent: Some(140.0),
                ..Overrides::default()
            })
            .is_err());
        assert!(cfg
            .apply_overrides(&Overrides {
                metric: Some("meteor".to_string()),
                ..Overrides::default()
            })
            .is_err());
    }

    #[test]
    fn config_loading_validates_fields_and_file_existence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        cfg.save(&dir.path().join("config.json")).unwrap();
        let loaded = PipelineConfig::load(&dir.path().join("config.json")).unwrap();
        assert_eq!(loaded.fingerprint(), cfg.fingerprint());

        // A missing data file is a missing artifact at load time.
        std::fs::remove_file(dir.path().join("data/test.tgt")).unwrap();
        let err = PipelineConfig::load(&dir.path().join("config.json")).unwrap_err();
        assert_eq!(err.exit_code(), 3);

        // Field validation still runs first.
        let mut bad = micro_config(dir.path());
        bad.metrics.clear();
        assert!(bad.validate().is_err());
        bad = micro_config(dir.path());
        bad.attack.loss.lambda = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn a_conflicting_snapshot_blocks_the_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        cmd_pretrain(&cfg).unwrap();
        let mut other = micro_config(dir.path());
        other.seed = 12;
        let err = cmd_pretrain(&other).unwrap_err();
        assert!(err.to_string().contains("different configuration"));
    }

    #[test]
    fn a_non_finite_checkpoint_aborts_with_a_numeric_error() {
        // Weights stay finite while the gates hold (the optimizer maps
        // finite gradients to finite updates), so the divergence surface a
        // user can actually hit is an artifact with non-finite values in
        // it. Corrupt one stored weight and every downstream stage must
        // refuse it as a numeric failure.
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        let ckpt = cmd_pretrain(&cfg).unwrap();
        let mut bytes = std::fs::read(&ckpt).unwrap();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        std::fs::write(&ckpt, bytes).unwrap();
        let err = cmd_augment(&cfg, ModelKind::Finetune).unwrap_err();
        assert_eq!(err.exit_code(), 2, "expected a numeric error, got: {err}");
    }
}
