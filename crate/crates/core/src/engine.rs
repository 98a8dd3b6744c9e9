//! The strictly causal per-tick loop and the artifact-writing commands the
//! CLI exposes.
//!
//! Each tick runs perception, graph update, candidate scoring, condition
//! building, linearization and generation in that order, reading nothing
//! past the record being processed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::EngineConfig;
use crate::graph::GotGraph;
use crate::metrics::{
    conditional_low_given_high, confusion_counts, event_counts, hma, latency_profile, low_names, high_names,
    ConfusionCounts, EventCounts, EventTable, LatencyStats, LevelScores, MetricReport,
};
use crate::perceiver::{Perceiver, PerceiverState};
use crate::rationale::{
    build_condition, generate_with_fallback, linearize, Backend, BackendKind, RemoteClient, Seq2Seq, Vocab,
};
use crate::rng::{item_rng, STREAM_DECODER_TRAIN};
use crate::selector::{collect_samples, SelectionEval, SelectionResult, Selector};
use crate::stream::{group_dialogues, read_stream_file, write_jsonl, HighAct, IngestMode, LowAct, SecondRecord, SpeechActPair};
use crate::synth::{label_lines, split, synth_stream, LabelLine};
use crate::{Error, Result};

pub const STREAM_FILE: &str = "stream.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const PERCEIVER_FILE: &str = "perceiver.json";
pub const SELECTOR_FILE: &str = "selector.json";
pub const DECODER_FILE: &str = "decoder.json";
pub const OUTPUTS_FILE: &str = "outputs.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const RATIONALES_FILE: &str = "rationales.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const LATENCY_FILE: &str = "latency.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVENTS_CSV: &str = "events.csv";
pub const EVENTS_JSON: &str = "events.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "turnsight.manifest/v1";

/// Files carrying wall-clock measurements. They are listed in the manifest
/// without checksums.
pub const VOLATILE_FILES: [&str; 3] = [RATIONALES_FILE, TIMINGS_FILE, LATENCY_FILE];

/// Everything emitted for one tick except timings, so two runs over the
/// same inputs produce identical lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickOutput {
    pub audio_id: String,
    pub t: u64,
    pub high: HighAct,
    pub low: LowAct,
    pub p_high: [f64; 4],
    pub p_low: [f64; 4],
    pub candidates: Vec<u64>,
    pub scores: Vec<f64>,
    pub tau: f64,
    pub anchors: Vec<u64>,
    pub chain: String,
    pub rationale: String,
    pub backend: BackendKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub audio_id: String,
    pub t: u64,
    pub high: HighAct,
    pub low: LowAct,
    pub p_high: [f64; 4],
    pub p_low: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionLine {
    pub audio_id: String,
    pub t: u64,
    pub scores: Vec<f64>,
    pub tau: f64,
    pub anchors: Vec<u64>,
    /// Candidate ids aligned with `scores`.
    #[serde(default)]
    pub candidates: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationaleLine {
    pub audio_id: String,
    pub t: u64,
    pub rationale: String,
    pub latency_ms: f64,
    pub backend: BackendKind,
}

/// Wall-clock milliseconds per stage of one tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickTimings {
    pub audio_id: String,
    pub t: u64,
    pub perceive_ms: f64,
    pub graph_ms: f64,
    pub select_ms: f64,
    pub condition_ms: f64,
    pub generate_ms: f64,
    pub total_ms: f64,
}

impl TickTimings {
    pub const STAGES: [&'static str; 5] = ["perceive", "graph", "select", "condition", "generate"];

    fn stage_values(&self) -> [f64; 5] {
        [self.perceive_ms, self.graph_ms, self.select_ms, self.condition_ms, self.generate_ms]
    }
}

#[derive(Clone, Debug)]
pub struct TickResult {
    pub output: TickOutput,
    pub rationale_latency_ms: f64,
    pub timings: TickTimings,
}

impl TickResult {
    pub fn prediction(&self) -> PredictionLine {
        let o = &self.output;
        PredictionLine {
            audio_id: o.audio_id.clone(),
            t: o.t,
            high: o.high,
            low: o.low,
            p_high: o.p_high,
            p_low: o.p_low,
        }
    }

    pub fn selection(&self) -> SelectionLine {
        let o = &self.output;
        SelectionLine {
            audio_id: o.audio_id.clone(),
            t: o.t,
            scores: o.scores.clone(),
            tau: o.tau,
            anchors: o.anchors.clone(),
            candidates: o.candidates.clone(),
        }
    }

    pub fn rationale(&self) -> RationaleLine {
        let o = &self.output;
        RationaleLine {
            audio_id: o.audio_id.clone(),
            t: o.t,
            rationale: o.rationale.clone(),
            latency_ms: self.rationale_latency_ms,
            backend: o.backend,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ticks: usize,
    pub dialogues: usize,
    pub skipped: usize,
}

struct DialogueState {
    graph: GotGraph,
    perceiver: PerceiverState,
    last: Option<u64>,
}

/// Trained (or freshly initialized) models plus loop settings. Immutable
/// while streams run, so one engine can serve many dialogues.
#[derive(Debug)]
pub struct Engine {
    window: u64,
    recent: usize,
    silence_commit: Option<u32>,
    ingest: IngestMode,
    perceiver: Perceiver,
    selector: Selector,
    backend: Backend,
}

impl Engine {
    pub fn new(cfg: &EngineConfig, perceiver: Perceiver, selector: Selector, backend: Backend) -> Result<Self> {
        if perceiver.config().emb_dim != selector.config().emb_dim {
            return Err(Error::Config("perceiver and selector embedding widths differ".into()));
        }
        Ok(Self {
            window: cfg.window,
            recent: cfg.recent,
            silence_commit: cfg.silence_commit,
            ingest: cfg.ingest,
            perceiver,
            selector,
            backend,
        })
    }

    /// Untrained models seeded from the config, template rationales.
    pub fn fresh(cfg: &EngineConfig) -> Result<Self> {
        Self::new(
            cfg,
            Perceiver::new(cfg.perceiver.clone(), cfg.seed)?,
            Selector::new(cfg.selector.clone(), cfg.seed)?,
            Backend::Template,
        )
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    fn new_state(&self) -> Result<DialogueState> {
        Ok(DialogueState {
            graph: GotGraph::new(self.window)?.with_silence_commit(self.silence_commit),
            perceiver: PerceiverState::default(),
            last: None,
        })
    }

    /// Rejects a record before any state is touched.
    fn check(&self, st: &DialogueState, r: &SecondRecord) -> Result<()> {
        r.validate_shape()?;
        let d = self.perceiver.config().emb_dim;
        if r.emb_acoustic.len() != d || r.emb_semantic.len() != d {
            return Err(Error::data(format!(
                "{}@{}: embedding widths ({}, {}), engine expects {d}",
                r.audio_id,
                r.t,
                r.emb_acoustic.len(),
                r.emb_semantic.len()
            )));
        }
        if let Some(prev) = st.last {
            if r.t != prev + 1 {
                return Err(Error::data(format!("{}: tick {} after {prev}", r.audio_id, r.t)));
            }
        }
        Ok(())
    }

    fn step(&self, st: &mut DialogueState, r: &SecondRecord) -> Result<TickResult> {
        let t0 = Instant::now();
        let pair = self.perceiver.predict_step(r, &mut st.perceiver)?;
        let t1 = Instant::now();
        let key = st.graph.begin_tick(r, &pair)?;
        let t2 = Instant::now();
        let (q, cands) = st.graph.candidate_view(r.t)?;
        let sel = self.selector.select(q, &cands, r.t)?;
        let t3 = Instant::now();
        let chain = linearize(&build_condition(&st.graph, &sel, self.recent)?);
        let t4 = Instant::now();
        let rationale = generate_with_fallback(&chain, &self.backend);
        let t5 = Instant::now();
        st.graph.end_tick(r, key);
        st.last = Some(r.t);
        let t6 = Instant::now();

        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        let SelectionResult {
            candidate_ids,
            scores,
            tau,
            anchors,
            ..
        } = sel;
        Ok(TickResult {
            output: TickOutput {
                audio_id: r.audio_id.clone(),
                t: r.t,
                high: pair.high,
                low: pair.low,
                p_high: pair.p_high,
                p_low: pair.p_low,
                candidates: candidate_ids,
                scores,
                tau,
                anchors,
                chain: chain.text,
                rationale: rationale.text,
                backend: rationale.backend,
            },
            rationale_latency_ms: rationale.latency_ms,
            timings: TickTimings {
                audio_id: r.audio_id.clone(),
                t: r.t,
                perceive_ms: ms(t0, t1),
                graph_ms: ms(t1, t2) + ms(t5, t6),
                select_ms: ms(t2, t3),
                condition_ms: ms(t3, t4),
                generate_ms: ms(t4, t5),
                total_ms: ms(t0, t6),
            },
        })
    }

    /// Streams records in arrival order; dialogues may interleave. Each
    /// processed tick is handed to `emit` before the next record is read.
    /// A bad record aborts in strict mode and is skipped in lenient mode.
    pub fn run_stream<'a, I, F>(&self, records: I, mut emit: F) -> Result<RunSummary>
    where
        I: IntoIterator<Item = &'a SecondRecord>,
        F: FnMut(&TickResult) -> Result<()>,
    {
        let mut states: HashMap<String, DialogueState> = HashMap::new();
        let mut summary = RunSummary::default();
        for r in records {
            if !states.contains_key(&r.audio_id) {
                states.insert(r.audio_id.clone(), self.new_state()?);
                summary.dialogues += 1;
            }
            let st = states.get_mut(&r.audio_id).expect("state inserted above");
            if let Err(e) = self.check(st, r) {
                match self.ingest {
                    IngestMode::Strict => return Err(e),
                    IngestMode::Lenient => {
                        log::warn!("skipping record: {e}");
                        summary.skipped += 1;
                        continue;
                    }
                }
            }
            let res = self.step(st, r)?;
            emit(&res)?;
            summary.ticks += 1;
        }
        Ok(summary)
    }

    /// Collects every tick in memory.
    pub fn run_collect(&self, records: &[SecondRecord]) -> Result<Vec<TickResult>> {
        let mut out = Vec::with_capacity(records.len());
        self.run_stream(records, |r| {
            out.push(r.clone());
            Ok(())
        })?;
        Ok(out)
    }
}

/// Per-stage and end-to-end latency summaries for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub stages: BTreeMap<String, LatencyStats>,
    pub total: LatencyStats,
    pub rationale: LatencyStats,
    /// Relative gap between summed stage means and the end-to-end mean.
    pub stage_sum_discrepancy: f64,
    pub std_definition: String,
}

pub fn latency_report(ticks: &[TickResult]) -> Result<LatencyReport> {
    let mut stages = BTreeMap::new();
    for (i, name) in TickTimings::STAGES.iter().enumerate() {
        let v: Vec<f64> = ticks.iter().map(|r| r.timings.stage_values()[i]).collect();
        stages.insert(name.to_string(), latency_profile(&v)?);
    }
    let total = latency_profile(&ticks.iter().map(|r| r.timings.total_ms).collect::<Vec<_>>())?;
    let rationale = latency_profile(&ticks.iter().map(|r| r.rationale_latency_ms).collect::<Vec<_>>())?;
    Ok(LatencyReport {
        stage_sum_discrepancy: crate::metrics::stage_sum_discrepancy(&stages, &total),
        stages,
        total,
        rationale,
        std_definition: "population".into(),
    })
}

// ---------------------------------------------------------------------------
// Artifact helpers

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn write_jsonl_file<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, items)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandEntry {
    pub seed: u64,
    pub config_hash: String,
}

/// Index of an output directory: which commands ran with which config, and
/// checksums of every stable file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub commands: BTreeMap<String, CommandEntry>,
    pub files: BTreeMap<String, FileEntry>,
    pub volatile: BTreeSet<String>,
}

/// Records `command` and re-checksums the top-level files of `out_dir`.
pub fn update_manifest(out_dir: &Path, command: &str, cfg: &EngineConfig) -> Result<Manifest> {
    let path = out_dir.join(MANIFEST_FILE);
    let mut m = if path.exists() {
        read_json::<Manifest>(&path)?
    } else {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            seed: cfg.seed,
            commands: BTreeMap::new(),
            files: BTreeMap::new(),
            volatile: BTreeSet::new(),
        }
    };
    m.seed = cfg.seed;
    m.commands.insert(
        command.to_string(),
        CommandEntry {
            seed: cfg.seed,
            config_hash: cfg.hash()?,
        },
    );
    m.files.clear();
    m.volatile.clear();
    let mut names: Vec<String> = fs::read_dir(out_dir)
        .map_err(|e| Error::io(out_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    names.sort();
    for name in names {
        if VOLATILE_FILES.contains(&name.as_str()) {
            m.volatile.insert(name);
            continue;
        }
        let p = out_dir.join(&name);
        let bytes = fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
        m.files.insert(name, FileEntry { bytes, sha256: sha256_file(&p)? });
    }
    write_json(&path, &m)?;
    Ok(m)
}

fn write_config(out_dir: &Path, cfg: &EngineConfig) -> Result<()> {
    let p = out_dir.join(CONFIG_FILE);
    fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))
}

/// Dialogue-level split stored as audio ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            "all" => Ok(Subset::All),
            _ => Err(Error::Config(format!("unknown subset {s:?}"))),
        }
    }
}

/// Loads a stream grouped into dialogues.
pub fn load_dialogues(path: &Path, mode: IngestMode) -> Result<Vec<Vec<SecondRecord>>> {
    let load = read_stream_file(path, mode)?;
    if load.skipped > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), load.skipped);
    }
    Ok(group_dialogues(load.records))
}

/// Dialogues in `subset`. Without a split file every dialogue counts as
/// every subset.
pub fn select_subset(
    dialogues: Vec<Vec<SecondRecord>>,
    split_path: &Path,
    subset: Subset,
) -> Result<Vec<Vec<SecondRecord>>> {
    if subset == Subset::All || !split_path.exists() {
        return Ok(dialogues);
    }
    let s: SplitFile = read_json(split_path)?;
    let ids: BTreeSet<&String> = match subset {
        Subset::Train => s.train.iter().collect(),
        Subset::Val => s.val.iter().collect(),
        Subset::Test => s.test.iter().collect(),
        Subset::All => unreachable!(),
    };
    Ok(dialogues
        .into_iter()
        .filter(|d| d.first().is_some_and(|r| ids.contains(&r.audio_id)))
        .collect())
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub dialogues: usize,
    pub ticks: usize,
    pub topics: usize,
    pub mean_anchors: f64,
    pub split: [usize; 3],
}

pub fn synth_command(cfg: &EngineConfig, out_dir: &Path) -> Result<SynthSummary> {
    ensure_dir(out_dir)?;
    let dialogues = synth_stream(&cfg.synth)?;
    let sp = split(dialogues.len(), cfg.split, cfg.seed)?;
    let ids = |ix: &[usize]| -> Vec<String> { ix.iter().map(|&i| dialogues[i][0].audio_id.clone()).collect() };
    let split_file = SplitFile {
        seed: cfg.seed,
        train: ids(&sp.train),
        val: ids(&sp.val),
        test: ids(&sp.test),
    };
    let records: Vec<&SecondRecord> = dialogues.iter().flatten().collect();
    write_jsonl_file(&out_dir.join(STREAM_FILE), records.iter().copied())?;
    let labels: Vec<LabelLine> = dialogues.iter().flat_map(|d| label_lines(d)).collect();
    write_jsonl_file(&out_dir.join(LABELS_FILE), &labels)?;
    write_json(&out_dir.join(SPLIT_FILE), &split_file)?;
    write_config(out_dir, cfg)?;
    update_manifest(out_dir, "synth", cfg)?;
    let anchors: usize = labels.iter().map(|l| l.anchors.len()).sum();
    Ok(SynthSummary {
        dialogues: dialogues.len(),
        ticks: records.len(),
        topics: cfg.synth.topic_count()?,
        mean_anchors: anchors as f64 / labels.len().max(1) as f64,
        split: [sp.train.len(), sp.val.len(), sp.test.len()],
    })
}

fn pair_indices(dialogues: &[Vec<SecondRecord>], preds: &[Vec<SpeechActPair>]) -> [Vec<usize>; 4] {
    let mut out: [Vec<usize>; 4] = Default::default();
    for (d, p) in dialogues.iter().zip(preds) {
        for (r, y) in d.iter().zip(p) {
            if let Some(g) = &r.gold {
                out[0].push(y.high.index());
                out[1].push(g.high.index());
                out[2].push(y.low.index());
                out[3].push(g.low.index());
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceiverReport {
    pub train_dialogues: usize,
    pub epoch_losses: Vec<f64>,
    pub val_macro_f1_high: Option<f64>,
    pub val_macro_f1_low: Option<f64>,
}

pub fn train_perceiver_command(cfg: &EngineConfig, out_dir: &Path, stream: &Path) -> Result<PerceiverReport> {
    ensure_dir(out_dir)?;
    let all = load_dialogues(stream, cfg.ingest)?;
    let split_path = out_dir.join(SPLIT_FILE);
    let train = select_subset(all.clone(), &split_path, Subset::Train)?;
    let val = if split_path.exists() {
        select_subset(all, &split_path, Subset::Val)?
    } else {
        Vec::new()
    };
    let mut p = Perceiver::new(cfg.perceiver.clone(), cfg.seed)?;
    let rep = p.train(&train, &cfg.train, cfg.seed)?;
    let (mut f1h, mut f1l) = (None, None);
    if !val.is_empty() {
        let preds: Vec<Vec<SpeechActPair>> = val.iter().map(|d| p.predict_dialogue(d)).collect::<Result<_>>()?;
        let [ph, gh, pl, gl] = pair_indices(&val, &preds);
        if !gh.is_empty() {
            f1h = Some(crate::metrics::macro_f1(&confusion_counts(&ph, &gh, 4)?));
            f1l = Some(crate::metrics::macro_f1(&confusion_counts(&pl, &gl, 4)?));
        }
    }
    p.save(&out_dir.join(PERCEIVER_FILE))?;
    let report = PerceiverReport {
        train_dialogues: train.len(),
        epoch_losses: rep.epoch_losses,
        val_macro_f1_high: f1h,
        val_macro_f1_low: f1l,
    };
    write_json(&out_dir.join("perceiver_report.json"), &report)?;
    write_config(out_dir, cfg)?;
    update_manifest(out_dir, "train-perceiver", cfg)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectorReport {
    pub train_dialogues: usize,
    pub positive_weight: f64,
    pub epoch_losses: Vec<f64>,
    pub val: Option<SelectionEval>,
    pub val_f1: Option<f64>,
}

pub fn train_selector_command(cfg: &EngineConfig, out_dir: &Path, stream: &Path) -> Result<SelectorReport> {
    ensure_dir(out_dir)?;
    let all = load_dialogues(stream, cfg.ingest)?;
    let split_path = out_dir.join(SPLIT_FILE);
    let train = select_subset(all.clone(), &split_path, Subset::Train)?;
    let dim = cfg.selector.emb_dim;
    let samples = collect_samples(&train, cfg.window, dim)?;
    let mut s = Selector::new(cfg.selector.clone(), cfg.seed)?;
    let rep = s.train(&samples, &cfg.train, cfg.seed)?;
    let val = if split_path.exists() {
        let v = select_subset(all, &split_path, Subset::Val)?;
        Some(s.evaluate(&collect_samples(&v, cfg.window, dim)?)?)
    } else {
        None
    };
    s.save(&out_dir.join(SELECTOR_FILE))?;
    let report = SelectorReport {
        train_dialogues: train.len(),
        positive_weight: rep.alpha,
        epoch_losses: rep.epoch_losses,
        val_f1: val.as_ref().map(|v| v.f1()),
        val,
    };
    write_json(&out_dir.join("selector_report.json"), &report)?;
    write_config(out_dir, cfg)?;
    update_manifest(out_dir, "train-selector", cfg)?;
    Ok(report)
}

/// `(chain, rationale)` pairs from replaying annotated dialogues with their
/// gold labels and gold anchors. Ticks without a gold rationale are skipped.
pub fn gold_chains(dialogues: &[Vec<SecondRecord>], window: u64, recent: usize) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for d in dialogues {
        let mut g = GotGraph::new(window)?;
        for r in d {
            let gold = r
                .gold
                .as_ref()
                .ok_or_else(|| Error::data(format!("{}@{} has no gold annotation", r.audio_id, r.t)))?;
            let key = g.begin_tick(r, &SpeechActPair::certain(gold.high, gold.low))?;
            let (_, cands) = g.candidate_view(r.t)?;
            let ids: Vec<u64> = cands.iter().map(|c| c.id).collect();
            let anchors: Vec<u64> = gold.anchors.iter().copied().filter(|a| ids.contains(a)).collect();
            let sel = SelectionResult {
                t: r.t,
                mask: vec![true; ids.len()],
                scores: vec![0.0; ids.len()],
                candidate_ids: ids,
                tau: 0.0,
                anchors,
            };
            let chain = linearize(&build_condition(&g, &sel, recent)?);
            if let Some(text) = &gold.rationale {
                out.push((chain.text, text.clone()));
            }
            g.end_tick(r, key);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderReport {
    pub pairs: usize,
    pub skipped_long: usize,
    pub vocab: usize,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Exact-match rate of greedy generations on up to 50 validation pairs.
    pub val_exact_match: Option<f64>,
}

pub fn train_decoder_command(cfg: &EngineConfig, out_dir: &Path, stream: &Path) -> Result<DecoderReport> {
    ensure_dir(out_dir)?;
    let all = load_dialogues(stream, cfg.ingest)?;
    let split_path = out_dir.join(SPLIT_FILE);
    let train = select_subset(all.clone(), &split_path, Subset::Train)?;
    let mut pairs = gold_chains(&train, cfg.window, cfg.recent)?;
    if pairs.is_empty() {
        return Err(Error::data("no annotated rationales to train on"));
    }
    let vocab = Vocab::build(pairs.iter().flat_map(|(c, r)| [c.as_str(), r.as_str()]));
    let mut model = Seq2Seq::new(cfg.decoder.clone(), vocab, cfg.seed)?;
    pairs.shuffle(&mut item_rng(cfg.seed, STREAM_DECODER_TRAIN, 1));
    let mut encoded = Vec::new();
    let mut skipped_long = 0;
    for (c, r) in &pairs {
        if encoded.len() == cfg.decoder_train.max_pairs {
            break;
        }
        match model.encode_pair(c, r) {
            Ok(e) => encoded.push(e),
            Err(_) => skipped_long += 1,
        }
    }
    if encoded.is_empty() {
        return Err(Error::data("every rationale exceeds the decoder target limit"));
    }
    let rep = model.train(&encoded, &cfg.decoder_train.train_config(), cfg.seed)?;
    let val_exact_match = if split_path.exists() {
        let val = select_subset(all, &split_path, Subset::Val)?;
        let vp = gold_chains(&val, cfg.window, cfg.recent)?;
        let take: Vec<&(String, String)> = vp.iter().step_by((vp.len() / 50).max(1)).take(50).collect();
        (!take.is_empty()).then(|| {
            take.iter().filter(|(c, r)| model.generate(c) == *r).count() as f64 / take.len() as f64
        })
    } else {
        None
    };
    model.save(&out_dir.join(DECODER_FILE))?;
    let report = DecoderReport {
        pairs: encoded.len(),
        skipped_long,
        vocab: model.vocab().len(),
        epoch_losses: rep.epoch_losses,
        steps: rep.steps,
        val_exact_match,
    };
    write_json(&out_dir.join("decoder_report.json"), &report)?;
    write_config(out_dir, cfg)?;
    update_manifest(out_dir, "train-decoder", cfg)?;
    Ok(report)
}

/// Builds the engine from checkpoints in `model_dir`, falling back to
/// seeded initialization for missing perceiver or selector checkpoints.
pub fn load_engine(cfg: &EngineConfig, model_dir: &Path) -> Result<Engine> {
    let mut perceiver = Perceiver::new(cfg.perceiver.clone(), cfg.seed)?;
    let p = model_dir.join(PERCEIVER_FILE);
    if p.exists() {
        perceiver.load(&p)?;
    } else {
        log::warn!("{} not found; using an untrained perceiver", p.display());
    }
    let mut selector = Selector::new(cfg.selector.clone(), cfg.seed)?;
    let s = model_dir.join(SELECTOR_FILE);
    if s.exists() {
        selector.load(&s)?;
    } else {
        log::warn!("{} not found; using an untrained selector", s.display());
    }
    let backend = match cfg.backend {
        BackendKind::Template => Backend::Template,
        BackendKind::Trainable => Backend::Trainable(Box::new(Seq2Seq::load(&model_dir.join(DECODER_FILE))?)),
        BackendKind::Remote => Backend::Remote(RemoteClient::new(&cfg.remote.clone().with_env()?)?),
    };
    Engine::new(cfg, perceiver, selector, backend)
}

pub fn run_command(cfg: &EngineConfig, out_dir: &Path, stream: &Path, subset: Subset) -> Result<RunSummary> {
    ensure_dir(out_dir)?;
    let engine = load_engine(cfg, out_dir)?;
    let dialogues = select_subset(load_dialogues(stream, cfg.ingest)?, &out_dir.join(SPLIT_FILE), subset)?;
    let records: Vec<&SecondRecord> = dialogues.iter().flatten().collect();
    let open = |name: &str| -> Result<BufWriter<fs::File>> {
        let p = out_dir.join(name);
        Ok(BufWriter::new(fs::File::create(&p).map_err(|e| Error::io(&p, e))?))
    };
    let mut outputs = open(OUTPUTS_FILE)?;
    let mut preds = open(PREDICTIONS_FILE)?;
    let mut sels = open(SELECTIONS_FILE)?;
    let mut rats = open(RATIONALES_FILE)?;
    let mut times = open(TIMINGS_FILE)?;
    let mut kept = Vec::with_capacity(records.len());
    let summary = engine.run_stream(records.iter().copied(), |res| {
        write_jsonl(&mut outputs, [&res.output])?;
        write_jsonl(&mut preds, [res.prediction()])?;
        write_jsonl(&mut sels, [res.selection()])?;
        write_jsonl(&mut rats, [res.rationale()])?;
        write_jsonl(&mut times, [&res.timings])?;
        kept.push(res.clone());
        Ok(())
    })?;
    for (w, name) in [
        (&mut outputs, OUTPUTS_FILE),
        (&mut preds, PREDICTIONS_FILE),
        (&mut sels, SELECTIONS_FILE),
        (&mut rats, RATIONALES_FILE),
        (&mut times, TIMINGS_FILE),
    ] {
        w.flush().map_err(|e| Error::io(out_dir.join(name), e))?;
    }
    if !kept.is_empty() {
        write_json(&out_dir.join(LATENCY_FILE), &latency_report(&kept)?)?;
    }
    write_config(out_dir, cfg)?;
    update_manifest(out_dir, "run", cfg)?;
    Ok(summary)
}

/// Scores predictions (and optional selections) against gold labels. Event
/// statistics come from the stream's voicing flags when a stream is given.
pub fn evaluate(
    cfg: &EngineConfig,
    predictions: &[PredictionLine],
    selections: Option<&[SelectionLine]>,
    gold: &[LabelLine],
    stream: Option<&[Vec<SecondRecord>]>,
) -> Result<MetricReport> {
    let index: HashMap<(&str, u64), &LabelLine> = gold.iter().map(|g| ((g.audio_id.as_str(), g.t), g)).collect();
    let mut ph = Vec::new();
    let mut gh = Vec::new();
    let mut pl = Vec::new();
    let mut gl = Vec::new();
    let mut prob_h = Vec::new();
    let mut prob_l = Vec::new();
    for p in predictions {
        let g = index
            .get(&(p.audio_id.as_str(), p.t))
            .ok_or_else(|| Error::data(format!("no gold label for {}@{}", p.audio_id, p.t)))?;
        ph.push(p.high.index());
        gh.push(g.high.index());
        pl.push(p.low.index());
        gl.push(g.low.index());
        prob_h.push(p.p_high.to_vec());
        prob_l.push(p.p_low.to_vec());
    }
    if predictions.is_empty() {
        return Err(Error::data("no predictions to evaluate"));
    }
    let agree = |a: &[usize], b: &[usize]| -> Vec<u8> { a.iter().zip(b).map(|(x, y)| u8::from(x == y)).collect() };
    let pairs = |h: &[usize], l: &[usize]| -> Vec<(HighAct, LowAct)> {
        h.iter()
            .zip(l)
            .map(|(&a, &b)| (HighAct::ALL[a], LowAct::ALL[b]))
            .collect()
    };

    let anchors = match selections {
        Some(sels) => {
            let mut c = ConfusionCounts::default();
            for s in sels {
                let g = index
                    .get(&(s.audio_id.as_str(), s.t))
                    .ok_or_else(|| Error::data(format!("no gold anchors for {}@{}", s.audio_id, s.t)))?;
                for id in &s.candidates {
                    let pred = s.anchors.contains(id);
                    let gold = g.anchors.contains(id);
                    match (pred, gold) {
                        (true, true) => c.tp += 1,
                        (true, false) => c.fp += 1,
                        (false, true) => c.fn_ += 1,
                        (false, false) => c.tn += 1,
                    }
                }
            }
            Some(c)
        }
        None => None,
    };

    let events = match stream {
        Some(dialogues) => {
            let wanted: BTreeSet<&str> = predictions.iter().map(|p| p.audio_id.as_str()).collect();
            let mut total = EventCounts::default();
            for d in dialogues.iter().filter(|d| d.first().is_some_and(|r| wanted.contains(r.audio_id.as_str()))) {
                let a: Vec<bool> = d.iter().map(|r| r.vad[0]).collect();
                let b: Vec<bool> = d.iter().map(|r| r.vad[1]).collect();
                total.merge(&event_counts(&a, &b, &cfg.events)?);
            }
            (total.total_ticks > 0).then(|| total.table(cfg.tick_seconds)).transpose()?
        }
        None => None,
    };

    Ok(MetricReport {
        ticks: predictions.len(),
        high: LevelScores::compute(&high_names(), &ph, &gh, &prob_h)?,
        low: LevelScores::compute(&low_names(), &pl, &gl, &prob_l)?,
        conditional_gold: conditional_low_given_high(&pairs(&gh, &gl)),
        conditional_pred: conditional_low_given_high(&pairs(&ph, &pl)),
        hma_high: Some(hma(&[agree(&ph, &gh)])?),
        hma_low: Some(hma(&[agree(&pl, &gl)])?),
        anchors,
        events,
        latency: BTreeMap::new(),
        std_definition: "population".into(),
        f1_unit: "tick".into(),
    })
}

/// Gold labels from a labels file, or from the `gold` fields of a stream.
pub fn gold_from_stream(dialogues: &[Vec<SecondRecord>]) -> Vec<LabelLine> {
    dialogues.iter().flat_map(|d| label_lines(d)).collect()
}

pub struct EvalInputs {
    pub predictions: PathBuf,
    pub selections: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub stream: Option<PathBuf>,
}

pub fn eval_command(cfg: &EngineConfig, out_dir: &Path, inputs: &EvalInputs) -> Result<MetricReport> {
    ensure_dir(out_dir)?;
    let preds: Vec<PredictionLine> = read_jsonl(&inputs.predictions)?;
    let sels: Option<Vec<SelectionLine>> = inputs.selections.as_deref().map(read_jsonl).transpose()?;
    let dialogues = inputs
        .stream
        .as_deref()
        .map(|p| load_dialogues(p, cfg.ingest))
        .transpose()?;
    let gold = match (&inputs.labels, &dialogues) {
        (Some(p), _) => read_jsonl(p)?,
        (None, Some(d)) => gold_from_stream(d),
        (None, None) => return Err(Error::Config("eval needs a labels file or an annotated stream".into())),
    };
    let report = evaluate(cfg, &preds, sels.as_deref(), &gold, dialogues.as_deref())?;
    write_json(&out_dir.join(METRICS_FILE), &report)?;
    update_manifest(out_dir, "eval", cfg)?;
    Ok(report)
}

/// Reads a two-column voicing trace: one `a,b` row of 0/1 per tick. Blank
/// lines and a non-numeric header are ignored.
pub fn read_vad_csv(path: &Path) -> Result<(Vec<bool>, Vec<bool>)> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |s: &str| match s {
            "0" | "false" => Some(false),
            "1" | "true" => Some(true),
            _ => None,
        };
        match (cols.len(), cols.first().and_then(|s| parse(s)), cols.get(1).and_then(|s| parse(s))) {
            (2, Some(x), Some(y)) => {
                a.push(x);
                b.push(y);
            }
            _ if i == 0 && a.is_empty() => continue,
            _ => {
                return Err(Error::data(format!("{}:{}: expected two 0/1 columns", path.display(), i + 1)));
            }
        }
    }
    Ok((a, b))
}

pub enum StatsInput {
    Stream(PathBuf),
    Vad(PathBuf),
}

pub fn stats_command(cfg: &EngineConfig, out_dir: &Path, input: &StatsInput) -> Result<EventTable> {
    ensure_dir(out_dir)?;
    let counts = match input {
        StatsInput::Vad(p) => {
            let (a, b) = read_vad_csv(p)?;
            event_counts(&a, &b, &cfg.events)?
        }
        StatsInput::Stream(p) => {
            let mut total = EventCounts::default();
            for d in load_dialogues(p, cfg.ingest)? {
                let a: Vec<bool> = d.iter().map(|r| r.vad[0]).collect();
                let b: Vec<bool> = d.iter().map(|r| r.vad[1]).collect();
                total.merge(&event_counts(&a, &b, &cfg.events)?);
            }
            total
        }
    };
    let table = counts.table(cfg.tick_seconds)?;
    let csv = out_dir.join(EVENTS_CSV);
    fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    write_json(&out_dir.join(EVENTS_JSON), &table)?;
    update_manifest(out_dir, "stats", cfg)?;
    Ok(table)
}
