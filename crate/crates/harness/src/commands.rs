//! Subcommand implementations, kept free of argument parsing so tests can
//! drive them directly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use iie_core::annotation::{generate_forms, AnnotationBundle, AnnotationResponse, FormConfig, FormSource};
use iie_core::eval::{evaluate, filter_attention_checks, ingest_responses, EvalError, EvalReport, SemanticOracle};
use iie_core::gateway::{Gateway, GatewayConfig, LlmBackend, ReplayBackend, ReplayFile, TemplateSet, Transcript};
use iie_core::kg::{export_graph, ExportFormat};
use iie_core::nli::{inputs_from_bundle, run_probe, NliReply, NliScorer, ProbeItem, ProbeReport, StubScorer};
use iie_core::pipeline::{InputSentence, Pipeline, PipelineConfig, SentenceRun, SourceTag};
use iie_core::triplet::{parse_triplet, Triplet};
use iie_core::verbalizer::{verbalize, VerbalizerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, HarnessError, Result};
use crate::http::{HttpChatBackend, HttpNliScorer, DEFAULT_TIMEOUT};
use crate::service::load_forms;

pub const MANIFEST_FILE: &str = "run.json";
pub const REPLAY_FILE: &str = "replay.json";
pub const MANIFEST_SCHEMA_VERSION: &str = "1";

pub fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    write(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(json_err(path))
}

/// Where completions come from.
#[derive(Debug, Clone, Default)]
pub struct ChatOptions {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub mock: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub gateway: GatewayConfig,
}

pub fn build_gateway(opts: &ChatOptions) -> Result<Gateway> {
    let backend: Arc<dyn LlmBackend> = match (&opts.mock, &opts.endpoint) {
        (Some(path), _) => Arc::new(ReplayBackend::from_json(&read(path)?)?),
        (None, Some(endpoint)) => Arc::new(HttpChatBackend::new(endpoint, opts.api_key.clone(), DEFAULT_TIMEOUT)?),
        (None, None) => return Err(HarnessError::Usage("either --endpoint or --mock is required".into())),
    };
    let mut gateway = Gateway::new(backend, opts.gateway.clone());
    if let Some(dir) = &opts.prompts {
        gateway = gateway.with_templates(TemplateSet::with_overrides(dir)?);
    }
    Ok(gateway)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub sentence: String,
    pub source: SourceTag,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Index of a `run` output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: String,
    pub model_id: String,
    pub pipeline: PipelineConfig,
    pub gateway: GatewayConfig,
    pub sentences: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn failed(&self) -> usize {
        self.sentences.iter().filter(|s| !s.ok).count()
    }
}

pub fn run_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.run.json"))
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(HarnessError::Usage(format!(
            "sentence id {id:?} is not usable as a file name"
        )))
    }
}

/// Runs every sentence and writes, per sentence id: `{id}.graph.json`,
/// `{id}.graph.dot` (successful runs only), `{id}.run.json` and
/// `{id}.transcript.json`, a replay file reproducing the run. A failed run
/// keeps its partial record and transcript. `replay.json` merges every
/// transcript so the whole run can be repeated with `--mock`. Up to `workers` sentences run
/// at once; the gateway's own cap bounds requests in flight.
pub fn run_sentences(pipeline: &Pipeline, inputs: &[InputSentence], workers: usize, out: &Path) -> Result<RunManifest> {
    for s in inputs {
        check_id(&s.id)?;
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ManifestEntry>>>> = Mutex::new((0..inputs.len()).map(|_| None).collect());
    let one = |input: &InputSentence| -> Result<ManifestEntry> {
        let (run, error) = match pipeline.run_sentence(&input.sentence) {
            Ok(output) => {
                write(
                    &out.join(format!("{}.graph.json", input.id)),
                    export_graph(&output.kg, ExportFormat::JsonBundle),
                )?;
                write(
                    &out.join(format!("{}.graph.dot", input.id)),
                    export_graph(&output.kg, ExportFormat::Dot),
                )?;
                (output.run, None)
            }
            Err(failure) => (failure.partial, Some(failure.error.to_string())),
        };
        write_json(&run_file(out, &input.id), &run)?;
        write(
            &out.join(format!("{}.transcript.json", input.id)),
            run.transcript.to_replay().to_json(),
        )?;
        Ok(ManifestEntry {
            id: input.id.clone(),
            sentence: input.sentence.clone(),
            source: input.source,
            ok: error.is_none(),
            error,
        })
    };
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, inputs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(input) = inputs.get(i) else { break };
                let r = one(input);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let sentences = slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect::<Result<Vec<_>>>()?;
    let mut merged = Vec::new();
    for s in &sentences {
        let run: SentenceRun = read_json(&run_file(out, &s.id))?;
        merged.extend(run.transcript.to_replay().entries);
    }
    write(&out.join(REPLAY_FILE), ReplayFile::from_entries(merged).to_json())?;
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION.into(),
        model_id: pipeline.gateway().config().model_id.clone(),
        pipeline: pipeline.config().clone(),
        gateway: pipeline.gateway().config().clone(),
        sentences,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn source_label(tag: SourceTag) -> &'static str {
    match tag {
        SourceTag::Socialiqa => "socialiqa",
        SourceTag::Copa => "copa",
        SourceTag::Other => "other",
    }
}

/// Reads a `run` directory and writes one `{form_id}.json` bundle per group
/// of sentences. Failed runs are skipped. Bundles hold the answer key; the
/// service strips it before serving.
pub fn make_forms(run_dir: &Path, prefix: &str, seed: u64, config: &FormConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let manifest: RunManifest = read_json(&run_dir.join(MANIFEST_FILE))?;
    let ok: Vec<&ManifestEntry> = manifest.sentences.iter().filter(|s| s.ok).collect();
    let runs: Vec<SentenceRun> = ok
        .iter()
        .map(|s| read_json(&run_file(run_dir, &s.id)))
        .collect::<Result<_>>()?;
    let sources: Vec<FormSource<'_>> = ok
        .iter()
        .zip(&runs)
        .map(|(s, run)| FormSource {
            sentence_id: &s.id,
            dataset: Some(source_label(s.source)),
            run,
        })
        .collect();
    let bundles = generate_forms(prefix, &sources, seed, config)?;
    let mut paths = Vec::new();
    for b in bundles {
        let path = out.join(format!("{}.json", b.form_id));
        write(&path, b.to_json())?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads responses from JSON-lines files, or from every `*.jsonl` file in a
/// directory.
pub fn load_responses(paths: &[PathBuf]) -> Result<Vec<AnnotationResponse>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    let mut out = Vec::new();
    for f in files {
        let parsed = ingest_responses(&read(&f)?).map_err(|source| HarnessError::Ingest {
            path: f.clone(),
            source,
        })?;
        out.extend(parsed);
    }
    Ok(out)
}

fn bundles(forms_dir: &Path) -> Result<Vec<AnnotationBundle>> {
    Ok(load_forms(forms_dir)?.into_values().collect())
}

/// Semantic-equivalence judge backed by the duplicate-removal prompt.
pub struct LlmOracle {
    pipeline: Pipeline,
    transcript: Mutex<Transcript>,
}

impl LlmOracle {
    pub fn new(pipeline: Pipeline) -> Self {
        LlmOracle {
            pipeline,
            transcript: Mutex::new(Transcript::new()),
        }
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().expect("transcript lock").clone()
    }
}

impl SemanticOracle for LlmOracle {
    fn equivalent(&self, a: &Triplet, b: &Triplet) -> std::result::Result<bool, EvalError> {
        let mut run = SentenceRun::default();
        let verdict = self.pipeline.remove_duplicate(&mut run, a, std::slice::from_ref(b));
        let mut log = self.transcript.lock().expect("transcript lock");
        for e in run.transcript.entries() {
            log.push(e.clone());
        }
        verdict.map_err(|e| EvalError::Oracle(e.to_string()))
    }
}

/// Writes `report.json` and `report.txt` into `out`.
pub fn run_eval(
    forms_dir: &Path,
    responses: &[PathBuf],
    oracle: &dyn SemanticOracle,
    out: &Path,
) -> Result<EvalReport> {
    let report = evaluate(&bundles(forms_dir)?, load_responses(responses)?, oracle)?;
    write(&out.join("report.json"), report.to_json())?;
    write(&out.join("report.txt"), report.to_table())?;
    Ok(report)
}

/// Scorer from a JSON object mapping hypothesis text to
/// `{entailment, neutral, contradiction}`.
pub fn stub_scorer_from_file(path: &Path) -> Result<StubScorer> {
    let replies: BTreeMap<String, NliReply> = read_json(path)?;
    Ok(StubScorer { replies })
}

pub fn http_scorer(endpoint: &str) -> Result<HttpNliScorer> {
    HttpNliScorer::new(endpoint, Duration::from_secs(60))
}

/// Scores every real section-a triplet and writes `probe_items.json`,
/// `probe_report.json` and `probe_report.txt`.
pub fn run_nli(
    forms_dir: &Path,
    responses: &[PathBuf],
    scorer: &dyn NliScorer,
    config: &VerbalizerConfig,
    concurrency: usize,
    out: &Path,
) -> Result<ProbeReport> {
    let retained = filter_attention_checks(load_responses(responses)?);
    let inputs: Vec<_> = bundles(forms_dir)?
        .iter()
        .flat_map(|b| inputs_from_bundle(b, &retained))
        .collect();
    let items: Vec<ProbeItem> = run_probe(&inputs, scorer, config, concurrency)?;
    let report = ProbeReport::new(&items);
    write_json(&out.join("probe_items.json"), &items)?;
    write_json(&out.join("probe_report.json"), &report)?;
    write(&out.join("probe_report.txt"), report.to_table())?;
    Ok(report)
}

pub fn load_verbalizer_config(path: Option<&Path>) -> Result<VerbalizerConfig> {
    match path {
        Some(p) => Ok(VerbalizerConfig::from_toml(&read(p)?)?),
        None => Ok(VerbalizerConfig::default()),
    }
}

/// Verbalizes one triplet per line. Blank lines are skipped; unparseable
/// lines produce an error entry with their 1-based line number.
pub fn verbalize_lines(text: &str, config: &VerbalizerConfig) -> Vec<std::result::Result<String, String>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_triplet(l.trim())
                .map(|t| verbalize(&t, config))
                .map_err(|e| format!("line {}: {e}", i + 1))
        })
        .collect()
}
