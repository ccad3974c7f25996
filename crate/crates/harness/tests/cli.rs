mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::sync::Arc;

use iie_core::annotation::{accept_submission, AnnotationBundle};
use iie_core::eval::{EvalReport, SemanticOracle};
use iie_core::gateway::{Gateway, GatewayConfig, ReplayBackend, ReplayEntry, ReplayFile, TemplateId};
use iie_core::nli::ProbeReport;
use iie_core::pipeline::{Pipeline, PipelineConfig};
use iie_core::triplet::parse_triplet;
use iie_core::verbalizer::{verbalize, VerbalizerConfig};
use iie_harness::commands::{LlmOracle, RunManifest};
use serde_json::json;

use common::{answer_all, JESSE, JESSE_REPLAY};

fn iie(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iie"))
        .current_dir(dir)
        .env_remove("IIE_API_KEY")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let manifest = json!({"id": "jesse", "sentence": JESSE, "source": "copa"});
    std::fs::write(dir.path().join("input.jsonl"), format!("{manifest}\n")).unwrap();
    std::fs::write(dir.path().join("replay.json"), JESSE_REPLAY).unwrap();
    dir
}

fn run_jesse(dir: &Path, replay: &str, out: &str) {
    ok(&iie(
        dir,
        &[
            "run",
            "input.jsonl",
            "--mock",
            replay,
            "--batch-size",
            "28",
            "--out",
            out,
        ],
    ));
}

#[test]
fn full_workflow_with_mock_backends() {
    let tmp = setup();
    let d = tmp.path();

    run_jesse(d, "replay.json", "run1");
    for f in [
        "run.json",
        "replay.json",
        "jesse.graph.json",
        "jesse.graph.dot",
        "jesse.run.json",
        "jesse.transcript.json",
    ] {
        assert!(d.join("run1").join(f).exists(), "{f} missing");
    }
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(d.join("run1/run.json")).unwrap()).unwrap();
    assert_eq!(manifest.sentences.len(), 1);
    assert!(manifest.sentences[0].ok);
    assert_eq!(manifest.pipeline.pair_batch_size, 28);

    // the merged transcript replays to the same graph
    run_jesse(d, "run1/replay.json", "run2");
    let g1 = std::fs::read(d.join("run1/jesse.graph.json")).unwrap();
    let g2 = std::fs::read(d.join("run2/jesse.graph.json")).unwrap();
    assert_eq!(g1, g2);

    ok(&iie(
        d,
        &["forms", "run1", "--allow-short", "--seed", "3", "--out", "forms"],
    ));
    ok(&iie(
        d,
        &["forms", "run1", "--allow-short", "--seed", "3", "--out", "forms2"],
    ));
    let b1 = std::fs::read(d.join("forms/form-01.json")).unwrap();
    assert_eq!(b1, std::fs::read(d.join("forms2/form-01.json")).unwrap());
    let bundle: AnnotationBundle = serde_json::from_slice(&b1).unwrap();
    assert_eq!(bundle.sentences[0].dataset.as_deref(), Some("copa"));
    assert_eq!(bundle.attention_items.len(), 5);

    let short = iie(d, &["forms", "run1", "--out", "forms3"]);
    assert!(!short.status.success());
    assert!(String::from_utf8_lossy(&short.stderr).contains("sentences"));

    let response = accept_submission(&bundle, answer_all(&bundle.public_view()), "r1", "a1").unwrap();
    std::fs::write(
        d.join("responses.jsonl"),
        format!("{}\n", serde_json::to_string(&response).unwrap()),
    )
    .unwrap();

    let out = iie(
        d,
        &[
            "eval",
            "--forms",
            "forms",
            "--responses",
            "responses.jsonl",
            "--out",
            "ev",
        ],
    );
    ok(&out);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report.retained_responses, 1);
    assert_eq!(report.groups[0].dataset, "copa");
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        std::fs::read_to_string(d.join("ev/report.txt")).unwrap()
    );

    let cfg = VerbalizerConfig::default();
    let table: BTreeMap<String, serde_json::Value> = bundle
        .section_a()
        .map(|i| {
            (
                verbalize(&i.triplet, &cfg),
                json!({"entailment": 0.5, "neutral": 0.25, "contradiction": 0.25}),
            )
        })
        .collect();
    std::fs::write(d.join("stub.json"), serde_json::to_string(&table).unwrap()).unwrap();
    let out = iie(
        d,
        &[
            "probe-nli",
            "--forms",
            "forms",
            "--responses",
            "responses.jsonl",
            "--mock",
            "stub.json",
            "--out",
            "nli",
        ],
    );
    ok(&out);
    let probe: ProbeReport =
        serde_json::from_str(&std::fs::read_to_string(d.join("nli/probe_report.json")).unwrap()).unwrap();
    let real = bundle.section_a().filter(|i| !bundle.is_attention(&i.id)).count();
    let n: usize = probe.check2_by_pipeline_label.iter().map(|g| g.n).sum();
    assert_eq!(n, real);
    assert!(probe.check2_by_pipeline_label.iter().all(|g| g.entail_rate == 1.0));
}

#[test]
fn failed_run_keeps_partial_transcript() {
    let tmp = setup();
    let d = tmp.path();
    let empty = ReplayFile::from_entries(vec![ReplayEntry::reply(
        Some(JESSE.into()),
        TemplateId::EntityExtraction,
        "Entities: Jesse <person>",
    )]);
    std::fs::write(d.join("short.json"), empty.to_json()).unwrap();
    let out = iie(d, &["run", "input.jsonl", "--mock", "short.json", "--out", "r"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("1 of 1 sentence runs failed"));
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(d.join("r/run.json")).unwrap()).unwrap();
    assert!(!manifest.sentences[0].ok);
    assert!(manifest.sentences[0]
        .error
        .as_deref()
        .unwrap()
        .contains("no scripted reply left"));
    let partial = ReplayFile::from_json(&std::fs::read_to_string(d.join("r/jesse.transcript.json")).unwrap()).unwrap();
    assert_eq!(partial.entries.len(), 2);
    assert!(!d.join("r/jesse.graph.json").exists());
}

#[test]
fn run_needs_a_backend() {
    let tmp = setup();
    let out = iie(tmp.path(), &["run", "input.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--endpoint or --mock"));
}

#[test]
fn verbalize_reads_stdin() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |input: &str| {
        let mut child = Command::new(env!("CARGO_BIN_EXE_iie"))
            .current_dir(tmp.path())
            .arg("verbalize")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
        child.wait_with_output().unwrap()
    };
    let out = run("(teammates, want, (teammates, communicate, <none>))\n\n(phone, hasAttribute, valuable)\n");
    ok(&out);
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "Teammates want to communicate\nPhone has valuable\n"
    );

    let out = run("(a, b)\n(husband, questions, (wife, loves, husband))\n");
    assert!(!out.status.success());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "Husband questions that wife loves husband\n"
    );
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("line 1:"));

    std::fs::write(
        tmp.path().join("v.toml"),
        "[same_subject_connectors]\nstop = \"when\"\n",
    )
    .unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_iie"))
        .current_dir(tmp.path())
        .args(["verbalize", "--config", "v.toml"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"(kids, stop, (kids, play, <none>))\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), "Kids stop when play\n");
}

#[test]
fn llm_judge_uses_duplicate_prompt() {
    let replay = ReplayFile::from_entries(vec![
        ReplayEntry::reply(None, TemplateId::DuplicateRemoval, "yes"),
        ReplayEntry::reply(None, TemplateId::DuplicateRemoval, "no"),
    ]);
    let gw = Gateway::new(Arc::new(ReplayBackend::new(replay)), GatewayConfig::default());
    let judge = LlmOracle::new(Pipeline::new(gw, PipelineConfig::default()));
    let a = parse_triplet("(Jesse, walks, dog)").unwrap();
    let b = parse_triplet("(Jesse, takesFor, (dog, walks, <none>))").unwrap();
    assert!(judge.equivalent(&a, &b).unwrap());
    assert!(!judge.equivalent(&a, &b).unwrap());
    assert!(judge.equivalent(&a, &b).is_err());
    let t = judge.transcript();
    assert_eq!(t.len(), 3);
    assert!(t.entries()[0]
        .request
        .rendered_prompt
        .contains("(Jesse, takesFor, (dog, walks, <none>))"));
}

struct KillOnDrop(std::process::Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_smoke() {
    let tmp = setup();
    let d = tmp.path();
    run_jesse(d, "replay.json", "run1");
    ok(&iie(d, &["forms", "run1", "--allow-short", "--out", "forms"]));
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let _server = KillOnDrop(
        Command::new(env!("CARGO_BIN_EXE_iie"))
            .current_dir(d)
            .args(["serve", "--forms", "forms", "--responses", "store", "--addr", &addr])
            .env("IIE_OPERATOR_TOKEN", "tok")
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let client = reqwest::blocking::Client::new();
    let base = format!("http://{addr}");
    let mut form = None;
    for _ in 0..100 {
        if let Ok(r) = client.get(format!("{base}/api/forms/form-01")).send() {
            form = Some(r);
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    let public: AnnotationBundle = form.expect("server came up").json().unwrap();
    let r = client
        .post(format!("{base}/api/forms/form-01/responses"))
        .json(&answer_all(&public))
        .send()
        .unwrap();
    assert_eq!(r.status().as_u16(), 201);
    let export = client
        .get(format!("{base}/api/responses?form=form-01"))
        .bearer_auth("tok")
        .send()
        .unwrap()
        .text()
        .unwrap();
    assert_eq!(iie_core::eval::ingest_responses(&export).unwrap().len(), 1);
    assert!(d.join("store/form-01.jsonl").exists());
}
