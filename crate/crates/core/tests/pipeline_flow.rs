use std::collections::HashSet;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use facecot_core::client::{template_annotation, AnnotatorClient, ClientFailure, LiveClient, ScriptedClient};
use facecot_core::dataset::{emit_stage_manifests, synthetic_pool};
use facecot_core::pipeline::{
    annotate_batch, collect_hard_cases, submit_correction, summarize, AnnotationAttempt, AttemptLog, AttemptStatus,
    PipelineConfig, RejectReason,
};
use facecot_core::prompt::{assemble_prompt, PromptConfig};
use facecot_core::schema::{SectionKind, Verdict};
use facecot_core::taxonomy::{SampleRecord, Subtype};
use serde_json::{json, Value};

fn fast_config() -> PipelineConfig {
    PipelineConfig {
        backoff_base: Duration::from_millis(1),
        backoff_max: Duration::from_millis(2),
        max_in_flight: 16,
        ..PipelineConfig::default()
    }
}

fn mixed_pool(n: usize) -> Vec<SampleRecord> {
    let per = n / 4;
    synthetic_pool(
        "m",
        &[(Subtype::Living, per), (Subtype::Phone, per), (Subtype::A4, per), (Subtype::Mask3D, n - 3 * per)],
    )
}

#[tokio::test]
async fn planted_wrong_subset_is_exactly_the_retry_set() {
    let samples = mixed_pool(200);
    let wrong: HashSet<String> = samples.iter().step_by(20).map(|s| s.id.clone()).collect();
    assert_eq!(wrong.len(), 10);
    let planted = wrong.clone();
    let client = ScriptedClient::new(move |b, _| {
        let v = if planted.contains(&b.sample_id) { b.label.flipped() } else { b.label };
        Ok(template_annotation(&b.sample_id, v))
    });
    let cfg = PipelineConfig {
        max_rounds: 1,
        ..fast_config()
    };
    let mut log = AttemptLog::in_memory();
    let attempts = annotate_batch(&samples, &client, &cfg, &mut log).await.unwrap();
    let hard: HashSet<String> = attempts
        .iter()
        .filter(|a| a.status == AttemptStatus::HardCase)
        .map(|a| a.sample_id.clone())
        .collect();
    assert_eq!(hard, wrong);

    let cfg = fast_config();
    let client2 = ScriptedClient::new({
        let planted = wrong.clone();
        move |b, _| {
            let v = if planted.contains(&b.sample_id) { b.label.flipped() } else { b.label };
            Ok(template_annotation(&b.sample_id, v))
        }
    });
    let mut log = AttemptLog::in_memory();
    let attempts = annotate_batch(&samples, &client2, &cfg, &mut log).await.unwrap();
    let retried: HashSet<String> = attempts
        .iter()
        .filter(|a| a.round == 1 && a.status == AttemptStatus::RetryScheduled)
        .map(|a| a.sample_id.clone())
        .collect();
    assert_eq!(retried, wrong);
    let summary = summarize(&attempts);
    assert_eq!((summary.accepted, summary.hard), (190, 10));
}

#[tokio::test]
async fn transient_errors_are_retried_and_counted() {
    let samples = synthetic_pool("t", &[(Subtype::Pad, 3)]);
    let flaky = samples[1].id.clone();
    let client = ScriptedClient::new(move |b, call| {
        if b.sample_id == flaky && call <= 2 {
            Err(ClientFailure::Transient("503".into()))
        } else {
            Ok(template_annotation(&b.sample_id, b.label))
        }
    });
    let mut log = AttemptLog::in_memory();
    let attempts = annotate_batch(&samples, &client, &fast_config(), &mut log).await.unwrap();
    assert_eq!(attempts.len(), 3);
    assert!(attempts.iter().all(|a| a.status == AttemptStatus::Accepted));
    assert_eq!(attempts[1].transient_retries, 2);
    assert_eq!(attempts[0].transient_retries, 0);
    assert_eq!(client.calls(&samples[1].id), 3);
}

#[tokio::test]
async fn fatal_errors_are_terminal() {
    let samples = synthetic_pool("f", &[(Subtype::Poster, 2)]);
    let client = ScriptedClient::new(|_, _| Err(ClientFailure::Fatal("401".into())));
    let mut log = AttemptLog::in_memory();
    let attempts = annotate_batch(&samples, &client, &fast_config(), &mut log).await.unwrap();
    assert_eq!(attempts.len(), 2);
    assert!(attempts.iter().all(|a| a.status == AttemptStatus::ClientError && a.round == 1));
    assert_eq!(summarize(&attempts).client_error, 2);
}

#[tokio::test]
async fn file_log_resumes_without_new_calls() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("attempts.jsonl");
    let samples = mixed_pool(40);
    let wrong = samples[3].id.clone();
    let script = move |b: &facecot_core::prompt::PromptBundle, _| {
        let v = if b.sample_id == wrong { b.label.flipped() } else { b.label };
        Ok(template_annotation(&b.sample_id, v))
    };

    let first = ScriptedClient::new(script.clone());
    let mut log = AttemptLog::open(&path).unwrap();
    let a1 = annotate_batch(&samples, &first, &fast_config(), &mut log).await.unwrap();
    assert_eq!(first.total_calls(), 41);

    let second = ScriptedClient::new(script);
    let mut log = AttemptLog::open(&path).unwrap();
    let a2 = annotate_batch(&samples, &second, &fast_config(), &mut log).await.unwrap();
    assert_eq!(second.total_calls(), 0);
    assert_eq!(a1, a2);
    assert_eq!(log.entries().len(), 41);
}

#[tokio::test]
async fn hard_cases_carry_history_and_accept_valid_corrections() {
    let samples = synthetic_pool("h", &[(Subtype::Newspaper, 4)]);
    let stubborn = samples[2].id.clone();
    let client = ScriptedClient::new(move |b, _| {
        let v = if b.sample_id == stubborn { Verdict::No } else { b.label };
        Ok(template_annotation(&b.sample_id, v))
    });
    let mut log = AttemptLog::in_memory();
    let attempts = annotate_batch(&samples, &client, &fast_config(), &mut log).await.unwrap();
    let hard = collect_hard_cases(&samples, &attempts);
    assert_eq!(hard.len(), 1);
    let case = &hard[0];
    assert_eq!(case.attempts.len(), 2);
    assert_eq!(case.attempts[0].raw_output, case.attempts[1].raw_output);

    let good = template_annotation(&case.sample_id, Verdict::Yes);
    let fixed = submit_correction(case, &good, case.label).unwrap();
    assert!(fixed.resolved);
    assert_eq!(fixed.correction.as_ref().unwrap().verdict(), Verdict::Yes);
    let again = submit_correction(&fixed, &good, case.label).unwrap_err();
    assert_eq!(again.reason, RejectReason::AlreadyResolved);

    let wrong = template_annotation(&case.sample_id, Verdict::No);
    assert_eq!(
        submit_correction(case, &wrong, case.label).unwrap_err().reason,
        RejectReason::ConclusionMismatch
    );
    let no_reasoning = good.replace(
        &good[good.find("<Reasoning>").unwrap()..good.find("<Spoofing Description>").unwrap()],
        "",
    );
    let err = submit_correction(case, &no_reasoning, case.label).unwrap_err();
    assert_eq!(err.reason, RejectReason::FormatInvalid);
    assert!(err
        .errors
        .contains(&facecot_core::schema::ParseError::MissingSection { kind: SectionKind::Reasoning }));
}

#[tokio::test]
async fn accepted_attempts_feed_both_stages() {
    let samples = mixed_pool(10);
    let client = ScriptedClient::echo();
    let mut log = AttemptLog::in_memory();
    let attempts = annotate_batch(&samples, &client, &fast_config(), &mut log).await.unwrap();
    let stages = emit_stage_manifests(&attempts, &samples).unwrap();
    assert_eq!(stages.stage1.len(), 10);
    assert_eq!(stages.stage2.len(), 10);
    let ids1: HashSet<_> = stages.stage1.iter().map(|r| &r.sample_id).collect();
    let ids2: HashSet<_> = stages.stage2.iter().map(|r| &r.sample_id).collect();
    assert_eq!(ids1, ids2);
    for r in &stages.stage2 {
        assert_eq!(r.binary_label, u8::from(r.label == Verdict::Yes));
        assert_eq!(r.cot.verdict(), r.label);
    }
}

#[tokio::test]
async fn stage_emission_skips_rejected_attempts() {
    let samples = synthetic_pool("x", &[(Subtype::Living, 2)]);
    let mut rejected = AnnotationAttempt::new(&samples[0].id, 1, "garbage");
    rejected.status = AttemptStatus::HardCase;
    let stages = emit_stage_manifests(&[rejected], &samples).unwrap();
    assert!(stages.stage1.is_empty() && stages.stage2.is_empty());
}

async fn spawn_mock(router: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    format!("http://{addr}/v1")
}

#[tokio::test]
async fn live_client_speaks_chat_completions() {
    let seen: Arc<Mutex<Vec<(String, Value)>>> = Arc::default();
    let store = seen.clone();
    let router = Router::new().route(
        "/v1/chat/completions",
        post(move |headers: axum::http::HeaderMap, Json(body): Json<Value>| {
            let store = store.clone();
            async move {
                let auth = headers["authorization"].to_str().unwrap().to_string();
                store.lock().unwrap().push((auth, body));
                Json(json!({"choices": [{"message": {"role": "assistant", "content": "<Conclusion>Yes</Conclusion>"}}]}))
            }
        }),
    );
    let base = spawn_mock(router).await;
    let client = LiveClient::new(base, "k-123", "test-model");
    let sample = SampleRecord::new("w1", "https://img.example/w1.jpg", Subtype::Phone);
    let bundle = assemble_prompt(&sample, &PromptConfig::default()).unwrap();
    let out = client.complete(&bundle).await.unwrap();
    assert_eq!(out, "<Conclusion>Yes</Conclusion>");

    let (auth, body) = seen.lock().unwrap()[0].clone();
    assert_eq!(auth, "Bearer k-123");
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], bundle.system_prompt.as_str());
    let user = &body["messages"][1]["content"];
    assert_eq!(user[0]["image_url"]["url"], "https://img.example/w1.jpg");
    let text = user[1]["text"].as_str().unwrap();
    assert!(text.contains("Photographing a phone screen constitutes spoofing."));
    assert!(text.ends_with("Standard answer: Yes"));
}

#[tokio::test]
async fn live_client_classifies_http_failures() {
    let router = Router::new()
        .route("/busy/chat/completions", post(|| async { StatusCode::TOO_MANY_REQUESTS }))
        .route("/down/chat/completions", post(|| async { StatusCode::BAD_GATEWAY }))
        .route("/deny/chat/completions", post(|| async { StatusCode::UNAUTHORIZED }))
        .route("/empty/chat/completions", post(|| async { Json(json!({"choices": []})) }));
    let base = spawn_mock(router).await;
    let root = base.trim_end_matches("/v1");
    let bundle = assemble_prompt(
        &SampleRecord::new("e", "https://img.example/e.jpg", Subtype::Living),
        &PromptConfig::default(),
    )
    .unwrap();
    for (path, transient) in [("busy", true), ("down", true), ("deny", false), ("empty", false)] {
        let client = LiveClient::new(format!("{root}/{path}"), "k", "m");
        match client.complete(&bundle).await {
            Err(ClientFailure::Transient(_)) => assert!(transient, "{path}"),
            Err(ClientFailure::Fatal(_)) => assert!(!transient, "{path}"),
            Ok(v) => panic!("{path}: unexpected success {v}"),
        }
    }
}
