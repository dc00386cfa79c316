use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use emodial::config::PipelineConfig;
use emodial::lm::{LanguageModel, LmError, TransformerLm};
use emodial::pipeline::{Agent, AgentParts, RespondResponse};
use emodial::text::{TokenId, Vocab};
use emodial::toy::{train_toy_artifacts, ToyScale};
use emodial::view::{ChatSession, TraceView, TurnError, CONTEXT_WINDOW};
use emodial_cli::server::{parse_request, router};
use http_body_util::BodyExt;
use serde_json::Value;
use std::sync::{Arc, OnceLock};
use tower::ServiceExt;

fn agent() -> Arc<Agent> {
    static AGENT: OnceLock<(tempfile::TempDir, Arc<Agent>)> = OnceLock::new();
    AGENT
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let config = train_toy_artifacts(ToyScale::Quick).unwrap().save(dir.path()).unwrap();
            let agent = Agent::load(config).unwrap();
            (dir, Arc::new(agent))
        })
        .1
        .clone()
}

async fn call(app: Router, method: &str, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn health_reports_versions() {
    let (status, body) = call(router(agent()), "GET", "/health", "").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    let versions = body["versions"].as_array().unwrap();
    let compat = versions[0]["compat"].as_str().unwrap();
    assert!(versions.len() >= 7);
    assert!(versions.iter().all(|v| v["compat"] == compat && v["sha256"].as_str().is_some_and(|s| s.len() == 16)));
}

#[tokio::test]
async fn respond_with_one_utterance_returns_a_complete_trace() {
    let body = r#"{"v":1,"utterances":[{"speaker":"user","text":"the weather is terrible ."}],"seed":5}"#;
    let (status, value) = call(router(agent()), "POST", "/respond", body).await;
    assert_eq!(status, StatusCode::OK, "{value}");
    let r: RespondResponse = serde_json::from_value(value).unwrap();
    assert_eq!(r.trace.emotion_states.len(), 1);
    assert!(r.trace.is_consistent());
    assert!(r.trace.rewrite.is_some() && r.trace.add.is_some());
}

#[tokio::test]
async fn invalid_requests_are_400_with_a_field() {
    let cases = [
        (r#"{"utterances":[]}"#, "utterances"),
        (r#"{"utterances":[{"speaker":"a","text":"x"}],"seed":"soon"}"#, "seed"),
        (r#"{"utterances":[{"speaker":"a"}]}"#, "utterances[0]"),
        (r#"{"utterances":[{"speaker":"a","text":"!"},{"speaker":"a","text":"b"}]}"#, "utterances[1].speaker"),
        (
            r#"{"utterances":[{"speaker":"a","text":"1"},{"speaker":"b","text":"2"},{"speaker":"a","text":"3"},{"speaker":"b","text":"4"},{"speaker":"a","text":"5"}]}"#,
            "utterances",
        ),
    ];
    for (body, field) in cases {
        let (status, value) = call(router(agent()), "POST", "/respond", body).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(value["field"], field, "{body}: {value}");
        assert!(value["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    let (status, _) = call(router(agent()), "POST", "/respond", "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn parse_errors_name_nested_fields() {
    let (field, _) = parse_request(br#"{"utterances":[{"speaker":"a","text":7}]}"#).unwrap_err();
    assert_eq!(field, "utterances[0].text");
}

#[tokio::test]
async fn concurrent_requests_are_isolated() {
    let app = router(agent());
    let body = r#"{"utterances":[{"speaker":"u","text":"the party was lovely ."}],"seed":8}"#;
    let calls = (0..6).map(|_| call(app.clone(), "POST", "/respond", body));
    let results = futures_join(calls).await;
    assert!(results.iter().all(|(s, v)| *s == StatusCode::OK && *v == results[0].1));
}

async fn futures_join<F: std::future::Future<Output = (StatusCode, Value)> + Send + 'static>(
    fs: impl Iterator<Item = F>,
) -> Vec<(StatusCode, Value)> {
    let handles: Vec<_> = fs.map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

/// A backend that always fails, to exercise stage errors.
struct BrokenLm(Vocab);

impl LanguageModel for BrokenLm {
    fn vocab(&self) -> &Vocab {
        &self.0
    }

    fn next_token_logits(&self, _: &[TokenId]) -> Result<Vec<f64>, LmError> {
        Err(LmError::Backend("backend offline".into()))
    }
}

#[tokio::test]
async fn stage_failure_is_500_naming_the_stage() {
    let agent = tokio::task::spawn_blocking(agent).await.unwrap();
    let p = agent.parts();
    let config: PipelineConfig = agent.config().clone();
    let parts = AgentParts {
        vocab: p.vocab.clone(),
        detector: p.detector.clone(),
        prototype_lm: Box::new(BrokenLm(p.vocab.clone())),
        add_lm: Box::new(TransformerLm::new(config.lm.clone(), &p.vocab, 0).unwrap()),
        mmi: None,
        rewriter: p.rewriter.clone(),
        classifier: p.classifier.clone(),
    };
    let broken = Arc::new(Agent::from_parts(config, parts).unwrap());
    let (status, value) = call(router(broken), "POST", "/respond", r#"{"utterances":[{"speaker":"u","text":"hi"}]}"#).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(value["stage"], "prototype");
}

/// The chat client contract against a live router: a scripted conversation
/// yields one trace view per turn that mirrors the server trace, and no
/// request carries more than the context window.
#[test]
fn scripted_conversation_matches_server_traces() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let app = router(agent());
    let mut session = ChatSession::new(Some(3));
    let script = ["the food was awful .", "what about the music ?", "the show is wonderful .", "my room was poor today ."];
    let mut sent = Vec::new();
    let mut server_bodies = Vec::new();
    for text in script {
        let reply = session.send_turn(text, |req| {
            sent.push(req.utterances.len());
            let body = serde_json::to_string(req).unwrap();
            let (status, value) = rt.block_on(call(app.clone(), "POST", "/respond", &body));
            match status {
                StatusCode::OK => {
                    server_bodies.push(value.clone());
                    Ok(value)
                }
                StatusCode::BAD_REQUEST => Err(TurnError::BadRequest(value.to_string())),
                _ => Err(TurnError::Server(value.to_string())),
            }
        });
        reply.unwrap();
    }
    assert_eq!(sent, vec![1, 3, CONTEXT_WINDOW, CONTEXT_WINDOW]);
    let views: Vec<&TraceView> = session.messages.iter().filter_map(|m| m.view.as_ref()).collect();
    assert_eq!(views.len(), 4);
    for (view, body) in views.iter().zip(&server_bodies) {
        assert!(!view.is_degraded(), "{:?}", view.warnings);
        let trace = &body["trace"];
        assert_eq!(view.winner().unwrap().source, trace["selected"].as_str().unwrap());
        for card in &view.cards {
            assert_eq!(card.gleu, trace[&card.source]["gleu_vs_prototype"].as_f64());
        }
        assert_eq!(view.emotions.len(), trace["context"].as_array().unwrap().len());
    }
}
