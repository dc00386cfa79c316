//! Client-side contract of the chat front end: what a session sends to
//! `/respond` and the view model it renders from each response. The view is
//! built from the response JSON alone, so a browser client and these types
//! agree on every field.

use crate::pipeline::{RequestUtterance, RespondRequest, WIRE_VERSION};
use crate::text::tokenize;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Context window the client sends with each turn.
pub const CONTEXT_WINDOW: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TurnError {
    #[error("message is empty")]
    EmptyMessage,
    #[error("network error: {0}")]
    Network(String),
    #[error("request rejected: {0}")]
    BadRequest(String),
    #[error("server error: {0}")]
    Server(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    /// Present on agent messages.
    pub view: Option<TraceView>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffKind {
    Kept,
    Added,
    Removed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffToken {
    pub token: String,
    pub kind: DiffKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateCard {
    pub source: String,
    pub text: String,
    pub gleu: Option<f64>,
    pub winner: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceView {
    /// (utterance, detected emotion) per context utterance.
    pub emotions: Vec<(String, String)>,
    pub target: Option<String>,
    pub diff: Vec<DiffToken>,
    pub cards: Vec<CandidateCard>,
    pub selected: Option<String>,
    pub notices: Vec<String>,
    /// Fields the response lacked; the view is degraded when non-empty.
    pub warnings: Vec<String>,
}

fn tokens_of(v: Option<&Value>) -> Option<Vec<String>> {
    v?.as_array()?.iter().map(|t| t.as_str().map(str::to_string)).collect()
}

/// Token diff of `from` into `to` by longest common subsequence.
pub fn token_diff(from: &[String], to: &[String]) -> Vec<DiffToken> {
    let (n, m) = (from.len(), to.len());
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if from[i] == to[j] { lcs[i + 1][j + 1] + 1 } else { lcs[i + 1][j].max(lcs[i][j + 1]) };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    let push = |out: &mut Vec<DiffToken>, token: &String, kind| out.push(DiffToken { token: token.clone(), kind });
    while i < n || j < m {
        if i < n && j < m && from[i] == to[j] {
            push(&mut out, &from[i], DiffKind::Kept);
            i += 1;
            j += 1;
        } else if j < m && (i == n || lcs[i][j + 1] >= lcs[i + 1][j]) {
            push(&mut out, &to[j], DiffKind::Added);
            j += 1;
        } else {
            push(&mut out, &from[i], DiffKind::Removed);
            i += 1;
        }
    }
    out
}

impl TraceView {
    /// Builds the view from a `/respond` body; missing pieces become warnings.
    pub fn from_response(body: &Value) -> Self {
        let mut view = TraceView::default();
        let Some(trace) = body.get("trace") else {
            view.warnings.push("response has no trace".into());
            return view;
        };
        let context: Vec<String> = trace
            .get("context")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|s| s.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        match trace.get("emotion_states").and_then(Value::as_array) {
            Some(states) => {
                if states.len() != context.len() {
                    view.warnings.push(format!("{} emotion states for {} utterances", states.len(), context.len()));
                }
                view.emotions = context
                    .iter()
                    .zip(states)
                    .map(|(u, e)| (u.clone(), e.as_str().unwrap_or("?").to_string()))
                    .collect();
            }
            None => view.warnings.push("missing emotion_states".into()),
        }
        view.target = trace.get("target").and_then(Value::as_str).map(str::to_string);
        if view.target.is_none() {
            view.warnings.push("missing target".into());
        }
        view.selected = trace.get("selected").and_then(Value::as_str).map(str::to_string);
        if view.selected.is_none() {
            view.warnings.push("missing selected".into());
        }
        let response = tokens_of(trace.get("response"))
            .or_else(|| body.get("response").and_then(Value::as_str).map(tokenize));
        match (tokens_of(trace.get("prototype")), response) {
            (Some(p), Some(r)) => view.diff = token_diff(&p, &r),
            _ => view.warnings.push("missing prototype or response".into()),
        }
        for source in ["rewrite", "add"] {
            match trace.get(source) {
                Some(Value::Object(c)) => view.cards.push(CandidateCard {
                    source: source.into(),
                    text: tokens_of(c.get("tokens")).map(|t| t.join(" ")).unwrap_or_default(),
                    gleu: c.get("gleu_vs_prototype").and_then(Value::as_f64),
                    winner: view.selected.as_deref() == Some(source),
                }),
                _ => view.notices.push(format!("{source} candidate unavailable")),
            }
        }
        if let Some(notes) = trace.get("notes").and_then(Value::as_array) {
            view.notices.extend(notes.iter().filter_map(|n| n.as_str().map(str::to_string)));
        }
        view
    }

    pub fn winner(&self) -> Option<&CandidateCard> {
        self.cards.iter().find(|c| c.winner)
    }

    pub fn is_degraded(&self) -> bool {
        !self.warnings.is_empty()
    }
}

/// Ordered transcript of one conversation with the agent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub messages: Vec<Message>,
    pub seed: Option<u64>,
}

impl ChatSession {
    pub fn new(seed: Option<u64>) -> Self {
        Self { messages: Vec::new(), seed }
    }

    /// The request for sending `text` next: the most recent turns, at most
    /// [`CONTEXT_WINDOW`], ending with `text`.
    pub fn request_for(&self, text: &str) -> Result<RespondRequest, TurnError> {
        if text.trim().is_empty() {
            return Err(TurnError::EmptyMessage);
        }
        let mut turns: Vec<RequestUtterance> = self
            .messages
            .iter()
            .map(|m| RequestUtterance {
                speaker: match m.role {
                    Role::User => "user".into(),
                    Role::Agent => "agent".into(),
                },
                text: m.text.clone(),
            })
            .collect();
        turns.push(RequestUtterance { speaker: "user".into(), text: text.into() });
        let start = turns.len().saturating_sub(CONTEXT_WINDOW);
        Ok(RespondRequest { version: Some(WIRE_VERSION), utterances: turns.split_off(start), seed: self.seed, mode: None })
    }

    /// Sends `text` through `transport`. On any error the session is unchanged.
    pub fn send_turn(
        &mut self,
        text: &str,
        transport: impl FnOnce(&RespondRequest) -> Result<Value, TurnError>,
    ) -> Result<&Message, TurnError> {
        let request = self.request_for(text)?;
        let body = transport(&request)?;
        let reply = body
            .get("response")
            .and_then(Value::as_str)
            .ok_or_else(|| TurnError::Server("response body has no `response` text".into()))?
            .to_string();
        let view = TraceView::from_response(&body);
        self.messages.push(Message { role: Role::User, text: text.into(), view: None });
        self.messages.push(Message { role: Role::Agent, text: reply, view: Some(view) });
        Ok(self.messages.last().expect("just pushed"))
    }
}
