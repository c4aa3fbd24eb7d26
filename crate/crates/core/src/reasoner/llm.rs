//! Optional chat-completion adapter for orientation decisions.
//!
//! The model is asked for a `[±1, ...]` vector. Anything other than a clean,
//! correctly sized answer falls back to the rule-based reasoner, and the cause
//! is reported alongside the assignment.

use std::fmt;
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{decide_lambdas_or_static, DrivingConditionSummary, LambdaAssignment, ReasonerConfig};
use crate::corridor::Orientation;

pub const PROMPT_TEMPLATE: &str = include_str!("../../assets/lambda_prompt_v1.txt");
pub const PROMPT_VERSION: &str = "lambda_prompt_v1";

/// Connection settings. The API key itself is never stored; only the name of
/// the environment variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub timeout_s: f64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: None,
            timeout_s: 2.0,
        }
    }
}

/// Why the model's answer was not used.
#[derive(Debug, Clone, PartialEq)]
pub enum FallbackCause {
    Timeout,
    Transport(String),
    Status(u16),
    Parse(String),
    LengthMismatch { expected: usize, got: usize },
    InvalidEntry(String),
}

impl fmt::Display for FallbackCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FallbackCause::Timeout => write!(f, "timeout"),
            FallbackCause::Transport(e) => write!(f, "transport error: {e}"),
            FallbackCause::Status(s) => write!(f, "http status {s}"),
            FallbackCause::Parse(e) => write!(f, "parse error: {e}"),
            FallbackCause::LengthMismatch { expected, got } => {
                write!(f, "length mismatch (expected {expected}, got {got})")
            }
            FallbackCause::InvalidEntry(e) => write!(f, "invalid entry {e:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmOutcome {
    pub assignment: LambdaAssignment,
    /// `None` when the model's answer was used.
    pub fallback: Option<FallbackCause>,
}

pub fn render_prompt(summary: &DrivingConditionSummary, horizon_s: f64) -> String {
    let road = &summary.road;
    let e = &summary.ego;
    let ego = format!("x={:.2} m, y={:.2} m, vx={:.2} m/s, vy={:.2} m/s", e.x, e.y, e.vx, e.vy);
    let obstacles: Vec<String> = summary
        .obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| {
            format!(
                "  {}. x={:.2} m, y={:.2} m, vx={:.2} m/s, vy={:.2} m/s, length={:.2} m, width={:.2} m",
                i + 1,
                o.x,
                o.y,
                o.vx,
                o.vy,
                o.length,
                o.width
            )
        })
        .collect();
    let speed_limit = summary
        .speed_limit
        .map(|v| format!("{v:.2} m/s"))
        .unwrap_or_else(|| "none".into());
    PROMPT_TEMPLATE
        .replace("{horizon_s}", &format!("{horizon_s:.1}"))
        .replace("{n_lanes}", &road.n_lanes.to_string())
        .replace("{lane_width}", &format!("{:.2}", road.lane_width))
        .replace("{road_width}", &format!("{:.2}", road.width()))
        .replace("{speed_limit}", &speed_limit)
        .replace("{desired_speed}", &format!("{:.2}", summary.desired_speed))
        .replace("{ego}", &ego)
        .replace("{n}", &summary.obstacles.len().to_string())
        .replace("{obstacles}", &obstacles.join("\n"))
}

/// Extracts the last bracketed list from `text` and validates it.
pub fn parse_assignment(text: &str, n: usize) -> Result<LambdaAssignment, FallbackCause> {
    let close = text
        .rfind(']')
        .ok_or_else(|| FallbackCause::Parse("no closing bracket".into()))?;
    let open = text[..close]
        .rfind('[')
        .ok_or_else(|| FallbackCause::Parse("no opening bracket".into()))?;
    let inner = text[open + 1..close].trim();
    let entries: Vec<&str> = if inner.is_empty() {
        Vec::new()
    } else {
        inner.split(',').map(str::trim).collect()
    };
    if entries.len() != n {
        return Err(FallbackCause::LengthMismatch {
            expected: n,
            got: entries.len(),
        });
    }
    entries
        .into_iter()
        .map(|tok| match tok {
            "1" | "+1" => Ok(Orientation::PassBelow),
            "-1" => Ok(Orientation::PassAbove),
            other => Err(FallbackCause::InvalidEntry(other.to_string())),
        })
        .collect()
}

fn request_body(cfg: &LlmConfig, prompt: &str) -> Value {
    json!({
        "model": cfg.model,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": "You decide corridor orientations for an autonomous vehicle planner."},
            {"role": "user", "content": prompt},
        ],
    })
}

/// Sends one request and returns the parsed assignment, without fallback.
pub fn request_assignment(
    summary: &DrivingConditionSummary,
    cfg: &LlmConfig,
    horizon_s: f64,
) -> Result<LambdaAssignment, FallbackCause> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s.max(1e-3))))
        .build()
        .into();
    let mut req = agent.post(&cfg.endpoint);
    if let Some(key) = cfg.api_key_env.as_deref().and_then(|name| std::env::var(name).ok()) {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let body = request_body(cfg, &render_prompt(summary, horizon_s));
    let mut resp = req.send_json(&body).map_err(map_transport)?;
    let v: Value = resp.body_mut().read_json().map_err(|e| match e {
        ureq::Error::Timeout(_) => FallbackCause::Timeout,
        other => FallbackCause::Parse(other.to_string()),
    })?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| FallbackCause::Parse("response has no message content".into()))?;
    parse_assignment(content, summary.obstacles.len())
}

fn map_transport(e: ureq::Error) -> FallbackCause {
    match e {
        ureq::Error::Timeout(_) => FallbackCause::Timeout,
        ureq::Error::StatusCode(s) => FallbackCause::Status(s),
        ureq::Error::Io(ref io) if io.kind() == std::io::ErrorKind::TimedOut => FallbackCause::Timeout,
        other => FallbackCause::Transport(other.to_string()),
    }
}

/// Blocking decision: one request, rule-based fallback on any failure.
pub fn llm_decide(
    summary: &DrivingConditionSummary,
    cfg: &LlmConfig,
    reasoner: &ReasonerConfig,
) -> LlmOutcome {
    let horizon_s = reasoner.horizon as f64 * reasoner.limits.dt;
    match request_assignment(summary, cfg, horizon_s) {
        Ok(assignment) => LlmOutcome {
            assignment,
            fallback: None,
        },
        Err(cause) => {
            log::warn!("orientation request fell back to rules: {cause}");
            LlmOutcome {
                assignment: decide_lambdas_or_static(summary, reasoner).0,
                fallback: Some(cause),
            }
        }
    }
}

/// Where an assignment handed to the planner came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentSource {
    Llm,
    Rules,
}

/// Keeps model calls off the planning loop. Each call runs on a worker
/// thread; while one is in flight the latest model answer is reused, or the
/// rules when there is none yet.
#[derive(Debug)]
pub struct AsyncLlm {
    cfg: LlmConfig,
    reasoner: ReasonerConfig,
    pending: Option<Receiver<Result<LambdaAssignment, FallbackCause>>>,
    last: Option<LambdaAssignment>,
    failures: Vec<FallbackCause>,
}

impl AsyncLlm {
    pub fn new(cfg: LlmConfig, reasoner: ReasonerConfig) -> Self {
        Self {
            cfg,
            reasoner,
            pending: None,
            last: None,
            failures: Vec::new(),
        }
    }

    pub fn failures(&self) -> &[FallbackCause] {
        &self.failures
    }

    pub fn is_pending(&self) -> bool {
        self.pending.is_some()
    }

    fn poll(&mut self) {
        let Some(rx) = &self.pending else { return };
        match rx.try_recv() {
            Ok(Ok(a)) => {
                self.last = Some(a);
                self.pending = None;
            }
            Ok(Err(cause)) => {
                log::warn!("orientation request failed: {cause}");
                self.failures.push(cause);
                self.pending = None;
            }
            Err(TryRecvError::Empty) => {}
            Err(TryRecvError::Disconnected) => {
                self.failures.push(FallbackCause::Transport("worker exited".into()));
                self.pending = None;
            }
        }
    }

    fn spawn(&mut self, summary: &DrivingConditionSummary) {
        let (tx, rx) = mpsc::channel();
        let cfg = self.cfg.clone();
        let summary = summary.clone();
        let horizon_s = self.reasoner.horizon as f64 * self.reasoner.limits.dt;
        thread::spawn(move || {
            let _ = tx.send(request_assignment(&summary, &cfg, horizon_s));
        });
        self.pending = Some(rx);
    }

    /// Assignment for this cycle. Never blocks on the network.
    pub fn decide(&mut self, summary: &DrivingConditionSummary) -> (LambdaAssignment, AssignmentSource) {
        self.poll();
        if self.pending.is_none() {
            self.spawn(summary);
        }
        match &self.last {
            Some(a) if a.len() == summary.obstacles.len() => (a.clone(), AssignmentSource::Llm),
            _ => (
                decide_lambdas_or_static(summary, &self.reasoner).0,
                AssignmentSource::Rules,
            ),
        }
    }

    /// Waits up to `timeout` for the in-flight call, for tests and batch tools.
    pub fn wait(&mut self, timeout: Duration) {
        if let Some(rx) = self.pending.take() {
            match rx.recv_timeout(timeout) {
                Ok(Ok(a)) => self.last = Some(a),
                Ok(Err(cause)) => self.failures.push(cause),
                Err(_) => self.pending = Some(rx),
            }
        }
    }
}
