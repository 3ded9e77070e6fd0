//! Teacher model access: an HTTP chat-completions client and a deterministic stub.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chart_spec::{parse_spec, ChartSpec};
use crate::cot::{self, CotSample};
use crate::prompts::{self, PromptTemplate};

pub const API_KEY_ENV: &str = "CHARTPOINT_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("request failed after {attempts} attempt(s): {message}")]
    Exhausted { attempts: u32, message: String },
    #[error("request rejected with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("client configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: MessageRole::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub template: PromptTemplate,
    pub chart_id: String,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientMode {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub mode: ClientMode,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub max_concurrency: usize,
    pub timeout_secs: u64,
    pub backoff_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            mode: ClientMode::Stub,
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "teacher".into(),
            temperature: 0.0,
            max_retries: 4,
            max_concurrency: 8,
            timeout_secs: 120,
            backoff_ms: 500,
        }
    }
}

pub trait LlmClient: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, ClientError>;

    /// Ask whether `sample`'s answer is correct for `spec`.
    fn review(&self, sample: &CotSample, spec: &ChartSpec) -> Result<bool, ClientError> {
        let request = ChatRequest {
            template: PromptTemplate::Review,
            chart_id: spec.id.clone(),
            messages: vec![Message::user(prompts::review_prompt(
                spec,
                &sample.question,
                &sample.answer.to_string(),
            ))],
        };
        let reply = self.chat(&request)?;
        let word = reply
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_ascii_lowercase();
        match word.as_str() {
            "yes" => Ok(true),
            "no" => Ok(false),
            _ => Err(ClientError::Response(format!("expected yes or no, got {reply:?}"))),
        }
    }
}

pub fn review_qa(sample: &CotSample, spec: &ChartSpec, client: &dyn LlmClient) -> Result<bool, ClientError> {
    client.review(sample, spec)
}

/// Counting semaphore bounding in-flight requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpClient {
    config: ClientConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    slots: Slots,
}

impl HttpClient {
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        if config.endpoint.trim().is_empty() {
            return Err(ClientError::Config("endpoint is empty".into()));
        }
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let slots = Slots::new(config.max_concurrency);
        Ok(Self { config, agent, api_key, slots })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, (bool, ClientError)> {
        let mut req = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| (true, ClientError::Response(e.to_string())))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (true, ClientError::Response(e.to_string())))?;
        if status == 429 || status >= 500 {
            return Err((true, ClientError::Rejected { status, message: text }));
        }
        if status >= 400 {
            return Err((false, ClientError::Rejected { status, message: text }));
        }
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| (false, ClientError::Response(e.to_string())))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| (false, ClientError::Response("missing choices[0].message.content".into())))
    }
}

impl LlmClient for HttpClient {
    fn chat(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": request.messages,
        });
        let _slot = self.slots.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((false, e)) => return Err(e),
                Err((true, e)) if attempts > self.config.max_retries => {
                    return Err(ClientError::Exhausted { attempts, message: e.to_string() })
                }
                Err((true, e)) => {
                    let wait = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(10));
                    log::warn!(
                        "{} request for {} failed ({e}); retry {attempts} in {wait} ms",
                        request.template.id(),
                        request.chart_id
                    );
                    thread::sleep(Duration::from_millis(wait));
                }
            }
        }
    }
}

/// Deterministic offline teacher.
///
/// CoT replies come from the rule-based generator. A `corrupt_rate` share of
/// charts, chosen by hash, get a defective reply: half are malformed JSON and
/// half carry a wrong answer that the review rejects.
#[derive(Debug, Clone, Default)]
pub struct StubClient {
    pub seed: u64,
    pub corrupt_rate: f64,
    pub fixtures: BTreeMap<String, String>,
}

const BUNDLED_FIXTURE_ID: &str = "c01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    None,
    Malformed,
    WrongAnswer,
}

impl StubClient {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn with_corruption(mut self, rate: f64) -> Self {
        self.corrupt_rate = rate;
        self
    }

    /// Adds the bundled CoT reply for chart `c01`, used when the chart matches it.
    pub fn with_bundled_fixtures(mut self) -> Self {
        self.fixtures.insert(BUNDLED_FIXTURE_ID.into(), prompts::cot_example().to_string());
        self
    }

    pub fn corruption(&self, chart_id: &str) -> Corruption {
        if self.corrupt_rate <= 0.0 {
            return Corruption::None;
        }
        let h = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(b"cot")
            .chain_update(chart_id.as_bytes())
            .finalize();
        let u = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as f64 / u64::MAX as f64;
        if u >= self.corrupt_rate {
            Corruption::None
        } else if h[8] & 1 == 0 {
            Corruption::Malformed
        } else {
            Corruption::WrongAnswer
        }
    }

    fn cot_reply(&self, prompt: &str) -> Result<String, ClientError> {
        let code = prompts::extract_code_block(prompt)
            .ok_or_else(|| ClientError::Response("prompt has no code block".into()))?;
        let spec = parse_spec(code).map_err(|e| ClientError::Response(e.to_string()))?;
        if let Some(fixture) = self.fixtures.get(&spec.id) {
            if let Ok(sample) = cot::validate_cot(fixture) {
                if cot::check_against_spec(&sample, &spec).is_ok() {
                    return Ok(fixture.clone());
                }
            }
        }
        let mut sample = cot::generate_cot_rule_based(&spec, self.seed);
        match self.corruption(&spec.id) {
            Corruption::None => Ok(sample.to_json()),
            Corruption::Malformed => {
                let json = sample.to_json();
                Ok(json[..json.len() / 2].to_string())
            }
            Corruption::WrongAnswer => {
                if let crate::answer::Answer::Number { value, .. } = &mut sample.answer {
                    *value = crate::chart_spec::round1(*value * 1.1 + 1.0);
                }
                Ok(sample.to_json())
            }
        }
    }
}

impl LlmClient for StubClient {
    fn chat(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let prompt = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == MessageRole::User)
            .map(|m| m.content.as_str())
            .ok_or_else(|| ClientError::Response("no user message".into()))?;
        match request.template {
            PromptTemplate::Cot => self.cot_reply(prompt),
            // Reviews go through the structured `review` override.
            PromptTemplate::Review | PromptTemplate::CodeEdit | PromptTemplate::MatchStyle => {
                Err(ClientError::Response(format!("stub does not serve {}", request.template.id())))
            }
        }
    }

    /// Recomputes the answer from the chart data; accepts within 2% relative error.
    fn review(&self, sample: &CotSample, spec: &ChartSpec) -> Result<bool, ClientError> {
        use crate::answer::Answer;
        Ok(match (cot::expected_answer(sample, spec), &sample.answer) {
            (Some(Answer::Number { value: e, .. }), Answer::Number { value: a, .. }) => {
                if e == 0.0 {
                    *a == 0.0
                } else {
                    ((a - e) / e).abs() <= 0.02
                }
            }
            (Some(Answer::Text(e)), Answer::Text(a)) => e.trim().eq_ignore_ascii_case(a.trim()),
            _ => false,
        })
    }
}

pub fn build_client(config: &ClientConfig, seed: u64, corrupt_rate: f64) -> Result<Box<dyn LlmClient>, ClientError> {
    Ok(match config.mode {
        ClientMode::Stub => Box::new(StubClient::new(seed).with_corruption(corrupt_rate).with_bundled_fixtures()),
        ClientMode::Http => Box::new(HttpClient::new(config.clone())?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart_spec::{generate_corpus, ChartType};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn serve(statuses: Vec<u16>) -> (String, thread::JoinHandle<usize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let mut served = 0;
            for status in statuses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let payload = if status == 200 {
                    r#"{"choices":[{"message":{"role":"assistant","content":"yes"}}]}"#
                } else {
                    r#"{"error":"busy"}"#
                };
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                )
                .unwrap();
                served += 1;
            }
            served
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn request() -> ChatRequest {
        ChatRequest { template: PromptTemplate::Review, chart_id: "c01".into(), messages: vec![Message::user("hi")] }
    }

    fn config(endpoint: String, max_retries: u32) -> ClientConfig {
        ClientConfig { mode: ClientMode::Http, endpoint, max_retries, backoff_ms: 5, timeout_secs: 10, ..Default::default() }
    }

    #[test]
    fn retries_rate_limits_then_succeeds() {
        let (endpoint, h) = serve(vec![429, 429, 200]);
        let client = HttpClient::new(config(endpoint, 3)).unwrap();
        assert_eq!(client.chat(&request()).unwrap(), "yes");
        assert_eq!(h.join().unwrap(), 3);
    }

    #[test]
    fn persistent_server_error_exhausts() {
        let (endpoint, h) = serve(vec![500, 500, 500]);
        let client = HttpClient::new(config(endpoint, 2)).unwrap();
        match client.chat(&request()) {
            Err(ClientError::Exhausted { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
        assert_eq!(h.join().unwrap(), 3);
    }

    #[test]
    fn client_error_is_not_retried() {
        let (endpoint, h) = serve(vec![400]);
        let client = HttpClient::new(config(endpoint, 3)).unwrap();
        assert!(matches!(client.chat(&request()), Err(ClientError::Rejected { status: 400, .. })));
        assert_eq!(h.join().unwrap(), 1);
    }

    #[test]
    fn stub_corruption_rate_and_review() {
        let mix = BTreeMap::from([(ChartType::Bar, 0.5), (ChartType::Line, 0.3), (ChartType::Pie, 0.2)]);
        let specs = generate_corpus(3, 2000, &mix).unwrap();
        let stub = StubClient::new(9).with_corruption(0.25);
        let mut bad = 0;
        for spec in &specs {
            let result = cot::generate_cot_llm(spec, &stub);
            match stub.corruption(&spec.id) {
                Corruption::None => assert!(stub.review(&result.unwrap(), spec).unwrap()),
                Corruption::Malformed => {
                    bad += 1;
                    assert!(result.is_err());
                }
                Corruption::WrongAnswer => {
                    bad += 1;
                    assert!(!stub.review(&result.unwrap(), spec).unwrap());
                }
            }
        }
        let rate = bad as f64 / specs.len() as f64;
        assert!((rate - 0.25).abs() < 0.03, "{rate}");
    }

    #[test]
    fn bundled_fixture_served_for_matching_chart() {
        let sample = cot::validate_cot(prompts::cot_example()).unwrap();
        let spec = parse_spec(
            r#"{"id":"c01","chart_type":"bar","title":"Revenue by year","series":[
              {"name":"Domestic","values":[380.0,412.5]},{"name":"Export","values":[120.0,150.0]}],
              "x_labels":["2017","2018"],"canvas":[800,600],"style_seed":2,"legend":true,"value_labels":false}"#,
        )
        .unwrap();
        let stub = StubClient::new(0).with_bundled_fixtures();
        assert_eq!(cot::generate_cot_llm(&spec, &stub).unwrap(), sample);
        assert!(stub.review(&sample, &spec).unwrap());
    }

    #[test]
    fn config_defaults_fill_missing_fields() {
        let c: ClientConfig = serde_json::from_str(r#"{"mode":"http","max_concurrency":2}"#).unwrap();
        assert_eq!(c.max_concurrency, 2);
        assert_eq!(c.max_retries, ClientConfig::default().max_retries);
        assert!(serde_json::from_str::<ClientConfig>(r#"{"api_key":"x"}"#).is_err());
    }
}
