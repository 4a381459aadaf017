//! Chat-completion clients for hosted models.
//!
//! Two wire formats sit behind [`ApiFlavor`]: the OpenAI-style
//! `/chat/completions` shape (also served by most open-weight gateways) and
//! Anthropic's `/v1/messages`. HTTP 429 is retried with exponential backoff;
//! a completion that fails to parse gets one reprompt carrying the parser
//! diagnostic.

use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::ratelimit::{bucket_for, TokenBucket};
use super::{Agent, AgentError, AgentInfo, AgentMessage, AgentReply, PromptBundle, TokenUsage};
use crate::actions::parse_turn;
use crate::domain::Role;
use crate::engine::TurnContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiFlavor {
    #[default]
    Openai,
    Anthropic,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    2048
}
fn default_timeout() -> f64 {
    120.0
}
fn default_backoff() -> f64 {
    1.0
}
fn default_retries() -> u32 {
    3
}
fn default_reprompts() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL, e.g. `https://api.openai.com/v1` or `https://api.anthropic.com`.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api: ApiFlavor,
    /// Name of the environment variable holding the API key. No auth header
    /// is sent when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    /// First 429 backoff; doubles on each retry.
    #[serde(default = "default_backoff")]
    pub backoff_base_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_reprompts")]
    pub reprompts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_minute: Option<f64>,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api: ApiFlavor::default(),
            auth_env: None,
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            timeout_s: default_timeout(),
            backoff_base_s: default_backoff(),
            max_retries: default_retries(),
            reprompts: default_reprompts(),
            requests_per_minute: None,
        }
    }

    fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        match self.api {
            ApiFlavor::Openai => format!("{base}/chat/completions"),
            ApiFlavor::Anthropic => format!("{base}/v1/messages"),
        }
    }

    /// Delay before retry number `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_base_s * 2f64.powi(attempt as i32))
    }
}

fn shared_client() -> &'static reqwest::blocking::Client {
    static CLIENT: OnceLock<reqwest::blocking::Client> = OnceLock::new();
    CLIENT.get_or_init(|| reqwest::blocking::Client::builder().pool_max_idle_per_host(16).build().expect("HTTP client construction"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ChatMessage {
    role: &'static str,
    content: String,
}

pub struct RemoteAgent {
    name: String,
    config: RemoteConfig,
    role: Role,
    prompt: PromptBundle,
    api_key: Option<String>,
    bucket: Option<Arc<TokenBucket>>,
    conversation: Vec<ChatMessage>,
}

struct Completion {
    text: String,
    retries: u32,
    usage: Option<TokenUsage>,
}

impl RemoteAgent {
    pub fn new(name: &str, config: RemoteConfig, role: Role, prompt: PromptBundle) -> Result<Self, AgentError> {
        let api_key = match &config.auth_env {
            None => None,
            Some(var) => Some(std::env::var(var).map_err(|_| AgentError::AuthMissing { var: var.clone() })?),
        };
        if !(config.timeout_s > 0.0 && config.backoff_base_s >= 0.0) {
            return Err(AgentError::InvalidConfig("timeout must be positive and backoff non-negative".into()));
        }
        let bucket = config.requests_per_minute.map(|rpm| bucket_for(&config.endpoint, rpm));
        Ok(RemoteAgent { name: name.to_string(), config, role, prompt, api_key, bucket, conversation: Vec::new() })
    }

    fn request_body(&self) -> Value {
        let msgs: Vec<Value> = self.conversation.iter().map(|m| json!({"role": m.role, "content": m.content})).collect();
        match self.config.api {
            ApiFlavor::Openai => {
                let mut all = vec![json!({"role": "system", "content": self.prompt.system})];
                all.extend(msgs);
                json!({
                    "model": self.config.model,
                    "messages": all,
                    "temperature": self.config.temperature,
                    "max_tokens": self.config.max_tokens,
                })
            }
            ApiFlavor::Anthropic => json!({
                "model": self.config.model,
                "system": self.prompt.system,
                "messages": msgs,
                "temperature": self.config.temperature,
                "max_tokens": self.config.max_tokens,
            }),
        }
    }

    fn complete(&self) -> Result<Completion, AgentError> {
        let body = self.request_body();
        let url = self.config.url();
        let mut retries = 0;
        loop {
            if let Some(b) = &self.bucket {
                b.acquire();
            }
            let mut req = shared_client().post(&url).timeout(Duration::from_secs_f64(self.config.timeout_s)).json(&body);
            if let Some(key) = &self.api_key {
                req = match self.config.api {
                    ApiFlavor::Openai => req.bearer_auth(key),
                    ApiFlavor::Anthropic => req.header("x-api-key", key),
                };
            }
            if self.config.api == ApiFlavor::Anthropic {
                req = req.header("anthropic-version", "2023-06-01");
            }
            let resp = req.send().map_err(|e| if e.is_timeout() { AgentError::Timeout } else { AgentError::Connection(e.to_string()) })?;
            let status = resp.status().as_u16();
            if status == 429 && retries < self.config.max_retries {
                let wait = self.config.backoff(retries);
                log::debug!("{}: HTTP 429, retrying in {:?}", self.name, wait);
                std::thread::sleep(wait);
                retries += 1;
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(AgentError::Transport { status });
            }
            let v: Value =
                resp.json().map_err(|e| if e.is_timeout() { AgentError::Timeout } else { AgentError::BadResponse(e.to_string()) })?;
            let (text, usage) = extract(self.config.api, &v)?;
            return Ok(Completion { text, retries, usage });
        }
    }

    fn user_message(ctx: &TurnContext<'_>) -> String {
        let mut out = String::new();
        if !ctx.observation.text.is_empty() {
            out.push_str(&ctx.observation.text);
            out.push_str("\n\n");
        }
        if !ctx.feedback.is_empty() {
            out.push_str("Results of your previous calls:\n");
            for r in ctx.feedback {
                out.push_str(&format!("- {}: {} ({})\n", r.tool, if r.ok { "ok" } else { "failed" }, r.message));
            }
            out.push('\n');
        }
        out.push_str(&format!("Round {} of {}.", ctx.round, ctx.max_rounds));
        if let Some(p) = ctx.counter_offer() {
            out.push_str(&format!(" The {}'s offer of {} is on the table.", ctx.role.counterpart(), p.display_dollars()));
        }
        out.push_str(" It is your turn.");
        out
    }

    fn turn_inner(&mut self, ctx: &TurnContext<'_>) -> Result<AgentReply, AgentError> {
        self.conversation.push(ChatMessage { role: "user", content: Self::user_message(ctx) });
        let mut messages = Vec::new();
        let mut usage: Option<TokenUsage> = None;
        let mut reprompts_left = self.config.reprompts;
        loop {
            let c = self.complete()?;
            if let Some(u) = c.usage {
                usage.get_or_insert_with(TokenUsage::default).add(u);
            }
            self.conversation.push(ChatMessage { role: "assistant", content: c.text.clone() });
            messages.push(AgentMessage { raw: c.text.clone(), transport_retries: c.retries });
            match parse_turn(&c.text) {
                Err(e) if reprompts_left > 0 => {
                    reprompts_left -= 1;
                    let note = format!(
                        "Your last reply could not be parsed ({}). Reply with a Thought: block followed by a Code: block of tool calls.",
                        e
                    );
                    self.conversation.push(ChatMessage { role: "user", content: note });
                }
                _ => break,
            }
        }
        Ok(AgentReply { messages, usage })
    }
}

fn extract(api: ApiFlavor, v: &Value) -> Result<(String, Option<TokenUsage>), AgentError> {
    let bad = |what: &str| AgentError::BadResponse(format!("missing {what}"));
    match api {
        ApiFlavor::Openai => {
            let text = v["choices"][0]["message"]["content"].as_str().ok_or_else(|| bad("choices[0].message.content"))?;
            let usage = v.get("usage").map(|u| TokenUsage {
                input_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
                output_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
            });
            Ok((text.to_string(), usage))
        }
        ApiFlavor::Anthropic => {
            let blocks = v["content"].as_array().ok_or_else(|| bad("content"))?;
            let text: String = blocks.iter().filter(|b| b["type"] == "text").filter_map(|b| b["text"].as_str()).collect();
            let usage = v.get("usage").map(|u| TokenUsage {
                input_tokens: u["input_tokens"].as_u64().unwrap_or(0),
                output_tokens: u["output_tokens"].as_u64().unwrap_or(0),
            });
            Ok((text, usage))
        }
    }
}

impl Agent for RemoteAgent {
    fn info(&self) -> AgentInfo {
        AgentInfo {
            name: self.name.clone(),
            kind: format!("remote:{}", self.config.model),
            temperature: Some(self.config.temperature),
            system_prompt: self.prompt.system.clone(),
        }
    }

    fn take_turn(&mut self, ctx: &TurnContext<'_>) -> Result<AgentReply, AgentError> {
        debug_assert_eq!(ctx.role, self.role);
        let mark = self.conversation.len();
        let out = self.turn_inner(ctx);
        if out.is_err() {
            // A failed attempt leaves no trace in the conversation; the engine may retry.
            self.conversation.truncate(mark);
        } else {
            self.prompt.history_rendering.push(ctx.observation.text.clone());
        }
        out
    }
}
