//! Chat-completions wire protocol: a blocking HTTP client for any
//! compatible endpoint. Requests carry the tool schemas (with-tools mode
//! only), `tool_choice: "auto"`, parallel tool calls disabled and the
//! configured temperature; at most one returned tool call is honored.

use serde_json::{json, Value as Json};
use thiserror::Error;

use super::{Agent, AgentError, AgentTurn, RawToolCall, TurnCtx};
use crate::toolkit::FunctionSchema;

/// Environment variables for endpoint configuration. The key is never
/// logged.
pub const ENDPOINT_VAR: &str = "TRACELAB_ENDPOINT";
pub const API_KEY_VAR: &str = "TRACELAB_API_KEY";
pub const MODEL_VAR: &str = "TRACELAB_MODEL";

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
        }
    }

    pub fn from_env() -> Result<Self, WireError> {
        let base_url = std::env::var(ENDPOINT_VAR)
            .map_err(|_| WireError::Config(format!("{ENDPOINT_VAR} is not set")))?;
        let model = std::env::var(MODEL_VAR)
            .map_err(|_| WireError::Config(format!("{MODEL_VAR} is not set")))?;
        Ok(EndpointConfig {
            base_url,
            api_key: std::env::var(API_KEY_VAR).ok(),
            model,
        })
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("endpoint misconfigured: {0}")]
    Config(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

impl From<WireError> for AgentError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Timeout => AgentError::Timeout,
            WireError::Config(m) | WireError::Transport(m) => AgentError::Transport(m),
            WireError::MalformedResponse(m) => AgentError::Malformed(m),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ModelMessage {
    pub content: Option<String>,
    pub tool_calls: Vec<RawToolCall>,
}

/// POST one chat request and parse the first choice's message.
pub fn chat_request(
    config: &EndpointConfig,
    messages: &[Json],
    tools: Option<&[FunctionSchema]>,
    limits: &super::AgentLimits,
) -> Result<ModelMessage, WireError> {
    let mut body = json!({
        "model": config.model,
        "messages": messages,
        "temperature": limits.temperature,
    });
    if let Some(schemas) = tools {
        body["tools"] = serde_json::to_value(schemas)
            .map_err(|e| WireError::Config(format!("schemas not serializable: {e}")))?;
        body["tool_choice"] = json!("auto");
        body["parallel_tool_calls"] = json!(false);
    }
    let client = reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs_f64(limits.request_timeout_s))
        .build()
        .map_err(|e| WireError::Transport(e.to_string()))?;
    let url = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
    let mut req = client.post(&url).json(&body);
    if let Some(key) = &config.api_key {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(|e| {
        if e.is_timeout() {
            WireError::Timeout
        } else {
            WireError::Transport(e.to_string())
        }
    })?;
    if !resp.status().is_success() {
        return Err(WireError::Transport(format!(
            "endpoint returned status {}",
            resp.status()
        )));
    }
    let parsed: Json = resp
        .json()
        .map_err(|e| WireError::MalformedResponse(e.to_string()))?;
    parse_model_message(&parsed)
}

fn parse_model_message(response: &Json) -> Result<ModelMessage, WireError> {
    let message = response["choices"]
        .get(0)
        .map(|c| &c["message"])
        .ok_or_else(|| WireError::MalformedResponse("no choices in response".to_string()))?;
    let content = message["content"].as_str().map(str::to_string);
    let mut tool_calls = Vec::new();
    if let Some(calls) = message["tool_calls"].as_array() {
        for call in calls {
            let name = call["function"]["name"]
                .as_str()
                .ok_or_else(|| {
                    WireError::MalformedResponse("tool call without function name".to_string())
                })?
                .to_string();
            let arguments = match &call["function"]["arguments"] {
                Json::String(s) => s.clone(),
                other => other.to_string(),
            };
            tool_calls.push(RawToolCall { name, arguments });
        }
    }
    if content.is_none() && tool_calls.is_empty() {
        return Err(WireError::MalformedResponse(
            "message carries neither content nor tool calls".to_string(),
        ));
    }
    Ok(ModelMessage {
        content,
        tool_calls,
    })
}

/// An agent backed by a remote chat-completions endpoint.
pub struct RemoteAgent {
    config: EndpointConfig,
}

impl RemoteAgent {
    pub fn new(config: EndpointConfig) -> Self {
        RemoteAgent { config }
    }
}

impl Agent for RemoteAgent {
    fn next_turn(&mut self, ctx: &TurnCtx) -> Result<AgentTurn, AgentError> {
        let msg = chat_request(&self.config, ctx.messages, ctx.schemas, ctx.limits)?;
        Ok(AgentTurn {
            content: msg.content,
            tool_calls: msg.tool_calls,
        })
    }

    fn label(&self) -> String {
        format!("remote:{}", self.config.model)
    }
}

/// Remote question generator sharing the same wire contract: the rubric and
/// abstracted trace travel in the request payload.
pub struct RemoteQuestionGenerator {
    pub config: EndpointConfig,
    pub limits: super::AgentLimits,
}

impl crate::questiongen::QuestionGenerator for RemoteQuestionGenerator {
    fn generate(
        &self,
        context: &crate::questiongen::AbstractedTrace,
        rubric: &crate::questiongen::Rubric,
    ) -> Result<String, String> {
        let payload = json!({
            "rubric": rubric,
            "trace": context,
        });
        let messages = super::seed_messages(
            "Write one self-contained scientific problem from the provided context. \
             State the given parameters, describe intermediate results only with the \
             provided qualitative labels, and ask for the final value without revealing it.",
            &payload.to_string(),
        );
        let msg = chat_request(&self.config, &messages, None, &self.limits)
            .map_err(|e| e.to_string())?;
        msg.content.ok_or_else(|| "empty generation".to_string())
    }

    fn name(&self) -> &str {
        "remote"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentLimits;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Minimal one-shot HTTP server returning a canned chat response.
    fn mock_server(response_body: String, delay: std::time::Duration) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut stream, _)) = listener.accept() {
                let mut buf = [0u8; 65536];
                let mut read = 0;
                // Read until the full body arrived (headers + content-length).
                loop {
                    match stream.read(&mut buf[read..]) {
                        Ok(0) => break,
                        Ok(n) => {
                            read += n;
                            let text = String::from_utf8_lossy(&buf[..read]);
                            if let Some(header_end) = text.find("\r\n\r\n") {
                                let content_length = text
                                    .lines()
                                    .find(|l| l.to_lowercase().starts_with("content-length:"))
                                    .and_then(|l| l.split(':').nth(1))
                                    .and_then(|v| v.trim().parse::<usize>().ok())
                                    .unwrap_or(0);
                                if read >= header_end + 4 + content_length {
                                    break;
                                }
                            }
                        }
                        Err(_) => break,
                    }
                }
                std::thread::sleep(delay);
                let reply = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    response_body.len(),
                    response_body
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    fn limits_with_timeout(secs: f64) -> AgentLimits {
        AgentLimits {
            request_timeout_s: secs,
            ..AgentLimits::default()
        }
    }

    #[test]
    fn single_tool_call_is_parsed() {
        let body = serde_json::json!({
            "choices": [{ "message": {
                "content": null,
                "tool_calls": [{
                    "id": "call_1",
                    "type": "function",
                    "function": { "name": "quotient", "arguments": "{\"numerator\": 6, \"denominator\": 3}" }
                }]
            }}]
        })
        .to_string();
        let base = mock_server(body, std::time::Duration::ZERO);
        let cfg = EndpointConfig::new(base, "test-model");
        let msg = chat_request(
            &cfg,
            &[serde_json::json!({"role": "user", "content": "hi"})],
            None,
            &limits_with_timeout(5.0),
        )
        .unwrap();
        assert_eq!(msg.tool_calls.len(), 1);
        assert_eq!(msg.tool_calls[0].name, "quotient");
    }

    #[test]
    fn parallel_tool_calls_only_first_is_honored_by_the_loop() {
        // The wire layer surfaces both; the episode loop drops the second.
        let body = serde_json::json!({
            "choices": [{ "message": {
                "content": null,
                "tool_calls": [
                    { "function": { "name": "a", "arguments": "{}" } },
                    { "function": { "name": "b", "arguments": "{}" } }
                ]
            }}]
        });
        let msg = parse_model_message(&body).unwrap();
        assert_eq!(msg.tool_calls.len(), 2);

        // Through the episode loop with a sequence policy standing in for
        // the remote side: one action is recorded, not two.
        use crate::agent::{run_episode, Mode, ScriptedAgent, ScriptedPolicy};
        use crate::executor::new_episode;
        use crate::task::TaskRecord;
        use crate::toolkit::{builtin_corpus, ToolId};
        let corpus = builtin_corpus();
        let task = TaskRecord::single(
            "t",
            "physics",
            "q",
            crate::value::Value::Int(1),
            1,
            vec![ToolId::new("quotient")],
            "none",
            0,
        );
        let mut env = new_episode(
            "ep-parallel",
            Default::default(),
            task.tools.iter().cloned().collect(),
            0,
        );
        let turns = vec![
            crate::agent::AgentTurn {
                content: None,
                tool_calls: vec![
                    RawToolCall {
                        name: "quotient".into(),
                        arguments: "{\"numerator\": 4, \"denominator\": 2}".into(),
                    },
                    RawToolCall {
                        name: "quotient".into(),
                        arguments: "{\"numerator\": 9, \"denominator\": 3}".into(),
                    },
                ],
            },
            crate::agent::AgentTurn {
                content: Some("2".into()),
                tool_calls: vec![],
            },
        ];
        let mut agent = ScriptedAgent::new(ScriptedPolicy::Sequence { turns });
        let log = run_episode(
            &task,
            &mut agent,
            &mut env,
            &corpus.registry,
            &AgentLimits::default(),
            Mode::WithTools,
        );
        assert_eq!(log.actions.len(), 1);
        assert_eq!(
            log.actions[0].args.get("numerator"),
            Some(&crate::value::Value::Int(4))
        );
    }

    #[test]
    fn slow_endpoint_times_out() {
        let body = serde_json::json!({
            "choices": [{ "message": { "content": "late" } }]
        })
        .to_string();
        let base = mock_server(body, std::time::Duration::from_millis(1500));
        let cfg = EndpointConfig::new(base, "test-model");
        let err = chat_request(
            &cfg,
            &[serde_json::json!({"role": "user", "content": "hi"})],
            None,
            &limits_with_timeout(0.2),
        )
        .unwrap_err();
        assert!(matches!(err, WireError::Timeout));
    }

    #[test]
    fn malformed_response_is_reported() {
        let base = mock_server("{\"unexpected\": true}".to_string(), std::time::Duration::ZERO);
        let cfg = EndpointConfig::new(base, "test-model");
        let err = chat_request(
            &cfg,
            &[serde_json::json!({"role": "user", "content": "hi"})],
            None,
            &limits_with_timeout(5.0),
        )
        .unwrap_err();
        assert!(matches!(err, WireError::MalformedResponse(_)));
    }

    #[test]
    fn request_body_carries_the_protocol_fields() {
        // Round-trip the request through a capturing server.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let captured = std::sync::Arc::new(std::sync::Mutex::new(String::new()));
        let captured2 = std::sync::Arc::clone(&captured);
        std::thread::spawn(move || {
            if let Ok((mut stream, _)) = listener.accept() {
                let mut buf = [0u8; 65536];
                let mut read = 0;
                loop {
                    match stream.read(&mut buf[read..]) {
                        Ok(0) => break,
                        Ok(n) => {
                            read += n;
                            let text = String::from_utf8_lossy(&buf[..read]);
                            if let Some(h) = text.find("\r\n\r\n") {
                                let cl = text
                                    .lines()
                                    .find(|l| l.to_lowercase().starts_with("content-length:"))
                                    .and_then(|l| l.split(':').nth(1))
                                    .and_then(|v| v.trim().parse::<usize>().ok())
                                    .unwrap_or(0);
                                if read >= h + 4 + cl {
                                    break;
                                }
                            }
                        }
                        Err(_) => break,
                    }
                }
                *captured2.lock().unwrap() = String::from_utf8_lossy(&buf[..read]).to_string();
                let body = serde_json::json!({
                    "choices": [{ "message": { "content": "ok" } }]
                })
                .to_string();
                let reply = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        let corpus = crate::toolkit::builtin_corpus();
        let schemas = crate::toolkit::export_function_schemas(
            &corpus.registry,
            &[crate::toolkit::ToolId::new("quotient")],
        )
        .unwrap();
        let cfg = EndpointConfig::new(format!("http://{addr}"), "test-model");
        chat_request(
            &cfg,
            &[serde_json::json!({"role": "user", "content": "hi"})],
            Some(&schemas),
            &limits_with_timeout(5.0),
        )
        .unwrap();
        let raw = captured.lock().unwrap().clone();
        let body_start = raw.find("\r\n\r\n").unwrap() + 4;
        let body: serde_json::Value = serde_json::from_str(&raw[body_start..]).unwrap();
        assert_eq!(body["tool_choice"], "auto");
        assert_eq!(body["parallel_tool_calls"], false);
        assert_eq!(body["temperature"], 0.7);
        assert_eq!(body["tools"][0]["function"]["name"], "quotient");
    }
}
