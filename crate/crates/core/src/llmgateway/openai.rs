//! OpenAI-compatible `/chat/completions` client.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{GatewayError, GenerationParams, Provider, ProviderReply, TokenUsage};
use crate::promptkit::RenderedPrompt;

const BODY_EXCERPT: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    pub base_url: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "OpenAiConfig::default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "OpenAiConfig::default_timeout_secs")]
    pub timeout_secs: u64,
    /// Whether the endpoint understands `repetition_penalty` (vLLM, TGI and similar do).
    #[serde(default)]
    pub accepts_repetition_penalty: bool,
}

impl OpenAiConfig {
    fn default_api_key_env() -> String {
        "OPENAI_API_KEY".into()
    }

    fn default_timeout_secs() -> u64 {
        120
    }
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: Self::default_api_key_env(),
            timeout_secs: Self::default_timeout_secs(),
            accepts_repetition_penalty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body in the chat-completions wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequestBody {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition_penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequestBody {
    pub fn build(
        prompt: &RenderedPrompt,
        params: &GenerationParams,
        send_repetition_penalty: bool,
    ) -> Self {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = prompt.system_text.as_deref().filter(|s| !s.is_empty()) {
            messages.push(ChatMessage {
                role: "system".into(),
                content: system.into(),
            });
        }
        messages.push(ChatMessage {
            role: "user".into(),
            content: prompt.user_text.clone(),
        });
        Self {
            model: params.model_id.clone(),
            messages,
            max_tokens: params.max_new_tokens,
            temperature: params.temperature,
            repetition_penalty: send_repetition_penalty.then_some(params.repetition_penalty),
            seed: params.seed,
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<TokenUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct OpenAiProvider {
    client: reqwest::blocking::Client,
    config: OpenAiConfig,
    api_key: Option<String>,
    warned_penalty: AtomicBool,
}

impl OpenAiProvider {
    /// Builds a client, reading the API key from `config.api_key_env`.
    pub fn new(config: OpenAiConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env).ok();
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(
        config: OpenAiConfig,
        api_key: Option<String>,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            config,
            api_key,
            warned_penalty: AtomicBool::new(false),
        })
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }
}

fn excerpt(body: &str) -> String {
    match body.char_indices().nth(BODY_EXCERPT) {
        Some((cut, _)) => format!("{}…", &body[..cut]),
        None => body.to_string(),
    }
}

fn transport_error(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout
    } else {
        GatewayError::Transport(e.to_string())
    }
}

impl Provider for OpenAiProvider {
    fn name(&self) -> &str {
        "openai-compatible"
    }

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<ProviderReply, GatewayError> {
        let key = self.api_key.as_deref().ok_or_else(|| {
            GatewayError::Auth(format!(
                "environment variable {} is not set",
                self.config.api_key_env
            ))
        })?;
        if !self.config.accepts_repetition_penalty
            && !self.warned_penalty.swap(true, Ordering::Relaxed)
        {
            log::warn!(
                "endpoint does not accept repetition_penalty; dropping {}",
                params.repetition_penalty
            );
        }
        let body = ChatRequestBody::build(prompt, params, self.config.accepts_repetition_penalty);

        let resp = self
            .client
            .post(self.endpoint())
            .bearer_auth(key)
            .json(&body)
            .send()
            .map_err(transport_error)?;
        let status = resp.status();
        let text = resp.text().map_err(transport_error)?;
        match status.as_u16() {
            200..=299 => {}
            401 | 403 => return Err(GatewayError::Auth(excerpt(&text))),
            429 => return Err(GatewayError::RateLimited { attempts: 1 }),
            code => {
                return Err(GatewayError::Provider {
                    status: code,
                    body: excerpt(&text),
                })
            }
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::Provider {
                status: status.as_u16(),
                body: format!("unparseable response ({e}): {}", excerpt(&text)),
            })?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(ProviderReply {
            text: content,
            usage: parsed.usage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptkit::{Framework, PromptFrame};

    fn prompt() -> RenderedPrompt {
        RenderedPrompt {
            system_text: None,
            user_text: "Summarise.".into(),
            frame: PromptFrame::base(Framework::Direct),
            collection_id: "c".into(),
        }
    }

    #[test]
    fn body_carries_reference_temperature() {
        let body = ChatRequestBody::build(&prompt(), &GenerationParams::new("gpt-4o-mini"), false);
        let json = serde_json::to_value(&body).unwrap();
        assert_eq!(json["temperature"], serde_json::json!(0.001));
        assert_eq!(json["max_tokens"], serde_json::json!(256));
        assert_eq!(json["model"], "gpt-4o-mini");
        assert_eq!(json["messages"].as_array().unwrap().len(), 1);
        assert_eq!(json["messages"][0]["role"], "user");
        assert!(json.get("repetition_penalty").is_none());
        assert!(serde_json::to_string(&body)
            .unwrap()
            .contains("\"temperature\":0.001"));
    }

    #[test]
    fn repetition_penalty_only_when_accepted() {
        let body = ChatRequestBody::build(&prompt(), &GenerationParams::new("llama"), true);
        assert_eq!(body.repetition_penalty, Some(1.1));
    }

    #[test]
    fn system_text_becomes_system_message() {
        let mut p = prompt();
        p.system_text = Some("Be terse.".into());
        let body = ChatRequestBody::build(&p, &GenerationParams::new("m"), false);
        assert_eq!(body.messages[0].role, "system");
        assert_eq!(body.messages[1].content, "Summarise.");
    }

    #[test]
    fn missing_key_is_an_auth_error() {
        let provider = OpenAiProvider::with_api_key(OpenAiConfig::default(), None).unwrap();
        let err = provider
            .complete(&prompt(), &GenerationParams::new("m"))
            .unwrap_err();
        assert!(matches!(err, GatewayError::Auth(_)));
    }
}
