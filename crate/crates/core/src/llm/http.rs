//! OpenAI-compatible HTTP provider (`/chat/completions`, `/embeddings`).

use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatProvider, ChatRequest, EmbedProvider, ProviderError};

pub struct OpenAiCompatible {
    base_url: String,
    model: String,
    api_key: String,
    agent: ureq::Agent,
}

impl OpenAiCompatible {
    /// Reads the API key from `credential_env`. Keys are never accepted
    /// directly so they cannot leak through command lines or config files.
    pub fn from_env(base_url: &str, model: &str, credential_env: &str) -> Result<Self, ProviderError> {
        let api_key = std::env::var(credential_env)
            .map_err(|_| ProviderError::Auth(format!("environment variable {credential_env} is not set")))?;
        if api_key.trim().is_empty() {
            return Err(ProviderError::Auth(format!("environment variable {credential_env} is empty")));
        }
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
        })
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, ProviderError> {
        let url = format!("{}/{}", self.base_url, path);
        let resp = self.agent.post(&url).set("Authorization", &format!("Bearer {}", self.api_key)).send_json(body);
        match resp {
            Ok(r) => r.into_json().map_err(|e| ProviderError::Invalid(e.to_string())),
            Err(ureq::Error::Status(code, r)) => {
                let retry_after_ms = r
                    .header("retry-after")
                    .and_then(|v| v.trim().parse::<u64>().ok())
                    .map(|s| s * 1000)
                    .unwrap_or(1000);
                let text = r.into_string().unwrap_or_default();
                Err(match code {
                    401 | 403 => ProviderError::Auth(format!("HTTP {code}")),
                    429 => ProviderError::RateLimited { retry_after_ms },
                    500..=599 | 408 => ProviderError::Transient(format!("HTTP {code}: {text}")),
                    _ => ProviderError::Invalid(format!("HTTP {code}: {text}")),
                })
            }
            Err(ureq::Error::Transport(t)) => Err(ProviderError::Transient(t.to_string())),
        }
    }
}

impl ChatProvider for OpenAiCompatible {
    fn id(&self) -> String {
        format!("openai:{}", self.base_url)
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let v = self.post("chat/completions", body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Invalid("response has no choices[0].message.content".into()))
    }
}

impl EmbedProvider for OpenAiCompatible {
    fn id(&self) -> String {
        format!("openai:{}", self.base_url)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let v = self.post("embeddings", json!({"model": self.model, "input": texts}))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Invalid("response has no data array".into()))?;
        let mut rows: Vec<(u64, Vec<f32>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
            let emb = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| ProviderError::Invalid("data item has no embedding".into()))?;
            let values = emb
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<Vec<f32>>>()
                .ok_or_else(|| ProviderError::Invalid("non-numeric embedding value".into()))?;
            rows.push((index, values));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}
