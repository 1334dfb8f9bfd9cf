//! OpenAI-compatible HTTPS provider (chat completions + embeddings).

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{LlmProvider, Prompt, ProviderConfig, ProviderError, ProviderKind};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_API_KEY_VAR: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone)]
pub struct RemoteProvider {
    config: ProviderConfig,
    base_url: String,
    api_key: String,
    client: reqwest::Client,
}

impl RemoteProvider {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            config: ProviderConfig::new(ProviderKind::RemoteHttp),
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key: api_key.into(),
            client: reqwest::Client::new(),
        }
    }

    /// Reads the API key from `var` (default `OPENAI_API_KEY`).
    pub fn from_env(base_url: Option<&str>, var: Option<&str>) -> Result<Self, ProviderError> {
        let var = var.unwrap_or(DEFAULT_API_KEY_VAR);
        let key =
            std::env::var(var).map_err(|_| ProviderError::Fatal(format!("environment variable {var} is not set")))?;
        Ok(Self::new(base_url.unwrap_or(DEFAULT_BASE_URL), key))
    }

    pub fn with_config(mut self, config: ProviderConfig) -> Self {
        self.config = ProviderConfig {
            kind: ProviderKind::RemoteHttp,
            ..config
        };
        self
    }

    async fn post(&self, path: &str, body: Value) -> Result<Value, ProviderError> {
        let resp = self
            .client
            .post(format!("{}/{}", self.base_url, path))
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .await
            .map_err(|e| {
                if e.is_timeout() {
                    ProviderError::Timeout
                } else {
                    ProviderError::Transient(e.to_string())
                }
            })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            return Err(ProviderError::Fatal(format!("HTTP {status}: {text}")));
        }
        resp.json::<Value>()
            .await
            .map_err(|e| ProviderError::Transient(format!("bad response body: {e}")))
    }
}

#[async_trait]
impl LlmProvider for RemoteProvider {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    async fn generate(&self, prompt: &Prompt, _repetition: usize) -> Result<String, ProviderError> {
        let mut messages = vec![];
        if !prompt.system.is_empty() {
            messages.push(json!({"role": "system", "content": prompt.system}));
        }
        messages.push(json!({"role": "user", "content": prompt.user}));
        let body = json!({
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "messages": messages,
        });
        let v = self.post("chat/completions", body).await?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| ProviderError::Transient("response has no message content".into()))
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let body = json!({"model": self.config.embedding_model, "input": texts});
        let v = self.post("embeddings", body).await?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Transient("response has no data".into()))?;
        let mut rows: Vec<(usize, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let idx = item.get("index").and_then(Value::as_u64).map_or(i, |x| x as usize);
                let emb = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_f64).collect())
                    .unwrap_or_default();
                (idx, emb)
            })
            .collect();
        rows.sort_by_key(|r| r.0);
        Ok(rows.into_iter().map(|r| r.1).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::{http::StatusCode, routing::post, Json, Router};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    async fn spawn(router: Router) -> String {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
        format!("http://{addr}/v1")
    }

    #[tokio::test]
    async fn chat_and_embeddings_against_a_local_server() {
        let router = Router::new()
            .route(
                "/v1/chat/completions",
                post(|Json(body): Json<Value>| async move {
                    assert_eq!(body["temperature"], 0.0);
                    assert_eq!(body["model"], "gpt-4o-mini");
                    let user = body["messages"][1]["content"].as_str().unwrap().to_owned();
                    Json(json!({"choices": [{"message": {"content": format!("echo {user}")}}]}))
                }),
            )
            .route(
                "/v1/embeddings",
                post(|Json(body): Json<Value>| async move {
                    let n = body["input"].as_array().unwrap().len();
                    let data: Vec<_> = (0..n)
                        .rev()
                        .map(|i| json!({"index": i, "embedding": [i as f64, 1.0]}))
                        .collect();
                    Json(json!({"data": data}))
                }),
            );
        let base = spawn(router).await;
        let p = RemoteProvider::new(base, "k");
        let prompt = Prompt {
            system: "sys".into(),
            user: "hi".into(),
        };
        assert_eq!(p.generate(&prompt, 0).await.unwrap(), "echo hi");
        let v = p.embed(&["a".into(), "b".into()]).await.unwrap();
        assert_eq!(v, vec![vec![0.0, 1.0], vec![1.0, 1.0]]);
    }

    #[tokio::test]
    async fn status_codes_map_to_error_kinds() {
        let hits = Arc::new(AtomicUsize::new(0));
        let h = hits.clone();
        let router = Router::new().route(
            "/v1/chat/completions",
            post(move || {
                let n = h.fetch_add(1, Ordering::SeqCst);
                async move {
                    if n == 0 {
                        (StatusCode::TOO_MANY_REQUESTS, "slow down")
                    } else {
                        (StatusCode::UNAUTHORIZED, "bad key")
                    }
                }
            }),
        );
        let p = RemoteProvider::new(spawn(router).await, "k");
        let prompt = Prompt::user("x");
        assert!(matches!(p.generate(&prompt, 0).await, Err(ProviderError::Transient(_))));
        assert!(matches!(p.generate(&prompt, 0).await, Err(ProviderError::Fatal(_))));
    }
}
