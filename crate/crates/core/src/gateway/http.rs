//! OpenAI-compatible HTTP provider (`/chat/completions`, `/embeddings`).

use std::io::{BufRead, BufReader};
use std::thread;
use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{ChatRequest, GatewayError, Provider, ProviderConfig, Result};

pub struct HttpProvider {
    config: ProviderConfig,
    client: Client,
    id: String,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self> {
        config.validate()?;
        let client = Client::builder()
            .timeout(config.request_timeout())
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let id = format!("{}#{}", config.endpoint_url, config.model_name);
        Ok(Self { config, client, id })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint_url.trim_end_matches('/'), path)
    }

    fn body(&self, mut base: Value) -> Value {
        if let Value::Object(map) = &mut base {
            for (k, v) in &self.config.extra_params {
                map.entry(k.clone()).or_insert_with(|| v.clone());
            }
        }
        base
    }

    /// POSTs `body`, retrying transport failures, 429 and 5xx with backoff.
    fn post(&self, path: &str, body: &Value) -> Result<Response> {
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(100 << attempt.min(6)));
            }
            let mut request = self.client.post(self.url(path)).json(body);
            if let Some(key) = &self.config.api_key {
                request = request.bearer_auth(key);
            }
            let outcome = match request.send() {
                Err(e) => Attempt::Retry(e.to_string()),
                Ok(resp) if resp.status().is_success() => return Ok(resp),
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
                        Attempt::Retry(format!("HTTP {status}: {text}"))
                    } else {
                        Attempt::Fatal(GatewayError::Transport {
                            attempts: attempt + 1,
                            message: format!("HTTP {status}: {text}"),
                        })
                    }
                }
            };
            match outcome {
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    tracing::warn!(attempt, %msg, "provider request failed");
                    last = msg;
                }
            }
        }
        Err(GatewayError::Transport { attempts, message: last })
    }
}

fn malformed(what: impl std::fmt::Display) -> GatewayError {
    GatewayError::MalformedResponse(what.to_string())
}

/// Reads an SSE body of `data:` JSON lines until `data: [DONE]`.
fn read_stream(resp: Response, sink: &mut dyn FnMut(&str)) -> Result<String> {
    let mut out = String::new();
    for line in BufReader::new(resp).lines() {
        let line = line.map_err(|e| GatewayError::Transport { attempts: 1, message: e.to_string() })?;
        let Some(data) = line.strip_prefix("data:") else { continue };
        let data = data.trim();
        if data == "[DONE]" {
            return Ok(out);
        }
        let value: Value = serde_json::from_str(data).map_err(malformed)?;
        if let Some(piece) = value["choices"][0]["delta"]["content"].as_str() {
            if !piece.is_empty() {
                sink(piece);
                out.push_str(piece);
            }
        }
    }
    Err(malformed("stream ended without [DONE]"))
}

impl Provider for HttpProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest, sink: &mut dyn FnMut(&str)) -> Result<String> {
        let body = self.body(json!({
            "model": self.config.model_name,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "stream": request.stream,
        }));
        let resp = self.post("chat/completions", &body)?;
        if request.stream {
            return read_stream(resp, sink);
        }
        let value: Value = resp.json().map_err(malformed)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| malformed("missing choices[0].message.content"))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let body = self.body(json!({ "model": self.config.model_name, "input": texts }));
        let resp = self.post("embeddings", &body)?;
        let parsed: EmbeddingResponse = resp.json().map_err(malformed)?;
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, Message, Purpose};
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::sync::Arc;

    /// Serves each canned response to one connection and reports request bodies.
    fn serve(responses: Vec<(u16, &'static str, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, ctype, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(idx) = text.find("\r\n\r\n") {
                        let len = text
                            .lines()
                            .find_map(|l| {
                                l.to_ascii_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if buf.len() >= idx + 4 + len {
                            tx.send(text[idx + 4..].to_string()).unwrap();
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                let head = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: {ctype}\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                    body.len()
                );
                stream.write_all(head.as_bytes()).unwrap();
                stream.write_all(body.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn config(url: String) -> ProviderConfig {
        let mut extra = serde_json::Map::new();
        extra.insert("rope_scaling".into(), json!({"type": "yarn", "factor": 4.0}));
        ProviderConfig {
            endpoint_url: url,
            model_name: "m".into(),
            max_retries: 1,
            extra_params: extra,
            ..Default::default()
        }
    }

    #[test]
    fn chat_round_trip_passes_extra_params() {
        let body = json!({"choices":[{"message":{"role":"assistant","content":"OK"}}]}).to_string();
        let (url, rx) = serve(vec![(200, "application/json", body)]);
        let provider = HttpProvider::new(config(url)).unwrap();
        let gw = Gateway::new(Arc::new(provider), ProviderConfig::default()).unwrap();
        let out = gw.chat(Purpose::Other, &ChatRequest::new(vec![Message::user("say OK")]), None).unwrap();
        assert_eq!(out, "OK");
        let sent: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["messages"][0]["content"], "say OK");
        assert_eq!(sent["rope_scaling"]["type"], "yarn");
        assert_eq!(sent["stream"], false);
    }

    #[test]
    fn streaming_delivers_fragments_in_order() {
        let mut sse = String::new();
        for piece in ["Hel", "lo", "!"] {
            sse.push_str(&format!("data: {}\n\n", json!({"choices":[{"delta":{"content":piece}}]})));
        }
        sse.push_str("data: [DONE]\n\n");
        let (url, _rx) = serve(vec![(200, "text/event-stream", sse)]);
        let provider = HttpProvider::new(config(url)).unwrap();
        let mut got = Vec::new();
        let req = ChatRequest::new(vec![Message::user("hi")]).stream(true);
        let out = provider.complete(&req, &mut |f| got.push(f.to_string())).unwrap();
        assert_eq!(got, vec!["Hel", "lo", "!"]);
        assert_eq!(out, "Hello!");
    }

    #[test]
    fn server_errors_are_retried_then_reported() {
        let (url, _rx) = serve(vec![(503, "text/plain", "busy".into()), (503, "text/plain", "busy".into())]);
        let provider = HttpProvider::new(config(url)).unwrap();
        let err = provider.complete(&ChatRequest::new(vec![Message::user("x")]), &mut |_| {}).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 2, .. }), "{err:?}");
    }

    #[test]
    fn malformed_json_is_reported() {
        let (url, _rx) = serve(vec![(200, "application/json", "{\"choices\":[]}".into())]);
        let provider = HttpProvider::new(config(url)).unwrap();
        let err = provider.complete(&ChatRequest::new(vec![Message::user("x")]), &mut |_| {}).unwrap_err();
        assert!(matches!(err, GatewayError::MalformedResponse(_)));
    }

    #[test]
    fn embeddings_parse_and_normalize() {
        let body = json!({"data":[{"embedding":[3.0,4.0]},{"embedding":[0.0,2.0]}]}).to_string();
        let (url, rx) = serve(vec![(200, "application/json", body)]);
        let provider = HttpProvider::new(config(url)).unwrap();
        let gw = Gateway::new(Arc::new(provider), ProviderConfig::default()).unwrap();
        let v = gw.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(v, vec![vec![0.6, 0.8], vec![0.0, 1.0]]);
        let sent: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["input"], json!(["a", "b"]));
    }
}
