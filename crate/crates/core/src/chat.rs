//! Minimal client for OpenAI-compatible chat-completion endpoints.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const DEFAULT_API_KEY_ENV: &str = "SQLEVO_API_KEY";
const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatClient {
    /// e.g. `https://api.example.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_timeout_secs() -> u64 {
    120
}

impl ChatClient {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout_secs(),
        }
    }

    /// Parses `model@base_url`.
    pub fn from_spec(spec: &str) -> Result<Self> {
        let (model, url) = spec.split_once('@').ok_or_else(|| {
            Error::InvalidArgument(format!("chat backend spec must be model@base_url, got '{spec}'"))
        })?;
        if model.is_empty() || url.is_empty() {
            return Err(Error::InvalidArgument(format!("incomplete chat backend spec '{spec}'")));
        }
        Ok(Self::new(url, model))
    }

    pub fn identity(&self) -> String {
        format!("{}@{}", self.model, self.base_url)
    }

    /// Sends `(role, content)` messages and returns the first choice's text.
    /// Transport errors, 429 and 5xx responses are retried with backoff.
    pub fn complete(&self, messages: &[(&str, &str)], temperature: f64) -> Result<String> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.model,
            "temperature": temperature,
            "messages": messages
                .iter()
                .map(|(role, content)| json!({"role": role, "content": content}))
                .collect::<Vec<_>>(),
        });
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(self.timeout_secs))
            .build();
        let key = std::env::var(&self.api_key_env).ok();

        let mut last_err = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(250 << attempt));
            }
            let mut req = agent.post(&url).set("Content-Type", "application/json");
            if let Some(k) = &key {
                req = req.set("Authorization", &format!("Bearer {k}"));
            }
            match req.send_json(body.clone()) {
                Ok(resp) => {
                    let v: Value = resp
                        .into_json()
                        .map_err(|e| Error::Backend(format!("invalid response body: {e}")))?;
                    return v["choices"][0]["message"]["content"]
                        .as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Error::Backend(format!("response has no message content: {v}")));
                }
                Err(ureq::Error::Status(code, resp)) if code == 429 || code >= 500 => {
                    last_err = format!("HTTP {code}: {}", resp.into_string().unwrap_or_default());
                }
                Err(ureq::Error::Status(code, resp)) => {
                    return Err(Error::Backend(format!(
                        "HTTP {code}: {}",
                        resp.into_string().unwrap_or_default()
                    )));
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Backend(format!(
            "{url} failed after {MAX_ATTEMPTS} attempts: {last_err}"
        )))
    }
}

#[cfg(test)]
pub(crate) mod mock {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread;

    /// Serves canned chat replies in order and records request bodies.
    pub struct MockServer {
        pub url: String,
        pub requests: Arc<Mutex<Vec<serde_json::Value>>>,
    }

    pub fn serve(replies: Vec<(u16, String)>) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        thread::spawn(move || {
            for (status, content) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
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
                log.lock().unwrap().push(serde_json::from_slice(&body).unwrap());
                let payload = serde_json::json!({
                    "choices": [{"message": {"role": "assistant", "content": content}}]
                })
                .to_string();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                )
                .unwrap();
            }
        });
        MockServer { url, requests }
    }
}
