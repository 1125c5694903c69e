//! Few-shot prompt construction and a blocking text-completion client.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};

pub const SOURCE_PREFIX: &str = "source:";
pub const TARGET_PREFIX: &str = "target:";
pub const STOP_SEQUENCES: [&str; 2] = ["\n\n", SOURCE_PREFIX];

/// Renders one demonstration pair.
pub fn format_pair(source: &str, target: &str) -> String {
    format!("{SOURCE_PREFIX} {source}\n{TARGET_PREFIX} {target}\n")
}

/// Renders the trailing query block. Ends with `target:` and no space.
pub fn format_query(source: &str) -> String {
    format!("{SOURCE_PREFIX} {source}\n{TARGET_PREFIX}")
}

/// Context pairs in retrieval order, then the query.
pub fn build_prompt(context: &[&Example], query: &str) -> String {
    let mut prompt = String::new();
    for ex in context {
        prompt.push_str(&format_pair(&ex.source, ex.target.as_str()));
    }
    prompt.push_str(&format_query(query));
    prompt
}

/// Cuts a raw completion at the first blank line or `source:` marker.
pub fn postprocess(raw: &str) -> String {
    let mut end = raw.len();
    for stop in STOP_SEQUENCES {
        if let Some(i) = raw.find(stop) {
            end = end.min(i);
        }
    }
    raw[..end].trim().to_string()
}

/// True iff the whitespace-separated token sequences are identical.
pub fn exact_match(pred: &str, gold: &str) -> bool {
    pred.split_whitespace().eq(gold.split_whitespace())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    /// Base URL; requests go to `{endpoint}/completions`.
    pub endpoint: String,
    pub model: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub retries: u32,
    /// Delay before the first retry; doubled on each further attempt.
    pub backoff_ms: u64,
    pub parallelism: usize,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "gpt-3.5-turbo-instruct".into(),
            max_tokens: 256,
            temperature: 0.0,
            timeout_secs: 60,
            retries: 3,
            backoff_ms: 500,
            parallelism: 4,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parallelism < 1 {
            return Err(Error::Config("llm: parallelism must be at least 1".into()));
        }
        if self.endpoint.is_empty() {
            return Err(Error::Config("llm: endpoint must be set".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: [&'a str; 2],
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(Error),
}

#[derive(Debug, Clone)]
pub struct CompletionClient {
    cfg: ClientConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl CompletionClient {
    pub fn new(cfg: ClientConfig) -> Result<Self> {
        cfg.validate()?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(CompletionClient {
            cfg,
            agent,
            api_key,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn url(&self) -> String {
        format!("{}/completions", self.cfg.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, prompt: &str) -> Attempt {
        let body = CompletionRequest {
            model: &self.cfg.model,
            prompt,
            max_tokens: self.cfg.max_tokens,
            temperature: self.cfg.temperature,
            stop: STOP_SEQUENCES,
        };
        let mut req = self.agent.post(self.url());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        match status {
            200..=299 => match resp.body_mut().read_json::<CompletionResponse>() {
                Ok(parsed) => match parsed.choices.into_iter().next() {
                    Some(c) => Attempt::Done(c.text),
                    None => Attempt::Fatal(Error::Client("response has no choices".into())),
                },
                Err(e) => Attempt::Fatal(Error::Client(format!("malformed response: {e}"))),
            },
            401 | 403 => Attempt::Fatal(Error::Auth(format!("endpoint rejected credentials ({status})"))),
            408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fatal(Error::Client(format!("HTTP {status}"))),
        }
    }

    /// Raw completion text of the first choice, retrying transient failures
    /// with exponential backoff.
    pub fn complete_raw(&self, prompt: &str) -> Result<String> {
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(prompt) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(reason) => {
                    log::warn!("completion attempt {} failed: {reason}", attempt + 1);
                    last = reason;
                }
            }
        }
        Err(Error::Client(format!(
            "giving up after {} attempts: {last}",
            self.cfg.retries + 1
        )))
    }

    /// Post-processed completion.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        self.complete_raw(prompt).map(|raw| postprocess(&raw))
    }

    /// Completes many prompts with at most `parallelism` requests in flight.
    /// Results keep the input order.
    pub fn complete_many(&self, prompts: &[String]) -> Vec<Result<String>> {
        let width = self.cfg.parallelism.max(1);
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(width) {
            let results: Vec<Result<String>> = thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|p| s.spawn(move || self.complete(p)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Client("worker panicked".into()))))
                    .collect()
            });
            out.extend(results);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_context_prompt() {
        assert_eq!(build_prompt(&[], "how many dogs"), "source: how many dogs\ntarget:");
    }

    #[test]
    fn one_pair_prompt() {
        let ex = Example::new(0, "a dog", "find ( dog )");
        assert_eq!(
            build_prompt(&[&ex], "a cat"),
            "source: a dog\ntarget: find ( dog )\nsource: a cat\ntarget:"
        );
    }

    #[test]
    fn postprocess_truncates() {
        assert_eq!(postprocess(" answer(x)\nsource: what"), "answer(x)");
        assert_eq!(postprocess("answer(x)\n\nmore"), "answer(x)");
        assert_eq!(postprocess("answer(x)"), "answer(x)");
    }

    #[test]
    fn exact_match_normalizes_whitespace() {
        assert!(exact_match("find ( dog )", "find ( dog )"));
        assert!(exact_match("find  (  dog )", " find ( dog )"));
        assert!(!exact_match("find ( dog )", "find ( cat )"));
    }

    #[test]
    fn zero_parallelism_rejected() {
        let cfg = ClientConfig {
            parallelism: 0,
            ..Default::default()
        };
        assert!(matches!(CompletionClient::new(cfg), Err(Error::Config(_))));
    }
}
