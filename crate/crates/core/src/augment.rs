//! Zero-shot augmentation: prompt construction, endpoint clients, and the
//! append-only answer cache.
//!
//! Each item is turned into a fixed prompt, sent to every configured
//! completion endpoint, and the raw responses are persisted one JSON record
//! per line so reruns are served from disk. Cleaning is applied when
//! reading, so cached raw text survives rule changes.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{normalize_whitespace, Item, ItemSet};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned HTTP {0}")]
    HttpStatus(u16),
    #[error("response body lacks a `text` field")]
    MalformedResponse,
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("no endpoints configured")]
    EmptyEndpoints,
    #[error("duplicate endpoint name `{0}`")]
    DuplicateEndpointName(String),
    #[error("item {item_num} via {llm_name}: {source}")]
    Query {
        item_num: i64,
        llm_name: String,
        source: QueryError,
    },
    #[error("no cached answer for item {item_num} via {llm_name}")]
    MissingCachedAnswer { item_num: i64, llm_name: String },
    #[error("cache record {line}: {message}")]
    BadCacheRecord { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One completion endpoint the augmenter talks to.
#[derive(Debug, Clone)]
pub struct LlmEndpointConfig {
    /// Unique short name, e.g. "falcon", "meditron", "mistral".
    pub name: String,
    pub base_url: String,
    pub model_id: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub timeout: Duration,
    /// Additional attempts after the first on transport errors and 5xx.
    pub max_retries: u32,
    pub auth_token: Option<String>,
}

impl LlmEndpointConfig {
    pub fn new(name: &str, base_url: &str, model_id: &str) -> Self {
        LlmEndpointConfig {
            name: name.to_string(),
            base_url: base_url.to_string(),
            model_id: model_id.to_string(),
            max_new_tokens: 64,
            temperature: 0.0,
            timeout: Duration::from_secs(30),
            max_retries: 3,
            auth_token: None,
        }
    }
}

/// A raw, uncleaned endpoint response.
#[derive(Debug, Clone)]
pub struct RawAnswer {
    pub item_num: i64,
    pub llm_name: String,
    pub text: String,
    /// Unix seconds at fetch time.
    pub fetched_at: u64,
    pub attempt_count: u32,
}

/// An item together with its cleaned per-endpoint answers, in configured
/// endpoint order.
#[derive(Debug, Clone)]
pub struct AugmentedItem {
    pub item: Item,
    pub llm_answers: Vec<(String, String)>,
}

impl AugmentedItem {
    /// Wraps an item with no LLM answers attached, for feature sets that do
    /// not need them.
    pub fn bare(item: Item) -> Self {
        AugmentedItem { item, llm_answers: Vec::new() }
    }

    pub fn answer_for(&self, llm_name: &str) -> Option<&str> {
        self.llm_answers
            .iter()
            .find(|(n, _)| n == llm_name)
            .map(|(_, a)| a.as_str())
    }
}

/// Builds the zero-shot prompt for an item. Output is deterministic and
/// lists only present options, in letter order.
pub fn build_prompt(item: &Item) -> String {
    let options: Vec<String> = item
        .answers
        .iter()
        .map(|(letter, text)| format!("{letter}.{text}"))
        .collect();
    format!(
        "You are a student taking the USMLE exam. Your task is to answer the following question with one of the multiple choices. \n\n{}\n\n{}",
        item.item_text,
        options.join(", \n")
    )
}

/// Replaces newlines with spaces, collapses whitespace runs, and trims.
pub fn clean_answer(raw: &str) -> String {
    normalize_whitespace(raw)
}

/// One line of the answer cache.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheRecord {
    pub item_num: i64,
    pub llm_name: String,
    pub model_id: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub raw_text: String,
    pub fetched_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    item_num: i64,
    llm_name: String,
    model_id: String,
    max_tokens: u32,
    temperature_bits: u64,
}

impl CacheKey {
    fn new(item_num: i64, cfg: &LlmEndpointConfig) -> Self {
        CacheKey {
            item_num,
            llm_name: cfg.name.clone(),
            model_id: cfg.model_id.clone(),
            max_tokens: cfg.max_new_tokens,
            temperature_bits: cfg.temperature.to_bits(),
        }
    }

    fn of_record(rec: &CacheRecord) -> Self {
        CacheKey {
            item_num: rec.item_num,
            llm_name: rec.llm_name.clone(),
            model_id: rec.model_id.clone(),
            max_tokens: rec.max_tokens,
            temperature_bits: rec.temperature.to_bits(),
        }
    }
}

/// Loads every record of a JSON-lines cache file. Later records win over
/// earlier ones with the same key, which is what append-only updates imply.
fn load_cache(path: &Path) -> Result<HashMap<CacheKey, CacheRecord>, AugmentError> {
    let mut map = HashMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let file = std::fs::File::open(path)?;
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CacheRecord =
            serde_json::from_str(&line).map_err(|e| AugmentError::BadCacheRecord {
                line: idx + 1,
                message: e.to_string(),
            })?;
        map.insert(CacheKey::of_record(&record), record);
    }
    Ok(map)
}

/// Serialized appender: whole records are written and flushed under one
/// lock so concurrent fetchers never interleave partial lines.
struct CacheWriter {
    file: Mutex<std::fs::File>,
}

impl CacheWriter {
    fn open(path: &Path) -> Result<Self, AugmentError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(CacheWriter { file: Mutex::new(file) })
    }

    fn append(&self, record: &CacheRecord) -> Result<(), AugmentError> {
        let mut line = serde_json::to_string(record).expect("cache record serializes");
        line.push('\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(line.as_bytes())?;
        file.flush()?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Issues one completion request with retries.
///
/// Transport errors and 5xx statuses are retried up to `cfg.max_retries`
/// additional attempts with exponential backoff (1s * 2^k plus jitter);
/// 4xx statuses are terminal.
pub fn query_llm(
    item_num: i64,
    prompt: &str,
    cfg: &LlmEndpointConfig,
) -> Result<RawAnswer, QueryError> {
    let agent = ureq::AgentBuilder::new().timeout(cfg.timeout).build();
    let url = format!("{}/generate", cfg.base_url.trim_end_matches('/'));
    let body = serde_json::json!({
        "model": cfg.model_id,
        "prompt": prompt,
        "max_tokens": cfg.max_new_tokens,
        "temperature": cfg.temperature,
    });

    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let mut request = agent.post(&url);
        if let Some(token) = &cfg.auth_token {
            request = request.set("Authorization", &format!("Bearer {token}"));
        }
        let outcome = match request.send_json(body.clone()) {
            Ok(response) => {
                let value: serde_json::Value = response
                    .into_json()
                    .map_err(|_| QueryError::MalformedResponse)?;
                let text = value
                    .get("text")
                    .and_then(serde_json::Value::as_str)
                    .ok_or(QueryError::MalformedResponse)?;
                return Ok(RawAnswer {
                    item_num,
                    llm_name: cfg.name.clone(),
                    text: text.to_string(),
                    fetched_at: unix_now(),
                    attempt_count: attempt,
                });
            }
            Err(ureq::Error::Status(code, _)) if (500..600).contains(&code) => {
                QueryError::HttpStatus(code)
            }
            Err(ureq::Error::Status(code, _)) => return Err(QueryError::HttpStatus(code)),
            Err(ureq::Error::Transport(t)) => {
                let message = t.to_string();
                if message.to_lowercase().contains("timed out")
                    || message.to_lowercase().contains("timeout")
                {
                    QueryError::Timeout
                } else {
                    QueryError::Transport(message)
                }
            }
        };
        if attempt > cfg.max_retries {
            return Err(outcome);
        }
        let base_ms = 1000u64.saturating_mul(1 << (attempt - 1).min(16));
        let jitter = rand::random::<u64>() % (base_ms / 4 + 1);
        std::thread::sleep(Duration::from_millis(base_ms + jitter));
    }
}

/// Tuning knobs for [`augment_dataset`].
#[derive(Debug, Clone)]
pub struct AugmentOptions {
    /// Concurrent requests allowed per endpoint.
    pub max_in_flight_per_endpoint: usize,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions { max_in_flight_per_endpoint: 4 }
    }
}

/// Result of an augmentation pass: the augmented items plus how many
/// answers came from the network vs. the cache.
#[derive(Debug)]
pub struct AugmentOutcome {
    pub items: Vec<AugmentedItem>,
    pub fetched: usize,
    pub cached: usize,
}

/// Ensures a cleaned answer exists for every (item, endpoint) pair.
///
/// Pairs present in the cache (matched on item number, endpoint name,
/// model id, and decoding parameters) are served from disk; the rest are
/// fetched concurrently, bounded per endpoint, and appended to the cache as
/// they arrive. On failure the error is annotated with the offending pair
/// and already-fetched answers remain in the cache.
pub fn augment_dataset(
    items: &ItemSet,
    cfgs: &[LlmEndpointConfig],
    cache_path: &Path,
) -> Result<AugmentOutcome, AugmentError> {
    augment_dataset_with(items, cfgs, cache_path, &AugmentOptions::default())
}

pub fn augment_dataset_with(
    items: &ItemSet,
    cfgs: &[LlmEndpointConfig],
    cache_path: &Path,
    opts: &AugmentOptions,
) -> Result<AugmentOutcome, AugmentError> {
    validate_endpoints(cfgs)?;
    if items.is_empty() {
        return Ok(AugmentOutcome { items: Vec::new(), fetched: 0, cached: 0 });
    }

    let mut cache = load_cache(cache_path)?;
    let mut pending: Vec<Vec<usize>> = vec![Vec::new(); cfgs.len()];
    let mut cached = 0usize;
    for (item_idx, item) in items.items.iter().enumerate() {
        for (cfg_idx, cfg) in cfgs.iter().enumerate() {
            if cache.contains_key(&CacheKey::new(item.item_num, cfg)) {
                cached += 1;
            } else {
                pending[cfg_idx].push(item_idx);
            }
        }
    }

    let fetched: usize = pending.iter().map(Vec::len).sum();
    if fetched > 0 {
        let writer = CacheWriter::open(cache_path)?;
        let fresh: Mutex<Vec<CacheRecord>> = Mutex::new(Vec::new());
        let first_error: Mutex<Option<AugmentError>> = Mutex::new(None);
        let cancelled = AtomicBool::new(false);
        let cursors: Vec<AtomicUsize> = cfgs.iter().map(|_| AtomicUsize::new(0)).collect();

        std::thread::scope(|scope| {
            for (cfg_idx, work) in pending.iter().enumerate() {
                if work.is_empty() {
                    continue;
                }
                let cfg = &cfgs[cfg_idx];
                let cursor = &cursors[cfg_idx];
                let workers = opts.max_in_flight_per_endpoint.max(1).min(work.len());
                for _ in 0..workers {
                    let writer = &writer;
                    let fresh = &fresh;
                    let first_error = &first_error;
                    let cancelled = &cancelled;
                    let set = &items.items;
                    scope.spawn(move || loop {
                        if cancelled.load(Ordering::Relaxed) {
                            break;
                        }
                        let slot = cursor.fetch_add(1, Ordering::Relaxed);
                        let Some(&item_idx) = work.get(slot) else { break };
                        let item = &set[item_idx];
                        let prompt = build_prompt(item);
                        match query_llm(item.item_num, &prompt, cfg) {
                            Ok(raw) => {
                                let record = CacheRecord {
                                    item_num: raw.item_num,
                                    llm_name: cfg.name.clone(),
                                    model_id: cfg.model_id.clone(),
                                    max_tokens: cfg.max_new_tokens,
                                    temperature: cfg.temperature,
                                    raw_text: raw.text,
                                    fetched_at: raw.fetched_at,
                                };
                                if let Err(e) = writer.append(&record) {
                                    *first_error.lock().unwrap() = Some(e);
                                    cancelled.store(true, Ordering::Relaxed);
                                    break;
                                }
                                fresh.lock().unwrap().push(record);
                            }
                            Err(source) => {
                                let mut guard = first_error.lock().unwrap();
                                if guard.is_none() {
                                    *guard = Some(AugmentError::Query {
                                        item_num: item.item_num,
                                        llm_name: cfg.name.clone(),
                                        source,
                                    });
                                }
                                cancelled.store(true, Ordering::Relaxed);
                                break;
                            }
                        }
                    });
                }
            }
        });

        if let Some(err) = first_error.into_inner().unwrap() {
            return Err(err);
        }
        for record in fresh.into_inner().unwrap() {
            cache.insert(CacheKey::of_record(&record), record);
        }
    }

    let augmented = items
        .items
        .iter()
        .map(|item| attach_answers(item, cfgs, &cache))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AugmentOutcome { items: augmented, fetched, cached })
}

/// Builds augmented items strictly from the cache, without any network
/// access. Fails when a required (item, endpoint) answer is absent.
pub fn augment_from_cache(
    items: &ItemSet,
    cfgs: &[LlmEndpointConfig],
    cache_path: &Path,
) -> Result<Vec<AugmentedItem>, AugmentError> {
    validate_endpoints(cfgs)?;
    let cache = load_cache(cache_path)?;
    items
        .items
        .iter()
        .map(|item| attach_answers(item, cfgs, &cache))
        .collect()
}

fn attach_answers(
    item: &Item,
    cfgs: &[LlmEndpointConfig],
    cache: &HashMap<CacheKey, CacheRecord>,
) -> Result<AugmentedItem, AugmentError> {
    let mut llm_answers = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let record = cache.get(&CacheKey::new(item.item_num, cfg)).ok_or_else(|| {
            AugmentError::MissingCachedAnswer {
                item_num: item.item_num,
                llm_name: cfg.name.clone(),
            }
        })?;
        llm_answers.push((cfg.name.clone(), clean_answer(&record.raw_text)));
    }
    Ok(AugmentedItem { item: item.clone(), llm_answers })
}

fn validate_endpoints(cfgs: &[LlmEndpointConfig]) -> Result<(), AugmentError> {
    if cfgs.is_empty() {
        return Err(AugmentError::EmptyEndpoints);
    }
    let mut seen = std::collections::HashSet::new();
    for cfg in cfgs {
        if !seen.insert(cfg.name.as_str()) {
            return Err(AugmentError::DuplicateEndpointName(cfg.name.clone()));
        }
    }
    Ok(())
}
