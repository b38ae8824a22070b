use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::cache::rationale_cache_key;
use super::{
    cache_key, parse_binary_answer, parse_rationale_json, reasoning_text, render_prompt, render_rationale_prompt,
    CacheRecord, ChatBackend, ChatRequest, JudgeError, JudgeRequest, JudgeResponse, Rationale, RationaleRequest,
    RationaleVariant, RenderedPrompt, ResponseCache, DEFAULT_MAX_IMAGE_BYTES,
};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// Completion notice for one request, emitted as soon as it finishes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestStatus {
    pub index: usize,
    pub id: String,
    pub cache_key: Option<String>,
    pub ok: bool,
    pub cache_hit: bool,
    pub error: Option<String>,
}

/// Runs `f` over `items` with at most `workers` concurrent calls. Output order
/// matches input order.
pub(crate) fn run_bounded<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every slot filled")).collect()
}

/// Parsed rationale, parse warnings, and whether it came from the cache.
pub type GeneratedRationale = (Rationale, Vec<String>, bool);

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Cache-first judging front end. With no backend, cache misses fail with
/// [`JudgeError::NoEndpoint`].
pub struct Judge<'a> {
    backend: Option<&'a dyn ChatBackend>,
    cache: &'a ResponseCache,
    max_in_flight: usize,
    max_image_bytes: usize,
}

impl<'a> Judge<'a> {
    pub fn new(backend: Option<&'a dyn ChatBackend>, cache: &'a ResponseCache) -> Self {
        Judge { backend, cache, max_in_flight: DEFAULT_MAX_IN_FLIGHT, max_image_bytes: DEFAULT_MAX_IMAGE_BYTES }
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_max_image_bytes(mut self, n: usize) -> Self {
        self.max_image_bytes = n;
        self
    }

    fn fetch(
        &self,
        key: &str,
        model: &str,
        effort: Option<&str>,
        prompt: &RenderedPrompt,
        image: &Path,
    ) -> Result<(CacheRecord, bool), JudgeError> {
        if let Some(rec) = self.cache.get(key)? {
            return Ok((rec, true));
        }
        let backend = self.backend.ok_or(JudgeError::NoEndpoint)?;
        let chat = ChatRequest::new(model, effort, prompt, image, self.max_image_bytes)?;
        let started = Instant::now();
        let reply = backend.complete(&chat)?;
        let rec = CacheRecord {
            key: key.to_string(),
            request_digest: chat.digest(),
            model: model.to_string(),
            raw_text: reply.text,
            reasoning_text: reply.reasoning,
            latency_ms: started.elapsed().as_millis() as u64,
            attempts: reply.attempts,
            created_unix: now_unix(),
        };
        self.cache.put(&rec)?;
        Ok((rec, false))
    }

    pub fn judge(&self, request: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let cfg = &request.config;
        let prompt =
            render_prompt(cfg, &request.record, request.key_objects.as_deref(), request.rationale.as_ref())?;
        let key = cache_key(request)?;
        let (rec, hit) = self.fetch(
            &key,
            &cfg.model_name,
            cfg.reasoning_effort.as_deref(),
            &prompt,
            Path::new(&request.record.image_path),
        )?;
        Ok(JudgeResponse {
            parsed: parse_binary_answer(&rec.raw_text, cfg.mode),
            reasoning_text: reasoning_text(&rec.raw_text, cfg.mode).or(rec.reasoning_text),
            raw_text: rec.raw_text,
            latency_ms: rec.latency_ms,
            cache_hit: hit,
            cache_key: key,
            degraded: prompt.degraded,
        })
    }

    /// Judges every request under the in-flight ceiling. `on_done` fires once
    /// per request as it completes, in completion order.
    pub fn judge_all(
        &self,
        requests: &[JudgeRequest],
        on_done: &(dyn Fn(&RequestStatus) + Sync),
    ) -> Vec<Result<JudgeResponse, JudgeError>> {
        run_bounded(requests, self.max_in_flight, |i, req| {
            let r = self.judge(req);
            on_done(&RequestStatus {
                index: i,
                id: req.record.id.clone(),
                cache_key: r.as_ref().ok().map(|x| x.cache_key.clone()),
                ok: r.is_ok(),
                cache_hit: r.as_ref().is_ok_and(|x| x.cache_hit),
                error: r.as_ref().err().map(|e| e.to_string()),
            });
            r
        })
    }

    /// Generates (or replays) one key-object rationale. Returns the rationale,
    /// parse warnings and whether the reply came from cache.
    pub fn generate_rationale(
        &self,
        request: &RationaleRequest,
    ) -> Result<GeneratedRationale, JudgeError> {
        let prompt =
            render_rationale_prompt(request.variant, &request.record.message, &request.key_objects, request.label)?;
        let key = rationale_cache_key(request)?;
        let (rec, hit) = self.fetch(
            &key,
            &request.model_name,
            request.reasoning_effort.as_deref(),
            &prompt,
            Path::new(&request.record.image_path),
        )?;
        let (mut rationale, warnings) = parse_rationale_json(&rec.raw_text, &request.key_objects)?;
        rationale.label_informed = request.variant == RationaleVariant::Informed;
        Ok((rationale, warnings, hit))
    }

    pub fn generate_all(
        &self,
        requests: &[RationaleRequest],
        on_done: &(dyn Fn(&RequestStatus) + Sync),
    ) -> Vec<Result<GeneratedRationale, JudgeError>> {
        run_bounded(requests, self.max_in_flight, |i, req| {
            let r = self.generate_rationale(req);
            on_done(&RequestStatus {
                index: i,
                id: req.record.id.clone(),
                cache_key: None,
                ok: r.is_ok(),
                cache_hit: r.as_ref().is_ok_and(|x| x.2),
                error: r.as_ref().err().map(|e| e.to_string()),
            });
            r
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ImageRecord;
    use crate::judge::{ChatReply, Mode, Parsed, PromptConfig};
    use std::sync::atomic::AtomicUsize;

    struct Canned {
        calls: AtomicUsize,
        live: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatBackend for Canned {
        fn complete(&self, req: &ChatRequest) -> Result<ChatReply, JudgeError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(5));
            self.live.fetch_sub(1, Ordering::SeqCst);
            let text = if req.user.contains("Mes: odd") { "[[no]]" } else { "[[yes]]" };
            Ok(ChatReply { text: text.into(), reasoning: None, attempts: 1 })
        }
    }

    #[test]
    fn bounded_cached_judging() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path().join("cache")).unwrap();
        let backend = Canned { calls: AtomicUsize::new(0), live: AtomicUsize::new(0), peak: AtomicUsize::new(0) };
        let reqs: Vec<JudgeRequest> = (0..12)
            .map(|i| {
                let p = dir.path().join(format!("{i}.png"));
                std::fs::write(&p, format!("img{i}")).unwrap();
                JudgeRequest::new(
                    ImageRecord::new(i.to_string(), p.to_str().unwrap(), format!("m{i}")),
                    PromptConfig::new(Mode::Baseline, "m"),
                )
            })
            .collect();
        let judge = Judge::new(Some(&backend), &cache).with_max_in_flight(3);
        let seen = AtomicUsize::new(0);
        let first = judge.judge_all(&reqs, &|_| {
            seen.fetch_add(1, Ordering::SeqCst);
        });
        assert_eq!(seen.load(Ordering::SeqCst), 12);
        assert!(backend.peak.load(Ordering::SeqCst) <= 3);
        assert!(first.iter().all(|r| r.as_ref().unwrap().parsed == Parsed::High && !r.as_ref().unwrap().cache_hit));
        let second = judge.judge_all(&reqs, &|_| {});
        assert_eq!(backend.calls.load(Ordering::SeqCst), 12);
        assert!(second.iter().all(|r| r.as_ref().unwrap().cache_hit));
        let offline = Judge::new(None, &cache);
        assert!(offline.judge(&reqs[0]).unwrap().cache_hit);
    }
}
