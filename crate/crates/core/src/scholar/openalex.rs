//! OpenAlex `/works` client with cursor pagination, disk caching and a
//! shared rate limiter.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::Url;

use super::abstract_index::{reconstruct_abstract, InvertedIndex};
use super::publication::{DocType, Publication};
use super::FetchWindow;
use crate::http::{send_with_retry, HttpResponse, RequestError, RetryPolicy, Transport, TransportError};

pub const OPENALEX_BASE: &str = "https://api.openalex.org";
pub const OPENALEX_ID_PREFIX: &str = "https://openalex.org/";
pub const MAILTO_ENV: &str = "OPENALEX_MAILTO";
pub const START_CURSOR: &str = "*";

/// Strips the `https://openalex.org/` prefix if present.
pub fn short_id(id: &str) -> &str {
    id.strip_prefix(OPENALEX_ID_PREFIX).unwrap_or(id)
}

/// `I` followed by one or more digits, optionally in URL form.
pub fn is_institution_id(id: &str) -> bool {
    let s = short_id(id.trim());
    s.len() > 1 && s.starts_with('I') && s[1..].bytes().all(|b| b.is_ascii_digit())
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("{0:?} is not an OpenAlex institution id")]
    InvalidInstitution(String),
    #[error("request to {url} failed: {source}")]
    Request {
        url: String,
        #[source]
        source: RequestError,
    },
    #[error("cannot decode response from {url}: {message}")]
    Decode { url: String, message: String },
    #[error("cursor loop detected: {cursor:?} was already visited")]
    CursorLoop { cursor: String },
}

#[derive(Deserialize)]
struct Page {
    meta: PageMeta,
    #[serde(default)]
    results: Vec<RawWork>,
}

#[derive(Deserialize)]
struct PageMeta {
    next_cursor: Option<String>,
}

#[derive(Deserialize)]
pub struct RawWork {
    pub id: String,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub display_name: Option<String>,
    #[serde(default)]
    pub publication_year: Option<i32>,
    #[serde(default, rename = "type")]
    pub work_type: Option<String>,
    #[serde(default)]
    pub abstract_inverted_index: Option<InvertedIndex>,
    #[serde(default)]
    pub authorships: Vec<RawAuthorship>,
    #[serde(default)]
    pub is_paratext: bool,
    #[serde(default)]
    pub is_retracted: bool,
}

#[derive(Deserialize)]
pub struct RawAuthorship {
    #[serde(default)]
    pub author: Option<RawRef>,
    #[serde(default)]
    pub institutions: Vec<RawRef>,
}

#[derive(Deserialize)]
pub struct RawRef {
    #[serde(default)]
    pub id: Option<String>,
}

fn push_unique(out: &mut Vec<String>, id: &str) {
    let id = short_id(id).to_string();
    if !out.contains(&id) {
        out.push(id);
    }
}

impl RawWork {
    pub fn into_publication(self) -> Publication {
        let mut author_ids = Vec::new();
        let mut institution_ids = Vec::new();
        for a in &self.authorships {
            if let Some(id) = a.author.as_ref().and_then(|r| r.id.as_deref()) {
                push_unique(&mut author_ids, id);
            }
            for inst in &a.institutions {
                if let Some(id) = inst.id.as_deref() {
                    push_unique(&mut institution_ids, id);
                }
            }
        }
        Publication {
            id: short_id(&self.id).to_string(),
            title: self.title.or(self.display_name).unwrap_or_default(),
            abstract_text: self.abstract_inverted_index.as_ref().and_then(reconstruct_abstract),
            year: self.publication_year.unwrap_or_default(),
            doc_type: DocType::from_openalex(self.work_type.as_deref().unwrap_or("other")),
            author_ids,
            institution_ids,
            is_paratext: self.is_paratext,
            is_retracted: self.is_retracted,
        }
        .normalize_abstract()
    }
}

/// One fetched page, handed to the caller before the next request so the
/// cursor can be persisted for resumption.
#[derive(Debug)]
pub struct FetchedPage {
    pub cursor: String,
    pub next_cursor: Option<String>,
    pub works: Vec<Publication>,
}

pub struct OpenAlexClient {
    transport: Arc<dyn Transport>,
    base_url: String,
    mailto: Option<String>,
    per_page: u32,
    retry: RetryPolicy,
    limiter: Option<Arc<TokenBucket>>,
}

impl OpenAlexClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self {
            transport,
            base_url: OPENALEX_BASE.to_string(),
            mailto: std::env::var(MAILTO_ENV).ok().filter(|m| !m.trim().is_empty()),
            per_page: 200,
            retry: RetryPolicy::default(),
            limiter: None,
        }
    }

    pub fn with_base_url(mut self, base: impl Into<String>) -> Self {
        self.base_url = base.into().trim_end_matches('/').to_string();
        self
    }

    pub fn with_mailto(mut self, mailto: Option<String>) -> Self {
        self.mailto = mailto;
        self
    }

    pub fn with_per_page(mut self, per_page: u32) -> Self {
        self.per_page = per_page.clamp(1, 200);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_limiter(mut self, limiter: Arc<TokenBucket>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn works_url(&self, institution_id: &str, window: FetchWindow, cursor: &str) -> String {
        let filter = format!(
            "institutions.id:{},from_publication_date:{}-01-01,to_publication_date:{}-12-31",
            short_id(institution_id.trim()),
            window.from_year(),
            window.to_year()
        );
        let per_page = self.per_page.to_string();
        let mut params = vec![
            ("filter", filter.as_str()),
            ("per-page", per_page.as_str()),
            ("cursor", cursor),
        ];
        if let Some(m) = &self.mailto {
            params.push(("mailto", m.as_str()));
        }
        Url::parse_with_params(&format!("{}/works", self.base_url), &params)
            .expect("base url is valid")
            .to_string()
    }

    fn get(&self, url: &str) -> Result<HttpResponse, FetchError> {
        send_with_retry(&self.retry, || {
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            self.transport.get(url)
        })
        .map_err(|source| FetchError::Request {
            url: url.to_string(),
            source,
        })
    }

    /// Walks pages starting at `cursor` (use [`START_CURSOR`] for a fresh
    /// fetch), calling `on_page` after each one. Stops when the API returns
    /// no next cursor or an empty page.
    pub fn fetch_pages<F>(
        &self,
        institution_id: &str,
        window: FetchWindow,
        cursor: &str,
        mut on_page: F,
    ) -> Result<(), FetchError>
    where
        F: FnMut(&FetchedPage) -> Result<(), FetchError>,
    {
        if !is_institution_id(institution_id) {
            return Err(FetchError::InvalidInstitution(institution_id.to_string()));
        }
        let mut seen = HashSet::new();
        let mut cursor = cursor.to_string();
        loop {
            if !seen.insert(cursor.clone()) {
                return Err(FetchError::CursorLoop { cursor });
            }
            let url = self.works_url(institution_id, window, &cursor);
            let resp = self.get(&url)?;
            let page: Page = serde_json::from_slice(&resp.body).map_err(|e| FetchError::Decode {
                url: url.clone(),
                message: e.to_string(),
            })?;
            let empty = page.results.is_empty();
            let fetched = FetchedPage {
                cursor: cursor.clone(),
                next_cursor: page.meta.next_cursor.filter(|c| !c.is_empty()),
                works: page.results.into_iter().map(RawWork::into_publication).collect(),
            };
            tracing::debug!(institution_id, cursor = %fetched.cursor, n = fetched.works.len(), "openalex page");
            on_page(&fetched)?;
            match fetched.next_cursor {
                Some(next) if !empty => cursor = next,
                _ => return Ok(()),
            }
        }
    }

    /// All works for one institution in the window, in API order, with
    /// repeated ids dropped.
    pub fn fetch_institution_works(
        &self,
        institution_id: &str,
        window: FetchWindow,
    ) -> Result<Vec<Publication>, FetchError> {
        self.fetch_from_cursor(institution_id, window, START_CURSOR)
    }

    pub fn fetch_from_cursor(
        &self,
        institution_id: &str,
        window: FetchWindow,
        cursor: &str,
    ) -> Result<Vec<Publication>, FetchError> {
        let mut ids = HashSet::new();
        let mut out = Vec::new();
        self.fetch_pages(institution_id, window, cursor, |page| {
            for w in &page.works {
                if ids.insert(w.id.clone()) {
                    out.push(w.clone());
                }
            }
            Ok(())
        })?;
        Ok(out)
    }
}

/// Thread-safe token bucket shared by concurrent fetchers.
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: u32, per_second: f64) -> Self {
        assert!(
            capacity > 0 && per_second > 0.0,
            "token bucket needs positive capacity and rate"
        );
        Self {
            capacity: capacity as f64,
            per_second,
            state: Mutex::new((capacity as f64, Instant::now())),
        }
    }

    /// Takes a token if one is available.
    pub fn try_acquire(&self) -> bool {
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let now = Instant::now();
        s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.per_second).min(self.capacity);
        s.1 = now;
        if s.0 >= 1.0 {
            s.0 -= 1.0;
            true
        } else {
            false
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        while !self.try_acquire() {
            thread::sleep(Duration::from_secs_f64((1.0 / self.per_second).min(0.05)));
        }
    }
}

/// Cache file for a request URL: hex SHA-256 of the URL plus `.json`.
pub fn cache_path(dir: &Path, url: &str) -> PathBuf {
    dir.join(format!("{}.json", hex::encode(Sha256::digest(url.as_bytes()))))
}

/// Serves GETs from a directory of cached bodies, filling it on misses.
/// Only successful responses are stored.
pub struct CachingTransport {
    inner: Arc<dyn Transport>,
    dir: PathBuf,
}

impl CachingTransport {
    pub fn new(inner: Arc<dyn Transport>, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    fn store(&self, path: &Path, body: &[u8]) -> std::io::Result<()> {
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(body)?;
        f.sync_all()?;
        fs::rename(tmp, path)
    }
}

impl Transport for CachingTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        let path = cache_path(&self.dir, url);
        if let Ok(body) = fs::read(&path) {
            return Ok(HttpResponse::ok(body));
        }
        let resp = self.inner.get(url)?;
        if resp.is_success() {
            if let Err(e) = self.store(&path, &resp.body) {
                tracing::warn!(path = %path.display(), error = %e, "cannot write cache entry");
            }
        }
        Ok(resp)
    }

    fn post_json(&self, url: &str, body: &serde_json::Value) -> Result<HttpResponse, TransportError> {
        self.inner.post_json(url, body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::collections::HashMap;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Replays canned pages keyed by the `cursor` query parameter.
    struct Recorded {
        pages: HashMap<String, (u16, String)>,
        calls: AtomicUsize,
        urls: Mutex<Vec<String>>,
    }

    impl Recorded {
        fn new(pages: Vec<(&str, u16, serde_json::Value)>) -> Self {
            Self {
                pages: pages
                    .into_iter()
                    .map(|(c, s, b)| (c.to_string(), (s, b.to_string())))
                    .collect(),
                calls: AtomicUsize::new(0),
                urls: Mutex::new(Vec::new()),
            }
        }
    }

    impl Transport for Recorded {
        fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.urls.lock().unwrap().push(url.to_string());
            let parsed = Url::parse(url).unwrap();
            let cursor = parsed
                .query_pairs()
                .find(|(k, _)| k == "cursor")
                .unwrap()
                .1
                .into_owned();
            let (status, body) = self.pages.get(&cursor).cloned().unwrap_or((404, "no page".into()));
            Ok(HttpResponse {
                status,
                body: body.into_bytes(),
            })
        }
        fn post_json(&self, _: &str, _: &serde_json::Value) -> Result<HttpResponse, TransportError> {
            unreachable!()
        }
    }

    fn raw_work(i: usize) -> serde_json::Value {
        json!({
            "id": format!("https://openalex.org/W{i}"),
            "title": format!("Work {i}"),
            "publication_year": 2021,
            "type": "article",
            "abstract_inverted_index": {"policy": [0], "evidence": [1], "matters": [2], "greatly": [3]},
            "authorships": [
                {"author": {"id": "https://openalex.org/A1"}, "institutions": [{"id": "https://openalex.org/I45129253"}]},
                {"author": {"id": "https://openalex.org/A2"}, "institutions": [{"id": "https://openalex.org/I45129253"}]}
            ],
            "is_paratext": false,
            "is_retracted": false
        })
    }

    fn page(range: std::ops::Range<usize>, next: Option<&str>) -> serde_json::Value {
        json!({"meta": {"next_cursor": next, "count": 287}, "results": range.map(raw_work).collect::<Vec<_>>()})
    }

    fn client(t: Arc<dyn Transport>) -> OpenAlexClient {
        OpenAlexClient::new(t)
            .with_base_url("http://openalex.test")
            .with_mailto(Some("ops@example.org".into()))
            .with_retry(RetryPolicy::immediate(1))
    }

    #[test]
    fn two_page_fixture_yields_all_works() {
        let t = Arc::new(Recorded::new(vec![
            ("*", 200, page(0..250, Some("c2"))),
            ("c2", 200, page(250..287, None)),
        ]));
        let works = client(t.clone())
            .fetch_institution_works("I45129253", FetchWindow::default())
            .unwrap();
        assert_eq!(works.len(), 287);
        assert_eq!(works[0].id, "W0");
        assert_eq!(works[286].id, "W286");
        assert_eq!(works[0].author_ids, ["A1", "A2"]);
        assert_eq!(works[0].institution_ids, ["I45129253"]);
        assert_eq!(works[0].doc_type, DocType::JournalArticle);
        assert_eq!(
            works[0].abstract_text.as_deref(),
            Some("policy evidence matters greatly")
        );
        assert_eq!(t.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn empty_result_set_is_not_an_error() {
        let t = Arc::new(Recorded::new(vec![(
            "*",
            200,
            json!({"meta": {"next_cursor": null}, "results": []}),
        )]));
        assert!(client(t)
            .fetch_institution_works("I1", FetchWindow::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn repeated_cursor_is_detected() {
        let t = Arc::new(Recorded::new(vec![
            ("*", 200, page(0..2, Some("c2"))),
            ("c2", 200, page(2..4, Some("c2"))),
        ]));
        let err = client(t)
            .fetch_institution_works("I1", FetchWindow::default())
            .unwrap_err();
        assert!(
            matches!(err, FetchError::CursorLoop { ref cursor } if cursor == "c2"),
            "{err}"
        );
    }

    #[test]
    fn client_error_is_permanent_with_body() {
        let t = Arc::new(Recorded::new(vec![("*", 403, json!({"error": "forbidden"}))]));
        let err = client(t.clone())
            .fetch_institution_works("I1", FetchWindow::default())
            .unwrap_err();
        match err {
            FetchError::Request {
                source: RequestError::Permanent { status, body },
                ..
            } => {
                assert_eq!(status, 403);
                assert!(body.contains("forbidden"));
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn server_errors_are_retried_then_reported() {
        let t = Arc::new(Recorded::new(vec![("*", 502, json!({}))]));
        let err = client(t.clone())
            .fetch_institution_works("I1", FetchWindow::default())
            .unwrap_err();
        assert!(matches!(
            err,
            FetchError::Request {
                source: RequestError::Exhausted { attempts: 2, .. },
                ..
            }
        ));
        assert_eq!(t.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn resuming_from_persisted_cursor_fetches_suffix_only() {
        let t = Arc::new(Recorded::new(vec![
            ("*", 200, page(0..3, Some("c2"))),
            ("c2", 200, page(3..5, Some("c3"))),
            ("c3", 200, page(5..6, None)),
        ]));
        let c = client(t.clone());
        let mut persisted = None;
        let mut first = Vec::new();
        // Simulate a crash after the first page has been processed.
        let err = c.fetch_pages("I1", FetchWindow::default(), START_CURSOR, |p| {
            first.extend(p.works.iter().map(|w| w.id.clone()));
            persisted = p.next_cursor.clone();
            Err(FetchError::Decode {
                url: String::new(),
                message: "interrupted".into(),
            })
        });
        assert!(err.is_err());
        let rest = c
            .fetch_from_cursor("I1", FetchWindow::default(), persisted.as_deref().unwrap())
            .unwrap();
        let rest: Vec<_> = rest.into_iter().map(|w| w.id).collect();
        assert_eq!(first, ["W0", "W1", "W2"]);
        assert_eq!(rest, ["W3", "W4", "W5"]);
    }

    #[test]
    fn request_url_carries_filters_and_mailto() {
        let c = client(Arc::new(Recorded::new(vec![])));
        let url = c.works_url(
            "https://openalex.org/I45129253",
            FetchWindow::new(2020, 2025).unwrap(),
            "*",
        );
        let parsed = Url::parse(&url).unwrap();
        let q: HashMap<_, _> = parsed.query_pairs().into_owned().collect();
        assert_eq!(
            q["filter"],
            "institutions.id:I45129253,from_publication_date:2020-01-01,to_publication_date:2025-12-31"
        );
        assert_eq!(q["per-page"], "200");
        assert_eq!(q["cursor"], "*");
        assert_eq!(q["mailto"], "ops@example.org");
    }

    #[test]
    fn institution_id_validation() {
        assert!(is_institution_id("I45129253"));
        assert!(is_institution_id("https://openalex.org/I45129253"));
        assert!(!is_institution_id("W123"));
        assert!(!is_institution_id("I"));
        assert!(!is_institution_id("University College London"));
        let t = Arc::new(Recorded::new(vec![]));
        assert!(matches!(
            client(t).fetch_institution_works("UCL", FetchWindow::default()),
            Err(FetchError::InvalidInstitution(_))
        ));
    }

    #[test]
    fn raw_work_mapping_handles_sparse_records() {
        let w: RawWork = serde_json::from_value(json!({
            "id": "https://openalex.org/W9",
            "display_name": "Fallback title",
            "type": "dataset",
            "abstract_inverted_index": {"tiny": [0]},
            "is_retracted": true
        }))
        .unwrap();
        let p = w.into_publication();
        assert_eq!(p.id, "W9");
        assert_eq!(p.title, "Fallback title");
        assert_eq!(p.doc_type, DocType::Other);
        assert_eq!(p.abstract_text, None);
        assert!(p.is_retracted);
    }

    #[test]
    fn cache_serves_second_request_offline() {
        let dir = tempfile::tempdir().unwrap();
        let inner = Arc::new(Recorded::new(vec![
            ("*", 200, page(0..2, None)),
            ("bad", 500, json!({})),
        ]));
        let cached: Arc<dyn Transport> = Arc::new(CachingTransport::new(inner.clone(), dir.path()).unwrap());
        let c = client(cached.clone());
        let a = c.fetch_institution_works("I1", FetchWindow::default()).unwrap();
        let b = c.fetch_institution_works("I1", FetchWindow::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(inner.calls.load(Ordering::SeqCst), 1);
        let url = c.works_url("I1", FetchWindow::default(), "*");
        assert!(cache_path(dir.path(), &url).exists());

        // Failures are not cached.
        let bad_url = "http://openalex.test/works?cursor=bad";
        assert_eq!(cached.get(bad_url).unwrap().status, 500);
        assert!(!cache_path(dir.path(), bad_url).exists());
    }

    #[test]
    fn cache_file_name_is_url_digest() {
        let p = cache_path(Path::new("/c"), "abc");
        assert_eq!(
            p,
            Path::new("/c/ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad.json")
        );
    }

    #[test]
    fn token_bucket_limits_burst() {
        let b = TokenBucket::new(3, 0.001);
        assert!(b.try_acquire() && b.try_acquire() && b.try_acquire());
        assert!(!b.try_acquire());
        let fast = TokenBucket::new(1, 1000.0);
        let start = Instant::now();
        for _ in 0..5 {
            fast.acquire();
        }
        assert!(start.elapsed() < Duration::from_secs(2));
    }
}
