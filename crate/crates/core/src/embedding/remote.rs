use std::sync::Arc;

use serde::Deserialize;

use super::{Embedder, ProviderError};
use crate::http::{send_with_retry, RetryPolicy, Transport};

/// Embedder served over HTTP: `POST {"texts": [...]}` → `{"vectors": [[...], ...]}`.
pub struct RemoteEmbedder {
    transport: Arc<dyn Transport>,
    url: String,
    retry: RetryPolicy,
    batch_size: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

impl RemoteEmbedder {
    pub fn new(transport: Arc<dyn Transport>, url: impl Into<String>, retry: RetryPolicy, batch_size: usize) -> Self {
        Self {
            transport,
            url: url.into(),
            retry,
            batch_size: batch_size.max(1),
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let body = serde_json::json!({ "texts": texts });
        let resp = send_with_retry(&self.retry, || self.transport.post_json(&self.url, &body))
            .map_err(|e| ProviderError::Failed(e.to_string()))?;
        let parsed: EmbedResponse =
            serde_json::from_slice(&resp.body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        Ok(parsed.vectors)
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{embed, EmbedError, EMBEDDING_DIM};
    use crate::http::{HttpResponse, TransportError};
    use std::sync::Mutex;

    struct Scripted {
        requests: Mutex<Vec<serde_json::Value>>,
        dim: usize,
    }

    impl Transport for Scripted {
        fn get(&self, _url: &str) -> Result<HttpResponse, TransportError> {
            unreachable!()
        }

        fn post_json(&self, _url: &str, body: &serde_json::Value) -> Result<HttpResponse, TransportError> {
            self.requests.lock().unwrap().push(body.clone());
            let n = body["texts"].as_array().unwrap().len();
            let vectors: Vec<Vec<f32>> = (0..n)
                .map(|i| {
                    let mut v = vec![0.0; self.dim];
                    v[i % self.dim] = 2.0;
                    v
                })
                .collect();
            Ok(HttpResponse::ok(
                serde_json::to_vec(&serde_json::json!({ "vectors": vectors })).unwrap(),
            ))
        }
    }

    #[test]
    fn posts_texts_and_normalizes_reply() {
        let t = Arc::new(Scripted {
            requests: Mutex::new(vec![]),
            dim: EMBEDDING_DIM,
        });
        let e = RemoteEmbedder::new(t.clone(), "http://embedder/embed", RetryPolicy::immediate(0), 2);
        let texts: Vec<String> = ["[SCHOLAR] a", "[SCHOLAR] b", "[SCHOLAR] c"].map(String::from).to_vec();
        let out = embed(&texts, &e).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].as_slice()[0], 1.0);
        let reqs = t.requests.lock().unwrap();
        assert_eq!(reqs.len(), 2);
    }

    #[test]
    fn wrong_dimension_from_remote_is_fatal() {
        let t = Arc::new(Scripted {
            requests: Mutex::new(vec![]),
            dim: 768,
        });
        let e = RemoteEmbedder::new(t, "http://embedder/embed", RetryPolicy::immediate(0), 8);
        let err = embed(&["x".to_string()], &e).unwrap_err();
        assert!(matches!(err, EmbedError::DimensionMismatch { found: 768, .. }));
    }
}
