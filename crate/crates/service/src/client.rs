//! Blocking HTTP client behind the `rules`, `upload` and `sim --post`
//! commands.

use reqwest::blocking::{Client as Http, RequestBuilder, Response};
use reqwest::StatusCode;
use serde_json::Value;

use gaia_core::ingest::Reading;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status}: {body}")]
    Api { status: StatusCode, body: String },
}

pub struct Client {
    base: String,
    token: Option<String>,
    http: Http,
}

impl Client {
    pub fn new(base: &str, token: Option<String>) -> Self {
        Client {
            base: base.trim_end_matches('/').to_string(),
            token,
            http: Http::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, req: RequestBuilder) -> Result<Response, ClientError> {
        let req = match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req.send()?;
        if resp.status().is_success() {
            Ok(resp)
        } else {
            let status = resp.status();
            Err(ClientError::Api {
                status,
                body: resp.text().unwrap_or_default(),
            })
        }
    }

    fn json(&self, req: RequestBuilder) -> Result<Value, ClientError> {
        Ok(self.send(req)?.json()?)
    }

    /// Posts readings as one batch; the answer lists acks and per-item errors.
    pub fn post_readings(&self, readings: &[Reading]) -> Result<Value, ClientError> {
        self.json(self.http.post(self.url("/api/v1/readings")).json(readings))
    }

    pub fn list_rules(&self, path: &str) -> Result<Value, ClientError> {
        self.json(
            self.http
                .get(self.url(&format!("/api/v1/resources/{}/rules", path.trim_matches('/')))),
        )
    }

    pub fn put_rule(&self, path: &str, id: &str, body: &Value) -> Result<Value, ClientError> {
        let url = self.url(&format!("/api/v1/resources/{}/rules/{id}", path.trim_matches('/')));
        self.json(self.http.put(url).json(body))
    }

    pub fn delete_rule(&self, path: &str, id: &str) -> Result<(), ClientError> {
        let url = self.url(&format!("/api/v1/resources/{}/rules/{id}", path.trim_matches('/')));
        self.send(self.http.delete(url)).map(|_| ())
    }

    /// Uploads a `timestamp,value` CSV. `path` and `interval` describe the
    /// series when it does not exist yet.
    pub fn upload(
        &self,
        series: &str,
        csv: Vec<u8>,
        path: Option<&str>,
        interval: Option<u32>,
    ) -> Result<Value, ClientError> {
        let mut query: Vec<(&str, String)> = Vec::new();
        if let Some(p) = path {
            query.push(("path", p.to_string()));
        }
        if let Some(i) = interval {
            query.push(("interval", i.to_string()));
        }
        let req = self
            .http
            .post(self.url(&format!("/api/v1/uploads/{series}")))
            .query(&query)
            .header(reqwest::header::CONTENT_TYPE, "text/csv")
            .body(csv);
        self.json(req)
    }
}
