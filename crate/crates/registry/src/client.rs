//! Blocking HTTP client for a registry service.

use std::time::Duration;

use reqwest::blocking::{Client as Http, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::server::{ConflictBody, ErrorBody, DIGEST_HEADER, PUBLISHER_HEADER};
use crate::store::{sha256_hex, Kind, QueryEntry, RecordMeta};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach registry: {0}")]
    Network(String),
    #[error("conflict: {message} (existing digest {existing}, attempted digest {attempted})")]
    Conflict { message: String, existing: String, attempted: String },
    #[error("rejected by registry: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("{0}")]
    NotFound(String),
    #[error("digest mismatch: registry announced {announced}, received bytes hash to {actual}")]
    Integrity { announced: String, actual: String },
    #[error("registry error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("unexpected response: {0}")]
    Protocol(String),
}

impl ClientError {
    /// Network and server-side failures, as opposed to problems with the request.
    pub fn is_transport(&self) -> bool {
        matches!(self, ClientError::Network(_) | ClientError::Server { .. } | ClientError::Protocol(_))
    }
}

impl From<reqwest::Error> for ClientError {
    fn from(e: reqwest::Error) -> Self {
        ClientError::Network(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: Http,
}

impl Client {
    pub fn new(base: &str) -> Result<Client, ClientError> {
        let http = Http::builder().timeout(Duration::from_secs(30)).build()?;
        Ok(Client { base: base.trim_end_matches('/').to_owned(), http })
    }

    fn url(&self, parts: &[&str]) -> String {
        let mut u = format!("{}/v1", self.base);
        for p in parts {
            u.push('/');
            u.push_str(p);
        }
        u
    }

    pub fn health(&self) -> Result<(), ClientError> {
        let r = self.http.get(self.url(&["health"])).send()?;
        expect_ok(r).map(drop)
    }

    /// Returns the record and whether it was newly created.
    pub fn publish(
        &self,
        kind: Kind,
        name: &str,
        version: &str,
        payload: &[u8],
        publisher: &str,
    ) -> Result<(RecordMeta, bool), ClientError> {
        let r = self
            .http
            .put(self.url(&[kind.plural(), name, version]))
            .header(PUBLISHER_HEADER, publisher)
            .body(payload.to_vec())
            .send()?;
        let created = r.status() == StatusCode::CREATED;
        let meta: RecordMeta = json(expect_ok(r)?)?;
        Ok((meta, created))
    }

    /// Payload bytes, verified against the digest the registry announces.
    pub fn fetch(&self, kind: Kind, name: &str, version: &str) -> Result<Vec<u8>, ClientError> {
        let r = expect_ok(self.http.get(self.url(&[kind.plural(), name, version])).send()?)?;
        let announced = r
            .headers()
            .get(DIGEST_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned)
            .ok_or_else(|| ClientError::Protocol(format!("missing {DIGEST_HEADER} header")))?;
        let bytes = r.bytes()?.to_vec();
        let actual = sha256_hex(&bytes);
        if actual != announced {
            return Err(ClientError::Integrity { announced, actual });
        }
        Ok(bytes)
    }

    pub fn versions(&self, kind: Kind, name: &str) -> Result<Vec<RecordMeta>, ClientError> {
        json(expect_ok(self.http.get(self.url(&[kind.plural(), name])).send()?)?)
    }

    pub fn query(&self, kind: Kind, prefix: Option<&str>, tag: Option<&str>) -> Result<Vec<QueryEntry>, ClientError> {
        let mut q = Vec::new();
        if let Some(p) = prefix {
            q.push(("prefix", p));
        }
        if let Some(t) = tag {
            q.push(("tag", t));
        }
        json(expect_ok(self.http.get(self.url(&[kind.plural()])).query(&q).send()?)?)
    }
}

fn json<T: DeserializeOwned>(r: Response) -> Result<T, ClientError> {
    let bytes = r.bytes()?;
    serde_json::from_slice(&bytes).map_err(|e| ClientError::Protocol(e.to_string()))
}

fn expect_ok(r: Response) -> Result<Response, ClientError> {
    let status = r.status();
    if status.is_success() {
        return Ok(r);
    }
    let bytes = r.bytes()?;
    Err(match status {
        StatusCode::CONFLICT => match serde_json::from_slice::<ConflictBody>(&bytes) {
            Ok(c) => {
                ClientError::Conflict { message: c.error, existing: c.existing_digest, attempted: c.attempted_digest }
            }
            Err(e) => ClientError::Protocol(e.to_string()),
        },
        _ => {
            let body: ErrorBody = serde_json::from_slice(&bytes).unwrap_or_else(|_| ErrorBody {
                error: String::from_utf8_lossy(&bytes).into_owned(),
                errors: Vec::new(),
            });
            match status {
                StatusCode::NOT_FOUND => ClientError::NotFound(body.error),
                StatusCode::BAD_REQUEST if !body.errors.is_empty() => ClientError::Validation(body.errors),
                StatusCode::BAD_REQUEST => ClientError::Validation(vec![body.error]),
                _ => ClientError::Server { status: status.as_u16(), message: body.error },
            }
        }
    })
}
