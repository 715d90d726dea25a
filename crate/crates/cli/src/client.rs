use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder, Response};
use serde_json::Value;
use url::Url;

use crate::error::{CliError, CliResult, Kind};

pub struct Api {
    base: Url,
    http: Client,
}

impl Api {
    pub fn new(server: &str) -> CliResult<Self> {
        let base = Url::parse(server).map_err(|e| CliError::input(format!("invalid server URL {server:?}: {e}")))?;
        if !matches!(base.scheme(), "http" | "https") || base.cannot_be_a_base() {
            return Err(CliError::input(format!("invalid server URL {server:?}: expected http(s)://host[:port]")));
        }
        let http = Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| CliError::new(Kind::Transport, e.to_string()))?;
        Ok(Self { base, http })
    }

    pub fn url(&self, path: &str) -> CliResult<Url> {
        self.base
            .join(path.trim_start_matches('/'))
            .map_err(|e| CliError::input(format!("bad path {path:?}: {e}")))
    }

    fn send(&self, req: RequestBuilder) -> CliResult<Response> {
        let resp = req
            .send()
            .map_err(|e| CliError::new(Kind::Transport, format!("cannot reach {}: {e}", self.base)))?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().unwrap_or_default();
        let message = match serde_json::from_str::<Value>(&text) {
            Ok(body) if body.get("error").is_some() => serde_json::to_string(&body).unwrap_or(text),
            _ => format!("HTTP {status}: {text}"),
        };
        Err(CliError::new(Kind::of_status(status.as_u16()), message))
    }

    pub fn get(&self, path: &str) -> CliResult<Response> {
        self.send(self.http.get(self.url(path)?))
    }

    pub fn get_json(&self, path: &str) -> CliResult<Value> {
        json_of(self.get(path)?)
    }

    pub fn post_json(&self, path: &str, body: &Value) -> CliResult<Value> {
        json_of(self.send(self.http.post(self.url(path)?).json(body))?)
    }

    pub fn post_empty(&self, path: &str) -> CliResult<Value> {
        json_of(self.send(self.http.post(self.url(path)?))?)
    }
}

fn json_of(resp: Response) -> CliResult<Value> {
    resp.json()
        .map_err(|e| CliError::new(Kind::Transport, format!("unreadable response: {e}")))
}

pub fn bytes_of(resp: Response) -> CliResult<Vec<u8>> {
    resp.bytes()
        .map(|b| b.to_vec())
        .map_err(|e| CliError::new(Kind::Transport, format!("download broke off: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn server_url_must_be_http() {
        assert!(Api::new("http://127.0.0.1:8080").is_ok());
        for bad in ["localhost:8080", "ftp://x", "not a url"] {
            assert_eq!(Api::new(bad).err().unwrap().kind, Kind::Input, "{bad}");
        }
    }

    #[test]
    fn paths_join_under_prefix() {
        let api = Api::new("http://h:1/base/").unwrap();
        assert_eq!(api.url("/v1/health").unwrap().as_str(), "http://h:1/base/v1/health");
    }
}
