//! Issue download from a JIRA instance through its REST search endpoint.

use std::thread::sleep;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{parse_timestamp, IssueRecord};
use crate::error::{Error, Result};

pub const SEARCH_PATH: &str = "/rest/api/2/search";
pub const MAX_RETRIES: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub base_url: String,
    pub jql: String,
    /// Field id holding story points, e.g. `customfield_10002`.
    pub story_point_field: String,
    pub page_size: usize,
    pub max_issues: Option<usize>,
    #[serde(skip_serializing)]
    pub auth_token: Option<String>,
    /// Requests per second.
    pub rate_limit: f64,
    pub timeout_secs: f64,
    /// First retry delay; doubled on each further retry.
    pub backoff_base_secs: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            base_url: String::new(),
            jql: String::new(),
            story_point_field: "customfield_10002".into(),
            page_size: 100,
            max_issues: None,
            auth_token: None,
            rate_limit: 2.0,
            timeout_secs: 30.0,
            backoff_base_secs: 1.0,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        let url = self.base_url.to_ascii_lowercase();
        if !(url.starts_with("http://") || url.starts_with("https://")) || url.len() <= "https://".len() {
            return Err(Error::InvalidArgument(format!(
                "base_url must be an absolute http(s) URL, got {:?}",
                self.base_url
            )));
        }
        if !(1..=1000).contains(&self.page_size) {
            return Err(Error::InvalidArgument(format!("page_size {} not in 1..=1000", self.page_size)));
        }
        if !(self.rate_limit > 0.0) || !(self.timeout_secs > 0.0) || !(self.backoff_base_secs >= 0.0) {
            return Err(Error::InvalidArgument(
                "rate_limit and timeout must be > 0, backoff >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Records dropped during ingest, by issue key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    pub non_numeric_points: Vec<String>,
    /// Issues lacking a key, title or parsable creation time.
    pub malformed: Vec<String>,
}

impl SkipReport {
    pub fn total(&self) -> usize {
        self.non_numeric_points.len() + self.malformed.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOutcome {
    pub records: Vec<IssueRecord>,
    pub skipped: SkipReport,
    pub requests: usize,
}

/// Token bucket holding at most one token: consecutive requests are at
/// least `1/rate` seconds apart.
struct RateLimiter {
    interval: Duration,
    next: Option<Instant>,
}

impl RateLimiter {
    fn new(rate: f64) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / rate),
            next: None,
        }
    }

    fn acquire(&mut self) {
        let now = Instant::now();
        if let Some(t) = self.next {
            if t > now {
                sleep(t - now);
            }
        }
        self.next = Some(Instant::now() + self.interval);
    }
}

enum Attempt {
    Done(String),
    Transient(String),
}

fn get_once(agent: &ureq::Agent, cfg: &IngestConfig, start_at: usize, max_results: usize) -> Result<Attempt> {
    let url = format!("{}{SEARCH_PATH}", cfg.base_url.trim_end_matches('/'));
    let fields = format!("summary,description,created,project,{}", cfg.story_point_field);
    let mut req = agent
        .get(&url)
        .query("jql", &cfg.jql)
        .query("startAt", start_at.to_string())
        .query("maxResults", max_results.to_string())
        .query("fields", &fields)
        .header("Accept", "application/json");
    if let Some(token) = &cfg.auth_token {
        req = req.header("Authorization", format!("Bearer {token}"));
    }
    match req.call() {
        Ok(mut resp) => {
            let status = resp.status().as_u16();
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            match status {
                200..=299 => Ok(Attempt::Done(body)),
                500..=599 => Ok(Attempt::Transient(format!("HTTP {status}"))),
                _ => Err(Error::AuthOrQuery {
                    status,
                    message: server_message(&body),
                }),
            }
        }
        Err(e @ (ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed)) => {
            Ok(Attempt::Transient(e.to_string()))
        }
        Err(e) => Err(Error::Transport(e.to_string())),
    }
}

/// JIRA error bodies carry `errorMessages`; fall back to the raw text.
fn server_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| {
            v.get("errorMessages")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_str).collect::<Vec<_>>().join("; "))
        })
        .filter(|m| !m.is_empty())
        .unwrap_or_else(|| body.trim().to_string())
}

fn points_value(v: Option<&Value>) -> std::result::Result<Option<f64>, ()> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n.as_f64().filter(|x| x.is_finite()).map(Some).ok_or(()),
        Some(Value::String(s)) => s.trim().parse::<f64>().ok().filter(|x| x.is_finite()).map(Some).ok_or(()),
        Some(_) => Err(()),
    }
}

/// Maps one search hit to a record, or to the reason it was skipped.
pub fn map_issue(issue: &Value, story_point_field: &str, skipped: &mut SkipReport) -> Option<IssueRecord> {
    let key = issue.get("key").and_then(Value::as_str);
    let fields = issue.get("fields");
    let get = |name: &str| fields.and_then(|f| f.get(name));
    let title = get("summary").and_then(Value::as_str).filter(|t| !t.trim().is_empty());
    let created = get("created").and_then(Value::as_str).and_then(|s| parse_timestamp(s).ok());
    let (Some(key), Some(title), Some(created_at)) = (key, title, created) else {
        skipped
            .malformed
            .push(key.map(str::to_string).unwrap_or_else(|| "<no key>".into()));
        return None;
    };
    let Ok(story_points) = points_value(get(story_point_field)) else {
        skipped.non_numeric_points.push(key.to_string());
        return None;
    };
    let project = get("project")
        .and_then(|p| p.get("key"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| key.rsplit_once('-').map(|(p, _)| p).unwrap_or(key).to_string());
    Some(IssueRecord {
        project,
        issue_key: key.to_string(),
        created_at,
        title: title.to_string(),
        description: get("description").and_then(Value::as_str).unwrap_or_default().to_string(),
        story_points,
    })
}

/// Pages through the search results in server order.
pub fn fetch_issues(cfg: &IngestConfig) -> Result<IngestOutcome> {
    cfg.validate()?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
        .build()
        .into();
    let mut limiter = RateLimiter::new(cfg.rate_limit);
    let mut records = Vec::new();
    let mut skipped = SkipReport::default();
    let mut requests = 0;
    let mut start_at = 0;
    let mut seen = 0;

    loop {
        let want = match cfg.max_issues {
            Some(m) if seen >= m => break,
            Some(m) => cfg.page_size.min(m - seen),
            None => cfg.page_size,
        };
        let mut attempt = 0;
        let body = loop {
            limiter.acquire();
            requests += 1;
            match get_once(&agent, cfg, start_at, want)? {
                Attempt::Done(body) => break body,
                Attempt::Transient(msg) => {
                    if attempt == MAX_RETRIES {
                        return Err(Error::TransientFailure {
                            attempts: attempt + 1,
                            message: msg,
                        });
                    }
                    log::warn!("request at startAt={start_at} failed ({msg}); retrying");
                    sleep(Duration::from_secs_f64(cfg.backoff_base_secs * 2f64.powi(attempt as i32)));
                    attempt += 1;
                }
            }
        };
        let page: Value = serde_json::from_str(&body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
        let issues = page
            .get("issues")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::MalformedResponse("response has no issues array".into()))?;
        let total = page.get("total").and_then(Value::as_u64).map(|t| t as usize);
        for issue in issues.iter().take(want) {
            if let Some(r) = map_issue(issue, &cfg.story_point_field, &mut skipped) {
                records.push(r);
            }
        }
        let got = issues.len().min(want);
        seen += got;
        start_at += got;
        if got == 0 || total.is_some_and(|t| start_at >= t) {
            break;
        }
    }
    Ok(IngestOutcome {
        records,
        skipped,
        requests,
    })
}
