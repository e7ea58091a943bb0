use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::route::{DeliveryMode, RoutedContext};
use super::sections::{covers, normalize_ranges, requested_ranges, section_range, slice_ranges, subtract_ranges};
use super::{GovernanceError, GovernanceVariable};
use crate::clock::Clock;
use crate::model::{estimate_tokens, EngineConfig};

/// What a session already holds of one variable, as character ranges of the
/// version it was delivered from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeliveredSections {
    pub version: u32,
    pub ranges: Vec<(usize, usize)>,
    /// Headings whose whole section has been delivered.
    pub titles: Vec<String>,
    pub full: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionState {
    pub session_id: String,
    pub org_id: String,
    pub created_at: DateTime<Utc>,
    pub last_touched: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub delivered: BTreeMap<String, DeliveredSections>,
}

impl SessionState {
    pub fn new(session_id: &str, org_id: &str, now: DateTime<Utc>, ttl: Duration) -> Self {
        Self {
            session_id: session_id.to_string(),
            org_id: org_id.to_string(),
            created_at: now,
            last_touched: now,
            expires_at: now + ttl,
            delivered: BTreeMap::new(),
        }
    }

    pub fn is_expired(&self, now: DateTime<Utc>) -> bool {
        now >= self.expires_at
    }

    /// Ranges already delivered for the current version of `v`.
    fn held(&self, v: &GovernanceVariable) -> &[(usize, usize)] {
        match self.delivered.get(&v.id) {
            Some(d) if d.version == v.version => &d.ranges,
            _ => &[],
        }
    }
}

fn full_range(v: &GovernanceVariable) -> Vec<(usize, usize)> {
    vec![(0, v.content_chars())]
}

/// Drops critical content the session already holds and records what is
/// delivered now. Supplementary items pass through and are never recorded.
/// A variable whose version changed since delivery counts as undelivered.
pub fn deliver_delta(
    routed: &RoutedContext,
    session: &mut SessionState,
    library: &[GovernanceVariable],
    cfg: &EngineConfig,
) -> Result<RoutedContext, GovernanceError> {
    let mut out = routed.clone();
    out.critical.clear();
    for item in &routed.critical {
        let Some(v) = library.iter().find(|v| v.id == item.variable_id) else {
            return Err(GovernanceError::UnknownVariable(item.variable_id.clone()));
        };
        let n = v.content_chars();
        let requested = match (&item.mode, &item.section_titles) {
            (DeliveryMode::Section, Some(t)) => requested_ranges(&v.headings, n, t).unwrap_or_else(|| full_range(v)),
            _ => full_range(v),
        };
        let held = session.held(v).to_vec();
        let fresh = subtract_ranges(&requested, &held);
        if fresh.is_empty() {
            out.already_delivered.push(v.id.clone());
            continue;
        }
        let all = normalize_ranges(held.iter().chain(requested.iter()).copied().collect());
        let mut next = item.clone();
        if fresh == full_range(v) {
            next.mode = DeliveryMode::Full;
            next.section_titles = None;
            next.resolved_text = v.content.clone();
        } else {
            let titles: Vec<String> = (0..v.headings.len())
                .filter(|&i| {
                    let (a, b) = section_range(&v.headings, i, n);
                    fresh.iter().any(|&(fa, fb)| fa < b && a < fb)
                })
                .map(|i| v.headings[i].title.clone())
                .collect();
            next.mode = DeliveryMode::Section;
            next.section_titles = Some(titles);
            next.resolved_text = slice_ranges(&v.content, &fresh);
        }
        next.token_count = estimate_tokens(&next.resolved_text, cfg.token_chars_per_token);
        let titles = (0..v.headings.len())
            .filter(|&i| covers(&all, section_range(&v.headings, i, n)))
            .map(|i| v.headings[i].title.clone())
            .collect();
        session.delivered.insert(
            v.id.clone(),
            DeliveredSections {
                version: v.version,
                full: covers(&all, (0, n)),
                ranges: all,
                titles,
            },
        );
        out.critical.push(next);
    }
    out.recount();
    Ok(out)
}

/// In-memory session registry with an inactivity TTL.
pub struct SessionStore {
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionState>>>>,
    clock: Arc<dyn Clock>,
    ttl: Duration,
    counter: AtomicU64,
}

impl SessionStore {
    pub fn new(clock: Arc<dyn Clock>, ttl_hours: i64) -> Self {
        Self {
            sessions: Mutex::new(HashMap::new()),
            clock,
            ttl: Duration::hours(ttl_hours),
            counter: AtomicU64::new(0),
        }
    }

    fn fresh_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        format!("sess-{}-{n}", self.clock.now().timestamp_millis())
    }

    /// Opens `session_id`, creating it when absent. An expired session is
    /// discarded and reported; a session owned by another org is refused.
    pub fn open(&self, org_id: &str, session_id: Option<&str>) -> Result<Arc<Mutex<SessionState>>, GovernanceError> {
        let now = self.clock.now();
        let mut map = self.sessions.lock();
        let id = session_id.map(str::to_string).unwrap_or_else(|| self.fresh_id());
        if let Some(s) = map.get(&id).cloned() {
            let mut st = s.lock();
            if st.is_expired(now) {
                drop(st);
                map.remove(&id);
                return Err(GovernanceError::SessionExpired(id));
            }
            if st.org_id != org_id {
                return Err(GovernanceError::SessionOrgMismatch(id));
            }
            st.last_touched = now;
            st.expires_at = now + self.ttl;
            drop(st);
            return Ok(s);
        }
        let s = Arc::new(Mutex::new(SessionState::new(&id, org_id, now, self.ttl)));
        map.insert(id, s.clone());
        Ok(s)
    }

    pub fn get(&self, session_id: &str) -> Option<SessionState> {
        self.sessions.lock().get(session_id).map(|s| s.lock().clone())
    }

    pub fn end(&self, session_id: &str) -> bool {
        self.sessions.lock().remove(session_id).is_some()
    }

    /// Removes expired sessions, returning how many were dropped.
    pub fn sweep(&self) -> usize {
        let now = self.clock.now();
        let mut map = self.sessions.lock();
        let before = map.len();
        map.retain(|_, s| !s.lock().is_expired(now));
        before - map.len()
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
