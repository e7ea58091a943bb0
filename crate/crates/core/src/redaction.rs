//! Tiered PII and secret redaction.
//!
//! Detection is table-driven: every [`EntityPattern`] belongs to one of four
//! tiers (secrets, financial, identity, contact) and may carry a validator
//! that a regex hit must pass before it counts. Overlapping hits are resolved
//! longest-first, left to right, and replacements are never re-scanned.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::sha256_hex;

/// Hex characters kept from the SHA-256 digest by [`Strategy::Hash`].
pub const HASH_PREFIX_LEN: usize = 12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RedactionError {
    #[error("malformed number: {0}")]
    MalformedNumber(String),
    #[error("pattern table line {line}: {reason}")]
    BadTableLine { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EntityType {
    ApiKey,
    PrivateKey,
    Password,
    CreditCard,
    Iban,
    Ssn,
    Email,
    Phone,
    IpAddress,
}

impl EntityType {
    pub const ALL: [EntityType; 9] = [
        EntityType::ApiKey,
        EntityType::PrivateKey,
        EntityType::Password,
        EntityType::CreditCard,
        EntityType::Iban,
        EntityType::Ssn,
        EntityType::Email,
        EntityType::Phone,
        EntityType::IpAddress,
    ];

    /// Tier assignment of the built-in table.
    pub fn default_tier(self) -> u8 {
        match self {
            EntityType::ApiKey | EntityType::PrivateKey | EntityType::Password => 1,
            EntityType::CreditCard | EntityType::Iban => 2,
            EntityType::Ssn => 3,
            EntityType::Email | EntityType::Phone | EntityType::IpAddress => 4,
        }
    }

    /// Uppercase snake-case label used inside placeholders.
    pub fn label(self) -> &'static str {
        match self {
            EntityType::ApiKey => "API_KEY",
            EntityType::PrivateKey => "PRIVATE_KEY",
            EntityType::Password => "PASSWORD",
            EntityType::CreditCard => "CREDIT_CARD",
            EntityType::Iban => "IBAN",
            EntityType::Ssn => "SSN",
            EntityType::Email => "EMAIL",
            EntityType::Phone => "PHONE",
            EntityType::IpAddress => "IP_ADDRESS",
        }
    }

    fn name(self) -> &'static str {
        match self {
            EntityType::ApiKey => "apiKey",
            EntityType::PrivateKey => "privateKey",
            EntityType::Password => "password",
            EntityType::CreditCard => "creditCard",
            EntityType::Iban => "iban",
            EntityType::Ssn => "ssn",
            EntityType::Email => "email",
            EntityType::Phone => "phone",
            EntityType::IpAddress => "ipAddress",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s) || t.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown entity type `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Redact,
    Mask,
    Hash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validator {
    None,
    Luhn,
    Iban,
    Ssn,
    Phone,
    Ipv4,
}

impl FromStr for Validator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "" | "none" | "-" => Validator::None,
            "luhn" => Validator::Luhn,
            "iban" | "mod97" => Validator::Iban,
            "ssn" => Validator::Ssn,
            "phone" => Validator::Phone,
            "ipv4" | "ip" => Validator::Ipv4,
            other => return Err(format!("unknown validator `{other}`")),
        })
    }
}

impl Validator {
    fn accepts(self, s: &str) -> bool {
        match self {
            Validator::None => true,
            Validator::Luhn => luhn_valid(s).unwrap_or(false),
            Validator::Iban => iban_valid(s),
            Validator::Ssn => ssn_valid(s),
            Validator::Phone => {
                let n = s.chars().filter(char::is_ascii_digit).count();
                (10..=15).contains(&n)
            }
            Validator::Ipv4 => ipv4_valid(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RedactionConfig {
    pub enabled_tiers: BTreeSet<u8>,
    pub strategy: Strategy,
    #[serde(default)]
    pub skip_emails: bool,
    #[serde(default)]
    pub skip_phones: bool,
}

impl Default for RedactionConfig {
    fn default() -> Self {
        Self {
            enabled_tiers: [1, 2, 3, 4].into_iter().collect(),
            strategy: Strategy::Redact,
            skip_emails: false,
            skip_phones: false,
        }
    }
}

impl RedactionConfig {
    pub fn tiers(tiers: &[u8]) -> Self {
        Self {
            enabled_tiers: tiers.iter().copied().collect(),
            ..Self::default()
        }
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RedactionAudit {
    pub tier: u8,
    pub entity_type: EntityType,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// One row of the detection table.
#[derive(Debug, Clone)]
pub struct EntityPattern {
    pub tier: u8,
    pub entity_type: EntityType,
    pub pattern: String,
    pub validator: Validator,
    compiled: Result<Regex, String>,
}

impl EntityPattern {
    pub fn new(tier: u8, entity_type: EntityType, pattern: &str, validator: Validator) -> Self {
        Self {
            tier,
            entity_type,
            pattern: pattern.to_string(),
            validator,
            compiled: Regex::new(pattern).map_err(|e| e.to_string()),
        }
    }

    pub fn compile_error(&self) -> Option<&str> {
        self.compiled.as_ref().err().map(String::as_str)
    }
}

const BUILTIN_PATTERNS: &[(EntityType, &str, Validator)] = &[
    (
        EntityType::ApiKey,
        r"\b(?:sk|pk|rk)[-_](?:live[-_]|test[-_]|proj[-_])?[A-Za-z0-9]{20,}\b",
        Validator::None,
    ),
    (EntityType::ApiKey, r"\bAKIA[0-9A-Z]{16}\b", Validator::None),
    (EntityType::ApiKey, r"\bgh[pousr]_[A-Za-z0-9]{36,}\b", Validator::None),
    (EntityType::ApiKey, r"\bxox[abprs]-[A-Za-z0-9-]{10,}", Validator::None),
    (EntityType::ApiKey, r"\bAIza[0-9A-Za-z_\-]{35}", Validator::None),
    (
        EntityType::PrivateKey,
        r"-----BEGIN (?:[A-Z]+ )*PRIVATE KEY-----(?s:.*?)-----END (?:[A-Z]+ )*PRIVATE KEY-----",
        Validator::None,
    ),
    (
        EntityType::PrivateKey,
        r"-----BEGIN (?:[A-Z]+ )*PRIVATE KEY-----",
        Validator::None,
    ),
    (
        EntityType::Password,
        r"(?i)\b(?:password|passwd|pwd|passphrase)\b\s*[:=]\s*(?P<v>[^\s\[\]]\S*)",
        Validator::None,
    ),
    (
        EntityType::CreditCard,
        r"\b(?:\d{4}[ -]\d{4}[ -]\d{4}[ -]\d{1,7}|\d{4}[ -]\d{6}[ -]\d{5}|\d{13,19})\b",
        Validator::Luhn,
    ),
    (
        EntityType::Iban,
        r"\b[A-Z]{2}\d{2}(?:[A-Z0-9]{11,30}|(?: [A-Z0-9]{4}){2,7}(?: [A-Z0-9]{1,4})?)\b",
        Validator::Iban,
    ),
    (EntityType::Ssn, r"\b\d{3}-\d{2}-\d{4}\b", Validator::Ssn),
    (
        EntityType::Email,
        r"\b[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}\b",
        Validator::None,
    ),
    (
        EntityType::Phone,
        r"(?:\+?\d{1,3}[ .-]?)?(?:\(\d{3}\)|\d{3})[ .-]?\d{3}[ .-]?\d{4}",
        Validator::Phone,
    ),
    (
        EntityType::IpAddress,
        r"\b(?:\d{1,3}\.){3}\d{1,3}\b",
        Validator::Ipv4,
    ),
];

/// A located, validated hit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detection {
    pub start: usize,
    pub end: usize,
    pub tier: u8,
    pub entity_type: EntityType,
    pattern_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RedactionOutcome {
    pub text: String,
    pub audits: Vec<RedactionAudit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TwoPhaseOutcome {
    pub clean_content: String,
    pub clean_extracted: Vec<String>,
    pub phase1_audits: Vec<RedactionAudit>,
    pub phase2_audits: Vec<RedactionAudit>,
    pub combined_audits: Vec<RedactionAudit>,
    pub redaction_applied: bool,
}

/// Compiled, immutable detection table.
#[derive(Debug, Clone)]
pub struct Redactor {
    patterns: Vec<EntityPattern>,
}

impl Default for Redactor {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Redactor {
    pub fn builtin() -> Self {
        let patterns = BUILTIN_PATTERNS
            .iter()
            .map(|(t, p, v)| EntityPattern::new(t.default_tier(), *t, p, *v))
            .collect();
        Self { patterns }
    }

    pub fn from_patterns(patterns: Vec<EntityPattern>) -> Self {
        Self { patterns }
    }

    /// Parses a table with one tab-separated entry per line:
    /// `tier  entityType  pattern  validator`. Blank lines and `#` comments
    /// are ignored. Patterns that fail to compile are kept and reported on
    /// every pass instead of being silently dropped.
    pub fn from_table(text: &str) -> Result<Self, RedactionError> {
        let mut patterns = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let bad = |reason: String| RedactionError::BadTableLine { line: i + 1, reason };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 {
                return Err(bad("expected tier, entityType, pattern[, validator]".into()));
            }
            let tier: u8 = cols[0].trim().parse().map_err(|_| bad(format!("bad tier `{}`", cols[0])))?;
            if !(1..=4).contains(&tier) {
                return Err(bad(format!("tier {tier} outside 1-4")));
            }
            let entity_type = cols[1].trim().parse::<EntityType>().map_err(bad)?;
            let validator = match cols.get(3) {
                Some(v) => v.parse::<Validator>().map_err(bad)?,
                None => Validator::None,
            };
            patterns.push(EntityPattern::new(tier, entity_type, cols[2], validator));
        }
        Ok(Self { patterns })
    }

    pub fn patterns(&self) -> &[EntityPattern] {
        &self.patterns
    }

    fn enabled(&self, p: &EntityPattern, config: &RedactionConfig) -> bool {
        config.enabled_tiers.contains(&p.tier)
            && !(p.entity_type == EntityType::Email && config.skip_emails)
            && !(p.entity_type == EntityType::Phone && config.skip_phones)
    }

    /// All validated, non-overlapping hits in `text`, ordered by position.
    pub fn scan(&self, text: &str, config: &RedactionConfig) -> Vec<Detection> {
        let mut candidates = Vec::new();
        for (idx, p) in self.patterns.iter().enumerate() {
            if !self.enabled(p, config) {
                continue;
            }
            let Ok(re) = &p.compiled else { continue };
            // a rejected match resumes one char past its start, so a greedy
            // miss cannot hide a valid hit inside or right after it
            let mut pos = 0;
            while let Some(caps) = re.captures_at(text, pos) {
                let whole = caps.get(0).expect("group 0");
                let m = caps.name("v").unwrap_or(whole);
                let ok = !m.as_str().is_empty()
                    && p.validator.accepts(m.as_str())
                    && (p.entity_type != EntityType::Phone || isolated_number(text, m.start(), m.end()));
                if !ok || whole.is_empty() {
                    pos = whole.start() + text[whole.start()..].chars().next().map_or(1, char::len_utf8);
                    if pos > text.len() {
                        break;
                    }
                    continue;
                }
                pos = whole.end();
                candidates.push(Detection {
                    start: m.start(),
                    end: m.end(),
                    tier: p.tier,
                    entity_type: p.entity_type,
                    pattern_index: idx,
                });
            }
        }
        let placeholders: Vec<(usize, usize)> = placeholder_re().find_iter(text).map(|m| (m.start(), m.end())).collect();
        candidates.retain(|c| placeholders.iter().all(|&(s, e)| c.end <= s || c.start >= e));
        candidates.sort_by(|a, b| {
            (b.end - b.start)
                .cmp(&(a.end - a.start))
                .then(a.start.cmp(&b.start))
                .then(a.pattern_index.cmp(&b.pattern_index))
        });
        let mut accepted: Vec<Detection> = Vec::new();
        for c in candidates {
            if accepted.iter().all(|a| c.end <= a.start || c.start >= a.end) {
                accepted.push(c);
            }
        }
        accepted.sort_by_key(|d| d.start);
        accepted
    }

    pub fn redact(&self, text: &str, config: &RedactionConfig) -> RedactionOutcome {
        let detections = self.scan(text, config);
        let mut out = String::with_capacity(text.len());
        let mut cursor = 0;
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for d in &detections {
            out.push_str(&text[cursor..d.start]);
            out.push_str(&apply_strategy(&text[d.start..d.end], d.entity_type, config.strategy));
            cursor = d.end;
            *counts.entry(d.pattern_index).or_default() += 1;
        }
        out.push_str(&text[cursor..]);

        // aggregate per (tier, entityType) in table order
        let mut audits: Vec<RedactionAudit> = Vec::new();
        for (idx, p) in self.patterns.iter().enumerate() {
            if !self.enabled(p, config) {
                continue;
            }
            if let Some(err) = p.compile_error() {
                tracing::warn!(tier = p.tier, entity = %p.entity_type, error = err, "redaction pattern unusable");
                audits.push(RedactionAudit {
                    tier: p.tier,
                    entity_type: p.entity_type,
                    count: 0,
                    warning: Some(format!("pattern failed to compile: {err}")),
                });
                continue;
            }
            let Some(&n) = counts.get(&idx) else { continue };
            match audits
                .iter_mut()
                .find(|a| a.tier == p.tier && a.entity_type == p.entity_type && a.warning.is_none())
            {
                Some(a) => a.count += n,
                None => audits.push(RedactionAudit {
                    tier: p.tier,
                    entity_type: p.entity_type,
                    count: n,
                    warning: None,
                }),
            }
        }
        RedactionOutcome { text: out, audits }
    }

    /// Pre-extraction pass over the content, then a post-extraction pass over
    /// every extracted text.
    pub fn two_phase(
        &self,
        content: &str,
        extracted: &[String],
        config: &RedactionConfig,
    ) -> TwoPhaseOutcome {
        let phase1 = self.redact(content, config);
        let mut phase2_audits = Vec::new();
        let mut clean_extracted = Vec::with_capacity(extracted.len());
        for text in extracted {
            let r = self.redact(text, config);
            clean_extracted.push(r.text);
            phase2_audits = merge_audits(&phase2_audits, &r.audits);
        }
        let combined_audits = merge_audits(&phase1.audits, &phase2_audits);
        let redaction_applied = combined_audits.iter().any(|a| a.count > 0);
        TwoPhaseOutcome {
            clean_content: phase1.text,
            clean_extracted,
            phase1_audits: phase1.audits,
            phase2_audits,
            combined_audits,
            redaction_applied,
        }
    }
}

/// Sums audit counts per (tier, entityType), preserving first-seen order.
pub fn merge_audits(a: &[RedactionAudit], b: &[RedactionAudit]) -> Vec<RedactionAudit> {
    let mut out: Vec<RedactionAudit> = a.to_vec();
    for audit in b {
        match out.iter_mut().find(|x| {
            x.tier == audit.tier && x.entity_type == audit.entity_type && x.warning == audit.warning
        }) {
            Some(x) => {
                if x.warning.is_none() {
                    x.count += audit.count;
                }
            }
            None => out.push(audit.clone()),
        }
    }
    out
}

/// Output of an earlier pass (`[LABEL]` or `[LABEL:hex]`) is never rescanned.
fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[[A-Z][A-Z0-9_]*(?::[0-9a-f]{12})?\]").expect("placeholder pattern"))
}

fn isolated_number(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    !before.is_some_and(|c| c.is_ascii_alphanumeric() || c == '+')
        && !after.is_some_and(|c| c.is_ascii_alphanumeric())
}

pub fn apply_strategy(matched: &str, entity_type: EntityType, strategy: Strategy) -> String {
    match strategy {
        Strategy::Redact => format!("[{}]", entity_type.label()),
        Strategy::Mask => {
            let n = matched.chars().count();
            matched
                .chars()
                .enumerate()
                .map(|(i, c)| if i + 4 < n { '*' } else { c })
                .collect()
        }
        Strategy::Hash => {
            let digest = sha256_hex(matched.as_bytes());
            format!("[{}:{}]", entity_type.label(), &digest[..HASH_PREFIX_LEN])
        }
    }
}

/// Luhn mod-10 check over 12-19 digits; spaces and dashes are ignored.
pub fn luhn_valid(digits: &str) -> Result<bool, RedactionError> {
    let mut values = Vec::with_capacity(19);
    for c in digits.chars() {
        match c {
            ' ' | '-' => {}
            '0'..='9' => values.push(c as u32 - '0' as u32),
            _ => return Err(RedactionError::MalformedNumber(digits.to_string())),
        }
    }
    if !(12..=19).contains(&values.len()) {
        return Err(RedactionError::MalformedNumber(digits.to_string()));
    }
    let sum: u32 = values
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &d)| {
            if i % 2 == 1 {
                let x = d * 2;
                if x > 9 {
                    x - 9
                } else {
                    x
                }
            } else {
                d
            }
        })
        .sum();
    Ok(sum % 10 == 0)
}

/// ISO 13616 mod-97 check.
pub fn iban_valid(s: &str) -> bool {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if !(15..=34).contains(&compact.len()) || !compact.is_ascii() {
        return false;
    }
    let (head, tail) = compact.split_at(4);
    let mut remainder: u32 = 0;
    for c in tail.chars().chain(head.chars()) {
        let v = match c {
            '0'..='9' => c as u32 - '0' as u32,
            'A'..='Z' => c as u32 - 'A' as u32 + 10,
            _ => return false,
        };
        remainder = if v >= 10 {
            (remainder * 100 + v) % 97
        } else {
            (remainder * 10 + v) % 97
        };
    }
    remainder == 1
}

/// Structural SSN check: area not 000/666/9xx, group not 00, serial not 0000.
pub fn ssn_valid(s: &str) -> bool {
    let parts: Vec<&str> = s.split('-').collect();
    if parts.len() != 3 || parts[0].len() != 3 || parts[1].len() != 2 || parts[2].len() != 4 {
        return false;
    }
    if !parts.iter().all(|p| p.bytes().all(|b| b.is_ascii_digit())) {
        return false;
    }
    let area = parts[0];
    area != "000" && area != "666" && !area.starts_with('9') && parts[1] != "00" && parts[2] != "0000"
}

pub fn ipv4_valid(s: &str) -> bool {
    let octets: Vec<&str> = s.split('.').collect();
    octets.len() == 4
        && octets
            .iter()
            .all(|o| !o.is_empty() && o.len() <= 3 && o.parse::<u16>().is_ok_and(|v| v <= 255))
}
