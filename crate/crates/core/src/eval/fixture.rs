//! Deterministic engine wiring shared by the experiments.

use std::sync::Arc;

use serde_json::{json, Value};

use crate::clock::{reference_epoch, ManualClock};
use crate::engine::{Engine, EngineResult};
use crate::extraction::{ContentMode, MemorizeOptions, MemorizeRequest, PipelineReport};
use crate::model::CrmKeys;
use crate::providers::{CompletionProvider, CompletionRequest, PromptKind, ProviderError, ScriptedCompleter};

pub const FIXTURE_MODEL_ID: &str = "fixture-line-extractor";

/// Completion provider for fixture text written one fact per line.
///
/// Extraction returns each non-empty line that does not start with `#`.
/// Document chunks always end on a line break, so the first line of a later
/// chunk (possibly cut) is dropped: it already appeared whole in the
/// previous chunk. Every other prompt kind goes to the wrapped script.
pub struct FixtureCompleter {
    script: ScriptedCompleter,
}

impl FixtureCompleter {
    pub fn new() -> Self {
        Self::with_script(ScriptedCompleter::default())
    }

    pub fn with_script(script: ScriptedCompleter) -> Self {
        Self { script }
    }

    pub fn script(&self) -> &ScriptedCompleter {
        &self.script
    }
}

impl Default for FixtureCompleter {
    fn default() -> Self {
        Self::new()
    }
}

pub fn line_facts(content: &str, chunk_index: usize) -> Vec<String> {
    content
        .lines()
        .skip(usize::from(chunk_index > 0))
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

impl CompletionProvider for FixtureCompleter {
    fn complete(&self, request: &CompletionRequest) -> Result<Value, ProviderError> {
        if request.prompt_kind != PromptKind::DualExtract {
            return self.script.complete(request);
        }
        let content = request.payload["content"].as_str().unwrap_or_default();
        let index = request.payload["chunkIndex"].as_u64().unwrap_or(0) as usize;
        let facts: Vec<Value> = line_facts(content, index).into_iter().map(|t| json!({"text": t})).collect();
        Ok(json!({"facts": facts, "properties": []}))
    }

    fn model_id(&self) -> String {
        FIXTURE_MODEL_ID.to_string()
    }
}

/// In-memory engine on a manual clock parked at the reference epoch.
pub fn fixture_engine(completer: FixtureCompleter) -> EngineResult<(Engine, Arc<ManualClock>)> {
    let clock = Arc::new(ManualClock::new(reference_epoch()));
    let engine = Engine::builder().clock(clock.clone()).completer(Arc::new(completer)).build()?;
    Ok((engine, clock))
}

/// Memorizes `lines` as one document, one fact per line.
pub fn memorize_lines(
    engine: &Engine,
    org: &str,
    keys: Option<CrmKeys>,
    header: &str,
    lines: &[String],
) -> EngineResult<PipelineReport> {
    let mut content = format!("# {header}\n");
    for l in lines {
        content.push_str(l);
        content.push('\n');
    }
    let mut req = MemorizeRequest::new(org, &content);
    req.crm_keys = keys;
    req.options = MemorizeOptions {
        mode: Some(ContentMode::Document),
        source: Some(header.to_string()),
        ..MemorizeOptions::default()
    };
    engine.memorize(&req)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::chunk;

    #[test]
    fn every_line_survives_chunking_once() {
        let lines: Vec<String> = (0..120).map(|i| format!("Fact number {i} concerns warehouse bay {i}.")).collect();
        let content = lines.join("\n") + "\n";
        let chunks = chunk(&content, ContentMode::Document).unwrap();
        assert!(chunks.len() > 1);
        let mut seen = std::collections::HashSet::new();
        let got: Vec<String> = chunks
            .iter()
            .flat_map(|c| line_facts(&c.text, c.index))
            .filter(|l| seen.insert(l.clone()))
            .collect();
        assert_eq!(got, lines);
    }
}
