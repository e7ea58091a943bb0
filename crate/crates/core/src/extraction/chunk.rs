use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::ExtractionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentMode {
    Document,
    Transcript,
    Dialogue,
}

impl ContentMode {
    /// `(max chars per chunk, overlap chars)`.
    pub fn limits(self) -> (usize, usize) {
        match self {
            ContentMode::Document => (2000, 200),
            ContentMode::Transcript => (1500, 300),
            ContentMode::Dialogue => (1200, 240),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Chunk {
    pub text: String,
    pub index: usize,
    pub total: usize,
    pub mode: ContentMode,
    /// Character offset of the chunk start within the source.
    pub offset: usize,
    /// Leading characters repeated from the previous chunk.
    pub overlap: usize,
}

static SPEAKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?:\[[0-9:.]+\]\s*)?([A-Z][A-Za-z0-9 .'_-]{0,39}):\s").expect("speaker pattern")
});

fn speaker_of(line: &str) -> Option<String> {
    SPEAKER.captures(line).map(|c| c[1].trim().to_string())
}

/// Guesses the content mode from its shape.
///
/// Speaker-prefixed content with short turns that alternate between
/// speakers is a dialogue; other speaker-prefixed content is a transcript.
pub fn infer_mode(content: &str) -> ContentMode {
    let lines: Vec<&str> = content.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() < 2 {
        return ContentMode::Document;
    }
    let speakers: Vec<Option<String>> = lines.iter().map(|l| speaker_of(l)).collect();
    let prefixed = speakers.iter().filter(|s| s.is_some()).count();
    if prefixed * 2 < lines.len() {
        return ContentMode::Document;
    }
    let turns = split_turns(content);
    let mean_len = turns.iter().map(|t| t.chars().count()).sum::<usize>() / turns.len().max(1);
    let named: Vec<&String> = speakers.iter().flatten().collect();
    let switches = named.windows(2).filter(|w| w[0] != w[1]).count();
    let alternating = named.len() >= 2 && switches * 5 >= (named.len() - 1) * 4;
    if alternating && mean_len <= 160 {
        ContentMode::Dialogue
    } else {
        ContentMode::Transcript
    }
}

/// Splits into speaker turns; continuation lines stay with their turn and
/// every turn keeps its trailing newline so the pieces concatenate back to
/// the source.
fn split_turns(content: &str) -> Vec<&str> {
    let mut turns = Vec::new();
    let mut start = 0;
    let mut pos = 0;
    for line in content.split_inclusive('\n') {
        if pos > start && speaker_of(line).is_some() {
            turns.push(&content[start..pos]);
            start = pos;
        }
        pos += line.len();
    }
    if start < content.len() {
        turns.push(&content[start..]);
    }
    turns
}

pub fn chunk(content: &str, mode: ContentMode) -> Result<Vec<Chunk>, ExtractionError> {
    if content.trim().is_empty() {
        return Err(ExtractionError::EmptyContent);
    }
    let (max, overlap) = mode.limits();
    let spans = match mode {
        ContentMode::Document => document_spans(content, max, overlap),
        ContentMode::Transcript | ContentMode::Dialogue => unit_spans(&split_turns(content), max, overlap),
    };
    let total = spans.len();
    let char_starts: Vec<usize> = content.char_indices().map(|(i, _)| i).collect();
    let to_char = |byte: usize| char_starts.partition_point(|&b| b < byte);
    let mut chunks = Vec::with_capacity(total);
    let mut prev_end = 0usize;
    for (index, (start, end)) in spans.into_iter().enumerate() {
        let overlap_bytes = prev_end.saturating_sub(start);
        chunks.push(Chunk {
            text: content[start..end].to_string(),
            index,
            total,
            mode,
            offset: to_char(start),
            overlap: content[start..start + overlap_bytes].chars().count(),
        });
        prev_end = end;
    }
    Ok(chunks)
}

/// Rebuilds the source from chunks by dropping each chunk's overlap.
pub fn reconstruct(chunks: &[Chunk]) -> String {
    let mut out = String::new();
    for c in chunks {
        out.extend(c.text.chars().skip(c.overlap));
    }
    out
}

/// Byte spans over a plain document: cut at the last sentence end (or
/// whitespace) in the back half of the window, start the next span
/// `overlap` characters earlier, snapped forward to a word start.
fn document_spans(content: &str, max: usize, overlap: usize) -> Vec<(usize, usize)> {
    let bounds: Vec<usize> = content
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(content.len()))
        .collect();
    let n = bounds.len() - 1;
    let bytes = content.as_bytes();
    let is_space = |ci: usize| ci < n && (bytes[bounds[ci]] as char).is_ascii_whitespace();
    let mut spans = Vec::new();
    let mut start = 0usize;
    loop {
        if n - start <= max {
            spans.push((bounds[start], bounds[n]));
            break;
        }
        let hard = start + max;
        let floor = start + max / 2;
        let sentence_end = (floor..hard)
            .rev()
            .find(|&ci| {
                let c = bytes[bounds[ci]] as char;
                c == '\n' || (is_space(ci) && ci > 0 && matches!(bytes[bounds[ci - 1]] as char, '.' | '!' | '?'))
            })
            .map(|ci| ci + 1);
        let end = sentence_end
            .or_else(|| (floor..hard).rev().find(|&ci| is_space(ci)).map(|ci| ci + 1))
            .unwrap_or(hard);
        spans.push((bounds[start], bounds[end]));
        let mut next = end.saturating_sub(overlap).max(start + 1);
        while next < end && !(next > 0 && is_space(next - 1)) {
            next += 1;
        }
        start = next;
    }
    spans
}

/// Byte spans that pack whole units (turns or messages); the next span
/// repeats as many trailing whole units as fit in `overlap`.
fn unit_spans(units: &[&str], max: usize, overlap: usize) -> Vec<(usize, usize)> {
    let mut offsets = Vec::with_capacity(units.len() + 1);
    let mut acc = 0;
    for u in units {
        offsets.push(acc);
        acc += u.len();
    }
    offsets.push(acc);
    let lens: Vec<usize> = units.iter().map(|u| u.chars().count()).collect();
    let mut spans = Vec::new();
    let mut first = 0;
    while first < units.len() {
        let mut last = first;
        let mut size = lens[first];
        while last + 1 < units.len() && size + lens[last + 1] <= max {
            last += 1;
            size += lens[last];
        }
        spans.push((offsets[first], offsets[last + 1]));
        if last + 1 >= units.len() {
            break;
        }
        let mut next = last + 1;
        let mut carried = 0;
        while next > first + 1 && carried + lens[next - 1] <= overlap {
            next -= 1;
            carried += lens[next];
        }
        first = next;
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(chars: usize) -> String {
        let sentence = "The quarterly review covered pricing and onboarding. ";
        sentence.repeat(chars / sentence.len() + 1)[..chars].to_string()
    }

    #[test]
    fn short_document_is_single_chunk() {
        let c = chunk(&doc(500), ContentMode::Document).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].index, c[0].total), (0, 1));
    }

    #[test]
    fn long_document_reconstructs() {
        let src = doc(4000);
        let c = chunk(&src, ContentMode::Document).unwrap();
        assert!(c.len() >= 2);
        assert!(c.iter().all(|k| k.text.chars().count() <= 2000 && k.index < k.total));
        assert_eq!(reconstruct(&c), src);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(chunk("  \n", ContentMode::Document), Err(ExtractionError::EmptyContent)));
    }

    #[test]
    fn transcript_chunks_start_on_turns() {
        let mut src = String::new();
        let mut turn_starts = vec![];
        for i in 0..40 {
            turn_starts.push(src.chars().count());
            let who = if i % 3 == 0 { "Dana" } else { "Sam" };
            src.push_str(&format!("{who}: {}\n", "we reviewed the rollout plan and budget ".repeat(2)));
        }
        assert_eq!(infer_mode(&src), ContentMode::Transcript);
        let c = chunk(&src, ContentMode::Transcript).unwrap();
        assert!(c.len() > 1);
        for k in &c {
            assert!(turn_starts.contains(&k.offset), "chunk {} starts mid-turn", k.index);
            assert!(k.text.chars().count() <= 1500);
        }
        assert_eq!(reconstruct(&c), src);
    }

    #[test]
    fn infers_dialogue_and_document() {
        let d = "Ana: hi\nBo: hello there\nAna: shall we start?\nBo: yes\n";
        assert_eq!(infer_mode(d), ContentMode::Dialogue);
        assert_eq!(infer_mode("Plain prose.\nMore prose here."), ContentMode::Document);
    }
}
