use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Heading {
    pub level: u8,
    pub title: String,
    pub char_offset: usize,
}

static HEADING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(#{1,6})[ \t]+(.+?)[ \t]*#*[ \t]*$").expect("heading pattern"));

/// Markdown ATX headings with the character offset of their line start.
pub fn parse_headings(content: &str) -> Vec<Heading> {
    let mut out = Vec::new();
    let mut chars = 0;
    let mut in_fence = false;
    for line in content.split_inclusive('\n') {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if trimmed.trim_start().starts_with("```") {
            in_fence = !in_fence;
        } else if !in_fence {
            if let Some(c) = HEADING.captures(trimmed) {
                out.push(Heading {
                    level: c[1].len() as u8,
                    title: c[2].trim().to_string(),
                    char_offset: chars,
                });
            }
        }
        chars += line.chars().count();
    }
    out
}

/// Half-open character range of heading `i`: up to the next heading of the
/// same or higher level, or the end of the content.
pub fn section_range(headings: &[Heading], i: usize, content_chars: usize) -> (usize, usize) {
    let h = &headings[i];
    let end = headings[i + 1..]
        .iter()
        .find(|n| n.level <= h.level)
        .map_or(content_chars, |n| n.char_offset);
    (h.char_offset, end)
}

pub fn find_heading(headings: &[Heading], title: &str) -> Option<usize> {
    let t = title.trim();
    headings.iter().position(|h| h.title.eq_ignore_ascii_case(t))
}

/// Sorted, merged union of ranges.
pub fn normalize_ranges(mut ranges: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    ranges.retain(|(a, b)| a < b);
    ranges.sort();
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (a, b) in ranges {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// `a` minus `b`; both normalized.
pub fn subtract_ranges(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &(mut start, end) in a {
        for &(bs, be) in b {
            if be <= start || bs >= end {
                continue;
            }
            if bs > start {
                out.push((start, bs));
            }
            start = start.max(be);
            if start >= end {
                break;
            }
        }
        if start < end {
            out.push((start, end));
        }
    }
    out
}

pub fn covers(outer: &[(usize, usize)], inner: (usize, usize)) -> bool {
    subtract_ranges(&[inner], outer).is_empty()
}

/// Concatenates the given character ranges of `content` in order.
pub fn slice_ranges(content: &str, ranges: &[(usize, usize)]) -> String {
    let mut out = String::new();
    let mut ri = 0;
    for (ci, ch) in content.chars().enumerate() {
        while ri < ranges.len() && ci >= ranges[ri].1 {
            ri += 1;
        }
        if ri == ranges.len() {
            break;
        }
        if ci >= ranges[ri].0 {
            out.push(ch);
        }
    }
    out
}

/// Ranges for the requested titles, or `None` when the whole content must
/// be delivered (empty request or any title without a matching heading).
pub fn requested_ranges(headings: &[Heading], content_chars: usize, titles: &[String]) -> Option<Vec<(usize, usize)>> {
    if titles.is_empty() {
        return None;
    }
    let mut ranges = Vec::with_capacity(titles.len());
    for t in titles {
        let i = find_heading(headings, t)?;
        ranges.push(section_range(headings, i, content_chars));
    }
    Some(normalize_ranges(ranges))
}

/// The requested sections in document order; any unmatched title, or an
/// empty request, yields the full content.
pub fn extract_sections(content: &str, headings: &[Heading], titles: &[String]) -> String {
    match requested_ranges(headings, content.chars().count(), titles) {
        Some(r) => slice_ranges(content, &r),
        None => content.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = "Intro line\n# A\nalpha body\n## A1\nsub body\n# B\nbeta body\n# C\ngamma body\n";

    fn t(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_with_offsets() {
        let h = parse_headings(DOC);
        assert_eq!(h.iter().map(|h| h.title.as_str()).collect::<Vec<_>>(), vec!["A", "A1", "B", "C"]);
        assert_eq!(h[0].char_offset, 11);
        assert!(h.windows(2).all(|w| w[0].char_offset < w[1].char_offset));
    }

    #[test]
    fn section_boundaries() {
        let h = parse_headings(DOC);
        assert_eq!(extract_sections(DOC, &h, &t(&["b"])), "# B\nbeta body\n");
        assert_eq!(extract_sections(DOC, &h, &t(&["B", "Missing"])), DOC);
        assert_eq!(
            extract_sections(DOC, &h, &t(&["C", "A"])),
            "# A\nalpha body\n## A1\nsub body\n# C\ngamma body\n"
        );
        let all: Vec<String> = h.iter().map(|h| h.title.clone()).collect();
        assert_eq!(extract_sections(DOC, &h, &all), &DOC[11..]);
    }

    #[test]
    fn range_algebra() {
        assert_eq!(subtract_ranges(&[(0, 10)], &[(2, 4), (6, 8)]), vec![(0, 2), (4, 6), (8, 10)]);
        assert_eq!(normalize_ranges(vec![(5, 7), (0, 3), (2, 5)]), vec![(0, 7)]);
        assert!(covers(&[(0, 5)], (1, 4)));
        assert!(!covers(&[(0, 5)], (4, 6)));
    }
}
