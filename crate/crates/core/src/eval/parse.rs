//! Victim-output parsing: toy token sequences and paper-style transcripts.

use serde::{Deserialize, Serialize};

use crate::scene::Catalog;
use crate::vlm::{tok, ModelConfig};

/// A parsed selection. Invalid is a value, not a failure: it flags runs
/// excluded from the success rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParsedOutput {
    /// A name-bearing selection (thought text or NAME tokens); ReAct-style
    /// transcripts may carry click coordinates alongside.
    Name {
        words: Vec<String>,
        click: Option<(f64, f64)>,
    },
    /// A bare click.
    Coords { x: f64, y: f64 },
    Invalid,
}

impl ParsedOutput {
    pub fn is_invalid(&self) -> bool {
        matches!(self, ParsedOutput::Invalid)
    }
}

/// Parses a decoded toy token sequence. NAME selections resolve the product
/// id to the catalog name words; ACTION clicks decode bins to pixel centers.
/// Anything malformed is Invalid.
pub fn parse_tokens(tokens: &[u32], config: &ModelConfig, catalog: &Catalog) -> ParsedOutput {
    match tokens {
        [sel, id] if *sel == tok::SEL => match config.token_as_product(*id) {
            Some(pid) => match catalog.product(pid) {
                Ok(product) => ParsedOutput::Name {
                    words: product.name.clone(),
                    click: None,
                },
                Err(_) => ParsedOutput::Invalid,
            },
            None => ParsedOutput::Invalid,
        },
        [clk, bx, by] if *clk == tok::CLK => {
            match (config.token_as_coord(*bx), config.token_as_coord(*by)) {
                (Some(xb), Some(yb)) => ParsedOutput::Coords {
                    x: config.bin_center(xb),
                    y: config.bin_center(yb),
                },
                _ => ParsedOutput::Invalid,
            }
        }
        _ => ParsedOutput::Invalid,
    }
}

/// Parses a paper-style conversation turn: extracts the thought part (a
/// `Thought:` section or `<think>` block) as a word list, and any click
/// coordinates from the action/code part.
pub fn parse_transcript(text: &str) -> ParsedOutput {
    let thought = extract_thought(text);
    let click = extract_click(text);
    match (thought, click) {
        (Some(words), click) if !words.is_empty() => ParsedOutput::Name { words, click },
        (_, Some((x, y))) => ParsedOutput::Coords { x, y },
        _ => ParsedOutput::Invalid,
    }
}

fn extract_thought(text: &str) -> Option<Vec<String>> {
    let body = if let Some(start) = text.find("<think>") {
        let rest = &text[start + "<think>".len()..];
        let end = rest.find("</think>").unwrap_or(rest.len());
        Some(&rest[..end])
    } else if let Some(start) = find_label(text, "Thought:") {
        let rest = &text[start..];
        // the thought ends at the next section label or the end of the turn
        let end = ["Action:", "Code:", "##", "```"]
            .iter()
            .filter_map(|lbl| rest.find(lbl))
            .min()
            .unwrap_or(rest.len());
        Some(&rest[..end])
    } else {
        None
    }?;
    Some(words_of(body))
}

fn find_label(text: &str, label: &str) -> Option<usize> {
    text.find(label).map(|i| i + label.len())
}

/// Alphanumeric word tokens, original case preserved.
pub fn words_of(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'' && c != '&' && c != '+')
        .filter(|w| !w.is_empty())
        .map(|w| w.trim_matches('\'').to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Click coordinates from any of the transcript action styles:
/// `pyautogui.click(x=850, y=450)`, a JSON CLICK action with "x"/"y"
/// fields, or `click [x, y]`.
fn extract_click(text: &str) -> Option<(f64, f64)> {
    if let Some(pos) = text.find(".click(") {
        let rest = &text[pos + ".click(".len()..];
        let end = rest.find(')')?;
        let args = &rest[..end];
        let x = named_number(args, "x")?;
        let y = named_number(args, "y")?;
        return Some((x, y));
    }
    if text.contains("\"action_type\"") && text.contains("CLICK") {
        let x = named_number(text, "\"x\"")?;
        let y = named_number(text, "\"y\"")?;
        return Some((x, y));
    }
    if let Some(pos) = text.find("click [") {
        let rest = &text[pos + "click [".len()..];
        let end = rest.find(']')?;
        let parts: Vec<&str> = rest[..end].split(',').collect();
        if parts.len() == 2 {
            let x = parts[0].trim().parse::<f64>().ok()?;
            let y = parts[1].trim().parse::<f64>().ok()?;
            return Some((x, y));
        }
    }
    None
}

/// Reads the number following `name` (then optional `:` or `=`).
fn named_number(text: &str, name: &str) -> Option<f64> {
    let at = text.find(name)? + name.len();
    let rest = text[at..].trim_start_matches(|c: char| c == ':' || c == '=' || c.is_whitespace());
    let end = rest
        .char_indices()
        .find(|(_, c)| !c.is_ascii_digit() && *c != '.' && *c != '-')
        .map(|(i, _)| i)
        .unwrap_or(rest.len());
    rest[..end].parse::<f64>().ok()
}

/// Edit distance with unit insert/delete/substitute costs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
