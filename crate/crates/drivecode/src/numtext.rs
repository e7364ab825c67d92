//! Number extraction and alignment.
//!
//! Raw dialogue text is parsed into a placeholder template plus a strictly
//! ordered number list: every converted number is replaced by the literal
//! string `<number_token>` and its value appended to the list, so the k-th
//! placeholder always pairs with the k-th number. Tokenization is
//! character-level; numeric and observation placeholders become negative
//! sentinel ids that never collide with vocabulary ids.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::{Error, Result};

/// Input-side sentinel marking a numeric placeholder position.
pub const NUMBER_TOKEN_INDEX: i64 = -200;
/// Input-side sentinel marking an observation placeholder position.
pub const IMAGE_TOKEN_INDEX: i64 = -300;
/// Label-side sentinel excluding a position from the loss.
pub const IGNORE_INDEX: i64 = -100;

pub const NUMBER_PLACEHOLDER: &str = "<number_token>";
pub const OBS_PLACEHOLDER: &str = "<obs_token>";

/// Character-level vocabulary: printable ASCII plus newline and the
/// reserved special ids. The numeric placeholder also has a reserved
/// non-negative id ([`Vocab::NUM`]) so the LM head can be supervised to
/// predict it; the negative sentinel is an input-side marker only.
pub struct Vocab;

impl Vocab {
    pub const NEWLINE: i64 = 95;
    pub const UNK: i64 = 96;
    pub const EOS: i64 = 97;
    pub const NUM: i64 = 98;
    pub const OBS: i64 = 99;

    pub const SIZE: usize = 100;

    pub fn encode_char(c: char) -> i64 {
        match c {
            ' '..='~' => c as i64 - ' ' as i64,
            '\n' => Self::NEWLINE,
            _ => Self::UNK,
        }
    }

    /// Rendering of a single id; placeholders render as their literal
    /// marker strings.
    pub fn decode(id: i64) -> String {
        match id {
            0..=94 => char::from((id as u8) + b' ').to_string(),
            Self::NEWLINE => "\n".to_string(),
            Self::UNK => "<unk>".to_string(),
            Self::EOS => "<eos>".to_string(),
            Self::NUM => NUMBER_PLACEHOLDER.to_string(),
            Self::OBS => OBS_PLACEHOLDER.to_string(),
            NUMBER_TOKEN_INDEX => NUMBER_PLACEHOLDER.to_string(),
            IMAGE_TOKEN_INDEX => OBS_PLACEHOLDER.to_string(),
            _ => "<unk>".to_string(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn header(&self) -> &'static str {
        match self {
            Role::System => "system: ",
            Role::User => "user: ",
            Role::Assistant => "assistant: ",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Byte span of one converted number within its source turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumberSpan {
    pub turn: usize,
    pub start: usize,
    pub end: usize,
    pub value: f64,
    pub original_literal: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodedTurn {
    pub role: Role,
    pub template: String,
}

/// A dialogue with numbers lifted out of the text. One ordered number list
/// spans the whole dialogue; `slot_ids` carries each number's original slot
/// index so per-slot normalization stays stable when some numbers are
/// rendered back into text for the baseline variants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodedDialogue {
    pub turns: Vec<EncodedTurn>,
    pub numbers: Vec<f64>,
    pub spans: Vec<NumberSpan>,
    pub slot_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl EncodedDialogue {
    pub fn placeholder_count(&self) -> usize {
        self.turns
            .iter()
            .map(|t| t.template.matches(NUMBER_PLACEHOLDER).count())
            .sum()
    }
}

/// Number recognition and exclusion policy. A candidate number is kept
/// textual when any exclusion keyword occurs within `context_window` bytes
/// before it in the same sentence.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ConversionPolicy {
    pub exclusion_keywords: Vec<String>,
    #[serde(default = "default_window")]
    pub context_window: usize,
}

fn default_window() -> usize {
    40
}

impl ConversionPolicy {
    pub fn with_keywords(keywords: &[&str]) -> Self {
        ConversionPolicy {
            exclusion_keywords: keywords.iter().map(|s| s.to_string()).collect(),
            context_window: default_window(),
        }
    }

    fn excludes(&self, text: &str, span_start: usize) -> bool {
        let mut from = span_start.saturating_sub(self.context_window);
        if let Some(boundary) = text[..span_start].rfind(['.', '!', '?', '\n']) {
            from = from.max(boundary + 1);
        }
        while !text.is_char_boundary(from) {
            from += 1;
        }
        let ctx = &text[from..span_start];
        self.exclusion_keywords.iter().any(|k| ctx.contains(k.as_str()))
    }
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // sign? digits ('.' digits)? — no scientific notation, no separators
    RE.get_or_init(|| Regex::new(r"-?[0-9]+(?:\.[0-9]+)?").unwrap())
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Extract numbers from one piece of text. Numbers excluded by the policy
/// or adjacent to word characters stay verbatim; a trailing bare dot
/// (`"10."`) marks the literal malformed and it stays textual with a
/// diagnostic.
pub fn extract_numbers(text: &str, policy: &ConversionPolicy) -> Result<EncodedDialogue> {
    let turns = [Turn { role: Role::User, text: text.to_string() }];
    let mut d = encode_dialogue(&turns, policy)?;
    d.turns[0].role = Role::User;
    Ok(d)
}

/// Extract numbers from a multi-turn dialogue into a single ordered list.
pub fn encode_dialogue(turns: &[Turn], policy: &ConversionPolicy) -> Result<EncodedDialogue> {
    let mut out = EncodedDialogue {
        turns: Vec::with_capacity(turns.len()),
        numbers: Vec::new(),
        spans: Vec::new(),
        slot_ids: Vec::new(),
        diagnostics: Vec::new(),
    };
    for (turn_idx, turn) in turns.iter().enumerate() {
        let text = turn.text.as_str();
        if text.contains(NUMBER_PLACEHOLDER) {
            return Err(Error::Alignment(format!(
                "turn {turn_idx}: raw input already contains {NUMBER_PLACEHOLDER}"
            )));
        }
        let bytes = text.as_bytes();
        let mut template = String::with_capacity(text.len());
        let mut cursor = 0usize;
        for m in number_regex().find_iter(text) {
            let (mut start, end) = (m.start(), m.end());
            if start < cursor {
                continue;
            }
            // A sign glued to a word character belongs to that word, not
            // the number; retry without the sign.
            if bytes[start] == b'-' && start > 0 && is_word_byte(bytes[start - 1]) {
                start += 1;
            }
            if start > 0 {
                let prev = bytes[start - 1];
                if is_word_byte(prev) || prev == b'.' {
                    continue;
                }
            }
            if end < bytes.len() {
                let next = bytes[end];
                if is_word_byte(next) {
                    continue;
                }
                if next == b'.' {
                    out.diagnostics.push(format!(
                        "turn {turn_idx}: malformed literal '{}.' left textual",
                        &text[start..end]
                    ));
                    continue;
                }
            }
            if policy.excludes(text, start) {
                continue;
            }
            let literal = &text[start..end];
            let value: f64 = literal
                .parse()
                .map_err(|e| Error::Parse(format!("literal '{literal}': {e}")))?;
            template.push_str(&text[cursor..start]);
            template.push_str(NUMBER_PLACEHOLDER);
            cursor = end;
            out.slot_ids.push(out.numbers.len());
            out.numbers.push(value);
            out.spans.push(NumberSpan {
                turn: turn_idx,
                start,
                end,
                value,
                original_literal: literal.to_string(),
            });
        }
        template.push_str(&text[cursor..]);
        out.turns.push(EncodedTurn { role: turn.role, template });
    }
    Ok(out)
}

/// Formatting applied when numbers are written back into a template.
#[derive(Clone, Copy, Debug)]
pub enum NumberFormat {
    /// Exact source substring; restores the pre-extraction text
    /// byte-for-byte.
    OriginalLiteral,
    /// Fixed decimal places (round half away from zero).
    FixedDecimal(usize),
}

/// Fixed-decimal rendering with round-half-away-from-zero.
pub fn format_fixed(x: f64, places: usize) -> String {
    let scale = 10f64.powi(places as i32);
    let r = (x.abs() * scale + 0.5).floor();
    let int = (r / scale).trunc() as i64;
    let frac = (r as i64).rem_euclid(scale as i64);
    let sign = if x < 0.0 && r > 0.0 { "-" } else { "" };
    if places == 0 {
        format!("{sign}{int}")
    } else {
        format!("{sign}{int}.{frac:0width$}", width = places)
    }
}

/// Replace the k-th placeholder with the formatted k-th number across the
/// whole dialogue.
pub fn restore_numbers(dialogue: &EncodedDialogue, format: NumberFormat) -> Result<Vec<Turn>> {
    let expected = dialogue.placeholder_count();
    if expected != dialogue.numbers.len() {
        return Err(Error::Alignment(format!(
            "{expected} placeholders but {} numbers",
            dialogue.numbers.len()
        )));
    }
    let mut k = 0usize;
    let mut turns = Vec::with_capacity(dialogue.turns.len());
    for t in &dialogue.turns {
        let mut text = String::with_capacity(t.template.len());
        let mut rest = t.template.as_str();
        while let Some(pos) = rest.find(NUMBER_PLACEHOLDER) {
            text.push_str(&rest[..pos]);
            let rendered = match format {
                NumberFormat::OriginalLiteral => dialogue
                    .spans
                    .get(k)
                    .map(|s| s.original_literal.clone())
                    .ok_or_else(|| Error::Alignment(format!("no span for slot {k}")))?,
                NumberFormat::FixedDecimal(p) => format_fixed(dialogue.numbers[k], p),
            };
            text.push_str(&rendered);
            k += 1;
            rest = &rest[pos + NUMBER_PLACEHOLDER.len()..];
        }
        text.push_str(rest);
        turns.push(Turn { role: t.role, text });
    }
    Ok(turns)
}

/// Token ids with negative placeholder sentinels and supervision labels.
#[derive(Clone, Debug, Default)]
pub struct TokenSequence {
    pub ids: Vec<i64>,
    pub labels: Vec<i64>,
    /// Ordered positions i with ids[i] == NUMBER_TOKEN_INDEX.
    pub numeric_positions: Vec<usize>,
    /// Ordered positions i with ids[i] == IMAGE_TOKEN_INDEX.
    pub obs_positions: Vec<usize>,
    /// True at positions belonging to supervised (assistant) content.
    pub role_mask: Vec<bool>,
    pub unknown_count: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tokenize an encoded dialogue: role headers and template characters map
/// to vocabulary ids, placeholder markers to their negative sentinels, and
/// each assistant turn is closed with EOS. Labels start as all
/// IGNORE_INDEX; see [`build_labels`].
pub fn tokenize(dialogue: &EncodedDialogue) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for t in &dialogue.turns {
        let supervised = t.role == Role::Assistant;
        for c in t.role.header().chars() {
            push_char(&mut seq, c, false);
        }
        let mut rest = t.template.as_str();
        loop {
            let num = rest.find(NUMBER_PLACEHOLDER);
            let obs = rest.find(OBS_PLACEHOLDER);
            let (pos, marker, sentinel) = match (num, obs) {
                (Some(n), Some(o)) if n < o => (n, NUMBER_PLACEHOLDER, NUMBER_TOKEN_INDEX),
                (Some(_), Some(o)) => (o, OBS_PLACEHOLDER, IMAGE_TOKEN_INDEX),
                (Some(n), None) => (n, NUMBER_PLACEHOLDER, NUMBER_TOKEN_INDEX),
                (None, Some(o)) => (o, OBS_PLACEHOLDER, IMAGE_TOKEN_INDEX),
                (None, None) => break,
            };
            for c in rest[..pos].chars() {
                push_char(&mut seq, c, supervised);
            }
            if sentinel == NUMBER_TOKEN_INDEX {
                seq.numeric_positions.push(seq.ids.len());
            } else {
                seq.obs_positions.push(seq.ids.len());
            }
            seq.ids.push(sentinel);
            seq.role_mask.push(supervised);
            rest = &rest[pos + marker.len()..];
        }
        for c in rest.chars() {
            push_char(&mut seq, c, supervised);
        }
        if supervised {
            seq.ids.push(Vocab::EOS);
            seq.role_mask.push(true);
        }
        seq.ids.push(Vocab::NEWLINE);
        seq.role_mask.push(false);
    }
    seq.labels = vec![IGNORE_INDEX; seq.ids.len()];
    seq
}

fn push_char(seq: &mut TokenSequence, c: char, supervised: bool) {
    let id = Vocab::encode_char(c);
    if id == Vocab::UNK {
        seq.unknown_count += 1;
    }
    seq.ids.push(id);
    seq.role_mask.push(supervised);
}

/// Fill labels from the supervise mask: supervised positions mirror ids
/// (placeholder sentinels included), everything else is IGNORE_INDEX.
pub fn build_labels(seq: &mut TokenSequence, supervise: &[bool]) -> Result<()> {
    if supervise.len() != seq.ids.len() {
        return Err(Error::Contract(format!(
            "supervise mask length {} != sequence length {}",
            supervise.len(),
            seq.ids.len()
        )));
    }
    seq.labels = seq
        .ids
        .iter()
        .zip(supervise)
        .map(|(&id, &s)| if s { id } else { IGNORE_INDEX })
        .collect();
    Ok(())
}
