//! Autoregressive generation with the dual-head decode rule.
//!
//! Decoding is greedy. Each step recomputes the full forward pass over
//! the sequence so far (no cache). When the model emits the [NUM] token,
//! the number head reads the final hidden state, the normalized
//! prediction is denormalized for output, and the *same* value is fed
//! back through the variant's input-side embedding for the next step —
//! the feedback embedding is bit-identical to what training would build
//! for that value.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::DigitCodec;
use crate::numtext::{
    self, ConversionPolicy, Role, TokenSequence, Vocab, IGNORE_INDEX, NUMBER_TOKEN_INDEX,
};
use crate::seqmodel::Model;
use crate::synthdrive::DialogueRecord;
use crate::trainer::specialize_dialogue;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GenOptions {
    pub max_new_tokens: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { max_new_tokens: 64 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated assistant text with numeric emissions rendered at two
    /// decimals.
    pub text: String,
    /// Numbers produced during decoding, in raw (denormalized) units.
    pub numbers: Vec<f64>,
    /// Decode iterations taken (every emitted token counts, EOS included).
    pub steps: usize,
    /// True when decoding hit a length limit before EOS.
    pub truncated: bool,
}

/// Greedy argmax with ties broken toward the lowest id.
fn argmax(row: &[f64]) -> i64 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as i64
}

/// Generate an assistant reply for the non-assistant prefix of `rec`.
pub fn generate(
    model: &Model,
    rec: &DialogueRecord,
    policy: &ConversionPolicy,
    opts: &GenOptions,
) -> Result<GenerationResult> {
    decode(model, rec, policy, opts, &mut |row, _| argmax(row))
}

/// Generate with a scripted token chooser instead of greedy argmax; the
/// numeric head still produces every number. Used to exercise the decode
/// loop deterministically regardless of the model weights.
pub fn generate_scripted(
    model: &Model,
    rec: &DialogueRecord,
    policy: &ConversionPolicy,
    opts: &GenOptions,
    script: &[i64],
) -> Result<GenerationResult> {
    let mut it = script.iter().copied();
    decode(model, rec, policy, opts, &mut |_, _| it.next().unwrap_or(Vocab::EOS))
}

/// Shared decode loop. `choose` sees the final-row logits and the step
/// index and returns the next token id.
fn decode(
    model: &Model,
    rec: &DialogueRecord,
    policy: &ConversionPolicy,
    opts: &GenOptions,
    choose: &mut dyn FnMut(&[f64], usize) -> i64,
) -> Result<GenerationResult> {
    let prompt_turns: Vec<_> =
        rec.turns.iter().take_while(|t| t.role != Role::Assistant).cloned().collect();
    if prompt_turns.is_empty() {
        return Err(Error::Input("prompt has no non-assistant turns".into()));
    }
    let full = numtext::encode_dialogue(&prompt_turns, policy)?;
    let first_answer_slot = full.numbers.len();
    let spec = specialize_dialogue(&full, model.variant);
    let mut seq = numtext::tokenize(&spec);
    for c in Role::Assistant.header().chars() {
        seq.ids.push(Vocab::encode_char(c));
        seq.role_mask.push(true);
    }
    seq.labels = vec![IGNORE_INDEX; seq.ids.len()];
    let prompt_len = seq.ids.len();

    let mut numbers = spec.numbers.clone();
    let mut slot_ids = spec.slot_ids.clone();
    let mut emitted: Vec<f64> = Vec::new();
    let mut steps = 0usize;
    let mut truncated = false;
    let mut ended = false;

    while steps < opts.max_new_tokens {
        if seq.ids.len() >= model.config.max_seq_len {
            truncated = true;
            break;
        }
        let rows = model.assemble_rows(&seq, &numbers, &slot_ids, &rec.obs)?;
        let hidden = model.forward_plain(&rows)?;
        let n = seq.ids.len();
        let d = model.config.d;
        let h_row = &hidden[(n - 1) * d..n * d];
        let last_logits = model.lm_logits_row_plain(h_row)?;
        let id = choose(&last_logits, steps);
        steps += 1;
        if id == Vocab::EOS {
            ended = true;
            break;
        }
        if id == Vocab::NUM && model.variant.uses_number_head() {
            let z = model.regress_number_plain(h_row)?;
            let slot = first_answer_slot + emitted.len();
            let x = model.normalizer.denormalize(slot, z);
            seq.numeric_positions.push(seq.ids.len());
            push_id(&mut seq, NUMBER_TOKEN_INDEX);
            numbers.push(x);
            slot_ids.push(slot);
            emitted.push(x);
        } else {
            push_id(&mut seq, id);
        }
    }
    if !ended && !truncated {
        truncated = true; // ran out of the step budget
    }

    let places = DigitCodec::default().places;
    let mut text = String::new();
    let mut num_iter = emitted.iter();
    for &id in &seq.ids[prompt_len..] {
        if id == NUMBER_TOKEN_INDEX {
            // unwrap is safe: one emitted number per sentinel appended
            text.push_str(&numtext::format_fixed(*num_iter.next().unwrap(), places));
        } else {
            text.push_str(&Vocab::decode(id));
        }
    }
    let numbers_out = if model.variant.uses_number_head() {
        emitted
    } else {
        // digit-text variant: the numbers live in the generated text
        match numtext::extract_numbers(&text, policy) {
            Ok(d) => d.numbers,
            Err(_) => Vec::new(),
        }
    };
    Ok(GenerationResult { text, numbers: numbers_out, steps, truncated })
}

fn push_id(seq: &mut TokenSequence, id: i64) {
    seq.ids.push(id);
    seq.labels.push(IGNORE_INDEX);
    seq.role_mask.push(true);
}

/// Decode-step accounting for one answer text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepCounts {
    /// Tokens shared by both renderings: non-number characters plus EOS.
    pub common: usize,
    /// Characters spent spelling the numeric literals digit by digit.
    pub literal_chars: usize,
    /// Number of numeric values in the answer.
    pub count: usize,
}

impl StepCounts {
    /// Steps when numbers are spelled as digit text.
    pub fn digit_steps(&self) -> usize {
        self.common + self.literal_chars
    }
    /// Steps when each number is a single [NUM] emission.
    pub fn numeric_steps(&self) -> usize {
        self.common + self.count
    }
}

/// Count decode steps for an answer under both rendering schemes.
pub fn answer_step_counts(answer: &str, policy: &ConversionPolicy) -> Result<StepCounts> {
    let d = numtext::extract_numbers(answer, policy)?;
    let template = &d.turns[0].template;
    let stripped = template.replace(numtext::NUMBER_PLACEHOLDER, "");
    let literal_chars: usize = d.spans.iter().map(|s| s.original_literal.chars().count()).sum();
    Ok(StepCounts {
        common: stripped.chars().count() + 1, // + EOS
        literal_chars,
        count: d.numbers.len(),
    })
}

/// One prediction as stored on disk (JSONL, one record per line).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub text: String,
    pub numbers: Vec<f64>,
    pub steps: usize,
    #[serde(default)]
    pub truncated: bool,
}

impl From<GenerationResult> for PredictionRecord {
    fn from(g: GenerationResult) -> Self {
        PredictionRecord { text: g.text, numbers: g.numbers, steps: g.steps, truncated: g.truncated }
    }
}

pub fn save_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::VariantKind;
    use crate::gradcore::Session;
    use crate::seqmodel::ModelConfig;
    use crate::synthdrive::{make_dialogue, Episode, EpisodeParams, TaskId};

    fn small_model(variant: VariantKind) -> Model {
        let cfg =
            ModelConfig { d: 16, n_layers: 1, n_heads: 2, max_seq_len: 160, ..Default::default() };
        Model::init(cfg, variant, 11).unwrap()
    }

    fn copy_record() -> DialogueRecord {
        let p = EpisodeParams::default();
        make_dialogue(TaskId::Copy, &Episode::generate(3, &p), &p)
    }

    #[test]
    fn scripted_decode_trace_and_step_count() {
        let model = small_model(VariantKind::DriveCode);
        let rec = copy_record();
        let script = [Vocab::encode_char('o'), Vocab::encode_char('k'), Vocab::NUM, Vocab::EOS];
        let out = generate_scripted(
            &model,
            &rec,
            &ConversionPolicy::default(),
            &GenOptions::default(),
            &script,
        )
        .unwrap();
        assert_eq!(out.steps, 4);
        assert!(!out.truncated);
        assert_eq!(out.numbers.len(), 1);
        assert!(out.numbers[0].is_finite());
        assert_eq!(out.text, format!("ok{}", numtext::format_fixed(out.numbers[0], 2)));
    }

    #[test]
    fn emitted_number_is_fed_back_bit_exactly() {
        // Decode two numbers; replay the sequence the decoder built and
        // check the second forward pass sees exactly the first emission.
        let model = small_model(VariantKind::DriveCode);
        let rec = copy_record();
        let script = [Vocab::NUM, Vocab::NUM, Vocab::EOS];
        let out = generate_scripted(
            &model,
            &rec,
            &ConversionPolicy::default(),
            &GenOptions::default(),
            &script,
        )
        .unwrap();
        assert_eq!(out.numbers.len(), 2);
        // replay: rebuild the prompt + first emission by hand and verify
        // the second prediction matches the decoder's second number
        let full =
            numtext::encode_dialogue(&rec.turns[..1], &ConversionPolicy::default()).unwrap();
        let first_slot = full.numbers.len();
        let mut seq = numtext::tokenize(&full);
        for c in Role::Assistant.header().chars() {
            seq.ids.push(Vocab::encode_char(c));
            seq.role_mask.push(true);
        }
        seq.numeric_positions.push(seq.ids.len());
        seq.ids.push(NUMBER_TOKEN_INDEX);
        seq.role_mask.push(true);
        seq.labels = vec![IGNORE_INDEX; seq.ids.len()];
        let mut numbers = full.numbers.clone();
        numbers.push(out.numbers[0]);
        let mut slots = full.slot_ids.clone();
        slots.push(first_slot);
        let mut sess = Session::new();
        let h0 = model.assemble_input_tape(&mut sess, &seq, &numbers, &slots, &rec.obs).unwrap();
        let hidden = model.forward_tape(&mut sess, h0).unwrap();
        let n = seq.ids.len();
        let d = model.config.d;
        let z = model
            .regress_number_plain(&sess.tape.data(hidden)[(n - 1) * d..n * d])
            .unwrap();
        let x = model.normalizer.denormalize(first_slot + 1, z);
        assert_eq!(x.to_bits(), out.numbers[1].to_bits());
    }

    #[test]
    fn truncation_flags() {
        let model = small_model(VariantKind::DriveCode);
        let rec = copy_record();
        // never emits EOS within the budget
        let script = vec![Vocab::encode_char('a'); 10];
        let out = generate_scripted(
            &model,
            &rec,
            &ConversionPolicy::default(),
            &GenOptions { max_new_tokens: 5 },
            &script,
        )
        .unwrap();
        assert!(out.truncated);
        assert_eq!(out.steps, 5);
        assert_eq!(out.text, "aaaaa");
    }

    #[test]
    fn text_variant_numbers_come_from_generated_text() {
        let model = small_model(VariantKind::Text);
        let rec = copy_record();
        let script: Vec<i64> =
            "x 12.50 y 3.75".chars().map(Vocab::encode_char).chain([Vocab::EOS]).collect();
        let out = generate_scripted(
            &model,
            &rec,
            &ConversionPolicy::default(),
            &GenOptions::default(),
            &script,
        )
        .unwrap();
        assert_eq!(out.text, "x 12.50 y 3.75");
        assert_eq!(out.numbers, vec![12.50, 3.75]);
    }

    #[test]
    fn step_accounting_identity() {
        let policy = ConversionPolicy::default();
        let c = answer_step_counts("waypoints: 1.87, 2.50", &policy).unwrap();
        // "waypoints: , " is 13 chars, plus EOS
        assert_eq!(c.common, 14);
        assert_eq!(c.literal_chars, 8);
        assert_eq!(c.count, 2);
        assert_eq!(c.digit_steps(), 22);
        assert_eq!(c.numeric_steps(), 16);
        // identity: digit - numeric == literal_chars - count
        assert_eq!(c.digit_steps() - c.numeric_steps(), c.literal_chars - c.count);
    }

    #[test]
    fn greedy_generation_terminates() {
        for variant in VariantKind::ALL {
            let model = small_model(variant);
            let out = generate(
                &model,
                &copy_record(),
                &ConversionPolicy::default(),
                &GenOptions { max_new_tokens: 8 },
            )
            .unwrap();
            assert!(out.steps <= 8);
        }
    }

    #[test]
    fn predictions_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let preds = vec![PredictionRecord {
            text: "next speed: 5.40".into(),
            numbers: vec![5.4],
            steps: 17,
            truncated: false,
        }];
        save_predictions(&path, &preds).unwrap();
        let back = load_predictions(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].numbers, preds[0].numbers);
        assert_eq!(back[0].steps, 17);
    }
}
