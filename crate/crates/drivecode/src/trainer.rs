//! Combined objective (text cross-entropy + weighted numeric regression),
//! AdamW optimization with a cosine schedule, and teacher forcing of
//! ground-truth numbers at input positions.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Normalizer, VariantKind};
use crate::gradcore::{ParamStore, Reduction, Session, TensorId};
use crate::numtext::{
    self, ConversionPolicy, EncodedDialogue, Role, TokenSequence, Vocab, IGNORE_INDEX,
    NUMBER_TOKEN_INDEX, NUMBER_PLACEHOLDER,
};
use crate::parallel;
use crate::seqmodel::Model;
use crate::synthdrive::DialogueRecord;
use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Scalar,
    Trajectory,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(TaskKind::Scalar),
            "trajectory" | "traj" => Ok(TaskKind::Trajectory),
            _ => Err(Error::Config(format!("unknown task_kind '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub task_kind: TaskKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 1.0, task_kind: TaskKind::Scalar }
    }
}

/// Positions of numeric placeholders in the label stream with their
/// aligned ground-truth values (normalized units) and slot ids.
#[derive(Clone, Debug, Default)]
pub struct NumericTargets {
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
    pub slots: Vec<usize>,
}

impl NumericTargets {
    pub fn len(&self) -> usize {
        self.positions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// One training example: a labelled token sequence plus the aligned raw
/// numbers and observation vectors that feed the input side.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub seq: TokenSequence,
    pub numbers: Vec<f64>,
    pub slot_ids: Vec<usize>,
    pub obs: Vec<Vec<f64>>,
}

/// Re-render a dialogue for an ablation variant: placeholders on sides
/// the variant treats as text are substituted back with their original
/// literals, and the remaining numbers keep their dialogue-global slot
/// ids so normalization statistics line up across variants.
pub fn specialize_dialogue(d: &EncodedDialogue, variant: VariantKind) -> EncodedDialogue {
    let mut out = EncodedDialogue {
        turns: Vec::with_capacity(d.turns.len()),
        numbers: Vec::new(),
        spans: Vec::new(),
        slot_ids: Vec::new(),
        diagnostics: d.diagnostics.clone(),
    };
    let mut k = 0usize;
    for t in &d.turns {
        let render = if t.role == Role::Assistant {
            variant.text_output()
        } else {
            variant.text_input()
        };
        let mut template = String::with_capacity(t.template.len());
        let mut rest = t.template.as_str();
        while let Some(pos) = rest.find(NUMBER_PLACEHOLDER) {
            template.push_str(&rest[..pos]);
            if render {
                template.push_str(&d.spans[k].original_literal);
            } else {
                template.push_str(NUMBER_PLACEHOLDER);
                out.numbers.push(d.numbers[k]);
                out.spans.push(d.spans[k].clone());
                out.slot_ids.push(d.slot_ids.get(k).copied().unwrap_or(k));
            }
            k += 1;
            rest = &rest[pos + NUMBER_PLACEHOLDER.len()..];
        }
        template.push_str(rest);
        out.turns.push(crate::numtext::EncodedTurn { role: t.role, template });
    }
    out
}

/// Turn on-disk dialogue records into training items for a variant.
pub fn prepare_items(
    records: &[DialogueRecord],
    variant: VariantKind,
    policy: &ConversionPolicy,
) -> Result<Vec<TrainItem>> {
    parallel::map_collect(records, |rec| {
        let full = numtext::encode_dialogue(&rec.turns, policy)?;
        let d = specialize_dialogue(&full, variant);
        let mut seq = numtext::tokenize(&d);
        let mask = seq.role_mask.clone();
        numtext::build_labels(&mut seq, &mask)?;
        Ok(TrainItem { seq, numbers: d.numbers, slot_ids: d.slot_ids, obs: rec.obs.clone() })
    })
    .into_iter()
    .collect()
}

/// Fit normalization statistics from the full (variant-independent)
/// number lists, keyed by dialogue-global slot.
pub fn fit_normalizer(records: &[DialogueRecord], policy: &ConversionPolicy) -> Result<Normalizer> {
    let mut slots: Vec<Vec<f64>> = Vec::new();
    for rec in records {
        let numbers = numtext::encode_dialogue(&rec.turns, policy)?.numbers;
        if slots.len() < numbers.len() {
            slots.resize(numbers.len(), Vec::new());
        }
        for (slot, v) in numbers.into_iter().enumerate() {
            slots[slot].push(v);
        }
    }
    Ok(Normalizer::fit(&slots))
}

/// Supervised numeric targets: label positions carrying the numeric
/// sentinel, with values in normalized units. Every position must have a
/// predecessor (the hidden state the head reads).
pub fn numeric_targets(model: &Model, item: &TrainItem) -> Result<NumericTargets> {
    let mut t = NumericTargets::default();
    for (k, &pos) in item.seq.numeric_positions.iter().enumerate() {
        if item.seq.labels[pos] != NUMBER_TOKEN_INDEX {
            continue;
        }
        if pos == 0 {
            return Err(Error::Contract(
                "numeric target at position 0 has no preceding hidden state".into(),
            ));
        }
        let slot = item.slot_ids.get(k).copied().unwrap_or(k);
        t.positions.push(pos);
        t.values.push(model.normalizer.normalize(slot, item.numbers[k]));
        t.slots.push(slot);
    }
    Ok(t)
}

/// Shift-by-one cross-entropy targets: the row at position i is supervised
/// to predict the label at i+1. Numeric placeholder labels supervise the
/// reserved [NUM] vocabulary id.
pub fn shifted_ce_targets(seq: &TokenSequence) -> Vec<i64> {
    let mut targets = vec![IGNORE_INDEX; seq.len()];
    for i in 0..seq.len().saturating_sub(1) {
        let label = seq.labels[i + 1];
        targets[i] = if label == NUMBER_TOKEN_INDEX { Vocab::NUM } else { label };
    }
    targets
}

/// Summed next-token cross-entropy over supervised positions.
pub fn text_loss(
    sess: &mut Session,
    logits: TensorId,
    seq: &TokenSequence,
) -> Result<(TensorId, usize)> {
    let targets = shifted_ce_targets(seq);
    sess.tape.cross_entropy(logits, &targets, IGNORE_INDEX, Reduction::Sum)
}

/// Number-head predictions for each target: the head reads the hidden
/// state at position i_m - 1, the same state the LM head uses to predict
/// the placeholder token. Returns `[M,1]` in normalized units.
pub fn numeric_predictions(
    model: &Model,
    sess: &mut Session,
    hidden: TensorId,
    targets: &NumericTargets,
) -> Result<TensorId> {
    let prev: Vec<usize> = targets.positions.iter().map(|&p| p - 1).collect();
    model.regress_numbers_tape(sess, hidden, &prev)
}

pub fn scalar_loss(sess: &mut Session, preds: TensorId, targets: &[f64]) -> Result<TensorId> {
    sess.tape.l1_loss(preds, targets)
}

pub fn traj_loss(sess: &mut Session, preds: TensorId, targets: &[f64]) -> Result<TensorId> {
    sess.tape.pair_l2_loss(preds, targets)
}

pub fn total_loss(
    sess: &mut Session,
    text_l: TensorId,
    num_l: TensorId,
    cfg: &LossConfig,
) -> Result<TensorId> {
    let weighted = sess.tape.scale(num_l, cfg.lambda);
    sess.tape.add(text_l, weighted)
}

/// Forward pass plus combined loss for one item. Returns the session with
/// the loss node and the component values.
pub struct ItemLoss {
    pub sess: Session,
    pub loss: TensorId,
    pub text: f64,
    pub numeric: f64,
}

pub fn item_loss(model: &Model, item: &TrainItem, cfg: &LossConfig) -> Result<ItemLoss> {
    let mut sess = Session::new();
    let h0 =
        model.assemble_input_tape(&mut sess, &item.seq, &item.numbers, &item.slot_ids, &item.obs)?;
    let hidden = model.forward_tape(&mut sess, h0)?;
    let logits = model.lm_logits_tape(&mut sess, hidden)?;
    let (text_l, _count) = text_loss(&mut sess, logits, &item.seq)?;
    let targets = numeric_targets(model, item)?;
    let num_l = if model.variant.uses_number_head() && !targets.is_empty() {
        let preds = numeric_predictions(model, &mut sess, hidden, &targets)?;
        match cfg.task_kind {
            TaskKind::Scalar => scalar_loss(&mut sess, preds, &targets.values)?,
            TaskKind::Trajectory => traj_loss(&mut sess, preds, &targets.values)?,
        }
    } else {
        sess.tape.scalar(0.0)
    };
    let loss = total_loss(&mut sess, text_l, num_l, cfg)?;
    Ok(ItemLoss {
        text: sess.tape.value(text_l),
        numeric: sess.tape.value(num_l),
        loss,
        sess,
    })
}

/// Tape-free evaluation of the combined loss, mirroring [`item_loss`]
/// operation by operation so both agree bit for bit. This is the cheap
/// function probed by finite-difference gradient oracles. Returns
/// `(text, numeric, total)`.
pub fn item_loss_plain(model: &Model, item: &TrainItem, cfg: &LossConfig) -> Result<(f64, f64, f64)> {
    use crate::seqmodel::plain;
    let rows = model.assemble_rows(&item.seq, &item.numbers, &item.slot_ids, &item.obs)?;
    let hidden = model.forward_plain(&rows)?;
    let d = model.config.d;
    let v = model.config.vocab_size;
    let len = item.seq.len();
    let w = &model.params.get("lm_head.w")?.data;
    let b = &model.params.get("lm_head.b")?.data;
    let mut logits = plain::matmul(&hidden, len, d, w, v);
    plain::add_row(&mut logits, v, b);

    // cross-entropy, summed, same per-row log-sum-exp as the tape op
    let targets = shifted_ce_targets(&item.seq);
    let mut text = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t == IGNORE_INDEX {
            continue;
        }
        let row = &logits[i * v..(i + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        text += lse - row[t as usize];
    }

    let t = numeric_targets(model, item)?;
    let numeric = if model.variant.uses_number_head() && !t.is_empty() {
        let preds = t
            .positions
            .iter()
            .map(|&p| model.regress_number_plain(&hidden[(p - 1) * d..p * d]))
            .collect::<Result<Vec<f64>>>()?;
        match cfg.task_kind {
            TaskKind::Scalar => {
                preds.iter().zip(&t.values).map(|(p, g)| (p - g).abs()).sum::<f64>()
                    / preds.len() as f64
            }
            TaskKind::Trajectory => {
                if preds.len() % 2 != 0 {
                    return Err(Error::Contract(
                        "pair_l2_loss: waypoint stream must have even length".into(),
                    ));
                }
                let pairs = preds.len() / 2;
                (0..pairs)
                    .map(|i| {
                        let dx = preds[2 * i] - t.values[2 * i];
                        let dy = preds[2 * i + 1] - t.values[2 * i + 1];
                        (dx * dx + dy * dy).sqrt()
                    })
                    .sum::<f64>()
                    / pairs as f64
            }
        }
    } else {
        0.0
    };
    let total = text + numeric * cfg.lambda;
    Ok((text, numeric, total))
}

/// Decoupled-weight-decay Adam.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update from the gradients currently in the store, with the
    /// schedule multiplier applied to the base learning rate.
    pub fn step(&mut self, store: &mut ParamStore, lr_scale: f64) {
        self.t += 1;
        let lr = self.lr * lr_scale;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in store.iter_mut() {
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; p.data.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; p.data.len()]);
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
    }
}

/// Cosine learning-rate schedule with linear warmup; returns a multiplier
/// in [0, 1].
pub fn cosine_schedule(step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warm = ((total as f64) * warmup_ratio).ceil() as usize;
    if warm > 0 && step < warm {
        return (step + 1) as f64 / warm as f64;
    }
    if total <= warm {
        return 1.0;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub task_kind: TaskKind,
    pub seed: u64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            lambda: 1.0,
            task_kind: TaskKind::Scalar,
            seed: 0,
            weight_decay: 0.01,
            warmup_ratio: 0.03,
        }
    }
}

impl TrainConfig {
    /// Parse a plain-text `key=value` config (one pair per line, `#`
    /// comments allowed). Unknown keys are errors.
    pub fn apply_kv(&mut self, text: &str) -> Result<Vec<(String, String)>> {
        let mut extra = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key}: {e}"));
            match key {
                "steps" => self.steps = value.parse().map_err(|e| bad(&e))?,
                "batch_size" => self.batch_size = value.parse().map_err(|e| bad(&e))?,
                "lr" => self.lr = value.parse().map_err(|e| bad(&e))?,
                "lambda" => self.lambda = value.parse().map_err(|e| bad(&e))?,
                "task_kind" => self.task_kind = value.parse()?,
                "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
                "weight_decay" => self.weight_decay = value.parse().map_err(|e| bad(&e))?,
                "warmup_ratio" => self.warmup_ratio = value.parse().map_err(|e| bad(&e))?,
                // keys consumed by the CLI layer are passed through
                "encoding" | "variant" | "task" => extra.push((key.into(), value.into())),
                _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
            }
        }
        Ok(extra)
    }
}

/// One loss-curve row.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub text_loss: f64,
    pub num_loss: f64,
    pub total_loss: f64,
}

pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub final_loss: f64,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

/// Minibatch training loop. Batch items run as independent graphs (in
/// parallel under the `parallel` feature) and their gradients are summed
/// in item order, so results are deterministic for a given seed.
pub fn train(model: &mut Model, items: &[TrainItem], cfg: &TrainConfig) -> Result<TrainReport> {
    if items.is_empty() {
        return Err(Error::Contract("train: empty dataset".into()));
    }
    let loss_cfg = LossConfig { lambda: cfg.lambda, task_kind: cfg.task_kind };
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut initial = f64::NAN;
    let mut high_streak = 0usize;
    let mut last_total = 0.0;
    for step in 0..cfg.steps {
        let batch: Vec<&TrainItem> =
            (0..cfg.batch_size).map(|_| &items[rng.gen_range(0..items.len())]).collect();
        model.params.zero_grad();
        let outs = parallel::map_collect(&batch, |item| item_loss(model, item, &loss_cfg));
        let mut text_sum = 0.0;
        let mut num_sum = 0.0;
        for out in outs {
            let mut out = out?;
            out.sess.backward(out.loss)?;
            out.sess.accumulate_grads(&mut model.params)?;
            text_sum += out.text;
            num_sum += out.numeric;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        for (_, p) in model.params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= inv);
        }
        let text_mean = text_sum * inv;
        let num_mean = num_sum * inv;
        let total = text_mean + cfg.lambda * num_mean;
        if step == 0 {
            initial = total;
        }
        if total > DIVERGENCE_FACTOR * initial {
            high_streak += 1;
            if high_streak >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged { step, loss: total, initial });
            }
        } else {
            high_streak = 0;
        }
        opt.step(&mut model.params, cosine_schedule(step, cfg.steps, cfg.warmup_ratio));
        curve.push(CurvePoint { step, text_loss: text_mean, num_loss: num_mean, total_loss: total });
        last_total = total;
    }
    Ok(TrainReport { curve, final_loss: last_total })
}

/// Serialize the loss curve as CSV.
pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,text_loss,num_loss,total\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{}\n", p.step, p.text_loss, p.num_loss, p.total_loss));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::VariantKind;
    use crate::numtext::{self, ConversionPolicy, Role, Turn};
    use crate::seqmodel::ModelConfig;

    fn small_model(variant: VariantKind, seed: u64) -> Model {
        let cfg = ModelConfig { d: 16, n_layers: 1, n_heads: 2, max_seq_len: 96, ..Default::default() };
        Model::init(cfg, variant, seed).unwrap()
    }

    fn make_item(user: &str, assistant: &str) -> TrainItem {
        let d = numtext::encode_dialogue(
            &[
                Turn { role: Role::User, text: user.into() },
                Turn { role: Role::Assistant, text: assistant.into() },
            ],
            &ConversionPolicy::default(),
        )
        .unwrap();
        let mut seq = numtext::tokenize(&d);
        let mask = seq.role_mask.clone();
        numtext::build_labels(&mut seq, &mask).unwrap();
        TrainItem { seq, numbers: d.numbers, slot_ids: d.slot_ids, obs: vec![] }
    }

    #[test]
    fn uniform_logits_text_loss_is_count_times_ln_v() {
        let item = make_item("ask", "abc");
        let mut sess = Session::new();
        let v = Vocab::SIZE;
        let rows = item.seq.len();
        let logits = sess.tape.leaf(crate::gradcore::Shape::new(rows, v), vec![0.0; rows * v]);
        let (loss, count) = text_loss(&mut sess, logits, &item.seq).unwrap();
        assert!(count > 0);
        let expect = count as f64 * (v as f64).ln();
        assert!((sess.tape.value(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn logits_at_masked_positions_do_not_affect_text_loss() {
        let item = make_item("value 4 please", "got 4");
        let v = Vocab::SIZE;
        let rows = item.seq.len();
        let targets = shifted_ce_targets(&item.seq);
        let mut data: Vec<f64> = (0..rows * v).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut sess = Session::new();
        let logits = sess.tape.leaf(crate::gradcore::Shape::new(rows, v), data.clone());
        let (loss, _) = text_loss(&mut sess, logits, &item.seq).unwrap();
        let base = sess.tape.value(loss);
        // scramble every row whose shifted target is IGNORE
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                for j in 0..v {
                    data[i * v + j] += 100.0 * ((i + j) as f64).cos();
                }
            }
        }
        let mut sess = Session::new();
        let logits = sess.tape.leaf(crate::gradcore::Shape::new(rows, v), data);
        let (loss, _) = text_loss(&mut sess, logits, &item.seq).unwrap();
        assert_eq!(base.to_bits(), sess.tape.value(loss).to_bits());
    }

    #[test]
    fn lambda_zero_reduces_to_text_loss() {
        let model = small_model(VariantKind::DriveCode, 1);
        let item = make_item("n 5", "echo 5");
        let with = item_loss(&model, &item, &LossConfig { lambda: 0.0, task_kind: TaskKind::Scalar })
            .unwrap();
        assert_eq!(with.sess.tape.value(with.loss), with.text);
        assert!(with.numeric > 0.0 || with.numeric == 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut sess = Session::new();
        let a = sess.tape.scalar(2.0);
        let b = sess.tape.scalar(0.5);
        let t = total_loss(&mut sess, a, b, &LossConfig { lambda: 1.0, task_kind: TaskKind::Scalar })
            .unwrap();
        assert_eq!(sess.tape.value(t), 2.5);
        let mut sess = Session::new();
        let a = sess.tape.scalar(2.0);
        let b = sess.tape.scalar(0.5);
        let t = total_loss(&mut sess, a, b, &LossConfig { lambda: 0.0, task_kind: TaskKind::Scalar })
            .unwrap();
        assert_eq!(sess.tape.value(t), 2.0);
    }

    #[test]
    fn scalar_loss_hand_values() {
        let mut sess = Session::new();
        let p = sess.tape.leaf(crate::gradcore::Shape::new(1, 1), vec![1.0]);
        let l = scalar_loss(&mut sess, p, &[1.5]).unwrap();
        assert_eq!(sess.tape.value(l), 0.5);
        // random 5-element case vs hand sum/5
        let vals = [0.3, -1.2, 4.0, 2.5, -0.7];
        let tgts = [0.0, 1.0, 3.5, 2.5, -2.0];
        let mut sess = Session::new();
        let p = sess.tape.leaf(crate::gradcore::Shape::new(5, 1), vals.to_vec());
        let l = scalar_loss(&mut sess, p, &tgts).unwrap();
        let hand: f64 =
            vals.iter().zip(&tgts).map(|(a, b)| (a - b).abs()).sum::<f64>() / 5.0;
        assert!((sess.tape.value(l) - hand).abs() < 1e-15);
    }

    #[test]
    fn numeric_targets_use_previous_hidden_row() {
        let model = small_model(VariantKind::DriveCode, 2);
        let item = make_item("q 1", "a 2 b 3");
        let targets = numeric_targets(&model, &item).unwrap();
        // only the assistant-side placeholders are supervised
        assert_eq!(targets.len(), 2);
        for &p in &targets.positions {
            assert_eq!(item.seq.labels[p], NUMBER_TOKEN_INDEX);
            assert!(p >= 1);
        }
        // predictions read row p-1: verify via gather oracle
        let mut sess = Session::new();
        let h0 = model
            .assemble_input_tape(&mut sess, &item.seq, &item.numbers, &item.slot_ids, &[])
            .unwrap();
        let hidden = model.forward_tape(&mut sess, h0).unwrap();
        let preds = numeric_predictions(&model, &mut sess, hidden, &targets).unwrap();
        for (m, &p) in targets.positions.iter().enumerate() {
            let row = sess.tape.data(hidden)[(p - 1) * 16..p * 16].to_vec();
            let manual = model.regress_number_plain(&row).unwrap();
            assert!((sess.tape.data(preds)[m] - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_bit_identical() {
        let mut model = small_model(VariantKind::DriveCode, 3);
        let before: Vec<Vec<f64>> = model.params.iter().map(|(_, p)| p.data.clone()).collect();
        let items = vec![make_item("v 2", "r 2")];
        let cfg = TrainConfig { steps: 3, batch_size: 2, lr: 0.0, weight_decay: 0.0, ..Default::default() };
        train(&mut model, &items, &cfg).unwrap();
        let after: Vec<Vec<f64>> = model.params.iter().map(|(_, p)| p.data.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn gradient_reaches_projector_and_number_head() {
        let mut model = small_model(VariantKind::DriveCode, 4);
        let item = make_item("in 5", "out 7");
        let cfg = LossConfig { lambda: 1.0, task_kind: TaskKind::Scalar };
        model.params.zero_grad();
        let mut out = item_loss(&model, &item, &cfg).unwrap();
        out.sess.backward(out.loss).unwrap();
        out.sess.accumulate_grads(&mut model.params).unwrap();
        let nonzero = |name: &str| {
            model.params.get(name).unwrap().grad.iter().any(|&g| g != 0.0)
        };
        assert!(nonzero(crate::encoders::PROJ_W1));
        assert!(nonzero("num_head.w1"));
        assert!(nonzero("num_head.w2"));
    }

    #[test]
    fn cosine_schedule_shape() {
        assert!(cosine_schedule(0, 100, 0.03) > 0.0);
        assert!(cosine_schedule(2, 100, 0.03) <= 1.0);
        let end = cosine_schedule(99, 100, 0.03);
        assert!(end < 0.01, "end multiplier {end}");
        // monotone decay after warmup
        assert!(cosine_schedule(50, 100, 0.03) > cosine_schedule(80, 100, 0.03));
    }

    #[test]
    fn kv_config_parsing() {
        let mut cfg = TrainConfig::default();
        let extra = cfg
            .apply_kv("lr = 0.01\nsteps=42\nlambda=0.5\nseed=7\ntask_kind=trajectory\nencoding=xval\n# comment\n")
            .unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.steps, 42);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.task_kind, TaskKind::Trajectory);
        assert_eq!(extra, vec![("encoding".to_string(), "xval".to_string())]);
        assert!(TrainConfig::default().apply_kv("nope=1").is_err());
    }

    #[test]
    fn plain_loss_matches_tape_bitwise() {
        for variant in VariantKind::ALL {
            let model = small_model(variant, 8);
            let item = make_item("v 5.25 w 1.50", "r 2.50 s 3.75");
            for (lambda, task_kind) in
                [(1.0, TaskKind::Scalar), (0.5, TaskKind::Scalar), (1.0, TaskKind::Trajectory)]
            {
                let cfg = LossConfig { lambda, task_kind };
                let tape = item_loss(&model, &item, &cfg).unwrap();
                let (text, num, total) = item_loss_plain(&model, &item, &cfg).unwrap();
                assert_eq!(text.to_bits(), tape.text.to_bits(), "{variant} text");
                assert_eq!(num.to_bits(), tape.numeric.to_bits(), "{variant} numeric");
                assert_eq!(
                    total.to_bits(),
                    tape.sess.tape.value(tape.loss).to_bits(),
                    "{variant} total"
                );
            }
        }
    }

    #[test]
    fn specialization_renders_the_right_sides() {
        use crate::synthdrive::{make_dialogue, Episode, EpisodeParams, TaskId};
        let p = EpisodeParams::default();
        let rec = make_dialogue(TaskId::Speed, &Episode::generate(9, &p), &p);
        let full = numtext::encode_dialogue(&rec.turns, &ConversionPolicy::default()).unwrap();
        assert_eq!(full.numbers.len(), 4); // three prompt numbers, one answer

        let dc = specialize_dialogue(&full, VariantKind::DriveCode);
        assert_eq!(dc.numbers, full.numbers);
        assert_eq!(dc.slot_ids, vec![0, 1, 2, 3]);

        let var = specialize_dialogue(&full, VariantKind::Variant);
        assert_eq!(var.numbers, vec![full.numbers[3]]);
        assert_eq!(var.slot_ids, vec![3]); // answer keeps its global slot
        assert!(!var.turns[0].template.contains(NUMBER_PLACEHOLDER));
        assert!(var.turns[0].template.contains(&full.spans[0].original_literal));
        assert!(var.turns[1].template.contains(NUMBER_PLACEHOLDER));

        let text = specialize_dialogue(&full, VariantKind::Text);
        assert!(text.numbers.is_empty());
        for t in &text.turns {
            assert!(!t.template.contains(NUMBER_PLACEHOLDER));
        }
        // rendering restores the exact original text
        assert_eq!(text.turns[1].template, rec.turns[1].text);
    }

    #[test]
    fn prepared_items_supervise_only_retained_answer_numbers() {
        use crate::synthdrive::{make_dialogue, Episode, EpisodeParams, TaskId};
        let p = EpisodeParams::default();
        let recs: Vec<_> = (0..3)
            .map(|s| make_dialogue(TaskId::Traj, &Episode::generate(s, &p), &p))
            .collect();
        let policy = ConversionPolicy::default();
        for variant in VariantKind::ALL {
            let items = prepare_items(&recs, variant, &policy).unwrap();
            for item in &items {
                let supervised = item
                    .seq
                    .numeric_positions
                    .iter()
                    .filter(|&&i| item.seq.labels[i] == NUMBER_TOKEN_INDEX)
                    .count();
                let expected = match variant {
                    VariantKind::Text => 0,
                    _ => 6, // 2 * horizon answer numbers
                };
                assert_eq!(supervised, expected, "variant {variant}");
                assert_eq!(item.obs.len(), 1);
            }
        }
    }

    #[test]
    fn normalizer_fits_on_variant_independent_slots() {
        use crate::synthdrive::{make_dialogue, Episode, EpisodeParams, TaskId};
        let p = EpisodeParams::default();
        let recs: Vec<_> = (0..50)
            .map(|s| make_dialogue(TaskId::Speed, &Episode::generate(s, &p), &p))
            .collect();
        let policy = ConversionPolicy::default();
        let norm = fit_normalizer(&recs, &policy).unwrap();
        // slot 2 is the constant timestep: its mean is exact, so the
        // normalized value sits at zero despite the floored std
        let z = norm.normalize(2, 0.5);
        assert!(z.abs() < 1e-6, "z = {z}");
        // slot 0 (speed) round-trips
        let x = 7.25;
        assert!((norm.denormalize(0, norm.normalize(0, x)) - x).abs() < 1e-9);
    }

    #[test]
    fn train_is_deterministic_for_fixed_seed() {
        let items = vec![make_item("v 2", "r 2"), make_item("v 3", "r 3")];
        let cfg = TrainConfig { steps: 5, batch_size: 2, ..Default::default() };
        let mut m1 = small_model(VariantKind::DriveCode, 5);
        let r1 = train(&mut m1, &items, &cfg).unwrap();
        let mut m2 = small_model(VariantKind::DriveCode, 5);
        let r2 = train(&mut m2, &items, &cfg).unwrap();
        assert_eq!(r1.final_loss.to_bits(), r2.final_loss.to_bits());
        for ((_, a), (_, b)) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.data, b.data);
        }
    }
}
