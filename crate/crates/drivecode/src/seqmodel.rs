//! Compact causal transformer with multi-modal input assembly, an LM head
//! and a scalar number head.
//!
//! Input rows come from three sources: the text embedding table, the
//! active numeric encoder at numeric placeholder positions, and a one-layer
//! observation projector at observation placeholder positions (a fixed-width
//! stand-in for a vision tower). Both heads read the same final hidden
//! states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::encoders::{
    self, Normalizer, NumberProjector, PlaceholderEmbedding, VariantKind, XValEncoder,
};
use crate::gradcore::{
    gelu_scalar, load_checkpoint, save_checkpoint, ParamStore, Session, Shape, TensorId,
};
use crate::numtext::{TokenSequence, Vocab, IMAGE_TOKEN_INDEX, NUMBER_TOKEN_INDEX};
use crate::{Error, Result};

pub const EMBED_TOK: &str = "embed.tok";

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub obs_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: Vocab::SIZE,
            max_seq_len: 256,
            obs_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.d % 2 != 0 {
            return Err(Error::Config("hidden size must be even for the number head".into()));
        }
        Ok(())
    }
}

/// Checkpoint header contents.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    pub variant: VariantKind,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub normalizer: Normalizer,
    pub variant: VariantKind,
}

/// Fan-in-scaled init std. Fixed small constants only work when d is in
/// the hundreds; at desk scale they leave token content invisible next to
/// the unit-amplitude positional rows and stall learning.
fn xavier(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

impl Model {
    /// Fresh model: fan-in-scaled matrices, unit-scale embedding rows,
    /// zero biases, unit LN gains.
    pub fn init(config: ModelConfig, variant: VariantKind, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d;
        // Unit variance keeps token identity on the same footing as the
        // sinusoidal position signal added on top.
        p.add_normal(EMBED_TOK, Shape::new(config.vocab_size, d), 1.0, &mut rng)?;
        p.add_normal("obs_proj.w", Shape::new(config.obs_dim, d), xavier(config.obs_dim), &mut rng)?;
        p.add_zeros("obs_proj.b", Shape::new(1, d))?;
        NumberProjector::init(&mut p, d, &mut rng)?;
        for l in 0..config.n_layers {
            let pre = format!("layer{l}");
            p.add(&format!("{pre}.ln1.g"), Shape::new(1, d), vec![1.0; d])?;
            p.add_zeros(&format!("{pre}.ln1.b"), Shape::new(1, d))?;
            for nm in ["wq", "wk", "wv", "wo"] {
                p.add_normal(&format!("{pre}.attn.{nm}"), Shape::new(d, d), xavier(d), &mut rng)?;
            }
            for nm in ["bq", "bk", "bv", "bo"] {
                p.add_zeros(&format!("{pre}.attn.{nm}"), Shape::new(1, d))?;
            }
            p.add(&format!("{pre}.ln2.g"), Shape::new(1, d), vec![1.0; d])?;
            p.add_zeros(&format!("{pre}.ln2.b"), Shape::new(1, d))?;
            p.add_normal(&format!("{pre}.mlp.w1"), Shape::new(d, 4 * d), xavier(d), &mut rng)?;
            p.add_zeros(&format!("{pre}.mlp.b1"), Shape::new(1, 4 * d))?;
            p.add_normal(&format!("{pre}.mlp.w2"), Shape::new(4 * d, d), xavier(4 * d), &mut rng)?;
            p.add_zeros(&format!("{pre}.mlp.b2"), Shape::new(1, d))?;
        }
        p.add("final_ln.g", Shape::new(1, d), vec![1.0; d])?;
        p.add_zeros("final_ln.b", Shape::new(1, d))?;
        p.add_normal("lm_head.w", Shape::new(d, config.vocab_size), xavier(d), &mut rng)?;
        p.add_zeros("lm_head.b", Shape::new(1, config.vocab_size))?;
        let half = d / 2;
        p.add_normal("num_head.w1", Shape::new(d, half), xavier(d), &mut rng)?;
        p.add_zeros("num_head.b1", Shape::new(1, half))?;
        p.add("num_head.ln.g", Shape::new(1, half), vec![1.0; half])?;
        p.add_zeros("num_head.ln.b", Shape::new(1, half))?;
        p.add_normal("num_head.w2", Shape::new(half, 1), xavier(half), &mut rng)?;
        p.add_zeros("num_head.b2", Shape::new(1, 1))?;
        Ok(Model { config, params: p, normalizer: Normalizer::identity(), variant })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            config: self.config,
            normalizer: self.normalizer.clone(),
            variant: self.variant,
        };
        save_checkpoint(path, &self.params, &serde_json::to_string(&meta)?)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let (params, header) = load_checkpoint(path)?;
        let meta: ModelMeta = serde_json::from_str(&header)?;
        meta.config.validate()?;
        Ok(Model {
            config: meta.config,
            params,
            normalizer: meta.normalizer,
            variant: meta.variant,
        })
    }

    /// Sinusoidal position rows for a sequence of length `len`.
    pub fn positional_rows(&self, len: usize) -> Vec<f64> {
        let d = self.config.d;
        let mut out = vec![0.0; len * d];
        for pos in 0..len {
            for j in 0..d / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * j as f64 / d as f64);
                out[pos * d + 2 * j] = (pos as f64 * freq).sin();
                out[pos * d + 2 * j + 1] = (pos as f64 * freq).cos();
            }
        }
        out
    }

    /// Plain (tape-free) input assembly: per-position embedding rows for
    /// generation and inspection. `numbers` are raw values aligned with
    /// `seq.numeric_positions`; `slot_ids` pick normalizer statistics.
    pub fn assemble_rows(
        &self,
        seq: &TokenSequence,
        numbers: &[f64],
        slot_ids: &[usize],
        obs: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        self.check_alignment(seq, numbers.len(), obs.len())?;
        let d = self.config.d;
        let emb = &self.params.get(EMBED_TOK)?.data;
        let mut rows = vec![0.0; seq.len() * d];
        for (i, &id) in seq.ids.iter().enumerate() {
            let row = match id {
                NUMBER_TOKEN_INDEX | IMAGE_TOKEN_INDEX => Vocab::NUM as usize,
                t if t >= 0 && (t as usize) < self.config.vocab_size => t as usize,
                t => {
                    return Err(Error::Contract(format!("token id {t} at position {i}")));
                }
            };
            rows[i * d..(i + 1) * d].copy_from_slice(&emb[row * d..(row + 1) * d]);
        }
        for (k, (&pos, &x)) in seq.numeric_positions.iter().zip(numbers).enumerate() {
            let slot = slot_ids.get(k).copied().unwrap_or(k);
            let affine = self.normalizer.affine(slot);
            let row = match self.variant.placeholder_embedding() {
                PlaceholderEmbedding::Projector => {
                    NumberProjector::from_store(&self.params)?.project(affine, x)?
                }
                PlaceholderEmbedding::XValScale => {
                    XValEncoder::from_store(&self.params, EMBED_TOK)?.embed(affine, x)?
                }
                PlaceholderEmbedding::NumToken => {
                    emb[Vocab::NUM as usize * d..(Vocab::NUM as usize + 1) * d].to_vec()
                }
            };
            rows[pos * d..(pos + 1) * d].copy_from_slice(&row);
        }
        let ow = &self.params.get("obs_proj.w")?.data;
        let ob = &self.params.get("obs_proj.b")?.data;
        for (&pos, vec) in seq.obs_positions.iter().zip(obs) {
            if vec.len() != self.config.obs_dim {
                return Err(Error::Shape(format!(
                    "observation vector has {} dims, expected {}",
                    vec.len(),
                    self.config.obs_dim
                )));
            }
            let row = &mut rows[pos * d..(pos + 1) * d];
            row.copy_from_slice(ob);
            for (p, &v) in vec.iter().enumerate() {
                for j in 0..d {
                    row[j] += v * ow[p * d + j];
                }
            }
        }
        let posenc = self.positional_rows(seq.len());
        for (r, p) in rows.iter_mut().zip(&posenc) {
            *r += p;
        }
        Ok(rows)
    }

    fn check_alignment(&self, seq: &TokenSequence, n_numbers: usize, n_obs: usize) -> Result<()> {
        if seq.len() > self.config.max_seq_len {
            return Err(Error::Length { got: seq.len(), max: self.config.max_seq_len });
        }
        if seq.numeric_positions.len() != n_numbers {
            return Err(Error::Alignment(format!(
                "{} numeric placeholders but {} numbers",
                seq.numeric_positions.len(),
                n_numbers
            )));
        }
        if seq.obs_positions.len() != n_obs {
            return Err(Error::Alignment(format!(
                "{} observation placeholders but {} observation vectors",
                seq.obs_positions.len(),
                n_obs
            )));
        }
        Ok(())
    }

    /// Tape-side input assembly so gradients reach the embedding table,
    /// the numeric encoder, and the observation projector.
    pub fn assemble_input_tape(
        &self,
        sess: &mut Session,
        seq: &TokenSequence,
        numbers: &[f64],
        slot_ids: &[usize],
        obs: &[Vec<f64>],
    ) -> Result<TensorId> {
        self.check_alignment(seq, numbers.len(), obs.len())?;
        let d = self.config.d;
        let emb = sess.param(&self.params, EMBED_TOK)?;
        let idx: Vec<usize> = seq
            .ids
            .iter()
            .map(|&id| match id {
                NUMBER_TOKEN_INDEX | IMAGE_TOKEN_INDEX => Vocab::NUM as usize,
                t => t as usize,
            })
            .collect();
        let mut h0 = sess.tape.gather_rows(emb, &idx)?;
        if !seq.numeric_positions.is_empty() {
            let normalized: Vec<f64> = numbers
                .iter()
                .enumerate()
                .map(|(k, &x)| {
                    let slot = slot_ids.get(k).copied().unwrap_or(k);
                    self.normalizer.normalize(slot, x)
                })
                .collect();
            let rows = match self.variant.placeholder_embedding() {
                PlaceholderEmbedding::Projector => {
                    Some(encoders::project_numbers_tape(sess, &self.params, &normalized)?)
                }
                PlaceholderEmbedding::XValScale => {
                    Some(encoders::xval_embed_tape(sess, &self.params, EMBED_TOK, &normalized)?)
                }
                // gather already placed the [NUM] embedding there
                PlaceholderEmbedding::NumToken => None,
            };
            if let Some(rows) = rows {
                h0 = sess.tape.place_rows(h0, rows, &seq.numeric_positions)?;
            }
        }
        if !seq.obs_positions.is_empty() {
            let flat: Vec<f64> = obs.iter().flatten().copied().collect();
            let ov = sess.tape.leaf(Shape::new(obs.len(), self.config.obs_dim), flat);
            let ow = sess.param(&self.params, "obs_proj.w")?;
            let ob = sess.param(&self.params, "obs_proj.b")?;
            let proj = sess.tape.matmul(ov, ow)?;
            let proj = sess.tape.add_row(proj, ob)?;
            h0 = sess.tape.place_rows(h0, proj, &seq.obs_positions)?;
        }
        let _ = d;
        let pos = self.positional_tensor(sess, seq.len());
        sess.tape.add(h0, pos)
    }

    fn positional_tensor(&self, sess: &mut Session, len: usize) -> TensorId {
        let rows = self.positional_rows(len);
        sess.tape.leaf(Shape::new(len, self.config.d), rows)
    }

    /// Pre-LN transformer stack plus final LayerNorm; causal by
    /// construction. Returns `[L, d]` hidden states.
    pub fn forward_tape(&self, sess: &mut Session, h0: TensorId) -> Result<TensorId> {
        let len = sess.tape.shape(h0).rows;
        if len > self.config.max_seq_len {
            return Err(Error::Length { got: len, max: self.config.max_seq_len });
        }
        let d = self.config.d;
        let hd = d / self.config.n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let eps = 1e-5;
        let mut h = h0;
        for l in 0..self.config.n_layers {
            let pre = format!("layer{l}");
            let g1 = sess.param(&self.params, &format!("{pre}.ln1.g"))?;
            let b1 = sess.param(&self.params, &format!("{pre}.ln1.b"))?;
            let x = sess.tape.layer_norm(h, g1, b1, eps)?;
            let wq = sess.param(&self.params, &format!("{pre}.attn.wq"))?;
            let bq = sess.param(&self.params, &format!("{pre}.attn.bq"))?;
            let wk = sess.param(&self.params, &format!("{pre}.attn.wk"))?;
            let bk = sess.param(&self.params, &format!("{pre}.attn.bk"))?;
            let wv = sess.param(&self.params, &format!("{pre}.attn.wv"))?;
            let bv = sess.param(&self.params, &format!("{pre}.attn.bv"))?;
            let q = sess.tape.matmul(x, wq)?;
            let q = sess.tape.add_row(q, bq)?;
            let k = sess.tape.matmul(x, wk)?;
            let k = sess.tape.add_row(k, bk)?;
            let v = sess.tape.matmul(x, wv)?;
            let v = sess.tape.add_row(v, bv)?;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for hidx in 0..self.config.n_heads {
                let qh = sess.tape.slice_cols(q, hidx * hd, hd)?;
                let kh = sess.tape.slice_cols(k, hidx * hd, hd)?;
                let vh = sess.tape.slice_cols(v, hidx * hd, hd)?;
                let scores = sess.tape.matmul_nt(qh, kh)?;
                let scores = sess.tape.scale(scores, scale);
                let att = sess.tape.causal_softmax(scores)?;
                heads.push(sess.tape.matmul(att, vh)?);
            }
            let cat = sess.tape.concat_cols(&heads)?;
            let wo = sess.param(&self.params, &format!("{pre}.attn.wo"))?;
            let bo = sess.param(&self.params, &format!("{pre}.attn.bo"))?;
            let att_out = sess.tape.matmul(cat, wo)?;
            let att_out = sess.tape.add_row(att_out, bo)?;
            h = sess.tape.add(h, att_out)?;

            let g2 = sess.param(&self.params, &format!("{pre}.ln2.g"))?;
            let b2 = sess.param(&self.params, &format!("{pre}.ln2.b"))?;
            let y = sess.tape.layer_norm(h, g2, b2, eps)?;
            let w1 = sess.param(&self.params, &format!("{pre}.mlp.w1"))?;
            let mb1 = sess.param(&self.params, &format!("{pre}.mlp.b1"))?;
            let w2 = sess.param(&self.params, &format!("{pre}.mlp.w2"))?;
            let mb2 = sess.param(&self.params, &format!("{pre}.mlp.b2"))?;
            let m = sess.tape.matmul(y, w1)?;
            let m = sess.tape.add_row(m, mb1)?;
            let m = sess.tape.gelu(m);
            let m = sess.tape.matmul(m, w2)?;
            let m = sess.tape.add_row(m, mb2)?;
            h = sess.tape.add(h, m)?;
        }
        let g = sess.param(&self.params, "final_ln.g")?;
        let b = sess.param(&self.params, "final_ln.b")?;
        sess.tape.layer_norm(h, g, b, eps)
    }

    /// Linear map `[L,d] -> [L,V]`.
    pub fn lm_logits_tape(&self, sess: &mut Session, h: TensorId) -> Result<TensorId> {
        let w = sess.param(&self.params, "lm_head.w")?;
        let b = sess.param(&self.params, "lm_head.b")?;
        let logits = sess.tape.matmul(h, w)?;
        sess.tape.add_row(logits, b)
    }

    /// Number head over selected hidden rows: linear to d/2, LayerNorm,
    /// GELU, linear to a scalar. Output `[M,1]` in normalized units.
    pub fn regress_numbers_tape(
        &self,
        sess: &mut Session,
        h: TensorId,
        positions: &[usize],
    ) -> Result<TensorId> {
        let rows = sess.tape.gather_rows(h, positions)?;
        let w1 = sess.param(&self.params, "num_head.w1")?;
        let b1 = sess.param(&self.params, "num_head.b1")?;
        let g = sess.param(&self.params, "num_head.ln.g")?;
        let bb = sess.param(&self.params, "num_head.ln.b")?;
        let w2 = sess.param(&self.params, "num_head.w2")?;
        let b2 = sess.param(&self.params, "num_head.b2")?;
        let z = sess.tape.matmul(rows, w1)?;
        let z = sess.tape.add_row(z, b1)?;
        let z = sess.tape.layer_norm(z, g, bb, 1e-5)?;
        let z = sess.tape.gelu(z);
        let z = sess.tape.matmul(z, w2)?;
        sess.tape.add_row(z, b2)
    }

    /// Plain number head evaluation on one hidden row (normalized output).
    pub fn regress_number_plain(&self, h_row: &[f64]) -> Result<f64> {
        let d = self.config.d;
        if h_row.len() != d {
            return Err(Error::Shape(format!("hidden row has {} dims, expected {d}", h_row.len())));
        }
        let half = d / 2;
        let w1 = &self.params.get("num_head.w1")?.data;
        let b1 = &self.params.get("num_head.b1")?.data;
        let g = &self.params.get("num_head.ln.g")?.data;
        let bb = &self.params.get("num_head.ln.b")?.data;
        let w2 = &self.params.get("num_head.w2")?.data;
        let b2 = &self.params.get("num_head.b2")?.data;
        let mut z = b1.to_vec();
        for (p, &hv) in h_row.iter().enumerate() {
            if hv == 0.0 {
                continue;
            }
            for j in 0..half {
                z[j] += hv * w1[p * half + j];
            }
        }
        let mean = z.iter().sum::<f64>() / half as f64;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / half as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        let mut out = b2[0];
        for j in 0..half {
            let a = gelu_scalar(g[j] * (z[j] - mean) * inv + bb[j]);
            out += a * w2[j];
        }
        Ok(out)
    }

    /// Tape-free forward pass over assembled input rows `[len,d]`,
    /// mirroring [`Model::forward_tape`] operation by operation (same
    /// loop structure and summation order), so both paths produce
    /// bit-identical hidden states. Used where gradients are not needed:
    /// generation and finite-difference oracles.
    pub fn forward_plain(&self, h0: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.d;
        if h0.len() % d != 0 {
            return Err(Error::Shape(format!("input length {} not a multiple of {d}", h0.len())));
        }
        let len = h0.len() / d;
        if len > self.config.max_seq_len {
            return Err(Error::Length { got: len, max: self.config.max_seq_len });
        }
        let heads = self.config.n_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let eps = 1e-5;
        let w = |name: &str| -> Result<&[f64]> { Ok(&self.params.get(name)?.data) };
        let mut h = h0.to_vec();
        for l in 0..self.config.n_layers {
            let pre = format!("layer{l}");
            let x = plain::layer_norm(
                &h,
                len,
                d,
                w(&format!("{pre}.ln1.g"))?,
                w(&format!("{pre}.ln1.b"))?,
                eps,
            );
            let mut q = plain::matmul(&x, len, d, w(&format!("{pre}.attn.wq"))?, d);
            plain::add_row(&mut q, d, w(&format!("{pre}.attn.bq"))?);
            let mut k = plain::matmul(&x, len, d, w(&format!("{pre}.attn.wk"))?, d);
            plain::add_row(&mut k, d, w(&format!("{pre}.attn.bk"))?);
            let mut v = plain::matmul(&x, len, d, w(&format!("{pre}.attn.wv"))?, d);
            plain::add_row(&mut v, d, w(&format!("{pre}.attn.bv"))?);
            let mut cat = vec![0.0; len * d];
            for hi in 0..heads {
                let qh = plain::slice_cols(&q, len, d, hi * hd, hd);
                let kh = plain::slice_cols(&k, len, d, hi * hd, hd);
                let vh = plain::slice_cols(&v, len, d, hi * hd, hd);
                let mut scores = plain::matmul_nt(&qh, len, hd, &kh, len);
                scores.iter_mut().for_each(|s| *s *= scale);
                let att = plain::causal_softmax(&scores, len);
                let out = plain::matmul(&att, len, len, &vh, hd);
                // concat_cols: head hi occupies columns hi*hd..(hi+1)*hd
                for i in 0..len {
                    cat[i * d + hi * hd..i * d + (hi + 1) * hd]
                        .copy_from_slice(&out[i * hd..(i + 1) * hd]);
                }
            }
            let mut att_out = plain::matmul(&cat, len, d, w(&format!("{pre}.attn.wo"))?, d);
            plain::add_row(&mut att_out, d, w(&format!("{pre}.attn.bo"))?);
            for (hv, a) in h.iter_mut().zip(&att_out) {
                *hv += a;
            }
            let y = plain::layer_norm(
                &h,
                len,
                d,
                w(&format!("{pre}.ln2.g"))?,
                w(&format!("{pre}.ln2.b"))?,
                eps,
            );
            let hidden_mlp = 4 * d;
            let mut m = plain::matmul(&y, len, d, w(&format!("{pre}.mlp.w1"))?, hidden_mlp);
            plain::add_row(&mut m, hidden_mlp, w(&format!("{pre}.mlp.b1"))?);
            m.iter_mut().for_each(|x| *x = gelu_scalar(*x));
            let mut m = plain::matmul(&m, len, hidden_mlp, w(&format!("{pre}.mlp.w2"))?, d);
            plain::add_row(&mut m, d, w(&format!("{pre}.mlp.b2"))?);
            for (hv, a) in h.iter_mut().zip(&m) {
                *hv += a;
            }
        }
        Ok(plain::layer_norm(&h, len, d, w("final_ln.g")?, w("final_ln.b")?, eps))
    }

    /// LM-head logits for a single hidden row, matching the tape path's
    /// matmul row computation bit for bit.
    pub fn lm_logits_row_plain(&self, h_row: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.d;
        if h_row.len() != d {
            return Err(Error::Shape(format!("hidden row has {} dims, expected {d}", h_row.len())));
        }
        let w = &self.params.get("lm_head.w")?.data;
        let b = &self.params.get("lm_head.b")?.data;
        let v = self.config.vocab_size;
        let mut out = plain::matmul(h_row, 1, d, w, v);
        plain::add_row(&mut out, v, b);
        Ok(out)
    }
}

/// Tape-op mirrors used by [`Model::forward_plain`]. Each function keeps
/// the exact summation order of the corresponding tape op so results
/// agree bit for bit.
pub(crate) mod plain {
    /// C = A[m,k] @ B[k,n], ikj order with the same zero-skip as the tape.
    pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    /// C = A[m,k] @ B[n,k]^T, row-dot with iterator summation.
    pub fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    pub fn add_row(x: &mut [f64], n: usize, b: &[f64]) {
        for row in x.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }

    pub fn layer_norm(x: &[f64], rows: usize, n: usize, g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
        let mut out = vec![0.0; rows * n];
        for i in 0..rows {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        out
    }

    pub fn causal_softmax(scores: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &scores[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..=i {
                out[i * n + j] /= sum;
            }
        }
        out
    }

    pub fn slice_cols(x: &[f64], rows: usize, n: usize, start: usize, len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        out
    }
}
