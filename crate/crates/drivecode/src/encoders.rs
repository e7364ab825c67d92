//! The three numeric encoding strategies behind one interface: the number
//! projector (continuous embedding in, regression out), xVal-style scaled
//! embeddings, and plain digit tokenization.

use serde::{Deserialize, Serialize};

use crate::gradcore::{gelu_scalar, ParamStore, Session, Shape, TensorId};
use crate::numtext::{self, Vocab};
use crate::{Error, Result};

/// Which encoding strategy feeds numbers into the model.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    DriveCode,
    XVal,
    Digits,
}

impl std::str::FromStr for EncodingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drivecode" => Ok(EncodingKind::DriveCode),
            "xval" => Ok(EncodingKind::XVal),
            "digits" => Ok(EncodingKind::Digits),
            _ => Err(Error::Config(format!("unknown encoding '{s}'"))),
        }
    }
}

/// Ablation variants: how numbers are handled on each side of the model.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    /// Numeric input (projector) and numeric output (number head).
    DriveCode,
    /// Text-rendered numbers on input, number head on output.
    Variant,
    /// Digit text on both sides, no projector and no number head.
    Text,
    /// Scaled [NUM] embeddings on input, number head on output.
    XVal,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] =
        [VariantKind::DriveCode, VariantKind::Variant, VariantKind::Text, VariantKind::XVal];

    /// Numbers in non-assistant turns rendered back into digit text?
    pub fn text_input(&self) -> bool {
        matches!(self, VariantKind::Variant | VariantKind::Text)
    }

    /// Numbers in assistant turns rendered back into digit text?
    pub fn text_output(&self) -> bool {
        matches!(self, VariantKind::Text)
    }

    pub fn uses_number_head(&self) -> bool {
        !matches!(self, VariantKind::Text)
    }

    /// How a numeric placeholder position is embedded on the input side.
    pub fn placeholder_embedding(&self) -> PlaceholderEmbedding {
        match self {
            VariantKind::DriveCode => PlaceholderEmbedding::Projector,
            VariantKind::XVal => PlaceholderEmbedding::XValScale,
            VariantKind::Variant | VariantKind::Text => PlaceholderEmbedding::NumToken,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VariantKind::DriveCode => "drivecode",
            VariantKind::Variant => "variant",
            VariantKind::Text => "text",
            VariantKind::XVal => "xval",
        }
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drivecode" => Ok(VariantKind::DriveCode),
            "variant" => Ok(VariantKind::Variant),
            "text" => Ok(VariantKind::Text),
            "xval" => Ok(VariantKind::XVal),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Input-side embedding rule for numeric placeholder positions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PlaceholderEmbedding {
    /// Number projector output (two-layer MLP).
    Projector,
    /// The [NUM] token embedding scaled by the normalized value.
    XValScale,
    /// The plain [NUM] token embedding, value-independent.
    NumToken,
}

/// Affine input transform: z = (x - mean) / std.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Affine {
    pub mean: f64,
    pub std: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Affine { mean: 0.0, std: 1.0 }
    }
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

const STD_FLOOR: f64 = 1e-6;

/// Z-score statistics per template slot, fit on the training split and
/// stored in the checkpoint so inference is self-contained. Slots beyond
/// the fitted range fall back to the global statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Normalizer {
    pub slots: Vec<Affine>,
    pub global: Affine,
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer { slots: Vec::new(), global: Affine::identity() }
    }

    /// Fit per-slot and global statistics from values grouped by slot id.
    pub fn fit(slot_values: &[Vec<f64>]) -> Self {
        fn stats(vals: &[f64]) -> Affine {
            if vals.is_empty() {
                return Affine::identity();
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            Affine { mean, std: var.sqrt().max(STD_FLOOR) }
        }
        let all: Vec<f64> = slot_values.iter().flatten().copied().collect();
        Normalizer {
            slots: slot_values.iter().map(|v| stats(v)).collect(),
            global: stats(&all),
        }
    }

    pub fn affine(&self, slot: usize) -> Affine {
        self.slots.get(slot).copied().unwrap_or(self.global)
    }

    pub fn normalize(&self, slot: usize, x: f64) -> f64 {
        self.affine(slot).normalize(x)
    }

    pub fn denormalize(&self, slot: usize, z: f64) -> f64 {
        self.affine(slot).denormalize(z)
    }
}

/// Parameter names used by the number projector inside a [`ParamStore`].
pub const PROJ_W1: &str = "num_proj.w1";
pub const PROJ_B1: &str = "num_proj.b1";
pub const PROJ_W2: &str = "num_proj.w2";
pub const PROJ_B2: &str = "num_proj.b2";

/// Two-layer MLP with GELU mapping a scalar into the d-dimensional hidden
/// space. Borrowed view over the parameter store.
pub struct NumberProjector<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    d: usize,
}

impl<'a> NumberProjector<'a> {
    pub fn init(store: &mut ParamStore, d: usize, rng: &mut impl rand::Rng) -> Result<()> {
        // Fan-in here is a single scalar, so the usual 0.02 init would
        // attenuate the value signal far below the token-embedding scale;
        // unit variance keeps the number visible to the first layer.
        store.add_normal(PROJ_W1, Shape::new(1, d), 1.0, rng)?;
        store.add_zeros(PROJ_B1, Shape::new(1, d))?;
        store.add_normal(PROJ_W2, Shape::new(d, d), (1.0 / d as f64).sqrt(), rng)?;
        store.add_zeros(PROJ_B2, Shape::new(1, d))?;
        Ok(())
    }

    pub fn from_store(store: &'a ParamStore) -> Result<Self> {
        let w1 = store.get(PROJ_W1)?;
        let d = w1.shape.cols;
        Ok(NumberProjector {
            w1: &w1.data,
            b1: &store.get(PROJ_B1)?.data,
            w2: &store.get(PROJ_W2)?.data,
            b2: &store.get(PROJ_B2)?.data,
            d,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.d
    }

    /// w2 . GELU(w1 . normalize(x) + b1) + b2
    pub fn project(&self, affine: Affine, x: f64) -> Result<Vec<f64>> {
        if !x.is_finite() {
            return Err(Error::Input(format!("project_number: non-finite input {x}")));
        }
        let z = affine.normalize(x);
        let d = self.d;
        let mut h = vec![0.0; d];
        for j in 0..d {
            h[j] = gelu_scalar(self.w1[j] * z + self.b1[j]);
        }
        let mut out = self.b2.to_vec();
        for (p, &hv) in h.iter().enumerate() {
            if hv == 0.0 {
                continue;
            }
            let row = &self.w2[p * d..(p + 1) * d];
            for j in 0..d {
                out[j] += hv * row[j];
            }
        }
        Ok(out)
    }
}

/// Tape-side projector evaluation for a batch of already-normalized
/// values; returns a `[K, d]` tensor so gradients flow into the projector
/// parameters.
pub fn project_numbers_tape(
    sess: &mut Session,
    store: &ParamStore,
    normalized: &[f64],
) -> Result<TensorId> {
    let w1 = sess.param(store, PROJ_W1)?;
    let b1 = sess.param(store, PROJ_B1)?;
    let w2 = sess.param(store, PROJ_W2)?;
    let b2 = sess.param(store, PROJ_B2)?;
    let xs = sess.tape.leaf(Shape::new(normalized.len(), 1), normalized.to_vec());
    let h = sess.tape.matmul(xs, w1)?;
    let h = sess.tape.add_row(h, b1)?;
    let h = sess.tape.gelu(h);
    let h = sess.tape.matmul(h, w2)?;
    sess.tape.add_row(h, b2)
}

/// xVal scaled embedding: the reserved number token's embedding row scaled
/// by the clamped normalized value.
pub struct XValEncoder<'a> {
    num_embedding: &'a [f64],
}

/// Normalized values are clamped to this band before scaling the embedding
/// so outliers cannot blow up feature norms.
pub const XVAL_CLAMP: f64 = 5.0;

impl<'a> XValEncoder<'a> {
    /// Borrow the `[NUM]` row of the token embedding table.
    pub fn from_store(store: &'a ParamStore, embed_name: &str) -> Result<Self> {
        let emb = store.get(embed_name)?;
        let d = emb.shape.cols;
        let row = Vocab::NUM as usize;
        if row >= emb.shape.rows {
            return Err(Error::Shape("embedding table lacks a [NUM] row".into()));
        }
        Ok(XValEncoder { num_embedding: &emb.data[row * d..(row + 1) * d] })
    }

    pub fn embed(&self, affine: Affine, x: f64) -> Result<Vec<f64>> {
        if !x.is_finite() {
            return Err(Error::Input(format!("xval_embed: non-finite input {x}")));
        }
        let z = affine.normalize(x).clamp(-XVAL_CLAMP, XVAL_CLAMP);
        Ok(self.num_embedding.iter().map(|&e| z * e).collect())
    }

    pub fn num_embedding(&self) -> &[f64] {
        self.num_embedding
    }
}

/// Tape-side xVal embedding of a batch of normalized values.
pub fn xval_embed_tape(
    sess: &mut Session,
    store: &ParamStore,
    embed_name: &str,
    normalized: &[f64],
) -> Result<TensorId> {
    let emb = sess.param(store, embed_name)?;
    let d = sess.tape.shape(emb).cols;
    let rows = sess.tape.gather_rows(emb, &vec![Vocab::NUM as usize; normalized.len()])?;
    let scales: Vec<f64> = normalized
        .iter()
        .flat_map(|&z| std::iter::repeat(z.clamp(-XVAL_CLAMP, XVAL_CLAMP)).take(d))
        .collect();
    let s = sess.tape.leaf(Shape::new(normalized.len(), d), scales);
    sess.tape.mul(rows, s)
}

/// Fixed-precision digit rendering: sign, integer digits, '.', exactly
/// `places` fractional digits. One token per character.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DigitCodec {
    pub places: usize,
}

impl Default for DigitCodec {
    fn default() -> Self {
        DigitCodec { places: 2 }
    }
}

impl DigitCodec {
    pub fn format(&self, x: f64) -> Result<String> {
        if !x.is_finite() || x.abs() >= 1e9 {
            return Err(Error::Input(format!("digit_encode: value {x} out of range")));
        }
        Ok(numtext::format_fixed(x, self.places))
    }

    pub fn encode(&self, x: f64) -> Result<Vec<i64>> {
        Ok(self.format(x)?.chars().map(Vocab::encode_char).collect())
    }

    pub fn decode_str(&self, s: &str) -> Result<f64> {
        let ok = {
            let body = s.strip_prefix('-').unwrap_or(s);
            let parts: Vec<&str> = body.split('.').collect();
            parts.len() == 2
                && !parts[0].is_empty()
                && parts[1].len() == self.places
                && parts.iter().all(|p| p.bytes().all(|b| b.is_ascii_digit()))
        };
        if !ok {
            return Err(Error::Parse(format!("malformed digit string '{s}'")));
        }
        s.parse().map_err(|e| Error::Parse(format!("'{s}': {e}")))
    }

    pub fn decode(&self, ids: &[i64]) -> Result<f64> {
        let s: String = ids.iter().map(|&id| Vocab::decode(id)).collect();
        self.decode_str(&s)
    }

    /// Value after round-half-away-from-zero at the configured precision.
    pub fn round(&self, x: f64) -> f64 {
        let scale = 10f64.powi(self.places as i32);
        x.signum() * (x.abs() * scale + 0.5).floor() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_store(d: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store
            .add_normal("embed.tok", Shape::new(Vocab::SIZE, d), 0.02, &mut rng)
            .unwrap();
        NumberProjector::init(&mut store, d, &mut rng).unwrap();
        store
    }

    #[test]
    fn projector_zero_propagates() {
        let d = 8;
        let mut store = test_store(d, 1);
        // zero biases already; force normalize(x) = 0
        store.get_mut(PROJ_B1).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let p = NumberProjector::from_store(&store).unwrap();
        let out = p.project(Affine { mean: 4.0, std: 2.0 }, 4.0).unwrap();
        assert_eq!(out, vec![0.0; d]);
    }

    #[test]
    fn projector_output_length_is_d() {
        let store = test_store(16, 2);
        let p = NumberProjector::from_store(&store).unwrap();
        assert_eq!(p.project(Affine::identity(), 123.456).unwrap().len(), 16);
    }

    #[test]
    fn projector_matches_hand_composed_algebra() {
        // Oracle: independent dense-algebra evaluation of the two layers.
        let d = 8;
        let store = test_store(d, 3);
        let p = NumberProjector::from_store(&store).unwrap();
        let x = 10.5;
        let out = p.project(Affine::identity(), x).unwrap();

        let w1 = &store.get(PROJ_W1).unwrap().data;
        let b1 = &store.get(PROJ_B1).unwrap().data;
        let w2 = &store.get(PROJ_W2).unwrap().data;
        let b2 = &store.get(PROJ_B2).unwrap().data;
        for j in 0..d {
            let mut acc = b2[j];
            for p_ in 0..d {
                acc += gelu_scalar(w1[p_] * x + b1[p_]) * w2[p_ * d + j];
            }
            assert!((acc - out[j]).abs() < 1e-12, "col {j}: {acc} vs {}", out[j]);
        }
    }

    #[test]
    fn projector_rejects_non_finite() {
        let store = test_store(8, 4);
        let p = NumberProjector::from_store(&store).unwrap();
        assert!(p.project(Affine::identity(), f64::NAN).is_err());
        assert!(p.project(Affine::identity(), f64::INFINITY).is_err());
    }

    #[test]
    fn tape_projector_matches_plain_and_finite_differences() {
        let d = 8;
        let store = test_store(d, 5);
        let p = NumberProjector::from_store(&store).unwrap();
        let z = 0.7;
        let plain = p.project(Affine::identity(), z).unwrap();

        let mut sess = Session::new();
        let out = project_numbers_tape(&mut sess, &store, &[z]).unwrap();
        for (a, b) in sess.tape.data(out).iter().zip(&plain) {
            assert_eq!(a, b);
        }

        // Gradient of sum(output) w.r.t. the scalar input vs central FD.
        let ones = sess.tape.leaf(Shape::new(d, 1), vec![1.0; d]);
        let s = sess.tape.matmul(out, ones).unwrap();
        sess.backward(s).unwrap();
        // The normalized-value leaf is tensor id right after the 4 params.
        let h = 1e-5;
        let up: f64 = p.project(Affine::identity(), z + h).unwrap().iter().sum();
        let dn: f64 = p.project(Affine::identity(), z - h).unwrap().iter().sum();
        let fd = (up - dn) / (2.0 * h);
        // find the [1,1] leaf holding z
        let mut grad_z = None;
        for id in 0..6 {
            if sess.tape.shape(id) == Shape::new(1, 1) && sess.tape.data(id) == [z] {
                grad_z = Some(sess.tape.grad(id).unwrap()[0]);
            }
        }
        let grad_z = grad_z.expect("input leaf not found");
        assert!(
            (grad_z - fd).abs() / fd.abs().max(1.0) < 1e-3,
            "analytic {grad_z} vs fd {fd}"
        );
    }

    #[test]
    fn xval_zero_and_identity_scaling() {
        let store = test_store(8, 6);
        let e = XValEncoder::from_store(&store, "embed.tok").unwrap();
        let affine = Affine { mean: 2.0, std: 1.0 };
        assert_eq!(e.embed(affine, 2.0).unwrap(), vec![0.0; 8]);
        assert_eq!(e.embed(affine, 3.0).unwrap(), e.num_embedding());
    }

    #[test]
    fn xval_collinearity() {
        // Oracle: direct dot-product cosine computation.
        let store = test_store(8, 7);
        let e = XValEncoder::from_store(&store, "embed.tok").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-100.0..100.0);
            let v = e.embed(Affine { mean: 0.0, std: 10.0 }, x).unwrap();
            let dot: f64 = v.iter().zip(e.num_embedding()).map(|(a, b)| a * b).sum();
            let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ne: f64 = e.num_embedding().iter().map(|a| a * a).sum::<f64>().sqrt();
            if nv == 0.0 {
                continue;
            }
            let cos = dot / (nv * ne);
            assert!((cos.abs() - 1.0).abs() < 1e-12, "cos {cos}");
        }
    }

    #[test]
    fn digit_round_trips() {
        let c = DigitCodec { places: 2 };
        assert_eq!(c.format(10.5).unwrap(), "10.50");
        assert_eq!(c.encode(10.5).unwrap().len(), 5);
        assert_eq!(c.decode(&c.encode(10.5).unwrap()).unwrap(), 10.5);
        assert_eq!(c.format(-3.256).unwrap(), "-3.26");
        assert_eq!(c.decode_str("-3.26").unwrap(), -3.26);
        assert_eq!(c.format(0.0).unwrap(), "0.00");
        assert_eq!(c.decode_str("0.00").unwrap(), 0.0);
    }

    #[test]
    fn digit_round_trip_exact_for_random_values() {
        let c = DigitCodec { places: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100_000 {
            let x: f64 = rng.gen_range(-1e6..1e6);
            let s = c.format(x).unwrap();
            assert_eq!(c.decode_str(&s).unwrap(), c.round(x), "x={x} s={s}");
        }
    }

    #[test]
    fn digit_decode_rejects_malformed() {
        let c = DigitCodec { places: 2 };
        assert!(c.decode_str("3.1.4").is_err());
        assert!(c.decode_str("3.1").is_err());
        assert!(c.decode_str("abc").is_err());
        assert!(c.decode_str("").is_err());
    }

    #[test]
    fn normalizer_slot_fallback() {
        let n = Normalizer::fit(&[vec![1.0, 3.0], vec![10.0, 30.0]]);
        assert!((n.affine(0).mean - 2.0).abs() < 1e-12);
        assert!((n.affine(1).mean - 20.0).abs() < 1e-12);
        // out-of-range slot uses global stats
        assert!((n.affine(5).mean - 11.0).abs() < 1e-12);
        let z = n.normalize(0, 3.0);
        assert!((n.denormalize(0, z) - 3.0).abs() < 1e-12);
    }
}
