//! The dictionary-conditioned network: positional encoding, multi-head
//! cross-attention to a learnable token dictionary, a coordinate skip and a
//! ReLU distance MLP.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{points_matrix, ImplicitField};
use crate::autodiff::{Matrix, ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Architecture hyperparameters. Stored next to every checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldConfig {
    /// Frequency bands of the positional encoding.
    pub bands: usize,
    /// Number of dictionary tokens.
    pub dict_size: usize,
    /// Token width; also the attention width summed over heads.
    pub embed_dim: usize,
    pub heads: usize,
    /// Hidden layers of the distance MLP.
    pub layers: usize,
    /// Hidden width of the MLP and width of the attention output.
    pub hidden: usize,
    /// `false` replaces encoding-to-attention with a plain linear lift and
    /// widens the MLP until the parameter count roughly matches.
    pub attention: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            bands: 6,
            dict_size: 16,
            embed_dim: 256,
            heads: 8,
            layers: 8,
            hidden: 256,
            attention: true,
        }
    }
}

const KEYS: [&str; 7] = [
    "bands",
    "dict_size",
    "embed_dim",
    "heads",
    "layers",
    "hidden",
    "attention",
];

impl FieldConfig {
    pub fn encoding_dim(&self) -> usize {
        3 + 6 * self.bands
    }

    pub fn key_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dict_size == 0 || self.embed_dim == 0 || self.heads == 0 {
            return bad("dictionary size, embedding width and head count must be positive".into());
        }
        if self.layers == 0 || self.hidden == 0 {
            return bad("the MLP needs at least one layer of positive width".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.attention && self.dict_size > self.embed_dim {
            return bad(format!(
                "orthonormal dictionary needs dict_size ({}) <= embed_dim ({})",
                self.dict_size, self.embed_dim
            ));
        }
        Ok(())
    }

    /// MLP layer that receives the concatenated input again.
    pub fn skip_layer(&self) -> Option<usize> {
        (self.layers >= 2).then_some(self.layers / 2)
    }

    /// Effective MLP width: `hidden` with attention, otherwise the width
    /// whose parameter count is closest to the attention model's.
    pub fn mlp_width(&self) -> usize {
        if self.attention {
            return self.hidden;
        }
        let target = Self {
            attention: true,
            ..self.clone()
        }
        .parameter_count();
        (self.hidden..=self.hidden * 4)
            .min_by_key(|&w| self.count_with_width(w).abs_diff(target))
            .unwrap_or(self.hidden)
    }

    pub fn parameter_count(&self) -> usize {
        self.shapes().iter().map(|(_, (r, c))| r * c).sum()
    }

    fn count_with_width(&self, width: usize) -> usize {
        self.shapes_with_width(width)
            .iter()
            .map(|(_, (r, c))| r * c)
            .sum()
    }

    /// Parameter names and shapes in storage order.
    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.shapes_with_width(self.mlp_width())
    }

    fn shapes_with_width(&self, width: usize) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        let dq = self.encoding_dim();
        if self.attention {
            let (de, dk) = (self.embed_dim, self.key_dim());
            out.push(("dictionary".into(), (self.dict_size, de)));
            out.push(("w_gamma".into(), (dq, de)));
            for h in 0..self.heads {
                for m in ["w_q", "w_k", "w_v"] {
                    out.push((format!("head{h}.{m}"), (de, dk)));
                }
            }
            out.push(("w_o".into(), (de, width)));
        } else {
            out.push(("w_lift".into(), (dq, width)));
        }
        out.push(("w_proj".into(), (3, width)));
        for i in 0..self.layers {
            let fan_in = if Some(i) == self.skip_layer() {
                2 * width
            } else {
                width
            };
            out.push((format!("mlp{i}.weight"), (fan_in, width)));
            out.push((format!("mlp{i}.bias"), (1, width)));
        }
        out.push(("out.weight".into(), (width, 1)));
        out.push(("out.bias".into(), (1, 1)));
        out
    }

    pub fn to_text(&self) -> String {
        format!(
            "bands = {}\ndict_size = {}\nembed_dim = {}\nheads = {}\nlayers = {}\nhidden = {}\nattention = {}\n",
            self.bands,
            self.dict_size,
            self.embed_dim,
            self.heads,
            self.layers,
            self.hidden,
            self.attention
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {value:?}")))
        };
        match key {
            "bands" => self.bands = int()?,
            "dict_size" => self.dict_size = int()?,
            "embed_dim" => self.embed_dim = int()?,
            "heads" => self.heads = int()?,
            "layers" => self.layers = int()?,
            "hidden" => self.hidden = int()?,
            "attention" => {
                self.attention = value
                    .parse()
                    .map_err(|_| Error::Config(format!("attention: expected true/false, got {value:?}")))?
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown architecture key {key:?} (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }
}

/// Positional encoding of one point.
///
/// Layout: `[x, y, z, sin(πx), sin(πy), sin(πz), cos(πx), cos(πy), cos(πz),
/// sin(2πx), …]`, doubling the frequency per band.
pub fn encode(x: &Vec3, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * bands);
    out.extend(x.iter());
    for b in 0..bands {
        let f = (1u64 << b) as f64 * PI;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    out
}

fn encode_graph<'t>(x: Var<'t>, bands: usize) -> Var<'t> {
    let mut parts = vec![x];
    for b in 0..bands {
        let scaled = x * ((1u64 << b) as f64 * PI);
        parts.push(scaled.sin());
        parts.push(scaled.cos());
    }
    Var::concat_cols(&parts)
}

/// The trained distance network.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveField {
    config: FieldConfig,
    store: ParameterStore,
}

impl AttentiveField {
    /// Fresh network with orthonormal dictionary rows and near-zero output.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(seed);
        for (name, (rows, cols)) in config.shapes() {
            let value = if name == "dictionary" {
                orthonormal_rows(rows, cols, &mut rng)
            } else if name.ends_with(".bias") {
                Matrix::zeros((rows, cols))
            } else if name == "out.weight" {
                gaussian(rows, cols, 1e-8, &mut rng)
            } else if name.starts_with("mlp") {
                gaussian(rows, cols, 2.0 / cols as f64, &mut rng)
            } else {
                gaussian(rows, cols, 1.0 / rows as f64, &mut rng)
            };
            store.add(name, value);
        }
        Ok(Self { config, store })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_parts(config: FieldConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes();
        if shapes.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "architecture expects {} parameters, checkpoint has {}",
                shapes.len(),
                store.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(store.iter()) {
            if &p.name != name || p.value.dim() != *shape {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.value.dim()
                )));
            }
        }
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Sets a parameter by name. Shapes must match.
    pub fn set_parameter(&mut self, name: &str, value: Matrix) -> Result<()> {
        let slot = self
            .store
            .find(name)
            .ok_or_else(|| Error::Argument(format!("no parameter named {name:?}")))?;
        let target = self.store.value_mut(slot);
        if target.dim() != value.dim() {
            return Err(Error::Argument(format!(
                "{name}: shape {:?} does not match {:?}",
                value.dim(),
                target.dim()
            )));
        }
        *target = value;
        Ok(())
    }

    /// Flips the sign of the output, leaving the zero set unchanged.
    pub fn negate_output(&mut self) {
        for name in ["out.weight", "out.bias"] {
            let slot = self.store.find(name).expect("output layer exists");
            self.store.value_mut(slot).mapv_inplace(|v| -v);
        }
    }

    /// Attention context `z(x)` (before the coordinate skip) per point.
    pub fn context(&self, points: &[Vec3]) -> Result<Vec<Vec<f64>>> {
        self.require_attention()?;
        let tape = Tape::new();
        let params = self.bind(&tape);
        let x = tape.constant(points_matrix(points));
        let (z, _) = self.attend(&params, encode_graph(x, self.config.bands));
        Ok(rows(&z.value()))
    }

    /// Per-point attention weights, heads concatenated (`heads × dict_size`
    /// values, head-major).
    pub fn attention_weights(&self, points: &[Vec3]) -> Result<Vec<Vec<f64>>> {
        self.require_attention()?;
        let tape = Tape::new();
        let params = self.bind(&tape);
        let x = tape.constant(points_matrix(points));
        let (_, weights) = self.attend(&params, encode_graph(x, self.config.bands));
        Ok(rows(&Var::concat_cols(&weights).value()))
    }

    /// Dot product of each probe's attention weights with the anchor's.
    pub fn attention_similarity(&self, anchor: &Vec3, probes: &[Vec3]) -> Result<Vec<f64>> {
        let anchor_w = self.attention_weights(std::slice::from_ref(anchor))?.remove(0);
        Ok(self
            .attention_weights(probes)?
            .iter()
            .map(|w| w.iter().zip(&anchor_w).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Writes the checkpoint and its `.arch` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.store.save(path)?;
        let arch = arch_path(path);
        std::fs::write(&arch, self.config.to_text()).map_err(|e| Error::io(&arch, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let arch = arch_path(path);
        let text = std::fs::read_to_string(&arch).map_err(|e| Error::io(&arch, e))?;
        Self::from_parts(FieldConfig::parse(&text)?, ParameterStore::load(path)?)
    }

    fn require_attention(&self) -> Result<()> {
        if self.config.attention {
            Ok(())
        } else {
            Err(Error::Config("this field was built without attention".into()))
        }
    }

    /// Context and per-head attention weights from the encoding.
    fn attend<'t>(&self, params: &[Var<'t>], enc: Var<'t>) -> (Var<'t>, Vec<Var<'t>>) {
        let dict = params[0];
        let q = enc.matmul(params[1]);
        let scale = 1.0 / (self.config.key_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let [wq, wk, wv] = [0, 1, 2].map(|k| params[2 + 3 * h + k]);
            let keys = dict.matmul(wk);
            let values = dict.matmul(wv);
            let w = (q.matmul(wq).matmul(keys.t()) * scale).softmax_rows();
            heads.push(w.matmul(values));
            weights.push(w);
        }
        let wo = params[2 + 3 * self.config.heads];
        (Var::concat_cols(&heads).matmul(wo), weights)
    }
}

impl ImplicitField for AttentiveField {
    fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.store.bind(tape)
    }

    fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let enc = encode_graph(x, self.config.bands);
        let (z, mut next) = if self.config.attention {
            (self.attend(params, enc).0, 3 + 3 * self.config.heads)
        } else {
            (enc.matmul(params[0]), 1)
        };
        let zbar = z + x.matmul(params[next]);
        next += 1;
        let mut h = zbar;
        for i in 0..self.config.layers {
            if Some(i) == self.config.skip_layer() {
                h = Var::concat_cols(&[h, zbar]);
            }
            h = (h.matmul(params[next]) + params[next + 1]).relu();
            next += 2;
        }
        h.matmul(params[next]) + params[next + 1]
    }
}

fn arch_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".arch");
    PathBuf::from(s)
}

fn gaussian(rows: usize, cols: usize, variance: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite variance");
    Matrix::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// `rows × cols` matrix with orthonormal rows (`rows ≤ cols`).
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let a = DMatrix::<f64>::from_fn(cols, rows, |_, _| normal.sample(rng));
    let q = a.qr().q();
    Matrix::from_shape_fn((rows, cols), |(i, j)| q[(j, i)])
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn small(attention: bool) -> FieldConfig {
        FieldConfig {
            bands: 4,
            dict_size: 8,
            embed_dim: 32,
            heads: 4,
            layers: 4,
            hidden: 32,
            attention,
        }
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn encoding_at_origin() {
        let e = encode(&Vec3::zeros(), 6);
        assert_eq!(e.len(), 39);
        for b in 0..6 {
            let base = 3 + 6 * b;
            assert_eq!(&e[base..base + 3], &[0.0; 3]);
            assert_eq!(&e[base + 3..base + 6], &[1.0; 3]);
        }
    }

    #[test]
    fn encoding_first_band() {
        let e = encode(&Vec3::new(0.5, 0.0, 0.0), 6);
        assert!((e[3] - 1.0).abs() < 1e-15);
        assert!(e[6].abs() < 1e-15);
    }

    #[test]
    fn encoding_separates_distinct_points() {
        let a = random_points(10_000, 21);
        let b = random_points(10_000, 22);
        for (p, q) in a.iter().zip(&b) {
            if p != q {
                assert_ne!(encode(p, 6), encode(q, 6));
            }
        }
    }

    #[test]
    fn encoding_graph_matches_scalar_encoding() {
        let pts = random_points(20, 1);
        let tape = Tape::new();
        let enc = encode_graph(tape.constant(points_matrix(&pts)), 6).value();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(enc.row(i).to_vec(), encode(p, 6));
        }
    }

    #[test]
    fn dictionary_rows_are_orthonormal() {
        let field = AttentiveField::new(FieldConfig::default(), 3).unwrap();
        let e = field.store().value(0);
        let gram = e.dot(&e.t());
        for i in 0..16 {
            for j in 0..16 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oversized_dictionary_is_rejected() {
        let cfg = FieldConfig {
            dict_size: 64,
            ..small(true)
        };
        assert!(matches!(AttentiveField::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn output_is_near_zero_at_init() {
        let field = AttentiveField::new(FieldConfig::default(), 7).unwrap();
        let pts: Vec<Vec3> = random_points(1000, 2)
            .into_iter()
            .map(|p| (p + Vec3::repeat(1.0)) * 0.5)
            .collect();
        let max = field.values(&pts).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 0.05, "max |g| = {max}");
    }

    #[test]
    fn attention_weights_are_a_simplex() {
        let field = AttentiveField::new(small(true), 5).unwrap();
        for w in field.attention_weights(&random_points(1000, 4)).unwrap() {
            for head in w.chunks(8) {
                assert!(head.iter().all(|&v| v >= 0.0));
                assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_token_gets_full_weight() {
        let cfg = FieldConfig {
            dict_size: 1,
            ..small(true)
        };
        let field = AttentiveField::new(cfg, 9).unwrap();
        let pts = random_points(3, 8);
        for w in field.attention_weights(&pts).unwrap() {
            assert_eq!(w, vec![1.0; 4]);
        }
        // z = W_o · concat(V_h), independent of the query.
        let s = field.store();
        let values: Vec<Matrix> = (0..4)
            .map(|h| s.value(0).dot(s.value(2 + 3 * h + 2)))
            .collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let want = ndarray::concatenate(ndarray::Axis(1), &views)
            .unwrap()
            .dot(s.value(14));
        for z in field.context(&pts).unwrap() {
            let err = z
                .iter()
                .zip(want.row(0))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-12);
        }
        let sim = field.attention_similarity(&pts[0], &pts).unwrap();
        assert!(sim.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn hand_set_two_token_attention() {
        let cfg = FieldConfig {
            bands: 1,
            dict_size: 2,
            embed_dim: 2,
            heads: 1,
            layers: 2,
            hidden: 4,
            attention: true,
        };
        let mut field = AttentiveField::new(cfg, 0).unwrap();
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        field.set_parameter("dictionary", eye.clone()).unwrap();
        for name in ["head0.w_q", "head0.w_k", "head0.w_v"] {
            field.set_parameter(name, eye.clone()).unwrap();
        }
        // At the origin the encoding is [0 × 6, 1, 1, 1]; the three cosine
        // rows each contribute a third of the query.
        let mut wg = Matrix::zeros((9, 2));
        for r in 6..9 {
            wg[[r, 1]] = 2f64.sqrt() * 3f64.ln() / 3.0;
        }
        field.set_parameter("w_gamma", wg).unwrap();
        let w = field.attention_weights(&[Vec3::zeros()]).unwrap().remove(0);
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        let wo = field.store().value(field.store().find("w_o").unwrap()).clone();
        let z = field.context(&[Vec3::zeros()]).unwrap().remove(0);
        let want = array![[0.25, 0.75]].dot(&wo);
        for (a, b) in z.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let field = AttentiveField::new(small(true), 11).unwrap();
        let h = 1e-5;
        for x in random_points(50, 12) {
            let g = field.gradient(&x).unwrap();
            let fd = Vec3::from_fn(|i, _| {
                let mut p = x;
                let mut m = x;
                p[i] += h;
                m[i] -= h;
                (field.eval(&p).unwrap() - field.eval(&m).unwrap()) / (2.0 * h)
            });
            let err = (g - fd).amax() / fd.amax();
            assert!(err < 1e-6, "rel err {err} at {x:?}");
        }
    }

    #[test]
    fn evaluation_is_pure() {
        let field = AttentiveField::new(small(true), 13).unwrap();
        let before = field.clone();
        let x = Vec3::new(0.2, -0.4, 0.1);
        assert_eq!(field.eval(&x).unwrap(), field.eval(&x).unwrap());
        assert_eq!(field.gradient(&x).unwrap(), field.gradient(&x).unwrap());
        let _ = field.normal(&x);
        assert_eq!(field, before);
    }

    #[test]
    fn normals_are_unit() {
        let field = AttentiveField::new(small(true), 15).unwrap();
        let pts = random_points(10_000, 16);
        let (_, grads) = field.values_and_gradients(&pts);
        for g in grads {
            assert!((g.normalize().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ablation_matches_parameter_budget() {
        let with = small(true);
        let without = small(false);
        assert!(without.mlp_width() > with.hidden);
        let (a, b) = (with.parameter_count() as f64, without.parameter_count() as f64);
        assert!((a - b).abs() / a < 0.05, "{a} vs {b}");
        let field = AttentiveField::new(without, 1).unwrap();
        assert!(field.eval(&Vec3::new(0.1, 0.2, 0.3)).unwrap().is_finite());
        assert!(field.attention_weights(&[Vec3::zeros()]).is_err());
    }

    #[test]
    fn negating_output_flips_sign_only() {
        let mut field = AttentiveField::new(small(true), 17).unwrap();
        let x = Vec3::new(0.3, 0.1, -0.2);
        let g = field.eval(&x).unwrap();
        field.negate_output();
        assert_eq!(field.eval(&x).unwrap(), -g);
    }

    #[test]
    fn checkpoint_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ckpt");
        let field = AttentiveField::new(small(false), 19).unwrap();
        field.save(&path).unwrap();
        assert!(dir.path().join("field.ckpt.arch").exists());
        assert_eq!(AttentiveField::load(&path).unwrap(), field);
    }

    #[test]
    fn config_text_round_trip_and_unknown_key() {
        let cfg = small(false);
        assert_eq!(FieldConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(FieldConfig::parse("depth = 3").is_err());
    }
}
