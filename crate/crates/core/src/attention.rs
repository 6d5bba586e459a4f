//! Transformer encoder with spatial-aware disentangled attention.
//!
//! Each head scores a pair `(i, j)` as the sum of a content term and three
//! relative-position streams (1D sequence distance, horizontal and vertical
//! box distance). Every stream contributes content-to-position and
//! position-to-content products against shared relative tables:
//!
//! ```text
//! Â_ij = Qc_i·Kc_j + Σ_s ( Qc_i·Ks_{δs(i,j)} + Kc_j·Qs_{δs(j,i)} )
//! out  = softmax(Â / sqrt(3·d_h)) · Vc
//! ```

use crate::doc::BBox;
use crate::embedder::{EmbedConfig, EmbeddingTables, SequenceInputs};
use crate::error::{Error, Result};
use crate::numerics::{normal_tensor, ParamId, ParamStore, RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelPosConfig {
    pub k_1d: usize,
    pub k_2d: usize,
    /// Normalized units per 2D bucket.
    pub bucket_width_2d: i32,
}

impl Default for RelPosConfig {
    fn default() -> Self {
        RelPosConfig {
            k_1d: 128,
            k_2d: 64,
            bucket_width_2d: 16,
        }
    }
}

/// Clamps a signed distance into `0..2k`: `0` at or below `-k`, `2k-1` at or
/// above `k`, `diff + k` in between.
pub fn clamp_bucket(diff: i64, k: usize) -> usize {
    let k = k as i64;
    if diff <= -k {
        0
    } else if diff >= k {
        (2 * k - 1) as usize
    } else {
        (diff + k) as usize
    }
}

pub fn rel_bucket(pi: i64, pj: i64, k: usize) -> usize {
    clamp_bucket(pi - pj, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis2d {
    X,
    Y,
}

/// Integer center `floor((a0 + a1) / 2)` of a box along `axis`.
pub fn box_center(b: &BBox, axis: Axis2d) -> i64 {
    match axis {
        Axis2d::X => (b.x0() + b.x1()) as i64 / 2,
        Axis2d::Y => (b.y0() + b.y1()) as i64 / 2,
    }
}

/// Bucket of the center difference `c_i − c_j` floor-divided by the bucket
/// width.
pub fn rel_bucket_2d(bi: &BBox, bj: &BBox, axis: Axis2d, cfg: &RelPosConfig) -> usize {
    let diff = box_center(bi, axis) - box_center(bj, axis);
    clamp_bucket(diff.div_euclid(cfg.bucket_width_2d as i64), cfg.k_2d)
}

/// Relative-distance buckets of one sequence for the three streams, plus
/// the flat gather indices used by the score computation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelBuckets {
    pub n: usize,
    /// Rows of the 1D and 2D relative tables.
    pub rows: [usize; 3],
    /// `delta[s][i * n + j]` for streams 1D, x, y.
    pub delta: [Vec<usize>; 3],
    c2p: [Vec<usize>; 3],
    p2c: [Vec<usize>; 3],
}

impl RelBuckets {
    pub fn new(positions: &[i64], boxes: &[BBox], cfg: &RelPosConfig) -> Result<Self> {
        let n = positions.len();
        if boxes.len() != n {
            return Err(Error::Shape(format!("{n} positions but {} boxes", boxes.len())));
        }
        let rows = [2 * cfg.k_1d, 2 * cfg.k_2d, 2 * cfg.k_2d];
        let mut delta = [vec![0; n * n], vec![0; n * n], vec![0; n * n]];
        for i in 0..n {
            for j in 0..n {
                delta[0][i * n + j] = rel_bucket(positions[i], positions[j], cfg.k_1d);
                delta[1][i * n + j] = rel_bucket_2d(&boxes[i], &boxes[j], Axis2d::X, cfg);
                delta[2][i * n + j] = rel_bucket_2d(&boxes[i], &boxes[j], Axis2d::Y, cfg);
            }
        }
        let c2p = std::array::from_fn(|s| {
            (0..n * n).map(|p| (p / n) * rows[s] + delta[s][p]).collect()
        });
        let p2c = std::array::from_fn(|s| {
            (0..n * n)
                .map(|p| {
                    let (i, j) = (p / n, p % n);
                    j * rows[s] + delta[s][j * n + i]
                })
                .collect()
        });
        Ok(RelBuckets {
            n,
            rows,
            delta,
            c2p,
            p2c,
        })
    }

    pub fn for_inputs(inputs: &SequenceInputs, cfg: &RelPosConfig) -> Result<Self> {
        Self::new(&inputs.global_positions(), &inputs.boxes, cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed: EmbedConfig,
    pub rel: RelPosConfig,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed: EmbedConfig::default(),
            rel: RelPosConfig::default(),
            layers: 2,
            heads: 4,
            ffn: 256,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.embed.d;
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("model dim {d} not divisible by {} heads", self.heads)));
        }
        if self.ffn == 0 || self.rel.k_1d == 0 || self.rel.k_2d == 0 || self.rel.bucket_width_2d <= 0 {
            return Err(Error::Config("ffn, k_1d, k_2d and bucket width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed.d / self.heads
    }
}

/// Shared relative tables `E'_1p`, `E'_2x`, `E'_2y`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelTables {
    pub tables: [ParamId; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub(crate) fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut RngStream) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), normal_tensor(&[fan_in, fan_out], std, rng), true)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[1, fan_out]), true)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub(crate) fn lookup(store: &ParamStore, name: &str, bias: bool) -> Result<Self> {
        Ok(Linear {
            weight: param_id(store, &format!("{name}.weight"))?,
            bias: if bias { Some(param_id(store, &format!("{name}.bias"))?) } else { None },
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

pub(crate) fn param_id(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[1, d], 1.0), true)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[1, d]), true)?,
        })
    }

    fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: param_id(store, &format!("{name}.gamma"))?,
            beta: param_id(store, &format!("{name}.beta"))?,
        })
    }
}

/// Projections of one layer. `pos_q` / `pos_k` hold the 1D, x and y
/// position projections in that order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub q_ct: Linear,
    pub k_ct: Linear,
    pub v_ct: Linear,
    pub pos_q: [Linear; 3],
    pub pos_k: [Linear; 3],
    pub attn_out: Linear,
    pub ln1: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln2: LayerNormParams,
}

const STREAMS: [&str; 3] = ["1p", "2x", "2y"];

impl LayerParams {
    fn init(store: &mut ParamStore, l: usize, cfg: &EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        let d = cfg.embed.d;
        let p = |s: &str| format!("layer{l}.{s}");
        let pos = |kind: &str, store: &mut ParamStore, rng: &mut RngStream| -> Result<[Linear; 3]> {
            let mut out = Vec::new();
            for s in STREAMS {
                out.push(Linear::init(store, &p(&format!("{kind}_{s}")), d, d, false, rng)?);
            }
            Ok(out.try_into().expect("three streams"))
        };
        Ok(LayerParams {
            q_ct: Linear::init(store, &p("q_ct"), d, d, true, rng)?,
            k_ct: Linear::init(store, &p("k_ct"), d, d, true, rng)?,
            v_ct: Linear::init(store, &p("v_ct"), d, d, true, rng)?,
            pos_q: pos("q", store, rng)?,
            pos_k: pos("k", store, rng)?,
            attn_out: Linear::init(store, &p("attn_out"), d, d, true, rng)?,
            ln1: LayerNormParams::init(store, &p("ln1"), d)?,
            ffn_in: Linear::init(store, &p("ffn.in"), d, cfg.ffn, true, rng)?,
            ffn_out: Linear::init(store, &p("ffn.out"), cfg.ffn, d, true, rng)?,
            ln2: LayerNormParams::init(store, &p("ln2"), d)?,
        })
    }

    fn lookup(store: &ParamStore, l: usize) -> Result<Self> {
        let p = |s: &str| format!("layer{l}.{s}");
        let pos = |kind: &str| -> Result<[Linear; 3]> {
            Ok([
                Linear::lookup(store, &p(&format!("{kind}_1p")), false)?,
                Linear::lookup(store, &p(&format!("{kind}_2x")), false)?,
                Linear::lookup(store, &p(&format!("{kind}_2y")), false)?,
            ])
        };
        Ok(LayerParams {
            q_ct: Linear::lookup(store, &p("q_ct"), true)?,
            k_ct: Linear::lookup(store, &p("k_ct"), true)?,
            v_ct: Linear::lookup(store, &p("v_ct"), true)?,
            pos_q: pos("q")?,
            pos_k: pos("k")?,
            attn_out: Linear::lookup(store, &p("attn_out"), true)?,
            ln1: LayerNormParams::lookup(store, &p("ln1"))?,
            ffn_in: Linear::lookup(store, &p("ffn.in"), true)?,
            ffn_out: Linear::lookup(store, &p("ffn.out"), true)?,
            ln2: LayerNormParams::lookup(store, &p("ln2"))?,
        })
    }
}

/// The four score components of one head, each `n × n`.
#[derive(Clone, Copy, Debug)]
pub struct ScoreParts {
    pub content: Var,
    pub pos_1d: Var,
    pub pos_x: Var,
    pub pos_y: Var,
}

/// Per-head score components for the input `h_in` (`n × d`).
pub fn disentangled_scores(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &LayerParams,
    rel: &RelTables,
    h_in: Var,
    buckets: &RelBuckets,
    heads: usize,
) -> Result<Vec<ScoreParts>> {
    let (n, d) = (tape.value(h_in).rows(), tape.value(h_in).cols());
    if buckets.n != n {
        return Err(Error::Shape(format!("buckets for {} positions, input has {n}", buckets.n)));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("{heads} heads for model dim {d}")));
    }
    let dh = d / heads;
    let qc = layer.q_ct.forward(tape, store, h_in)?;
    let kc = layer.k_ct.forward(tape, store, h_in)?;
    let mut qs = Vec::with_capacity(3);
    let mut ks = Vec::with_capacity(3);
    for s in 0..3 {
        let e = tape.param(store, rel.tables[s]);
        if tape.value(e).rows() != buckets.rows[s] {
            return Err(Error::Shape(format!(
                "relative table {s} has {} rows, buckets expect {}",
                tape.value(e).rows(),
                buckets.rows[s]
            )));
        }
        qs.push(layer.pos_q[s].forward(tape, store, e)?);
        ks.push(layer.pos_k[s].forward(tape, store, e)?);
    }
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qc_h = tape.slice(qc, 1, a, b)?;
        let kc_h = tape.slice(kc, 1, a, b)?;
        let kc_t = tape.transpose(kc_h)?;
        let content = tape.matmul(qc_h, kc_t)?;
        let mut streams = [content; 3];
        for s in 0..3 {
            let ks_t = tape.slice(ks[s], 1, a, b)?;
            let ks_t = tape.transpose(ks_t)?;
            let qs_t = tape.slice(qs[s], 1, a, b)?;
            let qs_t = tape.transpose(qs_t)?;
            let c2p_full = tape.matmul(qc_h, ks_t)?;
            let p2c_full = tape.matmul(kc_h, qs_t)?;
            let c2p = tape.gather_elems(c2p_full, buckets.c2p[s].clone(), &[n, n])?;
            let p2c = tape.gather_elems(p2c_full, buckets.p2c[s].clone(), &[n, n])?;
            streams[s] = tape.add(c2p, p2c)?;
        }
        out.push(ScoreParts {
            content,
            pos_1d: streams[0],
            pos_x: streams[1],
            pos_y: streams[2],
        });
    }
    Ok(out)
}

/// Attention context (`n × d`, heads concatenated, before the output
/// projection) and the raw per-head scores `Â`.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &LayerParams,
    rel: &RelTables,
    h_in: Var,
    buckets: &RelBuckets,
    heads: usize,
    mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(h_in).cols();
    let dh = d / heads.max(1);
    let parts = disentangled_scores(tape, store, layer, rel, h_in, buckets, heads)?;
    let vc = layer.v_ct.forward(tape, store, h_in)?;
    let scale = 1.0 / (3.0 * dh as f64).sqrt();
    let mut scores = Vec::with_capacity(heads);
    let mut contexts = Vec::with_capacity(heads);
    for (h, p) in parts.iter().enumerate() {
        let a_hat = tape.add_all(&[p.content, p.pos_1d, p.pos_x, p.pos_y])?;
        let scaled = tape.scale(a_hat, scale);
        let weights = tape.softmax_rows(scaled, Some(mask))?;
        let v_h = tape.slice(vc, 1, h * dh, (h + 1) * dh)?;
        contexts.push(tape.matmul(weights, v_h)?);
        scores.push(a_hat);
    }
    Ok((tape.concat(&contexts, 1)?, scores))
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `hidden[0]` is the embedding output, `hidden[l + 1]` the output of
    /// layer `l`.
    pub hidden: Vec<Var>,
    /// Raw scores `Â` per layer and head.
    pub scores: Vec<Vec<Var>>,
}

impl EncoderOutput {
    pub fn last(&self) -> Var {
        *self.hidden.last().expect("embedding output is always present")
    }
}

/// Embeddings, relative tables and layers of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub emb: EmbeddingTables,
    pub rel: RelTables,
    pub layers: Vec<LayerParams>,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let emb = EmbeddingTables::init(store, &cfg.embed, rng)?;
        let d = cfg.embed.d;
        let mut tables = Vec::new();
        for (s, rows) in [("1d", 2 * cfg.rel.k_1d), ("2x", 2 * cfg.rel.k_2d), ("2y", 2 * cfg.rel.k_2d)] {
            tables.push(store.add(&format!("rel.{s}"), normal_tensor(&[rows, d], 1.0, rng), true)?);
        }
        let rel = RelTables {
            tables: tables.try_into().expect("three tables"),
        };
        let layers = (0..cfg.layers)
            .map(|l| LayerParams::init(store, l, cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            cfg: *cfg,
            emb,
            rel,
            layers,
        })
    }

    /// Recovers handles from a store holding an encoder built with `cfg`.
    pub fn from_store(store: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let rel = RelTables {
            tables: [param_id(store, "rel.1d")?, param_id(store, "rel.2x")?, param_id(store, "rel.2y")?],
        };
        let layers = (0..cfg.layers).map(|l| LayerParams::lookup(store, l)).collect::<Result<_>>()?;
        Ok(Encoder {
            cfg: *cfg,
            emb: EmbeddingTables::from_store(store)?,
            rel,
            layers,
        })
    }

    /// Embeds `inputs` and runs every layer. Dropout applies only when a
    /// stream is supplied and the configured rate is positive.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &SequenceInputs,
        mut dropout: Option<&mut RngStream>,
    ) -> Result<EncoderOutput> {
        let h = self.emb.combine(tape, store, inputs)?;
        let buckets = RelBuckets::for_inputs(inputs, &self.cfg.rel)?;
        let mut hidden = vec![h];
        let mut scores = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h_in = *hidden.last().unwrap();
            let (h_out, s) = self.layer_forward(tape, store, layer, h_in, &buckets, &inputs.mask, dropout.as_deref_mut())?;
            hidden.push(h_out);
            scores.push(s);
        }
        Ok(EncoderOutput { hidden, scores })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: &LayerParams,
        h_in: Var,
        buckets: &RelBuckets,
        mask: &[bool],
        mut dropout: Option<&mut RngStream>,
    ) -> Result<(Var, Vec<Var>)> {
        let eps = self.cfg.ln_eps;
        let (ctx, scores) = attention(tape, store, layer, &self.rel, h_in, buckets, self.cfg.heads, mask)?;
        let a = layer.attn_out.forward(tape, store, ctx)?;
        let a = self.dropout(tape, a, dropout.as_deref_mut());
        let r1 = tape.add(h_in, a)?;
        let (g, b) = (tape.param(store, layer.ln1.gamma), tape.param(store, layer.ln1.beta));
        let x = tape.layer_norm(r1, g, b, eps)?;
        let f = layer.ffn_in.forward(tape, store, x)?;
        let f = tape.gelu(f);
        let f = layer.ffn_out.forward(tape, store, f)?;
        let f = self.dropout(tape, f, dropout);
        let r2 = tape.add(x, f)?;
        let (g, b) = (tape.param(store, layer.ln2.gamma), tape.param(store, layer.ln2.beta));
        Ok((tape.layer_norm(r2, g, b, eps)?, scores))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut RngStream>) -> Var {
        let p = self.cfg.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let shape = tape.value(x).shape().to_vec();
                let keep = 1.0 / (1.0 - p);
                let mut m = Tensor::zeros(&shape);
                for v in m.data_mut() {
                    *v = if rng.bernoulli(p) { 0.0 } else { keep };
                }
                let m = tape.constant(m);
                tape.mul(x, m).expect("mask matches input shape")
            }
            _ => x,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_difference, relative_error};

    #[test]
    fn bucket_examples() {
        assert_eq!(rel_bucket(5, 1, 4), 7);
        assert_eq!(rel_bucket(1, 5, 4), 0);
        assert_eq!(rel_bucket(3, 3, 4), 4);
        assert_eq!(rel_bucket(3, 6, 4), 1);
        let cfg = RelPosConfig::default();
        let a = BBox::new(0, 0, 0, 0).unwrap();
        let b = BBox::new(1000, 0, 1000, 0).unwrap();
        assert_eq!(rel_bucket_2d(&a, &a, Axis2d::X, &cfg), 64);
        assert_eq!(rel_bucket_2d(&a, &b, Axis2d::X, &cfg), 1);
        assert_eq!(rel_bucket_2d(&b, &a, Axis2d::X, &cfg), 126);
        let c = BBox::new(100, 200, 140, 214).unwrap();
        let e = BBox::new(300, 500, 330, 520).unwrap();
        let before = rel_bucket_2d(&c, &e, Axis2d::Y, &cfg);
        let shifted = |b: &BBox| b.translate(16, 16).unwrap();
        assert_eq!(rel_bucket_2d(&shifted(&c), &shifted(&e), Axis2d::Y, &cfg), before);
    }

    fn small_cfg(d: usize, heads: usize) -> EncoderConfig {
        EncoderConfig {
            embed: EmbedConfig {
                vocab_size: 10,
                d,
                max_text_len: 16,
                patch_dim: 3,
                init_std: 0.3,
            },
            rel: RelPosConfig {
                k_1d: 4,
                k_2d: 3,
                bucket_width_2d: 16,
            },
            layers: 1,
            heads,
            ffn: 8,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    fn random_instance(n: usize, seed: u64, cfg: &RelPosConfig) -> (Vec<i64>, Vec<BBox>) {
        let mut rng = RngStream::new(seed, "instance", 0);
        let positions = (0..n).map(|_| rng.below(20) as i64).collect();
        let boxes = (0..n)
            .map(|_| {
                let x = rng.below(900) as i32;
                let y = rng.below(900) as i32;
                BBox::new(x, y, x + rng.below(100) as i32, y + rng.below(100) as i32).unwrap()
            })
            .collect();
        let _ = cfg;
        (positions, boxes)
    }

    /// Per-pair evaluation of the score and output formulas.
    fn naive(
        store: &ParamStore,
        enc: &Encoder,
        h: &Tensor,
        positions: &[i64],
        boxes: &[BBox],
        mask: &[bool],
    ) -> (Vec<Tensor>, Tensor) {
        let layer = &enc.layers[0];
        let cfg = &enc.cfg;
        let (n, d) = (h.rows(), h.cols());
        let dh = d / cfg.heads;
        let lin = |x: &Tensor, l: &Linear| {
            let mut y = x.matmul(store.value(l.weight)).unwrap();
            if let Some(b) = l.bias {
                for r in 0..y.rows() {
                    for c in 0..y.cols() {
                        y.set(r, c, y.get(r, c) + store.value(b).data()[c]);
                    }
                }
            }
            y
        };
        let (qc, kc, vc) = (lin(h, &layer.q_ct), lin(h, &layer.k_ct), lin(h, &layer.v_ct));
        let qs: Vec<Tensor> = (0..3).map(|s| lin(store.value(enc.rel.tables[s]), &layer.pos_q[s])).collect();
        let ks: Vec<Tensor> = (0..3).map(|s| lin(store.value(enc.rel.tables[s]), &layer.pos_k[s])).collect();
        let delta = |s: usize, i: usize, j: usize| match s {
            0 => rel_bucket(positions[i], positions[j], cfg.rel.k_1d),
            1 => rel_bucket_2d(&boxes[i], &boxes[j], Axis2d::X, &cfg.rel),
            _ => rel_bucket_2d(&boxes[i], &boxes[j], Axis2d::Y, &cfg.rel),
        };
        let dot = |a: &Tensor, ra: usize, b: &Tensor, rb: usize, h: usize| {
            (h * dh..(h + 1) * dh).map(|c| a.get(ra, c) * b.get(rb, c)).sum::<f64>()
        };
        let mut scores = Vec::new();
        let mut out = Tensor::zeros(&[n, d]);
        for hd in 0..cfg.heads {
            let mut a = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..n {
                    let mut v = dot(&qc, i, &kc, j, hd);
                    for s in 0..3 {
                        v += dot(&qc, i, &ks[s], delta(s, i, j), hd);
                        v += dot(&kc, j, &qs[s], delta(s, j, i), hd);
                    }
                    a.set(i, j, v);
                }
            }
            let scale = (3.0 * dh as f64).sqrt();
            for i in 0..n {
                let m = (0..n).filter(|&j| mask[j]).map(|j| a.get(i, j) / scale).fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = (0..n)
                    .map(|j| if mask[j] { (a.get(i, j) / scale - m).exp() } else { 0.0 })
                    .collect();
                let z: f64 = w.iter().sum();
                for c in hd * dh..(hd + 1) * dh {
                    out.set(i, c, (0..n).map(|j| w[j] / z * vc.get(j, c)).sum());
                }
            }
            scores.push(a);
        }
        (scores, out)
    }

    #[test]
    fn production_scores_match_pair_loop() {
        for (seed, n, d, heads) in [(1u64, 5usize, 4usize, 1usize), (2, 9, 8, 2), (3, 17, 12, 3)] {
            let cfg = small_cfg(d, heads);
            let mut store = ParamStore::new();
            let enc = Encoder::init(&mut store, &cfg, &mut RngStream::new(seed, "init", 0)).unwrap();
            let (positions, boxes) = random_instance(n, seed, &cfg.rel);
            let h = normal_tensor(&[n, d], 1.0, &mut RngStream::new(seed, "h", 0));
            let mut mask = vec![true; n];
            mask[n - 1] = false;
            let buckets = RelBuckets::new(&positions, &boxes, &cfg.rel).unwrap();
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let (ctx, scores) = attention(&mut tape, &store, &enc.layers[0], &enc.rel, hv, &buckets, heads, &mask).unwrap();
            let (want_scores, want_ctx) = naive(&store, &enc, &h, &positions, &boxes, &mask);
            for (s, w) in scores.iter().zip(&want_scores) {
                assert!(tape.value(*s).max_abs_diff(w) < 1e-10);
            }
            assert!(tape.value(ctx).max_abs_diff(&want_ctx) < 1e-10);
        }
    }

    #[test]
    fn ablations_of_projections() {
        let cfg = small_cfg(4, 1);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &cfg, &mut RngStream::new(5, "init", 0)).unwrap();
        let (positions, boxes) = random_instance(6, 5, &cfg.rel);
        let buckets = RelBuckets::new(&positions, &boxes, &cfg.rel).unwrap();
        let h = normal_tensor(&[6, 4], 1.0, &mut RngStream::new(5, "h", 0));
        let layer = &enc.layers[0];
        let zero = |store: &mut ParamStore, l: &Linear| {
            let p = store.get_mut(l.weight);
            p.value = p.value.scale(0.0);
            if let Some(b) = l.bias {
                let p = store.get_mut(b);
                p.value = p.value.scale(0.0);
            }
        };

        let mut pos_off = store.clone();
        for l in layer.pos_q.iter().chain(&layer.pos_k) {
            zero(&mut pos_off, l);
        }
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let parts = disentangled_scores(&mut tape, &pos_off, layer, &enc.rel, hv, &buckets, 1).unwrap();
        assert!(tape.value(parts[0].content).data().iter().any(|&v| v != 0.0));
        for v in [parts[0].pos_1d, parts[0].pos_x, parts[0].pos_y] {
            assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        }

        let mut content_off = store.clone();
        zero(&mut content_off, &layer.q_ct);
        zero(&mut content_off, &layer.k_ct);
        let mut tape = Tape::new();
        let hv = tape.constant(h);
        let parts = disentangled_scores(&mut tape, &content_off, layer, &enc.rel, hv, &buckets, 1).unwrap();
        for v in [parts[0].content, parts[0].pos_1d, parts[0].pos_x, parts[0].pos_y] {
            assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_valid_key_takes_all_weight() {
        let cfg = small_cfg(4, 2);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &cfg, &mut RngStream::new(6, "init", 0)).unwrap();
        let (positions, boxes) = random_instance(4, 6, &cfg.rel);
        let buckets = RelBuckets::new(&positions, &boxes, &cfg.rel).unwrap();
        let h = normal_tensor(&[4, 4], 1.0, &mut RngStream::new(6, "h", 0));
        let mask = [false, false, true, false];
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let (ctx, _) = attention(&mut tape, &store, &enc.layers[0], &enc.rel, hv, &buckets, 2, &mask).unwrap();
        let mut t2 = Tape::new();
        let hv2 = t2.constant(h);
        let v = enc.layers[0].v_ct.forward(&mut t2, &store, hv2).unwrap();
        for i in 0..4 {
            for c in 0..4 {
                assert!((tape.value(ctx).get(i, c) - t2.value(v).get(2, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_layers_return_embeddings() {
        let mut cfg = small_cfg(4, 1);
        cfg.layers = 0;
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &cfg, &mut RngStream::new(7, "init", 0)).unwrap();
        let doc = crate::doc::Document::new(vec![], (10, 10));
        let vocab = crate::embedder::Vocab::new(&["a", "b", "c", "d", "e"]).unwrap();
        let inputs = crate::embedder::build_inputs(&doc, &[], &vocab, 16, Tensor::zeros(&[49, 3])).unwrap();
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, &store, &inputs, None).unwrap();
        assert_eq!(out.hidden.len(), 1);
        assert!(out.scores.is_empty());
        assert_eq!(tape.value(out.last()).shape(), [51, 4]);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let cfg = small_cfg(4, 2);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &cfg, &mut RngStream::new(8, "init", 0)).unwrap();
        let n = 5;
        let (positions, boxes) = random_instance(n, 8, &cfg.rel);
        let buckets = RelBuckets::new(&positions, &boxes, &cfg.rel).unwrap();
        let h = normal_tensor(&[n, 4], 1.0, &mut RngStream::new(8, "h", 0));
        let readout = normal_tensor(&[n, 4], 1.0, &mut RngStream::new(8, "r", 0));
        let mask = vec![true; n];
        let f = |store: &ParamStore, tape: &mut Tape| {
            let hv = tape.constant(h.clone());
            let (out, _) = enc.layer_forward(tape, store, &enc.layers[0], hv, &buckets, &mask, None).unwrap();
            let r = tape.constant(readout.clone());
            let m = tape.mul(out, r).unwrap();
            tape.sum(m)
        };
        let mut tape = Tape::new();
        let loss = f(&store, &mut tape);
        let grads = tape.backward(loss).unwrap();
        let mut checked = 0;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            if !(name.starts_with("layer0") || name.starts_with("rel.")) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let g = g.clone();
            for k in (0..g.numel()).step_by(3) {
                let num = central_difference(1e-5, |eps| {
                    let mut s = store.clone();
                    s.get_mut(id).value.data_mut()[k] += eps;
                    let mut t = Tape::new();
                    let l = f(&s, &mut t);
                    t.value(l).item()
                });
                assert!(relative_error(g.data()[k], num) < 1e-4, "{name}[{k}]: {} vs {num}", g.data()[k]);
                checked += 1;
            }
        }
        assert!(checked > 100, "{checked}");
    }
}
