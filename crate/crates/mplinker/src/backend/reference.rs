//! Desk-scale reference backend: token + learned positional embeddings,
//! a two-layer post-norm self-attention encoder, a weight-tied vocabulary
//! projection, and a 2-class affine head on the class token.
//!
//! Forward and backward passes are written out by hand so the loss gradient
//! with respect to the input embedding matrix is available exactly, which the
//! perturbation module requires. Sequences are processed unpadded, one
//! example at a time; every operation is sequential and deterministic for a
//! fixed parameter seed.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::PromptedInput;
use crate::vocab::Vocabulary;

use super::{
    check_same_shape, clamp_probability, softmax, BackendOutput, EmbeddingMatrix, LossTarget,
    MaskedLmBackend, PROB_CLAMP,
};

const LN_EPS: f64 = 1e-5;
const INIT_RANGE: f64 = 0.1;

/// Architecture hyperparameters of the reference backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 64,
            max_len: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerParams {
    wq: Array2<f64>,
    bq: Array1<f64>,
    wk: Array2<f64>,
    bk: Array1<f64>,
    wv: Array2<f64>,
    bv: Array1<f64>,
    wo: Array2<f64>,
    bo: Array1<f64>,
    ln1_gamma: Array1<f64>,
    ln1_beta: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    ln2_gamma: Array1<f64>,
    ln2_beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Params {
    tok_emb: Array2<f64>,
    pos_emb: Array2<f64>,
    layers: Vec<LayerParams>,
    mlm_bias: Array1<f64>,
    cls_w: Array2<f64>,
    cls_b: Array1<f64>,
}

fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
}

fn uniform_vec(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    (0..len)
        .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
        .collect()
}

impl Params {
    fn init(config: &ReferenceConfig, vocab_size: usize) -> Params {
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tok_emb = uniform_mat(&mut rng, vocab_size, d);
        let pos_emb = uniform_mat(&mut rng, config.max_len, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                wq: uniform_mat(&mut rng, d, d),
                bq: uniform_vec(&mut rng, d),
                wk: uniform_mat(&mut rng, d, d),
                bk: uniform_vec(&mut rng, d),
                wv: uniform_mat(&mut rng, d, d),
                bv: uniform_vec(&mut rng, d),
                wo: uniform_mat(&mut rng, d, d),
                bo: uniform_vec(&mut rng, d),
                // Norm scale starts at identity; uniform init here would
                // collapse the residual stream.
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                w1: uniform_mat(&mut rng, d, config.ff_dim),
                b1: uniform_vec(&mut rng, config.ff_dim),
                w2: uniform_mat(&mut rng, config.ff_dim, d),
                b2: uniform_vec(&mut rng, d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
            })
            .collect();
        Params {
            tok_emb,
            pos_emb,
            layers,
            mlm_bias: uniform_vec(&mut rng, vocab_size),
            cls_w: uniform_mat(&mut rng, 2, d),
            cls_b: uniform_vec(&mut rng, 2),
        }
    }
}

/// Gradient buffer with the same shape as the parameters. Accumulated in
/// place across a batch, then scaled, clipped, and applied.
#[derive(Debug, Clone)]
pub struct Gradients {
    tok_emb: Array2<f64>,
    pos_emb: Array2<f64>,
    layers: Vec<LayerGradients>,
    mlm_bias: Array1<f64>,
    cls_w: Array2<f64>,
    cls_b: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerGradients {
    wq: Array2<f64>,
    bq: Array1<f64>,
    wk: Array2<f64>,
    bk: Array1<f64>,
    wv: Array2<f64>,
    bv: Array1<f64>,
    wo: Array2<f64>,
    bo: Array1<f64>,
    ln1_gamma: Array1<f64>,
    ln1_beta: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    ln2_gamma: Array1<f64>,
    ln2_beta: Array1<f64>,
}

impl Gradients {
    pub fn zeros_for(backend: &ReferenceBackend) -> Gradients {
        let d = backend.config.embed_dim;
        let ff = backend.config.ff_dim;
        let v = backend.vocab.len();
        Gradients {
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((backend.config.max_len, d)),
            layers: (0..backend.config.num_layers)
                .map(|_| LayerGradients {
                    wq: Array2::zeros((d, d)),
                    bq: Array1::zeros(d),
                    wk: Array2::zeros((d, d)),
                    bk: Array1::zeros(d),
                    wv: Array2::zeros((d, d)),
                    bv: Array1::zeros(d),
                    wo: Array2::zeros((d, d)),
                    bo: Array1::zeros(d),
                    ln1_gamma: Array1::zeros(d),
                    ln1_beta: Array1::zeros(d),
                    w1: Array2::zeros((d, ff)),
                    b1: Array1::zeros(ff),
                    w2: Array2::zeros((ff, d)),
                    b2: Array1::zeros(d),
                    ln2_gamma: Array1::zeros(d),
                    ln2_beta: Array1::zeros(d),
                })
                .collect(),
            mlm_bias: Array1::zeros(v),
            cls_w: Array2::zeros((2, d)),
            cls_b: Array1::zeros(2),
        }
    }

    pub fn reset(&mut self) {
        self.for_each_mut(|slice| slice.fill(0.0));
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|slice| {
            for v in slice {
                *v *= factor;
            }
        });
    }

    pub fn global_norm(&self) -> f64 {
        let mut sum = 0.0;
        self.for_each(|slice| {
            for v in slice {
                sum += v * v;
            }
        });
        sum.sqrt()
    }

    /// Add the gradient of the embedding lookup: the loss gradient with
    /// respect to the input embedding matrix scatters into the token rows
    /// that produced it and into the positional table.
    pub fn accumulate_embedding(&mut self, input: &PromptedInput, d_embeddings: &Array2<f64>, scale: f64) {
        for (pos, &id) in input.token_ids.iter().enumerate() {
            let row = d_embeddings.row(pos);
            let mut tok = self.tok_emb.row_mut(id);
            tok.scaled_add(scale, &row);
            let mut p = self.pos_emb.row_mut(pos);
            p.scaled_add(scale, &row);
        }
    }

    fn for_each(&self, mut f: impl FnMut(&[f64])) {
        f(self.tok_emb.as_slice().expect("standard layout"));
        f(self.pos_emb.as_slice().expect("standard layout"));
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                f(m.as_slice().expect("standard layout"));
            }
            for v in [
                &l.bq, &l.bk, &l.bv, &l.bo, &l.ln1_gamma, &l.ln1_beta, &l.b1, &l.b2,
                &l.ln2_gamma, &l.ln2_beta,
            ] {
                f(v.as_slice().expect("standard layout"));
            }
        }
        f(self.mlm_bias.as_slice().expect("standard layout"));
        f(self.cls_w.as_slice().expect("standard layout"));
        f(self.cls_b.as_slice().expect("standard layout"));
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.tok_emb.as_slice_mut().expect("standard layout"));
        f(self.pos_emb.as_slice_mut().expect("standard layout"));
        for l in &mut self.layers {
            for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
                f(m.as_slice_mut().expect("standard layout"));
            }
            for v in [
                &mut l.bq, &mut l.bk, &mut l.bv, &mut l.bo, &mut l.ln1_gamma, &mut l.ln1_beta,
                &mut l.b1, &mut l.b2, &mut l.ln2_gamma, &mut l.ln2_beta,
            ] {
                f(v.as_slice_mut().expect("standard layout"));
            }
        }
        f(self.mlm_bias.as_slice_mut().expect("standard layout"));
        f(self.cls_w.as_slice_mut().expect("standard layout"));
        f(self.cls_b.as_slice_mut().expect("standard layout"));
    }
}

/// Serializable snapshot of the full model state. Loading reproduces
/// bit-identical inference: JSON float serialization round-trips f64 exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ReferenceConfig,
    pub vocab: Vocabulary,
    params: Params,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Checkpoint::from_json(&text)
    }

    /// Largest absolute elementwise parameter difference between two
    /// checkpoints, or `None` if their shapes differ.
    pub fn params_l_inf_diff(&self, other: &Checkpoint) -> Option<f64> {
        fn diff2(a: &Array2<f64>, b: &Array2<f64>) -> Option<f64> {
            (a.dim() == b.dim()).then(|| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            })
        }
        fn diff1(a: &Array1<f64>, b: &Array1<f64>) -> Option<f64> {
            (a.len() == b.len()).then(|| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            })
        }
        if self.params.layers.len() != other.params.layers.len() {
            return None;
        }
        let mut worst: f64 = 0.0;
        let mut take = |d: Option<f64>| -> Option<()> {
            worst = worst.max(d?);
            Some(())
        };
        take(diff2(&self.params.tok_emb, &other.params.tok_emb))?;
        take(diff2(&self.params.pos_emb, &other.params.pos_emb))?;
        for (a, b) in self.params.layers.iter().zip(&other.params.layers) {
            take(diff2(&a.wq, &b.wq))?;
            take(diff2(&a.wk, &b.wk))?;
            take(diff2(&a.wv, &b.wv))?;
            take(diff2(&a.wo, &b.wo))?;
            take(diff2(&a.w1, &b.w1))?;
            take(diff2(&a.w2, &b.w2))?;
            take(diff1(&a.bq, &b.bq))?;
            take(diff1(&a.bk, &b.bk))?;
            take(diff1(&a.bv, &b.bv))?;
            take(diff1(&a.bo, &b.bo))?;
            take(diff1(&a.b1, &b.b1))?;
            take(diff1(&a.b2, &b.b2))?;
            take(diff1(&a.ln1_gamma, &b.ln1_gamma))?;
            take(diff1(&a.ln1_beta, &b.ln1_beta))?;
            take(diff1(&a.ln2_gamma, &b.ln2_gamma))?;
            take(diff1(&a.ln2_beta, &b.ln2_beta))?;
        }
        take(diff1(&self.params.mlm_bias, &other.params.mlm_bias))?;
        take(diff2(&self.params.cls_w, &other.params.cls_w))?;
        take(diff1(&self.params.cls_b, &other.params.cls_b))?;
        Some(worst)
    }
}

/// The trainable reference model.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    config: ReferenceConfig,
    vocab: Vocabulary,
    params: Params,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    x_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln1: LnCache,
    x1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ln2: LnCache,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let scale = *inv;
        row.mapv_inplace(|v| v * scale);
    }
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: &Array1<f64>,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>, f64)>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    if let Some((dgamma, dbeta, scale)) = grads {
        for (dy_row, xhat_row) in dy.rows().into_iter().zip(cache.xhat.rows()) {
            for i in 0..dy_row.len() {
                dgamma[i] += scale * dy_row[i] * xhat_row[i];
                dbeta[i] += scale * dy_row[i];
            }
        }
    }
    let mut dx = Array2::zeros(dy.raw_dim());
    for ((dy_row, xhat_row), (mut dx_row, &inv_std)) in dy
        .rows()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(dx.rows_mut().into_iter().zip(cache.inv_std.iter()))
    {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..dy_row.len() {
            let dxhat = dy_row[i] * gamma[i];
            m1 += dxhat;
            m2 += dxhat * xhat_row[i];
        }
        m1 /= d;
        m2 /= d;
        for i in 0..dy_row.len() {
            let dxhat = dy_row[i] * gamma[i];
            dx_row[i] = inv_std * (dxhat - m1 - xhat_row[i] * m2);
        }
    }
    dx
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// d(softmax)/d(scores) for row-wise softmax: a ⊙ (da − rowsum(da ⊙ a)).
fn softmax_rows_backward(attn: &Array2<f64>, d_attn: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(attn.raw_dim());
    for ((a_row, da_row), mut out_row) in attn
        .rows()
        .into_iter()
        .zip(d_attn.rows())
        .zip(out.rows_mut())
    {
        let dot: f64 = a_row.iter().zip(da_row.iter()).map(|(a, da)| a * da).sum();
        for i in 0..a_row.len() {
            out_row[i] = a_row[i] * (da_row[i] - dot);
        }
    }
    out
}

fn column_sums(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}

struct HeadCache {
    s: Array1<f64>,
    g_a: f64,
    g_b: f64,
    dot_gs: f64,
}

impl ReferenceBackend {
    pub fn new(config: ReferenceConfig, vocab: Vocabulary) -> Result<ReferenceBackend> {
        if config.embed_dim % config.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                config.embed_dim, config.num_heads
            )));
        }
        if config.num_layers == 0 || config.embed_dim == 0 || config.ff_dim == 0 {
            return Err(Error::Config("backend dimensions must be positive".into()));
        }
        let params = Params::init(&config, vocab.len());
        Ok(ReferenceBackend {
            config,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.config
    }

    /// Replace the 2-class head, e.g. to attach externally trained weights.
    pub fn set_cls_head(&mut self, weights: Array2<f64>, bias: Array1<f64>) -> Result<()> {
        check_same_shape((2, self.config.embed_dim), weights.dim())?;
        if bias.len() != 2 {
            return Err(Error::Shape {
                expected: (2, 1),
                got: (bias.len(), 1),
            });
        }
        self.params.cls_w = weights;
        self.params.cls_b = bias;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<ReferenceBackend> {
        let Checkpoint {
            config,
            vocab,
            params,
        } = checkpoint;
        if params.tok_emb.dim() != (vocab.len(), config.embed_dim) {
            return Err(Error::Config(
                "checkpoint parameter shapes do not match its config".into(),
            ));
        }
        Ok(ReferenceBackend {
            config,
            vocab,
            params,
        })
    }

    fn encode(&self, embeddings: &EmbeddingMatrix) -> Result<(Array2<f64>, Vec<LayerCache>)> {
        if !embeddings.is_finite() {
            return Err(Error::Numeric(
                "non-finite entries in the input embedding matrix".into(),
            ));
        }
        let d = self.config.embed_dim;
        check_same_shape((embeddings.seq_len(), d), embeddings.data.dim())?;
        if embeddings.seq_len() == 0 {
            return Err(Error::Config("cannot encode an empty sequence".into()));
        }

        let n_heads = self.config.num_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let seq_len = embeddings.seq_len();

        let mut x = embeddings.data.clone();
        let mut caches = Vec::with_capacity(self.config.num_layers);
        for layer in &self.params.layers {
            let x_in = x;
            let q = x_in.dot(&layer.wq) + &layer.bq;
            let k = x_in.dot(&layer.wk) + &layer.bk;
            let v = x_in.dot(&layer.wv) + &layer.bv;

            let mut ctx = Array2::zeros((seq_len, d));
            let mut attn = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|v| v * scale);
                softmax_rows_inplace(&mut scores);
                ctx.slice_mut(cols).assign(&scores.dot(&vh));
                attn.push(scores);
            }
            let attn_out = ctx.dot(&layer.wo) + &layer.bo;

            let r1 = &x_in + &attn_out;
            let (x1, ln1) = layer_norm(&r1, &layer.ln1_gamma, &layer.ln1_beta);

            let ff_pre = x1.dot(&layer.w1) + &layer.b1;
            let ff_act = ff_pre.mapv(gelu);
            let ff_out = ff_act.dot(&layer.w2) + &layer.b2;

            let r2 = &x1 + &ff_out;
            let (x2, ln2) = layer_norm(&r2, &layer.ln2_gamma, &layer.ln2_beta);

            caches.push(LayerCache {
                x_in,
                q,
                k,
                v,
                attn,
                ctx,
                ln1,
                x1,
                ff_pre,
                ff_act,
                ln2,
            });
            x = x2;
        }
        Ok((x, caches))
    }

    /// Loss head forward. Returns (loss, head cache for backward).
    fn head_forward(&self, hidden: &Array2<f64>, target: &LossTarget) -> Result<(f64, HeadCache)> {
        let probs = match target {
            LossTarget::MaskVerbalizer {
                mask_position,
                verbalizer,
                ..
            } => {
                if *mask_position >= hidden.nrows() {
                    return Err(Error::Config(format!(
                        "mask position {mask_position} outside sequence of length {}",
                        hidden.nrows()
                    )));
                }
                let h = hidden.row(*mask_position).to_owned();
                let logits = self.params.tok_emb.dot(&h) + &self.params.mlm_bias;
                for &id in verbalizer
                    .positive_ids
                    .iter()
                    .chain(&verbalizer.negative_ids)
                {
                    if id >= logits.len() {
                        return Err(Error::Vocabulary(format!(
                            "verbalizer token id {id} outside vocabulary of size {}",
                            logits.len()
                        )));
                    }
                }
                softmax(&logits)
            }
            LossTarget::ClsLabel { .. } => {
                let h = hidden.row(0).to_owned();
                let logits = self.params.cls_w.dot(&h) + &self.params.cls_b;
                softmax(&logits)
            }
        };

        let (score_pos, score_neg) = match target {
            LossTarget::MaskVerbalizer { verbalizer, .. } => {
                let mean = |ids: &[usize]| {
                    ids.iter().map(|&id| probs[id]).sum::<f64>() / ids.len() as f64
                };
                (mean(&verbalizer.positive_ids), mean(&verbalizer.negative_ids))
            }
            LossTarget::ClsLabel { .. } => (probs[1], probs[0]),
        };

        let den = score_pos + score_neg;
        // For the 2-class head the denominator is exactly 1; the verbalized
        // path renormalizes the two word-set means.
        let p_raw = if den >= 1e-12 { score_pos / den } else { 0.5 };
        let p = clamp_probability(p_raw);
        let y = f64::from(target.label());
        let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());

        // Gradient of the loss with respect to (score_pos, score_neg); zero
        // when the probability clamp or the denominator guard is active.
        let (g_a, g_b) = if (PROB_CLAMP.0..=PROB_CLAMP.1).contains(&p_raw) && den >= 1e-12 {
            let dp = (p - y) / (p * (1.0 - p));
            (dp * score_neg / (den * den), -dp * score_pos / (den * den))
        } else {
            (0.0, 0.0)
        };

        let dot_gs = match target {
            LossTarget::MaskVerbalizer { verbalizer, .. } => {
                let pos: f64 = verbalizer.positive_ids.iter().map(|&id| probs[id]).sum();
                let neg: f64 = verbalizer.negative_ids.iter().map(|&id| probs[id]).sum();
                g_a / verbalizer.positive_ids.len() as f64 * pos
                    + g_b / verbalizer.negative_ids.len() as f64 * neg
            }
            LossTarget::ClsLabel { .. } => g_a * probs[1] + g_b * probs[0],
        };

        Ok((
            loss,
            HeadCache {
                s: probs,
                g_a,
                g_b,
                dot_gs,
            },
        ))
    }

    /// Gradient of the head loss with respect to the final hidden states,
    /// optionally accumulating head parameter gradients.
    fn head_backward(
        &self,
        hidden: &Array2<f64>,
        target: &LossTarget,
        cache: &HeadCache,
        mut grads: Option<(&mut Gradients, f64)>,
    ) -> Array2<f64> {
        let mut d_hidden = Array2::zeros(hidden.raw_dim());
        match target {
            LossTarget::MaskVerbalizer {
                mask_position,
                verbalizer,
                ..
            } => {
                // dL/dlogits = s ⊙ (g − g·s) with g supported on the word sets.
                let mut d_logits = cache.s.mapv(|sv| -sv * cache.dot_gs);
                for &id in &verbalizer.positive_ids {
                    d_logits[id] +=
                        cache.s[id] * cache.g_a / verbalizer.positive_ids.len() as f64;
                }
                for &id in &verbalizer.negative_ids {
                    d_logits[id] +=
                        cache.s[id] * cache.g_b / verbalizer.negative_ids.len() as f64;
                }
                let dh = self.params.tok_emb.t().dot(&d_logits);
                d_hidden.row_mut(*mask_position).assign(&dh);
                if let Some((g, scale)) = grads.as_mut() {
                    let h = hidden.row(*mask_position);
                    // Tied projection: the vocabulary logits reuse tok_emb.
                    for (i, &dz) in d_logits.iter().enumerate() {
                        if dz != 0.0 {
                            let mut row = g.tok_emb.row_mut(i);
                            row.scaled_add(*scale * dz, &h);
                        }
                        g.mlm_bias[i] += *scale * dz;
                    }
                }
            }
            LossTarget::ClsLabel { .. } => {
                let g_vec = [cache.g_b, cache.g_a];
                let mut d_logits = [0.0f64; 2];
                for i in 0..2 {
                    d_logits[i] = cache.s[i] * (g_vec[i] - cache.dot_gs);
                }
                let d_logits = Array1::from_vec(d_logits.to_vec());
                let dh = self.params.cls_w.t().dot(&d_logits);
                d_hidden.row_mut(0).assign(&dh);
                if let Some((g, scale)) = grads.as_mut() {
                    let h = hidden.row(0);
                    for i in 0..2 {
                        let mut row = g.cls_w.row_mut(i);
                        row.scaled_add(*scale * d_logits[i], &h);
                        g.cls_b[i] += *scale * d_logits[i];
                    }
                }
            }
        }
        d_hidden
    }

    fn encoder_backward(
        &self,
        caches: &[LayerCache],
        d_hidden: Array2<f64>,
        mut grads: Option<(&mut Gradients, f64)>,
    ) -> Array2<f64> {
        let d = self.config.embed_dim;
        let n_heads = self.config.num_heads;
        let dh = d / n_heads;
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

        let mut dx = d_hidden;
        for (idx, cache) in caches.iter().enumerate().rev() {
            let layer = &self.params.layers[idx];

            // x2 = LN2(x1 + ff_out)
            let dr2 = {
                let g = grads.as_mut().map(|(g, scale)| {
                    let lg = &mut g.layers[idx];
                    (&mut lg.ln2_gamma, &mut lg.ln2_beta, *scale)
                });
                layer_norm_backward(&dx, &cache.ln2, &layer.ln2_gamma, g)
            };

            // ff_out = gelu(x1·W1 + b1)·W2 + b2
            let d_ff_act = dr2.dot(&layer.w2.t());
            let mut d_ff_pre = d_ff_act;
            d_ff_pre.zip_mut_with(&cache.ff_pre, |dv, &pre| *dv *= gelu_prime(pre));
            if let Some((g, scale)) = grads.as_mut() {
                let lg = &mut g.layers[idx];
                lg.w2.scaled_add(*scale, &cache.ff_act.t().dot(&dr2));
                lg.b2.scaled_add(*scale, &column_sums(&dr2));
                lg.w1.scaled_add(*scale, &cache.x1.t().dot(&d_ff_pre));
                lg.b1.scaled_add(*scale, &column_sums(&d_ff_pre));
            }
            let mut dx1 = d_ff_pre.dot(&layer.w1.t());
            dx1 += &dr2; // residual

            // x1 = LN1(x_in + attn_out)
            let dr1 = {
                let g = grads.as_mut().map(|(g, scale)| {
                    let lg = &mut g.layers[idx];
                    (&mut lg.ln1_gamma, &mut lg.ln1_beta, *scale)
                });
                layer_norm_backward(&dx1, &cache.ln1, &layer.ln1_gamma, g)
            };

            // attn_out = ctx·Wo + bo
            let d_ctx = dr1.dot(&layer.wo.t());
            if let Some((g, scale)) = grads.as_mut() {
                let lg = &mut g.layers[idx];
                lg.wo.scaled_add(*scale, &cache.ctx.t().dot(&dr1));
                lg.bo.scaled_add(*scale, &column_sums(&dr1));
            }

            let seq_len = dr1.nrows();
            let mut dq = Array2::zeros((seq_len, d));
            let mut dk = Array2::zeros((seq_len, d));
            let mut dv = Array2::zeros((seq_len, d));
            for h in 0..n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = cache.q.slice(cols);
                let kh = cache.k.slice(cols);
                let vh = cache.v.slice(cols);
                let attn = &cache.attn[h];
                let d_ctx_h = d_ctx.slice(cols);

                let d_attn = d_ctx_h.dot(&vh.t());
                dv.slice_mut(cols).assign(&attn.t().dot(&d_ctx_h));
                let mut d_scores = softmax_rows_backward(attn, &d_attn);
                d_scores.mapv_inplace(|v| v * inv_sqrt_dh);
                dq.slice_mut(cols).assign(&d_scores.dot(&kh));
                dk.slice_mut(cols).assign(&d_scores.t().dot(&qh));
            }

            if let Some((g, scale)) = grads.as_mut() {
                let lg = &mut g.layers[idx];
                lg.wq.scaled_add(*scale, &cache.x_in.t().dot(&dq));
                lg.bq.scaled_add(*scale, &column_sums(&dq));
                lg.wk.scaled_add(*scale, &cache.x_in.t().dot(&dk));
                lg.bk.scaled_add(*scale, &column_sums(&dk));
                lg.wv.scaled_add(*scale, &cache.x_in.t().dot(&dv));
                lg.bv.scaled_add(*scale, &column_sums(&dv));
            }

            let mut dx_in = dq.dot(&layer.wq.t());
            dx_in += &dk.dot(&layer.wk.t());
            dx_in += &dv.dot(&layer.wv.t());
            dx_in += &dr1; // residual
            dx = dx_in;
        }
        dx
    }

    /// Vocabulary distribution at one position without materializing the full
    /// logits matrix; the prediction path the trainer uses.
    pub fn mask_probabilities(
        &self,
        embeddings: &EmbeddingMatrix,
        position: usize,
    ) -> Result<Array1<f64>> {
        let (hidden, _) = self.encode(embeddings)?;
        if position >= hidden.nrows() {
            return Err(Error::Config(format!(
                "position {position} outside sequence of length {}",
                hidden.nrows()
            )));
        }
        let h = hidden.row(position).to_owned();
        let logits = self.params.tok_emb.dot(&h) + &self.params.mlm_bias;
        Ok(softmax(&logits))
    }

    /// Two-class probabilities from the class-token hidden state.
    pub fn cls_probabilities(&self, embeddings: &EmbeddingMatrix) -> Result<[f64; 2]> {
        let (hidden, _) = self.encode(embeddings)?;
        let h = hidden.row(0).to_owned();
        let logits = self.params.cls_w.dot(&h) + &self.params.cls_b;
        let probs = softmax(&logits);
        Ok([probs[0], probs[1]])
    }

    /// Loss, its gradient with respect to the input embeddings, and (when a
    /// buffer is supplied) accumulated parameter gradients scaled by `scale`.
    pub fn loss_backward(
        &self,
        embeddings: &EmbeddingMatrix,
        target: &LossTarget,
        mut grads: Option<(&mut Gradients, f64)>,
    ) -> Result<(f64, Array2<f64>)> {
        let (hidden, caches) = self.encode(embeddings)?;
        let (loss, head_cache) = self.head_forward(&hidden, target)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let d_hidden = self.head_backward(
            &hidden,
            target,
            &head_cache,
            grads.as_mut().map(|(g, s)| (&mut **g, *s)),
        );
        let d_embeddings = self.encoder_backward(&caches, d_hidden, grads);
        Ok((loss, d_embeddings))
    }

    /// Apply accumulated gradients with plain gradient descent plus decoupled
    /// weight decay. Decay acts on weight matrices and embeddings; biases and
    /// norm parameters are not decayed.
    pub fn apply_update(&mut self, grads: &Gradients, learning_rate: f64, weight_decay: f64) {
        fn update_mat(p: &mut Array2<f64>, g: &Array2<f64>, lr: f64, wd: f64) {
            p.zip_mut_with(g, |pv, &gv| *pv = *pv * (1.0 - lr * wd) - lr * gv);
        }
        fn update_vec(p: &mut Array1<f64>, g: &Array1<f64>, lr: f64) {
            p.zip_mut_with(g, |pv, &gv| *pv -= lr * gv);
        }
        let lr = learning_rate;
        update_mat(&mut self.params.tok_emb, &grads.tok_emb, lr, weight_decay);
        update_mat(&mut self.params.pos_emb, &grads.pos_emb, lr, weight_decay);
        for (lp, lg) in self.params.layers.iter_mut().zip(&grads.layers) {
            update_mat(&mut lp.wq, &lg.wq, lr, weight_decay);
            update_mat(&mut lp.wk, &lg.wk, lr, weight_decay);
            update_mat(&mut lp.wv, &lg.wv, lr, weight_decay);
            update_mat(&mut lp.wo, &lg.wo, lr, weight_decay);
            update_mat(&mut lp.w1, &lg.w1, lr, weight_decay);
            update_mat(&mut lp.w2, &lg.w2, lr, weight_decay);
            update_vec(&mut lp.bq, &lg.bq, lr);
            update_vec(&mut lp.bk, &lg.bk, lr);
            update_vec(&mut lp.bv, &lg.bv, lr);
            update_vec(&mut lp.bo, &lg.bo, lr);
            update_vec(&mut lp.b1, &lg.b1, lr);
            update_vec(&mut lp.b2, &lg.b2, lr);
            update_vec(&mut lp.ln1_gamma, &lg.ln1_gamma, lr);
            update_vec(&mut lp.ln1_beta, &lg.ln1_beta, lr);
            update_vec(&mut lp.ln2_gamma, &lg.ln2_gamma, lr);
            update_vec(&mut lp.ln2_beta, &lg.ln2_beta, lr);
        }
        update_vec(&mut self.params.mlm_bias, &grads.mlm_bias, lr);
        update_mat(&mut self.params.cls_w, &grads.cls_w, lr, weight_decay);
        update_vec(&mut self.params.cls_b, &grads.cls_b, lr);
    }
}

impl MaskedLmBackend for ReferenceBackend {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn embed(&self, input: &PromptedInput) -> Result<EmbeddingMatrix> {
        if input.len() > self.config.max_len {
            return Err(Error::Config(format!(
                "input length {} exceeds max_len {}",
                input.len(),
                self.config.max_len
            )));
        }
        let d = self.config.embed_dim;
        let mut data = Array2::zeros((input.len(), d));
        for (pos, &id) in input.token_ids.iter().enumerate() {
            if id >= self.vocab.len() {
                return Err(Error::Vocabulary(format!(
                    "token id {id} outside vocabulary of size {}",
                    self.vocab.len()
                )));
            }
            let mut row = data.row_mut(pos);
            row.assign(&self.params.tok_emb.row(id));
            row += &self.params.pos_emb.row(pos);
        }
        Ok(EmbeddingMatrix::new(data))
    }

    fn forward_from_embeddings(&self, embeddings: &EmbeddingMatrix) -> Result<BackendOutput> {
        let (hidden, _) = self.encode(embeddings)?;
        let vocab_logits = hidden.dot(&self.params.tok_emb.t()) + &self.params.mlm_bias;
        let cls_hidden = hidden.row(0).to_owned();
        Ok(BackendOutput {
            vocab_logits,
            cls_hidden,
        })
    }

    fn class_logits(&self, cls_hidden: &Array1<f64>) -> [f64; 2] {
        let z = self.params.cls_w.dot(cls_hidden) + &self.params.cls_b;
        [z[0], z[1]]
    }

    fn loss(&self, embeddings: &EmbeddingMatrix, target: &LossTarget) -> Result<f64> {
        let (hidden, _) = self.encode(embeddings)?;
        let (loss, _) = self.head_forward(&hidden, target)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        Ok(loss)
    }

    fn loss_gradient_wrt_embeddings(
        &self,
        embeddings: &EmbeddingMatrix,
        target: &LossTarget,
    ) -> Result<Array2<f64>> {
        self.loss_backward(embeddings, target, None)
            .map(|(_, grad)| grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::ResolvedVerbalizer;
    use crate::vocab::Vocabulary;

    fn small_backend(seed: u64) -> ReferenceBackend {
        let vocab = Vocabulary::build(["alpha beta gamma delta epsilon zeta eta theta correct incorrect"]);
        let config = ReferenceConfig {
            max_len: 32,
            seed,
            ..ReferenceConfig::default()
        };
        ReferenceBackend::new(config, vocab).unwrap()
    }

    fn input(ids: Vec<usize>, mask_position: usize) -> PromptedInput {
        PromptedInput {
            token_ids: ids,
            mask_position,
            truncation_report: Default::default(),
        }
    }

    fn mask_target(backend: &ReferenceBackend, mask_position: usize, label: u8) -> LossTarget {
        let v = backend.vocabulary();
        LossTarget::MaskVerbalizer {
            mask_position,
            verbalizer: ResolvedVerbalizer {
                positive_ids: vec![v.id_of("correct").unwrap()],
                negative_ids: vec![v.id_of("incorrect").unwrap()],
            },
            label,
        }
    }

    #[test]
    fn pad_only_rows_differ_only_by_position() {
        let backend = small_backend(1);
        let e = backend
            .embed(&input(vec![Vocabulary::PAD_ID; 4], 0))
            .unwrap();
        assert_eq!(e.data.dim(), (4, 32));
        for pos in 0..4 {
            let noposition = &e.data.row(pos) - &backend.params.pos_emb.row(pos);
            let base = &e.data.row(0) - &backend.params.pos_emb.row(0);
            assert!(noposition
                .iter()
                .zip(base.iter())
                .all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn embed_is_deterministic_and_rejects_bad_ids() {
        let backend = small_backend(2);
        let x = input(vec![2, 6, 7, 5, 3], 3);
        assert_eq!(backend.embed(&x).unwrap(), backend.embed(&x).unwrap());
        let bad = input(vec![backend.vocabulary().len()], 0);
        assert!(matches!(
            backend.embed(&bad),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn forward_composes_and_ignores_zero_perturbation() {
        let backend = small_backend(3);
        let x = input(vec![2, 6, 7, 5, 3], 3);
        let fused = backend.forward(&x).unwrap();
        let e = backend.embed(&x).unwrap();
        let staged = backend.forward_from_embeddings(&e).unwrap();
        assert_eq!(fused.vocab_logits, staged.vocab_logits);
        assert_eq!(fused.cls_hidden, staged.cls_hidden);

        let zero = EmbeddingMatrix::new(&e.data + 0.0);
        let again = backend.forward_from_embeddings(&zero).unwrap();
        assert_eq!(staged.vocab_logits, again.vocab_logits);
    }

    #[test]
    fn mask_row_softmax_normalizes() {
        let backend = small_backend(4);
        let x = input(vec![2, 6, 7, 5, 3], 3);
        let out = backend.forward(&x).unwrap();
        for pos in 0..5 {
            let sum = out.position_distribution(pos).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_embeddings_are_a_numeric_error() {
        let backend = small_backend(5);
        let mut e = backend.embed(&input(vec![2, 6, 3], 1)).unwrap();
        e.data[[1, 0]] = f64::NAN;
        assert!(matches!(
            backend.forward_from_embeddings(&e),
            Err(Error::Numeric(_))
        ));
    }

    /// Central finite differences around randomly sampled coordinates, the
    /// independent oracle for the analytic embedding gradient.
    fn finite_difference_check(target: LossTarget) {
        use rand::Rng;
        let backend = small_backend(6);
        let x = input(vec![2, 6, 7, 8, 5, 3], 4);
        let e = backend.embed(&x).unwrap();
        let analytic = backend.loss_gradient_wrt_embeddings(&e, &target).unwrap();
        assert_eq!(analytic.dim(), e.data.dim());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-4;
        for _ in 0..20 {
            let i = rng.gen_range(0..e.seq_len());
            let j = rng.gen_range(0..e.width());
            let mut plus = e.clone();
            plus.data[[i, j]] += h;
            let mut minus = e.clone();
            minus.data[[i, j]] -= h;
            let fd = (backend.loss(&plus, &target).unwrap()
                - backend.loss(&minus, &target).unwrap())
                / (2.0 * h);
            let an = analytic[[i, j]];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((fd - an) / denom).abs() <= 1e-4,
                "fd {fd} vs analytic {an} at ({i},{j})"
            );
        }
    }

    #[test]
    fn embedding_gradient_matches_finite_differences_mask_loss() {
        let backend = small_backend(6);
        finite_difference_check(mask_target(&backend, 4, 1));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences_cls_loss() {
        finite_difference_check(LossTarget::ClsLabel { label: 0 });
    }

    #[test]
    fn saturated_prediction_has_vanishing_gradient() {
        // Drive the verbalized probability into the clamp band by giving the
        // positive word an overwhelming output bias.
        let mut backend = small_backend(8);
        let correct = backend.vocabulary().id_of("correct").unwrap();
        backend.params.mlm_bias[correct] = 60.0;
        let x = input(vec![2, 6, 7, 5, 3], 3);
        let e = backend.embed(&x).unwrap();
        let target = mask_target(&backend, 3, 1);

        let (hidden, _) = backend.encode(&e).unwrap();
        let (_, cache) = backend.head_forward(&hidden, &target).unwrap();
        let p_pos = cache.s[correct];
        assert!(p_pos > 0.999, "saturation not reached: {p_pos}");

        let grad = backend.loss_gradient_wrt_embeddings(&e, &target).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-3));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let backend = small_backend(9);
        let x = input(vec![2, 6, 7, 5, 3], 3);
        let before = backend.forward(&x).unwrap();

        let json = backend.checkpoint().to_json().unwrap();
        let restored = ReferenceBackend::from_checkpoint(Checkpoint::from_json(&json).unwrap()).unwrap();
        let after = restored.forward(&x).unwrap();
        assert_eq!(before.vocab_logits, after.vocab_logits);
        assert_eq!(before.cls_hidden, after.cls_hidden);
    }

    #[test]
    fn max_len_sequences_embed_without_truncation() {
        let backend = small_backend(10);
        let ids = vec![6usize; 32];
        let e = backend.embed(&input(ids, 0)).unwrap();
        assert_eq!(e.data.dim(), (32, 32));
    }
}
