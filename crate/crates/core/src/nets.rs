//! The six interconnected sub-models: style encoder, content encoder,
//! AdaIN-conditioned generator, writer classifier, attention recognizer and
//! global discriminator.
//!
//! Batched `Var`-level forwards are used by the training loop; the plain
//! methods (`encode_style`, `recognize`, ...) run single inputs on inference
//! tapes and return detached arrays.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::corpus::{mix_seed, Alphabet, MAX_WORD_LEN};
use crate::nn::{Bound, Conv2d, Embedding, GruCell, Linear, ParamStore};
use crate::patchcrit::PatchCritic;

pub const CKPT_HEADER: &str = "smartpatch-ckpt-v1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("style set is empty")]
    EmptyStyleSet,
    #[error("style image has shape {got_h}x{got_w}, expected {want_h}x{want_w}")]
    BadImageShape {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("word {0:?} fails the corpus filter")]
    InvalidWord(String),
    #[error("checkpoint header mismatch: expected {CKPT_HEADER:?}, found {0:?}")]
    BadHeader(String),
    #[error("checkpoint config hash mismatch: checkpoint {ckpt}, current {current}")]
    ConfigHashMismatch { ckpt: String, current: String },
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which local critic, if any, a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticKind {
    None,
    Unconditional,
    Conditional,
}

/// Structural hyperparameters of all sub-models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub style_dim: usize,
    pub char_dim: usize,
    pub g2_dim: usize,
    pub noise_dim: usize,
    pub base_channels: usize,
    pub gen_channels: [usize; 4],
    pub rec_channels: [usize; 3],
    pub rec_hidden: usize,
    pub attn_dim: usize,
    pub dec_embed_dim: usize,
    pub critic_channels: [usize; 4],
    pub critic_kind: CriticKind,
    pub alphabet_len: usize,
    pub n_writers: usize,
}

impl ModelConfig {
    /// Default geometry at the canonical 64x216 resolution.
    pub fn desk(n_writers: usize) -> Self {
        ModelConfig {
            height: 64,
            width: 216,
            style_dim: 48,
            char_dim: 24,
            g2_dim: 24,
            noise_dim: 8,
            base_channels: 16,
            gen_channels: [48, 32, 16, 8],
            rec_channels: [16, 32, 48],
            rec_hidden: 48,
            attn_dim: 24,
            dec_embed_dim: 16,
            critic_channels: [8, 16, 32, 32],
            critic_kind: CriticKind::None,
            alphabet_len: Alphabet::latin().len(),
            n_writers,
        }
    }

    /// Small widths for the 32x108 smoke fixture.
    pub fn smoke(n_writers: usize) -> Self {
        ModelConfig {
            height: 32,
            width: 108,
            style_dim: 24,
            char_dim: 12,
            g2_dim: 12,
            noise_dim: 4,
            base_channels: 6,
            gen_channels: [20, 12, 8, 6],
            rec_channels: [8, 16, 24],
            rec_hidden: 32,
            attn_dim: 16,
            dec_embed_dim: 12,
            critic_channels: [4, 8, 12, 12],
            critic_kind: CriticKind::None,
            alphabet_len: Alphabet::latin().len(),
            n_writers,
        }
    }

    pub fn with_critic(mut self, kind: CriticKind) -> Self {
        self.critic_kind = kind;
        self
    }

    /// Spatial sizes of the decoder stages, last entry = full resolution.
    pub fn decoder_sizes(&self) -> [(usize, usize); 5] {
        let mut sizes = [(0, 0); 5];
        sizes[4] = (self.height, self.width);
        for i in (0..4).rev() {
            let (h, w) = sizes[i + 1];
            sizes[i] = (h.div_ceil(2), w.div_ceil(2));
        }
        sizes
    }

    /// Output classes of the recognizer: alphabet plus the end token.
    pub fn rec_classes(&self) -> usize {
        self.alphabet_len + 1
    }

    /// Decoder input vocabulary: alphabet plus the shared start/pad token.
    pub fn dec_vocab(&self) -> usize {
        self.alphabet_len + 1
    }
}

/// Latent geometry of the recognizer backbone over a given image width.
#[derive(Clone, Copy, Debug)]
pub struct LatentGeometry {
    pub latent_width: usize,
    pub image_width: usize,
}

impl LatentGeometry {
    pub fn downsample_factor(&self) -> f64 {
        self.image_width as f64 / self.latent_width as f64
    }

    /// Half the backbone receptive field, in pixels.
    pub fn receptive_radius() -> usize {
        crate::patchcrit::receptive_field(&Recognizer::BACKBONE_GEOMETRY).div_ceil(2)
    }
}

/// Writer-style latent produced from a set of example word images.
#[derive(Clone, Debug)]
pub struct StyleVector {
    pub values: Array1<f64>,
}

/// Per-character vectors (`g1`, padded to [`MAX_WORD_LEN`]) and the global
/// vectors (`g2`) consumed by the decoder's AdaIN stages.
#[derive(Clone, Debug)]
pub struct ContentEncoding {
    pub g1: Array2<f64>,
    pub g2: Vec<Array1<f64>>,
    pub word: String,
}

/// Per-decoding-step attention rows over the latent width.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub steps: Vec<Array1<f64>>,
}

impl AttentionTrace {
    pub fn is_valid(&self, tol: f64) -> bool {
        self.steps.iter().all(|row| {
            row.iter().all(|&v| v >= 0.0) && (row.sum() - 1.0).abs() <= tol
        })
    }
}

/// Greedy decoding output: per-step logits and the attention trace.
#[derive(Clone, Debug)]
pub struct RecognizerOutput {
    pub logits: Array2<f64>,
    pub attention: AttentionTrace,
    pub decoded: Vec<usize>,
}

impl RecognizerOutput {
    pub fn decoded_string(&self, alphabet: &Alphabet) -> String {
        self.decoded
            .iter()
            .filter_map(|&i| alphabet.symbol(i))
            .collect()
    }
}

// ---- sub-models ----

pub struct StyleEncoder {
    pub store: ParamStore,
    convs: [Conv2d; 3],
    proj: Linear,
}

impl StyleEncoder {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Self {
        let mut store = ParamStore::new();
        let b = cfg.base_channels;
        let convs = [
            Conv2d::new(&mut store, rng, "style.conv1", 1, b, 3, 1, 1),
            Conv2d::new(&mut store, rng, "style.conv2", b, 2 * b, 3, 1, 1),
            Conv2d::new(&mut store, rng, "style.conv3", 2 * b, 4 * b, 3, 1, 1),
        ];
        let proj = Linear::new(&mut store, rng, "style.proj", 4 * b, cfg.style_dim);
        StyleEncoder { store, convs, proj }
    }

    /// `images: [B*K, 1, H, W]` -> style vectors `[B, S]`. The per-image
    /// embeddings of each set are pooled with an order-free mean.
    pub fn encode(&self, t: &mut Tape, p: &Bound, images: Var, k: usize) -> Var {
        let mut x = images;
        for conv in &self.convs {
            x = conv.forward(t, p, x);
            x = t.leaky_relu(x, 0.2);
            x = t.max_pool2(x);
        }
        let feats = t.spatial_mean(x); // [B*K, C]
        let bk = t.shape(feats)[0];
        let c = t.shape(feats)[1];
        let b = bk / k;
        let grouped = t.reshape(feats, &[b, k, c]);
        let mut pooled = Vec::with_capacity(b);
        for bi in 0..b {
            let set = t.select(grouped, 0, bi);
            let set = t.reshape(set, &[k, c]);
            let mean = t.mean_rows_orderfree(set);
            pooled.push(t.reshape(mean, &[1, c]));
        }
        let stacked = t.concat(0, &pooled);
        self.proj.forward(t, p, stacked)
    }
}

pub struct ContentEncoder {
    pub store: ParamStore,
    char_embed: Embedding,
    g2_hidden: Linear,
    g2_out: Linear,
    g2_dim: usize,
    max_len: usize,
}

impl ContentEncoder {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Self {
        let mut store = ParamStore::new();
        let vocab = cfg.alphabet_len + 1; // chars + pad
        let char_embed = Embedding::new(&mut store, rng, "content.embed", vocab, cfg.char_dim);
        let flat = MAX_WORD_LEN * cfg.char_dim;
        let g2_hidden = Linear::new(&mut store, rng, "content.g2_hidden", flat, 2 * cfg.g2_dim);
        let g2_out = Linear::new(&mut store, rng, "content.g2_out", 2 * cfg.g2_dim, 4 * cfg.g2_dim);
        ContentEncoder {
            store,
            char_embed,
            g2_hidden,
            g2_out,
            g2_dim: cfg.g2_dim,
            max_len: MAX_WORD_LEN,
        }
    }

    /// Word -> padded index row of length [`MAX_WORD_LEN`].
    pub fn pad_indices(&self, indices: &[usize], pad: usize) -> Vec<usize> {
        let mut out = indices.to_vec();
        out.truncate(self.max_len);
        while out.len() < self.max_len {
            out.push(pad);
        }
        out
    }

    /// `[B * MAX_WORD_LEN]` padded indices -> g1 `[B*N, E]`.
    pub fn g1(&self, t: &mut Tape, p: &Bound, padded: &[usize]) -> Var {
        self.char_embed.forward(t, p, padded)
    }

    /// g1 `[B*N, E]` -> four g2 vectors `[B, G2]` for the AdaIN stages.
    pub fn g2(&self, t: &mut Tape, p: &Bound, g1: Var, batch: usize) -> Vec<Var> {
        let flat = t.reshape(g1, &[batch, self.max_len * self.char_embed.dim]);
        let h = self.g2_hidden.forward(t, p, flat);
        let h = t.leaky_relu(h, 0.2);
        let all = self.g2_out.forward(t, p, h); // [B, 4*G2]
        let grouped = t.reshape(all, &[batch, 4, self.g2_dim]);
        (0..4)
            .map(|i| {
                let s = t.select(grouped, 1, i);
                t.reshape(s, &[batch, self.g2_dim])
            })
            .collect()
    }
}

pub struct Generator {
    pub store: ParamStore,
    seed_proj: Linear,
    stage_convs: [Conv2d; 4],
    adain_proj: [Linear; 4],
    final_conv: Conv2d,
    c0: usize,
}

impl Generator {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Self {
        let mut store = ParamStore::new();
        let [c0, c1, c2, c3] = cfg.gen_channels;
        let h0 = cfg.decoder_sizes()[0].0;
        let in_dim = cfg.char_dim + cfg.style_dim + cfg.noise_dim;
        let seed_proj = Linear::new(&mut store, rng, "gen.seed", in_dim, c0 * h0);
        let chans = [c0, c1, c2, c3];
        let mut stage_convs = Vec::new();
        let mut adain_proj = Vec::new();
        let mut cin = c0;
        for (i, &cout) in chans.iter().enumerate() {
            stage_convs.push(Conv2d::new(
                &mut store,
                rng,
                &format!("gen.stage{i}.conv"),
                cin,
                cout,
                3,
                1,
                1,
            ));
            adain_proj.push(Linear::new(
                &mut store,
                rng,
                &format!("gen.stage{i}.adain"),
                cfg.g2_dim,
                2 * cout,
            ));
            cin = cout;
        }
        let final_conv = Conv2d::new(&mut store, rng, "gen.final", c3, 1, 3, 1, 1);
        Generator {
            store,
            seed_proj,
            stage_convs: stage_convs.try_into().ok().unwrap(),
            adain_proj: adain_proj.try_into().ok().unwrap(),
            final_conv,
            c0,
        }
    }

    /// Decode a batch of images in `[0,1]`.
    ///
    /// `g1: [B*N, E]`, `style: [B, S]`, `noise: [B, Z]` (zero-width allowed),
    /// `g2`: four `[B, G2]` vectors.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        t: &mut Tape,
        p: &Bound,
        cfg: &ModelConfig,
        g1: Var,
        style: Var,
        noise: Var,
        g2: &[Var],
    ) -> Var {
        let b = t.shape(style)[0];
        let n = MAX_WORD_LEN;
        // repeat style and noise per character
        let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(n)).collect();
        let style_rep = t.index_rows(style, &rep);
        let mut parts = vec![g1, style_rep];
        if cfg.noise_dim > 0 {
            parts.push(t.index_rows(noise, &rep));
        }
        let seeds = t.concat(1, &parts); // [B*N, E+S+Z]
        let seeds = self.seed_proj.forward(t, p, seeds); // [B*N, C0*h0]
        let sizes = cfg.decoder_sizes();
        let h0 = sizes[0].0;
        let grid = t.reshape(seeds, &[b, n, self.c0, h0]);
        let mut x = t.permute(grid, &[0, 2, 3, 1]); // [B, C0, h0, N]
        for i in 0..4 {
            let (th, tw) = sizes[i + 1];
            x = t.upsample_nearest(x, th, tw);
            x = self.stage_convs[i].forward(t, p, x);
            x = t.instance_norm(x, 1e-5);
            let cout = t.shape(x)[1];
            let ss = self.adain_proj[i].forward(t, p, g2[i]); // [B, 2*C]
            let ss = t.reshape(ss, &[b, 2, cout]);
            let scale_raw = t.select(ss, 1, 0);
            let scale_raw = t.reshape(scale_raw, &[b, cout]);
            let scale = t.scalar_affine(scale_raw, 1.0, 1.0); // centered at identity
            let shift = t.select(ss, 1, 1);
            let shift = t.reshape(shift, &[b, cout]);
            x = t.affine_nc(x, scale, shift);
            x = t.leaky_relu(x, 0.2);
        }
        let out = self.final_conv.forward(t, p, x);
        t.sigmoid(out)
    }
}

pub struct WriterClassifier {
    pub store: ParamStore,
    convs: [Conv2d; 3],
    head: Linear,
}

impl WriterClassifier {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Self {
        let mut store = ParamStore::new();
        let b = cfg.base_channels;
        let convs = [
            Conv2d::new(&mut store, rng, "writer.conv1", 1, b, 3, 1, 1),
            Conv2d::new(&mut store, rng, "writer.conv2", b, 2 * b, 3, 1, 1),
            Conv2d::new(&mut store, rng, "writer.conv3", 2 * b, 4 * b, 3, 1, 1),
        ];
        let head = Linear::new(&mut store, rng, "writer.head", 4 * b, cfg.n_writers);
        WriterClassifier { store, convs, head }
    }

    /// `images: [B, 1, H, W]` -> logits `[B, n_writers]`.
    pub fn logits(&self, t: &mut Tape, p: &Bound, images: Var) -> Var {
        let mut x = images;
        for conv in &self.convs {
            x = conv.forward(t, p, x);
            x = t.leaky_relu(x, 0.2);
            x = t.max_pool2(x);
        }
        let feats = t.spatial_mean(x);
        self.head.forward(t, p, feats)
    }
}

pub struct GlobalDiscriminator {
    pub store: ParamStore,
    convs: [Conv2d; 3],
    final_conv: Conv2d,
}

impl GlobalDiscriminator {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Self {
        let mut store = ParamStore::new();
        let b = cfg.base_channels;
        let convs = [
            Conv2d::new(&mut store, rng, "disc.conv1", 1, b, 4, 2, 1),
            Conv2d::new(&mut store, rng, "disc.conv2", b, 2 * b, 4, 2, 1),
            Conv2d::new(&mut store, rng, "disc.conv3", 2 * b, 4 * b, 4, 2, 1),
        ];
        let final_conv = Conv2d::new(&mut store, rng, "disc.final", 4 * b, 1, 3, 1, 1);
        GlobalDiscriminator { store, convs, final_conv }
    }

    /// `images: [B, 1, H, W]` -> realness scores `[B]` (raw logits).
    pub fn score(&self, t: &mut Tape, p: &Bound, images: Var) -> Var {
        let mut x = images;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(t, p, x);
            if i > 0 {
                x = t.instance_norm(x, 1e-5);
            }
            x = t.leaky_relu(x, 0.2);
        }
        let map = self.final_conv.forward(t, p, x);
        let pooled = t.spatial_mean(map);
        let b = t.shape(pooled)[0];
        t.reshape(pooled, &[b])
    }
}

pub struct Recognizer {
    pub store: ParamStore,
    convs: [Conv2d; 3],
    key_proj: Linear,
    query_proj: Linear,
    score_proj: Linear,
    dec_embed: Embedding,
    gru1: GruCell,
    gru2: GruCell,
    out_proj: Linear,
    classes: usize,
    special: usize,
    hidden: usize,
    feat_dim: usize,
}

impl Recognizer {
    /// `(kernel, stride)` stack of the backbone, conv and pool interleaved.
    pub const BACKBONE_GEOMETRY: [(usize, usize); 6] =
        [(3, 1), (2, 2), (3, 1), (2, 2), (3, 1), (2, 2)];

    fn new(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Self {
        let mut store = ParamStore::new();
        let [r0, r1, r2] = cfg.rec_channels;
        let convs = [
            Conv2d::new(&mut store, rng, "rec.conv1", 1, r0, 3, 1, 1),
            Conv2d::new(&mut store, rng, "rec.conv2", r0, r1, 3, 1, 1),
            Conv2d::new(&mut store, rng, "rec.conv3", r1, r2, 3, 1, 1),
        ];
        let key_proj = Linear::new(&mut store, rng, "rec.key", r2, cfg.attn_dim);
        let query_proj = Linear::new(&mut store, rng, "rec.query", cfg.rec_hidden, cfg.attn_dim);
        let score_proj = Linear::new(&mut store, rng, "rec.score", cfg.attn_dim, 1);
        let dec_embed = Embedding::new(
            &mut store,
            rng,
            "rec.dec_embed",
            cfg.dec_vocab(),
            cfg.dec_embed_dim,
        );
        let gru1 = GruCell::new(
            &mut store,
            rng,
            "rec.gru1",
            cfg.dec_embed_dim + r2,
            cfg.rec_hidden,
        );
        let gru2 = GruCell::new(&mut store, rng, "rec.gru2", cfg.rec_hidden, cfg.rec_hidden);
        let out_proj = Linear::new(
            &mut store,
            rng,
            "rec.out",
            cfg.rec_hidden + r2,
            cfg.rec_classes(),
        );
        Recognizer {
            store,
            convs,
            key_proj,
            query_proj,
            score_proj,
            dec_embed,
            gru1,
            gru2,
            out_proj,
            classes: cfg.rec_classes(),
            special: cfg.alphabet_len,
            hidden: cfg.rec_hidden,
            feat_dim: r2,
        }
    }

    pub fn latent_geometry(&self, image_width: usize) -> LatentGeometry {
        LatentGeometry {
            latent_width: image_width / 2 / 2 / 2,
            image_width,
        }
    }

    /// Fully convolutional backbone: `[B, 1, H, W]` -> columns `[B, T', F]`.
    pub fn latent_columns(&self, t: &mut Tape, p: &Bound, images: Var) -> Var {
        let mut x = images;
        for conv in &self.convs {
            x = conv.forward(t, p, x);
            x = t.leaky_relu(x, 0.2);
            x = t.max_pool2(x);
        }
        t.collapse_height(x)
    }

    /// One decode step over all batch rows. Returns `(logits, attention,
    /// new_h1, new_h2)` with shapes `[B, classes]`, `[B, T']`.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        t: &mut Tape,
        p: &Bound,
        cols: Var,
        keys: Var,
        prev: &[usize],
        h1: Var,
        h2: Var,
    ) -> (Var, Var, Var, Var) {
        let shape = t.shape(cols).to_vec();
        let (b, tw, f) = (shape[0], shape[1], shape[2]);
        let query = self.query_proj.forward(t, p, h2); // [B, attn]
        let mut contexts = Vec::with_capacity(b);
        let mut weights = Vec::with_capacity(b);
        for bi in 0..b {
            let key_b = t.select(keys, 0, bi);
            let key_b = t.reshape(key_b, &[tw, t.shape(keys)[2]]);
            let q_b = t.select(query, 0, bi);
            let q_b = t.reshape(q_b, &[t.shape(query)[1]]);
            let mixed = t.add_row(key_b, q_b);
            let act = t.tanh(mixed);
            let scores = self.score_proj.forward(t, p, act); // [T', 1]
            let scores = t.reshape(scores, &[1, tw]);
            let wt = t.softmax_rows(scores); // [1, T']
            let col_b = t.select(cols, 0, bi);
            let col_b = t.reshape(col_b, &[tw, f]);
            let ctx = t.matmul(wt, col_b); // [1, F]
            contexts.push(ctx);
            weights.push(wt);
        }
        let context = t.concat(0, &contexts); // [B, F]
        let attention = t.concat(0, &weights); // [B, T']
        let emb = self.dec_embed.forward(t, p, prev); // [B, Ed]
        let gru_in = t.concat(1, &[emb, context]);
        let h1n = self.gru1.forward(t, p, gru_in, h1);
        let h2n = self.gru2.forward(t, p, h1n, h2);
        let head_in = t.concat(1, &[h2n, context]);
        let logits = self.out_proj.forward(t, p, head_in);
        (logits, attention, h1n, h2n)
    }

    fn zero_state(&self, t: &mut Tape, b: usize) -> Var {
        t.leaf(ArrayD::zeros(IxDyn(&[b, self.hidden])))
    }

    /// Teacher-forced pass over a batch. Returns the per-sample-mean loss
    /// (sum over steps, end token included) and per-item attention rows.
    pub fn teacher_forced(
        &self,
        t: &mut Tape,
        p: &Bound,
        images: Var,
        targets: &[Vec<usize>],
    ) -> (Var, Vec<Vec<Array1<f64>>>) {
        let b = targets.len();
        let cols = self.latent_columns(t, p, images);
        let shape = t.shape(cols).to_vec();
        let (tw, f) = (shape[1], shape[2]);
        let flat = t.reshape(cols, &[b * tw, f]);
        let keys_flat = self.key_proj.forward(t, p, flat);
        let keys = t.reshape(keys_flat, &[b, tw, self.key_proj_dim(t, keys_flat)]);
        let steps = targets.iter().map(|w| w.len()).max().unwrap_or(0) + 1;
        let mut h1 = self.zero_state(t, b);
        let mut h2 = self.zero_state(t, b);
        let mut prev = vec![self.special; b];
        let mut total: Option<Var> = None;
        let mut traces: Vec<Vec<Array1<f64>>> = vec![Vec::new(); b];
        for step in 0..steps {
            let (logits, attention, h1n, h2n) = self.step(t, p, cols, keys, &prev, h1, h2);
            h1 = h1n;
            h2 = h2n;
            let mut tgt = vec![0usize; b];
            let mut mask = Array1::<f64>::zeros(b);
            for bi in 0..b {
                let len = targets[bi].len();
                if step < len {
                    tgt[bi] = targets[bi][step];
                    mask[bi] = 1.0;
                } else if step == len {
                    tgt[bi] = self.special; // end token
                    mask[bi] = 1.0;
                }
                if step <= len {
                    let att = t.value(attention);
                    traces[bi].push(
                        att.index_axis(Axis(0), bi)
                            .iter()
                            .cloned()
                            .collect::<Array1<f64>>(),
                    );
                }
            }
            let ce = t.cross_entropy_rows(logits, &tgt); // [B]
            let mask_var = t.leaf(mask.into_dyn());
            let masked = t.mul(ce, mask_var);
            let s = t.sum_all(masked);
            total = Some(match total {
                Some(acc) => t.add(acc, s),
                None => s,
            });
            // teacher forcing: feed the true character while it lasts
            for bi in 0..b {
                prev[bi] = if step < targets[bi].len() {
                    targets[bi][step]
                } else {
                    self.special
                };
            }
        }
        let total = total.expect("at least one step");
        let loss = t.scalar_affine(total, 1.0 / b as f64, 0.0);
        (loss, traces)
    }

    fn key_proj_dim(&self, t: &Tape, keys_flat: Var) -> usize {
        t.shape(keys_flat)[1]
    }

    /// Greedy decode of a single image; stops at the end token or after
    /// [`MAX_WORD_LEN`]+1 steps.
    pub fn recognize_image(&self, image: &Array2<f64>) -> RecognizerOutput {
        let mut t = Tape::inference();
        let p = self.store.bind(&mut t);
        let x = t.leaf(image_batch(&[image]));
        let cols = self.latent_columns(&mut t, &p, x);
        let shape = t.shape(cols).to_vec();
        let (tw, f) = (shape[1], shape[2]);
        let flat = t.reshape(cols, &[tw, f]);
        let keys_flat = self.key_proj.forward(&mut t, &p, flat);
        let kd = t.shape(keys_flat)[1];
        let keys = t.reshape(keys_flat, &[1, tw, kd]);
        let mut h1 = self.zero_state(&mut t, 1);
        let mut h2 = self.zero_state(&mut t, 1);
        let mut prev = vec![self.special];
        let mut logits_rows: Vec<Array1<f64>> = Vec::new();
        let mut attention = Vec::new();
        let mut decoded = Vec::new();
        for _ in 0..=MAX_WORD_LEN {
            let (logits, att, h1n, h2n) = self.step(&mut t, &p, cols, keys, &prev, h1, h2);
            h1 = h1n;
            h2 = h2n;
            let row: Array1<f64> = t.value(logits).index_axis(Axis(0), 0).iter().cloned().collect();
            let att_row: Array1<f64> =
                t.value(att).index_axis(Axis(0), 0).iter().cloned().collect();
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(self.special);
            logits_rows.push(row);
            attention.push(att_row);
            if best == self.special {
                break;
            }
            decoded.push(best);
            prev = vec![best];
        }
        let cols_n = logits_rows[0].len();
        let mut logits = Array2::<f64>::zeros((logits_rows.len(), cols_n));
        for (i, row) in logits_rows.iter().enumerate() {
            logits.row_mut(i).assign(row);
        }
        RecognizerOutput {
            logits,
            attention: AttentionTrace { steps: attention },
            decoded,
        }
    }

    /// Teacher-forced attention rows for a known transcription (no grad).
    pub fn attention_for(&self, image: &Array2<f64>, target: &[usize]) -> AttentionTrace {
        let mut t = Tape::inference();
        let p = self.store.bind(&mut t);
        let x = t.leaf(image_batch(&[image]));
        let (_, traces) = self.teacher_forced(&mut t, &p, x, &[target.to_vec()]);
        AttentionTrace {
            steps: traces.into_iter().next().unwrap(),
        }
    }

    pub fn end_token(&self) -> usize {
        self.special
    }

    pub fn class_count(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feat_dim
    }
}

/// Stack plain images into the `[B, 1, H, W]` layout the models consume.
pub fn image_batch(images: &[&Array2<f64>]) -> ArrayD<f64> {
    assert!(!images.is_empty());
    let (h, w) = images[0].dim();
    let mut out = Array3::<f64>::zeros((images.len(), h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    out.into_shape_with_order(IxDyn(&[images.len(), 1, h, w]))
        .unwrap()
}

/// All sub-models plus the optional local critic.
pub struct Models {
    pub cfg: ModelConfig,
    pub alphabet: Alphabet,
    pub style: StyleEncoder,
    pub content: ContentEncoder,
    pub gen: Generator,
    pub writer_cls: WriterClassifier,
    pub rec: Recognizer,
    pub disc: GlobalDiscriminator,
    pub critic: Option<PatchCritic>,
}

impl Models {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rngs = (0..7u64).map(|i| ChaCha12Rng::seed_from_u64(mix_seed(seed, 0x100 + i)));
        let style = StyleEncoder::new(&cfg, &mut rngs.next().unwrap());
        let content = ContentEncoder::new(&cfg, &mut rngs.next().unwrap());
        let gen = Generator::new(&cfg, &mut rngs.next().unwrap());
        let writer_cls = WriterClassifier::new(&cfg, &mut rngs.next().unwrap());
        let rec = Recognizer::new(&cfg, &mut rngs.next().unwrap());
        let disc = GlobalDiscriminator::new(&cfg, &mut rngs.next().unwrap());
        let mut critic_rng = rngs.next().unwrap();
        let critic = match cfg.critic_kind {
            CriticKind::None => None,
            CriticKind::Unconditional => Some(PatchCritic::unconditional(
                &mut critic_rng,
                cfg.height,
                cfg.critic_channels,
            )),
            CriticKind::Conditional => Some(PatchCritic::conditional(
                &mut critic_rng,
                cfg.height,
                cfg.critic_channels,
                cfg.alphabet_len,
            )),
        };
        Models {
            cfg,
            alphabet: Alphabet::latin(),
            style,
            content,
            gen,
            writer_cls,
            rec,
            disc,
            critic,
        }
    }

    fn check_image(&self, image: &Array2<f64>) -> Result<(), NetError> {
        let (h, w) = image.dim();
        if h != self.cfg.height || w != self.cfg.width {
            return Err(NetError::BadImageShape {
                got_h: h,
                got_w: w,
                want_h: self.cfg.height,
                want_w: self.cfg.width,
            });
        }
        Ok(())
    }

    /// Encode a style set of one writer into a [`StyleVector`].
    pub fn encode_style(&self, images: &[Array2<f64>]) -> Result<StyleVector, NetError> {
        if images.is_empty() {
            return Err(NetError::EmptyStyleSet);
        }
        for img in images {
            self.check_image(img)?;
        }
        let mut t = Tape::inference();
        let p = self.style.store.bind(&mut t);
        let refs: Vec<&Array2<f64>> = images.iter().collect();
        let x = t.leaf(image_batch(&refs));
        let s = self.style.encode(&mut t, &p, x, images.len());
        Ok(StyleVector {
            values: t.value(s).iter().cloned().collect(),
        })
    }

    /// Encode a word into its per-character and global content vectors.
    pub fn encode_content(&self, word: &str) -> Result<ContentEncoding, NetError> {
        let indices = self
            .alphabet
            .encode(word)
            .filter(|ix| (1..=MAX_WORD_LEN).contains(&ix.len()))
            .ok_or_else(|| NetError::InvalidWord(word.to_string()))?;
        let padded = self
            .content
            .pad_indices(&indices, self.alphabet.special_index());
        let mut t = Tape::inference();
        let p = self.content.store.bind(&mut t);
        let g1 = self.content.g1(&mut t, &p, &padded);
        let g2 = self.content.g2(&mut t, &p, g1, 1);
        let g1_arr = t
            .value(g1)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let g2_arrs = g2
            .iter()
            .map(|v| t.value(*v).iter().cloned().collect())
            .collect();
        Ok(ContentEncoding {
            g1: g1_arr,
            g2: g2_arrs,
            word: word.to_string(),
        })
    }

    /// Decode one word image from detached style and content encodings.
    pub fn generate_word(
        &self,
        style: &StyleVector,
        content: &ContentEncoding,
        rng: &mut ChaCha12Rng,
    ) -> Array2<f64> {
        let mut t = Tape::inference();
        let p = self.gen.store.bind(&mut t);
        let g1 = t.leaf(content.g1.clone().into_dyn());
        let s = t.leaf(
            style
                .values
                .clone()
                .into_shape_with_order(IxDyn(&[1, style.values.len()]))
                .unwrap(),
        );
        let noise_arr = sample_noise(rng, 1, self.cfg.noise_dim);
        let z = t.leaf(noise_arr);
        let g2: Vec<Var> = content
            .g2
            .iter()
            .map(|v| {
                t.leaf(
                    v.clone()
                        .into_shape_with_order(IxDyn(&[1, v.len()]))
                        .unwrap(),
                )
            })
            .collect();
        let img = self.gen.generate(&mut t, &p, &self.cfg, g1, s, z, &g2);
        t.value(img)
            .view()
            .into_shape_with_order((self.cfg.height, self.cfg.width))
            .unwrap()
            .to_owned()
    }

    /// Writer logits for one image.
    pub fn classify_writer(&self, image: &Array2<f64>) -> Result<Array1<f64>, NetError> {
        self.check_image(image)?;
        let mut t = Tape::inference();
        let p = self.writer_cls.store.bind(&mut t);
        let x = t.leaf(image_batch(&[image]));
        let logits = self.writer_cls.logits(&mut t, &p, x);
        Ok(t.value(logits).iter().cloned().collect())
    }

    /// Greedy recognition of one image.
    pub fn recognize(&self, image: &Array2<f64>) -> Result<RecognizerOutput, NetError> {
        self.check_image(image)?;
        Ok(self.rec.recognize_image(image))
    }

    /// Global realness score of one image.
    pub fn discriminate_global(&self, image: &Array2<f64>) -> Result<f64, NetError> {
        self.check_image(image)?;
        let mut t = Tape::inference();
        let p = self.disc.store.bind(&mut t);
        let x = t.leaf(image_batch(&[image]));
        let s = self.disc.score(&mut t, &p, x);
        Ok(t.value(s)[0])
    }

    /// Serialize all parameter stores (with optimizer state) to one archive.
    pub fn save(&self, path: &Path, config_hash: &str, step: u64) -> Result<(), NetError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CKPT_HEADER.as_bytes())?;
        w.write_all(b"\n")?;
        let cfg_json = serde_json::to_string(&self.cfg).expect("config serializes");
        write_block(&mut w, cfg_json.as_bytes())?;
        write_block(&mut w, config_hash.as_bytes())?;
        w.write_all(&step.to_le_bytes())?;
        for store in self.stores() {
            store.write_to(&mut w)?;
        }
        Ok(())
    }

    /// Restore models and step counter from an archive.
    pub fn load(path: &Path) -> Result<(Models, CheckpointMeta), NetError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header = vec![0u8; CKPT_HEADER.len() + 1];
        r.read_exact(&mut header)?;
        let header_str = String::from_utf8_lossy(&header[..CKPT_HEADER.len()]).into_owned();
        if header_str != CKPT_HEADER || header[CKPT_HEADER.len()] != b'\n' {
            return Err(NetError::BadHeader(header_str));
        }
        let cfg_json = read_block(&mut r)?;
        let cfg: ModelConfig = serde_json::from_slice(&cfg_json)
            .map_err(|e| NetError::Malformed(format!("config: {e}")))?;
        let hash = String::from_utf8(read_block(&mut r)?)
            .map_err(|e| NetError::Malformed(format!("hash: {e}")))?;
        let mut step_buf = [0u8; 8];
        r.read_exact(&mut step_buf)?;
        let step = u64::from_le_bytes(step_buf);
        let mut models = Models::new(cfg, 0);
        for store in models.stores_mut() {
            let loaded = ParamStore::read_from(&mut r)?;
            if !store.same_layout(&loaded) {
                return Err(NetError::Malformed(
                    "parameter layout does not match architecture".into(),
                ));
            }
            *store = loaded;
        }
        Ok((
            models,
            CheckpointMeta {
                config_hash: hash,
                step,
            },
        ))
    }

    fn stores(&self) -> Vec<&ParamStore> {
        let mut v = vec![
            &self.style.store,
            &self.content.store,
            &self.gen.store,
            &self.writer_cls.store,
            &self.rec.store,
            &self.disc.store,
        ];
        if let Some(c) = &self.critic {
            v.push(&c.store);
        }
        v
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = vec![
            &mut self.style.store,
            &mut self.content.store,
            &mut self.gen.store,
            &mut self.writer_cls.store,
            &mut self.rec.store,
            &mut self.disc.store,
        ];
        if let Some(c) = &mut self.critic {
            v.push(&mut c.store);
        }
        v
    }

    /// Bitwise snapshot of every parameter, for resume-equivalence checks.
    pub fn full_snapshot(&self) -> Vec<f64> {
        self.stores().iter().flat_map(|s| s.snapshot()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub step: u64,
}

pub fn sample_noise(rng: &mut ChaCha12Rng, batch: usize, dim: usize) -> ArrayD<f64> {
    use rand_distr::{Distribution, Normal};
    if dim == 0 {
        return ArrayD::zeros(IxDyn(&[batch, 0]));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    ArrayD::from_shape_fn(IxDyn(&[batch, dim]), |_| normal.sample(rng))
}

fn write_block(w: &mut impl Write, data: &[u8]) -> std::io::Result<()> {
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    w.write_all(data)
}

fn read_block(r: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf)?;
    let len = u64::from_le_bytes(len_buf) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Softmax of a plain logit vector.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - mx).exp());
    let s = out.sum();
    out.mapv_inplace(|v| v / s);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::smoke(3)
    }

    fn tiny_models() -> Models {
        Models::new(tiny_cfg(), 42)
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Array2<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn decoder_sizes_reach_canonical_resolution() {
        let cfg = ModelConfig::desk(2);
        let sizes = cfg.decoder_sizes();
        assert_eq!(sizes[4], (64, 216));
        assert_eq!(sizes[0], (4, 14));
        let cfg = tiny_cfg();
        assert_eq!(cfg.decoder_sizes()[4], (32, 108));
        assert_eq!(cfg.decoder_sizes()[0], (2, 7));
    }

    #[test]
    fn style_encoding_rejects_empty_and_is_order_invariant() {
        let m = tiny_models();
        assert!(matches!(m.encode_style(&[]), Err(NetError::EmptyStyleSet)));

        let imgs = vec![
            random_image(1, 32, 108),
            random_image(2, 32, 108),
            random_image(3, 32, 108),
        ];
        let fwd = m.encode_style(&imgs).unwrap();
        let rev: Vec<_> = imgs.iter().rev().cloned().collect();
        let bwd = m.encode_style(&rev).unwrap();
        assert_eq!(fwd.values, bwd.values, "style pooling must ignore order");
        assert_eq!(fwd.values.len(), m.cfg.style_dim);

        // repeated identical image: still well-defined
        let same = vec![imgs[0].clone(); 4];
        let v = m.encode_style(&same).unwrap();
        assert!(v.values.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn style_encoding_finite_on_all_background() {
        let m = tiny_models();
        let bg = Array2::<f64>::from_elem((32, 108), 1.0);
        let v = m.encode_style(&[bg.clone(), bg]).unwrap();
        assert!(v.values.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn content_encoding_pads_and_distinguishes_order() {
        let m = tiny_models();
        let e = m.encode_content("a").unwrap();
        assert_eq!(e.g1.nrows(), MAX_WORD_LEN);
        assert_eq!(e.g2.len(), 4);
        // rows beyond the word all equal the pad embedding
        for r in 1..MAX_WORD_LEN {
            assert_eq!(e.g1.row(r), e.g1.row(MAX_WORD_LEN - 1));
        }
        assert_ne!(e.g1.row(0), e.g1.row(1), "char and pad rows differ");

        let ab = m.encode_content("ab").unwrap();
        let ba = m.encode_content("ba").unwrap();
        assert_ne!(ab.g1, ba.g1);
        // determinism
        let ab2 = m.encode_content("ab").unwrap();
        assert_eq!(ab.g1, ab2.g1);
        assert_eq!(ab.g2, ab2.g2);

        assert!(matches!(
            m.encode_content("a!b"),
            Err(NetError::InvalidWord(_))
        ));
        assert!(matches!(
            m.encode_content("abcdefghijk"),
            Err(NetError::InvalidWord(_))
        ));
    }

    #[test]
    fn generated_images_have_canonical_shape_and_range() {
        let m = tiny_models();
        let style = m
            .encode_style(&[random_image(5, 32, 108), random_image(6, 32, 108)])
            .unwrap();
        let content = m.encode_content("move").unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let img = m.generate_word(&style, &content, &mut rng);
        assert_eq!(img.dim(), (32, 108));
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(img.iter().all(|v| v.is_finite()));

        // deterministic for equal rng state
        let mut r1 = ChaCha12Rng::seed_from_u64(8);
        let mut r2 = ChaCha12Rng::seed_from_u64(8);
        let a = m.generate_word(&style, &content, &mut r1);
        let b = m.generate_word(&style, &content, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn generator_output_responds_to_style_perturbation() {
        // finite-difference probe at a few style coordinates on an untrained net
        let m = tiny_models();
        let style = m
            .encode_style(&[random_image(9, 32, 108), random_image(10, 32, 108)])
            .unwrap();
        let content = m.encode_content("pen").unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let base = m.generate_word(&style, &content, &mut rng);
        for coord in [0usize, m.cfg.style_dim / 2, m.cfg.style_dim - 1] {
            let mut nudged = style.clone();
            nudged.values[coord] += 0.5;
            let mut rng = ChaCha12Rng::seed_from_u64(11);
            let out = m.generate_word(&nudged, &content, &mut rng);
            let delta: f64 = (&out - &base).mapv(f64::abs).sum();
            assert!(delta > 0.0, "style coord {coord} has no influence");
        }
    }

    #[test]
    fn writer_logits_shape_and_softmax() {
        let m = tiny_models();
        let img = random_image(12, 32, 108);
        let logits = m.classify_writer(&img).unwrap();
        assert_eq!(logits.len(), 3);
        let p = softmax(&logits);
        assert!((p.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn recognizer_attention_is_normalized_and_bounded() {
        let m = tiny_models();
        let img = random_image(13, 32, 108);
        let out = m.recognize(&img).unwrap();
        assert!(out.attention.is_valid(1e-5));
        assert!(out.logits.nrows() <= MAX_WORD_LEN + 1);
        assert!(out.logits.iter().all(|v| v.is_finite()));
        let geo = m.rec.latent_geometry(m.cfg.width);
        assert_eq!(geo.latent_width, 13);
        for row in &out.attention.steps {
            assert_eq!(row.len(), geo.latent_width);
        }
    }

    #[test]
    fn teacher_forced_attention_has_one_row_per_step() {
        let m = tiny_models();
        let img = random_image(14, 32, 108);
        let target = m.alphabet.encode("pen").unwrap();
        let trace = m.rec.attention_for(&img, &target);
        assert_eq!(trace.steps.len(), 4); // 3 chars + end token
        assert!(trace.is_valid(1e-5));
    }

    #[test]
    fn global_score_is_scalar_and_deterministic() {
        let m = tiny_models();
        let img = random_image(15, 32, 108);
        let a = m.discriminate_global(&img).unwrap();
        let b = m.discriminate_global(&img).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, b);
    }

    #[test]
    fn backbone_locality_respects_receptive_field() {
        // perturbing image columns [x1, x2] may only change latent columns
        // within [x1/f - r, x2/f + r]
        let m = tiny_models();
        let img = random_image(16, 32, 108);
        let geo = m.rec.latent_geometry(m.cfg.width);
        let latent = |img: &Array2<f64>| -> Array2<f64> {
            let mut t = Tape::inference();
            let p = m.rec.store.bind(&mut t);
            let x = t.leaf(image_batch(&[img]));
            let cols = m.rec.latent_columns(&mut t, &p, x);
            let shape = t.shape(cols).to_vec();
            t.value(cols)
                .view()
                .into_shape_with_order((shape[1], shape[2]))
                .unwrap()
                .to_owned()
        };
        let base = latent(&img);
        let (x1, x2) = (48usize, 56usize);
        let mut perturbed = img.clone();
        perturbed
            .slice_mut(ndarray::s![.., x1..=x2])
            .mapv_inplace(|v| 1.0 - v);
        let after = latent(&perturbed);
        let f = geo.downsample_factor();
        let r = (LatentGeometry::receptive_radius() as f64 / f).ceil() as isize;
        let lo = (x1 as f64 / f).floor() as isize - r;
        let hi = (x2 as f64 / f).ceil() as isize + r;
        for col in 0..base.nrows() {
            let changed = base.row(col) != after.row(col);
            let inside = (col as isize) >= lo && (col as isize) <= hi;
            if changed {
                assert!(
                    inside,
                    "latent column {col} changed outside [{lo}, {hi}]"
                );
            }
        }
        // sanity: something inside the window did change
        assert_ne!(base, after);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_and_validates_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Models::new(tiny_cfg().with_critic(CriticKind::Conditional), 77);
        m.save(&path, "deadbeef", 123).unwrap();
        let (loaded, meta) = Models::load(&path).unwrap();
        assert_eq!(meta.config_hash, "deadbeef");
        assert_eq!(meta.step, 123);
        assert_eq!(loaded.cfg, m.cfg);
        assert_eq!(loaded.full_snapshot(), m.full_snapshot());

        // corrupt the header
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Models::load(&path), Err(NetError::BadHeader(_))));
    }

    #[test]
    fn forward_passes_are_nan_free_on_random_input() {
        let m = tiny_models();
        let img = random_image(17, 32, 108);
        assert!(m.discriminate_global(&img).unwrap().is_finite());
        assert!(m
            .classify_writer(&img)
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
        let out = m.recognize(&img).unwrap();
        assert!(out.logits.iter().all(|v| v.is_finite()));
    }
}
