//! Local patch critics and the geometry that feeds them.
//!
//! Three pipelines produce square height-by-height patches from a word image:
//! a sliding window with half-height step, windows centered on characters via
//! the recognizer's up-sampled attention, and the latter plus a character
//! label injected into the critic. The critic itself is a small stride-2
//! convolution stack whose receptive field (70x70 for the default kernel-4
//! layout) covers the whole patch, applied to extracted patches only rather
//! than convolved across the image.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::corpus::Alphabet;
use crate::nets::AttentionTrace;
use crate::nn::{Bound, Conv2d, Embedding, ParamStore};

/// Dimension of the character latent injected into the conditional critic.
pub const CHAR_EMBED_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("image width {width} is narrower than patch size {patch}")]
    TooNarrow { width: usize, patch: usize },
    #[error("attention input is empty")]
    EmptyAttention,
    #[error("attention weights are all NaN")]
    AllNaN,
    #[error("transcription is empty")]
    EmptyTranscription,
    #[error("transcription has {chars} characters but attention has {steps} steps")]
    NotEnoughSteps { chars: usize, steps: usize },
    #[error("character {0:?} is not in the alphabet")]
    UnknownChar(char),
    #[error("character index {index} out of range for alphabet size {size}")]
    CharIndexOutOfRange { index: usize, size: usize },
    #[error("step {step} out of range for content of length {len}")]
    StepOutOfRange { step: usize, len: usize },
    #[error("expected a {expected}x{expected} patch, got {got_h}x{got_w}")]
    BadPatchShape {
        expected: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("conditional embedding must have length {expected}, got {got}")]
    BadEmbeddingLength { expected: usize, got: usize },
    #[error("patch set is empty")]
    EmptyPatchSet,
    #[error("patch is missing a character label")]
    MissingLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchSource {
    Real,
    Fake,
}

/// A square crop with its center column and, for the character-conditioned
/// pipelines, the alphabet index of the character it covers.
#[derive(Clone, Debug)]
pub struct Patch {
    pub pixels: Array2<f64>,
    pub center_x: usize,
    pub label: Option<usize>,
    pub source: PatchSource,
}

#[derive(Clone, Debug)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub origin: String,
}

/// Left edges of the sliding-window extraction: multiples of `h/2` while a
/// full patch fits, plus a final flush-right window when the last stride
/// would not land exactly on `w - h`.
pub fn naive_patch_offsets(h: usize, w: usize) -> Result<Vec<usize>, PatchError> {
    if w < h {
        return Err(PatchError::TooNarrow { width: w, patch: h });
    }
    let step = (h / 2).max(1);
    let mut offsets: Vec<usize> = Vec::new();
    let mut x = 0;
    while x + h <= w {
        offsets.push(x);
        x += step;
    }
    let last = w - h;
    if *offsets.last().expect("at least x=0 fits") != last {
        offsets.push(last);
    }
    Ok(offsets)
}

/// Sliding-window patches over a canonical image.
pub fn extract_naive_patches(image: &Array2<f64>, origin: &str) -> Result<PatchSet, PatchError> {
    let (h, w) = image.dim();
    let offsets = naive_patch_offsets(h, w)?;
    let patches = offsets
        .iter()
        .map(|&x| Patch {
            pixels: image.slice(ndarray::s![.., x..x + h]).to_owned(),
            center_x: x + h / 2,
            label: None,
            source: PatchSource::Real,
        })
        .collect();
    Ok(PatchSet {
        patches,
        origin: origin.to_string(),
    })
}

/// Linear interpolation of a latent-width attention row onto `w` pixel
/// positions, aligning the first and last latent cells with the image edges.
pub fn upsample_attention(step_weights: &[f64], w: usize) -> Result<Vec<f64>, PatchError> {
    let t = step_weights.len();
    if t == 0 || w == 0 {
        return Err(PatchError::EmptyAttention);
    }
    if t == 1 {
        return Ok(vec![step_weights[0]; w]);
    }
    let mut out = Vec::with_capacity(w);
    for x in 0..w {
        let pos = if w == 1 {
            0.0
        } else {
            x as f64 * (t - 1) as f64 / (w - 1) as f64
        };
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(t - 1);
        let frac = pos - i0 as f64;
        out.push(step_weights[i0] * (1.0 - frac) + step_weights[i1] * frac);
    }
    Ok(out)
}

/// Argmax over the up-sampled attention; ties break toward the smallest index.
pub fn locate_center(upsampled: &[f64]) -> Result<usize, PatchError> {
    if upsampled.is_empty() {
        return Err(PatchError::EmptyAttention);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in upsampled.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i).ok_or(PatchError::AllNaN)
}

/// A full patch window around `center`: shifted, never truncated, to stay
/// inside `[0, w]`.
pub fn window_for_center(center: usize, h: usize, w: usize) -> (usize, usize) {
    let half = h / 2;
    let start = center.saturating_sub(half).min(w - h);
    (start, start + h)
}

/// Per-character patch windows from an attention trace: one `(start, center)`
/// per transcription character, end-token steps producing none.
pub fn centered_windows(
    attention: &AttentionTrace,
    n_chars: usize,
    h: usize,
    w: usize,
) -> Result<Vec<(usize, usize)>, PatchError> {
    if n_chars == 0 {
        return Err(PatchError::EmptyTranscription);
    }
    if w < h {
        return Err(PatchError::TooNarrow { width: w, patch: h });
    }
    if attention.steps.len() < n_chars {
        return Err(PatchError::NotEnoughSteps {
            chars: n_chars,
            steps: attention.steps.len(),
        });
    }
    let mut out = Vec::with_capacity(n_chars);
    for t in 0..n_chars {
        let up = upsample_attention(attention.steps[t].as_slice().unwrap(), w)?;
        let center = locate_center(&up)?;
        let (start, _) = window_for_center(center, h, w);
        out.push((start, center));
    }
    Ok(out)
}

/// Character-centered, labeled patches for one image and transcription.
pub fn extract_centered_patches(
    image: &Array2<f64>,
    attention: &AttentionTrace,
    transcription: &str,
    alphabet: &Alphabet,
    source: PatchSource,
    origin: &str,
) -> Result<PatchSet, PatchError> {
    let (h, w) = image.dim();
    let chars: Vec<char> = transcription.chars().collect();
    let windows = centered_windows(attention, chars.len(), h, w)?;
    let mut patches = Vec::with_capacity(chars.len());
    for (t, (start, center)) in windows.iter().enumerate() {
        let label = alphabet
            .index_of(chars[t])
            .ok_or(PatchError::UnknownChar(chars[t]))?;
        patches.push(Patch {
            pixels: image.slice(ndarray::s![.., *start..start + h]).to_owned(),
            center_x: *center,
            label: Some(label),
            source,
        });
    }
    Ok(PatchSet {
        patches,
        origin: origin.to_string(),
    })
}

/// Label for a fake patch at decoding step `t`: the character the content
/// string says belongs there, never the recognizer's prediction.
pub fn label_for_fake(content: &str, t: usize, alphabet: &Alphabet) -> Result<usize, PatchError> {
    let chars: Vec<char> = content.chars().collect();
    if t >= chars.len() {
        return Err(PatchError::StepOutOfRange {
            step: t,
            len: chars.len(),
        });
    }
    alphabet
        .index_of(chars[t])
        .ok_or(PatchError::UnknownChar(chars[t]))
}

/// Receptive field of a stack of `(kernel, stride)` convolutions.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    let mut rf = 1usize;
    for &(k, s) in layers.iter().rev() {
        rf = (rf - 1) * s + k;
    }
    rf
}

/// Convolutional patch critic. All variants share the same kernel-4 stack
/// (strides 2,2,2,1,1); the conditional variant widens the final layer input
/// by [`CHAR_EMBED_DIM`] channels fed from a character embedding.
pub struct PatchCritic {
    pub store: ParamStore,
    convs: Vec<Conv2d>,
    final_conv: Conv2d,
    char_embed: Option<Embedding>,
    channels: [usize; 4],
    patch_size: usize,
    alphabet_len: usize,
}

impl PatchCritic {
    pub fn unconditional(
        rng: &mut ChaCha12Rng,
        patch_size: usize,
        channels: [usize; 4],
    ) -> Self {
        Self::build(rng, patch_size, channels, None)
    }

    pub fn conditional(
        rng: &mut ChaCha12Rng,
        patch_size: usize,
        channels: [usize; 4],
        alphabet_len: usize,
    ) -> Self {
        Self::build(rng, patch_size, channels, Some(alphabet_len))
    }

    fn build(
        rng: &mut ChaCha12Rng,
        patch_size: usize,
        channels: [usize; 4],
        conditional: Option<usize>,
    ) -> Self {
        let mut store = ParamStore::new();
        let [c1, c2, c3, c4] = channels;
        let convs = vec![
            Conv2d::new(&mut store, rng, "critic.conv1", 1, c1, 4, 2, 1),
            Conv2d::new(&mut store, rng, "critic.conv2", c1, c2, 4, 2, 1),
            Conv2d::new(&mut store, rng, "critic.conv3", c2, c3, 4, 2, 1),
            Conv2d::new(&mut store, rng, "critic.conv4", c3, c4, 4, 1, 1),
        ];
        let final_in = c4 + if conditional.is_some() { CHAR_EMBED_DIM } else { 0 };
        let final_conv = Conv2d::new(&mut store, rng, "critic.final", final_in, 1, 4, 1, 1);
        let char_embed = conditional.map(|a| {
            Embedding::new(&mut store, rng, "critic.char_embed", a, CHAR_EMBED_DIM)
        });
        PatchCritic {
            store,
            convs,
            final_conv,
            char_embed,
            channels,
            patch_size,
            alphabet_len: conditional.unwrap_or(0),
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.char_embed.is_some()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Kernel/stride stack used by every variant.
    pub fn layer_geometry(&self) -> Vec<(usize, usize)> {
        vec![(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)]
    }

    /// Analytic receptive field of one output cell of the final layer.
    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.layer_geometry())
    }

    pub fn penultimate_channels(&self) -> usize {
        self.channels[3]
    }

    pub fn final_in_channels(&self) -> usize {
        self.channels[3] + if self.is_conditional() { CHAR_EMBED_DIM } else { 0 }
    }

    fn backbone(&self, t: &mut Tape, p: &Bound, patches: Var) -> Var {
        let mut x = patches;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(t, p, x);
            if i > 0 {
                x = t.instance_norm(x, 1e-5);
            }
            x = t.leaky_relu(x, 0.2);
        }
        x
    }

    /// Scores `[P]` for a stack of patches `[P, 1, h, h]`.
    pub fn score(&self, t: &mut Tape, p: &Bound, patches: Var) -> Var {
        assert!(!self.is_conditional(), "conditional critic needs labels");
        let feats = self.backbone(t, p, patches);
        let map = self.final_conv.forward(t, p, feats);
        let pooled = t.spatial_mean(map);
        let n = t.shape(pooled)[0];
        t.reshape(pooled, &[n])
    }

    /// Scores `[P]` for labeled patches; the label embedding is broadcast to
    /// the penultimate feature-map resolution and appended as channels.
    pub fn score_conditional(
        &self,
        t: &mut Tape,
        p: &Bound,
        patches: Var,
        labels: &[usize],
    ) -> Var {
        let embed = self
            .char_embed
            .as_ref()
            .expect("unconditional critic cannot take labels");
        let emb = embed.forward(t, p, labels); // [P, 8]
        self.score_with_embedding_var(t, p, patches, emb)
    }

    fn score_with_embedding_var(&self, t: &mut Tape, p: &Bound, patches: Var, emb: Var) -> Var {
        let feats = self.backbone(t, p, patches);
        let fs = t.shape(feats).to_vec();
        let (n, fh, fw) = (fs[0], fs[2], fs[3]);
        // broadcast [P, 8] -> [P, 8, fh, fw]
        let emb4 = t.reshape(emb, &[n, CHAR_EMBED_DIM, 1, 1]);
        let tiled = t.upsample_nearest(emb4, fh, fw);
        let stacked = t.concat(1, &[feats, tiled]);
        let map = self.final_conv.forward(t, p, stacked);
        let pooled = t.spatial_mean(map);
        t.reshape(pooled, &[n])
    }

    fn check_patch(&self, patch: &Array2<f64>) -> Result<(), PatchError> {
        let (h, w) = patch.dim();
        if h != self.patch_size || w != self.patch_size {
            return Err(PatchError::BadPatchShape {
                expected: self.patch_size,
                got_h: h,
                got_w: w,
            });
        }
        Ok(())
    }

    /// Realness score of a single patch, outside any training graph.
    pub fn discriminate_patch(&self, patch: &Array2<f64>) -> Result<f64, PatchError> {
        self.check_patch(patch)?;
        let mut t = Tape::inference();
        let p = self.store.bind(&mut t);
        let x = t.leaf(patch_to_batch(&[patch]));
        let s = self.score(&mut t, &p, x);
        Ok(t.value(s)[0])
    }

    /// Realness score of a single patch conditioned on a raw 8-dim embedding.
    pub fn discriminate_patch_conditional(
        &self,
        patch: &Array2<f64>,
        embedding: &[f64],
    ) -> Result<f64, PatchError> {
        self.check_patch(patch)?;
        if embedding.len() != CHAR_EMBED_DIM {
            return Err(PatchError::BadEmbeddingLength {
                expected: CHAR_EMBED_DIM,
                got: embedding.len(),
            });
        }
        assert!(self.is_conditional(), "critic built without label pathway");
        let mut t = Tape::inference();
        let p = self.store.bind(&mut t);
        let x = t.leaf(patch_to_batch(&[patch]));
        let e = t.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, CHAR_EMBED_DIM]), embedding.to_vec()).unwrap(),
        );
        let s = self.score_with_embedding_var(&mut t, &p, x, e);
        Ok(t.value(s)[0])
    }

    /// Zero the label pathway (embedding table plus the final-conv channels
    /// that read it) so conditional scores cannot depend on the label.
    /// Test support for the Eq. 4 -> Eq. 3 reduction.
    #[cfg(test)]
    pub(crate) fn zero_label_pathway(&mut self) {
        let embed = self.char_embed.as_ref().expect("conditional critic");
        let table_shape = self.store.value(embed.table).raw_dim();
        let table = embed.table;
        self.store.set_value(table, ArrayD::zeros(table_shape));
        let w_id = self.final_conv.w;
        let mut w = self.store.value(w_id).clone();
        let c4 = self.channels[3];
        w.slice_axis_mut(Axis(1), ndarray::Slice::from(c4..))
            .fill(0.0);
        self.store.set_value(w_id, w);
    }

    /// Row `char_index` of the character embedding table.
    pub fn embed_character(&self, char_index: usize) -> Result<Vec<f64>, PatchError> {
        let embed = self.char_embed.as_ref().expect("unconditional critic");
        if char_index >= self.alphabet_len {
            return Err(PatchError::CharIndexOutOfRange {
                index: char_index,
                size: self.alphabet_len,
            });
        }
        let table = self.store.value(embed.table);
        Ok(table
            .index_axis(Axis(0), char_index)
            .iter()
            .cloned()
            .collect())
    }
}

/// Stack plain patches into the `[P, 1, h, h]` layout the critic consumes.
pub fn patch_to_batch(patches: &[&Array2<f64>]) -> ArrayD<f64> {
    assert!(!patches.is_empty());
    let (h, w) = patches[0].dim();
    let mut out = Array3::<f64>::zeros((patches.len(), h, w));
    for (i, p) in patches.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(p);
    }
    out.into_shape_with_order(IxDyn(&[patches.len(), 1, h, w]))
        .unwrap()
}

/// Debug dump: one PNG per patch named `<imageid>_<t>_<char>.png` plus a JSON
/// sidecar with centers and labels.
pub fn dump_patch_set(
    dir: &std::path::Path,
    set: &PatchSet,
    alphabet: &Alphabet,
) -> std::io::Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut sidecar = Vec::new();
    for (t, patch) in set.patches.iter().enumerate() {
        let ch = patch
            .label
            .and_then(|l| alphabet.symbol(l))
            .map(|c| c.to_string())
            .unwrap_or_else(|| "none".to_string());
        let name = format!("{}_{}_{}.png", set.origin, t, ch);
        crate::corpus::save_png_gray(&dir.join(&name), &patch.pixels)?;
        sidecar.push(serde_json::json!({
            "file": name,
            "step": t,
            "center_x": patch.center_x,
            "label": patch.label,
            "char": patch.label.and_then(|l| alphabet.symbol(l)),
            "source": match patch.source { PatchSource::Real => "real", PatchSource::Fake => "fake" },
        }));
        files.push(dir.join(&name).display().to_string());
    }
    let json = serde_json::json!({ "origin": set.origin, "patches": sidecar });
    std::fs::write(
        dir.join(format!("{}_patches.json", set.origin)),
        serde_json::to_string_pretty(&json)?,
    )?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};

    /// Independent enumeration of valid offsets: the set
    /// `{x : x = i*(h/2), x + h <= w}` united with `{w - h}`.
    fn oracle_offsets(h: usize, w: usize) -> Vec<usize> {
        let step = (h / 2).max(1);
        let mut set: Vec<usize> = (0..)
            .map(|i| i * step)
            .take_while(|&x| x + h <= w)
            .collect();
        if !set.contains(&(w - h)) {
            set.push(w - h);
        }
        set.sort_unstable();
        set
    }

    #[test]
    fn naive_offsets_match_brute_force_for_default_geometry() {
        // h=64, w=216: arithmetic offsets 0,32,64,96,128 plus flush-right 152
        let offs = naive_patch_offsets(64, 216).unwrap();
        assert_eq!(offs, vec![0, 32, 64, 96, 128, 152]);
        assert_eq!(offs, oracle_offsets(64, 216));
    }

    #[test]
    fn naive_offsets_boundary_cases() {
        assert_eq!(naive_patch_offsets(64, 64).unwrap(), vec![0]);
        assert!(matches!(
            naive_patch_offsets(64, 63),
            Err(PatchError::TooNarrow { .. })
        ));
        // exact multiple: no duplicate flush-right patch
        assert_eq!(naive_patch_offsets(8, 16).unwrap(), vec![0, 4, 8]);
    }

    #[test]
    fn naive_offsets_match_oracle_over_random_sizes() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..300 {
            let h = 2 * rng.gen_range(1..=64usize);
            let w = rng.gen_range(h..=h + 400);
            let got = naive_patch_offsets(h, w).unwrap();
            assert_eq!(got, oracle_offsets(h, w), "mismatch at h={h} w={w}");
        }
    }

    #[test]
    fn extracted_pixels_equal_source_subrectangles() {
        let mut rng = ChaCha12Rng::seed_from_u64(78);
        let image = Array2::from_shape_fn((32, 108), |_| rng.gen_range(0.0..1.0));
        let set = extract_naive_patches(&image, "img").unwrap();
        let offsets = naive_patch_offsets(32, 108).unwrap();
        assert_eq!(set.patches.len(), offsets.len());
        for (patch, &x) in set.patches.iter().zip(&offsets) {
            assert_eq!(patch.pixels, image.slice(ndarray::s![.., x..x + 32]).to_owned());
            assert_eq!(patch.center_x, x + 16);
            assert!(patch.label.is_none());
        }
    }

    #[test]
    fn all_zero_image_gives_all_zero_patches() {
        let image = Array2::<f64>::zeros((16, 40));
        let set = extract_naive_patches(&image, "z").unwrap();
        for p in &set.patches {
            assert!(p.pixels.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn upsample_preserves_constants_and_nonnegativity() {
        let uniform = vec![0.25; 13];
        let up = upsample_attention(&uniform, 108).unwrap();
        assert!(up.iter().all(|&v| (v - 0.25).abs() < 1e-12));

        let mut rng = ChaCha12Rng::seed_from_u64(79);
        let w: Vec<f64> = (0..27).map(|_| rng.gen_range(0.0..1.0)).collect();
        let up = upsample_attention(&w, 216).unwrap();
        assert!(up.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn upsample_delta_peaks_at_closed_form_position() {
        let (t, w) = (27usize, 216usize);
        for i in 0..t {
            let mut delta = vec![0.0; t];
            delta[i] = 1.0;
            let up = upsample_attention(&delta, w).unwrap();
            let center = locate_center(&up).unwrap();
            let expected = (i as f64 * (w - 1) as f64 / (t - 1) as f64).round() as usize;
            assert!(
                (center as isize - expected as isize).abs() <= 1,
                "delta at {i}: center {center} vs closed form {expected}"
            );
        }
    }

    #[test]
    fn upsample_is_linear() {
        let mut rng = ChaCha12Rng::seed_from_u64(80);
        for _ in 0..50 {
            let t = rng.gen_range(2..40usize);
            let w = rng.gen_range(t..400usize);
            let u: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let mixed: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            let up_mixed = upsample_attention(&mixed, w).unwrap();
            let up_u = upsample_attention(&u, w).unwrap();
            let up_v = upsample_attention(&v, w).unwrap();
            for x in 0..w {
                assert!((up_mixed[x] - (a * up_u[x] + b * up_v[x])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn locate_center_argmax_and_ties() {
        let mut v = vec![0.0; 120];
        v[100] = 0.9;
        assert_eq!(locate_center(&v).unwrap(), 100);

        let mut v = vec![0.0; 120];
        v[50] = 0.7;
        v[80] = 0.7;
        assert_eq!(locate_center(&v).unwrap(), 50, "ties break low");

        let mut rng = ChaCha12Rng::seed_from_u64(81);
        for _ in 0..200 {
            let v: Vec<f64> = (0..rng.gen_range(1..300usize))
                .map(|_| rng.gen_range(-5.0..5.0))
                .collect();
            // exhaustive scan oracle
            let mut best = 0;
            for i in 1..v.len() {
                if v[i] > v[best] {
                    best = i;
                }
            }
            assert_eq!(locate_center(&v).unwrap(), best);
        }
    }

    #[test]
    fn locate_center_monotone_in_latent_index() {
        let (t, w) = (27usize, 216usize);
        let mut prev = 0usize;
        for i in 0..t {
            let mut delta = vec![0.0; t];
            delta[i] = 1.0;
            let up = upsample_attention(&delta, w).unwrap();
            let c = locate_center(&up).unwrap();
            assert!(c >= prev, "localization regressed at latent {i}");
            prev = c;
        }
    }

    #[test]
    fn locate_center_rejects_all_nan() {
        assert!(matches!(
            locate_center(&[f64::NAN, f64::NAN]),
            Err(PatchError::AllNaN)
        ));
        // a partial NaN still resolves to the finite maximum
        assert_eq!(locate_center(&[f64::NAN, 1.0, 0.5]).unwrap(), 1);
    }

    fn trace_from_rows(rows: Vec<Vec<f64>>) -> AttentionTrace {
        AttentionTrace {
            steps: rows.into_iter().map(Array1::from_vec).collect(),
        }
    }

    #[test]
    fn centered_windows_clamp_at_edges() {
        // delta at the left edge of the latent axis: window pinned to [0, h)
        let mut row = vec![0.0; 13];
        row[0] = 1.0;
        let trace = trace_from_rows(vec![row]);
        let windows = centered_windows(&trace, 1, 32, 108).unwrap();
        assert_eq!(windows[0].0, 0);

        // delta at the right edge: window shifted, not truncated
        let mut row = vec![0.0; 13];
        row[12] = 1.0;
        let trace = trace_from_rows(vec![row]);
        let windows = centered_windows(&trace, 1, 32, 108).unwrap();
        assert_eq!(windows[0].0, 108 - 32);
    }

    #[test]
    fn centered_patches_one_labeled_patch_per_character() {
        let alphabet = Alphabet::latin();
        let image = Array2::<f64>::from_elem((32, 108), 0.5);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|t| {
                let mut r = vec![0.0; 13];
                r[2 * t.min(6)] = 1.0;
                r
            })
            .collect();
        let trace = trace_from_rows(rows);
        let set =
            extract_centered_patches(&image, &trace, "hello", &alphabet, PatchSource::Fake, "x")
                .unwrap();
        assert_eq!(set.patches.len(), 5);
        for (p, c) in set.patches.iter().zip("hello".chars()) {
            assert_eq!(p.label, Some(alphabet.index_of(c).unwrap()));
            assert_eq!(p.pixels.dim(), (32, 32));
        }
    }

    #[test]
    fn centered_patches_land_near_synthetic_peaks() {
        let alphabet = Alphabet::latin();
        let image = Array2::<f64>::from_elem((32, 108), 1.0);
        // peaks at known pixel centers, mapped back onto the latent axis
        let (t, w) = (13usize, 108usize);
        let pixel_targets = [20usize, 54, 90];
        let rows: Vec<Vec<f64>> = pixel_targets
            .iter()
            .map(|&px| {
                let mut r = vec![0.0; t];
                let exact = px as f64 * (t - 1) as f64 / (w - 1) as f64;
                let i0 = exact.floor() as usize;
                let frac = exact - i0 as f64;
                r[i0] = 1.0 - frac;
                if i0 + 1 < t {
                    r[i0 + 1] = frac;
                }
                r
            })
            .collect();
        let trace = trace_from_rows(rows);
        let set =
            extract_centered_patches(&image, &trace, "abc", &alphabet, PatchSource::Real, "y")
                .unwrap();
        for (p, &target) in set.patches.iter().zip(&pixel_targets) {
            let err = (p.center_x as isize - target as isize).abs();
            assert!(err <= 2, "center {} vs peak {target}", p.center_x);
        }
    }

    #[test]
    fn centered_patches_reject_degenerate_input() {
        let alphabet = Alphabet::latin();
        let image = Array2::<f64>::zeros((32, 108));
        let trace = trace_from_rows(vec![vec![1.0; 13]]);
        assert!(matches!(
            extract_centered_patches(&image, &trace, "", &alphabet, PatchSource::Real, "e"),
            Err(PatchError::EmptyTranscription)
        ));
        assert!(matches!(
            extract_centered_patches(&image, &trace, "ab", &alphabet, PatchSource::Real, "e"),
            Err(PatchError::NotEnoughSteps { .. })
        ));
    }

    #[test]
    fn label_for_fake_comes_from_content() {
        let alphabet = Alphabet::latin();
        assert_eq!(
            label_for_fake("Hue", 1, &alphabet).unwrap(),
            alphabet.index_of('u').unwrap()
        );
        for (t, c) in "Hue".chars().enumerate() {
            assert_eq!(
                label_for_fake("Hue", t, &alphabet).unwrap(),
                alphabet.index_of(c).unwrap()
            );
        }
        assert!(matches!(
            label_for_fake("Hue", 3, &alphabet),
            Err(PatchError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn receptive_field_of_default_stack_is_70() {
        let critic = PatchCritic::unconditional(
            &mut ChaCha12Rng::seed_from_u64(1),
            64,
            [8, 16, 32, 32],
        );
        assert_eq!(critic.receptive_field(), 70);
        assert_eq!(receptive_field(&[(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)]), 70);
    }

    #[test]
    fn critic_scores_are_deterministic_and_finite_on_degenerate_patches() {
        let critic = PatchCritic::unconditional(
            &mut ChaCha12Rng::seed_from_u64(2),
            32,
            [4, 8, 16, 16],
        );
        let ink = Array2::<f64>::zeros((32, 32));
        let bg = Array2::<f64>::from_elem((32, 32), 1.0);
        let s_ink = critic.discriminate_patch(&ink).unwrap();
        let s_bg = critic.discriminate_patch(&bg).unwrap();
        assert!(s_ink.is_finite() && s_bg.is_finite());
        assert_eq!(s_ink, critic.discriminate_patch(&ink).unwrap());

        let bad = Array2::<f64>::zeros((16, 32));
        assert!(matches!(
            critic.discriminate_patch(&bad),
            Err(PatchError::BadPatchShape { .. })
        ));
    }

    #[test]
    fn every_patch_pixel_influences_the_score() {
        // gradient probe on an untrained critic at the default 64x64 patch
        let critic = PatchCritic::unconditional(
            &mut ChaCha12Rng::seed_from_u64(3),
            64,
            [4, 8, 16, 16],
        );
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let patch = Array2::from_shape_fn((64, 64), |_| rng.gen_range(0.0..1.0));
        let mut t = Tape::new();
        let p = critic.store.bind(&mut t);
        let x = t.leaf(patch_to_batch(&[&patch]));
        let s = critic.score(&mut t, &p, x);
        let root = t.sum_all(s);
        let g = t.backward(root);
        let gx = g.get(x).unwrap();
        let zero_pixels = gx.iter().filter(|v| **v == 0.0).count();
        assert_eq!(zero_pixels, 0, "{zero_pixels} pixels have zero gradient");
    }

    #[test]
    fn conditional_critic_is_label_sensitive() {
        let alphabet = Alphabet::latin();
        let critic = PatchCritic::conditional(
            &mut ChaCha12Rng::seed_from_u64(5),
            32,
            [4, 8, 16, 16],
            alphabet.len(),
        );
        assert_eq!(
            critic.final_in_channels(),
            critic.penultimate_channels() + CHAR_EMBED_DIM
        );
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let patch = Array2::from_shape_fn((32, 32), |_| rng.gen_range(0.0..1.0));
        let ea = critic.embed_character(0).unwrap();
        let eb = critic.embed_character(1).unwrap();
        assert_eq!(ea.len(), CHAR_EMBED_DIM);
        assert_ne!(ea, eb, "embedding rows must initialize distinct");
        let sa = critic.discriminate_patch_conditional(&patch, &ea).unwrap();
        let sb = critic.discriminate_patch_conditional(&patch, &eb).unwrap();
        assert!((sa - sb).abs() > 0.0, "labels must influence the score");
        // identical label and patch: identical score
        let sa2 = critic.discriminate_patch_conditional(&patch, &ea).unwrap();
        assert_eq!(sa, sa2);
        // zero embedding is a valid input
        let zero = vec![0.0; CHAR_EMBED_DIM];
        assert!(critic
            .discriminate_patch_conditional(&patch, &zero)
            .unwrap()
            .is_finite());
        // wrong length rejected
        assert!(matches!(
            critic.discriminate_patch_conditional(&patch, &[0.0; 4]),
            Err(PatchError::BadEmbeddingLength { .. })
        ));
        assert!(matches!(
            critic.embed_character(alphabet.len()),
            Err(PatchError::CharIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn gradient_reaches_embedding_row_under_conditional_score() {
        let critic = PatchCritic::conditional(
            &mut ChaCha12Rng::seed_from_u64(7),
            32,
            [4, 8, 16, 16],
            52,
        );
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let patch = Array2::from_shape_fn((32, 32), |_| rng.gen_range(0.0..1.0));
        let mut t = Tape::new();
        let p = critic.store.bind(&mut t);
        let x = t.leaf(patch_to_batch(&[&patch]));
        let s = critic.score_conditional(&mut t, &p, x, &[17]);
        let root = t.sum_all(s);
        let g = t.backward(root);
        let table_var = p.var(critic.char_embed.as_ref().unwrap().table);
        let gt = g.get(table_var).expect("no grad on embedding table");
        let row17: f64 = gt.index_axis(Axis(0), 17).iter().map(|v| v.abs()).sum();
        let row3: f64 = gt.index_axis(Axis(0), 3).iter().map(|v| v.abs()).sum();
        assert!(row17 > 0.0, "used label row receives gradient");
        assert_eq!(row3, 0.0, "unused label rows receive none");
    }
}
