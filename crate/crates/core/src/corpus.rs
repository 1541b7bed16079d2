//! Word-corpus ingestion: index parsing, filtering, preprocessing to the
//! canonical image size, writer grouping and deterministic batch serving.
//!
//! On-disk layout: `<root>/images/<id>.png` plus `<root>/index.tsv` with
//! tab-separated columns `id`, `writer_id`, `transcription`. A split file
//! lists sample ids under `train:` / `test:` section headers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Longest transcription the models accept.
pub const MAX_WORD_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("alphabet contains duplicate symbol {0:?}")]
    DuplicateSymbol(char),
    #[error("alphabet symbol {0:?} is not a Latin letter")]
    NonLatinSymbol(char),
    #[error("missing index file {0}")]
    MissingIndex(String),
    #[error("malformed index line {0}: expected id<TAB>writer<TAB>transcription")]
    MalformedIndex(usize),
    #[error("malformed split file: {0}")]
    MalformedSplit(String),
    #[error("split is empty after filtering")]
    EmptySplit,
    #[error("style set size k must be >= 1")]
    EmptyStyleSet,
    #[error("writer group is empty")]
    EmptyGroup,
    #[error("batch size {requested} exceeds corpus size {available}")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("batch size must be >= 1")]
    ZeroBatch,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered set of permitted characters with a dense index mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    /// Case-sensitive Latin letters, `a..z` then `A..Z`.
    pub fn latin() -> Self {
        let mut symbols: Vec<char> = ('a'..='z').collect();
        symbols.extend('A'..='Z');
        Alphabet { symbols }
    }

    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self, CorpusError> {
        let mut seen = Vec::new();
        for c in symbols {
            if !c.is_ascii_alphabetic() {
                return Err(CorpusError::NonLatinSymbol(c));
            }
            if seen.contains(&c) {
                return Err(CorpusError::DuplicateSymbol(c));
            }
            seen.push(c);
        }
        Ok(Alphabet { symbols: seen })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        self.symbols.get(index).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index_of(c).is_some()
    }

    /// Index used for content padding and, on the output side, the
    /// end-of-sequence class: one past the last symbol.
    pub fn special_index(&self) -> usize {
        self.symbols.len()
    }

    /// Map a word to symbol indices; `None` if any character is unknown.
    pub fn encode(&self, word: &str) -> Option<Vec<usize>> {
        word.chars().map(|c| self.index_of(c)).collect()
    }
}

/// True iff the word is usable: at most [`MAX_WORD_LEN`] characters, at
/// least one, and every character inside the alphabet.
pub fn filter_word(transcription: &str, alphabet: &Alphabet) -> bool {
    let n = transcription.chars().count();
    (1..=MAX_WORD_LEN).contains(&n) && transcription.chars().all(|c| alphabet.contains(c))
}

/// One corpus unit: a canonical-size grayscale word image with labels.
#[derive(Clone, Debug)]
pub struct WordSample {
    pub id: String,
    pub image: Array2<f64>,
    pub transcription: String,
    pub writer_id: String,
}

#[derive(Clone, Debug)]
pub struct WriterGroup {
    pub writer_id: String,
    pub samples: Vec<WordSample>,
}

#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub train: Vec<WriterGroup>,
    pub test: Vec<WriterGroup>,
    pub split_name: String,
}

impl CorpusSplit {
    pub fn train_sample_count(&self) -> usize {
        self.train.iter().map(|g| g.samples.len()).sum()
    }

    pub fn test_sample_count(&self) -> usize {
        self.test.iter().map(|g| g.samples.len()).sum()
    }

    /// Writer ids of the training partition, in order; index = classifier label.
    pub fn writer_labels(&self) -> Vec<String> {
        self.train.iter().map(|g| g.writer_id.clone()).collect()
    }
}

/// Counters for what `load_corpus` kept and dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    pub dropped_by_filter: usize,
    pub unreadable: usize,
    pub missing_from_index: usize,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "loaded {} (filtered out {}, unreadable {}, unknown ids {})",
            self.loaded, self.dropped_by_filter, self.unreadable, self.missing_from_index
        )
    }
}

/// Geometry and alphabet options for corpus loading.
#[derive(Clone, Debug)]
pub struct CorpusOptions {
    pub height: usize,
    pub width: usize,
    pub alphabet: Alphabet,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            height: 64,
            width: 216,
            alphabet: Alphabet::latin(),
        }
    }
}

struct IndexEntry {
    writer_id: String,
    transcription: String,
}

fn parse_index(root: &Path) -> Result<BTreeMap<String, IndexEntry>, CorpusError> {
    let path = root.join("index.tsv");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| CorpusError::MissingIndex(path.display().to_string()))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(writer), Some(word)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(CorpusError::MalformedIndex(lineno + 1));
        };
        map.insert(
            id.to_string(),
            IndexEntry {
                writer_id: writer.to_string(),
                transcription: word.to_string(),
            },
        );
    }
    Ok(map)
}

fn parse_split(path: &Path) -> Result<(Vec<String>, Vec<String>), CorpusError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| CorpusError::MalformedSplit(format!("cannot read {}", path.display())))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut current: Option<&mut Vec<String>> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line {
            "train:" => current = Some(&mut train),
            "test:" => current = Some(&mut test),
            id => match current {
                Some(ref mut section) => section.push(id.to_string()),
                None => {
                    return Err(CorpusError::MalformedSplit(format!(
                        "id {id:?} appears before any train:/test: header"
                    )))
                }
            },
        }
    }
    Ok((train, test))
}

/// Bilinear resize of a grayscale intensity grid.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for i in 0..out_h {
        let fy = if out_h > 1 {
            i as f64 * (h - 1) as f64 / (out_h - 1) as f64
        } else {
            0.0
        };
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for j in 0..out_w {
            let fx = if out_w > 1 {
                j as f64 * (w - 1) as f64 / (out_w - 1) as f64
            } else {
                0.0
            };
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            let top = src[[y0, x0]] * (1.0 - dx) + src[[y0, x1]] * dx;
            let bot = src[[y1, x0]] * (1.0 - dx) + src[[y1, x1]] * dx;
            out[[i, j]] = top * (1.0 - dy) + bot * dy;
        }
    }
    out
}

const BACKGROUND: f64 = 1.0;
const WHITESPACE_THRESHOLD: f64 = 0.92;

fn trim_whitespace_columns(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let is_bg = |j: usize| (0..h).all(|i| img[[i, j]] > WHITESPACE_THRESHOLD);
    let mut left = 0;
    while left < w && is_bg(left) {
        left += 1;
    }
    if left == w {
        // all background: nothing to anchor on, keep as-is
        return img.clone();
    }
    let mut right = w;
    while right > left && is_bg(right - 1) {
        right -= 1;
    }
    img.slice(ndarray::s![.., left..right]).to_owned()
}

/// Normalize a raw grayscale image to the canonical `(height, width)`:
/// aspect-preserving resize to the target height, then width squeeze for
/// wide words or whitespace trim plus right padding for narrow ones.
pub fn preprocess(raw: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = raw.dim();
    let scaled_w = ((w as f64 * height as f64 / h as f64).round() as usize).max(1);
    if scaled_w >= width {
        return resize_bilinear(raw, height, width);
    }
    let resized = resize_bilinear(raw, height, scaled_w);
    let trimmed = trim_whitespace_columns(&resized);
    let mut out = Array2::<f64>::from_elem((height, width), BACKGROUND);
    let tw = trimmed.ncols().min(width);
    out.slice_mut(ndarray::s![.., ..tw])
        .assign(&trimmed.slice(ndarray::s![.., ..tw]));
    out
}

fn load_png_gray(path: &Path) -> Option<Array2<f64>> {
    let img = image::open(path).ok()?.into_luma8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return None;
    }
    let mut arr = Array2::<f64>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        arr[[y as usize, x as usize]] = p.0[0] as f64 / 255.0;
    }
    Some(arr)
}

fn group_by_writer(mut samples: Vec<WordSample>) -> Vec<WriterGroup> {
    samples.sort_by(|a, b| (&a.writer_id, &a.id).cmp(&(&b.writer_id, &b.id)));
    let mut groups: Vec<WriterGroup> = Vec::new();
    for s in samples {
        match groups.last_mut() {
            Some(g) if g.writer_id == s.writer_id => g.samples.push(s),
            _ => groups.push(WriterGroup {
                writer_id: s.writer_id.clone(),
                samples: vec![s],
            }),
        }
    }
    groups
}

/// Load and filter a corpus from disk.
pub fn load_corpus(
    root: &Path,
    split_spec: &Path,
    opts: &CorpusOptions,
) -> Result<(CorpusSplit, LoadReport), CorpusError> {
    let index = parse_index(root)?;
    let (train_ids, test_ids) = parse_split(split_spec)?;
    let mut report = LoadReport::default();

    let mut load_partition = |ids: &[String]| -> Vec<WordSample> {
        let mut out = Vec::new();
        for id in ids {
            let Some(entry) = index.get(id) else {
                report.missing_from_index += 1;
                continue;
            };
            if !filter_word(&entry.transcription, &opts.alphabet) {
                report.dropped_by_filter += 1;
                continue;
            }
            let path = root.join("images").join(format!("{id}.png"));
            let Some(raw) = load_png_gray(&path) else {
                report.unreadable += 1;
                eprintln!("warning: skipping unreadable image {}", path.display());
                continue;
            };
            out.push(WordSample {
                id: id.clone(),
                image: preprocess(&raw, opts.height, opts.width),
                transcription: entry.transcription.clone(),
                writer_id: entry.writer_id.clone(),
            });
            report.loaded += 1;
        }
        out
    };

    let train_samples = load_partition(&train_ids);
    let test_samples = load_partition(&test_ids);
    if train_samples.is_empty() && test_samples.is_empty() {
        return Err(CorpusError::EmptySplit);
    }
    let split_name = split_spec
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "split".to_string());
    Ok((
        CorpusSplit {
            train: group_by_writer(train_samples),
            test: group_by_writer(test_samples),
            split_name,
        },
        report,
    ))
}

/// Indices of a style draw: without replacement while the group lasts, then
/// cycling through fresh shuffles so repeats stay spread out.
pub fn sample_style_indices(
    group_len: usize,
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>, CorpusError> {
    if k == 0 {
        return Err(CorpusError::EmptyStyleSet);
    }
    if group_len == 0 {
        return Err(CorpusError::EmptyGroup);
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let mut perm: Vec<usize> = (0..group_len).collect();
        perm.shuffle(rng);
        let take = (k - out.len()).min(group_len);
        out.extend_from_slice(&perm[..take]);
    }
    Ok(out)
}

/// Draw `k` style images from one writer's group.
pub fn sample_style_set(
    group: &WriterGroup,
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Array2<f64>>, CorpusError> {
    let idx = sample_style_indices(group.samples.len(), k, rng)?;
    Ok(idx.iter().map(|&i| group.samples[i].image.clone()).collect())
}

/// One training example: a style set from a single writer plus the target
/// word, its real rendering, and the writer's classifier label.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub style: Vec<Array2<f64>>,
    pub style_indices: Vec<usize>,
    pub transcription: String,
    pub real: Array2<f64>,
    pub writer_index: usize,
    pub writer_id: String,
    pub sample_id: String,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

/// Deterministic, endlessly cycling batch stream over the train partition.
pub struct BatchStream {
    groups: Vec<WriterGroup>,
    // flat (group, sample) index of every sample
    flat: Vec<(usize, usize)>,
    batch_size: usize,
    style_k: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha12Rng,
}

pub(crate) fn mix_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over seed ^ tag
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl BatchStream {
    pub fn batches_per_epoch(&self) -> usize {
        self.flat.len() / self.batch_size
    }

    fn begin_epoch(&mut self) {
        self.rng = ChaCha12Rng::seed_from_u64(mix_seed(self.seed, self.epoch.wrapping_add(1)));
        self.order = (0..self.flat.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Batch {
        // drop the trailing partial batch of each epoch
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.begin_epoch();
        }
        let mut items = Vec::with_capacity(self.batch_size);
        for k in 0..self.batch_size {
            let (gi, si) = self.flat[self.order[self.cursor + k]];
            let group = &self.groups[gi];
            let sample = &group.samples[si];
            let style_indices =
                sample_style_indices(group.samples.len(), self.style_k, &mut self.rng)
                    .expect("non-empty group");
            let style = style_indices
                .iter()
                .map(|&i| group.samples[i].image.clone())
                .collect();
            items.push(BatchItem {
                style,
                style_indices,
                transcription: sample.transcription.clone(),
                real: sample.image.clone(),
                writer_index: gi,
                writer_id: group.writer_id.clone(),
                sample_id: sample.id.clone(),
            });
        }
        self.cursor += self.batch_size;
        Batch { items }
    }
}

/// Deterministic batch iterator over the train partition of a split.
pub fn make_batches(
    split: &CorpusSplit,
    batch_size: usize,
    style_k: usize,
    seed: u64,
) -> Result<BatchStream, CorpusError> {
    if batch_size == 0 {
        return Err(CorpusError::ZeroBatch);
    }
    let total = split.train_sample_count();
    if batch_size > total {
        return Err(CorpusError::BatchTooLarge {
            requested: batch_size,
            available: total,
        });
    }
    let groups = split.train.clone();
    let mut flat = Vec::with_capacity(total);
    for (gi, g) in groups.iter().enumerate() {
        for si in 0..g.samples.len() {
            flat.push((gi, si));
        }
    }
    let mut stream = BatchStream {
        groups,
        flat,
        batch_size,
        style_k,
        seed,
        epoch: 0,
        order: Vec::new(),
        cursor: 0,
        rng: ChaCha12Rng::seed_from_u64(0),
    };
    stream.begin_epoch();
    Ok(stream)
}

/// PNG writer for generated or corpus images.
pub fn save_png_gray(path: &Path, img: &Array2<f64>) -> std::io::Result<()> {
    let (h, w) = img.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        let v = img[[y as usize, x as usize]].clamp(0.0, 1.0);
        p.0[0] = (v * 255.0).round() as u8;
    }
    buf.save(path)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_is_a_bijection_over_latin_letters() {
        let a = Alphabet::latin();
        assert_eq!(a.len(), 52);
        for (i, c) in ('a'..='z').chain('A'..='Z').enumerate() {
            assert_eq!(a.index_of(c), Some(i));
            assert_eq!(a.symbol(i), Some(c));
        }
        assert!(!a.contains('!'));
        assert!(!a.contains('3'));
        assert_eq!(a.special_index(), 52);
    }

    #[test]
    fn alphabet_rejects_duplicates_and_non_latin() {
        assert!(matches!(
            Alphabet::new(['a', 'b', 'a']),
            Err(CorpusError::DuplicateSymbol('a'))
        ));
        assert!(matches!(
            Alphabet::new(['a', '?']),
            Err(CorpusError::NonLatinSymbol('?'))
        ));
    }

    #[test]
    fn filter_word_length_and_symbols() {
        let a = Alphabet::latin();
        assert!(filter_word("move", &a));
        assert!(!filter_word("personalities", &a)); // 13 characters
        assert!(!filter_word(")", &a));
        assert!(!filter_word("", &a));
        assert!(filter_word("abcdefghij", &a)); // exactly 10
        assert!(!filter_word("abcdefghijk", &a)); // 11
        assert!(!filter_word("extraordinary!", &a));
    }

    #[test]
    fn filter_is_idempotent() {
        let a = Alphabet::latin();
        let words = ["the", "move", "extraordinary!", "), ", "Hello", "abcdefghijk"];
        let once: Vec<&str> = words
            .iter()
            .copied()
            .filter(|w| filter_word(w, &a))
            .collect();
        let twice: Vec<&str> = once
            .iter()
            .copied()
            .filter(|w| filter_word(w, &a))
            .collect();
        assert_eq!(once, twice);
        assert_eq!(once, vec!["the", "move", "Hello"]);
    }

    #[test]
    fn preprocess_pads_narrow_and_squeezes_wide() {
        // narrow word: 32x40 with an ink block, must be padded to width
        let mut raw = Array2::<f64>::from_elem((32, 40), 1.0);
        raw.slice_mut(ndarray::s![8..24, 5..30]).fill(0.0);
        let out = preprocess(&raw, 32, 108);
        assert_eq!(out.dim(), (32, 108));
        // trimmed content is anchored left, right side is background
        assert!(out[[16, 0]] < 0.5);
        assert!(out.column(107).iter().all(|&v| v == 1.0));

        // wide word: squeezed to canonical width
        let wide = Array2::<f64>::from_elem((32, 400), 0.3);
        let out = preprocess(&wide, 32, 108);
        assert_eq!(out.dim(), (32, 108));
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn preprocess_keeps_all_background_images() {
        let raw = Array2::<f64>::from_elem((20, 30), 1.0);
        let out = preprocess(&raw, 32, 108);
        assert_eq!(out.dim(), (32, 108));
        assert!(out.iter().all(|&v| v > 0.99));
    }

    #[test]
    fn style_sampling_without_replacement_when_possible() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let idx = sample_style_indices(20, 15, &mut rng).unwrap();
        assert_eq!(idx.len(), 15);
        let mut uniq = idx.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 15, "draw of 15 from 20 must be distinct");
    }

    #[test]
    fn style_sampling_cycles_small_groups() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let idx = sample_style_indices(1, 3, &mut rng).unwrap();
        assert_eq!(idx, vec![0, 0, 0]);
        // a 2-sample group drawn 5 times must use each sample at least twice
        let idx = sample_style_indices(2, 5, &mut rng).unwrap();
        assert_eq!(idx.len(), 5);
        assert!(idx.iter().filter(|&&i| i == 0).count() >= 2);
        assert!(idx.iter().filter(|&&i| i == 1).count() >= 2);
    }

    #[test]
    fn style_sampling_rejects_zero_k() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        assert!(matches!(
            sample_style_indices(4, 0, &mut rng),
            Err(CorpusError::EmptyStyleSet)
        ));
    }

    #[test]
    fn successive_style_draws_differ() {
        // over 100 draw pairs from an advancing rng, orderings almost surely
        // differ; with a fixed seed this is a deterministic assertion
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut distinct = 0;
        for _ in 0..100 {
            let a = sample_style_indices(20, 15, &mut rng).unwrap();
            let b = sample_style_indices(20, 15, &mut rng).unwrap();
            if a != b {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "only {distinct}/100 draw pairs differed");
    }
}
