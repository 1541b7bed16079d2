//! Synthetic word-corpus generator for smoke training and tests.
//!
//! Words are rendered as stroke patterns derived from each character's code
//! point, with per-writer slant, stroke width and ink intensity so the writer
//! classifier and style encoder have a real signal to pick up, and with small
//! per-sample jitter so style sets are not byte-identical.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::corpus::{self, preprocess, CorpusSplit, WordSample, WriterGroup};

/// Pen parameters of one synthetic writer.
#[derive(Clone, Copy, Debug)]
pub struct WriterStyle {
    pub slant: f64,
    pub stroke: f64,
    pub ink: f64,
    pub baseline_drift: f64,
}

impl WriterStyle {
    pub fn preset(index: usize) -> Self {
        // spread writers over visibly different pens
        let presets = [
            WriterStyle {
                slant: -0.28,
                stroke: 1.1,
                ink: 0.05,
                baseline_drift: 0.0,
            },
            WriterStyle {
                slant: 0.3,
                stroke: 2.2,
                ink: 0.3,
                baseline_drift: 0.12,
            },
            WriterStyle {
                slant: 0.05,
                stroke: 1.6,
                ink: 0.15,
                baseline_drift: -0.1,
            },
            WriterStyle {
                slant: -0.12,
                stroke: 2.8,
                ink: 0.0,
                baseline_drift: 0.06,
            },
        ];
        presets[index % presets.len()]
    }
}

fn char_segments(c: char) -> Vec<[f64; 4]> {
    // deterministic pseudo-glyph: 3 segments in the unit box seeded by the char
    let mut rng = ChaCha12Rng::seed_from_u64(corpus::mix_seed(0x617068_61, c as u64));
    let mut segs = Vec::with_capacity(4);
    for _ in 0..3 {
        segs.push([
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ]);
    }
    // a baseline-ish anchor stroke keeps glyphs visually grounded
    segs.push([0.2, 0.85, 0.8, 0.8]);
    segs
}

fn draw_segment(canvas: &mut Array2<f64>, seg: [f64; 4], halfwidth: f64, ink: f64) {
    let (h, w) = canvas.dim();
    let (x0, y0, x1, y1) = (seg[0], seg[1], seg[2], seg[3]);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = (dx * dx + dy * dy).max(1e-9);
    let pad = halfwidth.ceil() as isize + 1;
    let min_x = ((x0.min(x1)).floor() as isize - pad).max(0);
    let max_x = ((x0.max(x1)).ceil() as isize + pad).min(w as isize - 1);
    let min_y = ((y0.min(y1)).floor() as isize - pad).max(0);
    let max_y = ((y0.max(y1)).ceil() as isize + pad).min(h as isize - 1);
    if min_x > max_x || min_y > max_y {
        return;
    }
    for py in min_y as usize..=max_y as usize {
        for px in min_x as usize..=max_x as usize {
            let t = (((px as f64 - x0) * dx + (py as f64 - y0) * dy) / len2).clamp(0.0, 1.0);
            let cx = x0 + t * dx;
            let cy = y0 + t * dy;
            let d = ((px as f64 - cx).powi(2) + (py as f64 - cy).powi(2)).sqrt();
            // soft edge one pixel wide
            let v = ((d - halfwidth) + 0.5).clamp(0.0, 1.0);
            let shade = ink + (1.0 - ink) * v;
            if shade < canvas[[py, px]] {
                canvas[[py, px]] = shade;
            }
        }
    }
}

/// Render one word at the canonical size with a writer's pen and per-sample
/// jitter from `rng`.
pub fn render_word(
    word: &str,
    style: &WriterStyle,
    rng: &mut ChaCha12Rng,
    height: usize,
    width: usize,
) -> Array2<f64> {
    let n = word.chars().count().max(1);
    let glyph_h = (height as f64 * 0.7).round();
    let glyph_w = (height as f64 * 0.5).round();
    let nat_w = ((n as f64 + 0.6) * glyph_w) as usize + height / 4;
    let mut canvas = Array2::<f64>::from_elem((height, nat_w), 1.0);
    let y_top = height as f64 * 0.15 + style.baseline_drift * height as f64;
    for (ci, c) in word.chars().enumerate() {
        let x_left = (ci as f64 + 0.3) * glyph_w;
        for seg in char_segments(c) {
            let jitter = |r: &mut ChaCha12Rng| r.gen_range(-0.03..0.03);
            let sx0 = seg[0] + jitter(rng);
            let sy0 = seg[1] + jitter(rng);
            let sx1 = seg[2] + jitter(rng);
            let sy1 = seg[3] + jitter(rng);
            let to_canvas = |sx: f64, sy: f64| {
                let y = y_top + sy * glyph_h;
                let x = x_left + sx * glyph_w + style.slant * (glyph_h - sy * glyph_h);
                [x, y]
            };
            let p0 = to_canvas(sx0, sy0);
            let p1 = to_canvas(sx1, sy1);
            draw_segment(
                &mut canvas,
                [p0[0], p0[1], p1[0], p1[1]],
                style.stroke * 0.5,
                style.ink,
            );
        }
    }
    preprocess(&canvas, height, width)
}

/// Shape of a synthetic corpus.
#[derive(Clone, Debug)]
pub struct FixtureSpec {
    pub writers: usize,
    pub words: Vec<String>,
    pub test_words: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl FixtureSpec {
    /// Two writers, small canvas, enough words for smoke training.
    pub fn smoke() -> Self {
        let words = [
            "the", "move", "and", "was", "her", "him", "sun", "ink", "pen", "dog",
            "cat", "run", "sit", "top", "hat", "map", "net", "log", "bed", "cup",
            "red", "blue", "gold", "wind", "rain", "snow", "leaf", "tree", "hand",
            "word",
        ];
        FixtureSpec {
            writers: 2,
            words: words.iter().map(|s| s.to_string()).collect(),
            test_words: 5,
            height: 32,
            width: 108,
            seed: 0xF1C,
        }
    }
}

/// Build an in-memory corpus split. Every writer renders every word; the last
/// `test_words` words of each writer form the test partition.
pub fn synth_corpus(spec: &FixtureSpec) -> CorpusSplit {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for wi in 0..spec.writers {
        let style = WriterStyle::preset(wi);
        let writer_id = format!("w{wi:02}");
        let mut rng = ChaCha12Rng::seed_from_u64(corpus::mix_seed(spec.seed, wi as u64));
        let mut train_samples = Vec::new();
        let mut test_samples = Vec::new();
        for (i, word) in spec.words.iter().enumerate() {
            let sample = WordSample {
                id: format!("{writer_id}-{i:03}"),
                image: render_word(word, &style, &mut rng, spec.height, spec.width),
                transcription: word.clone(),
                writer_id: writer_id.clone(),
            };
            if i + spec.test_words >= spec.words.len() {
                test_samples.push(sample);
            } else {
                train_samples.push(sample);
            }
        }
        train.push(WriterGroup {
            writer_id: writer_id.clone(),
            samples: train_samples,
        });
        test.push(WriterGroup {
            writer_id,
            samples: test_samples,
        });
    }
    CorpusSplit {
        train,
        test,
        split_name: "fixture".to_string(),
    }
}

/// Write a synthetic corpus in the on-disk layout (`images/`, `index.tsv`,
/// `split.txt`) so the load path and the CLI can be exercised end to end.
pub fn write_corpus_dir(dir: &Path, spec: &FixtureSpec) -> std::io::Result<()> {
    let split = synth_corpus(spec);
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut index = String::new();
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for (groups, ids) in [(&split.train, &mut train_ids), (&split.test, &mut test_ids)] {
        for g in groups {
            for s in &g.samples {
                corpus::save_png_gray(&images.join(format!("{}.png", s.id)), &s.image)?;
                index.push_str(&format!("{}\t{}\t{}\n", s.id, s.writer_id, s.transcription));
                ids.push(s.id.clone());
            }
        }
    }
    std::fs::write(dir.join("index.tsv"), index)?;
    let mut split_text = String::from("train:\n");
    for id in &train_ids {
        split_text.push_str(id);
        split_text.push('\n');
    }
    split_text.push_str("test:\n");
    for id in &test_ids {
        split_text.push_str(id);
        split_text.push('\n');
    }
    std::fs::write(dir.join("split.txt"), split_text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Alphabet;

    #[test]
    fn rendering_is_deterministic_and_canonical() {
        let style = WriterStyle::preset(0);
        let mut r1 = ChaCha12Rng::seed_from_u64(9);
        let mut r2 = ChaCha12Rng::seed_from_u64(9);
        let a = render_word("move", &style, &mut r1, 32, 108);
        let b = render_word("move", &style, &mut r2, 32, 108);
        assert_eq!(a, b);
        assert_eq!(a.dim(), (32, 108));
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // the word must actually leave ink on the canvas
        assert!(a.iter().any(|&v| v < 0.3));
    }

    #[test]
    fn writers_produce_visibly_different_images() {
        let mut r1 = ChaCha12Rng::seed_from_u64(10);
        let mut r2 = ChaCha12Rng::seed_from_u64(10);
        let a = render_word("word", &WriterStyle::preset(0), &mut r1, 32, 108);
        let b = render_word("word", &WriterStyle::preset(1), &mut r2, 32, 108);
        let diff: f64 = (&a - &b).mapv(f64::abs).sum();
        assert!(diff > 10.0, "writer styles too similar: {diff}");
    }

    #[test]
    fn smoke_fixture_has_enough_material() {
        let spec = FixtureSpec::smoke();
        let split = synth_corpus(&spec);
        assert_eq!(split.train.len(), 2);
        assert!(split.train_sample_count() >= 50);
        let alphabet = Alphabet::latin();
        for g in split.train.iter().chain(&split.test) {
            for s in &g.samples {
                assert!(corpus::filter_word(&s.transcription, &alphabet));
                assert_eq!(s.image.dim(), (spec.height, spec.width));
            }
        }
    }
}
