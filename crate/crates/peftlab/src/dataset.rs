//! Procedural stand-in corpus: blob-on-texture colonoscopy-style images
//! with counting / yes-no / localization QA pairs, a word-level tokenizer,
//! image-level 80/20 splits, and a loader for external CSV metadata.
//!
//! Generation is a pure function of the seed: same seed, byte-identical
//! corpus on disk.

use crate::error::{Error, Result};
use crate::metrics::normalize;
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// 3x3 grid labels, row-major. Index = 3*row + col.
pub const GRID_LABELS: [&str; 9] = [
    "upper-left",
    "upper-central",
    "upper-right",
    "central-left",
    "central",
    "central-right",
    "lower-left",
    "lower-central",
    "lower-right",
];

pub const MIN_IMAGE_SIZE: usize = 24;
pub const MAX_IMAGE_SIZE: usize = 512;
pub const MAX_POLYPS: usize = 4;

pub const DESCRIPTOR: &str = "clinical colonoscopy image";

// ── Types ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    /// Row-major H x W x 3 values in [0, 1].
    #[serde(skip)]
    pub pixels: Vec<f64>,
    pub polyp_count: usize,
    pub polyp_locations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Count,
    YesNo,
    Location,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqaExample {
    pub image_id: u32,
    /// Raw question text, always `<MedVQA>`-prefixed.
    pub question: String,
    pub answer: String,
    pub category: Category,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub images: Vec<SyntheticImage>,
    pub examples: Vec<VqaExample>,
    pub tokenizer: Tokenizer,
    pub seed: u64,
    pub image_size: usize,
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<VqaExample>,
    pub validation: Vec<VqaExample>,
    pub train_image_ids: Vec<u32>,
    pub val_image_ids: Vec<u32>,
    pub seed: u64,
}

// ── Tokenizer ───────────────────────────────────────────────────────

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MEDVQA: usize = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<MedVQA>"];

/// Word-level tokenizer. Specials are matched verbatim; everything else
/// goes through metric normalization (lowercase, trailing punctuation
/// stripped). Out-of-vocabulary words map to `<unk>`.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(|t| {
                t.split_whitespace()
                    .filter(|w| !SPECIALS.contains(w))
                    .flat_map(normalize)
                    .collect::<Vec<_>>()
            })
            .collect();
        words.sort_unstable();
        words.dedup();
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(words);
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Tokenizer { vocab, index }
    }

    pub fn from_vocab_lines(lines: &[String]) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if lines.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Parse(format!(
                    "vocab line {} must be the special token {s}",
                    i + 1
                )));
            }
        }
        let vocab: Vec<String> = lines.to_vec();
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Tokenizer { vocab, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(&id) = self.index.get(word) {
                out.push(id);
                continue;
            }
            for norm in normalize(word) {
                out.push(*self.index.get(&norm).unwrap_or(&UNK));
            }
        }
        out
    }

    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter_map(|&t| self.vocab.get(t).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ── Corpus generation ───────────────────────────────────────────────

fn grid_cell_of(x: f64, y: f64, width: usize, height: usize) -> usize {
    // Ties at an exact boundary go to the lower-index cell.
    let cell_along = |v: f64, extent: usize| -> usize {
        let scaled = 3.0 * v / extent as f64;
        let mut idx = scaled.floor() as isize;
        if scaled == scaled.floor() && idx > 0 {
            idx -= 1;
        }
        idx.clamp(0, 2) as usize
    };
    3 * cell_along(y, height) + cell_along(x, width)
}

fn render_image(
    id: u32,
    size: usize,
    count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> SyntheticImage {
    let (w, h) = (size, size);
    let mut pixels = vec![0.0; w * h * 3];

    // Low-frequency sinusoid mixture per channel.
    let base = [0.52, 0.34, 0.30];
    let mut waves = Vec::new();
    for _ in 0..3 {
        let fx = 0.5 + 2.0 * rng.gen::<f64>();
        let fy = 0.5 + 2.0 * rng.gen::<f64>();
        let phase = std::f64::consts::TAU * rng.gen::<f64>();
        let amp: Vec<f64> = (0..3).map(|_| 0.015 + 0.035 * rng.gen::<f64>()).collect();
        waves.push((fx, fy, phase, amp));
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut v = base[c];
                for (fx, fy, phase, amp) in &waves {
                    let arg = std::f64::consts::TAU
                        * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                        + phase;
                    v += amp[c] * arg.sin();
                }
                pixels[(y * w + x) * 3 + c] = v;
            }
        }
    }
    // Seeded speckle.
    for p in pixels.iter_mut() {
        *p += 0.04 * (rng.gen::<f64>() - 0.5);
    }

    // Polyps: bright ellipses, one per distinct grid cell, fully inside
    // the cell so the centroid label is unambiguous.
    let mut cells: Vec<usize> = (0..9).collect();
    cells.shuffle(rng);
    let mut chosen: Vec<usize> = cells.into_iter().take(count).collect();
    chosen.sort_unstable();

    let cell_w = w as f64 / 3.0;
    let cell_h = h as f64 / 3.0;
    let mut locations = Vec::with_capacity(count);
    for &cell in &chosen {
        let (row, col) = (cell / 3, cell % 3);
        let r_max = (cell_w.min(cell_h) / 2.0 - 1.5).min(4.0);
        let rx = 2.0 + (r_max - 2.0) * rng.gen::<f64>();
        let ry = 2.0 + (r_max - 2.0) * rng.gen::<f64>();
        let cx_lo = col as f64 * cell_w + rx + 1.0;
        let cx_hi = (col + 1) as f64 * cell_w - rx - 1.0;
        let cy_lo = row as f64 * cell_h + ry + 1.0;
        let cy_hi = (row + 1) as f64 * cell_h - ry - 1.0;
        let cx = cx_lo + (cx_hi - cx_lo) * rng.gen::<f64>();
        let cy = cy_lo + (cy_hi - cy_lo) * rng.gen::<f64>();

        // Bright enough that a polyp peak always outshines any background
        // crest; the centroid oracle depends on this.
        let bump = [0.50, 0.42, 0.38];
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(w - 1);
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let m = 1.0 - (dx * dx + dy * dy);
                if m > 0.0 {
                    let soft = m.sqrt();
                    for c in 0..3 {
                        pixels[(y * w + x) * 3 + c] += bump[c] * soft;
                    }
                }
            }
        }
        debug_assert_eq!(grid_cell_of(cx, cy, w, h), cell);
        locations.push(GRID_LABELS[cell].to_string());
    }

    for p in pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }

    SyntheticImage {
        id,
        width: w,
        height: h,
        pixels,
        polyp_count: count,
        polyp_locations: locations,
    }
}

fn qa_for_image(img: &SyntheticImage) -> Vec<VqaExample> {
    let mut out = Vec::with_capacity(3);
    let q = |text: &str| format!("<MedVQA> {text}");
    out.push(VqaExample {
        image_id: img.id,
        question: q("How many polyps are in the image?"),
        answer: img.polyp_count.to_string(),
        category: Category::Count,
    });
    out.push(VqaExample {
        image_id: img.id,
        question: q("Are there any polyps in the image?"),
        answer: if img.polyp_count > 0 { "yes" } else { "no" }.to_string(),
        category: Category::YesNo,
    });
    if img.polyp_count > 0 {
        let question = if img.polyp_count == 1 {
            q("Where is the polyp located?")
        } else {
            q("Where are the polyps located?")
        };
        out.push(VqaExample {
            image_id: img.id,
            question,
            answer: img.polyp_locations.join(" "),
            category: Category::Location,
        });
    }
    out
}

/// Deterministic synthetic corpus. Each image contributes a counting and
/// a yes/no question, plus a localization question when polyps exist;
/// counts cycle through 0..=4 so the full range is always covered.
pub fn generate_corpus(n_images: usize, seed: u64, image_size: usize) -> Result<Corpus> {
    if n_images < 5 {
        return Err(Error::Input(format!(
            "corpus needs at least 5 images, got {n_images}"
        )));
    }
    if !(MIN_IMAGE_SIZE..=MAX_IMAGE_SIZE).contains(&image_size) {
        return Err(Error::Input(format!(
            "image_size {image_size} outside supported range {MIN_IMAGE_SIZE}..={MAX_IMAGE_SIZE}"
        )));
    }
    let mut counts: Vec<usize> = (0..n_images).map(|i| i % (MAX_POLYPS + 1)).collect();
    counts.shuffle(&mut rng::substream(seed, "corpus.counts", &[]));

    let mut images = Vec::with_capacity(n_images);
    let mut examples = Vec::new();
    for (i, &count) in counts.iter().enumerate() {
        let mut r = rng::substream(seed, "corpus.image", &[i as u64]);
        let img = render_image(i as u32, image_size, count, &mut r);
        examples.extend(qa_for_image(&img));
        images.push(img);
    }
    let tokenizer = Tokenizer::from_texts(
        examples
            .iter()
            .flat_map(|e| [e.question.as_str(), e.answer.as_str()]),
    );
    Ok(Corpus {
        images,
        examples,
        tokenizer,
        seed,
        image_size,
    })
}

/// Splits by image id (no image leaks across splits); the train side gets
/// round(0.8 * n_images) images.
pub fn split_80_20(examples: &[VqaExample], seed: u64) -> Result<CorpusSplit> {
    if examples.len() < 5 {
        return Err(Error::Input(format!(
            "split needs at least 5 examples, got {}",
            examples.len()
        )));
    }
    let mut ids: Vec<u32> = Vec::new();
    for e in examples {
        if !ids.contains(&e.image_id) {
            ids.push(e.image_id);
        }
    }
    ids.shuffle(&mut rng::substream(seed, "split", &[]));
    let n_train = ((ids.len() as f64) * 0.8).round() as usize;
    let (train_ids, val_ids) = ids.split_at(n_train);
    let mut train_image_ids = train_ids.to_vec();
    let mut val_image_ids = val_ids.to_vec();
    train_image_ids.sort_unstable();
    val_image_ids.sort_unstable();

    let train: Vec<VqaExample> = examples
        .iter()
        .filter(|e| train_image_ids.binary_search(&e.image_id).is_ok())
        .cloned()
        .collect();
    let validation: Vec<VqaExample> = examples
        .iter()
        .filter(|e| val_image_ids.binary_search(&e.image_id).is_ok())
        .cloned()
        .collect();
    Ok(CorpusSplit {
        train,
        validation,
        train_image_ids,
        val_image_ids,
        seed,
    })
}

/// Caption templates: clinical descriptor plus a polyp-count clause (and
/// locations when present).
pub fn build_prompts(images: &[SyntheticImage]) -> Vec<String> {
    images
        .iter()
        .map(|img| match img.polyp_count {
            0 => format!("{DESCRIPTOR} with no polyp"),
            1 => format!(
                "{DESCRIPTOR} showing 1 polyp in the {} region",
                img.polyp_locations[0]
            ),
            n => format!(
                "{DESCRIPTOR} showing {n} polyps in the {} regions",
                img.polyp_locations.join(" and ")
            ),
        })
        .collect()
}

// ── External metadata loader ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ExternalExample {
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub example: VqaExample,
}

fn infer_category(answer: &str) -> Category {
    let a = answer.trim().to_lowercase();
    if !a.is_empty() && a.chars().all(|c| c.is_ascii_digit()) {
        Category::Count
    } else if a == "yes" || a == "no" {
        Category::YesNo
    } else {
        Category::Location
    }
}

/// Loads external VQA metadata: a CSV with header
/// `image_path,question,answer` whose rows reference PNG files relative
/// to the CSV location. Questions get the `<MedVQA>` prefix if absent.
pub fn load_external_metadata(path: &Path) -> Result<Vec<ExternalExample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    for required in ["image_path", "question", "answer"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Parse(format!(
                "{}: missing required column '{required}'",
                path.display()
            )));
        }
    }
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (ci, cq, ca) = (col("image_path"), col("question"), col("answer"));
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut out = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2; // header is line 1
        let record = record.map_err(|e| Error::Parse(format!("row at line {line}: {e}")))?;
        let field = |i: usize, name: &str| -> Result<String> {
            match record.get(i) {
                Some(v) if !v.trim().is_empty() => Ok(v.trim().to_string()),
                _ => Err(Error::Parse(format!("line {line}: missing {name}"))),
            }
        };
        let rel = field(ci, "image_path")?;
        let question_raw = field(cq, "question")?;
        let answer = field(ca, "answer")?;
        let image_path = base_dir.join(&rel);
        let (width, height, pixels) = load_png(&image_path)
            .map_err(|e| Error::Parse(format!("line {line}: cannot load '{rel}': {e}")))?;
        let question = if question_raw.starts_with("<MedVQA>") {
            question_raw
        } else {
            format!("<MedVQA> {question_raw}")
        };
        out.push(ExternalExample {
            image_path,
            width,
            height,
            pixels,
            example: VqaExample {
                image_id: row_idx as u32,
                question,
                answer: answer.clone(),
                category: infer_category(&answer),
            },
        });
    }
    Ok(out)
}

// ── PNG + corpus-on-disk IO ─────────────────────────────────────────

pub fn save_png(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "save_png: {} values for {}x{}x3",
            pixels.len(),
            width,
            height
        )));
    }
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Shape("save_png: buffer size mismatch".into()))?;
    img.save(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn load_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok((w, h, pixels))
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageMeta {
    id: u32,
    polyp_count: usize,
    polyp_locations: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    seed: u64,
    n_images: usize,
    image_size: usize,
    train_image_ids: Vec<u32>,
    val_image_ids: Vec<u32>,
    images: Vec<ImageMeta>,
}

/// Writes `images/*.png`, `qa.jsonl`, `vocab.txt`, and `manifest.json`.
pub fn save_corpus(corpus: &Corpus, split: &CorpusSplit, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    for img in &corpus.images {
        save_png(
            &images_dir.join(format!("img_{:05}.png", img.id)),
            img.width,
            img.height,
            &img.pixels,
        )?;
    }
    let mut qa = std::fs::File::create(dir.join("qa.jsonl"))?;
    for e in &corpus.examples {
        writeln!(
            qa,
            "{}",
            serde_json::to_string(e).map_err(|e| Error::Parse(e.to_string()))?
        )?;
    }
    std::fs::write(
        dir.join("vocab.txt"),
        corpus.tokenizer.vocab().join("\n") + "\n",
    )?;
    let manifest = CorpusManifest {
        seed: corpus.seed,
        n_images: corpus.images.len(),
        image_size: corpus.image_size,
        train_image_ids: split.train_image_ids.clone(),
        val_image_ids: split.val_image_ids.clone(),
        images: corpus
            .images
            .iter()
            .map(|i| ImageMeta {
                id: i.id,
                polyp_count: i.polyp_count,
                polyp_locations: i.polyp_locations.clone(),
            })
            .collect(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))? + "\n",
    )?;
    Ok(())
}

/// Reads a corpus directory written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<(Corpus, CorpusSplit)> {
    let manifest: CorpusManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| Error::Parse(format!("manifest.json: {e}")))?;

    let mut images = Vec::with_capacity(manifest.n_images);
    for meta in &manifest.images {
        let path = dir.join("images").join(format!("img_{:05}.png", meta.id));
        let (width, height, pixels) = load_png(&path)?;
        images.push(SyntheticImage {
            id: meta.id,
            width,
            height,
            pixels,
            polyp_count: meta.polyp_count,
            polyp_locations: meta.polyp_locations.clone(),
        });
    }

    let qa_file = std::fs::File::open(dir.join("qa.jsonl"))?;
    let mut examples = Vec::new();
    for (i, line) in std::io::BufReader::new(qa_file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: VqaExample = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("qa.jsonl line {}: {e}", i + 1)))?;
        examples.push(e);
    }

    let vocab_lines: Vec<String> = std::fs::read_to_string(dir.join("vocab.txt"))?
        .lines()
        .map(String::from)
        .collect();
    let tokenizer = Tokenizer::from_vocab_lines(&vocab_lines)?;

    let train: Vec<VqaExample> = examples
        .iter()
        .filter(|e| manifest.train_image_ids.binary_search(&e.image_id).is_ok())
        .cloned()
        .collect();
    let validation: Vec<VqaExample> = examples
        .iter()
        .filter(|e| manifest.val_image_ids.binary_search(&e.image_id).is_ok())
        .cloned()
        .collect();

    let corpus = Corpus {
        images,
        examples,
        tokenizer,
        seed: manifest.seed,
        image_size: manifest.image_size,
    };
    let split = CorpusSplit {
        train,
        validation,
        train_image_ids: manifest.train_image_ids,
        val_image_ids: manifest.val_image_ids,
        seed: manifest.seed,
    };
    Ok((corpus, split))
}
