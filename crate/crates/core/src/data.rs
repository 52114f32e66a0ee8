//! Synthetic shapes dataset with templated captions.
//!
//! Every image holds two solid shapes of different colours on a plain dark
//! background, arranged either vertically ("above") or horizontally
//! ("left of"). Captions read `<bos> a red circle above a blue square <eos>`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent::Image;
use crate::params::hex;

pub const IMAGE_SIZE: usize = 32;
pub const BACKGROUND: [f64; 3] = [0.1, 0.1, 0.1];

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("magenta", [0.9, 0.1, 0.85]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("white", [0.95, 0.95, 0.95]),
    ("orange", [1.0, 0.55, 0.05]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    Above,
    LeftOf,
}

/// Fixed caption vocabulary; ids are indices. The MLLM vocabulary is larger
/// and leaves the remaining ids unused.
pub const VOCAB: [&str; 18] = [
    "<pad>", "<bos>", "<eos>", "a", "above", "left", "of", "circle", "square", "triangle", "red", "green", "blue",
    "yellow", "magenta", "cyan", "white", "orange",
];

pub fn token_id(word: &str) -> Result<usize> {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| Error::InvalidArgument(format!("word {word:?} not in vocabulary")))
}

/// Tokenizes a caption, adding `<bos>`/`<eos>` when absent.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let mut ids = text.split_whitespace().map(token_id).collect::<Result<Vec<_>>>()?;
    let (bos, eos) = (token_id("<bos>")?, token_id("<eos>")?);
    if ids.first() != Some(&bos) {
        ids.insert(0, bos);
    }
    if ids.last() != Some(&eos) {
        ids.push(eos);
    }
    Ok(ids)
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter().map(|&i| VOCAB.get(i).copied().unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: usize,
    pub cx: i32,
    pub cy: i32,
    pub radius: i32,
}

impl ShapeSpec {
    /// Whether the pixel centred at `(x + 0.5, y + 0.5)` lies inside.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx as f64;
        let dy = y as f64 + 0.5 - self.cy as f64;
        let r = self.radius as f64;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex at the top, base at the bottom of the 2r box.
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// Ground-truth description of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub first: ShapeSpec,
    pub second: ShapeSpec,
    pub relation: Relation,
}

impl Label {
    pub fn caption(&self) -> Vec<usize> {
        let mut words = vec!["<bos>", "a", COLORS[self.first.color].0, self.first.kind.word()];
        match self.relation {
            Relation::Above => words.push("above"),
            Relation::LeftOf => words.extend(["left", "of"]),
        }
        words.extend(["a", COLORS[self.second.color].0, self.second.kind.word(), "<eos>"]);
        words.iter().map(|w| token_id(w).expect("caption words are in the vocabulary")).collect()
    }

    /// Index of the caption class (colours, kinds, relation), ignoring jitter.
    pub fn class_id(&self) -> usize {
        let k = |s: ShapeKind| SHAPES.iter().position(|&x| x == s).expect("known kind");
        let rel = match self.relation {
            Relation::Above => 0,
            Relation::LeftOf => 1,
        };
        (((self.first.color * 3 + k(self.first.kind)) * 8 + self.second.color) * 3 + k(self.second.kind)) * 2 + rel
    }
}

pub fn render(label: &Label) -> Image {
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, BACKGROUND);
    for s in [label.first, label.second] {
        let rgb = COLORS[s.color].1;
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if s.covers(x, y) {
                    for (c, v) in rgb.iter().enumerate() {
                        img.set(c, y, x, *v);
                    }
                }
            }
        }
    }
    img
}

/// Draws a random label. Slots sit at 8 and 24 along the relation axis,
/// jittered by one pixel, and at 16 across it, jittered by two; radii are
/// 4 to 6, so shapes never touch.
pub fn random_label<R: Rng + ?Sized>(rng: &mut R) -> Label {
    let relation = if rng.random_bool(0.5) { Relation::Above } else { Relation::LeftOf };
    let c1 = rng.random_range(0..COLORS.len());
    let mut c2 = rng.random_range(0..COLORS.len() - 1);
    if c2 >= c1 {
        c2 += 1;
    }
    let mut shape = |color: usize, along: i32| {
        let kind = SHAPES[rng.random_range(0..SHAPES.len())];
        let a = along + rng.random_range(-1..=1);
        let b = 16 + rng.random_range(-2..=2);
        let (cx, cy) = match relation {
            Relation::Above => (b, a),
            Relation::LeftOf => (a, b),
        };
        ShapeSpec { kind, color, cx, cy, radius: rng.random_range(4..=6) }
    };
    let first = shape(c1, 8);
    let second = shape(c2, 24);
    Label { first, second, relation }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub caption: Vec<usize>,
    pub label: Label,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<Image> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    /// SHA-256 over every pixel and caption token.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            for v in s.image.pixels() {
                h.update(v.to_bits().to_le_bytes());
            }
            for &t in &s.caption {
                h.update((t as u32).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Writes `images/NNNNN.ppm`, `captions.jsonl` and `labels.jsonl`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir)?;
        let mut caps = BufWriter::new(fs::File::create(dir.join("captions.jsonl"))?);
        let mut labels = BufWriter::new(fs::File::create(dir.join("labels.jsonl"))?);
        for (i, s) in self.samples.iter().enumerate() {
            s.image.write_ppm(BufWriter::new(fs::File::create(img_dir.join(format!("{i:05}.ppm")))?))?;
            let rec = serde_json::json!({ "index": i, "tokens": s.caption, "text": detokenize(&s.caption) });
            writeln!(caps, "{rec}")?;
            writeln!(labels, "{}", serde_json::to_string(&s.label)?)?;
        }
        caps.flush()?;
        labels.flush()?;
        Ok(())
    }
}

fn pixel_hash(img: &Image) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in img.pixels() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

fn sample_from<R: Rng + ?Sized>(rng: &mut R) -> Sample {
    let label = random_label(rng);
    Sample { image: render(&label), caption: label.caption(), label }
}

pub fn generate_synthetic_dataset(seed: u64, n: usize) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n).map(|_| sample_from(&mut rng)).collect();
    Ok(SyntheticDataset { seed, samples })
}

/// Train and validation sets from independent streams of `seed`; validation
/// draws whose pixels coincide with a training image are skipped.
pub fn train_val_split(seed: u64, n_train: usize, n_val: usize) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let train = generate_synthetic_dataset(seed, n_train)?;
    if n_val == 0 {
        return Err(Error::InvalidArgument("validation size must be positive".into()));
    }
    let seen: HashSet<[u8; 32]> = train.samples.iter().map(|s| pixel_hash(&s.image)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut val = Vec::with_capacity(n_val);
    while val.len() < n_val {
        let s = sample_from(&mut rng);
        if !seen.contains(&pixel_hash(&s.image)) {
            val.push(s);
        }
    }
    Ok((train, SyntheticDataset { seed, samples: val }))
}

/// Parses a caption back into colours, kinds and relation.
pub fn parse_caption(ids: &[usize]) -> Result<(usize, ShapeKind, Relation, usize, ShapeKind)> {
    let words: Vec<&str> = ids.iter().map(|&i| VOCAB.get(i).copied().unwrap_or("<unk>")).collect();
    let bad = || Error::Format(format!("unparseable caption {:?}", words.join(" ")));
    let color = |w: &str| COLORS.iter().position(|(n, _)| *n == w);
    let kind = |w: &str| SHAPES.iter().copied().find(|k| k.word() == w);
    let (rel, rest) = match words.as_slice() {
        ["<bos>", "a", _, _, "above", rest @ ..] => (Relation::Above, rest),
        ["<bos>", "a", _, _, "left", "of", rest @ ..] => (Relation::LeftOf, rest),
        _ => return Err(bad()),
    };
    let ["a", c2, k2, "<eos>"] = rest else { return Err(bad()) };
    Ok((
        color(words[2]).ok_or_else(bad)?,
        kind(words[3]).ok_or_else(bad)?,
        rel,
        color(c2).ok_or_else(bad)?,
        kind(k2).ok_or_else(bad)?,
    ))
}

/// What a pixel-level inspection finds for one colour.
#[derive(Clone, Copy, Debug)]
pub struct Blob {
    pub color: usize,
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
}

/// Finds the palette-coloured blobs of an image and classifies each by the
/// fraction of its bounding box it fills: squares fill it, circles about
/// π/4 of it, triangles about half.
pub fn inspect(image: &Image) -> Vec<Blob> {
    let mut blobs = Vec::new();
    for (ci, (_, rgb)) in COLORS.iter().enumerate() {
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..image.height() {
            for x in 0..image.width() {
                if (0..3).all(|c| (image.get(c, y, x) - rgb[c]).abs() < 1e-9) {
                    n += 1;
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
        }
        if n == 0 {
            continue;
        }
        let fill = n as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        let kind = if fill > 0.92 {
            ShapeKind::Square
        } else if fill > 0.65 {
            ShapeKind::Circle
        } else {
            ShapeKind::Triangle
        };
        blobs.push(Blob { color: ci, kind, cx: sx / n as f64, cy: sy / n as f64 });
    }
    blobs
}

/// Rule-based check that a caption describes what is drawn.
pub fn caption_matches(image: &Image, caption: &[usize]) -> bool {
    let Ok((c1, k1, rel, c2, k2)) = parse_caption(caption) else { return false };
    let blobs = inspect(image);
    if blobs.len() != 2 {
        return false;
    }
    let find = |c: usize| blobs.iter().find(|b| b.color == c).copied();
    let (Some(a), Some(b)) = (find(c1), find(c2)) else { return false };
    let placed = match rel {
        Relation::Above => a.cy < b.cy && (b.cy - a.cy) > (b.cx - a.cx).abs(),
        Relation::LeftOf => a.cx < b.cx && (b.cx - a.cx) > (b.cy - a.cy).abs(),
    };
    placed && a.kind == k1 && b.kind == k2
}
