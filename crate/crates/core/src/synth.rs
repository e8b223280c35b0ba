//! Deterministic synthetic painting corpus with three correlated label sets.
//!
//! Artists are texture generators, styles are color palettes and genres are layout
//! templates. Every image is rendered on demand from its index, so the corpus needs no
//! storage; [`SynthCorpus::write_to_dir`] materializes it as PNG files plus metadata.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetError, ImageSource, PaintingRecord, Split};
use crate::imaging::ImageBuffer;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub artists: usize,
    pub styles: usize,
    pub genres: usize,
    /// Probability that a painting takes its artist's preferred style and genre.
    pub affinity: f64,
    /// Shorter side of every rendered image.
    pub min_side: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { count: 1200, seed: 7, artists: 6, styles: 4, genres: 3, affinity: 0.5, min_side: 512 }
    }
}

pub const ARTIST_NAMES: [&str; 6] = ["stripes", "diagonals", "dots", "rings", "stipple", "waves"];
pub const STYLE_NAMES: [&str; 4] = ["warm", "cool", "earth", "pastel"];
pub const GENRE_NAMES: [&str; 3] = ["landscape", "portrait", "grid"];

const PALETTES: [[[f64; 3]; 3]; 4] = [
    [[200.0, 70.0, 40.0], [235.0, 160.0, 50.0], [150.0, 30.0, 60.0]],
    [[40.0, 90.0, 190.0], [60.0, 170.0, 180.0], [30.0, 40.0, 110.0]],
    [[100.0, 140.0, 50.0], [180.0, 120.0, 60.0], [55.0, 50.0, 35.0]],
    [[230.0, 170.0, 200.0], [190.0, 160.0, 230.0], [240.0, 215.0, 170.0]],
];

/// Fraction of the available headroom a texture extreme moves a palette color.
pub const TEXTURE_CONTRAST: f64 = 0.4;

/// Moves `v` toward white for positive `t` and toward black for negative `t`, so bright
/// and dark palettes keep the same relative texture contrast without clipping.
fn modulate(v: f64, t: f64) -> f64 {
    if t >= 0.0 {
        v + t * (255.0 - v)
    } else {
        v + t * v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Painting {
    artist: usize,
    style: usize,
    genre: usize,
    width: usize,
    height: usize,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub cfg: SynthConfig,
    items: Vec<Painting>,
}

impl SynthCorpus {
    pub fn new(cfg: SynthConfig) -> Self {
        assert!(cfg.artists <= ARTIST_NAMES.len() && cfg.styles <= STYLE_NAMES.len() && cfg.genres <= GENRE_NAMES.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let items = (0..cfg.count)
            .map(|i| {
                let artist = i % cfg.artists;
                let style =
                    if rng.random_bool(cfg.affinity) { artist % cfg.styles } else { rng.random_range(0..cfg.styles) };
                let genre =
                    if rng.random_bool(cfg.affinity) { artist % cfg.genres } else { rng.random_range(0..cfg.genres) };
                let long = cfg.min_side + 32 * rng.random_range(0..5);
                let (width, height) = if rng.random_bool(0.5) { (long, cfg.min_side) } else { (cfg.min_side, long) };
                Painting { artist, style, genre, width, height }
            })
            .collect();
        Self { cfg, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(i: usize) -> String {
        format!("toy-{i:05}")
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        id.strip_prefix("toy-").and_then(|n| n.parse().ok()).filter(|&i| i < self.items.len())
    }

    pub fn records(&self) -> Vec<PaintingRecord> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, p)| PaintingRecord {
                id: Self::id(i),
                image_path: format!("{}.png", Self::id(i)),
                artist: ARTIST_NAMES[p.artist].to_string(),
                style: STYLE_NAMES[p.style].to_string(),
                genre: GENRE_NAMES[p.genre].to_string(),
                split: Split::Unassigned,
            })
            .collect()
    }

    /// Metadata table in the ingestion format.
    pub fn metadata_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "filename", "artist", "style", "genre"]).expect("in-memory write");
        for r in self.records() {
            w.write_record([&r.id, &r.image_path, &r.artist, &r.style, &r.genre]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }

    pub fn render(&self, i: usize) -> ImageBuffer {
        let p = self.items[i];
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64 + 1));
        let texture = Texture::sample(p.artist, &mut rng);
        let layout = Layout::sample(p.genre, p.width, p.height, &mut rng);
        let palette: Vec<[f64; 3]> = PALETTES[p.style]
            .iter()
            .map(|c| c.map(|v| (v + rng.random_range(-12.0..12.0)).clamp(0.0, 255.0)))
            .collect();
        let mut data = Vec::with_capacity(p.width * p.height * 3);
        for y in 0..p.height {
            for x in 0..p.width {
                let slot = layout.slot(x as f64, y as f64);
                let t = TEXTURE_CONTRAST * texture.value(x as f64, y as f64);
                data.extend(palette[slot].iter().map(|&v| modulate(v, t) as f32));
            }
        }
        ImageBuffer::new(p.width, p.height, 3, data).expect("positive size")
    }

    /// Writes every image as PNG plus `metadata.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir)?;
        for i in 0..self.len() {
            self.render(i).save(&dir.join(format!("{}.png", Self::id(i))))?;
        }
        std::fs::write(dir.join("metadata.csv"), self.metadata_csv())?;
        Ok(())
    }
}

impl ImageSource for SynthCorpus {
    fn load(&self, record: &PaintingRecord) -> Result<ImageBuffer, DatasetError> {
        let i = self.index_of(&record.id).ok_or_else(|| DatasetError::UnknownId(record.id.clone()))?;
        Ok(self.render(i))
    }
}

enum Texture {
    Stripes { period: f64, phase: f64 },
    Diagonals { period: f64, phase: f64 },
    Dots { period: f64, ox: f64, oy: f64 },
    Rings { period: f64, cx: f64, cy: f64 },
    Stipple { seed: u64 },
    Waves { period: f64, amp: f64, wavelength: f64 },
}

impl Texture {
    fn sample(artist: usize, rng: &mut impl Rng) -> Self {
        let jitter = rng.random_range(0.9..1.1);
        match artist {
            0 => Texture::Stripes { period: 16.0 * jitter, phase: rng.random_range(0.0..2.0 * PI) },
            1 => Texture::Diagonals { period: 22.0 * jitter, phase: rng.random_range(0.0..2.0 * PI) },
            2 => Texture::Dots { period: 40.0 * jitter, ox: rng.random_range(0.0..40.0), oy: rng.random_range(0.0..40.0) },
            3 => Texture::Rings { period: 30.0 * jitter, cx: rng.random_range(0.0..512.0), cy: rng.random_range(0.0..512.0) },
            4 => Texture::Stipple { seed: rng.random() },
            _ => Texture::Waves { period: 26.0 * jitter, amp: 8.0, wavelength: 60.0 * jitter },
        }
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        match *self {
            Texture::Stripes { period, phase } => (2.0 * PI * y / period + phase).sin(),
            Texture::Diagonals { period, phase } => (2.0 * PI * (x + y) / (period * 2f64.sqrt()) + phase).sin(),
            Texture::Dots { period, ox, oy } => {
                (2.0 * PI * (x + ox) / period).cos() * (2.0 * PI * (y + oy) / period).cos()
            }
            Texture::Rings { period, cx, cy } => (2.0 * PI * ((x - cx).hypot(y - cy)) / period).sin(),
            Texture::Stipple { seed } => {
                let cell = ((x as u64 / 4) << 32) ^ (y as u64 / 4) ^ seed;
                let h = cell.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                if h >> 63 == 1 {
                    1.0
                } else {
                    -1.0
                }
            }
            Texture::Waves { period, amp, wavelength } => {
                (2.0 * PI * (x + amp * (2.0 * PI * y / wavelength).sin()) / period).sin()
            }
        }
    }
}

enum Layout {
    Landscape { horizon: f64, ground: f64 },
    Portrait { cx: f64, cy: f64, rx: f64, ry: f64, head: (f64, f64, f64) },
    Grid { cell: f64, shift: usize },
}

impl Layout {
    fn sample(genre: usize, w: usize, h: usize, rng: &mut impl Rng) -> Self {
        let (w, h) = (w as f64, h as f64);
        match genre {
            0 => Layout::Landscape {
                horizon: h * rng.random_range(0.3..0.45),
                ground: h * rng.random_range(0.6..0.75),
            },
            1 => {
                let cx = w * rng.random_range(0.45..0.55);
                let cy = h * 0.65;
                Layout::Portrait { cx, cy, rx: w * 0.28, ry: h * 0.4, head: (cx, h * 0.3, h.min(w) * 0.14) }
            }
            _ => Layout::Grid { cell: rng.random_range(100.0..140.0), shift: rng.random_range(0..3) },
        }
    }

    fn slot(&self, x: f64, y: f64) -> usize {
        match *self {
            Layout::Landscape { horizon, ground } => {
                if y < horizon {
                    0
                } else if y < ground {
                    1
                } else {
                    2
                }
            }
            Layout::Portrait { cx, cy, rx, ry, head: (hx, hy, hr) } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                if (x - hx).hypot(y - hy) < hr {
                    2
                } else if dx * dx + dy * dy < 1.0 {
                    1
                } else {
                    0
                }
            }
            Layout::Grid { cell, shift } => ((x / cell) as usize + (y / cell) as usize + shift) % 3,
        }
    }
}

/// Small labeled set whose classes differ only in grating orientation; intensity and
/// color statistics are shared across classes.
pub fn orientation_corpus(per_class: usize, classes: usize, size: usize, seed: u64) -> Vec<(ImageBuffer, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * classes);
    for i in 0..per_class * classes {
        let class = i % classes;
        let theta = PI * class as f64 / classes as f64 + rng.random_range(-0.08..0.08);
        let period = rng.random_range(6.0..10.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let (s, c) = theta.sin_cos();
        let img = ImageBuffer::from_fn(size, size, 3, |x, y, _| {
            let t = 2.0 * PI * (x as f64 * c + y as f64 * s) / period + phase;
            (127.5 + 100.0 * t.sin()) as f32
        })
        .expect("positive size");
        out.push((img, class));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{filter_min_per_class, parse_metadata, Task};

    #[test]
    fn corpus_meets_class_floor() {
        let corpus = SynthCorpus::new(SynthConfig::default());
        let parsed = parse_metadata(corpus.metadata_csv().as_bytes()).unwrap();
        assert_eq!(parsed.records.len(), 1200);
        let (kept, idx) = filter_min_per_class(parsed.records, 10).unwrap();
        assert_eq!(kept.len(), 1200);
        assert_eq!([idx[0].len(), idx[1].len(), idx[2].len()], [6, 4, 3]);
        assert!(idx.iter().all(|i| i.counts.iter().all(|&c| c >= 10)));
    }

    #[test]
    fn rendering_is_deterministic_and_sized() {
        let corpus = SynthCorpus::new(SynthConfig { count: 12, ..SynthConfig::default() });
        let a = corpus.render(5);
        assert_eq!(a, corpus.render(5));
        assert_eq!(a.min_side(), 512);
        let rec = &corpus.records()[5];
        assert_eq!(corpus.load(rec).unwrap(), a);
        assert_eq!(rec.label(Task::Artist), ARTIST_NAMES[5 % 6]);
    }

    #[test]
    fn orientation_classes_share_histograms() {
        let set = orientation_corpus(2, 3, 32, 1);
        assert_eq!(set.len(), 6);
        assert_eq!(set.iter().map(|s| s.1).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2]);
    }
}
