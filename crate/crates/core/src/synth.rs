//! Procedural image-caption fixtures.
//!
//! Natural scenes are smooth outdoor compositions (sky, ground, one shaded
//! object). Art records render the same scene through a graphic medium
//! (painting, sketch, logo, mosaic); some carry a caption naming the medium,
//! others carry a plain content caption and can only be caught from pixels.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ManifestRecord;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::random::{rng_from_seed, SeededRng};

pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.85, 0.12, 0.10]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("white", [0.95, 0.95, 0.93]),
    ("purple", [0.55, 0.20, 0.70]),
    ("orange", [0.95, 0.55, 0.10]),
    ("black", [0.08, 0.08, 0.10]),
];

pub const OBJECTS: [&str; 4] = ["ball", "box", "tower", "tent"];

pub const PLACES: [&str; 5] = ["meadow", "beach", "desert", "snow", "night"];

const DECOYS: [&str; 4] = ["during a party", "next to a cart", "partly cloudy", "at the start"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtKind {
    Painting,
    Sketch,
    Logo,
    Mosaic,
}

impl ArtKind {
    pub const ALL: [ArtKind; 4] = [
        ArtKind::Painting,
        ArtKind::Sketch,
        ArtKind::Logo,
        ArtKind::Mosaic,
    ];

    /// Caption nouns that name this medium.
    pub fn caption_terms(self) -> &'static [&'static str] {
        match self {
            ArtKind::Painting => &["painting", "artwork", "art"],
            ArtKind::Sketch => &["sketch", "drawings", "illustration"],
            ArtKind::Logo => &["logo", "advertisement", "stamp"],
            ArtKind::Mosaic => &["mosaic", "tapestry"],
        }
    }
}

/// Parameters of one procedural scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub color: usize,
    pub object: usize,
    pub place: usize,
    /// Object center, fraction of width.
    pub x: f32,
    /// Object size, fraction of width.
    pub size: f32,
    /// Horizon height, fraction of height.
    pub horizon: f32,
    pub tint: [f32; 3],
    pub texture_seed: u64,
}

impl SceneSpec {
    pub fn random(rng: &mut SeededRng) -> Self {
        Self {
            color: rng.random_range(0..COLORS.len()),
            object: rng.random_range(0..OBJECTS.len()),
            place: rng.random_range(0..PLACES.len()),
            x: rng.random_range(0.28..0.72),
            size: rng.random_range(0.26..0.38),
            horizon: rng.random_range(0.50..0.64),
            tint: [
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ],
            texture_seed: rng.random(),
        }
    }

    /// Plain content caption, e.g. "a red ball on the beach".
    pub fn caption(&self) -> String {
        let color = COLORS[self.color].0;
        let object = OBJECTS[self.object];
        let place = match PLACES[self.place] {
            "meadow" => "in a meadow",
            "beach" => "on the beach",
            "desert" => "in the desert",
            "snow" => "in the snow",
            _ => "at night",
        };
        format!("a {color} {object} {place}")
    }

    pub fn object_rgb(&self) -> [f32; 3] {
        COLORS[self.color].1
    }
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn place_palette(place: &str) -> ([f32; 3], [f32; 3], [f32; 3], [f32; 3]) {
    // (sky top, sky bottom, ground near horizon, ground bottom)
    match place {
        "meadow" => (
            [0.25, 0.45, 0.85],
            [0.65, 0.80, 0.95],
            [0.35, 0.60, 0.25],
            [0.20, 0.42, 0.15],
        ),
        "beach" => (
            [0.30, 0.55, 0.90],
            [0.75, 0.88, 0.97],
            [0.88, 0.80, 0.58],
            [0.80, 0.70, 0.48],
        ),
        "desert" => (
            [0.55, 0.70, 0.88],
            [0.92, 0.88, 0.78],
            [0.85, 0.62, 0.35],
            [0.72, 0.48, 0.25],
        ),
        "snow" => (
            [0.55, 0.60, 0.68],
            [0.80, 0.82, 0.86],
            [0.92, 0.93, 0.96],
            [0.82, 0.85, 0.90],
        ),
        _ => (
            [0.02, 0.03, 0.12],
            [0.10, 0.12, 0.28],
            [0.12, 0.12, 0.16],
            [0.05, 0.05, 0.08],
        ),
    }
}

/// Signed coverage of the object silhouette at (px, py) in pixel units:
/// returns a value in [0, 1] with a one-pixel soft edge.
fn object_coverage(spec: &SceneSpec, w: f32, h: f32, px: f32, py: f32) -> f32 {
    let cx = spec.x * w;
    let ground = spec.horizon * h + 0.12 * h;
    let s = spec.size * w;
    let d = match OBJECTS[spec.object] {
        "ball" => {
            let cy = ground - s * 0.5;
            ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - s * 0.5
        }
        "box" => {
            let cy = ground - s * 0.45;
            let hx = s * 0.45;
            let hy = s * 0.45;
            ((px - cx).abs() - hx).max((py - cy).abs() - hy)
        }
        "tower" => {
            let hy = s * 0.9;
            let cy = ground - hy;
            let hx = s * 0.22;
            ((px - cx).abs() - hx).max((py - cy).abs() - hy)
        }
        _ => {
            // tent: isosceles triangle with the base on the ground
            let top = ground - s * 0.85;
            if py < top || py > ground {
                (top - py).max(py - ground)
            } else {
                let half = (py - top) / (ground - top) * s * 0.55;
                (px - cx).abs() - half
            }
        }
    };
    (0.5 - d).clamp(0.0, 1.0)
}

fn hash_noise(seed: u64, x: usize, y: usize) -> f32 {
    let mut h = seed ^ ((x as u64) << 32) ^ (y as u64).wrapping_mul(0x9e37_79b9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h as f64 / u64::MAX as f64) as f32 - 0.5
}

/// Renders a natural-looking scene.
pub fn render_natural(spec: &SceneSpec, size: usize) -> Image {
    let (w, h) = (size as f32, size as f32);
    let place = PLACES[spec.place];
    let (sky0, sky1, g0, g1) = place_palette(place);
    let horizon = spec.horizon * h;
    let mut img = Image::new(size, size);
    let obj = spec.object_rgb();
    let cx = spec.x * w;
    let ground_line = spec.horizon * h + 0.12 * h;
    for yi in 0..size {
        for xi in 0..size {
            let (px, py) = (xi as f32 + 0.5, yi as f32 + 0.5);
            let mut c = if py < horizon {
                lerp3(sky0, sky1, py / horizon)
            } else {
                let t = (py - horizon) / (h - horizon).max(1.0);
                let mut g = lerp3(g0, g1, t);
                if place == "beach" && py < horizon + 0.08 * h {
                    g = [0.15, 0.40, 0.65];
                }
                let ripple = 0.025 * ((px * 0.9 + py * 0.3).sin() * (py * 0.7).cos());
                [g[0] + ripple, g[1] + ripple, g[2] + ripple]
            };
            if place == "night" && py < horizon && hash_noise(spec.texture_seed, xi, yi) > 0.485 {
                c = [0.9, 0.9, 0.8];
            }
            // soft shadow
            let sd = ((px - cx) / (spec.size * w * 0.7)).powi(2)
                + ((py - ground_line) / (0.05 * h)).powi(2);
            if sd < 1.0 {
                let k = 0.35 * (1.0 - sd);
                c = [c[0] * (1.0 - k), c[1] * (1.0 - k), c[2] * (1.0 - k)];
            }
            let cov = object_coverage(spec, w, h, px, py);
            if cov > 0.0 {
                let shade = 0.65 + 0.35 * (1.0 - ((px - cx + 0.3 * spec.size * w) / (spec.size * w)).abs()).clamp(0.0, 1.0);
                let o = [obj[0] * shade, obj[1] * shade, obj[2] * shade];
                c = lerp3(c, o, cov);
            }
            let n = 0.02 * hash_noise(spec.texture_seed.wrapping_add(1), xi, yi);
            img.set(
                xi,
                yi,
                [
                    c[0] + spec.tint[0] + n,
                    c[1] + spec.tint[1] + n,
                    c[2] + spec.tint[2] + n,
                ],
            );
        }
    }
    img.clamp01()
}

fn edge_map(img: &Image) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let l = |dx: isize, dy: isize| {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                img.luminance(xx, yy)
            };
            let gx = l(1, -1) + 2.0 * l(1, 0) + l(1, 1) - l(-1, -1) - 2.0 * l(-1, 0) - l(-1, 1);
            let gy = l(-1, 1) + 2.0 * l(0, 1) + l(1, 1) - l(-1, -1) - 2.0 * l(0, -1) - l(1, -1);
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Renders the scene through a graphic medium.
pub fn render_art(spec: &SceneSpec, kind: ArtKind, size: usize) -> Image {
    let natural = render_natural(spec, size);
    let (w, h) = (size, size);
    match kind {
        ArtKind::Painting => {
            let mut out = Image::new(w, h);
            let angle = (spec.texture_seed % 628) as f32 / 100.0;
            let (ca, sa) = (angle.cos(), angle.sin());
            for y in 0..h {
                for x in 0..w {
                    let p = natural.get(x, y);
                    let stroke = 0.14 * ((x as f32 * ca + y as f32 * sa) * 1.7).sin();
                    let mean = (p[0] + p[1] + p[2]) / 3.0;
                    let mut q = [0.0; 3];
                    for c in 0..3 {
                        let sat = mean + 1.8 * (p[c] - mean) + stroke;
                        q[c] = (sat * 4.0).round() / 4.0;
                    }
                    out.set(x, y, q);
                }
            }
            out.clamp01()
        }
        ArtKind::Sketch => {
            let edges = edge_map(&natural);
            let mut out = Image::new(w, h);
            for y in 0..h {
                for x in 0..w {
                    let hatch = if (x + y) % 4 == 0 && natural.luminance(x, y) < 0.45 {
                        0.25
                    } else {
                        0.0
                    };
                    let v = (0.93 - 1.4 * edges[y * w + x] - hatch).clamp(0.05, 0.95);
                    out.set(x, y, [v, v * 0.98, v * 0.92]);
                }
            }
            out
        }
        ArtKind::Logo => {
            let bg = if spec.place % 2 == 0 {
                [0.97, 0.97, 0.97]
            } else {
                [0.10, 0.35, 0.75]
            };
            let obj = spec.object_rgb();
            let mut centered = spec.clone();
            centered.x = 0.5;
            centered.size = 0.5;
            centered.horizon = 0.42;
            let (fw, fh) = (w as f32, h as f32);
            let mut out = Image::new(w, h);
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                    let cov = object_coverage(&centered, fw, fh, px, py);
                    let ring = object_coverage(&centered, fw, fh, px, py + 2.0)
                        .max(object_coverage(&centered, fw, fh, px, py - 2.0))
                        .max(object_coverage(&centered, fw, fh, px + 2.0, py))
                        .max(object_coverage(&centered, fw, fh, px - 2.0, py));
                    let mut c = if ring > 0.5 { [0.0, 0.0, 0.0] } else { bg };
                    if cov > 0.5 {
                        c = obj;
                    }
                    out.set(x, y, c);
                }
            }
            out
        }
        ArtKind::Mosaic => {
            let tile = 4;
            let mut out = Image::new(w, h);
            for ty in (0..h).step_by(tile) {
                for tx in (0..w).step_by(tile) {
                    let mut acc = [0.0f32; 3];
                    let mut n = 0.0;
                    for y in ty..(ty + tile).min(h) {
                        for x in tx..(tx + tile).min(w) {
                            let p = natural.get(x, y);
                            for c in 0..3 {
                                acc[c] += p[c];
                            }
                            n += 1.0;
                        }
                    }
                    let jitter = 0.12 * hash_noise(spec.texture_seed, tx, ty);
                    let avg = [
                        (acc[0] / n + jitter).clamp(0.0, 1.0),
                        (acc[1] / n + jitter).clamp(0.0, 1.0),
                        (acc[2] / n + jitter).clamp(0.0, 1.0),
                    ];
                    for y in ty..(ty + tile).min(h) {
                        for x in tx..(tx + tile).min(w) {
                            let grout = x == tx || y == ty;
                            out.set(x, y, if grout { [0.85, 0.82, 0.75] } else { avg });
                        }
                    }
                }
            }
            out
        }
    }
}

/// A fixed palette used by the procedural "artist" styles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteStyle {
    pub name: String,
    /// Colors ordered from darkest to lightest luminance band.
    pub palette: Vec<[f32; 3]>,
    /// Draw dark outlines along luminance edges.
    pub outline: bool,
}

impl PaletteStyle {
    /// Four-band posterization into a blue/teal/gold/coral palette with outlines.
    pub fn posterized() -> Self {
        Self {
            name: "posterized".into(),
            palette: vec![
                [0.11, 0.21, 0.34],
                [0.16, 0.62, 0.56],
                [0.91, 0.77, 0.42],
                [0.91, 0.44, 0.32],
            ],
            outline: true,
        }
    }

    /// Warm two-tone duotone without outlines; a second, distinct style.
    pub fn duotone() -> Self {
        Self {
            name: "duotone".into(),
            palette: vec![[0.30, 0.05, 0.25], [0.98, 0.60, 0.70]],
            outline: false,
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let edges = if self.outline { edge_map(img) } else { Vec::new() };
        let bands = self.palette.len();
        let mut out = Image::new(img.width, img.height);
        for y in 0..img.height {
            for x in 0..img.width {
                let l = img.luminance(x, y);
                let band = ((l * bands as f32) as usize).min(bands - 1);
                let mut c = self.palette[band];
                if self.outline && edges[y * img.width + x] > 0.55 {
                    c = [0.05, 0.05, 0.08];
                }
                out.set(x, y, c);
            }
        }
        out
    }
}

/// Hand label for a fixture record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub is_art: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ArtKind>,
    /// Caption names the medium explicitly.
    pub caption_mentions_art: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub records: usize,
    pub art_records: usize,
    /// Fraction of art records whose caption names the medium.
    pub art_caption_fraction: f64,
    /// Fraction of natural captions carrying a decoy phrase ("party", "cart").
    pub decoy_fraction: f64,
    pub validation_fraction: f64,
    pub image_size: usize,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            records: 200,
            art_records: 40,
            art_caption_fraction: 0.6,
            decoy_fraction: 0.15,
            validation_fraction: 0.1,
            image_size: 32,
            seed: 0,
            id_prefix: "rec".into(),
        }
    }
}

/// In-memory corpus entry produced by [`generate_corpus`].
#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub id: String,
    pub caption: String,
    pub split: String,
    pub image: Image,
    pub label: LabelRecord,
    pub scene: SceneSpec,
}

pub fn generate_corpus(spec: &CorpusSpec) -> Vec<SynthRecord> {
    let mut rng = rng_from_seed(spec.seed);
    // Spread art records deterministically through the corpus.
    let mut is_art = vec![false; spec.records];
    let mut placed = 0;
    while placed < spec.art_records.min(spec.records) {
        let i = rng.random_range(0..spec.records);
        if !is_art[i] {
            is_art[i] = true;
            placed += 1;
        }
    }
    let mut out = Vec::with_capacity(spec.records);
    for (i, art) in is_art.into_iter().enumerate() {
        let scene = SceneSpec::random(&mut rng);
        let id = format!("{}{:05}", spec.id_prefix, i);
        let split = if rng.random_bool(spec.validation_fraction) {
            "validation"
        } else {
            "train"
        };
        let (image, caption, label) = if art {
            let kind = ArtKind::ALL[rng.random_range(0..ArtKind::ALL.len())];
            let mentions = rng.random_bool(spec.art_caption_fraction);
            let caption = if mentions {
                let terms = kind.caption_terms();
                let term = terms[rng.random_range(0..terms.len())];
                format!("{term} of {}", scene.caption())
            } else {
                scene.caption()
            };
            (
                render_art(&scene, kind, spec.image_size),
                caption,
                LabelRecord {
                    id: id.clone(),
                    is_art: true,
                    kind: Some(kind),
                    caption_mentions_art: mentions,
                },
            )
        } else {
            let mut caption = scene.caption();
            if rng.random_bool(spec.decoy_fraction) {
                caption = format!("{caption} {}", DECOYS[rng.random_range(0..DECOYS.len())]);
            }
            (
                render_natural(&scene, spec.image_size),
                caption,
                LabelRecord {
                    id: id.clone(),
                    is_art: false,
                    kind: None,
                    caption_mentions_art: false,
                },
            )
        };
        out.push(SynthRecord {
            id,
            caption,
            split: split.to_string(),
            image,
            label,
            scene,
        });
    }
    out
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Paths written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct WrittenCorpus {
    pub manifest: PathBuf,
    pub labels: PathBuf,
}

/// Writes images, `manifest.jsonl` and `labels.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, records: &[SynthRecord]) -> Result<WrittenCorpus> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut manifest = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        let rel = format!("images/{}.png", r.id);
        r.image.save(&dir.join(&rel))?;
        manifest.push(ManifestRecord {
            id: r.id.clone(),
            image_path: rel,
            caption: r.caption.clone(),
            split: r.split.clone(),
        });
        labels.push(r.label.clone());
    }
    let out = WrittenCorpus {
        manifest: dir.join("manifest.jsonl"),
        labels: dir.join("labels.jsonl"),
    };
    write_jsonl(&out.manifest, &manifest)?;
    write_jsonl(&out.labels, &labels)?;
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Generates `n` natural scenes restyled with `style`, with content captions.
pub fn generate_exemplars(style: &PaletteStyle, n: usize, size: usize, seed: u64) -> Vec<(Image, String)> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let scene = SceneSpec::random(&mut rng);
            (style.apply(&render_natural(&scene, size)), scene.caption())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_generation_is_deterministic() {
        let spec = CorpusSpec {
            records: 20,
            art_records: 5,
            ..Default::default()
        };
        let a = generate_corpus(&spec);
        let b = generate_corpus(&spec);
        assert_eq!(a.len(), 20);
        assert_eq!(a.iter().filter(|r| r.label.is_art).count(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.caption, y.caption);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn renders_are_in_range() {
        let mut rng = rng_from_seed(2);
        for _ in 0..10 {
            let s = SceneSpec::random(&mut rng);
            let n = render_natural(&s, 32);
            assert!(n.data.iter().all(|v| (0.0..=1.0).contains(v)));
            for k in ArtKind::ALL {
                let a = render_art(&s, k, 32);
                assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn posterize_uses_only_palette_colors() {
        let style = PaletteStyle::posterized();
        let mut rng = rng_from_seed(9);
        let img = style.apply(&render_natural(&SceneSpec::random(&mut rng), 32));
        for y in 0..32 {
            for x in 0..32 {
                let p = img.get(x, y);
                assert!(
                    style.palette.contains(&p) || p == [0.05, 0.05, 0.08],
                    "unexpected color {p:?}"
                );
            }
        }
    }
}
