//! Synthetic hard-hat scenes and the on-disk dataset format (binary PPM
//! images plus YOLO-style label files).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::BBox;

pub const NUM_CLASSES: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["hat", "person"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BBox,
}

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![0; width * height * 3] }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `3 x H x W` values scaled to roughly unit range around zero.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = (px[c] as f64 / 255.0 - 0.5) * 4.0;
            }
        }
        out
    }
}

/// Parameters of the scene generator; the generator is a pure function of
/// this spec and the scene index.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_size: usize,
    pub min_targets: usize,
    pub max_targets: usize,
    /// Side range of helmeted heads, pixels.
    pub hat_size: (usize, usize),
    pub person_width: (usize, usize),
    pub person_height: (usize, usize),
    /// Chance that a target is placed overlapping an earlier one.
    pub overlap_prob: f64,
    /// Largest fraction of an earlier target's box a later one may cover.
    pub max_occlusion: f64,
    /// Upper bound on helmet-coloured clutter rectangles per scene.
    pub max_distractors: usize,
    /// Amplitude of uniform per-pixel noise.
    pub noise: u8,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 42,
            image_size: 64,
            min_targets: 1,
            max_targets: 4,
            hat_size: (8, 14),
            person_width: (8, 12),
            person_height: (18, 28),
            overlap_prob: 0.2,
            max_occlusion: 0.4,
            max_distractors: 3,
            noise: 12,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if self.min_targets == 0 || self.min_targets > self.max_targets {
            return Err(Error::invalid(format!(
                "target count range {}..={} is empty or starts at zero",
                self.min_targets, self.max_targets
            )));
        }
        for (name, (lo, hi)) in
            [("hat_size", self.hat_size), ("person_width", self.person_width), ("person_height", self.person_height)]
        {
            if lo < 4 || lo > hi || hi + 2 > s {
                return Err(Error::invalid(format!("{name} range {lo}..={hi} does not fit a {s}px image")));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::invalid(format!("overlap_prob {} outside [0, 1]", self.overlap_prob)));
        }
        if !(0.0..=1.0).contains(&self.max_occlusion) {
            return Err(Error::invalid(format!("max_occlusion {} outside [0, 1]", self.max_occlusion)));
        }
        Ok(())
    }
}

const HELMET: [[u8; 3]; 5] = [[232, 200, 32], [236, 236, 232], [208, 44, 40], [44, 92, 212], [240, 132, 24]];
const SKIN: [[u8; 3]; 4] = [[224, 172, 140], [198, 134, 100], [141, 85, 54], [250, 205, 170]];
const CLOTH: [[u8; 3]; 6] = [[56, 60, 120], [40, 100, 60], [120, 50, 50], [84, 84, 84], [28, 28, 32], [180, 110, 40]];
const HAIR: [[u8; 3]; 3] = [[30, 24, 20], [90, 60, 30], [60, 40, 30]];

/// Painter that records the tight extent of what it paints.
struct Canvas<'a> {
    img: &'a mut Image,
    extent: Option<(usize, usize, usize, usize)>,
}

impl Canvas<'_> {
    fn paint(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x >= self.img.width || y >= self.img.height {
            return;
        }
        self.img.set(x, y, rgb);
        self.extent = Some(match self.extent {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }

    fn rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, rgb: [u8; 3]) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.paint(x, y, rgb);
            }
        }
    }

    fn tight_box(&self) -> BBox {
        let (x0, y0, x1, y1) = self.extent.expect("painted at least one pixel");
        BBox::from_corners(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64).expect("non-empty extent")
    }
}

fn shade(c: [u8; 3], k: f64) -> [u8; 3] {
    c.map(|v| (v as f64 * k).round().clamp(0.0, 255.0) as u8)
}

/// Helmet dome over a face; `d` wide and about `1.15 d` tall.
fn draw_hat(img: &mut Image, x0: usize, y0: usize, d: usize, rng: &mut ChaCha8Rng) -> BBox {
    let helmet = *HELMET.choose(rng).unwrap();
    let skin = *SKIN.choose(rng).unwrap();
    let h = (d as f64 * 1.15).round() as usize;
    let r = d as f64 / 2.0;
    let (cx, cy) = (x0 as f64 + r, y0 as f64 + r);
    let mut c = Canvas { img, extent: None };
    let brim = y0 + (r.floor() as usize);
    for y in y0..brim {
        for x in x0..x0 + d {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                c.paint(x, y, helmet);
            }
        }
    }
    c.rect(x0, brim, d, 1, shade(helmet, 0.8));
    let inset = (d as f64 * 0.15).round() as usize;
    let face_h = h - (brim + 1 - y0);
    c.rect(x0 + inset, brim + 1, d - 2 * inset, face_h, skin);
    if face_h >= 3 && d >= 9 {
        let eye_y = brim + 2;
        c.paint(x0 + d / 3, eye_y, [40, 30, 30]);
        c.paint(x0 + d - 1 - d / 3, eye_y, [40, 30, 30]);
    }
    c.tight_box()
}

/// Bare head on a clothed body, `w x h`.
fn draw_person(img: &mut Image, x0: usize, y0: usize, w: usize, h: usize, rng: &mut ChaCha8Rng) -> BBox {
    let skin = *SKIN.choose(rng).unwrap();
    let hair = *HAIR.choose(rng).unwrap();
    let cloth = *CLOTH.choose(rng).unwrap();
    let legs = shade(*CLOTH.choose(rng).unwrap(), 0.7);
    let head_w = ((w as f64 * 0.6).round() as usize).max(3);
    let head_h = ((h as f64 * 0.25).round() as usize).max(4);
    let hx = x0 + (w - head_w) / 2;
    let mut c = Canvas { img, extent: None };
    c.rect(hx, y0, head_w, 2, hair);
    c.rect(hx, y0 + 2, head_w, head_h - 2, skin);
    let torso_h = (h - head_h) * 3 / 5;
    c.rect(x0, y0 + head_h, w, torso_h, cloth);
    let leg_top = y0 + head_h + torso_h;
    let leg_w = (w * 2 / 5).max(1);
    c.rect(x0 + 1, leg_top, leg_w, y0 + h - leg_top, legs);
    c.rect(x0 + w - 1 - leg_w, leg_top, leg_w, y0 + h - leg_top, legs);
    c.tight_box()
}

fn intersects_with_gap(a: (usize, usize, usize, usize), b: &BBox, gap: f64) -> bool {
    let (x, y, w, h) = (a.0 as f64, a.1 as f64, a.2 as f64, a.3 as f64);
    let [bx1, by1, bx2, by2] = b.corners();
    x < bx2 + gap && bx1 < x + w + gap && y < by2 + gap && by1 < y + h + gap
}

/// Fraction of `b`'s area inside the rectangle `a = (x, y, w, h)`.
fn covered_fraction(a: (usize, usize, usize, usize), b: &BBox) -> f64 {
    let cover = BBox::from_corners(a.0 as f64, a.1 as f64, (a.0 + a.2) as f64, (a.1 + a.3) as f64)
        .expect("placed targets have positive size");
    let [ax1, ay1, ax2, ay2] = cover.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih / b.area()
}

/// Renders scene `index`: noisy background, clutter in helmet colours, then
/// the labelled targets.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> (Image, Vec<GroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let s = spec.image_size;
    let mut img = Image::new(s, s);

    let base: [f64; 3] = [rng.gen_range(70.0..190.0), rng.gen_range(70.0..190.0), rng.gen_range(60.0..170.0)];
    let grad: [f64; 2] = [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)];
    for y in 0..s {
        for x in 0..s {
            let t = grad[0] * x as f64 + grad[1] * y as f64;
            img.set(x, y, base.map(|b| (b + t).clamp(0.0, 255.0) as u8));
        }
    }
    let n_clutter = rng.gen_range(0..=spec.max_distractors);
    for _ in 0..n_clutter {
        let color = *HELMET.choose(&mut rng).unwrap();
        let (w, h) = (rng.gen_range(3..=12), rng.gen_range(3..=12));
        let (x0, y0) = (rng.gen_range(0..=s - w), rng.gen_range(0..=s - h));
        let mut c = Canvas { img: &mut img, extent: None };
        if rng.gen_bool(0.5) {
            c.rect(x0, y0, w, h, color);
        } else {
            let r = w.min(h) as f64 / 2.0;
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let (dx, dy) = (x as f64 + 0.5 - x0 as f64 - r, y as f64 + 0.5 - y0 as f64 - r);
                    if dx * dx + dy * dy <= r * r {
                        c.paint(x, y, color);
                    }
                }
            }
        }
    }

    let n_targets = rng.gen_range(spec.min_targets..=spec.max_targets);
    let mut gts: Vec<GroundTruth> = Vec::new();
    for _ in 0..n_targets {
        let class = rng.gen_range(0..NUM_CLASSES);
        let (w, h) = if class == 0 {
            let d = rng.gen_range(spec.hat_size.0..=spec.hat_size.1);
            (d, (d as f64 * 1.15).round() as usize)
        } else {
            (
                rng.gen_range(spec.person_width.0..=spec.person_width.1),
                rng.gen_range(spec.person_height.0..=spec.person_height.1),
            )
        };
        let want_overlap = !gts.is_empty() && rng.gen_bool(spec.overlap_prob);
        let mut placed = None;
        for _ in 0..64 {
            let (x0, y0) = if want_overlap {
                let other = gts.choose(&mut rng).unwrap().bbox;
                let [ox1, oy1, ox2, oy2] = other.corners();
                let jitter = |lo: f64, hi: f64, size: usize, rng: &mut ChaCha8Rng| {
                    let lo = (lo - size as f64 * 0.6).max(0.0) as usize;
                    let hi = ((hi - size as f64 * 0.4).max(lo as f64) as usize).min(s - size);
                    rng.gen_range(lo.min(hi)..=hi)
                };
                (jitter(ox1, ox2, w, &mut rng), jitter(oy1, oy2, h, &mut rng))
            } else {
                (rng.gen_range(0..=s - w), rng.gen_range(0..=s - h))
            };
            let cand = (x0, y0, w, h);
            let ok = if want_overlap {
                gts.iter().any(|g| intersects_with_gap(cand, &g.bbox, 0.0))
                    && gts.iter().all(|g| covered_fraction(cand, &g.bbox) <= spec.max_occlusion)
            } else {
                !gts.iter().any(|g| intersects_with_gap(cand, &g.bbox, 1.0))
            };
            if ok {
                placed = Some(cand);
                break;
            }
        }
        let Some((x0, y0, w, h)) = placed else { continue };
        let bbox =
            if class == 0 { draw_hat(&mut img, x0, y0, w, &mut rng) } else { draw_person(&mut img, x0, y0, w, h, &mut rng) };
        gts.push(GroundTruth { class, bbox });
    }

    let amp = spec.noise as i16;
    if amp > 0 {
        for v in img.pixels.iter_mut() {
            let n: i16 = rng.gen_range(-amp..=amp);
            *v = (*v as i16 + n).clamp(0, 255) as u8;
        }
    }
    (img, gts)
}

/// Mirrors the scene horizontally when `flip`, then shifts it by `(dx, dy)`
/// pixels, replicating edge pixels into the uncovered border. Boxes move
/// exactly; callers keep them inside the image.
pub fn flip_shift(img: &Image, labels: &[GroundTruth], flip: bool, dx: i64, dy: i64) -> (Image, Vec<GroundTruth>) {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let sy = (y - dy).clamp(0, h - 1);
            let sx = (x - dx).clamp(0, w - 1);
            let sx = if flip { w - 1 - sx } else { sx };
            out.set(x as usize, y as usize, img.get(sx as usize, sy as usize));
        }
    }
    let boxes = labels
        .iter()
        .map(|g| {
            let cx = if flip { w as f64 - g.bbox.cx } else { g.bbox.cx };
            GroundTruth { class: g.class, bbox: g.bbox.translated(dx as f64 + cx - g.bbox.cx, dy as f64) }
        })
        .collect();
    (out, boxes)
}

/// Random horizontal flip and a shift of at most `max_shift` pixels per axis
/// that keeps every box inside the image.
pub fn random_flip_shift(
    img: &Image,
    labels: &[GroundTruth],
    max_shift: usize,
    rng: &mut impl Rng,
) -> (Image, Vec<GroundTruth>) {
    let flip = rng.gen_bool(0.5);
    let (w, h) = (img.width as f64, img.height as f64);
    let mut range = |lo_edge: f64, hi_edge: f64, extent: f64| -> i64 {
        let m = max_shift as f64;
        let lo = (-lo_edge).max(-m).ceil() as i64;
        let hi = (extent - hi_edge).min(m).floor() as i64;
        if lo >= hi {
            0
        } else {
            rng.gen_range(lo..=hi)
        }
    };
    let x_edges = labels.iter().map(|g| {
        let [x1, _, x2, _] = g.bbox.corners();
        if flip {
            (w - x2, w - x1)
        } else {
            (x1, x2)
        }
    });
    let (min_x, max_x) = x_edges.fold((w, 0.0_f64), |(a, b), (x1, x2)| (a.min(x1), b.max(x2)));
    let (min_y, max_y) = labels.iter().fold((h, 0.0_f64), |(a, b), g| {
        let [_, y1, _, y2] = g.bbox.corners();
        (a.min(y1), b.max(y2))
    });
    let dx = range(min_x, max_x, w);
    let dy = range(min_y, max_y, h);
    flip_shift(img, labels, flip, dx, dy)
}

/// Images with their labels, held in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<Vec<GroundTruth>>,
}

impl Dataset {
    /// Scenes `start .. start + count` of the generator.
    pub fn synthetic(spec: &SceneSpec, start: u64, count: usize) -> Self {
        let (images, labels) = (start..start + count as u64).map(|i| generate_scene(spec, i)).unzip();
        Dataset { images, labels }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.width, i.height))
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// Writes `NNNNNN.ppm` and `NNNNNN.txt` per image.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, (img, gts)) in self.images.iter().zip(&self.labels).enumerate() {
            write_ppm(&dir.join(format!("{i:06}.ppm")), img)?;
            fs::write(dir.join(format!("{i:06}.txt")), format_labels(gts, img.width, img.height))?;
        }
        Ok(())
    }

    /// Loads every `*.ppm` in `dir` (sorted by name) with its label file.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        paths.sort();
        let mut ds = Dataset::default();
        for p in paths {
            let img = read_ppm(&p)?;
            let label_path = p.with_extension("txt");
            let text = fs::read_to_string(&label_path)?;
            let gts = parse_labels(&text, img.width, img.height, &label_path)?;
            ds.images.push(img);
            ds.labels.push(gts);
        }
        Ok(ds)
    }
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?.to_string());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let need = w * h * 3;
    if w == 0 || h == 0 || bytes.len() < pos + need {
        return Err(bad("pixel data shorter than header promises"));
    }
    Ok(Image { width: w, height: h, pixels: bytes[pos..pos + need].to_vec() })
}

/// `class cx cy w h` per line, normalised by the image size.
pub fn format_labels(gts: &[GroundTruth], width: usize, height: usize) -> String {
    let (fw, fh) = (width as f64, height as f64);
    gts.iter()
        .map(|g| format!("{} {} {} {} {}\n", g.class, g.bbox.cx / fw, g.bbox.cy / fh, g.bbox.w / fw, g.bbox.h / fh))
        .collect()
}

pub fn parse_labels(text: &str, width: usize, height: usize, path: &Path) -> Result<Vec<GroundTruth>> {
    let (fw, fh) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg: format!("line {}: {msg}", n + 1) };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", parts.len())));
        }
        let class: usize = parts[0].parse().map_err(|_| bad(format!("bad class `{}`", parts[0])))?;
        if class >= NUM_CLASSES {
            return Err(bad(format!("class {class} out of range")));
        }
        let v: Vec<f64> = parts[1..]
            .iter()
            .map(|p| p.parse::<f64>().map_err(|_| bad(format!("bad number `{p}`"))))
            .collect::<Result<_>>()?;
        if !(0.0..=1.0).contains(&v[0]) || !(0.0..=1.0).contains(&v[1]) {
            return Err(bad("box centre outside the image".into()));
        }
        let bbox = BBox::new(v[0] * fw, v[1] * fh, v[2] * fw, v[3] * fh).map_err(|e| bad(e.to_string()))?;
        out.push(GroundTruth { class, bbox });
    }
    Ok(out)
}
