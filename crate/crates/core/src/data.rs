//! Synthetic aerial-style scenes, bicubic degradation, tiling and annotation files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::boxes::GtBox;
use crate::error::{Error, Result};
use crate::resample;
use crate::tensor::Array;

/// Object shapes drawn by the generator; the discriminant is the class id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    /// Round storage-tank lookalike.
    Disk,
    /// Vehicle-like filled rectangle.
    Rectangle,
    /// Ship-like thin ellipse.
    Elongated,
    /// Airplane-like cross.
    Cross,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [
        ObjectClass::Disk,
        ObjectClass::Rectangle,
        ObjectClass::Elongated,
        ObjectClass::Cross,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Disk => "disk",
            ObjectClass::Rectangle => "rectangle",
            ObjectClass::Elongated => "elongated",
            ObjectClass::Cross => "cross",
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            ObjectClass::Disk => [0.92, 0.92, 0.85],
            ObjectClass::Rectangle => [0.85, 0.2, 0.15],
            ObjectClass::Elongated => [0.2, 0.35, 0.9],
            ObjectClass::Cross => [0.95, 0.85, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// `(height, width)` in HR pixels.
    pub canvas: (usize, usize),
    pub min_objects: usize,
    pub max_objects: usize,
    /// Longest object side range in HR pixels; drawn log-uniformly so most objects are small.
    pub min_size: f64,
    pub max_size: f64,
    /// Background clutter strength in `[0, 1]`.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas: (128, 128),
            min_objects: 2,
            max_objects: 5,
            min_size: 12.0,
            max_size: 40.0,
            clutter: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h == 0 || w == 0 {
            return Err(Error::Config("canvas must be non-empty".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects > max_objects".into()));
        }
        if !(self.min_size >= 2.0 && self.min_size <= self.max_size) {
            return Err(Error::Config(format!(
                "object size range [{}, {}] is invalid",
                self.min_size, self.max_size
            )));
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return Err(Error::Config("clutter must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One labeled object; `bbox` is `[x, y, w, h]` in HR pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: [f64; 4],
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Annotation {
    pub fn new(image_id: u64, class_id: usize, bbox: [f64; 4]) -> Self {
        Self {
            image_id,
            class_id,
            bbox,
            extra: Map::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub hr: Array,
    pub lr: Array,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    pub fn from_hr(image_id: u64, hr: Array, annotations: Vec<Annotation>) -> Result<Self> {
        let lr = degrade(&hr)?;
        Ok(Self {
            image_id,
            hr,
            lr,
            annotations,
        })
    }

    /// Normalized boxes relative to the HR frame.
    pub fn gt_boxes(&self) -> Result<Vec<GtBox>> {
        let (h, w) = (self.hr.shape()[0] as f64, self.hr.shape()[1] as f64);
        self.annotations
            .iter()
            .map(|a| GtBox::from_pixels(a.bbox, a.class_id, w, h))
            .collect()
    }
}

/// Renders a scene. The returned image is quantized to 8-bit levels so it
/// survives a PNG round trip unchanged.
pub fn synth_scene(spec: &SceneSpec, image_id: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ image_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (h, w) = spec.canvas;
    let mut img = background(&mut rng, h, w, spec.clutter);
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<[f64; 4]> = Vec::new();
    let mut annotations = Vec::with_capacity(n);
    for k in 0..n {
        let class = ObjectClass::ALL[rng.random_range(0..4)];
        let mut done = false;
        for _ in 0..200 {
            let size = (rng.random_range(spec.min_size.ln()..=spec.max_size.ln())).exp();
            let shape = Shape::sample(&mut rng, class, size);
            let (ew, eh) = shape.extent();
            if ew + 2.0 > w as f64 || eh + 2.0 > h as f64 {
                continue;
            }
            let x0 = rng.random_range(1.0..(w as f64 - ew - 1.0).max(1.0 + 1e-9));
            let y0 = rng.random_range(1.0..(h as f64 - eh - 1.0).max(1.0 + 1e-9));
            let frame = [x0 - 2.0, y0 - 2.0, x0 + ew + 2.0, y0 + eh + 2.0];
            if placed.iter().any(|p| overlaps(p, &frame)) {
                continue;
            }
            let color = jitter(&mut rng, class.base_color());
            if let Some(bbox) = draw(&mut img, &shape, x0, y0, color) {
                placed.push(frame);
                annotations.push(Annotation::new(image_id, class.id(), bbox));
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::Generation(format!(
                "could not place object {k} of {n} on a {h}x{w} canvas"
            )));
        }
    }
    img.data_mut().iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    Sample::from_hr(image_id, img, annotations)
}

fn overlaps(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3]) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0))
}

/// Smooth ground gradient plus unlabeled clutter (specks and faint streaks).
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize, clutter: f64) -> Array {
    let base = [
        rng.random_range(0.25..0.4),
        rng.random_range(0.3..0.45),
        rng.random_range(0.2..0.3),
    ];
    let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let mut img = Array::from_fn(&[h, w, 3], |i| {
        let (y, x, c) = (i / (3 * w), (i / 3) % w, i % 3);
        base[c] + gx * x as f64 / w as f64 + gy * y as f64 / h as f64
    });
    let d = img.data_mut();
    for v in d.iter_mut() {
        *v += clutter * rng.random_range(-0.04..0.04);
    }
    let specks = (clutter * (h * w) as f64 / 200.0) as usize;
    for _ in 0..specks {
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
        let s = rng.random_range(-0.12..0.12) * clutter;
        for c in 0..3 {
            d[(y * w + x) * 3 + c] += s;
        }
    }
    let streaks = (clutter * 6.0) as usize;
    for _ in 0..streaks {
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
        let len = rng.random_range(8..24usize);
        let horizontal = rng.random_bool(0.5);
        let s = rng.random_range(0.05..0.1) * clutter;
        for t in 0..len {
            let (yy, xx) = if horizontal { (y, x + t) } else { (y + t, x) };
            if yy < h && xx < w {
                for c in 0..3 {
                    d[(yy * w + xx) * 3 + c] += s;
                }
            }
        }
    }
    img
}

enum Shape {
    Disk { r: f64 },
    Rect { w: f64, h: f64 },
    Ellipse { a: f64, b: f64 },
    Cross { len: f64, span: f64, thick: f64, vertical: bool },
}

impl Shape {
    fn sample(rng: &mut ChaCha8Rng, class: ObjectClass, size: f64) -> Self {
        match class {
            ObjectClass::Disk => Shape::Disk { r: size / 2.0 },
            ObjectClass::Rectangle => {
                let short = size * rng.random_range(0.45..0.6);
                if rng.random_bool(0.5) {
                    Shape::Rect { w: size, h: short }
                } else {
                    Shape::Rect { w: short, h: size }
                }
            }
            ObjectClass::Elongated => {
                let thin = (size * rng.random_range(0.22..0.3)).max(3.0);
                if rng.random_bool(0.5) {
                    Shape::Ellipse { a: size / 2.0, b: thin / 2.0 }
                } else {
                    Shape::Ellipse { a: thin / 2.0, b: size / 2.0 }
                }
            }
            ObjectClass::Cross => Shape::Cross {
                len: size,
                span: size * rng.random_range(0.75..0.95),
                thick: (size * 0.2).max(2.0),
                vertical: rng.random_bool(0.5),
            },
        }
    }

    /// Bounding `(width, height)` of the shape.
    fn extent(&self) -> (f64, f64) {
        match *self {
            Shape::Disk { r } => (2.0 * r, 2.0 * r),
            Shape::Rect { w, h } => (w, h),
            Shape::Ellipse { a, b } => (2.0 * a, 2.0 * b),
            Shape::Cross { len, span, vertical, .. } => {
                if vertical {
                    (span, len)
                } else {
                    (len, span)
                }
            }
        }
    }

    /// Whether local point `(x, y)` (origin at the extent's top-left) is inside.
    fn contains(&self, x: f64, y: f64) -> bool {
        let (ew, eh) = self.extent();
        let (dx, dy) = (x - ew / 2.0, y - eh / 2.0);
        match *self {
            Shape::Disk { r } => dx * dx + dy * dy <= r * r,
            Shape::Rect { w, h } => (0.0..w).contains(&x) && (0.0..h).contains(&y),
            Shape::Ellipse { a, b } => (dx / a).powi(2) + (dy / b).powi(2) <= 1.0,
            Shape::Cross { len, span, thick, vertical } => {
                let (along, across) = if vertical { (dy, dx) } else { (dx, dy) };
                // fuselage along the long axis, wings across it slightly ahead of center
                let body = along.abs() <= len / 2.0 && across.abs() <= thick / 2.0;
                let wing = (along + len * 0.1).abs() <= thick / 2.0 && across.abs() <= span / 2.0;
                body || wing
            }
        }
    }
}

/// Paints pixels whose center falls inside the shape; returns the tight pixel box.
fn draw(img: &mut Array, shape: &Shape, x0: f64, y0: f64, color: [f64; 3]) -> Option<[f64; 4]> {
    let w = img.shape()[1];
    let h = img.shape()[0];
    let (ew, eh) = shape.extent();
    let (xa, xb) = (x0.floor() as usize, ((x0 + ew).ceil() as usize).min(w));
    let (ya, yb) = (y0.floor() as usize, ((y0 + eh).ceil() as usize).min(h));
    let mut bounds: Option<[usize; 4]> = None;
    let d = img.data_mut();
    for y in ya..yb {
        for x in xa..xb {
            if shape.contains(x as f64 + 0.5 - x0, y as f64 + 0.5 - y0) {
                for c in 0..3 {
                    d[(y * w + x) * 3 + c] = color[c];
                }
                let b = bounds.get_or_insert([x, y, x, y]);
                b[0] = b[0].min(x);
                b[1] = b[1].min(y);
                b[2] = b[2].max(x);
                b[3] = b[3].max(y);
            }
        }
    }
    bounds.map(|[xa, ya, xb, yb]| {
        [
            xa as f64,
            ya as f64,
            (xb + 1 - xa) as f64,
            (yb + 1 - ya) as f64,
        ]
    })
}

/// ×½ bicubic downsampling with anti-aliasing, clamped to `[0, 1]`.
pub fn degrade(hr: &Array) -> Result<Array> {
    Ok(degrade_unclamped(hr)?.map(|v| v.clamp(0.0, 1.0)))
}

/// [`degrade`] without the final clamp; linear in its input.
pub fn degrade_unclamped(hr: &Array) -> Result<Array> {
    let s = hr.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected an [H, W, C] image, got {s:?}")));
    }
    if !s[0].is_multiple_of(2) || !s[1].is_multiple_of(2) {
        return Err(Error::Contract(format!("degrade needs even sides, got {}x{}", s[0], s[1])));
    }
    Ok(resample::resize_bicubic(hr, s[0] / 2, s[1] / 2))
}

/// Bicubic ×2 upsampling: the SR baseline.
pub fn upscale(lr: &Array) -> Array {
    let s = lr.shape();
    resample::resize_clamped(lr, s[0] * 2, s[1] * 2)
}

/// Top-left offsets of the tiles along one axis.
pub fn tile_origins(side: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if side <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let n = (side - tile).div_ceil(stride) + 1;
    (0..n).map(|k| k * stride).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    /// `(y, x)` of the tile's top-left corner in the source image.
    pub origin: (usize, usize),
    /// `[tile, tile, C]`, zero-padded past the source edge.
    pub image: Array,
    /// Boxes clipped to the tile, in tile pixels.
    pub annotations: Vec<Annotation>,
}

/// Fraction of a box's area that must survive clipping for it to be kept.
pub const MIN_KEPT_AREA: f64 = 0.3;

pub fn tile(image: &Array, annotations: &[Annotation], tile_size: usize, overlap: usize) -> Result<Vec<Tile>> {
    if tile_size == 0 || overlap >= tile_size {
        return Err(Error::Config(format!(
            "overlap {overlap} must be smaller than tile size {tile_size}"
        )));
    }
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = Vec::new();
    for &oy in &tile_origins(h, tile_size, overlap) {
        for &ox in &tile_origins(w, tile_size, overlap) {
            let mut data = vec![0.0; tile_size * tile_size * c];
            for y in 0..tile_size.min(h - oy) {
                let n = tile_size.min(w - ox) * c;
                let src = ((oy + y) * w + ox) * c;
                data[y * tile_size * c..y * tile_size * c + n].copy_from_slice(&image.data()[src..src + n]);
            }
            let (tx0, ty0) = (ox as f64, oy as f64);
            let (tx1, ty1) = (tx0 + tile_size as f64, ty0 + tile_size as f64);
            let anns = annotations
                .iter()
                .filter_map(|a| {
                    let [x, y, bw, bh] = a.bbox;
                    let (x0, y0) = (x.max(tx0), y.max(ty0));
                    let (x1, y1) = ((x + bw).min(tx1), (y + bh).min(ty1));
                    if x1 <= x0 || y1 <= y0 {
                        return None;
                    }
                    let kept = (x1 - x0) * (y1 - y0);
                    (kept >= MIN_KEPT_AREA * bw * bh).then(|| Annotation {
                        bbox: [x0 - tx0, y0 - ty0, x1 - x0, y1 - y0],
                        ..a.clone()
                    })
                })
                .collect();
            out.push(Tile {
                origin: (oy, ox),
                image: Array::new(vec![tile_size, tile_size, c], data),
                annotations: anns,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// One split's annotation index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl AnnotationFile {
    pub fn synthetic_categories() -> Vec<Category> {
        ObjectClass::ALL
            .iter()
            .map(|c| Category {
                id: c.id(),
                name: c.name().into(),
                extra: Map::new(),
            })
            .collect()
    }

    /// Field paths that this version does not interpret.
    pub fn unknown_fields(&self) -> Vec<String> {
        let mut out: Vec<String> = self.extra.keys().cloned().collect();
        for (i, r) in self.images.iter().enumerate() {
            out.extend(r.extra.keys().map(|k| format!("images[{i}].{k}")));
        }
        for (i, a) in self.annotations.iter().enumerate() {
            out.extend(a.extra.keys().map(|k| format!("annotations[{i}].{k}")));
        }
        for (i, c) in self.categories.iter().enumerate() {
            out.extend(c.extra.keys().map(|k| format!("categories[{i}].{k}")));
        }
        out
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let err = |context: String| Error::Parse {
            path: path.to_path_buf(),
            context,
        };
        for (i, a) in self.annotations.iter().enumerate() {
            let [x, y, w, h] = a.bbox;
            if !a.bbox.iter().all(|v| v.is_finite()) {
                return Err(err(format!("annotations[{i}].bbox: non-finite value")));
            }
            if w <= 0.0 {
                return Err(err(format!("annotations[{i}].bbox: width {w} must be positive")));
            }
            if h <= 0.0 {
                return Err(err(format!("annotations[{i}].bbox: height {h} must be positive")));
            }
            if x < 0.0 || y < 0.0 {
                return Err(err(format!("annotations[{i}].bbox: negative origin")));
            }
            if !self.images.iter().any(|r| r.id == a.image_id) {
                return Err(err(format!("annotations[{i}].image_id: unknown image {}", a.image_id)));
            }
        }
        Ok(())
    }
}

pub fn load_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path)?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        context: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    file.validate(path)?;
    let unknown = file.unknown_fields();
    if !unknown.is_empty() {
        log::warn!(
            "{}: preserving unrecognized fields {}",
            path.display(),
            unknown.join(", ")
        );
    }
    Ok(file)
}

pub fn save_annotations(path: &Path, file: &AnnotationFile) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(file)?)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_png(path: &Path, img: &Array) -> Result<()> {
    let s = img.shape();
    let (h, w) = (s[0], s[1]);
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    match s.get(2) {
        Some(3) => image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer matches dims")
            .save(path)?,
        Some(1) | None => image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer matches dims")
            .save(path)?,
        Some(c) => return Err(Error::Shape(format!("cannot write a {c}-channel PNG"))),
    }
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Array> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Array::new(vec![h, w, 3], data))
}

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub scene: SceneSpec,
    pub tile_size: Option<usize>,
    pub overlap: usize,
    pub images: usize,
}

/// Writes a dataset directory: `images/*.png`, the annotation index and a manifest.
///
/// With `tile_size`, every scene is cut into tiles and each tile becomes an image.
pub fn write_dataset(
    dir: &Path,
    spec: &SceneSpec,
    count: usize,
    tile_size: Option<usize>,
    overlap: usize,
) -> Result<Manifest> {
    use rayon::prelude::*;
    fs::create_dir_all(dir.join("images"))?;
    let scenes: Vec<Sample> = (0..count as u64)
        .into_par_iter()
        .map(|i| synth_scene(spec, i))
        .collect::<Result<_>>()?;
    let mut items: Vec<(Array, Vec<Annotation>)> = Vec::new();
    for s in scenes {
        match tile_size {
            Some(t) => {
                for tl in tile(&s.hr, &s.annotations, t, overlap)? {
                    items.push((tl.image, tl.annotations));
                }
            }
            None => items.push((s.hr, s.annotations)),
        }
    }
    let mut index = AnnotationFile {
        categories: AnnotationFile::synthetic_categories(),
        ..AnnotationFile::default()
    };
    for (id, (img, anns)) in items.into_iter().enumerate() {
        let id = id as u64;
        let file = format!("images/{id:06}.png");
        save_png(&dir.join(&file), &img)?;
        index.images.push(ImageRecord {
            id,
            file,
            width: img.shape()[1],
            height: img.shape()[0],
            extra: Map::new(),
        });
        index.annotations.extend(anns.into_iter().map(|a| Annotation { image_id: id, ..a }));
    }
    let manifest = Manifest {
        seed: spec.seed,
        count,
        scene: spec.clone(),
        tile_size,
        overlap,
        images: index.images.len(),
    };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    // the index goes last so a partially written directory is never mistaken for a dataset
    save_annotations(&dir.join(ANNOTATION_FILE), &index)?;
    Ok(manifest)
}

/// Loads every image of a dataset directory and pairs it with its LR version.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let index = load_annotations(&dir.join(ANNOTATION_FILE))?;
    index
        .images
        .iter()
        .map(|r| {
            let hr = load_png(&dir.join(&r.file))?;
            let anns = index.annotations.iter().filter(|a| a.image_id == r.id).cloned().collect();
            Sample::from_hr(r.id, hr, anns)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn scenes_are_deterministic_and_contained() {
        let spec = SceneSpec {
            seed: 3,
            ..SceneSpec::default()
        };
        for id in 0..6 {
            let a = synth_scene(&spec, id).unwrap();
            let b = synth_scene(&spec, id).unwrap();
            assert_eq!(a, b);
            assert!(a.annotations.len() >= spec.min_objects && a.annotations.len() <= spec.max_objects);
            for ann in &a.annotations {
                let [x, y, w, h] = ann.bbox;
                assert!(x >= 0.0 && w > 0.0 && x + w <= 128.0);
                assert!(y >= 0.0 && h > 0.0 && y + h <= 128.0);
                assert!(ann.class_id < 4);
            }
            assert_eq!(a.lr.shape(), &[64, 64, 3]);
        }
    }

    #[test]
    fn empty_scene_is_valid() {
        let spec = SceneSpec {
            min_objects: 0,
            max_objects: 0,
            ..SceneSpec::default()
        };
        let s = synth_scene(&spec, 1).unwrap();
        assert!(s.annotations.is_empty());
        assert!(s.hr.is_finite());
    }

    #[test]
    fn crowded_scene_fails_to_place() {
        let spec = SceneSpec {
            canvas: (32, 32),
            min_objects: 30,
            max_objects: 30,
            ..SceneSpec::default()
        };
        assert!(matches!(synth_scene(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn degrade_preserves_constants_and_rejects_odd() {
        let img = Array::full(&[10, 12, 3], 0.37);
        let lr = degrade(&img).unwrap();
        assert_eq!(lr.shape(), &[5, 6, 3]);
        assert!(lr.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        assert!(matches!(degrade(&Array::zeros(&[9, 12, 3])), Err(Error::Contract(_))));
    }

    /// Direct 2-D evaluation of the anti-aliased ×½ cubic filter.
    fn reference_downsample(img: &Array) -> Array {
        let s = img.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        let kernel = |x: f64| {
            let a = -0.5;
            let x = x.abs();
            if x < 1.0 {
                (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
            } else if x < 2.0 {
                a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
            } else {
                0.0
            }
        };
        let weights = |o: usize, n: usize| -> Vec<f64> {
            // output center in input coordinates; kernel stretched by 2
            let center = 2.0 * (o as f64 + 0.5);
            let raw: Vec<f64> = (0..n).map(|i| kernel((i as f64 + 0.5 - center) / 2.0)).collect();
            let t: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / t).collect()
        };
        Array::from_fn(&[h / 2, w / 2, c], |i| {
            let (y, x, ch) = (i / (c * (w / 2)), (i / c) % (w / 2), i % c);
            let (wy, wx) = (weights(y, h), weights(x, w));
            let mut acc = 0.0;
            for (yy, a) in wy.iter().enumerate() {
                for (xx, b) in wx.iter().enumerate() {
                    acc += a * b * img.data()[(yy * w + xx) * c + ch];
                }
            }
            acc
        })
    }

    #[test]
    fn checkerboard_matches_direct_convolution() {
        let img = Array::from_fn(&[16, 16, 1], |i| ((i / 16 + i % 16) % 2) as f64);
        let got = degrade_unclamped(&img).unwrap();
        let want = reference_downsample(&img);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // interior samples see a symmetric window over the period-2 pattern
        assert!((got.data()[2 * 8 + 2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nearest_round_trip_on_smooth_image() {
        let x = Array::from_fn(&[16, 16, 3], |i| {
            let (y, xx) = ((i / 48) as f64, ((i / 3) % 16) as f64);
            0.5 + 0.3 * (0.3 * y).sin() * (0.2 * xx).cos()
        });
        let up = Array::from_fn(&[32, 32, 3], |i| {
            let (y, xx, c) = (i / 96, (i / 3) % 32, i % 3);
            x.data()[((y / 2) * 16 + xx / 2) * 3 + c]
        });
        let back = degrade(&up).unwrap();
        let mae = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        assert!(mae < 1e-2, "{mae}");
    }

    #[test]
    fn tile_counts() {
        assert_eq!(tile_origins(1024, 1024, 200).len(), 1);
        assert_eq!(tile_origins(2048, 1024, 200), vec![0, 824, 1648]);
        assert_eq!(tile_origins(512, 256, 64).len(), 3);
        let img = Array::zeros(&[512, 512, 3]);
        assert_eq!(tile(&img, &[], 256, 64).unwrap().len(), 9);
        assert!(tile(&img, &[], 64, 64).is_err());
        // larger than the image: one padded tile
        let t = tile(&Array::full(&[10, 10, 3], 1.0), &[], 16, 4).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].image.data()[(15 * 16 + 15) * 3], 0.0);
    }

    #[test]
    fn clipped_boxes_follow_the_area_rule() {
        let img = Array::zeros(&[100, 100, 3]);
        // tiles at x ∈ {0, 40}, size 60: the box spans x ∈ [50, 70)
        let anns = [Annotation::new(0, 1, [50.0, 10.0, 20.0, 10.0])];
        let tiles = tile(&img, &anns, 60, 20).unwrap();
        let first = &tiles[0];
        assert_eq!(first.annotations[0].bbox, [50.0, 10.0, 10.0, 10.0]);
        let second = tiles.iter().find(|t| t.origin == (0, 40)).unwrap();
        assert_eq!(second.annotations[0].bbox, [10.0, 10.0, 20.0, 10.0]);
        // only 25% survives in the first tile
        let anns = [Annotation::new(0, 1, [55.0, 10.0, 20.0, 10.0])];
        let tiles = tile(&img, &anns, 60, 20).unwrap();
        assert!(tiles[0].annotations.is_empty());
    }

    proptest! {
        #[test]
        fn objects_within_overlap_stay_whole(x in 0.0f64..1800.0, bw in 1.0f64..200.0) {
            let img = Array::zeros(&[8, 2048, 1]);
            let anns = [Annotation::new(0, 0, [x, 0.0, bw, 4.0])];
            let tiles = tile(&img, &anns, 1024, 200).unwrap();
            let whole = tiles.iter().any(|t| t.annotations.iter().any(|a| (a.bbox[2] - bw).abs() < 1e-9));
            prop_assert!(whole);
        }

        #[test]
        fn tiles_cover_every_pixel(side in 1usize..300, t in 8usize..64, ov in 0usize..8) {
            let origins = tile_origins(side, t, ov);
            for p in 0..side {
                prop_assert!(origins.iter().any(|&o| o <= p && p < o + t));
            }
        }

        #[test]
        fn degrade_is_linear(scale in -3.0f64..3.0) {
            let x = Array::from_fn(&[12, 10, 3], |i| ((i * 7919) % 101) as f64 / 101.0);
            let a = degrade_unclamped(&x.map(|v| v * scale)).unwrap();
            let b = degrade_unclamped(&x).unwrap().map(|v| v * scale);
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn annotation_round_trip_and_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let mut file = AnnotationFile {
            images: vec![ImageRecord {
                id: 4,
                file: "images/000004.png".into(),
                width: 64,
                height: 32,
                extra: Map::new(),
            }],
            annotations: vec![Annotation::new(4, 2, [1.0, 2.0, 3.5, 4.0])],
            categories: AnnotationFile::synthetic_categories(),
            extra: Map::new(),
        };
        save_annotations(&path, &file).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), file);

        file.annotations[0].extra.insert("iscrowd".into(), Value::from(0));
        file.extra.insert("info".into(), Value::from("v2"));
        save_annotations(&path, &file).unwrap();
        let back = load_annotations(&path).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.unknown_fields(), vec!["info".to_string(), "annotations[0].iscrowd".into()]);
    }

    #[test]
    fn malformed_annotations_report_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        fs::write(
            &path,
            r#"{"images":[{"id":0,"file":"x.png","width":8,"height":8}],
                "annotations":[{"image_id":0,"class_id":0,"bbox":[0,0,-2,3]}],"categories":[]}"#,
        )
        .unwrap();
        match load_annotations(&path) {
            Err(Error::Parse { context, .. }) => assert!(context.contains("annotations[0].bbox"), "{context}"),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "{\"images\": [\n  {\"id\": \"x\"}]}").unwrap();
        match load_annotations(&path) {
            Err(Error::Parse { context, .. }) => assert!(context.contains("line 2"), "{context}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            canvas: (32, 32),
            min_objects: 1,
            max_objects: 2,
            min_size: 6.0,
            max_size: 10.0,
            ..SceneSpec::default()
        };
        write_dataset(dir.path(), &spec, 3, None, 0).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        for (i, s) in loaded.iter().enumerate() {
            let fresh = synth_scene(&spec, i as u64).unwrap();
            assert_eq!(s.hr, fresh.hr);
            assert_eq!(s.annotations, fresh.annotations);
        }
    }
}
