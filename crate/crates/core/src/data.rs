//! Synthetic shapes corpus: scene rendering, on-disk archive, dataset splits.
//!
//! Scenes are rendered in f64, anti-aliased by 4x4 supersampling, then
//! quantized to u8, so regeneration from the same seed is byte-identical.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{GroundTruth, GtItem};
use crate::error::{Error, Result};
use crate::geometry::{iou, Box2D};
use crate::seeding::{rng_for, splitmix64, Stream};
use crate::tensor::Tensor;

/// Shape kind per class, cycling for class ids beyond 2.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    fn for_class(class_id: usize) -> ShapeKind {
        match class_id % 3 {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        }
    }
}

/// Base color family per class; jittered per object at render time.
const PALETTE: [[f64; 3]; 6] = [
    [205.0, 70.0, 60.0],
    [70.0, 195.0, 80.0],
    [70.0, 100.0, 215.0],
    [210.0, 200.0, 65.0],
    [185.0, 70.0, 205.0],
    [65.0, 200.0, 200.0],
];

/// Everything that fixes the rendered corpus distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent (diameter / side / base) range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub background_level: f64,
    pub noise_sigma: f64,
    /// Rejection bound: no two objects may overlap beyond this IoU.
    pub max_overlap_iou: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_size: 12.0,
            max_size: 28.0,
            background_level: 40.0,
            noise_sigma: 5.0,
            max_overlap_iou: 0.3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > PALETTE.len() {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={}",
                PALETTE.len()
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects > max_objects".into()));
        }
        if !(self.min_size > 1.0 && self.max_size >= self.min_size) {
            return Err(Error::Config("bad object size range".into()));
        }
        if self.max_size + 4.0 > self.image_size as f64 {
            return Err(Error::Config("objects larger than the image".into()));
        }
        Ok(())
    }

    /// Stable content hash of the spec (for archive integrity checks).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in json.bytes() {
            h = splitmix64(h ^ b as u64);
        }
        format!("{h:016x}")
    }
}

struct Shape {
    kind: ShapeKind,
    class_id: usize,
    bbox: Box2D,
    color: [f64; 3],
}

impl Shape {
    /// Analytic coverage test at a point, in image coordinates.
    fn contains(&self, x: f64, y: f64) -> bool {
        let b = &self.bbox;
        match self.kind {
            ShapeKind::Circle => {
                let (cx, cy) = b.center();
                let r = 0.5 * b.width();
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
            ShapeKind::Square => x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2,
            ShapeKind::Triangle => {
                // isoceles, apex centered at the top edge
                if y < b.y1 || y > b.y2 {
                    return false;
                }
                let t = (y - b.y1) / b.height(); // 0 at apex, 1 at base
                let half = 0.5 * b.width() * t;
                let cx = 0.5 * (b.x1 + b.x2);
                x >= cx - half && x <= cx + half
            }
        }
    }
}

/// Deterministically render one scene. Returns the image as a `[S, S, 3]`
/// tensor of u8-quantized values in [0, 255] plus exact analytic boxes.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<(Tensor, GroundTruth)> {
    spec.validate()?;
    let mut rng = rng_for(seed, 0, Stream::Scene, 0);
    let s = spec.image_size as f64;
    let n_objects = rng.random_range(spec.min_objects..=spec.max_objects);

    let mut shapes: Vec<Shape> = Vec::new();
    for _ in 0..n_objects {
        let mut placed = false;
        for _attempt in 0..100 {
            let class_id = rng.random_range(0..spec.num_classes);
            let kind = ShapeKind::for_class(class_id);
            let size = rng.random_range(spec.min_size..=spec.max_size);
            let (w, h) = match kind {
                ShapeKind::Circle | ShapeKind::Square => (size, size),
                ShapeKind::Triangle => (size, size * rng.random_range(0.85..=1.2)),
            };
            if w + 4.0 >= s || h + 4.0 >= s {
                continue;
            }
            let x1 = rng.random_range(2.0..(s - w - 2.0));
            let y1 = rng.random_range(2.0..(s - h - 2.0));
            let bbox = Box2D::new(x1, y1, x1 + w, y1 + h)?;
            if shapes.iter().any(|o| iou(&o.bbox, &bbox) > spec.max_overlap_iou) {
                continue;
            }
            let base = PALETTE[class_id];
            let color = [
                (base[0] + rng.random_range(-25.0..25.0)).clamp(0.0, 255.0),
                (base[1] + rng.random_range(-25.0..25.0)).clamp(0.0, 255.0),
                (base[2] + rng.random_range(-25.0..25.0)).clamp(0.0, 255.0),
            ];
            shapes.push(Shape {
                kind,
                class_id,
                bbox,
                color,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Unsatisfiable(format!(
                "could not place object {} of {n_objects} within overlap bound {}",
                shapes.len(),
                spec.max_overlap_iou
            )));
        }
    }

    // paint: background + gaussian noise, then anti-aliased shapes
    let size = spec.image_size;
    let mut img = vec![0.0f64; size * size * 3];
    for px in img.chunks_mut(3) {
        for v in px.iter_mut() {
            // Box-Muller from two uniforms
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            *v = spec.background_level + spec.noise_sigma * z;
        }
    }
    const SS: usize = 4; // supersampling grid per pixel side
    for shape in &shapes {
        let b = &shape.bbox;
        let x_lo = b.x1.floor().max(0.0) as usize;
        let y_lo = b.y1.floor().max(0.0) as usize;
        let x_hi = (b.x2.ceil() as usize).min(size);
        let y_hi = (b.y2.ceil() as usize).min(size);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                let mut hits = 0usize;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                        if shape.contains(x, y) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cover = hits as f64 / (SS * SS) as f64;
                let i = (py * size + px) * 3;
                for c in 0..3 {
                    img[i + c] += cover * (shape.color[c] - img[i + c]);
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.round().clamp(0.0, 255.0);
    }

    let gt = GroundTruth::new(
        shapes
            .iter()
            .map(|o| GtItem {
                box2d: o.bbox,
                class_id: o.class_id,
            })
            .collect(),
    );
    Ok((Tensor::new(vec![size, size, 3], img)?, gt))
}

/// Disjoint labeled/unlabeled/eval assignment over scene ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub eval: Vec<usize>,
    pub seed: u64,
    pub labeled_fraction: f64,
}

/// The eval set is drawn first so every labeled fraction shares one
/// evaluation target; `labeled = round(fraction * (corpus - n_eval))`.
pub fn split_dataset(
    corpus_size: usize,
    fraction: f64,
    seed: u64,
    n_eval: usize,
) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must be in (0, 1], got {fraction}"
        )));
    }
    if n_eval >= corpus_size {
        return Err(Error::Config(format!(
            "n_eval {n_eval} must be smaller than the corpus {corpus_size}"
        )));
    }
    let mut rng = rng_for(seed, 0, Stream::Split, 0);
    let mut ids: Vec<usize> = (0..corpus_size).collect();
    use rand::seq::SliceRandom;
    ids.shuffle(&mut rng);
    let mut eval: Vec<usize> = ids[..n_eval].to_vec();
    let pool = &ids[n_eval..];
    let n_labeled = (fraction * pool.len() as f64).round() as usize;
    if n_labeled == 0 {
        return Err(Error::Config(format!(
            "labeled fraction {fraction} yields zero labeled scenes"
        )));
    }
    let mut labeled: Vec<usize> = pool[..n_labeled].to_vec();
    let mut unlabeled: Vec<usize> = pool[n_labeled..].to_vec();
    eval.sort_unstable();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        eval,
        seed,
        labeled_fraction: fraction,
    })
}

/// In-memory corpus: spec, per-scene seeds and annotations, raw u8 pixels.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: SceneSpec,
    pub seeds: Vec<u64>,
    pub annotations: Vec<GroundTruth>,
    images: Vec<u8>,
}

impl Corpus {
    /// Render `count` scenes with per-scene seeds derived from `master_seed`.
    pub fn generate(spec: &SceneSpec, count: usize, master_seed: u64) -> Result<Corpus> {
        spec.validate()?;
        let mut seeds = Vec::with_capacity(count);
        let mut annotations = Vec::with_capacity(count);
        let px = spec.image_size * spec.image_size * 3;
        let mut images = Vec::with_capacity(count * px);
        for id in 0..count {
            let seed = crate::seeding::seed_for(master_seed, id as u64, Stream::Scene, 0);
            let (img, gt) = generate_scene(seed, spec)?;
            seeds.push(seed);
            annotations.push(gt);
            images.extend(img.data().iter().map(|&v| v as u8));
        }
        Ok(Corpus {
            spec: spec.clone(),
            seeds,
            annotations,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    /// Image `id` as a `[S, S, 3]` tensor of values in [0, 255].
    pub fn image(&self, id: usize) -> Tensor {
        let px = self.spec.image_size * self.spec.image_size * 3;
        let raw = &self.images[id * px..(id + 1) * px];
        Tensor::new(
            vec![self.spec.image_size, self.spec.image_size, 3],
            raw.iter().map(|&b| b as f64).collect(),
        )
        .expect("stored image is valid")
    }

    pub fn ground_truth(&self, id: usize) -> &GroundTruth {
        &self.annotations[id]
    }

    pub fn image_bytes(&self, id: usize) -> &[u8] {
        let px = self.spec.image_size * self.spec.image_size * 3;
        &self.images[id * px..(id + 1) * px]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    spec: SceneSpec,
    spec_hash: String,
    num_scenes: usize,
    seeds: Vec<u64>,
}

const MANIFEST_VERSION: u32 = 1;

/// Persist a corpus as `manifest.json` + `annotations.txt` + `images.bin`.
/// Annotation lines follow `scene_id class x1 y1 x2 y2`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, force: bool) -> Result<()> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(Error::Data(format!(
            "corpus already exists at {} (use --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        schema_version: MANIFEST_VERSION,
        spec: corpus.spec.clone(),
        spec_hash: corpus.spec.hash(),
        num_scenes: corpus.len(),
        seeds: corpus.seeds.clone(),
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    let mut ann = BufWriter::new(fs::File::create(dir.join("annotations.txt"))?);
    for (id, gt) in corpus.annotations.iter().enumerate() {
        for item in &gt.items {
            let b = item.box2d;
            writeln!(
                ann,
                "{id} {} {:?} {:?} {:?} {:?}",
                item.class_id, b.x1, b.y1, b.x2, b.y2
            )?;
        }
    }
    ann.flush()?;
    fs::write(dir.join("images.bin"), &corpus.images)?;
    Ok(())
}

/// Load a corpus archive, validating sizes and the spec hash.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).map_err(|e| {
            Error::Data(format!("cannot read corpus manifest in {}: {e}", dir.display()))
        })?)?;
    if manifest.schema_version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "unsupported corpus schema version {}",
            manifest.schema_version
        )));
    }
    if manifest.spec_hash != manifest.spec.hash() {
        return Err(Error::Data("corpus spec hash mismatch".into()));
    }
    let mut annotations = vec![GroundTruth::default(); manifest.num_scenes];
    for (lineno, line) in fs::read_to_string(dir.join("annotations.txt"))?
        .lines()
        .enumerate()
    {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(Error::Data(format!(
                "annotation line {} malformed: {line:?}",
                lineno + 1
            )));
        }
        let id: usize = parts[0]
            .parse()
            .map_err(|_| Error::Data(format!("bad scene id on line {}", lineno + 1)))?;
        let class_id: usize = parts[1]
            .parse()
            .map_err(|_| Error::Data(format!("bad class on line {}", lineno + 1)))?;
        let coords: Vec<f64> = parts[2..]
            .iter()
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Data(format!("bad coordinates on line {}", lineno + 1)))?;
        if id >= manifest.num_scenes {
            return Err(Error::Data(format!("scene id {id} out of range")));
        }
        annotations[id].items.push(GtItem {
            box2d: Box2D::new(coords[0], coords[1], coords[2], coords[3])?,
            class_id,
        });
    }
    let images = fs::read(dir.join("images.bin"))?;
    let px = manifest.spec.image_size * manifest.spec.image_size * 3;
    if images.len() != manifest.num_scenes * px {
        return Err(Error::Data(format!(
            "images.bin has {} bytes, expected {}",
            images.len(),
            manifest.num_scenes * px
        )));
    }
    for (id, gt) in annotations.iter().enumerate() {
        gt.validate(
            manifest.spec.num_classes,
            manifest.spec.image_size as f64,
            manifest.spec.image_size as f64,
        )
        .map_err(|e| Error::Data(format!("scene {id}: {e}")))?;
    }
    Ok(Corpus {
        spec: manifest.spec,
        seeds: manifest.seeds,
        annotations,
        images,
    })
}
