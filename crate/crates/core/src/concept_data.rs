//! Densely-labeled concept datasets: on-disk layout, loader, and generator.
//!
//! A dataset is a directory with this shape:
//!
//! ```text
//! root/
//!   index.csv        image,split,ih,iw,sh,sw,<one column per category>
//!   concepts.csv     concept_id,name,category
//!   images/          <image>.png          8-bit RGB
//!   labels/<cat>/    <image>.png          8-bit grayscale, pixel = concept id
//! ```
//!
//! Concept ids are dense, starting at 1; pixel value 0 always means
//! "unlabeled". Label maps may be stored at a lower resolution than the image
//! as long as the image size is an integer multiple; [`resolve_label_mask`]
//! upscales with nearest-neighbor lookups.
//!
//! [`MicroBrodenSpec::generate`] synthesizes a small dataset in this layout:
//! textured backgrounds with one colored shape per image, labeled per pixel
//! for the `color`, `object`, and `texture` categories. Color labels are
//! derived from the *stored* pixel bytes by nearest-anchor quantization, so a
//! loader that re-quantizes the PNG contents reproduces the label maps
//! exactly.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::util::ContentHasher;

/// Categories a concept may belong to.
pub const ALLOWED_CATEGORIES: [&str; 6] =
    ["color", "object", "part", "material", "scene", "texture"];

/// Reference colors used to quantize RGB pixels into named color concepts.
/// Quantization picks the anchor with the smallest squared RGB distance,
/// breaking ties toward the earlier entry.
pub const COLOR_ANCHORS: [(&str, [u8; 3]); 11] = [
    ("black", [0, 0, 0]),
    ("white", [255, 255, 255]),
    ("grey", [128, 128, 128]),
    ("red", [230, 40, 40]),
    ("orange", [250, 150, 40]),
    ("yellow", [240, 230, 50]),
    ("green", [60, 180, 75]),
    ("blue", [50, 80, 230]),
    ("purple", [150, 60, 200]),
    ("pink", [250, 150, 200]),
    ("brown", [140, 90, 40]),
];

/// Index of the nearest color anchor by squared RGB distance (ties go to the
/// lowest index).
pub fn nearest_anchor(rgb: [u8; 3]) -> usize {
    let mut best = 0usize;
    let mut best_d = u32::MAX;
    for (i, (_, anchor)) in COLOR_ANCHORS.iter().enumerate() {
        let d: u32 = anchor
            .iter()
            .zip(rgb.iter())
            .map(|(&a, &p)| {
                let diff = a as i32 - p as i32;
                (diff * diff) as u32
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Shapes the generator can draw.
pub const KNOWN_SHAPES: [&str; 6] = ["square", "circle", "triangle", "cross", "diamond", "ring"];

/// Background textures the generator can draw.
pub const KNOWN_TEXTURES: [&str; 4] = ["stripes", "checker", "dots", "blank"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Schema {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("label map {path}: {msg}")]
    LabelMap { path: PathBuf, msg: String },
    #[error("image file {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("unknown image id {0:?}")]
    UnknownImage(String),
    #[error("unknown concept id {0}")]
    UnknownConcept(u16),
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("dataset invariant violated: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which portion of the experiment an image serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    /// Optimized against during training.
    Train,
    /// Held out for accuracy measurement.
    Val,
    /// Profiled during dissection (thresholds and IoU).
    Dissect,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Dissect => "dissect",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "dissect" => Some(Split::Dissect),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labeled visual concept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub id: u16,
    pub name: String,
    pub category: String,
}

/// The concept vocabulary of a dataset: dense ids starting at 1, each concept
/// belonging to exactly one category.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptIndex {
    /// Sorted by id; ids are exactly `1..=concepts.len()`.
    concepts: Vec<Concept>,
    /// Categories in order of first appearance among the sorted concepts.
    categories: Vec<String>,
}

impl ConceptIndex {
    /// Build from (name, category) pairs; ids are assigned densely in order.
    pub fn from_pairs<I, S, T>(pairs: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let concepts: Vec<Concept> = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (name, category))| Concept {
                id: (i + 1) as u16,
                name: name.into(),
                category: category.into(),
            })
            .collect();
        Self::from_concepts(concepts)
    }

    fn from_concepts(mut concepts: Vec<Concept>) -> Result<Self, DataError> {
        concepts.sort_by_key(|c| c.id);
        for (i, c) in concepts.iter().enumerate() {
            let expected = (i + 1) as u16;
            if c.id != expected {
                return Err(DataError::Invalid(format!(
                    "concept ids must be dense starting at 1; expected id {expected}, found {}",
                    c.id
                )));
            }
            if !ALLOWED_CATEGORIES.contains(&c.category.as_str()) {
                return Err(DataError::Invalid(format!(
                    "concept {:?} has unknown category {:?} (allowed: {:?})",
                    c.name, c.category, ALLOWED_CATEGORIES
                )));
            }
            validate_token(&c.name).map_err(|msg| {
                DataError::Invalid(format!("concept name {:?}: {msg}", c.name))
            })?;
        }
        let mut names = BTreeSet::new();
        for c in &concepts {
            if !names.insert((&c.name, &c.category)) {
                return Err(DataError::Invalid(format!(
                    "duplicate concept {:?} in category {:?}",
                    c.name, c.category
                )));
            }
        }
        let mut categories = Vec::new();
        for c in &concepts {
            if !categories.contains(&c.category) {
                categories.push(c.category.clone());
            }
        }
        Ok(Self {
            concepts,
            categories,
        })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    /// Categories present in this index, in order of first appearance.
    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn by_id(&self, id: u16) -> Result<&Concept, DataError> {
        if id == 0 || id as usize > self.concepts.len() {
            return Err(DataError::UnknownConcept(id));
        }
        Ok(&self.concepts[id as usize - 1])
    }

    pub fn lookup(&self, name: &str, category: &str) -> Option<&Concept> {
        self.concepts
            .iter()
            .find(|c| c.name == name && c.category == category)
    }

    /// Concepts of one category, ascending by id.
    pub fn in_category(&self, category: &str) -> Vec<&Concept> {
        self.concepts
            .iter()
            .filter(|c| c.category == category)
            .collect()
    }

    /// Parse `concepts.csv`.
    pub fn parse_csv(text: &str, path: &Path) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| DataError::Schema {
            path: path.to_path_buf(),
            line: 1,
            msg: "empty file".into(),
        })?;
        if header.trim_end() != "concept_id,name,category" {
            return Err(DataError::Schema {
                path: path.to_path_buf(),
                line: 1,
                msg: format!(
                    "expected header \"concept_id,name,category\", found {:?}",
                    header
                ),
            });
        }
        let mut concepts = Vec::new();
        let mut seen_ids = BTreeSet::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(DataError::Schema {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            let id: u16 = fields[0].parse().map_err(|_| DataError::Schema {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("concept_id {:?} is not a positive integer", fields[0]),
            })?;
            if !seen_ids.insert(id) {
                return Err(DataError::Schema {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("duplicate concept_id {id}"),
                });
            }
            concepts.push(Concept {
                id,
                name: fields[1].to_string(),
                category: fields[2].to_string(),
            });
        }
        Self::from_concepts(concepts)
    }

    /// Serialize to `concepts.csv` bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("concept_id,name,category\n");
        for c in &self.concepts {
            out.push_str(&format!("{},{},{}\n", c.id, c.name, c.category));
        }
        out
    }
}

fn validate_token(s: &str) -> Result<(), String> {
    if s.is_empty() {
        return Err("must not be empty".into());
    }
    if !s
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err("must contain only ASCII alphanumerics, '_', or '-'".into());
    }
    Ok(())
}

/// One image with its per-category label maps at their stored resolution.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub split: Split,
    /// `(H, W, 3)` RGB bytes.
    pub pixels: Array3<u8>,
    /// Category name → `(sh, sw)` concept-id map. Categories the image has no
    /// labels for are absent.
    pub label_maps: BTreeMap<String, Array2<u16>>,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Nearest-neighbor upscale of a concept-id map to `(h, w)`. `h`/`w` must be
/// integer multiples of the map dimensions.
pub fn upscale_nn(map: &Array2<u16>, h: usize, w: usize) -> Result<Array2<u16>, DataError> {
    let (sh, sw) = (map.shape()[0], map.shape()[1]);
    if sh == 0 || sw == 0 || h % sh != 0 || w % sw != 0 {
        return Err(DataError::Invalid(format!(
            "cannot upscale {sh}x{sw} label map to {h}x{w}: target must be an integer multiple"
        )));
    }
    let (fy, fx) = (h / sh, w / sw);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| map[[y / fy, x / fx]]))
}

/// A fully loaded and validated dataset.
#[derive(Debug, Clone)]
pub struct ConceptDataset {
    root: PathBuf,
    index: ConceptIndex,
    images: Vec<LabeledImage>,
    by_id: BTreeMap<String, usize>,
    splits: BTreeMap<Split, Vec<usize>>,
    content_hash: String,
}

impl ConceptDataset {
    /// Load `root`, validating the full layout: header schemas, dense concept
    /// ids, image id uniqueness, file existence, PNG formats, dimension
    /// consistency, and that every nonzero label pixel names a concept of the
    /// column's category.
    pub fn load(root: &Path) -> Result<Self, DataError> {
        let concepts_path = root.join("concepts.csv");
        let concepts_text =
            std::fs::read_to_string(&concepts_path).map_err(io_err(&concepts_path))?;
        let index = ConceptIndex::parse_csv(&concepts_text, &concepts_path)?;

        let index_path = root.join("index.csv");
        let index_text = std::fs::read_to_string(&index_path).map_err(io_err(&index_path))?;

        let mut hasher = ContentHasher::new();
        hasher.chunk(concepts_text.as_bytes());
        hasher.chunk(index_text.as_bytes());

        let mut lines = index_text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| DataError::Schema {
            path: index_path.clone(),
            line: 1,
            msg: "empty file".into(),
        })?;
        let columns: Vec<&str> = header.trim_end().split(',').collect();
        let fixed = ["image", "split", "ih", "iw", "sh", "sw"];
        if columns.len() < fixed.len() || columns[..fixed.len()] != fixed {
            return Err(DataError::Schema {
                path: index_path.clone(),
                line: 1,
                msg: format!(
                    "header must start with {:?}, found {:?}",
                    fixed.join(","),
                    header
                ),
            });
        }
        let category_columns: Vec<String> =
            columns[fixed.len()..].iter().map(|s| s.to_string()).collect();
        for cat in &category_columns {
            if !index.categories().contains(cat) {
                return Err(DataError::Schema {
                    path: index_path.clone(),
                    line: 1,
                    msg: format!(
                        "label column {cat:?} is not a category of any concept in concepts.csv"
                    ),
                });
            }
        }

        let mut images = Vec::new();
        let mut by_id = BTreeMap::new();
        let mut splits: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != fixed.len() + category_columns.len() {
                return Err(DataError::Schema {
                    path: index_path.clone(),
                    line: lineno + 1,
                    msg: format!(
                        "expected {} fields, found {}",
                        fixed.len() + category_columns.len(),
                        fields.len()
                    ),
                });
            }
            let schema_err = |msg: String| DataError::Schema {
                path: index_path.clone(),
                line: lineno + 1,
                msg,
            };
            let id = fields[0].to_string();
            validate_token(&id).map_err(|m| schema_err(format!("image id {id:?}: {m}")))?;
            let split = Split::parse(fields[1])
                .ok_or_else(|| schema_err(format!("unknown split {:?}", fields[1])))?;
            let dims: Vec<usize> = fields[2..6]
                .iter()
                .map(|f| {
                    f.parse::<usize>()
                        .map_err(|_| schema_err(format!("dimension {f:?} is not an integer")))
                })
                .collect::<Result<_, _>>()?;
            let (ih, iw, sh, sw) = (dims[0], dims[1], dims[2], dims[3]);
            if ih == 0 || iw == 0 || sh == 0 || sw == 0 {
                return Err(schema_err("dimensions must be positive".into()));
            }
            if ih % sh != 0 || iw % sw != 0 {
                return Err(schema_err(format!(
                    "label dims {sh}x{sw} must evenly divide image dims {ih}x{iw}"
                )));
            }
            if by_id.contains_key(&id) {
                return Err(schema_err(format!("duplicate image id {id:?}")));
            }

            let image_path = root.join("images").join(format!("{id}.png"));
            let pixels = load_rgb8(&image_path)?;
            // Hash root-relative names so the identity is location-independent.
            hasher.chunk(format!("images/{id}.png").as_bytes());
            hasher.chunk(pixels.as_slice().expect("contiguous image buffer"));
            if pixels.shape()[0] != ih || pixels.shape()[1] != iw {
                return Err(DataError::Image {
                    path: image_path,
                    msg: format!(
                        "index declares {ih}x{iw}, file is {}x{}",
                        pixels.shape()[0],
                        pixels.shape()[1]
                    ),
                });
            }

            let mut label_maps = BTreeMap::new();
            for (cat, cell) in category_columns.iter().zip(&fields[6..]) {
                if cell.is_empty() {
                    continue;
                }
                let map_path = root.join("labels").join(cell);
                let map = load_label_map(&map_path)?;
                if map.shape() != [sh, sw] {
                    return Err(DataError::LabelMap {
                        path: map_path,
                        msg: format!(
                            "index declares {sh}x{sw}, file is {}x{}",
                            map.shape()[0],
                            map.shape()[1]
                        ),
                    });
                }
                for &v in map.iter() {
                    if v == 0 {
                        continue;
                    }
                    let concept = index.by_id(v).map_err(|_| DataError::LabelMap {
                        path: map_path.clone(),
                        msg: format!("pixel value {v} is not a concept id"),
                    })?;
                    if concept.category != *cat {
                        return Err(DataError::LabelMap {
                            path: map_path.clone(),
                            msg: format!(
                                "pixel value {v} names concept {:?} of category {:?}, expected {:?}",
                                concept.name, concept.category, cat
                            ),
                        });
                    }
                }
                let raw: Vec<u8> = map.iter().map(|&v| v as u8).collect();
                hasher.chunk(format!("labels/{cell}").as_bytes());
                hasher.chunk(&raw);
                label_maps.insert(cat.clone(), map);
            }

            let idx = images.len();
            by_id.insert(id.clone(), idx);
            splits.entry(split).or_default().push(idx);
            images.push(LabeledImage {
                id,
                split,
                pixels,
                label_maps,
            });
        }

        if images.is_empty() {
            return Err(DataError::Invalid("dataset contains no images".into()));
        }

        Ok(Self {
            root: root.to_path_buf(),
            index,
            images,
            by_id,
            splits,
            content_hash: hasher.finish(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index(&self) -> &ConceptIndex {
        &self.index
    }

    /// All images in `index.csv` row order.
    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn image(&self, id: &str) -> Result<&LabeledImage, DataError> {
        self.by_id
            .get(id)
            .map(|&i| &self.images[i])
            .ok_or_else(|| DataError::UnknownImage(id.to_string()))
    }

    /// Indexes of images belonging to `split`, in index order.
    pub fn split_indices(&self, split: Split) -> &[usize] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Identity hash over the concept vocabulary, index rows, and all pixel
    /// contents. Two datasets with the same hash are interchangeable.
    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    /// Boolean mask at image resolution marking pixels labeled with
    /// `concept_id`. All-false when the image has no labels for the concept's
    /// category.
    pub fn resolve_label_mask(
        &self,
        image_id: &str,
        concept_id: u16,
    ) -> Result<Array2<bool>, DataError> {
        let image = self.image(image_id)?;
        let concept = self.index.by_id(concept_id)?;
        let (h, w) = (image.height(), image.width());
        match image.label_maps.get(&concept.category) {
            None => Ok(Array2::from_elem((h, w), false)),
            Some(map) => {
                let up = upscale_nn(map, h, w)?;
                Ok(up.mapv(|v| v == concept_id))
            }
        }
    }
}

fn load_rgb8(path: &Path) -> Result<Array3<u8>, DataError> {
    let dynimg = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    match dynimg {
        image::DynamicImage::ImageRgb8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let raw = img.into_raw();
            Ok(Array3::from_shape_vec((h, w, 3), raw).expect("raw rgb8 buffer size"))
        }
        other => Err(DataError::Image {
            path: path.to_path_buf(),
            msg: format!("expected 8-bit RGB, found {:?}", other.color()),
        }),
    }
}

fn load_label_map(path: &Path) -> Result<Array2<u16>, DataError> {
    let dynimg = image::open(path).map_err(|e| DataError::LabelMap {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let raw: Vec<u16> = img.into_raw().into_iter().map(|v| v as u16).collect();
            Ok(Array2::from_shape_vec((h, w), raw).expect("raw luma8 buffer size"))
        }
        other => Err(DataError::LabelMap {
            path: path.to_path_buf(),
            msg: format!("expected 8-bit grayscale, found {:?}", other.color()),
        }),
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Recipe for a synthetic concept dataset: one colored shape per image on a
/// textured grey background, with full-resolution label maps for the `color`,
/// `object`, and `texture` categories.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MicroBrodenSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub dissect_images: usize,
    /// Shape fill colors; each must name a [`COLOR_ANCHORS`] entry. Exactly
    /// these become `color` concepts.
    pub colors: Vec<String>,
    /// Shape names from [`KNOWN_SHAPES`]; each becomes an `object` concept.
    pub shapes: Vec<String>,
    /// Background textures from [`KNOWN_TEXTURES`]; each becomes a `texture`
    /// concept.
    pub textures: Vec<String>,
    pub seed: u64,
    /// Standard deviation of per-channel Gaussian pixel noise, as a fraction
    /// of full scale (0.1 means sigma = 25.5 of 255).
    pub noise: f64,
    /// Inclusive bounds on the drawn shape's bounding-box side, pixels.
    pub object_min: usize,
    pub object_max: usize,
}

impl MicroBrodenSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let spec_err = |msg: String| DataError::Spec(msg);
        if self.image_size < 8 {
            return Err(spec_err(format!(
                "image_size must be at least 8, found {}",
                self.image_size
            )));
        }
        if self.train_images == 0 || self.val_images == 0 || self.dissect_images == 0 {
            return Err(spec_err("every split needs at least one image".into()));
        }
        if self.colors.is_empty() || self.shapes.is_empty() || self.textures.is_empty() {
            return Err(spec_err(
                "colors, shapes, and textures must all be non-empty".into(),
            ));
        }
        for group in [&self.colors, &self.shapes, &self.textures] {
            let unique: BTreeSet<_> = group.iter().collect();
            if unique.len() != group.len() {
                return Err(spec_err(format!("duplicate entry in {group:?}")));
            }
        }
        for c in &self.colors {
            if !COLOR_ANCHORS.iter().any(|(name, _)| name == c) {
                return Err(spec_err(format!(
                    "color {c:?} is not an anchor color (known: {:?})",
                    COLOR_ANCHORS.map(|(n, _)| n)
                )));
            }
        }
        for s in &self.shapes {
            if !KNOWN_SHAPES.contains(&s.as_str()) {
                return Err(spec_err(format!(
                    "shape {s:?} is unknown (known: {KNOWN_SHAPES:?})"
                )));
            }
        }
        for t in &self.textures {
            if !KNOWN_TEXTURES.contains(&t.as_str()) {
                return Err(spec_err(format!(
                    "texture {t:?} is unknown (known: {KNOWN_TEXTURES:?})"
                )));
            }
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(spec_err(format!(
                "noise must be within 0.0..=0.5, found {}",
                self.noise
            )));
        }
        if self.object_min < 4 || self.object_max < self.object_min {
            return Err(spec_err(format!(
                "object size range [{}, {}] invalid: need 4 <= min <= max",
                self.object_min, self.object_max
            )));
        }
        if self.object_max >= self.image_size {
            return Err(spec_err(format!(
                "object_max {} must be smaller than image_size {}",
                self.object_max, self.image_size
            )));
        }
        Ok(())
    }

    /// The concept vocabulary this spec produces: colors, then shapes, then
    /// textures, with dense ids starting at 1.
    pub fn concept_index(&self) -> Result<ConceptIndex, DataError> {
        self.validate()?;
        let mut pairs: Vec<(String, String)> = Vec::new();
        for c in &self.colors {
            pairs.push((c.clone(), "color".into()));
        }
        for s in &self.shapes {
            pairs.push((s.clone(), "object".into()));
        }
        for t in &self.textures {
            pairs.push((t.clone(), "texture".into()));
        }
        ConceptIndex::from_pairs(pairs)
    }

    /// Write a complete dataset under `root` and return it loaded. Output is
    /// a pure function of the spec: generating twice yields byte-identical
    /// files.
    pub fn generate(&self, root: &Path) -> Result<ConceptDataset, DataError> {
        self.validate()?;
        let index = self.concept_index()?;
        std::fs::create_dir_all(root.join("images")).map_err(io_err(root))?;
        for cat in ["color", "object", "texture"] {
            std::fs::create_dir_all(root.join("labels").join(cat)).map_err(io_err(root))?;
        }

        let mut index_rows = String::from("image,split,ih,iw,sh,sw,color,object,texture\n");
        let splits = [
            (Split::Train, self.train_images),
            (Split::Val, self.val_images),
            (Split::Dissect, self.dissect_images),
        ];
        let mut serial = 0usize;
        for (split_no, (split, count)) in splits.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(split_no as u64 + 1);
            for i in 0..*count {
                let id = format!("img_{serial:05}");
                serial += 1;
                let class = i % (self.shapes.len() * self.colors.len());
                let rendered = self.render_image(class, &index, &mut rng);
                write_rgb8(&root.join("images").join(format!("{id}.png")), &rendered.pixels)?;
                for (cat, map) in [
                    ("color", &rendered.color_map),
                    ("object", &rendered.object_map),
                    ("texture", &rendered.texture_map),
                ] {
                    write_label_map(
                        &root.join("labels").join(cat).join(format!("{id}.png")),
                        map,
                    )?;
                }
                let n = self.image_size;
                index_rows.push_str(&format!(
                    "{id},{split},{n},{n},{n},{n},color/{id}.png,object/{id}.png,texture/{id}.png\n"
                ));
            }
        }

        let concepts_path = root.join("concepts.csv");
        crate::util::write_atomic(&concepts_path, index.to_csv().as_bytes())
            .map_err(io_err(&concepts_path))?;
        let index_path = root.join("index.csv");
        crate::util::write_atomic(&index_path, index_rows.as_bytes())
            .map_err(io_err(&index_path))?;
        ConceptDataset::load(root)
    }

    fn render_image(&self, class: usize, index: &ConceptIndex, rng: &mut ChaCha8Rng) -> Rendered {
        let n = self.image_size;
        let shape_idx = class / self.colors.len();
        let color_idx = class % self.colors.len();
        let shape = &self.shapes[shape_idx];
        let color_name = &self.colors[color_idx];
        let fill = COLOR_ANCHORS
            .iter()
            .find(|(name, _)| name == color_name)
            .expect("validated color")
            .1;

        let texture_idx = rng.random_range(0..self.textures.len());
        let texture = &self.textures[texture_idx];
        let phase = rng.random_range(0..8usize);
        let (off_y, off_x) = (rng.random_range(0..6usize), rng.random_range(0..6usize));

        // Background: two greys arranged by the texture rule.
        const G1: [u8; 3] = [45, 45, 45];
        const G2: [u8; 3] = [75, 75, 75];
        let mut pixels = Array3::<u8>::zeros((n, n, 3));
        for y in 0..n {
            for x in 0..n {
                let second = match texture.as_str() {
                    "stripes" => (x + y + phase) / 4 % 2 == 1,
                    "checker" => (x / 4 + y / 4 + phase) % 2 == 1,
                    "dots" => {
                        let dy = ((y + off_y) % 6) as i32 - 3;
                        let dx = ((x + off_x) % 6) as i32 - 3;
                        dy * dy + dx * dx <= 4
                    }
                    _ => false, // blank
                };
                let g = if second { G2 } else { G1 };
                for c in 0..3 {
                    pixels[[y, x, c]] = g[c];
                }
            }
        }

        // Object: one filled shape, fully inside the frame.
        let half = rng.random_range(self.object_min / 2..=self.object_max / 2);
        let cy = rng.random_range(half..n - half);
        let cx = rng.random_range(half..n - half);
        let mut support = Array2::<bool>::from_elem((n, n), false);
        for y in 0..n {
            for x in 0..n {
                let dy = y as i32 - cy as i32;
                let dx = x as i32 - cx as i32;
                let h = half as i32;
                let inside = match shape.as_str() {
                    "square" => dx.abs() <= h && dy.abs() <= h,
                    "circle" => dx * dx + dy * dy <= h * h,
                    "triangle" => dy.abs() <= h && 2 * dx.abs() <= dy + h,
                    "cross" => {
                        let t = (h / 2).max(1);
                        (dx.abs() <= t && dy.abs() <= h) || (dy.abs() <= t && dx.abs() <= h)
                    }
                    "diamond" => dx.abs() + dy.abs() <= h,
                    "ring" => {
                        let d2 = dx * dx + dy * dy;
                        let inner = (h / 2).max(1);
                        d2 <= h * h && d2 >= inner * inner
                    }
                    _ => unreachable!("validated shape"),
                };
                if inside {
                    support[[y, x]] = true;
                    for c in 0..3 {
                        pixels[[y, x, c]] = fill[c];
                    }
                }
            }
        }

        // Additive Gaussian pixel noise, applied before labels are derived so
        // the stored color labels always agree with the stored bytes.
        if self.noise > 0.0 {
            let normal = Normal::new(0.0f32, (self.noise * 255.0) as f32).expect("valid sigma");
            for v in pixels.iter_mut() {
                let noisy = *v as f32 + normal.sample(rng);
                *v = noisy.round().clamp(0.0, 255.0) as u8;
            }
        }

        // Label maps. Color labels come from quantizing the stored bytes;
        // object/texture labels from the drawn geometry.
        let palette_ids: Vec<Option<u16>> = COLOR_ANCHORS
            .iter()
            .map(|(name, _)| index.lookup(name, "color").map(|c| c.id))
            .collect();
        let object_id = index
            .lookup(shape, "object")
            .expect("shape concept registered")
            .id;
        let texture_id = index
            .lookup(texture, "texture")
            .expect("texture concept registered")
            .id;
        let mut color_map = Array2::<u16>::zeros((n, n));
        let mut object_map = Array2::<u16>::zeros((n, n));
        let mut texture_map = Array2::<u16>::zeros((n, n));
        for y in 0..n {
            for x in 0..n {
                let rgb = [pixels[[y, x, 0]], pixels[[y, x, 1]], pixels[[y, x, 2]]];
                if let Some(id) = palette_ids[nearest_anchor(rgb)] {
                    color_map[[y, x]] = id;
                }
                if support[[y, x]] {
                    object_map[[y, x]] = object_id;
                } else {
                    texture_map[[y, x]] = texture_id;
                }
            }
        }

        Rendered {
            pixels,
            color_map,
            object_map,
            texture_map,
        }
    }
}

struct Rendered {
    pixels: Array3<u8>,
    color_map: Array2<u16>,
    object_map: Array2<u16>,
    texture_map: Array2<u16>,
}

fn write_rgb8(path: &Path, pixels: &Array3<u8>) -> Result<(), DataError> {
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let raw = pixels
        .as_slice()
        .expect("contiguous image buffer")
        .to_vec();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to dims");
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    crate::util::write_atomic(path, &bytes).map_err(io_err(path))
}

fn write_label_map(path: &Path, map: &Array2<u16>) -> Result<(), DataError> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let raw: Vec<u8> = map
        .iter()
        .map(|&v| u8::try_from(v).expect("generated concept ids fit in u8"))
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to dims");
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| DataError::LabelMap {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    crate::util::write_atomic(path, &bytes).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Classification view
// ---------------------------------------------------------------------------

/// Normalize RGB bytes into model input channels: `(3, H, W)` with each value
/// mapped from `[0, 255]` to `[-1, 1]`.
pub fn image_to_input(pixels: &Array3<u8>) -> Array3<f32> {
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        (pixels[[y, x, c]] as f32 / 255.0 - 0.5) / 0.5
    })
}

/// Images of one split as stacked model inputs plus class labels.
#[derive(Debug, Clone)]
pub struct SplitTensors {
    /// `(N, 3, H, W)`, normalized.
    pub inputs: Array4<f32>,
    pub labels: Vec<u32>,
    pub ids: Vec<String>,
}

impl SplitTensors {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Train/val tensors plus the derived class vocabulary.
#[derive(Debug, Clone)]
pub struct ClassificationData {
    pub n_classes: usize,
    /// `(shape name, color name)` per class id.
    pub class_names: Vec<(String, String)>,
    pub train: SplitTensors,
    pub val: SplitTensors,
}

/// Derive the classification label of one image: the image's object concept
/// crossed with the dominant color over the object's pixels.
///
/// The object concept is the most frequent nonzero value of the object map;
/// the color is the most frequent nonzero color label over pixels the object
/// occupies. Ties break toward the lower concept id.
pub fn derive_class(ds: &ConceptDataset, image_id: &str) -> Result<u32, DataError> {
    let image = ds.image(image_id)?;
    let (h, w) = (image.height(), image.width());
    let object_map = image
        .label_maps
        .get("object")
        .ok_or_else(|| DataError::Invalid(format!("image {image_id:?} has no object labels")))?;
    let color_map = image
        .label_maps
        .get("color")
        .ok_or_else(|| DataError::Invalid(format!("image {image_id:?} has no color labels")))?;
    let object_map = upscale_nn(object_map, h, w)?;
    let color_map = upscale_nn(color_map, h, w)?;

    let shape_id = mode_nonzero(object_map.iter().copied()).ok_or_else(|| {
        DataError::Invalid(format!("image {image_id:?} has no object pixels"))
    })?;
    let color_id = mode_nonzero(
        object_map
            .iter()
            .zip(color_map.iter())
            .filter(|(&o, _)| o != 0)
            .map(|(_, &c)| c),
    )
    .ok_or_else(|| {
        DataError::Invalid(format!(
            "image {image_id:?}: no object pixel has a color label"
        ))
    })?;

    let shapes = ds.index().in_category("object");
    let colors = ds.index().in_category("color");
    let shape_ord = shapes
        .iter()
        .position(|c| c.id == shape_id)
        .expect("validated object label");
    let color_ord = colors
        .iter()
        .position(|c| c.id == color_id)
        .expect("validated color label");
    Ok((shape_ord * colors.len() + color_ord) as u32)
}

fn mode_nonzero(values: impl Iterator<Item = u16>) -> Option<u16> {
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for v in values {
        if v != 0 {
            *counts.entry(v).or_default() += 1;
        }
    }
    // BTreeMap iterates ascending by key, so `>` keeps the lowest id on ties.
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
}

/// Build normalized train/val tensors with derived class labels. Requires
/// `object` and `color` concepts and uniform image dimensions.
pub fn classification_data(ds: &ConceptDataset) -> Result<ClassificationData, DataError> {
    let shapes = ds.index().in_category("object");
    let colors = ds.index().in_category("color");
    if shapes.is_empty() || colors.is_empty() {
        return Err(DataError::Invalid(
            "classification requires both object and color concepts".into(),
        ));
    }
    let n_classes = shapes.len() * colors.len();
    let class_names = shapes
        .iter()
        .flat_map(|s| colors.iter().map(|c| (s.name.clone(), c.name.clone())))
        .collect();

    let build = |split: Split| -> Result<SplitTensors, DataError> {
        let indices = ds.split_indices(split);
        if indices.is_empty() {
            return Err(DataError::Invalid(format!(
                "dataset has no images in split {split:?}"
            )));
        }
        let first = &ds.images()[indices[0]];
        let (h, w) = (first.height(), first.width());
        let mut inputs = Array4::zeros((indices.len(), 3, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            let image = &ds.images()[i];
            if image.height() != h || image.width() != w {
                return Err(DataError::Invalid(format!(
                    "image {:?} is {}x{}, expected uniform {h}x{w}",
                    image.id,
                    image.height(),
                    image.width()
                )));
            }
            inputs
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&image_to_input(&image.pixels));
            labels.push(derive_class(ds, &image.id)?);
            ids.push(image.id.clone());
        }
        Ok(SplitTensors {
            inputs,
            labels,
            ids,
        })
    };

    Ok(ClassificationData {
        n_classes,
        class_names,
        train: build(Split::Train)?,
        val: build(Split::Val)?,
    })
}
