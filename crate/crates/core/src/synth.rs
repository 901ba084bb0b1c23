//! Procedural chest-radiograph stand-ins with exact lung masks, templated
//! reports, keyword tags, dataset splits and on-disk persistence.
//!
//! Image layout (64x64): a dark background, two bright elliptical lung
//! fields whose height encodes lung volume, and a dim cardiac silhouette
//! between them whose width encodes heart size. Lung findings (effusion,
//! pneumothorax, calcification) are drawn strictly inside the lung mask;
//! heart and bone findings strictly outside it.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{GrayImage, LungMask};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 64;
pub const DEFAULT_DATASET_SIZE: usize = 2000;
/// Train/validation/test proportions.
pub const SPLIT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];
/// Segmenter threshold that separates lung fields from everything else.
pub const SEGMENT_THRESHOLD: f64 = 0.4;

/// Keywords scored by the lung-keyword F1 evaluation.
pub const LUNG_KEYWORDS: [&str; 4] = ["pneumothorax", "volume", "effusion", "calcification"];
/// Every keyword tag a report can carry.
pub const ALL_KEYWORDS: [&str; 6] = ["pneumothorax", "volume", "effusion", "calcification", "heart", "bone"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LungVolume {
    Low,
    Normal,
    Hyperexpanded,
}

/// Patient side, radiological convention: the patient's left appears on the
/// right of the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeartSize {
    Normal,
    Enlarged,
}

/// Ground-truth findings of one synthetic study. `Some(side)` marks a
/// present unilateral finding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FindingSet {
    pub lung_volume: LungVolume,
    pub effusion: Option<Side>,
    pub pneumothorax: Option<Side>,
    /// Number of calcified foci, 0 to 2.
    pub calcifications: u8,
    pub heart_size: HeartSize,
    pub bone_abnormality: bool,
}

impl FindingSet {
    pub fn normal() -> Self {
        Self {
            lung_volume: LungVolume::Normal,
            effusion: None,
            pneumothorax: None,
            calcifications: 0,
            heart_size: HeartSize::Normal,
            bone_abnormality: false,
        }
    }

    /// Every representable finding set.
    pub fn enumerate() -> Vec<FindingSet> {
        let sides = [None, Some(Side::Left), Some(Side::Right)];
        let mut all = Vec::new();
        for lung_volume in [LungVolume::Low, LungVolume::Normal, LungVolume::Hyperexpanded] {
            for effusion in sides {
                for pneumothorax in sides {
                    for calcifications in 0..=2 {
                        for heart_size in [HeartSize::Normal, HeartSize::Enlarged] {
                            for bone_abnormality in [false, true] {
                                all.push(FindingSet {
                                    lung_volume,
                                    effusion,
                                    pneumothorax,
                                    calcifications,
                                    heart_size,
                                    bone_abnormality,
                                });
                            }
                        }
                    }
                }
            }
        }
        all
    }

    fn has_lung_finding(&self) -> bool {
        self.lung_volume != LungVolume::Normal
            || self.effusion.is_some()
            || self.pneumothorax.is_some()
            || self.calcifications > 0
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let side = |rng: &mut R, p: f64| {
            rng.gen_bool(p)
                .then(|| if rng.gen_bool(0.5) { Side::Left } else { Side::Right })
        };
        let lung_volume = match rng.gen_range(0..20) {
            0..=4 => LungVolume::Low,
            5..=15 => LungVolume::Normal,
            _ => LungVolume::Hyperexpanded,
        };
        let effusion = side(rng, 0.3);
        let pneumothorax = side(rng, 0.25);
        let calcifications = match rng.gen_range(0..10) {
            0..=6 => 0,
            7..=8 => 1,
            _ => 2,
        };
        let heart_size = if rng.gen_bool(0.3) {
            HeartSize::Enlarged
        } else {
            HeartSize::Normal
        };
        Self {
            lung_volume,
            effusion,
            pneumothorax,
            calcifications,
            heart_size,
            bone_abnormality: rng.gen_bool(0.2),
        }
    }
}

/// Finding-independent random geometry and texture of one study. Rendering
/// the same layout with two finding sets changes only the finding pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub jitter_x: i32,
    pub jitter_y: i32,
    pub lung_half_width: f64,
    /// Polar positions of up to two calcified foci: (lung index, radius
    /// fraction, angle).
    pub foci: [(usize, f64, f64); 2],
    pub bone_spot: (usize, usize),
    pub texture_seed: u64,
}

impl Layout {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut focus = || {
            (
                rng.gen_range(0..2usize),
                rng.gen_range(0.15..0.6),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        };
        let foci = [focus(), focus()];
        Self {
            jitter_x: rng.gen_range(-1..=1),
            jitter_y: rng.gen_range(-1..=1),
            lung_half_width: rng.gen_range(9.0..11.0),
            foci,
            bone_spot: (rng.gen_range(2..5), rng.gen_range(4..12)),
            texture_seed: rng.gen(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    /// Normalised radius of a pixel centre; < 1 means inside.
    fn radius(&self, y: usize, x: usize) -> f64 {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        (dy * dy + dx * dx).sqrt()
    }
}

const LUNG_TOP: f64 = 7.0;

fn lungs(f: &FindingSet, layout: &Layout) -> [Ellipse; 2] {
    let ry = match f.lung_volume {
        LungVolume::Low => 13.0,
        LungVolume::Normal => 18.0,
        LungVolume::Hyperexpanded => 23.5,
    };
    let cy = LUNG_TOP + ry + layout.jitter_y as f64;
    let rx = layout.lung_half_width;
    let jx = layout.jitter_x as f64;
    [
        Ellipse {
            cy,
            cx: 20.5 + jx,
            ry,
            rx,
        },
        Ellipse {
            cy,
            cx: 43.5 + jx,
            ry,
            rx,
        },
    ]
}

/// Image-space lung index of a patient side (0 = image left).
fn lung_index(side: Side) -> usize {
    match side {
        Side::Right => 0,
        Side::Left => 1,
    }
}

/// Renders `findings` over `layout`, returning the image and its exact
/// lung mask.
pub fn render_image(findings: &FindingSet, layout: &Layout) -> (GrayImage, LungMask) {
    let n = IMAGE_SIZE;
    let mut texture = ChaCha8Rng::seed_from_u64(layout.texture_seed);
    let mut img = GrayImage::filled(n, n, 0.0);
    let mut mask = LungMask::empty(n, n);
    let fields = lungs(findings, layout);
    let heart = Ellipse {
        cy: 40.0 + layout.jitter_y as f64,
        cx: 32.0 + layout.jitter_x as f64,
        ry: 13.0,
        rx: match findings.heart_size {
            HeartSize::Normal => 6.0,
            HeartSize::Enlarged => 11.5,
        },
    };

    for y in 0..n {
        for x in 0..n {
            let noise: f64 = texture.gen_range(-1.0..1.0);
            let inside = fields.iter().position(|e| e.radius(y, x) < 1.0);
            let value = match inside {
                Some(li) => {
                    mask.set(y, x, true);
                    lung_pixel(findings, &fields[li], li, y, x, noise)
                }
                None if heart.radius(y, x) < 1.0 => 0.3 + 0.02 * noise,
                None => 0.06 + 0.04 * noise,
            };
            img.set(y, x, value);
        }
    }

    for &(li, frac, angle) in layout.foci.iter().take(findings.calcifications as usize) {
        let e = fields[li];
        let cy = e.cy + frac * e.ry * angle.sin();
        let cx = e.cx + frac * e.rx * angle.cos();
        let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
        for (y, x) in [(y0, x0), (y0 + 1, x0), (y0, x0 + 1), (y0 + 1, x0 + 1)] {
            if y < n && x < n && mask.get(y, x) {
                img.set(y, x, 1.0);
            }
        }
    }

    if findings.bone_abnormality {
        let (by, bx) = layout.bone_spot;
        for y in by..by + 3 {
            for x in bx..bx + 4 {
                if !mask.get(y, x) {
                    img.set(y, x, 0.36);
                }
            }
        }
    }
    (img, mask)
}

fn lung_pixel(f: &FindingSet, e: &Ellipse, li: usize, y: usize, x: usize, noise: f64) -> f64 {
    let on_side = |s: Option<Side>| s.map(lung_index) == Some(li);
    // Lower 30% of the lung field.
    if on_side(f.effusion) && (y as f64 + 0.5) > e.cy + 0.4 * e.ry {
        return 0.9 + 0.02 * noise;
    }
    // Outer rim of the upper half.
    if on_side(f.pneumothorax) && e.radius(y, x) > 0.78 && (y as f64 + 0.5) < e.cy {
        return 0.47 + 0.02 * noise;
    }
    0.66 + 0.05 * noise
}

/// Draws one study: image, exact lung mask and the findings it depicts.
pub fn generate_sample<R: Rng + ?Sized>(rng: &mut R) -> (GrayImage, LungMask, FindingSet) {
    let findings = FindingSet::sample(rng);
    let layout = Layout::sample(rng);
    let (img, mask) = render_image(&findings, &layout);
    (img, mask, findings)
}

/// Templated report text and keyword tags for a finding set. Keyword tokens
/// occur in the text exactly when the corresponding tag is present.
pub fn render_report(f: &FindingSet) -> (String, Vec<String>) {
    let mut sentences: Vec<String> = Vec::with_capacity(5);
    let mut tags = Vec::new();

    sentences.push(match f.heart_size {
        HeartSize::Normal => "the cardiomediastinal silhouette is within normal limits.".into(),
        HeartSize::Enlarged => {
            tags.push("heart");
            "the heart is mildly enlarged.".into()
        }
    });

    sentences.push(match f.lung_volume {
        LungVolume::Low => "there is low lung volume.".into(),
        LungVolume::Hyperexpanded => "the lungs are hyperexpanded with increased volume.".into(),
        LungVolume::Normal if f.has_lung_finding() => "the lungs are normally expanded.".into(),
        LungVolume::Normal => "the lungs are clear.".into(),
    });
    if f.lung_volume != LungVolume::Normal {
        tags.push("volume");
    }

    sentences.push(match (f.effusion, f.pneumothorax) {
        (None, None) => "the pleural spaces are clear.".into(),
        (Some(e), None) => format!("there is a small {} pleural effusion.", e.word()),
        (None, Some(p)) => format!("there is a small {} pneumothorax.", p.word()),
        (Some(e), Some(p)) => format!(
            "there is a {} pleural effusion and a {} pneumothorax.",
            e.word(),
            p.word()
        ),
    });
    if f.effusion.is_some() {
        tags.push("effusion");
    }
    if f.pneumothorax.is_some() {
        tags.push("pneumothorax");
    }

    match f.calcifications {
        0 => {}
        1 => sentences.push("there is one focus of calcification.".into()),
        _ => sentences.push("there are two foci of calcification.".into()),
    }
    if f.calcifications > 0 {
        tags.push("calcification");
    }

    sentences.push(if f.bone_abnormality {
        tags.push("bone");
        "there is an acute bone abnormality.".into()
    } else {
        "no acute osseous abnormality.".into()
    });

    tags.sort_unstable();
    (sentences.join(" "), tags.into_iter().map(String::from).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Partition sizes by largest-remainder rounding of `n * ratio`.
pub fn split_sizes(n: usize, ratios: &[f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let quotas = ratios.map(|r| r * n as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut order = [0usize, 1, 2];
    // Stable sort keeps index order among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(n - assigned) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Seeded shuffle followed by a largest-remainder partition. The result is
/// aligned with `ids`.
pub fn split_dataset(ids: &[String], ratios: &[f64; 3], seed: u64) -> Result<Vec<Split>> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty id list".into()));
    }
    let sizes = split_sizes(ids.len(), ratios)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Train; ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    /// Relative to the dataset root.
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub report: String,
    pub tags: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\timage_path\tmask_path\treport\ttags\tsplit";

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.image_path.display(),
                r.mask_path.display(),
                r.report,
                r.tags.join(","),
                r.split
            ));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            _ => return Err(Error::corrupt(MANIFEST_FILE, "missing or unexpected header")),
        }
        let mut records = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, image, mask, report, tags, split] = fields[..] else {
                return Err(Error::corrupt(
                    format!("{MANIFEST_FILE}:{}", lineno + 2),
                    format!("expected 6 fields, found {}", fields.len()),
                ));
            };
            if !seen.insert(id.to_string()) {
                return Err(Error::corrupt(id, "duplicate id"));
            }
            records.push(Record {
                id: id.to_string(),
                image_path: PathBuf::from(image),
                mask_path: PathBuf::from(mask),
                report: report.to_string(),
                tags: tags
                    .split(',')
                    .filter(|t| !t.is_empty())
                    .map(String::from)
                    .collect(),
                split: split.parse().map_err(|_| Error::corrupt(id, format!("bad split `{split}`")))?,
            });
        }
        Ok(Self { records })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Manifest plus decoded pixels, index-aligned with `manifest.records`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<GrayImage>,
    pub masks: Vec<LungMask>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn sample_id(i: usize) -> String {
    format!("cxr{i:05}")
}

/// Generates `n` studies with per-sample generator streams and assigns
/// splits. Pixels are quantised to 8 bits so that the in-memory dataset is
/// identical to what a write/read cycle yields.
pub fn generate_dataset(n: usize, seed: u64, ratios: &[f64; 3]) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let ids: Vec<String> = (0..n).map(sample_id).collect();
    let splits = split_dataset(&ids, ratios, seed)?;
    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for (i, (id, split)) in ids.into_iter().zip(splits).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let (img, mask, findings) = generate_sample(&mut rng);
        let (report, tags) = render_report(&findings);
        records.push(Record {
            image_path: PathBuf::from("images").join(format!("{id}.pgm")),
            mask_path: PathBuf::from("masks").join(format!("{id}.pgm")),
            id,
            report,
            tags,
            split,
        });
        images.push(quantize(&img));
        masks.push(mask);
    }
    Ok(Dataset {
        manifest: DatasetManifest { records },
        images,
        masks,
    })
}

fn quantize(img: &GrayImage) -> GrayImage {
    let px = img.pixels().iter().map(|&p| f64::from(to_byte(p)) / 255.0).collect();
    GrayImage::new(img.height(), img.width(), px).expect("same extent")
}

fn to_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a binary 8-bit PGM (P5, maxval 255).
pub fn encode_pgm(height: usize, width: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

/// Decodes a binary PGM, returning `(height, width, pixels)` with pixels
/// scaled into `[0, 1]`.
pub fn decode_pgm(data: &[u8], record: &str) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |detail: &str| Error::corrupt(record, detail.to_string());
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: String| s.parse::<usize>().map_err(|_| bad("malformed PGM header"));
    let width = parse(token()?)?;
    let height = parse(token()?)?;
    let maxval = parse(token()?)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported PGM dimensions or maxval"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let body = pos + 1;
    let need = width * height;
    if data.len() < body + need {
        return Err(bad(&format!(
            "truncated PGM raster: expected {need} bytes, found {}",
            data.len().saturating_sub(body)
        )));
    }
    let px = data[body..body + need]
        .iter()
        .map(|&b| f64::from(b) / maxval as f64)
        .collect();
    Ok((height, width, px))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_image(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes: Vec<u8> = img.pixels().iter().map(|&p| to_byte(p)).collect();
    write_file(path, &encode_pgm(img.height(), img.width(), &bytes))
}

pub fn write_mask(path: &Path, mask: &LungMask) -> Result<()> {
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_file(path, &encode_pgm(mask.height(), mask.width(), &bytes))
}

/// Persists images, masks and `manifest.tsv` under `root`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for ((rec, img), mask) in ds.manifest.records.iter().zip(&ds.images).zip(&ds.masks) {
        write_image(&root.join(&rec.image_path), img)?;
        write_mask(&root.join(&rec.mask_path), mask)?;
    }
    write_file(&root.join(MANIFEST_FILE), ds.manifest.to_tsv().as_bytes())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    DatasetManifest::from_tsv(&text)
}

fn read_pgm(root: &Path, rel: &Path, record: &str) -> Result<(usize, usize, Vec<f64>)> {
    let path = root.join(rel);
    let data = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::corrupt(record, format!("missing file {}", path.display())),
        _ => Error::io(&path, e),
    })?;
    decode_pgm(&data, record)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    read_dataset_splits(root, &[Split::Train, Split::Val, Split::Test])
}

/// Reads only the records of `splits`; pixels of other splits are never
/// opened.
pub fn read_dataset_splits(root: &Path, splits: &[Split]) -> Result<Dataset> {
    let mut manifest = read_manifest(root)?;
    manifest.records.retain(|r| splits.contains(&r.split));
    let mut images = Vec::with_capacity(manifest.records.len());
    let mut masks = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let (h, w, px) = read_pgm(root, &rec.image_path, &rec.id)?;
        images.push(GrayImage::new(h, w, px).map_err(|e| Error::corrupt(&rec.id, e.to_string()))?);
        let (mh, mw, mpx) = read_pgm(root, &rec.mask_path, &rec.id)?;
        if (mh, mw) != (h, w) {
            return Err(Error::corrupt(&rec.id, "mask extent differs from image"));
        }
        masks.push(LungMask::new(mh, mw, mpx.iter().map(|&p| p >= 0.5).collect())?);
    }
    Ok(Dataset {
        manifest,
        images,
        masks,
    })
}
