//! Synthetic shape scenes with exactly aligned captions, segmentation maps
//! and detector-style class labels.
//!
//! A scene places 1–4 coloured shapes on a 2×2 layout, one per cell. Every
//! (shape, colour) pair has its own segmentation class; class 0 is
//! background. Rasterisation is aliasing-free, so segmentation targets are
//! pixel-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{SegLabelMap, IGNORE_LABEL};
use crate::seed;
use crate::vision::{Image, KeywordSet};

pub const NUM_CLASSES: usize = 13;
pub const BACKGROUND: u8 = 0;
pub const MAX_OBJECTS: usize = 4;
pub const COMPOSITIONAL_PROBABILITY: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 80, 220],
            Color::Yellow => [230, 210, 40],
        }
    }
}

/// Segmentation class of a (shape, colour) pair, in 1..13.
pub fn class_id(shape: Shape, color: Color) -> u8 {
    let s = Shape::ALL.iter().position(|&x| x == shape).unwrap();
    let c = Color::ALL.iter().position(|&x| x == color).unwrap();
    (1 + s * Color::ALL.len() + c) as u8
}

pub fn class_parts(class: usize) -> Option<(Shape, Color)> {
    if class == 0 || class >= NUM_CLASSES {
        return None;
    }
    let k = class - 1;
    Some((Shape::ALL[k / Color::ALL.len()], Color::ALL[k % Color::ALL.len()]))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Layout cell, row-major over the 2×2 grid.
    pub cell: usize,
    /// Bounding-box side in pixels.
    pub size: usize,
    pub top: usize,
    pub left: usize,
}

impl SceneObject {
    pub fn class(&self) -> u8 {
        class_id(self.shape, self.color)
    }

    pub fn cell_row(&self) -> usize {
        self.cell / 2
    }

    pub fn cell_col(&self) -> usize {
        self.cell % 2
    }

    pub fn phrase(&self) -> String {
        format!("a {} {}", self.color.name(), self.shape.name())
    }

    /// Whether the pixel (r, c) is covered, tested at the pixel centre.
    pub fn covers(&self, r: usize, c: usize) -> bool {
        if r < self.top || c < self.left || r >= self.top + self.size || c >= self.left + self.size {
            return false;
        }
        let s = self.size as f64;
        let y = (r - self.top) as f64 + 0.5;
        let x = (c - self.left) as f64 + 0.5;
        match self.shape {
            Shape::Square => true,
            Shape::Circle => {
                let (dy, dx) = (y - s / 2.0, x - s / 2.0);
                dy * dy + dx * dx <= s * s / 4.0
            }
            // apex at the top centre, base along the bottom edge
            Shape::Triangle => (x - s / 2.0).abs() <= y / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub background: u8,
    pub objects: Vec<SceneObject>,
}

pub fn gen_scene<R: Rng + ?Sized>(rng: &mut R, image_size: usize) -> SceneSpec {
    let count = rng.gen_range(1..=MAX_OBJECTS);
    let mut cells = [0usize, 1, 2, 3];
    cells.shuffle(rng);
    let cell_px = image_size / 2;
    let lo = (cell_px * 11) / 20;
    let hi = (cell_px * 17) / 20;
    let objects = cells[..count]
        .iter()
        .map(|&cell| {
            let shape = *Shape::ALL.choose(rng).unwrap();
            let color = *Color::ALL.choose(rng).unwrap();
            let size = rng.gen_range(lo..=hi);
            let slack = cell_px - size;
            let top = (cell / 2) * cell_px + rng.gen_range(0..=slack);
            let left = (cell % 2) * cell_px + rng.gen_range(0..=slack);
            SceneObject {
                shape,
                color,
                cell,
                size,
                top,
                left,
            }
        })
        .collect();
    SceneSpec {
        image_size,
        background: rng.gen_range(20..=80),
        objects,
    }
}

/// Truthful spatial relations of `a` with respect to `b` on the layout.
pub fn relations(a: &SceneObject, b: &SceneObject) -> Vec<&'static str> {
    let mut rel = Vec::new();
    if a.cell_col() < b.cell_col() {
        rel.push("left of");
    }
    if a.cell_col() > b.cell_col() {
        rel.push("right of");
    }
    if a.cell_row() < b.cell_row() {
        rel.push("above");
    }
    if a.cell_row() > b.cell_row() {
        rel.push("below");
    }
    rel
}

/// Objects joined with "and" in random order; multi-object scenes use a
/// truthful spatial relation between the first two phrases with
/// probability 0.3.
pub fn gen_caption<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> String {
    let mut order: Vec<&SceneObject> = spec.objects.iter().collect();
    order.shuffle(rng);
    let compositional = order.len() >= 2 && rng.gen::<f64>() < COMPOSITIONAL_PROBABILITY;
    let mut caption = order[0].phrase();
    let mut rest = &order[1..];
    if compositional {
        let rel = relations(order[0], order[1]);
        let pick = rel[rng.gen_range(0..rel.len())];
        caption = format!("{caption} {pick} {}", order[1].phrase());
        rest = &order[2..];
    }
    for o in rest {
        caption.push_str(" and ");
        caption.push_str(&o.phrase());
    }
    caption
}

pub fn render(spec: &SceneSpec) -> (Image, SegLabelMap) {
    let n = spec.image_size;
    let bg = spec.background as f64 / 255.0;
    let mut img = Image::filled(n, n, [bg; 3]);
    let mut seg = SegLabelMap::filled(n, n, BACKGROUND);
    for o in &spec.objects {
        let rgb = o.color.rgb().map(|v| v as f64 / 255.0);
        for r in o.top..o.top + o.size {
            for c in o.left..o.left + o.size {
                if o.covers(r, c) {
                    img.set_pixel(r, c, rgb);
                    seg.set(r, c, o.class());
                }
            }
        }
    }
    (img, seg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: usize,
    pub image: Image,
    pub caption: String,
    /// Present only for annotated records.
    pub seg: Option<SegLabelMap>,
    /// Class id of every object, in layout-cell order.
    pub pseudo_labels: Vec<usize>,
    pub has_keyword: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Fraction of records that carry a segmentation map.
    pub seg_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            seg_fraction: 0.5,
        }
    }
}

/// Record `index` of the dataset generated from `seed`; a pure function of
/// its arguments. The full label map is returned even for records that do
/// not keep their annotation.
pub fn gen_record(seed: u64, index: usize, cfg: &SynthConfig) -> (SceneSpec, SampleRecord, SegLabelMap) {
    let mut rng = seed::rng(seed, &[seed::stream::SCENE, index as u64]);
    let spec = gen_scene(&mut rng, cfg.image_size);
    let caption = gen_caption(&spec, &mut rng);
    let annotated = rng.gen::<f64>() < cfg.seg_fraction;
    let (image, seg) = render(&spec);
    let mut objects = spec.objects.clone();
    objects.sort_by_key(|o| o.cell);
    let record = SampleRecord {
        id: index,
        has_keyword: KeywordSet::default().matches(&caption),
        image,
        caption,
        seg: annotated.then(|| seg.clone()),
        pseudo_labels: objects.iter().map(|o| o.class() as usize).collect(),
    };
    (spec, record, seg)
}

/// Number of leading records in the training split (90/10 by index).
pub fn train_count(n: usize) -> usize {
    n * 9 / 10
}

pub const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "#id\timage\tseg\tcaption\tlabels\thas_keyword\tcrc32";

pub fn gen_dataset(n: usize, seed: u64, out_dir: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    for sub in ["img", "seg"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest_path = out_dir.join(MANIFEST);
    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    for index in 0..n {
        let (_, record, _) = gen_record(seed, index, cfg);
        let img_rel = format!("img/{index:06}.ppm");
        let img_bytes = encode_ppm(&record.image);
        write_file(&out_dir.join(&img_rel), &img_bytes)?;
        let seg_rel = match &record.seg {
            Some(seg) => {
                let rel = format!("seg/{index:06}.pgm");
                write_file(&out_dir.join(&rel), &encode_pgm(seg))?;
                rel
            }
            None => "-".to_string(),
        };
        let labels: Vec<String> = record.pseudo_labels.iter().map(|l| l.to_string()).collect();
        manifest.push_str(&format!(
            "{index}\t{img_rel}\t{seg_rel}\t{}\t{}\t{}\t{:08x}\n",
            record.caption,
            labels.join(","),
            u8::from(record.has_keyword),
            crc32fast::hash(&img_bytes)
        ));
    }
    write_file(&manifest_path, manifest.as_bytes())?;
    Ok(manifest_path)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| (v * 255.0).round() as u8));
    out
}

pub fn encode_pgm(map: &SegLabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.data());
    out
}

/// Parse a binary netpbm header; returns (width, height, payload).
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &str) -> std::result::Result<(usize, usize, &'a [u8]), String> {
    let mut fields = Vec::with_capacity(4);
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
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "bad header")?);
    }
    pos += 1; // single whitespace byte before the raster
    if fields[0] != magic {
        return Err(format!("expected {magic}, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    let payload = bytes.get(pos..).unwrap_or(&[]);
    Ok((w, h, payload))
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let (w, h, payload) = parse_netpbm(bytes, "P6")?;
    if payload.len() != w * h * 3 {
        return Err(format!("expected {} pixel bytes, found {}", w * h * 3, payload.len()));
    }
    Image::new(h, w, payload.iter().map(|&b| b as f64 / 255.0).collect()).map_err(|e| e.to_string())
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<SegLabelMap, String> {
    let (w, h, payload) = parse_netpbm(bytes, "P5")?;
    if payload.len() != w * h {
        return Err(format!("expected {} label bytes, found {}", w * h, payload.len()));
    }
    SegLabelMap::new(h, w, payload.to_vec()).map_err(|e| e.to_string())
}

struct ManifestRow {
    id: usize,
    image: String,
    seg: Option<String>,
    caption: String,
    labels: Vec<usize>,
    has_keyword: bool,
    crc: u32,
}

fn parse_row(line: &str) -> std::result::Result<ManifestRow, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 7 {
        return Err(format!("expected 7 fields, found {}", f.len()));
    }
    let labels = if f[4].is_empty() {
        Vec::new()
    } else {
        f[4].split(',')
            .map(|s| s.parse::<usize>().map_err(|_| format!("bad label {s:?}")))
            .collect::<std::result::Result<_, _>>()?
    };
    Ok(ManifestRow {
        id: f[0].parse().map_err(|_| format!("bad id {:?}", f[0]))?,
        image: f[1].to_string(),
        seg: (f[2] != "-").then(|| f[2].to_string()),
        caption: f[3].to_string(),
        labels,
        has_keyword: match f[5] {
            "0" => false,
            "1" => true,
            other => return Err(format!("bad keyword flag {other:?}")),
        },
        crc: u32::from_str_radix(f[6], 16).map_err(|_| format!("bad crc {:?}", f[6]))?,
    })
}

/// Lazy, ordered reader over a generated dataset. Each record is validated
/// as it is loaded.
pub struct DatasetReader {
    root: PathBuf,
    rows: std::vec::IntoIter<(usize, String)>,
    len: usize,
}

impl DatasetReader {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn load_row(&self, line_no: usize, line: &str) -> Result<SampleRecord> {
        let corrupt = |record: String, reason: String| Error::CorruptData { record, reason };
        let row = parse_row(line).map_err(|r| corrupt(format!("line {line_no}"), r))?;
        let name = format!("{}", row.id);
        let img_path = self.root.join(&row.image);
        let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let crc = crc32fast::hash(&bytes);
        if crc != row.crc {
            return Err(corrupt(name, format!("image checksum {crc:08x} != {:08x}", row.crc)));
        }
        let image = decode_ppm(&bytes).map_err(|r| corrupt(name.clone(), r))?;
        let seg = match &row.seg {
            Some(rel) => {
                let p = self.root.join(rel);
                let b = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                Some(decode_pgm(&b).map_err(|r| corrupt(name.clone(), r))?)
            }
            None => None,
        };
        let record = SampleRecord {
            id: row.id,
            image,
            caption: row.caption,
            seg,
            pseudo_labels: row.labels,
            has_keyword: row.has_keyword,
        };
        validate_record(&record).map_err(|r| corrupt(name, r))?;
        Ok(record)
    }
}

impl Iterator for DatasetReader {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let (line_no, line) = self.rows.next()?;
        Some(self.load_row(line_no, &line))
    }
}

pub fn load_dataset(manifest: &Path) -> Result<DatasetReader> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let rows: Vec<(usize, String)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect();
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(DatasetReader {
        root,
        len: rows.len(),
        rows: rows.into_iter(),
    })
}

/// Load every record of a manifest into memory.
pub fn load_all(manifest: &Path) -> Result<Vec<SampleRecord>> {
    load_dataset(manifest)?.collect()
}

/// Record-level invariants checked on load.
pub fn validate_record(r: &SampleRecord) -> std::result::Result<(), String> {
    if r.pseudo_labels.is_empty() || r.pseudo_labels.len() > MAX_OBJECTS {
        return Err(format!("{} pseudo-labels", r.pseudo_labels.len()));
    }
    let words: Vec<String> = crate::text::tokenize(&r.caption);
    for &l in &r.pseudo_labels {
        let (shape, color) = class_parts(l).ok_or_else(|| format!("invalid class {l}"))?;
        if !words.iter().any(|w| w == shape.name()) || !words.iter().any(|w| w == color.name()) {
            return Err(format!("caption does not mention {} {}", color.name(), shape.name()));
        }
    }
    if r.has_keyword != KeywordSet::default().matches(&r.caption) {
        return Err("keyword flag disagrees with caption".into());
    }
    if let Some(seg) = &r.seg {
        if seg.height() != r.image.height() || seg.width() != r.image.width() {
            return Err("label map and image sizes differ".into());
        }
        let hist = seg.histogram();
        let mut present: Vec<usize> = (1..NUM_CLASSES).filter(|&c| hist[c] > 0).collect();
        let mut expected = r.pseudo_labels.clone();
        expected.sort_unstable();
        expected.dedup();
        present.sort_unstable();
        if present != expected {
            return Err(format!("label map classes {present:?} != pseudo-labels {expected:?}"));
        }
        if (NUM_CLASSES..IGNORE_LABEL as usize).any(|c| hist[c] > 0) {
            return Err("label map holds unknown classes".into());
        }
    }
    Ok(())
}
