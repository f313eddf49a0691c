//! Data model and on-disk formats: dataset manifests, keypoint annotations,
//! PNG images and binary feature files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 14;

/// The 14 body joints, in interchange order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JointName {
    Head,
    Neck,
    RShoulder,
    RElbow,
    RWrist,
    LShoulder,
    LElbow,
    LWrist,
    RHip,
    RKnee,
    RAnkle,
    LHip,
    LKnee,
    LAnkle,
}

impl JointName {
    pub const ALL: [JointName; NUM_JOINTS] = [
        JointName::Head,
        JointName::Neck,
        JointName::RShoulder,
        JointName::RElbow,
        JointName::RWrist,
        JointName::LShoulder,
        JointName::LElbow,
        JointName::LWrist,
        JointName::RHip,
        JointName::RKnee,
        JointName::RAnkle,
        JointName::LHip,
        JointName::LKnee,
        JointName::LAnkle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    /// Estimator confidence in `[0, 1]`.
    pub c: f64,
}

impl Joint {
    pub fn new(x: f64, y: f64, c: f64) -> Self {
        Joint { x, y, c }
    }
}

/// A full 14-joint pose. Coordinates are image pixels and may fall outside
/// the image.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSet {
    joints: [Joint; NUM_JOINTS],
}

impl JointSet {
    pub fn new(joints: [Joint; NUM_JOINTS]) -> Result<Self> {
        for (i, j) in joints.iter().enumerate() {
            if !j.x.is_finite() || !j.y.is_finite() {
                return Err(Error::Validation(format!(
                    "joint {:?} has non-finite coordinates",
                    JointName::ALL[i]
                )));
            }
            if !(0.0..=1.0).contains(&j.c) {
                return Err(Error::Validation(format!(
                    "joint {:?} confidence {} outside [0, 1]",
                    JointName::ALL[i],
                    j.c
                )));
            }
        }
        Ok(JointSet { joints })
    }

    pub fn get(&self, name: JointName) -> Joint {
        self.joints[name.index()]
    }

    pub fn joints(&self) -> &[Joint; NUM_JOINTS] {
        &self.joints
    }

    /// The 14-entry confidence vector, in joint order.
    pub fn confidences(&self) -> [f64; NUM_JOINTS] {
        let mut c = [0.0; NUM_JOINTS];
        for (dst, j) in c.iter_mut().zip(&self.joints) {
            *dst = j.c;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: String,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    records: Vec<SampleRecord>,
    id_index: BTreeMap<u32, Vec<usize>>,
}

impl DatasetManifest {
    /// Builds and validates a manifest. Train identities must not appear in
    /// the query or gallery splits.
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let mut id_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            id_index.entry(r.identity).or_default().push(i);
        }
        for (id, idx) in &id_index {
            let train = idx.iter().any(|&i| records[i].split == Split::Train);
            let test = idx.iter().any(|&i| records[i].split != Split::Train);
            if train && test {
                return Err(Error::Validation(format!(
                    "identity {id} appears in both the train split and the query/gallery splits"
                )));
            }
        }
        Ok(DatasetManifest { records, id_index })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn id_index(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.id_index
    }

    pub fn num_identities(&self) -> usize {
        self.id_index.len()
    }

    /// Record indices of one split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks that every query identity has at least one gallery image from
    /// another camera.
    pub fn validate_cross_camera(&self) -> Result<()> {
        for q in self.records.iter().filter(|r| r.split == Split::Query) {
            let ok = self.id_index[&q.identity].iter().any(|&g| {
                let g = &self.records[g];
                g.split == Split::Gallery && g.camera != q.camera
            });
            if !ok {
                return Err(Error::Validation(format!(
                    "query {} (identity {}, camera {}) has no cross-camera gallery match",
                    q.image_path, q.identity, q.camera
                )));
            }
        }
        Ok(())
    }
}

const MANIFEST_HEADER: [&str; 4] = ["image_path", "identity", "camera", "split"];

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text, path)
}

pub(crate) fn parse_manifest_str(text: &str, path: &Path) -> Result<DatasetManifest> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(parse_err(
            1,
            format!("expected header {:?}", MANIFEST_HEADER.join(",")),
        ));
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, got {}", row.len())));
        }
        let field = |i: usize, what: &str| -> Result<u32> {
            row[i]
                .parse::<u32>()
                .map_err(|_| parse_err(line, format!("{what} {:?} is not a non-negative integer", &row[i])))
        };
        let identity = field(1, "identity")?;
        let camera = field(2, "camera")?;
        let split = row[3]
            .parse::<Split>()
            .map_err(|e| parse_err(line, e.to_string()))?;
        if row[0].is_empty() {
            return Err(parse_err(line, "empty image_path".into()));
        }
        records.push(SampleRecord {
            image_path: row[0].to_string(),
            identity,
            camera,
            split,
        });
    }
    DatasetManifest::new(records)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("image_path,identity,camera,split\n");
    for r in manifest.records() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.image_path, r.identity, r.camera, r.split
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct KeypointLine {
    image: String,
    joints: Vec<Vec<f64>>,
}

pub fn parse_keypoints(path: impl AsRef<Path>) -> Result<BTreeMap<String, JointSet>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (image, joints) = parse_keypoint_line(&line).map_err(|e| match e {
            Error::Format(message) => Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message,
            },
            Error::Validation(m) => Error::Validation(format!("{}:{lineno}: {m}", path.display())),
            other => other,
        })?;
        out.insert(image, joints);
    }
    Ok(out)
}

fn parse_keypoint_line(line: &str) -> Result<(String, JointSet)> {
    let parsed: KeypointLine =
        serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
    if parsed.joints.len() != NUM_JOINTS {
        return Err(Error::Format(format!(
            "expected {NUM_JOINTS} joints, got {}",
            parsed.joints.len()
        )));
    }
    let mut joints = [Joint::new(0.0, 0.0, 0.0); NUM_JOINTS];
    for (k, triple) in parsed.joints.iter().enumerate() {
        match triple.as_slice() {
            &[x, y, c] => joints[k] = Joint::new(x, y, c),
            _ => {
                return Err(Error::Format(format!(
                    "joint {k} must be an [x, y, c] triple"
                )))
            }
        }
    }
    Ok((parsed.image, JointSet::new(joints)?))
}

pub fn keypoint_line(image: &str, joints: &JointSet) -> String {
    let line = KeypointLine {
        image: image.to_string(),
        joints: joints.joints().iter().map(|j| vec![j.x, j.y, j.c]).collect(),
    };
    serde_json::to_string(&line).expect("keypoint line serializes")
}

pub fn write_keypoints<'a>(
    path: impl AsRef<Path>,
    entries: impl IntoIterator<Item = (&'a str, &'a JointSet)>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (image, joints) in entries {
        out.push_str(&keypoint_line(image, joints));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// An RGB image with values in `[0, 1]`, stored row-major with interleaved
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        ImageTensor {
            height,
            width,
            data: vec![value; height * width * Self::CHANNELS],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "{}x{}x3 image needs {} values, got {}",
                height,
                width,
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("image values must lie in [0, 1]".into()));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        for (k, v) in rgb.into_iter().enumerate() {
            self.data[i + k] = v.clamp(0.0, 1.0);
        }
    }

    /// Rounds every value to the nearest multiple of 1/255, i.e. the values a
    /// PNG round trip would produce.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (*v * 255.0).round() / 255.0;
        }
    }

    /// Resizes to `height`x`width`. Integer downscale factors use box
    /// averaging; anything else falls back to bilinear sampling.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        if self.height.is_multiple_of(height) && self.width.is_multiple_of(width) {
            let fy = self.height / height;
            let fx = self.width / width;
            let norm = 1.0 / (fx * fy) as f32;
            let mut out = ImageTensor::zeros(height, width);
            for r in 0..height {
                for c in 0..width {
                    let mut acc = [0.0f32; 3];
                    for dy in 0..fy {
                        for dx in 0..fx {
                            let p = self.pixel(r * fy + dy, c * fx + dx);
                            for k in 0..3 {
                                acc[k] += p[k];
                            }
                        }
                    }
                    out.set_pixel(r, c, acc.map(|v| v * norm));
                }
            }
            return out;
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = ImageTensor::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                out.set_pixel(r, c, self.bilinear_clamped(x, y));
            }
        }
        out
    }

    /// Bilinear sample at pixel-index coordinates already known to lie within
    /// `[0, w-1] x [0, h-1]`.
    #[inline]
    pub(crate) fn bilinear_clamped(&self, x: f64, y: f64) -> [f32; 3] {
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let p00 = self.pixel(y0, x0);
        let p01 = self.pixel(y0, x1);
        let p10 = self.pixel(y1, x0);
        let p11 = self.pixel(y1, x1);
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = p00[k] + (p01[k] - p00[k]) * fx;
            let bottom = p10[k] + (p11[k] - p10[k]) * fx;
            out[k] = (top + (bottom - top) * fy).clamp(0.0, 1.0);
        }
        out
    }
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    ImageTensor::from_vec(h as usize, w as usize, data)
}

pub fn save_png(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer size matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Where a feature matrix came from. Not persisted in the feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    BaselineImg,
    BaselinePb,
    PieConcat,
    PieFused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    dim: usize,
    data: Vec<f32>,
    pub provenance: Option<Provenance>,
}

impl FeatureMatrix {
    pub fn new(n: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::Shape(format!(
                "{n}x{dim} feature matrix needs {} values, got {}",
                n * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature values must be finite".into()));
        }
        Ok(FeatureMatrix {
            n,
            dim,
            data,
            provenance: None,
        })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has {} values, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"PIEF";
const FEATURE_VERSION: u16 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 2 + 4 + 4;

pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + m.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.n as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::Format("feature file shorter than its header".into()));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("feature file magic mismatch".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let payload = &bytes[FEATURE_HEADER_LEN..];
    let expected = n
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("feature header size overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "header claims {n}x{dim} features ({expected} bytes), payload has {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(n, dim, data)
}

pub fn write_features(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_features(m))
        .map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Resolves a manifest `image_path` relative to the manifest's directory.
pub fn resolve_image_path(manifest_path: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest_text(rows: &[(&str, u32, u32, &str)]) -> String {
        let mut s = String::from("image_path,identity,camera,split\n");
        for (p, id, cam, split) in rows {
            s.push_str(&format!("{p},{id},{cam},{split}\n"));
        }
        s
    }

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn manifest_forty_rows_ten_ids() {
        let mut rows = Vec::new();
        let names: Vec<String> = (0..40).map(|i| format!("img_{i}.png")).collect();
        for (i, name) in names.iter().enumerate() {
            let id = (i / 4) as u32;
            let split = if id < 5 {
                "train"
            } else if i % 4 < 2 {
                "query"
            } else {
                "gallery"
            };
            rows.push((name.as_str(), id, (i % 2) as u32, split));
        }
        let f = write_tmp(&manifest_text(&rows));
        let m = parse_manifest(f.path()).unwrap();
        assert_eq!(m.len(), 40);
        assert_eq!(m.num_identities(), 10);
        assert_eq!(m.id_index()[&7], vec![28, 29, 30, 31]);
    }

    #[test]
    fn manifest_rejects_train_test_overlap() {
        let f = write_tmp(&manifest_text(&[
            ("a.png", 3, 0, "train"),
            ("b.png", 3, 1, "gallery"),
        ]));
        assert!(matches!(parse_manifest(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn manifest_header_only_is_empty() {
        let f = write_tmp("image_path,identity,camera,split\n");
        let m = parse_manifest(f.path()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn manifest_reports_line_of_bad_row() {
        let f = write_tmp("image_path,identity,camera,split\na.png,1,0,train\nb.png,-2,0,train\n");
        match parse_manifest(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp("image_path,identity,camera,split\na.png,1,0,holdout\n");
        assert!(matches!(parse_manifest(f.path()), Err(Error::Parse { line: 2, .. })));
        let f = write_tmp("path,id,cam,split\n");
        assert!(matches!(parse_manifest(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn cross_camera_validation() {
        let m = DatasetManifest::new(vec![
            SampleRecord { image_path: "q".into(), identity: 1, camera: 0, split: Split::Query },
            SampleRecord { image_path: "g".into(), identity: 1, camera: 0, split: Split::Gallery },
        ])
        .unwrap();
        assert!(m.validate_cross_camera().is_err());
    }

    fn line_with(n: usize, c5: f64) -> String {
        let joints: Vec<String> = (0..n)
            .map(|i| {
                let c = if i == 5 { c5 } else { 1.0 };
                format!("[{},{},{}]", i as f64 * 2.0, i as f64 * 3.5, c)
            })
            .collect();
        format!("{{\"image\": \"x.png\", \"joints\": [{}]}}", joints.join(","))
    }

    #[test]
    fn keypoints_all_confident() {
        let f = write_tmp(&(line_with(14, 1.0) + "\n"));
        let kp = parse_keypoints(f.path()).unwrap();
        let js = &kp["x.png"];
        assert!(js.confidences().iter().all(|&c| c == 1.0));
        assert_eq!(js.get(JointName::LHip), Joint::new(22.0, 38.5, 1.0));
    }

    #[test]
    fn keypoints_wrong_count_names_line() {
        let text = format!("{}\n{}\n", line_with(14, 1.0), line_with(13, 1.0));
        let f = write_tmp(&text);
        match parse_keypoints(f.path()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("13"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn keypoints_confidence_out_of_range() {
        let f = write_tmp(&line_with(14, 1.2));
        assert!(matches!(parse_keypoints(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn feature_file_roundtrip_small() {
        let data: Vec<f32> = (0..15).map(|i| i as f32 * 0.37 - 2.0).collect();
        let m = FeatureMatrix::new(3, 5, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.pief");
        write_features(&p, &m).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(back.n(), 3);
        assert_eq!(back.dim(), 5);
        let a: Vec<u32> = m.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn feature_file_truncated_and_bad_magic() {
        let m = FeatureMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode_features(&m);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_features(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_features(&m);
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn feature_file_empty_matrix() {
        let m = FeatureMatrix::new(0, 8, vec![]).unwrap();
        let bytes = encode_features(&m);
        assert_eq!(bytes.len(), 14);
        let back = decode_features(&bytes).unwrap();
        assert_eq!((back.n(), back.dim()), (0, 8));
    }

    #[test]
    fn png_roundtrip_is_exact_after_quantize() {
        let mut img = ImageTensor::zeros(5, 7);
        for r in 0..5 {
            for c in 0..7 {
                img.set_pixel(r, c, [r as f32 / 4.0, c as f32 / 6.0, 0.3]);
            }
        }
        img.quantize();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        save_png(&p, &img).unwrap();
        assert_eq!(load_png(&p).unwrap(), img);
    }

    #[test]
    fn box_resize_averages() {
        let mut img = ImageTensor::zeros(2, 2);
        img.set_pixel(0, 0, [1.0, 1.0, 1.0]);
        let small = img.resize(1, 1);
        assert_eq!(small.pixel(0, 0), [0.25, 0.25, 0.25]);
    }

    proptest! {
        #[test]
        fn feature_roundtrip_bit_exact(n in 0usize..6, dim in 1usize..9, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
            let m = FeatureMatrix::new(n, dim, data).unwrap();
            let back = decode_features(&encode_features(&m)).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn keypoint_line_roundtrip(coords in proptest::collection::vec((-500.0f64..500.0, -500.0f64..500.0, 0.0f64..=1.0), 14)) {
            let mut joints = [Joint::new(0.0, 0.0, 0.0); NUM_JOINTS];
            for (j, (x, y, c)) in joints.iter_mut().zip(coords) {
                *j = Joint::new(x, y, c);
            }
            let js = JointSet::new(joints).unwrap();
            let (name, back) = parse_keypoint_line(&keypoint_line("a.png", &js)).unwrap();
            prop_assert_eq!(name, "a.png");
            prop_assert_eq!(back, js);
        }
    }
}
