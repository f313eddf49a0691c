//! Seeded synthetic pedestrian benchmark: stick figures with per-identity
//! clothing over per-camera textured backgrounds, with pose jitter, vertical
//! misalignment and corrupted joint annotations.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{
    keypoint_line, save_png, write_manifest, DatasetManifest, ImageTensor, Joint, JointName, JointSet,
    SampleRecord, Split, NUM_JOINTS,
};
use crate::posebox::Point;
use crate::seed::mix_seed;

pub const IMAGE_H: usize = 256;
pub const IMAGE_W: usize = 128;

/// Corrupted joints get a confidence drawn from `[0, CORRUPT_CONF_MAX)`.
pub const CORRUPT_CONF_MAX: f64 = 0.4;
const CORRUPT_SHIFT_PX: (f64, f64) = (15.0, 40.0);
const PIXEL_NOISE_STD: f64 = 0.03;

/// Upright reference pose in image pixels, in joint order. `L*` joints sit
/// at the smaller x.
pub const CANONICAL_JOINTS: [(f64, f64); NUM_JOINTS] = [
    (64.0, 30.0),
    (64.0, 56.0),
    (84.0, 62.0),
    (90.0, 104.0),
    (92.0, 144.0),
    (44.0, 62.0),
    (38.0, 104.0),
    (36.0, 144.0),
    (74.0, 140.0),
    (76.0, 188.0),
    (76.0, 236.0),
    (54.0, 140.0),
    (52.0, 188.0),
    (52.0, 236.0),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub images_per_id: usize,
    pub n_cameras: usize,
    /// Maximum limb-angle perturbation, degrees.
    pub pose_jitter: f64,
    /// Maximum vertical figure offset, pixels.
    pub v_misalign: f64,
    /// Per-joint corruption probability.
    pub conf_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_ids: 100,
            images_per_id: 4,
            n_cameras: 2,
            pose_jitter: 20.0,
            v_misalign: 12.0,
            conf_noise: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cameras < 2 {
            return Err(Error::Argument("at least 2 cameras are required".into()));
        }
        if self.n_ids < 2 {
            return Err(Error::Argument("at least 2 identities are required".into()));
        }
        if self.images_per_id == 0 {
            return Err(Error::Argument("images_per_id must be positive".into()));
        }
        for (name, v) in [("pose_jitter", self.pose_jitter), ("v_misalign", self.v_misalign)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.conf_noise) {
            return Err(Error::Argument(format!(
                "conf_noise must be in [0, 1], got {}",
                self.conf_noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: ImageTensor,
    /// Annotated joints: true positions unless corrupted.
    pub joints: JointSet,
    pub record: SampleRecord,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub manifest: DatasetManifest,
    /// Parallel to the manifest records.
    pub samples: Vec<SynthSample>,
}

type Rgb = [f64; 3];

const PALETTE: [Rgb; 12] = [
    [0.85, 0.12, 0.12],
    [0.12, 0.35, 0.85],
    [0.15, 0.65, 0.20],
    [0.92, 0.85, 0.15],
    [0.95, 0.95, 0.95],
    [0.10, 0.10, 0.10],
    [0.55, 0.25, 0.70],
    [0.95, 0.55, 0.10],
    [0.45, 0.30, 0.15],
    [0.50, 0.50, 0.55],
    [0.15, 0.75, 0.80],
    [0.95, 0.50, 0.70],
];
const SKIN: Rgb = [0.87, 0.70, 0.58];

/// Clothing signature shared by every image of one identity.
#[derive(Debug, Clone, PartialEq)]
struct Identity {
    torso: Rgb,
    stripe: Option<(Rgb, f64)>,
    sleeves: Rgb,
    long_sleeves: bool,
    legs: Rgb,
    shorts: bool,
    hair: Rgb,
    bag: Option<Rgb>,
}

fn palette_color(rng: &mut ChaCha8Rng) -> Rgb {
    let base = PALETTE[rng.gen_range(0..PALETTE.len())];
    base.map(|c| (c + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0))
}

impl Identity {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Identity {
            torso: palette_color(rng),
            stripe: rng.gen_bool(0.5).then(|| (palette_color(rng), rng.gen_range(0.2..0.8))),
            sleeves: palette_color(rng),
            long_sleeves: rng.gen_bool(0.5),
            legs: palette_color(rng),
            shorts: rng.gen_bool(0.3),
            hair: palette_color(rng),
            bag: rng.gen_bool(0.5).then(|| palette_color(rng)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Camera {
    background: Rgb,
    texture: Rgb,
    /// Texture stripe direction and period.
    angle: f64,
    period: f64,
    gain: Rgb,
}

impl Camera {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let background: Rgb = [(); 3].map(|_| rng.gen_range(0.2..0.8));
        let texture = background.map(|c| (c + rng.gen_range(-0.25..0.25)).clamp(0.0, 1.0));
        Camera {
            background,
            texture,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            period: rng.gen_range(8.0..24.0),
            gain: [(); 3].map(|_| rng.gen_range(0.8..1.2)),
        }
    }
}

const ID_STREAM: u64 = 1 << 32;
const CAMERA_STREAM: u64 = 2 << 32;
const IMAGE_STREAM: u64 = 3 << 32;

/// Split and camera of image `j` of identity `id`: the first half of the
/// identities train; of the rest, the first `n_cameras` images are queries.
fn assignment(config: &SynthConfig, id: usize, j: usize) -> (Split, u32) {
    let camera = (j % config.n_cameras) as u32;
    let split = if id < config.n_ids / 2 {
        Split::Train
    } else if j < config.n_cameras {
        Split::Query
    } else {
        Split::Gallery
    };
    (split, camera)
}

fn rotate_about(p: Point, pivot: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (p.x - pivot.x, p.y - pivot.y);
    Point::new(pivot.x + c * dx - s * dy, pivot.y + s * dx + c * dy)
}

/// True joint positions for one rendering: limb chains rotated about their
/// proximal joints, then the whole figure shifted vertically.
fn jittered_pose(rng: &mut ChaCha8Rng, pose_jitter: f64, v_misalign: f64) -> [Point; NUM_JOINTS] {
    use JointName as J;
    let mut p = CANONICAL_JOINTS.map(|(x, y)| Point::new(x, y));
    let max = pose_jitter.to_radians();
    let angle = |rng: &mut ChaCha8Rng| if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
    for (root, mid, tip) in [
        (J::RShoulder, J::RElbow, J::RWrist),
        (J::LShoulder, J::LElbow, J::LWrist),
        (J::RHip, J::RKnee, J::RAnkle),
        (J::LHip, J::LKnee, J::LAnkle),
    ] {
        let a = angle(rng);
        let pivot = p[root.index()];
        p[mid.index()] = rotate_about(p[mid.index()], pivot, a);
        p[tip.index()] = rotate_about(p[tip.index()], pivot, a);
        let b = angle(rng);
        let pivot = p[mid.index()];
        p[tip.index()] = rotate_about(p[tip.index()], pivot, b);
    }
    let dy = if v_misalign > 0.0 {
        rng.gen_range(-v_misalign..=v_misalign)
    } else {
        0.0
    };
    p.map(|q| Point::new(q.x, q.y + dy))
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    /// Calls `paint` for every pixel whose center lies in the convex polygon.
    fn fill_convex(&mut self, poly: &[Point], mut paint: impl FnMut(Point) -> Option<Rgb>) {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in poly {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let c0 = x0.floor().max(0.0) as usize;
        let c1 = (x1.ceil().max(0.0) as usize).min(self.w);
        let r0 = y0.floor().max(0.0) as usize;
        let r1 = (y1.ceil().max(0.0) as usize).min(self.h);
        for r in r0..r1 {
            for c in c0..c1 {
                let q = Point::new(c as f64 + 0.5, r as f64 + 0.5);
                if inside_convex(poly, q) {
                    if let Some(rgb) = paint(q) {
                        self.px[r * self.w + c] = rgb;
                    }
                }
            }
        }
    }

    fn segment(&mut self, a: Point, b: Point, width: f64, color: Rgb) {
        let len = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt().max(1e-9);
        let (nx, ny) = ((b.y - a.y) / len * width / 2.0, -(b.x - a.x) / len * width / 2.0);
        // extend along the axis so consecutive limbs overlap at the joint
        let (ex, ey) = ((b.x - a.x) / len * width / 4.0, (b.y - a.y) / len * width / 4.0);
        let quad = [
            Point::new(a.x - nx - ex, a.y - ny - ey),
            Point::new(a.x + nx - ex, a.y + ny - ey),
            Point::new(b.x + nx + ex, b.y + ny + ey),
            Point::new(b.x - nx + ex, b.y - ny + ey),
        ];
        self.fill_convex(&quad, |_| Some(color));
    }

    fn disc(&mut self, center: Point, radius: f64, mut color: impl FnMut(Point) -> Rgb) {
        let poly: Vec<Point> = (0..24)
            .map(|k| {
                let t = k as f64 / 24.0 * std::f64::consts::TAU;
                Point::new(center.x + radius * t.cos(), center.y + radius * t.sin())
            })
            .collect();
        self.fill_convex(&poly, |q| Some(color(q)));
    }
}

fn inside_convex(poly: &[Point], q: Point) -> bool {
    let mut sign = 0.0f64;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let cross = (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

fn render(
    who: &Identity,
    cam: &Camera,
    pose: &[Point; NUM_JOINTS],
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    use JointName as J;
    let j = |n: JointName| pose[n.index()];
    let (s, c) = cam.angle.sin_cos();
    let mut canvas = Canvas {
        h: IMAGE_H,
        w: IMAGE_W,
        px: Vec::with_capacity(IMAGE_H * IMAGE_W),
    };
    for r in 0..IMAGE_H {
        for col in 0..IMAGE_W {
            let t = ((col as f64 * c + r as f64 * s) / cam.period).fract();
            canvas.px.push(if t < 0.5 { cam.background } else { cam.texture });
        }
    }
    // background clutter
    for _ in 0..3 {
        let color = palette_color(rng);
        let (x, y) = (rng.gen_range(0.0..IMAGE_W as f64), rng.gen_range(0.0..IMAGE_H as f64));
        let (w, h) = (rng.gen_range(8.0..30.0), rng.gen_range(8.0..40.0));
        let rect = [
            Point::new(x, y),
            Point::new(x + w, y),
            Point::new(x + w, y + h),
            Point::new(x, y + h),
        ];
        canvas.fill_convex(&rect, |_| Some(color));
    }

    let (lower_leg, lower_arm) = (
        if who.shorts { SKIN } else { who.legs },
        if who.long_sleeves { who.sleeves } else { SKIN },
    );
    for (hip, knee, ankle) in [(J::LHip, J::LKnee, J::LAnkle), (J::RHip, J::RKnee, J::RAnkle)] {
        canvas.segment(j(hip), j(knee), 24.0, who.legs);
        canvas.segment(j(knee), j(ankle), 20.0, lower_leg);
    }

    let (ls, rs, rh, lh) = (j(J::LShoulder), j(J::RShoulder), j(J::RHip), j(J::LHip));
    let torso = [
        Point::new(ls.x - 4.0, ls.y),
        Point::new(rs.x + 4.0, rs.y),
        Point::new(rh.x + 4.0, rh.y + 4.0),
        Point::new(lh.x - 4.0, lh.y + 4.0),
    ];
    let (top, bottom) = ((ls.y + rs.y) / 2.0, (lh.y + rh.y) / 2.0 + 4.0);
    canvas.fill_convex(&torso, |q| {
        let frac = (q.y - top) / (bottom - top);
        match who.stripe {
            Some((color, at)) if (frac - at).abs() < 0.1 => Some(color),
            _ => Some(who.torso),
        }
    });

    if let Some(color) = who.bag {
        let (x, y) = (rs.x + 14.0, (rs.y + rh.y) / 2.0);
        let bag = [
            Point::new(x, y),
            Point::new(x + 18.0, y),
            Point::new(x + 18.0, y + 34.0),
            Point::new(x, y + 34.0),
        ];
        canvas.fill_convex(&bag, |_| Some(color));
    }

    for (sh, el, wr) in [(J::LShoulder, J::LElbow, J::LWrist), (J::RShoulder, J::RElbow, J::RWrist)] {
        canvas.segment(j(sh), j(el), 15.0, who.sleeves);
        canvas.segment(j(el), j(wr), 12.0, lower_arm);
    }

    let (head, neck) = (j(J::Head), j(J::Neck));
    let center = Point::new((head.x + neck.x) / 2.0, (head.y + neck.y) / 2.0);
    let radius = ((neck.y - head.y).abs() / 2.0).max(4.0) + 1.0;
    let hairline = center.y - radius * 0.2;
    canvas.disc(center, radius, |q| if q.y < hairline { who.hair } else { SKIN });

    let noise = Normal::new(0.0, PIXEL_NOISE_STD).expect("valid std");
    let mut data = Vec::with_capacity(IMAGE_H * IMAGE_W * 3);
    for px in &canvas.px {
        for ch in 0..3 {
            let v = px[ch] * cam.gain[ch] + noise.sample(rng);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let mut img = ImageTensor::from_vec(IMAGE_H, IMAGE_W, data).expect("canvas size matches");
    img.quantize();
    img
}

/// Annotations as an estimator would report them: each joint is corrupted
/// with probability `conf_noise` (displaced, low confidence).
fn annotate(pose: &[Point; NUM_JOINTS], conf_noise: f64, rng: &mut ChaCha8Rng) -> Result<JointSet> {
    let mut joints = [Joint::new(0.0, 0.0, 1.0); NUM_JOINTS];
    for (dst, p) in joints.iter_mut().zip(pose) {
        *dst = if conf_noise > 0.0 && rng.gen_bool(conf_noise) {
            let r = rng.gen_range(CORRUPT_SHIFT_PX.0..CORRUPT_SHIFT_PX.1);
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            Joint::new(p.x + r * t.cos(), p.y + r * t.sin(), rng.gen_range(0.0..CORRUPT_CONF_MAX))
        } else {
            Joint::new(p.x, p.y, 1.0)
        };
    }
    JointSet::new(joints)
}

pub fn image_name(id: usize, j: usize, camera: u32) -> String {
    format!("images/{id:04}_{j:02}_c{camera}.png")
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let identities: Vec<Identity> = (0..config.n_ids)
        .map(|id| Identity::sample(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, ID_STREAM | id as u64))))
        .collect();
    let cameras: Vec<Camera> = (0..config.n_cameras)
        .map(|c| Camera::sample(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, CAMERA_STREAM | c as u64))))
        .collect();

    let total = config.n_ids * config.images_per_id;
    let samples: Vec<SynthSample> = (0..total)
        .into_par_iter()
        .map(|k| {
            let (id, j) = (k / config.images_per_id, k % config.images_per_id);
            let (split, camera) = assignment(config, id, j);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, IMAGE_STREAM | k as u64));
            let pose = jittered_pose(&mut rng, config.pose_jitter, config.v_misalign);
            let image = render(&identities[id], &cameras[camera as usize], &pose, &mut rng);
            let joints = annotate(&pose, config.conf_noise, &mut rng)?;
            Ok(SynthSample {
                image,
                joints,
                record: SampleRecord {
                    image_path: image_name(id, j, camera),
                    identity: id as u32,
                    camera,
                    split,
                },
            })
        })
        .collect::<Result<_>>()?;

    let manifest = DatasetManifest::new(samples.iter().map(|s| s.record.clone()).collect())?;
    manifest
        .validate_cross_camera()
        .map_err(|e| Error::Generation(format!("{e}; raise images_per_id or lower n_cameras")))?;
    if manifest.split_indices(Split::Query).is_empty() {
        return Err(Error::Generation("configuration yields no query images".into()));
    }
    Ok(SynthDataset {
        config: config.clone(),
        manifest,
        samples,
    })
}

impl SynthDataset {
    /// Writes `images/*.png`, `manifest.csv` and `keypoints.jsonl` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        self.samples
            .par_iter()
            .try_for_each(|s| save_png(dir.join(&s.record.image_path), &s.image))?;
        write_manifest(dir.join("manifest.csv"), &self.manifest)?;
        let mut text = String::new();
        for s in &self.samples {
            text.push_str(&keypoint_line(&s.record.image_path, &s.joints));
            text.push('\n');
        }
        let path = dir.join("keypoints.jsonl");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
