//! PoseBox construction: body-part quadrilaterals from joints, least-squares
//! affine fits onto a fixed template, and bilinear inverse warping.
//!
//! Coordinates are continuous pixel coordinates: pixel `(row, col)` covers
//! `[col, col + 1) x [row, row + 1)` and its center sits at `(col + 0.5,
//! row + 0.5)`. Joints use the same convention.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{ImageTensor, JointName, JointSet};
use crate::seed::mix_seed;

/// Parts below this confidence may be re-fitted with jittered corners.
pub const JITTER_CONFIDENCE_THRESHOLD: f64 = 0.4;
pub const JITTER_MAGNITUDE_PX: f64 = 2.0;
pub const JITTER_ATTEMPTS: usize = 5;
pub const ARM_WIDTH_PX: f64 = 20.0;
pub const LEG_WIDTH_PX: f64 = 30.0;
pub const HEAD_WIDTH_RATIO: f64 = 2.0 / 3.0;

/// A fit is singular when the canvas-to-image map shrinks every direction
/// below this many image pixels per canvas pixel...
pub const MIN_SCALE: f64 = 0.5;
/// ...or when its condition number exceeds this.
pub const MAX_CONDITION: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartName {
    Head,
    Torso,
    UpperArmL,
    LowerArmL,
    UpperArmR,
    LowerArmR,
    UpperLegL,
    LowerLegL,
    UpperLegR,
    LowerLegR,
}

impl PartName {
    pub const ALL: [PartName; 10] = [
        PartName::Head,
        PartName::Torso,
        PartName::UpperArmL,
        PartName::LowerArmL,
        PartName::UpperArmR,
        PartName::LowerArmR,
        PartName::UpperLegL,
        PartName::LowerLegL,
        PartName::UpperLegR,
        PartName::LowerLegR,
    ];

    /// Later parts overwrite earlier ones.
    pub const PAINT_ORDER: [PartName; 10] = [
        PartName::Torso,
        PartName::UpperLegL,
        PartName::LowerLegL,
        PartName::UpperLegR,
        PartName::LowerLegR,
        PartName::UpperArmL,
        PartName::LowerArmL,
        PartName::UpperArmR,
        PartName::LowerArmR,
        PartName::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PartName::Head => "head",
            PartName::Torso => "torso",
            PartName::UpperArmL => "ul_arm_l",
            PartName::LowerArmL => "ll_arm_l",
            PartName::UpperArmR => "ul_arm_r",
            PartName::LowerArmR => "ll_arm_r",
            PartName::UpperLegL => "ul_leg_l",
            PartName::LowerLegL => "ll_leg_l",
            PartName::UpperLegR => "ul_leg_r",
            PartName::LowerLegR => "ll_leg_r",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn is_arm(self) -> bool {
        matches!(
            self,
            PartName::UpperArmL | PartName::LowerArmL | PartName::UpperArmR | PartName::LowerArmR
        )
    }

    fn is_leg(self) -> bool {
        matches!(
            self,
            PartName::UpperLegL | PartName::LowerLegL | PartName::UpperLegR | PartName::LowerLegR
        )
    }
}

impl fmt::Display for PartName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn dist(self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// One body part: source quad corners ordered top-left, top-right,
/// bottom-right, bottom-left relative to the target rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct PartSpec {
    pub name: PartName,
    pub src_quad: [Point; 4],
    pub confidence: f64,
}

/// Axis-aligned, half-open pixel rectangle `[row0, row1) x [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Rect {
    pub const fn new(row0: usize, row1: usize, col0: usize, col1: usize) -> Self {
        Rect {
            row0,
            row1,
            col0,
            col1,
        }
    }

    pub fn height(&self) -> usize {
        self.row1.saturating_sub(self.row0)
    }

    pub fn width(&self) -> usize {
        self.col1.saturating_sub(self.col0)
    }

    /// Corners in continuous coordinates, same order as [`PartSpec::src_quad`].
    pub fn corners(&self) -> [Point; 4] {
        let (x0, x1) = (self.col0 as f64, self.col1 as f64);
        let (y0, y1) = (self.row0 as f64, self.row1 as f64);
        [
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ]
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoxType {
    One,
    Two,
    Three,
}

impl BoxType {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(BoxType::One),
            2 => Ok(BoxType::Two),
            3 => Ok(BoxType::Three),
            other => Err(Error::Argument(format!(
                "PoseBox type must be 1, 2 or 3, got {other}"
            ))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            BoxType::One => 1,
            BoxType::Two => 2,
            BoxType::Three => 3,
        }
    }

    /// Torso and legs; arms from type 2; head from type 3.
    pub fn includes(self, part: PartName) -> bool {
        match part {
            PartName::Torso => true,
            p if p.is_leg() => true,
            p if p.is_arm() => self >= BoxType::Two,
            _ => self == BoxType::Three,
        }
    }

    pub fn parts(self) -> Vec<PartName> {
        PartName::PAINT_ORDER
            .iter()
            .copied()
            .filter(|&p| self.includes(p))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseBoxTemplate {
    pub canvas_h: usize,
    pub canvas_w: usize,
    target_rects: [Rect; 10],
}

impl PoseBoxTemplate {
    pub fn new(canvas_h: usize, canvas_w: usize, target_rects: [Rect; 10]) -> Result<Self> {
        for (i, r) in target_rects.iter().enumerate() {
            if r.height() == 0 || r.width() == 0 || r.row1 > canvas_h || r.col1 > canvas_w {
                return Err(Error::Argument(format!(
                    "target rect for {} is empty or outside the {canvas_h}x{canvas_w} canvas",
                    PartName::ALL[i]
                )));
            }
        }
        Ok(PoseBoxTemplate {
            canvas_h,
            canvas_w,
            target_rects,
        })
    }

    pub fn rect(&self, part: PartName) -> Rect {
        self.target_rects[part.index()]
    }
}

impl Default for PoseBoxTemplate {
    /// 128x64 upright template.
    fn default() -> Self {
        let mut rects = [Rect::new(0, 0, 0, 0); 10];
        rects[PartName::Head.index()] = Rect::new(0, 16, 24, 40);
        rects[PartName::Torso.index()] = Rect::new(16, 72, 16, 48);
        rects[PartName::UpperArmL.index()] = Rect::new(16, 44, 0, 16);
        rects[PartName::LowerArmL.index()] = Rect::new(44, 72, 0, 16);
        rects[PartName::UpperArmR.index()] = Rect::new(16, 44, 48, 64);
        rects[PartName::LowerArmR.index()] = Rect::new(44, 72, 48, 64);
        rects[PartName::UpperLegL.index()] = Rect::new(72, 100, 8, 32);
        rects[PartName::LowerLegL.index()] = Rect::new(100, 128, 8, 32);
        rects[PartName::UpperLegR.index()] = Rect::new(72, 100, 32, 56);
        rects[PartName::LowerLegR.index()] = Rect::new(100, 128, 32, 56);
        PoseBoxTemplate::new(128, 64, rects).expect("default template is valid")
    }
}

fn joint_point(joints: &JointSet, name: JointName) -> Point {
    let j = joints.get(name);
    Point::new(j.x, j.y)
}

/// Parallelogram of the given width centered on the segment `start -> end`.
/// A zero-length segment collapses to a point.
fn segment_quad(start: Point, end: Point, width: f64) -> [Point; 4] {
    let len = start.dist(end);
    let (ux, uy) = if len > 0.0 {
        ((end.x - start.x) / len, (end.y - start.y) / len)
    } else {
        (0.0, 0.0)
    };
    // normal pointing to the +x side of a downward segment
    let (nx, ny) = (uy * width / 2.0, -ux * width / 2.0);
    [
        Point::new(start.x - nx, start.y - ny),
        Point::new(start.x + nx, start.y + ny),
        Point::new(end.x + nx, end.y + ny),
        Point::new(end.x - nx, end.y - ny),
    ]
}

pub fn derive_parts(joints: &JointSet) -> [PartSpec; 10] {
    use JointName as J;
    let conf = |names: &[J]| {
        names
            .iter()
            .map(|&n| joints.get(n).c)
            .fold(f64::INFINITY, f64::min)
    };
    let limb = |name: PartName, a: J, b: J, width: f64| PartSpec {
        name,
        src_quad: segment_quad(joint_point(joints, a), joint_point(joints, b), width),
        confidence: conf(&[a, b]),
    };
    let head = joint_point(joints, J::Head);
    let neck = joint_point(joints, J::Neck);
    [
        PartSpec {
            name: PartName::Head,
            src_quad: segment_quad(head, neck, HEAD_WIDTH_RATIO * head.dist(neck)),
            confidence: conf(&[J::Head, J::Neck]),
        },
        PartSpec {
            name: PartName::Torso,
            src_quad: [
                joint_point(joints, J::LShoulder),
                joint_point(joints, J::RShoulder),
                joint_point(joints, J::RHip),
                joint_point(joints, J::LHip),
            ],
            confidence: conf(&[J::LShoulder, J::RShoulder, J::RHip, J::LHip]),
        },
        limb(PartName::UpperArmL, J::LShoulder, J::LElbow, ARM_WIDTH_PX),
        limb(PartName::LowerArmL, J::LElbow, J::LWrist, ARM_WIDTH_PX),
        limb(PartName::UpperArmR, J::RShoulder, J::RElbow, ARM_WIDTH_PX),
        limb(PartName::LowerArmR, J::RElbow, J::RWrist, ARM_WIDTH_PX),
        limb(PartName::UpperLegL, J::LHip, J::LKnee, LEG_WIDTH_PX),
        limb(PartName::LowerLegL, J::LKnee, J::LAnkle, LEG_WIDTH_PX),
        limb(PartName::UpperLegR, J::RHip, J::RKnee, LEG_WIDTH_PX),
        limb(PartName::LowerLegR, J::RKnee, J::RAnkle, LEG_WIDTH_PX),
    ]
}

/// Canvas-to-image map `p -> A p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    #[inline]
    pub fn apply(&self, p: Point) -> Point {
        Point::new(
            self.a[0][0] * p.x + self.a[0][1] * p.y + self.t[0],
            self.a[1][0] * p.x + self.a[1][1] * p.y + self.t[1],
        )
    }

    /// Singular values of the linear part, largest first.
    pub fn singular_values(&self) -> (f64, f64) {
        let [[a, b], [c, d]] = self.a;
        let s1 = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        let disc = (s1 * s1 - 4.0 * det * det).max(0.0).sqrt();
        let hi = ((s1 + disc) / 2.0).sqrt();
        let lo = ((s1 - disc) / 2.0).max(0.0).sqrt();
        (hi, lo)
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().flatten().chain(&self.t).all(|v| v.is_finite())
    }

    /// Finite, not collapsed, and reasonably conditioned.
    pub fn is_well_conditioned(&self) -> bool {
        if !self.is_finite() {
            return false;
        }
        let (hi, lo) = self.singular_values();
        hi >= MIN_SCALE && lo * MAX_CONDITION >= hi
    }
}

/// Least-squares affine map sending each `dst` corner onto the matching `src`
/// corner. Returns the transform and the largest corner residual in source
/// pixels.
pub fn least_squares_affine(src: &[Point; 4], dst: &[Point; 4]) -> Result<(AffineTransform, f64)> {
    let mx = dst.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let my = dst.iter().map(|p| p.y).sum::<f64>() / 4.0;
    // normal matrix over centered design rows [dx, dy, 1]
    let mut n = [[0.0f64; 3]; 3];
    let mut rhs = [[0.0f64; 3]; 2];
    for (d, s) in dst.iter().zip(src) {
        let row = [d.x - mx, d.y - my, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                n[i][j] += row[i] * row[j];
            }
            rhs[0][i] += row[i] * s.x;
            rhs[1][i] += row[i] * s.y;
        }
    }
    let sx = solve3(n, rhs[0]).ok_or_else(|| {
        Error::Argument("destination rectangle is degenerate".into())
    })?;
    let sy = solve3(n, rhs[1]).expect("same normal matrix");
    let a = [[sx[0], sx[1]], [sy[0], sy[1]]];
    let t = [
        sx[2] - sx[0] * mx - sx[1] * my,
        sy[2] - sy[0] * mx - sy[1] * my,
    ];
    let xf = AffineTransform { a, t };
    let residual = dst
        .iter()
        .zip(src)
        .map(|(d, s)| xf.apply(*d).dist(*s))
        .fold(0.0, f64::max);
    Ok((xf, residual))
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = m.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in row + 1..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub jitter: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { jitter: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub transform: AffineTransform,
    pub max_residual: f64,
    /// Number of jittered refits tried; zero when the plain fit was used.
    pub jitter_attempts: usize,
}

pub fn fit_affine(
    part: PartName,
    src_quad: &[Point; 4],
    dst_rect: Rect,
    part_confidence: f64,
    rng_seed: u64,
) -> Result<AffineFit> {
    fit_affine_with(part, src_quad, dst_rect, part_confidence, rng_seed, FitOptions::default())
}

pub fn fit_affine_with(
    part: PartName,
    src_quad: &[Point; 4],
    dst_rect: Rect,
    part_confidence: f64,
    rng_seed: u64,
    options: FitOptions,
) -> Result<AffineFit> {
    if dst_rect.width() == 0 || dst_rect.height() == 0 {
        return Err(Error::Argument(format!("empty target rect for {part}")));
    }
    let dst = dst_rect.corners();
    let (transform, max_residual) = least_squares_affine(src_quad, &dst)?;
    if transform.is_well_conditioned() {
        return Ok(AffineFit {
            transform,
            max_residual,
            jitter_attempts: 0,
        });
    }
    if !options.jitter || part_confidence >= JITTER_CONFIDENCE_THRESHOLD {
        return Err(Error::PartDegenerate { part, attempts: 1 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for attempt in 1..=JITTER_ATTEMPTS {
        let mut jittered = *src_quad;
        for p in &mut jittered {
            p.x += rng.gen_range(-JITTER_MAGNITUDE_PX..=JITTER_MAGNITUDE_PX);
            p.y += rng.gen_range(-JITTER_MAGNITUDE_PX..=JITTER_MAGNITUDE_PX);
        }
        let (transform, max_residual) = least_squares_affine(&jittered, &dst)?;
        if transform.is_well_conditioned() {
            return Ok(AffineFit {
                transform,
                max_residual,
                jitter_attempts: attempt,
            });
        }
    }
    Err(Error::PartDegenerate {
        part,
        attempts: 1 + JITTER_ATTEMPTS,
    })
}

/// Inverse-warps `img` into `dst_rect` of `canvas`. Samples falling outside
/// the image are background (0).
pub fn warp_part(img: &ImageTensor, xform: &AffineTransform, dst_rect: Rect, canvas: &mut ImageTensor) {
    let max_x = (img.width() - 1) as f64;
    let max_y = (img.height() - 1) as f64;
    let row1 = dst_rect.row1.min(canvas.height());
    let col1 = dst_rect.col1.min(canvas.width());
    for row in dst_rect.row0..row1 {
        for col in dst_rect.col0..col1 {
            let p = xform.apply(Point::new(col as f64 + 0.5, row as f64 + 0.5));
            let (x, y) = (p.x - 0.5, p.y - 0.5);
            let rgb = if x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y {
                img.bilinear_clamped(x, y)
            } else {
                [0.0; 3]
            };
            canvas.set_pixel(row, col, rgb);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseBox {
    pub image: ImageTensor,
    /// Parts of the box type that were warped, in paint order.
    pub painted: Vec<PartName>,
    /// Parts left as background because their fit was degenerate.
    pub flagged: Vec<PartName>,
}

pub fn build_posebox(
    img: &ImageTensor,
    joints: &JointSet,
    box_type: BoxType,
    template: &PoseBoxTemplate,
    rng_seed: u64,
) -> PoseBox {
    let parts = derive_parts(joints);
    let mut canvas = ImageTensor::zeros(template.canvas_h, template.canvas_w);
    let mut painted = Vec::new();
    let mut flagged = Vec::new();
    for name in box_type.parts() {
        let spec = &parts[name.index()];
        let rect = template.rect(name);
        let seed = mix_seed(rng_seed, name.index() as u64);
        match fit_affine(name, &spec.src_quad, rect, spec.confidence, seed) {
            Ok(fit) => {
                warp_part(img, &fit.transform, rect, &mut canvas);
                painted.push(name);
            }
            Err(_) => flagged.push(name),
        }
    }
    PoseBox {
        image: canvas,
        painted,
        flagged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Joint;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn joints_from(points: [(f64, f64); 14], c: f64) -> JointSet {
        let mut js = [Joint::new(0.0, 0.0, 0.0); 14];
        for (j, (x, y)) in js.iter_mut().zip(points) {
            *j = Joint::new(x, y, c);
        }
        JointSet::new(js).unwrap()
    }

    /// Upright pose inside a 128x64 image, in joint order.
    fn upright() -> [(f64, f64); 14] {
        [
            (32.0, 8.0),
            (32.0, 20.0),
            (42.0, 24.0),
            (45.0, 44.0),
            (46.0, 62.0),
            (22.0, 24.0),
            (19.0, 44.0),
            (18.0, 62.0),
            (38.0, 64.0),
            (38.0, 90.0),
            (38.0, 118.0),
            (26.0, 64.0),
            (26.0, 90.0),
            (26.0, 118.0),
        ]
    }

    #[test]
    fn head_part_from_vertical_axis() {
        let mut pts = upright();
        pts[0] = (32.0, 10.0);
        pts[1] = (32.0, 22.0);
        let parts = derive_parts(&joints_from(pts, 1.0));
        let head = &parts[PartName::Head.index()];
        let height = head.src_quad[0].dist(head.src_quad[3]);
        let width = head.src_quad[0].dist(head.src_quad[1]);
        assert!((height - 12.0).abs() < 1e-12);
        assert!((width - 8.0).abs() < 1e-12);
        assert_eq!(head.confidence, 1.0);
    }

    #[test]
    fn upper_arm_corners() {
        let mut pts = upright();
        pts[JointName::LShoulder.index()] = (10.0, 20.0);
        pts[JointName::LElbow.index()] = (10.0, 40.0);
        let parts = derive_parts(&joints_from(pts, 1.0));
        let arm = &parts[PartName::UpperArmL.index()];
        let expected = [(0.0, 20.0), (20.0, 20.0), (20.0, 40.0), (0.0, 40.0)];
        for (p, (x, y)) in arm.src_quad.iter().zip(expected) {
            assert!((p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn ten_parts_with_min_confidence() {
        let mut js = [Joint::new(0.0, 0.0, 1.0); 14];
        for (i, (j, (x, y))) in js.iter_mut().zip(upright()).enumerate() {
            *j = Joint::new(x, y, 1.0 - i as f64 * 0.05);
        }
        let parts = derive_parts(&JointSet::new(js).unwrap());
        assert_eq!(parts.len(), 10);
        for (p, name) in parts.iter().zip(PartName::ALL) {
            assert_eq!(p.name, name);
        }
        // torso is defined by both shoulders and both hips; l-hip is joint 11
        assert!((parts[PartName::Torso.index()].confidence - 0.45).abs() < 1e-12);
        // l-knee (12) to l-ankle (13)
        assert!((parts[PartName::LowerLegL.index()].confidence - 0.35).abs() < 1e-12);
    }

    #[test]
    fn identity_fit_on_unit_square() {
        let sq = Rect::new(0, 1, 0, 1);
        let fit = fit_affine(PartName::Torso, &sq.corners(), sq, 1.0, 0).unwrap();
        assert_eq!(fit.max_residual, 0.0);
        assert_eq!(fit.transform, AffineTransform::IDENTITY);
        assert_eq!(fit.jitter_attempts, 0);
    }

    /// Normal-equation solution computed through nalgebra on the full 8x6
    /// design matrix, independent of the 3x3 elimination above.
    fn oracle_affine(src: &[Point; 4], dst: &[Point; 4]) -> [f64; 6] {
        let mut x = DMatrix::<f64>::zeros(8, 6);
        let mut b = DVector::<f64>::zeros(8);
        for (k, (d, s)) in dst.iter().zip(src).enumerate() {
            x[(2 * k, 0)] = d.x;
            x[(2 * k, 1)] = d.y;
            x[(2 * k, 2)] = 1.0;
            x[(2 * k + 1, 3)] = d.x;
            x[(2 * k + 1, 4)] = d.y;
            x[(2 * k + 1, 5)] = 1.0;
            b[2 * k] = s.x;
            b[2 * k + 1] = s.y;
        }
        let xt = x.transpose();
        let sol = (&xt * &x).lu().solve(&(&xt * &b)).unwrap();
        [sol[0], sol[1], sol[2], sol[3], sol[4], sol[5]]
    }

    #[test]
    fn rotated_square_matches_normal_equation_oracle() {
        let dst_rect = Rect::new(0, 1, 0, 1);
        let dst = dst_rect.corners();
        // rotate the unit square by 90 degrees about (0.5, 0.5)
        let rot = |p: Point| Point::new(1.0 - p.y, p.x);
        let src = dst.map(rot);
        let fit = fit_affine(PartName::Torso, &src, dst_rect, 1.0, 0).unwrap();
        let o = oracle_affine(&src, &dst);
        let got = [
            fit.transform.a[0][0],
            fit.transform.a[0][1],
            fit.transform.t[0],
            fit.transform.a[1][0],
            fit.transform.a[1][1],
            fit.transform.t[1],
        ];
        for (g, e) in got.iter().zip(o) {
            assert!((g - e).abs() < 1e-12, "{got:?} vs {o:?}");
        }
        // a pure rotation
        assert!((got[0]).abs() < 1e-12 && (got[1] + 1.0).abs() < 1e-12);
        assert!((got[3] - 1.0).abs() < 1e-12 && (got[4]).abs() < 1e-12);
        assert!(fit.max_residual < 1e-12);
    }

    #[test]
    fn torso_fit_matches_oracle() {
        let src = [
            Point::new(20.0, 30.0),
            Point::new(47.0, 28.0),
            Point::new(44.0, 71.0),
            Point::new(25.0, 69.0),
        ];
        let dst = Rect::new(16, 72, 16, 48).corners();
        let (xf, _) = least_squares_affine(&src, &dst).unwrap();
        let o = oracle_affine(&src, &dst);
        assert!((xf.a[0][0] - o[0]).abs() < 1e-10);
        assert!((xf.a[0][1] - o[1]).abs() < 1e-10);
        assert!((xf.t[0] - o[2]).abs() < 1e-9);
        assert!((xf.a[1][0] - o[3]).abs() < 1e-10);
        assert!((xf.a[1][1] - o[4]).abs() < 1e-10);
        assert!((xf.t[1] - o[5]).abs() < 1e-9);
    }

    #[test]
    fn collinear_low_confidence_uses_jitter() {
        let src = [
            Point::new(10.0, 10.0),
            Point::new(10.0, 10.0),
            Point::new(10.0, 40.0),
            Point::new(10.0, 40.0),
        ];
        let rect = Rect::new(16, 44, 0, 16);
        let fit = fit_affine(PartName::UpperArmL, &src, rect, 0.3, 7).unwrap();
        assert!(fit.jitter_attempts >= 1);
        let err = fit_affine_with(PartName::UpperArmL, &src, rect, 0.3, 7, FitOptions { jitter: false });
        assert!(matches!(err, Err(Error::PartDegenerate { .. })));
        // confident parts never jitter
        let err = fit_affine(PartName::UpperArmL, &src, rect, 0.4, 7);
        assert!(matches!(err, Err(Error::PartDegenerate { attempts: 1, .. })));
    }

    #[test]
    fn collapsed_quad_stays_degenerate_under_jitter() {
        let p = Point::new(30.0, 30.0);
        for part in PartName::ALL {
            let rect = PoseBoxTemplate::default().rect(part);
            for seed in 0..20 {
                let r = fit_affine(part, &[p; 4], rect, 0.1, seed);
                assert!(matches!(r, Err(Error::PartDegenerate { attempts: 6, .. })), "{part} {seed}");
            }
        }
    }

    #[test]
    fn warp_constant_image() {
        let img = ImageTensor::filled(128, 64, 0.5);
        let mut canvas = ImageTensor::zeros(128, 64);
        let rect = Rect::new(10, 30, 5, 20);
        warp_part(&img, &AffineTransform::IDENTITY, rect, &mut canvas);
        for r in 0..128 {
            for c in 0..64 {
                let want = if rect.contains(r, c) { 0.5 } else { 0.0 };
                assert_eq!(canvas.pixel(r, c), [want; 3]);
            }
        }
    }

    #[test]
    fn warp_outside_image_is_background() {
        let img = ImageTensor::filled(16, 16, 0.7);
        let mut canvas = ImageTensor::filled(16, 16, 0.2);
        let xf = AffineTransform {
            a: [[1.0, 0.0], [0.0, 1.0]],
            t: [100.0, -50.0],
        };
        let rect = Rect::new(0, 8, 0, 8);
        warp_part(&img, &xf, rect, &mut canvas);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(canvas.pixel(r, c), [0.0; 3]);
            }
        }
        assert_eq!(canvas.pixel(10, 10), [0.2; 3]);
    }

    #[test]
    fn warp_checkerboard_upscale_matches_bilinear_oracle() {
        let mut img = ImageTensor::zeros(2, 2);
        let checker = [[1.0f64, 0.0], [0.0, 1.0]];
        for r in 0..2 {
            for c in 0..2 {
                img.set_pixel(r, c, [checker[r][c] as f32; 3]);
            }
        }
        let xf = AffineTransform {
            a: [[0.5, 0.0], [0.0, 0.5]],
            t: [0.0, 0.0],
        };
        let mut canvas = ImageTensor::zeros(4, 4);
        warp_part(&img, &xf, Rect::new(0, 4, 0, 4), &mut canvas);
        let oracle = |x: f64, y: f64| {
            let (fx, fy) = (x - x.floor(), y - y.floor());
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            (1.0 - fx) * (1.0 - fy) * checker[y0][x0]
                + fx * (1.0 - fy) * checker[y0][x0 + 1]
                + (1.0 - fx) * fy * checker[y0 + 1][x0]
                + fx * fy * checker[y0 + 1][x0 + 1]
        };
        let mut checked = 0;
        for r in 1..3 {
            for c in 1..3 {
                let x = (c as f64 + 0.5) * 0.5 - 0.5;
                let y = (r as f64 + 0.5) * 0.5 - 0.5;
                let want = oracle(x, y);
                assert!((canvas.pixel(r, c)[0] as f64 - want).abs() < 1e-6);
                checked += 1;
            }
        }
        assert_eq!(checked, 4);
        assert!((canvas.pixel(1, 1)[0] - 0.625).abs() < 1e-6);
        assert!((canvas.pixel(1, 2)[0] - 0.375).abs() < 1e-6);
    }

    fn painted_mask(pb: &PoseBox, template: &PoseBoxTemplate) -> Vec<bool> {
        let mut mask = vec![false; template.canvas_h * template.canvas_w];
        for part in &pb.painted {
            let r = template.rect(*part);
            for row in r.row0..r.row1 {
                for col in r.col0..r.col1 {
                    mask[row * template.canvas_w + col] = true;
                }
            }
        }
        mask
    }

    #[test]
    fn type_one_paints_torso_and_legs_only() {
        let img = ImageTensor::filled(128, 64, 0.8);
        let t = PoseBoxTemplate::default();
        let pb = build_posebox(&img, &joints_from(upright(), 1.0), BoxType::One, &t, 3);
        assert!(pb.flagged.is_empty());
        let mut painted = pb.painted.clone();
        painted.sort();
        assert_eq!(
            painted,
            vec![
                PartName::Torso,
                PartName::UpperLegL,
                PartName::LowerLegL,
                PartName::UpperLegR,
                PartName::LowerLegR
            ]
        );
        let mask = painted_mask(&pb, &t);
        for name in PartName::ALL {
            if !BoxType::One.includes(name) {
                let r = t.rect(name);
                for row in r.row0..r.row1 {
                    for col in r.col0..r.col1 {
                        if !mask[row * 64 + col] {
                            assert_eq!(pb.image.pixel(row, col), [0.0; 3]);
                        }
                    }
                }
            }
        }
        // interior of the torso rect samples the constant image
        assert_eq!(pb.image.pixel(40, 30), [0.8; 3]);
    }

    #[test]
    fn type_three_minus_type_two_is_head() {
        let img = ImageTensor::filled(128, 64, 0.8);
        let t = PoseBoxTemplate::default();
        let js = joints_from(upright(), 1.0);
        let two = build_posebox(&img, &js, BoxType::Two, &t, 3);
        let three = build_posebox(&img, &js, BoxType::Three, &t, 3);
        let m2 = painted_mask(&two, &t);
        let m3 = painted_mask(&three, &t);
        let head = t.rect(PartName::Head);
        for row in 0..128 {
            for col in 0..64 {
                let i = row * 64 + col;
                assert_eq!(m3[i] && !m2[i], head.contains(row, col) && !m2[i]);
            }
        }
        assert!(m3.iter().zip(&m2).any(|(a, b)| *a && !*b));
    }

    #[test]
    fn coincident_joints_flag_everything() {
        let img = ImageTensor::filled(128, 64, 0.8);
        let t = PoseBoxTemplate::default();
        let js = joints_from([(30.0, 30.0); 14], 0.1);
        let pb = build_posebox(&img, &js, BoxType::Three, &t, 11);
        assert_eq!(pb.flagged.len(), 10);
        assert!(pb.painted.is_empty());
        assert!(pb.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn posebox_is_deterministic_and_bounded() {
        let mut img = ImageTensor::zeros(128, 64);
        for r in 0..128 {
            for c in 0..64 {
                img.set_pixel(r, c, [r as f32 / 127.0, c as f32 / 63.0, ((r * c) % 7) as f32 / 6.0]);
            }
        }
        let js = joints_from(upright(), 0.3);
        let t = PoseBoxTemplate::default();
        let a = build_posebox(&img, &js, BoxType::Three, &t, 5);
        let b = build_posebox(&img, &js, BoxType::Three, &t, 5);
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn box_type_parse() {
        assert!(BoxType::from_number(4).is_err());
        assert_eq!(BoxType::from_number(2).unwrap(), BoxType::Two);
        assert_eq!(BoxType::One.parts().len(), 5);
        assert_eq!(BoxType::Two.parts().len(), 9);
        assert_eq!(BoxType::Three.parts().len(), 10);
    }

    proptest! {
        #[test]
        fn parallelogram_fit_is_exact(
            ox in -200.0f64..200.0, oy in -200.0f64..200.0,
            ux in -80.0f64..80.0, uy in -80.0f64..80.0,
            vx in -80.0f64..80.0, vy in -80.0f64..80.0,
            part in 0usize..10,
        ) {
            let o = Point::new(ox, oy);
            let src = [
                o,
                Point::new(ox + ux, oy + uy),
                Point::new(ox + ux + vx, oy + uy + vy),
                Point::new(ox + vx, oy + vy),
            ];
            let rect = PoseBoxTemplate::default().rect(PartName::ALL[part]);
            let (_, residual) = least_squares_affine(&src, &rect.corners()).unwrap();
            prop_assert!(residual < 1e-9);
        }

        #[test]
        fn confident_parts_never_jitter(
            pts in proptest::collection::vec((-50.0f64..150.0, -50.0f64..150.0), 4),
            conf in 0.4f64..=1.0,
            seed in any::<u64>(),
        ) {
            let src = [
                Point::new(pts[0].0, pts[0].1),
                Point::new(pts[1].0, pts[1].1),
                Point::new(pts[2].0, pts[2].1),
                Point::new(pts[3].0, pts[3].1),
            ];
            let rect = PoseBoxTemplate::default().rect(PartName::Torso);
            match fit_affine(PartName::Torso, &src, rect, conf, seed) {
                Ok(fit) => prop_assert_eq!(fit.jitter_attempts, 0),
                Err(Error::PartDegenerate { attempts, .. }) => prop_assert_eq!(attempts, 1),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
