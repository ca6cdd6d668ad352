//! 2D primitives for rectangular rooms and convex obstacles.
//!
//! Everything the simulator and the rasterizer touch is written so that a
//! quarter-turn about the origin, `(x, y) -> (-y, x)`, commutes with the
//! floating point arithmetic bit for bit: only negations, commutative sums
//! and products appear in positions that the rotation permutes.

use std::fmt;
use std::io::Write;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack used by containment-in-room checks and by the overlap test so that
/// pieces placed flush against each other (or a wall) are not rejected over
/// rounding noise.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon vertex {0} is not finite")]
    NonFinite(usize),
    #[error("polygon is not strictly convex and counter-clockwise at vertex {0}")]
    NotConvex(usize),
    #[error("polygon area {0:e} is degenerate")]
    Degenerate(f64),
    #[error("invalid rectangle: min {min} must be strictly below max {max}")]
    InvalidRect { min: Vec2, max: Vec2 },
    #[error("rotation must be one of 0, 90, 180, 270 degrees, got {0}")]
    InvalidRotation(i64),
    #[error("object {index} escapes the room bounds")]
    OutOfBounds { index: usize },
    #[error("raster resolution must be at least 16, got {0}")]
    ResolutionTooSmall(usize),
    #[error("image is {width}x{height}, expected a square image")]
    NotSquare { width: usize, height: usize },
    #[error("malformed PGM: {0}")]
    Pgm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product; positive when `o` is
    /// counter-clockwise of `self`.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Unit vector in the same direction, `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        if n > 0.0 && n.is_finite() {
            Some(Vec2::new(self.x / n, self.y / n))
        } else {
            None
        }
    }

    /// Exact counter-clockwise quarter turn.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    /// Exact rotation by `quarter_turns * 90` degrees counter-clockwise.
    pub fn rotate_quarter(self, quarter_turns: u8) -> Vec2 {
        match quarter_turns % 4 {
            0 => self,
            1 => Vec2::new(-self.y, self.x),
            2 => Vec2::new(-self.x, -self.y),
            _ => Vec2::new(self.y, -self.x),
        }
    }

    /// Rotation by an arbitrary angle, given as its cosine and sine.
    pub fn rotate_cs(self, c: f64, s: f64) -> Vec2 {
        Vec2::new(self.x * c - self.y * s, self.y * c + self.x * s)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        self.rotate_cs(theta.cos(), theta.sin())
    }

    /// Angle in (-pi, pi].
    pub fn angle(self) -> f64 {
        normalize_angle(self.y.atan2(self.x))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Maps an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

impl fmt::Display for Vec2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Axis-aligned rectangle, used for the room.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn new(min: Vec2, max: Vec2) -> Result<Self, GeometryError> {
        if !(min.is_finite() && max.is_finite() && min.x < max.x && min.y < max.y) {
            return Err(GeometryError::InvalidRect { min, max });
        }
        Ok(Self { min, max })
    }

    /// Room of the given size with its lower-left corner at the origin.
    pub fn from_size(width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(Vec2::ZERO, Vec2::new(width, height))
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(
            (self.min.x + self.max.x) * 0.5,
            (self.min.y + self.max.y) * 0.5,
        )
    }

    pub fn half_extents(&self) -> Vec2 {
        Vec2::new(self.width() * 0.5, self.height() * 0.5)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// True when every vertex of `poly` is inside the room, up to [`GEOM_EPS`].
    pub fn contains_poly(&self, poly: &ConvexPoly) -> bool {
        poly.vertices().iter().all(|v| {
            v.x >= self.min.x - GEOM_EPS
                && v.x <= self.max.x + GEOM_EPS
                && v.y >= self.min.y - GEOM_EPS
                && v.y <= self.max.y + GEOM_EPS
        })
    }
}

/// Quarter-turn rotation of a furniture piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Rotation {
    #[default]
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn from_degrees(deg: i64) -> Result<Self, GeometryError> {
        match deg {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            other => Err(GeometryError::InvalidRotation(other)),
        }
    }

    pub fn degrees(self) -> i64 {
        self.quarter_turns() as i64 * 90
    }

    pub fn quarter_turns(self) -> u8 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }

    pub fn from_quarter_turns(q: u8) -> Self {
        Self::ALL[(q % 4) as usize]
    }

    pub fn then_quarter(self, q: u8) -> Self {
        Self::from_quarter_turns(self.quarter_turns() + q)
    }
}

impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(self.degrees())
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let deg = i64::deserialize(d)?;
        Rotation::from_degrees(deg).map_err(serde::de::Error::custom)
    }
}

/// Strictly convex polygon with counter-clockwise winding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPoly {
    vertices: Vec<Vec2>,
}

impl ConvexPoly {
    pub fn new(vertices: Vec<Vec2>) -> Result<Self, GeometryError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeometryError::TooFewVertices(n));
        }
        if let Some(i) = vertices.iter().position(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if (b - a).cross(c - b) <= 0.0 {
                return Err(GeometryError::NotConvex((i + 1) % n));
            }
        }
        let poly = Self { vertices };
        let area = poly.area();
        if area <= 1e-9 {
            return Err(GeometryError::Degenerate(area));
        }
        Ok(poly)
    }

    /// Axis-aligned rectangle centered on the origin.
    pub fn centered_rect(half_extents: Vec2) -> Result<Self, GeometryError> {
        let (hx, hy) = (half_extents.x, half_extents.y);
        Self::new(vec![
            Vec2::new(-hx, -hy),
            Vec2::new(hx, -hy),
            Vec2::new(hx, hy),
            Vec2::new(-hx, hy),
        ])
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| a.cross(b)).sum::<f64>()
    }

    pub fn translate(&self, offset: Vec2) -> ConvexPoly {
        ConvexPoly {
            vertices: self.vertices.iter().map(|&v| v + offset).collect(),
        }
    }

    /// Exact rotation about the origin; winding and vertex order are kept.
    pub fn rotate_quarter(&self, quarter_turns: u8) -> ConvexPoly {
        ConvexPoly {
            vertices: self
                .vertices
                .iter()
                .map(|v| v.rotate_quarter(quarter_turns))
                .collect(),
        }
    }

    /// (min, max) corners of the bounding box.
    pub fn bounds(&self) -> (Vec2, Vec2) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices[1..] {
            lo.x = lo.x.min(v.x);
            lo.y = lo.y.min(v.y);
            hi.x = hi.x.max(v.x);
            hi.y = hi.y.max(v.y);
        }
        (lo, hi)
    }

    /// Closed containment: boundary points are inside.
    pub fn contains(&self, p: Vec2) -> bool {
        self.edges().all(|(a, b)| (b - a).cross(p - a) >= 0.0)
    }

    /// Nearest point of the closed polygon to `p`; `p` itself when inside.
    pub fn closest_point(&self, p: Vec2) -> Vec2 {
        if self.contains(p) {
            return p;
        }
        let mut best = self.vertices[0];
        let mut best_d = f64::INFINITY;
        for (a, b) in self.edges() {
            let c = closest_on_segment(a, b, p);
            let d = (p - c).norm_sq();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    pub fn distance(&self, p: Vec2) -> f64 {
        p.distance(self.closest_point(p))
    }
}

pub fn closest_on_segment(a: Vec2, b: Vec2, p: Vec2) -> Vec2 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    a + ab * t
}

pub fn contains(poly: &ConvexPoly, p: Vec2) -> bool {
    poly.contains(p)
}

pub fn closest_point(poly: &ConvexPoly, p: Vec2) -> Vec2 {
    poly.closest_point(p)
}

/// Separating-axis test on interiors: polygons that only share boundary
/// (within [`GEOM_EPS`]) do not overlap.
pub fn polys_overlap(a: &ConvexPoly, b: &ConvexPoly) -> bool {
    !has_separating_axis(a, b) && !has_separating_axis(b, a)
}

fn has_separating_axis(reference: &ConvexPoly, other: &ConvexPoly) -> bool {
    reference.edges().any(|(p, q)| {
        let axis = (q - p).perp();
        let (amin, amax) = project(reference, axis);
        let (bmin, bmax) = project(other, axis);
        let scale = axis.norm();
        amax <= bmin + GEOM_EPS * scale || bmax <= amin + GEOM_EPS * scale
    })
}

fn project(poly: &ConvexPoly, axis: Vec2) -> (f64, f64) {
    poly.vertices()
        .iter()
        .map(|v| v.dot(axis))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
            (lo.min(d), hi.max(d))
        })
}

/// Rotates `poly` (given about its own centroid) by `rotation_deg` and moves
/// it to `center`.
pub fn transform(
    poly: &ConvexPoly,
    center: Vec2,
    rotation_deg: i64,
) -> Result<ConvexPoly, GeometryError> {
    let rot = Rotation::from_degrees(rotation_deg)?;
    Ok(transform_by(poly, center, rot))
}

pub fn transform_by(poly: &ConvexPoly, center: Vec2, rotation: Rotation) -> ConvexPoly {
    ConvexPoly {
        vertices: poly
            .vertices()
            .iter()
            .map(|v| center + v.rotate_quarter(rotation.quarter_turns()))
            .collect(),
    }
}

/// Row-major binary raster. Row 0 is the top of the room (largest y).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    /// One byte per pixel, 0 or 1.
    pub fn bits(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |r, c| self.get(r, self.width - 1 - c))
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.width, self.height, |r, c| {
            self.get(self.height - 1 - r, c)
        })
    }

    /// Counter-clockwise quarter turn, matching a counter-clockwise rotation
    /// of the room about its center.
    pub fn rotate90(&self) -> Result<Self, GeometryError> {
        self.require_square()?;
        let n = self.width;
        Ok(Self::from_fn(n, n, |r, c| self.get(c, n - 1 - r)))
    }

    pub fn rotate_quarter(&self, quarter_turns: u8) -> Result<Self, GeometryError> {
        self.require_square()?;
        let mut img = self.clone();
        for _ in 0..quarter_turns % 4 {
            img = img.rotate90()?;
        }
        Ok(img)
    }

    fn require_square(&self) -> Result<(), GeometryError> {
        if self.width != self.height {
            return Err(GeometryError::NotSquare {
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Binary PGM (`P5`): header `P5\n<w> <h>\n255\n`, then one byte per pixel,
    /// row-major, 255 for object pixels and 0 for free space.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b != 0 { 255 } else { 0 }).collect();
        out.write_all(&bytes)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.data.len() + 16);
        self.write_pgm(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a P5 file as written by [`BinaryImage::write_pgm`]. Any nonzero
    /// sample counts as an object pixel.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self, GeometryError> {
        let (header, body) = parse_pgm_header(bytes)?;
        let (width, height, maxval) = header;
        if maxval == 0 || maxval > 255 {
            return Err(GeometryError::Pgm(format!("unsupported maxval {maxval}")));
        }
        let len = width
            .checked_mul(height)
            .ok_or_else(|| GeometryError::Pgm("dimensions overflow".into()))?;
        if body.len() != len {
            return Err(GeometryError::Pgm(format!(
                "expected {len} pixel bytes, found {}",
                body.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: body.iter().map(|&b| (b != 0) as u8).collect(),
        })
    }
}

fn parse_pgm_header(bytes: &[u8]) -> Result<((usize, usize, usize), &[u8]), GeometryError> {
    if !bytes.starts_with(b"P5") {
        return Err(GeometryError::Pgm("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(GeometryError::Pgm("expected a header number".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| GeometryError::Pgm(format!("header value {text} out of range")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(GeometryError::Pgm("truncated header".into()));
    }
    Ok(((fields[0], fields[1], fields[2]), &bytes[pos + 1..]))
}

/// Pixel-center offsets from the room center along one axis.
///
/// Offset `k` is `(2k + 1 - n) * extent / (2n)`, so offsets `k` and `n-1-k`
/// are exact negatives of each other.
fn pixel_offsets(n: usize, extent: f64) -> Vec<f64> {
    let step = extent / (2 * n) as f64;
    (0..n)
        .map(|k| (2 * k as i64 + 1 - n as i64) as f64 * step)
        .collect()
}

/// Rasterizes objects given relative to the room center. Pixel `(r, c)` is
/// set iff its center lies in any object.
pub fn rasterize_centered(room_size: Vec2, objects: &[ConvexPoly], resolution: usize) -> BinaryImage {
    let xs = pixel_offsets(resolution, room_size.x);
    // row 0 at the top: negate the ascending offsets
    let ys: Vec<f64> = pixel_offsets(resolution, room_size.y)
        .into_iter()
        .map(|v| -v)
        .collect();
    let mut img = BinaryImage::zeros(resolution, resolution);
    for poly in objects {
        let (lo, hi) = poly.bounds();
        for (r, &y) in ys.iter().enumerate() {
            if y < lo.y || y > hi.y {
                continue;
            }
            for (c, &x) in xs.iter().enumerate() {
                if x < lo.x || x > hi.x {
                    continue;
                }
                if poly.contains(Vec2::new(x, y)) {
                    img.set(r, c, true);
                }
            }
        }
    }
    img
}

/// Rasterizes room-coordinate objects at `resolution`×`resolution`, the image
/// spanning exactly the room interior.
pub fn rasterize(
    room: &Rect,
    objects: &[ConvexPoly],
    resolution: usize,
) -> Result<BinaryImage, GeometryError> {
    if resolution < 16 {
        return Err(GeometryError::ResolutionTooSmall(resolution));
    }
    if let Some(index) = objects.iter().position(|p| !room.contains_poly(p)) {
        return Err(GeometryError::OutOfBounds { index });
    }
    let center = room.center();
    let centered: Vec<ConvexPoly> = objects.iter().map(|p| p.translate(-center)).collect();
    Ok(rasterize_centered(
        Vec2::new(room.width(), room.height()),
        &centered,
        resolution,
    ))
}
