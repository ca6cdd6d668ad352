//! Furniture catalog, layout validation, random layout sampling and the
//! layout JSON schema.

use std::collections::HashSet;
use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    polys_overlap, rasterize_centered, transform_by, BinaryImage, ConvexPoly, GeometryError, Rect,
    Rotation, Vec2,
};

/// Side length of the model input raster.
pub const IMAGE_RESOLUTION: usize = 224;

/// Default room edge, meters.
pub const DEFAULT_ROOM_SIZE: f64 = 5.0;

/// Sampled centers are snapped to multiples of 2^-16 m. Dyadic centers keep
/// `center - room_center` exact, which the quarter-turn symmetry relies on.
const CENTER_GRID: f64 = 65536.0;

const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("object count must be 3, 4 or 5, got {0}")]
    InvalidCount(usize),
    #[error("no valid placement found after {0} rejections")]
    Infeasible(usize),
    #[error("object {index} ({kind}) does not fit inside the room")]
    OutOfRoom { index: usize, kind: FurnitureKind },
    #[error("objects {a} and {b} overlap")]
    Overlap { a: usize, b: usize },
    #[error("furniture piece {0} placed more than once")]
    DuplicateKind(FurnitureKind),
    #[error("at most {max} objects allowed, got {got}")]
    TooManyObjects { max: usize, got: usize },
    #[error("catalog has no entry for {0}")]
    MissingFromCatalog(FurnitureKind),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl LayoutError {
    /// Errors caused by a malformed document rather than an impossible layout.
    pub fn is_schema(&self) -> bool {
        matches!(self, LayoutError::Schema { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FurnitureKind {
    TvStand,
    Sofa,
    ShelfA,
    ShelfB,
    MiniFridge,
}

impl FurnitureKind {
    pub const ALL: [FurnitureKind; 5] = [
        FurnitureKind::TvStand,
        FurnitureKind::Sofa,
        FurnitureKind::ShelfA,
        FurnitureKind::ShelfB,
        FurnitureKind::MiniFridge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FurnitureKind::TvStand => "tv_stand",
            FurnitureKind::Sofa => "sofa",
            FurnitureKind::ShelfA => "shelf_a",
            FurnitureKind::ShelfB => "shelf_b",
            FurnitureKind::MiniFridge => "mini_fridge",
        }
    }
}

impl fmt::Display for FurnitureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FurnitureSpec {
    pub kind: FurnitureKind,
    pub half_extents: Vec2,
}

/// Furniture dimensions. The default matches common retail sizes; a JSON
/// file of `[{"kind": "sofa", "half_extents": {"x": 1.0, "y": 0.45}}, ...]`
/// overrides it.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    specs: Vec<FurnitureSpec>,
}

impl Default for Catalog {
    fn default() -> Self {
        let spec = |kind, w: f64, d: f64| FurnitureSpec {
            kind,
            half_extents: Vec2::new(w / 2.0, d / 2.0),
        };
        Self {
            specs: vec![
                spec(FurnitureKind::TvStand, 1.6, 0.4),
                spec(FurnitureKind::Sofa, 2.0, 0.9),
                spec(FurnitureKind::ShelfA, 0.8, 0.3),
                spec(FurnitureKind::ShelfB, 0.8, 0.3),
                spec(FurnitureKind::MiniFridge, 0.5, 0.5),
            ],
        }
    }
}

impl Catalog {
    pub fn new(specs: Vec<FurnitureSpec>) -> Result<Self, LayoutError> {
        let mut seen = HashSet::new();
        for s in &specs {
            if !seen.insert(s.kind) {
                return Err(LayoutError::DuplicateKind(s.kind));
            }
            if !(s.half_extents.x > 0.0 && s.half_extents.y > 0.0) || !s.half_extents.is_finite() {
                return Err(LayoutError::Schema {
                    path: format!("{}.half_extents", s.kind),
                    message: "half extents must be positive".into(),
                });
            }
        }
        Ok(Self { specs })
    }

    pub fn from_json(text: &str) -> Result<Self, LayoutError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let specs: Vec<FurnitureSpec> =
            serde_path_to_error::deserialize(de).map_err(schema_error)?;
        Self::new(specs)
    }

    pub fn specs(&self) -> &[FurnitureSpec] {
        &self.specs
    }

    pub fn get(&self, kind: FurnitureKind) -> Option<&FurnitureSpec> {
        self.specs.iter().find(|s| s.kind == kind)
    }
}

/// The five pieces of the default catalog.
pub fn catalog() -> Vec<FurnitureSpec> {
    Catalog::default().specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    kind: FurnitureKind,
    center: Vec2,
    rotation: Rotation,
    half_extents: Vec2,
    footprint: ConvexPoly,
}

impl PlacedObject {
    pub fn new(spec: &FurnitureSpec, center: Vec2, rotation: Rotation) -> Result<Self, LayoutError> {
        let local = ConvexPoly::centered_rect(spec.half_extents)?;
        Ok(Self {
            kind: spec.kind,
            center,
            rotation,
            half_extents: spec.half_extents,
            footprint: transform_by(&local, center, rotation),
        })
    }

    pub fn kind(&self) -> FurnitureKind {
        self.kind
    }

    pub fn center(&self) -> Vec2 {
        self.center
    }

    pub fn rotation(&self) -> Rotation {
        self.rotation
    }

    /// Footprint in room coordinates.
    pub fn footprint(&self) -> &ConvexPoly {
        &self.footprint
    }

    pub fn half_extents(&self) -> Vec2 {
        self.half_extents
    }

    /// Footprint relative to `origin`, built from `center - origin` so that
    /// dyadic centers give exactly rotation-equivariant vertices.
    pub fn footprint_relative_to(&self, origin: Vec2) -> ConvexPoly {
        let local = ConvexPoly::centered_rect(self.half_extents).expect("validated on construction");
        transform_by(&local, self.center - origin, self.rotation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub room: Rect,
    objects: Vec<PlacedObject>,
}

impl Layout {
    pub fn empty(room: Rect) -> Self {
        Self {
            room,
            objects: Vec::new(),
        }
    }

    /// Validates containment, pairwise non-overlap and piece uniqueness.
    pub fn new(room: Rect, objects: Vec<PlacedObject>) -> Result<Self, LayoutError> {
        if objects.len() > FurnitureKind::ALL.len() {
            return Err(LayoutError::TooManyObjects {
                max: FurnitureKind::ALL.len(),
                got: objects.len(),
            });
        }
        let mut seen = HashSet::new();
        for (i, o) in objects.iter().enumerate() {
            if !seen.insert(o.kind) {
                return Err(LayoutError::DuplicateKind(o.kind));
            }
            if !o.center.is_finite() || !room.contains_poly(&o.footprint) {
                return Err(LayoutError::OutOfRoom {
                    index: i,
                    kind: o.kind,
                });
            }
        }
        for i in 0..objects.len() {
            for j in i + 1..objects.len() {
                if polys_overlap(&objects[i].footprint, &objects[j].footprint) {
                    return Err(LayoutError::Overlap { a: i, b: j });
                }
            }
        }
        Ok(Self { room, objects })
    }

    pub fn objects(&self) -> &[PlacedObject] {
        &self.objects
    }

    pub fn footprints(&self) -> Vec<ConvexPoly> {
        self.objects.iter().map(|o| o.footprint.clone()).collect()
    }

    /// Footprints relative to the room center.
    pub fn centered_footprints(&self) -> Vec<ConvexPoly> {
        let c = self.room.center();
        self.objects.iter().map(|o| o.footprint_relative_to(c)).collect()
    }

    /// The layout turned a quarter counter-clockwise about the room center.
    /// A non-square room swaps its width and height.
    pub fn rotate_90(&self) -> Layout {
        let old_c = self.room.center();
        let room = Rect::new(
            self.room.min,
            self.room.min + Vec2::new(self.room.height(), self.room.width()),
        )
        .expect("dimensions of a valid room");
        let new_c = room.center();
        let objects = self
            .objects
            .iter()
            .map(|o| {
                let center = new_c + (o.center - old_c).perp();
                let local = ConvexPoly::centered_rect(o.half_extents).expect("validated");
                let rotation = o.rotation.then_quarter(1);
                PlacedObject {
                    kind: o.kind,
                    center,
                    rotation,
                    half_extents: o.half_extents,
                    footprint: transform_by(&local, center, rotation),
                }
            })
            .collect();
        Layout { room, objects }
    }

    pub fn to_doc(&self) -> LayoutDoc {
        LayoutDoc {
            room: RoomDoc {
                width_m: self.room.width(),
                height_m: self.room.height(),
            },
            objects: self
                .objects
                .iter()
                .map(|o| ObjectDoc {
                    kind: o.kind,
                    center_m: [o.center.x, o.center.y],
                    rotation_deg: o.rotation,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("layout serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LayoutError> {
        Self::from_json_with(text, &Catalog::default())
    }

    pub fn from_json_with(text: &str, catalog: &Catalog) -> Result<Self, LayoutError> {
        LayoutDoc::parse(text)?.resolve(catalog)
    }
}

/// Wire form of a layout:
/// `{"room":{"width_m":5.0,"height_m":5.0},"objects":[{"kind":"sofa","center_m":[x,y],"rotation_deg":90}]}`.
/// The room's lower-left corner is the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutDoc {
    pub room: RoomDoc,
    pub objects: Vec<ObjectDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomDoc {
    pub width_m: f64,
    pub height_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectDoc {
    pub kind: FurnitureKind,
    pub center_m: [f64; 2],
    pub rotation_deg: Rotation,
}

pub(crate) fn schema_error<E: fmt::Display>(e: serde_path_to_error::Error<E>) -> LayoutError {
    LayoutError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    }
}

impl LayoutDoc {
    pub fn parse(text: &str) -> Result<Self, LayoutError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(schema_error)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, LayoutError> {
        serde_path_to_error::deserialize(value).map_err(schema_error)
    }

    pub fn resolve(&self, catalog: &Catalog) -> Result<Layout, LayoutError> {
        let room = Rect::from_size(self.room.width_m, self.room.height_m).map_err(|e| {
            LayoutError::Schema {
                path: "room".into(),
                message: e.to_string(),
            }
        })?;
        let objects = self
            .objects
            .iter()
            .map(|o| {
                let spec = catalog
                    .get(o.kind)
                    .ok_or(LayoutError::MissingFromCatalog(o.kind))?;
                PlacedObject::new(spec, Vec2::new(o.center_m[0], o.center_m[1]), o.rotation_deg)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Layout::new(room, objects)
    }
}

/// Samples a Study-1 style layout in the default 5 m room.
pub fn sample_layout(seed: u64, n_objects: usize) -> Result<Layout, LayoutError> {
    let room = Rect::from_size(DEFAULT_ROOM_SIZE, DEFAULT_ROOM_SIZE)?;
    sample_layout_in(&Catalog::default(), room, seed, n_objects)
}

/// Picks a uniform `n`-subset of the catalog (all of it for `n = 5`) and
/// places each piece with a uniform quarter-turn rotation and a center uniform
/// over the room shrunk by the rotated half extents. A piece overlapping an
/// earlier one is redrawn.
pub fn sample_layout_in(
    catalog: &Catalog,
    room: Rect,
    seed: u64,
    n_objects: usize,
) -> Result<Layout, LayoutError> {
    if !(3..=5).contains(&n_objects) || n_objects > catalog.specs().len() {
        return Err(LayoutError::InvalidCount(n_objects));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = if n_objects == catalog.specs().len() {
        (0..n_objects).collect::<Vec<_>>()
    } else {
        sample_indices(&mut rng, catalog.specs().len(), n_objects).into_vec()
    };
    chosen.sort_unstable();

    let mut placed: Vec<PlacedObject> = Vec::with_capacity(n_objects);
    let mut rejections = 0;
    for &i in &chosen {
        let spec = &catalog.specs()[i];
        loop {
            let rotation = Rotation::ALL[rng.gen_range(0..4)];
            let h = spec.half_extents.rotate_quarter(rotation.quarter_turns());
            let (hx, hy) = (h.x.abs(), h.y.abs());
            let x = sample_grid(&mut rng, room.min.x + hx, room.max.x - hx);
            let y = sample_grid(&mut rng, room.min.y + hy, room.max.y - hy);
            let candidate = match (x, y) {
                (Some(x), Some(y)) => Some(PlacedObject::new(spec, Vec2::new(x, y), rotation)?),
                _ => None,
            };
            match candidate {
                Some(c) if !placed.iter().any(|p| polys_overlap(&p.footprint, &c.footprint)) => {
                    placed.push(c);
                    break;
                }
                _ => {
                    rejections += 1;
                    if rejections > MAX_REJECTIONS {
                        return Err(LayoutError::Infeasible(rejections));
                    }
                }
            }
        }
    }
    Layout::new(room, placed)
}

/// Uniform draw on the 2^-16 grid inside `[lo, hi]`.
fn sample_grid(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Option<f64> {
    let lo_k = (lo * CENTER_GRID).ceil();
    let hi_k = (hi * CENTER_GRID).floor();
    // always consume one draw so the stream does not depend on feasibility
    let u: f64 = rng.gen();
    if lo_k > hi_k {
        return None;
    }
    let k = (lo_k + (u * (hi_k - lo_k + 1.0)).floor()).min(hi_k);
    Some(k / CENTER_GRID)
}

/// The model input: the room interior rasterized at 224×224.
pub fn layout_to_image(layout: &Layout) -> BinaryImage {
    layout_to_image_at(layout, IMAGE_RESOLUTION)
}

pub fn layout_to_image_at(layout: &Layout, resolution: usize) -> BinaryImage {
    rasterize_centered(
        Vec2::new(layout.room.width(), layout.room.height()),
        &layout.centered_footprints(),
        resolution,
    )
}
