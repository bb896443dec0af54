//! Grid evaluation of kinetostatic fields, iso-conditioning contours and the
//! analytic workspace boundary, with CSV / JSON / SVG export.
//!
//! Contours of `1/kappa` are extracted from a folded field
//! `g = sign * (1 - v)`, where the sign flips across the `v = 1` ridge
//! (`sign cos(theta3 - theta4)` for `A`, `sign(beta1 - beta2)` for `B`). Level
//! `l < 1` is the pair of sets `g = +-(1 - l)` and the isotropy level `l = 1`
//! becomes the zero crossing of `g`, which linear interpolation locates
//! accurately. A plain threshold of `v` at 1 would find no crossing at all.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::fivebar_indices;
use crate::error::{Error, Result};
use crate::fivebar::{
    boundary_proximity, forward_kinematics_in_mode, inverse_kinematics, PostureState, Sign,
    WorkingMode,
};
use crate::model::{FiveBarModel, Vec2, SCHEMA_VERSION};

pub const DEFAULT_LEVELS: [f64; 6] = [0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    InvKappaA,
    InvKappaB,
    BoundaryDistance,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::InvKappaA => "inv_kappa_a",
            Field::InvKappaB => "inv_kappa_b",
            Field::BoundaryDistance => "boundary_distance",
        }
    }

    fn is_inverse_condition(self) -> bool {
        !matches!(self, Field::BoundaryDistance)
    }
}

impl std::str::FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inv_kappa_a" | "a" => Ok(Field::InvKappaA),
            "inv_kappa_b" | "b" => Ok(Field::InvKappaB),
            "boundary_distance" | "boundary" => Ok(Field::BoundaryDistance),
            _ => Err(Error::InvalidArgument(format!(
                "unknown field `{s}` (expected inv_kappa_a, inv_kappa_b or boundary_distance)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// Axes are the end point `(x, y)`.
    Cartesian,
    /// Axes are the actuated angles `(theta1, theta2)`.
    Joint,
}

/// Axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub min: Vec2,
    pub max: Vec2,
}

impl Domain {
    pub fn new(min: Vec2, max: Vec2) -> Result<Self> {
        let ok = min.iter().chain(max.iter()).all(|v| v.is_finite())
            && min.x < max.x
            && min.y < max.y;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "empty domain [{}, {}] x [{}, {}]",
                min.x, max.x, min.y, max.y
            )));
        }
        Ok(Domain { min, max })
    }

    /// Workspace bounding box grown by 5% about its center.
    pub fn cartesian_default(model: &FiveBarModel) -> Self {
        let (lo, hi) = model.workspace_bbox();
        let pad = (hi - lo) * 0.025;
        Domain {
            min: lo - pad,
            max: hi + pad,
        }
    }

    /// The `(theta1, theta2)` joint-limit box.
    pub fn joint_default(model: &FiveBarModel) -> Self {
        let [a, b] = &model.limits;
        Domain {
            min: Vec2::new(a.min, b.min),
            max: Vec2::new(a.max, b.max),
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        (self.min.x..=self.max.x).contains(&p.x) && (self.min.y..=self.max.y).contains(&p.y)
    }
}

/// Field samples on a regular lattice of `nx * ny` nodes spanning the domain
/// corner to corner. Storage is row-major: node `(i, j)` is at index
/// `j * nx + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub domain: Domain,
    pub nx: usize,
    pub ny: usize,
    pub field: Field,
    pub space: Space,
    pub mode: WorkingMode,
    /// `None` at unreachable nodes.
    pub values: Vec<Option<f64>>,
    /// `true` where the node is reachable in `mode`.
    pub mask: Vec<bool>,
    /// Side of the `v = 1` ridge, `+1` or `-1`; all `+1` for distance fields.
    pub fold: Vec<i8>,
}

impl FieldGrid {
    /// Grid from raw values, without folding.
    pub fn from_values(
        domain: Domain,
        nx: usize,
        ny: usize,
        field: Field,
        values: Vec<Option<f64>>,
    ) -> Result<Self> {
        check_resolution(nx, ny)?;
        if values.len() != nx * ny {
            return Err(Error::DimensionMismatch {
                expected: nx * ny,
                actual: values.len(),
            });
        }
        let mask = values.iter().map(Option::is_some).collect();
        Ok(FieldGrid {
            domain,
            nx,
            ny,
            field,
            space: Space::Cartesian,
            mode: WorkingMode::ALL[0],
            values,
            mask,
            fold: vec![1; nx * ny],
        })
    }

    pub fn node(&self, i: usize, j: usize) -> Vec2 {
        let span = self.domain.max - self.domain.min;
        Vec2::new(
            self.domain.min.x + span.x * i as f64 / (self.nx - 1) as f64,
            self.domain.min.y + span.y * j as f64 / (self.ny - 1) as f64,
        )
    }

    pub fn spacing(&self) -> Vec2 {
        let span = self.domain.max - self.domain.min;
        Vec2::new(span.x / (self.nx - 1) as f64, span.y / (self.ny - 1) as f64)
    }

    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.values[j * self.nx + i]
    }

    /// Smallest and largest unmasked value.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.values.iter().flatten().fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }

    pub fn reachable_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Scalar that marching squares thresholds, NaN where masked.
    fn contour_scalar(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.fold)
            .map(|(v, &s)| match v {
                None => f64::NAN,
                Some(v) if self.field.is_inverse_condition() => f64::from(s) * (1.0 - v),
                Some(v) => *v,
            })
            .collect()
    }

    /// Thresholds of the contour scalar that make up `level`.
    fn contour_targets(&self, level: f64) -> Vec<f64> {
        if !self.field.is_inverse_condition() {
            return vec![level];
        }
        let t = 1.0 - level;
        if t == 0.0 {
            vec![0.0]
        } else {
            vec![-t, t]
        }
    }
}

fn check_resolution(nx: usize, ny: usize) -> Result<()> {
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid resolution must be at least 2x2, got {nx}x{ny}"
        )));
    }
    Ok(())
}

/// Posture at a lattice node: IK at a Cartesian node, or the
/// forward-kinematics solution in `mode` at a joint node, preferring the
/// `det A > 0` assembly when both solutions share the mode.
fn posture_at(model: &FiveBarModel, space: Space, q: Vec2, mode: WorkingMode) -> Option<PostureState> {
    match space {
        Space::Cartesian => inverse_kinematics(model, q, mode),
        Space::Joint => [Sign::Plus, Sign::Minus]
            .into_iter()
            .find_map(|a| forward_kinematics_in_mode(model, q.x, q.y, mode, a)),
    }
}

/// Field value and fold side at a posture.
pub fn field_at(model: &FiveBarModel, posture: &PostureState, field: Field) -> (f64, i8) {
    match field {
        Field::BoundaryDistance => (boundary_proximity(model, posture.p).distance, 1),
        Field::InvKappaA => {
            let ix = fivebar_indices(posture, model);
            (ix.inv_kappa_a, if ix.cos_a < 0.0 { -1 } else { 1 })
        }
        Field::InvKappaB => {
            let ix = fivebar_indices(posture, model);
            (ix.inv_kappa_b, if ix.beta1 < ix.beta2 { -1 } else { 1 })
        }
    }
}

/// Samples `field` on an `nx * ny` lattice in working mode `mode`. Rows are
/// evaluated in parallel; the result does not depend on the worker count.
pub fn evaluate_grid(
    model: &FiveBarModel,
    domain: Domain,
    space: Space,
    nx: usize,
    ny: usize,
    field: Field,
    mode: WorkingMode,
) -> Result<FieldGrid> {
    check_resolution(nx, ny)?;
    let domain = Domain::new(domain.min, domain.max)?;
    let mut grid = FieldGrid {
        domain,
        nx,
        ny,
        field,
        space,
        mode,
        values: Vec::new(),
        mask: Vec::new(),
        fold: Vec::new(),
    };
    let rows: Vec<Vec<(Option<f64>, i8)>> = (0..ny)
        .into_par_iter()
        .map(|j| {
            (0..nx)
                .map(|i| match posture_at(model, space, grid.node(i, j), mode) {
                    Some(s) => {
                        let (v, fold) = field_at(model, &s, field);
                        (Some(v), fold)
                    }
                    None => (None, 1),
                })
                .collect()
        })
        .collect();
    for (v, fold) in rows.into_iter().flatten() {
        grid.values.push(v);
        grid.mask.push(v.is_some());
        grid.fold.push(fold);
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Vec2>,
    /// First and last point coincide.
    pub closed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCurves {
    pub level: f64,
    pub polylines: Vec<Polyline>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IsoCurveSet {
    pub levels: Vec<f64>,
    pub curves: Vec<LevelCurves>,
}

impl IsoCurveSet {
    pub fn at_level(&self, level: f64) -> Option<&LevelCurves> {
        self.curves.iter().find(|c| c.level == level)
    }

    pub fn polyline_count(&self) -> usize {
        self.curves.iter().map(|c| c.polylines.len()).sum()
    }
}

pub fn validate_levels(levels: &[f64]) -> Result<()> {
    match levels.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
        Some(l) => Err(Error::InvalidArgument(format!(
            "contour level {l} outside (0, 1]"
        ))),
        None => Ok(()),
    }
}

/// Marching-squares contours at each level. Cells with a masked corner are
/// skipped, saddles are resolved by the mean of the four corners, and cell
/// segments are chained through shared edge crossings.
pub fn extract_isocurves(grid: &FieldGrid, levels: &[f64]) -> Result<IsoCurveSet> {
    extract_with(grid, levels, None)
}

/// As [`extract_isocurves`], then each edge crossing is moved onto the
/// model's true level set along its cell edge (Illinois root finding). The
/// linear estimate is kept where the edge leaves the reachable region.
pub fn extract_isocurves_refined(
    model: &FiveBarModel,
    grid: &FieldGrid,
    levels: &[f64],
) -> Result<IsoCurveSet> {
    let inverse = grid.field.is_inverse_condition();
    let scalar = |q: Vec2| {
        posture_at(model, grid.space, q, grid.mode).map(|s| {
            let (v, fold) = field_at(model, &s, grid.field);
            if inverse {
                f64::from(fold) * (1.0 - v)
            } else {
                v
            }
        })
    };
    extract_with(grid, levels, Some(&scalar))
}

type Scalar<'a> = &'a dyn Fn(Vec2) -> Option<f64>;

fn extract_with(grid: &FieldGrid, levels: &[f64], exact: Option<Scalar>) -> Result<IsoCurveSet> {
    validate_levels(levels)?;
    if grid.reachable_count() == 0 {
        return Err(Error::InvalidArgument("grid has no reachable node".into()));
    }
    let scalar = grid.contour_scalar();
    let curves = levels
        .iter()
        .map(|&level| LevelCurves {
            level,
            polylines: grid
                .contour_targets(level)
                .into_iter()
                .flat_map(|t| march(grid, &scalar, t, exact))
                .collect(),
        })
        .collect();
    Ok(IsoCurveSet {
        levels: levels.to_vec(),
        curves,
    })
}

/// Edge identifier: `2 * node + 0` for the edge to the right of `node`,
/// `2 * node + 1` for the edge above it.
type EdgeKey = usize;

fn march(grid: &FieldGrid, s: &[f64], t: f64, exact: Option<Scalar>) -> Vec<Polyline> {
    let nx = grid.nx;
    let idx = |i: usize, j: usize| j * nx + i;
    let mut points: BTreeMap<EdgeKey, Vec2> = BTreeMap::new();
    let mut segments: Vec<[EdgeKey; 2]> = Vec::new();

    let mut crossing = |key: EdgeKey, a: (usize, usize), b: (usize, usize)| {
        points.entry(key).or_insert_with(|| {
            let (va, vb) = (s[idx(a.0, a.1)], s[idx(b.0, b.1)]);
            let (pa, pb) = (grid.node(a.0, a.1), grid.node(b.0, b.1));
            let linear = pa + (pb - pa) * ((t - va) / (vb - va));
            match exact {
                Some(g) => refine_crossing(g, pa, pb, va - t, vb - t, t).unwrap_or(linear),
                None => linear,
            }
        });
        key
    };

    for j in 0..grid.ny - 1 {
        for i in 0..nx - 1 {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let v = corners.map(|(ci, cj)| s[idx(ci, cj)]);
            if v.iter().any(|x| x.is_nan()) {
                continue;
            }
            let above = v.map(|x| x >= t);
            // Edges in corner order: bottom, right, top, left.
            let edges: [(EdgeKey, usize, usize); 4] = [
                (2 * idx(i, j), 0, 1),
                (2 * idx(i + 1, j) + 1, 1, 2),
                (2 * idx(i, j + 1), 3, 2),
                (2 * idx(i, j) + 1, 0, 3),
            ];
            let cut: Vec<usize> = (0..4)
                .filter(|&e| above[edges[e].1] != above[edges[e].2])
                .collect();
            let mut key = |e: usize| {
                let (k, a, b) = edges[e];
                crossing(k, corners[a], corners[b])
            };
            match cut.len() {
                2 => segments.push([key(cut[0]), key(cut[1])]),
                4 => {
                    let center = v.iter().sum::<f64>() / 4.0 >= t;
                    if center == above[0] {
                        // Corners 0 and 2 connect through the center.
                        segments.push([key(0), key(1)]);
                        segments.push([key(2), key(3)]);
                    } else {
                        segments.push([key(3), key(0)]);
                        segments.push([key(1), key(2)]);
                    }
                }
                _ => {}
            }
        }
    }
    link_segments(&points, &segments)
}

/// Root of `g - t` on the segment `pa..pb` given the signed end residuals.
fn refine_crossing(g: Scalar, pa: Vec2, pb: Vec2, mut fa: f64, mut fb: f64, t: f64) -> Option<Vec2> {
    let (mut a, mut b) = (0.0f64, 1.0f64);
    let mut side = 0i8;
    for _ in 0..60 {
        let m = (a * fb - b * fa) / (fb - fa);
        let fm = g(pa + (pb - pa) * m)? - t;
        if fm == 0.0 || b - a < 1e-13 {
            return Some(pa + (pb - pa) * m);
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
            if side == -1 {
                fb /= 2.0;
            }
            side = -1;
        } else {
            b = m;
            fb = fm;
            if side == 1 {
                fa /= 2.0;
            }
            side = 1;
        }
    }
    Some(pa + (pb - pa) * ((a * fb - b * fa) / (fb - fa)))
}

fn link_segments(points: &BTreeMap<EdgeKey, Vec2>, segments: &[[EdgeKey; 2]]) -> Vec<Polyline> {
    let mut incident: BTreeMap<EdgeKey, Vec<usize>> = BTreeMap::new();
    for (n, seg) in segments.iter().enumerate() {
        for &k in seg {
            incident.entry(k).or_default().push(n);
        }
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::new();

    let walk = |start_key: EdgeKey, start_seg: usize, used: &mut Vec<bool>| {
        let mut keys = vec![start_key];
        let (mut key, mut seg) = (start_key, Some(start_seg));
        while let Some(n) = seg {
            used[n] = true;
            let [a, b] = segments[n];
            key = if a == key { b } else { a };
            keys.push(key);
            seg = incident[&key].iter().copied().find(|&m| !used[m]);
        }
        keys
    };

    // Open chains start at edge crossings with a single incident segment.
    let ends: Vec<EdgeKey> = incident
        .iter()
        .filter(|(_, segs)| segs.len() == 1)
        .map(|(&k, _)| k)
        .collect();
    for k in ends {
        let n = incident[&k][0];
        if !used[n] {
            let keys = walk(k, n, &mut used);
            out.push((keys, false));
        }
    }
    for n in 0..segments.len() {
        if !used[n] {
            let keys = walk(segments[n][0], n, &mut used);
            out.push((keys, true));
        }
    }

    out.into_iter()
        .filter_map(|(keys, closed)| {
            let mut pts: Vec<Vec2> = Vec::with_capacity(keys.len());
            for k in keys {
                let p = points[&k];
                if pts.last() != Some(&p) {
                    pts.push(p);
                }
            }
            (pts.len() >= 2).then_some(Polyline {
                points: pts,
                closed,
            })
        })
        .collect()
}

/// One arc of a reach-annulus circle inside the other leg's annulus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryArc {
    pub center: Vec2,
    pub radius: f64,
    /// Polar angles about `center`, `start < end`.
    pub start: f64,
    pub end: f64,
    /// `true` on an outer (stretched-leg) circle.
    pub outer: bool,
    pub points: Vec<Vec2>,
}

impl BoundaryArc {
    /// Unit normal pointing into the workspace at `p`.
    pub fn inward(&self, p: Vec2) -> Vec2 {
        let radial = (p - self.center).normalize();
        if self.outer {
            -radial
        } else {
            radial
        }
    }
}

/// The workspace boundary: circles of radius `L1 + L2` and `|L1 - L2|` about
/// each base, each clipped to the other base's annulus, sampled with
/// `resolution` points per arc. The region is the same in every working
/// mode, so `_mode` only documents the caller's intent.
pub fn workspace_boundary(
    model: &FiveBarModel,
    _mode: WorkingMode,
    resolution: usize,
) -> Vec<BoundaryArc> {
    let (inner, outer) = model.reach();
    let resolution = resolution.max(2);
    let bases = [model.base_a, model.base_b];
    let mut arcs = Vec::new();
    for (k, &center) in bases.iter().enumerate() {
        let other = bases[1 - k];
        for (radius, is_outer) in [(outer, true), (inner, false)] {
            if radius <= 0.0 {
                continue;
            }
            for (start, end) in clip_circle(center, radius, other, inner, outer) {
                let points = (0..resolution)
                    .map(|n| {
                        let a = start + (end - start) * n as f64 / (resolution - 1) as f64;
                        center + Vec2::new(a.cos(), a.sin()) * radius
                    })
                    .collect();
                arcs.push(BoundaryArc {
                    center,
                    radius,
                    start,
                    end,
                    outer: is_outer,
                    points,
                });
            }
        }
    }
    arcs
}

/// Angular intervals of the circle `(center, radius)` whose points lie at
/// distance `[r_in, r_out]` from `other`.
fn clip_circle(center: Vec2, radius: f64, other: Vec2, r_in: f64, r_out: f64) -> Vec<(f64, f64)> {
    let rel = center - other;
    let dist = rel.norm();
    let psi = rel.y.atan2(rel.x);
    let full = std::f64::consts::PI;
    if dist == 0.0 {
        return if (r_in..=r_out).contains(&radius) {
            vec![(-full, full)]
        } else {
            Vec::new()
        };
    }
    // |center + radius u(phi) - other|^2 = R^2 + D^2 + 2 R D cos(phi - psi)
    let denom = 2.0 * radius * dist;
    let c_lo = (r_in * r_in - radius * radius - dist * dist) / denom;
    let c_hi = (r_out * r_out - radius * radius - dist * dist) / denom;
    if c_lo > 1.0 || c_hi < -1.0 || c_lo > c_hi {
        return Vec::new();
    }
    // Allowed offsets |phi - psi| in [near, far].
    let near = c_hi.clamp(-1.0, 1.0).acos();
    let far = c_lo.clamp(-1.0, 1.0).acos();
    match (near == 0.0, far == full) {
        (true, true) => vec![(-full, full)],
        (true, false) => vec![(psi - far, psi + far)],
        (false, true) => vec![(psi + near, psi + 2.0 * full - near)],
        (false, false) => vec![(psi - far, psi - near), (psi + near, psi + far)],
    }
}

/// Everything exported for one working mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasDocument {
    pub schema: i64,
    pub model_name: Option<String>,
    pub model_hash: String,
    pub mode: WorkingMode,
    pub field: Field,
    pub space: Space,
    pub levels: Vec<f64>,
    pub grid: FieldGrid,
    pub curves: IsoCurveSet,
    pub boundary: Vec<BoundaryArc>,
}

/// Grid, contours and boundary of one mode over the default domain of `space`.
pub fn build_atlas(
    model: &FiveBarModel,
    mode: WorkingMode,
    field: Field,
    space: Space,
    nx: usize,
    ny: usize,
    levels: &[f64],
) -> Result<AtlasDocument> {
    validate_levels(levels)?;
    let domain = match space {
        Space::Cartesian => Domain::cartesian_default(model),
        Space::Joint => Domain::joint_default(model),
    };
    let grid = evaluate_grid(model, domain, space, nx, ny, field, mode)?;
    let curves = if grid.reachable_count() == 0 {
        IsoCurveSet {
            levels: levels.to_vec(),
            curves: levels
                .iter()
                .map(|&level| LevelCurves {
                    level,
                    polylines: Vec::new(),
                })
                .collect(),
        }
    } else if space == Space::Cartesian {
        extract_isocurves_refined(model, &grid, levels)?
    } else {
        // Joint-space fields jump where the preferred assembly leaves the
        // mode, so there is no smooth level set to refine onto.
        extract_isocurves(&grid, levels)?
    };
    let boundary = match space {
        Space::Cartesian => workspace_boundary(model, mode, 64),
        Space::Joint => Vec::new(),
    };
    Ok(AtlasDocument {
        schema: SCHEMA_VERSION,
        model_name: model.name.clone(),
        model_hash: model.model_hash(),
        mode,
        field,
        space,
        levels: levels.to_vec(),
        grid,
        curves,
        boundary,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtlasFormat {
    Csv,
    Json,
    Svg,
}

impl AtlasFormat {
    pub fn extension(self) -> &'static str {
        match self {
            AtlasFormat::Csv => "csv",
            AtlasFormat::Json => "json",
            AtlasFormat::Svg => "svg",
        }
    }
}

impl std::str::FromStr for AtlasFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(AtlasFormat::Csv),
            "json" => Ok(AtlasFormat::Json),
            "svg" => Ok(AtlasFormat::Svg),
            _ => Err(Error::InvalidArgument(format!(
                "unknown atlas format `{s}` (expected csv, json or svg)"
            ))),
        }
    }
}

pub fn render_atlas(doc: &AtlasDocument, format: AtlasFormat) -> String {
    match format {
        AtlasFormat::Csv => render_csv(&doc.grid),
        AtlasFormat::Json => {
            let mut s = serde_json::to_string_pretty(doc).expect("atlas documents are finite");
            s.push('\n');
            s
        }
        AtlasFormat::Svg => render_svg(doc),
    }
}

pub fn export_atlas(doc: &AtlasDocument, format: AtlasFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render_atlas(doc, format)).map_err(|e| Error::io(path, e))
}

pub fn read_atlas(path: &Path) -> Result<AtlasDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: AtlasDocument = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if doc.schema != SCHEMA_VERSION {
        return Err(Error::Schema(doc.schema));
    }
    Ok(doc)
}

/// `x,y,value,mask`, one row per node; unreachable nodes have value `NaN`
/// and mask 0.
pub fn render_csv(grid: &FieldGrid) -> String {
    let mut out = String::from("x,y,value,mask\n");
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let p = grid.node(i, j);
            let k = j * grid.nx + i;
            match grid.values[k] {
                Some(v) => writeln!(out, "{},{},{},1", p.x, p.y, v),
                None => writeln!(out, "{},{},NaN,0", p.x, p.y),
            }
            .expect("writing to a String");
        }
    }
    out
}

/// Fixed color map: 0 is red, 1 is blue, linear in RGB.
pub fn colormap(value: f64) -> [u8; 3] {
    let v = value.clamp(0.0, 1.0);
    let r = ((1.0 - v) * 255.0).round() as u8;
    let b = (v * 255.0).round() as u8;
    [r, 0, b]
}

fn render_svg(doc: &AtlasDocument) -> String {
    let grid = &doc.grid;
    let d = &grid.domain;
    let h = grid.spacing();
    // Each node is drawn as a cell centered on it.
    let (x0, y0) = (d.min.x - h.x / 2.0, d.min.y - h.y / 2.0);
    let (w, ht) = (d.max.x - d.min.x + h.x, d.max.y - d.min.y + h.y);
    let scale = match grid.field {
        Field::BoundaryDistance => grid.range().map_or(1.0, |(_, hi)| hi.max(f64::MIN_POSITIVE)),
        _ => 1.0,
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.6} {:.6} {:.6} {:.6}" width="800" height="{:.0}" data-model-hash="{}" data-mode="{}" data-field="{}">"#,
        x0,
        -(y0 + ht),
        w,
        ht,
        800.0 * ht / w,
        doc.model_hash,
        doc.mode,
        grid.field.name()
    );
    s.push_str("<g transform=\"scale(1,-1)\">\n<g id=\"heatmap\" shape-rendering=\"crispEdges\">\n");
    for j in 0..grid.ny {
        let y = y0 + h.y * j as f64;
        let mut i = 0;
        while i < grid.nx {
            let Some(v) = grid.value(i, j) else {
                i += 1;
                continue;
            };
            let color = colormap(v / scale);
            let mut run = 1;
            while i + run < grid.nx
                && grid.value(i + run, j).map(|u| colormap(u / scale)) == Some(color)
            {
                run += 1;
            }
            let _ = writeln!(
                s,
                r##"<rect x="{:.6}" y="{:.6}" width="{:.6}" height="{:.6}" fill="#{:02x}{:02x}{:02x}"/>"##,
                x0 + h.x * i as f64,
                y,
                h.x * run as f64,
                h.y,
                color[0],
                color[1],
                color[2]
            );
            i += run;
        }
    }
    s.push_str("</g>\n<g id=\"contours\" fill=\"none\" stroke=\"#000000\">\n");
    let stroke = 0.002 * w.max(ht);
    for lc in &doc.curves.curves {
        let _ = writeln!(s, r#"<g data-level="{}" stroke-width="{:.6}">"#, lc.level, stroke);
        for pl in &lc.polylines {
            s.push_str("<polyline points=\"");
            push_points(&mut s, &pl.points);
            s.push_str("\"/>\n");
        }
        s.push_str("</g>\n");
    }
    s.push_str("</g>\n<g id=\"boundary\" fill=\"none\" stroke=\"#00a000\">\n");
    for arc in &doc.boundary {
        let _ = write!(s, r#"<polyline stroke-width="{:.6}" points=""#, 2.0 * stroke);
        push_points(&mut s, &arc.points);
        s.push_str("\"/>\n");
    }
    s.push_str("</g>\n</g>\n</svg>\n");
    s
}

fn push_points(s: &mut String, pts: &[Vec2]) {
    for (n, p) in pts.iter().enumerate() {
        if n > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.6},{:.6}", p.x, p.y);
    }
}

/// Coarse placement of the major contour components at each level: counts
/// of polylines with arc length at least `min_length`, binned by the side of
/// their centroid relative to `axis` (`[x < , x =, x >] x [y <, y =, y >]`,
/// equality within `tol`). Short fragments where contours meet the masked
/// band along the workspace edge depend on resolution and are not counted.
pub fn contour_topology(
    curves: &IsoCurveSet,
    axis: Vec2,
    tol: f64,
    min_length: f64,
) -> Vec<(f64, [[usize; 3]; 3])> {
    let bin = |d: f64| {
        if d.abs() <= tol {
            1
        } else if d < 0.0 {
            0
        } else {
            2
        }
    };
    curves
        .curves
        .iter()
        .map(|lc| {
            let mut counts = [[0usize; 3]; 3];
            for pl in &lc.polylines {
                let length: f64 = pl.points.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
                if length < min_length {
                    continue;
                }
                let pts = if pl.closed {
                    &pl.points[..pl.points.len() - 1]
                } else {
                    &pl.points[..]
                };
                let c = pts.iter().sum::<Vec2>() / pts.len() as f64 - axis;
                counts[bin(c.x)][bin(c.y)] += 1;
            }
            (lc.level, counts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fivebar::workspace_contains;
    use crate::fivebar::Containment;
    use crate::model::JointLimits;
    use approx::assert_relative_eq;

    fn model() -> FiveBarModel {
        FiveBarModel::new(
            6.0,
            8.0,
            5.0,
            [JointLimits::full_turn(), JointLimits::full_turn()],
        )
        .unwrap()
    }

    fn mode(s: &str) -> WorkingMode {
        s.parse().unwrap()
    }

    fn square(lo: f64, hi: f64) -> Domain {
        Domain::new(Vec2::new(lo, lo), Vec2::new(hi, hi)).unwrap()
    }

    #[test]
    fn domain_outside_workspace_is_fully_masked() {
        let g = evaluate_grid(
            &model(),
            square(50.0, 60.0),
            Space::Cartesian,
            5,
            4,
            Field::InvKappaB,
            mode("+-"),
        )
        .unwrap();
        assert_eq!(g.reachable_count(), 0);
        assert!(g.values.iter().all(Option::is_none));
        assert!(extract_isocurves(&g, &[0.5]).is_err());
    }

    #[test]
    fn isotropic_b_node() {
        let d = Domain::new(Vec2::new(0.0, 10.0), Vec2::new(6.0, 14.0)).unwrap();
        let g = evaluate_grid(&model(), d, Space::Cartesian, 3, 3, Field::InvKappaB, mode("-+"))
            .unwrap();
        assert_eq!(g.node(1, 1), Vec2::new(3.0, 12.0));
        assert_relative_eq!(g.value(1, 1).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_tiny_resolution_and_bad_levels() {
        let m = model();
        let d = Domain::cartesian_default(&m);
        assert!(evaluate_grid(&m, d, Space::Cartesian, 1, 5, Field::InvKappaA, mode("++")).is_err());
        let g = evaluate_grid(&m, d, Space::Cartesian, 2, 2, Field::InvKappaA, mode("++")).unwrap();
        assert_eq!(g.values.len(), 4);
        assert!(validate_levels(&[0.0]).is_err());
        assert!(validate_levels(&[1.5]).is_err());
        assert!(validate_levels(&DEFAULT_LEVELS).is_ok());
        assert!(Domain::new(Vec2::new(1.0, 0.0), Vec2::new(1.0, 2.0)).is_err());
    }

    #[test]
    fn constant_grid_has_no_contours() {
        let g = FieldGrid::from_values(square(0.0, 1.0), 3, 3, Field::BoundaryDistance, vec![Some(0.4); 9])
            .unwrap();
        let c = extract_isocurves(&g, &[0.1, 0.5, 1.0]).unwrap();
        assert_eq!(c.polyline_count(), 0);
    }

    #[test]
    fn two_by_two_midline() {
        let g = FieldGrid::from_values(
            square(0.0, 1.0),
            2,
            2,
            Field::BoundaryDistance,
            vec![Some(0.0), Some(1.0), Some(0.0), Some(1.0)],
        )
        .unwrap();
        let c = extract_isocurves(&g, &[0.5]).unwrap();
        let pl = &c.curves[0].polylines;
        assert_eq!(pl.len(), 1);
        assert!(!pl[0].closed);
        let mut ys: Vec<f64> = pl[0].points.iter().map(|p| p.y).collect();
        ys.sort_by(f64::total_cmp);
        assert_eq!(ys, vec![0.0, 1.0]);
        assert!(pl[0].points.iter().all(|p| p.x == 0.5));
    }

    #[test]
    fn inverse_condition_grid_uses_the_same_levels() {
        // The fold maps v -> 1 - v for a +1 side, so the contour is unchanged.
        let g = FieldGrid::from_values(
            square(0.0, 1.0),
            2,
            2,
            Field::InvKappaB,
            vec![Some(0.0), Some(1.0), Some(0.0), Some(1.0)],
        )
        .unwrap();
        let c = extract_isocurves(&g, &[0.25]).unwrap();
        assert_eq!(c.curves[0].polylines.len(), 1);
        assert!(c.curves[0].polylines[0].points.iter().all(|p| p.x == 0.25));
    }

    #[test]
    fn masked_corner_skips_cell() {
        let g = FieldGrid::from_values(
            square(0.0, 1.0),
            2,
            2,
            Field::BoundaryDistance,
            vec![Some(0.0), Some(1.0), None, Some(1.0)],
        )
        .unwrap();
        assert_eq!(extract_isocurves(&g, &[0.5]).unwrap().polyline_count(), 0);
    }

    #[test]
    fn closed_ring_around_a_peak() {
        let n = 21;
        let values = (0..n * n)
            .map(|k| {
                let (i, j) = ((k % n) as f64 - 10.0, (k / n) as f64 - 10.0);
                Some((-(i * i + j * j) / 30.0).exp())
            })
            .collect();
        let g = FieldGrid::from_values(square(-1.0, 1.0), n, n, Field::BoundaryDistance, values)
            .unwrap();
        let c = extract_isocurves(&g, &[0.5]).unwrap();
        let pl = &c.curves[0].polylines;
        assert_eq!(pl.len(), 1);
        assert!(pl[0].closed);
        assert_eq!(pl[0].points.first(), pl[0].points.last());
    }

    #[test]
    fn saddle_follows_center_sample() {
        // Diagonal corners high; mean 0.55 >= 0.5 joins them.
        let g = FieldGrid::from_values(
            square(0.0, 1.0),
            2,
            2,
            Field::BoundaryDistance,
            vec![Some(1.0), Some(0.1), Some(0.1), Some(1.0)],
        )
        .unwrap();
        let c = extract_isocurves(&g, &[0.5]).unwrap();
        let pl = &c.curves[0].polylines;
        assert_eq!(pl.len(), 2);
        // Each segment cuts off one low corner, (1,0) or (0,1).
        let corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)].map(|(x, y)| Vec2::new(x, y));
        let mut nearest: Vec<usize> = pl
            .iter()
            .map(|p| {
                let m = (p.points[0] + p.points[1]) / 2.0;
                (0..4)
                    .min_by(|&a, &b| (corners[a] - m).norm().total_cmp(&(corners[b] - m).norm()))
                    .unwrap()
            })
            .collect();
        nearest.sort();
        assert_eq!(nearest, vec![1, 3]);
    }

    #[test]
    fn boundary_arcs_have_annulus_radii() {
        let m = model();
        let arcs = workspace_boundary(&m, mode("++"), 32);
        assert!(arcs.iter().any(|a| a.outer && a.radius == 13.0));
        assert!(arcs.iter().any(|a| !a.outer && a.radius == 3.0));
        for arc in &arcs {
            for p in &arc.points {
                assert_ne!(workspace_contains(&m, *p), Containment::Outside, "{p:?}");
                assert_relative_eq!((p - arc.center).norm(), arc.radius, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn boundary_of_disjoint_bases() {
        // Bases further apart than twice the reach: no workspace, no arcs.
        let m = FiveBarModel::new(30.0, 8.0, 5.0, [JointLimits::full_turn(); 2]).unwrap();
        assert!(workspace_boundary(&m, mode("++"), 8).is_empty());
    }

    #[test]
    fn joint_space_grid() {
        let m = model();
        let g = evaluate_grid(
            &m,
            Domain::joint_default(&m),
            Space::Joint,
            41,
            41,
            Field::InvKappaA,
            mode("-+"),
        )
        .unwrap();
        assert!(g.reachable_count() > 0);
        assert!(g.range().unwrap().1 <= 1.0);
    }

    #[test]
    fn colormap_ends() {
        assert_eq!(colormap(0.0), [255, 0, 0]);
        assert_eq!(colormap(1.0), [0, 0, 255]);
        assert_eq!(colormap(f64::NAN.max(2.0)), [0, 0, 255]);
    }

    #[test]
    fn csv_layout() {
        let g = FieldGrid::from_values(
            square(0.0, 1.0),
            2,
            2,
            Field::BoundaryDistance,
            vec![Some(0.5), None, Some(0.25), Some(1.0)],
        )
        .unwrap();
        assert_eq!(
            render_csv(&g),
            "x,y,value,mask\n0,0,0.5,1\n1,0,NaN,0\n0,1,0.25,1\n1,1,1,1\n"
        );
    }
}
