//! Mechanism descriptions, joint domains and model files.
//!
//! Model files are TOML documents with a `schema = 1` header and a `kind`
//! discriminator (`five_bar` or `serial_chain`). Lengths and angles may be
//! given in any of the units listed under [`LengthUnit`] and [`AngleUnit`];
//! everything is converted to SI (m, rad) on load. See `docs/model-format.md`
//! for the full schema.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

pub const SCHEMA_VERSION: i64 = 1;

/// Closed interval `[min, max]` for one joint, with the security threshold
/// used by the joint-limit force ramp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub min: f64,
    pub max: f64,
    pub threshold: f64,
}

impl JointLimits {
    pub fn new(min: f64, max: f64, threshold: f64) -> Result<Self> {
        let limits = JointLimits { min, max, threshold };
        limits.validate("limits")?;
        Ok(limits)
    }

    /// Full revolution around zero, no force ramp.
    pub fn full_turn() -> Self {
        JointLimits {
            min: -PI,
            max: PI,
            threshold: 0.0,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.threshold.is_finite()) {
            return Err(Error::invalid(field, "limits must be finite"));
        }
        if self.min >= self.max {
            return Err(Error::invalid(
                field,
                format!("min ({}) must be below max ({})", self.min, self.max),
            ));
        }
        if self.threshold < 0.0 || self.threshold >= self.span() / 2.0 {
            return Err(Error::invalid(
                field,
                format!(
                    "threshold {} outside [0, {})",
                    self.threshold,
                    self.span() / 2.0
                ),
            ));
        }
        Ok(())
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    /// Closed-interval membership.
    pub fn contains(&self, q: f64) -> bool {
        self.min <= q && q <= self.max
    }

    /// Interval on which the joint-limit force vanishes.
    pub fn safe_interval(&self) -> (f64, f64) {
        (self.min + self.threshold, self.max - self.threshold)
    }

    /// Representative of the angle `q` in `[center - pi, center + pi)`.
    pub fn wrap_angle(&self, q: f64) -> f64 {
        let c = self.center();
        c + (q - c + PI).rem_euclid(2.0 * PI) - PI
    }
}

/// Joint-space point `q = [q_1 .. q_n]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointVector(pub Vec<f64>);

impl JointVector {
    pub fn new(q: impl Into<Vec<f64>>) -> Self {
        JointVector(q.into())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for JointVector {
    fn from(q: Vec<f64>) -> Self {
        JointVector(q)
    }
}

/// True iff every `q_i` lies in its closed joint interval.
pub fn joint_domain_contains(limits: &[JointLimits], q: &JointVector) -> Result<bool> {
    if limits.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: limits.len(),
            actual: q.len(),
        });
    }
    Ok(limits.iter().zip(q.as_slice()).all(|(l, &qi)| l.contains(qi)))
}

/// Symmetric five-bar linkage.
///
/// The actuated joint of the first leg sits at `base_a = (0, 0)` and that of
/// the second leg at `base_b = (L0, 0)`. Proximal links have length `L1 = L3`,
/// distal links `L2 = L4`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiveBarModel {
    pub name: Option<String>,
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub base_a: Vec2,
    pub base_b: Vec2,
    pub limits: [JointLimits; 2],
}

impl FiveBarModel {
    /// Symmetric model from the three independent lengths.
    pub fn new(l0: f64, l1: f64, l2: f64, limits: [JointLimits; 2]) -> Result<Self> {
        Self::from_lengths(l0, l1, l2, l1, l2, limits)
    }

    pub fn from_lengths(
        l0: f64,
        l1: f64,
        l2: f64,
        l3: f64,
        l4: f64,
        limits: [JointLimits; 2],
    ) -> Result<Self> {
        let model = FiveBarModel {
            name: None,
            l0,
            l1,
            l2,
            l3,
            l4,
            base_a: Vec2::zeros(),
            base_b: Vec2::new(l0, 0.0),
            limits,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("l0", self.l0),
            ("l1", self.l1),
            ("l2", self.l2),
            ("l3", self.l3),
            ("l4", self.l4),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(
                    format!("geometry.{field}"),
                    format!("length must be positive, got {v}"),
                ));
            }
        }
        if self.l3 != self.l1 {
            return Err(Error::invalid(
                "geometry.l3",
                format!("asymmetric linkage: l3 = {} but l1 = {}", self.l3, self.l1),
            ));
        }
        if self.l4 != self.l2 {
            return Err(Error::invalid(
                "geometry.l4",
                format!("asymmetric linkage: l4 = {} but l2 = {}", self.l4, self.l2),
            ));
        }
        let base_dist = (self.base_b - self.base_a).norm();
        if (base_dist - self.l0).abs() > 1e-12 * self.l0 {
            return Err(Error::invalid(
                "base_b",
                format!("base separation {base_dist} differs from l0 = {}", self.l0),
            ));
        }
        self.limits[0].validate("limits.theta1")?;
        self.limits[1].validate("limits.theta2")?;
        Ok(())
    }

    /// Reach annulus radii `(|L1 - L2|, L1 + L2)` shared by both legs.
    pub fn reach(&self) -> (f64, f64) {
        ((self.l1 - self.l2).abs(), self.l1 + self.l2)
    }

    /// Absolute tolerance used for on-boundary decisions.
    pub fn boundary_tol(&self) -> f64 {
        1e-9 * self.l1
    }

    /// Bounding box `(min, max)` of the Cartesian workspace.
    pub fn workspace_bbox(&self) -> (Vec2, Vec2) {
        let (_, outer) = self.reach();
        let half = 0.5 * self.l0;
        let ymax = (outer * outer - half * half).max(0.0).sqrt();
        (
            Vec2::new(self.base_b.x - outer, -ymax),
            Vec2::new(self.base_a.x + outer, ymax),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// Which rows of the twist Jacobian are meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianShape {
    /// 6 x n: angular velocity over linear velocity.
    Spatial,
    /// 3 x n: `omega_z` over `(v_x, v_y)`.
    Planar,
    /// 2 x n: `(v_x, v_y)` only.
    PlanarPositional,
}

impl JacobianShape {
    pub fn rotational_rows(self) -> usize {
        match self {
            JacobianShape::Spatial => 3,
            JacobianShape::Planar => 1,
            JacobianShape::PlanarPositional => 0,
        }
    }

    pub fn translational_rows(self) -> usize {
        match self {
            JacobianShape::Spatial => 3,
            JacobianShape::Planar | JacobianShape::PlanarPositional => 2,
        }
    }

    pub fn rows(self) -> usize {
        self.rotational_rows() + self.translational_rows()
    }

    pub fn is_planar(self) -> bool {
        !matches!(self, JacobianShape::Spatial)
    }
}

/// One joint of a serial chain, expressed at the zero configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SerialJoint {
    pub kind: JointKind,
    pub axis: Vec3,
    pub anchor: Vec3,
    pub limits: JointLimits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SerialChainModel {
    pub name: Option<String>,
    pub shape: JacobianShape,
    pub joints: Vec<SerialJoint>,
    pub tool: Vec3,
}

impl SerialChainModel {
    pub fn new(shape: JacobianShape, joints: Vec<SerialJoint>, tool: Vec3) -> Result<Self> {
        let model = SerialChainModel {
            name: None,
            shape,
            joints,
            tool,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn limits(&self) -> Vec<JointLimits> {
        self.joints.iter().map(|j| j.limits).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::invalid("joints", "chain needs at least one joint"));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let field = format!("joints[{i}]");
            if (j.axis.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(
                    format!("{field}.axis"),
                    format!("axis must be a unit vector, norm is {}", j.axis.norm()),
                ));
            }
            if self.shape.is_planar() {
                let planar_ok = match j.kind {
                    JointKind::Revolute => j.axis.x.abs() < 1e-12 && j.axis.y.abs() < 1e-12,
                    JointKind::Prismatic => j.axis.z.abs() < 1e-12,
                };
                if !planar_ok {
                    return Err(Error::invalid(
                        format!("{field}.axis"),
                        "planar chains need revolute axes along z and prismatic axes in the xy-plane",
                    ));
                }
            }
            j.limits.validate(&format!("{field}.limits"))?;
        }
        if !self.tool.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("tool", "tool point must be finite"));
        }
        Ok(())
    }

    /// Copy with every length scaled by `s` (anchors, tool, prismatic limits).
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.tool *= s;
        for j in &mut out.joints {
            j.anchor *= s;
            if j.kind == JointKind::Prismatic {
                j.limits.min *= s;
                j.limits.max *= s;
                j.limits.threshold *= s;
            }
        }
        out
    }
}

/// Any mechanism a model file can describe.
#[derive(Clone, Debug, PartialEq)]
pub enum Mechanism {
    FiveBar(FiveBarModel),
    SerialChain(SerialChainModel),
}

impl Mechanism {
    pub fn into_five_bar(self) -> Result<FiveBarModel> {
        match self {
            Mechanism::FiveBar(m) => Ok(m),
            Mechanism::SerialChain(_) => Err(Error::invalid("kind", "expected a five_bar model")),
        }
    }

    pub fn into_serial_chain(self) -> Result<SerialChainModel> {
        match self {
            Mechanism::SerialChain(m) => Ok(m),
            Mechanism::FiveBar(_) => Err(Error::invalid("kind", "expected a serial_chain model")),
        }
    }

    /// Canonical SI document for this mechanism.
    pub fn to_toml(&self) -> String {
        let doc = match self {
            Mechanism::FiveBar(m) => ModelDoc::FiveBar(FiveBarDoc {
                schema: SCHEMA_VERSION,
                name: m.name.clone(),
                units: Some(UnitsDoc::default()),
                geometry: GeometryDoc {
                    l0: m.l0,
                    l1: m.l1,
                    l2: m.l2,
                    l3: Some(m.l3),
                    l4: Some(m.l4),
                },
                limits: Some(FiveBarLimitsDoc {
                    theta1: Some(m.limits[0]),
                    theta2: Some(m.limits[1]),
                }),
            }),
            Mechanism::SerialChain(m) => ModelDoc::SerialChain(SerialChainDoc {
                schema: SCHEMA_VERSION,
                name: m.name.clone(),
                units: Some(UnitsDoc::default()),
                shape: m.shape,
                tool: m.tool.into(),
                joints: m
                    .joints
                    .iter()
                    .map(|j| JointDoc {
                        kind: j.kind,
                        axis: j.axis.into(),
                        anchor: j.anchor.into(),
                        limits: Some(j.limits),
                    })
                    .collect(),
            }),
        };
        toml::to_string(&doc).expect("model documents always serialize")
    }

    /// SHA-256 of the canonical document, lowercase hex.
    pub fn model_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl FiveBarModel {
    pub fn model_hash(&self) -> String {
        Mechanism::FiveBar(self.clone()).model_hash()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthUnit {
    #[default]
    M,
    Cm,
    Mm,
    In,
    /// Dimensionless lengths, treated as metres.
    Unit,
}

impl LengthUnit {
    fn to_si(self) -> f64 {
        match self {
            LengthUnit::M | LengthUnit::Unit => 1.0,
            LengthUnit::Cm => 1e-2,
            LengthUnit::Mm => 1e-3,
            LengthUnit::In => 0.0254,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleUnit {
    #[default]
    Rad,
    Deg,
}

impl AngleUnit {
    fn to_si(self) -> f64 {
        match self {
            AngleUnit::Rad => 1.0,
            AngleUnit::Deg => PI / 180.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnitsDoc {
    #[serde(default)]
    length: LengthUnit,
    #[serde(default)]
    angle: AngleUnit,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelDoc {
    FiveBar(FiveBarDoc),
    SerialChain(SerialChainDoc),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FiveBarDoc {
    schema: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default)]
    units: Option<UnitsDoc>,
    geometry: GeometryDoc,
    #[serde(default)]
    limits: Option<FiveBarLimitsDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryDoc {
    l0: f64,
    l1: f64,
    l2: f64,
    #[serde(default)]
    l3: Option<f64>,
    #[serde(default)]
    l4: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FiveBarLimitsDoc {
    #[serde(default)]
    theta1: Option<JointLimits>,
    #[serde(default)]
    theta2: Option<JointLimits>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SerialChainDoc {
    schema: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default)]
    units: Option<UnitsDoc>,
    shape: JacobianShape,
    tool: [f64; 3],
    joints: Vec<JointDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    kind: JointKind,
    axis: [f64; 3],
    anchor: [f64; 3],
    #[serde(default)]
    limits: Option<JointLimits>,
}

fn scale_limits(l: JointLimits, s: f64) -> JointLimits {
    JointLimits {
        min: l.min * s,
        max: l.max * s,
        threshold: l.threshold * s,
    }
}

/// Parses a model document. `origin` is only used in error messages.
pub fn parse_model(text: &str, origin: &Path) -> Result<Mechanism> {
    let parse_err = |reason: String| Error::Parse {
        path: origin.to_path_buf(),
        reason,
    };
    let value: toml::Table = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    match value.get("schema") {
        Some(toml::Value::Integer(SCHEMA_VERSION)) => {}
        Some(toml::Value::Integer(v)) => return Err(Error::Schema(*v)),
        Some(_) => return Err(Error::invalid("schema", "must be an integer")),
        None => return Err(Error::invalid("schema", "missing `schema = 1`")),
    }
    let doc: ModelDoc = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    match doc {
        ModelDoc::FiveBar(d) => {
            let units = d.units.unwrap_or_default();
            let ls = units.length.to_si();
            let as_ = units.angle.to_si();
            let g = &d.geometry;
            let limits = d.limits.unwrap_or(FiveBarLimitsDoc {
                theta1: None,
                theta2: None,
            });
            let lim = |l: Option<JointLimits>| {
                l.map(|l| scale_limits(l, as_))
                    .unwrap_or_else(JointLimits::full_turn)
            };
            let mut model = FiveBarModel {
                name: d.name,
                l0: g.l0 * ls,
                l1: g.l1 * ls,
                l2: g.l2 * ls,
                l3: g.l3.unwrap_or(g.l1) * ls,
                l4: g.l4.unwrap_or(g.l2) * ls,
                base_a: Vec2::zeros(),
                base_b: Vec2::new(g.l0 * ls, 0.0),
                limits: [lim(limits.theta1), lim(limits.theta2)],
            };
            model.validate()?;
            model.base_b = Vec2::new(model.l0, 0.0);
            Ok(Mechanism::FiveBar(model))
        }
        ModelDoc::SerialChain(d) => {
            let units = d.units.unwrap_or_default();
            let ls = units.length.to_si();
            let as_ = units.angle.to_si();
            let joints = d
                .joints
                .into_iter()
                .map(|j| {
                    let s = match j.kind {
                        JointKind::Revolute => as_,
                        JointKind::Prismatic => ls,
                    };
                    SerialJoint {
                        kind: j.kind,
                        axis: Vec3::from(j.axis),
                        anchor: Vec3::from(j.anchor) * ls,
                        limits: j
                            .limits
                            .map(|l| scale_limits(l, s))
                            .unwrap_or_else(JointLimits::full_turn),
                    }
                })
                .collect();
            let model = SerialChainModel {
                name: d.name,
                shape: d.shape,
                joints,
                tool: Vec3::from(d.tool) * ls,
            };
            model.validate()?;
            Ok(Mechanism::SerialChain(model))
        }
    }
}

/// Reads and validates a model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<Mechanism> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text, path)
}

impl fmt::Display for JointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JointKind::Revolute => f.write_str("revolute"),
            JointKind::Prismatic => f.write_str("prismatic"),
        }
    }
}
