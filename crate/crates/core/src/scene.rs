//! The double-edge lane representation.
//!
//! A scene is a set of lanes, each stored as a left and a right edge of
//! `N_p / 2` points. Lanes carry two lane-level bits (intersection, direction)
//! and every edge point carries two point-level bits (occupancy, plan).
//!
//! Attribute polarity: `occ = 1` marks a point whose lane region is free,
//! `occ = 0` marks an occupied or non-traversable point. `dir = 1` means the
//! lane runs with the ego route direction.

use serde::{Deserialize, Deserializer, Serialize};
use std::fmt;
use thiserror::Error;

/// Default half-extent of the BEV window in metres.
pub const BEV_RANGE: f64 = 32.0;
/// Lane slots under the reference configuration.
pub const MAX_LANES: usize = 30;
/// Points per edge under the reference configuration (`N_p / 2`).
pub const POINTS_PER_EDGE: usize = 10;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("malformed scene JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("scene schema violation at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("scene is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("degenerate geometry")]
    DegenerateGeometry,
}

fn bit<'de, D: Deserializer<'de>>(d: D) -> Result<u8, D::Error> {
    match u64::deserialize(d)? {
        v @ (0 | 1) => Ok(v as u8),
        v => Err(serde::de::Error::custom(format!("attribute not binary: {v}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgePoint {
    pub x: f64,
    pub y: f64,
    #[serde(deserialize_with = "bit")]
    pub occ: u8,
    #[serde(deserialize_with = "bit")]
    pub plan: u8,
}

impl EdgePoint {
    pub fn new(x: f64, y: f64, occ: u8, plan: u8) -> Self {
        Self { x, y, occ, plan }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Edge {
    pub points: Vec<EdgePoint>,
}

impl Edge {
    pub fn new(points: Vec<EdgePoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleEdge {
    pub left: Edge,
    pub right: Edge,
    #[serde(rename = "int", deserialize_with = "bit")]
    pub intersection: u8,
    #[serde(rename = "dir", deserialize_with = "bit")]
    pub direction: u8,
}

impl DoubleEdge {
    /// Number of aligned point pairs.
    pub fn pairs(&self) -> usize {
        self.left.len().min(self.right.len())
    }

    /// Midpoint of the `j`-th left/right pair.
    pub fn midpoint(&self, j: usize) -> [f64; 2] {
        let (l, r) = (&self.left.points[j], &self.right.points[j]);
        [(l.x + r.x) / 2.0, (l.y + r.y) / 2.0]
    }

    pub fn points(&self) -> impl Iterator<Item = &EdgePoint> {
        self.left.points.iter().chain(&self.right.points)
    }

    pub fn points_mut(&mut self) -> impl Iterator<Item = &mut EdgePoint> {
        self.left.points.iter_mut().chain(self.right.points.iter_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Green,
    Red,
    Yellow,
    None,
}

impl Signal {
    pub const ALL: [Signal; 4] = [Signal::Green, Signal::Red, Signal::Yellow, Signal::None];

    pub fn class_index(self) -> usize {
        self as usize
    }

    pub fn from_class_index(i: usize) -> Option<Signal> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneAnnotation {
    pub lanes: Vec<DoubleEdge>,
    pub speed: f64,
    pub signal: Signal,
}

impl SceneAnnotation {
    pub fn empty(speed: f64, signal: Signal) -> Self {
        Self {
            lanes: Vec::new(),
            speed,
            signal,
        }
    }

    /// Validity mask over `slots` lane slots; real lanes occupy the prefix.
    pub fn lane_mask(&self, slots: usize) -> Vec<bool> {
        (0..slots).map(|i| i < self.lanes.len()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPoint {
    pub x: f64,
    pub y: f64,
}

/// Configured limits a scene is validated against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneLimits {
    pub points_per_edge: usize,
    pub max_lanes: usize,
    pub bev_range_x: f64,
    pub bev_range_y: f64,
}

impl Default for SceneLimits {
    fn default() -> Self {
        Self {
            points_per_edge: POINTS_PER_EDGE,
            max_lanes: MAX_LANES,
            bev_range_x: BEV_RANGE,
            bev_range_y: BEV_RANGE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    TooManyLanes,
    EdgeLengthMismatch,
    WrongPointCount,
    AttributeNotBinary,
    OutOfRange,
    NonFinite,
    NegativeSpeed,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::TooManyLanes => "too many lanes",
            Rule::EdgeLengthMismatch => "edge length mismatch",
            Rule::WrongPointCount => "wrong point count",
            Rule::AttributeNotBinary => "attribute not binary",
            Rule::OutOfRange => "outside BEV range",
            Rule::NonFinite => "non-finite value",
            Rule::NegativeSpeed => "negative speed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Offending lane, `None` for scene-level fields.
    pub lane: Option<usize>,
    pub field: String,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.lane {
            Some(i) => write!(f, "lane {i}: {}: {}", self.field, self.rule),
            None => write!(f, "{}: {}", self.field, self.rule),
        }
    }
}

pub fn validate(scene: &SceneAnnotation) -> Vec<Violation> {
    validate_with(scene, &SceneLimits::default())
}

pub fn validate_with(scene: &SceneAnnotation, limits: &SceneLimits) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |lane: Option<usize>, field: String, rule: Rule| {
        out.push(Violation { lane, field, rule })
    };
    if scene.lanes.len() > limits.max_lanes {
        push(None, "lanes".into(), Rule::TooManyLanes);
    }
    if !scene.speed.is_finite() {
        push(None, "speed".into(), Rule::NonFinite);
    } else if scene.speed < 0.0 {
        push(None, "speed".into(), Rule::NegativeSpeed);
    }
    for (i, lane) in scene.lanes.iter().enumerate() {
        let lane_idx = Some(i);
        if lane.left.len() != lane.right.len() {
            push(lane_idx, "left/right".into(), Rule::EdgeLengthMismatch);
        }
        for (name, v) in [("int", lane.intersection), ("dir", lane.direction)] {
            if v > 1 {
                push(lane_idx, name.into(), Rule::AttributeNotBinary);
            }
        }
        for (side, edge) in [("left", &lane.left), ("right", &lane.right)] {
            if edge.len() != limits.points_per_edge {
                push(lane_idx, side.into(), Rule::WrongPointCount);
            }
            for (j, p) in edge.points.iter().enumerate() {
                if p.occ > 1 {
                    push(lane_idx, format!("{side}[{j}].occ"), Rule::AttributeNotBinary);
                }
                if p.plan > 1 {
                    push(lane_idx, format!("{side}[{j}].plan"), Rule::AttributeNotBinary);
                }
                if !(p.x.is_finite() && p.y.is_finite()) {
                    push(lane_idx, format!("{side}[{j}]"), Rule::NonFinite);
                } else if p.x.abs() > limits.bev_range_x || p.y.abs() > limits.bev_range_y {
                    push(lane_idx, format!("{side}[{j}]"), Rule::OutOfRange);
                }
            }
        }
    }
    out
}

/// Closed outline of a lane: left edge in order, then the right edge reversed.
pub fn lane_polygon(lane: &DoubleEdge) -> Result<Vec<[f64; 2]>, SceneError> {
    if lane.left.len() < 2 || lane.right.len() < 2 {
        return Err(SceneError::DegenerateGeometry);
    }
    let first = lane.left.points[0].xy();
    if lane.points().all(|p| p.xy() == first) {
        return Err(SceneError::DegenerateGeometry);
    }
    Ok(lane
        .left
        .points
        .iter()
        .chain(lane.right.points.iter().rev())
        .map(EdgePoint::xy)
        .collect())
}

/// Schema-level checks shared by the JSON encoder and decoder: binary
/// attributes and finite numbers. Count and range limits depend on the
/// network configuration and are left to [`validate_with`].
fn schema_violations(scene: &SceneAnnotation) -> Vec<Violation> {
    validate_with(
        scene,
        &SceneLimits {
            points_per_edge: usize::MAX,
            max_lanes: usize::MAX,
            bev_range_x: f64::INFINITY,
            bev_range_y: f64::INFINITY,
        },
    )
    .into_iter()
    .filter(|v| !matches!(v.rule, Rule::WrongPointCount))
    .collect()
}

pub fn to_json(scene: &SceneAnnotation) -> Result<String, SceneError> {
    let bad = schema_violations(scene);
    if !bad.is_empty() {
        return Err(SceneError::Invalid(bad));
    }
    Ok(serde_json::to_string(scene).expect("scene serialization cannot fail"))
}

pub fn from_json(input: &str) -> Result<SceneAnnotation, SceneError> {
    let mut de = serde_json::Deserializer::from_str(input);
    let scene: SceneAnnotation = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        json_error(input, path, inner)
    })?;
    de.end().map_err(|e| json_error(input, String::new(), e))?;
    let bad = schema_violations(&scene);
    if !bad.is_empty() {
        return Err(SceneError::Invalid(bad));
    }
    Ok(scene)
}

pub fn from_json_bytes(input: &[u8]) -> Result<SceneAnnotation, SceneError> {
    let text = std::str::from_utf8(input).map_err(|e| SceneError::Parse {
        offset: e.valid_up_to(),
        message: "invalid UTF-8".into(),
    })?;
    from_json(text)
}

fn json_error(input: &str, path: String, e: serde_json::Error) -> SceneError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => SceneError::Schema {
            field: path,
            message: e.to_string(),
        },
        _ => SceneError::Parse {
            offset: byte_offset(input, e.line(), e.column()),
            message: e.to_string(),
        },
    }
}

/// serde_json reports 1-based line/column; convert back to a byte offset.
fn byte_offset(input: &str, line: usize, column: usize) -> usize {
    let line_start: usize = input
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column).min(input.len())
}
