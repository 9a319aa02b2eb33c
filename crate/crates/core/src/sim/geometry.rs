//! Planar geometry for the synthetic world.

use serde::{Deserialize, Serialize};

pub type P2 = [f64; 2];

pub fn dist(a: P2, b: P2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Rotates `p` by `yaw` and translates by `origin`.
pub fn to_world(origin: P2, yaw: f64, p: P2) -> P2 {
    let (s, c) = yaw.sin_cos();
    [origin[0] + c * p[0] - s * p[1], origin[1] + s * p[0] + c * p[1]]
}

/// Inverse of [`to_world`].
pub fn to_local(origin: P2, yaw: f64, p: P2) -> P2 {
    let (s, c) = yaw.sin_cos();
    let (dx, dy) = (p[0] - origin[0], p[1] - origin[1]);
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Corners of a `length x width` rectangle centred at `center`, CCW.
pub fn rect(center: P2, yaw: f64, length: f64, width: f64) -> Vec<P2> {
    let (l, w) = (length / 2.0, width / 2.0);
    [[l, w], [-l, w], [-l, -w], [l, -w]]
        .iter()
        .map(|&c| to_world(center, yaw, c))
        .collect()
}

fn project(poly: &[P2], axis: P2) -> (f64, f64) {
    poly.iter()
        .map(|p| p[0] * axis[0] + p[1] * axis[1])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Separating-axis test for two convex polygons. Touching counts as
/// intersecting.
pub fn convex_intersect(a: &[P2], b: &[P2]) -> bool {
    for poly in [a, b] {
        for i in 0..poly.len() {
            let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
            let axis = [-(q[1] - p[1]), q[0] - p[0]];
            let (a0, a1) = project(a, axis);
            let (b0, b1) = project(b, axis);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

/// Polyline with cumulative arc length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<P2>", into = "Vec<P2>")]
pub struct Path {
    pts: Vec<P2>,
    cum: Vec<f64>,
}

impl From<Vec<P2>> for Path {
    fn from(pts: Vec<P2>) -> Self {
        Path::new(pts)
    }
}

impl From<Path> for Vec<P2> {
    fn from(p: Path) -> Self {
        p.pts
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub dist: f64,
    pub point: P2,
    pub heading: f64,
}

impl Path {
    pub fn new(mut pts: Vec<P2>) -> Self {
        pts.dedup();
        let mut cum = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        for i in 0..pts.len() {
            if i > 0 {
                acc += dist(pts[i - 1], pts[i]);
            }
            cum.push(acc);
        }
        Self { pts, cum }
    }

    pub fn points(&self) -> &[P2] {
        &self.pts
    }

    pub fn length(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    fn segment_at(&self, s: f64) -> usize {
        match self.cum.partition_point(|&c| c <= s) {
            0 => 0,
            i => (i - 1).min(self.pts.len().saturating_sub(2)),
        }
    }

    /// Point and heading at arc length `s`, clamped to the path.
    pub fn sample(&self, s: f64) -> (P2, f64) {
        if self.pts.len() == 1 {
            return (self.pts[0], 0.0);
        }
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let seg = self.cum[i + 1] - self.cum[i];
        let t = ((s - self.cum[i]) / seg).clamp(0.0, 1.0);
        ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], (b[1] - a[1]).atan2(b[0] - a[0]))
    }

    /// Closest point on the path.
    pub fn project(&self, p: P2) -> Projection {
        let mut best = Projection {
            s: 0.0,
            dist: dist(p, self.pts[0]),
            point: self.pts[0],
            heading: 0.0,
        };
        for i in 0..self.pts.len().saturating_sub(1) {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
            let q = [a[0] + t * dx, a[1] + t * dy];
            let d = dist(p, q);
            if d < best.dist || i == 0 {
                best = Projection {
                    s: self.cum[i] + t * (self.cum[i + 1] - self.cum[i]),
                    dist: d,
                    point: q,
                    heading: dy.atan2(dx),
                };
            }
        }
        best
    }

    /// Sub-path between arc lengths `s0 <= s1`, with exact end points.
    pub fn slice(&self, s0: f64, s1: f64) -> Vec<P2> {
        let mut out = vec![self.sample(s0).0];
        out.extend(
            self.pts
                .iter()
                .zip(&self.cum)
                .filter(|(_, &c)| c > s0 && c < s1)
                .map(|(p, _)| *p),
        );
        out.push(self.sample(s1).0);
        out
    }

    pub fn concat(parts: &[&Path]) -> Path {
        let mut pts = Vec::new();
        for p in parts {
            pts.extend_from_slice(&p.pts);
        }
        Path::new(pts)
    }
}

/// Circular arc from `start` with initial heading `yaw`, sampled about
/// every `step` metres. Positive `angle` turns left.
pub fn arc(start: P2, yaw: f64, radius: f64, angle: f64, step: f64) -> Vec<P2> {
    let n = ((radius * angle.abs()) / step).ceil().max(1.0) as usize;
    let side = angle.signum();
    // Centre sits on the turning side.
    let center = to_world(start, yaw, [0.0, side * radius]);
    (0..=n)
        .map(|k| {
            let a = angle * k as f64 / n as f64;
            let local = [radius * a.abs().sin(), side * radius * (1.0 - a.cos())];
            let p = to_world(start, yaw, local);
            debug_assert!((dist(p, center) - radius).abs() < 1e-6);
            p
        })
        .collect()
}

/// Straight segment sampled every `step` metres.
pub fn line(a: P2, b: P2, step: f64) -> Vec<P2> {
    let n = (dist(a, b) / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| {
            let t = k as f64 / n as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}
