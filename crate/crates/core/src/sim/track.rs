use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Closed piecewise-linear track, as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub name: String,
    pub road_half_width: f64,
    pub max_cte: f64,
    /// Waypoints in meters; the last one connects back to the first.
    pub centerline: Vec<[f64; 2]>,
}

pub const DEFAULT_HALF_WIDTH: f64 = 2.0;
pub const DEFAULT_MAX_CTE: f64 = 2.5;

impl TrackSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.centerline.len();
        if n < 3 {
            return Err(Error::Config(format!("track `{}` needs at least 3 waypoints, has {n}", self.name)));
        }
        if !(self.road_half_width > 0.0 && self.road_half_width.is_finite()) {
            return Err(Error::Config(format!("road_half_width must be positive, got {}", self.road_half_width)));
        }
        if !(self.max_cte >= self.road_half_width && self.max_cte.is_finite()) {
            return Err(Error::Config(format!(
                "max_cte {} must be finite and at least road_half_width {}",
                self.max_cte, self.road_half_width
            )));
        }
        for (i, p) in self.centerline.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::Config(format!("waypoint {i} is not finite")));
            }
            let q = self.centerline[(i + 1) % n];
            if p == &q {
                return Err(Error::Config(format!("waypoints {i} and {} coincide", (i + 1) % n)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: TrackSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("track serializes")
    }

    /// Stadium oval: two 30 m straights joined by 10 m radius turns.
    pub fn oval() -> Self {
        let mut pts = Vec::new();
        let (half, r) = (15.0, 10.0);
        straight(&mut pts, [-half, -r], [half, -r], 6);
        arc(&mut pts, [half, 0.0], r, -PI / 2.0, PI / 2.0, 16);
        straight(&mut pts, [half, r], [-half, r], 6);
        arc(&mut pts, [-half, 0.0], r, PI / 2.0, 3.0 * PI / 2.0, 16);
        Self::with_defaults("oval", pts)
    }

    /// Wavy loop with alternating tighter and gentler bends.
    pub fn curves() -> Self {
        let n = 96;
        let pts = (0..n)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / n as f64 - PI / 2.0;
                let r = 22.0 + 4.0 * (3.0 * a).sin() + 1.5 * (5.0 * a).cos();
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        Self::with_defaults("curves", pts)
    }

    /// Long rectangle with rounded corners; mostly straights.
    pub fn speedway() -> Self {
        let mut pts = Vec::new();
        let (hx, hy, r) = (40.0, 12.0, 8.0);
        straight(&mut pts, [-hx + r, -hy], [hx - r, -hy], 8);
        arc(&mut pts, [hx - r, -hy + r], r, -PI / 2.0, 0.0, 6);
        straight(&mut pts, [hx, -hy + r], [hx, hy - r], 2);
        arc(&mut pts, [hx - r, hy - r], r, 0.0, PI / 2.0, 6);
        straight(&mut pts, [hx - r, hy], [-hx + r, hy], 8);
        arc(&mut pts, [-hx + r, hy - r], r, PI / 2.0, PI, 6);
        straight(&mut pts, [-hx, hy - r], [-hx, -hy + r], 2);
        arc(&mut pts, [-hx + r, -hy + r], r, PI, 3.0 * PI / 2.0, 6);
        Self::with_defaults("speedway", pts)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "oval" => Some(Self::oval()),
            "curves" => Some(Self::curves()),
            "speedway" => Some(Self::speedway()),
            _ => None,
        }
    }

    pub const BUILTINS: [&'static str; 3] = ["oval", "curves", "speedway"];

    fn with_defaults(name: &str, centerline: Vec<[f64; 2]>) -> Self {
        Self {
            name: name.into(),
            road_half_width: DEFAULT_HALF_WIDTH,
            max_cte: DEFAULT_MAX_CTE,
            centerline,
        }
    }
}

// Points from `a` up to (excluding) `b`.
fn straight(out: &mut Vec<[f64; 2]>, a: [f64; 2], b: [f64; 2], pieces: usize) {
    for i in 0..pieces {
        let t = i as f64 / pieces as f64;
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
}

// Points on the arc from angle `from` up to (excluding) `to`.
fn arc(out: &mut Vec<[f64; 2]>, c: [f64; 2], r: f64, from: f64, to: f64, pieces: usize) {
    for i in 0..pieces {
        let a = from + (to - from) * i as f64 / pieces as f64;
        out.push([c[0] + r * a.cos(), c[1] + r * a.sin()]);
    }
}

/// A validated track with per-segment geometry precomputed.
#[derive(Clone, Debug)]
pub struct Track {
    spec: TrackSpec,
    segs: Vec<Segment>,
    // unit bisector tangent at each waypoint, for signing vertex-nearest points
    vertex_tangent: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
    length: f64,
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    a: [f64; 2],
    d: [f64; 2],
    len2: f64,
    unit: [f64; 2],
}

/// Nearest point on the centerline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub segment: usize,
    /// Position along the segment in `[0, 1]`.
    pub t: f64,
    pub distance: f64,
    /// Signed distance, positive to the left of travel.
    pub cte: f64,
}

impl Track {
    pub fn new(spec: TrackSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.centerline.len();
        let segs: Vec<Segment> = (0..n)
            .map(|i| {
                let a = spec.centerline[i];
                let b = spec.centerline[(i + 1) % n];
                let d = [b[0] - a[0], b[1] - a[1]];
                let len2 = d[0] * d[0] + d[1] * d[1];
                let len = len2.sqrt();
                Segment {
                    a,
                    d,
                    len2,
                    unit: [d[0] / len, d[1] / len],
                }
            })
            .collect();
        let vertex_tangent = (0..n)
            .map(|i| {
                let prev = segs[(i + n - 1) % n].unit;
                let next = segs[i].unit;
                let s = [prev[0] + next[0], prev[1] + next[1]];
                let l = (s[0] * s[0] + s[1] * s[1]).sqrt();
                if l < 1e-12 {
                    next
                } else {
                    [s[0] / l, s[1] / l]
                }
            })
            .collect();
        let mut cumulative = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        for s in &segs {
            cumulative.push(acc);
            acc += s.len2.sqrt();
        }
        cumulative.push(acc);
        Ok(Self {
            spec,
            segs,
            vertex_tangent,
            cumulative,
            length: acc,
        })
    }

    pub fn spec(&self) -> &TrackSpec {
        &self.spec
    }

    pub fn half_width(&self) -> f64 {
        self.spec.road_half_width
    }

    pub fn max_cte(&self) -> f64 {
        self.spec.max_cte
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn waypoint(&self, i: usize) -> [f64; 2] {
        self.spec.centerline[i % self.segs.len()]
    }

    /// Unit direction of travel along segment `i`.
    pub fn direction(&self, i: usize) -> [f64; 2] {
        self.segs[i % self.segs.len()].unit
    }

    pub fn project(&self, p: [f64; 2]) -> Projection {
        let mut best = Projection {
            segment: 0,
            t: 0.0,
            distance: f64::INFINITY,
            cte: 0.0,
        };
        let mut best_d2 = f64::INFINITY;
        for (i, s) in self.segs.iter().enumerate() {
            let w = [p[0] - s.a[0], p[1] - s.a[1]];
            let t = ((w[0] * s.d[0] + w[1] * s.d[1]) / s.len2).clamp(0.0, 1.0);
            let q = [s.a[0] + t * s.d[0] - p[0], s.a[1] + t * s.d[1] - p[1]];
            let d2 = q[0] * q[0] + q[1] * q[1];
            if d2 < best_d2 {
                best_d2 = d2;
                best.segment = i;
                best.t = t;
            }
        }
        let s = &self.segs[best.segment];
        let n = self.segs.len();
        let (origin, tangent) = if best.t <= 0.0 {
            (s.a, self.vertex_tangent[best.segment])
        } else if best.t >= 1.0 {
            let j = (best.segment + 1) % n;
            (self.spec.centerline[j], self.vertex_tangent[j])
        } else {
            (s.a, s.unit)
        };
        let w = [p[0] - origin[0], p[1] - origin[1]];
        let side = tangent[0] * w[1] - tangent[1] * w[0];
        best.distance = best_d2.sqrt();
        best.cte = if side < 0.0 { -best.distance } else { best.distance };
        best
    }

    /// Unsigned distance to the centerline.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let mut best = f64::INFINITY;
        for s in &self.segs {
            let w = [p[0] - s.a[0], p[1] - s.a[1]];
            let t = ((w[0] * s.d[0] + w[1] * s.d[1]) / s.len2).clamp(0.0, 1.0);
            let q = [s.a[0] + t * s.d[0] - p[0], s.a[1] + t * s.d[1] - p[1]];
            best = best.min(q[0] * q[0] + q[1] * q[1]);
        }
        best.sqrt()
    }

    /// Arc length from waypoint 0 to a projection.
    pub fn arc_length(&self, proj: &Projection) -> f64 {
        self.cumulative[proj.segment] + proj.t * self.segs[proj.segment].len2.sqrt()
    }

    /// Centerline point at arc length `s` (wrapped onto the loop).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.rem_euclid(self.length);
        let i = match self.cumulative.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.segs.len() - 1),
            Err(i) => i - 1,
        };
        let seg = &self.segs[i];
        let t = (s - self.cumulative[i]) / seg.len2.sqrt();
        [seg.a[0] + t * seg.d[0], seg.a[1] + t * seg.d[1]]
    }

    /// Unit tangent at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> [f64; 2] {
        let s = s.rem_euclid(self.length);
        let i = match self.cumulative.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.segs.len() - 1),
            Err(i) => i - 1,
        };
        self.segs[i].unit
    }
}

/// Signed perpendicular distance from `position` to the centerline of
/// `track`; positive when left of the direction of travel.
pub fn cross_track_error(position: [f64; 2], track: &Track) -> f64 {
    track.project(position).cte
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> TrackSpec {
        TrackSpec {
            name: "unit-square".into(),
            road_half_width: 0.4,
            max_cte: 0.5,
            centerline: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        }
    }

    #[test]
    fn builtins_are_valid_and_detailed() {
        for name in TrackSpec::BUILTINS {
            let t = TrackSpec::builtin(name).unwrap();
            t.validate().unwrap();
            assert!(t.centerline.len() >= 24, "{name} has {} waypoints", t.centerline.len());
        }
    }

    #[test]
    fn coincident_waypoints_rejected() {
        let mut t = square();
        t.centerline.insert(1, [0.0, 0.0]);
        assert!(matches!(Track::new(t), Err(Error::Config(_))));
        let mut closing = square();
        closing.centerline.push([0.0, 0.0]);
        assert!(matches!(Track::new(closing), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_widths_rejected() {
        let mut t = square();
        t.road_half_width = 0.0;
        assert!(t.validate().is_err());
        let mut t = square();
        t.max_cte = 0.1;
        assert!(t.validate().is_err());
    }

    #[test]
    fn on_centerline_is_zero() {
        let track = Track::new(square()).unwrap();
        assert_eq!(cross_track_error([0.3, 0.0], &track), 0.0);
        assert_eq!(cross_track_error([1.0, 0.7], &track), 0.0);
    }

    #[test]
    fn left_offset_is_positive() {
        let track = Track::new(square()).unwrap();
        // travel along +x on the first side; left is +y
        assert_eq!(cross_track_error([0.5, 0.5], &track), 0.5);
        assert!((cross_track_error([0.5, -0.25], &track) + 0.25).abs() < 1e-15);
    }

    // Brute force: sample 10,000 centerline points (vertices included) and
    // take the closest.
    fn brute_distance(spec: &TrackSpec, p: [f64; 2]) -> f64 {
        let n = spec.centerline.len();
        let per = 10_000 / n;
        let mut best = f64::INFINITY;
        for i in 0..n {
            let a = spec.centerline[i];
            let b = spec.centerline[(i + 1) % n];
            for k in 0..per {
                let t = k as f64 / per as f64;
                let q = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                best = best.min(((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt());
            }
        }
        best
    }

    #[test]
    fn near_corner_matches_brute_force() {
        let spec = square();
        let track = Track::new(spec.clone()).unwrap();
        for p in [[1.2, -0.15], [0.85, 0.1], [1.1, 0.3], [0.9, -0.05], [1.25, 1.2], [-0.1, 0.9]] {
            let got = cross_track_error(p, &track).abs();
            let want = brute_distance(&spec, p);
            assert!((got - want).abs() < 1e-6, "{p:?}: {got} vs {want}");
        }
    }

    #[test]
    fn point_at_walks_the_loop() {
        let track = Track::new(square()).unwrap();
        assert_eq!(track.length(), 4.0);
        assert_eq!(track.point_at(0.5), [0.5, 0.0]);
        assert_eq!(track.point_at(1.5), [1.0, 0.5]);
        assert_eq!(track.point_at(4.5), [0.5, 0.0]);
        assert_eq!(track.tangent_at(2.5), [-1.0, 0.0]);
    }

    #[test]
    fn json_round_trip() {
        let t = TrackSpec::oval();
        assert_eq!(TrackSpec::from_json(&t.to_json()).unwrap(), t);
    }
}
