//! Road centerline geometry.
//!
//! A [`Centerline`] is an arc-length parameterized polyline with per-point
//! heading and curvature. Lanes are laid out symmetrically about the
//! centerline; lane 0 is the rightmost lane. Positive curvature, heading
//! change and lateral offset all point to the left.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by the local equirectangular projection.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Default resampling step.
pub const DEFAULT_DS: f64 = 1.0;
/// Sanity bound on road curvature, 1/m.
pub const MAX_ROAD_CURVATURE: f64 = 0.2;
/// Default lane width.
pub const DEFAULT_LANE_WIDTH: f64 = 3.75;
/// Road file format tag.
pub const ROAD_FORMAT: &str = "lanekeep-road-v1";

const MAX_LATLON_SPACING_M: f64 = 1000.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("a centerline needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("consecutive points {0} and {1} coincide")]
    DuplicatePoint(usize, usize),
    #[error("consecutive points {index} and {next} are {distance:.1} m apart (limit 1 km)")]
    SpacingTooLarge { index: usize, next: usize, distance: f64 },
    #[error("invalid geographic coordinate lat={lat}, lon={lon}")]
    InvalidGeoPoint { lat: f64, lon: f64 },
    #[error("lane layout invalid: {0}")]
    InvalidLanes(String),
    #[error("curvature {kappa:.4} 1/m at point {index} exceeds the road bound of 0.2 1/m")]
    CurvatureTooLarge { index: usize, kappa: f64 },
    #[error("resampling step {ds} m must be positive and no longer than the road ({length} m)")]
    InvalidStep { ds: f64, length: f64 },
    #[error("arc length {s} outside [0, {length}]")]
    OutOfRange { s: f64, length: f64 },
    #[error("vehicle lost: {distance:.2} m from the nearest lane center (limit {limit:.2} m)")]
    Lost { distance: f64, limit: f64 },
    #[error("position projects beyond the end of the road")]
    BeyondRoadEnd,
    #[error("lane index {index} out of range for a {count}-lane road")]
    LaneIndex { index: usize, count: usize },
    #[error("road file: {0}")]
    RoadFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    fn lerp(self, o: Point2, t: f64) -> Point2 {
        Point2::new(self.x + t * (o.x - self.x), self.y + t * (o.y - self.y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeometryError> {
        let p = Self { lat, lon };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon);
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidGeoPoint { lat: self.lat, lon: self.lon })
        }
    }

    /// Local equirectangular projection relative to `origin`.
    pub fn project(&self, origin: &GeoPoint) -> Point2 {
        let lat0 = origin.lat.to_radians();
        let x = EARTH_RADIUS_M * (self.lon - origin.lon).to_radians() * lat0.cos();
        let y = EARTH_RADIUS_M * (self.lat - origin.lat).to_radians();
        Point2::new(x, y)
    }

    /// Inverse of [`GeoPoint::project`].
    pub fn unproject(p: Point2, origin: &GeoPoint) -> GeoPoint {
        let lat0 = origin.lat.to_radians();
        GeoPoint {
            lat: origin.lat + (p.y / EARTH_RADIUS_M).to_degrees(),
            lon: origin.lon + (p.x / (EARTH_RADIUS_M * lat0.cos())).to_degrees(),
        }
    }
}

/// Number and width of lanes; lanes sit symmetrically about the centerline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneLayout {
    pub count: usize,
    pub width: f64,
}

impl LaneLayout {
    pub fn new(count: usize, width: f64) -> Result<Self, GeometryError> {
        if count == 0 {
            return Err(GeometryError::InvalidLanes("lane_count must be at least 1".into()));
        }
        if !(width.is_finite() && width > 0.0) {
            return Err(GeometryError::InvalidLanes(format!("lane width {width} must be > 0")));
        }
        Ok(Self { count, width })
    }

    /// Signed offset of a lane center from the road centerline (lane 0 is rightmost).
    pub fn lane_center_offset(&self, lane_index: usize) -> f64 {
        (lane_index as f64 - (self.count as f64 - 1.0) / 2.0) * self.width
    }

    /// Signed offsets of every lane marking, right edge first.
    pub fn marking_offsets(&self) -> Vec<f64> {
        (0..=self.count)
            .map(|k| (k as f64 - self.count as f64 / 2.0) * self.width)
            .collect()
    }

    pub fn check_lane(&self, lane_index: usize) -> Result<(), GeometryError> {
        if lane_index < self.count {
            Ok(())
        } else {
            Err(GeometryError::LaneIndex { index: lane_index, count: self.count })
        }
    }
}

impl Default for LaneLayout {
    fn default() -> Self {
        Self { count: 1, width: DEFAULT_LANE_WIDTH }
    }
}

/// Vehicle pose relative to a lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanePose {
    /// Arc length along the centerline.
    pub s: f64,
    /// Offset from the lane center, positive toward the left marking.
    pub y_off: f64,
    /// Heading error relative to the road tangent, in (-pi, pi].
    pub psi_err: f64,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Immutable road centerline with cached arc length, heading and curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    points: Vec<Point2>,
    arc_length: Vec<f64>,
    heading: Vec<f64>,
    curvature: Vec<f64>,
    lanes: LaneLayout,
}

impl Centerline {
    pub fn new(points: Vec<Point2>, lanes: LaneLayout) -> Result<Self, GeometryError> {
        let lanes = LaneLayout::new(lanes.count, lanes.width)?;
        if points.len() < 3 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        let mut arc_length = Vec::with_capacity(points.len());
        arc_length.push(0.0);
        for i in 1..points.len() {
            let d = points[i].sub(points[i - 1]).norm();
            if !(d > 0.0) {
                return Err(GeometryError::DuplicatePoint(i - 1, i));
            }
            arc_length.push(arc_length[i - 1] + d);
        }
        let heading = point_headings(&points, &arc_length);
        let curvature = point_curvatures(&heading, &arc_length);
        if let Some((index, &kappa)) = curvature
            .iter()
            .enumerate()
            .find(|(_, k)| !(k.abs() <= MAX_ROAD_CURVATURE))
        {
            return Err(GeometryError::CurvatureTooLarge { index, kappa });
        }
        Ok(Self { points, arc_length, heading, curvature, lanes })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn arc_length(&self) -> &[f64] {
        &self.arc_length
    }

    pub fn curvatures(&self) -> &[f64] {
        &self.curvature
    }

    /// Unwrapped per-point tangent headings.
    pub fn headings(&self) -> &[f64] {
        &self.heading
    }

    pub fn lanes(&self) -> LaneLayout {
        self.lanes
    }

    pub fn lane_width(&self) -> f64 {
        self.lanes.width
    }

    pub fn lane_count(&self) -> usize {
        self.lanes.count
    }

    pub fn length(&self) -> f64 {
        *self.arc_length.last().expect("centerline has points")
    }

    pub fn with_lanes(&self, lanes: LaneLayout) -> Result<Self, GeometryError> {
        Self::new(self.points.clone(), lanes)
    }

    fn check_s(&self, s: f64) -> Result<(), GeometryError> {
        if s.is_finite() && (0.0..=self.length()).contains(&s) {
            Ok(())
        } else {
            Err(GeometryError::OutOfRange { s, length: self.length() })
        }
    }

    /// Segment index and fraction for an in-range arc length.
    fn locate(&self, s: f64) -> (usize, f64) {
        let n = self.points.len();
        let j = self.arc_length.partition_point(|&a| a <= s).clamp(1, n - 1) - 1;
        let t = (s - self.arc_length[j]) / (self.arc_length[j + 1] - self.arc_length[j]);
        (j, t.clamp(0.0, 1.0))
    }

    /// Curvature at arc length `s`, linearly interpolated between points.
    pub fn curvature_at(&self, s: f64) -> Result<f64, GeometryError> {
        self.check_s(s)?;
        let (j, t) = self.locate(s);
        Ok(self.curvature[j] + t * (self.curvature[j + 1] - self.curvature[j]))
    }

    /// Curvature with `s` clamped to the road extent.
    pub fn curvature_clamped(&self, s: f64) -> f64 {
        self.curvature_at(s.clamp(0.0, self.length())).unwrap_or(0.0)
    }

    pub fn position_at(&self, s: f64) -> Result<Point2, GeometryError> {
        self.check_s(s)?;
        let (j, t) = self.locate(s);
        Ok(self.points[j].lerp(self.points[j + 1], t))
    }

    /// Unwrapped tangent heading at `s`.
    pub fn heading_at(&self, s: f64) -> Result<f64, GeometryError> {
        self.check_s(s)?;
        let (j, t) = self.locate(s);
        Ok(self.heading[j] + t * (self.heading[j + 1] - self.heading[j]))
    }

    /// World pose of a point at arc length `s` and signed lateral offset
    /// `lateral` from the centerline, with the road tangent heading.
    pub fn frame_at(&self, s: f64, lateral: f64) -> Result<(Point2, f64), GeometryError> {
        let c = self.position_at(s)?;
        let h = self.heading_at(s)?;
        let p = Point2::new(c.x - lateral * h.sin(), c.y + lateral * h.cos());
        Ok((p, h))
    }

    /// Arc length and signed lateral offset (from the centerline) of a world point.
    ///
    /// The foot point is the location where the offset vector is normal to the
    /// interpolated tangent, so a point built with [`Centerline::frame_at`]
    /// projects back to the same `(s, lateral)`.
    pub fn project(&self, p: Point2) -> Result<(f64, f64), GeometryError> {
        let n = self.points.len();
        let nearest = self
            .points
            .iter()
            .enumerate()
            .map(|(i, q)| (i, p.sub(*q).dot(p.sub(*q))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("centerline has points");

        let mut best: Option<(f64, f64, f64)> = None;
        let lo = nearest.saturating_sub(1);
        let hi = (nearest + 1).min(n - 1);
        for j in lo..hi {
            if let Some((s, lat, dist)) = self.project_on_segment(p, j) {
                if best.is_none_or(|b| dist < b.2) {
                    best = Some((s, lat, dist));
                }
            }
        }
        match best {
            Some((s, lat, _)) => Ok((s, lat)),
            None if nearest == 0 || nearest == n - 1 => Err(GeometryError::BeyondRoadEnd),
            None => {
                // Foot point sits exactly on the vertex.
                let h = self.heading[nearest];
                let d = p.sub(self.points[nearest]);
                Ok((self.arc_length[nearest], -d.x * h.sin() + d.y * h.cos()))
            }
        }
    }

    fn project_on_segment(&self, p: Point2, j: usize) -> Option<(f64, f64, f64)> {
        let (a, b) = (self.points[j], self.points[j + 1]);
        let (ha, hb) = (self.heading[j], self.heading[j + 1]);
        let along = |t: f64| {
            let c = a.lerp(b, t);
            let h = ha + t * (hb - ha);
            let d = p.sub(c);
            (d.x * h.cos() + d.y * h.sin(), -d.x * h.sin() + d.y * h.cos(), d.norm())
        };
        let tol = 1e-12 * (1.0 + self.arc_length[j + 1]);
        let f0 = along(0.0).0;
        let f1 = along(1.0).0;
        if f0 < -tol || f1 > tol {
            return None;
        }
        // f is decreasing across the segment; bisect for the root.
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        if f0 <= 0.0 {
            hi = 0.0;
        } else if f1 >= 0.0 {
            lo = 1.0;
        } else {
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if along(mid).0 > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        let t = 0.5 * (lo + hi);
        let (_, lat, dist) = along(t);
        let s = self.arc_length[j] + t * (self.arc_length[j + 1] - self.arc_length[j]);
        Some((s, lat, dist))
    }

    /// Vehicle pose relative to the center of lane `lane_index`.
    pub fn localize(&self, x: f64, y: f64, psi: f64, lane_index: usize) -> Result<LanePose, GeometryError> {
        self.lanes.check_lane(lane_index)?;
        let (s, lateral) = self.project(Point2::new(x, y))?;
        let limit = 2.0 * self.lanes.width;
        let nearest_lane = (0..self.lanes.count)
            .map(|k| (lateral - self.lanes.lane_center_offset(k)).abs())
            .fold(f64::INFINITY, f64::min);
        if nearest_lane > limit {
            return Err(GeometryError::Lost { distance: nearest_lane, limit });
        }
        let tangent = self.heading_at(s)?;
        Ok(LanePose {
            s,
            y_off: lateral - self.lanes.lane_center_offset(lane_index),
            psi_err: wrap_angle(psi - tangent),
        })
    }

    /// Resamples at uniform spacing `ds`.
    ///
    /// Output points are placed by walking the input polyline so that every
    /// consecutive pair is exactly `ds` apart; resampling the result again at
    /// the same `ds` reproduces it.
    pub fn resample(&self, ds: f64) -> Result<Centerline, GeometryError> {
        let length = self.length();
        if !(ds.is_finite() && ds > 0.0 && ds <= length) {
            return Err(GeometryError::InvalidStep { ds, length });
        }
        let pts = &self.points;
        let mut out = vec![pts[0]];
        let mut seg = 0usize;
        let mut seg_t = 0.0f64;
        let snap = ds * 1e-9;
        loop {
            let q = *out.last().expect("non-empty");
            let mut found = None;
            for j in seg..pts.len() - 1 {
                let t_start = if j == seg { seg_t } else { 0.0 };
                if let Some(t) = circle_segment_exit(q, ds, pts[j], pts[j + 1], t_start) {
                    found = Some((j, t));
                    break;
                }
            }
            match found {
                Some((j, t)) => {
                    out.push(pts[j].lerp(pts[j + 1], t));
                    seg = j;
                    seg_t = t;
                }
                None => {
                    let end = *pts.last().expect("non-empty");
                    let rest = end.sub(q).norm();
                    if (ds - rest).abs() <= snap && rest > 0.0 {
                        out.push(end);
                    }
                    break;
                }
            }
        }
        Centerline::new(out, self.lanes)
    }
}

/// First parameter `t >= t_start` on segment `a..b` at distance `r` from `q`.
fn circle_segment_exit(q: Point2, r: f64, a: Point2, b: Point2, t_start: f64) -> Option<f64> {
    let d = b.sub(a);
    let f = a.sub(q);
    let qa = d.dot(d);
    let qb = 2.0 * f.dot(d);
    let qc = f.dot(f) - r * r;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return None;
    }
    // The segment start is inside the circle, so the larger root is the exit.
    let t = (-qb + disc.sqrt()) / (2.0 * qa);
    let eps = 1e-12;
    (t >= t_start - eps && t <= 1.0 + eps).then(|| t.clamp(0.0, 1.0))
}

fn unwrap_near(angle: f64, reference: f64) -> f64 {
    reference + wrap_angle(angle - reference)
}

/// Unwrapped tangent heading at every point: central chord direction at
/// interior points, linear extrapolation of segment headings at the ends.
fn point_headings(points: &[Point2], arc: &[f64]) -> Vec<f64> {
    let n = points.len();
    let mut seg = Vec::with_capacity(n - 1);
    for j in 0..n - 1 {
        let d = points[j + 1].sub(points[j]);
        let h = d.y.atan2(d.x);
        seg.push(match seg.last() {
            Some(&prev) => unwrap_near(h, prev),
            None => h,
        });
    }
    let mut heading = vec![0.0; n];
    for i in 1..n - 1 {
        let d = points[i + 1].sub(points[i - 1]);
        heading[i] = unwrap_near(d.y.atan2(d.x), seg[i - 1]);
    }
    let mid = |j: usize| 0.5 * (arc[j] + arc[j + 1]);
    let slope0 = (seg[1] - seg[0]) / (mid(1) - mid(0));
    heading[0] = seg[0] - slope0 * (mid(0) - arc[0]);
    let last = n - 2;
    let slope1 = (seg[last] - seg[last - 1]) / (mid(last) - mid(last - 1));
    heading[n - 1] = seg[last] + slope1 * (arc[n - 1] - mid(last));
    heading
}

fn point_curvatures(heading: &[f64], arc: &[f64]) -> Vec<f64> {
    let n = heading.len();
    (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            (heading[b] - heading[a]) / (arc[b] - arc[a])
        })
        .collect()
}

/// Projects lat/lon points into a local metric frame around `origin`.
pub fn import_latlon(
    points: &[GeoPoint],
    origin: &GeoPoint,
    lanes: LaneLayout,
) -> Result<Centerline, GeometryError> {
    origin.validate()?;
    if points.len() < 3 {
        return Err(GeometryError::TooFewPoints(points.len()));
    }
    let mut projected = Vec::with_capacity(points.len());
    for (i, g) in points.iter().enumerate() {
        g.validate()?;
        let p = g.project(origin);
        if let Some(prev) = projected.last() {
            let d = p.sub(*prev).norm();
            if !(d > 0.0) {
                return Err(GeometryError::DuplicatePoint(i - 1, i));
            }
            if d >= MAX_LATLON_SPACING_M {
                return Err(GeometryError::SpacingTooLarge { index: i - 1, next: i, distance: d });
            }
        }
        projected.push(p);
    }
    Centerline::new(projected, lanes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RoadPoint {
    Xy { x: f64, y: f64 },
    Geo { lat: f64, lon: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoadFile {
    format: String,
    lane_count: usize,
    lane_width_m: f64,
    points: Vec<RoadPoint>,
}

/// Parses a road file. Lat/lon roads are projected around their first point.
/// The result is resampled at [`DEFAULT_DS`].
pub fn parse_road(json: &str) -> Result<Centerline, GeometryError> {
    parse_road_raw(json)?.resample(DEFAULT_DS)
}

/// Parses a road file without resampling.
pub fn parse_road_raw(json: &str) -> Result<Centerline, GeometryError> {
    let file: RoadFile =
        serde_json::from_str(json).map_err(|e| GeometryError::RoadFile(e.to_string()))?;
    if file.format != ROAD_FORMAT {
        return Err(GeometryError::RoadFile(format!(
            "unsupported format {:?}, expected {ROAD_FORMAT:?}",
            file.format
        )));
    }
    let lanes = LaneLayout::new(file.lane_count, file.lane_width_m)?;
    let xy: Vec<Point2> = file
        .points
        .iter()
        .filter_map(|p| match p {
            RoadPoint::Xy { x, y } => Some(Point2::new(*x, *y)),
            RoadPoint::Geo { .. } => None,
        })
        .collect();
    let geo: Vec<GeoPoint> = file
        .points
        .iter()
        .filter_map(|p| match p {
            RoadPoint::Geo { lat, lon } => Some(GeoPoint { lat: *lat, lon: *lon }),
            RoadPoint::Xy { .. } => None,
        })
        .collect();
    match (xy.is_empty(), geo.is_empty()) {
        (false, false) => Err(GeometryError::RoadFile("mixed x/y and lat/lon points".into())),
        (true, true) => Err(GeometryError::TooFewPoints(0)),
        (false, true) => Centerline::new(xy, lanes),
        (true, false) => import_latlon(&geo, &geo[0], lanes),
    }
}

pub fn road_to_json(c: &Centerline) -> String {
    let file = RoadFile {
        format: ROAD_FORMAT.to_string(),
        lane_count: c.lanes.count,
        lane_width_m: c.lanes.width,
        points: c.points.iter().map(|p| RoadPoint::Xy { x: p.x, y: p.y }).collect(),
    };
    serde_json::to_string_pretty(&file).expect("road serializes")
}

pub fn load_road(path: &Path) -> Result<Centerline, GeometryError> {
    let text = fs::read_to_string(path)
        .map_err(|e| GeometryError::RoadFile(format!("{}: {e}", path.display())))?;
    parse_road(&text)
}

pub fn save_road(c: &Centerline, path: &Path) -> Result<(), GeometryError> {
    fs::write(path, road_to_json(c))
        .map_err(|e| GeometryError::RoadFile(format!("{}: {e}", path.display())))
}
