//! Closed cone-marked tracks.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::rng::{stream_id, tags, SeededRng};

/// Centerline resampling pitch, m.
const CENTERLINE_STEP: f64 = 0.5;
const CONTROL_POINTS: usize = 10;
const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    /// Closed polyline; the last vertex repeats the first.
    pub centerline: Vec<Point2>,
    pub width: f64,
    pub left: Vec<Point2>,
    pub right: Vec<Point2>,
    pub length: f64,
    arc: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackParams {
    pub target_length: f64,
    pub width: f64,
    pub cone_spacing: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams { target_length: 300.0, width: 3.5, cone_spacing: 5.0 }
    }
}

/// Seeded smooth closed loop: jittered control points on a circle,
/// periodic Catmull-Rom interpolation, scaled to the requested length and
/// resampled to uniform arc length. Infeasible shapes are redrawn.
pub fn generate_track(seed: u64, target_length: f64, width: f64, cone_spacing: f64) -> Result<Track> {
    if !(target_length.is_finite() && target_length / TAU >= 1.1 * min_turn_radius(width)) {
        return Err(Error::invalid("length", format!("{target_length} too short for width {width}")));
    }
    if !(width > 0.0) {
        return Err(Error::invalid("width", format!("{width} must be positive")));
    }
    if !(cone_spacing > 0.0 && cone_spacing < target_length / 4.0) {
        return Err(Error::invalid("cone_spacing", format!("{cone_spacing} out of range")));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = SeededRng::new(seed, stream_id(tags::TRACK, attempt as u64, 0));
        // later attempts shrink the jitter towards a circle
        let amplitude = 1.0 - attempt as f64 / MAX_ATTEMPTS as f64;
        let centerline = candidate_centerline(&mut rng, target_length, amplitude);
        if let Some(track) = Track::from_centerline(centerline, width, cone_spacing) {
            if track.is_feasible() {
                return Ok(track);
            }
        }
    }
    Err(Error::TrackGeneration { attempts: MAX_ATTEMPTS })
}

/// Tightest centerline turn radius a track of this width may have.
pub fn min_turn_radius(width: f64) -> f64 {
    (4.0 * width).max(14.0)
}

fn candidate_centerline(rng: &mut SeededRng, target_length: f64, amplitude: f64) -> Vec<Point2> {
    let base = target_length / TAU;
    let k = CONTROL_POINTS;
    let ctrl: Vec<Point2> = (0..k)
        .map(|i| {
            let a = TAU * (i as f64 + 0.3 * amplitude * (rng.uniform() - 0.5)) / k as f64;
            let r = base * (1.0 + 0.4 * amplitude * (rng.uniform() - 0.5));
            Point2::new(r * a.cos(), r * a.sin())
        })
        .collect();

    let per_seg = 60;
    let mut dense = Vec::with_capacity(k * per_seg + 1);
    for i in 0..k {
        let p0 = ctrl[(i + k - 1) % k];
        let p1 = ctrl[i];
        let p2 = ctrl[(i + 1) % k];
        let p3 = ctrl[(i + 2) % k];
        for j in 0..per_seg {
            let t = j as f64 / per_seg as f64;
            dense.push(catmull_rom(&p0, &p1, &p2, &p3, t));
        }
    }
    dense.push(dense[0]);

    let len = polyline_length(&dense);
    let scale = target_length / len;
    for p in dense.iter_mut() {
        *p *= scale;
    }
    let n = (target_length / CENTERLINE_STEP).round() as usize;
    let mut out = resample_closed(&dense, n);
    // start the lap on the first vertex, heading along +x of the loop
    out.push(out[0]);
    out
}

fn catmull_rom(p0: &Point2, p1: &Point2, p2: &Point2, p3: &Point2, t: f64) -> Point2 {
    let t2 = t * t;
    let t3 = t2 * t;
    (p1 * 2.0 + (p2 - p0) * t + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * t2 + (p1 * 3.0 - p0 - p2 * 3.0 + p3) * t3)
        * 0.5
}

pub(crate) fn polyline_length(pts: &[Point2]) -> f64 {
    pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

fn cumulative_arc(pts: &[Point2]) -> Vec<f64> {
    let mut arc = Vec::with_capacity(pts.len());
    let mut s = 0.0;
    arc.push(0.0);
    for w in pts.windows(2) {
        s += (w[1] - w[0]).norm();
        arc.push(s);
    }
    arc
}

/// `n` points at uniform arc spacing along a closed polyline (last = first).
fn resample_closed(pts: &[Point2], n: usize) -> Vec<Point2> {
    let arc = cumulative_arc(pts);
    let total = *arc.last().unwrap();
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let s = total * i as f64 / n as f64;
        while seg + 1 < arc.len() - 1 && arc[seg + 1] < s {
            seg += 1;
        }
        let span = arc[seg + 1] - arc[seg];
        let u = if span > 0.0 { (s - arc[seg]) / span } else { 0.0 };
        out.push(pts[seg] + (pts[seg + 1] - pts[seg]) * u);
    }
    out
}

impl Track {
    /// Builds a track from a closed centerline, placing cones on both
    /// boundaries at uniform spacing no larger than `cone_spacing`.
    pub fn from_centerline(centerline: Vec<Point2>, width: f64, cone_spacing: f64) -> Option<Track> {
        if centerline.len() < 4 || (centerline[0] - centerline[centerline.len() - 1]).norm() > 1e-9 {
            return None;
        }
        let arc = cumulative_arc(&centerline);
        let length = *arc.last()?;
        let mut track = Track { centerline, width, left: Vec::new(), right: Vec::new(), length, arc };
        let left = track.offset_polyline(width / 2.0);
        let right = track.offset_polyline(-width / 2.0);
        // same count on both sides, spaced by each boundary's own arc length
        let count = (polyline_length(&left).max(polyline_length(&right)) / cone_spacing).ceil() as usize;
        track.left = resample_closed(&left, count);
        track.right = resample_closed(&right, count);
        Some(track)
    }

    /// The closed centerline shifted sideways by `offset` (left positive).
    fn offset_polyline(&self, offset: f64) -> Vec<Point2> {
        self.centerline
            .iter()
            .zip(&self.arc)
            .map(|(c, s)| c + self.normal_at(*s) * offset)
            .collect()
    }

    pub fn cones(&self) -> impl Iterator<Item = &Point2> {
        self.left.iter().chain(self.right.iter())
    }

    pub fn cone_count(&self) -> usize {
        self.left.len() + self.right.len()
    }

    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = s.rem_euclid(self.length);
        let i = match self.arc.binary_search_by(|a| a.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.arc.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.arc.len() - 2),
        };
        let span = self.arc[i + 1] - self.arc[i];
        let u = if span > 0.0 { (s - self.arc[i]) / span } else { 0.0 };
        (i, u)
    }

    pub fn point_at(&self, s: f64) -> Point2 {
        let (i, u) = self.segment_at(s);
        self.centerline[i] + (self.centerline[i + 1] - self.centerline[i]) * u
    }

    /// Unit tangent at arc length `s`, central-differenced over neighbouring vertices.
    pub fn tangent_at(&self, s: f64) -> Point2 {
        (self.point_at(s + CENTERLINE_STEP) - self.point_at(s - CENTERLINE_STEP)).normalize()
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let t = self.tangent_at(s);
        t.y.atan2(t.x)
    }

    /// Left-hand unit normal.
    pub fn normal_at(&self, s: f64) -> Point2 {
        let t = self.tangent_at(s);
        Point2::new(-t.y, t.x)
    }

    /// Arc length of the closest centerline point and the signed lateral
    /// offset (positive left).
    pub fn project(&self, p: &Point2) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..self.centerline.len() - 1 {
            let a = self.centerline[i];
            let ab = self.centerline[i + 1] - a;
            let len2 = ab.norm_squared();
            let u = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let q = a + ab * u;
            let d2 = (p - q).norm_squared();
            if d2 < best.0 {
                let cross = ab.x * (p.y - a.y) - ab.y * (p.x - a.x);
                best = (d2, self.arc[i] + u * (self.arc[i + 1] - self.arc[i]), cross.signum() * d2.sqrt());
            }
        }
        (best.1.rem_euclid(self.length), best.2)
    }

    /// Minimum distance from `p` to the polyline offset by `offset` (left positive).
    pub fn distance_to_boundary(&self, p: &Point2, offset: f64) -> f64 {
        self.offset_polyline(offset)
            .windows(2)
            .map(|w| point_segment_distance(p, &w[0], &w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Curvature bound and separation of non-neighbouring track parts.
    pub fn is_feasible(&self) -> bool {
        let n = self.centerline.len() - 1;
        let min_radius = min_turn_radius(self.width);
        for i in 0..n {
            let a = self.centerline[(i + n - 1) % n];
            let b = self.centerline[i];
            let c = self.centerline[(i + 1) % n];
            let k = menger_curvature(&a, &b, &c);
            if k > 1.0 / min_radius {
                return false;
            }
        }
        // parts of the loop further apart in arc than this must stay apart in space
        let min_gap = 2.0 * self.width + 4.0;
        let arc_window = min_gap * std::f64::consts::PI;
        let step = 4;
        for i in (0..n).step_by(step) {
            for j in (i + step..n).step_by(step) {
                let ds = (self.arc[j] - self.arc[i]).min(self.length - (self.arc[j] - self.arc[i]));
                if ds > arc_window && (self.centerline[i] - self.centerline[j]).norm() < min_gap {
                    return false;
                }
            }
        }
        true
    }

    /// Writes `side,x,y` rows (`center`, `left`, `right`) under a header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["side", "x", "y"])?;
        for p in &self.centerline {
            wr.serialize(("center", p.x, p.y))?;
        }
        for p in &self.left {
            wr.serialize(("left", p.x, p.y))?;
        }
        for p in &self.right {
            wr.serialize(("right", p.x, p.y))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Track> {
        let mut rd = csv::Reader::from_reader(r);
        let (mut center, mut left, mut right) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rd.deserialize::<(String, f64, f64)>() {
            let (side, x, y) = rec?;
            let p = Point2::new(x, y);
            match side.as_str() {
                "center" => center.push(p),
                "left" => left.push(p),
                "right" => right.push(p),
                other => return Err(Error::invalid("track csv", format!("unknown side `{other}`"))),
            }
        }
        if center.len() < 4 {
            return Err(Error::invalid("track csv", "centerline needs at least 4 vertices"));
        }
        // the format carries no width; twice the mean cone offset recovers it
        let offset = |p: &Point2| {
            center
                .windows(2)
                .map(|w| point_segment_distance(p, &w[0], &w[1]))
                .fold(f64::INFINITY, f64::min)
        };
        let cones = left.len() + right.len();
        let width = if cones > 0 {
            2.0 * left.iter().chain(&right).map(offset).sum::<f64>() / cones as f64
        } else {
            0.0
        };
        let arc = cumulative_arc(&center);
        let length = *arc.last().unwrap();
        Ok(Track { centerline: center, width, left, right, length, arc })
    }
}

fn menger_curvature(a: &Point2, b: &Point2, c: &Point2) -> f64 {
    let ab = b - a;
    let bc = c - b;
    let ca = a - c;
    let cross = (ab.x * bc.y - ab.y * bc.x).abs();
    let denom = ab.norm() * bc.norm() * ca.norm();
    if denom > 0.0 {
        2.0 * cross / denom
    } else {
        0.0
    }
}

pub(crate) fn point_segment_distance(p: &Point2, a: &Point2, b: &Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let u = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * u)).norm()
}
