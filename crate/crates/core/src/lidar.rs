//! Cone detection from 3-D point clouds.
//!
//! Two clustering stages: a coarse 2-D occupancy grid whose 8-connected
//! components give regions of interest, then single-linkage Euclidean
//! clustering inside each region. Surviving clusters are screened against
//! cone geometry and turned into range-bearing observations.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{Read, Write};

use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::wrap;

pub type Point3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub t: f64,
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(t: f64, points: Vec<Point3>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("point coordinate"));
        }
        Ok(PointCloud { t, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Writes `x,y,z` lines.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for p in &self.points {
            wr.serialize((p.x, p.y, p.z))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(t: f64, r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut points = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let parsed: std::result::Result<Vec<f64>, _> =
                rec.iter().map(|f| f.trim().parse::<f64>()).collect();
            match parsed {
                Ok(v) if v.len() == 3 => points.push(Point3::new(v[0], v[1], v[2])),
                // tolerate a header row
                Err(_) if i == 0 => continue,
                _ => return Err(Error::invalid("cloud csv", format!("bad record {}", i + 1))),
            }
        }
        PointCloud::new(t, points)
    }
}

pub type Cell = (i64, i64);

/// A stage-one region of interest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roi {
    /// Indices into the source cloud, ascending.
    pub indices: Vec<usize>,
    /// Occupied grid cells, ascending.
    pub cells: Vec<Cell>,
}

/// A stage-two cluster: ascending indices into the source cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeObservation {
    pub t: f64,
    pub range: f64,
    pub bearing: f64,
    /// Range/bearing noise covariance.
    pub r: Matrix2<f64>,
    pub support: usize,
}

impl ConeObservation {
    pub fn new(t: f64, range: f64, bearing: f64, sigma_range: f64, sigma_bearing: f64) -> Self {
        ConeObservation {
            t,
            range,
            bearing: wrap(bearing),
            r: Matrix2::new(sigma_range * sigma_range, 0.0, 0.0, sigma_bearing * sigma_bearing),
            support: 0,
        }
    }

    pub fn z(&self) -> nalgebra::Vector2<f64> {
        nalgebra::Vector2::new(self.range, self.bearing)
    }
}

/// Acceptance bounds for a cluster to count as a cone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeGeometryBounds {
    pub n_min: usize,
    pub n_max: usize,
    /// Largest horizontal point-to-point distance, m.
    pub e_xy: f64,
    /// Largest vertical spread, m.
    pub e_z: f64,
}

impl Default for ConeGeometryBounds {
    fn default() -> Self {
        ConeGeometryBounds { n_min: 3, n_max: 200, e_xy: 0.40, e_z: 0.50 }
    }
}

/// σ_r(range) = sigma_range0 + sigma_range_slope · range; σ_b constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationNoise {
    pub sigma_range0: f64,
    pub sigma_range_slope: f64,
    pub sigma_bearing: f64,
}

impl Default for ObservationNoise {
    fn default() -> Self {
        ObservationNoise { sigma_range0: 0.05, sigma_range_slope: 0.01, sigma_bearing: 0.0175 }
    }
}

impl ObservationNoise {
    pub fn sigma_range(&self, range: f64) -> f64 {
        self.sigma_range0 + self.sigma_range_slope * range
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub z_min: f64,
    pub z_max: f64,
    pub cell: f64,
    pub min_pts: usize,
    pub link_dist: f64,
    pub geometry: ConeGeometryBounds,
    pub noise: ObservationNoise,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            z_min: 0.05,
            z_max: 0.50,
            cell: 0.25,
            min_pts: 2,
            link_dist: 0.10,
            geometry: ConeGeometryBounds::default(),
            noise: ObservationNoise::default(),
        }
    }
}

/// Keeps the points with z ∈ [z_min, z_max], in order.
pub fn remove_ground(cloud: &PointCloud, z_min: f64, z_max: f64) -> Result<PointCloud> {
    if !(z_min < z_max) {
        return Err(Error::invalid("z band", format!("z_min {z_min} must be < z_max {z_max}")));
    }
    Ok(PointCloud {
        t: cloud.t,
        points: cloud
            .points
            .iter()
            .filter(|p| p.z >= z_min && p.z <= z_max)
            .copied()
            .collect(),
    })
}

pub fn cell_of(p: &Point3, cell: f64) -> Cell {
    ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
}

/// Stage one: occupancy grid of pitch `cell`, cells with at least `min_pts`
/// points are occupied, ROIs are 8-connected components of occupied cells.
/// Points in unoccupied cells are discarded.
pub fn coarse_cluster(cloud: &PointCloud, cell: f64, min_pts: usize) -> Result<Vec<Roi>> {
    if !(cell > 0.0) {
        return Err(Error::invalid("cell", format!("{cell} must be positive")));
    }
    let mut grid: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        grid.entry(cell_of(p, cell)).or_default().push(i);
    }
    let occupied: BTreeSet<Cell> = grid
        .iter()
        .filter(|(_, pts)| pts.len() >= min_pts.max(1))
        .map(|(c, _)| *c)
        .collect();

    let mut seen: BTreeSet<Cell> = BTreeSet::new();
    let mut rois = Vec::new();
    for &start in &occupied {
        if !seen.insert(start) {
            continue;
        }
        let mut cells = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some((cx, cy)) = queue.pop_front() {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let n = (cx + dx, cy + dy);
                    if occupied.contains(&n) && seen.insert(n) {
                        cells.push(n);
                        queue.push_back(n);
                    }
                }
            }
        }
        cells.sort_unstable();
        let mut indices: Vec<usize> = cells.iter().flat_map(|c| grid[c].iter().copied()).collect();
        indices.sort_unstable();
        rois.push(Roi { indices, cells });
    }
    Ok(rois)
}

/// Stage two: single-linkage clustering in 3-D within each ROI.
pub fn refine_clusters(cloud: &PointCloud, rois: &[Roi], link_dist: f64) -> Result<Vec<Cluster>> {
    if !(link_dist > 0.0) {
        return Err(Error::invalid("link_dist", format!("{link_dist} must be positive")));
    }
    let per_roi: Vec<Vec<Cluster>> = rois
        .par_iter()
        .map(|roi| single_linkage(&cloud.points, &roi.indices, link_dist))
        .collect();
    Ok(per_roi.into_iter().flatten().collect())
}

fn single_linkage(points: &[Point3], indices: &[usize], link_dist: f64) -> Vec<Cluster> {
    let n = indices.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let l2 = link_dist * link_dist;
    for a in 0..n {
        for b in (a + 1)..n {
            if (points[indices[a]] - points[indices[b]]).norm_squared() <= l2 {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &idx) in indices.iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(idx);
    }
    // roots are the smallest local index, so BTreeMap order = order of first member
    groups.into_values().map(|indices| Cluster { indices }).collect()
}

/// Screens clusters against cone geometry and converts survivors to
/// range-bearing observations of their horizontal centroid.
pub fn filter_cones(
    cloud: &PointCloud,
    clusters: &[Cluster],
    geometry: &ConeGeometryBounds,
    noise: &ObservationNoise,
) -> Vec<ConeObservation> {
    clusters
        .iter()
        .filter_map(|c| {
            let n = c.indices.len();
            if n < geometry.n_min || n > geometry.n_max {
                return None;
            }
            let pts: Vec<&Point3> = c.indices.iter().map(|&i| &cloud.points[i]).collect();
            let (zmin, zmax) = pts
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.z), hi.max(p.z)));
            if zmax - zmin > geometry.e_z {
                return None;
            }
            let e2 = geometry.e_xy * geometry.e_xy;
            for (i, a) in pts.iter().enumerate() {
                for b in &pts[i + 1..] {
                    let (dx, dy) = (a.x - b.x, a.y - b.y);
                    if dx * dx + dy * dy > e2 {
                        return None;
                    }
                }
            }
            let (sx, sy) = pts.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
            let (cx, cy) = (sx / n as f64, sy / n as f64);
            let range = cx.hypot(cy);
            if !(range > 0.0) {
                return None;
            }
            let mut obs = ConeObservation::new(
                cloud.t,
                range,
                cy.atan2(cx),
                noise.sigma_range(range),
                noise.sigma_bearing,
            );
            obs.support = n;
            Some(obs)
        })
        .collect()
}

/// Full pipeline: ground removal, both clustering stages, cone screening.
pub fn detect_cones(cloud: &PointCloud, cfg: &DetectorConfig) -> Result<Vec<ConeObservation>> {
    let above = remove_ground(cloud, cfg.z_min, cfg.z_max)?;
    let rois = coarse_cluster(&above, cfg.cell, cfg.min_pts)?;
    let clusters = refine_clusters(&above, &rois, cfg.link_dist)?;
    Ok(filter_cones(&above, &clusters, &cfg.geometry, &cfg.noise))
}
