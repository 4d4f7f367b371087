//! Geodesic math, location metrics, the offline spatial labeler, and
//! GeoJSON import/export.
//!
//! The labeler replaces an online reverse-geocoding service: region
//! polygons come from a GeoJSON `FeatureCollection` whose features carry
//! a `label` property, and coordinates are matched by containment.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Mean Earth radius in miles.
pub const EARTH_RADIUS_MILES: f64 = 3958.8;

/// Tolerance (degrees) inside which a point counts as on a polygon boundary.
const BOUNDARY_EPS: f64 = 1e-9;

/// A longitude/latitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Self {
        GeoPoint { lon, lat }
    }
}

/// A polygon as an outer ring plus optional holes, rings closed
/// (first vertex repeated last).
#[derive(Debug, Clone)]
pub struct Polygon {
    pub outer: Vec<GeoPoint>,
    pub holes: Vec<Vec<GeoPoint>>,
}

/// A labeled set of region polygons; overlaps resolve by file order.
#[derive(Debug, Clone)]
pub struct RegionSet {
    pub kind: RegionKind,
    pub regions: Vec<(String, Polygon)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Zipcode,
    Neighborhood,
}

/// One prediction paired with its ground truth, when known.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_point: Option<GeoPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_point: Option<GeoPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_label: Option<String>,
    /// Probability of the predicted label (classification only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    /// Full label distribution in label-set order (classification only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub entries: Vec<Prediction>,
}

/// Mean Euclidean distance between paired 2-vectors.
///
/// This is the scalar (non-autodiff) form of the regression loss; the
/// differentiable version lives on the tensor graph.
pub fn pairwise_loss(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "pairwise_loss batch {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, q)| {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            (dx * dx + dy * dy).sqrt()
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Great-circle distance in miles on a spherical Earth.
pub fn haversine_miles(p: GeoPoint, q: GeoPoint) -> f64 {
    let lat1 = p.lat.to_radians();
    let lat2 = q.lat.to_radians();
    let dlat = (q.lat - p.lat).to_radians();
    let dlon = (q.lon - p.lon).to_radians();
    let a = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MILES * a.sqrt().min(1.0).asin()
}

/// Fraction of predictions within `d_miles` great-circle miles of truth.
pub fn acc_at(preds: &PredictionSet, d_miles: f64) -> Result<f64> {
    let pairs: Vec<(GeoPoint, GeoPoint)> = preds
        .entries
        .iter()
        .filter_map(|e| match (e.pred_point, e.truth_point) {
            (Some(p), Some(t)) => Some((p, t)),
            _ => None,
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("acc_at on empty prediction set"));
    }
    let hits = pairs
        .iter()
        .filter(|(p, t)| haversine_miles(*p, *t) <= d_miles)
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean great-circle error in miles over predictions with both points.
pub fn mean_error_miles(preds: &PredictionSet) -> Result<f64> {
    let dists: Vec<f64> = preds
        .entries
        .iter()
        .filter_map(|e| match (e.pred_point, e.truth_point) {
            (Some(p), Some(t)) => Some(haversine_miles(p, t)),
            _ => None,
        })
        .collect();
    if dists.is_empty() {
        return Err(Error::invalid("mean_error_miles on empty prediction set"));
    }
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

fn point_segment_dist(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> f64 {
    let abx = b.lon - a.lon;
    let aby = b.lat - a.lat;
    let apx = p.lon - a.lon;
    let apy = p.lat - a.lat;
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    };
    let dx = apx - t * abx;
    let dy = apy - t * aby;
    (dx * dx + dy * dy).sqrt()
}

fn on_ring_boundary(p: GeoPoint, ring: &[GeoPoint]) -> bool {
    ring.windows(2)
        .any(|w| point_segment_dist(p, w[0], w[1]) <= BOUNDARY_EPS)
}

/// Even-odd ray crossing test against a single closed ring.
fn ray_crossings(p: GeoPoint, ring: &[GeoPoint]) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
            if x > p.lon {
                inside = !inside;
            }
        }
    }
    inside
}

/// Containment test in the lon/lat plane; boundary points count as
/// inside the outer ring and outside any hole they bound.
pub fn point_in_polygon(p: GeoPoint, poly: &Polygon) -> bool {
    if on_ring_boundary(p, &poly.outer) {
        return true;
    }
    if !ray_crossings(p, &poly.outer) {
        return false;
    }
    for hole in &poly.holes {
        if on_ring_boundary(p, hole) {
            return true;
        }
        if ray_crossings(p, hole) {
            return false;
        }
    }
    true
}

/// First containing region in file order, or `None` when outside all.
pub fn assign_region(p: GeoPoint, regions: &RegionSet) -> Option<&str> {
    regions
        .regions
        .iter()
        .find(|(_, poly)| point_in_polygon(p, poly))
        .map(|(label, _)| label.as_str())
}

// -- GeoJSON ---------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GjFeatureCollection {
    #[serde(rename = "type")]
    kind: String,
    features: Vec<GjFeature>,
}

#[derive(Serialize, Deserialize)]
struct GjFeature {
    #[serde(rename = "type")]
    kind: String,
    properties: serde_json::Map<String, serde_json::Value>,
    geometry: GjGeometry,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum GjGeometry {
    Polygon { coordinates: Vec<Vec<[f64; 2]>> },
    Point { coordinates: [f64; 2] },
    LineString { coordinates: Vec<[f64; 2]> },
}

fn ring_from_coords(coords: &[[f64; 2]], feature: usize) -> Result<Vec<GeoPoint>> {
    let ring: Vec<GeoPoint> = coords.iter().map(|c| GeoPoint::new(c[0], c[1])).collect();
    if ring.len() < 4 || ring.first() != ring.last() {
        return Err(Error::invalid(format!(
            "feature {feature}: ring must be closed with at least 4 vertices"
        )));
    }
    if ring_self_intersects(&ring) {
        return Err(Error::invalid(format!(
            "feature {feature}: ring self-intersects"
        )));
    }
    Ok(ring)
}

fn segments_properly_intersect(a: GeoPoint, b: GeoPoint, c: GeoPoint, d: GeoPoint) -> bool {
    let cross = |o: GeoPoint, p: GeoPoint, q: GeoPoint| {
        (p.lon - o.lon) * (q.lat - o.lat) - (p.lat - o.lat) * (q.lon - o.lon)
    };
    let d1 = cross(a, b, c);
    let d2 = cross(a, b, d);
    let d3 = cross(c, d, a);
    let d4 = cross(c, d, b);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

fn ring_self_intersects(ring: &[GeoPoint]) -> bool {
    let n = ring.len() - 1; // closed: last repeats first
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue; // adjacent through the wrap
            }
            if segments_properly_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return true;
            }
        }
    }
    false
}

/// Load a labeled region set from a GeoJSON `FeatureCollection`.
pub fn load_regions(path: &Path, kind: RegionKind) -> Result<RegionSet> {
    let text = std::fs::read_to_string(path)?;
    let fc: GjFeatureCollection =
        serde_json::from_str(&text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    let mut regions = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, f) in fc.features.iter().enumerate() {
        let label = f
            .properties
            .get("label")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::invalid(format!("feature {i}: missing `label` property")))?
            .to_string();
        if !seen.insert(label.clone()) {
            return Err(Error::invalid(format!("duplicate region label `{label}`")));
        }
        let GjGeometry::Polygon { coordinates } = &f.geometry else {
            return Err(Error::invalid(format!("feature {i}: expected Polygon")));
        };
        if coordinates.is_empty() {
            return Err(Error::invalid(format!("feature {i}: empty polygon")));
        }
        let outer = ring_from_coords(&coordinates[0], i)?;
        let holes = coordinates[1..]
            .iter()
            .map(|c| ring_from_coords(c, i))
            .collect::<Result<Vec<_>>>()?;
        regions.push((label, Polygon { outer, holes }));
    }
    Ok(RegionSet { kind, regions })
}

/// Write a labeled region set as a GeoJSON `FeatureCollection`.
pub fn export_regions(regions: &RegionSet, path: &Path) -> Result<()> {
    let features = regions
        .regions
        .iter()
        .map(|(label, poly)| {
            let mut props = serde_json::Map::new();
            props.insert("label".into(), serde_json::Value::String(label.clone()));
            let mut coords = vec![poly.outer.iter().map(|p| [p.lon, p.lat]).collect()];
            for h in &poly.holes {
                coords.push(h.iter().map(|p| [p.lon, p.lat]).collect());
            }
            GjFeature {
                kind: "Feature".into(),
                properties: props,
                geometry: GjGeometry::Polygon {
                    coordinates: coords,
                },
            }
        })
        .collect();
    write_feature_collection(features, path)
}

/// Export predicted/truth point pairs and connecting lines as GeoJSON.
pub fn export_geojson(preds: &PredictionSet, path: &Path) -> Result<()> {
    let mut features = Vec::new();
    for e in &preds.entries {
        let (Some(p), Some(t)) = (e.pred_point, e.truth_point) else {
            continue;
        };
        for (role, pt) in [("predicted", p), ("truth", t)] {
            let mut props = serde_json::Map::new();
            props.insert("id".into(), serde_json::Value::String(e.id.clone()));
            props.insert("role".into(), serde_json::Value::String(role.into()));
            features.push(GjFeature {
                kind: "Feature".into(),
                properties: props,
                geometry: GjGeometry::Point {
                    coordinates: [pt.lon, pt.lat],
                },
            });
        }
        let mut props = serde_json::Map::new();
        props.insert("id".into(), serde_json::Value::String(e.id.clone()));
        features.push(GjFeature {
            kind: "Feature".into(),
            properties: props,
            geometry: GjGeometry::LineString {
                coordinates: vec![[p.lon, p.lat], [t.lon, t.lat]],
            },
        });
    }
    write_feature_collection(features, path)
}

fn write_feature_collection(features: Vec<GjFeature>, path: &Path) -> Result<()> {
    let fc = GjFeatureCollection {
        kind: "FeatureCollection".into(),
        features,
    };
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, &fc).map_err(|e| Error::invalid(e.to_string()))?;
    file.write_all(b"\n")?;
    Ok(())
}
