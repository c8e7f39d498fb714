//! Grid tours over a city-scale rectangle and per-tile pixel/geographic
//! transforms.
//!
//! Each tile uses a local equirectangular model anchored at its own center:
//! one meter of northing is `1 / 111320` degrees of latitude and one meter of
//! easting is `1 / (111320 * cos(center_lat))` degrees of longitude. Pixel
//! `y` grows southward.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Meters per degree of latitude in the local model.
pub const METERS_PER_DEGREE: f64 = 111_320.0;

/// Relative slack used when counting tiles so that areas which are an exact
/// multiple of the stride do not pick up a spurious extra row or column.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoPoint {
    /// Builds a point, normalizing longitude into `[-180, 180)`.
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !lat_deg.is_finite() || !lon_deg.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite coordinate ({lat_deg}, {lon_deg})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(Error::InvalidArgument(format!(
                "latitude {lat_deg} outside [-90, 90]"
            )));
        }
        Ok(Self {
            lat_deg,
            lon_deg: normalize_lon(lon_deg),
        })
    }
}

fn normalize_lon(lon: f64) -> f64 {
    if (-180.0..180.0).contains(&lon) {
        lon
    } else {
        (lon + 180.0).rem_euclid(360.0) - 180.0
    }
}

/// Axis-aligned latitude/longitude rectangle. Antimeridian crossing is not
/// supported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRect {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

impl GeoRect {
    pub fn new(south: f64, west: f64, north: f64, east: f64) -> Result<Self> {
        let rect = Self {
            south,
            west,
            north,
            east,
        };
        rect.validate()?;
        Ok(rect)
    }

    /// Rectangle of the given metric extent whose north-west corner is `nw`.
    ///
    /// The longitude extent is converted at the rectangle's mid latitude.
    pub fn from_corner_extent(nw: GeoPoint, width_m: f64, height_m: f64) -> Result<Self> {
        if !(width_m > 0.0 && height_m > 0.0) {
            return Err(Error::InvalidArea(format!(
                "extent must be positive, got {width_m} x {height_m} m"
            )));
        }
        let south = nw.lat_deg - height_m / METERS_PER_DEGREE;
        let mid_lat = 0.5 * (south + nw.lat_deg);
        let east = nw.lon_deg + width_m / (METERS_PER_DEGREE * mid_lat.to_radians().cos());
        Self::new(south, nw.lon_deg, nw.lat_deg, east)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.south, self.west, self.north, self.east];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArea("non-finite bound".into()));
        }
        if self.south < -90.0 || self.north > 90.0 {
            return Err(Error::InvalidArea("latitude out of range".into()));
        }
        if self.west < -180.0 || self.east > 180.0 {
            return Err(Error::InvalidArea("longitude out of range".into()));
        }
        if self.south >= self.north {
            return Err(Error::InvalidArea(format!(
                "south {} must be below north {}",
                self.south, self.north
            )));
        }
        if self.west >= self.east {
            return Err(Error::InvalidArea(format!(
                "west {} must be below east {}",
                self.west, self.east
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.south..=self.north).contains(&p.lat_deg) && (self.west..=self.east).contains(&p.lon_deg)
    }

    /// North-south extent in meters.
    pub fn height_m(&self) -> f64 {
        (self.north - self.south) * METERS_PER_DEGREE
    }

    /// East-west extent in meters measured at latitude `lat_deg`.
    pub fn width_m_at(&self, lat_deg: f64) -> f64 {
        (self.east - self.west) * METERS_PER_DEGREE * lat_deg.to_radians().cos()
    }
}

/// Capture geometry shared by every tile of a tour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub width_px: u32,
    pub height_px: u32,
    pub gsd_m_per_px: f64,
    pub overlap_fraction: f64,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            width_px: 416,
            height_px: 416,
            gsd_m_per_px: 0.3,
            overlap_fraction: 0.2,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::InvalidTileSpec("tile dimensions must be >= 1 px".into()));
        }
        if !(self.gsd_m_per_px > 0.0 && self.gsd_m_per_px.is_finite()) {
            return Err(Error::InvalidTileSpec(format!(
                "gsd must be positive, got {}",
                self.gsd_m_per_px
            )));
        }
        if !(0.0..=0.9).contains(&self.overlap_fraction) {
            return Err(Error::InvalidTileSpec(format!(
                "overlap {} outside [0, 0.9]",
                self.overlap_fraction
            )));
        }
        Ok(())
    }

    /// Ground footprint `(width_m, height_m)`.
    pub fn footprint_m(&self) -> (f64, f64) {
        (
            self.width_px as f64 * self.gsd_m_per_px,
            self.height_px as f64 * self.gsd_m_per_px,
        )
    }

    /// Distance between adjacent tile centers `(east_m, south_m)`.
    pub fn stride_m(&self) -> (f64, f64) {
        let (w, h) = self.footprint_m();
        let keep = 1.0 - self.overlap_fraction;
        (w * keep, h * keep)
    }
}

/// One planned capture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileJob {
    pub row: u32,
    pub col: u32,
    pub center: GeoPoint,
    pub footprint_m: (f64, f64),
    pub spec: TileSpec,
}

/// Fractional pixel position returned by [`geo_to_pixel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPos {
    pub x: f64,
    pub y: f64,
    /// Set when the point lies outside the tile but within one footprint of it.
    pub outside_tile: bool,
}

impl TileJob {
    pub fn new(row: u32, col: u32, center: GeoPoint, spec: TileSpec) -> Self {
        Self {
            row,
            col,
            center,
            footprint_m: spec.footprint_m(),
            spec,
        }
    }

    fn meters_per_degree_lon(&self) -> f64 {
        METERS_PER_DEGREE * self.center.lat_deg.to_radians().cos()
    }

    /// Whether `p` falls inside this tile's footprint (boundary inclusive).
    pub fn contains(&self, p: GeoPoint) -> bool {
        let north_m = (p.lat_deg - self.center.lat_deg) * METERS_PER_DEGREE;
        let east_m = (p.lon_deg - self.center.lon_deg) * self.meters_per_degree_lon();
        let (w, h) = self.footprint_m;
        let tol = 1e-9 * w.max(h);
        east_m.abs() <= 0.5 * w + tol && north_m.abs() <= 0.5 * h + tol
    }
}

/// Number of tiles needed along one axis.
fn axis_count(extent_m: f64, footprint_m: f64, stride_m: f64) -> u32 {
    if extent_m <= footprint_m {
        return 1;
    }
    let steps = (extent_m - footprint_m) / stride_m;
    (steps - COUNT_SLACK * steps.max(1.0)).ceil() as u32 + 1
}

/// Plans a row-major tour whose first tile's north-west corner sits on the
/// area's north-west corner. The last row and column may extend past the
/// south and east edges.
pub fn plan_grid(area: &GeoRect, spec: &TileSpec) -> Result<Vec<TileJob>> {
    area.validate()?;
    spec.validate()?;
    let (fp_w, fp_h) = spec.footprint_m();
    let (stride_w, stride_h) = spec.stride_m();

    let rows = axis_count(area.height_m(), fp_h, stride_h);
    let row_lat = |row: u32| {
        let south_m = 0.5 * fp_h + row as f64 * stride_h;
        area.north - south_m / METERS_PER_DEGREE
    };
    // Longitude degrees per meter vary by row; size every row for the widest one.
    let cols = (0..rows)
        .map(|r| axis_count(area.width_m_at(row_lat(r)), fp_w, stride_w))
        .max()
        .unwrap_or(1);

    let mut jobs = Vec::with_capacity(rows as usize * cols as usize);
    for row in 0..rows {
        let lat = row_lat(row);
        let m_per_deg_lon = METERS_PER_DEGREE * lat.to_radians().cos();
        for col in 0..cols {
            let east_m = 0.5 * fp_w + col as f64 * stride_w;
            let center = GeoPoint::new(lat, area.west + east_m / m_per_deg_lon)?;
            jobs.push(TileJob::new(row, col, center, *spec));
        }
    }
    Ok(jobs)
}

pub fn pixel_to_geo(tile: &TileJob, x: f64, y: f64) -> Result<GeoPoint> {
    let (w, h) = (tile.spec.width_px, tile.spec.height_px);
    if !(0.0..w as f64).contains(&x) || !(0.0..h as f64).contains(&y) {
        return Err(Error::PixelOutOfBounds {
            x,
            y,
            width: w,
            height: h,
        });
    }
    Ok(pixel_to_geo_unchecked(tile, x, y))
}

fn pixel_to_geo_unchecked(tile: &TileJob, x: f64, y: f64) -> GeoPoint {
    let gsd = tile.spec.gsd_m_per_px;
    let east_m = (x - 0.5 * tile.spec.width_px as f64) * gsd;
    let south_m = (y - 0.5 * tile.spec.height_px as f64) * gsd;
    GeoPoint {
        lat_deg: tile.center.lat_deg - south_m / METERS_PER_DEGREE,
        lon_deg: normalize_lon(tile.center.lon_deg + east_m / tile.meters_per_degree_lon()),
    }
}

/// Inverse of [`pixel_to_geo`]. Points up to one footprint beyond the tile are
/// accepted and flagged; anything farther is an error.
pub fn geo_to_pixel(tile: &TileJob, p: GeoPoint) -> Result<PixelPos> {
    let gsd = tile.spec.gsd_m_per_px;
    let (w, h) = (tile.spec.width_px as f64, tile.spec.height_px as f64);
    let mut dlon = p.lon_deg - tile.center.lon_deg;
    if dlon >= 180.0 {
        dlon -= 360.0;
    } else if dlon < -180.0 {
        dlon += 360.0;
    }
    let east_m = dlon * tile.meters_per_degree_lon();
    let south_m = (tile.center.lat_deg - p.lat_deg) * METERS_PER_DEGREE;
    let x = 0.5 * w + east_m / gsd;
    let y = 0.5 * h + south_m / gsd;
    if !(-w..=2.0 * w).contains(&x) || !(-h..=2.0 * h).contains(&y) {
        return Err(Error::PointOutsideTile {
            lat: p.lat_deg,
            lon: p.lon_deg,
        });
    }
    let outside_tile = !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y);
    Ok(PixelPos { x, y, outside_tile })
}

/// One line of a tour file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TourRecord {
    pub row: u32,
    pub col: u32,
    pub center_lat: f64,
    pub center_lon: f64,
    pub width_px: u32,
    pub height_px: u32,
    pub gsd: f64,
}

impl From<&TileJob> for TourRecord {
    fn from(job: &TileJob) -> Self {
        Self {
            row: job.row,
            col: job.col,
            center_lat: job.center.lat_deg,
            center_lon: job.center.lon_deg,
            width_px: job.spec.width_px,
            height_px: job.spec.height_px,
            gsd: job.spec.gsd_m_per_px,
        }
    }
}

impl TourRecord {
    /// Canonical JSON line (no trailing newline); degrees fixed to 9 places.
    pub fn to_line(&self) -> String {
        format!(
            "{{\"row\":{},\"col\":{},\"center_lat\":{:.9},\"center_lon\":{:.9},\"width_px\":{},\"height_px\":{},\"gsd\":{}}}",
            self.row,
            self.col,
            self.center_lat,
            self.center_lon,
            self.width_px,
            self.height_px,
            serde_json::to_string(&self.gsd).unwrap_or_else(|_| self.gsd.to_string()),
        )
    }
}

pub fn write_tour(records: &[TourRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyTour);
    }
    let file = fs::File::create(path).at(path)?;
    let mut out = BufWriter::new(file);
    for rec in records {
        out.write_all(rec.to_line().as_bytes()).at(path)?;
        out.write_all(b"\n").at(path)?;
    }
    out.flush().at(path)
}

/// Writes the tour as JSON Lines in job order.
pub fn export_tour(jobs: &[TileJob], path: &Path) -> Result<()> {
    let records: Vec<TourRecord> = jobs.iter().map(TourRecord::from).collect();
    write_tour(&records, path)
}

pub fn read_tour(path: &Path) -> Result<Vec<TourRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_at(lat: f64, lon: f64, side_m: f64) -> GeoRect {
        GeoRect::from_corner_extent(GeoPoint::new(lat, lon).unwrap(), side_m, side_m).unwrap()
    }

    #[test]
    fn small_area_is_one_tile() {
        let area = square_at(38.56, 68.77, 124.8);
        let jobs = plan_grid(&area, &TileSpec::default()).unwrap();
        assert_eq!(jobs.len(), 1);
        let area = square_at(38.56, 68.77, 50.0);
        assert_eq!(plan_grid(&area, &TileSpec::default()).unwrap().len(), 1);
    }

    #[test]
    fn count_formula_for_8250_m_square() {
        // footprint 124.8 m, stride 99.84 m: ceil(8125.2 / 99.84) + 1 = 82 + 1
        let spec = TileSpec::default();
        assert_eq!(spec.footprint_m(), (124.8, 124.8));
        assert!((spec.stride_m().0 - 99.84).abs() < 1e-12);
        assert_eq!(axis_count(8250.0, 124.8, 99.84), 83);
        let jobs = plan_grid(&square_at(0.0, 0.0, 8250.0), &spec).unwrap();
        assert_eq!(jobs.len(), 83 * 83);
    }

    #[test]
    fn exact_multiple_does_not_add_a_tile() {
        // 124.8 + 2 * 99.84 = 324.48 m needs exactly 3 tiles.
        assert_eq!(axis_count(124.8 + 2.0 * 99.84, 124.8, 99.84), 3);
        assert_eq!(axis_count(124.8 + 2.0 * 99.84 + 0.01, 124.8, 99.84), 4);
    }

    #[test]
    fn zero_overlap_strides_by_footprint() {
        let spec = TileSpec {
            overlap_fraction: 0.0,
            ..TileSpec::default()
        };
        let jobs = plan_grid(&square_at(10.0, 20.0, 500.0), &spec).unwrap();
        let (a, b) = (&jobs[0], &jobs[1]);
        assert_eq!((a.row, a.col, b.row, b.col), (0, 0, 0, 1));
        let east_a = geo_to_pixel(a, b.center).unwrap();
        // b's center sits one full footprint (416 px) east of a's center.
        assert!((east_a.x - 208.0 - 416.0).abs() < 1e-6);
    }

    #[test]
    fn first_tile_touches_north_west_corner() {
        let area = square_at(37.914789, 58.3835, 3000.0);
        let jobs = plan_grid(&area, &TileSpec::default()).unwrap();
        let nw = GeoPoint::new(area.north, area.west).unwrap();
        let px = geo_to_pixel(&jobs[0], nw).unwrap();
        assert!(px.x.abs() < 1e-6 && px.y.abs() < 1e-6, "{px:?}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(GeoRect::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(GeoRect::new(0.0, 1.0, 1.0, 1.0).is_err());
        let area = GeoRect::new(0.0, 0.0, 0.01, 0.01).unwrap();
        for gsd in [0.0, -0.3] {
            let spec = TileSpec {
                gsd_m_per_px: gsd,
                ..TileSpec::default()
            };
            assert!(matches!(plan_grid(&area, &spec), Err(Error::InvalidTileSpec(_))));
        }
    }

    #[test]
    fn center_pixel_maps_to_center() {
        let tile = TileJob::new(0, 0, GeoPoint::new(37.5, 58.25).unwrap(), TileSpec::default());
        let p = pixel_to_geo(&tile, 208.0, 208.0).unwrap();
        assert_eq!(p, tile.center);
        let px = geo_to_pixel(&tile, tile.center).unwrap();
        assert_eq!((px.x, px.y, px.outside_tile), (208.0, 208.0, false));
    }

    #[test]
    fn one_pixel_east_at_equator() {
        let tile = TileJob::new(0, 0, GeoPoint::new(0.0, 10.0).unwrap(), TileSpec::default());
        let p = pixel_to_geo(&tile, 209.0, 208.0).unwrap();
        assert_eq!(p.lat_deg, 0.0);
        assert!((p.lon_deg - (10.0 + 0.3 / 111_320.0)).abs() < 1e-15);
    }

    #[test]
    fn stride_east_is_332_8_px() {
        let tile = TileJob::new(0, 0, GeoPoint::new(0.0, 0.0).unwrap(), TileSpec::default());
        let p = GeoPoint::new(0.0, 99.84 / 111_320.0).unwrap();
        let px = geo_to_pixel(&tile, p).unwrap();
        assert!((px.x - (208.0 + 332.8)).abs() < 1e-6);
        assert!(px.outside_tile);
    }

    #[test]
    fn pixel_bounds_and_far_points() {
        let tile = TileJob::new(0, 0, GeoPoint::new(5.0, 5.0).unwrap(), TileSpec::default());
        assert!(pixel_to_geo(&tile, 416.0, 0.0).is_err());
        assert!(pixel_to_geo(&tile, -0.5, 0.0).is_err());
        let far = GeoPoint::new(5.1, 5.0).unwrap();
        assert!(matches!(geo_to_pixel(&tile, far), Err(Error::PointOutsideTile { .. })));
    }

    #[test]
    fn round_trip_pixel_geo_pixel() {
        let tile = TileJob::new(3, 4, GeoPoint::new(-33.9, 151.2).unwrap(), TileSpec::default());
        for &(x, y) in &[(0.0, 0.0), (415.999, 0.5), (123.25, 400.75), (208.0, 17.0)] {
            let g = pixel_to_geo(&tile, x, y).unwrap();
            let back = geo_to_pixel(&tile, g).unwrap();
            assert!((back.x - x).abs() < 1e-6 && (back.y - y).abs() < 1e-6);
        }
    }

    #[test]
    fn longitude_normalizes() {
        assert_eq!(GeoPoint::new(0.0, 180.0).unwrap().lon_deg, -180.0);
        assert_eq!(GeoPoint::new(0.0, 190.0).unwrap().lon_deg, -170.0);
        assert!(GeoPoint::new(91.0, 0.0).is_err());
    }

    #[test]
    fn tour_line_format() {
        let tile = TileJob::new(0, 1, GeoPoint::new(37.914789, 58.3835).unwrap(), TileSpec::default());
        let line = TourRecord::from(&tile).to_line();
        assert_eq!(
            line,
            "{\"row\":0,\"col\":1,\"center_lat\":37.914789000,\"center_lon\":58.383500000,\"width_px\":416,\"height_px\":416,\"gsd\":0.3}"
        );
    }

    #[test]
    fn empty_tour_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_tour(&[], &dir.path().join("t.jsonl")),
            Err(Error::EmptyTour)
        ));
    }
}
