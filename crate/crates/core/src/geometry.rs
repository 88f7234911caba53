//! Ground-plane geometry: BEV grids, pinhole cameras projecting onto the
//! z = 0 plane, occupancy maps and multi-camera feature pooling.
//!
//! World coordinates are meters with the origin at the grid corner. Cell
//! `(ix, iy)` covers `[ix·s, (ix+1)·s) × [iy·s, (iy+1)·s)` and its center is
//! at `((ix + 0.5)·s, (iy + 0.5)·s)`.

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Result, TrackError};

/// Tolerance on `RᵀR = I` and `det R = 1`.
const ROTATION_TOL: f64 = 1e-9;
/// Below this `|det P₀|` the ground homography is treated as singular.
const SINGULAR_DET: f64 = 1e-12;

/// A location on the ground plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevPoint {
    pub x: f64,
    pub y: f64,
}

impl BevPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &BevPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for BevPoint {
    type Output = BevPoint;
    fn add(self, rhs: BevPoint) -> BevPoint {
        BevPoint::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for BevPoint {
    type Output = BevPoint;
    fn sub(self, rhs: BevPoint) -> BevPoint {
        BevPoint::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// Regular square-cell grid over the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub width_cells: usize,
    pub height_cells: usize,
    pub cell_size: f64,
}

impl BevGrid {
    pub fn new(width_cells: usize, height_cells: usize, cell_size: f64) -> Result<Self> {
        let grid = Self {
            width_cells,
            height_cells,
            cell_size,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_cells == 0 || self.height_cells == 0 {
            return Err(TrackError::InvalidConfig(
                "grid must have at least one cell per side".into(),
            ));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(TrackError::InvalidConfig(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        Ok(())
    }

    /// World extent `(width_m, height_m)`.
    pub fn extent(&self) -> (f64, f64) {
        (
            self.width_cells as f64 * self.cell_size,
            self.height_cells as f64 * self.cell_size,
        )
    }

    pub fn num_cells(&self) -> usize {
        self.width_cells * self.height_cells
    }

    pub fn contains(&self, p: &BevPoint) -> bool {
        let (w, h) = self.extent();
        p.x >= 0.0 && p.y >= 0.0 && p.x < w && p.y < h
    }

    /// Cell index containing `p`, or `None` outside the extent.
    pub fn cell_of(&self, p: &BevPoint) -> Option<(usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let ix = ((p.x / self.cell_size) as usize).min(self.width_cells - 1);
        let iy = ((p.y / self.cell_size) as usize).min(self.height_cells - 1);
        Some((ix, iy))
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> BevPoint {
        BevPoint::new(
            (ix as f64 + 0.5) * self.cell_size,
            (iy as f64 + 0.5) * self.cell_size,
        )
    }

    /// Clamps a point into the half-open extent.
    pub fn clamp(&self, p: BevPoint) -> BevPoint {
        let (w, h) = self.extent();
        let eps = self.cell_size * 1e-6;
        BevPoint::new(p.x.clamp(0.0, w - eps), p.y.clamp(0.0, h - eps))
    }

    pub fn center(&self) -> BevPoint {
        let (w, h) = self.extent();
        BevPoint::new(0.5 * w, 0.5 * h)
    }
}

/// Pinhole camera with intrinsics `A` and extrinsics `[R|T]`.
///
/// `projection` is `A·[R|T]` and `ground_projection` is the same matrix with
/// its third (z) column removed, mapping `(x, y, 1)` on the ground plane to
/// homogeneous pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    projection: Matrix3x4<f64>,
    ground_projection: Matrix3<f64>,
    /// `(height, width)` in pixels.
    image_size: (u32, u32),
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_size: (u32, u32),
    ) -> Result<Self> {
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho_err > ROTATION_TOL || (rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(TrackError::InvalidConfig(format!(
                "rotation is not a proper rotation (orthogonality error {ortho_err:e}, det {})",
                rotation.determinant()
            )));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(TrackError::InvalidConfig("image size must be positive".into()));
        }
        if intrinsics.iter().any(|v| !v.is_finite()) || translation.iter().any(|v| !v.is_finite())
        {
            return Err(TrackError::NonFinite("camera parameters".into()));
        }
        let mut extrinsics = Matrix3x4::zeros();
        extrinsics.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        extrinsics.set_column(3, &translation);
        let projection = intrinsics * extrinsics;
        let ground_projection = Matrix3::from_columns(&[
            projection.column(0).into_owned(),
            projection.column(1).into_owned(),
            projection.column(3).into_owned(),
        ]);
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            projection,
            ground_projection,
            image_size,
        })
    }

    /// Camera at `eye` looking at `target` with square pixels, focal length
    /// `focal_px` and the principal point at the image center. World z is up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        focal_px: f64,
        image_size: (u32, u32),
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| TrackError::InvalidConfig("eye and target coincide".into()))?;
        let up = Vector3::z();
        let right = forward
            .cross(&up)
            .try_normalize(1e-9)
            .ok_or_else(|| TrackError::InvalidConfig("viewing direction parallel to up".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let (h, w) = image_size;
        let intrinsics = Matrix3::new(
            focal_px,
            0.0,
            w as f64 / 2.0,
            0.0,
            focal_px,
            h as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(intrinsics, rotation, translation, image_size)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    pub fn ground_projection(&self) -> &Matrix3<f64> {
        &self.ground_projection
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    /// Optical center in world coordinates, `-Rᵀ·T`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn project_ground_to_pixel(&self, ground: BevPoint) -> Option<(f64, f64)> {
        project_ground_to_pixel(self, ground)
    }

    pub fn pixel_to_ground(&self, pixel: (f64, f64)) -> Result<BevPoint> {
        pixel_to_ground(self, pixel)
    }
}

/// Maps a ground point to pixel coordinates, or `None` when it is behind the
/// camera or falls outside the image.
pub fn project_ground_to_pixel(cam: &CameraModel, ground: BevPoint) -> Option<(f64, f64)> {
    let h = cam.ground_projection * Vector3::new(ground.x, ground.y, 1.0);
    let gamma = h.z;
    if !(gamma > 0.0) {
        return None;
    }
    let (u, v) = (h.x / gamma, h.y / gamma);
    let (height, width) = cam.image_size;
    if u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64 {
        Some((u, v))
    } else {
        None
    }
}

/// Back-projects a pixel onto the ground plane through `P₀⁻¹`.
pub fn pixel_to_ground(cam: &CameraModel, pixel: (f64, f64)) -> Result<BevPoint> {
    let det = cam.ground_projection.determinant();
    if !(det.abs() >= SINGULAR_DET) {
        return Err(TrackError::SingularProjection { det });
    }
    let lu = cam.ground_projection.lu();
    let sol = lu
        .solve(&Vector3::new(pixel.0, pixel.1, 1.0))
        .ok_or(TrackError::SingularProjection { det })?;
    if sol.z == 0.0 {
        return Err(TrackError::SingularProjection { det });
    }
    Ok(BevPoint::new(sol.x / sol.z, sol.y / sol.z))
}

/// On-disk camera description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    /// Row-major 3×3.
    pub intrinsics: [f64; 9],
    /// Row-major 3×3.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// `[height, width]` in pixels.
    pub image_size: [u32; 2],
}

impl From<&CameraModel> for CameraFile {
    fn from(cam: &CameraModel) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[r * 3 + c] = m[(r, c)];
                }
            }
            out
        };
        Self {
            intrinsics: row_major(&cam.intrinsics),
            rotation: row_major(&cam.rotation),
            translation: [cam.translation.x, cam.translation.y, cam.translation.z],
            image_size: [cam.image_size.0, cam.image_size.1],
        }
    }
}

impl TryFrom<&CameraFile> for CameraModel {
    type Error = TrackError;

    fn try_from(file: &CameraFile) -> Result<Self> {
        CameraModel::new(
            Matrix3::from_row_slice(&file.intrinsics),
            Matrix3::from_row_slice(&file.rotation),
            Vector3::from_column_slice(&file.translation),
            (file.image_size[0], file.image_size[1]),
        )
    }
}

impl Serialize for CameraModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CameraFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = CameraFile::deserialize(d)?;
        CameraModel::try_from(&file).map_err(serde::de::Error::custom)
    }
}

pub fn load_camera(path: &Path) -> Result<CameraModel> {
    let text = std::fs::read_to_string(path)?;
    let file: CameraFile = toml::from_str(&text).map_err(|e| TrackError::Parse(e.to_string()))?;
    CameraModel::try_from(&file)
}

pub fn save_camera(cam: &CameraModel, path: &Path) -> Result<()> {
    let text =
        toml::to_string(&CameraFile::from(cam)).map_err(|e| TrackError::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Scalar field over a [`BevGrid`], stored x-major (`values[ix·Y + iy]`).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMap {
    grid: BevGrid,
    values: Vec<f64>,
}

impl OccupancyMap {
    pub fn zeros(grid: BevGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.num_cells()],
        }
    }

    pub fn from_values(grid: BevGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_cells() {
            return Err(TrackError::ShapeMismatch(format!(
                "occupancy map has {} values, grid has {} cells",
                values.len(),
                grid.num_cells()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(TrackError::NonFinite(
                "occupancy values must be finite and non-negative".into(),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[ix * self.grid.height_cells + iy]
    }

    #[inline]
    fn get_mut(&mut self, ix: usize, iy: usize) -> &mut f64 {
        &mut self.values[ix * self.grid.height_cells + iy]
    }
}

/// `E`-channel field over a [`BevGrid`], stored `values[(e·X + ix)·Y + iy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    grid: BevGrid,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(grid: BevGrid, channels: usize) -> Self {
        Self {
            grid,
            channels,
            values: vec![0.0; channels * grid.num_cells()],
        }
    }

    pub fn from_values(grid: BevGrid, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * grid.num_cells() {
            return Err(TrackError::ShapeMismatch(format!(
                "feature grid has {} values, expected {}",
                values.len(),
                channels * grid.num_cells()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TrackError::NonFinite("feature grid values".into()));
        }
        Ok(Self {
            grid,
            channels,
            values,
        })
    }

    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn index(&self, e: usize, ix: usize, iy: usize) -> usize {
        (e * self.grid.width_cells + ix) * self.grid.height_cells + iy
    }

    pub fn get(&self, e: usize, ix: usize, iy: usize) -> f64 {
        self.values[self.index(e, ix, iy)]
    }

    pub fn set(&mut self, e: usize, ix: usize, iy: usize, value: f64) {
        let i = self.index(e, ix, iy);
        self.values[i] = value;
    }

    /// Feature vector at one cell.
    pub fn cell(&self, ix: usize, iy: usize) -> Vec<f64> {
        (0..self.channels).map(|e| self.get(e, ix, iy)).collect()
    }
}

fn check_same_shape(grids: &[FeatureGrid]) -> Result<&FeatureGrid> {
    let first = grids
        .first()
        .ok_or_else(|| TrackError::ShapeMismatch("no feature grids to aggregate".into()))?;
    for (s, g) in grids.iter().enumerate().skip(1) {
        if g.grid != first.grid || g.channels != first.channels {
            return Err(TrackError::ShapeMismatch(format!(
                "camera {s} feature grid differs in shape from camera 0"
            )));
        }
    }
    Ok(first)
}

/// Elementwise max over cameras.
pub fn aggregate_max(grids: &[FeatureGrid]) -> Result<FeatureGrid> {
    let first = check_same_shape(grids)?;
    let mut out = first.clone();
    for g in &grids[1..] {
        for (o, v) in out.values.iter_mut().zip(&g.values) {
            *o = o.max(*v);
        }
    }
    Ok(out)
}

/// Elementwise mean over cameras.
pub fn aggregate_mean(grids: &[FeatureGrid]) -> Result<FeatureGrid> {
    let first = check_same_shape(grids)?;
    let mut out = first.clone();
    for g in &grids[1..] {
        for (o, v) in out.values.iter_mut().zip(&g.values) {
            *o += *v;
        }
    }
    let scale = 1.0 / grids.len() as f64;
    out.values.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

/// Renders truncated Gaussian bumps (peak 1, σ = radius/3) at each point,
/// combining overlaps by elementwise max.
pub fn render_smoothed_targets(
    grid: BevGrid,
    points: &[BevPoint],
    kernel_radius_cells: usize,
) -> Result<OccupancyMap> {
    render_weighted_targets(
        grid,
        &points.iter().map(|p| (*p, 1.0)).collect::<Vec<_>>(),
        kernel_radius_cells,
    )
}

/// Like [`render_smoothed_targets`] with a per-point peak height in `[0, 1]`.
pub fn render_weighted_targets(
    grid: BevGrid,
    points: &[(BevPoint, f64)],
    kernel_radius_cells: usize,
) -> Result<OccupancyMap> {
    let mut map = OccupancyMap::zeros(grid);
    let r = kernel_radius_cells as i64;
    let sigma = kernel_radius_cells as f64 / 3.0;
    let inv_two_sigma_sq = if sigma > 0.0 {
        1.0 / (2.0 * sigma * sigma)
    } else {
        0.0
    };
    for &(p, peak) in points {
        let (cx, cy) = grid
            .cell_of(&p)
            .ok_or(TrackError::OutOfExtent { x: p.x, y: p.y })?;
        let peak = peak.clamp(0.0, 1.0);
        for dx in -r..=r {
            let ix = cx as i64 + dx;
            if ix < 0 || ix >= grid.width_cells as i64 {
                continue;
            }
            for dy in -r..=r {
                let iy = cy as i64 + dy;
                if iy < 0 || iy >= grid.height_cells as i64 {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f64;
                if d2 > (r * r) as f64 {
                    continue;
                }
                let v = peak * (-d2 * inv_two_sigma_sq).exp();
                let cell = map.get_mut(ix as usize, iy as usize);
                *cell = cell.max(v);
            }
        }
    }
    Ok(map)
}

/// 3×3 non-maximum suppression followed by thresholding. Returns world
/// positions of cell centers with their values, in cell-index order.
pub fn extract_peaks(map: &OccupancyMap, detection_threshold: f64) -> Vec<(BevPoint, f64)> {
    let grid = map.grid;
    let (w, h) = (grid.width_cells, grid.height_cells);
    let mut peaks = Vec::new();
    for ix in 0..w {
        for iy in 0..h {
            let v = map.get(ix, iy);
            if !(v > detection_threshold) {
                continue;
            }
            let mut is_peak = true;
            'window: for nx in ix.saturating_sub(1)..=(ix + 1).min(w - 1) {
                for ny in iy.saturating_sub(1)..=(iy + 1).min(h - 1) {
                    if (nx, ny) == (ix, iy) {
                        continue;
                    }
                    let nv = map.get(nx, ny);
                    if nv > v || (nv == v && (nx, ny) < (ix, iy)) {
                        is_peak = false;
                        break 'window;
                    }
                }
            }
            if is_peak {
                peaks.push((grid.cell_center(ix, iy), v));
            }
        }
    }
    peaks
}
