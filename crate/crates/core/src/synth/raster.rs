use nalgebra::{Vector2, Vector3};

use crate::camera::Camera;
use crate::error::{check_dim, Error, Result};

/// Triangles are clipped against this camera-space depth.
pub const NEAR_PLANE: f64 = 1e-3;
/// Default visibility tolerance as a fraction of the mean rendered depth.
pub const VISIBILITY_EPS_REL: f64 = 1e-3;

/// Binary image, row-major, `true` for foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Mask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[(y * width + x) as usize] = f(x, y);
            }
        }
        m
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// Foreground at the pixel containing `p`; false outside the image.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        pixel_index(p, self.width, self.height).is_some_and(|i| self.data[i])
    }
}

fn pixel_index(p: &Vector2<f64>, width: u32, height: u32) -> Option<usize> {
    if !(p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64) {
        return None;
    }
    Some(p.y as usize * width as usize + p.x as usize)
}

/// Rendered mask and camera-space depth; background depth is `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionImages {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f32>,
}

impl ConditionImages {
    pub fn mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.depth.iter().map(|d| d.is_finite()).collect(),
        }
    }

    pub fn depth_at(&self, x: u32, y: u32) -> f32 {
        self.depth[(y * self.width + x) as usize]
    }

    /// Mean depth over foreground pixels, `None` for an empty render.
    pub fn mean_depth(&self) -> Option<f64> {
        let (sum, n) = self
            .depth
            .iter()
            .filter(|d| d.is_finite())
            .fold((0.0, 0usize), |(s, n), d| (s + *d as f64, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Clips a camera-space triangle to `z >= NEAR_PLANE`; returns a convex polygon.
fn clip_near(tri: [Vector3<f64>; 3]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let a_in = a.z >= NEAR_PLANE;
        let b_in = b.z >= NEAR_PLANE;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            let mut p = a + t * (b - a);
            p.z = NEAR_PLANE;
            out.push(p);
        }
    }
    out
}

/// Screen-space vertex: pixel position and inverse depth.
#[derive(Clone, Copy)]
struct ScreenVertex {
    x: f64,
    y: f64,
    inv_z: f64,
}

fn edge(a: &ScreenVertex, b: &ScreenVertex, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

/// Tie-break for pixel centers exactly on an edge, so that an edge shared by
/// two triangles is owned by exactly one of them.
fn owns_edge(a: &ScreenVertex, b: &ScreenVertex) -> bool {
    let dy = b.y - a.y;
    let dx = b.x - a.x;
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

fn raster_triangle(v: [ScreenVertex; 3], width: u32, height: u32, depth: &mut [f32]) {
    let mut v = v;
    let area = edge(&v[0], &v[1], v[2].x, v[2].y);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    if area < 0.0 {
        v.swap(1, 2);
    }
    let area = area.abs();
    let min_x = v.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = v.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = v.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    // Pixel (i, j) is sampled at (i + 0.5, j + 0.5).
    let x0 = (min_x - 0.5).ceil().max(0.0);
    let x1 = (max_x - 0.5).floor().min(width as f64 - 1.0);
    let y0 = (min_y - 0.5).ceil().max(0.0);
    let y1 = (max_y - 0.5).floor().min(height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let edges = [(1, 2, 0), (2, 0, 1), (0, 1, 2)];
    let owned: Vec<bool> = edges
        .iter()
        .map(|(a, b, _)| owns_edge(&v[*a], &v[*b]))
        .collect();
    for py in y0 as u32..=y1 as u32 {
        let cy = py as f64 + 0.5;
        for px in x0 as u32..=x1 as u32 {
            let cx = px as f64 + 0.5;
            let mut bary = [0.0; 3];
            let mut inside = true;
            for (e, (a, b, opposite)) in edges.iter().enumerate() {
                let w = edge(&v[*a], &v[*b], cx, cy);
                if w < 0.0 || (w == 0.0 && !owned[e]) {
                    inside = false;
                    break;
                }
                bary[*opposite] = w / area;
            }
            if !inside {
                continue;
            }
            let inv_z: f64 = (0..3).map(|i| bary[i] * v[i].inv_z).sum();
            let z = if v[0].inv_z == v[1].inv_z && v[1].inv_z == v[2].inv_z {
                1.0 / v[0].inv_z
            } else {
                1.0 / inv_z
            };
            let idx = (py * width + px) as usize;
            let z = z as f32;
            if z < depth[idx] {
                depth[idx] = z;
            }
        }
    }
}

/// Z-buffered rasterization of `vertices`/`faces` seen through `camera`.
///
/// Pixel centers are sampled with an edge-ownership tie rule; depth is
/// interpolated perspective-correctly. Faces are not culled by orientation.
pub fn rasterize(
    vertices: &[Vector3<f64>],
    faces: &[[u32; 3]],
    camera: &Camera,
) -> Result<ConditionImages> {
    camera.validate()?;
    if vertices.is_empty() || faces.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot rasterize an empty mesh".into(),
        ));
    }
    if let Some(f) = faces
        .iter()
        .find(|f| f.iter().any(|i| *i as usize >= vertices.len()))
    {
        return Err(Error::InvalidArgument(format!(
            "face {f:?} references a missing vertex"
        )));
    }
    let (w, h) = (camera.width, camera.height);
    let mut depth = vec![f32::INFINITY; w as usize * h as usize];
    let cam_pts: Vec<Vector3<f64>> = vertices.iter().map(|v| camera.to_camera(v)).collect();
    let c = camera.principal_point();
    let to_screen = |p: &Vector3<f64>| ScreenVertex {
        x: camera.focal * p.x / p.z + c.x,
        y: camera.focal * p.y / p.z + c.y,
        inv_z: 1.0 / p.z,
    };
    for f in faces {
        let tri = [
            cam_pts[f[0] as usize],
            cam_pts[f[1] as usize],
            cam_pts[f[2] as usize],
        ];
        if tri.iter().all(|p| p.z >= NEAR_PLANE) {
            raster_triangle(
                [to_screen(&tri[0]), to_screen(&tri[1]), to_screen(&tri[2])],
                w,
                h,
                &mut depth,
            );
            continue;
        }
        let poly = clip_near(tri);
        for i in 1..poly.len().saturating_sub(1) {
            raster_triangle(
                [
                    to_screen(&poly[0]),
                    to_screen(&poly[i]),
                    to_screen(&poly[i + 1]),
                ],
                w,
                h,
                &mut depth,
            );
        }
    }
    Ok(ConditionImages {
        width: w,
        height: h,
        depth,
    })
}

/// Visible iff the keypoint projects inside the image and is no deeper than
/// the rendered surface at its pixel plus `eps`.
///
/// `eps` defaults to [`VISIBILITY_EPS_REL`] times the mean rendered depth.
pub fn keypoint_visibility(
    keypoints3d: &[Vector3<f64>],
    camera: &Camera,
    images: &ConditionImages,
    eps: Option<f64>,
) -> Result<Vec<bool>> {
    check_dim(
        "depth map width",
        camera.width as usize,
        images.width as usize,
    )?;
    check_dim(
        "depth map height",
        camera.height as usize,
        images.height as usize,
    )?;
    let eps = match eps {
        Some(e) if e >= 0.0 => e,
        Some(e) => {
            return Err(Error::InvalidArgument(format!(
                "visibility eps must be >= 0, got {e}"
            )))
        }
        None => VISIBILITY_EPS_REL * images.mean_depth().unwrap_or(0.0),
    };
    Ok(keypoints3d
        .iter()
        .map(|k| {
            let p = camera.project_point(k);
            if !p.in_front {
                return false;
            }
            match pixel_index(&p.pixel, images.width, images.height) {
                Some(i) => p.depth <= images.depth[i] as f64 + eps,
                None => false,
            }
        })
        .collect())
}
