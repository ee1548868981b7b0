//! Boxes, quads, homographies and the differentiable screen compositor.
//!
//! All coordinates are continuous image coordinates in pixels: the pixel at column `x`,
//! row `y` covers `[x, x + 1) x [y, y + 1)` and is sampled at its center.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Axis-aligned box in corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::validation(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    /// Intersection with `[0, w] x [0, h]`, or `None` when nothing remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.max(0.0),
            y_min: self.y_min.max(0.0),
            x_max: self.x_max.min(w),
            y_max: self.y_max.min(h),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU together with its gradient with respect to the corners of `a`
/// (`[x_min, y_min, x_max, y_max]`). `b` is held fixed.
pub(crate) fn iou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let ix0 = a.x_min.max(b.x_min);
    let ix1 = a.x_max.min(b.x_max);
    let iy0 = a.y_min.max(b.y_min);
    let iy1 = a.y_max.min(b.y_max);
    let iw = ix1 - ix0;
    let ih = iy1 - iy0;
    let area_a = a.area();
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = area_a + b.area() - inter;
    let value = inter / union;

    // d(inter)/d(corner of a); only corners that bound the intersection contribute.
    let mut d_inter = [0.0; 4];
    if a.x_min > b.x_min {
        d_inter[0] = -ih;
    }
    if a.y_min > b.y_min {
        d_inter[1] = -iw;
    }
    if a.x_max < b.x_max {
        d_inter[2] = ih;
    }
    if a.y_max < b.y_max {
        d_inter[3] = iw;
    }
    let (aw, ah) = (a.width(), a.height());
    let d_area = [-ah, -aw, ah, aw];

    let d_value_d_inter = (union + inter) / (union * union);
    let d_value_d_area = -inter / (union * union);
    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] = d_value_d_inter * d_inter[i] + d_value_d_area * d_area[i];
    }
    (value, grad)
}

/// Convex quadrilateral, corners ordered top-left, top-right, bottom-right, bottom-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub corners: [[f64; 2]; 4],
}

impl Quad {
    pub fn new(corners: [[f64; 2]; 4]) -> Result<Self> {
        let q = Self { corners };
        q.validate()?;
        Ok(q)
    }

    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            corners: [[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
        }
    }

    fn edge_crosses(&self) -> [f64; 4] {
        let c = &self.corners;
        let mut out = [0.0; 4];
        for i in 0..4 {
            let a = c[i];
            let b = c[(i + 1) % 4];
            let d = c[(i + 2) % 4];
            out[i] = (b[0] - a[0]) * (d[1] - b[1]) - (b[1] - a[1]) * (d[0] - b[0]);
        }
        out
    }

    /// Signed shoelace area; positive for the canonical clockwise-on-screen order.
    pub fn signed_area(&self) -> f64 {
        let c = &self.corners;
        let mut s = 0.0;
        for i in 0..4 {
            let a = c[i];
            let b = c[(i + 1) % 4];
            s += a[0] * b[1] - b[0] * a[1];
        }
        0.5 * s
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Rejects non-finite, collinear, self-intersecting or non-convex corner sets.
    pub fn validate(&self) -> Result<()> {
        if self.corners.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("quad has non-finite corners"));
        }
        let area = self.area();
        let scale = self
            .corners
            .iter()
            .flatten()
            .fold(1.0_f64, |m, v| m.max(v.abs()));
        let eps = 1e-9 * scale * scale;
        if area <= eps {
            return Err(Error::validation(format!(
                "degenerate quad (area {area:.3e})"
            )));
        }
        let crosses = self.edge_crosses();
        let positive = crosses.iter().all(|&c| c > eps);
        let negative = crosses.iter().all(|&c| c < -eps);
        if !(positive || negative) {
            return Err(Error::validation(
                "quad corners are collinear or not in consistent convex order",
            ));
        }
        Ok(())
    }

    /// Strict interior test; points on an edge are outside.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let orient = self.signed_area().signum();
        (0..4).all(|i| {
            let a = self.corners[i];
            let b = self.corners[(i + 1) % 4];
            orient * ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])) > 0.0
        })
    }

    pub fn bounds(&self) -> BBox {
        let xs = self.corners.map(|c| c[0]);
        let ys = self.corners.map(|c| c[1]);
        BBox {
            x_min: xs.iter().cloned().fold(f64::INFINITY, f64::min),
            y_min: ys.iter().cloned().fold(f64::INFINITY, f64::min),
            x_max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            y_max: ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            corners: self.corners.map(|c| [c[0] + dx, c[1] + dy]),
        }
    }
}

/// Projective map `p' ~ H p`, normalized so `H[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    fn normalized(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        let scale = m.iter().flatten().fold(0.0_f64, |a, v| a.max(v.abs()));
        if !s.is_finite() || s.abs() <= 1e-12 * scale {
            return Err(Error::Estimation(
                "homography has vanishing bottom-right entry".into(),
            ));
        }
        let h = Self {
            m: m.map(|row| row.map(|v| v / s)),
        };
        if h.determinant().abs() <= 1e-14 || !h.determinant().is_finite() {
            return Err(Error::Estimation("homography is singular".into()));
        }
        Ok(h)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let m = &self.m;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if w.abs() < 1e-15 {
            return None;
        }
        Some([
            (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / w,
            (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / w,
        ])
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = self.determinant();
        if det.abs() <= 1e-300 {
            return Err(Error::Estimation("homography is singular".into()));
        }
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        Self::normalized(adj.map(|row| row.map(|v| v / det)))
    }

    fn mul(&self, other: &Homography) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        out
    }
}

/// Similarity that moves the centroid to the origin and the mean radius to sqrt(2).
fn normalizing_transform(pts: &[[f64; 2]; 4]) -> Homography {
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 4.0;
    let mean_r = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / 4.0;
    let s = std::f64::consts::SQRT_2 / mean_r.max(1e-300);
    Homography {
        m: [[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]],
    }
}

/// Solves the dense system `a x = b` by Gaussian elimination with partial pivoting.
fn solve_linear<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let tail: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Homography taking each corner of `src` onto the matching corner of `dst`.
///
/// Uses the direct linear transform on the four correspondences after normalizing both
/// point sets, which is exact for four points.
pub fn homography_from_quads(src: &Quad, dst: &Quad) -> Result<Homography> {
    src.validate()?;
    dst.validate()?;
    let ts = normalizing_transform(&src.corners);
    let td = normalizing_transform(&dst.corners);
    let norm = |t: &Homography, p: [f64; 2]| t.apply(p).expect("affine map");

    let mut a = [[0.0; 8]; 8];
    let mut b = [0.0; 8];
    for i in 0..4 {
        let [x, y] = norm(&ts, src.corners[i]);
        let [u, v] = norm(&td, dst.corners[i]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
        b[2 * i] = u;
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
        b[2 * i + 1] = v;
    }
    let h = solve_linear(a, b)
        .ok_or_else(|| Error::Estimation("singular correspondence system".into()))?;
    let hn = Homography {
        m: [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]],
    };
    let td_inv = td.inverse()?;
    let m = Homography { m: hn.mul(&ts) };
    Homography::normalized(td_inv.mul(&m))
}

/// One composited pixel: its flat index in an image plane and the four bilinear taps into
/// the patch plane. Taps that fall outside the patch carry zero weight.
#[derive(Clone, Copy, Debug)]
struct WarpEntry {
    pixel: u32,
    taps: [u32; 4],
    weights: [f64; 4],
}

/// Precomputed sampling pattern for compositing a patch onto a quad.
///
/// The pattern depends only on geometry, so one plan serves any number of patch values
/// and its transpose gives the exact gradient with respect to patch pixels.
#[derive(Clone, Debug)]
pub struct WarpPlan {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    entries: Vec<WarpEntry>,
}

impl WarpPlan {
    pub fn new(
        dst: &Quad,
        image_height: usize,
        image_width: usize,
        patch_height: usize,
        patch_width: usize,
    ) -> Result<Self> {
        dst.validate()?;
        if patch_height == 0 || patch_width == 0 {
            return Err(Error::validation("patch must be non-empty"));
        }
        let src = Quad::rect(0.0, 0.0, patch_width as f64, patch_height as f64);
        let to_patch = homography_from_quads(&src, dst)?.inverse()?;

        let mut entries = Vec::new();
        if let Some(clip) = dst.bounds().clip(image_width as f64, image_height as f64) {
            let x0 = clip.x_min.floor() as usize;
            let y0 = clip.y_min.floor() as usize;
            let x1 = (clip.x_max.ceil() as usize).min(image_width);
            let y1 = (clip.y_max.ceil() as usize).min(image_height);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = [x as f64 + 0.5, y as f64 + 0.5];
                    if !dst.contains(p) {
                        continue;
                    }
                    let Some([u, v]) = to_patch.apply(p) else {
                        continue;
                    };
                    entries.push(WarpEntry {
                        pixel: (y * image_width + x) as u32,
                        ..bilinear_taps(u - 0.5, v - 0.5, patch_height, patch_width)
                    });
                }
            }
        }
        Ok(Self {
            image_height,
            image_width,
            patch_height,
            patch_width,
            entries,
        })
    }

    /// Number of image pixels replaced by patch samples.
    pub fn covered_pixels(&self) -> usize {
        self.entries.len()
    }

    /// Drops the given flat pixel indices (sorted ascending) from the plan, for screen
    /// pixels hidden behind nearer objects.
    pub fn occlude(&mut self, sorted_pixels: &[usize]) {
        if !sorted_pixels.is_empty() {
            self.entries
                .retain(|e| sorted_pixels.binary_search(&(e.pixel as usize)).is_err());
        }
    }

    /// Flat plane indices of the covered pixels.
    pub fn covered(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.pixel as usize)
    }

    fn check(&self, background: &Image, patch: &Image) -> Result<()> {
        if background.height != self.image_height || background.width != self.image_width {
            return Err(Error::shape(
                format!("{}x{} background", self.image_height, self.image_width),
                background.shape_string(),
            ));
        }
        if patch.height != self.patch_height
            || patch.width != self.patch_width
            || patch.channels != background.channels
        {
            return Err(Error::shape(
                format!(
                    "{}x{}x{} patch",
                    background.channels, self.patch_height, self.patch_width
                ),
                patch.shape_string(),
            ));
        }
        Ok(())
    }

    /// Replaces every covered pixel of `background` by its bilinear patch sample.
    pub fn composite(&self, background: &Image, patch: &Image) -> Result<Image> {
        self.check(background, patch)?;
        let mut out = background.clone();
        self.composite_into(&mut out, patch);
        Ok(out)
    }

    /// In-place form of [`WarpPlan::composite`]; shapes must already match.
    pub fn composite_into(&self, out: &mut Image, patch: &Image) {
        let plane = out.plane_len();
        let patch_plane = patch.plane_len();
        for c in 0..out.channels {
            let src = &patch.data[c * patch_plane..(c + 1) * patch_plane];
            let dst = &mut out.data[c * plane..(c + 1) * plane];
            for e in &self.entries {
                let mut v = 0.0;
                for t in 0..4 {
                    v += e.weights[t] * src[e.taps[t] as usize];
                }
                dst[e.pixel as usize] = v;
            }
        }
    }

    /// Gradient with respect to patch pixels given the gradient of a scalar with respect
    /// to the composited image.
    pub fn backward(&self, grad_output: &Image) -> Image {
        let mut grad = Image::zeros(grad_output.channels, self.patch_height, self.patch_width);
        let plane = grad_output.plane_len();
        let patch_plane = grad.plane_len();
        for c in 0..grad_output.channels {
            let g_out = &grad_output.data[c * plane..(c + 1) * plane];
            let g_patch = &mut grad.data[c * patch_plane..(c + 1) * patch_plane];
            for e in &self.entries {
                let g = g_out[e.pixel as usize];
                if g == 0.0 {
                    continue;
                }
                for t in 0..4 {
                    g_patch[e.taps[t] as usize] += e.weights[t] * g;
                }
            }
        }
        grad
    }
}

/// Bilinear taps around continuous index-space position `(u, v)` with edge clamping.
fn bilinear_taps(u: f64, v: f64, h: usize, w: usize) -> WarpEntry {
    let fx = u.floor();
    let fy = v.floor();
    let ax = u - fx;
    let ay = v - fy;
    let (ix, iy) = (fx as i64, fy as i64);
    let mut taps = [0u32; 4];
    let mut weights = [0.0; 4];
    let corners = [
        (ix, iy, (1.0 - ax) * (1.0 - ay)),
        (ix + 1, iy, ax * (1.0 - ay)),
        (ix, iy + 1, (1.0 - ax) * ay),
        (ix + 1, iy + 1, ax * ay),
    ];
    for (t, (x, y, wt)) in corners.into_iter().enumerate() {
        // Edge-clamped: samples past the border reuse the nearest edge texel.
        let x = x.clamp(0, w as i64 - 1) as usize;
        let y = y.clamp(0, h as i64 - 1) as usize;
        taps[t] = (y * w + x) as u32;
        weights[t] = wt;
    }
    WarpEntry {
        pixel: 0,
        taps,
        weights,
    }
}

/// Composites `patch` onto `background` inside `dst`, replacing covered pixels.
///
/// Pixels whose centers are not strictly inside `dst` are copied from `background`
/// unchanged. The result is linear in the patch values; use [`WarpPlan`] directly to
/// obtain gradients.
pub fn warp_composite(background: &Image, patch: &Image, dst: &Quad) -> Result<Image> {
    background.validate_unit_range("background")?;
    patch.validate_unit_range("patch")?;
    let plan = WarpPlan::new(
        dst,
        background.height,
        background.width,
        patch.height,
        patch.width,
    )?;
    plan.composite(background, patch)
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bbox(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Counts sub-pixel sample points covered by each box on a regular grid.
    fn iou_by_pixel_count(a: &BBox, b: &BBox, step: f64) -> f64 {
        let x0 = a.x_min.min(b.x_min);
        let y0 = a.y_min.min(b.y_min);
        let x1 = a.x_max.max(b.x_max);
        let y1 = a.y_max.max(b.y_max);
        let inside = |bx: &BBox, x: f64, y: f64| {
            x >= bx.x_min && x < bx.x_max && y >= bx.y_min && y < bx.y_max
        };
        let (mut inter, mut union) = (0usize, 0usize);
        let mut y = y0 + step / 2.0;
        while y < y1 {
            let mut x = x0 + step / 2.0;
            while x < x1 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
                x += step;
            }
            y += step;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = bbox(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(
            iou(&bbox(0.0, 0.0, 1.0, 1.0), &bbox(5.0, 5.0, 6.0, 6.0)).unwrap(),
            0.0
        );
        let (a, b) = (bbox(0.0, 0.0, 2.0, 2.0), bbox(1.0, 0.0, 3.0, 2.0));
        let oracle = iou_by_pixel_count(&a, &b, 0.01);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-9, "oracle {oracle}");
        assert!((iou(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_invalid_boxes() {
        let ok = bbox(0.0, 0.0, 1.0, 1.0);
        let flat = BBox {
            x_min: 1.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 2.0,
        };
        assert!(matches!(iou(&ok, &flat), Err(Error::Validation(_))));
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn iou_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for _ in 0..200 {
            let a = BBox::from_center(
                rng.random_range(0.0..10.0),
                rng.random_range(0.0..10.0),
                rng.random_range(1.0..6.0),
                rng.random_range(1.0..6.0),
            );
            let b = BBox::from_center(5.0, 5.0, 4.0, 3.0);
            let (v, g) = iou_with_grad(&a, &b);
            assert!((v - iou_unchecked(&a, &b)).abs() < 1e-12);
            let eps = 1e-6;
            for i in 0..4 {
                let mut p = a.as_array();
                p[i] += eps;
                let hi = iou_unchecked(&BBox { x_min: p[0], y_min: p[1], x_max: p[2], y_max: p[3] }, &b);
                p[i] -= 2.0 * eps;
                let lo = iou_unchecked(&BBox { x_min: p[0], y_min: p[1], x_max: p[2], y_max: p[3] }, &b);
                let fd = (hi - lo) / (2.0 * eps);
                assert!((fd - g[i]).abs() < 1e-5, "corner {i}: fd {fd} analytic {}", g[i]);
                checked += 1;
            }
        }
        assert_eq!(checked, 800);
    }

    #[test]
    fn homography_identity_and_translation() {
        let sq = Quad::rect(0.0, 0.0, 1.0, 1.0);
        let h = homography_from_quads(&sq, &sq).unwrap();
        for (i, row) in h.m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
        let src = Quad::rect(2.0, 3.0, 9.0, 7.0);
        let h = homography_from_quads(&src, &src.translated(5.0, 0.0)).unwrap();
        let want = [[1.0, 0.0, 5.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((h.m[i][j] - want[i][j]).abs() < 1e-10, "{:?}", h.m);
            }
        }
    }

    fn random_convex_quad(rng: &mut ChaCha8Rng) -> Quad {
        // Perturbed rectangle corners stay convex for perturbations well under half a side.
        let x0 = rng.random_range(0.0..50.0);
        let y0 = rng.random_range(0.0..50.0);
        let w = rng.random_range(20.0..80.0);
        let h = rng.random_range(20.0..80.0);
        let mut j = || rng.random_range(-0.2..0.2);
        Quad::new([
            [x0 + j() * w, y0 + j() * h],
            [x0 + w + j() * w, y0 + j() * h],
            [x0 + w + j() * w, y0 + h + j() * h],
            [x0 + j() * w, y0 + h + j() * h],
        ])
        .unwrap()
    }

    #[test]
    fn homography_matches_direct_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let src = random_convex_quad(&mut rng);
            let dst = random_convex_quad(&mut rng);
            let h = homography_from_quads(&src, &dst).unwrap();

            // Independent route: unnormalized 8x8 system solved by nalgebra's LU.
            let mut a = nalgebra::SMatrix::<f64, 8, 8>::zeros();
            let mut b = nalgebra::SVector::<f64, 8>::zeros();
            for i in 0..4 {
                let [x, y] = src.corners[i];
                let [u, v] = dst.corners[i];
                let r0 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
                let r1 = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
                for k in 0..8 {
                    a[(2 * i, k)] = r0[k];
                    a[(2 * i + 1, k)] = r1[k];
                }
                b[2 * i] = u;
                b[2 * i + 1] = v;
            }
            let sol = a.lu().solve(&b).unwrap();
            let oracle = Homography {
                m: [
                    [sol[0], sol[1], sol[2]],
                    [sol[3], sol[4], sol[5]],
                    [sol[6], sol[7], 1.0],
                ],
            };
            for i in 0..4 {
                let p = h.apply(src.corners[i]).unwrap();
                let q = oracle.apply(src.corners[i]).unwrap();
                for k in 0..2 {
                    assert!((p[k] - dst.corners[i][k]).abs() < 1e-6);
                    assert!((q[k] - dst.corners[i][k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn degenerate_quads_are_rejected() {
        let collinear = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        assert!(Quad::new(collinear).is_err());
        let bowtie = [[0.0, 0.0], [10.0, 10.0], [10.0, 0.0], [0.0, 10.0]];
        assert!(Quad::new(bowtie).is_err());
        let bg = Image::zeros(3, 8, 8);
        let patch = Image::zeros(3, 4, 4);
        let q = Quad { corners: collinear };
        assert!(warp_composite(&bg, &patch, &q).is_err());
    }

    #[test]
    fn identity_warp_reproduces_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bg = Image::zeros(3, 12, 16);
        let mut patch = Image::zeros(3, 12, 16);
        patch.data.iter_mut().for_each(|v| *v = rng.random());
        let out = warp_composite(&bg, &patch, &Quad::rect(0.0, 0.0, 16.0, 12.0)).unwrap();
        for (a, b) in out.data.iter().zip(&patch.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_range_patch_is_rejected() {
        let bg = Image::zeros(3, 8, 8);
        let patch = Image::filled(3, 4, 4, 1.2);
        let err = warp_composite(&bg, &patch, &Quad::rect(1.0, 1.0, 6.0, 6.0)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn pixels_outside_quad_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bg = Image::zeros(3, 40, 40);
        bg.data.iter_mut().for_each(|v| *v = rng.random());
        let patch = Image::filled(3, 8, 8, 0.25);
        // Partially outside the frame on the right.
        let q = Quad::new([[20.0, 5.0], [48.0, 9.0], [46.0, 30.0], [22.0, 33.0]]).unwrap();
        let out = warp_composite(&bg, &patch, &q).unwrap();
        let mut replaced = 0;
        for y in 0..40 {
            for x in 0..40 {
                let inside = q.contains([x as f64 + 0.5, y as f64 + 0.5]);
                for c in 0..3 {
                    if inside {
                        replaced += 1;
                    } else {
                        assert_eq!(out.get(c, y, x).to_bits(), bg.get(c, y, x).to_bits());
                    }
                }
            }
        }
        assert!(replaced > 0);
    }

    #[test]
    fn warp_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut bg = Image::zeros(3, 32, 32);
        bg.data.iter_mut().for_each(|v| *v = rng.random());
        let mut patch = Image::zeros(3, 10, 10);
        patch.data.iter_mut().for_each(|v| *v = rng.random_range(0.1..0.9));
        let q = Quad::new([[4.0, 6.0], [27.0, 3.0], [29.0, 25.0], [6.0, 28.0]]).unwrap();
        let plan = WarpPlan::new(&q, 32, 32, 10, 10).unwrap();
        let n = bg.data.len() as f64;
        let objective = |p: &Image| plan.composite(&bg, p).unwrap().mean();
        let grad = plan.backward(&Image::filled(3, 32, 32, 1.0 / n));
        let mut ok = 0;
        let total = 60;
        for _ in 0..total {
            let i = rng.random_range(0..patch.data.len());
            let eps = 1e-4;
            let mut hi = patch.clone();
            hi.data[i] += eps;
            let mut lo = patch.clone();
            lo.data[i] -= eps;
            let fd = (objective(&hi) - objective(&lo)) / (2.0 * eps);
            let rel = (fd - grad.data[i]).abs() / fd.abs().max(grad.data[i].abs()).max(1e-12);
            if rel < 1e-3 || (fd.abs() < 1e-12 && grad.data[i].abs() < 1e-12) {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * total as f64, "{ok}/{total}");
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            ax in -50.0..50.0f64, ay in -50.0..50.0f64, aw in 0.1..40.0f64, ah in 0.1..40.0f64,
            bx in -50.0..50.0f64, by in -50.0..50.0f64, bw in 0.1..40.0f64, bh in 0.1..40.0f64,
        ) {
            let a = bbox(ax, ay, ax + aw, ay + ah);
            let b = bbox(bx, by, bx + bw, by + bh);
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn homography_round_trips_points(seed in 0u64..500, px in 0.0..100.0f64, py in 0.0..100.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = random_convex_quad(&mut rng);
            let dst = random_convex_quad(&mut rng);
            let h = homography_from_quads(&src, &dst).unwrap();
            let inv = h.inverse().unwrap();
            if let Some(q) = h.apply([px, py]) {
                if let Some(back) = inv.apply(q) {
                    // Points far beyond the horizon are ill-conditioned; the contract covers the working region.
                    if q[0].abs() < 1e4 && q[1].abs() < 1e4 {
                        prop_assert!((back[0] - px).abs() < 1e-6 && (back[1] - py).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
