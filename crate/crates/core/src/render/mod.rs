//! Tile-based surfel rasterizer with an analytic backward pass.
//!
//! Each pixel casts a ray, intersects every surfel whose screen bound
//! touches the pixel's tile, sorts the hits by ray depth and composites
//! front to back. Color, camera depth, camera-frame normal and alpha are
//! blended with the same weights.

mod camera;

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::Matrix4;

pub use camera::Camera;

use crate::error::{check_len, Result};
use crate::image::Image;
use crate::math::{abs, exp, ln, sqrt, Mat3, Vec3};
use crate::par::map_indexed;
use crate::rig::{WorldSplat, WorldSplatGrad};

pub const TILE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RenderOptions {
    /// Hits whose Gaussian weight falls below this are dropped.
    pub weight_cutoff: f64,
    /// Compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
    /// Depth is normalized by alpha only above this alpha.
    pub depth_alpha_floor: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            weight_cutoff: 1.0 / 255.0,
            min_transmittance: 1e-4,
            depth_alpha_floor: 1e-4,
        }
    }
}

/// Color (3), depth (1), normal (3) and alpha (1) images. Also used to carry
/// upstream gradients into [`render_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderBuffers {
    pub color: Image,
    pub depth: Image,
    pub normal: Image,
    pub alpha: Image,
}

impl RenderBuffers {
    pub fn zeros(width: usize, height: usize) -> Self {
        RenderBuffers {
            color: Image::new(width, height, 3),
            depth: Image::new(width, height, 1),
            normal: Image::new(width, height, 3),
            alpha: Image::new(width, height, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    fn check(&self, width: usize, height: usize) -> Result<()> {
        self.color.check_shape("color buffer", width, height, 3)?;
        self.depth.check_shape("depth buffer", width, height, 1)?;
        self.normal.check_shape("normal buffer", width, height, 3)?;
        self.alpha.check_shape("alpha buffer", width, height, 1)
    }
}

/// Homogeneous plane matrix with columns `(s_u t_u, s_v t_v, 0, mu)`, so
/// that `H [u, v, 1, 1]^T` is the surfel point at `(u, v)`.
pub fn splat_plane(s: &WorldSplat) -> Matrix4<f64> {
    let a = s.tangent_u() * s.scales[0];
    let b = s.tangent_v() * s.scales[1];
    let m = s.center;
    Matrix4::new(
        a.x, b.x, 0.0, m.x, //
        a.y, b.y, 0.0, m.y, //
        a.z, b.z, 0.0, m.z, //
        0.0, 0.0, 0.0, 1.0,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intersection {
    pub u: f64,
    pub v: f64,
    pub t: f64,
}

/// Ray/surfel-plane intersection. `t` is the distance along the unit
/// direction `d`; `(u, v)` are tangent coordinates in units of the scales.
pub fn intersect(o: &Vec3, d: &Vec3, s: &WorldSplat, near: f64, far: f64) -> Option<Intersection> {
    let n = s.normal();
    let nd = n.dot(d);
    if abs(nd) < 1e-9 {
        return None;
    }
    let m = s.center - o;
    let t = n.dot(&m) / nd;
    if t <= near || t >= far {
        return None;
    }
    let r = d * t - m;
    Some(Intersection {
        u: s.tangent_u().dot(&r) / s.scales[0],
        v: s.tangent_v().dot(&r) / s.scales[1],
        t,
    })
}

#[inline]
pub fn splat_weight(u: f64, v: f64) -> f64 {
    exp(-0.5 * (u * u + v * v))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderGrads {
    /// Geometry and opacity gradients; `albedo` is left at zero.
    pub splats: Vec<WorldSplatGrad>,
    /// Gradients on the per-splat shaded colors.
    pub colors: Vec<Vec3>,
}

struct Hit {
    t: f64,
    index: usize,
    local: usize,
    u: f64,
    v: f64,
    w: f64,
    alpha: f64,
}

/// Per-splat terms of [`intersect`] that do not depend on the pixel, for
/// rays leaving the camera center.
struct Prepared {
    normal: Vec3,
    /// `n . (mu - o)`
    num: f64,
    /// `t_u / s_u` and `t_u . (mu - o) / s_u`
    au: Vec3,
    bu: f64,
    av: Vec3,
    bv: f64,
    /// Pixel bounding box of the cutoff footprint.
    bounds: [f64; 4],
}

struct Frame<'a> {
    splats: &'a [WorldSplat],
    colors: &'a [Vec3],
    camera: &'a Camera,
    rotation: Mat3,
    normals: Vec<Vec3>,
    prepared: Vec<Prepared>,
    /// Squared `(u, v)` radius past which the weight is below the cutoff.
    reject: f64,
    background: Vec3,
    opts: RenderOptions,
    tiles_x: usize,
    tiles_y: usize,
    lists: Vec<Vec<usize>>,
}

impl<'a> Frame<'a> {
    fn new(
        splats: &'a [WorldSplat],
        colors: &'a [Vec3],
        camera: &'a Camera,
        background: Vec3,
        opts: RenderOptions,
    ) -> Result<Self> {
        camera.validate()?;
        check_len("splat colors", splats.len(), colors.len())?;
        let rotation = camera.rotation();
        let tiles_x = camera.width.div_ceil(TILE);
        let tiles_y = camera.height.div_ceil(TILE);
        let mut frame = Frame {
            splats,
            colors,
            camera,
            rotation,
            normals: splats.iter().map(|s| rotation * s.normal()).collect(),
            prepared: Vec::with_capacity(splats.len()),
            reject: f64::INFINITY,
            background,
            opts,
            tiles_x,
            tiles_y,
            lists: vec![Vec::new(); tiles_x * tiles_y],
        };
        frame.bin();
        Ok(frame)
    }

    fn bin(&mut self) {
        let cam = self.camera;
        let depth: Vec<f64> = self.splats.iter().map(|s| cam.world_to_camera.apply(&s.center).z).collect();
        let mut order: Vec<usize> = (0..self.splats.len()).collect();
        order.sort_by(|&a, &b| depth[a].total_cmp(&depth[b]).then(a.cmp(&b)));
        let cutoff = self.opts.weight_cutoff;
        let radius = if cutoff > 0.0 && cutoff < 1.0 {
            sqrt(-2.0 * ln(cutoff)) * (1.0 + 1e-6)
        } else {
            f64::INFINITY
        };
        self.reject = radius * radius;
        let o = cam.position();
        let prepared: Vec<Prepared> = self
            .splats
            .iter()
            .map(|s| {
                let m = s.center - o;
                let au = s.tangent_u() / s.scales[0];
                let av = s.tangent_v() / s.scales[1];
                Prepared {
                    normal: s.normal(),
                    num: s.normal().dot(&m),
                    au,
                    bu: au.dot(&m),
                    av,
                    bv: av.dot(&m),
                    bounds: self.pixel_bounds(s, radius).unwrap_or([f64::INFINITY, f64::INFINITY, -1.0, -1.0]),
                }
            })
            .collect();
        self.prepared = prepared;
        for i in order {
            if let Some([x0, y0, x1, y1]) = self.tile_range(i) {
                for ty in y0..=y1 {
                    for tx in x0..=x1 {
                        self.lists[ty * self.tiles_x + tx].push(i);
                    }
                }
            }
        }
    }

    /// Inclusive tile range covered by the projected cutoff rectangle.
    fn tile_range(&self, i: usize) -> Option<[usize; 4]> {
        let [lo_x, lo_y, hi_x, hi_y] = self.prepared[i].bounds;
        let w = self.camera.width as f64;
        let h = self.camera.height as f64;
        if !(hi_x >= 0.0 && hi_y >= 0.0 && lo_x <= w && lo_y <= h) {
            return None;
        }
        let tx0 = (lo_x.max(0.0) as usize / TILE).min(self.tiles_x - 1);
        let ty0 = (lo_y.max(0.0) as usize / TILE).min(self.tiles_y - 1);
        let tx1 = (hi_x.min(w) as usize / TILE).min(self.tiles_x - 1);
        let ty1 = (hi_y.min(h) as usize / TILE).min(self.tiles_y - 1);
        Some([tx0, ty0, tx1, ty1])
    }

    /// Pixel bounding box of the projected cutoff rectangle, infinite when a
    /// corner is not in front of the camera and `None` when nothing passes
    /// the cutoff.
    fn pixel_bounds(&self, s: &WorldSplat, radius: f64) -> Option<[f64; 4]> {
        if cutoff_is_empty(self.opts.weight_cutoff) {
            return None;
        }
        let full = Some([f64::NEG_INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY]);
        if !radius.is_finite() {
            return full;
        }
        let a = s.tangent_u() * (s.scales[0] * radius);
        let b = s.tangent_v() * (s.scales[1] * radius);
        let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        let f = self.camera.focal();
        let [cx, cy] = self.camera.principal_point();
        for (su, sv) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let p = self.camera.world_to_camera.apply(&(s.center + a * su + b * sv));
            if !(p.z > 1e-9) {
                return full;
            }
            let x = cx + f * p.x / p.z;
            let y = cy - f * p.y / p.z;
            lo_x = lo_x.min(x);
            hi_x = hi_x.max(x);
            lo_y = lo_y.min(y);
            hi_y = hi_y.max(y);
        }
        Some([lo_x, lo_y, hi_x, hi_y])
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        let x1 = (x0 + TILE).min(self.camera.width);
        let y1 = (y0 + TILE).min(self.camera.height);
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    /// Sorted hits for the pixel centered at `(px, py)` along `d`, truncated
    /// to the composited prefix.
    fn hits(&self, list: &[usize], px: f64, py: f64, d: &Vec3, hits: &mut Vec<Hit>) {
        hits.clear();
        let (near, far) = (self.camera.near, self.camera.far);
        for (local, &index) in list.iter().enumerate() {
            let p = &self.prepared[index];
            let [lo_x, lo_y, hi_x, hi_y] = p.bounds;
            if px < lo_x || px > hi_x || py < lo_y || py > hi_y {
                continue;
            }
            let nd = p.normal.dot(d);
            if abs(nd) < 1e-9 {
                continue;
            }
            let t = p.num / nd;
            if t <= near || t >= far {
                continue;
            }
            let u = t * p.au.dot(d) - p.bu;
            let v = t * p.av.dot(d) - p.bv;
            if u * u + v * v > self.reject {
                continue;
            }
            let w = splat_weight(u, v);
            if w < self.opts.weight_cutoff {
                continue;
            }
            hits.push(Hit {
                t,
                index,
                local,
                u,
                v,
                w,
                alpha: self.splats[index].opacity * w,
            });
        }
        hits.sort_unstable_by(|a, b| a.t.total_cmp(&b.t).then(a.index.cmp(&b.index)));
        let mut trans = 1.0;
        for (k, h) in hits.iter().enumerate() {
            trans *= 1.0 - h.alpha;
            if trans < self.opts.min_transmittance {
                hits.truncate(k + 1);
                break;
            }
        }
    }

    fn features(&self, h: &Hit, dz: f64) -> [f64; 8] {
        let c = &self.colors[h.index];
        let n = &self.normals[h.index];
        [c.x, c.y, c.z, h.t * dz, n.x, n.y, n.z, 1.0]
    }

    fn background_features(&self) -> [f64; 8] {
        let b = &self.background;
        [b.x, b.y, b.z, 0.0, 0.0, 0.0, 0.0, 0.0]
    }

    /// Blended features (premultiplied, no background) and final transmittance.
    fn composite(&self, hits: &[Hit], dz: f64) -> ([f64; 8], f64) {
        let mut acc = [0.0; 8];
        let mut trans = 1.0;
        for h in hits {
            let f = self.features(h, dz);
            let wgt = trans * h.alpha;
            for k in 0..8 {
                acc[k] += wgt * f[k];
            }
            trans *= 1.0 - h.alpha;
        }
        (acc, trans)
    }
}

fn cutoff_is_empty(cutoff: f64) -> bool {
    cutoff > 1.0
}

/// Renders shaded surfels (`colors[i]` belongs to `splats[i]`).
pub fn render(
    splats: &[WorldSplat],
    colors: &[Vec3],
    camera: &Camera,
    background: Vec3,
    opts: &RenderOptions,
) -> Result<RenderBuffers> {
    let frame = Frame::new(splats, colors, camera, background, *opts)?;
    let tiles = map_indexed(frame.lists.len(), |tile| {
        let list = &frame.lists[tile];
        let mut hits = Vec::new();
        frame
            .tile_pixels(tile)
            .map(|(x, y)| {
                let (_, d, dc) = camera.pixel_ray(x, y);
                frame.hits(list, x as f64 + 0.5, y as f64 + 0.5, &d, &mut hits);
                let (acc, trans) = frame.composite(&hits, dc.z);
                (x, y, acc, trans)
            })
            .collect::<Vec<_>>()
    });
    let mut out = RenderBuffers::zeros(camera.width, camera.height);
    let floor = opts.depth_alpha_floor;
    for (x, y, acc, trans) in tiles.into_iter().flatten() {
        let alpha = 1.0 - trans;
        for c in 0..3 {
            out.color.set(x, y, c, acc[c] + trans * background[c]);
            out.normal.set(x, y, c, acc[4 + c]);
        }
        out.depth.set(x, y, 0, if alpha > floor { acc[3] / alpha } else { 0.0 });
        out.alpha.set(x, y, 0, alpha);
    }
    Ok(out)
}

#[derive(Clone, Copy, Default)]
struct Acc {
    center: Vec3,
    tu: Vec3,
    tv: Vec3,
    tw: Vec3,
    su: f64,
    sv: f64,
    opacity: f64,
    color: Vec3,
}

/// Gradients of `sum(upstream * buffers)` with respect to every surfel field
/// and shaded color. The per-pixel hit order is held fixed.
pub fn render_backward(
    splats: &[WorldSplat],
    colors: &[Vec3],
    camera: &Camera,
    background: Vec3,
    opts: &RenderOptions,
    upstream: &RenderBuffers,
) -> Result<RenderGrads> {
    let mut out = render_backward_many(splats, colors, camera, background, opts, &[upstream])?;
    Ok(out.pop().expect("one upstream"))
}

/// [`render_backward`] for several upstream buffer sets in one traversal;
/// result `k` belongs to `upstreams[k]`.
pub fn render_backward_many(
    splats: &[WorldSplat],
    colors: &[Vec3],
    camera: &Camera,
    background: Vec3,
    opts: &RenderOptions,
    upstreams: &[&RenderBuffers],
) -> Result<Vec<RenderGrads>> {
    let frame = Frame::new(splats, colors, camera, background, *opts)?;
    for up in upstreams {
        up.check(camera.width, camera.height)?;
    }
    let groups = upstreams.len();
    let rt = frame.rotation.transpose();
    let floor = opts.depth_alpha_floor;
    let tiles = map_indexed(frame.lists.len(), |tile| {
        let list = &frame.lists[tile];
        let mut acc = vec![Acc::default(); list.len() * groups];
        let mut hits = Vec::new();
        let mut trans_before = Vec::new();
        let mut g8s = vec![[0.0; 8]; groups];
        for (x, y) in frame.tile_pixels(tile) {
            let (o, d, dc) = camera.pixel_ray(x, y);
            frame.hits(list, x as f64 + 0.5, y as f64 + 0.5, &d, &mut hits);
            if hits.is_empty() {
                continue;
            }
            let (sum, t_final) = frame.composite(&hits, dc.z);
            let alpha = 1.0 - t_final;
            let mut any = false;
            for (g8, up) in g8s.iter_mut().zip(upstreams) {
                let gd = up.depth.get(x, y, 0);
                let (gz, ga) = if alpha > floor {
                    (gd / alpha, up.alpha.get(x, y, 0) - gd * sum[3] / (alpha * alpha))
                } else {
                    (0.0, up.alpha.get(x, y, 0))
                };
                *g8 = [
                    up.color.get(x, y, 0),
                    up.color.get(x, y, 1),
                    up.color.get(x, y, 2),
                    gz,
                    up.normal.get(x, y, 0),
                    up.normal.get(x, y, 1),
                    up.normal.get(x, y, 2),
                    ga,
                ];
                any |= g8.iter().any(|g| *g != 0.0);
            }
            if !any {
                continue;
            }
            trans_before.clear();
            let mut trans = 1.0;
            for h in &hits {
                trans_before.push(trans);
                trans *= 1.0 - h.alpha;
            }
            let mut suffix = frame.background_features();
            for (h, &ti) in hits.iter().zip(&trans_before).rev() {
                let f = frame.features(h, dc.z);
                let mut diff = [0.0; 8];
                for k in 0..8 {
                    diff[k] = f[k] - suffix[k];
                    suffix[k] = h.alpha * f[k] + (1.0 - h.alpha) * suffix[k];
                }
                let wgt = ti * h.alpha;
                let s = &splats[h.index];
                let (tu, tv, tw) = (s.tangent_u(), s.tangent_v(), s.normal());
                let (su, sv) = (s.scales[0], s.scales[1]);
                let m = s.center - o;
                let nd = tw.dot(&d);
                let r = d * h.t - m;
                for (gi, g8) in g8s.iter().enumerate() {
                    if g8.iter().all(|g| *g == 0.0) {
                        continue;
                    }
                    let mut g_alpha = 0.0;
                    for k in 0..8 {
                        g_alpha += g8[k] * diff[k];
                    }
                    g_alpha *= ti;
                    let a = &mut acc[h.local * groups + gi];
                    a.color += Vec3::new(g8[0], g8[1], g8[2]) * wgt;
                    a.tw += rt * Vec3::new(g8[4], g8[5], g8[6]) * wgt;
                    let g_t = wgt * g8[3] * dc.z;

                    a.opacity += g_alpha * h.w;
                    let g_w = g_alpha * s.opacity;
                    let g_u = -g_w * h.w * h.u;
                    let g_v = -g_w * h.w * h.v;

                    let g_r = tu * (g_u / su) + tv * (g_v / sv);
                    let g_tt = g_t + g_r.dot(&d);
                    a.center += tw * (g_tt / nd) - g_r;
                    a.tw -= r * (g_tt / nd);
                    a.tu += r * (g_u / su);
                    a.tv += r * (g_v / sv);
                    a.su -= g_u * h.u / su;
                    a.sv -= g_v * h.v / sv;
                }
            }
        }
        acc
    });

    let mut out = vec![
        RenderGrads {
            splats: vec![WorldSplatGrad::default(); splats.len()],
            colors: vec![Vec3::zeros(); splats.len()],
        };
        groups
    ];
    for (list, acc) in frame.lists.iter().zip(tiles) {
        for (&i, accs) in list.iter().zip(acc.chunks_exact(groups.max(1))) {
            for (o, a) in out.iter_mut().zip(accs) {
                let g = &mut o.splats[i];
                g.center += a.center;
                let mut rot = g.rotation;
                rot.set_column(0, &(rot.column(0) + a.tu));
                rot.set_column(1, &(rot.column(1) + a.tv));
                rot.set_column(2, &(rot.column(2) + a.tw));
                g.rotation = rot;
                g.scales[0] += a.su;
                g.scales[1] += a.sv;
                g.opacity += a.opacity;
                o.colors[i] += a.color;
            }
        }
    }
    Ok(out)
}
