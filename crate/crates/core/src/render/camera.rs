use crate::error::{Error, Result};
use crate::math::{normalize, tan, Mat3, Rigid, Vec3};

/// Pinhole camera. The camera frame has +x right, +y up and looks along +z;
/// pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)` with y growing
/// downward.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Camera {
    /// Vertical field of view in degrees.
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Rigid,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub const DEFAULT_FOV: f64 = 14.3;

    pub fn new(width: usize, height: usize) -> Self {
        Camera {
            fov_y_deg: Self::DEFAULT_FOV,
            width,
            height,
            world_to_camera: Rigid::IDENTITY,
            near: 0.01,
            far: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::Invalid(alloc::format!("fov {} outside (0, 180)", self.fov_y_deg)));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::Invalid(alloc::format!(
                "image {}x{} smaller than 8x8",
                self.width,
                self.height
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Invalid(alloc::format!(
                "clip range [{}, {}] invalid",
                self.near,
                self.far
            )));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / tan(0.5 * self.fov_y_deg.to_radians())
    }

    pub fn principal_point(&self) -> [f64; 2] {
        [0.5 * self.width as f64, 0.5 * self.height as f64]
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        self.world_to_camera.inverse().translation
    }

    pub fn rotation(&self) -> Mat3 {
        self.world_to_camera.rotation
    }

    /// Unit ray direction through a sub-pixel position, camera frame.
    pub fn ray_camera(&self, px: f64, py: f64) -> Vec3 {
        let f = self.focal();
        let [cx, cy] = self.principal_point();
        normalize(&Vec3::new((px - cx) / f, -(py - cy) / f, 1.0))
    }

    /// Ray through the center of pixel `(x, y)`: world origin, world
    /// direction and camera-frame direction.
    pub fn pixel_ray(&self, x: usize, y: usize) -> (Vec3, Vec3, Vec3) {
        let dc = self.ray_camera(x as f64 + 0.5, y as f64 + 0.5);
        (self.position(), self.rotation().transpose() * dc, dc)
    }

    /// Projects a camera-frame point; `None` at or behind the near plane.
    pub fn project_camera(&self, p: &Vec3) -> Option<[f64; 2]> {
        if p.z <= self.near {
            return None;
        }
        let f = self.focal();
        let [cx, cy] = self.principal_point();
        Some([cx + f * p.x / p.z, cy - f * p.y / p.z])
    }

    pub fn project(&self, world: &Vec3) -> Option<[f64; 2]> {
        self.project_camera(&self.world_to_camera.apply(world))
    }

    /// Gradient of `g . project(world)` with respect to the world point.
    pub fn project_vjp(&self, world: &Vec3, g: [f64; 2]) -> Vec3 {
        let p = self.world_to_camera.apply(world);
        let f = self.focal();
        let iz = 1.0 / p.z;
        let gc = Vec3::new(
            g[0] * f * iz,
            -g[1] * f * iz,
            -g[0] * f * p.x * iz * iz + g[1] * f * p.y * iz * iz,
        );
        self.rotation().transpose() * gc
    }
}
