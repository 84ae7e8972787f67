//! Model hyperparameters.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which explicit 3D representation objects decode to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectRepr {
    Voxel,
    Mesh,
}

/// Scene-model hyperparameters. Defaults follow the rooms/voxel setup;
/// `width_mult` scales network channel counts for desk-scale runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Scene latent dimensionality d.
    pub scene_dim: usize,
    /// Camera embedding dimensionality c.
    pub camera_dim: usize,
    /// Object appearance embedding dimensionality e.
    pub object_dim: usize,
    /// Frames per sequence L.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Candidate-object grid cells per axis.
    pub grid_dims: [usize; 3],
    /// World-space box the grid tiles.
    pub grid_min: [f64; 3],
    pub grid_max: [f64; 3],
    /// Velocity bias added every step.
    pub velocity_bias: [f64; 3],
    /// Voxel resolution V (cubic).
    pub voxel_res: usize,
    /// World edge length of the voxel cube.
    pub voxel_extent: f64,
    /// Added to the raw opacity logits so objects start nearly
    /// transparent and only grow where the background cannot explain the
    /// input.
    pub voxel_opacity_bias: f64,
    /// Background sphere grid (rings x sectors) and template radius.
    pub bg_rings: usize,
    pub bg_sectors: usize,
    pub bg_radius: f64,
    /// Background vertex offset scale (gamma).
    pub bg_offset_scale: f64,
    /// Object sphere grid, template radius and offset scale.
    pub obj_rings: usize,
    pub obj_sectors: usize,
    pub obj_radius: f64,
    pub obj_offset_scale: f64,
    pub object_repr: ObjectRepr,
    /// Multiplier on network channel/feature counts.
    pub width_mult: f64,
    /// Silhouette band half-width for the rasterizer, in pixels.
    pub edge_band_px: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scene_dim: 32,
            camera_dim: 128,
            object_dim: 16,
            frames: 3,
            height: 32,
            width: 32,
            grid_dims: [6, 1, 7],
            grid_min: [-2.2, -1.1, 0.8],
            grid_max: [2.2, -0.2, 5.2],
            velocity_bias: [0.0, 0.0, 0.0],
            voxel_res: 24,
            voxel_extent: 1.2,
            voxel_opacity_bias: -2.0,
            bg_rings: 24,
            bg_sectors: 64,
            bg_radius: 6.0,
            bg_offset_scale: 1.0,
            obj_rings: 8,
            obj_sectors: 16,
            obj_radius: 0.4,
            obj_offset_scale: 0.2,
            object_repr: ObjectRepr::Voxel,
            width_mult: 1.0,
            edge_band_px: 1.5,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and gradient checks.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            scene_dim: 8,
            camera_dim: 16,
            object_dim: 8,
            frames: 2,
            height: 16,
            width: 16,
            grid_dims: [2, 1, 1],
            grid_min: [-1.0, -1.0, 1.0],
            grid_max: [1.0, -0.2, 3.0],
            voxel_res: 4,
            voxel_extent: 0.8,
            bg_rings: 8,
            bg_sectors: 16,
            bg_radius: 4.0,
            obj_rings: 8,
            obj_sectors: 16,
            obj_radius: 0.3,
            width_mult: 0.25,
            ..ModelConfig::default()
        }
    }

    /// Number of candidate-object cells G.
    pub fn grid_count(&self) -> usize {
        self.grid_dims.iter().product()
    }

    /// Length of one slot's raw parameter vector: e + 8 + 2(L-1).
    pub fn slot_param_len(&self) -> usize {
        self.object_dim + 8 + 2 * (self.frames - 1)
    }

    /// Voxel spacing s in world units.
    pub fn voxel_spacing(&self) -> f64 {
        self.voxel_extent / self.voxel_res as f64
    }

    /// Grid cell centers in row-major (x, y, z) cell order.
    pub fn cell_centers(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.grid_count());
        let size = self.cell_size();
        for ix in 0..self.grid_dims[0] {
            for iy in 0..self.grid_dims[1] {
                for iz in 0..self.grid_dims[2] {
                    out.push(Vector3::new(
                        self.grid_min[0] + (ix as f64 + 0.5) * size[0],
                        self.grid_min[1] + (iy as f64 + 0.5) * size[1],
                        self.grid_min[2] + (iz as f64 + 0.5) * size[2],
                    ));
                }
            }
        }
        out
    }

    pub fn cell_size(&self) -> [f64; 3] {
        [
            (self.grid_max[0] - self.grid_min[0]) / self.grid_dims[0] as f64,
            (self.grid_max[1] - self.grid_min[1]) / self.grid_dims[1] as f64,
            (self.grid_max[2] - self.grid_min[2]) / self.grid_dims[2] as f64,
        ]
    }

    pub fn cell_half_extent(&self) -> [f64; 3] {
        let s = self.cell_size();
        [s[0] / 2.0, s[1] / 2.0, s[2] / 2.0]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.scene_dim,
            self.camera_dim,
            self.object_dim,
            self.height,
            self.width,
            self.voxel_res,
            self.bg_rings,
            self.bg_sectors,
            self.obj_rings,
            self.obj_sectors,
        ];
        if positive.iter().any(|&v| v == 0) || self.grid_dims.iter().any(|&v| v == 0) {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("need at least two frames".into()));
        }
        if self.bg_rings % 8 != 0 || self.bg_sectors % 8 != 0 {
            return Err(Error::Config(
                "background mesh grid must be a multiple of 8 (decoder upsampling ladder)".into(),
            ));
        }
        if self.obj_rings % 8 != 0 || self.obj_sectors % 8 != 0 {
            return Err(Error::Config(
                "object mesh grid must be a multiple of 8 (decoder upsampling ladder)".into(),
            ));
        }
        if self.voxel_res % 2 != 0 {
            return Err(Error::Config("voxel resolution must be even".into()));
        }
        for ax in 0..3 {
            if self.grid_max[ax] <= self.grid_min[ax] {
                return Err(Error::Config(format!("grid box is empty on axis {ax}")));
            }
        }
        if !(self.voxel_extent > 0.0)
            || !(self.bg_radius > 0.0)
            || !(self.obj_radius > 0.0)
            || !(self.width_mult > 0.0)
        {
            return Err(Error::Config("scales must be positive".into()));
        }
        Ok(())
    }
}
