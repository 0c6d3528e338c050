//! Overhead teacher, camera student and the vectorized map decoder shared
//! by both pipelines.

mod checkpoint;
mod decoder;
mod layers;
mod student;
mod teacher;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BevGrid;
use crate::scalar::Real;
use crate::tensor::{Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use decoder::{decode_values, softmax, to_metric, to_normalized, DecoderOutput, MapDecoder, BACKGROUND, NUM_CLASSES, POINT_BOUND};
pub use layers::Bound;
pub use student::{LiftingTable, StudentEncoder, StudentOutput};
pub use teacher::TeacherEncoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Shared BEV feature channels `C`.
    pub channels: usize,
    /// U-Net stage widths, shallow to deep, for teacher and student BEV stacks.
    pub unet_widths: [usize; 3],
    /// Per-camera image feature channels.
    pub camera_channels: usize,
    pub queries: usize,
    pub points_per_element: usize,
    pub decoder_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            unet_widths: [16, 32, 32],
            camera_channels: 16,
            queries: 12,
            points_per_element: 8,
            decoder_hidden: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.camera_channels == 0 || self.unet_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.queries == 0 || self.points_per_element < 2 || self.decoder_hidden == 0 {
            return Err(Error::Config("decoder needs queries >= 1 and >= 2 points".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Producer {
    Teacher,
    Student,
    StudentAdapted,
}

/// Feature values `[C, H, W]` on a grid, with their origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub tensor: Tensor<T>,
    pub grid: BevGrid,
    pub producer: Producer,
    /// Whether the producing parameters were frozen.
    pub frozen: bool,
}

impl<T: Real> FeatureMap<T> {
    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    /// Errors unless `other` has the same shape and grid.
    pub fn check_compatible(&self, other_shape: &[usize], other_grid: &BevGrid) -> Result<()> {
        if self.shape() != other_shape {
            return Err(Error::shape("feature maps", self.shape(), other_shape));
        }
        if &self.grid != other_grid {
            return Err(Error::Geometry("feature maps live on different grids".into()));
        }
        Ok(())
    }
}

/// A feature map recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVar {
    pub var: Var,
    pub grid: BevGrid,
    pub producer: Producer,
}

pub(crate) fn check_grid_shape(op: &'static str, shape: &[usize], channels: usize, grid: &BevGrid) -> Result<()> {
    let want = [channels, grid.height_cells, grid.width_cells];
    if shape != want {
        return Err(Error::shape(op, want, shape));
    }
    Ok(())
}
