use super::layers::{Bound, Builder, UNet};
use super::{check_grid_shape, EncoderConfig, FeatureMap, FeatureVar, Producer};
use crate::error::{Error, Result};
use crate::geometry::BevGrid;
use crate::scalar::Real;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const OVERHEAD_CHANNELS: usize = 3;

/// Overhead-raster encoder. Frozen after pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEncoder<T> {
    pub params: ParamSet<T>,
    unet: UNet,
    grid: BevGrid,
    channels: usize,
}

impl<T: Real> TeacherEncoder<T> {
    pub fn new(cfg: &EncoderConfig, grid: BevGrid, seed: u64) -> Result<Self> {
        cfg.validate()?;
        check_divisible(&grid)?;
        let mut b = Builder::new(seed ^ 0x7EAC_4E70);
        let unet = UNet::build(&mut b, "teacher", OVERHEAD_CHANNELS, cfg.unet_widths, cfg.channels);
        Ok(Self {
            params: b.params,
            unet,
            grid,
            channels: cfg.channels,
        })
    }

    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound::new(tape, &self.params)
    }

    /// Records the forward pass on `tape`.
    pub fn forward_var(&self, tape: &mut Tape<T>, bound: &Bound, overhead: Var) -> Result<FeatureVar> {
        check_grid_shape("teacher input", tape.shape(overhead), OVERHEAD_CHANNELS, &self.grid)?;
        let var = self.unet.forward(tape, bound, overhead)?;
        Ok(FeatureVar {
            var,
            grid: self.grid,
            producer: Producer::Teacher,
        })
    }

    /// Feature values for one raster, computed on a private tape.
    pub fn forward(&self, overhead: &Tensor<T>) -> Result<FeatureMap<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(overhead.clone());
        let f = self.forward_var(&mut tape, &bound, x)?;
        Ok(FeatureMap {
            tensor: tape.value(f.var).clone(),
            grid: self.grid,
            producer: Producer::Teacher,
            frozen: self.is_frozen(),
        })
    }
}

pub(crate) fn check_divisible(grid: &BevGrid) -> Result<()> {
    if grid.height_cells % 8 != 0 || grid.width_cells % 8 != 0 {
        return Err(Error::Config(format!(
            "grid {}x{} must be divisible by 8 for the three-level U-Net",
            grid.height_cells, grid.width_cells
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_finite() {
        let mut t = TeacherEncoder::<f64>::new(&EncoderConfig::default(), BevGrid::standard(), 3).unwrap();
        t.freeze();
        let x = Tensor::from_fn([3, 24, 48], |i| ((i * 31) % 17) as f64 / 17.0);
        let a = t.forward(&x).unwrap();
        let b = t.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[16, 24, 48]);
        assert!(a.frozen);
        let z = t.forward(&Tensor::zeros([3, 24, 48])).unwrap();
        assert!(z.tensor.is_finite());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let t = TeacherEncoder::<f64>::new(&EncoderConfig::default(), BevGrid::standard(), 3).unwrap();
        assert!(t.forward(&Tensor::zeros([3, 24, 40])).is_err());
        assert!(t.forward(&Tensor::zeros([1, 24, 48])).is_err());
    }

    #[test]
    fn rejects_indivisible_grid() {
        let g = BevGrid::new(60.0, 30.0, 50, 25).unwrap();
        assert!(TeacherEncoder::<f64>::new(&EncoderConfig::default(), g, 0).is_err());
    }
}
