//! Whole-volume application of trained networks by overlapping tiles.

use rayon::prelude::*;

use crate::error::Result;
use crate::nn::{Generator, Segmenter};
use crate::pipeline::{average_intensities, covering_origins, reconstruct_from_patches};
use crate::tensor::{SoftSegmentation, Tensor};
use crate::volume::{flat_index, Volume};

fn crop(volume: &Volume, origin: [usize; 3], side: usize) -> Result<Tensor> {
    let shape = volume.shape();
    let mut out = Vec::with_capacity(side * side * side);
    for z in 0..side {
        for y in 0..side {
            let row = flat_index(shape, origin[0], origin[1] + y, origin[2] + z);
            out.extend(volume.data()[row..row + side].iter().map(|&v| v as f64));
        }
    }
    Tensor::from_vec(1, [side; 3], out)
}

fn tiles<F>(volume: &Volume, side: usize, stride: usize, f: F) -> Result<Vec<([usize; 3], Tensor)>>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    covering_origins(volume.shape(), side, stride)?
        .into_par_iter()
        .map(|o| Ok((o, f(&crop(volume, o, side)?)?)))
        .collect()
}

/// Runs `g` over cubes of `side` tiling the volume and averages overlaps.
/// The result has the input's shape and spacing.
pub fn normalize_volume(g: &Generator, volume: &Volume, side: usize, stride: usize) -> Result<Volume> {
    let preds = tiles(volume, side, stride, |x| g.forward(x))?;
    let data = average_intensities(&preds, volume.shape(), volume.data())?;
    Volume::new(volume.shape(), volume.spacing(), data)
}

/// Soft segmentation of a whole volume, optionally through `g` first.
pub fn segment_volume(g: Option<&Generator>, s: &Segmenter, volume: &Volume, side: usize, stride: usize) -> Result<SoftSegmentation> {
    let preds = tiles(volume, side, stride, |x| match g {
        Some(g) => Ok(s.forward(&g.forward(x)?)?.tensor().clone()),
        None => Ok(s.forward(x)?.tensor().clone()),
    })?;
    reconstruct_from_patches(&preds, volume.shape(), s.classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{GeneratorConfig, SegmenterConfig};
    use crate::volume::Shape;

    fn ramp(shape: Shape) -> Volume {
        let n = shape.iter().product::<usize>();
        Volume::new(shape, [1.0; 3], (0..n).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap()
    }

    #[test]
    fn normalization_preserves_shape_and_is_deterministic() {
        let g = Generator::new(&GeneratorConfig::default(), 1).unwrap();
        let v = ramp([20, 18, 16]);
        let a = normalize_volume(&g, &v, 16, 8).unwrap();
        let b = normalize_volume(&g, &v, 16, 8).unwrap();
        assert_eq!(a.shape(), v.shape());
        assert!(a.data().iter().all(|x| x.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn segmentation_is_a_distribution() {
        let s = Segmenter::new(&SegmenterConfig::default(), 2).unwrap();
        let seg = segment_volume(None, &s, &ramp([16, 16, 24]), 16, 8).unwrap();
        assert_eq!(seg.dims(), [16, 16, 24]);
        assert!(seg.max_sum_error() < 1e-9);
    }
}
