//! Validated 4-D feature maps and the resampling helpers shared by the
//! encoder, generators and critics.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::ResolutionSchedule;

const RANGE_SLACK: f64 = 1e-6;

/// Declared value interval of a [`FeatureMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// Images, `[-1, 1]`.
    Signed,
    /// Latent features.
    Unbounded,
}

/// A `(batch, channels, height, width)` tensor whose invariants have been
/// checked: finite entries, non-empty dimensions and, for images, values
/// inside `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    data: Tensor,
    range: ValueRange,
}

impl FeatureMap {
    pub fn new(data: Tensor, range: ValueRange) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 {
            return Err(Error::Shape(format!("expected a 4-D tensor, got {dims:?}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("empty dimension in {dims:?}")));
        }
        let values = data.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &values {
            if !v.is_finite() {
                return Err(Error::Value("feature map contains NaN or Inf".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if range == ValueRange::Signed && (lo < -1.0 - RANGE_SLACK || hi > 1.0 + RANGE_SLACK) {
            return Err(Error::Value(format!(
                "image values [{lo}, {hi}] fall outside [-1, 1]"
            )));
        }
        Ok(Self { data, range })
    }

    pub fn image(data: Tensor) -> Result<Self> {
        Self::new(data, ValueRange::Signed)
    }

    pub fn latent(data: Tensor) -> Result<Self> {
        Self::new(data, ValueRange::Unbounded)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        // Rank was checked at construction.
        self.data.dims4().expect("rank 4")
    }

    pub fn batch(&self) -> usize {
        self.dims().0
    }

    pub fn channels(&self) -> usize {
        self.dims().1
    }

    /// Side length; maps flowing through the model are square.
    pub fn resolution(&self) -> usize {
        self.dims().2
    }
}

/// Nearest-neighbour upsampling to `size × size` by an integer factor.
///
/// Built from broadcast and reshape so the backward pass is an exact block
/// sum.
pub fn upsample_nearest(x: &Tensor, size: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == size && w == size {
        return Ok(x.clone());
    }
    if size % h != 0 || size % w != 0 || size / h != size / w {
        return Err(Error::Shape(format!(
            "cannot upsample {h}x{w} to {size}x{size} by an integer factor"
        )));
    }
    let f = size / h;
    let y = x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, f, w, f))?
        .reshape((b, c, size, size))?;
    Ok(y)
}

/// Area-averaging downsample to `size × size`; the source side must be an
/// integer multiple of `size`.
pub fn area_downsample(x: &Tensor, size: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == size && w == size {
        return Ok(x.clone());
    }
    if size == 0 || h % size != 0 || w % size != 0 || h / size != w / size {
        return Err(Error::Shape(format!(
            "cannot area-downsample {h}x{w} to {size}x{size}"
        )));
    }
    let f = h / size;
    let y = x
        .reshape((b, c, size, f, size, f))?
        .mean(5)?
        .mean(3)?;
    Ok(y)
}

/// One view of `image` per schedule level, coarsest first. The finest entry
/// is the input itself.
pub fn downsample_pyramid(
    image: &FeatureMap,
    schedule: &ResolutionSchedule,
) -> Result<Vec<FeatureMap>> {
    let (_, _, h, w) = image.dims();
    let finest = schedule.finest();
    if h != finest || w != finest {
        return Err(Error::Shape(format!(
            "image is {h}x{w} but the schedule's finest level is {finest}"
        )));
    }
    schedule
        .levels()
        .iter()
        .map(|&r| {
            if r == finest {
                Ok(image.clone())
            } else {
                let t = area_downsample(image.tensor(), r)?;
                Ok(FeatureMap {
                    data: t,
                    range: image.range(),
                })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn rejects_non_finite_and_out_of_range() {
        let d = Device::Cpu;
        let nan = Tensor::new(&[f32::NAN, 0.0], &d).unwrap().reshape((1, 1, 1, 2)).unwrap();
        assert!(FeatureMap::latent(nan).is_err());
        let big = Tensor::new(&[1.5f32, 0.0], &d).unwrap().reshape((1, 1, 1, 2)).unwrap();
        assert!(FeatureMap::image(big.clone()).is_err());
        assert!(FeatureMap::latent(big).is_ok());
        let edge = Tensor::new(&[1.0f64 + 5e-7, -1.0], &d).unwrap().reshape((1, 1, 1, 2)).unwrap();
        assert!(FeatureMap::image(edge).is_ok());
        let flat = Tensor::zeros((2, 3), DType::F32, &d).unwrap();
        assert!(FeatureMap::latent(flat).is_err());
    }

    #[test]
    fn checkerboard_averages_to_zero() {
        let d = Device::Cpu;
        let t = Tensor::new(&[-1f64, 1., 1., -1.], &d).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y = area_downsample(&t, 1).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.0]);
    }

    #[test]
    fn constant_image_survives_every_level() {
        let d = Device::Cpu;
        let img = FeatureMap::image((Tensor::ones((1, 3, 32, 32), DType::F64, &d).unwrap() * 0.3).unwrap()).unwrap();
        let s = ResolutionSchedule::new(vec![8, 16, 32]).unwrap();
        let pyr = downsample_pyramid(&img, &s).unwrap();
        assert_eq!(pyr.len(), 3);
        for (level, r) in pyr.iter().zip([8, 16, 32]) {
            assert_eq!(level.resolution(), r);
            for v in level.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap() {
                assert!((v - 0.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_sizes_for_256() {
        let d = Device::Cpu;
        let img = FeatureMap::image(Tensor::zeros((1, 3, 256, 256), DType::F32, &d).unwrap()).unwrap();
        let s = ResolutionSchedule::new(vec![64, 128, 256]).unwrap();
        let sizes: Vec<_> = downsample_pyramid(&img, &s).unwrap().iter().map(|f| f.resolution()).collect();
        assert_eq!(sizes, vec![64, 128, 256]);
        let wrong = ResolutionSchedule::new(vec![32, 64]).unwrap();
        assert!(matches!(downsample_pyramid(&img, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_repeats_blocks() {
        let d = Device::Cpu;
        let t = Tensor::new(&[1f32, 2., 3., 4.], &d).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y = upsample_nearest(&t, 4).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&v[..8], &[1., 1., 2., 2., 1., 1., 2., 2.]);
        assert_eq!(&v[8..], &[3., 3., 4., 4., 3., 3., 4., 4.]);
        assert!(upsample_nearest(&t, 5).is_err());
    }
}
