use flowct_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the voxel values of a [`Volume`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityKind {
    Hu,
    ZScored,
    NormalizedHu,
    Raw,
}

/// 3D scalar grid with physical placement. `dims`, `spacing` and `origin`
/// are in (x, y, z) order; x varies fastest in `data`. Voxel `i` along an
/// axis is centred at `origin + i·spacing` (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub kind: IntensityKind,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: IntensityKind,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "volume dims {dims:?} must be positive"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "volume spacing {spacing:?} must be positive"
            )));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Data(format!(
                "volume of dims {dims:?} needs {} voxels, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            kind,
            data,
        })
    }

    pub fn filled(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: IntensityKind,
        value: f64,
    ) -> Result<Self> {
        Self::new(
            dims,
            spacing,
            origin,
            kind,
            vec![value; dims.iter().product()],
        )
    }

    /// Same grid and kind, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, self.kind, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// `[1, 1, z, y, x]` tensor sharing the voxel order.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [nx, ny, nz] = self.dims;
        Tensor::from_vec(
            vec![1, 1, nz, ny, nx],
            self.data.iter().map(|&v| T::of(v)).collect(),
        )
        .expect("volume length matches dims")
    }

    /// Inverse of [`Volume::to_tensor`] for one batch item of a `[N, 1, z, y, x]` tensor.
    pub fn from_tensor<T: Scalar>(
        t: &Tensor<T>,
        item: usize,
        template: &Volume,
        kind: IntensityKind,
    ) -> Result<Self> {
        let [nx, ny, nz] = template.dims;
        let s = t.shape();
        if s.len() != 5 || s[1] != 1 || s[2..] != [nz, ny, nx] || item >= s[0] {
            return Err(Error::Data(format!(
                "tensor {s:?} does not hold item {item} of a {:?} volume",
                template.dims
            )));
        }
        let n = nx * ny * nz;
        let data = t.data()[item * n..(item + 1) * n]
            .iter()
            .map(|v| v.f64())
            .collect();
        Volume::new(template.dims, template.spacing, template.origin, kind, data)
    }
}
