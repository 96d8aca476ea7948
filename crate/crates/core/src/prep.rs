//! Grid resampling, modality-specific intensity normalization, and the
//! mapping of model output back to HU on the original grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{IntensityKind, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationSpec {
    /// Symmetric clip applied to z-scored MR intensities.
    pub mr_clip: f64,
    pub hu_min: f64,
    pub hu_max: f64,
    pub hu_scale: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            mr_clip: 3.0,
            hu_min: -1024.0,
            hu_max: 3071.0,
            hu_scale: 1000.0,
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.hu_min < self.hu_max) || !(self.hu_scale > 0.0) || !(self.mr_clip > 0.0) {
            return Err(Error::Config(format!(
                "invalid normalization spec {self:?}"
            )));
        }
        Ok(())
    }
}

/// Source-image modality; selects the intensity normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Mr,
    Cbct,
}

/// Continuous source index sampled by output voxel `i`, clamped to the grid.
fn source_coord(i: usize, target_spacing: f64, source_spacing: f64, extent: usize) -> f64 {
    (i as f64 * target_spacing / source_spacing).clamp(0.0, (extent - 1) as f64)
}

/// Resamples onto `target_dims` × `target_spacing` sharing the source origin.
/// Samples beyond the source take the nearest edge value.
pub fn resample(
    v: &Volume,
    target_dims: [usize; 3],
    target_spacing: [f64; 3],
    mode: Interpolation,
) -> Result<Volume> {
    if target_dims.contains(&0) {
        return Err(Error::Config(format!(
            "target dims {target_dims:?} must be positive"
        )));
    }
    if target_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!(
            "target spacing {target_spacing:?} must be positive"
        )));
    }
    if target_dims == v.dims && target_spacing == v.spacing {
        return Ok(v.clone());
    }
    let axis = |a: usize| -> Vec<f64> {
        (0..target_dims[a])
            .map(|i| source_coord(i, target_spacing[a], v.spacing[a], v.dims[a]))
            .collect()
    };
    let (ux, uy, uz) = (axis(0), axis(1), axis(2));
    let mut data = Vec::with_capacity(target_dims.iter().product());
    match mode {
        Interpolation::Nearest => {
            for &z in &uz {
                for &y in &uy {
                    for &x in &ux {
                        data.push(v.at(x.round() as usize, y.round() as usize, z.round() as usize));
                    }
                }
            }
        }
        Interpolation::Trilinear => {
            let split = |u: f64, n: usize| {
                let i0 = u.floor() as usize;
                (i0, (i0 + 1).min(n - 1), u - i0 as f64)
            };
            let lerp = |a: f64, b: f64, f: f64| if f == 0.0 { a } else { a + (b - a) * f };
            for &z in &uz {
                let (z0, z1, fz) = split(z, v.dims[2]);
                for &y in &uy {
                    let (y0, y1, fy) = split(y, v.dims[1]);
                    for &x in &ux {
                        let (x0, x1, fx) = split(x, v.dims[0]);
                        let c00 = lerp(v.at(x0, y0, z0), v.at(x1, y0, z0), fx);
                        let c10 = lerp(v.at(x0, y1, z0), v.at(x1, y1, z0), fx);
                        let c01 = lerp(v.at(x0, y0, z1), v.at(x1, y0, z1), fx);
                        let c11 = lerp(v.at(x0, y1, z1), v.at(x1, y1, z1), fx);
                        let c0 = lerp(c00, c10, fy);
                        let c1 = lerp(c01, c11, fy);
                        data.push(lerp(c0, c1, fz));
                    }
                }
            }
        }
    }
    Volume::new(target_dims, target_spacing, v.origin, v.kind, data)
}

/// Spacing that maps the full physical extent of `v` onto `dims` voxels.
pub fn extent_spacing(v: &Volume, dims: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|a| v.spacing[a] * v.dims[a] as f64 / dims[a] as f64)
}

/// Result of [`normalize_mr`]. `degenerate` marks a constant input, which is
/// mapped to all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct MrNormalized {
    pub volume: Volume,
    pub mean: f64,
    pub std: f64,
    pub degenerate: bool,
}

/// Whole-volume z-score followed by a symmetric clip.
pub fn normalize_mr(v: &Volume, spec: &NormalizationSpec) -> Result<MrNormalized> {
    expect_kind(v, IntensityKind::Raw, "normalize_mr")?;
    let n = v.len() as f64;
    let mean = v.data.iter().sum::<f64>() / n;
    let std = (v.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let degenerate = std < 1e-8;
    let data = if degenerate {
        log::warn!("normalize_mr: constant input (std {std:e}); returning zeros");
        vec![0.0; v.len()]
    } else {
        v.data
            .iter()
            .map(|x| ((x - mean) / std).clamp(-spec.mr_clip, spec.mr_clip))
            .collect()
    };
    let mut volume = v.with_data(data)?;
    volume.kind = IntensityKind::ZScored;
    Ok(MrNormalized {
        volume,
        mean,
        std,
        degenerate,
    })
}

/// Clip to the HU window and divide by the HU scale.
pub fn normalize_ct(v: &Volume, spec: &NormalizationSpec) -> Result<Volume> {
    expect_kind(v, IntensityKind::Hu, "normalize_ct")?;
    let data = v
        .data
        .iter()
        .map(|x| x.clamp(spec.hu_min, spec.hu_max) / spec.hu_scale)
        .collect();
    let mut out = v.with_data(data)?;
    out.kind = IntensityKind::NormalizedHu;
    Ok(out)
}

/// Normalizes a source image of the given modality (CBCT is in HU).
pub fn normalize_source(
    v: &Volume,
    modality: Modality,
    spec: &NormalizationSpec,
) -> Result<Volume> {
    match modality {
        Modality::Mr => {
            let mut raw = v.clone();
            raw.kind = IntensityKind::Raw;
            Ok(normalize_mr(&raw, spec)?.volume)
        }
        Modality::Cbct => {
            let mut hu = v.clone();
            hu.kind = IntensityKind::Hu;
            normalize_ct(&hu, spec)
        }
    }
}

/// Model grid for `v`: `side³` voxels covering the same physical extent.
pub fn to_model_grid(v: &Volume, side: usize) -> Result<Volume> {
    let dims = [side; 3];
    resample(v, dims, extent_spacing(v, dims), Interpolation::Trilinear)
}

/// Nearest-neighbour resampling onto `reference`'s grid, scaling by the HU
/// scale, clamping to the HU window, and copying the reference placement.
/// Output values are rounded to single precision, the precision of the
/// volume files they are written to.
pub fn postprocess(sct: &Volume, reference: &Volume, spec: &NormalizationSpec) -> Result<Volume> {
    expect_kind(sct, IntensityKind::NormalizedHu, "postprocess")?;
    let on_grid = resample(
        sct,
        reference.dims,
        reference.spacing,
        Interpolation::Nearest,
    )?;
    let data = on_grid
        .data
        .iter()
        .map(|x| ((x * spec.hu_scale).clamp(spec.hu_min, spec.hu_max) as f32) as f64)
        .collect();
    Volume::new(
        reference.dims,
        reference.spacing,
        reference.origin,
        IntensityKind::Hu,
        data,
    )
}

fn expect_kind(v: &Volume, kind: IntensityKind, op: &str) -> Result<()> {
    if v.kind != kind {
        return Err(Error::Data(format!(
            "{op} expects a {kind:?} volume, got {:?}",
            v.kind
        )));
    }
    Ok(())
}
