//! Joint rigid augmentation of aligned source/target/mask volumes.

use flowct_tensor::rng::{mix, uniform};

use crate::error::Result;
use crate::volume::Volume;

/// Symmetric augmentation ranges: `±translate` voxels and `±rotate` radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRange {
    pub translate: f64,
    pub rotate: f64,
}

/// Rotation angles (radians, about the x, y, z axes through the grid
/// centre, applied x first) followed by a shift in voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub angles: [f64; 3],
    pub shift: [f64; 3],
}

impl RigidTransform {
    pub const IDENTITY: Self = Self {
        angles: [0.0; 3],
        shift: [0.0; 3],
    };

    /// Uniform draw within `range` on every axis, keyed by `(seed, step)`.
    pub fn sample(range: AugmentRange, seed: u64, step: u64) -> Self {
        let key = mix(&[seed, step, 0xA06]);
        let draw = |i: u64, r: f64| {
            if r == 0.0 {
                0.0
            } else {
                (2.0 * uniform(key, i) - 1.0) * r
            }
        };
        let (rot, tr) = (range.rotate, range.translate);
        Self {
            angles: [draw(0, rot), draw(1, rot), draw(2, rot)],
            shift: [draw(3, tr), draw(4, tr), draw(5, tr)],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Row-major `Rz · Ry · Rx`.
    fn rotation(&self) -> [[f64; 3]; 3] {
        let [(sx, cx), (sy, cy), (sz, cz)] = self.angles.map(f64::sin_cos);
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        matmul3(&rz, &matmul3(&ry, &rx))
    }

    /// Resamples `v` so that input point `p` lands at `R (p - c) + c + shift`.
    /// Output voxels that pull from outside the grid get `background`.
    pub fn apply(&self, v: &Volume, nearest: bool, background: f64) -> Result<Volume> {
        if self.is_identity() {
            return Ok(v.clone());
        }
        let r = self.rotation();
        let dims = v.dims;
        let centre = dims.map(|n| (n as f64 - 1.0) / 2.0);
        let mut data = Vec::with_capacity(v.len());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let q = [x as f64, y as f64, z as f64];
                    let d: [f64; 3] = std::array::from_fn(|a| q[a] - centre[a] - self.shift[a]);
                    // inverse rotation is the transpose
                    let p: [f64; 3] = std::array::from_fn(|a| {
                        r[0][a] * d[0] + r[1][a] * d[1] + r[2][a] * d[2] + centre[a]
                    });
                    let value = if nearest {
                        sample_nearest(v, p)
                    } else {
                        sample_trilinear(v, p)
                    };
                    data.push(value.unwrap_or(background));
                }
            }
        }
        v.with_data(data)
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

const EDGE_TOL: f64 = 1e-9;

fn sample_trilinear(v: &Volume, p: [f64; 3]) -> Option<f64> {
    let mut lo = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let n = v.dims[a];
        let max = (n - 1) as f64;
        if p[a] < -EDGE_TOL || p[a] > max + EDGE_TOL {
            return None;
        }
        let c = p[a].clamp(0.0, max);
        let i = (c.floor() as usize).min(n.saturating_sub(2));
        lo[a] = i;
        frac[a] = c - i as f64;
    }
    let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + 1).min(v.dims[a] - 1));
    let mut acc = 0.0;
    for corner in 0..8 {
        let pick = |a: usize| corner >> a & 1 == 1;
        let w: f64 = (0..3)
            .map(|a| if pick(a) { frac[a] } else { 1.0 - frac[a] })
            .product();
        if w == 0.0 {
            continue;
        }
        let idx: [usize; 3] = std::array::from_fn(|a| if pick(a) { hi[a] } else { lo[a] });
        acc += w * v.at(idx[0], idx[1], idx[2]);
    }
    Some(acc)
}

fn sample_nearest(v: &Volume, p: [f64; 3]) -> Option<f64> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = p[a].round();
        if r < 0.0 || r > (v.dims[a] - 1) as f64 {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(v.at(idx[0], idx[1], idx[2]))
}

/// One rigid transform, drawn from `(seed, step)`, applied to all
/// three volumes: trilinear for the images (background = each image's
/// minimum), nearest for the mask (background 0).
pub fn augment_pair(
    source: &Volume,
    target: &Volume,
    mask: &Volume,
    range: AugmentRange,
    seed: u64,
    step: u64,
) -> Result<(Volume, Volume, Volume)> {
    if !source.same_grid(target) || !source.same_grid(mask) {
        return Err(crate::Error::Data(format!(
            "augment_pair: grids differ (source {:?}, target {:?}, mask {:?})",
            source.dims, target.dims, mask.dims
        )));
    }
    let tf = RigidTransform::sample(range, seed, step);
    Ok((
        tf.apply(source, false, source.min_max().0)?,
        tf.apply(target, false, target.min_max().0)?,
        tf.apply(mask, true, 0.0)?,
    ))
}
