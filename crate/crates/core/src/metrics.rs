//! Masked image-similarity metrics between synthetic and reference CT.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Width of the HU window [-1024, 3071].
pub const HU_DATA_RANGE: f64 = 4095.0;
/// PSNR reported when the masked MSE is (numerically) zero.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn check_pair(a: &Volume, b: &Volume, mask: &Volume) -> Result<usize> {
    for (name, v) in [("second image", b), ("mask", mask)] {
        if v.dims != a.dims {
            return Err(Error::Data(format!(
                "{name} has dims {:?}, first image has {:?}",
                v.dims, a.dims
            )));
        }
    }
    let n = mask.data.iter().filter(|&&m| m > 0.5).count();
    if n == 0 {
        return Err(Error::Data("mask is empty".into()));
    }
    Ok(n)
}

fn masked_pairs<'a>(
    a: &'a Volume,
    b: &'a Volume,
    mask: &'a Volume,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.data
        .iter()
        .zip(&b.data)
        .zip(&mask.data)
        .filter(|(_, &m)| m > 0.5)
        .map(|((&x, &y), _)| (x, y))
}

/// Mean absolute difference over mask voxels.
pub fn mae(a: &Volume, b: &Volume, mask: &Volume) -> Result<f64> {
    let n = check_pair(a, b, mask)?;
    Ok(masked_pairs(a, b, mask)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n as f64)
}

pub fn masked_mse(a: &Volume, b: &Volume, mask: &Volume) -> Result<f64> {
    let n = check_pair(a, b, mask)?;
    Ok(masked_pairs(a, b, mask)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n as f64)
}

/// `10·log10(range² / MSE)` over the mask, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Volume, b: &Volume, mask: &Volume, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Config(format!(
            "PSNR data range {data_range} must be positive"
        )));
    }
    Ok(psnr_from_mse(masked_mse(a, b, mask)?, data_range))
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    let peak = data_range * data_range;
    if mse < peak * 1e-10 {
        PSNR_CAP_DB
    } else {
        10.0 * (peak / mse).log10()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsimConfig {
    pub scales: usize,
    pub weights: Vec<f64>,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
    pub sigma: f64,
    pub window: usize,
    /// Value written outside the mask before comparison (HU).
    pub fill: f64,
    /// Added to every voxel so intensities are nonnegative.
    pub offset: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            scales: 5,
            weights: MS_SSIM_WEIGHTS.to_vec(),
            data_range: HU_DATA_RANGE,
            k1: 0.01,
            k2: 0.03,
            sigma: 1.5,
            window: 11,
            fill: -1024.0,
            offset: 1024.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsSsim {
    pub value: f64,
    pub scales_used: usize,
}

/// Dense grid in (z, y, x) order with x fastest.
#[derive(Debug, Clone)]
pub(crate) struct Grid {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Grid {
    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    fn map2(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Grid {
        Grid {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// 2×2×2 mean pooling; a trailing odd slice is dropped.
    fn downsample(&self) -> Grid {
        let dims = self.dims.map(|d| d / 2);
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let mut s = 0.0;
                    for (dx, dy, dz) in (0..8).map(|i| (i & 1, (i >> 1) & 1, i >> 2)) {
                        s += self.at(2 * x + dx, 2 * y + dy, 2 * z + dz);
                    }
                    data.push(s / 8.0);
                }
            }
        }
        Grid { dims, data }
    }

    /// Valid separable filtering with a 1D kernel along all three axes.
    fn filter(&self, kernel: &[f64]) -> Grid {
        let k = kernel.len();
        let mut cur = self.clone();
        for axis in 0..3 {
            let mut dims = cur.dims;
            dims[axis] = cur.dims[axis] + 1 - k;
            let stride = match axis {
                0 => 1,
                1 => cur.dims[0],
                _ => cur.dims[0] * cur.dims[1],
            };
            let mut data = Vec::with_capacity(dims.iter().product());
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let base = x + cur.dims[0] * (y + cur.dims[1] * z);
                        data.push(
                            kernel
                                .iter()
                                .enumerate()
                                .map(|(i, w)| w * cur.data[base + i * stride])
                                .sum(),
                        );
                    }
                }
            }
            cur = Grid { dims, data };
        }
        cur
    }
}

pub(crate) fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let raw: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mean luminance·contrast-structure and mean contrast-structure maps at one scale.
fn ssim_terms(a: &Grid, b: &Grid, kernel: &[f64], c1: f64, c2: f64) -> (f64, f64) {
    let mu_a = a.filter(kernel);
    let mu_b = b.filter(kernel);
    let aa = a.map2(a, |x, y| x * y).filter(kernel);
    let bb = b.map2(b, |x, y| x * y).filter(kernel);
    let ab = a.map2(b, |x, y| x * y).filter(kernel);
    let n = mu_a.data.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let s = (2.0 * cov + c2) / (va + vb + c2);
        ssim += l * s;
        cs += s;
    }
    (ssim / n, cs / n)
}

/// Mask bounding box, grown symmetrically to at least `min_side` per axis
/// where the volume allows it. Returns `(lo, hi)` exclusive.
fn mask_box(mask: &Volume, min_side: usize) -> ([usize; 3], [usize; 3]) {
    let mut lo = mask.dims;
    let mut hi = [0; 3];
    for z in 0..mask.dims[2] {
        for y in 0..mask.dims[1] {
            for x in 0..mask.dims[0] {
                if mask.at(x, y, z) > 0.5 {
                    for (a, c) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c + 1);
                    }
                }
            }
        }
    }
    for a in 0..3 {
        let want = min_side.min(mask.dims[a]);
        while hi[a] - lo[a] < want {
            if lo[a] > 0 && (hi[a] - lo[a]).is_multiple_of(2) || hi[a] == mask.dims[a] {
                lo[a] -= 1;
            } else {
                hi[a] += 1;
            }
        }
    }
    (lo, hi)
}

fn crop(v: &Volume, mask: &Volume, lo: [usize; 3], hi: [usize; 3], cfg: &SsimConfig) -> Grid {
    let dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut data = Vec::with_capacity(dims.iter().product());
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                let value = if mask.at(x, y, z) > 0.5 {
                    v.at(x, y, z)
                } else {
                    cfg.fill
                };
                data.push(value + cfg.offset);
            }
        }
    }
    Grid { dims, data }
}

/// Multi-scale SSIM on the mask's bounding-box crop with out-of-mask voxels
/// replaced by `cfg.fill`. Scales that do not fit are dropped (with a
/// warning) and the remaining weights renormalized.
pub fn ms_ssim(a: &Volume, b: &Volume, mask: &Volume, cfg: &SsimConfig) -> Result<MsSsim> {
    check_pair(a, b, mask)?;
    if cfg.scales == 0 || cfg.weights.len() < cfg.scales || cfg.window.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "invalid MS-SSIM configuration {cfg:?}"
        )));
    }
    let (lo, hi) = mask_box(mask, cfg.window);
    let min_side = (0..3).map(|i| hi[i] - lo[i]).min().unwrap();
    let mut scales = cfg.scales;
    while scales > 0 && min_side < cfg.window << (scales - 1) {
        scales -= 1;
    }
    if scales == 0 {
        return Err(Error::Data(format!(
            "mask region of side {min_side} is smaller than the {}-voxel SSIM window",
            cfg.window
        )));
    }
    if scales < cfg.scales {
        log::warn!(
            "ms_ssim: region side {min_side} supports {scales} of {} scales",
            cfg.scales
        );
    }
    let weights = &cfg.weights[..scales];
    let wsum: f64 = weights.iter().sum();
    let kernel = gaussian_kernel(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mut ga = crop(a, mask, lo, hi, cfg);
    let mut gb = crop(b, mask, lo, hi, cfg);
    let mut value = 1.0;
    for (s, w) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&ga, &gb, &kernel, c1, c2);
        let term = if s + 1 == scales { ssim } else { cs };
        value *= term.max(0.0).powf(w / wsum);
        if s + 1 < scales {
            ga = ga.downsample();
            gb = gb.downsample();
        }
    }
    Ok(MsSsim {
        value,
        scales_used: scales,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub mae: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub n_voxels: usize,
}

pub fn evaluate_case(
    case_id: &str,
    pred: &Volume,
    target: &Volume,
    mask: &Volume,
) -> Result<CaseMetrics> {
    if !pred.same_grid(target) || !pred.same_grid(mask) {
        return Err(Error::Data(format!(
            "{case_id}: grids differ (prediction dims {:?}, target dims {:?}, mask dims {:?})",
            pred.dims, target.dims, mask.dims
        )));
    }
    let n_voxels = check_pair(pred, target, mask)?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        mae: mae(pred, target, mask)?,
        psnr: psnr(pred, target, mask, HU_DATA_RANGE)?,
        ms_ssim: ms_ssim(pred, target, mask, &SsimConfig::default())?.value,
        n_voxels,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
}

impl MetricReport {
    pub fn mae(&self) -> MeanStd {
        MeanStd::of(self.cases.iter().map(|c| c.mae))
    }

    pub fn psnr(&self) -> MeanStd {
        MeanStd::of(self.cases.iter().map(|c| c.psnr))
    }

    pub fn ms_ssim(&self) -> MeanStd {
        MeanStd::of(self.cases.iter().map(|c| c.ms_ssim))
    }

    pub const CSV_HEADER: &'static str = "case_id,mae,psnr,ms_ssim,n_voxels";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.case_id, c.mae, c.psnr, c.ms_ssim, c.n_voxels
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::CSV_HEADER) {
            return Err(Error::Data(format!(
                "metric CSV must start with {}",
                Self::CSV_HEADER
            )));
        }
        let bad = |line: &str| Error::Data(format!("malformed metric row {line:?}"));
        let cases = lines
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(line));
                }
                Ok(CaseMetrics {
                    case_id: f[0].to_string(),
                    mae: f[1].parse().map_err(|_| bad(line))?,
                    psnr: f[2].parse().map_err(|_| bad(line))?,
                    ms_ssim: f[3].parse().map_err(|_| bad(line))?,
                    n_voxels: f[4].parse().map_err(|_| bad(line))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cases })
    }

    /// Per-case rows followed by `mean ± std`.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>10} {:>9} {:>8} {:>9}\n",
            "case", "MAE", "PSNR", "MS-SSIM", "voxels"
        );
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{:<16} {:>10.2} {:>9.2} {:>8.4} {:>9}",
                c.case_id, c.mae, c.psnr, c.ms_ssim, c.n_voxels
            );
        }
        let (m, p, s) = (self.mae(), self.psnr(), self.ms_ssim());
        let _ = writeln!(
            out,
            "mean ± std       MAE {:.2} ± {:.2}  PSNR {:.2} ± {:.2}  MS-SSIM {:.4} ± {:.4}  (n = {})",
            m.mean,
            m.std,
            p.mean,
            p.std,
            s.mean,
            s.std,
            self.cases.len()
        );
        out
    }
}
