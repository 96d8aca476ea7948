//! Deterministic paired phantoms: nested ellipsoidal tissues with a
//! structure-wise mapping from source intensity to target HU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prep::Modality;
use crate::volume::{IntensityKind, Volume};

pub const BACKGROUND_HU: f64 = -1024.0;

/// Tissue classes with their target HU and MR-like source intensity.
/// MR intensity increases with HU so that CT is a local function of the
/// source; bone must not share the dark end of the range with lung.
pub const TISSUES: [Tissue; 6] = [
    Tissue {
        name: "soft",
        hu: 40.0,
        mr: 650.0,
    },
    Tissue {
        name: "fat",
        hu: -100.0,
        mr: 300.0,
    },
    Tissue {
        name: "organ",
        hu: 180.0,
        mr: 800.0,
    },
    Tissue {
        name: "bone",
        hu: 900.0,
        mr: 1300.0,
    },
    Tissue {
        name: "lung",
        hu: -750.0,
        mr: 30.0,
    },
    Tissue {
        name: "fluid",
        hu: -10.0,
        mr: 500.0,
    },
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tissue {
    pub name: &'static str,
    pub hu: f64,
    pub mr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Voxel counts (x, y, z).
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Body plus nested tissue ellipsoids.
    pub n_ellipsoids: usize,
    pub modality: Modality,
    /// Multiplies texture noise, MR bias field and CBCT shading; 0 gives
    /// piecewise-constant volumes.
    pub noise_scale: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            shape: [32; 3],
            spacing: [1.0; 3],
            n_ellipsoids: 5,
            modality: Modality::Mr,
            noise_scale: 1.0,
        }
    }
}

/// Axis-aligned ellipsoid in voxel-index coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Index into [`TISSUES`].
    pub tissue: usize,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub source: Volume,
    pub target: Volume,
    pub mask: Volume,
    /// `ellipsoids[0]` is the body.
    pub ellipsoids: Vec<Ellipsoid>,
}

/// Sum of a few random low-frequency cosines, scaled to `amplitude`.
struct SmoothField {
    terms: Vec<([f64; 3], f64, f64)>,
    amplitude: f64,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, shape: [usize; 3], amplitude: f64, max_cycles: f64) -> Self {
        let terms = (0..4)
            .map(|_| {
                let k = std::array::from_fn(|a| {
                    rng.gen_range(-max_cycles..max_cycles) * std::f64::consts::TAU / shape[a] as f64
                });
                (
                    k,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.5..1.0),
                )
            })
            .collect();
        Self { terms, amplitude }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let norm: f64 = self.terms.iter().map(|t| t.2).sum();
        self.amplitude
            * self
                .terms
                .iter()
                .map(|(k, phase, w)| w * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
                .sum::<f64>()
            / norm
    }
}

pub fn generate_phantom_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    if spec.shape.iter().any(|&s| s < 8) {
        return Err(Error::Config(format!(
            "phantom shape {:?} must be at least 8 per axis",
            spec.shape
        )));
    }
    if spec.n_ellipsoids == 0 {
        return Err(Error::Config(
            "phantom needs at least the body ellipsoid".into(),
        ));
    }
    if !(spec.noise_scale >= 0.0) {
        return Err(Error::Config("noise_scale must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = spec.shape;
    let mid: [f64; 3] = shape.map(|s| (s as f64 - 1.0) / 2.0);

    // body fits strictly inside the grid: |offset| + semi-axis <= mid - 1
    let body_axes: [f64; 3] = shape.map(|s| s as f64 * rng.gen_range(0.36..0.44));
    let body_center: [f64; 3] = std::array::from_fn(|a| {
        let slack = (mid[a] - 1.0 - body_axes[a]).max(0.0);
        mid[a] + rng.gen_range(-slack..=slack)
    });
    let mut ellipsoids = vec![Ellipsoid {
        center: body_center,
        semi_axes: body_axes,
        tissue: 0,
    }];
    for _ in 1..spec.n_ellipsoids {
        let semi_axes: [f64; 3] = std::array::from_fn(|a| body_axes[a] * rng.gen_range(0.2..0.55));
        let center: [f64; 3] =
            std::array::from_fn(|a| body_center[a] + body_axes[a] * rng.gen_range(-0.5..0.5));
        let tissue = rng.gen_range(1..TISSUES.len());
        ellipsoids.push(Ellipsoid {
            center,
            semi_axes,
            tissue,
        });
    }

    let s = spec.noise_scale;
    let texture = SmoothField::new(&mut rng, shape, 12.0 * s, 3.0);
    let shading = SmoothField::new(&mut rng, shape, 120.0 * s, 1.0);
    let bias = SmoothField::new(&mut rng, shape, 0.08 * s, 1.0);
    let source_noise = SmoothField::new(&mut rng, shape, 15.0 * s, 4.0);

    let n: usize = shape.iter().product();
    let (mut source, mut target, mut mask) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let p = [x as f64, y as f64, z as f64];
                if !ellipsoids[0].contains(p) {
                    mask.push(0.0);
                    target.push(BACKGROUND_HU);
                    source.push(match spec.modality {
                        Modality::Mr => 0.0,
                        Modality::Cbct => BACKGROUND_HU,
                    });
                    continue;
                }
                let tissue = ellipsoids
                    .iter()
                    .rev()
                    .find(|e| e.contains(p))
                    .map_or(0, |e| e.tissue);
                let t = &TISSUES[tissue];
                let hu = (t.hu + texture.at(p)).clamp(-1024.0, 3071.0);
                mask.push(1.0);
                target.push(hu);
                source.push(match spec.modality {
                    Modality::Mr => (t.mr * (1.0 + bias.at(p)) + source_noise.at(p)).max(0.0),
                    Modality::Cbct => {
                        (hu + shading.at(p) + source_noise.at(p)).clamp(-1024.0, 3071.0)
                    }
                });
            }
        }
    }
    let origin = [0.0; 3];
    let source_kind = match spec.modality {
        Modality::Mr => IntensityKind::Raw,
        Modality::Cbct => IntensityKind::Hu,
    };
    Ok(PhantomPair {
        source: Volume::new(shape, spec.spacing, origin, source_kind, source)?,
        target: Volume::new(shape, spec.spacing, origin, IntensityKind::Hu, target)?,
        mask: Volume::new(shape, spec.spacing, origin, IntensityKind::Raw, mask)?,
        ellipsoids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec {
            seed: 3,
            shape: [16; 3],
            ..PhantomSpec::default()
        };
        assert_eq!(
            generate_phantom_pair(&spec).unwrap(),
            generate_phantom_pair(&spec).unwrap()
        );
        let other = PhantomSpec {
            seed: 4,
            ..spec.clone()
        };
        assert_ne!(
            generate_phantom_pair(&spec).unwrap().target,
            generate_phantom_pair(&other).unwrap().target
        );
    }

    #[test]
    fn mask_tracks_target_above_background() {
        for modality in [Modality::Mr, Modality::Cbct] {
            let p = generate_phantom_pair(&PhantomSpec {
                seed: 9,
                shape: [20, 18, 16],
                modality,
                ..PhantomSpec::default()
            })
            .unwrap();
            for (m, t) in p.mask.data.iter().zip(&p.target.data) {
                assert_eq!(*m > 0.5, *t > BACKGROUND_HU + 100.0);
            }
            assert!(p
                .target
                .data
                .iter()
                .all(|&t| (-1024.0..=3071.0).contains(&t)));
        }
    }

    #[test]
    fn mask_is_strictly_inside_bounds() {
        for seed in 0..20 {
            let p = generate_phantom_pair(&PhantomSpec {
                seed,
                shape: [16; 3],
                ..PhantomSpec::default()
            })
            .unwrap();
            let [nx, ny, nz] = p.mask.dims;
            let mut inside = 0;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if p.mask.at(x, y, z) > 0.5 {
                            inside += 1;
                            assert!(
                                x > 0 && y > 0 && z > 0 && x < nx - 1 && y < ny - 1 && z < nz - 1
                            );
                        }
                    }
                }
            }
            assert!(inside > 0);
        }
    }

    #[test]
    fn single_clean_ellipsoid() {
        let spec = PhantomSpec {
            seed: 5,
            shape: [24, 20, 16],
            n_ellipsoids: 1,
            noise_scale: 0.0,
            ..PhantomSpec::default()
        };
        let p = generate_phantom_pair(&spec).unwrap();
        let mut values: Vec<f64> = p.target.data.clone();
        values.sort_by(f64::total_cmp);
        values.dedup();
        assert_eq!(values, vec![BACKGROUND_HU, TISSUES[0].hu]);
        let body = p.ellipsoids[0];
        let [nx, ny, nz] = spec.shape;
        let mut analytic = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (dx, dy, dz) = (
                        (x as f64 - body.center[0]) / body.semi_axes[0],
                        (y as f64 - body.center[1]) / body.semi_axes[1],
                        (z as f64 - body.center[2]) / body.semi_axes[2],
                    );
                    analytic += (dx * dx + dy * dy + dz * dz <= 1.0) as usize;
                }
            }
        }
        let counted = p
            .target
            .data
            .iter()
            .filter(|&&v| v == TISSUES[0].hu)
            .count();
        assert_eq!(counted, analytic);
    }
}
