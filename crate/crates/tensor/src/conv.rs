//! 3D cross-correlation kernels (im2col + GEMM).

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis.
pub fn conv3d_output_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        x: &Tensor<impl Scalar>,
        w: &Tensor<impl Scalar>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        x.expect_rank(5, "conv3d input")?;
        w.expect_rank(5, "conv3d kernel")?;
        let xs = x.shape();
        let ws = w.shape();
        if xs[1] != ws[1] {
            return Err(TensorError::AxisMismatch {
                op: "conv3d",
                axis: 1,
                expected: ws[1],
                found: xs[1],
            });
        }
        let k = ws[2];
        if k.is_multiple_of(2) || ws[3] != k || ws[4] != k {
            return Err(TensorError::Config(format!(
                "conv3d kernel must be cubic with odd side, got {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv3d stride must be >= 1".into()));
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = conv3d_output_extent(xs[2 + axis], k, stride, pad).ok_or(
                TensorError::AxisMismatch {
                    op: "conv3d",
                    axis: 2 + axis,
                    expected: k,
                    found: xs[2 + axis] + 2 * pad,
                },
            )?;
        }
        Ok(Self {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            k,
            stride,
            pad,
            input: [xs[2], xs[3], xs[4]],
            output,
        })
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.cout,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Output z-planes per im2col tile, sized to keep the tile cache-resident.
    fn tile_planes(&self) -> usize {
        let budget = (1 << 18) / self.rows().max(1);
        (budget / self.plane()).clamp(1, self.output[0])
    }

    /// Calls `f(row, col_offset, in_offset, len, in_step)` for every run of
    /// in-bounds taps of output planes `z0..z1`; column offsets are relative
    /// to the tile.
    fn for_each_run(
        &self,
        z0: usize,
        z1: usize,
        mut f: impl FnMut(usize, usize, usize, usize, usize),
    ) {
        let [id, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let k = self.k;
        let s = self.stride as isize;
        let p = self.pad as isize;
        for ci in 0..self.cin {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        // output x range whose input x lies inside [0, iw)
                        let off = kw as isize - p;
                        let x_lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s } as usize;
                        let x_hi = ((iw as isize - 1 - off).div_euclid(s) + 1).clamp(0, ow as isize)
                            as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        for z in z0..z1 {
                            let zi = z as isize * s - p + kd as isize;
                            if zi < 0 || zi >= id as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let yi = y as isize * s - p + kh as isize;
                                if yi < 0 || yi >= ih as isize {
                                    continue;
                                }
                                let col = ((z - z0) * oh + y) * ow + x_lo;
                                let xi = x_lo as isize * s + off;
                                let inp =
                                    ((ci * id + zi as usize) * ih + yi as usize) * iw + xi as usize;
                                f(row, col, inp, x_hi - x_lo, self.stride);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], z0: usize, z1: usize, col: &mut [T]) {
        let p = (z1 - z0) * self.plane();
        col.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_run(z0, z1, |row, c, i, len, step| {
            let dst = &mut col[row * p + c..row * p + c + len];
            if step == 1 {
                dst.copy_from_slice(&x[i..i + len]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = x[i + j * step];
                }
            }
        });
    }

    fn col2im<T: Scalar>(&self, col: &[T], z0: usize, z1: usize, dx: &mut [T]) {
        let p = (z1 - z0) * self.plane();
        self.for_each_run(z0, z1, |row, c, i, len, step| {
            let src = &col[row * p + c..row * p + c + len];
            for (j, &v) in src.iter().enumerate() {
                let t = &mut dx[i + j * step];
                *t = *t + v;
            }
        });
    }

    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.tile_planes();
        let od = self.output[0];
        (0..od)
            .step_by(step)
            .map(move |z0| (z0, (z0 + step).min(od)))
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    geom: &ConvGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let p = geom.out_voxels();
    let r = geom.rows();
    let in_stride = geom.cin * geom.in_voxels();
    let out_stride = geom.cout * p;
    let mut out = vec![T::zero(); geom.batch * out_stride];
    let mut col = Vec::new();
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    for n in 0..geom.batch {
        let xn = &x.data()[n * in_stride..(n + 1) * in_stride];
        let yn = &mut out[n * out_stride..(n + 1) * out_stride];
        if let Some(b) = bias {
            for (co, chunk) in yn.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[co]);
            }
        }
        if geom.is_pointwise() {
            T::gemm(
                geom.cout,
                r,
                p,
                T::one(),
                w.data(),
                (r as isize, 1),
                xn,
                (p as isize, 1),
                beta,
                yn,
                (p as isize, 1),
            );
            continue;
        }
        for (z0, z1) in geom.tiles() {
            let tile = (z1 - z0) * geom.plane();
            col.resize(r * tile, T::zero());
            geom.im2col(xn, z0, z1, &mut col);
            let off = z0 * geom.plane();
            T::gemm(
                geom.cout,
                r,
                tile,
                T::one(),
                w.data(),
                (r as isize, 1),
                &col,
                (tile as isize, 1),
                beta,
                &mut yn[off..],
                (p as isize, 1),
            );
        }
    }
    Tensor::from_vec(geom.output_shape(), out).expect("conv output sized from geometry")
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv3d_backward<T: Scalar>(
    geom: &ConvGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let p = geom.out_voxels();
    let r = geom.rows();
    let in_stride = geom.cin * geom.in_voxels();
    let out_stride = geom.cout * p;
    let mut dx = need_dx.then(|| vec![T::zero(); geom.batch * in_stride]);
    let mut dw = need_dw.then(|| vec![T::zero(); geom.cout * r]);
    let mut db = need_db.then(|| vec![T::zero(); geom.cout]);
    let mut col = Vec::new();
    for n in 0..geom.batch {
        let dyn_ = &dy[n * out_stride..(n + 1) * out_stride];
        let xn = &x.data()[n * in_stride..(n + 1) * in_stride];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dyn_.chunks(p).enumerate() {
                let s: f64 = chunk.iter().map(|v| v.f64()).sum();
                db[co] = db[co] + T::of(s);
            }
        }
        if geom.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                // dW += dY · xᵀ
                T::gemm(
                    geom.cout,
                    p,
                    r,
                    T::one(),
                    dyn_,
                    (p as isize, 1),
                    xn,
                    (1, p as isize),
                    T::one(),
                    dw,
                    (r as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * in_stride..(n + 1) * in_stride];
                T::gemm(
                    r,
                    geom.cout,
                    p,
                    T::one(),
                    w.data(),
                    (1, r as isize),
                    dyn_,
                    (p as isize, 1),
                    T::zero(),
                    dxn,
                    (p as isize, 1),
                );
            }
            continue;
        }
        for (z0, z1) in geom.tiles() {
            let tile = (z1 - z0) * geom.plane();
            let off = z0 * geom.plane();
            col.resize(r * tile, T::zero());
            if let Some(dw) = dw.as_mut() {
                geom.im2col(xn, z0, z1, &mut col);
                // dW += dY · colᵀ
                T::gemm(
                    geom.cout,
                    tile,
                    r,
                    T::one(),
                    &dyn_[off..],
                    (p as isize, 1),
                    &col,
                    (1, tile as isize),
                    T::one(),
                    dw,
                    (r as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcol = Wᵀ · dY, scattered back onto the input grid
                T::gemm(
                    r,
                    geom.cout,
                    tile,
                    T::one(),
                    w.data(),
                    (1, r as isize),
                    &dyn_[off..],
                    (p as isize, 1),
                    T::zero(),
                    &mut col,
                    (tile as isize, 1),
                );
                geom.col2im(&col, z0, z1, &mut dx[n * in_stride..(n + 1) * in_stride]);
            }
        }
    }
    ConvGrads { dx, dw, db }
}
