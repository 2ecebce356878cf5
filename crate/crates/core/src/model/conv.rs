//! im2col convolution kernels over single-sample `(C, H, W)` maps.
//!
//! Columns are materialized a band of output rows at a time so the scratch
//! buffer stays bounded for wide early layers.

use super::real::Real;
use super::ConvSpec;

const COLS_BUDGET: usize = 1 << 18;

fn band_rows(spec: &ConvSpec) -> usize {
    let k = spec.in_ch * spec.kernel * spec.kernel;
    (COLS_BUDGET / (k * spec.out_size).max(1)).clamp(1, spec.out_size.max(1))
}

fn im2col<T: Real>(spec: &ConvSpec, x: &[T], r0: usize, r1: usize, cols: &mut [T]) {
    let (h, w) = (spec.in_size, spec.in_size);
    let wo = spec.out_size;
    let n = (r1 - r0) * wo;
    let k = spec.kernel;
    for ci in 0..spec.in_ch {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in r0..r1 {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    let out = &mut dst[(oy - r0) * wo..(oy - r0 + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(spec: &ConvSpec, cols: &[T], r0: usize, r1: usize, dx: &mut [T]) {
    let (h, w) = (spec.in_size, spec.in_size);
    let wo = spec.out_size;
    let n = (r1 - r0) * wo;
    let k = spec.kernel;
    for ci in 0..spec.in_ch {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in r0..r1 {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let g = &src[(oy - r0) * wo..(oy - r0 + 1) * wo];
                    for (ox, &v) in g.iter().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out = conv(x, weight) + bias`, `out` laid out `(out_ch, out, out)`.
pub(crate) fn forward<T: Real>(spec: &ConvSpec, x: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let kdim = spec.in_ch * spec.kernel * spec.kernel;
    let plane = spec.out_size * spec.out_size;
    let band = band_rows(spec);
    let mut cols = vec![T::zero(); kdim * band * spec.out_size];
    let mut r0 = 0;
    while r0 < spec.out_size {
        let r1 = (r0 + band).min(spec.out_size);
        let n = (r1 - r0) * spec.out_size;
        im2col(spec, x, r0, r1, &mut cols[..kdim * n]);
        T::gemm(
            spec.out_ch,
            kdim,
            n,
            T::one(),
            weight,
            kdim,
            1,
            &cols[..kdim * n],
            n,
            1,
            T::zero(),
            &mut out[r0 * spec.out_size..],
            plane,
            1,
        );
        r0 = r1;
    }
    for (co, &b) in bias.iter().enumerate() {
        for v in &mut out[co * plane..(co + 1) * plane] {
            *v += b;
        }
    }
}

/// Accumulates weight and bias gradients; writes the input gradient into
/// `dx` (overwritten) when requested.
pub(crate) fn backward<T: Real>(
    spec: &ConvSpec,
    x: &[T],
    weight: &[T],
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let kdim = spec.in_ch * spec.kernel * spec.kernel;
    let plane = spec.out_size * spec.out_size;
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dout[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
    }
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(T::zero());
    }
    let band = band_rows(spec);
    let mut cols = vec![T::zero(); kdim * band * spec.out_size];
    let mut dcols = if dx.is_some() {
        vec![T::zero(); kdim * band * spec.out_size]
    } else {
        Vec::new()
    };
    let mut r0 = 0;
    while r0 < spec.out_size {
        let r1 = (r0 + band).min(spec.out_size);
        let n = (r1 - r0) * spec.out_size;
        let dslice = &dout[r0 * spec.out_size..];
        im2col(spec, x, r0, r1, &mut cols[..kdim * n]);
        // dW += dOut · colsᵀ
        T::gemm(
            spec.out_ch,
            n,
            kdim,
            T::one(),
            dslice,
            plane,
            1,
            &cols[..kdim * n],
            1,
            n,
            T::one(),
            dweight,
            kdim,
            1,
        );
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = Wᵀ · dOut
            T::gemm(
                kdim,
                spec.out_ch,
                n,
                T::one(),
                weight,
                1,
                kdim,
                dslice,
                plane,
                1,
                T::zero(),
                &mut dcols[..kdim * n],
                n,
                1,
            );
            col2im(spec, &dcols[..kdim * n], r0, r1, dx);
        }
        r0 = r1;
    }
}
