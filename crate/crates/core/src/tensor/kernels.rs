//! Numeric kernels behind the differentiable ops.

use rayon::prelude::*;

use super::{Float, Shape};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Rows of the unfolded input (`Cin·kh·kw`).
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Columns of the unfolded input (`OH·OW`).
    pub fn n(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.n();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.n();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    x: &[T],
    batch: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (k, n) = (g.k(), g.n());
    let in_sz = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); batch * g.cout * n];
    out.par_chunks_mut(g.cout * n).enumerate().for_each(|(b, ob)| {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            let mut buf = vec![T::zero(); k * n];
            im2col(xb, g, &mut buf);
            owned = buf;
            &owned
        };
        T::gemm(
            g.cout,
            k,
            n,
            T::one(),
            (weight, k as isize, 1),
            (cols, n as isize, 1),
            T::zero(),
            (ob, n as isize, 1),
        );
        if let Some(bias) = bias {
            for (o, &bv) in ob.chunks_mut(n).zip(bias) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Per-image partial weight gradients are reduced in batch order so the
/// result does not depend on thread scheduling.
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    batch: usize,
    weight: &[T],
    gout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, n) = (g.k(), g.n());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * n;
    let (need_dx, need_dw, need_db) = need;

    let per_image: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let gb = &gout[b * out_sz..(b + 1) * out_sz];
            let dw = need_dw.then(|| {
                let owned;
                let cols: &[T] = if g.is_pointwise() {
                    xb
                } else {
                    let mut buf = vec![T::zero(); k * n];
                    im2col(xb, g, &mut buf);
                    owned = buf;
                    &owned
                };
                let mut dw = vec![T::zero(); g.cout * k];
                // dW[O,K] = dY[O,N] · colsᵀ[N,K]
                T::gemm(
                    g.cout,
                    n,
                    k,
                    T::one(),
                    (gb, n as isize, 1),
                    (cols, 1, n as isize),
                    T::zero(),
                    (&mut dw, k as isize, 1),
                );
                dw
            });
            let dx = need_dx.then(|| {
                let mut dx = vec![T::zero(); in_sz];
                if g.is_pointwise() {
                    T::gemm(
                        k,
                        g.cout,
                        n,
                        T::one(),
                        (weight, 1, k as isize),
                        (gb, n as isize, 1),
                        T::zero(),
                        (&mut dx, n as isize, 1),
                    );
                } else {
                    let mut dcols = vec![T::zero(); k * n];
                    // dcols[K,N] = Wᵀ[K,O] · dY[O,N]
                    T::gemm(
                        k,
                        g.cout,
                        n,
                        T::one(),
                        (weight, 1, k as isize),
                        (gb, n as isize, 1),
                        T::zero(),
                        (&mut dcols, n as isize, 1),
                    );
                    col2im(&dcols, g, &mut dx);
                }
                dx
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = need_dx.then(|| Vec::with_capacity(batch * in_sz));
    let mut dw_all = need_dw.then(|| vec![T::zero(); g.cout * k]);
    for (dx, dw) in per_image {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, &d)| *a += d);
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for b in 0..batch {
            for (o, d) in db.iter_mut().enumerate() {
                let start = b * out_sz + o * n;
                *d += gout[start..start + n].iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx: dx_all, dw: dw_all, db }
}

/// Windowed max pooling. Returns outputs and, per output, the flat in-plane
/// index of the selected input (first occurrence wins on ties).
pub(crate) fn max_pool<T: Float>(
    x: &[T],
    shape: Shape,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
) -> (Vec<T>, Vec<u32>) {
    let (h, w) = (shape.h(), shape.w());
    let planes = shape.b() * shape.c();
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    out.par_chunks_mut(oh * ow).zip(arg.par_chunks_mut(oh * ow)).enumerate().for_each(
        |(pi, (o, a))| {
            let plane = &x[pi * h * w..(pi + 1) * h * w];
            for oy in 0..oh {
                let y0 = (oy * s) as isize - p as isize;
                let ys = y0.max(0) as usize..((y0 + k as isize).min(h as isize)) as usize;
                for ox in 0..ow {
                    let x0 = (ox * s) as isize - p as isize;
                    let xs = x0.max(0) as usize..((x0 + k as isize).min(w as isize)) as usize;
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for y in ys.clone() {
                        for xx in xs.clone() {
                            let v = plane[y * w + xx];
                            if v > best {
                                best = v;
                                best_i = y * w + xx;
                            }
                        }
                    }
                    o[oy * ow + ox] = best;
                    a[oy * ow + ox] = best_i as u32;
                }
            }
        },
    );
    (out, arg)
}

/// Windowed average pooling; zero padding counts toward the divisor.
pub(crate) fn avg_pool<T: Float>(
    x: &[T],
    shape: Shape,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let (h, w) = (shape.h(), shape.w());
    let planes = shape.b() * shape.c();
    let inv = T::one() / T::cast_f64((k * k) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pi in 0..planes {
        let plane = &x[pi * h * w..(pi + 1) * h * w];
        for oy in 0..oh {
            let y0 = (oy * s) as isize - p as isize;
            for ox in 0..ow {
                let x0 = (ox * s) as isize - p as isize;
                let mut acc = T::zero();
                for y in y0.max(0)..(y0 + k as isize).min(h as isize) {
                    for xx in x0.max(0)..(x0 + k as isize).min(w as isize) {
                        acc += plane[y as usize * w + xx as usize];
                    }
                }
                out[pi * oh * ow + oy * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Float>(
    gout: &[T],
    shape: Shape,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let (h, w) = (shape.h(), shape.w());
    let planes = shape.b() * shape.c();
    let inv = T::one() / T::cast_f64((k * k) as f64);
    for pi in 0..planes {
        let plane = &mut dx[pi * h * w..(pi + 1) * h * w];
        for oy in 0..oh {
            let y0 = (oy * s) as isize - p as isize;
            for ox in 0..ow {
                let x0 = (ox * s) as isize - p as isize;
                let g = gout[pi * oh * ow + oy * ow + ox] * inv;
                for y in y0.max(0)..(y0 + k as isize).min(h as isize) {
                    for xx in x0.max(0)..(x0 + k as isize).min(w as isize) {
                        plane[y as usize * w + xx as usize] += g;
                    }
                }
            }
        }
    }
}

/// Adaptive pooling bin `[⌊i·n/out⌋, ⌈(i+1)·n/out⌉)`.
pub(crate) fn adaptive_bin(i: usize, n: usize, out: usize) -> (usize, usize) {
    let start = i * n / out;
    let end = ((i + 1) * n).div_ceil(out);
    (start, end)
}

/// Nearest-neighbour source index `⌊dst·n/out⌋`.
pub(crate) fn nearest_src(dst: usize, n: usize, out: usize) -> usize {
    dst * n / out
}
