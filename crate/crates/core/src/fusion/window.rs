//! Window partitioning for (shifted) window attention.
//!
//! Windows are token sequences laid out as `(B·nW, 1, M·M, C)` so that layer
//! norm and linear layers act on the last axis. The source may be a feature
//! map `(B, C, H, W)` or a token tensor `(B, 1, H·W, C)`.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Float, Shape, Tape, Var, GATHER_ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `(B, C, H, W)`
    Map,
    /// `(B, 1, H·W, C)`, row-major over `(y, x)`.
    Tokens,
}

/// Geometry of a window tiling, independent of any tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tiling {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub shift: usize,
}

impl Tiling {
    pub fn new(b: usize, c: usize, h: usize, w: usize, m: usize, shift: usize) -> Result<Self> {
        if m == 0 {
            return Err(shape_err!("window size must be >= 1"));
        }
        if shift >= m {
            return Err(shape_err!("shift {shift} must be smaller than the window {m}"));
        }
        Ok(Tiling { b, c, h, w, m, shift })
    }

    pub fn padded(&self) -> (usize, usize) {
        (self.h.div_ceil(self.m) * self.m, self.w.div_ceil(self.m) * self.m)
    }

    pub fn windows_per_image(&self) -> usize {
        let (hp, wp) = self.padded();
        (hp / self.m) * (wp / self.m)
    }

    pub fn tokens(&self) -> usize {
        self.m * self.m
    }

    pub fn window_shape(&self) -> Shape {
        Shape::new(self.b * self.windows_per_image(), 1, self.tokens(), self.c)
    }

    fn origin_shape(&self, layout: Layout) -> Shape {
        match layout {
            Layout::Map => Shape::new(self.b, self.c, self.h, self.w),
            Layout::Tokens => Shape::new(self.b, 1, self.h * self.w, self.c),
        }
    }

    fn src_offset(&self, layout: Layout, b: usize, c: usize, y: usize, x: usize) -> usize {
        match layout {
            Layout::Map => ((b * self.c + c) * self.h + y) * self.w + x,
            Layout::Tokens => ((b * self.h + y) * self.w + x) * self.c + c,
        }
    }

    /// Padded-grid coordinate of token `t` in window `win` (cyclic shift applied).
    pub fn padded_coord(&self, win: usize, t: usize) -> (usize, usize) {
        let (hp, wp) = self.padded();
        let nwx = wp / self.m;
        let (wy, wx) = (win / nwx, win % nwx);
        let (ty, tx) = (t / self.m, t % self.m);
        ((wy * self.m + ty + self.shift) % hp, (wx * self.m + tx + self.shift) % wp)
    }

    /// For each window element, the flat source offset or [`GATHER_ZERO`] on padding.
    pub fn partition_index(&self, layout: Layout) -> Vec<u32> {
        let nw = self.windows_per_image();
        let t = self.tokens();
        let mut idx = Vec::with_capacity(self.b * nw * t * self.c);
        for b in 0..self.b {
            for win in 0..nw {
                for ti in 0..t {
                    let (y, x) = self.padded_coord(win, ti);
                    for c in 0..self.c {
                        idx.push(if y < self.h && x < self.w {
                            self.src_offset(layout, b, c, y, x) as u32
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
        idx
    }

    /// For each origin element, its flat offset in the window tensor.
    pub fn reverse_index(&self, layout: Layout) -> Vec<u32> {
        let (hp, wp) = self.padded();
        let nwx = wp / self.m;
        let nw = self.windows_per_image();
        let t = self.tokens();
        let shape = self.origin_shape(layout);
        let mut idx = vec![0u32; shape.numel()];
        for b in 0..self.b {
            for y in 0..self.h {
                for x in 0..self.w {
                    let sy = (y + hp - self.shift) % hp;
                    let sx = (x + wp - self.shift) % wp;
                    let win = (sy / self.m) * nwx + sx / self.m;
                    let ti = (sy % self.m) * self.m + sx % self.m;
                    for c in 0..self.c {
                        let dst = ((b * nw + win) * t + ti) * self.c + c;
                        idx[self.src_offset(layout, b, c, y, x)] = dst as u32;
                    }
                }
            }
        }
        idx
    }

    /// Region label of every padded-grid cell for the shifted-window mask:
    /// cells that wrap around in the cyclic shift form their own regions.
    pub fn region_labels(&self) -> Vec<usize> {
        let (hp, wp) = self.padded();
        let band = |i: usize, n: usize| -> usize {
            if self.shift == 0 || i < n - self.m {
                0
            } else if i < n - self.shift {
                1
            } else {
                2
            }
        };
        let mut labels = vec![0; hp * wp];
        for y in 0..hp {
            for x in 0..wp {
                labels[y * wp + x] = band(y, hp) * 3 + band(x, wp);
            }
        }
        labels
    }

    /// Additive attention mask `(B·nW, 1, T, T)`: 0 within a region, `fill`
    /// across regions. `None` when no pair is masked.
    pub fn attention_mask<T: Float>(&self, fill: f64) -> Option<(Shape, Vec<T>)> {
        if self.shift == 0 {
            return None;
        }
        let (_, wp) = self.padded();
        let labels = self.region_labels();
        let nw = self.windows_per_image();
        let t = self.tokens();
        let mut per_image = Vec::with_capacity(nw * t * t);
        for win in 0..nw {
            let lab: Vec<usize> = (0..t)
                .map(|ti| {
                    let (y, x) = self.padded_coord(win, ti);
                    labels[y * wp + x]
                })
                .collect();
            for i in 0..t {
                for j in 0..t {
                    per_image.push(if lab[i] == lab[j] { T::zero() } else { T::cast_f64(fill) });
                }
            }
        }
        let mut data = Vec::with_capacity(self.b * per_image.len());
        for _ in 0..self.b {
            data.extend_from_slice(&per_image);
        }
        Some((Shape::new(self.b * nw, 1, t, t), data))
    }
}

/// A window tensor on a tape together with the tiling that produced it.
#[derive(Clone, Copy, Debug)]
pub struct WindowGrid {
    pub windows: Var,
    pub tiling: Tiling,
    pub layout: Layout,
}

/// Pads to multiples of `m`, cyclically shifts by `−shift`, and tiles into
/// `m×m` windows.
pub fn window_partition<T: Float>(tape: &mut Tape<T>, x: Var, m: usize, shift: usize, layout: Layout) -> Result<WindowGrid> {
    let s = tape.shape(x);
    let tiling = match layout {
        Layout::Map => Tiling::new(s.b(), s.c(), s.h(), s.w(), m, shift)?,
        Layout::Tokens => return Err(shape_err!("token layout needs explicit (H, W); use partition_tokens")),
    };
    partition_with(tape, x, tiling, layout)
}

/// Token-layout partition of a `(B, 1, h·w, C)` tensor.
pub fn partition_tokens<T: Float>(tape: &mut Tape<T>, x: Var, h: usize, w: usize, m: usize, shift: usize) -> Result<WindowGrid> {
    let s = tape.shape(x);
    if s.c() != 1 || s.h() != h * w {
        return Err(shape_err!("expected (B, 1, {}, C) tokens, got {s:?}", h * w));
    }
    partition_with(tape, x, Tiling::new(s.b(), s.w(), h, w, m, shift)?, Layout::Tokens)
}

fn partition_with<T: Float>(tape: &mut Tape<T>, x: Var, tiling: Tiling, layout: Layout) -> Result<WindowGrid> {
    let idx: Arc<[u32]> = tiling.partition_index(layout).into();
    let windows = tape.gather(x, idx, tiling.window_shape())?;
    Ok(WindowGrid { windows, tiling, layout })
}

/// Exact inverse of [`window_partition`]: un-tiles, un-shifts and crops.
pub fn window_reverse<T: Float>(tape: &mut Tape<T>, g: &WindowGrid) -> Result<Var> {
    reverse_var(tape, g.windows, g)
}

/// Reverses an arbitrary tensor carrying the grid's window layout.
pub fn reverse_var<T: Float>(tape: &mut Tape<T>, windows: Var, g: &WindowGrid) -> Result<Var> {
    let s = tape.shape(windows);
    if s != g.tiling.window_shape() {
        return Err(Error::Contract(format!(
            "window tensor {s:?} does not match tiling {:?}",
            g.tiling.window_shape()
        )));
    }
    let idx: Arc<[u32]> = g.tiling.reverse_index(g.layout).into();
    tape.gather(windows, idx, g.tiling.origin_shape(g.layout))
}

/// `(B, C, H, W)` → `(B, 1, H·W, C)`.
pub fn map_to_tokens<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let (c, hw) = (s.c(), s.plane());
    let mut idx = Vec::with_capacity(s.numel());
    for b in 0..s.b() {
        for p in 0..hw {
            for ch in 0..c {
                idx.push(((b * c + ch) * hw + p) as u32);
            }
        }
    }
    tape.gather(x, idx.into(), [s.b(), 1, hw, c])
}

/// `(B, 1, h·w, C)` → `(B, C, h, w)`.
pub fn tokens_to_map<T: Float>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x);
    if s.c() != 1 || s.h() != h * w {
        return Err(shape_err!("expected (B, 1, {}, C) tokens, got {s:?}", h * w));
    }
    let (c, hw) = (s.w(), h * w);
    let mut idx = Vec::with_capacity(s.numel());
    for b in 0..s.b() {
        for ch in 0..c {
            for p in 0..hw {
                idx.push(((b * hw + p) * c + ch) as u32);
            }
        }
    }
    tape.gather(x, idx.into(), [s.b(), c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_window_of_raster() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 4, 4], |[_, _, y, x]| (y * 4 + x) as f32));
        let g = window_partition(&mut tape, x, 2, 0, Layout::Map).unwrap();
        let v = tape.value(g.windows);
        assert_eq!(v.shape(), Shape::new(4, 1, 4, 1));
        assert_eq!(&v.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn padded_round_trip() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 5, 7], |[b, c, y, x]| (b * 1000 + c * 100 + y * 10 + x) as f32));
        for shift in [0, 1] {
            let g = window_partition(&mut tape, x, 2, shift, Layout::Map).unwrap();
            let r = window_reverse(&mut tape, &g).unwrap();
            assert_eq!(tape.value(r), tape.value(x));
        }
    }

    #[test]
    fn token_layout_round_trip() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([1, 4, 3, 5], |[_, c, y, x]| (c * 100 + y * 10 + x) as f32));
        let t = map_to_tokens(&mut tape, x).unwrap();
        let g = partition_tokens(&mut tape, t, 3, 5, 2, 1).unwrap();
        let back = window_reverse(&mut tape, &g).unwrap();
        let m = tokens_to_map(&mut tape, back, 3, 5).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }
}
