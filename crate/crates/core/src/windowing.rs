//! Rectangle-window partition/merge and cyclic shifts on channel-last `[H, W, C]` maps.
//!
//! All three operations are pure index permutations, so each is expressed as an
//! index table that can be applied either to a plain [`Tensor`] or recorded on a
//! [`Graph`] as a gather.

use crate::error::{CstError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub win_h: usize,
    pub win_w: usize,
    /// Windows per column and per row of the padded map.
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_windows: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub shift: (usize, usize),
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, win_h: usize, win_w: usize) -> Self {
        assert!(win_h >= 1 && win_w >= 1, "window dims must be positive");
        let grid_h = height.div_ceil(win_h);
        let grid_w = width.div_ceil(win_w);
        WindowLayout {
            height,
            width,
            win_h,
            win_w,
            grid_h,
            grid_w,
            n_windows: grid_h * grid_w,
            pad_h: grid_h * win_h - height,
            pad_w: grid_w * win_w - width,
            shift: (0, 0),
        }
    }

    pub fn with_shift(mut self, dy: usize, dx: usize) -> Self {
        self.shift = (dy, dx);
        self
    }

    pub fn tokens(&self) -> usize {
        self.win_h * self.win_w
    }

    /// Index table mapping `[N, h*w, C]` windows onto an `[H, W, C]` source; padded
    /// positions replicate the nearest edge pixel.
    pub fn partition_index(&self, channels: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.n_windows * self.tokens() * channels);
        for wy in 0..self.grid_h {
            for wx in 0..self.grid_w {
                for ty in 0..self.win_h {
                    let y = (wy * self.win_h + ty).min(self.height - 1);
                    for tx in 0..self.win_w {
                        let x = (wx * self.win_w + tx).min(self.width - 1);
                        let base = (y * self.width + x) * channels;
                        idx.extend(base..base + channels);
                    }
                }
            }
        }
        idx
    }

    /// Index table mapping an `[H, W, C]` output back from `[N, h*w, C]` windows.
    pub fn merge_index(&self, channels: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.height * self.width * channels);
        let t = self.tokens();
        for y in 0..self.height {
            for x in 0..self.width {
                let win = (y / self.win_h) * self.grid_w + x / self.win_w;
                let tok = (y % self.win_h) * self.win_w + x % self.win_w;
                let base = (win * t + tok) * channels;
                idx.extend(base..base + channels);
            }
        }
        idx
    }
}

/// Index table for a toroidal roll: `out[y][x] = in[(y - dy) mod H][(x - dx) mod W]`.
pub fn shift_index(height: usize, width: usize, channels: usize, dy: isize, dx: isize) -> Vec<usize> {
    let (h, w) = (height as isize, width as isize);
    let mut idx = Vec::with_capacity(height * width * channels);
    for y in 0..h {
        let sy = (y - dy).rem_euclid(h) as usize;
        for x in 0..w {
            let sx = (x - dx).rem_euclid(w) as usize;
            let base = (sy * width + sx) * channels;
            idx.extend(base..base + channels);
        }
    }
    idx
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected an [H, W, C] map, got {:?}", shape);
    (shape[0], shape[1], shape[2])
}

fn apply(t: &Tensor, index: &[usize], shape: Vec<usize>) -> Tensor {
    let d = t.data();
    Tensor::new(shape, index.iter().map(|&i| d[i]).collect())
}

/// Splits an `[H, W, C]` map into `[N, win_h*win_w, C]` windows, row-major over windows
/// and over tokens within a window.
pub fn partition_rect(x: &Tensor, win_h: usize, win_w: usize) -> (Tensor, WindowLayout) {
    let (h, w, c) = dims3(x.shape());
    let layout = WindowLayout::new(h, w, win_h, win_w);
    let out = apply(
        x,
        &layout.partition_index(c),
        vec![layout.n_windows, layout.tokens(), c],
    );
    (out, layout)
}

/// Inverse of [`partition_rect`] on the unpadded region.
pub fn merge_rect(windows: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    let s = windows.shape();
    if s.len() != 3 || s[0] != layout.n_windows || s[1] != layout.tokens() {
        return Err(CstError::Geometry(format!(
            "windows {:?} inconsistent with layout of {} windows x {} tokens",
            s,
            layout.n_windows,
            layout.tokens()
        )));
    }
    let c = s[2];
    Ok(apply(
        windows,
        &layout.merge_index(c),
        vec![layout.height, layout.width, c],
    ))
}

pub fn cyclic_shift(x: &Tensor, dy: isize, dx: isize) -> Tensor {
    let (h, w, c) = dims3(x.shape());
    apply(x, &shift_index(h, w, c, dy, dx), vec![h, w, c])
}

pub fn partition_var(g: &mut Graph, x: Var, win_h: usize, win_w: usize) -> (Var, WindowLayout) {
    let (h, w, c) = dims3(g.shape(x));
    let layout = WindowLayout::new(h, w, win_h, win_w);
    let v = g.gather(&[x], layout.partition_index(c), &[layout.n_windows, layout.tokens(), c]);
    (v, layout)
}

pub fn merge_var(g: &mut Graph, windows: Var, layout: &WindowLayout) -> Var {
    let c = g.shape(windows)[2];
    g.gather(&[windows], layout.merge_index(c), &[layout.height, layout.width, c])
}

pub fn shift_var(g: &mut Graph, x: Var, dy: isize, dx: isize) -> Var {
    let (h, w, c) = dims3(g.shape(x));
    if dy == 0 && dx == 0 {
        return x;
    }
    g.gather(&[x], shift_index(h, w, c, dy, dx), &[h, w, c])
}
