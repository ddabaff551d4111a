//! Data selection and arrangement.
//!
//! A [`CubeSelectParams`] copies a small cube out of a large cube into a dense
//! destination block. The source is indexed with `MH * MW` as its channel
//! stride, so by choosing the large-cube extents freely a single selection
//! can also express strided gathers (patch merge, patch extraction, window
//! reverse rows). Destinations are always dense, which is why row-level
//! rearrangements such as the cyclic roll need one selection per row segment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Dims3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DataMoveError {
    #[error("invalid selection parameters: {0}")]
    InvalidParams(String),
    #[error("source span {src:?} overlaps destination span {dst:?}")]
    Overlap { src: (usize, usize), dst: (usize, usize) },
    #[error("span {span:?} exceeds address space of {len} elements")]
    OutOfBounds { span: (usize, usize), len: usize },
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("cyclic shift of 0 is not a rearrangement")]
    ZeroShift,
    #[error("plan destinations overlap at selections {0} and {1}")]
    PlanOverlap(usize, usize),
}

/// The nine selection parameters plus the two address offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CubeSelectParams {
    pub mh: usize,
    pub mw: usize,
    pub mc: usize,
    pub sh: usize,
    pub sw: usize,
    pub sc: usize,
    pub fh: usize,
    pub fw: usize,
    pub fc: usize,
    pub src_offset: usize,
    pub dst_offset: usize,
}

impl CubeSelectParams {
    /// Select `small` at `offset` (both `(c, h, w)`) out of a `large` cube.
    pub fn new(large: (usize, usize, usize), small: (usize, usize, usize), offset: (usize, usize, usize)) -> Self {
        Self {
            mc: large.0,
            mh: large.1,
            mw: large.2,
            sc: small.0,
            sh: small.1,
            sw: small.2,
            fc: offset.0,
            fh: offset.1,
            fw: offset.2,
            src_offset: 0,
            dst_offset: 0,
        }
    }

    pub fn with_offsets(mut self, src: usize, dst: usize) -> Self {
        self.src_offset = src;
        self.dst_offset = dst;
        self
    }

    pub fn validate(&self) -> Result<(), DataMoveError> {
        let bad = |m: String| Err(DataMoveError::InvalidParams(m));
        if self.mh == 0 || self.mw == 0 || self.mc == 0 {
            return bad(format!(
                "large cube ({}, {}, {}) has an empty extent",
                self.mc, self.mh, self.mw
            ));
        }
        if self.sh == 0 || self.sw == 0 || self.sc == 0 {
            return bad(format!(
                "small cube ({}, {}, {}) has an empty extent",
                self.sc, self.sh, self.sw
            ));
        }
        for (name, s, f, m) in [
            ("H", self.sh, self.fh, self.mh),
            ("W", self.sw, self.fw, self.mw),
            ("C", self.sc, self.fc, self.mc),
        ] {
            if s + f > m {
                return bad(format!("S{name} {s} + F{name} {f} exceeds M{name} {m}"));
            }
        }
        Ok(())
    }

    pub fn elements(&self) -> usize {
        self.sc * self.sh * self.sw
    }

    /// Half-open span of source addresses touched.
    pub fn src_span(&self) -> (usize, usize) {
        let plane = self.mh * self.mw;
        let first = self.fc * plane + self.fh * self.mw + self.fw + self.src_offset;
        let last = (self.fc + self.sc - 1) * plane
            + (self.fh + self.sh - 1) * self.mw
            + (self.fw + self.sw - 1)
            + self.src_offset;
        (first, last + 1)
    }

    pub fn dst_span(&self) -> (usize, usize) {
        (self.dst_offset, self.dst_offset + self.elements())
    }
}

fn spans_overlap(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Copy the selected small cube into its dense destination block.
pub fn select_cube<T: Copy>(mem: &mut [T], p: &CubeSelectParams) -> Result<(), DataMoveError> {
    p.validate()?;
    let (src, dst) = (p.src_span(), p.dst_span());
    for span in [src, dst] {
        if span.1 > mem.len() {
            return Err(DataMoveError::OutOfBounds { span, len: mem.len() });
        }
    }
    if spans_overlap(src, dst) {
        return Err(DataMoveError::Overlap { src, dst });
    }
    let plane = p.mh * p.mw;
    for i in 0..p.sc {
        let mi = i + p.fc;
        for j in 0..p.sh {
            let mj = j + p.fh;
            // the innermost k loop is a contiguous run on both sides
            let from = mi * plane + mj * p.mw + p.fw + p.src_offset;
            let to = i * p.sh * p.sw + j * p.sw + p.dst_offset;
            mem.copy_within(from..from + p.sw, to);
        }
    }
    Ok(())
}

/// Selections executed back to back.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArrangePlan {
    pub selections: Vec<CubeSelectParams>,
}

impl ArrangePlan {
    pub fn total_elements(&self) -> usize {
        self.selections.iter().map(CubeSelectParams::elements).sum()
    }

    pub fn len(&self) -> usize {
        self.selections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selections.is_empty()
    }

    /// Shift every selection's source and destination offsets.
    pub fn rebased(mut self, src_base: usize, dst_base: usize) -> Self {
        for s in &mut self.selections {
            s.src_offset += src_base;
            s.dst_offset += dst_base;
        }
        self
    }

    /// Check parameters and that no two destinations overlap.
    pub fn validate(&self) -> Result<(), DataMoveError> {
        for s in &self.selections {
            s.validate()?;
        }
        let mut spans: Vec<(usize, usize, usize)> = self
            .selections
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (a, b) = s.dst_span();
                (a, b, i)
            })
            .collect();
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(DataMoveError::PlanOverlap(
                    pair[0].2.min(pair[1].2),
                    pair[0].2.max(pair[1].2),
                ));
            }
        }
        Ok(())
    }

    pub fn execute<T: Copy>(&self, mem: &mut [T]) -> Result<(), DataMoveError> {
        for s in &self.selections {
            select_cube(mem, s)?;
        }
        Ok(())
    }

    /// Run the plan against a standalone source, returning a fresh destination
    /// of `dst_len` elements. Offsets must be relative (source and destination
    /// both at 0).
    pub fn apply<T: Copy + Default>(&self, src: &[T], dst_len: usize) -> Result<Vec<T>, DataMoveError> {
        let mut mem = Vec::with_capacity(src.len() + dst_len);
        mem.extend_from_slice(src);
        mem.resize(src.len() + dst_len, T::default());
        self.clone().rebased(0, src.len()).execute(&mut mem)?;
        Ok(mem.split_off(src.len()))
    }

    /// True when the plan is a single verbatim copy of a whole cube.
    pub fn is_identity(&self) -> bool {
        match self.selections.as_slice() {
            [s] => {
                s.sc == s.mc
                    && s.sh == s.mh
                    && s.sw == s.mw
                    && s.fc == 0
                    && s.fh == 0
                    && s.fw == 0
                    && s.src_offset == s.dst_offset
            }
            _ => false,
        }
    }
}

fn check_window(dims: Dims3, window: usize) -> Result<(usize, usize), DataMoveError> {
    if window == 0 || !dims.h.is_multiple_of(window) || !dims.w.is_multiple_of(window) {
        return Err(DataMoveError::Geometry(format!(
            "feature map {}x{} is not divisible by window {window}",
            dims.h, dims.w
        )));
    }
    Ok((dims.h / window, dims.w / window))
}

/// Materialize every `window x window` window as a contiguous `(C, win, win)`
/// block, windows in row-major order.
pub fn window_partition_plan(dims: Dims3, window: usize) -> Result<ArrangePlan, DataMoveError> {
    let (rows, cols) = check_window(dims, window)?;
    let block = dims.c * window * window;
    let large = (dims.c, dims.h, dims.w);
    let selections = (0..rows)
        .flat_map(|wr| (0..cols).map(move |wc| (wr, wc)))
        .map(|(wr, wc)| {
            CubeSelectParams::new(large, (dims.c, window, window), (0, wr * window, wc * window))
                .with_offsets(0, (wr * cols + wc) * block)
        })
        .collect();
    Ok(ArrangePlan { selections })
}

/// Inverse of [`window_partition_plan`]: scatter window blocks back into a
/// `(C, H, W)` map. One selection per output row, gathering that row's
/// segments across the windows of one window-row.
pub fn window_reverse_plan(dims: Dims3, window: usize) -> Result<ArrangePlan, DataMoveError> {
    let (rows, cols) = check_window(dims, window)?;
    let area = window * window;
    // windows buffer seen as (1, windows, C * win * win)
    let large = (1, rows * cols, dims.c * area);
    let mut selections = Vec::with_capacity(dims.c * dims.h);
    for c in 0..dims.c {
        for h in 0..dims.h {
            let (wr, r) = (h / window, h % window);
            selections.push(
                CubeSelectParams::new(large, (1, cols, window), (0, wr * cols, c * area + r * window))
                    .with_offsets(0, c * dims.h * dims.w + h * dims.w),
            );
        }
    }
    Ok(ArrangePlan { selections })
}

/// Cyclic roll by `(-shift_h, -shift_w)`: `out[c,h,w] = in[c,(h+sh)%H,(w+sw)%W]`.
pub fn cyclic_roll_plan(dims: Dims3, shift_h: usize, shift_w: usize) -> Result<ArrangePlan, DataMoveError> {
    let (sh, sw) = (shift_h % dims.h, shift_w % dims.w);
    let large = (dims.c, dims.h, dims.w);
    let mut selections = Vec::with_capacity(2 * dims.c * dims.h);
    for c in 0..dims.c {
        for h in 0..dims.h {
            let from = (h + sh) % dims.h;
            let row = c * dims.h * dims.w + h * dims.w;
            selections.push(CubeSelectParams::new(large, (1, 1, dims.w - sw), (c, from, sw)).with_offsets(0, row));
            if sw > 0 {
                selections
                    .push(CubeSelectParams::new(large, (1, 1, sw), (c, from, 0)).with_offsets(0, row + dims.w - sw));
            }
        }
    }
    Ok(ArrangePlan { selections })
}

/// Shifted-window roll: the map moves up and left by `shift` with wrap-around.
pub fn cyclic_shift_plan(dims: Dims3, shift: usize) -> Result<ArrangePlan, DataMoveError> {
    if shift == 0 {
        return Err(DataMoveError::ZeroShift);
    }
    if shift >= dims.h || shift >= dims.w {
        return Err(DataMoveError::Geometry(format!(
            "shift {shift} must be smaller than the {}x{} map",
            dims.h, dims.w
        )));
    }
    cyclic_roll_plan(dims, shift, shift)
}

/// Undo [`cyclic_shift_plan`].
pub fn cyclic_unshift_plan(dims: Dims3, shift: usize) -> Result<ArrangePlan, DataMoveError> {
    if shift == 0 {
        return Err(DataMoveError::ZeroShift);
    }
    if shift >= dims.h || shift >= dims.w {
        return Err(DataMoveError::Geometry(format!(
            "shift {shift} must be smaller than the {}x{} map",
            dims.h, dims.w
        )));
    }
    cyclic_roll_plan(dims, dims.h - shift, dims.w - shift)
}

/// Gather the four 2x2-strided sub-grids into `(4C, H/2, W/2)`, channel
/// blocks ordered (even row, even col), (odd, even), (even, odd), (odd, odd).
pub fn patch_merge_plan(dims: Dims3) -> Result<ArrangePlan, DataMoveError> {
    if !dims.h.is_multiple_of(2) || !dims.w.is_multiple_of(2) {
        return Err(DataMoveError::InvalidParams(format!(
            "patch merge needs even H and W, got {}x{}",
            dims.h, dims.w
        )));
    }
    let (oh, ow) = (dims.h / 2, dims.w / 2);
    // rows of width 2W pair up an even and an odd input row; columns pair up
    // as (even, odd) through MW = 2
    let large = (dims.c * oh, dims.w, 2);
    let block = dims.c * oh * ow;
    let selections = [(0, 0), (1, 0), (0, 1), (1, 1)]
        .into_iter()
        .enumerate()
        .map(|(g, (dr, dc))| {
            CubeSelectParams::new(large, (dims.c * oh, ow, 1), (0, dr * ow, dc)).with_offsets(0, g * block)
        })
        .collect();
    Ok(ArrangePlan { selections })
}

/// Extract non-overlapping `patch x patch` patches into a `(C*p*p, H/p, W/p)`
/// feature map. Feature `c*p*p + kh*p + kw` holds pixel `(c, kh, kw)` of each
/// patch.
pub fn patch_gather_plan(dims: Dims3, patch: usize) -> Result<ArrangePlan, DataMoveError> {
    if patch == 0 || !dims.h.is_multiple_of(patch) || !dims.w.is_multiple_of(patch) {
        return Err(DataMoveError::Geometry(format!(
            "image {}x{} is not divisible by patch size {patch}",
            dims.h, dims.w
        )));
    }
    let (oh, ow) = (dims.h / patch, dims.w / patch);
    let large = (dims.c * oh, dims.w, patch);
    let mut selections = Vec::with_capacity(dims.c * patch * patch);
    for c in 0..dims.c {
        for kh in 0..patch {
            for kw in 0..patch {
                let f = (c * patch + kh) * patch + kw;
                selections.push(
                    CubeSelectParams::new(large, (oh, ow, 1), (c * oh, kh * ow, kw)).with_offsets(0, f * oh * ow),
                );
            }
        }
    }
    Ok(ArrangePlan { selections })
}
