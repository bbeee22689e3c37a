//! Canvas state, patch projections and the randomized coverage planner.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::Patch;

/// The large latent state `y_t`, shaped `(channels, height, width)`.
pub type LatentCanvas = Patch;

/// An axis-aligned rectangular crop of the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchProjection {
    pub row0: usize,
    pub col0: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchProjection {
    pub fn new(row0: usize, col0: usize, patch_h: usize, patch_w: usize) -> Self {
        PatchProjection {
            row0,
            col0,
            patch_h,
            patch_w,
        }
    }

    /// The projection covering a whole `height x width` canvas.
    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, height, width)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row0 + self.patch_h).contains(&row) && (self.col0..self.col0 + self.patch_w).contains(&col)
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.patch_h == 0
            || self.patch_w == 0
            || self.row0 + self.patch_h > height
            || self.col0 + self.patch_w > width
        {
            return Err(Error::OutOfBounds {
                row0: self.row0,
                col0: self.col0,
                patch_h: self.patch_h,
                patch_w: self.patch_w,
                height,
                width,
            });
        }
        Ok(())
    }

    fn rows(&self) -> std::ops::Range<usize> {
        self.row0..self.row0 + self.patch_h
    }

    fn cols(&self) -> std::ops::Range<usize> {
        self.col0..self.col0 + self.patch_w
    }
}

/// Per-pixel time index `L_t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeStateGrid {
    states: Array2<usize>,
}

impl TimeStateGrid {
    /// Every pixel at `t`.
    pub fn new(height: usize, width: usize, t: usize) -> Self {
        TimeStateGrid {
            states: Array2::from_elem((height, width), t),
        }
    }

    pub fn states(&self) -> &Array2<usize> {
        &self.states
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.states[[row, col]]
    }

    pub fn all_equal(&self, t: usize) -> bool {
        self.states.iter().all(|&v| v == t)
    }

    /// Sorted distinct time indices present.
    pub fn distinct(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.states.iter().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Ordered crops for one outer step; ordinal order is write priority.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoveragePlan {
    pub projections: Vec<PatchProjection>,
}

impl CoveragePlan {
    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    /// Checks full coverage and that every crop adds at least one new pixel.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let mut covered = Array2::from_elem((height, width), false);
        for (j, p) in self.projections.iter().enumerate() {
            p.check_bounds(height, width)?;
            let mut fresh = false;
            covered.slice_mut(s![p.rows(), p.cols()]).map_inplace(|c| {
                fresh |= !*c;
                *c = true;
            });
            if !fresh {
                return Err(Error::InvariantBreach(format!("projection {j} adds no new pixel")));
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::InvariantBreach("plan leaves pixels uncovered".into()));
        }
        Ok(())
    }

    /// Audit dump: `ordinal,row0,col0` per line with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ordinal,row0,col0\n");
        for (j, p) in self.projections.iter().enumerate() {
            out.push_str(&format!("{j},{},{}\n", p.row0, p.col0));
        }
        out
    }
}

/// Random cover of a `height x width` canvas by `patch_h x patch_w` crops.
///
/// Repeatedly picks a uniformly random uncovered pixel and then a uniformly
/// random in-bounds crop containing it, until every pixel is covered. Every
/// crop therefore adds a new pixel, and poorly covered regions attract crops.
/// The planner never sees canvas values.
pub fn plan_coverage<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    patch_h: usize,
    patch_w: usize,
    rng: &mut R,
) -> Result<CoveragePlan> {
    if patch_h == 0 || patch_w == 0 || patch_h > height || patch_w > width {
        return Err(Error::InvalidArgument(format!(
            "{patch_h}x{patch_w} patch does not fit a {height}x{width} canvas"
        )));
    }
    let n = height * width;
    // `uncovered[..remaining]` lists uncovered pixels; `slot` is the inverse map.
    let mut uncovered: Vec<usize> = (0..n).collect();
    let mut slot: Vec<usize> = (0..n).collect();
    let mut remaining = n;
    let mut plan = CoveragePlan::default();

    while remaining > 0 {
        let pick = uncovered[rng.random_range(0..remaining)];
        let (r, c) = (pick / width, pick % width);
        let row0 = rng.random_range(r.saturating_sub(patch_h - 1)..=r.min(height - patch_h));
        let col0 = rng.random_range(c.saturating_sub(patch_w - 1)..=c.min(width - patch_w));
        let proj = PatchProjection::new(row0, col0, patch_h, patch_w);
        for rr in proj.rows() {
            for cc in proj.cols() {
                let idx = rr * width + cc;
                let k = slot[idx];
                if k < remaining {
                    remaining -= 1;
                    let last = uncovered[remaining];
                    uncovered.swap(k, remaining);
                    slot[last] = k;
                    slot[idx] = remaining;
                }
            }
        }
        plan.projections.push(proj);
    }
    Ok(plan)
}

/// Copy of the crop `p` of `canvas`.
pub fn crop(canvas: &LatentCanvas, p: &PatchProjection) -> Result<Patch> {
    let (_, h, w) = canvas.dim();
    p.check_bounds(h, w)?;
    Ok(canvas.slice(s![.., p.rows(), p.cols()]).to_owned())
}

/// Write `values` into the pixels of `p` that are still at `t + 1`, moving them
/// to `t`. Pixels already at `t` keep their value. Returns the number written.
pub fn write_first_wins(
    dst: &mut LatentCanvas,
    grid: &mut TimeStateGrid,
    p: &PatchProjection,
    values: &Patch,
    t: usize,
) -> Result<usize> {
    write_first_wins_with(dst, grid, p, values, t, |_, _| {})
}

/// [`write_first_wins`] with a callback per written pixel `(row, col)`.
pub fn write_first_wins_with<F: FnMut(usize, usize)>(
    dst: &mut LatentCanvas,
    grid: &mut TimeStateGrid,
    p: &PatchProjection,
    values: &Patch,
    t: usize,
    mut on_write: F,
) -> Result<usize> {
    let (ch, h, w) = dst.dim();
    p.check_bounds(h, w)?;
    if grid.states.dim() != (h, w) {
        return Err(Error::shape(&[h, w], grid.states.shape()));
    }
    let expected = [ch, p.patch_h, p.patch_w];
    if values.shape() != expected {
        return Err(Error::shape(&expected, values.shape()));
    }
    for r in p.rows() {
        for c in p.cols() {
            let l = grid.states[[r, c]];
            if l != t && l != t + 1 {
                return Err(Error::InvariantBreach(format!(
                    "pixel ({r}, {c}) at time {l} during step {t}"
                )));
            }
        }
    }
    let mut written = 0;
    for (i, r) in p.rows().enumerate() {
        for (j, c) in p.cols().enumerate() {
            if grid.states[[r, c]] == t + 1 {
                for k in 0..ch {
                    dst[[k, r, c]] = values[[k, i, j]];
                }
                grid.states[[r, c]] = t;
                on_write(r, c);
                written += 1;
            }
        }
    }
    Ok(written)
}
