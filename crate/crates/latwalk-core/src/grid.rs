//! Dense storage for a disc-shaped window of lattice cells.
//!
//! The evolution kernels work on an open Euclidean disc (the *window*) stored
//! inside a square box that extends one maximal step beyond it, so a single
//! convolution step can never read or write outside the box. Cells in the
//! ring between disc and box hold mass that has just escaped; the kernels
//! collect it as leakage and zero it again after every step.

use crate::error::{Error, Result};
use crate::model::LatticePoint;

#[derive(Clone, Debug)]
pub struct DiscGrid {
    center: LatticePoint,
    radius: i64,
    margin: i64,
    box_half: i64,
    side: usize,
    /// For each row offset `d2 in [-box_half, box_half]`, the inclusive range
    /// of column offsets inside the open disc, or None for an empty row.
    row_half: Vec<Option<(i64, i64)>>,
}

impl DiscGrid {
    /// A disc `|z - center| < radius` with a surrounding ring of width
    /// `margin` (at least the maximal step size of the law to be evolved).
    pub fn new(center: LatticePoint, radius: i64, margin: i64) -> Result<DiscGrid> {
        if radius < 1 {
            return Err(Error::WindowTooSmall {
                reason: format!("window radius {radius} < 1"),
            });
        }
        if margin < 1 {
            return Err(Error::WindowTooSmall {
                reason: format!("margin {margin} < 1"),
            });
        }
        let box_half = radius
            .checked_add(margin)
            .filter(|&b| 2 * b + 1 < (1 << 20))
            .ok_or_else(|| Error::WindowTooSmall {
                reason: format!("window radius {radius} too large to allocate"),
            })?;
        let side = (2 * box_half + 1) as usize;
        let r_sq = (radius as i128) * (radius as i128);
        let mut row_half = Vec::with_capacity(side);
        for d2 in -box_half..=box_half {
            let d2_sq = (d2 as i128) * (d2 as i128);
            if d2_sq >= r_sq {
                row_half.push(None);
                continue;
            }
            // Largest w with w^2 + d2^2 < radius^2.
            let mut w = ((r_sq - d2_sq) as f64).sqrt() as i64;
            while (w as i128) * (w as i128) + d2_sq >= r_sq {
                w -= 1;
            }
            while ((w + 1) as i128) * ((w + 1) as i128) + d2_sq < r_sq {
                w += 1;
            }
            row_half.push(Some((-w, w)));
        }
        Ok(DiscGrid {
            center,
            radius,
            margin,
            box_half,
            side,
            row_half,
        })
    }

    pub fn center(&self) -> LatticePoint {
        self.center
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn margin(&self) -> i64 {
        self.margin
    }

    pub fn box_half(&self) -> i64 {
        self.box_half
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    /// Linear index of the cell at offset `(d1, d2)` from the center; the
    /// offset must lie in the box.
    #[inline]
    pub fn idx_off(&self, d1: i64, d2: i64) -> usize {
        debug_assert!(d1.abs() <= self.box_half && d2.abs() <= self.box_half);
        ((d2 + self.box_half) as usize) * self.side + (d1 + self.box_half) as usize
    }

    /// Linear index of an absolute lattice point, if it lies in the box.
    pub fn idx(&self, z: LatticePoint) -> Option<usize> {
        let d1 = z.x1 - self.center.x1;
        let d2 = z.x2 - self.center.x2;
        if d1.abs() <= self.box_half && d2.abs() <= self.box_half {
            Some(self.idx_off(d1, d2))
        } else {
            None
        }
    }

    /// Absolute lattice point of a linear index.
    pub fn point_of(&self, idx: usize) -> LatticePoint {
        let d2 = (idx / self.side) as i64 - self.box_half;
        let d1 = (idx % self.side) as i64 - self.box_half;
        LatticePoint::new(self.center.x1 + d1, self.center.x2 + d2)
    }

    #[inline]
    pub fn in_disc_off(&self, d1: i64, d2: i64) -> bool {
        let r_sq = (self.radius as i128) * (self.radius as i128);
        (d1 as i128) * (d1 as i128) + (d2 as i128) * (d2 as i128) < r_sq
    }

    pub fn in_disc(&self, z: LatticePoint) -> bool {
        self.in_disc_off(z.x1 - self.center.x1, z.x2 - self.center.x2)
    }

    /// Inclusive column-offset range of the disc in row `d2`, if nonempty.
    #[inline]
    pub fn disc_row(&self, d2: i64) -> Option<(i64, i64)> {
        if d2.abs() > self.box_half {
            return None;
        }
        self.row_half[(d2 + self.box_half) as usize]
    }

    pub fn disc_cell_count(&self) -> u64 {
        self.row_half
            .iter()
            .flatten()
            .map(|&(lo, hi)| (hi - lo + 1) as u64)
            .sum()
    }
}
