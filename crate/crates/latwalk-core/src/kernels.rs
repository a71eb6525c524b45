//! Exact evolution of a walk's n-step distribution inside a finite window.
//!
//! The state after n steps is held as a dense field over a disc-shaped
//! window; one step is an exact convolution with the step law. Mass stepping
//! outside the window is removed and accounted as *leakage*, so the computed
//! field is exactly the distribution of the walk killed on exiting the
//! window, and the leakage bounds the truncation error against the walk on
//! the whole lattice. Window sizes are chosen so leakage is far below the
//! quantities of interest.

use rayon::prelude::*;
use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::grid::DiscGrid;
use crate::model::{LatticePoint, StepLaw, ORIGIN};
use crate::numerics::KahanSum;

/// Placement of the evolution window.
#[derive(Clone, Copy, Debug)]
pub struct Window {
    pub center: LatticePoint,
    pub radius: i64,
}

impl Window {
    pub fn new(center: LatticePoint, radius: i64) -> Window {
        Window { center, radius }
    }

    /// Default window for an `n`-step evolution from `start`: centered at the
    /// origin, wide enough that the leaked mass is negligible relative to
    /// every bulk quantity (many standard deviations beyond the diffusive
    /// scale, adapted to the law's per-axis variance).
    pub fn default_for(law: &StepLaw, start: LatticePoint, n: u64) -> Window {
        Window {
            center: ORIGIN,
            radius: law.default_window_radius(start, n),
        }
    }
}

/// A snapshot of the field after `n` steps: dense values over the square
/// `[-radius, radius]^2` around `center` (cells outside the open disc of the
/// window are zero), plus the total mass leaked so far.
#[derive(Clone, Debug)]
pub struct FieldSlice {
    pub center: LatticePoint,
    pub radius: i64,
    pub n: u64,
    pub leakage: f64,
    data: Vec<f64>,
}

impl FieldSlice {
    pub fn side(&self) -> usize {
        (2 * self.radius + 1) as usize
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Field value at an absolute lattice point (zero outside the stored square).
    pub fn value(&self, z: LatticePoint) -> f64 {
        let d1 = z.x1 - self.center.x1;
        let d2 = z.x2 - self.center.x2;
        if d1.abs() > self.radius || d2.abs() > self.radius {
            return 0.0;
        }
        let side = self.side();
        self.data[((d2 + self.radius) as usize) * side + (d1 + self.radius) as usize]
    }

    /// Iterate over `(point, value)` for every stored cell.
    pub fn iter(&self) -> impl Iterator<Item = (LatticePoint, f64)> + '_ {
        let side = self.side();
        self.data.iter().enumerate().map(move |(i, &v)| {
            let d2 = (i / side) as i64 - self.radius;
            let d1 = (i % side) as i64 - self.radius;
            (
                LatticePoint::new(self.center.x1 + d1, self.center.x2 + d2),
                v,
            )
        })
    }

    /// Total mass currently inside the window (compensated sum).
    pub fn total_mass(&self) -> f64 {
        let mut k = KahanSum::new();
        for &v in &self.data {
            k.add(v);
        }
        k.value()
    }

    /// Write `x1,x2,value` rows for every cell of the open window disc.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x1,x2,value")?;
        let r_sq = (self.radius as i128) * (self.radius as i128);
        for (z, v) in self.iter() {
            let d1 = (z.x1 - self.center.x1) as i128;
            let d2 = (z.x2 - self.center.x2) as i128;
            if d1 * d1 + d2 * d2 < r_sq {
                writeln!(w, "{},{},{}", z.x1, z.x2, v)?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))?;
        Ok(())
    }

    const MAGIC: &'static [u8; 4] = b"LWF1";

    /// Binary format: magic `LWF1`, then little-endian `center.x1: i64`,
    /// `center.x2: i64`, `radius: i64`, `n: u64`, `leakage: f64`, then the
    /// `(2 radius + 1)^2` cell values row-major as `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&self.center.x1.to_le_bytes())?;
        w.write_all(&self.center.x2.to_le_bytes())?;
        w.write_all(&self.radius.to_le_bytes())?;
        w.write_all(&self.n.to_le_bytes())?;
        w.write_all(&self.leakage.to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<FieldSlice> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::ConfigInvalid("not a field slice file".into()));
        }
        let mut b8 = [0u8; 8];
        let mut next_i64 = |r: &mut R| -> Result<i64> {
            r.read_exact(&mut b8)?;
            Ok(i64::from_le_bytes(b8))
        };
        let x1 = next_i64(&mut r)?;
        let x2 = next_i64(&mut r)?;
        let radius = next_i64(&mut r)?;
        if !(1..(1 << 20)).contains(&radius) {
            return Err(Error::ConfigInvalid(format!(
                "field slice radius {radius} out of range"
            )));
        }
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let leakage = f64::from_le_bytes(b8);
        let side = (2 * radius + 1) as usize;
        let mut data = vec![0f64; side * side];
        let mut buf = vec![0u8; side * 8];
        for row in data.chunks_mut(side) {
            r.read_exact(&mut buf)?;
            for (v, b) in row.iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(b.try_into().unwrap());
            }
        }
        Ok(FieldSlice {
            center: LatticePoint::new(x1, x2),
            radius,
            n,
            leakage,
            data,
        })
    }

    pub fn save_binary(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_binary(std::io::BufWriter::new(f))?;
        Ok(())
    }

    pub fn load_binary(path: &std::path::Path) -> Result<FieldSlice> {
        let f = std::fs::File::open(path)?;
        Self::read_binary(std::io::BufReader::new(f))
    }
}

/// Parse the rows written by [`FieldSlice::write_csv`] into `(point, value)`
/// records (the CSV export is for plotting and carries no window metadata).
pub fn read_field_csv<R: Read>(r: R) -> Result<Vec<(LatticePoint, f64)>> {
    let mut lines = std::io::BufReader::new(r).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "x1,x2,value" => {}
        _ => return Err(Error::ConfigInvalid("missing x1,x2,value header".into())),
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let bad = || Error::ConfigInvalid(format!("bad field csv row: {line}"));
        let x1: i64 = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let x2: i64 = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let v: f64 = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        out.push((LatticePoint::new(x1, x2), v));
    }
    Ok(out)
}

/// The step law reorganized for the gather loop: an optional lazy atom at the
/// origin, negation-closed pairs (taken together so central symmetry of the
/// input is preserved bitwise), and unpaired atoms.
struct Stencil {
    center_p: Option<f64>,
    pairs: Vec<(i64, i64, f64)>,
    singles: Vec<(i64, i64, f64)>,
}

fn build_stencil(law: &StepLaw) -> Stencil {
    let mut center_p = None;
    let mut pairs = Vec::new();
    let mut singles = Vec::new();
    if law.is_symmetric() {
        for a in law.support() {
            if a.step.is_origin() {
                center_p = Some(a.prob);
            } else if a.step > ORIGIN {
                pairs.push((a.step.x1, a.step.x2, a.prob));
            }
        }
    } else {
        for a in law.support() {
            if a.step.is_origin() {
                center_p = Some(a.prob);
            } else {
                singles.push((a.step.x1, a.step.x2, a.prob));
            }
        }
    }
    Stencil {
        center_p,
        pairs,
        singles,
    }
}

/// Exact in-window evolution of a single walk's distribution.
pub struct Evolver {
    law: StepLaw,
    grid: DiscGrid,
    cur: Vec<f64>,
    next: Vec<f64>,
    n: u64,
    leak: KahanSum,
    start: LatticePoint,
    stencil: Stencil,
    /// Cells with Chebyshev offset beyond this can never hold mass.
    gather_half: i64,
    /// Half-width of the box (around the start offset) that can hold mass
    /// after the steps taken so far.
    act: i64,
}

impl Evolver {
    pub fn new(law: &StepLaw, start: LatticePoint, window: Window) -> Result<Evolver> {
        let l = law.max_step_cheb();
        let grid = DiscGrid::new(window.center, window.radius, 2 * l)?;
        if !grid.in_disc(start) {
            return Err(Error::StartOutsideWindow {
                start: (start.x1, start.x2),
            });
        }
        let mut cur = vec![0f64; grid.cells()];
        let next = vec![0f64; grid.cells()];
        cur[grid.idx(start).unwrap()] = 1.0;
        Ok(Evolver {
            stencil: build_stencil(law),
            law: law.clone(),
            gather_half: window.radius + l,
            grid,
            cur,
            next,
            n: 0,
            leak: KahanSum::new(),
            start,
            act: 0,
        })
    }

    pub fn law(&self) -> &StepLaw {
        &self.law
    }

    pub fn grid(&self) -> &DiscGrid {
        &self.grid
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// Mass that has left the window so far.
    pub fn leakage(&self) -> f64 {
        self.leak.value()
    }

    pub fn start(&self) -> LatticePoint {
        self.start
    }

    /// Current field value at an absolute lattice point.
    pub fn value(&self, z: LatticePoint) -> f64 {
        self.grid.idx(z).map_or(0.0, |i| self.cur[i])
    }

    /// Read a cell and zero it, returning the removed mass. Used by killed
    /// evolutions to harvest the mass absorbed by the killing set.
    pub fn drain_cell(&mut self, z: LatticePoint) -> f64 {
        match self.grid.idx(z) {
            Some(i) => std::mem::replace(&mut self.cur[i], 0.0),
            None => 0.0,
        }
    }

    /// Advance one step: convolve with the law, then collect mass outside the
    /// window disc as leakage.
    pub fn step(&mut self) {
        let bh = self.grid.box_half();
        let side = self.grid.side();
        let l = self.law.max_step_cheb();
        let act = (self.act + l).min(2 * bh);
        let s_off1 = self.start.x1 - self.grid.center().x1;
        let s_off2 = self.start.x2 - self.grid.center().x2;
        let gc = self.gather_half;
        let row_lo = (s_off2 - act).max(-gc);
        let row_hi = (s_off2 + act).min(gc);
        let col_lo = (s_off1 - act).max(-gc);
        let col_hi = (s_off1 + act).min(gc);
        debug_assert!(row_lo <= row_hi && col_lo <= col_hi);

        let inb: &[f64] = &self.cur;
        let stencil = &self.stencil;
        let j_lo = (col_lo + bh) as usize;
        let m = (col_hi - col_lo + 1) as usize;
        self.next
            .par_chunks_mut(side)
            .enumerate()
            .for_each(|(row_idx, orow)| {
                let d2 = row_idx as i64 - bh;
                if d2 < row_lo || d2 > row_hi {
                    return;
                }
                let row_base = row_idx * side;
                let dst = &mut orow[j_lo..j_lo + m];
                let base = (row_base + j_lo) as i64;
                let mut first = true;
                if let Some(p0) = stencil.center_p {
                    let src = &inb[row_base + j_lo..][..m];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = p0 * v;
                    }
                    first = false;
                }
                for &(dx1, dx2, p) in &stencil.pairs {
                    let off = dx2 * side as i64 + dx1;
                    let sm = &inb[(base - off) as usize..][..m];
                    let sp = &inb[(base + off) as usize..][..m];
                    if first {
                        for ((o, &a), &b) in dst.iter_mut().zip(sm).zip(sp) {
                            *o = p * (a + b);
                        }
                        first = false;
                    } else {
                        for ((o, &a), &b) in dst.iter_mut().zip(sm).zip(sp) {
                            *o += p * (a + b);
                        }
                    }
                }
                for &(dx1, dx2, p) in &stencil.singles {
                    let off = dx2 * side as i64 + dx1;
                    let src = &inb[(base - off) as usize..][..m];
                    if first {
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = p * v;
                        }
                        first = false;
                    } else {
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += p * v;
                        }
                    }
                }
            });
        std::mem::swap(&mut self.cur, &mut self.next);
        self.n += 1;
        self.act = act;

        // Collect mass that landed outside the window disc (serial sweep in a
        // fixed order so results do not depend on the thread count).
        let mut step_leak = KahanSum::new();
        for d2 in row_lo..=row_hi {
            let row_base = ((d2 + bh) as usize) * side;
            let (disc_lo, disc_hi) = match self.grid.disc_row(d2) {
                Some((lo, hi)) => (lo, hi),
                None => (1, 0), // empty: collect the whole row range
            };
            let mut collect = |from: i64, to: i64, cur: &mut [f64]| {
                for d1 in from..=to {
                    let i = row_base + (d1 + bh) as usize;
                    if cur[i] != 0.0 {
                        step_leak.add(cur[i]);
                        cur[i] = 0.0;
                    }
                }
            };
            if disc_lo > disc_hi {
                collect(col_lo, col_hi, &mut self.cur);
            } else {
                if col_lo < disc_lo {
                    collect(col_lo, (disc_lo - 1).min(col_hi), &mut self.cur);
                }
                if col_hi > disc_hi {
                    collect((disc_hi + 1).max(col_lo), col_hi, &mut self.cur);
                }
            }
        }
        self.leak.add(step_leak.value());
    }

    /// Snapshot the current field over the window square.
    pub fn snapshot(&self) -> FieldSlice {
        let r = self.grid.radius();
        let side_out = (2 * r + 1) as usize;
        let mut data = vec![0f64; side_out * side_out];
        for d2 in -r..=r {
            let src_base = self.grid.idx_off(-r, d2);
            let dst_base = ((d2 + r) as usize) * side_out;
            data[dst_base..dst_base + side_out]
                .copy_from_slice(&self.cur[src_base..src_base + side_out]);
        }
        FieldSlice {
            center: self.grid.center(),
            radius: r,
            n: self.n,
            leakage: self.leakage(),
            data,
        }
    }
}

/// Evolve the free (unkilled) walk from `start` and return snapshots at the
/// requested step counts. The window defaults to [`Window::default_for`] at
/// the largest capture time.
pub fn evolve_free(
    law: &StepLaw,
    start: LatticePoint,
    window: Option<Window>,
    captures: &[u64],
) -> Result<Vec<FieldSlice>> {
    if captures.is_empty() {
        return Err(Error::ConfigInvalid("no capture times requested".into()));
    }
    let mut times: Vec<u64> = captures.to_vec();
    times.sort_unstable();
    times.dedup();
    let n_final = *times.last().unwrap();
    let window = window.unwrap_or_else(|| Window::default_for(law, start, n_final));
    let mut ev = Evolver::new(law, start, window)?;
    let mut out = Vec::with_capacity(times.len());
    let mut next_capture = 0usize;
    if times[0] == 0 {
        out.push(ev.snapshot());
        next_capture = 1;
    }
    for k in 1..=n_final {
        ev.step();
        if next_capture < times.len() && times[next_capture] == k {
            out.push(ev.snapshot());
            next_capture += 1;
        }
    }
    Ok(out)
}

/// The local-limit comparison density: `period / (2 pi sigma^2 n) *
/// exp(-|x~|^2 / (2 sigma^2 n))`, the continuum prediction for `p^n(x)` on
/// the parity class the walk occupies at time `n`.
pub fn gaussian_local_limit(law: &StepLaw, n: u64, x: LatticePoint) -> f64 {
    let s2n = law.sigma() * law.sigma() * n as f64;
    let t = law.tilde_norm(x);
    law.period() as f64 / (2.0 * std::f64::consts::PI * s2n) * (-t * t / (2.0 * s2n)).exp()
}

/// Largest absolute deviation between a free-evolution slice and the
/// local-limit density, over the cells the walk can occupy at that time.
pub fn llt_sup_deviation(law: &StepLaw, start: LatticePoint, slice: &FieldSlice) -> f64 {
    let bipartite = law.is_bipartite();
    let parity = ((start.x1 + start.x2 + slice.n as i64).rem_euclid(2)) as u8;
    let r_sq = (slice.radius as i128) * (slice.radius as i128);
    let mut sup = 0.0f64;
    for (z, v) in slice.iter() {
        if bipartite && z.parity() != parity {
            continue;
        }
        let d = z - slice.center;
        if d.norm_sq() >= r_sq {
            continue;
        }
        let dev = (v - gaussian_local_limit(law, slice.n, z)).abs();
        if dev > sup {
            sup = dev;
        }
    }
    sup
}
