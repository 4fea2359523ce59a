//! CA-Markov baseline: Markov projection of class areas, neighbourhood
//! suitability and iterative greedy allocation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::raster::{Grid, GridKind};
use crate::transition::crosstab;
use crate::{Error, Result};

pub const CLASS_COUNT: usize = 8;
pub const CLASS_NAMES: [&str; CLASS_COUNT] =
    ["Water", "Developed", "Barren", "Forest", "Shrubland", "Herbaceous", "Cultivated", "Wetlands"];
pub const DEVELOPED: usize = 1;

/// NLCD 16-class legend index to the 8 baseline classes.
pub const NLCD16_TO_8: [u8; 16] = [0, 0, 1, 1, 1, 1, 2, 3, 3, 3, 4, 5, 6, 6, 7, 7];

/// Suitability floor so no cell is categorically excluded from any class.
pub const SUITABILITY_FLOOR: f64 = 1e-6;

/// Reclassifies a 16-class NLCD legend grid into the 8 baseline classes.
pub fn reclassify_nlcd16(lc: &Grid) -> Result<Grid> {
    lc.check_classes(16)?;
    let values = (0..lc.len())
        .map(|i| match lc.class_at(i) {
            Some(c) => f64::from(NLCD16_TO_8[c]),
            None => lc.nodata_value(),
        })
        .collect();
    Grid::with_mask(
        lc.width(),
        lc.height(),
        lc.pixel_size(),
        GridKind::Categorical,
        values,
        lc.mask().to_vec(),
        lc.nodata_value(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovModel {
    /// Row-stochastic transition matrix, `p[from][to]`.
    pub p: [[f64; CLASS_COUNT]; CLASS_COUNT],
    /// Class areas (cells) of the later map.
    pub current: [u64; CLASS_COUNT],
    /// One-step projected areas, rounded to cells (largest remainder) so
    /// that they sum to the valid cell count.
    pub targets: [u64; CLASS_COUNT],
}

fn class_areas(lc: &Grid) -> [u64; CLASS_COUNT] {
    let mut a = [0u64; CLASS_COUNT];
    for i in 0..lc.len() {
        if let Some(c) = lc.class_at(i) {
            a[c] += 1;
        }
    }
    a
}

/// Rounds nonnegative reals to integers with a prescribed total using the
/// largest-remainder rule (lowest index wins ties).
fn largest_remainder(real: &[f64; CLASS_COUNT], total: u64) -> [u64; CLASS_COUNT] {
    let mut out = [0u64; CLASS_COUNT];
    let mut rem = [0.0; CLASS_COUNT];
    for c in 0..CLASS_COUNT {
        let f = libm::floor(real[c].max(0.0));
        out[c] = f as u64;
        rem[c] = real[c] - f;
    }
    let mut left = total.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..CLASS_COUNT).collect();
    order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[c] += 1;
        left -= 1;
    }
    out
}

impl MarkovModel {
    pub fn from_matrix(p: [[f64; CLASS_COUNT]; CLASS_COUNT], current: [u64; CLASS_COUNT]) -> Result<Self> {
        for (i, row) in p.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::param(format!("row {i} of P is not stochastic")));
            }
        }
        let total: u64 = current.iter().sum();
        let mut real = [0.0; CLASS_COUNT];
        for (from, &area) in current.iter().enumerate() {
            for to in 0..CLASS_COUNT {
                real[to] += area as f64 * p[from][to];
            }
        }
        Ok(Self { p, current, targets: largest_remainder(&real, total) })
    }

    /// `p` raised to the `n`-th power.
    pub fn power(&self, n: u32) -> [[f64; CLASS_COUNT]; CLASS_COUNT] {
        let mut out = [[0.0; CLASS_COUNT]; CLASS_COUNT];
        for (i, row) in out.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _ in 0..n {
            let mut next = [[0.0; CLASS_COUNT]; CLASS_COUNT];
            for i in 0..CLASS_COUNT {
                for k in 0..CLASS_COUNT {
                    for j in 0..CLASS_COUNT {
                        next[i][j] += out[i][k] * self.p[k][j];
                    }
                }
            }
            out = next;
        }
        out
    }
}

/// Fits P from the cross-tabulation of two aligned 8-class maps and
/// projects one step forward from the later map.
pub fn fit_markov(lc_a: &Grid, lc_b: &Grid) -> Result<MarkovModel> {
    let counts = crosstab(lc_a, lc_b, CLASS_COUNT)?;
    lc_b.check_classes(CLASS_COUNT)?;
    let mut p = [[0.0; CLASS_COUNT]; CLASS_COUNT];
    for (from, row) in p.iter_mut().enumerate() {
        let r = counts.row(from);
        let s: u64 = r.iter().sum();
        if s == 0 {
            row[from] = 1.0;
        } else {
            for to in 0..CLASS_COUNT {
                row[to] = r[to] as f64 / s as f64;
            }
        }
    }
    MarkovModel::from_matrix(p, class_areas(lc_b))
}

/// Per-class suitability surfaces, row-major, aligned with the source map.
#[derive(Debug, Clone, PartialEq)]
pub struct Suitability {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
}

/// `P[lc(p)][c] · (fraction of class c in the window around p)`, floored
/// at [`SUITABILITY_FLOOR`]. Windows are truncated at the edges and only
/// count valid cells.
pub fn suitability(lc: &Grid, model: &MarkovModel, window: usize) -> Result<Suitability> {
    if window % 2 == 0 {
        return Err(Error::param(format!("window {window} must be odd")));
    }
    lc.check_classes(CLASS_COUNT)?;
    let (w, h) = (lc.width(), lc.height());
    let r = window / 2;
    // summed-area tables: per class and for valid cells, (w+1)x(h+1)
    let sw = w + 1;
    let mut sat = vec![vec![0u32; sw * (h + 1)]; CLASS_COUNT + 1];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let cls = lc.class_at(i);
            for (c, table) in sat.iter_mut().enumerate() {
                let hit = match cls {
                    Some(k) => c == k || c == CLASS_COUNT,
                    None => false,
                };
                let v = u32::from(hit) + table[y * sw + x + 1] + table[(y + 1) * sw + x]
                    - table[y * sw + x];
                table[(y + 1) * sw + x + 1] = v;
            }
        }
    }
    let rect = |t: &[u32], x0: usize, y0: usize, x1: usize, y1: usize| -> u32 {
        t[y1 * sw + x1] + t[y0 * sw + x0] - t[y0 * sw + x1] - t[y1 * sw + x0]
    };
    let mut classes = vec![vec![0.0; w * h]; CLASS_COUNT];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let i = y * w + x;
            let Some(from) = lc.class_at(i) else { continue };
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let n = f64::from(rect(&sat[CLASS_COUNT], x0, y0, x1, y1));
            for c in 0..CLASS_COUNT {
                let frac = f64::from(rect(&sat[c], x0, y0, x1, y1)) / n;
                classes[c][i] = (model.p[from][c] * frac).max(SUITABILITY_FLOOR);
            }
        }
    }
    Ok(Suitability { width: w, height: h, classes, valid: lc.mask().to_vec() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationParams {
    /// Multiplier learning rate.
    pub eta: f64,
    /// Per-class tolerance as a fraction of the target (floored at 1 cell).
    pub tolerance: f64,
    pub max_iterations: usize,
    /// After the multiplier loop, move single cells between over- and
    /// under-allocated classes until every class is within tolerance.
    pub greedy_fixup: bool,
}

impl Default for AllocationParams {
    fn default() -> Self {
        Self { eta: 0.1, tolerance: 0.005, max_iterations: 500, greedy_fixup: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationState {
    pub suitability: Suitability,
    pub multipliers: [f64; CLASS_COUNT],
    pub allocation: Vec<Option<u8>>,
    pub iterations: usize,
    pub deficits: [i64; CLASS_COUNT],
}

impl AllocationState {
    pub fn new(suitability: Suitability) -> Self {
        let n = suitability.valid.len();
        Self {
            suitability,
            multipliers: [1.0; CLASS_COUNT],
            allocation: vec![None; n],
            iterations: 0,
            deficits: [0; CLASS_COUNT],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationOutcome {
    pub map: Grid,
    pub iterations: usize,
    pub converged: bool,
    /// Cells moved by the greedy fix-up pass.
    pub fixup_moves: usize,
    pub deficits: [i64; CLASS_COUNT],
    pub multipliers: [f64; CLASS_COUNT],
}

fn within_tolerance(deficits: &[i64; CLASS_COUNT], targets: &[u64; CLASS_COUNT], tol: f64) -> bool {
    deficits
        .iter()
        .zip(targets)
        .all(|(&d, &t)| (d.unsigned_abs() as f64) <= (tol * t as f64).max(1.0))
}

/// Iterative allocation of class areas to cells.
///
/// Each iteration assigns every valid cell the class maximising
/// `multiplier_c · suitability_c` (lowest class on ties), then rescales
/// `multiplier_c` by `exp(eta · deficit_c / target_c)`. Cells sharing an
/// identical suitability vector always move together, so the multiplier loop
/// alone can oscillate around a target it cannot hit; the optional greedy
/// pass then moves the cheapest individual cells.
pub fn allocate(
    state: &mut AllocationState,
    targets: &[u64; CLASS_COUNT],
    params: AllocationParams,
) -> Result<AllocationOutcome> {
    let s = &state.suitability;
    let valid_cells = s.valid.iter().filter(|&&v| v).count() as u64;
    if targets.iter().sum::<u64>() != valid_cells {
        return Err(Error::param(format!(
            "targets sum to {}, map has {valid_cells} valid cells",
            targets.iter().sum::<u64>()
        )));
    }
    if !(params.eta >= 0.0 && params.eta.is_finite()) {
        return Err(Error::param("eta must be finite and nonnegative"));
    }
    let n = s.valid.len();
    let mut converged = false;
    loop {
        state.iterations += 1;
        let mut counts = [0u64; CLASS_COUNT];
        for i in 0..n {
            if !s.valid[i] {
                state.allocation[i] = None;
                continue;
            }
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..CLASS_COUNT {
                let v = state.multipliers[c] * s.classes[c][i];
                if v > best.1 {
                    best = (c, v);
                }
            }
            state.allocation[i] = Some(best.0 as u8);
            counts[best.0] += 1;
        }
        for c in 0..CLASS_COUNT {
            state.deficits[c] = targets[c] as i64 - counts[c] as i64;
        }
        if within_tolerance(&state.deficits, targets, params.tolerance) {
            converged = true;
            break;
        }
        if state.iterations >= params.max_iterations {
            break;
        }
        for c in 0..CLASS_COUNT {
            let t = targets[c].max(1) as f64;
            state.multipliers[c] *= libm::exp(params.eta * state.deficits[c] as f64 / t);
        }
    }

    let mut moves = 0;
    if !converged && params.greedy_fixup {
        moves = greedy_fixup(state, targets, params.tolerance);
        converged = within_tolerance(&state.deficits, targets, params.tolerance);
    }

    let s = &state.suitability;
    let values = state
        .allocation
        .iter()
        .map(|a| a.map_or(255.0, f64::from))
        .collect();
    let map = Grid::with_mask(
        s.width,
        s.height,
        crate::raster::NLCD_PIXEL_SIZE_M,
        GridKind::Categorical,
        values,
        s.valid.clone(),
        255.0,
    )?;
    Ok(AllocationOutcome {
        map,
        iterations: state.iterations,
        converged,
        fixup_moves: moves,
        deficits: state.deficits,
        multipliers: state.multipliers,
    })
}

/// Repeatedly moves the cell with the smallest score loss from the most
/// over-allocated class to the most under-allocated one.
fn greedy_fixup(state: &mut AllocationState, targets: &[u64; CLASS_COUNT], tol: f64) -> usize {
    let s = &state.suitability;
    let mut moves = 0;
    while !within_tolerance(&state.deficits, targets, tol) {
        let over = (0..CLASS_COUNT).min_by_key(|&c| (state.deficits[c], c)).expect("classes");
        let under = (0..CLASS_COUNT).max_by_key(|&c| (state.deficits[c], core::cmp::Reverse(c))).expect("classes");
        if state.deficits[over] >= 0 || state.deficits[under] <= 0 {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in state.allocation.iter().enumerate() {
            if *a != Some(over as u8) {
                continue;
            }
            let loss = state.multipliers[over] * s.classes[over][i]
                - state.multipliers[under] * s.classes[under][i];
            if best.is_none_or(|b| loss < b.1) {
                best = Some((i, loss));
            }
        }
        let Some((cell, _)) = best else { break };
        state.allocation[cell] = Some(under as u8);
        state.deficits[over] += 1;
        state.deficits[under] -= 1;
        moves += 1;
    }
    moves
}

/// Cells that became Developed: `after == Developed && before != Developed`.
pub fn imperv_change_binary(before: &Grid, after: &Grid) -> Result<Grid> {
    before.check_classes(CLASS_COUNT)?;
    after.check_classes(CLASS_COUNT)?;
    before.expect_same_shape(after)?;
    let mut values = Vec::with_capacity(before.len());
    let mut valid = Vec::with_capacity(before.len());
    for i in 0..before.len() {
        match (before.class_at(i), after.class_at(i)) {
            (Some(b), Some(a)) => {
                values.push(f64::from(u8::from(a == DEVELOPED && b != DEVELOPED)));
                valid.push(true);
            }
            _ => {
                values.push(255.0);
                valid.push(false);
            }
        }
    }
    Grid::with_mask(
        before.width(),
        before.height(),
        before.pixel_size(),
        GridKind::Categorical,
        values,
        valid,
        255.0,
    )
}

/// Full baseline: fit on `(lc_a, lc_b)`, build suitability on `lc_b` and
/// allocate the projected areas.
pub fn forecast(
    lc_a: &Grid,
    lc_b: &Grid,
    window: usize,
    params: AllocationParams,
) -> Result<(MarkovModel, AllocationOutcome)> {
    let model = fit_markov(lc_a, lc_b)?;
    let suit = suitability(lc_b, &model, window)?;
    let mut state = AllocationState::new(suit);
    let outcome = allocate(&mut state, &model.targets, params)?;
    Ok((model, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> [[f64; CLASS_COUNT]; CLASS_COUNT] {
        let mut p = [[0.0; CLASS_COUNT]; CLASS_COUNT];
        for (i, r) in p.iter_mut().enumerate() {
            r[i] = 1.0;
        }
        p
    }

    #[test]
    fn identical_maps_give_identity() {
        let g = Grid::categorical(3, 2, &[0, 1, 2, 3, 1, 1]).unwrap();
        let m = fit_markov(&g, &g).unwrap();
        assert_eq!(m.p, identity());
        assert_eq!(m.targets, m.current);
        assert_eq!(m.targets.iter().sum::<u64>(), 6);
    }

    #[test]
    fn two_class_hand_crosstab() {
        // 0->0 x3, 0->1 x1, 1->1 x2
        let a = Grid::categorical(6, 1, &[0, 0, 0, 0, 1, 1]).unwrap();
        let b = Grid::categorical(6, 1, &[0, 0, 0, 1, 1, 1]).unwrap();
        let m = fit_markov(&a, &b).unwrap();
        assert_eq!(m.p[0][0], 0.75);
        assert_eq!(m.p[0][1], 0.25);
        assert_eq!(m.p[1][1], 1.0);
        // current = [3, 3]; projection = [2.25, 3.75] -> [2, 4]
        assert_eq!(&m.targets[..2], &[2, 4]);
    }

    #[test]
    fn rejects_out_of_range_classes() {
        let a = Grid::categorical(1, 1, &[8]).unwrap();
        assert!(fit_markov(&a, &a).is_err());
    }

    #[test]
    fn uniform_grid_suitability() {
        let g = Grid::categorical(4, 4, &[3; 16]).unwrap();
        let m = MarkovModel::from_matrix(identity(), class_areas(&g)).unwrap();
        let s = suitability(&g, &m, 5).unwrap();
        assert!(s.classes[3].iter().all(|&v| v == 1.0));
        assert!(s.classes[0].iter().all(|&v| v == SUITABILITY_FLOOR));
        assert!(suitability(&g, &m, 4).is_err());
    }

    #[test]
    fn checkerboard_neighbourhood_fractions() {
        let cells: Vec<u8> = (0..16).map(|i| ((i % 4 + i / 4) % 2) as u8).collect();
        let g = Grid::categorical(4, 4, &cells).unwrap();
        let m = MarkovModel::from_matrix(identity(), class_areas(&g)).unwrap();
        let s = suitability(&g, &m, 3).unwrap();
        // corner (0,0) is class 0: window has 4 cells, 2 of class 0
        assert_eq!(s.classes[0][0], 0.5);
        // edge (1,0) is class 1: 6 cells, 3 of class 1
        assert_eq!(s.classes[1][1], 0.5);
        // interior (1,1) is class 0: 9 cells, 5 of class 0
        assert_eq!(s.classes[0][5], 5.0 / 9.0);
        assert_eq!(s.classes[1][5], SUITABILITY_FLOOR);
    }

    #[test]
    fn identity_allocation_reproduces_input_in_one_iteration() {
        let cells: Vec<u8> = (0..100).map(|i| ((i * 7 + i / 10) % 3) as u8).collect();
        let g = Grid::categorical(10, 10, &cells).unwrap();
        let m = MarkovModel::from_matrix(identity(), class_areas(&g)).unwrap();
        let mut st = AllocationState::new(suitability(&g, &m, 5).unwrap());
        let out = allocate(&mut st, &m.targets, AllocationParams::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert_eq!(out.map, g);
    }

    #[test]
    fn rejects_bad_targets() {
        let g = Grid::categorical(2, 2, &[0, 1, 0, 1]).unwrap();
        let m = MarkovModel::from_matrix(identity(), class_areas(&g)).unwrap();
        let mut st = AllocationState::new(suitability(&g, &m, 3).unwrap());
        let mut t = m.targets;
        t[0] += 1;
        assert!(allocate(&mut st, &t, AllocationParams::default()).is_err());
    }

    #[test]
    fn binary_change() {
        let a = Grid::categorical(3, 1, &[2, 1, 3]).unwrap();
        let b = Grid::categorical(3, 1, &[1, 1, 3]).unwrap();
        assert_eq!(imperv_change_binary(&a, &b).unwrap().values(), &[1.0, 0.0, 0.0]);
        let none = Grid::categorical(3, 1, &[0, 2, 3]).unwrap();
        assert!(imperv_change_binary(&none, &none).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nlcd_reclassification() {
        let g = Grid::categorical(4, 1, &[0, 5, 9, 15]).unwrap();
        assert_eq!(reclassify_nlcd16(&g).unwrap().values(), &[0.0, 1.0, 3.0, 7.0]);
    }
}
