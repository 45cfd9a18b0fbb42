//! Conversion of a [`ConicProgram`] to the solver's standard form
//!
//! ```text
//! minimize    c_free·u + c_cone·x
//! subject to  A·(u, x) = b,     x ∈ K = R₊ⁿ × SOC × PSD,   u free
//! ```
//!
//! Inequality rows get one nonnegative slack each; every quadratic-cost
//! epigraph `t ≥ a2 p² + a1 p + a0` becomes a dimension-3 second-order
//! cone `(ω0, ω1, ω2)` tied to `(t, p)` by three equalities with
//! `ω0 = u+1, ω1 = u-1, ω2 = 2√a2·p` for `u = t - a1 p - a0`.  Rows are
//! equilibrated to unit max-norm; the stored scale restores the duals.

use nalgebra::{DMatrix, DVector};

use super::cones::{ConeLayout, ConeVec};
use crate::formulation::ConicProgram;

/// One equality row over the free block and the cone blocks.  PSD entries
/// carry the symmetric-coefficient convention: value = F[p,q] with p ≤ q,
/// functional = Σ val·(2-δ)·X[p,q].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StdRow {
    pub free: Vec<(u32, f64)>,
    pub nonneg: Vec<(u32, f64)>,
    pub soc: Vec<(u32, u32, f64)>,
    pub psd: Vec<(u32, u32, u32, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StandardForm {
    pub n_free: usize,
    pub layout: ConeLayout,
    pub rows: Vec<StdRow>,
    pub b: Vec<f64>,
    pub c_free: Vec<f64>,
    /// Objective on the nonnegative block (empty = zero; used by imported
    /// problems where split variables land in the LP block).
    pub c_nonneg: Vec<f64>,
    /// Objective on PSD blocks (same coefficient convention as rows).
    pub c_psd: Vec<Vec<(u32, u32, f64)>>,
    pub obj_constant: f64,
    /// Per-row scale applied during equilibration (`scaled = ρ·original`);
    /// original-dual = ρ·scaled-dual.
    pub row_scale: Vec<f64>,
}

/// Where the program's pieces landed in the standard form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StdMap {
    /// Row index of each program equality.
    pub eq_rows: Vec<usize>,
    /// Row index and slack index of each program inequality.
    pub ineq_rows: Vec<(usize, usize)>,
    /// SOC block index per program epigraph.
    pub epi_soc: Vec<usize>,
}

impl StandardForm {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// A·(u, x) for the full iterate.
    pub fn apply_a(&self, u: &DVector<f64>, x: &ConeVec) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows.len());
        for (k, row) in self.rows.iter().enumerate() {
            out[k] = self.row_dot(row, u, x);
        }
        out
    }

    pub fn row_dot(&self, row: &StdRow, u: &DVector<f64>, x: &ConeVec) -> f64 {
        let mut acc = 0.0;
        for &(j, c) in &row.free {
            acc += c * u[j as usize];
        }
        for &(j, c) in &row.nonneg {
            acc += c * x.nonneg[j as usize];
        }
        for &(blk, comp, c) in &row.soc {
            acc += c * x.socs[blk as usize][comp as usize];
        }
        for &(blk, p, q, c) in &row.psd {
            let (p, q) = (p as usize, q as usize);
            let xm = &x.psds[blk as usize];
            acc += if p == q {
                c * xm[(p, p)]
            } else {
                c * (xm[(p, q)] + xm[(q, p)])
            };
        }
        acc
    }

    /// Aᵀy scattered into the free block.
    pub fn at_y_free(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_free);
        for (k, row) in self.rows.iter().enumerate() {
            let yk = y[k];
            if yk == 0.0 {
                continue;
            }
            for &(j, c) in &row.free {
                out[j as usize] += c * yk;
            }
        }
        out
    }

    /// Aᵀy scattered into the cone blocks.
    pub fn at_y_cone(&self, y: &DVector<f64>) -> ConeVec {
        let mut out = ConeVec::zeros(&self.layout);
        for (k, row) in self.rows.iter().enumerate() {
            let yk = y[k];
            if yk == 0.0 {
                continue;
            }
            for &(j, c) in &row.nonneg {
                out.nonneg[j as usize] += c * yk;
            }
            for &(blk, comp, c) in &row.soc {
                out.socs[blk as usize][comp as usize] += c * yk;
            }
            for &(blk, p, q, c) in &row.psd {
                let (p, q) = (p as usize, q as usize);
                let m = &mut out.psds[blk as usize];
                if p == q {
                    m[(p, p)] += c * yk;
                } else {
                    m[(p, q)] += c * yk;
                    m[(q, p)] += c * yk;
                }
            }
        }
        out
    }

    /// Objective on the cone blocks as a cone vector.
    pub fn c_cone(&self) -> ConeVec {
        let mut out = ConeVec::zeros(&self.layout);
        for (i, &c) in self.c_nonneg.iter().enumerate() {
            out.nonneg[i] = c;
        }
        for (blk, entries) in self.c_psd.iter().enumerate() {
            for &(p, q, c) in entries {
                let (p, q) = (p as usize, q as usize);
                if p == q {
                    out.psds[blk][(p, p)] += c;
                } else {
                    out.psds[blk][(p, q)] += c;
                    out.psds[blk][(q, p)] += c;
                }
            }
        }
        out
    }

    /// Dense border matrix of the free columns (m × n_free).
    pub fn free_border(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.rows.len(), self.n_free);
        for (k, row) in self.rows.iter().enumerate() {
            for &(j, c) in &row.free {
                b[(k, j as usize)] += c;
            }
        }
        b
    }
}

/// Lowers a conic program into standard form.  `equilibrate` scales every
/// row to unit max-norm (recommended; cost rows and power-balance rows
/// differ by several orders of magnitude).
pub fn standard_form(prog: &ConicProgram, equilibrate: bool) -> (StandardForm, StdMap) {
    let n_free = prog.scalar_names.len();
    let n_ineq = prog.inequalities.len();
    let socs: Vec<usize> = prog.epigraphs.iter().map(|_| 3).collect();
    let psds: Vec<usize> = if prog.psd_side > 0 {
        vec![prog.psd_side]
    } else {
        vec![]
    };
    let layout = ConeLayout {
        nonneg: n_ineq,
        socs,
        psds,
    };

    let mut sf = StandardForm {
        n_free,
        layout,
        c_free: vec![0.0; n_free],
        obj_constant: prog.objective_constant,
        ..Default::default()
    };
    for &(i, c) in &prog.objective {
        sf.c_free[i] += c;
    }
    if prog.psd_side > 0 {
        sf.c_psd = vec![prog
            .objective_psd
            .iter()
            .map(|e| (e.p, e.q, e.val))
            .collect()];
    }

    let mut map = StdMap::default();

    for row in &prog.equalities {
        map.eq_rows.push(sf.rows.len());
        sf.rows.push(StdRow {
            free: row.scalar.iter().map(|&(i, c)| (i as u32, c)).collect(),
            psd: row.psd.iter().map(|e| (0, e.p, e.q, e.val)).collect(),
            ..Default::default()
        });
        sf.b.push(row.rhs);
    }
    for (slack, row) in prog.inequalities.iter().enumerate() {
        map.ineq_rows.push((sf.rows.len(), slack));
        sf.rows.push(StdRow {
            free: row.scalar.iter().map(|&(i, c)| (i as u32, c)).collect(),
            nonneg: vec![(slack as u32, -1.0)],
            psd: row.psd.iter().map(|e| (0, e.p, e.q, e.val)).collect(),
            ..Default::default()
        });
        sf.b.push(row.rhs);
    }
    for (blk, e) in prog.epigraphs.iter().enumerate() {
        map.epi_soc.push(blk);
        let sq = e.a2.sqrt();
        // ω0 - t + a1·p = 1 - a0
        sf.rows.push(StdRow {
            free: vec![(e.t as u32, -1.0), (e.p as u32, e.a1)],
            soc: vec![(blk as u32, 0, 1.0)],
            ..Default::default()
        });
        sf.b.push(1.0 - e.a0);
        // ω1 - t + a1·p = -1 - a0
        sf.rows.push(StdRow {
            free: vec![(e.t as u32, -1.0), (e.p as u32, e.a1)],
            soc: vec![(blk as u32, 1, 1.0)],
            ..Default::default()
        });
        sf.b.push(-1.0 - e.a0);
        // ω2 - 2√a2·p = 0
        sf.rows.push(StdRow {
            free: vec![(e.p as u32, -2.0 * sq)],
            soc: vec![(blk as u32, 2, 1.0)],
            ..Default::default()
        });
        sf.b.push(0.0);
    }

    sf.row_scale = vec![1.0; sf.rows.len()];
    if equilibrate {
        for (k, row) in sf.rows.iter_mut().enumerate() {
            let mut mx = 0.0_f64;
            for &(_, c) in &row.free {
                mx = mx.max(c.abs());
            }
            for &(_, c) in &row.nonneg {
                mx = mx.max(c.abs());
            }
            for &(_, _, c) in &row.soc {
                mx = mx.max(c.abs());
            }
            for &(_, _, _, c) in &row.psd {
                mx = mx.max(c.abs());
            }
            if mx > 0.0 && (mx > 4.0 || mx < 0.25) {
                let s = 1.0 / mx;
                for e in &mut row.free {
                    e.1 *= s;
                }
                for e in &mut row.nonneg {
                    e.1 *= s;
                }
                for e in &mut row.soc {
                    e.2 *= s;
                }
                for e in &mut row.psd {
                    e.3 *= s;
                }
                sf.b[k] *= s;
                sf.row_scale[k] = s;
            }
        }
    }

    (sf, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::{AffineRow, Family, QuadEpigraph};

    #[test]
    fn qp_lowering_shape() {
        // minimize t s.t. t >= (p-1)^2, 0 <= p <= 2
        let mut prog = ConicProgram::new(0);
        let p = prog.add_scalar("p");
        let t = prog.add_scalar("t");
        prog.objective.push((t, 1.0));
        prog.epigraphs.push(QuadEpigraph {
            t,
            p,
            a2: 1.0,
            a1: -2.0,
            a0: 1.0,
        });
        prog.ge(AffineRow {
            scalar: vec![(p, 1.0)],
            psd: vec![],
            rhs: 0.0,
            family: Family::Other,
        });
        prog.ge(AffineRow {
            scalar: vec![(p, -1.0)],
            psd: vec![],
            rhs: -2.0,
            family: Family::Other,
        });
        let (sf, map) = standard_form(&prog, false);
        assert_eq!(sf.n_free, 2);
        assert_eq!(sf.layout.nonneg, 2);
        assert_eq!(sf.layout.socs, vec![3]);
        assert!(sf.layout.psds.is_empty());
        assert_eq!(sf.rows.len(), 5);
        assert_eq!(map.ineq_rows.len(), 2);

        // a feasible point: p = 1, t = 0.25 -> u = t - a1 p - a0 = 0.25 + 2 - 1
        let u_epi = 0.25 - (-2.0) * 1.0 - 1.0;
        let mut x = ConeVec::zeros(&sf.layout);
        x.nonneg[0] = 1.0; // p - 0
        x.nonneg[1] = 1.0; // 2 - p
        x.socs[0][0] = u_epi + 1.0;
        x.socs[0][1] = u_epi - 1.0;
        x.socs[0][2] = 2.0 * 1.0;
        let u = DVector::from_vec(vec![1.0, 0.25]);
        let ax = sf.apply_a(&u, &x);
        for (k, bv) in sf.b.iter().enumerate() {
            assert!((ax[k] - bv).abs() < 1e-12, "row {k}: {} vs {}", ax[k], bv);
        }
    }
}
