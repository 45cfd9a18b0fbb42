//! Primal-dual interior-point solver for the assembled conic programs.
//!
//! Works on the standard form produced by [`standard::standard_form`]:
//! free variables, one nonnegative block, small second-order blocks and
//! dense PSD blocks.  The method is the usual infeasible-start
//! Nesterov–Todd path following with a Mehrotra predictor-corrector:
//! every iteration forms the Schur complement `M = A·H·Aᵀ` over the cone
//! blocks (H block-diagonal from the NT scaling), factors the bordered
//! system
//!
//! ```text
//! [ M   B ] [Δy]   [rhs_y]
//! [ Bᵀ  0 ] [Δu] = [rhs_u]        B = free-variable columns,
//! ```
//!
//! by dense Cholesky with static regularization, and recovers the cone
//! directions from the scaled complementarity equation.  Everything is
//! deterministic: fixed iteration order, no randomized pivoting, no
//! threading.
//!
//! PSD coefficient rows are sparse, so the Schur entries use the
//! sparse-sparse formula `⟨F_k, T·F_l·T⟩ = Σ v₁v₂·T[p,r]·T[s,q]` over
//! nonzero pairs rather than dense congruences.

pub mod cones;
pub mod standard;

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::formulation::ConicProgram;
use cones::{
    compute_scaling, jordan_product, jordan_solve, max_step, ConeLayout, ConeVec, Scaling,
};
use standard::{standard_form, StandardForm, StdMap};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub tol_gap: f64,
    pub tol_primal: f64,
    pub tol_dual: f64,
    /// Fraction-to-boundary step damping in (0, 1).
    pub step_fraction: f64,
    /// Static regularization added to the Schur complement diagonal.
    pub static_reg: f64,
    /// Iterative-refinement passes on the bordered KKT solve.
    pub refine_steps: usize,
    /// Row equilibration of the standard form.
    pub presolve_equilibrate: bool,
    /// Duplicate-equality removal happens at assembly; this gates the
    /// infeasibility certificate checks.
    pub detect_infeasibility: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iterations: 200,
            tol_gap: 1e-8,
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            step_fraction: 0.99,
            static_reg: 1e-9,
            refine_steps: 1,
            presolve_equilibrate: true,
            detect_infeasibility: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    IterationLimit,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap_rel: f64,
    pub mu: f64,
}

/// Per-iteration diagnostics (also the source of the iteration log).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterStats {
    pub iter: usize,
    pub pobj: f64,
    pub dobj: f64,
    pub pres: f64,
    pub dres: f64,
    pub gap_rel: f64,
    pub mu: f64,
    pub sigma: f64,
    pub alpha_p: f64,
    pub alpha_d: f64,
    /// |yᵀr_p|, the primal-infeasibility term of the weak-duality slack.
    pub infeas_flux_p: f64,
    /// |⟨r_d, x⟩| + |⟨r_g, u⟩|, the dual-infeasibility term.
    pub infeas_flux_d: f64,
}

#[derive(Debug, Clone)]
pub struct SolverSolution {
    pub status: SolverStatus,
    /// Values of the program's scalar variables.
    pub scalars: Vec<f64>,
    /// The PSD block (real symmetric embedding), when the program has one.
    pub psd: Option<DMatrix<f64>>,
    /// Dual multipliers per program row: equalities first, then
    /// inequalities, in assembly order.
    pub duals: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
    pub wall_time: std::time::Duration,
    pub history: Vec<IterStats>,
    /// One line per iteration, stable across runs.
    pub log: String,
}

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("program has no cone constraints; nothing for an interior-point method to follow")]
    NoCones,
    #[error("KKT factorization failed beyond recovery at iteration {0}")]
    Factorization(usize),
    #[error("unknown backend `{requested}`; registered: {available:?}")]
    UnknownBackend {
        requested: String,
        available: Vec<String>,
    },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("sdpa bridge error: {0}")]
    Bridge(String),
    #[error("backend disagreement: internal {internal}, backend {backend} (rel diff {rel:.3e})")]
    BackendDisagreement {
        internal: f64,
        backend: f64,
        rel: f64,
    },
}

/// Solves a conic program with the internal interior-point method.
pub fn solve(program: &ConicProgram, settings: &SolverSettings) -> Result<SolverSolution, SolverError> {
    let (sf, map) = standard_form(program, settings.presolve_equilibrate);
    let out = ipm(&sf, settings)?;
    Ok(map_back(program, &sf, &map, out))
}

/// Raw outcome on the standard form.
pub(crate) struct StdOutcome {
    pub status: SolverStatus,
    pub u: DVector<f64>,
    pub x: ConeVec,
    pub y: DVector<f64>,
    pub pobj: f64,
    pub dobj: f64,
    pub residuals: Residuals,
    pub iterations: usize,
    pub wall_time: std::time::Duration,
    pub history: Vec<IterStats>,
    pub log: String,
}

fn map_back(
    program: &ConicProgram,
    sf: &StandardForm,
    map: &StdMap,
    out: StdOutcome,
) -> SolverSolution {
    let mut duals = Vec::with_capacity(map.eq_rows.len() + map.ineq_rows.len());
    for &r in &map.eq_rows {
        duals.push(out.y[r] * sf.row_scale[r]);
    }
    for &(r, _) in &map.ineq_rows {
        duals.push(out.y[r] * sf.row_scale[r]);
    }
    let psd = if program.psd_side > 0 {
        Some(out.x.psds[0].clone())
    } else {
        None
    };
    SolverSolution {
        status: out.status,
        scalars: out.u.iter().copied().collect(),
        psd,
        duals,
        objective: out.pobj,
        dual_objective: out.dobj,
        residuals: out.residuals,
        iterations: out.iterations,
        wall_time: out.wall_time,
        history: out.history,
        log: out.log,
    }
}

// ---------------------------------------------------------------------------
// Schur-complement workspace
// ---------------------------------------------------------------------------

struct SchurWorkspace {
    /// Column lists of the nonnegative block: var -> [(row, coeff)].
    nonneg_cols: Vec<Vec<(u32, f64)>>,
    /// Per SOC block: rows touching it with dense component vectors.
    soc_rows: Vec<Vec<(u32, DVector<f64>)>>,
    /// Per PSD block: rows touching it with expanded (both-orientation)
    /// entry lists (p, q, value).
    psd_rows: Vec<Vec<(u32, Vec<(u32, u32, f64)>)>>,
    border: DMatrix<f64>,
}

impl SchurWorkspace {
    fn build(sf: &StandardForm) -> Self {
        let mut nonneg_cols = vec![Vec::new(); sf.layout.nonneg];
        let mut soc_rows: Vec<Vec<(u32, DVector<f64>)>> = vec![Vec::new(); sf.layout.socs.len()];
        let mut psd_rows: Vec<Vec<(u32, Vec<(u32, u32, f64)>)>> =
            vec![Vec::new(); sf.layout.psds.len()];
        for (k, row) in sf.rows.iter().enumerate() {
            for &(j, c) in &row.nonneg {
                nonneg_cols[j as usize].push((k as u32, c));
            }
            if !row.soc.is_empty() {
                let mut per_block: std::collections::BTreeMap<u32, DVector<f64>> =
                    Default::default();
                for &(blk, comp, c) in &row.soc {
                    per_block
                        .entry(blk)
                        .or_insert_with(|| DVector::zeros(sf.layout.socs[blk as usize]))
                        [comp as usize] += c;
                }
                for (blk, v) in per_block {
                    soc_rows[blk as usize].push((k as u32, v));
                }
            }
            if !row.psd.is_empty() {
                let mut per_block: std::collections::BTreeMap<u32, Vec<(u32, u32, f64)>> =
                    Default::default();
                for &(blk, p, q, c) in &row.psd {
                    let e = per_block.entry(blk).or_default();
                    e.push((p, q, c));
                    if p != q {
                        e.push((q, p, c));
                    }
                }
                for (blk, v) in per_block {
                    psd_rows[blk as usize].push((k as u32, v));
                }
            }
        }
        SchurWorkspace {
            nonneg_cols,
            soc_rows,
            psd_rows,
            border: sf.free_border(),
        }
    }

    /// M = A_cone · H · A_coneᵀ for the current scaling.
    fn assemble(&self, sf: &StandardForm, sc: &Scaling) -> DMatrix<f64> {
        let m = sf.rows.len();
        let mut mat = DMatrix::zeros(m, m);

        for (j, col) in self.nonneg_cols.iter().enumerate() {
            let h = sc.nonneg_w2[j];
            for a in 0..col.len() {
                let (ra, ca) = col[a];
                for b in a..col.len() {
                    let (rb, cb) = col[b];
                    let v = h * ca * cb;
                    mat[(ra as usize, rb as usize)] += v;
                    if ra != rb {
                        mat[(rb as usize, ra as usize)] += v;
                    }
                }
            }
        }

        for (blk, rows) in self.soc_rows.iter().enumerate() {
            let h = &sc.socs[blk].h;
            for a in 0..rows.len() {
                let (ra, ref va) = rows[a];
                let hva = h * va;
                for b in a..rows.len() {
                    let (rb, ref vb) = rows[b];
                    let v = vb.dot(&hva);
                    mat[(ra as usize, rb as usize)] += v;
                    if ra != rb {
                        mat[(rb as usize, ra as usize)] += v;
                    }
                }
            }
        }

        for (blk, rows) in self.psd_rows.iter().enumerate() {
            let t = &sc.psds[blk].t;
            let dim = t.nrows();
            let ts = t.as_slice(); // column-major, (i, j) at j*dim + i
            for a in 0..rows.len() {
                let (ra, ref ea) = rows[a];
                for b in a..rows.len() {
                    let (rb, ref eb) = rows[b];
                    let mut acc = 0.0;
                    for &(p, q, v1) in ea {
                        let (p, q) = (p as usize, q as usize);
                        for &(r, s, v2) in eb {
                            let (r, s) = (r as usize, s as usize);
                            acc += v1 * v2 * ts[r * dim + p] * ts[q * dim + s];
                        }
                    }
                    mat[(ra as usize, rb as usize)] += acc;
                    if ra != rb {
                        mat[(rb as usize, ra as usize)] += acc;
                    }
                }
            }
        }

        mat
    }
}

/// A·x over the cone part only.
fn apply_a_cone(sf: &StandardForm, x: &ConeVec) -> DVector<f64> {
    let mut out = DVector::zeros(sf.rows.len());
    for (k, row) in sf.rows.iter().enumerate() {
        let mut acc = 0.0;
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
        out[k] = acc;
    }
    out
}

struct KktFactors {
    chol_m: Cholesky<f64, nalgebra::Dyn>,
    m_orig: DMatrix<f64>,
    m_inv_b: DMatrix<f64>,
    chol_s: Option<Cholesky<f64, nalgebra::Dyn>>,
}

impl KktFactors {
    fn factor(
        mut m: DMatrix<f64>,
        border: &DMatrix<f64>,
        static_reg: f64,
        iter: usize,
    ) -> Result<Self, SolverError> {
        let m_orig = m.clone();
        let scale = m.diagonal().amax().max(1.0);
        let mut delta = static_reg * scale;
        for _ in 0..4 {
            let mut reg = m.clone();
            for i in 0..reg.nrows() {
                reg[(i, i)] += delta;
            }
            if let Some(chol_m) = Cholesky::new(reg) {
                let n_free = border.ncols();
                let m_inv_b = if n_free > 0 {
                    let mut sol = border.clone();
                    chol_m.solve_mut(&mut sol);
                    sol
                } else {
                    DMatrix::zeros(m.nrows(), 0)
                };
                let chol_s = if n_free > 0 {
                    let mut s = border.transpose() * &m_inv_b;
                    let s_delta = delta.max(static_reg * s.diagonal().amax().max(1.0));
                    for i in 0..s.nrows() {
                        s[(i, i)] += s_delta;
                    }
                    Some(Cholesky::new(s).ok_or(SolverError::Factorization(iter))?)
                } else {
                    None
                };
                return Ok(KktFactors {
                    chol_m,
                    m_orig,
                    m_inv_b,
                    chol_s,
                });
            }
            delta *= 100.0;
        }
        Err(SolverError::Factorization(iter))
    }

    /// Solves [[M, B],[Bᵀ, 0]]·(Δy, Δu) = (r1, r2) with refinement.
    fn solve(
        &self,
        border: &DMatrix<f64>,
        r1: &DVector<f64>,
        r2: &DVector<f64>,
        refine: usize,
    ) -> (DVector<f64>, DVector<f64>) {
        let (mut dy, mut du) = self.solve_once(border, r1, r2);
        for _ in 0..refine {
            let res1 = r1 - &self.m_orig * &dy - border * &du;
            let res2 = r2 - border.transpose() * &dy;
            let (cy, cu) = self.solve_once(border, &res1, &res2);
            dy += cy;
            du += cu;
        }
        (dy, du)
    }

    fn solve_once(
        &self,
        border: &DMatrix<f64>,
        r1: &DVector<f64>,
        r2: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let t1 = self.chol_m.solve(r1);
        match &self.chol_s {
            Some(chol_s) => {
                let rhs = border.transpose() * &t1 - r2;
                let du = chol_s.solve(&rhs);
                let dy = t1 - &self.m_inv_b * &du;
                (dy, du)
            }
            None => (t1, DVector::zeros(0)),
        }
    }
}

// ---------------------------------------------------------------------------
// The interior-point iteration
// ---------------------------------------------------------------------------

pub(crate) fn ipm(sf: &StandardForm, settings: &SolverSettings) -> Result<StdOutcome, SolverError> {
    let start = Instant::now();
    let layout = &sf.layout;
    let nu = layout.degree();
    if nu == 0 {
        return Err(SolverError::NoCones);
    }
    let m = sf.rows.len();
    let b = DVector::from_vec(sf.b.clone());

    // internal objective normalization; undone on report
    let c_cone_raw = sf.c_cone();
    let mut c_norm = c_cone_raw.norm_inf();
    for v in &sf.c_free {
        c_norm = c_norm.max(v.abs());
    }
    let c_scale = c_norm.max(1.0);
    let c_free = DVector::from_vec(sf.c_free.clone()) / c_scale;
    let mut c_cone = c_cone_raw.clone();
    c_cone.scale(1.0 / c_scale);

    let ws = SchurWorkspace::build(sf);

    // identity-scaled interior start
    let xi = sf.b.iter().fold(1.0_f64, |a, v| a.max(v.abs())).min(1e3);
    let eta = (c_norm / c_scale).max(1.0); // = 1 after normalization
    let mut x = ConeVec::identity(layout, xi);
    let mut z = ConeVec::identity(layout, eta);
    let mut u = DVector::zeros(sf.n_free);
    let mut y = DVector::zeros(m);

    let norm_b = 1.0 + b.norm();
    let norm_c = 1.0 + (c_free.norm_squared() + c_cone.dot(&c_cone)).sqrt();

    let mut history: Vec<IterStats> = Vec::new();
    let mut log = String::new();
    let mut status = SolverStatus::IterationLimit;
    let mut tiny_steps = 0usize;
    let mut iterations = 0;

    for iter in 0..settings.max_iterations {
        iterations = iter;
        // residuals
        let ax = apply_a_cone(sf, &x) + &ws.border * &u;
        let r_p = &b - &ax;
        let aty_cone = sf.at_y_cone(&y);
        let mut r_d = c_cone.clone();
        r_d.axpy(-1.0, &aty_cone);
        r_d.axpy(-1.0, &z);
        let r_g = &c_free - sf.at_y_free(&y);

        let pobj = c_free.dot(&u) + c_cone.dot(&x);
        let dobj = b.dot(&y);
        let gap = x.dot(&z);
        let mu = gap / nu as f64;
        let pres = r_p.norm() / norm_b;
        let dres = (r_d.dot(&r_d) + r_g.norm_squared()).sqrt() / norm_c;
        let gap_rel = (pobj - dobj).abs() / pobj.abs().max(dobj.abs()).max(1.0);

        if !mu.is_finite() || !pres.is_finite() || !dres.is_finite() {
            status = SolverStatus::NumericalFailure;
            break;
        }

        let stats_base = IterStats {
            iter,
            pobj: pobj * c_scale + sf.obj_constant,
            dobj: dobj * c_scale + sf.obj_constant,
            pres,
            dres,
            gap_rel,
            mu,
            sigma: 0.0,
            alpha_p: 0.0,
            alpha_d: 0.0,
            infeas_flux_p: y.dot(&r_p).abs() * c_scale,
            infeas_flux_d: (r_d.dot(&x).abs() + r_g.dot(&u).abs()) * c_scale,
        };

        if pres <= settings.tol_primal && dres <= settings.tol_dual && gap_rel <= settings.tol_gap
        {
            history.push(stats_base);
            push_log(&mut log, history.last().unwrap());
            status = SolverStatus::Optimal;
            break;
        }

        // best-effort infeasibility certificates
        if settings.detect_infeasibility {
            let ynorm = y.norm();
            if ynorm > 1e8 {
                let by = b.dot(&y);
                let mut cert_vec = aty_cone.clone();
                cert_vec.axpy(1.0, &z);
                let cert = cert_vec.norm2().hypot(sf.at_y_free(&y).norm()) / ynorm;
                if by > 0.0 && cert < 1e-10 {
                    history.push(stats_base);
                    push_log(&mut log, history.last().unwrap());
                    status = SolverStatus::PrimalInfeasible;
                    break;
                }
            }
            let xnorm = x.norm2().hypot(u.norm());
            if xnorm > 1e8 {
                let cx = c_free.dot(&u) + c_cone.dot(&x);
                if cx < 0.0 && ax.norm() / xnorm < 1e-10 {
                    history.push(stats_base);
                    push_log(&mut log, history.last().unwrap());
                    status = SolverStatus::DualInfeasible;
                    break;
                }
            }
        }

        // NT scaling and Schur factorization
        let sc = match compute_scaling(&x, &z) {
            Ok(sc) => sc,
            Err(_) => {
                status = SolverStatus::NumericalFailure;
                history.push(stats_base);
                push_log(&mut log, history.last().unwrap());
                break;
            }
        };
        let lambda = sc.lambda(layout);
        let mat = ws.assemble(sf, &sc);
        let factors = match KktFactors::factor(mat, &ws.border, settings.static_reg, iter) {
            Ok(f) => f,
            Err(_) => {
                status = SolverStatus::NumericalFailure;
                history.push(stats_base);
                push_log(&mut log, history.last().unwrap());
                break;
            }
        };

        let solve_kkt = |d_s: &ConeVec| {
            // rhs_y = r_p - A_cone(Wᵀd_s - H r_d)
            let mut tvec = sc.from_scaled_primal(d_s);
            tvec.axpy(-1.0, &sc.apply_h(&r_d));
            let rhs_y = &r_p - apply_a_cone(sf, &tvec);
            let (dy, du) = factors.solve(&ws.border, &rhs_y, &r_g, settings.refine_steps);
            let mut dz = r_d.clone();
            dz.axpy(-1.0, &sf.at_y_cone(&dy));
            let zeta = sc.to_scaled_dual(&dz);
            let mut rho = d_s.clone();
            rho.axpy(-1.0, &zeta);
            let dx = sc.from_scaled_primal(&rho);
            (dy, du, dz, dx, rho, zeta)
        };

        // predictor
        let mut d_s_aff = lambda.clone();
        d_s_aff.scale(-1.0);
        let (_dy_a, _du_a, _dz_a, _dx_a, rho_a, zeta_a) = solve_kkt(&d_s_aff);
        let ax_aff = max_step(&sc, layout, &rho_a).min(1.0);
        let az_aff = max_step(&sc, layout, &zeta_a).min(1.0);
        let mut lp = lambda.clone();
        lp.axpy(ax_aff, &rho_a);
        let mut ld = lambda.clone();
        ld.axpy(az_aff, &zeta_a);
        let mu_aff = lp.dot(&ld) / nu as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // corrector
        let corr = jordan_product(&rho_a, &zeta_a);
        let mut d_c = jordan_product(&lambda, &lambda);
        d_c.scale(-1.0);
        d_c.axpy(-1.0, &corr);
        let mut e = ConeVec::identity(layout, 1.0);
        e.scale(sigma * mu);
        d_c.axpy(1.0, &e);
        let d_s = jordan_solve(&sc, &d_c);
        let (dy, du, dz, dx, rho, zeta) = solve_kkt(&d_s);

        let theta = settings.step_fraction;
        let alpha_p = (theta * max_step(&sc, layout, &rho)).min(1.0);
        let alpha_d = (theta * max_step(&sc, layout, &zeta)).min(1.0);

        u.axpy(alpha_p, &du, 1.0);
        x.axpy(alpha_p, &dx);
        y.axpy(alpha_d, &dy, 1.0);
        z.axpy(alpha_d, &dz);

        let stats = IterStats {
            sigma,
            alpha_p,
            alpha_d,
            ..stats_base
        };
        history.push(stats);
        push_log(&mut log, &stats);

        if alpha_p < 1e-7 && alpha_d < 1e-7 {
            tiny_steps += 1;
            if tiny_steps >= 3 {
                status = SolverStatus::NumericalFailure;
                break;
            }
        } else {
            tiny_steps = 0;
        }
        iterations = iter + 1;
    }

    // final (unscaled) report
    let ax = apply_a_cone(sf, &x) + &ws.border * &u;
    let r_p = &b - &ax;
    let aty_cone = sf.at_y_cone(&y);
    let mut r_d = c_cone.clone();
    r_d.axpy(-1.0, &aty_cone);
    r_d.axpy(-1.0, &z);
    let r_g = &c_free - sf.at_y_free(&y);
    let pobj = (c_free.dot(&u) + c_cone.dot(&x)) * c_scale + sf.obj_constant;
    let dobj = b.dot(&y) * c_scale + sf.obj_constant;
    let residuals = Residuals {
        primal: r_p.norm() / norm_b,
        dual: (r_d.dot(&r_d) + r_g.norm_squared()).sqrt() / norm_c,
        gap_rel: (pobj - dobj).abs() / pobj.abs().max(dobj.abs()).max(1.0),
        mu: x.dot(&z) / nu as f64,
    };

    // rescale duals to the original objective
    let mut y_out = y.clone();
    y_out *= c_scale;

    Ok(StdOutcome {
        status,
        u,
        x,
        y: y_out,
        pobj,
        dobj,
        residuals,
        iterations,
        wall_time: start.elapsed(),
        history,
        log,
    })
}

fn push_log(log: &mut String, s: &IterStats) {
    use std::fmt::Write;
    let _ = writeln!(
        log,
        "iter {:3}  pobj {:+.9e}  dobj {:+.9e}  gap {:.3e}  pres {:.3e}  dres {:.3e}  sigma {:.2e}  alpha_p {:.4}  alpha_d {:.4}",
        s.iter, s.pobj, s.dobj, s.gap_rel, s.pres, s.dres, s.sigma, s.alpha_p, s.alpha_d
    );
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Registered solve backends: the in-process method, the SDPA-file
/// round-trip (serializes the program, re-reads it, solves — exercising
/// the export path), and an external command consuming the SDPA file.
pub fn list_backends() -> Vec<String> {
    vec![
        "internal".to_string(),
        "sdpa-roundtrip".to_string(),
        "external:<command>".to_string(),
    ]
}

/// Solves through a named backend.  External backends are given the SDPA
/// file as `argv[1]` and must print `objValPrimal = <value>`.
pub fn solve_via_backend(
    program: &ConicProgram,
    backend: &str,
    settings: &SolverSettings,
) -> Result<SolverSolution, SolverError> {
    match backend {
        "internal" => solve(program, settings),
        "sdpa-roundtrip" => crate::sdpa::solve_roundtrip(program, settings),
        other => {
            if let Some(cmd) = other.strip_prefix("external:") {
                crate::sdpa::solve_external(program, cmd, settings)
            } else {
                Err(SolverError::UnknownBackend {
                    requested: other.to_string(),
                    available: list_backends(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::{AffineRow, Family, PsdCoeff, QuadEpigraph};
    use approx::assert_abs_diff_eq;

    fn qp_program() -> ConicProgram {
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
        prog
    }

    #[test]
    fn qp_micro_instance() {
        let sol = solve(&qp_program(), &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        assert_abs_diff_eq!(sol.objective, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.scalars[0], 1.0, epsilon = 1e-4);
        assert!(sol.residuals.gap_rel <= 1e-8);
    }

    #[test]
    fn psd_micro_instance() {
        // minimize trace(X) s.t. X[0,0] = 1, X psd (2x2) -> 1, X = diag(1,0)
        let mut prog = ConicProgram::new(2);
        prog.objective_psd.push(PsdCoeff {
            p: 0,
            q: 0,
            val: 1.0,
        });
        prog.objective_psd.push(PsdCoeff {
            p: 1,
            q: 1,
            val: 1.0,
        });
        prog.eq(AffineRow {
            scalar: vec![],
            psd: vec![PsdCoeff {
                p: 0,
                q: 0,
                val: 1.0,
            }],
            rhs: 1.0,
            family: Family::Other,
        });
        let sol = solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-7);
        let x = sol.psd.unwrap();
        assert_abs_diff_eq!(x[(0, 0)], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(x[(1, 1)], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(x[(0, 1)], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn mixed_soc_psd_instance() {
        // minimize t + trace(X)
        //   t >= (p - 2)^2, p <= 1 (so p* = 1, t* = 1)
        //   X[0,0] + X[1,1] >= 3 with min trace -> trace = 3
        let mut prog = ConicProgram::new(2);
        let p = prog.add_scalar("p");
        let t = prog.add_scalar("t");
        prog.objective.push((t, 1.0));
        prog.objective_psd.push(PsdCoeff {
            p: 0,
            q: 0,
            val: 1.0,
        });
        prog.objective_psd.push(PsdCoeff {
            p: 1,
            q: 1,
            val: 1.0,
        });
        prog.epigraphs.push(QuadEpigraph {
            t,
            p,
            a2: 1.0,
            a1: -4.0,
            a0: 4.0,
        });
        prog.ge(AffineRow {
            scalar: vec![(p, -1.0)],
            psd: vec![],
            rhs: -1.0,
            family: Family::Other,
        });
        prog.ge(AffineRow {
            scalar: vec![],
            psd: vec![
                PsdCoeff {
                    p: 0,
                    q: 0,
                    val: 1.0,
                },
                PsdCoeff {
                    p: 1,
                    q: 1,
                    val: 1.0,
                },
            ],
            rhs: 3.0,
            family: Family::Other,
        });
        let sol = solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        assert_abs_diff_eq!(sol.objective, 4.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.scalars[p], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn deterministic_logs() {
        let s1 = solve(&qp_program(), &SolverSettings::default()).unwrap();
        let s2 = solve(&qp_program(), &SolverSettings::default()).unwrap();
        assert_eq!(s1.log, s2.log);
        assert!(!s1.log.is_empty());
    }

    #[test]
    fn objective_scaling_leaves_argmin() {
        let base = solve(&qp_program(), &SolverSettings::default()).unwrap();
        let mut scaled = qp_program();
        for c in &mut scaled.objective {
            c.1 *= 10.0;
        }
        let sol = solve(&scaled, &SolverSettings::default()).unwrap();
        assert_abs_diff_eq!(sol.scalars[0], base.scalars[0], epsilon = 1e-6);
        assert_abs_diff_eq!(sol.objective, 10.0 * base.objective, epsilon = 1e-5);
    }

    #[test]
    fn unknown_backend_lists_registered() {
        let e = solve_via_backend(&qp_program(), "blas", &SolverSettings::default());
        match e {
            Err(SolverError::UnknownBackend { available, .. }) => {
                assert!(available.iter().any(|b| b == "internal"));
            }
            _ => panic!("expected unknown-backend error"),
        }
    }

    #[test]
    fn weak_duality_slack_nonnegative_along_path() {
        let sol = solve(&qp_program(), &SolverSettings::default()).unwrap();
        for h in &sol.history {
            // c'x - b'y >= -(infeasibility flux) - slack
            let lhs = h.pobj - h.dobj + h.infeas_flux_p + h.infeas_flux_d;
            assert!(
                lhs >= -1e-6 * h.pobj.abs().max(1.0),
                "weak duality violated at iter {}: {lhs}",
                h.iter
            );
        }
    }
}
