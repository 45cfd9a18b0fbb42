//! Assembly of the relaxed OPF as a standard-form conic program.
//!
//! The lifted variable is the Hermitian matrix `W = v·vᴴ` over the
//! augmented bus set (original buses plus two secondary buses per tunable
//! line, `m = n + 2f` entries).  The solver works in real arithmetic, so
//! `W` is carried as its real symmetric embedding
//!
//! ```text
//! X = [ Re W   -Im W ]        X ⪰ 0   ⇔   W ⪰ 0,
//!     [ Im W    Re W ],       rank X = 2·rank W,
//! ```
//!
//! a `2m × 2m` PSD block.  Every constraint of the relaxation is a real
//! linear functional of `W` and maps to a linear functional of `X` with a
//! factor-½ convention: `Re W_ab = (X[a,b] + X[m+a,m+b])/2` and
//! `Im W_ab = (X[m+a,b] - X[m+b,a])/2`.  [`HermitianCoeff`] hides that
//! bookkeeping.
//!
//! Scalar variables (dispatch, secondary-side transfers, cost epigraphs)
//! stay outside the PSD block; quadratic generation costs become
//! second-order-cone epigraphs rather than extra PSD rows, which keeps the
//! PSD block at `2(n+2f)`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::network::{Generator, NetworkCase};
use crate::transform::{AugBranchKind, AugmentedNetwork};
use crate::Complex;

// ---------------------------------------------------------------------------
// Conic program (modeling layer)
// ---------------------------------------------------------------------------

/// One coefficient of a linear functional on the PSD block: `val` is the
/// entry `F[p,q]` (`p ≤ q`) of a symmetric coefficient matrix, so the
/// functional value is `Σ val·(2-δ_pq)·X[p,q]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdCoeff {
    pub p: u32,
    pub q: u32,
    pub val: f64,
}

/// Constraint families of the assembled program, for the constraint census.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Family {
    PowerBalanceRe,
    PowerBalanceIm,
    SecondaryBalanceRe,
    SecondaryBalanceIm,
    TapRange,
    TapCrossEqual,
    TapImZero,
    TapRePositive,
    VoltageBounds,
    GenActiveBox,
    GenReactiveBox,
    FlowLimit,
    CostEpigraphLinear,
    Other,
}

/// An affine row over the scalar variables and the PSD block.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRow {
    pub scalar: Vec<(usize, f64)>,
    pub psd: Vec<PsdCoeff>,
    pub rhs: f64,
    pub family: Family,
}

impl AffineRow {
    fn canonical_key(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let mut scalar = self.scalar.clone();
        scalar.sort_by_key(|e| e.0);
        for (i, v) in &scalar {
            let _ = write!(s, "s{i}:{v:.17e};");
        }
        let mut psd = self.psd.clone();
        psd.sort_by_key(|e| (e.p, e.q));
        for e in &psd {
            let _ = write!(s, "p{},{}:{:.17e};", e.p, e.q, e.val);
        }
        let _ = write!(s, "={:.17e}", self.rhs);
        s
    }
}

/// Epigraph `t ≥ a2·p² + a1·p + a0` over two scalar variables (`a2 > 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadEpigraph {
    pub t: usize,
    pub p: usize,
    pub a2: f64,
    pub a1: f64,
    pub a0: f64,
}

/// A conic program in the shape produced by the OPF assembly: a linear
/// objective over scalar variables and one PSD matrix block, affine
/// equalities and inequalities, and convex-quadratic epigraphs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProgram {
    pub scalar_names: Vec<String>,
    /// Side of the PSD block (the real embedding, i.e. `2m`); 0 if absent.
    pub psd_side: usize,
    pub equalities: Vec<AffineRow>,
    /// Rows constrain `lhs ≥ rhs`.
    pub inequalities: Vec<AffineRow>,
    pub epigraphs: Vec<QuadEpigraph>,
    /// Linear objective over scalars, plus an optional PSD part.
    pub objective: Vec<(usize, f64)>,
    pub objective_psd: Vec<PsdCoeff>,
    pub objective_constant: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum FormulationError {
    #[error("constraint `{0}` requires a finite bound")]
    InfiniteBound(String),
    #[error("conventional mode expects no flexible lines, found {0}")]
    ConventionalWithFlex(usize),
}

impl ConicProgram {
    pub fn new(psd_side: usize) -> Self {
        ConicProgram {
            psd_side,
            ..Default::default()
        }
    }

    pub fn add_scalar(&mut self, name: impl Into<String>) -> usize {
        self.scalar_names.push(name.into());
        self.scalar_names.len() - 1
    }

    pub fn num_scalars(&self) -> usize {
        self.scalar_names.len()
    }

    pub fn eq(&mut self, row: AffineRow) {
        self.equalities.push(row);
    }

    pub fn ge(&mut self, row: AffineRow) {
        self.inequalities.push(row);
    }

    /// Counts of constraint rows by family, plus epigraph count under a
    /// synthetic `epigraph` key.
    pub fn census(&self) -> BTreeMap<String, usize> {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for r in self.equalities.iter().chain(&self.inequalities) {
            *m.entry(format!("{:?}", r.family)).or_default() += 1;
        }
        *m.entry("epigraph".into()).or_default() += self.epigraphs.len();
        m
    }

    /// Removes exactly duplicated equality rows (same coefficients and
    /// right-hand side); returns how many were dropped.
    pub fn dedup_equalities(&mut self) -> usize {
        let mut seen = std::collections::BTreeSet::new();
        let before = self.equalities.len();
        self.equalities.retain(|r| seen.insert(r.canonical_key()));
        before - self.equalities.len()
    }

    /// Evaluates one affine row at a scalar assignment and PSD matrix.
    pub fn eval_row(&self, row: &AffineRow, scalars: &[f64], x: &DMatrix<f64>) -> f64 {
        let mut v = 0.0;
        for &(i, c) in &row.scalar {
            v += c * scalars[i];
        }
        for e in &row.psd {
            let (p, q) = (e.p as usize, e.q as usize);
            v += if p == q {
                e.val * x[(p, p)]
            } else {
                e.val * (x[(p, q)] + x[(q, p)])
            };
        }
        v
    }

    /// Largest violation over all rows and epigraphs at a candidate point.
    pub fn max_violation(&self, scalars: &[f64], x: &DMatrix<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for r in &self.equalities {
            worst = worst.max((self.eval_row(r, scalars, x) - r.rhs).abs());
        }
        for r in &self.inequalities {
            worst = worst.max(r.rhs - self.eval_row(r, scalars, x));
        }
        for e in &self.epigraphs {
            let p = scalars[e.p];
            worst = worst.max((e.a2 * p + e.a1) * p + e.a0 - scalars[e.t]);
        }
        worst.max(0.0)
    }
}

// ---------------------------------------------------------------------------
// Hermitian functionals on the real embedding
// ---------------------------------------------------------------------------

/// Index bookkeeping for the lifted matrix: `m` complex entries embedded
/// in a `2m × 2m` real symmetric block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WIndexMap {
    /// Complex dimension `n + 2f`.
    pub m: usize,
    /// Original bus count `n`.
    pub n_original: usize,
}

impl WIndexMap {
    pub fn side(&self) -> usize {
        2 * self.m
    }

    /// Extracts the Hermitian matrix from a solved embedding, averaging
    /// over the embedding symmetry so roundoff asymmetry cancels.
    pub fn extract_hermitian(&self, x: &DMatrix<f64>) -> DMatrix<Complex> {
        let m = self.m;
        assert_eq!(x.nrows(), 2 * m);
        DMatrix::from_fn(m, m, |a, b| {
            let re = 0.5 * (x[(a, b)] + x[(m + a, m + b)]);
            let im = 0.5 * (x[(m + a, b)] - x[(m + b, a)]);
            Complex::new(re, im)
        })
    }
}

/// Embeds a Hermitian matrix as the real symmetric `[[Re, -Im],[Im, Re]]`.
/// PSD is preserved in both directions and eigenvalues double in
/// multiplicity.
pub fn embed_hermitian(h: &DMatrix<Complex>) -> DMatrix<f64> {
    let m = h.nrows();
    assert_eq!(h.ncols(), m);
    DMatrix::from_fn(2 * m, 2 * m, |r, c| {
        let (br, br_i) = (r / m, r % m);
        let (bc, bc_i) = (c / m, c % m);
        match (br, bc) {
            (0, 0) | (1, 1) => h[(br_i, bc_i)].re,
            (0, 1) => -h[(br_i, bc_i)].im,
            _ => h[(br_i, bc_i)].im,
        }
    })
}

/// Builder for one real linear functional of the Hermitian `W`, expressed
/// on the real embedding with the factor-½ convention.
#[derive(Debug, Clone, Default)]
pub struct HermitianCoeff {
    entries: BTreeMap<(u32, u32), f64>,
}

impl HermitianCoeff {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, p: usize, q: usize, v: f64) {
        let (p, q) = if p <= q { (p, q) } else { (q, p) };
        *self.entries.entry((p as u32, q as u32)).or_default() += v;
    }

    /// Adds `c·W_aa` (diagonal entries are real).
    pub fn diag(&mut self, m: usize, a: usize, c: f64) -> &mut Self {
        self.push(a, a, 0.5 * c);
        self.push(m + a, m + a, 0.5 * c);
        self
    }

    /// Adds `c·Re W_ab`.
    pub fn re(&mut self, m: usize, a: usize, b: usize, c: f64) -> &mut Self {
        if a == b {
            return self.diag(m, a, c);
        }
        self.push(a, b, 0.25 * c);
        self.push(m + a, m + b, 0.25 * c);
        self
    }

    /// Adds `c·Im W_ab`.  `Im W_ab = -Im W_ba`, diagonal is zero.
    pub fn im(&mut self, m: usize, a: usize, b: usize, c: f64) -> &mut Self {
        if a == b {
            return self;
        }
        self.push(m + a, b, 0.25 * c);
        self.push(m + b, a, -0.25 * c);
        self
    }

    /// Adds the real or imaginary part of `coef·W_ab`.
    pub fn complex_part(
        &mut self,
        m: usize,
        a: usize,
        b: usize,
        coef: Complex,
        imag_part: bool,
    ) -> &mut Self {
        // coef·W_ab = (cr + j ci)(Re + j Im):
        //   real = cr·Re - ci·Im,   imag = ci·Re + cr·Im
        if !imag_part {
            self.re(m, a, b, coef.re).im(m, a, b, -coef.im)
        } else {
            self.re(m, a, b, coef.im).im(m, a, b, coef.re)
        }
    }

    pub fn into_coeffs(self) -> Vec<PsdCoeff> {
        self.entries
            .into_iter()
            .filter(|(_, v)| *v != 0.0)
            .map(|((p, q), val)| PsdCoeff { p, q, val })
            .collect()
    }

    /// Evaluates the functional against a Hermitian matrix directly
    /// (reference path for tests).
    pub fn eval_hermitian(&self, m: usize, w: &DMatrix<Complex>) -> f64 {
        let x = embed_hermitian(w);
        let mut v = 0.0;
        for (&(p, q), &c) in &self.entries {
            let (p, q) = (p as usize, q as usize);
            v += if p == q {
                c * x[(p, p)]
            } else {
                c * (x[(p, q)] + x[(q, p)])
            };
        }
        let _ = m;
        v
    }
}

// ---------------------------------------------------------------------------
// OPF assembly
// ---------------------------------------------------------------------------

/// Assembly options.
#[derive(Debug, Clone, PartialEq)]
pub struct FormulationOptions {
    /// Reactive-penalty weight; multiplies `Σ Q_Gi` in MVAr, consistent
    /// with $/h cost units.
    pub w_q: f64,
    /// Flexible set must be empty; tunable lines were re-declared as
    /// constant branches at rated admittance before augmentation.
    pub conventional_mode: bool,
    /// Enforce active-flow limits at both ends instead of the recorded
    /// from end only.
    pub both_ends: bool,
}

impl Default for FormulationOptions {
    fn default() -> Self {
        FormulationOptions {
            w_q: 0.0,
            conventional_mode: false,
            both_ends: false,
        }
    }
}

/// Where each generator's variables live in the program (fixed entries
/// have no variable).
#[derive(Debug, Clone, PartialEq)]
pub struct GenVars {
    pub p: Option<usize>,
    pub p_fixed: f64,
    pub q: Option<usize>,
    pub q_fixed: f64,
    pub t: Option<usize>,
}

/// Scalar variables of one flexible line's secondary-side transfers
/// `(Re S_iⱼ, Im S_iⱼ, Re S_jᵢ, Im S_jᵢ)`.
pub type FlexVars = [usize; 4];

/// The assembled program together with the variable maps needed to read a
/// solution back.
#[derive(Debug, Clone, PartialEq)]
pub struct OpfProgram {
    pub conic: ConicProgram,
    pub windex: WIndexMap,
    pub gens: Vec<GenVars>,
    pub flex_vars: Vec<FlexVars>,
    pub base_mva: f64,
    pub w_q: f64,
    pub options: FormulationOptions,
    /// Duplicate equality rows removed by the assembly-time presolve.
    pub dropped_duplicate_rows: usize,
}

/// Assembles the relaxed problem over the augmented network.
pub fn assemble(
    aug: &AugmentedNetwork,
    opts: &FormulationOptions,
) -> Result<OpfProgram, FormulationError> {
    if opts.conventional_mode && !aug.flex.is_empty() {
        return Err(FormulationError::ConventionalWithFlex(aug.flex.len()));
    }
    let case = &aug.case;
    let n = aug.n_original;
    let m = aug.n_buses();
    let base = case.base_mva;
    let windex = WIndexMap { m, n_original: n };
    let mut prog = ConicProgram::new(2 * m);

    // -- scalar variables ---------------------------------------------------
    let mut gens = Vec::with_capacity(case.generators.len());
    for (gi, g) in case.generators.iter().enumerate() {
        let p = if g.p_min == g.p_max {
            None
        } else {
            Some(prog.add_scalar(format!("P[g{gi}@{}]", g.bus)))
        };
        let q = if g.q_min == g.q_max {
            None
        } else {
            Some(prog.add_scalar(format!("Q[g{gi}@{}]", g.bus)))
        };
        let t = if p.is_some() && g.cost.c2 > 0.0 {
            Some(prog.add_scalar(format!("t[g{gi}@{}]", g.bus)))
        } else {
            None
        };
        gens.push(GenVars {
            p,
            p_fixed: g.p_min,
            q,
            q_fixed: g.q_min,
            t,
        });
    }
    let mut flex_vars: Vec<FlexVars> = Vec::with_capacity(aug.flex.len());
    for (l, fb) in aug.flex.iter().enumerate() {
        let tag = format!("{}-{}", fb.spec.from, fb.spec.to);
        flex_vars.push([
            prog.add_scalar(format!("ReS_i[{l}:{tag}]")),
            prog.add_scalar(format!("ImS_i[{l}:{tag}]")),
            prog.add_scalar(format!("ReS_j[{l}:{tag}]")),
            prog.add_scalar(format!("ImS_j[{l}:{tag}]")),
        ]);
    }

    // -- objective: Σ f_i(P_Gi) (+ w_q Σ Q_Gi), costs in $/h over MW --------
    for (gi, g) in case.generators.iter().enumerate() {
        let gv = &gens[gi];
        match gv.p {
            Some(p) => {
                if g.cost.c2 > 0.0 {
                    let t = gv.t.unwrap();
                    prog.objective.push((t, 1.0));
                    prog.epigraphs.push(QuadEpigraph {
                        t,
                        p,
                        a2: g.cost.c2 * base * base,
                        a1: g.cost.c1 * base,
                        a0: g.cost.c0,
                    });
                } else {
                    prog.objective.push((p, g.cost.c1 * base));
                    prog.objective_constant += g.cost.c0;
                }
            }
            None => prog.objective_constant += g.cost.eval(gv.p_fixed * base),
        }
        if opts.w_q != 0.0 {
            match gv.q {
                Some(q) => prog.objective.push((q, opts.w_q * base)),
                None => prog.objective_constant += opts.w_q * gv.q_fixed * base,
            }
        }
    }

    // -- power balance at original buses ------------------------------------
    for i in 0..n {
        let mut re = HermitianCoeff::new();
        let mut im = HermitianCoeff::new();
        let y_sh = aug.shunts[i];
        re.complex_part(m, i, i, y_sh.conj(), false);
        im.complex_part(m, i, i, y_sh.conj(), true);
        for br in &aug.branches {
            let (a, b) = (br.from, br.to);
            let other = if a == i {
                b
            } else if b == i {
                a
            } else {
                continue;
            };
            match br.kind {
                AugBranchKind::Constant { .. } | AugBranchKind::Coupling { .. } => {
                    // y*·(W_ii - W_i,other) for both parts
                    let yc = br.admittance.conj();
                    re.complex_part(m, i, i, yc, false)
                        .complex_part(m, i, other, -yc, false);
                    im.complex_part(m, i, i, yc, true)
                        .complex_part(m, i, other, -yc, true);
                }
                AugBranchKind::FlexCore { .. } => unreachable!("core lines join secondary buses"),
            }
        }
        let mut row_re = AffineRow {
            scalar: Vec::new(),
            psd: Vec::new(),
            rhs: case.buses[i].p_load,
            family: Family::PowerBalanceRe,
        };
        let mut row_im = AffineRow {
            scalar: Vec::new(),
            psd: Vec::new(),
            rhs: case.buses[i].q_load,
            family: Family::PowerBalanceIm,
        };
        for gi in case.generators_at(i) {
            match gens[gi].p {
                Some(p) => row_re.scalar.push((p, 1.0)),
                None => row_re.rhs -= gens[gi].p_fixed,
            }
            match gens[gi].q {
                Some(q) => row_im.scalar.push((q, 1.0)),
                None => row_im.rhs -= gens[gi].q_fixed,
            }
        }
        // transformer transfers leave the bus: move to the left-hand side
        for (l, fb) in aug.flex.iter().enumerate() {
            if fb.i == i {
                row_re.scalar.push((flex_vars[l][0], -1.0));
                row_im.scalar.push((flex_vars[l][1], -1.0));
            }
            if fb.j == i {
                row_re.scalar.push((flex_vars[l][2], -1.0));
                row_im.scalar.push((flex_vars[l][3], -1.0));
            }
        }
        // network injection terms also move left with negative sign
        negate(&mut re);
        negate(&mut im);
        row_re.psd = re.into_coeffs();
        row_im.psd = im.into_coeffs();
        prog.eq(row_re);
        prog.eq(row_im);
    }

    // -- secondary-side power balance defines the transfers -----------------
    for (l, fb) in aug.flex.iter().enumerate() {
        let y_core = Complex::new(fb.spec.g_rated, fb.spec.b_rated);
        for (side, sec, prim, other_sec) in [
            (0usize, fb.sec_i, fb.i, fb.sec_j),
            (2usize, fb.sec_j, fb.j, fb.sec_i),
        ] {
            // S_sec = g_c (W_ss - W_s,prim) + y_core* (W_ss - W_s,other)
            let mut re = HermitianCoeff::new();
            let mut im = HermitianCoeff::new();
            let gc = Complex::new(fb.coupling_g, 0.0);
            re.complex_part(m, sec, sec, gc, false)
                .complex_part(m, sec, prim, -gc, false)
                .complex_part(m, sec, sec, y_core.conj(), false)
                .complex_part(m, sec, other_sec, -y_core.conj(), false);
            im.complex_part(m, sec, sec, gc, true)
                .complex_part(m, sec, prim, -gc, true)
                .complex_part(m, sec, sec, y_core.conj(), true)
                .complex_part(m, sec, other_sec, -y_core.conj(), true);
            negate(&mut re);
            negate(&mut im);
            prog.eq(AffineRow {
                scalar: vec![(flex_vars[l][side], 1.0)],
                psd: re.into_coeffs(),
                rhs: 0.0,
                family: Family::SecondaryBalanceRe,
            });
            prog.eq(AffineRow {
                scalar: vec![(flex_vars[l][side + 1], 1.0)],
                psd: im.into_coeffs(),
                rhs: 0.0,
                family: Family::SecondaryBalanceIm,
            });
        }
    }

    // -- tap-correlation constraints -----------------------------------------
    for fb in &aug.flex {
        let (kmin, kmax) = (fb.spec.k_min, fb.spec.k_max);
        for (prim, sec) in [(fb.i, fb.sec_i), (fb.j, fb.sec_j)] {
            // k_min·W_pp ≤ W_ss ≤ k_max·W_pp
            let mut lo = HermitianCoeff::new();
            lo.diag(m, sec, 1.0).diag(m, prim, -kmin);
            prog.ge(AffineRow {
                scalar: vec![],
                psd: lo.into_coeffs(),
                rhs: 0.0,
                family: Family::TapRange,
            });
            let mut hi = HermitianCoeff::new();
            hi.diag(m, prim, kmax).diag(m, sec, -1.0);
            prog.ge(AffineRow {
                scalar: vec![],
                psd: hi.into_coeffs(),
                rhs: 0.0,
                family: Family::TapRange,
            });
            // Im W_p,s = 0 and Re W_p,s ≥ 0
            let mut imz = HermitianCoeff::new();
            imz.im(m, prim, sec, 1.0);
            prog.eq(AffineRow {
                scalar: vec![],
                psd: imz.into_coeffs(),
                rhs: 0.0,
                family: Family::TapImZero,
            });
            let mut rep = HermitianCoeff::new();
            rep.re(m, prim, sec, 1.0);
            prog.ge(AffineRow {
                scalar: vec![],
                psd: rep.into_coeffs(),
                rhs: 0.0,
                family: Family::TapRePositive,
            });
        }
        // W_{i_j, j} = W_{i, j_i}: one complex equality, two real rows
        for imag in [false, true] {
            let mut c = HermitianCoeff::new();
            c.complex_part(m, fb.sec_i, fb.j, Complex::new(1.0, 0.0), imag)
                .complex_part(m, fb.i, fb.sec_j, Complex::new(-1.0, 0.0), imag);
            prog.eq(AffineRow {
                scalar: vec![],
                psd: c.into_coeffs(),
                rhs: 0.0,
                family: Family::TapCrossEqual,
            });
        }
    }

    // -- voltage magnitude limits on original buses --------------------------
    for i in 0..n {
        let bus = &case.buses[i];
        let mut lo = HermitianCoeff::new();
        lo.diag(m, i, 1.0);
        prog.ge(AffineRow {
            scalar: vec![],
            psd: lo.into_coeffs(),
            rhs: bus.v_min * bus.v_min,
            family: Family::VoltageBounds,
        });
        let mut hi = HermitianCoeff::new();
        hi.diag(m, i, -1.0);
        prog.ge(AffineRow {
            scalar: vec![],
            psd: hi.into_coeffs(),
            rhs: -(bus.v_max * bus.v_max),
            family: Family::VoltageBounds,
        });
    }

    // -- generation box limits ------------------------------------------------
    for (gi, g) in case.generators.iter().enumerate() {
        if let Some(p) = gens[gi].p {
            prog.ge(AffineRow {
                scalar: vec![(p, 1.0)],
                psd: vec![],
                rhs: g.p_min,
                family: Family::GenActiveBox,
            });
            prog.ge(AffineRow {
                scalar: vec![(p, -1.0)],
                psd: vec![],
                rhs: -g.p_max,
                family: Family::GenActiveBox,
            });
        }
        if let Some(q) = gens[gi].q {
            prog.ge(AffineRow {
                scalar: vec![(q, 1.0)],
                psd: vec![],
                rhs: g.q_min,
                family: Family::GenReactiveBox,
            });
            prog.ge(AffineRow {
                scalar: vec![(q, -1.0)],
                psd: vec![],
                rhs: -g.q_max,
                family: Family::GenReactiveBox,
            });
        }
    }

    // -- active-flow limits -----------------------------------------------
    for br in &aug.branches {
        let Some(fmax) = br.p_flow_max else { continue };
        let ends: &[(usize, usize)] = if opts.both_ends {
            &[(br.from, br.to), (br.to, br.from)]
        } else {
            &[(br.from, br.to)]
        };
        match br.kind {
            AugBranchKind::Coupling { .. } => continue,
            AugBranchKind::Constant { .. } | AugBranchKind::FlexCore { .. } => {
                for &(a, b) in ends {
                    // |Re{y*(W_aa - W_ab)}| ≤ fmax
                    let mut flow = HermitianCoeff::new();
                    let yc = br.admittance.conj();
                    flow.complex_part(m, a, a, yc, false)
                        .complex_part(m, a, b, -yc, false);
                    let coeffs = flow.into_coeffs();
                    prog.ge(AffineRow {
                        scalar: vec![],
                        psd: coeffs.iter().map(|e| PsdCoeff { val: -e.val, ..*e }).collect(),
                        rhs: -fmax,
                        family: Family::FlowLimit,
                    });
                    prog.ge(AffineRow {
                        scalar: vec![],
                        psd: coeffs,
                        rhs: -fmax,
                        family: Family::FlowLimit,
                    });
                }
            }
        }
    }

    let dropped = prog.dedup_equalities();

    Ok(OpfProgram {
        conic: prog,
        windex,
        gens,
        flex_vars,
        base_mva: base,
        w_q: opts.w_q,
        options: opts.clone(),
        dropped_duplicate_rows: dropped,
    })
}

fn negate(c: &mut HermitianCoeff) {
    for v in c.entries.values_mut() {
        *v = -*v;
    }
}

/// Cost and penalty of a dispatch, evaluated from the generator curves
/// directly (not from the epigraph variables).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveBreakdown {
    /// Σ f_i(P_Gi), $/h.
    pub cost: f64,
    /// w_q · Σ Q_Gi with Q in MVAr.
    pub penalty: f64,
}

impl ObjectiveBreakdown {
    pub fn total(&self) -> f64 {
        self.cost + self.penalty
    }
}

/// Evaluates generation cost and penalty at a scalar-variable assignment.
pub fn objective_value(
    prog: &OpfProgram,
    generators: &[Generator],
    scalars: &[f64],
) -> ObjectiveBreakdown {
    let mut cost = 0.0;
    let mut penalty = 0.0;
    for (gi, g) in generators.iter().enumerate() {
        let gv = &prog.gens[gi];
        let p = gv.p.map(|i| scalars[i]).unwrap_or(gv.p_fixed);
        let q = gv.q.map(|i| scalars[i]).unwrap_or(gv.q_fixed);
        cost += g.cost.eval(p * prog.base_mva);
        penalty += prog.w_q * q * prog.base_mva;
    }
    ObjectiveBreakdown { cost, penalty }
}

/// Per-generator dispatch read back from a scalar assignment, p.u.
pub fn dispatch_from_scalars(prog: &OpfProgram, scalars: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = prog
        .gens
        .iter()
        .map(|gv| gv.p.map(|i| scalars[i]).unwrap_or(gv.p_fixed))
        .collect();
    let q = prog
        .gens
        .iter()
        .map(|gv| gv.q.map(|i| scalars[i]).unwrap_or(gv.q_fixed))
        .collect();
    (p, q)
}

/// Lifts a full augmented-network voltage vector to the embedding of
/// `W = v vᴴ` (reference path for feasibility-transfer tests).
pub fn lift_voltages(v: &[Complex]) -> DMatrix<f64> {
    let m = v.len();
    let w = DMatrix::from_fn(m, m, |a, b| v[a] * v[b].conj());
    embed_hermitian(&w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{bind_flex_lines, load_case, parse_flex_config, parse_matpower_case};
    use crate::transform::augment;
    use approx::assert_abs_diff_eq;

    const TWO_BUS: &str = "\
function mpc = two_bus
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t138\t1\t1.05\t0.95;
\t2\t1\t50\t10\t0\t0\t1\t1\t0\t138\t1\t1.05\t0.95;
];
mpc.gen = [
\t1\t0\t0\t50\t-50\t1\t100\t1\t200\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;
];
mpc.branch = [
\t1\t2\t0.01\t0.1\t0.02\t80\t0\t0\t0\t0\t1\t-360\t360;
];
mpc.gencost = [
\t2\t0\t0\t3\t0.01\t40\t0;
];
";

    fn lift_w(v: &[Complex]) -> DMatrix<Complex> {
        let m = v.len();
        DMatrix::from_fn(m, m, |a, b| v[a] * v[b].conj())
    }

    #[test]
    fn embedding_of_identity_is_identity() {
        let h = DMatrix::from_diagonal_element(2, 2, Complex::new(1.0, 0.0));
        let x = embed_hermitian(&h);
        assert_eq!(x, DMatrix::identity(4, 4));
    }

    #[test]
    fn embedding_doubles_eigenvalue_multiplicity() {
        // [[1, j], [-j, 1]] has eigenvalues {0, 2}
        let mut h = DMatrix::from_element(2, 2, Complex::new(0.0, 0.0));
        h[(0, 0)] = Complex::new(1.0, 0.0);
        h[(1, 1)] = Complex::new(1.0, 0.0);
        h[(0, 1)] = Complex::new(0.0, 1.0);
        h[(1, 0)] = Complex::new(0.0, -1.0);
        let x = embed_hermitian(&h);
        let mut eigs: Vec<f64> = x.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (e, want) in eigs.iter().zip([0.0, 0.0, 2.0, 2.0]) {
            assert_abs_diff_eq!(*e, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn hermitian_functionals_match_direct_evaluation() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let m = 4;
        for _ in 0..200 {
            let v: Vec<Complex> = (0..m)
                .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let w = lift_w(&v);
            let x = embed_hermitian(&w);
            let (a, b) = (rng.random_range(0..m), rng.random_range(0..m));
            let coef = Complex::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));

            for imag in [false, true] {
                let mut hc = HermitianCoeff::new();
                hc.complex_part(m, a, b, coef, imag);
                let want = if imag {
                    (coef * w[(a, b)]).im
                } else {
                    (coef * w[(a, b)]).re
                };
                // evaluate through the embedding coefficients
                let mut got = 0.0;
                for e in hc.clone().into_coeffs() {
                    let (p, q) = (e.p as usize, e.q as usize);
                    got += if p == q {
                        e.val * x[(p, p)]
                    } else {
                        e.val * (x[(p, q)] + x[(q, p)])
                    };
                }
                assert_abs_diff_eq!(got, want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn extract_hermitian_inverts_embedding() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = 5;
        let v: Vec<Complex> = (0..m)
            .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let w = lift_w(&v);
        let x = embed_hermitian(&w);
        let back = WIndexMap { m, n_original: m }.extract_hermitian(&x);
        for a in 0..m {
            for b in 0..m {
                assert_abs_diff_eq!((w[(a, b)] - back[(a, b)]).norm(), 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn two_bus_constant_program_shape() {
        let case = parse_matpower_case(TWO_BUS).unwrap();
        let aug = augment(&case, 0.04).unwrap();
        let prog = assemble(&aug, &FormulationOptions::default()).unwrap();
        // PSD block: 2 complex buses -> 4x4 real
        assert_eq!(prog.conic.psd_side, 4);
        // hand enumeration: 4 power-balance equalities, no tap rows;
        // inequalities: 4 voltage bounds + 4 gen box + 2 flow rows
        assert_eq!(prog.conic.equalities.len(), 4);
        assert_eq!(prog.conic.inequalities.len(), 10);
        assert_eq!(prog.conic.epigraphs.len(), 1);
        let census = prog.conic.census();
        assert_eq!(census["PowerBalanceRe"], 2);
        assert_eq!(census["PowerBalanceIm"], 2);
        assert_eq!(census["VoltageBounds"], 4);
        assert_eq!(census["GenActiveBox"], 2);
        assert_eq!(census["GenReactiveBox"], 2);
        assert_eq!(census["FlowLimit"], 2);
        assert_eq!(prog.dropped_duplicate_rows, 0);
    }

    #[test]
    fn flexible_118_psd_block_dimensions() {
        let case_text = include_str!("../data/ieee118.m");
        let flex_text = "\
scale-pgmax 2
pmax-flow-mw 200
zero-flex-resistance
flex 23 25 0.8 3.0
flex 25 27 0.8 3.0
flex 42 49 0.8 3.0
flex 47 69 0.8 3.0
flex 100 106 0.8 3.0
";
        let (case, cfg) = load_case(case_text, Some(flex_text)).unwrap();
        assert_eq!(case.n_buses(), 118);
        assert_eq!(case.in_service_branches().count(), 186);
        assert_eq!(
            case.generators.iter().filter(|g| g.is_condenser()).count(),
            35
        );
        let aug = augment(&case, cfg.epsilon).unwrap();
        assert_eq!(aug.n_buses(), 128);
        let prog = assemble(&aug, &FormulationOptions::default()).unwrap();
        assert_eq!(prog.conic.psd_side, 256);

        // conventional: drop flex, k pinned at one
        let mut conv = case.clone();
        conv.flex_lines.clear();
        let aug_c = augment(&conv, cfg.epsilon).unwrap();
        let prog_c = assemble(
            &aug_c,
            &FormulationOptions {
                conventional_mode: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(prog_c.conic.psd_side, 236);
    }

    #[test]
    fn feasible_lift_satisfies_all_constraints() {
        // Pick voltages plus tap-consistent secondaries, read the dispatch
        // and the bus-2 load off the power-flow equations, and check every
        // assembled constraint at the lifted point.
        let mut case = parse_matpower_case(TWO_BUS).unwrap();
        let cfg = parse_flex_config("flex 1 2 0.8 3.0\n").unwrap();

        let k = 1.4_f64;
        let v1 = Complex::from_polar(1.02, 0.0);
        let v2 = Complex::from_polar(0.99, -0.04);
        let v = [v1, v2, v1 * k.sqrt(), v2 * k.sqrt()];

        // flows through the transformer-pair circuit at these voltages
        let b_rated = case.branches[0].series_b;
        let eps = 0.04;
        let g = Complex::new(eps * b_rated.abs(), 0.0);
        let y_core = Complex::new(0.0, b_rated);
        let s_i_sec = g.conj() * v[2] * (v[2] - v[0]).conj()
            + y_core.conj() * v[2] * (v[2] - v[3]).conj();
        let s_j_sec = g.conj() * v[3] * (v[3] - v[1]).conj()
            + y_core.conj() * v[3] * (v[3] - v[2]).conj();
        let inj_1 = g.conj() * v[0] * (v[0] - v[2]).conj() + s_i_sec;
        let inj_2 = g.conj() * v[1] * (v[1] - v[3]).conj() + s_j_sec;

        // make bus 2 a load bus that absorbs exactly the incoming power
        // (charging shunts add y_sh* |V|^2 on each side)
        let y_sh2 = Complex::new(0.0, 0.5 * case.branches[0].charging_b);
        case.buses[1].p_load = -(inj_2.re + (y_sh2.conj() * v[1].norm_sqr()).re);
        case.buses[1].q_load = -(inj_2.im + (y_sh2.conj() * v[1].norm_sqr()).im);

        let case = bind_flex_lines(&case, &cfg.entries).unwrap();
        let aug = augment(&case, eps).unwrap();
        let prog = assemble(&aug, &FormulationOptions::default()).unwrap();
        let x = lift_voltages(&v);

        let mut scalars = vec![0.0; prog.conic.num_scalars()];
        let gv = &prog.gens[0];
        let y_sh1 = aug.shunts[0];
        scalars[gv.p.unwrap()] = inj_1.re + (y_sh1.conj() * v[0].norm_sqr()).re;
        scalars[gv.q.unwrap()] = inj_1.im + (y_sh1.conj() * v[0].norm_sqr()).im;
        scalars[gv.t.unwrap()] = case.generators[0]
            .cost
            .eval(scalars[gv.p.unwrap()] * case.base_mva)
            + 1e-9;
        let fvars = prog.flex_vars[0];
        scalars[fvars[0]] = s_i_sec.re;
        scalars[fvars[1]] = s_i_sec.im;
        scalars[fvars[2]] = s_j_sec.re;
        scalars[fvars[3]] = s_j_sec.im;

        let viol = prog.conic.max_violation(&scalars, &x);
        assert!(
            viol < 1e-8,
            "lifted point violates assembled constraints by {viol}"
        );
    }
}
