//! Cone block-vectors and Nesterov–Todd scalings.
//!
//! Iterates live in a product of nonnegative, second-order and PSD cones
//! (free variables are handled separately in the KKT system).  The NT
//! scaling maps the primal and dual cone points to one common scaled point
//! λ; all complementarity linearizations and step-length computations
//! happen in that scaled space.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Cone block layout of a standard-form problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConeLayout {
    pub nonneg: usize,
    pub socs: Vec<usize>,
    pub psds: Vec<usize>,
}

impl ConeLayout {
    /// Barrier degree ν (= total rank of the cone product).
    pub fn degree(&self) -> usize {
        self.nonneg + self.socs.len() + self.psds.iter().sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.degree() == 0
    }
}

/// A point in the cone product (PSD parts stored as dense symmetric
/// matrices).
#[derive(Debug, Clone, PartialEq)]
pub struct ConeVec {
    pub nonneg: DVector<f64>,
    pub socs: Vec<DVector<f64>>,
    pub psds: Vec<DMatrix<f64>>,
}

impl ConeVec {
    pub fn zeros(layout: &ConeLayout) -> Self {
        ConeVec {
            nonneg: DVector::zeros(layout.nonneg),
            socs: layout.socs.iter().map(|&d| DVector::zeros(d)).collect(),
            psds: layout
                .psds
                .iter()
                .map(|&d| DMatrix::zeros(d, d))
                .collect(),
        }
    }

    /// The cone identity element scaled by `v`: ones / (v, 0, …) / v·I.
    pub fn identity(layout: &ConeLayout, v: f64) -> Self {
        let mut e = Self::zeros(layout);
        e.nonneg.fill(v);
        for s in &mut e.socs {
            if s.len() > 0 {
                s[0] = v;
            }
        }
        for p in &mut e.psds {
            p.fill_with_identity();
            *p *= v;
        }
        e
    }

    pub fn dot(&self, other: &ConeVec) -> f64 {
        let mut acc = self.nonneg.dot(&other.nonneg);
        for (a, b) in self.socs.iter().zip(&other.socs) {
            acc += a.dot(b);
        }
        for (a, b) in self.psds.iter().zip(&other.psds) {
            acc += a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
        }
        acc
    }

    pub fn axpy(&mut self, a: f64, x: &ConeVec) {
        self.nonneg.axpy(a, &x.nonneg, 1.0);
        for (s, xs) in self.socs.iter_mut().zip(&x.socs) {
            s.axpy(a, xs, 1.0);
        }
        for (p, xp) in self.psds.iter_mut().zip(&x.psds) {
            *p += xp * a;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.nonneg *= a;
        for s in &mut self.socs {
            *s *= a;
        }
        for p in &mut self.psds {
            *p *= a;
        }
    }

    pub fn norm_inf(&self) -> f64 {
        let mut n: f64 = self.nonneg.iter().fold(0.0, |m, v| m.max(v.abs()));
        for s in &self.socs {
            n = s.iter().fold(n, |m, v| m.max(v.abs()));
        }
        for p in &self.psds {
            n = p.iter().fold(n, |m, v| m.max(v.abs()));
        }
        n
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// NT scaling of one second-order cone block, kept as dense matrices
/// (blocks here are tiny).
#[derive(Debug, Clone)]
pub struct SocScaling {
    pub w: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
    /// H = W², the primal-dual scaling applied in the Schur complement.
    pub h: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

/// NT scaling of one PSD block.
#[derive(Debug, Clone)]
pub struct PsdScaling {
    /// R with X = R·Λ·Rᵀ-consistent congruences: W(Z) = RᵀZR,
    /// W⁻ᵀ(X) = R⁻¹XR⁻ᵀ, both equal diag(λ).
    pub r: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    /// T = R·Rᵀ, the scaling point with T·Z·T = X.
    pub t: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Scaling {
    /// w² = x/z per nonnegative entry.
    pub nonneg_w2: DVector<f64>,
    pub nonneg_lambda: DVector<f64>,
    pub socs: Vec<SocScaling>,
    pub psds: Vec<PsdScaling>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScalingError {
    #[error("iterate left the cone interior (nonnegative block)")]
    NonNegBoundary,
    #[error("iterate left the cone interior (second-order block)")]
    SocBoundary,
    #[error("PSD block factorization failed")]
    PsdFactorization,
}

fn soc_residual(x: &DVector<f64>) -> f64 {
    let head = x[0];
    let tail = x.rows(1, x.len() - 1).norm();
    (head - tail) * (head + tail)
}

/// J = diag(1, -1, …, -1) applied to a vector.
fn jmul(x: &DVector<f64>) -> DVector<f64> {
    let mut y = -x.clone();
    y[0] = x[0];
    y
}

/// Computes the NT scaling for the pair (x, z), both strictly interior.
pub fn compute_scaling(x: &ConeVec, z: &ConeVec) -> Result<Scaling, ScalingError> {
    // nonneg
    let mut w2 = DVector::zeros(x.nonneg.len());
    let mut lam = DVector::zeros(x.nonneg.len());
    for i in 0..x.nonneg.len() {
        let (xi, zi) = (x.nonneg[i], z.nonneg[i]);
        if xi <= 0.0 || zi <= 0.0 {
            return Err(ScalingError::NonNegBoundary);
        }
        w2[i] = xi / zi;
        lam[i] = (xi * zi).sqrt();
    }

    // second-order blocks
    let mut socs = Vec::with_capacity(x.socs.len());
    for (xs, zs) in x.socs.iter().zip(&z.socs) {
        let rx = soc_residual(xs);
        let rz = soc_residual(zs);
        if rx <= 0.0 || rz <= 0.0 || xs[0] <= 0.0 || zs[0] <= 0.0 {
            return Err(ScalingError::SocBoundary);
        }
        let (rx, rz) = (rx.sqrt(), rz.sqrt());
        let xbar = xs / rx;
        let zbar = zs / rz;
        let gamma = ((1.0 + xbar.dot(&zbar)) / 2.0).sqrt();
        let wbar = (&xbar + jmul(&zbar)) / (2.0 * gamma);
        let eta = (rx / rz).sqrt();

        let d = xs.len();
        let mut j = DMatrix::from_diagonal_element(d, d, -1.0);
        j[(0, 0)] = 1.0;
        let w = (2.0 * &wbar * wbar.transpose() - &j) * eta;
        let u = jmul(&wbar);
        let w_inv = (2.0 * &u * u.transpose() - j) / eta;
        let h = &w * &w;
        let lambda = &w * zs;
        socs.push(SocScaling {
            w,
            w_inv,
            h,
            lambda,
        });
    }

    // PSD blocks
    let mut psds = Vec::with_capacity(x.psds.len());
    for (xp, zp) in x.psds.iter().zip(&z.psds) {
        let d = xp.nrows();
        let chol_x = Cholesky::new(xp.clone()).ok_or(ScalingError::PsdFactorization)?;
        let l = chol_x.l();
        let msym = l.transpose() * zp * &l;
        let eig = msym.symmetric_eigen();
        // eigenvalues of LᵀZL are the squared scaled spectrum
        let mut lambda = DVector::zeros(d);
        for i in 0..d {
            let e = eig.eigenvalues[i];
            if !(e > 0.0) {
                return Err(ScalingError::PsdFactorization);
            }
            lambda[i] = e.sqrt();
        }
        // R = L·V·diag(d^{-1/4}), R⁻¹ = diag(d^{1/4})·Vᵀ·L⁻¹
        let mut v_scaled = eig.eigenvectors.clone();
        let mut v_scaled_inv = eig.eigenvectors.transpose();
        for i in 0..d {
            let s = eig.eigenvalues[i].powf(-0.25);
            let si = 1.0 / s;
            v_scaled.column_mut(i).scale_mut(s);
            v_scaled_inv.row_mut(i).scale_mut(si);
        }
        let r = &l * v_scaled;
        let mut l_inv = DMatrix::identity(d, d);
        l.solve_lower_triangular_mut(&mut l_inv);
        let r_inv = v_scaled_inv * l_inv;
        let t = &r * r.transpose();
        psds.push(PsdScaling {
            r,
            r_inv,
            t,
            lambda,
        });
    }

    Ok(Scaling {
        nonneg_w2: w2,
        nonneg_lambda: lam,
        socs,
        psds,
    })
}

impl Scaling {
    /// λ as a cone vector (PSD parts diagonal).
    pub fn lambda(&self, layout: &ConeLayout) -> ConeVec {
        let mut v = ConeVec::zeros(layout);
        v.nonneg = self.nonneg_lambda.clone();
        for (s, sc) in v.socs.iter_mut().zip(&self.socs) {
            *s = sc.lambda.clone();
        }
        for (p, sc) in v.psds.iter_mut().zip(&self.psds) {
            p.set_diagonal(&sc.lambda);
        }
        v
    }

    /// W(z): dual side to scaled space.
    pub fn to_scaled_dual(&self, z: &ConeVec) -> ConeVec {
        let mut out = z.clone();
        for i in 0..out.nonneg.len() {
            out.nonneg[i] = z.nonneg[i] * self.nonneg_w2[i].sqrt();
        }
        for (o, (s, sc)) in out.socs.iter_mut().zip(z.socs.iter().zip(&self.socs)) {
            *o = &sc.w * s;
        }
        for (o, (zp, sc)) in out.psds.iter_mut().zip(z.psds.iter().zip(&self.psds)) {
            *o = sc.r.transpose() * zp * &sc.r;
            symmetrize(o);
        }
        out
    }

    /// W⁻ᵀ(x): primal side to scaled space.
    pub fn to_scaled_primal(&self, x: &ConeVec) -> ConeVec {
        let mut out = x.clone();
        for i in 0..out.nonneg.len() {
            out.nonneg[i] = x.nonneg[i] / self.nonneg_w2[i].sqrt();
        }
        for (o, (s, sc)) in out.socs.iter_mut().zip(x.socs.iter().zip(&self.socs)) {
            *o = &sc.w_inv * s;
        }
        for (o, (xp, sc)) in out.psds.iter_mut().zip(x.psds.iter().zip(&self.psds)) {
            *o = &sc.r_inv * xp * sc.r_inv.transpose();
            symmetrize(o);
        }
        out
    }

    /// Wᵀ(u): scaled space back to the primal side.
    pub fn from_scaled_primal(&self, u: &ConeVec) -> ConeVec {
        let mut out = u.clone();
        for i in 0..out.nonneg.len() {
            out.nonneg[i] = u.nonneg[i] * self.nonneg_w2[i].sqrt();
        }
        for (o, (s, sc)) in out.socs.iter_mut().zip(u.socs.iter().zip(&self.socs)) {
            *o = &sc.w * s;
        }
        for (o, (up, sc)) in out.psds.iter_mut().zip(u.psds.iter().zip(&self.psds)) {
            *o = &sc.r * up * sc.r.transpose();
            symmetrize(o);
        }
        out
    }

    /// H(u) = WᵀW(u), the primal-dual scaling (T·U·T on PSD blocks).
    pub fn apply_h(&self, u: &ConeVec) -> ConeVec {
        let mut out = u.clone();
        for i in 0..out.nonneg.len() {
            out.nonneg[i] = u.nonneg[i] * self.nonneg_w2[i];
        }
        for (o, (s, sc)) in out.socs.iter_mut().zip(u.socs.iter().zip(&self.socs)) {
            *o = &sc.h * s;
        }
        for (o, (up, sc)) in out.psds.iter_mut().zip(u.psds.iter().zip(&self.psds)) {
            *o = &sc.t * up * &sc.t;
            symmetrize(o);
        }
        out
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

// --------------------------------------------------------------------------
// Jordan-algebra operations in scaled space
// --------------------------------------------------------------------------

/// u ∘ v per cone (symmetrized matrix product on PSD blocks).
pub fn jordan_product(a: &ConeVec, b: &ConeVec) -> ConeVec {
    let mut out = a.clone();
    for i in 0..out.nonneg.len() {
        out.nonneg[i] = a.nonneg[i] * b.nonneg[i];
    }
    for (o, (u, v)) in out.socs.iter_mut().zip(a.socs.iter().zip(&b.socs)) {
        let head = u.dot(v);
        let mut w = v * u[0] + &u.rows(1, u.len() - 1).clone_owned().insert_row(0, 0.0) * v[0];
        // the line above double-counts nothing: w = u0·v + v0·(0, u_1..)
        w[0] = head;
        *o = w;
    }
    for (o, (u, v)) in out.psds.iter_mut().zip(a.psds.iter().zip(&b.psds)) {
        let uv = u * v;
        *o = (&uv + uv.transpose()) * 0.5;
    }
    out
}

/// Solves λ ∘ q = d for q, where λ is the scaled point (diagonal on PSD
/// blocks).
pub fn jordan_solve(scaling: &Scaling, d: &ConeVec) -> ConeVec {
    let mut out = d.clone();
    for i in 0..out.nonneg.len() {
        out.nonneg[i] = d.nonneg[i] / scaling.nonneg_lambda[i];
    }
    for (o, (dv, sc)) in out.socs.iter_mut().zip(d.socs.iter().zip(&scaling.socs)) {
        let lam = &sc.lambda;
        let n = lam.len();
        let l0 = lam[0];
        let l1 = lam.rows(1, n - 1);
        let det = l0 * l0 - l1.norm_squared();
        let q0 = (l0 * dv[0] - l1.dot(&dv.rows(1, n - 1))) / det;
        let mut q = DVector::zeros(n);
        q[0] = q0;
        for i in 1..n {
            q[i] = (dv[i] - q0 * lam[i]) / l0;
        }
        *o = q;
    }
    for (o, (dm, sc)) in out.psds.iter_mut().zip(d.psds.iter().zip(&scaling.psds)) {
        let lam = &sc.lambda;
        let n = lam.len();
        let mut q = dm.clone();
        for i in 0..n {
            for j in 0..n {
                q[(i, j)] = 2.0 * dm[(i, j)] / (lam[i] + lam[j]);
            }
        }
        *o = q;
    }
    out
}

/// Largest step α so that λ + α·d stays in the cone (∞ if unbounded),
/// where λ is the scaled point of `scaling`.
pub fn max_step(scaling: &Scaling, layout: &ConeLayout, d: &ConeVec) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..d.nonneg.len() {
        if d.nonneg[i] < 0.0 {
            alpha = alpha.min(-scaling.nonneg_lambda[i] / d.nonneg[i]);
        }
    }
    for (dv, sc) in d.socs.iter().zip(&scaling.socs) {
        alpha = alpha.min(soc_max_step(&sc.lambda, dv));
    }
    for (dm, sc) in d.psds.iter().zip(&scaling.psds) {
        // min eigenvalue of Λ^{-1/2}·D·Λ^{-1/2}
        let n = sc.lambda.len();
        let mut scaled = dm.clone();
        for i in 0..n {
            for j in 0..n {
                scaled[(i, j)] /= (sc.lambda[i] * sc.lambda[j]).sqrt();
            }
        }
        let eigs = scaled.symmetric_eigen().eigenvalues;
        let min = eigs.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        if min < 0.0 {
            alpha = alpha.min(-1.0 / min);
        }
    }
    let _ = layout;
    alpha
}

fn soc_max_step(lam: &DVector<f64>, d: &DVector<f64>) -> f64 {
    let n = lam.len();
    let l1 = lam.rows(1, n - 1);
    let d1 = d.rows(1, n - 1);
    // q(α) = c + 2bα + aα² must stay ≥ 0, and head must stay ≥ 0
    let c = lam[0] * lam[0] - l1.norm_squared();
    let b = lam[0] * d[0] - l1.dot(&d1);
    let a = d[0] * d[0] - d1.norm_squared();

    let mut alpha = f64::INFINITY;
    if d[0] < 0.0 {
        alpha = alpha.min(-lam[0] / d[0]);
    }
    // smallest positive root of q, if any
    let disc = b * b - a * c;
    if a == 0.0 {
        if b < 0.0 {
            alpha = alpha.min(-c / (2.0 * b));
        }
    } else if disc >= 0.0 {
        let sq = disc.sqrt();
        for root in [(-b - sq) / a, (-b + sq) / a] {
            if root > 0.0 && (a < 0.0 || b < 0.0) {
                alpha = alpha.min(root);
            }
        }
    }
    alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;

    fn rand_layout_point(rng: &mut impl Rng) -> (ConeLayout, ConeVec, ConeVec) {
        let layout = ConeLayout {
            nonneg: 3,
            socs: vec![3, 4],
            psds: vec![3],
        };
        let mut interior = |_: usize| {
            let mut v = ConeVec::identity(&layout, 1.0);
            for i in 0..v.nonneg.len() {
                v.nonneg[i] = rng.random_range(0.2..3.0);
            }
            for s in &mut v.socs {
                for i in 1..s.len() {
                    s[i] = rng.random_range(-0.4..0.4);
                }
                s[0] = s.rows(1, s.len() - 1).norm() + rng.random_range(0.1..2.0);
            }
            for p in &mut v.psds {
                let n = p.nrows();
                let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.6..0.6));
                *p = &a * a.transpose() + DMatrix::identity(n, n) * rng.random_range(0.3..1.5);
            }
            v
        };
        let x = interior(0);
        let z = interior(1);
        (layout, x, z)
    }

    #[test]
    fn nt_scaling_maps_both_sides_to_lambda() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let (layout, x, z) = rand_layout_point(&mut rng);
            let sc = compute_scaling(&x, &z).unwrap();
            let lx = sc.to_scaled_primal(&x);
            let lz = sc.to_scaled_dual(&z);
            let lam = sc.lambda(&layout);
            let mut diff = lx.clone();
            diff.axpy(-1.0, &lz);
            assert!(diff.norm_inf() < 1e-9, "W^-T x != W z: {}", diff.norm_inf());
            let mut dl = lx.clone();
            dl.axpy(-1.0, &lam);
            assert!(dl.norm_inf() < 1e-9, "scaled point is not lambda");
        }
    }

    #[test]
    fn scaling_roundtrip_and_h() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (_, x, z) = rand_layout_point(&mut rng);
        let sc = compute_scaling(&x, &z).unwrap();
        // Wᵀ(W⁻ᵀ(x)) = x
        let back = sc.from_scaled_primal(&sc.to_scaled_primal(&x));
        let mut diff = back.clone();
        diff.axpy(-1.0, &x);
        assert!(diff.norm_inf() < 1e-10);
        // H(z) = WᵀW(z) = Wᵀ(λ) = x at the scaling point
        let hz = sc.apply_h(&z);
        let mut dh = hz.clone();
        dh.axpy(-1.0, &x);
        assert!(dh.norm_inf() < 1e-9, "T z T != x: {}", dh.norm_inf());
    }

    #[test]
    fn jordan_solve_inverts_product() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (layout, x, z) = rand_layout_point(&mut rng);
        let sc = compute_scaling(&x, &z).unwrap();
        let lam = sc.lambda(&layout);
        let (_, d, _) = rand_layout_point(&mut rng);
        let q = jordan_solve(&sc, &d);
        let prod = jordan_product(&lam, &q);
        let mut diff = prod.clone();
        diff.axpy(-1.0, &d);
        assert!(diff.norm_inf() < 1e-9, "λ∘(λ\\d) != d: {}", diff.norm_inf());
    }

    #[test]
    fn max_step_lands_on_boundary() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (layout, x, z) = rand_layout_point(&mut rng);
            let sc = compute_scaling(&x, &z).unwrap();
            let (_, mut d, _) = rand_layout_point(&mut rng);
            // make the direction "inward-negative" so a boundary exists
            d.scale(-1.0);
            let alpha = max_step(&sc, &layout, &d);
            assert!(alpha.is_finite() && alpha > 0.0);
            // step to the boundary: smallest eigen/residual ~ 0
            let lam = sc.lambda(&layout);
            let mut on_boundary = lam.clone();
            on_boundary.axpy(alpha, &d);
            let mut min_meas = f64::INFINITY;
            for v in on_boundary.nonneg.iter() {
                min_meas = min_meas.min(*v);
            }
            for s in &on_boundary.socs {
                min_meas = min_meas.min(soc_residual(s).min(s[0]));
            }
            for p in &on_boundary.psds {
                let eigs = p.clone().symmetric_eigen().eigenvalues;
                min_meas = eigs.iter().fold(min_meas, |m, &v| m.min(v));
            }
            assert_abs_diff_eq!(min_meas, 0.0, epsilon = 1e-7);
        }
    }
}
