//! The transformer-pair equivalent of a tunable-susceptance line, and the
//! augmented network the relaxation is built on.
//!
//! A line with admittance `k·jb_rated` carries the sending-end flows
//!
//! ```text
//! S_ij = -j·k·b_rated·V_i (V_i* - V_j*),     S_ji symmetric.
//! ```
//!
//! The same flows arise from a constant line of admittance `jb_rated`
//! placed between two ideal transformers with a shared tap ratio `√k`:
//! with secondary voltages `V_iⱼ = √k·V_i` and `V_jᵢ = √k·V_j`, the
//! constant line sees voltages scaled by `√k` at both ends, which
//! reproduces the factor `k` exactly.  For the semidefinite relaxation the
//! ideal transformers are made non-ideal by a small fictitious conductance
//! `ε·|b_rated|` between each primary and secondary bus; fully decoupled
//! sides would admit high-rank optima.
//!
//! The augmented network therefore has `n + 2f` buses: the original `n`
//! plus two secondary buses per tunable line, fictitious conductive
//! coupling branches, and the constant core line.  Everything else is left
//! untouched, so ordinary admittance assembly produces the modified power
//! flow equations without special cases.

use crate::network::{FlexLineSpec, NetworkCase};
use crate::Complex;

/// Sending-end complex flows of a tunable line at ratio `k` (the upper
/// circuit: direct admittance `k·jb_rated`).
pub fn flexible_line_flow(v_i: Complex, v_j: Complex, k: f64, b_rated: f64) -> (Complex, Complex) {
    let y = Complex::new(0.0, k * b_rated);
    let s_ij = y.conj() * v_i * (v_i - v_j).conj();
    let s_ji = y.conj() * v_j * (v_j - v_i).conj();
    (s_ij, s_ji)
}

/// Flows through the transformer-pair circuit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerPairFlow {
    /// Power leaving bus i into the device (transformer transfer plus
    /// coupling-conductance flow).
    pub s_ij: Complex,
    /// Power leaving bus j.
    pub s_ji: Complex,
    /// Total active power absorbed by the two fictitious conductances.
    pub s_loss: f64,
}

/// Evaluates the non-ideal transformer-pair circuit with secondary
/// voltages formed as `V_iⱼ = √k·V_i`, `V_jᵢ = √k·V_j`.  For `ε = 0` the
/// terminal flows equal [`flexible_line_flow`] exactly and the loss is 0.
pub fn transformer_pair_flow(
    v_i: Complex,
    v_j: Complex,
    k: f64,
    b_rated: f64,
    epsilon: f64,
) -> TransformerPairFlow {
    let sk = k.sqrt();
    let v_ij = v_i * sk;
    let v_ji = v_j * sk;
    let g = epsilon * b_rated.abs();
    let y_core = Complex::new(0.0, b_rated);

    // Power balance at the secondary buses: transfer through the ideal
    // transformer equals coupling flow back to the primary plus core flow.
    let s_i_sec = g * v_ij * (v_ij - v_i).conj() + y_core.conj() * v_ij * (v_ij - v_ji).conj();
    let s_j_sec = g * v_ji * (v_ji - v_j).conj() + y_core.conj() * v_ji * (v_ji - v_ij).conj();

    // Terminal injections: ideal-transformer transfer plus the coupling
    // conductance seen from the primary side.
    let s_ij = s_i_sec + g * v_i * (v_i - v_ij).conj();
    let s_ji = s_j_sec + g * v_j * (v_j - v_ji).conj();

    let s_loss = g * ((v_i - v_ij).norm_sqr() + (v_j - v_ji).norm_sqr());
    TransformerPairFlow { s_ij, s_ji, s_loss }
}

/// Role of a branch in the augmented network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugBranchKind {
    /// An original constant-admittance branch.
    Constant { branch: usize },
    /// Fictitious conductance `ε|b_rated|` between a primary bus and its
    /// secondary bus.
    Coupling { flex: usize },
    /// The constant core line between the two secondary buses.
    FlexCore { flex: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugBranch {
    /// Internal augmented-bus indices.
    pub from: usize,
    pub to: usize,
    pub admittance: Complex,
    pub kind: AugBranchKind,
    /// From-end active-flow limit carried over from the original branch
    /// (for the core line: the original flex branch's limit).
    pub p_flow_max: Option<f64>,
}

/// Per-flex-line bookkeeping in the augmented network.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexBinding {
    pub spec: FlexLineSpec,
    /// Internal indices of the primary buses.
    pub i: usize,
    pub j: usize,
    /// Internal indices of the secondary buses i_j and j_i.
    pub sec_i: usize,
    pub sec_j: usize,
    /// ε·|b_rated|, the coupling conductance.
    pub coupling_g: f64,
}

/// The transformer-pair-equivalent grid: original buses plus two secondary
/// buses per tunable line.  Secondary buses carry no load, no shunt, no
/// generation and no voltage-magnitude limits of their own; the tap-range
/// constraints bound them relative to their primaries.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedNetwork {
    pub case: NetworkCase,
    pub epsilon: f64,
    /// Number of original buses n; augmented buses are `n + 2f`.
    pub n_original: usize,
    pub flex: Vec<FlexBinding>,
    pub branches: Vec<AugBranch>,
    /// Assembled shunt admittance y_io per original bus (bus shunt plus
    /// half the charging of every incident in-service branch, including
    /// flexible ones).
    pub shunts: Vec<Complex>,
}

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("epsilon must be positive for the non-ideal transformer model, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("flexible line {from}-{to}: bus not found in case")]
    UnknownBus { from: usize, to: usize },
}

impl AugmentedNetwork {
    pub fn n_buses(&self) -> usize {
        self.n_original + 2 * self.flex.len()
    }

    /// Internal augmented indices `(sec_i, sec_j)` of a flex line.
    pub fn secondary_indices(&self, flex: usize) -> (usize, usize) {
        (self.flex[flex].sec_i, self.flex[flex].sec_j)
    }

    /// Flex bindings incident to an original bus, with the bus-local side:
    /// `(flex index, primary index, secondary index)`.
    pub fn flex_at(&self, bus: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (l, fb) in self.flex.iter().enumerate() {
            if fb.i == bus {
                out.push((l, fb.i, fb.sec_i));
            }
            if fb.j == bus {
                out.push((l, fb.j, fb.sec_j));
            }
        }
        out
    }

    /// Tabular dump of the augmented network for debugging.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "# augmented network: {} buses ({} original, {} flex lines), epsilon {}",
            self.n_buses(), self.n_original, self.flex.len(), self.epsilon);
        let _ = writeln!(s, "# bus\tlabel");
        for (i, b) in self.case.buses.iter().enumerate() {
            let _ = writeln!(s, "{i}\tbus {}", b.id);
        }
        for (l, fb) in self.flex.iter().enumerate() {
            let _ = writeln!(s, "{}\tsecondary {}_{} (flex {})", fb.sec_i, fb.spec.from, fb.spec.to, l);
            let _ = writeln!(s, "{}\tsecondary {}_{} (flex {})", fb.sec_j, fb.spec.to, fb.spec.from, l);
        }
        let _ = writeln!(s, "# from\tto\tg\tb\tkind");
        for br in &self.branches {
            let kind = match br.kind {
                AugBranchKind::Constant { branch } => format!("constant[{branch}]"),
                AugBranchKind::Coupling { flex } => format!("coupling[{flex}]"),
                AugBranchKind::FlexCore { flex } => format!("core[{flex}]"),
            };
            let _ = writeln!(
                s,
                "{}\t{}\t{:.9}\t{:.9}\t{}",
                br.from, br.to, br.admittance.re, br.admittance.im, kind
            );
        }
        s
    }
}

/// Builds the augmented network.  Rejects `ε ≤ 0`: with fully decoupled
/// ideal transformers the relaxation returns high-rank solutions, so the
/// non-ideal model is mandatory here.
pub fn augment(case: &NetworkCase, epsilon: f64) -> Result<AugmentedNetwork, TransformError> {
    if epsilon <= 0.0 {
        return Err(TransformError::NonPositiveEpsilon(epsilon));
    }
    let n = case.n_buses();
    let flex_branch_ids: Vec<usize> = case.flex_lines.iter().map(|f| f.branch).collect();

    let mut flex = Vec::with_capacity(case.flex_lines.len());
    for (l, spec) in case.flex_lines.iter().enumerate() {
        let i = case
            .bus_index(spec.from)
            .ok_or(TransformError::UnknownBus {
                from: spec.from,
                to: spec.to,
            })?;
        let j = case.bus_index(spec.to).ok_or(TransformError::UnknownBus {
            from: spec.from,
            to: spec.to,
        })?;
        flex.push(FlexBinding {
            spec: spec.clone(),
            i,
            j,
            sec_i: n + 2 * l,
            sec_j: n + 2 * l + 1,
            coupling_g: epsilon * spec.b_rated.abs(),
        });
    }

    let mut branches = Vec::new();
    for (bi, br) in case.in_service_branches() {
        if flex_branch_ids.contains(&bi) {
            continue; // replaced by the transformer pair
        }
        branches.push(AugBranch {
            from: case.bus_index(br.from).unwrap(),
            to: case.bus_index(br.to).unwrap(),
            admittance: br.series_admittance(),
            kind: AugBranchKind::Constant { branch: bi },
            p_flow_max: br.p_flow_max,
        });
    }
    for (l, fb) in flex.iter().enumerate() {
        let g = Complex::new(fb.coupling_g, 0.0);
        branches.push(AugBranch {
            from: fb.i,
            to: fb.sec_i,
            admittance: g,
            kind: AugBranchKind::Coupling { flex: l },
            p_flow_max: None,
        });
        branches.push(AugBranch {
            from: fb.j,
            to: fb.sec_j,
            admittance: g,
            kind: AugBranchKind::Coupling { flex: l },
            p_flow_max: None,
        });
        branches.push(AugBranch {
            from: fb.sec_i,
            to: fb.sec_j,
            admittance: Complex::new(fb.spec.g_rated, fb.spec.b_rated),
            kind: AugBranchKind::FlexCore { flex: l },
            p_flow_max: case.branches[fb.spec.branch].p_flow_max,
        });
    }

    let shunts = (0..n).map(|i| case.shunt_admittance(i)).collect();

    Ok(AugmentedNetwork {
        case: case.clone(),
        epsilon,
        n_original: n,
        flex,
        branches,
        shunts,
    })
}

// ---------------------------------------------------------------------------
// Tap-correlation constraints
// ---------------------------------------------------------------------------

/// The clauses of the tap-correlation constraint set, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapClause {
    /// k_min |V_i|² ≤ |V_iⱼ|²
    RangeLowerI,
    /// |V_iⱼ|² ≤ k_max |V_i|²
    RangeUpperI,
    RangeLowerJ,
    RangeUpperJ,
    /// V_iⱼ V_j* = V_i V_jᵢ*  (real part)
    CrossEqualRe,
    /// V_iⱼ V_j* = V_i V_jᵢ*  (imaginary part)
    CrossEqualIm,
    /// Im{V_i V_iⱼ*} = 0
    ImZeroI,
    /// Im{V_j V_jᵢ*} = 0
    ImZeroJ,
    /// Re{V_i V_iⱼ*} ≥ 0
    RePosI,
    RePosJ,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TapCheck {
    Holds,
    Violated {
        clause: TapClause,
        /// Signed violation magnitude beyond the tolerance.
        amount: f64,
    },
}

impl TapCheck {
    pub fn holds(&self) -> bool {
        matches!(self, TapCheck::Holds)
    }
}

/// Checks whether the four voltages are consistent with one shared tap
/// ratio in `[k_min, k_max]`, clause by clause, within `tol`.  Returns the
/// first violated clause as witness.
pub fn check_tap_constraints(
    v_i: Complex,
    v_j: Complex,
    v_ij: Complex,
    v_ji: Complex,
    k_min: f64,
    k_max: f64,
    tol: f64,
) -> TapCheck {
    let checks: [(TapClause, f64); 10] = [
        (
            TapClause::RangeLowerI,
            v_ij.norm_sqr() - k_min * v_i.norm_sqr(),
        ),
        (
            TapClause::RangeUpperI,
            k_max * v_i.norm_sqr() - v_ij.norm_sqr(),
        ),
        (
            TapClause::RangeLowerJ,
            v_ji.norm_sqr() - k_min * v_j.norm_sqr(),
        ),
        (
            TapClause::RangeUpperJ,
            k_max * v_j.norm_sqr() - v_ji.norm_sqr(),
        ),
        (
            TapClause::CrossEqualRe,
            -((v_ij * v_j.conj()).re - (v_i * v_ji.conj()).re).abs(),
        ),
        (
            TapClause::CrossEqualIm,
            -((v_ij * v_j.conj()).im - (v_i * v_ji.conj()).im).abs(),
        ),
        (TapClause::ImZeroI, -(v_i * v_ij.conj()).im.abs()),
        (TapClause::ImZeroJ, -(v_j * v_ji.conj()).im.abs()),
        (TapClause::RePosI, (v_i * v_ij.conj()).re),
        (TapClause::RePosJ, (v_j * v_ji.conj()).re),
    ];
    for (clause, slack) in checks {
        if slack < -tol {
            return TapCheck::Violated {
                clause,
                amount: -slack,
            };
        }
    }
    TapCheck::Holds
}

/// Reconstructs the shared ratio `k = |V_iⱼ|²/|V_i|²` from a point that
/// satisfies the tap constraints.
pub fn reconstruct_k(v_i: Complex, v_ij: Complex) -> f64 {
    v_ij.norm_sqr() / v_i.norm_sqr()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{bind_flex_lines, parse_flex_config, parse_matpower_case};
    use approx::assert_abs_diff_eq;

    fn polar(m: f64, deg: f64) -> Complex {
        Complex::from_polar(m, deg.to_radians())
    }

    #[test]
    fn zero_voltage_difference_carries_nothing() {
        let v = polar(1.0, 0.0);
        for k in [0.5, 1.0, 2.7] {
            let (s_ij, s_ji) = flexible_line_flow(v, v, k, -4.0);
            assert_eq!(s_ij, Complex::new(0.0, 0.0));
            assert_eq!(s_ji, Complex::new(0.0, 0.0));
        }
    }

    #[test]
    fn in_phase_voltages_carry_pure_reactive() {
        // |V_i| = 1, |V_j| = 0.9, same angle, k = 1, b = -1:
        // S_ij = -j·(-1)·1·(1-0.9) = j0.1
        let (s_ij, _) = flexible_line_flow(polar(1.0, 0.0), polar(0.9, 0.0), 1.0, -1.0);
        assert_abs_diff_eq!(s_ij.re, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s_ij.im, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn ideal_pair_matches_direct_flow() {
        let v_i = polar(1.02, 3.0);
        let v_j = polar(0.97, -12.0);
        let (s_ij, s_ji) = flexible_line_flow(v_i, v_j, 1.7, -6.135);
        let tp = transformer_pair_flow(v_i, v_j, 1.7, -6.135, 0.0);
        assert_abs_diff_eq!(tp.s_ij.re, s_ij.re, epsilon = 1e-12);
        assert_abs_diff_eq!(tp.s_ij.im, s_ij.im, epsilon = 1e-12);
        assert_abs_diff_eq!(tp.s_ji.re, s_ji.re, epsilon = 1e-12);
        assert_abs_diff_eq!(tp.s_ji.im, s_ji.im, epsilon = 1e-12);
        assert_eq!(tp.s_loss, 0.0);
    }

    #[test]
    fn unit_tap_kills_coupling_flow() {
        // k = 1 makes V_iⱼ = V_i only if |ratio| = 1... the secondary is
        // √k·V_i = V_i, so the coupling branch sees zero voltage drop and
        // the loss reduces to the j side only (also zero at k = 1).
        let tp = transformer_pair_flow(polar(1.0, 7.0), polar(1.0, -9.0), 1.0, -2.5, 0.04);
        assert_abs_diff_eq!(tp.s_loss, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lossless_core_conserves_active_power() {
        let v_i = polar(1.05, 20.0);
        let v_j = polar(0.95, -5.0);
        let (s_ij, s_ji) = flexible_line_flow(v_i, v_j, 2.3, -12.5);
        assert_abs_diff_eq!(s_ij.re + s_ji.re, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fictitious_loss_matches_closed_form() {
        let (v_i, v_j, k, b, eps) = (polar(1.0, 0.0), polar(1.0, -10.0), 1.256, -12.5, 0.04);
        let tp = transformer_pair_flow(v_i, v_j, k, b, eps);
        let sk = k.sqrt();
        let expected = eps * b.abs()
            * ((v_i - v_i * sk).norm_sqr() + (v_j - v_j * sk).norm_sqr());
        assert_abs_diff_eq!(tp.s_loss, expected, epsilon = 1e-12);
        assert!(tp.s_loss >= 0.0);
        // active power books balance: what leaves the terminals equals the
        // fictitious dissipation (the core is lossless)
        assert_abs_diff_eq!(tp.s_ij.re + tp.s_ji.re, tp.s_loss, epsilon = 1e-12);
    }

    const TWO_BUS_FLEX: &str = "\
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
\t1\t2\t0\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;
];
";

    #[test]
    fn augment_two_bus_structure() {
        let case = parse_matpower_case(TWO_BUS_FLEX).unwrap();
        let cfg = parse_flex_config("flex 1 2 0.8 3.0\n").unwrap();
        let case = bind_flex_lines(&case, &cfg.entries).unwrap();
        let aug = augment(&case, 0.04).unwrap();
        assert_eq!(aug.n_buses(), 4);
        assert_eq!(aug.branches.len(), 3);
        let couplings: Vec<_> = aug
            .branches
            .iter()
            .filter(|b| matches!(b.kind, AugBranchKind::Coupling { .. }))
            .collect();
        assert_eq!(couplings.len(), 2);
        for c in couplings {
            assert_abs_diff_eq!(c.admittance.re, 0.04 * 10.0, epsilon = 1e-12);
            assert_eq!(c.admittance.im, 0.0);
        }
        let core = aug
            .branches
            .iter()
            .find(|b| matches!(b.kind, AugBranchKind::FlexCore { .. }))
            .unwrap();
        assert_abs_diff_eq!(core.admittance.im, -10.0, epsilon = 1e-12);
    }

    #[test]
    fn augment_rejects_zero_epsilon() {
        let case = parse_matpower_case(TWO_BUS_FLEX).unwrap();
        assert!(matches!(
            augment(&case, 0.0),
            Err(TransformError::NonPositiveEpsilon(_))
        ));
    }

    #[test]
    fn augment_without_flex_is_the_original_graph() {
        let case = parse_matpower_case(TWO_BUS_FLEX).unwrap();
        let aug = augment(&case, 0.04).unwrap();
        assert_eq!(aug.n_buses(), 2);
        assert_eq!(aug.branches.len(), 1);
        assert!(matches!(aug.branches[0].kind, AugBranchKind::Constant { .. }));
    }

    #[test]
    fn tap_constraints_hold_on_consistent_points() {
        let v_i = polar(1.01, 14.0);
        let v_j = polar(0.96, -3.0);
        let k = 1.9_f64;
        let check = check_tap_constraints(v_i, v_j, v_i * k.sqrt(), v_j * k.sqrt(), 0.8, 3.0, 1e-9);
        assert!(check.holds());
        assert_abs_diff_eq!(reconstruct_k(v_i, v_i * k.sqrt()), k, epsilon = 1e-12);
    }

    #[test]
    fn phase_shifted_tap_violates_im_clause() {
        let v_i = polar(1.0, 0.0);
        let v_j = polar(1.0, -8.0);
        let k = 1.5_f64;
        let v_ij = v_i * k.sqrt() * polar(1.0, 0.1_f64.to_degrees());
        let v_ji = v_j * k.sqrt();
        match check_tap_constraints(v_i, v_j, v_ij, v_ji, 0.8, 3.0, 1e-9) {
            TapCheck::Violated { clause, .. } => {
                assert!(matches!(clause, TapClause::CrossEqualIm | TapClause::ImZeroI))
            }
            TapCheck::Holds => panic!("phase-shifted tap must violate"),
        }
    }

    #[test]
    fn out_of_range_k_violates_range_clause() {
        let v_i = polar(1.0, 0.0);
        let v_j = polar(1.0, -8.0);
        let k = 3.5_f64; // above k_max
        let check =
            check_tap_constraints(v_i, v_j, v_i * k.sqrt(), v_j * k.sqrt(), 0.8, 3.0, 1e-9);
        assert!(matches!(
            check,
            TapCheck::Violated {
                clause: TapClause::RangeUpperI,
                ..
            }
        ));
    }
}
