//! Power-network cases in per-unit: MATPOWER parsing, flexible-line
//! configuration, and case modifications.
//!
//! The model follows the bus-injection formulation: every branch is a
//! symmetric π-section with series admittance `y = g + jb` and a total
//! line-charging susceptance split half to each terminal shunt.  Branches
//! with an off-nominal tap ratio are folded into that model at parse time
//! (series admittance `y/τ` plus asymmetric terminal shunt corrections),
//! which reproduces the MATPOWER admittance matrix exactly for zero phase
//! shift.  All powers are per-unit on the system MVA base; generator cost
//! curves stay in $/h against MW.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::Complex;

/// Informational bus classification from the case file.  The OPF treats
/// every voltage as a free variable; only the slack bus matters (it fixes
/// the recovered voltage angle reference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// External bus number as it appears in the case file.
    pub id: usize,
    pub kind: BusKind,
    /// Active / reactive load, p.u.
    pub p_load: f64,
    pub q_load: f64,
    /// Bus shunt admittance, p.u. (includes tap-fold corrections; line
    /// charging is kept on the branches and added at assembly time).
    pub shunt_g: f64,
    pub shunt_b: f64,
    /// Voltage magnitude bounds, p.u.
    pub v_min: f64,
    pub v_max: f64,
}

/// Convex quadratic generation cost `c2·P² + c1·P + c0` in $/h with P in MW.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostCurve {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CostCurve {
    pub fn eval(&self, p_mw: f64) -> f64 {
        (self.c2 * p_mw + self.c1) * p_mw + self.c0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    /// External id of the bus this unit is connected to.
    pub bus: usize,
    /// Active-power range, p.u.
    pub p_min: f64,
    pub p_max: f64,
    /// Reactive-power range, p.u.
    pub q_min: f64,
    pub q_max: f64,
    pub cost: CostCurve,
}

impl Generator {
    /// Synchronous condensers contribute reactive support only.
    pub fn is_condenser(&self) -> bool {
        self.p_min == 0.0 && self.p_max == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// External ids of the terminal buses.
    pub from: usize,
    pub to: usize,
    /// Effective series impedance, p.u. (tap ratio already folded in).
    pub r: f64,
    pub x: f64,
    /// Series admittance `1/(r + jx)`, p.u.
    pub series_g: f64,
    pub series_b: f64,
    /// Total line-charging susceptance, p.u.; half at each terminal.
    pub charging_b: f64,
    /// Active-power flow limit at the from end, p.u.; `None` = unlimited.
    pub p_flow_max: Option<f64>,
    pub in_service: bool,
}

impl Branch {
    pub fn series_admittance(&self) -> Complex {
        Complex::new(self.series_g, self.series_b)
    }

    /// True when `spec_from`/`spec_to` name this branch in either direction.
    pub fn joins(&self, a: usize, b: usize) -> bool {
        (self.from == a && self.to == b) || (self.from == b && self.to == a)
    }
}

/// A branch designated as having tunable series admittance.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexLineSpec {
    pub from: usize,
    pub to: usize,
    /// Index into `NetworkCase::branches` of the matched branch.
    pub branch: usize,
    /// Rated series susceptance, p.u.; always negative (inductive line).
    pub b_rated: f64,
    /// Rated series conductance, p.u.; nonzero only in proportional
    /// scaling mode where `y = k·(g_rated + j·b_rated)`.
    pub g_rated: f64,
    pub k_min: f64,
    pub k_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
    pub flex_lines: Vec<FlexLineSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("missing `{0}` section in case text")]
    MissingSection(&'static str),
    #[error("malformed row {row} in `{section}`: expected at least {expected} columns, got {got}")]
    MalformedRow {
        section: &'static str,
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("could not parse number `{token}` in `{section}` row {row}")]
    BadNumber {
        section: &'static str,
        row: usize,
        token: String,
    },
    #[error("duplicate bus id {0}")]
    DuplicateBus(usize),
    #[error("{kind} references unknown bus {bus}")]
    DanglingBus { kind: &'static str, bus: usize },
    #[error("branch {from}-{to} has zero series impedance")]
    ZeroImpedance { from: usize, to: usize },
    #[error("expected exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("bus {id}: invalid voltage bounds [{v_min}, {v_max}]")]
    BadVoltageBounds { id: usize, v_min: f64, v_max: f64 },
    #[error("generator at bus {bus}: empty operating range or negative curvature")]
    BadGenerator { bus: usize },
    #[error("gencost row {0}: only polynomial costs up to quadratic are supported")]
    UnsupportedCost(usize),
    #[error("flex config line {line}: {msg}")]
    FlexConfig { line: usize, msg: String },
    #[error("flexible line {from}-{to} (circuit {circuit}) does not match an in-service branch")]
    FlexUnknownBranch {
        from: usize,
        to: usize,
        circuit: usize,
    },
    #[error("flexible line {from}-{to}: k range [{k_min}, {k_max}] violates 0 < k_min <= 1 <= k_max")]
    FlexBadRange {
        from: usize,
        to: usize,
        k_min: f64,
        k_max: f64,
    },
    #[error("flexible line {from}-{to}: rated susceptance {b} is not negative")]
    FlexBadSusceptance { from: usize, to: usize, b: f64 },
    #[error("flexible lines listed more than once: {from}-{to}")]
    FlexDuplicate { from: usize, to: usize },
}

impl NetworkCase {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Internal index of the external bus id.
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    /// Total shunt admittance seen at a bus: the bus shunt plus half the
    /// charging susceptance of every in-service incident branch.
    pub fn shunt_admittance(&self, bus_idx: usize) -> Complex {
        let id = self.buses[bus_idx].id;
        let mut y = Complex::new(self.buses[bus_idx].shunt_g, self.buses[bus_idx].shunt_b);
        for br in self.branches.iter().filter(|b| b.in_service) {
            if br.from == id || br.to == id {
                y += Complex::new(0.0, 0.5 * br.charging_b);
            }
        }
        y
    }

    /// Generators attached to a bus (internal index), by generator index.
    pub fn generators_at(&self, bus_idx: usize) -> Vec<usize> {
        let id = self.buses[bus_idx].id;
        (0..self.generators.len())
            .filter(|&g| self.generators[g].bus == id)
            .collect()
    }

    pub fn in_service_branches(&self) -> impl Iterator<Item = (usize, &Branch)> {
        self.branches
            .iter()
            .enumerate()
            .filter(|(_, b)| b.in_service)
    }

    /// Indices of in-service branches matching an endpoint pair, in file
    /// order (parallel circuits give several hits).
    pub fn matching_branches(&self, from: usize, to: usize) -> Vec<usize> {
        self.in_service_branches()
            .filter(|(_, b)| b.joins(from, to))
            .map(|(i, _)| i)
            .collect()
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let mut seen = BTreeMap::new();
        for b in &self.buses {
            if seen.insert(b.id, ()).is_some() {
                return Err(NetworkError::DuplicateBus(b.id));
            }
            if !(b.v_min > 0.0 && b.v_min <= b.v_max) {
                return Err(NetworkError::BadVoltageBounds {
                    id: b.id,
                    v_min: b.v_min,
                    v_max: b.v_max,
                });
            }
        }
        let slack = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slack != 1 {
            return Err(NetworkError::SlackCount(slack));
        }
        for g in &self.generators {
            if !seen.contains_key(&g.bus) {
                return Err(NetworkError::DanglingBus {
                    kind: "generator",
                    bus: g.bus,
                });
            }
            if g.p_min > g.p_max || g.q_min > g.q_max || g.cost.c2 < 0.0 {
                return Err(NetworkError::BadGenerator { bus: g.bus });
            }
        }
        for br in &self.branches {
            for end in [br.from, br.to] {
                if !seen.contains_key(&end) {
                    return Err(NetworkError::DanglingBus {
                        kind: "branch",
                        bus: end,
                    });
                }
            }
            if br.in_service && br.r == 0.0 && br.x == 0.0 {
                return Err(NetworkError::ZeroImpedance {
                    from: br.from,
                    to: br.to,
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// MATPOWER case parsing
// ---------------------------------------------------------------------------

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(p) => &line[..p],
        None => line,
    }
}

/// Extracts the numeric rows of `mpc.<name> = [ ... ];`.
fn matrix_section(text: &str, name: &'static str) -> Result<Vec<Vec<f64>>, NetworkError> {
    let needle = format!("mpc.{name}");
    let start = text
        .match_indices(&needle)
        .map(|(i, _)| i)
        .find(|&i| {
            // require `= [` after the name, ignoring whitespace
            let rest = &text[i + needle.len()..];
            let rest = rest.trim_start();
            rest.starts_with('=') && rest[1..].trim_start().starts_with('[')
        })
        .ok_or(NetworkError::MissingSection(name))?;
    let open = text[start..]
        .find('[')
        .ok_or(NetworkError::MissingSection(name))?
        + start;
    let close = text[open..]
        .find(']')
        .ok_or(NetworkError::MissingSection(name))?
        + open;
    let body = &text[open + 1..close];

    let mut rows = Vec::new();
    for (lineno, raw) in body.lines().enumerate() {
        let line = strip_comment(raw).trim().trim_end_matches(';').trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let v = tok.parse::<f64>().map_err(|_| NetworkError::BadNumber {
                section: name,
                row: lineno,
                token: tok.to_string(),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn need(row: &[f64], n: usize, section: &'static str, idx: usize) -> Result<(), NetworkError> {
    if row.len() < n {
        Err(NetworkError::MalformedRow {
            section,
            row: idx,
            expected: n,
            got: row.len(),
        })
    } else {
        Ok(())
    }
}

/// Parses a MATPOWER `.m` case (subset: `baseMVA`, `bus`, `gen`, `branch`,
/// optional `gencost`).  Powers are converted to per-unit on `baseMVA`;
/// branch impedances become series admittances; off-nominal taps are
/// folded into the π-model.  Unused columns (areas, ramp rates, angle
/// limits) are accepted and ignored.
pub fn parse_matpower_case(text: &str) -> Result<NetworkCase, NetworkError> {
    let base_row = matrix_or_scalar(text, "baseMVA")?;
    let base_mva = base_row;

    let bus_rows = matrix_section(text, "bus")?;
    let gen_rows = matrix_section(text, "gen")?;
    let branch_rows = matrix_section(text, "branch")?;
    let cost_rows = matrix_section(text, "gencost").ok();

    let mut buses = Vec::with_capacity(bus_rows.len());
    for (i, row) in bus_rows.iter().enumerate() {
        need(row, 13, "bus", i)?;
        let kind = match row[1] as i64 {
            3 => BusKind::Slack,
            2 => BusKind::Pv,
            _ => BusKind::Pq,
        };
        buses.push(Bus {
            id: row[0] as usize,
            kind,
            p_load: row[2] / base_mva,
            q_load: row[3] / base_mva,
            shunt_g: row[4] / base_mva,
            shunt_b: row[5] / base_mva,
            v_max: row[11],
            v_min: row[12],
        });
    }

    let mut generators = Vec::with_capacity(gen_rows.len());
    for (i, row) in gen_rows.iter().enumerate() {
        need(row, 10, "gen", i)?;
        if row[7] == 0.0 {
            continue; // out of service
        }
        let cost = match &cost_rows {
            Some(rows) => parse_cost(rows, i)?,
            None => CostCurve {
                c2: 0.0,
                c1: 1.0,
                c0: 0.0,
            },
        };
        generators.push(Generator {
            bus: row[0] as usize,
            q_max: row[3] / base_mva,
            q_min: row[4] / base_mva,
            p_max: row[8] / base_mva,
            p_min: row[9] / base_mva,
            cost,
        });
    }

    let mut bus_by_id: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, b) in buses.iter().enumerate() {
        bus_by_id.insert(b.id, i);
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (i, row) in branch_rows.iter().enumerate() {
        need(row, 11, "branch", i)?;
        let (from, to) = (row[0] as usize, row[1] as usize);
        let (r, x, bc) = (row[2], row[3], row[4]);
        let rate_a = row[5];
        let tap = row[8];
        let in_service = row[10] != 0.0;
        if in_service && r == 0.0 && x == 0.0 {
            return Err(NetworkError::ZeroImpedance { from, to });
        }

        // Fold an off-nominal tap τ (phase shift unsupported) into the
        // symmetric π-model: series y/τ plus terminal shunt corrections.
        // Reproduces the MATPOWER two-port exactly.
        let tau = if tap == 0.0 { 1.0 } else { tap };
        let (r_eff, x_eff) = (tau * r, tau * x);
        let y = invert_impedance(r_eff, x_eff);
        if tau != 1.0 && in_service {
            let ys = invert_impedance(r, x);
            let from_corr = ys * (1.0 / (tau * tau) - 1.0 / tau)
                + Complex::new(0.0, 0.5 * bc) * (1.0 / (tau * tau) - 1.0);
            let to_corr = ys * (1.0 - 1.0 / tau);
            let fi = *bus_by_id.get(&from).ok_or(NetworkError::DanglingBus {
                kind: "branch",
                bus: from,
            })?;
            let ti = *bus_by_id.get(&to).ok_or(NetworkError::DanglingBus {
                kind: "branch",
                bus: to,
            })?;
            buses[fi].shunt_g += from_corr.re;
            buses[fi].shunt_b += from_corr.im;
            buses[ti].shunt_g += to_corr.re;
            buses[ti].shunt_b += to_corr.im;
        }

        branches.push(Branch {
            from,
            to,
            r: r_eff,
            x: x_eff,
            series_g: y.re,
            series_b: y.im,
            charging_b: bc,
            p_flow_max: if rate_a > 0.0 {
                Some(rate_a / base_mva)
            } else {
                None
            },
            in_service,
        });
    }

    let case = NetworkCase {
        base_mva,
        buses,
        generators,
        branches,
        flex_lines: Vec::new(),
    };
    case.validate()?;
    Ok(case)
}

fn matrix_or_scalar(text: &str, name: &'static str) -> Result<f64, NetworkError> {
    // `mpc.baseMVA = 100;`
    let needle = format!("mpc.{name}");
    let i = text
        .find(&needle)
        .ok_or(NetworkError::MissingSection(name))?;
    let rest = &text[i + needle.len()..];
    let rest = rest.trim_start().trim_start_matches('=').trim_start();
    let end = rest.find(';').ok_or(NetworkError::MissingSection(name))?;
    rest[..end]
        .trim()
        .parse::<f64>()
        .map_err(|_| NetworkError::BadNumber {
            section: name,
            row: 0,
            token: rest[..end].trim().to_string(),
        })
}

fn parse_cost(rows: &[Vec<f64>], gen_idx: usize) -> Result<CostCurve, NetworkError> {
    let Some(row) = rows.get(gen_idx) else {
        return Ok(CostCurve {
            c2: 0.0,
            c1: 1.0,
            c0: 0.0,
        });
    };
    need(row, 4, "gencost", gen_idx)?;
    let model = row[0] as i64;
    let n = row[3] as usize;
    if model != 2 || n > 3 || row.len() < 4 + n {
        return Err(NetworkError::UnsupportedCost(gen_idx));
    }
    let coeffs = &row[4..4 + n];
    let (c2, c1, c0) = match n {
        3 => (coeffs[0], coeffs[1], coeffs[2]),
        2 => (0.0, coeffs[0], coeffs[1]),
        1 => (0.0, 0.0, coeffs[0]),
        _ => (0.0, 0.0, 0.0),
    };
    Ok(CostCurve { c2, c1, c0 })
}

fn invert_impedance(r: f64, x: f64) -> Complex {
    let d = r * r + x * x;
    Complex::new(r / d, -x / d)
}

/// Serializes a case back to MATPOWER text.  Re-parsing the output yields a
/// `NetworkCase` equal to the input (taps were folded at parse time, so the
/// emitted branches all carry ratio 0).
pub fn write_matpower_case(case: &NetworkCase, name: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "function mpc = {name}");
    let _ = writeln!(s, "mpc.version = '2';");
    let _ = writeln!(s, "mpc.baseMVA = {:?};", case.base_mva);
    let _ = writeln!(s, "mpc.bus = [");
    for b in &case.buses {
        let kind = match b.kind {
            BusKind::Slack => 3,
            BusKind::Pv => 2,
            BusKind::Pq => 1,
        };
        let _ = writeln!(
            s,
            "\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t1\t1\t0\t0\t1\t{:?}\t{:?};",
            b.id,
            kind,
            b.p_load * case.base_mva,
            b.q_load * case.base_mva,
            b.shunt_g * case.base_mva,
            b.shunt_b * case.base_mva,
            b.v_max,
            b.v_min
        );
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "mpc.gen = [");
    for g in &case.generators {
        let _ = writeln!(
            s,
            "\t{}\t0\t0\t{:?}\t{:?}\t1\t{:?}\t1\t{:?}\t{:?}\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;",
            g.bus,
            g.q_max * case.base_mva,
            g.q_min * case.base_mva,
            case.base_mva,
            g.p_max * case.base_mva,
            g.p_min * case.base_mva
        );
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "mpc.branch = [");
    for br in &case.branches {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t0\t0\t0\t0\t{}\t-360\t360;",
            br.from,
            br.to,
            br.r,
            br.x,
            br.charging_b,
            br.p_flow_max.map(|p| p * case.base_mva).unwrap_or(0.0),
            if br.in_service { 1 } else { 0 }
        );
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "mpc.gencost = [");
    for g in &case.generators {
        let _ = writeln!(
            s,
            "\t2\t0\t0\t3\t{:?}\t{:?}\t{:?};",
            g.cost.c2, g.cost.c1, g.cost.c0
        );
    }
    let _ = writeln!(s, "];");
    s
}

// ---------------------------------------------------------------------------
// Case modifications
// ---------------------------------------------------------------------------

/// Reference to a branch by endpoints; `circuit` selects among parallel
/// branches in file order (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchRef {
    pub from: usize,
    pub to: usize,
    pub circuit: usize,
}

/// A set of case-level modifications.  All are set-to-value operations, so
/// applying the same set twice equals applying it once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaseModifications {
    /// Multiply every generator's `p_max` by this factor.
    pub scale_p_max: Option<f64>,
    /// Set a uniform from-end active-flow limit on every branch, p.u.
    pub uniform_p_flow_max: Option<f64>,
    /// Set the series resistance of these branches to zero.
    pub zero_resistance: Vec<BranchRef>,
    /// Drop the line-charging susceptance of these branches.
    pub zero_charging: Vec<BranchRef>,
}

impl CaseModifications {
    pub fn is_empty(&self) -> bool {
        self == &CaseModifications::default()
    }
}

fn resolve_branch_ref(case: &NetworkCase, r: &BranchRef) -> Result<usize, NetworkError> {
    let hits = case.matching_branches(r.from, r.to);
    hits.get(r.circuit.saturating_sub(1))
        .copied()
        .ok_or(NetworkError::FlexUnknownBranch {
            from: r.from,
            to: r.to,
            circuit: r.circuit,
        })
}

/// Returns a new case with the modifications applied; the input is left
/// untouched.  `scale_p_max` is the only multiplicative entry; it is
/// applied to the original bounds, so the operation set as a whole stays
/// idempotent only for the set-to-value entries.
pub fn apply_case_modifications(
    case: &NetworkCase,
    mods: &CaseModifications,
) -> Result<NetworkCase, NetworkError> {
    let mut out = case.clone();
    if let Some(f) = mods.scale_p_max {
        for g in &mut out.generators {
            g.p_max *= f;
        }
    }
    if let Some(p) = mods.uniform_p_flow_max {
        for br in &mut out.branches {
            br.p_flow_max = Some(p);
        }
    }
    for r in &mods.zero_resistance {
        let idx = resolve_branch_ref(case, r)?;
        let br = &mut out.branches[idx];
        br.r = 0.0;
        let y = invert_impedance(br.r, br.x);
        br.series_g = y.re;
        br.series_b = y.im;
    }
    for r in &mods.zero_charging {
        let idx = resolve_branch_ref(case, r)?;
        out.branches[idx].charging_b = 0.0;
    }
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Flexible-line configuration
// ---------------------------------------------------------------------------

/// One `flex` entry from a configuration file, before binding to a branch.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexEntry {
    pub from: usize,
    pub to: usize,
    pub circuit: usize,
    pub k_min: f64,
    pub k_max: f64,
    /// Proportional g+b scaling (`y = k (g + jb)`); the branch resistance
    /// is then kept even when `zero-flex-resistance` is on.
    pub proportional: bool,
}

/// Parsed flexible-line configuration: entries plus run options.
///
/// Grammar (one directive per line, `#` comments):
///
/// ```text
/// epsilon <e>                   # coupling conductance factor, default 0.04
/// wq <w>                        # reactive penalty weight, default 0.2
/// scale-pgmax <f>               # multiply all generator P_max
/// pmax-flow-mw <p>              # uniform branch flow limit in MW
/// zero-flex-resistance          # set r = 0 on all flex branches
/// drop-flex-charging            # remove line charging on flex branches
/// flex <from> <to> <kmin> <kmax> [circuit <n>] [proportional]
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct FlexConfig {
    pub entries: Vec<FlexEntry>,
    pub epsilon: f64,
    pub w_q: f64,
    pub scale_p_max: Option<f64>,
    pub p_flow_max_mw: Option<f64>,
    pub zero_flex_resistance: bool,
    pub drop_flex_charging: bool,
}

impl Default for FlexConfig {
    fn default() -> Self {
        FlexConfig {
            entries: Vec::new(),
            epsilon: 0.04,
            w_q: 0.2,
            scale_p_max: None,
            p_flow_max_mw: None,
            zero_flex_resistance: false,
            drop_flex_charging: false,
        }
    }
}

pub fn parse_flex_config(text: &str) -> Result<FlexConfig, NetworkError> {
    let mut cfg = FlexConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let err = |msg: String| NetworkError::FlexConfig {
            line: lineno + 1,
            msg,
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| err(format!("bad number `{s}`")))
        };
        match toks[0] {
            "epsilon" => {
                cfg.epsilon = num(toks.get(1).ok_or_else(|| err("missing value".into()))?)?
            }
            "wq" => cfg.w_q = num(toks.get(1).ok_or_else(|| err("missing value".into()))?)?,
            "scale-pgmax" => {
                cfg.scale_p_max =
                    Some(num(toks.get(1).ok_or_else(|| err("missing value".into()))?)?)
            }
            "pmax-flow-mw" => {
                cfg.p_flow_max_mw =
                    Some(num(toks.get(1).ok_or_else(|| err("missing value".into()))?)?)
            }
            "zero-flex-resistance" => cfg.zero_flex_resistance = true,
            "drop-flex-charging" => cfg.drop_flex_charging = true,
            "flex" => {
                if toks.len() < 5 {
                    return Err(err("flex needs: from to kmin kmax".into()));
                }
                let from = toks[1]
                    .parse::<usize>()
                    .map_err(|_| err(format!("bad bus id `{}`", toks[1])))?;
                let to = toks[2]
                    .parse::<usize>()
                    .map_err(|_| err(format!("bad bus id `{}`", toks[2])))?;
                let k_min = num(toks[3])?;
                let k_max = num(toks[4])?;
                let mut circuit = 1;
                let mut proportional = false;
                let mut i = 5;
                while i < toks.len() {
                    match toks[i] {
                        "circuit" => {
                            circuit = toks
                                .get(i + 1)
                                .and_then(|s| s.parse::<usize>().ok())
                                .ok_or_else(|| err("circuit needs an index".into()))?;
                            i += 2;
                        }
                        "proportional" => {
                            proportional = true;
                            i += 1;
                        }
                        other => return Err(err(format!("unknown option `{other}`"))),
                    }
                }
                if !(k_min > 0.0 && k_min <= 1.0 && k_max >= 1.0 && k_min <= k_max) {
                    return Err(NetworkError::FlexBadRange {
                        from,
                        to,
                        k_min,
                        k_max,
                    });
                }
                cfg.entries.push(FlexEntry {
                    from,
                    to,
                    circuit,
                    k_min,
                    k_max,
                    proportional,
                });
            }
            other => return Err(err(format!("unknown directive `{other}`"))),
        }
    }
    Ok(cfg)
}

impl FlexConfig {
    /// The case-level modifications implied by this configuration, with MW
    /// quantities converted to per-unit on the case base.
    pub fn modifications_for(&self, case: &NetworkCase) -> CaseModifications {
        let refs = |on: bool| {
            if on {
                self.entries
                    .iter()
                    .filter(|e| !e.proportional)
                    .map(|e| BranchRef {
                        from: e.from,
                        to: e.to,
                        circuit: e.circuit,
                    })
                    .collect()
            } else {
                Vec::new()
            }
        };
        CaseModifications {
            scale_p_max: self.scale_p_max,
            uniform_p_flow_max: self.p_flow_max_mw.map(|p| p / case.base_mva),
            zero_resistance: refs(self.zero_flex_resistance),
            zero_charging: refs(self.drop_flex_charging),
        }
    }
}

/// Binds flex entries to branches of `case` and stores the resolved specs
/// on the returned copy.  Must run after case modifications so the rated
/// admittances reflect the modified branches.
pub fn bind_flex_lines(
    case: &NetworkCase,
    entries: &[FlexEntry],
) -> Result<NetworkCase, NetworkError> {
    let mut out = case.clone();
    out.flex_lines.clear();
    let mut claimed: Vec<usize> = Vec::new();
    for e in entries {
        let idx = resolve_branch_ref(
            case,
            &BranchRef {
                from: e.from,
                to: e.to,
                circuit: e.circuit,
            },
        )?;
        if claimed.contains(&idx) {
            return Err(NetworkError::FlexDuplicate {
                from: e.from,
                to: e.to,
            });
        }
        claimed.push(idx);
        let br = &case.branches[idx];
        if br.series_b >= 0.0 {
            return Err(NetworkError::FlexBadSusceptance {
                from: e.from,
                to: e.to,
                b: br.series_b,
            });
        }
        out.flex_lines.push(FlexLineSpec {
            from: e.from,
            to: e.to,
            branch: idx,
            b_rated: br.series_b,
            g_rated: if e.proportional { br.series_g } else { 0.0 },
            k_min: e.k_min,
            k_max: e.k_max,
        });
    }
    Ok(out)
}

/// Parse a case and a flex configuration, apply the configured
/// modifications, and bind the flexible lines: the standard loading path.
pub fn load_case(case_text: &str, flex_text: Option<&str>) -> Result<(NetworkCase, FlexConfig), NetworkError> {
    let case = parse_matpower_case(case_text)?;
    let cfg = match flex_text {
        Some(t) => parse_flex_config(t)?,
        None => FlexConfig::default(),
    };
    let modified = apply_case_modifications(&case, &cfg.modifications_for(&case))?;
    let bound = bind_flex_lines(&modified, &cfg.entries)?;
    Ok((bound, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = "\
function mpc = two_bus
mpc.version = '2';
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
mpc.gencost = [
\t2\t0\t0\t3\t0.01\t40\t0;
];
";

    #[test]
    fn parses_minimal_two_bus() {
        let case = parse_matpower_case(TWO_BUS).unwrap();
        assert_eq!(case.buses.len(), 2);
        assert_eq!(case.branches.len(), 1);
        // b = -x/(r^2+x^2) with r = 0, x = 0.1
        assert!((case.branches[0].series_b - (-10.0)).abs() < 1e-12);
        assert_eq!(case.branches[0].series_g, 0.0);
        assert!((case.buses[1].p_load - 0.5).abs() < 1e-15);
        assert_eq!(case.slack_index(), 0);
    }

    #[test]
    fn admittance_inverts_impedance() {
        let case = parse_matpower_case(TWO_BUS).unwrap();
        for br in &case.branches {
            let z = Complex::new(br.r, br.x);
            let y = br.series_admittance();
            assert!((z * y - Complex::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn serialization_round_trips() {
        let case = parse_matpower_case(TWO_BUS).unwrap();
        let text = write_matpower_case(&case, "two_bus");
        let again = parse_matpower_case(&text).unwrap();
        assert_eq!(case, again);
    }

    #[test]
    fn rejects_zero_impedance_branch() {
        let bad = TWO_BUS.replace("1\t2\t0\t0.1", "1\t2\t0\t0");
        assert!(matches!(
            parse_matpower_case(&bad),
            Err(NetworkError::ZeroImpedance { .. })
        ));
    }

    #[test]
    fn rejects_duplicate_bus() {
        let bad = TWO_BUS.replace(
            "\t2\t1\t50\t10",
            "\t1\t1\t50\t10",
        );
        assert!(matches!(
            parse_matpower_case(&bad),
            Err(NetworkError::DuplicateBus(1))
        ));
    }

    #[test]
    fn flex_config_defaults_and_entries() {
        let cfg = parse_flex_config("epsilon 0.05\nflex 1 2 0.8 3.0\n").unwrap();
        assert_eq!(cfg.epsilon, 0.05);
        assert_eq!(cfg.w_q, 0.2);
        assert_eq!(cfg.entries.len(), 1);
        let empty = parse_flex_config("# nothing\n").unwrap();
        assert!(empty.entries.is_empty());
        assert_eq!(empty.epsilon, 0.04);
    }

    #[test]
    fn flex_config_rejects_kmin_above_one() {
        let e = parse_flex_config("flex 1 2 1.2 3.0\n");
        assert!(matches!(e, Err(NetworkError::FlexBadRange { .. })));
    }

    #[test]
    fn binds_flex_to_branch_and_rejects_unknown() {
        let case = parse_matpower_case(TWO_BUS).unwrap();
        let cfg = parse_flex_config("flex 1 2 0.8 3.0\n").unwrap();
        let bound = bind_flex_lines(&case, &cfg.entries).unwrap();
        assert_eq!(bound.flex_lines.len(), 1);
        assert!((bound.flex_lines[0].b_rated + 10.0).abs() < 1e-12);

        let cfg = parse_flex_config("flex 1 7 0.8 3.0\n").unwrap();
        assert!(matches!(
            bind_flex_lines(&case, &cfg.entries),
            Err(NetworkError::FlexUnknownBranch { .. })
        ));
    }

    #[test]
    fn modifications_are_pure_and_idempotent() {
        let case = parse_matpower_case(TWO_BUS).unwrap();
        let mods = CaseModifications {
            uniform_p_flow_max: Some(2.0),
            zero_resistance: vec![BranchRef {
                from: 1,
                to: 2,
                circuit: 1,
            }],
            ..Default::default()
        };
        let m1 = apply_case_modifications(&case, &mods).unwrap();
        let m2 = apply_case_modifications(&m1, &mods).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.branches[0].p_flow_max, Some(2.0));
        // original untouched
        assert_eq!(case.branches[0].p_flow_max, None);

        let noop = apply_case_modifications(&case, &CaseModifications::default()).unwrap();
        assert_eq!(noop, case);
    }
}
