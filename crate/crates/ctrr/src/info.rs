//! Exact information-theoretic verification on small finite distributions.
//!
//! Everything here is plug-in arithmetic on explicit probability tables:
//! entropies, (conditional) mutual information, exhaustive search for the
//! representation maximizing `I(Z; X+)`, and the error/risk bounds that the
//! representation is supposed to satisfy. Enumeration limits are hard errors,
//! never truncations, so a report that says "verified" means verified
//! exactly. All measures are in nats; the base cancels in every inequality
//! checked here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for float round-off in exact-arithmetic checks.
pub const CHECK_TOL: f64 = 1e-9;

/// Hard limits for the exhaustive representation search.
pub const MAX_SUPPORT: usize = 8;
pub const MAX_CODOMAIN: usize = 4;

// --- generic probability tables ------------------------------------------------

/// A joint distribution over finitely many variables, stored as a dense
/// row-major table.
#[derive(Debug, Clone)]
pub struct ProbTable {
    dims: Vec<usize>,
    p: Vec<f64>,
}

impl ProbTable {
    pub fn new(dims: Vec<usize>, p: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || n != p.len() {
            return Err(Error::ShapeMismatch {
                op: "prob_table",
                detail: format!("dims {:?} vs {} entries", dims, p.len()),
            });
        }
        let mut sum = 0.0;
        for (i, &v) in p.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("probability {} at index {}", v, i)));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("table sums to {}", sum)));
        }
        Ok(ProbTable { dims, p })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.dims[i + 1];
        }
        s
    }

    /// Marginal over the axes in `keep` (ascending axis order in the output).
    pub fn marginal(&self, keep: &[usize]) -> Result<ProbTable> {
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if keep.iter().any(|&a| a >= self.dims.len()) || keep.is_empty() {
            return Err(Error::InvalidInput(format!("invalid axis selection {:?}", keep)));
        }
        let out_dims: Vec<usize> = keep.iter().map(|&a| self.dims[a]).collect();
        let in_strides = self.strides();
        let mut out_strides = vec![1usize; keep.len()];
        for i in (0..keep.len().saturating_sub(1)).rev() {
            out_strides[i] = out_strides[i + 1] * out_dims[i + 1];
        }
        let mut out = vec![0.0; out_dims.iter().product()];
        for (flat, &v) in self.p.iter().enumerate() {
            let mut o = 0;
            for (k, &axis) in keep.iter().enumerate() {
                let idx = (flat / in_strides[axis]) % self.dims[axis];
                o += idx * out_strides[k];
            }
            out[o] += v;
        }
        ProbTable { dims: out_dims, p: out }.validated()
    }

    fn validated(self) -> Result<ProbTable> {
        // marginalization preserves mass up to rounding; renormalization is
        // deliberately not applied
        Ok(self)
    }

    /// Plug-in entropy in nats with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        self.p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
    }
}

/// Queries over a joint table by axis sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InfoQuery {
    Entropy(Vec<usize>),
    ConditionalEntropy { of: Vec<usize>, given: Vec<usize> },
    MutualInfo(Vec<usize>, Vec<usize>),
    ConditionalMutualInfo(Vec<usize>, Vec<usize>, Vec<usize>),
}

fn disjoint(sets: &[&[usize]]) -> bool {
    let mut seen = std::collections::BTreeSet::new();
    for s in sets {
        for &a in *s {
            if !seen.insert(a) {
                return false;
            }
        }
    }
    true
}

fn union(sets: &[&[usize]]) -> Vec<usize> {
    let mut out: Vec<usize> = sets.iter().flat_map(|s| s.iter().copied()).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Exact plug-in value of `query` on `table`, in nats.
pub fn info_measure(table: &ProbTable, query: &InfoQuery) -> Result<f64> {
    let h = |axes: &[usize]| -> Result<f64> { Ok(table.marginal(axes)?.entropy()) };
    match query {
        InfoQuery::Entropy(a) => h(a),
        InfoQuery::ConditionalEntropy { of, given } => {
            if !disjoint(&[of, given]) {
                return Err(Error::InvalidInput("overlapping axis sets".into()));
            }
            Ok(h(&union(&[of, given]))? - h(given)?)
        }
        InfoQuery::MutualInfo(a, b) => {
            if !disjoint(&[a, b]) {
                return Err(Error::InvalidInput("overlapping axis sets".into()));
            }
            Ok(h(a)? + h(b)? - h(&union(&[a, b]))?)
        }
        InfoQuery::ConditionalMutualInfo(a, b, c) => {
            if !disjoint(&[a, b, c]) {
                return Err(Error::InvalidInput("overlapping axis sets".into()));
            }
            Ok(h(&union(&[a, c]))? + h(&union(&[b, c]))? - h(&union(&[a, b, c]))? - h(c)?)
        }
    }
}

// --- the (input, label, corrupted label) joint ------------------------------------

/// Joint law of `(X, Y, Y~)` on finite supports, axis order `[X, Y, Y~]`.
///
/// The corrupted-label channel may depend on the full input, not just the
/// class: `p(y~ | x, y)` in general. Class-conditional noise
/// (`p(y~ | x, y) = p(y~ | y)`) is the special case built by
/// [`DiscreteJoint::from_class_conditional`] and measured by
/// [`DiscreteJoint::class_conditional_deviation`]. Instance dependence is
/// what makes the small-`I(X;Y|X+)` / large-`I(X;Y~|X+)` regime reachable at
/// all: under class-conditional noise, conditioning on a same-class example
/// and applying data processing forces `I(X;Y~|X+) <= I(X;Y|X+)`.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    table: ProbTable,
}

pub const AXIS_X: usize = 0;
pub const AXIS_Y: usize = 1;
pub const AXIS_YT: usize = 2;

impl DiscreteJoint {
    pub fn from_table(nx: usize, ny: usize, nyt: usize, p: Vec<f64>) -> Result<Self> {
        Ok(DiscreteJoint { table: ProbTable::new(vec![nx, ny, nyt], p)? })
    }

    /// Builds the joint from `p(y)`, `p(x|y)`, and a class-conditional noise
    /// channel `p(y~|y)`.
    pub fn from_class_conditional(
        py: &[f64],
        px_given_y: &[Vec<f64>],
        pyt_given_y: &[Vec<f64>],
    ) -> Result<Self> {
        let ny = py.len();
        if px_given_y.len() != ny || pyt_given_y.len() != ny {
            return Err(Error::InvalidInput("conditional row count must match |Y|".into()));
        }
        let nx = px_given_y[0].len();
        let nyt = pyt_given_y[0].len();
        let mut p = vec![0.0; nx * ny * nyt];
        for y in 0..ny {
            if px_given_y[y].len() != nx || pyt_given_y[y].len() != nyt {
                return Err(Error::InvalidInput("ragged conditional rows".into()));
            }
            for x in 0..nx {
                for yt in 0..nyt {
                    p[x * ny * nyt + y * nyt + yt] = py[y] * px_given_y[y][x] * pyt_given_y[y][yt];
                }
            }
        }
        DiscreteJoint::from_table(nx, ny, nyt, p)
    }

    pub fn table(&self) -> &ProbTable {
        &self.table
    }

    pub fn nx(&self) -> usize {
        self.table.dims()[AXIS_X]
    }

    pub fn ny(&self) -> usize {
        self.table.dims()[AXIS_Y]
    }

    pub fn nyt(&self) -> usize {
        self.table.dims()[AXIS_YT]
    }

    fn p_xy(&self, x: usize, y: usize) -> f64 {
        let nyt = self.nyt();
        (0..nyt).map(|yt| self.table.probs()[x * self.ny() * nyt + y * nyt + yt]).sum()
    }

    fn p_y(&self, y: usize) -> f64 {
        (0..self.nx()).map(|x| self.p_xy(x, y)).sum()
    }

    /// Largest deviation `|p(y~|x,y) - p(y~|y)|` over cells with positive
    /// `p(x,y)`; zero means the noise channel is class-conditional.
    pub fn class_conditional_deviation(&self) -> f64 {
        let (nx, ny, nyt) = (self.nx(), self.ny(), self.nyt());
        let mut max_dev: f64 = 0.0;
        for y in 0..ny {
            let py = self.p_y(y);
            if py <= 0.0 {
                continue;
            }
            let channel: Vec<f64> = (0..nyt)
                .map(|yt| {
                    (0..nx).map(|x| self.table.probs()[x * ny * nyt + y * nyt + yt]).sum::<f64>() / py
                })
                .collect();
            for x in 0..nx {
                let pxy = self.p_xy(x, y);
                if pxy <= 0.0 {
                    continue;
                }
                for yt in 0..nyt {
                    let cond = self.table.probs()[x * ny * nyt + y * nyt + yt] / pxy;
                    max_dev = max_dev.max((cond - channel[yt]).abs());
                }
            }
        }
        max_dev
    }

    /// Joint over `(X, X+, Y, Y~)`: a same-class example `X+` is drawn
    /// conditionally independently of everything else given `Y`.
    pub fn extended_with_positive(&self) -> Result<ProbTable> {
        let (nx, ny, nyt) = (self.nx(), self.ny(), self.nyt());
        for y in 0..ny {
            if self.p_y(y) <= 0.0 {
                return Err(Error::InvalidInput(format!("class {} has zero probability", y)));
            }
        }
        let mut p = vec![0.0; nx * nx * ny * nyt];
        for x in 0..nx {
            for y in 0..ny {
                let py = self.p_y(y);
                for xp in 0..nx {
                    let px_plus = self.p_xy(xp, y) / py;
                    for yt in 0..nyt {
                        let base = self.table.probs()[x * ny * nyt + y * nyt + yt];
                        p[((x * nx + xp) * ny + y) * nyt + yt] = base * px_plus;
                    }
                }
            }
        }
        ProbTable::new(vec![nx, nx, ny, nyt], p)
    }
}

/// Marginal of [`DiscreteJoint::extended_with_positive`] over `(X, X+)`:
/// `p(x, x+) = sum_y p(y) p(x|y) p(x+|y)`. Symmetric with equal marginals.
pub fn positive_pair_joint(d: &DiscreteJoint) -> Result<ProbTable> {
    d.extended_with_positive()?.marginal(&[0, 1])
}

// --- epsilon/gamma reports -------------------------------------------------------

/// Exact `I(X;Y|X+)` and `I(X;Y~|X+)` plus whether a queried pair is met.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpsilonGammaReport {
    /// `I(X;Y|X+)`.
    pub epsilon: f64,
    /// `I(X;Y~|X+)`.
    pub gamma: f64,
    /// Whether `epsilon <= queried.0` and `gamma > queried.1`.
    pub satisfied: bool,
    pub queried_epsilon: f64,
    pub queried_gamma: f64,
}

/// The two conditional informations that define the regime of interest.
pub fn epsilon_gamma_values(d: &DiscreteJoint) -> Result<(f64, f64)> {
    let ext = d.extended_with_positive()?;
    // axes in the extended table: 0 = X, 1 = X+, 2 = Y, 3 = Y~
    let eps = info_measure(&ext, &InfoQuery::ConditionalMutualInfo(vec![0], vec![2], vec![1]))?;
    let gam = info_measure(&ext, &InfoQuery::ConditionalMutualInfo(vec![0], vec![3], vec![1]))?;
    Ok((eps.max(0.0), gam.max(0.0)))
}

pub fn epsilon_gamma(d: &DiscreteJoint, queried: (f64, f64)) -> Result<EpsilonGammaReport> {
    let (epsilon, gamma) = epsilon_gamma_values(d)?;
    Ok(EpsilonGammaReport {
        epsilon,
        gamma,
        satisfied: epsilon <= queried.0 + CHECK_TOL && gamma > queried.1,
        queried_epsilon: queried.0,
        queried_gamma: queried.1,
    })
}

// --- representation maps and the exhaustive search --------------------------------

/// A deterministic representation: a total function table from input indices
/// to a finite codomain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepresentationMap {
    pub table: Vec<usize>,
    pub codomain: usize,
}

impl RepresentationMap {
    pub fn new(table: Vec<usize>, codomain: usize) -> Result<Self> {
        if codomain == 0 {
            return Err(Error::InvalidInput("codomain must be >= 1".into()));
        }
        if table.iter().any(|&z| z >= codomain) {
            return Err(Error::InvalidInput("map value out of codomain".into()));
        }
        Ok(RepresentationMap { table, codomain })
    }

    pub fn identity(n: usize) -> Self {
        RepresentationMap { table: (0..n).collect(), codomain: n }
    }

    pub fn constant(n: usize, codomain: usize) -> Self {
        RepresentationMap { table: vec![0; n], codomain }
    }
}

/// `p(z, w)` from `p(x, w)` by pushing axis 0 through the map.
fn push_axis0(table: &ProbTable, map: &RepresentationMap) -> Result<ProbTable> {
    let dims = table.dims();
    if map.table.len() != dims[0] {
        return Err(Error::ShapeMismatch {
            op: "push_axis0",
            detail: format!("map over {} points, axis has {}", map.table.len(), dims[0]),
        });
    }
    let rest: usize = dims[1..].iter().product();
    let mut out = vec![0.0; map.codomain * rest];
    for x in 0..dims[0] {
        let z = map.table[x];
        for r in 0..rest {
            out[z * rest + r] += table.probs()[x * rest + r];
        }
    }
    let mut out_dims = vec![map.codomain];
    out_dims.extend_from_slice(&dims[1..]);
    ProbTable::new(out_dims, out)
}

/// `I(Z; W)` for the pushforward of a two-axis table.
fn pushed_mutual_info(table: &ProbTable, map: &RepresentationMap) -> Result<f64> {
    let pushed = push_axis0(table, map)?;
    info_measure(&pushed, &InfoQuery::MutualInfo(vec![0], vec![1]))
}

fn thread_cap() -> usize {
    if let Ok(v) = std::env::var("CTRR_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn decode_map(mut index: u64, n: usize, m: usize) -> Vec<usize> {
    // digit 0 (the value at input 0) is the most significant, so ascending
    // integers enumerate function tables in lexicographic order
    let mut table = vec![0usize; n];
    for slot in (0..n).rev() {
        table[slot] = (index % m as u64) as usize;
        index /= m as u64;
    }
    table
}

/// Exhaustive search for the deterministic map with codomain `m` maximizing
/// `I(Z; X+)`. Ties break toward the lexicographically first table, no
/// matter how the scan is partitioned across threads. Guarded by
/// [`MAX_SUPPORT`] and [`MAX_CODOMAIN`].
pub fn brute_force_zstar(d: &DiscreteJoint, m: usize) -> Result<(RepresentationMap, f64)> {
    let n = d.nx();
    if n > MAX_SUPPORT || m > MAX_CODOMAIN {
        return Err(Error::Guard(format!(
            "representation search needs |X| <= {} and m <= {}, got {} and {}",
            MAX_SUPPORT, MAX_CODOMAIN, n, m
        )));
    }
    if m == 0 {
        return Err(Error::InvalidInput("codomain must be >= 1".into()));
    }
    let pair = positive_pair_joint(d)?;
    let total = (m as u64).pow(n as u32);
    let threads = thread_cap().min(total.max(1) as usize).max(1);
    let chunk = total.div_ceil(threads as u64);

    // each worker scans a contiguous index range and keeps the first map
    // attaining its local maximum; ranges merge by (value desc, index asc)
    let best = std::thread::scope(|scope| -> Result<(f64, u64)> {
        let mut handles = Vec::new();
        let pair_ref = &pair;
        for t in 0..threads {
            let lo = t as u64 * chunk;
            let hi = ((t as u64 + 1) * chunk).min(total);
            handles.push(scope.spawn(move || -> Result<Option<(f64, u64)>> {
                let mut local: Option<(f64, u64)> = None;
                for idx in lo..hi {
                    let map = RepresentationMap::new(decode_map(idx, n, m), m)?;
                    let mi = pushed_mutual_info(pair_ref, &map)?;
                    match local {
                        Some((best_v, _)) if mi <= best_v => {}
                        _ => local = Some((mi, idx)),
                    }
                }
                Ok(local)
            }));
        }
        let mut overall: Option<(f64, u64)> = None;
        for h in handles {
            let local = h.join().expect("search worker panicked")?;
            if let Some((v, i)) = local {
                overall = match overall {
                    None => Some((v, i)),
                    Some((bv, bi)) => {
                        if v > bv || (v == bv && i < bi) {
                            Some((v, i))
                        } else {
                            Some((bv, bi))
                        }
                    }
                };
            }
        }
        Ok(overall.expect("non-empty map space"))
    })?;
    let map = RepresentationMap::new(decode_map(best.1, n, m), m)?;
    Ok((map, best.0))
}

// --- theorem and lemma checks ------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub epsilon: f64,
    pub gamma: f64,
    pub precondition_ok: bool,
    pub i_xy: f64,
    pub i_zy: f64,
    pub i_xyt: f64,
    pub i_zyt: f64,
    pub achieved_i_z_xplus: f64,
    /// `I(X;Y) - eps <= I(Z*;Y)`.
    pub lower_ok: bool,
    /// `I(Z*;Y) <= I(X;Y)`.
    pub upper_ok: bool,
    /// `I(Z*;Y~) <= I(X;Y~) - gamma + eps`.
    pub noisy_ok: bool,
    pub zstar: RepresentationMap,
}

impl Theorem2Report {
    pub fn all_ok(&self) -> bool {
        self.precondition_ok && self.lower_ok && self.upper_ok && self.noisy_ok
    }
}

/// Verifies the information sandwich for the exhaustive `Z*`. Requires the
/// distribution to sit in the `gamma > epsilon` regime; otherwise the report
/// flags the precondition and makes no claim.
pub fn verify_theorem2(d: &DiscreteJoint, m: usize) -> Result<Theorem2Report> {
    let (epsilon, gamma) = epsilon_gamma_values(d)?;
    let precondition_ok = gamma > epsilon;
    let (zstar, achieved) = brute_force_zstar(d, m)?;
    let xy = d.table().marginal(&[AXIS_X, AXIS_Y])?;
    let xyt = d.table().marginal(&[AXIS_X, AXIS_YT])?;
    let i_xy = info_measure(&xy, &InfoQuery::MutualInfo(vec![0], vec![1]))?;
    let i_xyt = info_measure(&xyt, &InfoQuery::MutualInfo(vec![0], vec![1]))?;
    let i_zy = pushed_mutual_info(&xy, &zstar)?;
    let i_zyt = pushed_mutual_info(&xyt, &zstar)?;
    Ok(Theorem2Report {
        epsilon,
        gamma,
        precondition_ok,
        i_xy,
        i_zy,
        i_xyt,
        i_zyt,
        achieved_i_z_xplus: achieved,
        lower_ok: precondition_ok && i_xy - epsilon <= i_zy + CHECK_TOL,
        upper_ok: precondition_ok && i_zy <= i_xy + CHECK_TOL,
        noisy_ok: precondition_ok && i_zyt <= i_xyt - gamma + epsilon + CHECK_TOL,
        zstar,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub empirical_error: f64,
    /// `(H(Y~) - I(Z;Y~) - H(e)) / ln(|Y~| - 1)`, the denominator the proof
    /// actually supports.
    pub bound: f64,
    /// The same numerator over `ln(|Y~|) - 1`, the denominator the statement
    /// prints; surfaced so the discrepancy stays visible.
    pub bound_statement_denominator: f64,
    /// `|Y~| = 2` makes the proof denominator `ln 1 = 0`; the bound is
    /// reported vacuous instead of dividing by zero.
    pub vacuous: bool,
    pub satisfied: bool,
}

fn binary_entropy(e: f64) -> f64 {
    if e <= 0.0 || e >= 1.0 {
        0.0
    } else {
        -e * e.ln() - (1.0 - e) * (1.0 - e).ln()
    }
}

/// Error lower bound for any deterministic classifier `Z -> Y~hat` read off
/// a joint of `(Z, Y~)`.
pub fn lemma1_bound(joint_z_yt: &ProbTable, classifier: &[usize]) -> Result<Lemma1Report> {
    let dims = joint_z_yt.dims();
    if dims.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "lemma1_bound",
            detail: format!("expected a (Z, Y~) table, dims are {:?}", dims),
        });
    }
    let (nz, nyt) = (dims[0], dims[1]);
    if classifier.len() != nz || classifier.iter().any(|&c| c >= nyt) {
        return Err(Error::InvalidInput("classifier table must map every z into the label set".into()));
    }
    let mut err = 0.0;
    for z in 0..nz {
        for yt in 0..nyt {
            if classifier[z] != yt {
                err += joint_z_yt.probs()[z * nyt + yt];
            }
        }
    }
    let h_yt = joint_z_yt.marginal(&[1])?.entropy();
    let i_zyt = info_measure(joint_z_yt, &InfoQuery::MutualInfo(vec![0], vec![1]))?;
    let numerator = h_yt - i_zyt - binary_entropy(err);
    let vacuous = nyt < 3;
    let bound = if vacuous { f64::NEG_INFINITY } else { numerator / ((nyt - 1) as f64).ln() };
    let statement_den = (nyt as f64).ln() - 1.0;
    let bound_statement = if statement_den.abs() < 1e-12 { f64::NEG_INFINITY } else { numerator / statement_den };
    Ok(Lemma1Report {
        empirical_error: err,
        bound,
        bound_statement_denominator: bound_statement,
        vacuous,
        satisfied: vacuous || err >= bound - CHECK_TOL,
    })
}

/// The classifier minimizing the empirical error on a `(Z, Y~)` joint:
/// `z -> argmax p(z, y~)`, ties toward the smallest label.
pub fn map_classifier(joint_z_yt: &ProbTable) -> Result<Vec<usize>> {
    let dims = joint_z_yt.dims();
    if dims.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "map_classifier",
            detail: format!("expected a (Z, Y~) table, dims are {:?}", dims),
        });
    }
    let (nz, nyt) = (dims[0], dims[1]);
    let mut out = Vec::with_capacity(nz);
    for z in 0..nz {
        let row = &joint_z_yt.probs()[z * nyt..(z + 1) * nyt];
        let mut best = 0;
        for yt in 1..nyt {
            if row[yt] > row[best] {
                best = yt;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RiskGapReport {
    /// `H(Y|Z)`: the minimum cross-entropy risk attainable from `Z`.
    pub risk_z: f64,
    /// `H(Y|X)`.
    pub risk_x: f64,
}

/// Minimum cross-entropy risks via the variational identity
/// `inf_g E[-sum y log g] = H(Y | input)`.
pub fn risk_gap(d: &DiscreteJoint, zmap: &RepresentationMap) -> Result<RiskGapReport> {
    let xy = d.table().marginal(&[AXIS_X, AXIS_Y])?;
    let risk_x = info_measure(&xy, &InfoQuery::ConditionalEntropy { of: vec![1], given: vec![0] })?;
    let zy = push_axis0(&xy, zmap)?;
    let risk_z = info_measure(&zy, &InfoQuery::ConditionalEntropy { of: vec![1], given: vec![0] })?;
    Ok(RiskGapReport { risk_z, risk_x })
}

// --- the constructed instance family -------------------------------------------------

/// One member of the constructed family: inputs are (class, background)
/// pairs with both coordinates uniform and independent; the corrupted label
/// flips the class with a background-dependent probability to a
/// background-dependent target. A same-class example shares the class but
/// resamples the background, so it pins the true label while leaving the
/// corrupted label uncertain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub classes: usize,
    pub backgrounds: usize,
    /// Per-background flip probability.
    pub flip_probs: Vec<f64>,
}

impl FamilySpec {
    pub fn name(&self) -> String {
        let probs: Vec<String> = self.flip_probs.iter().map(|p| format!("{}", p)).collect();
        format!("k{}m{}[{}]", self.classes, self.backgrounds, probs.join(","))
    }

    /// The flip target for (class, background): a nonzero class offset that
    /// cycles with the background, so the corruption is instance-dependent
    /// even when every background flips.
    fn target(&self, y: usize, b: usize) -> usize {
        (y + 1 + (b % (self.classes - 1))) % self.classes
    }

    pub fn build(&self) -> Result<DiscreteJoint> {
        if self.classes < 2 {
            return Err(Error::InvalidInput("family needs >= 2 classes".into()));
        }
        if self.backgrounds < 2 {
            return Err(Error::InvalidInput("family needs >= 2 backgrounds".into()));
        }
        if self.flip_probs.len() != self.backgrounds {
            return Err(Error::InvalidInput("one flip probability per background".into()));
        }
        if self.flip_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("flip probabilities must be in [0, 1]".into()));
        }
        let (k, m) = (self.classes, self.backgrounds);
        let nx = k * m;
        let mass = 1.0 / (nx as f64);
        let mut p = vec![0.0; nx * k * k];
        for y in 0..k {
            for b in 0..m {
                let x = y * m + b;
                let rho = self.flip_probs[b];
                let tgt = self.target(y, b);
                p[x * k * k + y * k + y] += mass * (1.0 - rho);
                p[x * k * k + y * k + tgt] += mass * rho;
            }
        }
        DiscreteJoint::from_table(nx, k, k, p)
    }
}

/// The built-in family: at least 50 instances spanning 2 and 3 classes,
/// 2 to 4 backgrounds, deterministic and fractional flip patterns. Every
/// member satisfies `gamma > epsilon` (the builder's tests assert it).
pub fn default_family() -> Vec<FamilySpec> {
    let mut out = Vec::new();
    let spec = |k: usize, m: usize, probs: &[f64]| FamilySpec {
        classes: k,
        backgrounds: m,
        flip_probs: probs.to_vec(),
    };
    // two classes, two backgrounds
    for probs in [
        [0.0, 1.0],
        [1.0, 0.0],
        [0.25, 0.75],
        [0.75, 0.25],
        [0.5, 1.0],
        [1.0, 0.5],
        [0.2, 0.9],
        [0.9, 0.2],
    ] {
        out.push(spec(2, 2, &probs));
    }
    // two classes, three backgrounds: all non-constant 0/1 patterns plus
    // fractional ramps
    for bits in 1..7u8 {
        let probs: Vec<f64> = (0..3).map(|i| ((bits >> i) & 1) as f64).collect();
        out.push(spec(2, 3, &probs));
    }
    for probs in [[0.2, 0.5, 0.8], [0.8, 0.5, 0.2], [0.0, 0.5, 1.0], [1.0, 0.5, 0.0]] {
        out.push(spec(2, 3, &probs));
    }
    // two classes, four backgrounds: all non-constant 0/1 patterns plus a few
    // fractional ones
    for bits in 1..15u8 {
        let probs: Vec<f64> = (0..4).map(|i| ((bits >> i) & 1) as f64).collect();
        out.push(spec(2, 4, &probs));
    }
    for probs in [
        [0.1, 0.4, 0.6, 0.9],
        [0.9, 0.6, 0.4, 0.1],
        [0.0, 0.25, 0.5, 0.75],
        [0.75, 0.5, 0.25, 0.0],
    ] {
        out.push(spec(2, 4, &probs));
    }
    // three classes, two backgrounds: the flip target alternates with the
    // background, so even constant flip probabilities are instance-dependent
    for probs in [
        [1.0, 1.0],
        [0.5, 1.0],
        [1.0, 0.5],
        [0.3, 0.8],
        [0.0, 1.0],
        [1.0, 0.0],
        [0.25, 0.25],
        [0.5, 0.5],
        [0.75, 0.75],
        [0.4, 0.7],
        [0.9, 0.6],
        [0.25, 0.75],
        [0.1, 0.9],
        [0.6, 0.2],
        [0.35, 0.65],
        [0.8, 0.45],
    ] {
        out.push(spec(3, 2, &probs));
    }
    out
}

// --- full verification sweep ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceReport {
    pub name: String,
    pub spec: Option<FamilySpec>,
    pub epsilon: f64,
    pub gamma: f64,
    pub precondition_ok: bool,
    pub theorem2: Theorem2Report,
    /// The error bound under the map classifier and a constant classifier.
    pub lemma1_map: Lemma1Report,
    pub lemma1_constant: Lemma1Report,
    /// `R(Z*) <= R(X) + epsilon`.
    pub lemma2: RiskGapReport,
    pub lemma2_ok: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    pub tolerance: f64,
    pub instance_count: usize,
    pub all_passed: bool,
    /// The statement divides by `ln|Y~| - 1`, the proof by `ln(|Y~| - 1)`;
    /// reports carry both bounds and assert only the proof form.
    pub lemma1_denominator_note: String,
    pub instances: Vec<InstanceReport>,
}

pub const LEMMA1_NOTE: &str = "error bound divides by ln(|label set| - 1) as derived; the \
                               printed statement's ln|label set| - 1 is also reported for \
                               comparison";

/// Runs every check on one distribution. `m` is the representation codomain
/// for the exhaustive search (the class count is the natural choice).
pub fn verify_joint(
    name: &str,
    spec: Option<&FamilySpec>,
    d: &DiscreteJoint,
    m: usize,
) -> Result<InstanceReport> {
    let thm2 = verify_theorem2(d, m)?;
    let zyt = push_axis0(&d.table().marginal(&[AXIS_X, AXIS_YT])?, &thm2.zstar)?;
    let map_cls = map_classifier(&zyt)?;
    let lemma1_map = lemma1_bound(&zyt, &map_cls)?;
    let lemma1_constant = lemma1_bound(&zyt, &vec![0; thm2.zstar.codomain])?;
    let lemma2 = risk_gap(d, &thm2.zstar)?;
    let lemma2_ok = lemma2.risk_z <= lemma2.risk_x + thm2.epsilon + CHECK_TOL;
    let passed = thm2.all_ok() && lemma1_map.satisfied && lemma1_constant.satisfied && lemma2_ok;
    Ok(InstanceReport {
        name: name.to_string(),
        spec: spec.cloned(),
        epsilon: thm2.epsilon,
        gamma: thm2.gamma,
        precondition_ok: thm2.precondition_ok,
        theorem2: thm2,
        lemma1_map,
        lemma1_constant,
        lemma2,
        lemma2_ok,
        passed,
    })
}

pub fn verify_instance(spec: &FamilySpec, m: usize) -> Result<InstanceReport> {
    verify_joint(&spec.name(), Some(spec), &spec.build()?, m)
}

pub fn verify_family(specs: &[FamilySpec]) -> Result<TheoryReport> {
    let mut instances = Vec::with_capacity(specs.len());
    for spec in specs {
        instances.push(verify_instance(spec, spec.classes)?);
    }
    let all_passed = instances.iter().all(|i| i.passed);
    Ok(TheoryReport {
        tolerance: CHECK_TOL,
        instance_count: instances.len(),
        all_passed,
        lemma1_denominator_note: LEMMA1_NOTE.into(),
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn uniform_xy_equal(n: usize) -> ProbTable {
        // Y = X, X uniform over n; trivial noise axis of size 1
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            p[i * n + i] = 1.0 / n as f64;
        }
        ProbTable::new(vec![n, n], p).unwrap()
    }

    fn random_table(dims: &[usize], rng: &mut impl Rng) -> ProbTable {
        let n: usize = dims.iter().product();
        let mut p: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
        let sum: f64 = p.iter().sum();
        for v in &mut p {
            *v /= sum;
        }
        // compensate rounding so the total is exactly 1 within 1e-12
        let correction: f64 = 1.0 - p.iter().sum::<f64>();
        p[0] += correction;
        ProbTable::new(dims.to_vec(), p).unwrap()
    }

    #[test]
    fn independent_variables_have_zero_mutual_info() {
        let p = ProbTable::new(vec![2, 2], vec![0.25; 4]).unwrap();
        let i = info_measure(&p, &InfoQuery::MutualInfo(vec![0], vec![1])).unwrap();
        assert!(i.abs() < 1e-15);
    }

    #[test]
    fn identical_uniform_variables_have_full_mutual_info() {
        let p = uniform_xy_equal(4);
        let i = info_measure(&p, &InfoQuery::MutualInfo(vec![0], vec![1])).unwrap();
        assert!((i - 4f64.ln()).abs() < 1e-12);
        assert!((p.marginal(&[0]).unwrap().entropy() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn chain_rule_holds_on_random_tables() {
        let mut rng = crate::rng::stream(123, 0x77, &[]);
        for _ in 0..100 {
            let p = random_table(&[3, 4], &mut rng);
            let i = info_measure(&p, &InfoQuery::MutualInfo(vec![0], vec![1])).unwrap();
            let hy = p.marginal(&[1]).unwrap().entropy();
            let hy_given_x =
                info_measure(&p, &InfoQuery::ConditionalEntropy { of: vec![1], given: vec![0] }).unwrap();
            assert!((i - (hy - hy_given_x)).abs() < 1e-12);
        }
    }

    #[test]
    fn mutual_info_is_bounded_by_marginal_entropies() {
        let mut rng = crate::rng::stream(77, 0x78, &[]);
        for _ in 0..100 {
            let p = random_table(&[4, 3], &mut rng);
            let i = info_measure(&p, &InfoQuery::MutualInfo(vec![0], vec![1])).unwrap();
            let hx = p.marginal(&[0]).unwrap().entropy();
            let hy = p.marginal(&[1]).unwrap().entropy();
            assert!(i >= -1e-12);
            assert!(i <= hx.min(hy) + 1e-12);
        }
    }

    #[test]
    fn invalid_axis_selections_error() {
        let p = ProbTable::new(vec![2, 2], vec![0.25; 4]).unwrap();
        assert!(info_measure(&p, &InfoQuery::MutualInfo(vec![0], vec![0])).is_err());
        assert!(info_measure(&p, &InfoQuery::Entropy(vec![5])).is_err());
    }

    fn one_x_per_class(k: usize) -> DiscreteJoint {
        // X uniform over k, Y = X, Y~ = Y (noiseless)
        let mut p = vec![0.0; k * k * k];
        for i in 0..k {
            p[i * k * k + i * k + i] = 1.0 / k as f64;
        }
        DiscreteJoint::from_table(k, k, k, p).unwrap()
    }

    #[test]
    fn one_x_per_class_pairs_are_diagonal_with_full_info() {
        let d = one_x_per_class(3);
        let pair = positive_pair_joint(&d).unwrap();
        for x in 0..3 {
            for xp in 0..3 {
                let v = pair.probs()[x * 3 + xp];
                assert!((v - if x == xp { 1.0 / 3.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
        let i = info_measure(&pair, &InfoQuery::MutualInfo(vec![0], vec![1])).unwrap();
        assert!((i - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn class_independent_inputs_make_pairs_independent() {
        // p(x|y) identical across classes -> I(X; X+) = 0
        let d = DiscreteJoint::from_class_conditional(
            &[0.5, 0.5],
            &[vec![0.25, 0.25, 0.5], vec![0.25, 0.25, 0.5]],
            &[vec![0.9, 0.1], vec![0.2, 0.8]],
        )
        .unwrap();
        let pair = positive_pair_joint(&d).unwrap();
        let i = info_measure(&pair, &InfoQuery::MutualInfo(vec![0], vec![1])).unwrap();
        assert!(i.abs() < 1e-12);
    }

    #[test]
    fn positive_pair_joint_is_symmetric_with_equal_marginals() {
        let mut rng = crate::rng::stream(5, 0x79, &[]);
        let t = random_table(&[4, 3], &mut rng);
        // wrap the random (x, y) table with a trivial noiseless channel
        let mut p = vec![0.0; 4 * 3 * 3];
        for x in 0..4 {
            for y in 0..3 {
                p[x * 9 + y * 3 + y] = t.probs()[x * 3 + y];
            }
        }
        let d = DiscreteJoint::from_table(4, 3, 3, p).unwrap();
        let pair = positive_pair_joint(&d).unwrap();
        for x in 0..4 {
            for xp in 0..4 {
                assert!((pair.probs()[x * 4 + xp] - pair.probs()[xp * 4 + x]).abs() < 1e-12);
            }
        }
        let mx = pair.marginal(&[0]).unwrap();
        let mxp = pair.marginal(&[1]).unwrap();
        for i in 0..4 {
            assert!((mx.probs()[i] - mxp.probs()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn epsilon_is_zero_when_x_determines_y_uniquely_per_class() {
        let d = one_x_per_class(4);
        let (eps, _) = epsilon_gamma_values(&d).unwrap();
        assert!(eps.abs() < 1e-12);
    }

    #[test]
    fn noise_independent_of_everything_gives_zero_gamma() {
        let d = DiscreteJoint::from_class_conditional(
            &[0.5, 0.5],
            &[vec![0.7, 0.3, 0.0], vec![0.0, 0.2, 0.8]],
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .unwrap();
        let (_, gamma) = epsilon_gamma_values(&d).unwrap();
        assert!(gamma.abs() < 1e-12);
        let report = epsilon_gamma(&d, (0.1, 0.05)).unwrap();
        assert!(!report.satisfied);
    }

    #[test]
    fn background_dependent_flips_give_positive_gamma_and_zero_epsilon() {
        let spec = FamilySpec { classes: 2, backgrounds: 2, flip_probs: vec![0.0, 1.0] };
        let d = spec.build().unwrap();
        let (eps, gamma) = epsilon_gamma_values(&d).unwrap();
        assert!(eps.abs() < 1e-12, "eps = {eps}");
        // flipping half the backgrounds makes the corrupted label a fair coin
        // given the class, so the conditional information is ln 2
        assert!((gamma - 2f64.ln()).abs() < 1e-12, "gamma = {gamma}");
    }

    #[test]
    fn class_conditional_noise_cannot_reach_gamma_above_epsilon() {
        // conditional data processing: with p(yt|x,y) = p(yt|y) the corrupted
        // label carries no more conditional information than the true one
        let mut rng = crate::rng::stream(9, 0x80, &[]);
        for _ in 0..50 {
            let py = vec![0.5, 0.5];
            let mut px0: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() + 0.1).collect();
            let s: f64 = px0.iter().sum();
            px0.iter_mut().for_each(|v| *v /= s);
            let mut px1: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() + 0.1).collect();
            let s: f64 = px1.iter().sum();
            px1.iter_mut().for_each(|v| *v /= s);
            let flip: f64 = rng.gen_range(0.05..0.45);
            let d = DiscreteJoint::from_class_conditional(
                &py,
                &[px0, px1],
                &[vec![1.0 - flip, flip], vec![flip, 1.0 - flip]],
            )
            .unwrap();
            assert!(d.class_conditional_deviation() < 1e-12);
            let (eps, gamma) = epsilon_gamma_values(&d).unwrap();
            assert!(gamma <= eps + 1e-9, "gamma {gamma} > eps {eps}");
        }
    }

    #[test]
    fn family_members_have_instance_dependent_noise() {
        // per-background flip rates 0.25/0.75 sit 0.25 away from the 0.5
        // class-conditional average
        let spec = FamilySpec { classes: 2, backgrounds: 2, flip_probs: vec![0.25, 0.75] };
        let d = spec.build().unwrap();
        assert!((d.class_conditional_deviation() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zstar_with_full_codomain_attains_the_pair_information() {
        let d = one_x_per_class(3);
        let pair = positive_pair_joint(&d).unwrap();
        let i_xx = info_measure(&pair, &InfoQuery::MutualInfo(vec![0], vec![1])).unwrap();
        let (_, achieved) = brute_force_zstar(&d, 3).unwrap();
        assert!((achieved - i_xx).abs() < 1e-12);
    }

    #[test]
    fn constant_codomain_collapses_information_to_zero() {
        let d = one_x_per_class(3);
        let (map, achieved) = brute_force_zstar(&d, 1).unwrap();
        assert_eq!(map.table, vec![0, 0, 0]);
        assert!(achieved.abs() < 1e-15);
    }

    #[test]
    fn two_class_partition_is_the_maximizer() {
        // four inputs, two classes, two inputs per class
        let d = DiscreteJoint::from_class_conditional(
            &[0.5, 0.5],
            &[vec![0.6, 0.4, 0.0, 0.0], vec![0.0, 0.0, 0.3, 0.7]],
            &[vec![0.9, 0.1], vec![0.1, 0.9]],
        )
        .unwrap();
        let (map, achieved) = brute_force_zstar(&d, 2).unwrap();
        assert_eq!(map.table, vec![0, 0, 1, 1]);
        let pair = positive_pair_joint(&d).unwrap();
        let i_zy = pushed_mutual_info(&pair, &map).unwrap();
        assert!((achieved - i_zy).abs() < 1e-12);
    }

    #[test]
    fn zstar_dominates_every_enumerated_map() {
        let spec = FamilySpec { classes: 2, backgrounds: 2, flip_probs: vec![0.3, 0.9] };
        let d = spec.build().unwrap();
        let pair = positive_pair_joint(&d).unwrap();
        let (_, achieved) = brute_force_zstar(&d, 2).unwrap();
        for idx in 0..(2u64.pow(4)) {
            let map = RepresentationMap::new(decode_map(idx, 4, 2), 2).unwrap();
            let mi = pushed_mutual_info(&pair, &map).unwrap();
            assert!(mi <= achieved + 1e-12);
        }
    }

    #[test]
    fn enumeration_guard_is_a_hard_error() {
        let spec = FamilySpec { classes: 3, backgrounds: 3, flip_probs: vec![0.5, 0.5, 0.5] };
        let d = spec.build().unwrap(); // |X| = 9
        match brute_force_zstar(&d, 3) {
            Err(Error::Guard(_)) => {}
            other => panic!("expected guard error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn data_processing_holds_for_random_maps() {
        let mut rng = crate::rng::stream(31, 0x81, &[]);
        for _ in 0..100 {
            let t = random_table(&[5, 3], &mut rng);
            let codomain = rng.gen_range(1..4usize);
            let table: Vec<usize> = (0..5).map(|_| rng.gen_range(0..codomain)).collect();
            let map = RepresentationMap::new(table, codomain).unwrap();
            let i_xy = info_measure(&t, &InfoQuery::MutualInfo(vec![0], vec![1])).unwrap();
            let i_zy = pushed_mutual_info(&t, &map).unwrap();
            assert!(i_zy <= i_xy + 1e-12);
        }
    }

    #[test]
    fn theorem2_sandwich_collapses_at_zero_epsilon() {
        let spec = FamilySpec { classes: 2, backgrounds: 2, flip_probs: vec![0.0, 1.0] };
        let d = spec.build().unwrap();
        let report = verify_theorem2(&d, 2).unwrap();
        assert!(report.precondition_ok);
        assert!(report.all_ok());
        assert!((report.i_zy - report.i_xy).abs() < 1e-12);
    }

    #[test]
    fn theorem2_flags_distributions_outside_the_regime() {
        let d = DiscreteJoint::from_class_conditional(
            &[0.5, 0.5],
            &[vec![0.6, 0.4, 0.0, 0.0], vec![0.0, 0.0, 0.3, 0.7]],
            &[vec![0.8, 0.2], vec![0.2, 0.8]],
        )
        .unwrap();
        let report = verify_theorem2(&d, 2).unwrap();
        assert!(!report.precondition_ok);
        assert!(!report.all_ok());
    }

    #[test]
    fn lemma1_tight_uniform_case() {
        // Y~ uniform over 4, Z constant, constant classifier:
        // error 0.75 equals (ln 4 - H(0.75)) / ln 3 exactly
        let p = ProbTable::new(vec![1, 4], vec![0.25; 4]).unwrap();
        let report = lemma1_bound(&p, &[0]).unwrap();
        assert!((report.empirical_error - 0.75).abs() < 1e-15);
        assert!((report.bound - 0.75).abs() < 1e-12, "bound = {}", report.bound);
        assert!(!report.vacuous);
        assert!(report.satisfied);
        // the frozen entropy of the error indicator
        assert!((binary_entropy(0.75) - 0.5623351446188083).abs() < 1e-12);
    }

    #[test]
    fn lemma1_identity_channel_gives_nonpositive_bound() {
        let mut p = vec![0.0; 16];
        for i in 0..4 {
            p[i * 4 + i] = 0.25;
        }
        let p = ProbTable::new(vec![4, 4], p).unwrap();
        let report = lemma1_bound(&p, &[0, 1, 2, 3]).unwrap();
        assert_eq!(report.empirical_error, 0.0);
        assert!(report.bound <= 1e-12);
        assert!(report.satisfied);
    }

    #[test]
    fn lemma1_binary_labels_are_vacuous() {
        let p = ProbTable::new(vec![2, 2], vec![0.4, 0.1, 0.1, 0.4]).unwrap();
        let report = lemma1_bound(&p, &[0, 1]).unwrap();
        assert!(report.vacuous);
        assert!(report.satisfied);
    }

    #[test]
    fn lemma1_holds_on_random_instances() {
        let mut rng = crate::rng::stream(41, 0x82, &[]);
        for _ in 0..200 {
            let nz = rng.gen_range(2..6usize);
            let nyt = rng.gen_range(3..6usize);
            let joint = random_table(&[nz, nyt], &mut rng);
            let classifier: Vec<usize> = (0..nz).map(|_| rng.gen_range(0..nyt)).collect();
            let report = lemma1_bound(&joint, &classifier).unwrap();
            assert!(report.satisfied, "error {} < bound {}", report.empirical_error, report.bound);
        }
    }

    #[test]
    fn risk_gap_trivial_cases() {
        let d = one_x_per_class(3);
        let identity = RepresentationMap::identity(3);
        let r = risk_gap(&d, &identity).unwrap();
        assert!(r.risk_z.abs() < 1e-12 && r.risk_x.abs() < 1e-12);

        let constant = RepresentationMap::constant(3, 1);
        let r = risk_gap(&d, &constant).unwrap();
        assert!((r.risk_z - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn default_family_is_large_and_in_regime() {
        let family = default_family();
        assert!(family.len() >= 50, "only {} instances", family.len());
        for spec in &family {
            let d = spec.build().unwrap();
            let (eps, gamma) = epsilon_gamma_values(&d).unwrap();
            assert!(gamma > eps, "{}: gamma {} <= eps {}", spec.name(), gamma, eps);
        }
    }

    #[test]
    fn a_family_instance_passes_every_check() {
        let spec = FamilySpec { classes: 3, backgrounds: 2, flip_probs: vec![0.3, 0.8] };
        let report = verify_instance(&spec, 3).unwrap();
        assert!(report.passed, "{:?}", report);
        assert!(report.lemma2.risk_z <= report.lemma2.risk_x + report.epsilon + 1e-9);
    }
}
