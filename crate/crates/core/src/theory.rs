//! Exact, enumeration-based checks of the single-step versus multi-step
//! loss bounds.
//!
//! A [`JointTable`] is a full joint law `p(c, m_1..m_N)` over a discrete
//! context `c` (standing in for the quantized latent) and `N` token
//! positions. A [`PredictorCoupling`] extends it with a predicted copy of
//! every token, `p(c, m, pred)`. From the coupled law everything is computed
//! by exhaustive summation:
//!
//! * the single-step floor `L_s = Σ_i H(m_i | c)`,
//! * the multi-step floor `L_m = Σ_i H(m_i | c, pred_S(i))`, where `S(i)` is
//!   the predicted subset visible to position `i` (all other positions by
//!   default),
//! * the gap `L_s - L_m`, checked against an independently summed
//!   `Σ_i I(m_i; pred_S(i) | c)`,
//! * Bayes-optimal top-1 accuracies with and without the predictions.
//!
//! All logarithms are natural.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// Tolerance on total probability mass.
pub const MASS_TOL: f64 = 1e-12;
/// Tolerance for `gap == Σ I`.
pub const IDENTITY_TOL: f64 = 1e-10;
/// Slack allowed on the inequalities themselves.
pub const INEQUALITY_TOL: f64 = 1e-12;
/// Hard cap on enumerated table size.
pub const MAX_TABLE_ENTRIES: usize = 1_000_000;

/// Dense probability table over several discrete axes, row-major with the
/// last axis varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    dims: Vec<usize>,
    probs: Vec<f64>,
}

impl Table {
    pub fn new(dims: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let size = checked_size(&dims)?;
        if probs.len() != size {
            return Err(Error::InvalidDistribution(format!(
                "table has {} entries, dims {:?} need {}",
                probs.len(),
                dims,
                size
            )));
        }
        validate_probs(&probs)?;
        Ok(Self { dims, probs })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for a in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.dims[a + 1];
        }
        strides
    }

    /// Marginal over `keep`, with output axes in the order given.
    pub fn marginal(&self, keep: &[usize]) -> Table {
        let out_dims: Vec<usize> = keep.iter().map(|&a| self.dims[a]).collect();
        let mut out_strides = vec![1; keep.len()];
        for a in (0..keep.len().saturating_sub(1)).rev() {
            out_strides[a] = out_strides[a + 1] * out_dims[a + 1];
        }
        let strides = self.strides();
        let mut out = vec![0.0; out_dims.iter().product::<usize>().max(1)];
        for (flat, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut idx = 0;
            for (k, &a) in keep.iter().enumerate() {
                idx += (flat / strides[a]) % self.dims[a] * out_strides[k];
            }
            out[idx] += p;
        }
        Table {
            dims: out_dims,
            probs: out,
        }
    }

    /// Joint entropy of all axes.
    pub fn entropy(&self) -> f64 {
        entropy_unchecked(&self.probs)
    }
}

fn checked_size(dims: &[usize]) -> Result<usize> {
    let mut size: usize = 1;
    for &d in dims {
        if d == 0 {
            return Err(Error::InvalidDistribution("zero-sized axis".into()));
        }
        size = size.checked_mul(d).filter(|s| *s <= MAX_TABLE_ENTRIES).ok_or_else(|| {
            Error::InvalidDistribution(format!("table over {dims:?} exceeds {MAX_TABLE_ENTRIES} entries"))
        })?;
    }
    Ok(size)
}

fn validate_probs(p: &[f64]) -> Result<()> {
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidDistribution(format!("bad probability {x}")));
    }
    let total: f64 = p.iter().sum();
    // Summation rounding grows with table size.
    let tol = MASS_TOL.max(4.0 * f64::EPSILON * p.len() as f64);
    if (total - 1.0).abs() > tol {
        return Err(Error::InvalidDistribution(format!("total mass {total} is not 1")));
    }
    Ok(())
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().map(|&x| plogp(x)).sum::<f64>()
}

/// Shannon entropy of a distribution.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    validate_probs(dist)?;
    Ok(entropy_unchecked(dist))
}

/// Cross-entropy `-Σ p ln q`.
pub fn ce(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(-p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * qi.ln())
        .sum::<f64>())
}

/// `KL(p || q) = Σ p ln(p / q)`, summed in log space.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum::<f64>())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::InvalidDistribution(format!(
            "length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    validate_probs(p)?;
    validate_probs(q)?;
    if p.iter().zip(q).any(|(pi, qi)| *pi > 0.0 && *qi == 0.0) {
        return Err(Error::Support);
    }
    Ok(())
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut v = a.to_vec();
    v.extend(b.iter().copied().filter(|x| !a.contains(x)));
    v
}

/// `H(target | given)` computed as `H(target, given) - H(given)`.
pub fn cond_entropy(table: &Table, target: &[usize], given: &[usize]) -> f64 {
    let joint = table.marginal(&union(given, target)).entropy();
    let cond = if given.is_empty() {
        0.0
    } else {
        table.marginal(given).entropy()
    };
    joint - cond
}

/// `I(X; Y | Z)` by direct summation of
/// `p(x,y,z) [ln p(x,y,z) + ln p(z) - ln p(x,z) - ln p(y,z)]`.
///
/// This route never forms an entropy, so it can cross-check
/// entropy-difference computations.
pub fn mutual_info(table: &Table, x: &[usize], y: &[usize], given: &[usize]) -> f64 {
    let axes: Vec<usize> = given.iter().chain(x).chain(y).copied().collect();
    let joint = table.marginal(&axes);
    let nz = given.len();
    let nx = x.len();
    let dims = joint.dims().to_vec();
    let size_z: usize = dims[..nz].iter().product();
    let size_x: usize = dims[nz..nz + nx].iter().product();
    let size_y: usize = dims[nz + nx..].iter().product();
    let p = joint.probs();
    let at = |z: usize, xi: usize, yi: usize| p[(z * size_x + xi) * size_y + yi];

    let mut p_z = vec![0.0; size_z];
    let mut p_xz = vec![0.0; size_z * size_x];
    let mut p_yz = vec![0.0; size_z * size_y];
    for z in 0..size_z {
        for xi in 0..size_x {
            for yi in 0..size_y {
                let v = at(z, xi, yi);
                p_z[z] += v;
                p_xz[z * size_x + xi] += v;
                p_yz[z * size_y + yi] += v;
            }
        }
    }
    let mut total = 0.0;
    for z in 0..size_z {
        for xi in 0..size_x {
            for yi in 0..size_y {
                let v = at(z, xi, yi);
                if v > 0.0 {
                    total += v * (v.ln() + p_z[z].ln() - p_xz[z * size_x + xi].ln() - p_yz[z * size_y + yi].ln());
                }
            }
        }
    }
    total
}

/// Bayes-optimal top-1 accuracy for predicting axis `target` from `given`:
/// `Σ_g max_x p(g, x)`.
pub fn bayes_accuracy(table: &Table, target: usize, given: &[usize]) -> f64 {
    let mut axes = given.to_vec();
    axes.push(target);
    let m = table.marginal(&axes);
    let v = table.dims()[target];
    m.probs()
        .chunks(v)
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum()
}

/// Joint law `p(c, m_1..m_N)`; axis 0 is the context, axis `1 + i` is token
/// position `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    table: Table,
}

impl JointTable {
    pub fn new(contexts: usize, vocab: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::InvalidDistribution("no token positions".into()));
        }
        let mut dims = vec![contexts];
        dims.extend(&vocab);
        Ok(Self {
            table: Table::new(dims, probs)?,
        })
    }

    pub fn positions(&self) -> usize {
        self.table.dims().len() - 1
    }

    pub fn contexts(&self) -> usize {
        self.table.dims()[0]
    }

    pub fn vocab(&self) -> &[usize] {
        &self.table.dims()[1..]
    }

    pub fn table(&self) -> &Table {
        &self.table
    }
}

/// How predicted tokens relate to the true ones given the context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PredictorCoupling {
    /// `pred = m`.
    TeacherForced,
    /// `pred` is a fresh draw from `p(m | c)`, independent of `m` given `c`.
    Independent,
    /// Explicit law over axes `[c, m_1..m_N, pred_1..pred_N]`; its marginal
    /// over `(c, m)` must reproduce the joint.
    Custom(Table),
}

/// Which predicted positions each true position may condition on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Visibility {
    /// Position `i` sees the predictions of every other position.
    AllOthers,
    /// Positions are decoded in this order; each sees predictions of the
    /// positions decoded before it.
    Order(Vec<usize>),
    /// Explicit predicted subset per position.
    Subsets(Vec<Vec<usize>>),
}

impl Visibility {
    fn subsets(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        let subsets = match self {
            Visibility::AllOthers => (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
            Visibility::Order(order) => {
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != (0..n).collect::<Vec<_>>() {
                    return Err(Error::InvalidCoupling(format!(
                        "order {order:?} is not a permutation of 0..{n}"
                    )));
                }
                let mut out = vec![Vec::new(); n];
                for (k, &i) in order.iter().enumerate() {
                    out[i] = order[..k].to_vec();
                }
                out
            }
            Visibility::Subsets(s) => {
                if s.len() != n
                    || s.iter()
                        .enumerate()
                        .any(|(i, set)| set.iter().any(|&j| j >= n || j == i))
                {
                    return Err(Error::InvalidCoupling(
                        "each subset must list other positions only".into(),
                    ));
                }
                s.clone()
            }
        };
        Ok(subsets)
    }
}

/// Builds the coupled law over `[c, m_1..m_N, pred_1..pred_N]`.
pub fn coupled_table(joint: &JointTable, coupling: &PredictorCoupling) -> Result<Table> {
    let n = joint.positions();
    let jt = joint.table();
    let tokens: usize = joint.vocab().iter().product();
    let mut dims = jt.dims().to_vec();
    dims.extend_from_slice(joint.vocab());
    checked_size(&dims)?;
    match coupling {
        PredictorCoupling::TeacherForced => {
            let mut probs = vec![0.0; jt.probs().len() * tokens];
            for (flat, &p) in jt.probs().iter().enumerate() {
                let m = flat % tokens;
                probs[flat * tokens + m] = p;
            }
            Ok(Table { dims, probs })
        }
        PredictorCoupling::Independent => {
            let mut probs = vec![0.0; jt.probs().len() * tokens];
            for c in 0..joint.contexts() {
                let row = &jt.probs()[c * tokens..(c + 1) * tokens];
                let pc: f64 = row.iter().sum();
                if pc == 0.0 {
                    continue;
                }
                for (m, &pm) in row.iter().enumerate() {
                    for (pred, &pp) in row.iter().enumerate() {
                        probs[(c * tokens + m) * tokens + pred] = pm * pp / pc;
                    }
                }
            }
            Ok(Table { dims, probs })
        }
        PredictorCoupling::Custom(t) => {
            if t.dims() != dims.as_slice() {
                return Err(Error::InvalidCoupling(format!(
                    "coupling dims {:?}, expected {:?}",
                    t.dims(),
                    dims
                )));
            }
            let back = t.marginal(&(0..=n).collect::<Vec<_>>());
            if back
                .probs()
                .iter()
                .zip(jt.probs())
                .any(|(a, b)| (a - b).abs() > MASS_TOL)
            {
                return Err(Error::InvalidCoupling(
                    "marginal over (c, m) does not match the joint".into(),
                ));
            }
            Ok(t.clone())
        }
    }
}

/// `Σ_i H(m_i | c)`: the loss floor of a factorised single-pass predictor.
pub fn single_step_min_loss(joint: &JointTable) -> f64 {
    (0..joint.positions())
        .map(|i| cond_entropy(joint.table(), &[1 + i], &[0]))
        .sum()
}

/// `Σ_i H(m_i | c, pred_{\i})` with every other position's prediction
/// visible.
pub fn multi_step_min_loss(joint: &JointTable, coupling: &PredictorCoupling) -> Result<f64> {
    multi_step_min_loss_with(joint, coupling, &Visibility::AllOthers)
}

pub fn multi_step_min_loss_with(
    joint: &JointTable,
    coupling: &PredictorCoupling,
    visibility: &Visibility,
) -> Result<f64> {
    let coupled = coupled_table(joint, coupling)?;
    let n = joint.positions();
    let subsets = visibility.subsets(n)?;
    Ok((0..n)
        .map(|i| cond_entropy(&coupled, &[1 + i], &given_axes(n, &subsets[i])))
        .sum())
}

fn given_axes(n: usize, subset: &[usize]) -> Vec<usize> {
    let mut g = vec![0];
    g.extend(subset.iter().map(|j| 1 + n + j));
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossInequalityReport {
    pub single: f64,
    pub multi: f64,
    /// `single - multi`.
    pub gap: f64,
    /// Directly summed `Σ_i I(m_i; pred_S(i) | c)`.
    pub mi_sum: f64,
    /// `multi <= single` (within [`INEQUALITY_TOL`]).
    pub holds: bool,
    /// `|gap - mi_sum| <= IDENTITY_TOL`.
    pub identity_holds: bool,
}

pub fn verify_loss_inequality(joint: &JointTable, coupling: &PredictorCoupling) -> Result<LossInequalityReport> {
    verify_loss_inequality_with(joint, coupling, &Visibility::AllOthers)
}

pub fn verify_loss_inequality_with(
    joint: &JointTable,
    coupling: &PredictorCoupling,
    visibility: &Visibility,
) -> Result<LossInequalityReport> {
    let coupled = coupled_table(joint, coupling)?;
    let n = joint.positions();
    let subsets = visibility.subsets(n)?;
    let single = single_step_min_loss(joint);
    let multi: f64 = (0..n)
        .map(|i| cond_entropy(&coupled, &[1 + i], &given_axes(n, &subsets[i])))
        .sum();
    let mi_sum: f64 = (0..n)
        .map(|i| {
            let preds: Vec<usize> = subsets[i].iter().map(|j| 1 + n + j).collect();
            mutual_info(&coupled, &[1 + i], &preds, &[0])
        })
        .sum();
    let gap = single - multi;
    Ok(LossInequalityReport {
        single,
        multi,
        gap,
        mi_sum,
        holds: multi <= single + INEQUALITY_TOL,
        identity_holds: (gap - mi_sum).abs() <= IDENTITY_TOL,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Per position: `(Acc*(m_i | c), Acc*(m_i | c, pred_{\i}))`.
    pub per_position: Vec<(f64, f64)>,
    pub holds: bool,
}

pub fn verify_accuracy_inequality(joint: &JointTable, coupling: &PredictorCoupling) -> Result<AccuracyReport> {
    let coupled = coupled_table(joint, coupling)?;
    let n = joint.positions();
    let subsets = Visibility::AllOthers.subsets(n)?;
    let per_position: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            (
                bayes_accuracy(joint.table(), 1 + i, &[0]),
                bayes_accuracy(&coupled, 1 + i, &given_axes(n, &subsets[i])),
            )
        })
        .collect();
    let holds = per_position.iter().all(|(s, m)| *s <= *m + INEQUALITY_TOL);
    Ok(AccuracyReport { per_position, holds })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    TeacherForced,
    Independent,
    Custom,
}

impl CouplingKind {
    pub const ALL: [CouplingKind; 3] = [
        CouplingKind::TeacherForced,
        CouplingKind::Independent,
        CouplingKind::Custom,
    ];
}

/// Size limits for randomly drawn instances.
#[derive(Clone, Copy, Debug)]
pub struct InstanceLimits {
    pub max_contexts: usize,
    pub max_positions: usize,
    pub max_vocab: usize,
    /// Upper bound on `contexts * (Π vocab)^2`, the coupled-table size.
    pub max_coupled_entries: usize,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        Self {
            max_contexts: 8,
            max_positions: 4,
            max_vocab: 8,
            max_coupled_entries: 20_000,
        }
    }
}

fn random_simplex<R: Rng>(rng: &mut R, len: usize, sparsity: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len)
        .map(|_| {
            if rng.random::<f64>() < sparsity {
                0.0
            } else {
                -(1.0 - rng.random::<f64>()).ln()
            }
        })
        .collect();
    if v.iter().all(|x| *x == 0.0) {
        v[rng.random_range(0..len)] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Draws a random joint table within `limits`.
pub fn random_joint<R: Rng>(rng: &mut R, limits: &InstanceLimits) -> JointTable {
    loop {
        let contexts = rng.random_range(1..=limits.max_contexts);
        let n = rng.random_range(2..=limits.max_positions.max(2));
        let vocab: Vec<usize> = (0..n).map(|_| rng.random_range(2..=limits.max_vocab.max(2))).collect();
        let tokens: usize = vocab.iter().product();
        if contexts * tokens * tokens > limits.max_coupled_entries {
            continue;
        }
        let sparsity = [0.0, 0.2, 0.5][rng.random_range(0..3)];
        let probs = random_simplex(rng, contexts * tokens, sparsity);
        return JointTable::new(contexts, vocab, probs).expect("generated joint is valid");
    }
}

/// Draws a random channel `q(pred | c, m)`, mixed with the identity so that
/// predictions carry a random amount of information about the truth.
pub fn random_custom_coupling<R: Rng>(rng: &mut R, joint: &JointTable) -> PredictorCoupling {
    let tokens: usize = joint.vocab().iter().product();
    let mut dims = joint.table().dims().to_vec();
    dims.extend_from_slice(joint.vocab());
    let mut probs = vec![0.0; joint.table().probs().len() * tokens];
    for (row, &p) in joint.table().probs().iter().enumerate() {
        let lambda: f64 = rng.random();
        let mut q = random_simplex(rng, tokens, 0.3);
        q.iter_mut().for_each(|x| *x *= 1.0 - lambda);
        q[row % tokens] += lambda;
        for (pred, qv) in q.into_iter().enumerate() {
            probs[row * tokens + pred] = p * qv;
        }
    }
    PredictorCoupling::Custom(Table { dims, probs })
}

/// One verified random instance, as emitted by the `theory-check` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub seed: u64,
    pub coupling: CouplingKind,
    pub contexts: usize,
    pub vocab: Vec<usize>,
    pub ls: f64,
    pub lm: f64,
    pub gap: f64,
    pub mi_sum: f64,
    pub accuracy: Vec<(f64, f64)>,
    pub loss_holds: bool,
    pub identity_holds: bool,
    pub accuracy_holds: bool,
}

impl InstanceReport {
    pub fn all_hold(&self) -> bool {
        self.loss_holds && self.identity_holds && self.accuracy_holds
    }
}

pub fn check_instance(seed: u64, kind: CouplingKind, limits: &InstanceLimits) -> Result<InstanceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joint = random_joint(&mut rng, limits);
    let coupling = match kind {
        CouplingKind::TeacherForced => PredictorCoupling::TeacherForced,
        CouplingKind::Independent => PredictorCoupling::Independent,
        CouplingKind::Custom => random_custom_coupling(&mut rng, &joint),
    };
    let loss = verify_loss_inequality(&joint, &coupling)?;
    let acc = verify_accuracy_inequality(&joint, &coupling)?;
    Ok(InstanceReport {
        seed,
        coupling: kind,
        contexts: joint.contexts(),
        vocab: joint.vocab().to_vec(),
        ls: loss.single,
        lm: loss.multi,
        gap: loss.gap,
        mi_sum: loss.mi_sum,
        accuracy: acc.per_position,
        loss_holds: loss.holds,
        identity_holds: loss.identity_holds,
        accuracy_holds: acc.holds,
    })
}

/// Checks `instances` random joints, each under all three coupling kinds.
/// Instance `k` uses seed `base_seed + k`.
pub fn check_instances(
    instances: usize,
    base_seed: u64,
    limits: &InstanceLimits,
    exec: Execution,
) -> Result<Vec<InstanceReport>> {
    let nested = exec.map_range(instances, |k| {
        let seed = base_seed.wrapping_add(k as u64);
        CouplingKind::ALL
            .iter()
            .map(|&kind| check_instance(seed, kind, limits))
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(instances * 3);
    for r in nested {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn correlated_pair() -> JointTable {
        // m1 = m2, uniform over {0, 1}, single context.
        JointTable::new(1, vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap()
    }

    #[test]
    fn basic_measures() {
        assert_abs_diff_eq!(entropy(&[0.25; 4]).unwrap(), 4f64.ln(), epsilon = 1e-15);
        let p = [0.1, 0.2, 0.7];
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        let q = [0.3, 0.3, 0.4];
        let lhs = ce(&p, &q).unwrap();
        let rhs = kl(&p, &q).unwrap() + entropy(&p).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn support_violation_is_an_error() {
        assert!(matches!(kl(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::Support)));
        assert!(matches!(ce(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::Support)));
        // q may have extra support.
        assert!(kl(&[1.0, 0.0], &[0.5, 0.5]).is_ok());
    }

    #[test]
    fn invalid_tables_rejected() {
        assert!(JointTable::new(1, vec![2], vec![0.5, 0.6]).is_err());
        assert!(JointTable::new(1, vec![2], vec![-0.5, 1.5]).is_err());
        assert!(JointTable::new(1, vec![2], vec![1.0]).is_err());
        assert!(JointTable::new(1, vec![2; 21], vec![]).is_err());
    }

    #[test]
    fn single_step_examples() {
        let indep = JointTable::new(1, vec![2, 2], vec![0.25; 4]).unwrap();
        assert_abs_diff_eq!(single_step_min_loss(&indep), 2.0 * LN_2, epsilon = 1e-15);
        // Marginals of the correlated pair are still uniform.
        assert_abs_diff_eq!(single_step_min_loss(&correlated_pair()), 2.0 * LN_2, epsilon = 1e-15);
        // Tokens fixed by the context.
        let det = JointTable::new(2, vec![2, 2], vec![0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]).unwrap();
        assert_abs_diff_eq!(single_step_min_loss(&det), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn multi_step_examples() {
        let pair = correlated_pair();
        // Every position sees the other's (exact) prediction: both collapse.
        let all = multi_step_min_loss(&pair, &PredictorCoupling::TeacherForced).unwrap();
        assert_abs_diff_eq!(all, 0.0, epsilon = 1e-15);
        // Decoded in order: first position has nothing to condition on.
        let ordered =
            multi_step_min_loss_with(&pair, &PredictorCoupling::TeacherForced, &Visibility::Order(vec![0, 1])).unwrap();
        assert_abs_diff_eq!(ordered, LN_2, epsilon = 1e-15);
        let ind = multi_step_min_loss(&pair, &PredictorCoupling::Independent).unwrap();
        assert_abs_diff_eq!(ind, single_step_min_loss(&pair), epsilon = 1e-14);

        let indep = JointTable::new(1, vec![2, 2], vec![0.25; 4]).unwrap();
        let tf = multi_step_min_loss(&indep, &PredictorCoupling::TeacherForced).unwrap();
        assert_abs_diff_eq!(tf, single_step_min_loss(&indep), epsilon = 1e-14);
    }

    #[test]
    fn inequality_report_on_pair() {
        let pair = correlated_pair();
        let r = verify_loss_inequality(&pair, &PredictorCoupling::TeacherForced).unwrap();
        assert!(r.holds && r.identity_holds);
        assert_abs_diff_eq!(r.gap, 2.0 * LN_2, epsilon = 1e-14);
        let r = verify_loss_inequality(&pair, &PredictorCoupling::Independent).unwrap();
        assert_abs_diff_eq!(r.gap, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.mi_sum, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn accuracy_examples() {
        let pair = correlated_pair();
        let r = verify_accuracy_inequality(&pair, &PredictorCoupling::TeacherForced).unwrap();
        for (s, m) in &r.per_position {
            assert_abs_diff_eq!(*s, 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(*m, 1.0, epsilon = 1e-15);
        }
        let r = verify_accuracy_inequality(&pair, &PredictorCoupling::Independent).unwrap();
        for (s, m) in &r.per_position {
            assert_abs_diff_eq!(*s, *m, epsilon = 1e-12);
        }
        let det = JointTable::new(2, vec![2, 2], vec![0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]).unwrap();
        let r = verify_accuracy_inequality(&det, &PredictorCoupling::Independent).unwrap();
        for (s, m) in &r.per_position {
            assert_abs_diff_eq!(*s, 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(*m, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn custom_coupling_must_match_joint() {
        let pair = correlated_pair();
        let bad = Table::new(vec![1, 2, 2, 2, 2], {
            let mut v = vec![0.0; 16];
            v[0] = 1.0;
            v
        })
        .unwrap();
        assert!(matches!(
            coupled_table(&pair, &PredictorCoupling::Custom(bad)),
            Err(Error::InvalidCoupling(_))
        ));
        assert!(
            multi_step_min_loss_with(&pair, &PredictorCoupling::Independent, &Visibility::Order(vec![0, 0])).is_err()
        );
    }

    #[test]
    fn sweep_modes_agree() {
        let limits = InstanceLimits::default();
        let a = check_instances(40, 7, &limits, Execution::Sequential).unwrap();
        let b = check_instances(40, 7, &limits, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 120);
        assert!(a.iter().all(InstanceReport::all_hold));
    }
}
