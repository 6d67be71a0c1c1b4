//! Linear structural causal models used as data generators and as
//! ground-truth oracles: population moments, closed-form OLS, graph
//! reachability, and blanket computations.
//!
//! Convention: variables are indexed 0..=d with 0 the response Y and
//! 1..=d the predictors. The coefficient matrix is oriented so that
//! value = B · value + ε, i.e. `b[(i, j)] != 0` means an edge j → i.
//! Environment interventions are mean shifts (and optionally extra
//! variance) on the noise of the target predictors; for graph queries
//! the interventions are materialized as explicit source nodes.

use nalgebra::{DMatrix, DVector};
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::dataset::MultiEnvDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone)]
pub struct LinearSCM {
    /// (d+1)×(d+1): row i holds the structural coefficients of variable i
    pub b: DMatrix<f64>,
    /// noise variances, length d+1
    pub noise_var: DVector<f64>,
    /// predictor indices receiving environment shifts
    pub intervention_targets: Vec<usize>,
}

impl LinearSCM {
    pub fn new(
        b: DMatrix<f64>,
        noise_var: DVector<f64>,
        intervention_targets: Vec<usize>,
    ) -> Result<Self> {
        let n = b.nrows();
        if b.ncols() != n || noise_var.len() != n || n < 2 {
            return Err(Error::DimensionMismatch(format!(
                "coefficient matrix {}x{} vs {} noise variances",
                b.nrows(),
                b.ncols(),
                noise_var.len()
            )));
        }
        if noise_var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "noise variances must be positive and finite".to_string(),
            ));
        }
        let mut targets = intervention_targets;
        targets.sort_unstable();
        targets.dedup();
        if targets.iter().any(|&t| t == 0 || t >= n) {
            return Err(Error::InvalidArgument(
                "intervention targets must be predictor indices".to_string(),
            ));
        }
        let scm = LinearSCM {
            b,
            noise_var,
            intervention_targets: targets,
        };
        if scm.topological_order().is_none() {
            return Err(Error::InvalidArgument(
                "coefficient matrix induces a cycle".to_string(),
            ));
        }
        Ok(scm)
    }

    pub fn n_vars(&self) -> usize {
        self.b.nrows()
    }

    /// number of predictors
    pub fn d(&self) -> usize {
        self.n_vars() - 1
    }

    pub fn parents(&self, i: usize) -> Vec<usize> {
        (0..self.n_vars())
            .filter(|&j| j != i && self.b[(i, j)] != 0.0)
            .collect()
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.n_vars())
            .filter(|&j| j != i && self.b[(j, i)] != 0.0)
            .collect()
    }

    fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.n_vars();
        let mut indeg: Vec<usize> = (0..n).map(|i| self.parents(i).len()).collect();
        let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop() {
            order.push(i);
            for c in self.children(i) {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push(c);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// all descendants of `i`, not including `i`
    pub fn descendants(&self, i: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack = self.children(i);
        while let Some(c) = stack.pop() {
            if out.insert(c) {
                stack.extend(self.children(c));
            }
        }
        out
    }

    fn noise_mean(&self, env_shift: &[f64]) -> Result<DVector<f64>> {
        if env_shift.len() != self.intervention_targets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} shifts for {} intervention targets",
                env_shift.len(),
                self.intervention_targets.len()
            )));
        }
        if env_shift.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("shifts must be finite".to_string()));
        }
        let mut mean = DVector::zeros(self.n_vars());
        for (&t, &s) in self.intervention_targets.iter().zip(env_shift) {
            mean[t] = s;
        }
        Ok(mean)
    }

    fn mixing(&self) -> DMatrix<f64> {
        let id = DMatrix::identity(self.n_vars(), self.n_vars());
        (&id - &self.b)
            .lu()
            .try_inverse()
            .expect("Id - B is invertible for an acyclic model")
    }
}

/// Draw `n_per_env` rows per environment; environment e applies
/// `env_shifts[e]` (one shift per intervention target) to the target
/// noise means. Labels are `{label_prefix}{e}`.
pub fn sample_data(
    scm: &LinearSCM,
    env_shifts: &[Vec<f64>],
    n_per_env: usize,
    label_prefix: &str,
    rng_seed: u64,
) -> Result<MultiEnvDataset> {
    if env_shifts.is_empty() || n_per_env < 2 {
        return Err(Error::InvalidArgument(
            "need at least one environment and two rows per environment".to_string(),
        ));
    }
    let d = scm.d();
    let mix = scm.mixing();
    let sd: Vec<f64> = scm.noise_var.iter().map(|v| v.sqrt()).collect();

    let n_total = env_shifts.len() * n_per_env;
    let mut x = DMatrix::zeros(n_total, d);
    let mut y = DVector::zeros(n_total);
    let mut env = Vec::with_capacity(n_total);
    for (e, shift) in env_shifts.iter().enumerate() {
        let mean = scm.noise_mean(shift)?;
        let mut rng = rng_from_seed(derive_seed(rng_seed, e as u64));
        let label = format!("{label_prefix}{e}");
        for i in 0..n_per_env {
            let eps = DVector::from_fn(scm.n_vars(), |k, _| {
                let g: f64 = rand_distr::StandardNormal.sample(&mut rng);
                mean[k] + sd[k] * g
            });
            let value = &mix * eps;
            let row = e * n_per_env + i;
            y[row] = value[0];
            for j in 0..d {
                x[(row, j)] = value[j + 1];
            }
            env.push(label.clone());
        }
    }
    let names: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    MultiEnvDataset::new(x, y, env, Some(names))
}

/// Population mean and covariance of (Y, X) in one environment.
pub fn population_cov(scm: &LinearSCM, env_shift: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mix = scm.mixing();
    let mean = &mix * scm.noise_mean(env_shift)?;
    let d_mat = DMatrix::from_diagonal(&scm.noise_var);
    let cov = &mix * d_mat * mix.transpose();
    Ok((mean, cov))
}

/// Population OLS of Y on all predictors under an equal-probability
/// mixture of the given environments, from mixture second moments.
pub fn population_ols_direct(scm: &LinearSCM, env_shifts: &[Vec<f64>]) -> Result<DVector<f64>> {
    if env_shifts.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one environment".to_string(),
        ));
    }
    let n = scm.n_vars();
    let w = 1.0 / env_shifts.len() as f64;
    let mut second = DMatrix::zeros(n, n);
    let mut mean = DVector::zeros(n);
    for shift in env_shifts {
        let (mu, cov) = population_cov(scm, shift)?;
        second += (cov + &mu * mu.transpose()) * w;
        mean += mu * w;
    }
    let cov = second - &mean * mean.transpose();

    let d = scm.d();
    let cov_xx = cov.view((1, 1), (d, d)).into_owned();
    let cov_xy = cov.view((1, 0), (d, 1)).into_owned();
    cov_xx
        .lu()
        .solve(&cov_xy)
        .map(|b| DVector::from_column_slice(b.as_slice()))
        .ok_or_else(|| Error::InvalidArgument(
            "singular predictor covariance".to_string(),
        ))
}

/// Closed-form population OLS: β_PA plus a correction driven by the
/// children of Y. `intervention_var` (one entry per intervention
/// target) is folded into the target noise variances, which is how
/// random environment shifts enter the formula.
pub fn population_ols_closed_form(scm: &LinearSCM, intervention_var: &[f64]) -> Result<DVector<f64>> {
    if intervention_var.len() != scm.intervention_targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} variances for {} intervention targets",
            intervention_var.len(),
            scm.intervention_targets.len()
        )));
    }
    let d = scm.d();
    let beta_pa = DVector::from_fn(d, |j, _| scm.b[(0, j + 1)]);
    let beta_ch = DVector::from_fn(d, |j, _| scm.b[(j + 1, 0)]);
    let b_x = DMatrix::from_fn(d, d, |i, j| scm.b[(i + 1, j + 1)]);
    let var_y = scm.noise_var[0];

    let mut d_diag = DVector::from_fn(d, |j, _| scm.noise_var[j + 1]);
    for (&t, &v) in scm.intervention_targets.iter().zip(intervention_var) {
        d_diag[t - 1] += v;
    }
    let d_inv_ch = DVector::from_fn(d, |j, _| beta_ch[j] / d_diag[j]);
    let quad = beta_ch.dot(&d_inv_ch);
    let shrink = 1.0 - var_y * quad / (1.0 + var_y * quad);

    let front = (DMatrix::identity(d, d) - b_x).transpose() - &beta_pa * beta_ch.transpose();
    Ok(beta_pa + front * d_inv_ch * shrink * var_y)
}

/// Per-environment population regression of Y on a predictor subset.
pub fn population_regression(
    scm: &LinearSCM,
    env_shift: &[f64],
    subset: &[usize],
) -> Result<(f64, DVector<f64>)> {
    let (mu, cov) = population_cov(scm, env_shift)?;
    let k = subset.len();
    if k == 0 {
        return Ok((mu[0], DVector::zeros(0)));
    }
    let css = DMatrix::from_fn(k, k, |i, j| cov[(subset[i], subset[j])]);
    let csy = DVector::from_fn(k, |i, _| cov[(subset[i], 0)]);
    let beta = css.lu().solve(&csy).ok_or_else(|| Error::SingularDesign {
        subset: subset.to_vec(),
    })?;
    let intercept = mu[0] - (0..k).map(|i| beta[i] * mu[subset[i]]).sum::<f64>();
    Ok((intercept, beta))
}

// ---------------------------------------------------------------------
// graph queries

/// Plain DAG for separation queries, stored as parent lists.
#[derive(Debug, Clone)]
pub struct Dag {
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl Dag {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Dag {
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for &(from, to) in edges {
            parents[to].push(from);
            children[from].push(to);
        }
        Dag { parents, children }
    }

    pub fn n(&self) -> usize {
        self.parents.len()
    }

    /// Standard reachability ("Bayes ball"): true when every path
    /// between `a` and `b` is blocked by `cond`.
    pub fn d_separated(&self, a: usize, b: usize, cond: &[usize]) -> Result<bool> {
        if a == b || cond.contains(&a) || cond.contains(&b) {
            return Err(Error::InvalidArgument(
                "d-separation arguments must be disjoint".to_string(),
            ));
        }
        let in_cond: Vec<bool> = (0..self.n()).map(|i| cond.contains(&i)).collect();
        // ancestors of the conditioning set, conditioning set included
        let mut anc = in_cond.clone();
        let mut stack: Vec<usize> = cond.to_vec();
        while let Some(i) = stack.pop() {
            for &p in &self.parents[i] {
                if !anc[p] {
                    anc[p] = true;
                    stack.push(p);
                }
            }
        }

        // (node, arrived-from-child?) states
        let mut seen = vec![[false; 2]; self.n()];
        let mut stack = vec![(a, true)];
        while let Some((x, from_child)) = stack.pop() {
            if x == b {
                return Ok(false);
            }
            let dir = from_child as usize;
            if seen[x][dir] {
                continue;
            }
            seen[x][dir] = true;
            if from_child {
                if !in_cond[x] {
                    for &p in &self.parents[x] {
                        stack.push((p, true));
                    }
                    for &c in &self.children[x] {
                        stack.push((c, false));
                    }
                }
            } else {
                if !in_cond[x] {
                    for &c in &self.children[x] {
                        stack.push((c, false));
                    }
                }
                if anc[x] {
                    // collider on an active path
                    for &p in &self.parents[x] {
                        stack.push((p, true));
                    }
                }
            }
        }
        Ok(true)
    }
}

impl LinearSCM {
    /// The DAG with one extra source node per intervention target
    /// (node `d + 1 + t` points at target `t`). Returns the graph and
    /// the intervention node ids.
    pub fn graph_with_interventions(&self) -> (Dag, Vec<usize>) {
        let n = self.n_vars();
        let mut edges = Vec::new();
        for i in 0..n {
            for p in self.parents(i) {
                edges.push((p, i));
            }
        }
        let mut int_nodes = Vec::new();
        for (k, &t) in self.intervention_targets.iter().enumerate() {
            let node = n + k;
            edges.push((node, t));
            int_nodes.push(node);
        }
        (
            Dag::from_edges(n + self.intervention_targets.len(), &edges),
            int_nodes,
        )
    }
}

/// True when every intervention node is separated from Y given the
/// predictor subset `s`.
pub fn intervention_stable(scm: &LinearSCM, s: &[usize]) -> Result<bool> {
    let (dag, int_nodes) = scm.graph_with_interventions();
    for &node in &int_nodes {
        if !dag.d_separated(node, 0, s)? {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------
// blankets

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlanketTruth {
    pub pa: BTreeSet<usize>,
    pub mb: BTreeSet<usize>,
    pub sb: BTreeSet<usize>,
    pub nsb: BTreeSet<usize>,
    pub n_int: BTreeSet<usize>,
}

/// Ground-truth blankets of Y.
pub fn blankets(scm: &LinearSCM) -> BlanketTruth {
    let pa: BTreeSet<usize> = scm.parents(0).into_iter().collect();
    let ch: BTreeSet<usize> = scm.children(0).into_iter().collect();
    let mut mb = pa.clone();
    mb.extend(ch.iter().copied());
    for &c in &ch {
        mb.extend(scm.parents(c).into_iter().filter(|&p| p != 0));
    }

    // remove directly-intervened children of Y and their descendants
    let mut n_int: BTreeSet<usize> = (1..scm.n_vars()).collect();
    for &c in &ch {
        if scm.intervention_targets.contains(&c) {
            n_int.remove(&c);
            for dsc in scm.descendants(c) {
                n_int.remove(&dsc);
            }
        }
    }

    let mut sb = pa.clone();
    let kept_children: Vec<usize> = ch.iter().copied().filter(|c| n_int.contains(c)).collect();
    sb.extend(kept_children.iter().copied());
    for &c in &kept_children {
        sb.extend(
            scm.parents(c)
                .into_iter()
                .filter(|&p| p != 0 && n_int.contains(&p)),
        );
    }
    let nsb: BTreeSet<usize> = mb.difference(&sb).copied().collect();
    BlanketTruth {
        pa,
        mb,
        sb,
        nsb,
        n_int,
    }
}

/// Definitional stable blanket by exhaustive search: the smallest
/// subset S of N^int separating Y from every other member of N^int.
/// Exponential; intended as a cross-check oracle for small graphs.
pub fn stable_blanket_brute_force(scm: &LinearSCM) -> Result<BTreeSet<usize>> {
    let n_int: Vec<usize> = blankets(scm).n_int.into_iter().collect();
    if n_int.len() > 20 {
        return Err(Error::InvalidArgument(
            "brute-force stable blanket limited to 20 candidates".to_string(),
        ));
    }
    let (dag, _) = scm.graph_with_interventions();
    let mut subsets: Vec<Vec<usize>> = (0u32..1 << n_int.len())
        .map(|mask| {
            (0..n_int.len())
                .filter(|j| mask >> j & 1 == 1)
                .map(|j| n_int[j])
                .collect()
        })
        .collect();
    subsets.sort_by_key(|s| (s.len(), s.clone()));
    'outer: for s in subsets {
        for &j in &n_int {
            if s.contains(&j) {
                continue;
            }
            if !dag.d_separated(j, 0, &s)? {
                continue 'outer;
            }
        }
        return Ok(s.into_iter().collect());
    }
    unreachable!("the full candidate set always separates")
}

/// For each σ, evaluate the closed-form OLS with variance σ² on every
/// intervention target and report the largest |β_j| outside the stable
/// blanket.
pub fn strong_intervention_limit_check(
    scm: &LinearSCM,
    sigmas: &[f64],
) -> Result<Vec<(f64, DVector<f64>, f64)>> {
    let sb = blankets(scm).sb;
    let mut out = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let vars = vec![sigma * sigma; scm.intervention_targets.len()];
        let beta = population_ols_closed_form(scm, &vars)?;
        let max_outside = (0..scm.d())
            .filter(|j| !sb.contains(&(j + 1)))
            .map(|j| beta[j].abs())
            .fold(0.0_f64, f64::max);
        out.push((sigma, beta, max_outside));
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// serialization

pub const SCM_DOC_VERSION: &str = "stabreg-scm/1";

#[derive(Debug, Serialize, Deserialize)]
struct ScmDoc {
    d: usize,
    #[serde(rename = "B")]
    b: Vec<f64>,
    noise_var: Vec<f64>,
    targets: Vec<usize>,
    version: String,
}

impl LinearSCM {
    pub fn to_json(&self) -> String {
        let doc = ScmDoc {
            d: self.d(),
            b: self.b.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect(),
            noise_var: self.noise_var.iter().copied().collect(),
            targets: self.intervention_targets.clone(),
            version: SCM_DOC_VERSION.to_string(),
        };
        serde_json::to_string_pretty(&doc).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<LinearSCM> {
        let doc: ScmDoc = serde_json::from_str(text)?;
        if doc.version != SCM_DOC_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported format version {:?}",
                doc.version
            )));
        }
        let n = doc.d + 1;
        if doc.b.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "matrix has {} entries, expected {}",
                doc.b.len(),
                n * n
            )));
        }
        let b = DMatrix::from_row_slice(n, n, &doc.b);
        LinearSCM::new(b, DVector::from_vec(doc.noise_var), doc.targets)
    }
}

/// The two-predictor (case i) or three-predictor (case ii) toy model:
/// Y = X¹ + ε, X² = Y + I + ε, optionally X³ = Y + ε, unit weights and
/// unit noise variances, intervention on X².
pub fn example_toy_scm(with_third: bool) -> LinearSCM {
    let n = if with_third { 4 } else { 3 };
    let mut b = DMatrix::zeros(n, n);
    b[(0, 1)] = 1.0; // X¹ → Y
    b[(2, 0)] = 1.0; // Y → X²
    if with_third {
        b[(3, 0)] = 1.0; // Y → X³
    }
    LinearSCM::new(b, DVector::from_element(n, 1.0), vec![2]).expect("valid toy model")
}
