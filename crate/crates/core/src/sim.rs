//! Synthetic benchmark generators: two families of random linear SCMs
//! (a small dense design and a large sparse one) plus the two-variable
//! toy model, each yielding train/test datasets with ground-truth
//! blankets.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiEnvDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::scm::{blankets, example_toy_scm, sample_data, BlanketTruth, LinearSCM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    Sim1,
    Sim2,
    Toy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimDesign {
    pub kind: SimKind,
    /// number of predictors
    pub d: usize,
    pub n_per_env: usize,
    pub n_train_env: usize,
    pub n_test_env: usize,
    /// half-width of the uniform train/test shift distributions
    pub train_shift: f64,
    pub test_shift: f64,
    pub noise_var: f64,
    /// edge magnitudes are uniform on ±[lo, hi]
    pub edge_weight: (f64, f64),
    /// small design: number of intervention targets and parent cap
    pub n_intervened: usize,
    pub max_parents: usize,
    /// large design: per-child intervention probability (edge
    /// probability is 2/(d-1))
    pub child_intervention_prob: f64,
}

impl SimDesign {
    pub fn sim1() -> SimDesign {
        SimDesign {
            kind: SimKind::Sim1,
            d: 10,
            n_per_env: 250,
            n_train_env: 5,
            n_test_env: 10,
            train_shift: 1.0,
            test_shift: 10.0,
            noise_var: 0.25,
            edge_weight: (0.5, 1.5),
            n_intervened: 4,
            max_parents: 4,
            child_intervention_prob: 0.0,
        }
    }

    /// `d` predictors with expected edge count ≈ d + 1; the headline
    /// size is d = 1000, the default here is desk-scale
    pub fn sim2(d: usize) -> SimDesign {
        SimDesign {
            kind: SimKind::Sim2,
            d,
            n_per_env: 100,
            n_train_env: 5,
            n_test_env: 10,
            train_shift: 1.0,
            test_shift: 10.0,
            noise_var: 0.25,
            edge_weight: (0.5, 1.5),
            n_intervened: 0,
            max_parents: 0,
            child_intervention_prob: 0.9,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d < 2
            || self.n_per_env < 2
            || self.n_train_env < 1
            || self.n_test_env < 1
            || !(self.noise_var > 0.0)
            || !(0.0 < self.edge_weight.0 && self.edge_weight.0 <= self.edge_weight.1)
            || !(0.0..=1.0).contains(&self.child_intervention_prob)
            || self.train_shift < 0.0
            || self.test_shift < 0.0
        {
            return Err(Error::InvalidArgument(format!("bad design: {self:?}")));
        }
        Ok(())
    }
}

pub struct SimOutput {
    pub train: MultiEnvDataset,
    pub test: MultiEnvDataset,
    pub truth: BlanketTruth,
    pub scm: LinearSCM,
}

fn draw_weight(rng: &mut Rng, range: (f64, f64)) -> f64 {
    let mag = rng.random_range(range.0..range.1);
    if rng.random_range(0.0..1.0_f64) < 0.5 {
        -mag
    } else {
        mag
    }
}

fn draw_shifts(rng: &mut Rng, n_env: usize, n_targets: usize, width: f64) -> Vec<Vec<f64>> {
    (0..n_env)
        .map(|_| {
            (0..n_targets)
                .map(|_| rng.random_range(-width..width))
                .collect()
        })
        .collect()
}

fn finish(scm: LinearSCM, design: &SimDesign, rng: &mut Rng, rng_seed: u64) -> Result<SimOutput> {
    let n_targets = scm.intervention_targets.len();
    let train_shifts = draw_shifts(rng, design.n_train_env, n_targets, design.train_shift);
    let test_shifts = draw_shifts(rng, design.n_test_env, n_targets, design.test_shift);
    let train = sample_data(
        &scm,
        &train_shifts,
        design.n_per_env,
        "train_",
        derive_seed(rng_seed, 1),
    )?;
    let test = sample_data(
        &scm,
        &test_shifts,
        design.n_per_env,
        "test_",
        derive_seed(rng_seed, 2),
    )?;
    let truth = blankets(&scm);
    Ok(SimOutput {
        train,
        test,
        truth,
        scm,
    })
}

/// Small dense family: a random causal ordering over d+1 variables, at
/// most `max_parents` parents drawn from earlier variables, a random
/// response position, and `n_intervened` shifted predictors.
pub fn gen_sim1(design: &SimDesign, rng_seed: u64) -> Result<SimOutput> {
    design.validate()?;
    let n = design.d + 1;
    let mut rng = rng_from_seed(derive_seed(rng_seed, 0));

    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    let mut b = DMatrix::zeros(n, n);
    for pos in 1..n {
        let node = order[pos];
        let n_parents = rng.random_range(0..=design.max_parents.min(pos));
        let chosen = rand::seq::index::sample(&mut rng, pos, n_parents);
        for parent_pos in chosen {
            b[(node, order[parent_pos])] = draw_weight(&mut rng, design.edge_weight);
        }
    }
    // variable 0 is the response by construction of the convention; the
    // random "response position" is realized by the random ordering
    let mut targets: Vec<usize> =
        rand::seq::index::sample(&mut rng, design.d, design.n_intervened.min(design.d))
            .into_iter()
            .map(|j| j + 1)
            .collect();
    targets.sort_unstable();

    let scm = LinearSCM::new(b, DVector::from_element(n, design.noise_var), targets)?;
    finish(scm, design, &mut rng, rng_seed)
}

/// Large sparse family: the response is first in the causal order,
/// every forward pair gets an edge with probability 2/(d-1), and each
/// child of the response is intervened independently.
pub fn gen_sim2(design: &SimDesign, rng_seed: u64) -> Result<SimOutput> {
    design.validate()?;
    let n = design.d + 1;
    let p_edge = 2.0 / (design.d - 1) as f64;
    let mut rng = rng_from_seed(derive_seed(rng_seed, 0));

    // causal order: response first, then a random predictor permutation
    let mut rest: Vec<usize> = (1..n).collect();
    rand::seq::SliceRandom::shuffle(&mut rest[..], &mut rng);
    let mut order = vec![0];
    order.extend(rest);

    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_range(0.0..1.0) < p_edge {
                b[(order[j], order[i])] = draw_weight(&mut rng, design.edge_weight);
            }
        }
    }
    let targets: Vec<usize> = (1..n)
        .filter(|&c| {
            b[(c, 0)] != 0.0 && rng.random_range(0.0..1.0) < design.child_intervention_prob
        })
        .collect();

    let scm = LinearSCM::new(b, DVector::from_element(n, design.noise_var), targets)?;
    finish(scm, design, &mut rng, rng_seed)
}

/// The toy model: case (i) exposes (X¹, X²), case (ii) adds the
/// non-intervened child X³. `shifts` gives the per-environment
/// intervention constant; test environments reuse the same constants
/// scaled by 5.
pub fn gen_toy(
    with_third: bool,
    shifts: &[f64],
    n_per_env: usize,
    rng_seed: u64,
) -> Result<SimOutput> {
    if shifts.is_empty() || n_per_env < 2 {
        return Err(Error::InvalidArgument(
            "need shifts and at least two rows per environment".to_string(),
        ));
    }
    let scm = example_toy_scm(with_third);
    let train_shifts: Vec<Vec<f64>> = shifts.iter().map(|&c| vec![c]).collect();
    let test_shifts: Vec<Vec<f64>> = shifts.iter().map(|&c| vec![5.0 * c]).collect();
    let train = sample_data(&scm, &train_shifts, n_per_env, "train_", derive_seed(rng_seed, 1))?;
    let test = sample_data(&scm, &test_shifts, n_per_env, "test_", derive_seed(rng_seed, 2))?;
    let truth = blankets(&scm);
    Ok(SimOutput {
        train,
        test,
        truth,
        scm,
    })
}
