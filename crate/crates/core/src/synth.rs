//! Synthetic natural-logic representations with planted feature subspaces.
//!
//! Each example samples a context monotonicity (2 classes) and a lexical
//! relation (3 classes) independently. Its representation is the sum, over
//! `redundancy` disjoint blocks, of a one-hot code of each feature written in
//! that block's planted orthonormal directions, plus optional label-free
//! nuisance components and isotropic Gaussian noise.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{extend_basis, AccumulatedBasis, RepresentationMatrix};
use crate::probe::LabelVector;

const MONOTONICITY_CODES: usize = 2;
const RELATION_CODES: usize = 3;
const BLOCK: usize = MONOTONICITY_CODES + RELATION_CODES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Monotonicity {
    Up = 0,
    Down = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    Hypernym = 0,
    Hyponym = 1,
    Unrelated = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Entailment {
    Entail = 0,
    NonEntail = 1,
}

impl Monotonicity {
    pub const ALL: [Monotonicity; 2] = [Monotonicity::Up, Monotonicity::Down];

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Hypernym, Relation::Hyponym, Relation::Unrelated];

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }
}

/// Upward contexts license replacement by a hypernym, downward contexts by a
/// hyponym; every other combination is non-entailing.
pub fn entailment_label(monotonicity: Monotonicity, relation: Relation) -> Entailment {
    match (monotonicity, relation) {
        (Monotonicity::Up, Relation::Hypernym) | (Monotonicity::Down, Relation::Hyponym) => {
            Entailment::Entail
        }
        _ => Entailment::NonEntail,
    }
}

/// Which label an experiment probes for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feature {
    Monotonicity,
    Relation,
    Composite,
    Entailment,
}

impl Feature {
    pub const ALL: [Feature; 4] = [
        Feature::Monotonicity,
        Feature::Relation,
        Feature::Composite,
        Feature::Entailment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Feature::Monotonicity => "monotonicity",
            Feature::Relation => "relation",
            Feature::Composite => "composite",
            Feature::Entailment => "entailment",
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            Feature::Monotonicity => 2,
            Feature::Relation => 3,
            Feature::Composite => 6,
            Feature::Entailment => 2,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Feature::Monotonicity => &["up", "down"],
            Feature::Relation => &["hypernym", "hyponym", "unrelated"],
            Feature::Composite => &[
                "up-hypernym",
                "up-hyponym",
                "up-unrelated",
                "down-hypernym",
                "down-hyponym",
                "down-unrelated",
            ],
            Feature::Entailment => &["entail", "non-entail"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown feature `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NliExample {
    pub monotonicity: Monotonicity,
    pub relation: Relation,
}

impl NliExample {
    /// `monotonicity * 3 + relation`.
    pub fn composite_id(self) -> usize {
        self.monotonicity as usize * RELATION_CODES + self.relation as usize
    }

    pub fn entailment(self) -> Entailment {
        entailment_label(self.monotonicity, self.relation)
    }

    pub fn class_id(self, feature: Feature) -> usize {
        match feature {
            Feature::Monotonicity => self.monotonicity as usize,
            Feature::Relation => self.relation as usize,
            Feature::Composite => self.composite_id(),
            Feature::Entailment => self.entailment() as usize,
        }
    }
}

/// Per-example natural-logic labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaturalLogicLabels {
    pub examples: Vec<NliExample>,
}

impl NaturalLogicLabels {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self, feature: Feature) -> LabelVector {
        let values = self.examples.iter().map(|e| e.class_id(feature)).collect();
        LabelVector::new(values, feature.class_count())
            .and_then(|y| y.with_names(feature.class_names()))
            .expect("class ids are in range by construction")
    }
}

/// Builds the composite label from separate monotonicity and relation labels.
pub fn composite_from(monotonicity: &LabelVector, relation: &LabelVector) -> Result<LabelVector> {
    if monotonicity.len() != relation.len() {
        return Err(Error::dims("composite label", monotonicity.len(), relation.len()));
    }
    if monotonicity.class_count() != MONOTONICITY_CODES || relation.class_count() != RELATION_CODES {
        return Err(Error::input("composite needs 2-class monotonicity and 3-class relation labels"));
    }
    let values = monotonicity
        .values()
        .iter()
        .zip(relation.values())
        .map(|(&m, &r)| m * RELATION_CODES + r)
        .collect();
    LabelVector::new(values, Feature::Composite.class_count())?.with_names(Feature::Composite.class_names())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    pub dim: usize,
    /// Number of disjoint planted copies of each feature code.
    pub redundancy: usize,
    pub noise_sigma: f64,
    pub nuisance_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_examples: 2000,
            dim: 64,
            redundancy: 1,
            noise_sigma: 0.05,
            nuisance_dim: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(Error::input("n_examples must be positive"));
        }
        if self.redundancy == 0 {
            return Err(Error::input("redundancy must be at least 1"));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::input("noise_sigma must be a finite non-negative number"));
        }
        let needed = self.planted_count();
        if needed > self.dim {
            return Err(Error::input(format!(
                "redundancy {} x 5 + nuisance_dim {} = {needed} exceeds dim {}",
                self.redundancy, self.nuisance_dim, self.dim
            )));
        }
        Ok(())
    }

    fn planted_count(&self) -> usize {
        self.redundancy * BLOCK + self.nuisance_dim
    }
}

/// Orthonormal planted directions: `redundancy` blocks of 5 (2 monotonicity,
/// 3 relation) followed by the nuisance directions.
fn planted_directions(spec: &SyntheticSpec) -> Result<AccumulatedBasis> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let candidates: Vec<Array1<f64>> = (0..spec.planted_count())
        .map(|_| (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let basis = extend_basis(&AccumulatedBasis::empty(spec.dim), &candidates)?;
    if basis.len() != spec.planted_count() {
        return Err(Error::input("planted directions are numerically dependent; change the seed"));
    }
    Ok(basis)
}

/// Draws a dataset. Deterministic in `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<(RepresentationMatrix, NaturalLogicLabels)> {
    spec.validate()?;
    let planted = planted_directions(spec)?;
    let dirs = planted.directions();
    let nuisance_start = spec.redundancy * BLOCK;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut data = Array2::<f64>::zeros((spec.n_examples, spec.dim));
    let mut examples = Vec::with_capacity(spec.n_examples);
    for mut row in data.outer_iter_mut() {
        let m = rng.random_range(0..MONOTONICITY_CODES);
        let r = rng.random_range(0..RELATION_CODES);
        for block in 0..spec.redundancy {
            row += &dirs.row(block * BLOCK + m);
            row += &dirs.row(block * BLOCK + MONOTONICITY_CODES + r);
        }
        for j in 0..spec.nuisance_dim {
            let z: f64 = rng.sample(StandardNormal);
            row.scaled_add(z, &dirs.row(nuisance_start + j));
        }
        if spec.noise_sigma > 0.0 {
            for v in row.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += spec.noise_sigma * e;
            }
        }
        examples.push(NliExample {
            monotonicity: Monotonicity::from_id(m).expect("in range"),
            relation: Relation::from_id(r).expect("in range"),
        });
    }
    Ok((RepresentationMatrix::new(data)?, NaturalLogicLabels { examples }))
}

/// Exact orthonormal basis of the planted code directions for `feature`
/// across all blocks, one step per block. `Composite` yields both codes.
pub fn planted_subspace(spec: &SyntheticSpec, feature: Feature) -> Result<AccumulatedBasis> {
    spec.validate()?;
    let offsets: Vec<usize> = match feature {
        Feature::Monotonicity => (0..MONOTONICITY_CODES).collect(),
        Feature::Relation => (MONOTONICITY_CODES..BLOCK).collect(),
        Feature::Composite => (0..BLOCK).collect(),
        Feature::Entailment => {
            return Err(Error::input("entailment has no planted code of its own"));
        }
    };
    let planted = planted_directions(spec)?;
    let mut basis = AccumulatedBasis::empty(spec.dim);
    for block in 0..spec.redundancy {
        let group: Vec<Array1<f64>> = offsets
            .iter()
            .map(|o| planted.direction(block * BLOCK + o).to_owned())
            .collect();
        basis = extend_basis(&basis, &group)?;
    }
    Ok(basis)
}
