//! Classification by best-fitting prototype, invariant-set localization,
//! cycle error and evaluation sweeps.

mod localize;
pub(crate) mod sweep;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{Behavior, Prototype, SampleSet};
use crate::error::{Result, SpeError};
use crate::rng::derive_seed;
use crate::train::{fit, FitResult, LossConfig, OptimConfig};

pub use localize::{
    cycle_error, cycle_error_with, localize, localize_with, CycleError, InvariantSetEstimate, SetKind, DEFAULT_CYCLE_POINTS,
};
pub use sweep::{
    eval_sweep, instances_csv, random_instances, InstanceRecord, InstanceStatus, SweepOptions, SweepReport, SystemAccuracy,
};

/// Candidate prototypes, all of the same dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Prototype>", into = "Vec<Prototype>")]
pub struct PrototypeSet {
    protos: Vec<Prototype>,
}

impl TryFrom<Vec<Prototype>> for PrototypeSet {
    type Error = SpeError;

    fn try_from(v: Vec<Prototype>) -> Result<Self> {
        PrototypeSet::new(v)
    }
}

impl From<PrototypeSet> for Vec<Prototype> {
    fn from(p: PrototypeSet) -> Self {
        p.protos
    }
}

/// `(a, omega)` of the four standard prototypes: cycle and node, each in
/// both orientations.
pub const STANDARD_PARAMS: [(f64, f64); 4] = [(0.25, 0.5), (0.25, -0.5), (-0.25, 0.5), (-0.25, -0.5)];

impl PrototypeSet {
    pub fn new(protos: Vec<Prototype>) -> Result<Self> {
        let first = protos
            .first()
            .ok_or_else(|| SpeError::InvalidConfig("prototype set is empty".into()))?;
        for p in &protos {
            p.validate()?;
            if p.dim != first.dim {
                return Err(SpeError::DimensionMismatch {
                    expected: first.dim,
                    got: p.dim,
                });
            }
        }
        Ok(PrototypeSet { protos })
    }

    /// The four planar prototypes.
    pub fn standard() -> Self {
        Self::for_dim(2)
    }

    /// The four standard prototypes lifted to `dim` dimensions, with the
    /// extra coordinates decaying at rate 1/2.
    pub fn for_dim(dim: usize) -> Self {
        let protos = STANDARD_PARAMS
            .iter()
            .map(|&(a, omega)| Prototype { a, omega, dim, tau: 0.5 })
            .collect();
        PrototypeSet { protos }
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.protos
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.protos[0].dim
    }
}

/// Outcome of fitting every prototype to one sample set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Classification {
    pub prototypes: Vec<Prototype>,
    /// Final equivalence loss per prototype; `+inf` (written as `null`) for
    /// fits that failed.
    #[serde(with = "losses_serde")]
    pub losses: Vec<f64>,
    pub winner: usize,
    pub label: Behavior,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub fits: Vec<Option<FitResult>>,
}

impl Classification {
    pub fn winning_fit(&self) -> Option<&FitResult> {
        self.fits[self.winner].as_ref()
    }

    /// Lowest-loss fit among the cycle prototypes, if any succeeded.
    pub fn best_cycle_fit(&self) -> Option<&FitResult> {
        let best = (0..self.prototypes.len())
            .filter(|&i| self.prototypes[i].is_cycle() && self.fits[i].is_some())
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if self.losses[b] <= self.losses[i] => Some(b),
                _ => Some(i),
            })?;
        self.fits[best].as_ref()
    }

    /// Number of prototypes whose fit failed.
    pub fn failed_fits(&self) -> usize {
        self.fits.iter().filter(|f| f.is_none()).count()
    }
}

mod losses_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opt: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(opt.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// Index of the smallest loss; ties go to the lowest index.
pub fn argmin(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    best
}

/// Fits every prototype and picks the one with the smallest final
/// equivalence loss.
///
/// Prototype `k` is fitted with seed `derive_seed(opt_cfg.seed, k)`. A fit
/// that fails numerically scores `+inf` and leaves a warning; configuration
/// errors are returned.
pub fn classify(samples: &SampleSet, protos: &PrototypeSet, loss_cfg: &LossConfig, opt_cfg: &OptimConfig) -> Result<Classification> {
    if samples.dim() != protos.dim() {
        return Err(SpeError::DimensionMismatch {
            expected: protos.dim(),
            got: samples.dim(),
        });
    }
    loss_cfg.validate()?;
    opt_cfg.validate()?;
    let outcomes: Vec<Result<FitResult>> = protos
        .prototypes()
        .par_iter()
        .enumerate()
        .map(|(k, proto)| {
            let opt = OptimConfig {
                seed: derive_seed(opt_cfg.seed, k as u64),
                ..opt_cfg.clone()
            };
            fit(samples, proto, loss_cfg, &opt)
        })
        .collect();
    let mut losses = Vec::with_capacity(outcomes.len());
    let mut fits = Vec::with_capacity(outcomes.len());
    let mut warnings = Vec::new();
    for (k, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => {
                let l = if r.final_equiv_loss.is_finite() { r.final_equiv_loss } else { f64::INFINITY };
                losses.push(l);
                fits.push(Some(r));
            }
            Err(e @ (SpeError::InvalidConfig(_) | SpeError::DimensionMismatch { .. })) => return Err(e),
            Err(e) => {
                let msg = format!("prototype {k}: {e}");
                log::warn!("{msg}");
                warnings.push(msg);
                losses.push(f64::INFINITY);
                fits.push(None);
            }
        }
    }
    let winner = argmin(&losses);
    let label = if protos.prototypes()[winner].is_cycle() { Behavior::Cycle } else { Behavior::Node };
    Ok(Classification {
        prototypes: protos.prototypes().to_vec(),
        losses,
        winner,
        label,
        warnings,
        fits,
    })
}
