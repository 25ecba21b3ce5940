use std::fmt;

use thiserror::Error;

use crate::fibering::KamTrace;

/// Named analytic hypotheses that an operation can refuse on.
///
/// Every refusal carries one of these so that callers (and the CLI) can
/// report exactly which inequality failed. The short tag is the label the
/// bound is known by in the accompanying documentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bound {
    /// `‖h‖_r ≤ ε r³` on the non-normal part of a fibering phase.
    Smallh,
    /// `B_r ≤ 1/2` for a single fibering step (`≤ 1/4` at the start of a run).
    P4,
    /// `b_r ≤ r²δ²/(2 n c₂)` for a single fibering step.
    B,
    /// `‖p‖_{r₁} ≤ r₁ δ` for flows.
    Z1,
    /// `‖f‖_r ≤ r/(4n)` for inverting a near-identity map.
    Nf,
    /// `‖b‖_r ≤ r/(32 n π)` for volume normalization.
    Na,
    /// Smallness of a realization step.
    F4,
    /// Vanishing of the obstruction coefficient `a_{−1,…,−1}`.
    Kn,
    /// Zero average along the integration axis, `[h]_j = 0`.
    I2,
    /// `‖a‖_{r₀} ≤ ε r₀` for the realization iteration.
    FormSmall,
    /// `|a| < 1/2` on the grid so the principal logarithm is usable.
    Branch,
    /// `|[e^{i(θ₁+k)}]|` small enough for `g` to be single valued.
    Exactness,
    /// `1 + k′ > 0`, or more generally a nonvanishing phase derivative.
    NonCritical,
    /// `|f′| > 0` on the grid.
    Immersion,
    /// A non-critical curve with Gauss degree `±1`.
    Embedding,
    /// Gauss degrees of the two curves agree.
    DegreeMatch,
    /// Gauss degree is nonzero.
    DegreeNonzero,
    /// `0 < r < 1`.
    StripWidth,
    /// `0 < δ < δ_max`.
    DeltaRange,
    /// `|t| ≤ 1` for flows, `0 ≤ t ≤ 1` for homotopies.
    TimeRange,
    /// Requested output degree is at least the input degree.
    GridDegree,
    /// `n ≥ 2` for the torus normal form.
    DimensionTwo,
    /// `det Dφ ≠ 0` on the verification grid.
    TotallyReal,
    /// `det` of the integer part is `±1`.
    Unimodular,
    /// The density `1 + b` stays positive on the real grid.
    PositiveDensity,
    /// A stage residual stayed below its tolerance.
    StageResidual,
}

impl Bound {
    pub fn tag(&self) -> &'static str {
        match self {
            Bound::Smallh => "(smallh)",
            Bound::P4 => "(p4)",
            Bound::B => "(b)",
            Bound::Z1 => "(z1)",
            Bound::Nf => "(nf)",
            Bound::Na => "(na)",
            Bound::F4 => "(f4)",
            Bound::Kn => "(kn)",
            Bound::I2 => "(i2)",
            Bound::FormSmall => "(form-small)",
            Bound::Branch => "(branch)",
            Bound::Exactness => "(exact)",
            Bound::NonCritical => "(non-critical)",
            Bound::Immersion => "(immersion)",
            Bound::Embedding => "(embedding)",
            Bound::DegreeMatch => "(degree-match)",
            Bound::DegreeNonzero => "(degree-nonzero)",
            Bound::StripWidth => "(strip)",
            Bound::DeltaRange => "(delta)",
            Bound::TimeRange => "(time)",
            Bound::GridDegree => "(grid)",
            Bound::DimensionTwo => "(n>=2)",
            Bound::TotallyReal => "(totally-real)",
            Bound::Unimodular => "(unimodular)",
            Bound::PositiveDensity => "(density)",
            Bound::StageResidual => "(stage-residual)",
        }
    }

    pub fn statement(&self) -> &'static str {
        match self {
            Bound::Smallh => "‖h − L₀h − L₁h‖_r ≤ ε r³",
            Bound::P4 => "B_r = max{|L₀h|, ‖D₁L₁h‖_r} ≤ 1/2",
            Bound::B => "b_r ≤ r²δ²/(2 n c₂)",
            Bound::Z1 => "‖p‖_{r₁} ≤ r₁ δ",
            Bound::Nf => "‖f‖_r ≤ r/(4n)",
            Bound::Na => "‖b‖_r ≤ r/(32 n π)",
            Bound::F4 => "‖p‖_r ≤ r δ for the conjugated field of a",
            Bound::Kn => "a_{−1,…,−1} = 0",
            Bound::I2 => "[h]_j = 0",
            Bound::FormSmall => "‖a‖_{r₀} ≤ ε r₀",
            Bound::Branch => "|a| < 1/2 on the grid",
            Bound::Exactness => "|[e^{i(θ₁+k)}]| ≤ tol",
            Bound::NonCritical => "phase derivative nonvanishing",
            Bound::Immersion => "|f′| > 0",
            Bound::Embedding => "non-critical with d = ±1",
            Bound::DegreeMatch => "d_{f₀} = d_{f₁}",
            Bound::DegreeNonzero => "d ≠ 0",
            Bound::StripWidth => "0 < r < 1",
            Bound::DeltaRange => "0 < δ < δ_max",
            Bound::TimeRange => "t in the admissible interval",
            Bound::GridDegree => "output degree ≥ input degree",
            Bound::DimensionTwo => "n ≥ 2",
            Bound::TotallyReal => "det Dφ ≠ 0",
            Bound::Unimodular => "det D = ±1",
            Bound::PositiveDensity => "1 + b > 0",
            Bound::StageResidual => "stage residual below tolerance",
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.tag(), self.statement())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("hypothesis {bound} violated: {detail}")]
    Hypothesis { bound: Bound, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{stage} did not converge: {detail}")]
    Diverged {
        stage: &'static str,
        detail: String,
        trace: Option<Box<KamTrace>>,
    },

    #[error("numerical failure in {stage}: {detail}")]
    Numerical { stage: &'static str, detail: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn hypothesis(bound: Bound, detail: impl Into<String>) -> Self {
        Error::Hypothesis {
            bound,
            detail: detail.into(),
        }
    }

    pub(crate) fn numerical(stage: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            stage,
            detail: detail.into(),
        }
    }

    /// The refused bound, when this error is a hypothesis refusal.
    pub fn bound(&self) -> Option<Bound> {
        match self {
            Error::Hypothesis { bound, .. } => Some(*bound),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

pub(crate) fn check_strip(r: f64) -> Result<()> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(Error::hypothesis(Bound::StripWidth, format!("r = {r}")))
    }
}
