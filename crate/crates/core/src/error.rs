use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("facet {0} lies on the outer boundary and has no patch")]
    NoPatch(usize),

    #[error("degenerate triangle (signed area {0:e})")]
    DegenerateTriangle(f64),

    #[error("level set does not change sign on the element")]
    NoSignChange,

    #[error("geometry under-resolved: {0}")]
    GeometryUnderResolved(String),

    #[error("rigid body leaves the background domain (clearance {clearance:.3e})")]
    BodyLeftDomain { clearance: f64 },

    #[error("extension strip disconnected: strip element {element} is {distance:?} facet crossings from an uncut element (limit {limit})")]
    StripDisconnected {
        element: usize,
        distance: Option<usize>,
        limit: usize,
    },

    #[error("empty active element set")]
    EmptyActiveSet,

    #[error("empty interface element set (no body in the domain)")]
    EmptyInterface,

    #[error("extension strip too thin: background dof {dof} of cut element {element} was inactive at the previous step")]
    StripTooThin { dof: usize, element: usize },

    #[error("cut elements at the new step are not contained in the previous active mesh ({missing} elements missing)")]
    DomainInclusion { missing: usize },

    #[error("missing cut rule for element {0}")]
    MissingCutRule(usize),

    #[error("saddle system singular: {0}")]
    Singular(String),

    #[error("solve residual {residual:.3e} exceeds tolerance {tolerance:.1e}")]
    SolveResidual { residual: f64, tolerance: f64 },

    #[error("coupling diverged: no convergence after {iterations} iterations (last update {update:.3e})")]
    CouplingDiverged { iterations: usize, update: f64 },

    #[error("ALE mesh tangling: min Jacobian determinant {min_det:.3e} at displacement |d| = {displacement:.4}")]
    MeshTangling { min_det: f64, displacement: f64 },

    #[error("trajectory horizons do not match: {0}")]
    HorizonMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
