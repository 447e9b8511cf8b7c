use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty geometry")]
    EmptyGeometry,
    #[error("shape has zero interior at the requested spacing")]
    ZeroInterior,
    #[error("singular contrast: relative permittivity is zero")]
    SingularContrast,
    #[error("coincident points: the self term is handled separately")]
    CoincidentPoints,
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("level {level} out of range (tree depth {depth})")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite entries encountered")]
    NonFinite,
    #[error("direction/polarization must be orthogonal unit vectors")]
    BadIncidence,
    #[error("singular diagonal block at leaf {node}")]
    SingularDiagonal { node: usize },
    #[error("singular Schur complement at recursion depth {depth}")]
    SingularSchur { depth: usize },
    #[error("reconstruction tolerance unreachable: achieved {achieved:.3e}, requested {requested:.3e}")]
    ReconstructionTolerance { achieved: f64, requested: f64 },
    #[error("operator role mismatch: expected {expected}")]
    RoleMismatch { expected: &'static str },
    #[error("dense path cap exceeded: N = {n} > {cap}")]
    DenseCapExceeded { n: usize, cap: usize },
    #[error("singular matrix to working precision")]
    SingularMatrix,
    #[error("reference vector has zero maximum")]
    ZeroReference,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("factorization tolerance must satisfy chi_fact >= chi_con ({fact:.3e} < {con:.3e})")]
    ToleranceOrder { fact: f64, con: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("deserialization: {0}")]
    Format(String),
    #[error(transparent)]
    Linalg(#[from] ndarray_linalg::error::LinalgError),
}
