use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("element {element} is degenerate or inverted (rest volume {volume:e})")]
    DegenerateElement { element: usize, volume: f64 },
    #[error("element {element} references vertex {vertex} but the mesh has {n_vertices} vertices")]
    IndexOutOfRange { element: usize, vertex: usize, n_vertices: usize },
    #[error("mesh has no elements")]
    EmptyMesh,
    #[error("Poisson ratio {0} outside [0, 0.5)")]
    InvalidPoisson(f64),
    #[error("Young's modulus {value} of element {element} must be positive")]
    InvalidYoung { element: usize, value: f64 },
    #[error("non-positive Jacobian det(F) = {det:e}")]
    NonPositiveJacobian { det: f64 },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("proximal Newton did not converge after {iterations} iterations (residual {residual:e})")]
    ProxDiverged { iterations: usize, residual: f64 },
    #[error("filtered prox Hessian is singular (min eigenvalue {min_eigenvalue:e})")]
    SingularFilteredHessian { min_eigenvalue: f64 },
    #[error("contact system is singular")]
    SingularContactSystem,
    #[error("fixed-point iteration hit the cap of {iterations} iterations")]
    MaxIterations { iterations: usize },
    #[error("adjoint solve stalled at relative residual {residual:e} after {iterations} iterations")]
    AdjointDiverged { iterations: usize, residual: f64 },
    #[error("line search failed to decrease the objective")]
    LineSearchFailed,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
