use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate triangle {triangle}: repeated vertex index {vertex}")]
    DegenerateTriangle { triangle: usize, vertex: usize },

    #[error("triangle {triangle} references vertex {index} but the mesh has {count} vertices")]
    TriangleIndex { triangle: usize, index: usize, count: usize },

    #[error("motion has {motion} joint transforms, skeleton has {skeleton} joints")]
    JointCountMismatch { motion: usize, skeleton: usize },

    #[error("skeleton has no root joint")]
    MissingRoot,

    #[error("expected a {expected} map, got {got}")]
    WrongKind { expected: &'static str, got: String },

    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("resolution mismatch: {0} vs {1}")]
    ResolutionMismatch(usize, usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("UV chart covers no texel")]
    EmptyChart,

    #[error("zero-length canonical edge ({0}, {1})")]
    ZeroLengthEdge(usize, usize),

    #[error("vertex {0} has no neighbors")]
    IsolatedVertex(usize),

    #[error("vertex {0} has a zero-area star, its normal is undefined")]
    ZeroAreaStar(usize),

    #[error("empty point cloud")]
    EmptyPointCloud,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("invalid quaternion at texel {texel} (norm {norm})")]
    InvalidQuaternion { texel: usize, norm: f64 },

    #[error("spherical harmonics: expected {expected} coefficients, got {got}")]
    ShDegreeMismatch { expected: usize, got: usize },

    #[error("image of {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall { width: usize, height: usize, window: usize },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
