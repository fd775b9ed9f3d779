use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] numkit::NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid edit: {0}")]
    Edit(String),
    #[error("cannot place {requested} objects on a {width}x{height} canvas")]
    CanvasTooSmall {
        requested: usize,
        width: u32,
        height: u32,
    },
    #[error("no background region fits the new object")]
    NoBackground,
    #[error("raster {width}x{height} is not divisible into {patch}px patches")]
    PatchMismatch { width: u32, height: u32, patch: u32 },
    #[error("malformed image file: {0}")]
    Image(String),
    #[error("width mismatch in {op}: expected {expected}, got {got}")]
    Width {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("layer index {layer} invalid: {reason}")]
    Layer { layer: usize, reason: String },
    #[error("sequence: {0}")]
    Sequence(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: disc={loss_disc} cap={loss_cap}")]
    NonFiniteLoss {
        step: u64,
        loss_disc: f64,
        loss_cap: f64,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
