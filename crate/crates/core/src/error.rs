use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("label out of range: {0}")]
    Label(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no object in the scene matches the task target")]
    TargetMissing,
    #[error("scripted expert did not finish within {0} steps")]
    ExpertFailure(usize),
    #[error("size error: {0}")]
    Size(String),
    #[error("placement failed: {0}")]
    Placement(String),
    #[error("sprite library error: {0}")]
    Library(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
