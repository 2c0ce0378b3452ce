use rlq_core::trainer::TrainError;

/// Failure of a subcommand. Validation errors name the offending key.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid `{key}`: {message}")]
    Validation { key: String, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn validation(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn runtime(message: impl core::fmt::Display) -> Self {
        Error::Runtime(message.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } => 1,
            Error::Runtime(_) => 2,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Runtime(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Runtime(format!("json: {e}"))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Runtime(format!("csv: {e}"))
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Runtime(format!("png: {e}"))
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { key, message } => Error::validation(key, message),
            other => Error::Runtime(other.to_string()),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! via_train_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Error {
            fn from(e: $t) -> Self {
                Error::from(TrainError::from(e))
            }
        }
    )*};
}

via_train_error!(
    rlq_core::tensor::TensorError,
    rlq_core::eval::EvalError,
    rlq_core::synthdata::RenderError,
    rlq_core::degrade::DegradeError,
    rlq_core::pose::PoseError
);
