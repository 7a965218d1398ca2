use gpframe::data::DataError;
use gpframe::eval::EvalError;
use gpframe::gp::GpError;
use gpframe::kernels::KernelError;
use gpframe::scale::ScaleError;
use gpframe::train::TrainError;
use gpframe::transforms::TransformError;
use thiserror::Error;

/// Failure of a pipeline command, classified by exit code.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }

    /// `error[<kind>]: <reason>` on one line.
    pub fn line(&self) -> String {
        let reason = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.kind(), reason)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::MissingColumn(_)
            | DataError::InvalidFractions(_)
            | DataError::InvalidChunking(_)
            | DataError::NoSpatialFeatures
            | DataError::DuplicateFeature(_)
            | DataError::MissingTrackIds => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::NonFiniteInput | KernelError::DimensionMismatch { .. } => CliError::Data(e.to_string()),
            KernelError::InvalidHyperparameter(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<GpError> for CliError {
    fn from(e: GpError) -> Self {
        match e {
            GpError::Kernel(k) => k.into(),
            GpError::SizeCapExceeded { .. } => CliError::Config(e.to_string()),
            GpError::EmptyData | GpError::DimensionMismatch { .. } | GpError::NonFiniteData => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Gp(g) => g.into(),
            TrainError::Kernel(k) => k.into(),
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::DegenerateData(_) | TrainError::Io(_) => CliError::Data(e.to_string()),
            TrainError::NonFiniteObjective => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ScaleError> for CliError {
    fn from(e: ScaleError) -> Self {
        match e {
            ScaleError::Gp(g) => g.into(),
            ScaleError::Train(t) => t.into(),
            ScaleError::Kernel(k) => k.into(),
            ScaleError::Data(d) => d.into(),
            ScaleError::ChunkTooLarge { .. } | ScaleError::TooManyInducing { .. } | ScaleError::StructureMismatch => {
                CliError::Config(e.to_string())
            }
            ScaleError::GridMismatch(_) => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<TransformError> for CliError {
    fn from(e: TransformError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::LengthMismatch { .. } | EvalError::Empty | EvalError::TooFewRows { .. } | EvalError::RankDeficient(_) => {
                CliError::Data(e.to_string())
            }
            EvalError::KTooLarge { .. } | EvalError::TooFewModels(_) => CliError::Config(e.to_string()),
            EvalError::NonFinite => CliError::Numerical(e.to_string()),
        }
    }
}
