//! Error categories and their process exit codes.

use std::fmt;

use swinseg::model::ModelError;
use swinseg::phantom::PhantomError;
use swinseg::preprocess::PreprocessError;
use swinseg::training::TrainError;
use swinseg::volumeio::VolumeError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Bad flags or arguments.
    Usage,
    /// A configuration value fails validation.
    Config,
    /// Missing or malformed input data.
    Data,
    /// Failure while computing.
    Runtime,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Config => 3,
            Kind::Data => 4,
            Kind::Runtime => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Runtime => "runtime",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Kind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Kind::Data, message)
    }

    /// `error[<kind>]: <message>` on a single line.
    pub fn line(&self) -> String {
        let msg: Vec<&str> = self.message.split_whitespace().collect();
        format!("error[{}]: {}", self.kind.name(), msg.join(" "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn volume_kind(_: &VolumeError) -> Kind {
    Kind::Data
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::Config(_) => Kind::Config,
        ModelError::Param { .. } | ModelError::Checkpoint { .. } => Kind::Data,
        ModelError::Tensor(_) => Kind::Runtime,
    }
}

fn phantom_kind(e: &PhantomError) -> Kind {
    match e {
        PhantomError::Config(_) | PhantomError::Contrast { .. } => Kind::Config,
        PhantomError::Placement { .. } => Kind::Runtime,
        PhantomError::Volume(v) => volume_kind(v),
    }
}

fn preprocess_kind(e: &PreprocessError) -> Kind {
    match e {
        PreprocessError::Spacing(_) | PreprocessError::LabelInterpolation(_) => Kind::Config,
        PreprocessError::EmptyForeground | PreprocessError::BadBox { .. } => Kind::Data,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::Config(_) | TrainError::Optimizer(_) => Kind::Config,
            TrainError::EmptySplit(_) | TrainError::Io { .. } | TrainError::Metric(_) => Kind::Data,
            TrainError::NonFinite { .. } | TrainError::Tensor(_) => Kind::Runtime,
            TrainError::Volume(v) => volume_kind(v),
            TrainError::Preprocess(p) => preprocess_kind(p),
            TrainError::Model(m) => model_kind(m),
            TrainError::Phantom(p) => phantom_kind(p),
        };
        Self::new(kind, e.to_string())
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        Self::new(volume_kind(&e), e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new(model_kind(&e), e.to_string())
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        Self::new(phantom_kind(&e), e.to_string())
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        Self::new(preprocess_kind(&e), e.to_string())
    }
}

impl From<swinseg::lossmetrics::MetricError> for CliError {
    fn from(e: swinseg::lossmetrics::MetricError) -> Self {
        Self::data(e.to_string())
    }
}
