use std::fmt;

/// Pipeline stage an error is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parse,
    Segmentation,
    Detection,
    Selection,
    Mask,
    Canvas,
    Manipulation,
    Combination,
    Background,
    Io,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Parse => "parse",
            Stage::Segmentation => "segmentation",
            Stage::Detection => "detection",
            Stage::Selection => "selection",
            Stage::Mask => "mask",
            Stage::Canvas => "canvas",
            Stage::Manipulation => "manipulation",
            Stage::Combination => "combination",
            Stage::Background => "background",
            Stage::Io => "io",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("empty region: {0}")]
    EmptyRegion(String),
    #[error("no target: {0}")]
    NoTarget(String),
    #[error("ambiguous instruction: {0}")]
    Ambiguity(String),
    #[error("palette error: {0}")]
    Palette(String),
    #[error("numeric error in {component}: {detail}")]
    Numeric { component: String, detail: String },
    #[error("backend `{backend}` failed: {detail}")]
    Backend { backend: String, detail: String },
    #[error("{stage} stage: {source}")]
    AtStage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attributes the error to a pipeline stage. Already-attributed errors keep
    /// their innermost stage.
    pub fn at(self, stage: Stage) -> Error {
        match self {
            e @ Error::AtStage { .. } => e,
            other => Error::AtStage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::AtStage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// The error with any stage attribution peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_no_target(&self) -> bool {
        matches!(self.root(), Error::NoTarget(_))
    }

    pub fn is_backend(&self) -> bool {
        matches!(self.root(), Error::Backend { .. })
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.root(), Error::Numeric { .. })
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Error {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Error {
        Error::Parameter(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub trait StageExt<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
