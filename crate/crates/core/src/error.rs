use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum SokeError {
    #[error("layout error: {0}")]
    Layout(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("graph error: {0}")]
    Graph(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("decoding mode error: {0}")]
    Mode(String),
    #[error("token out of range: {0}")]
    TokenRange(String),
    #[error("degenerate point set for alignment: {0}")]
    AlignmentDegenerate(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<SokeError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SokeError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(SokeError::Shape {
        op,
        detail: detail.into(),
    })
}
