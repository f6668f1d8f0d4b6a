use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("label value at row {row}, column {column} is not 0 or 1")]
    NonBinaryLabel { row: usize, column: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least 3 items to split, got {0}")]
    TooFewItems(usize),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("label index {index} out of range for {labels} labels")]
    LabelOutOfRange { index: usize, labels: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("pretrained weights for backbone `{0}` are not available")]
    PretrainedUnavailable(String),
    #[error("backbone has no convolutional feature layer")]
    NoConvLayer,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training was cancelled at epoch {epoch}")]
    Cancelled { epoch: usize },
    #[error("invalid training parameters: {0}")]
    InvalidParams(String),
    #[error("no training items")]
    EmptyTrainingSet,
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("heatmap is degenerate (constant); annotate this image manually")]
    DegenerateHeatmap,
    #[error("no heatmap cell reaches the threshold {0}")]
    EmptyThreshold(f64),
    #[error("attention mask is all zero")]
    EmptyMask,
    #[error("label {0} has zero positive examples but carries an annotation")]
    UnlearnableLabel(usize),
    #[error("need at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("labels must differ for inverse frequency (got {0} twice)")]
    SameLabel(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("ranking scores mix modes or labels")]
    MixedRanking,
}
