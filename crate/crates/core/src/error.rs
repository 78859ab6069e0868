use std::io;

use crate::wfdb::LeadId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed record: {0}")]
    Format(String),

    #[error("checksum mismatch on channel {channel}: header says {expected}, data gives {actual}")]
    Checksum {
        channel: usize,
        expected: i16,
        actual: i16,
    },

    #[error("unsupported signal storage format {0}")]
    UnsupportedFormat(String),

    #[error("lead {0} is neither stored nor derivable")]
    MissingLead(LeadId),

    #[error("record selection is empty")]
    EmptySelection,

    #[error("unknown infarction localization {0:?}")]
    UnknownLocalization(String),

    #[error("cannot stratify: {0}")]
    Stratification(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("record has {available} samples but a window needs {needed}")]
    RecordTooShort { needed: usize, available: usize },

    #[error("cannot downsample {source_len} samples to a longer target of {target_len}")]
    UpsampleNotSupported { source_len: usize, target_len: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("layer not supported by this attribution method: {0}")]
    UnsupportedLayer(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
