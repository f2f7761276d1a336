//! From communications to classifier inputs: slicing, splitting and the
//! on-disk corpus format.

mod format;
mod slice;
mod split;

use std::path::PathBuf;

use thiserror::Error;

pub use format::{
    file_name, read_corpus, read_file, read_manifest, write_corpus, CorpusMeta, FileEntry, Manifest, CORPUS_MAGIC,
    CORPUS_VERSION, HEADER_LEN, MANIFEST_FILE,
};
pub use slice::{slice_waveform, slice_waveform_with, CommKey, SliceExample, SliceOptions};
pub use split::{partition_sizes, split_corpus, split_indices, CommSplit, SplitConfig, SplitDataset, MIN_COMMS_PER_TAG};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("window length must be at least 1, got {0}")]
    InvalidWindow(usize),
    #[error("data fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error("invalid split ratios {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("tag {tag_id} has {available} communications, too few for non-empty train/validation/test splits")]
    TooFewCommunications { tag_id: u32, available: usize },
    #[error("{path}: I/O error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not an FPRN corpus file")]
    BadMagic { path: PathBuf },
    #[error("{path}: format version {found}, expected {expected}")]
    VersionMismatch { path: PathBuf, found: u16, expected: u16 },
    #[error("{path}: truncated at byte offset {offset} (file is {actual_len} bytes, expected {expected_len})")]
    Truncated {
        path: PathBuf,
        offset: u64,
        expected_len: u64,
        actual_len: u64,
    },
    #[error("{path}: tag_id {tag_id} out of range for {num_classes} classes")]
    LabelOutOfRange { path: PathBuf, tag_id: u32, num_classes: u32 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("inconsistent corpus: {0}")]
    Inconsistent(String),
}
