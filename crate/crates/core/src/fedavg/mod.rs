//! Synchronous federated averaging across readers.
//!
//! Each reader trains locally and ships its weights; the server averages
//! them and sends the result back. The same reader and averaging code runs
//! both in-process ([`Federation`]) and over the `FPFL` wire protocol
//! ([`run_server`] / [`run_client`]), so both modes produce identical weights.

mod federation;
mod reader;
mod session;
mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use federation::{FedConfig, Federation, RoundMetrics, MAX_BOOTSTRAP_EPOCHS};
pub use reader::ReaderClient;
pub use session::{
    channel_pair, handshake, run_client, run_server, ChannelTransport, ClientReport, RoundTraffic, ServerConfig, ServerReport, Session,
    StreamTransport, Transport,
};
pub use wire::{
    decode_frame, encode_frame, read_frame, Frame, PayloadKind, ALL_READERS, FRAME_HEADER_LEN, MAX_PAYLOAD_LEN,
    WIRE_MAGIC, WIRE_VERSION,
};

use crate::augment::AugmentError;
use crate::datapipe::DataError;
use crate::neuralnet::NnError;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("no weight sets to average")]
    Empty,
    #[error("weight set of reader {reader_id} has {found} values, expected {expected}")]
    ShapeMismatch { reader_id: u32, found: usize, expected: usize },
    #[error("reader {reader_id} reported no training examples; weighted averaging needs a positive count")]
    ZeroCount { reader_id: u32 },
    #[error("bad frame magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("protocol version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unexpected frame: {0}")]
    Unexpected(String),
    #[error("reader {reader_id} dropped out in round {round}")]
    ReaderLost { reader_id: u32, round: u32 },
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationPolicy {
    /// Every reader counts `1/R`.
    #[default]
    Uniform,
    /// Reader `r` counts `|X_r| / |X|`.
    DataWeighted,
}

impl std::str::FromStr for AggregationPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "weighted" | "data_weighted" | "data-weighted" => Ok(Self::DataWeighted),
            other => Err(format!("unknown aggregation policy {other:?} (uniform|weighted)")),
        }
    }
}

/// One reader's weights going into an average.
#[derive(Debug, Clone, Copy)]
pub struct Contribution<'a> {
    pub reader_id: u32,
    pub weights: &'a [f32],
    pub example_count: u64,
}

/// Mixing coefficients in sorted reader order; they sum to 1.
pub fn coefficients(contribs: &[Contribution<'_>], policy: AggregationPolicy) -> Result<Vec<f64>, FedError> {
    if contribs.is_empty() {
        return Err(FedError::Empty);
    }
    match policy {
        AggregationPolicy::Uniform => Ok(vec![1.0 / contribs.len() as f64; contribs.len()]),
        AggregationPolicy::DataWeighted => {
            if let Some(c) = contribs.iter().find(|c| c.example_count == 0) {
                return Err(FedError::ZeroCount { reader_id: c.reader_id });
            }
            let total: u64 = contribs.iter().map(|c| c.example_count).sum();
            Ok(contribs.iter().map(|c| c.example_count as f64 / total as f64).collect())
        }
    }
}

fn tree_sum(mut terms: Vec<Vec<f64>>) -> Vec<f64> {
    while terms.len() > 1 {
        let mut next = Vec::with_capacity(terms.len().div_ceil(2));
        let mut it = terms.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        terms = next;
    }
    terms.pop().unwrap_or_default()
}

/// Elementwise convex combination of the contributions.
///
/// Contributions are sorted by reader id and summed pairwise in f64, so the
/// result does not depend on the order they are passed in.
pub fn federated_average(contribs: &[Contribution<'_>], policy: AggregationPolicy) -> Result<Vec<f32>, FedError> {
    let mut sorted = contribs.to_vec();
    sorted.sort_by_key(|c| c.reader_id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].reader_id == w[1].reader_id) {
        return Err(FedError::InvalidConfig(format!("reader {} contributed twice", w[0].reader_id)));
    }
    let coef = coefficients(&sorted, policy)?;
    let expected = sorted[0].weights.len();
    if let Some(c) = sorted.iter().find(|c| c.weights.len() != expected) {
        return Err(FedError::ShapeMismatch {
            reader_id: c.reader_id,
            found: c.weights.len(),
            expected,
        });
    }
    let terms = sorted
        .iter()
        .zip(&coef)
        .map(|(c, &k)| c.weights.iter().map(|&w| k * f64::from(w)).collect())
        .collect();
    Ok(tree_sum(terms).into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn contrib(reader_id: u32, weights: &[f32], example_count: u64) -> Contribution<'_> {
        Contribution {
            reader_id,
            weights,
            example_count,
        }
    }

    #[test]
    fn identical_sets_are_a_fixed_point() {
        let w = [0.3f32, -1.7, 2.5e-3, 42.0];
        let cs: Vec<_> = (0..5).map(|r| contrib(r, &w, 10 + u64::from(r))).collect();
        assert_eq!(federated_average(&cs, AggregationPolicy::Uniform).unwrap(), w);
        assert_eq!(federated_average(&cs, AggregationPolicy::DataWeighted).unwrap(), w);
    }

    #[test]
    fn uniform_mean() {
        let cs = [contrib(0, &[0.0], 1), contrib(1, &[2.0], 1)];
        assert_eq!(federated_average(&cs, AggregationPolicy::Uniform).unwrap(), vec![1.0]);
    }

    #[test]
    fn data_weighted_mean() {
        let cs = [contrib(0, &[0.0], 1), contrib(1, &[4.0], 3)];
        assert_eq!(federated_average(&cs, AggregationPolicy::DataWeighted).unwrap(), vec![3.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(federated_average(&[], AggregationPolicy::Uniform), Err(FedError::Empty)));
        let cs = [contrib(0, &[0.0, 1.0], 1), contrib(1, &[4.0], 3)];
        assert!(matches!(
            federated_average(&cs, AggregationPolicy::Uniform),
            Err(FedError::ShapeMismatch { reader_id: 1, .. })
        ));
        let cs = [contrib(0, &[0.0], 0), contrib(1, &[4.0], 3)];
        assert!(matches!(
            federated_average(&cs, AggregationPolicy::DataWeighted),
            Err(FedError::ZeroCount { reader_id: 0 })
        ));
        let cs = [contrib(2, &[0.0], 1), contrib(2, &[4.0], 3)];
        assert!(federated_average(&cs, AggregationPolicy::Uniform).is_err());
    }

    #[test]
    fn policy_parses() {
        assert_eq!("uniform".parse::<AggregationPolicy>().unwrap(), AggregationPolicy::Uniform);
        assert_eq!("weighted".parse::<AggregationPolicy>().unwrap(), AggregationPolicy::DataWeighted);
        assert!("median".parse::<AggregationPolicy>().is_err());
    }

    proptest! {
        #[test]
        fn coefficients_sum_to_one(counts in proptest::collection::vec(1u64..10_000, 1..12)) {
            let w = [0.0f32];
            let cs: Vec<_> = counts.iter().enumerate().map(|(i, &c)| contrib(i as u32, &w, c)).collect();
            for policy in [AggregationPolicy::Uniform, AggregationPolicy::DataWeighted] {
                let s: f64 = coefficients(&cs, policy).unwrap().iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn order_of_contributions_is_irrelevant(
            sets in proptest::collection::vec(proptest::collection::vec(-10.0f32..10.0, 6), 1..7),
            counts in proptest::collection::vec(1u64..500, 7),
            rotate in 0usize..7,
        ) {
            let cs: Vec<_> = sets.iter().enumerate().map(|(i, w)| contrib(i as u32 * 3, w, counts[i])).collect();
            let mut shuffled = cs.clone();
            shuffled.rotate_left(rotate % cs.len());
            shuffled.reverse();
            for policy in [AggregationPolicy::Uniform, AggregationPolicy::DataWeighted] {
                let a = federated_average(&cs, policy).unwrap();
                let b = federated_average(&shuffled, policy).unwrap();
                prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                // convexity: each output lies within the input range
                for (j, v) in a.iter().enumerate() {
                    let lo = sets.iter().map(|s| s[j]).fold(f32::INFINITY, f32::min);
                    let hi = sets.iter().map(|s| s[j]).fold(f32::NEG_INFINITY, f32::max);
                    prop_assert!(*v >= lo - 1e-5 && *v <= hi + 1e-5);
                }
            }
        }
    }
}
