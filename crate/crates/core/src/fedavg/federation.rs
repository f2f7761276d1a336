//! In-process federation: the same round logic as the networked server,
//! with direct access to every reader for metrics.

use super::reader::ReaderClient;
use super::wire::FRAME_HEADER_LEN;
use super::{federated_average, AggregationPolicy, Contribution, FedError, RoundTraffic};
use crate::datapipe::SliceExample;
use crate::neuralnet::{checkpoint_len, evaluate, ArchConfig, Network};

pub const MAX_BOOTSTRAP_EPOCHS: u32 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub local_epochs: u32,
    /// Epochs the lowest-id reader trains alone before round 1.
    pub bootstrap_epochs: u32,
    pub policy: AggregationPolicy,
    pub model_seed: u64,
    /// Lets the bootstrap reader also train on this share of every other
    /// reader's training data. Off by default.
    pub shared_warm_start: Option<f64>,
}

impl FedConfig {
    pub fn new(model_seed: u64) -> Self {
        Self {
            local_epochs: 1,
            bootstrap_epochs: 0,
            policy: AggregationPolicy::Uniform,
            model_seed,
            shared_warm_start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u32,
    /// Last local epoch loss per reader, in reader-id order.
    pub train_loss: Vec<f64>,
    /// Each reader's pre-averaging model on its own test split.
    pub local_test_accuracy: Option<Vec<f64>>,
    /// The averaged model on the concatenated test splits.
    pub union_test_accuracy: Option<f64>,
    /// The averaged model on the concatenated validation splits.
    pub union_validation_accuracy: Option<f64>,
    pub traffic: RoundTraffic,
}

#[derive(Debug)]
pub struct Federation {
    readers: Vec<ReaderClient>,
    global: Network<f32>,
    cfg: FedConfig,
    round: u32,
}

fn every_nth(data: &[SliceExample], share: f64) -> Vec<SliceExample> {
    let step = (1.0 / share).round().max(1.0) as usize;
    data.iter().step_by(step).cloned().collect()
}

impl Federation {
    /// Installs the initial weights, runs the bootstrap and synchronises
    /// every reader.
    pub fn start(mut readers: Vec<ReaderClient>, cfg: FedConfig) -> Result<Self, FedError> {
        if readers.is_empty() {
            return Err(FedError::InvalidConfig("no readers".into()));
        }
        if cfg.bootstrap_epochs > MAX_BOOTSTRAP_EPOCHS {
            return Err(FedError::InvalidConfig(format!(
                "bootstrap runs at most {MAX_BOOTSTRAP_EPOCHS} epochs, got {}",
                cfg.bootstrap_epochs
            )));
        }
        if let Some(s) = cfg.shared_warm_start {
            if !(s > 0.0 && s <= 1.0) {
                return Err(FedError::InvalidConfig(format!("shared warm-start share {s} is outside (0, 1]")));
            }
        }
        readers.sort_by_key(|r| r.reader_id);
        if let Some(w) = readers.windows(2).find(|w| w[0].reader_id == w[1].reader_id) {
            return Err(FedError::InvalidConfig(format!("reader id {} used twice", w[0].reader_id)));
        }
        let arch = readers[0].model.arch().clone();
        if let Some(r) = readers.iter().find(|r| r.model.arch() != &arch) {
            return Err(FedError::InvalidConfig(format!("reader {} has a different architecture", r.reader_id)));
        }

        let mut global: Network<f32> = Network::init(&arch, cfg.model_seed)?;
        let shared: Vec<SliceExample> = match cfg.shared_warm_start {
            Some(share) => readers[1..].iter().flat_map(|r| every_nth(&r.train, share)).collect(),
            None => Vec::new(),
        };
        let first = &mut readers[0];
        first.install(&global.flat_params())?;
        let own = first.train.len();
        first.train.extend(shared);
        let boot = first.train_local(u64::from(cfg.bootstrap_epochs));
        first.train.truncate(own);
        boot?;
        let weights = first.weights();
        for r in readers.iter_mut() {
            r.install(&weights)?;
        }
        global.set_flat_params(&weights)?;
        Ok(Self {
            readers,
            global,
            cfg,
            round: 0,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        self.global.arch()
    }

    pub fn global(&self) -> &Network<f32> {
        &self.global
    }

    pub fn readers(&self) -> &[ReaderClient] {
        &self.readers
    }

    pub fn rounds_completed(&self) -> u32 {
        self.round
    }

    /// Bytes a networked run moves in one round.
    pub fn round_traffic(&self, round: u32) -> Result<RoundTraffic, FedError> {
        let frame = (FRAME_HEADER_LEN + checkpoint_len(self.arch())?) as u64;
        let r = self.readers.len() as u64;
        Ok(RoundTraffic {
            round,
            upload_bytes: r * frame,
            download_bytes: r * frame,
            control_bytes: r * FRAME_HEADER_LEN as u64,
        })
    }

    pub fn union_accuracy(&self, pick: impl Fn(&ReaderClient) -> &[SliceExample]) -> Result<f64, FedError> {
        let all: Vec<SliceExample> = self.readers.iter().flat_map(|r| pick(r).iter().cloned()).collect();
        Ok(evaluate(&self.global, &all)?.accuracy)
    }

    /// One synchronous round: local training everywhere, then averaging.
    pub fn run_round(&mut self, with_metrics: bool) -> Result<RoundMetrics, FedError> {
        let round = self.round + 1;
        let mut train_loss = Vec::with_capacity(self.readers.len());
        let mut local_acc = Vec::new();
        for r in self.readers.iter_mut() {
            train_loss.push(r.train_local(u64::from(self.cfg.local_epochs))?.unwrap_or(f64::NAN));
            if with_metrics {
                local_acc.push(evaluate(r.network(), &r.test)?.accuracy);
            }
        }
        let weights: Vec<Vec<f32>> = self.readers.iter().map(|r| r.weights()).collect();
        let contribs: Vec<Contribution<'_>> = self
            .readers
            .iter()
            .zip(&weights)
            .map(|(r, w)| Contribution {
                reader_id: r.reader_id,
                weights: w,
                example_count: r.example_count(),
            })
            .collect();
        let avg = federated_average(&contribs, self.cfg.policy)?;
        for r in self.readers.iter_mut() {
            r.install(&avg)?;
        }
        self.global.set_flat_params(&avg)?;
        self.round = round;
        let (local, union_test, union_val) = if with_metrics {
            (
                Some(local_acc),
                Some(self.union_accuracy(|r| &r.test)?),
                Some(self.union_accuracy(|r| &r.validation)?),
            )
        } else {
            (None, None, None)
        };
        Ok(RoundMetrics {
            round,
            train_loss,
            local_test_accuracy: local,
            union_test_accuracy: union_test,
            union_validation_accuracy: union_val,
            traffic: self.round_traffic(round)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::net::{TcpListener, TcpStream};
    use std::thread;

    use super::*;
    use crate::datapipe::{split_corpus, SplitConfig, SplitDataset};
    use crate::fedavg::{
        channel_pair, encode_frame, handshake, run_client, run_server, ChannelTransport, Frame, PayloadKind,
        ServerConfig, StreamTransport, Transport,
    };
    use crate::neuralnet::{encode_checkpoint, train_epoch, ModelState};
    use crate::rng::{purpose, substream};
    use crate::signalgen::{generate_population, synthesize_scenario, ImpairmentRanges, ScenarioCatalog, SynthConfig};

    const WINDOW: usize = 256;
    const TAGS: usize = 3;

    fn arch() -> ArchConfig {
        let mut a = ArchConfig::new(WINDOW, TAGS).with_blocks(1);
        a.filters = 4;
        a
    }

    fn datasets(n: usize) -> Vec<SplitDataset> {
        let cat = ScenarioCatalog::builtin("desk").unwrap();
        let profiles = generate_population(TAGS as u32, 17, &ImpairmentRanges::default());
        cat.scenarios[..n]
            .iter()
            .map(|s| {
                let waves = synthesize_scenario(&profiles, s, 10, &SynthConfig::default()).unwrap();
                split_corpus(&waves, &SplitConfig::new(WINDOW, 1.0, 4)).unwrap()
            })
            .collect()
    }

    fn readers(n: usize) -> Vec<ReaderClient> {
        datasets(n)
            .into_iter()
            .enumerate()
            .map(|(i, d)| ReaderClient::new(i as u32, d, &arch(), None, 99).unwrap())
            .collect()
    }

    fn cfg(bootstrap: u32) -> FedConfig {
        FedConfig {
            bootstrap_epochs: bootstrap,
            ..FedConfig::new(5)
        }
    }

    fn server_cfg(rounds: u32, bootstrap: u32) -> ServerConfig {
        ServerConfig {
            arch: arch(),
            rounds,
            local_epochs: 1,
            bootstrap_epochs: bootstrap,
            policy: AggregationPolicy::Uniform,
            model_seed: 5,
        }
    }

    #[test]
    fn readers_stay_synchronised() {
        let mut fed = Federation::start(readers(3), cfg(1)).unwrap();
        let w0 = fed.readers()[0].weights();
        assert!(fed.readers().iter().all(|r| r.weights() == w0));
        for _ in 0..2 {
            let m = fed.run_round(true).unwrap();
            let w = fed.global().flat_params();
            assert!(fed.readers().iter().all(|r| r.weights() == w));
            assert_eq!(m.train_loss.len(), 3);
            let acc = m.union_test_accuracy.unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }

    #[test]
    fn zero_bootstrap_broadcasts_the_initial_weights() {
        let fed = Federation::start(readers(2), cfg(0)).unwrap();
        let init: Network<f32> = Network::init(&arch(), 5).unwrap();
        let bytes = encode_checkpoint(&init);
        for r in fed.readers() {
            assert_eq!(encode_checkpoint(r.network()), bytes);
        }
    }

    #[test]
    fn single_reader_is_plain_local_training() {
        let data = datasets(1).pop().unwrap();
        let mut fed = Federation::start(vec![ReaderClient::new(0, data.clone(), &arch(), None, 99).unwrap()], cfg(0)).unwrap();
        for _ in 0..3 {
            fed.run_round(false).unwrap();
        }
        let mut local = ModelState::from_network(Network::init(&arch(), 5).unwrap());
        let mut rng = substream(99, &[purpose::SHUFFLE, 0]);
        for _ in 0..3 {
            train_epoch(&mut local, &data.train, 64, &mut rng).unwrap();
        }
        assert_eq!(fed.global().flat_params(), local.network.flat_params());
    }

    #[test]
    fn bootstrap_is_bounded() {
        assert!(matches!(
            Federation::start(readers(1), cfg(11)),
            Err(FedError::InvalidConfig(_))
        ));
    }

    #[test]
    fn shared_warm_start_leaves_reader_data_untouched() {
        let rs = readers(2);
        let n0 = rs[0].train.len();
        let fed = Federation::start(
            rs,
            FedConfig {
                shared_warm_start: Some(0.25),
                ..cfg(1)
            },
        )
        .unwrap();
        assert_eq!(fed.readers()[0].train.len(), n0);
    }

    fn run_over_channels(rounds: u32, bootstrap: u32) -> (Vec<u8>, Vec<RoundTraffic>, Vec<Vec<u8>>) {
        let mut server_ends = Vec::new();
        let mut handles = Vec::new();
        for mut reader in readers(3) {
            let (s, mut c): (ChannelTransport, ChannelTransport) = channel_pair();
            server_ends.push(s);
            handles.push(thread::spawn(move || run_client(&mut c, &mut reader).unwrap()));
        }
        let sessions = server_ends.into_iter().rev().map(|c| handshake(c).unwrap()).collect();
        let report = run_server(sessions, &server_cfg(rounds, bootstrap)).unwrap();
        let clients: Vec<Vec<u8>> = handles.into_iter().map(|h| h.join().unwrap().final_checkpoint).collect();
        (encode_checkpoint(&report.final_weights), report.traffic, clients)
    }

    #[test]
    fn channel_run_matches_in_process_run() {
        let mut fed = Federation::start(readers(3), cfg(1)).unwrap();
        for _ in 0..2 {
            fed.run_round(false).unwrap();
        }
        let expected = encode_checkpoint(fed.global());
        let (server_bytes, traffic, clients) = run_over_channels(2, 1);
        assert_eq!(server_bytes, expected);
        assert!(clients.iter().all(|c| *c == expected));
        assert_eq!(traffic.len(), 3);
        for t in &traffic[1..] {
            assert_eq!(*t, fed.round_traffic(t.round).unwrap());
        }
    }

    #[test]
    fn tcp_run_matches_in_process_run() {
        let mut fed = Federation::start(readers(3), cfg(2)).unwrap();
        fed.run_round(false).unwrap();
        let expected = encode_checkpoint(fed.global());

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handles: Vec<_> = readers(3)
            .into_iter()
            .map(|mut reader| {
                thread::spawn(move || {
                    let mut t = StreamTransport::new(TcpStream::connect(addr).unwrap());
                    run_client(&mut t, &mut reader).unwrap()
                })
            })
            .collect();
        let sessions = (0..3)
            .map(|_| handshake(StreamTransport::new(listener.accept().unwrap().0)).unwrap())
            .collect();
        let report = run_server(sessions, &server_cfg(1, 2)).unwrap();
        assert_eq!(encode_checkpoint(&report.final_weights), expected);
        for h in handles {
            assert_eq!(h.join().unwrap().final_checkpoint, expected);
        }
    }

    #[test]
    fn malformed_join_rejected_before_weights_move() {
        let (mut s, mut c) = channel_pair();
        let mut bytes = encode_frame(&Frame::control(PayloadKind::StartRound, 0, 0, 10));
        bytes[..4].copy_from_slice(b"XXXX");
        c.send_raw(bytes).unwrap();
        assert!(matches!(handshake(&mut s), Err(FedError::BadMagic(_))));
        let mut bytes = encode_frame(&Frame::control(PayloadKind::StartRound, 0, 0, 10));
        bytes[4] = 9;
        c.send_raw(bytes).unwrap();
        assert!(matches!(handshake(&mut s), Err(FedError::VersionMismatch { .. })));
    }

    #[test]
    fn lost_reader_aborts_the_round() {
        let mut rs = readers(2);
        let (s0, mut c0) = channel_pair();
        let (s1, mut c1) = channel_pair();
        let mut r0 = rs.remove(0);
        let h0 = thread::spawn(move || run_client(&mut c0, &mut r0));
        // reader 1 joins, then disappears after the bootstrap broadcast
        c1.send(&Frame::control(PayloadKind::StartRound, 0, 1, 10)).unwrap();
        let sessions = vec![handshake(s0).unwrap(), handshake(s1).unwrap()];
        let h1 = thread::spawn(move || {
            let f = c1.recv().unwrap();
            assert_eq!(f.kind, PayloadKind::Weights);
            drop(c1);
        });
        let err = run_server(sessions, &server_cfg(2, 0)).unwrap_err();
        assert!(matches!(err, FedError::ReaderLost { reader_id: 1, round: 1 }), "{err}");
        h1.join().unwrap();
        drop(h0);
    }

    #[test]
    fn client_rejects_weights_for_another_architecture() {
        let (mut s, mut c) = channel_pair();
        let mut reader = readers(1).pop().unwrap();
        let before = reader.weights();
        let h = thread::spawn(move || {
            let r = run_client(&mut c, &mut reader);
            (r, reader.weights())
        });
        s.recv().unwrap();
        let other: Network<f32> = Network::init(&ArchConfig::new(WINDOW, TAGS + 1).with_blocks(1), 1).unwrap();
        s.send(&Frame {
            kind: PayloadKind::Weights,
            round: 0,
            reader_id: u32::MAX,
            example_count: 0,
            payload: encode_checkpoint(&other),
        })
        .unwrap();
        let (res, after) = h.join().unwrap();
        assert!(matches!(res, Err(FedError::Unexpected(_))));
        assert_eq!(after, before);
    }
}
