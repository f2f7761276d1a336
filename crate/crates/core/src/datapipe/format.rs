//! On-disk corpus: one `FPRN` file per (tag, scenario) plus a TOML manifest.
//!
//! ```text
//! "FPRN" | version u16 | tag_id u32 | sample_rate_hz f64 | comm_count u32 | comm_len u32
//! comm_count × comm_len × (I f32, Q f32)
//! ```
//!
//! All little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::signalgen::{ChannelScenario, IQWaveform, LinkTiming};

pub const CORPUS_MAGIC: &[u8; 4] = b"FPRN";
pub const CORPUS_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 8 + 4 + 4;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub tag_id: u32,
    pub scenario: String,
    pub comm_count: u32,
    pub comm_len: u32,
    pub active_len: u64,
}

/// Directory-level description of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    /// Labels must be below this.
    pub num_classes: u32,
    pub population_seed: u64,
    pub comms_per_tag: u64,
    #[serde(default)]
    pub link_timing: Option<LinkTiming>,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<ChannelScenario>,
    #[serde(default, rename = "file")]
    pub files: Vec<FileEntry>,
}

/// Metadata supplied by the writer; file entries are filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusMeta {
    pub num_classes: u32,
    pub population_seed: u64,
    pub comms_per_tag: u64,
    pub link_timing: Option<LinkTiming>,
    pub scenarios: Vec<ChannelScenario>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn file_name(scenario: &str, tag_id: u32) -> String {
    format!("{scenario}_tag{tag_id:05}.fprn")
}

/// Writes `waves` grouped by (scenario, tag), in order of first appearance.
pub fn write_corpus(dir: &Path, waves: &[IQWaveform], meta: &CorpusMeta) -> Result<Manifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut order: Vec<(String, u32)> = Vec::new();
    let mut groups: BTreeMap<(String, u32), Vec<&IQWaveform>> = BTreeMap::new();
    for w in waves {
        let key = (w.scenario_name.clone(), w.tag_id);
        if w.tag_id >= meta.num_classes {
            return Err(DataError::LabelOutOfRange {
                path: dir.join(file_name(&key.0, key.1)),
                tag_id: w.tag_id,
                num_classes: meta.num_classes,
            });
        }
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(w);
    }

    let mut files = Vec::with_capacity(order.len());
    for key in order {
        let group = &groups[&key];
        let first = group[0];
        let comm_len = first.len();
        if group
            .iter()
            .any(|w| w.len() != comm_len || w.sample_rate_hz != first.sample_rate_hz || w.active_len != first.active_len)
        {
            return Err(DataError::Inconsistent(format!(
                "communications of tag {} in {} differ in length, rate or active region",
                key.1, key.0
            )));
        }
        let name = file_name(&key.0, key.1);
        let path = dir.join(&name);
        let mut out = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(CORPUS_MAGIC);
        header.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        header.extend_from_slice(&key.1.to_le_bytes());
        header.extend_from_slice(&first.sample_rate_hz.to_le_bytes());
        header.extend_from_slice(&(group.len() as u32).to_le_bytes());
        header.extend_from_slice(&(comm_len as u32).to_le_bytes());
        out.write_all(&header).map_err(io_err(&path))?;
        let mut body = Vec::with_capacity(comm_len * 8);
        for w in group {
            body.clear();
            for z in &w.samples {
                body.extend_from_slice(&z.re.to_le_bytes());
                body.extend_from_slice(&z.im.to_le_bytes());
            }
            out.write_all(&body).map_err(io_err(&path))?;
        }
        out.flush().map_err(io_err(&path))?;
        files.push(FileEntry {
            file: name,
            tag_id: key.1,
            scenario: key.0.clone(),
            comm_count: group.len() as u32,
            comm_len: comm_len as u32,
            active_len: first.active_len as u64,
        });
    }

    let manifest = Manifest {
        format_version: CORPUS_VERSION,
        num_classes: meta.num_classes,
        population_seed: meta.population_seed,
        comms_per_tag: meta.comms_per_tag,
        link_timing: meta.link_timing,
        scenarios: meta.scenarios.clone(),
        files,
    };
    let text = toml::to_string(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    if m.format_version != CORPUS_VERSION {
        return Err(DataError::VersionMismatch {
            path,
            found: m.format_version,
            expected: CORPUS_VERSION,
        });
    }
    Ok(m)
}

/// Decodes one corpus file.
pub fn read_file(path: &Path, entry: &FileEntry, num_classes: u32) -> Result<Vec<IQWaveform>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let truncated = |offset: usize, expected_len: usize| DataError::Truncated {
        path: path.to_path_buf(),
        offset: offset as u64,
        expected_len: expected_len as u64,
        actual_len: bytes.len() as u64,
    };
    if bytes.len() < 4 || &bytes[..4] != CORPUS_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(bytes.len(), HEADER_LEN));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CORPUS_VERSION {
        return Err(DataError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CORPUS_VERSION,
        });
    }
    let tag_id = u32_at(6);
    let sample_rate_hz = f64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes"));
    let comm_count = u32_at(18) as usize;
    let comm_len = u32_at(22) as usize;
    if tag_id >= num_classes {
        return Err(DataError::LabelOutOfRange {
            path: path.to_path_buf(),
            tag_id,
            num_classes,
        });
    }
    if tag_id != entry.tag_id || comm_count != entry.comm_count as usize || comm_len != entry.comm_len as usize {
        return Err(DataError::Inconsistent(format!(
            "{}: header disagrees with manifest entry",
            path.display()
        )));
    }
    let record = comm_len * 8;
    let expected_len = HEADER_LEN + comm_count * record;
    if bytes.len() < expected_len {
        // first record that is not fully present
        let whole = (bytes.len() - HEADER_LEN) / record.max(1);
        return Err(truncated(HEADER_LEN + whole * record, expected_len));
    }
    if bytes.len() > expected_len {
        return Err(DataError::Inconsistent(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - expected_len
        )));
    }
    let mut out = Vec::with_capacity(comm_count);
    for (c, rec) in bytes[HEADER_LEN..].chunks_exact(record.max(1)).take(comm_count).enumerate() {
        let samples = rec
            .chunks_exact(8)
            .map(|p| {
                Complex32::new(
                    f32::from_le_bytes(p[..4].try_into().expect("4 bytes")),
                    f32::from_le_bytes(p[4..].try_into().expect("4 bytes")),
                )
            })
            .collect();
        out.push(IQWaveform {
            samples,
            sample_rate_hz,
            tag_id,
            scenario_name: entry.scenario.clone(),
            comm_index: c as u32,
            active_len: entry.active_len as usize,
        });
    }
    if comm_len == 0 {
        out = (0..comm_count)
            .map(|c| IQWaveform {
                samples: Vec::new(),
                sample_rate_hz,
                tag_id,
                scenario_name: entry.scenario.clone(),
                comm_index: c as u32,
                active_len: 0,
            })
            .collect();
    }
    Ok(out)
}

/// Reads every file listed in the manifest, in manifest order.
pub fn read_corpus(dir: &Path) -> Result<(Manifest, Vec<IQWaveform>), DataError> {
    let manifest = read_manifest(dir)?;
    let mut waves = Vec::new();
    for entry in &manifest.files {
        let path: PathBuf = dir.join(&entry.file);
        waves.extend(read_file(&path, entry, manifest.num_classes)?);
    }
    Ok((manifest, waves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signalgen::{generate_population, synthesize_scenario, ImpairmentRanges, ScenarioCatalog, SynthConfig};

    fn sample_corpus() -> (Vec<IQWaveform>, CorpusMeta) {
        let cat = ScenarioCatalog::builtin("desk").unwrap();
        let profiles = generate_population(5, 3, &ImpairmentRanges::default());
        let mut waves = Vec::new();
        for s in &cat.scenarios[..2] {
            waves.extend(synthesize_scenario(&profiles, s, 10, &SynthConfig::default()).unwrap());
        }
        let meta = CorpusMeta {
            num_classes: 5,
            population_seed: 3,
            comms_per_tag: 10,
            link_timing: Some(LinkTiming::for_rate(40e3)),
            scenarios: cat.scenarios[..2].to_vec(),
        };
        (waves, meta)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (waves, meta) = sample_corpus();
        assert_eq!(waves.len(), 100);
        let written = write_corpus(dir.path(), &waves, &meta).unwrap();
        assert_eq!(written.files.len(), 10);
        let (manifest, back) = read_corpus(dir.path()).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(back.len(), waves.len());
        for (a, b) in waves.iter().zip(&back) {
            assert_eq!(a.tag_id, b.tag_id);
            assert_eq!(a.scenario_name, b.scenario_name);
            assert_eq!(a.comm_index, b.comm_index);
            assert_eq!(a.active_len, b.active_len);
            let bits = |w: &IQWaveform| w.samples.iter().map(|z| (z.re.to_bits(), z.im.to_bits())).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn empty_corpus_writes_manifest_only() {
        let dir = tempfile::tempdir().unwrap();
        let (_, meta) = sample_corpus();
        write_corpus(dir.path(), &[], &meta).unwrap();
        let (m, waves) = read_corpus(dir.path()).unwrap();
        assert!(waves.is_empty());
        assert!(m.files.is_empty());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn corruption_is_classified() {
        let dir = tempfile::tempdir().unwrap();
        let (waves, meta) = sample_corpus();
        let m = write_corpus(dir.path(), &waves, &meta).unwrap();
        let entry = &m.files[0];
        let path = dir.path().join(&entry.file);
        let good = fs::read(&path).unwrap();

        // truncated in the middle of the fourth record
        let record = 3400 * 8;
        fs::write(&path, &good[..HEADER_LEN + 3 * record + 100]).unwrap();
        match read_corpus(dir.path()) {
            Err(DataError::Truncated { offset, .. }) => assert_eq!(offset as usize, HEADER_LEN + 3 * record),
            other => panic!("{other:?}"),
        }

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(DataError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 7;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(DataError::VersionMismatch { found: 7, .. })));

        let mut bad = good.clone();
        bad[6..10].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_corpus(dir.path()),
            Err(DataError::LabelOutOfRange { tag_id: 99, .. })
        ));

        fs::write(&path, &good).unwrap();
        assert!(read_corpus(dir.path()).is_ok());
    }

    #[test]
    fn writer_rejects_out_of_range_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (waves, mut meta) = sample_corpus();
        meta.num_classes = 3;
        assert!(matches!(
            write_corpus(dir.path(), &waves, &meta),
            Err(DataError::LabelOutOfRange { .. })
        ));
    }
}
