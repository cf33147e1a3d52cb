//! Event dataset ingestion, binning, and synthetic data generation.
//!
//! Event datasets (such as Spiking Heidelberg Digits) are stored in a small
//! self-describing binary container so the rest of the crate never touches
//! scientific container formats. A converter from the published HDF5
//! distribution lives in `python/convert_shd.py`; the `convert-dataset` CLI
//! subcommand additionally accepts a JSON-lines interchange format.
//!
//! Container layout (all little-endian), file extension `.sed`:
//!
//! ```text
//! magic            8 bytes  "SPKEVT01"
//! version          u16      (currently 1)
//! channels         u16
//! classes          u16
//! reserved         u16      (zero)
//! sample_count     u32
//! per sample:
//!   sample_id      u32
//!   label          u16
//!   reserved       u16      (zero)
//!   event_count    u32
//!   times          f64 * event_count   (seconds, ascending)
//!   units          u16 * event_count
//!   sample_crc32   u32      (over sample_id .. units)
//! file_crc32       u32      (over magic .. last sample)
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SHD_CHANNELS: usize = 700;
pub const SHD_CLASSES: usize = 20;
pub const SHD_TRAIN_SAMPLES: usize = 8_156;
pub const SHD_TEST_SAMPLES: usize = 2_264;
pub const DEFAULT_NUM_BINS: usize = 100;

const MAGIC: &[u8; 8] = b"SPKEVT01";
const CONTAINER_VERSION: u16 = 1;

/// One event-stream sample: spike times (seconds) with their channels.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub sample_id: u32,
    pub label: u16,
    pub times: Vec<f64>,
    pub units: Vec<u16>,
}

impl EventRecord {
    pub fn num_events(&self) -> usize {
        self.times.len()
    }

    fn validate(&self, channels: u16, classes: u16, path: &str) -> Result<()> {
        if self.times.len() != self.units.len() {
            return Err(Error::DataFormat {
                path: path.into(),
                detail: format!(
                    "sample {}: {} times vs {} units",
                    self.sample_id,
                    self.times.len(),
                    self.units.len()
                ),
            });
        }
        if self.label >= classes {
            return Err(Error::DataFormat {
                path: path.into(),
                detail: format!(
                    "sample {}: label {} >= {}",
                    self.sample_id, self.label, classes
                ),
            });
        }
        let mut prev = f64::NEG_INFINITY;
        for (&t, &u) in self.times.iter().zip(self.units.iter()) {
            if !(t >= 0.0) {
                return Err(Error::DataFormat {
                    path: path.into(),
                    detail: format!("sample {}: negative or NaN time {t}", self.sample_id),
                });
            }
            if t < prev {
                return Err(Error::DataFormat {
                    path: path.into(),
                    detail: format!("sample {}: times not ascending", self.sample_id),
                });
            }
            prev = t;
            if u >= channels {
                return Err(Error::DataFormat {
                    path: path.into(),
                    detail: format!("sample {}: unit {u} >= {channels}", self.sample_id),
                });
            }
        }
        Ok(())
    }
}

/// A split of an event dataset, in storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct EventDataset {
    pub channels: u16,
    pub classes: u16,
    pub records: Vec<EventRecord>,
}

impl EventDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Dense spike-count tensor `[batch, time, channels]` with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeBatch {
    pub batch: usize,
    pub t_len: usize,
    pub channels: usize,
    pub counts: Vec<u16>,
    pub labels: Vec<u16>,
}

impl SpikeBatch {
    pub fn zeros(batch: usize, t_len: usize, channels: usize) -> Self {
        SpikeBatch {
            batch,
            t_len,
            channels,
            counts: vec![0; batch * t_len * channels],
            labels: vec![0; batch],
        }
    }

    #[inline]
    pub fn count(&self, sample: usize, t: usize, channel: usize) -> u16 {
        self.counts[(sample * self.t_len + t) * self.channels + channel]
    }

    /// Gather a sub-batch by sample index, in the given order.
    pub fn select(&self, indices: &[usize]) -> SpikeBatch {
        let stride = self.t_len * self.channels;
        let mut counts = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &s in indices {
            counts.extend_from_slice(&self.counts[s * stride..(s + 1) * stride]);
            labels.push(self.labels[s]);
        }
        SpikeBatch {
            batch: indices.len(),
            t_len: self.t_len,
            channels: self.channels,
            counts,
            labels,
        }
    }

    pub fn total_events(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Bin one sample's events into `num_bins` equal windows over the sample
/// duration. Bin `k` collects events with `t` in `[k*d, (k+1)*d)`; the event
/// at exactly the duration lands in the last bin. Counts accumulate.
pub fn bin_events(rec: &EventRecord, num_bins: usize, channels: usize) -> Vec<u16> {
    let mut grid = vec![0u16; num_bins * channels];
    if rec.times.is_empty() {
        return grid;
    }
    let duration = rec.times.iter().cloned().fold(0.0f64, f64::max);
    for (&t, &u) in rec.times.iter().zip(rec.units.iter()) {
        let bin = if duration > 0.0 {
            ((t / duration * num_bins as f64) as usize).min(num_bins - 1)
        } else {
            0
        };
        grid[bin * channels + u as usize] += 1;
    }
    grid
}

/// Bin a list of records into one dense batch.
pub fn batch_from_records(records: &[EventRecord], num_bins: usize, channels: usize) -> SpikeBatch {
    let mut out = SpikeBatch::zeros(records.len(), num_bins, channels);
    let stride = num_bins * channels;
    for (s, rec) in records.iter().enumerate() {
        let grid = bin_events(rec, num_bins, channels);
        out.counts[s * stride..(s + 1) * stride].copy_from_slice(&grid);
        out.labels[s] = rec.label;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(&self) -> &'static str {
        match self {
            Split::Train => "train.sed",
            Split::Test => "test.sed",
        }
    }
}

/// Read one split (`train.sed` / `test.sed`) from a dataset directory.
pub fn load_dataset(dir: &Path, split: Split) -> Result<EventDataset> {
    read_container(&dir.join(split.file_name()))
}

/// Read a split restricted to (and ordered by) a manifest of sample IDs.
pub fn load_dataset_with_manifest(
    dir: &Path,
    split: Split,
    manifest: Option<&Path>,
) -> Result<EventDataset> {
    let ds = load_dataset(dir, split)?;
    match manifest {
        None => Ok(ds),
        Some(mpath) => {
            let ids = read_manifest(mpath)?;
            select_by_ids(ds, &ids, &mpath.display().to_string())
        }
    }
}

fn select_by_ids(ds: EventDataset, ids: &[u32], manifest_path: &str) -> Result<EventDataset> {
    let mut by_id = std::collections::HashMap::with_capacity(ds.records.len());
    for rec in &ds.records {
        by_id.insert(rec.sample_id, rec);
    }
    let mut records = Vec::with_capacity(ids.len());
    for &id in ids {
        match by_id.get(&id) {
            Some(rec) => records.push((*rec).clone()),
            None => {
                return Err(Error::DataFormat {
                    path: manifest_path.into(),
                    detail: format!("sample id {id} not present in container"),
                })
            }
        }
    }
    Ok(EventDataset {
        channels: ds.channels,
        classes: ds.classes,
        records,
    })
}

/// Manifest files: one sample ID per line, `#` comments allowed.
pub fn read_manifest(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut ids = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id = line.parse::<u32>().map_err(|_| Error::DataFormat {
            path: path.display().to_string(),
            detail: format!("line {}: not a sample id: {line:?}", lineno + 1),
        })?;
        ids.push(id);
    }
    Ok(ids)
}

pub fn write_manifest(path: &Path, ids: &[u32]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(&id.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Deterministic class-stratified subset of a dataset: `total` sample IDs,
/// allocated across classes proportionally to class frequency.
pub fn stratified_subset(ds: &EventDataset, total: usize, seed: u64) -> Vec<u32> {
    let mut per_class: Vec<Vec<u32>> = vec![Vec::new(); ds.classes as usize];
    for rec in &ds.records {
        per_class[rec.label as usize].push(rec.sample_id);
    }
    let n = ds.records.len().max(1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(total);
    for ids in per_class.iter_mut() {
        let take = ((ids.len() * total + n / 2) / n).min(ids.len());
        // Fisher-Yates prefix shuffle
        for i in 0..take {
            let j = i + rng.random_range(0..ids.len() - i);
            ids.swap(i, j);
        }
        picked.extend_from_slice(&ids[..take]);
    }
    picked.sort_unstable();
    picked.truncate(total);
    picked
}

pub fn write_container(path: &Path, ds: &EventDataset) -> Result<()> {
    let pstr = path.display().to_string();
    for rec in &ds.records {
        rec.validate(ds.channels, ds.classes, &pstr)?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(&pstr, e))?;
    let mut out = BufWriter::new(file);
    let mut file_crc = crc32fast::Hasher::new();

    let emit = |out: &mut BufWriter<fs::File>, crc: &mut crc32fast::Hasher, bytes: &[u8]| {
        crc.update(bytes);
        out.write_all(bytes)
    };

    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    header.extend_from_slice(&ds.channels.to_le_bytes());
    header.extend_from_slice(&ds.classes.to_le_bytes());
    header.extend_from_slice(&0u16.to_le_bytes());
    header.extend_from_slice(&(ds.records.len() as u32).to_le_bytes());
    emit(&mut out, &mut file_crc, &header).map_err(|e| Error::io(&pstr, e))?;

    for rec in &ds.records {
        let mut body = Vec::with_capacity(12 + rec.times.len() * 10);
        body.extend_from_slice(&rec.sample_id.to_le_bytes());
        body.extend_from_slice(&rec.label.to_le_bytes());
        body.extend_from_slice(&0u16.to_le_bytes());
        body.extend_from_slice(&(rec.times.len() as u32).to_le_bytes());
        for t in &rec.times {
            body.extend_from_slice(&t.to_le_bytes());
        }
        for u in &rec.units {
            body.extend_from_slice(&u.to_le_bytes());
        }
        let sample_crc = crc32fast::hash(&body);
        body.extend_from_slice(&sample_crc.to_le_bytes());
        emit(&mut out, &mut file_crc, &body).map_err(|e| Error::io(&pstr, e))?;
    }
    out.write_all(&file_crc.finalize().to_le_bytes())
        .map_err(|e| Error::io(&pstr, e))?;
    out.flush().map_err(|e| Error::io(&pstr, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::DataFormat {
                path: self.path.into(),
                detail: format!("truncated file at offset {}", self.pos),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_container(path: &Path) -> Result<EventDataset> {
    let pstr = path.display().to_string();
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(&pstr, e))?;
    if buf.len() < MAGIC.len() + 4 {
        return Err(Error::DataFormat {
            path: pstr,
            detail: "file too short for header".into(),
        });
    }
    let (body, trailer) = buf.split_at(buf.len() - 4);
    let want_file_crc = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != want_file_crc {
        return Err(Error::Integrity {
            path: pstr,
            detail: "file checksum mismatch".into(),
        });
    }

    let mut cur = Cursor {
        buf: body,
        pos: 0,
        path: &pstr,
    };
    if cur.take(8)? != MAGIC {
        return Err(Error::DataFormat {
            path: pstr,
            detail: "bad magic bytes".into(),
        });
    }
    let version = cur.u16()?;
    if version != CONTAINER_VERSION {
        return Err(Error::DataFormat {
            path: pstr,
            detail: format!("unsupported container version {version}"),
        });
    }
    let channels = cur.u16()?;
    let classes = cur.u16()?;
    let _reserved = cur.u16()?;
    let sample_count = cur.u32()? as usize;

    let mut records = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let start = cur.pos;
        let sample_id = cur.u32()?;
        let label = cur.u16()?;
        let _reserved = cur.u16()?;
        let count = cur.u32()? as usize;
        let times_bytes = cur.take(count * 8)?;
        let units_bytes = cur.take(count * 2)?;
        let body_end = cur.pos;
        let want_crc = cur.u32()?;
        let got_crc = crc32fast::hash(&cur.buf[start..body_end]);
        if got_crc != want_crc {
            return Err(Error::Integrity {
                path: pstr.clone(),
                detail: format!("sample {sample_id}: checksum mismatch"),
            });
        }
        let times: Vec<f64> = times_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let units: Vec<u16> = units_bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let rec = EventRecord {
            sample_id,
            label,
            times,
            units,
        };
        rec.validate(channels, classes, &pstr)?;
        records.push(rec);
    }
    if cur.pos != body.len() {
        return Err(Error::DataFormat {
            path: pstr,
            detail: "trailing bytes after last sample".into(),
        });
    }
    Ok(EventDataset {
        channels,
        classes,
        records,
    })
}

#[derive(Debug, Deserialize)]
struct JsonlSample {
    #[serde(default)]
    id: Option<u32>,
    label: u16,
    times: Vec<f64>,
    units: Vec<u16>,
}

/// Convert a JSON-lines event file (one `{"label", "times", "units"}` object
/// per line) into a container. IDs default to `id_offset + line index`.
pub fn convert_jsonl_to_container(
    input: &Path,
    output: &Path,
    channels: u16,
    classes: u16,
    id_offset: u32,
) -> Result<usize> {
    let in_str = input.display().to_string();
    let text = fs::read_to_string(input).map_err(|e| Error::io(&in_str, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: JsonlSample = serde_json::from_str(line).map_err(|e| Error::DataFormat {
            path: in_str.clone(),
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        let mut order: Vec<usize> = (0..sample.times.len()).collect();
        order.sort_by(|&a, &b| sample.times[a].total_cmp(&sample.times[b]));
        records.push(EventRecord {
            sample_id: sample.id.unwrap_or(id_offset + records.len() as u32),
            label: sample.label,
            times: order.iter().map(|&k| sample.times[k]).collect(),
            units: order.iter().map(|&k| sample.units[k]).collect(),
        });
    }
    let count = records.len();
    write_container(
        output,
        &EventDataset {
            channels,
            classes,
            records,
        },
    )?;
    Ok(count)
}

/// Shape of a synthetic dataset: Poisson spike counts with class-dependent
/// channel rate profiles. With `rate_hi > rate_lo` the classes are linearly
/// separable from channel totals alone; with `rate_hi == rate_lo` all
/// classes are statistically identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub t_len: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Poisson mean per (step, channel) on the class's preferred block.
    pub rate_hi: f64,
    /// Poisson mean per (step, channel) elsewhere.
    pub rate_lo: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 2,
            channels: 64,
            t_len: 100,
            train_per_class: 128,
            test_per_class: 64,
            rate_hi: 0.5,
            rate_lo: 0.02,
        }
    }
}

/// Deterministic synthetic (train, test) pair.
pub fn synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> (SpikeBatch, SpikeBatch) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let train = synth_split(spec, spec.train_per_class, &mut rng);
    let test = synth_split(spec, spec.test_per_class, &mut rng);
    (train, test)
}

fn synth_split(spec: &SyntheticSpec, per_class: usize, rng: &mut ChaCha12Rng) -> SpikeBatch {
    use rand_distr::{Distribution, Poisson};
    let batch = per_class * spec.classes;
    let mut out = SpikeBatch::zeros(batch, spec.t_len, spec.channels);
    let block = (spec.channels / spec.classes).max(1);
    let mut s = 0;
    for _rep in 0..per_class {
        for class in 0..spec.classes {
            out.labels[s] = class as u16;
            let lo = class * block;
            let hi = ((class + 1) * block).min(spec.channels);
            for t in 0..spec.t_len {
                for ch in 0..spec.channels {
                    let rate = if ch >= lo && ch < hi {
                        spec.rate_hi
                    } else {
                        spec.rate_lo
                    };
                    let count = if rate > 0.0 {
                        Poisson::new(rate).expect("positive rate").sample(rng) as u64
                    } else {
                        0
                    };
                    out.counts[(s * spec.t_len + t) * spec.channels + ch] =
                        count.min(u16::MAX as u64) as u16;
                }
            }
            s += 1;
        }
    }
    out
}
