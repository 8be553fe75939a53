//! Datasets, per-device partitions and binary dataset snapshots.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::RandomStream;

/// Row-major feature matrix with regression targets and optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub dim: usize,
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
    pub labels: Option<Vec<u32>>,
    pub classes: usize,
}

impl Dataset {
    pub fn regression(dim: usize, features: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        let n = targets.len();
        if dim == 0 || features.len() != n * dim {
            return invalid(format!(
                "dataset: {} feature values for {n} samples of dim {dim}",
                features.len()
            ));
        }
        Ok(Dataset {
            n,
            dim,
            features,
            targets,
            labels: None,
            classes: 0,
        })
    }

    pub fn classification(dim: usize, features: Vec<f64>, labels: Vec<u32>, classes: usize) -> Result<Self> {
        let n = labels.len();
        if dim == 0 || features.len() != n * dim {
            return invalid(format!(
                "dataset: {} feature values for {n} samples of dim {dim}",
                features.len()
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return invalid(format!("dataset: label {l} >= classes {classes}"));
        }
        Ok(Dataset {
            n,
            dim,
            features,
            targets: labels.iter().map(|&l| l as f64).collect(),
            labels: Some(labels),
            classes,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Keeps the first `n` samples.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.n);
        Dataset {
            n,
            dim: self.dim,
            features: self.features[..n * self.dim].to_vec(),
            targets: self.targets[..n].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            classes: self.classes,
        }
    }

    fn sort_key(&self, i: usize) -> f64 {
        self.targets[i]
    }

    /// Writes a little-endian binary snapshot tagged with the generating seed.
    pub fn write_snapshot(&self, path: &Path, seed: u64) -> Result<()> {
        let mut out = Vec::with_capacity(48 + 8 * self.features.len() + 12 * self.n);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&seed.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.classes as u64).to_le_bytes());
        out.push(self.labels.is_some() as u8);
        for x in self.features.iter().chain(&self.targets) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    /// Reads a snapshot, returning the seed it was generated from.
    pub fn read_snapshot(path: &Path) -> Result<(u64, Dataset)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad snapshot magic".into(),
            });
        }
        let seed = r.u64()?;
        let n = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let classes = r.u64()? as usize;
        let has_labels = r.take(1)?[0] != 0;
        let features = (0..n * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let targets = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let labels = if has_labels {
            Some((0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: "trailing bytes after snapshot".into(),
            });
        }
        Ok((
            seed,
            Dataset {
                n,
                dim,
                features,
                targets,
                labels,
                classes,
            },
        ))
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"OTFLDS01";

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Per-device sample index sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPartition {
    pub parts: Vec<Vec<usize>>,
}

impl DataPartition {
    pub fn new(parts: Vec<Vec<usize>>) -> Result<Self> {
        if parts.is_empty() {
            return invalid("partition: no devices");
        }
        if let Some(k) = parts.iter().position(|p| p.is_empty()) {
            return invalid(format!("partition: device {k} has no samples"));
        }
        Ok(DataPartition { parts })
    }

    pub fn devices(&self) -> usize {
        self.parts.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.parts.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.parts.iter().map(Vec::len).sum()
    }

    /// Contiguous equal-size split of `0..n` (remainder to the first devices).
    pub fn contiguous(n: usize, devices: usize) -> Result<Self> {
        if devices == 0 || devices > n {
            return invalid(format!("partition: cannot split {n} samples over {devices} devices"));
        }
        let order: Vec<usize> = (0..n).collect();
        DataPartition::new(split_even(&order, devices))
    }
}

fn split_even(order: &[usize], devices: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    let base = n / devices;
    let extra = n % devices;
    let mut parts = Vec::with_capacity(devices);
    let mut start = 0;
    for k in 0..devices {
        let len = base + usize::from(k < extra);
        let mut part = order[start..start + len].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += len;
    }
    parts
}

/// Splits a dataset over `devices` devices.
///
/// Each sample gets the key `skew * label_rank + (1 - skew) * u` with `u`
/// uniform; samples are sorted by key and cut into equal contiguous shards.
/// `skew = 0` is an i.i.d. uniform split, `skew = 1` gives label-sorted shards.
pub fn partition_data(stream: &RandomStream, dataset: &Dataset, devices: usize, skew: f64) -> Result<DataPartition> {
    if !(0.0..=1.0).contains(&skew) {
        return invalid(format!("partition: skew {skew} outside [0, 1]"));
    }
    if devices == 0 || devices > dataset.n {
        return invalid(format!(
            "partition: cannot split {} samples over {devices} devices",
            dataset.n
        ));
    }
    let mut rng = stream.rng();
    let mut by_label: Vec<usize> = (0..dataset.n).collect();
    by_label.shuffle(&mut rng);
    by_label.sort_by(|&a, &b| dataset.sort_key(a).total_cmp(&dataset.sort_key(b)));
    let denom = (dataset.n.max(2) - 1) as f64;
    let mut keyed: Vec<(f64, usize)> = by_label
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let u: f64 = rng.random();
            (skew * rank as f64 / denom + (1.0 - skew) * u, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    DataPartition::new(split_even(&order, devices))
}
