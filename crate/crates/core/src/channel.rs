//! Wireless multiple-access channel: per-device coefficients, analog
//! superposition, additive receiver noise and the server-side gain.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{gaussian_vector, rayleigh_sample, Purpose, RandomStream, StreamId, Vector};

/// Real, positive channel amplitudes `h_k`, receiver noise variance per
/// component and the model dimension `N` (the noise vector length).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub h: Vec<f64>,
    pub sigma2: f64,
    pub dim: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ChannelRealization {
    pub fn new(h: Vec<f64>, sigma2: f64, dim: usize) -> Result<Self> {
        let chan = ChannelRealization {
            h,
            sigma2,
            dim,
            seed: None,
        };
        chan.validate()?;
        Ok(chan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h.is_empty() {
            return invalid("channel: at least one device required");
        }
        if let Some((k, h)) = self.h.iter().enumerate().find(|(_, h)| !(**h > 0.0) || !h.is_finite()) {
            return invalid(format!("channel: h[{k}] = {h} must be positive"));
        }
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return invalid(format!("channel: sigma2 = {} must be >= 0", self.sigma2));
        }
        if self.dim == 0 {
            return invalid("channel: dim must be positive");
        }
        Ok(())
    }

    pub fn devices(&self) -> usize {
        self.h.len()
    }

    /// `N * sigma^2`, the total noise energy per received vector.
    pub fn noise_energy(&self) -> f64 {
        self.dim as f64 * self.sigma2
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let chan: ChannelRealization = serde_json::from_str(text)?;
        chan.validate()?;
        Ok(chan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Server gain `a`, device gains `b_k` and their caps `b_k^max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransmitConfig {
    pub a: f64,
    pub b: Vec<f64>,
    pub b_max: Vec<f64>,
}

impl TransmitConfig {
    pub fn new(a: f64, b: Vec<f64>, b_max: Vec<f64>) -> Result<Self> {
        let cfg = TransmitConfig { a, b, b_max };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) || !self.a.is_finite() {
            return invalid(format!("transmit: a = {} must be positive", self.a));
        }
        if self.b.len() != self.b_max.len() {
            return invalid("transmit: b and b_max lengths differ");
        }
        for (k, (&b, &bm)) in self.b.iter().zip(&self.b_max).enumerate() {
            if !(bm > 0.0) || !bm.is_finite() {
                return invalid(format!("transmit: b_max[{k}] = {bm} must be positive"));
            }
            // The solver may land a hair above the cap through rounding.
            if !(b >= 0.0) || b > bm * (1.0 + 1e-12) {
                return invalid(format!("transmit: b[{k}] = {b} outside [0, {bm}]"));
            }
        }
        Ok(())
    }

    /// `sum_k h_k b_k`
    pub fn effective_gain(&self, chan: &ChannelRealization) -> f64 {
        self.b.iter().zip(&chan.h).map(|(b, h)| b * h).sum()
    }
}

/// Received and server-scaled signal `a (sum_k h_k b_k x_k + z)`.
pub fn ota_superpose(
    signals: &[Vector],
    cfg: &TransmitConfig,
    chan: &ChannelRealization,
    noise_stream: &RandomStream,
) -> Result<Vector> {
    let gains: Vec<f64> = cfg.b.clone();
    ota_superpose_with_gains(signals, &gains, cfg.a, chan, noise_stream)
}

/// Same as [`ota_superpose`] with explicit per-device gains; used when a
/// strategy rescales the planned gains.
pub(crate) fn ota_superpose_with_gains(
    signals: &[Vector],
    b: &[f64],
    a: f64,
    chan: &ChannelRealization,
    noise_stream: &RandomStream,
) -> Result<Vector> {
    if signals.len() != chan.devices() || b.len() != chan.devices() {
        return invalid(format!(
            "ota_superpose: {} signals, {} gains, {} channels",
            signals.len(),
            b.len(),
            chan.devices()
        ));
    }
    for (k, x) in signals.iter().enumerate() {
        x.check_len(chan.dim, &format!("ota_superpose: signal {k}"))?;
    }
    let mut y = gaussian_vector(noise_stream, chan.dim, chan.sigma2)?;
    for ((x, &bk), &hk) in signals.iter().zip(b).zip(&chan.h) {
        y.axpy(bk * hk, x);
    }
    Ok(y.scaled(a))
}

/// K independent Rayleigh coefficients with the given mean. Device `k` draws
/// from its own child stream, so the realization of one device does not
/// depend on K.
pub fn draw_channels(
    stream: &RandomStream,
    devices: usize,
    mean: f64,
    sigma2: f64,
    dim: usize,
) -> Result<ChannelRealization> {
    draw_channels_at(stream, devices, mean, sigma2, dim, 0)
}

/// Channel draw for a given round index; round 0 is the static realization.
pub fn draw_channels_at(
    stream: &RandomStream,
    devices: usize,
    mean: f64,
    sigma2: f64,
    dim: usize,
    round: u64,
) -> Result<ChannelRealization> {
    if devices == 0 {
        return invalid("draw_channels: K must be positive");
    }
    if !(mean > 0.0) || !mean.is_finite() {
        return invalid(format!("draw_channels: mean must be positive, got {mean}"));
    }
    let h = (0..devices)
        .map(|k| {
            let mut rng = stream.derive(StreamId::new(k as u32, round, Purpose::Channel)).rng();
            rayleigh_sample(&mut rng, mean)
        })
        .collect();
    ChannelRealization::new(h, sigma2, dim)
}
