//! EMG envelope extraction and joint-angle conditioning.
//!
//! Filters are Butterworth designs realized as cascaded second-order
//! sections (bilinear transform with frequency prewarping). Zero-phase
//! filtering runs each channel forward and backward after odd-extension
//! padding, with section states initialized to the steady state of the
//! first sample.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("corner frequency {corner} Hz is not below Nyquist ({nyquist} Hz)")]
    NyquistViolation { corner: f64, nyquist: f64 },
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("MVC peak for channel {channel} must be > 0, got {value}")]
    NonPositiveMvc { channel: usize, value: f64 },
    #[error("series has {len} samples, at least {needed} required")]
    TooShort { len: usize, needed: usize },
    #[error("series time ranges do not overlap")]
    NoOverlap,
    #[error("invalid series: {0}")]
    InvalidSeries(String),
}

/// Uniformly sampled multichannel signal. Sample `i` is at `t0 + i / rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformSeries {
    pub rate: f64,
    pub t0: f64,
    channels: Vec<Vec<f64>>,
}

impl UniformSeries {
    pub fn new(rate: f64, t0: f64, channels: Vec<Vec<f64>>) -> Result<Self, SignalError> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(SignalError::InvalidSeries(format!("rate must be > 0, got {rate}")));
        }
        if channels.is_empty() {
            return Err(SignalError::InvalidSeries("no channels".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(SignalError::InvalidSeries("channel lengths differ".into()));
        }
        if let Some((c, i)) = channels
            .iter()
            .enumerate()
            .find_map(|(c, ch)| ch.iter().position(|v| !v.is_finite()).map(|i| (c, i)))
        {
            return Err(SignalError::InvalidSeries(format!(
                "non-finite value in channel {c} at sample {i}"
            )));
        }
        Ok(Self { rate, t0, channels })
    }

    pub fn single(rate: f64, t0: f64, values: Vec<f64>) -> Result<Self, SignalError> {
        Self::new(rate, t0, vec![values])
    }

    /// Builds a series from frames (one slice of channel values per sample).
    pub fn from_frames<F: AsRef<[f64]>>(rate: f64, t0: f64, frames: &[F]) -> Result<Self, SignalError> {
        let n_ch = frames.first().map(|f| f.as_ref().len()).unwrap_or(1);
        let mut channels = vec![Vec::with_capacity(frames.len()); n_ch];
        for (i, frame) in frames.iter().enumerate() {
            let frame = frame.as_ref();
            if frame.len() != n_ch {
                return Err(SignalError::InvalidSeries(format!(
                    "frame {i} has {} channels, expected {n_ch}",
                    frame.len()
                )));
            }
            for (c, v) in frame.iter().enumerate() {
                channels[c].push(*v);
            }
        }
        Self::new(rate, t0, channels)
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn frame(&self, i: usize) -> Vec<f64> {
        self.channels.iter().map(|c| c[i]).collect()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.rate
    }

    pub fn end_time(&self) -> f64 {
        self.time(self.len().saturating_sub(1))
    }

    fn map_channels(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self {
            rate: self.rate,
            t0: self.t0,
            channels: self.channels.iter().map(|c| f(c)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterKind {
    Lowpass { cutoff: f64 },
    Bandpass { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(flatten)]
    pub kind: FilterKind,
    /// Prototype order. A band-pass of order `n` has `2n` poles.
    pub order: usize,
}

impl FilterSpec {
    pub fn lowpass(cutoff: f64, order: usize) -> Self {
        Self {
            kind: FilterKind::Lowpass { cutoff },
            order,
        }
    }

    pub fn bandpass(low: f64, high: f64, order: usize) -> Self {
        Self {
            kind: FilterKind::Bandpass { low, high },
            order,
        }
    }

    fn check(&self, rate: f64) -> Result<(), SignalError> {
        if self.order == 0 {
            return Err(SignalError::InvalidFilter("order must be >= 1".into()));
        }
        let nyquist = rate / 2.0;
        let corners: Vec<f64> = match self.kind {
            FilterKind::Lowpass { cutoff } => vec![cutoff],
            FilterKind::Bandpass { low, high } => {
                if !(low < high) {
                    return Err(SignalError::InvalidFilter(format!(
                        "band-pass corners must satisfy low < high, got {low}, {high}"
                    )));
                }
                vec![low, high]
            }
        };
        for corner in corners {
            if !(corner > 0.0) {
                return Err(SignalError::InvalidFilter(format!("corner must be > 0, got {corner}")));
            }
            if corner >= nyquist {
                return Err(SignalError::NyquistViolation { corner, nyquist });
            }
        }
        Ok(())
    }
}

/// One second-order section, `a[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + z_inv * self.b[1] + z2 * self.b[2]) / (self.a[0] + z_inv * self.a[1] + z2 * self.a[2])
    }

    /// Direct-form-II-transposed state reached after a constant input `x`.
    fn steady_state(&self, x: f64) -> [f64; 2] {
        let gain = self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>();
        let y = gain * x;
        let s2 = self.b[2] * x - self.a[2] * y;
        let s1 = self.b[1] * x - self.a[1] * y + s2;
        [s1, s2]
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }
}

/// A cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    pub fn design(spec: &FilterSpec, rate: f64) -> Result<Self, SignalError> {
        spec.check(rate)?;
        let n = spec.order;
        let warp = |f: f64| 2.0 * rate * (PI * f / rate).tan();
        let bilinear = |p: Complex64| (2.0 * rate + p) / (2.0 * rate - p);
        // Left-half-plane poles of the unit-cutoff prototype with Im >= 0.
        let prototype: Vec<Complex64> = (0..n)
            .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n + 1) as f64 / (2 * n) as f64))
            .filter(|p| p.im >= -1e-12)
            .collect();

        let mut sections = Vec::new();
        match spec.kind {
            FilterKind::Lowpass { cutoff } => {
                let wc = warp(cutoff);
                for p in prototype {
                    let z = bilinear(p * wc);
                    if p.im.abs() < 1e-12 {
                        sections.push(Biquad {
                            b: [1.0, 1.0, 0.0],
                            a: [1.0, -z.re, 0.0],
                        });
                    } else {
                        sections.push(Biquad {
                            b: [1.0, 2.0, 1.0],
                            a: [1.0, -2.0 * z.re, z.norm_sqr()],
                        });
                    }
                }
                for sec in &mut sections {
                    let g = sec.dc_gain();
                    sec.b.iter_mut().for_each(|b| *b /= g);
                }
            }
            FilterKind::Bandpass { low, high } => {
                let w1 = warp(low);
                let w2 = warp(high);
                let bw = w2 - w1;
                let w0_sq = w1 * w2;
                for p in prototype {
                    let half = p * (bw / 2.0);
                    let root = (half * half - w0_sq).sqrt();
                    let s_plus = bilinear(half + root);
                    let s_minus = bilinear(half - root);
                    if p.im.abs() < 1e-12 {
                        // Real prototype pole: its two images are a conjugate or real pair.
                        let sum = s_plus + s_minus;
                        let prod = s_plus * s_minus;
                        sections.push(Biquad {
                            b: [1.0, 0.0, -1.0],
                            a: [1.0, -sum.re, prod.re],
                        });
                    } else {
                        for z in [s_plus, s_minus] {
                            sections.push(Biquad {
                                b: [1.0, 0.0, -1.0],
                                a: [1.0, -2.0 * z.re, z.norm_sqr()],
                            });
                        }
                    }
                }
                // Unit gain at the prewarped geometric center frequency.
                let w_center = 2.0 * (w0_sq.sqrt() / (2.0 * rate)).atan();
                let mut filter = SosFilter { sections };
                let g = filter.response_at_omega(w_center).norm();
                let per_section = g.powf(1.0 / filter.sections.len() as f64);
                for sec in &mut filter.sections {
                    sec.b.iter_mut().for_each(|b| *b /= per_section);
                }
                return Ok(filter);
            }
        }
        Ok(SosFilter { sections })
    }

    fn response_at_omega(&self, omega: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -omega);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Complex frequency response at `freq` Hz for sampling rate `rate`.
    pub fn response(&self, freq: f64, rate: f64) -> Complex64 {
        self.response_at_omega(2.0 * PI * freq / rate)
    }

    /// Causal filtering with zero initial state.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.run(x, None)
    }

    fn run(&self, x: &[f64], initial: Option<f64>) -> Vec<f64> {
        let mut y = x.to_vec();
        let mut level = initial;
        for sec in &self.sections {
            let [b0, b1, b2] = sec.b;
            let [_, a1, a2] = sec.a;
            let [mut s1, mut s2] = match level {
                Some(x0) => sec.steady_state(x0),
                None => [0.0, 0.0],
            };
            for v in y.iter_mut() {
                let input = *v;
                let out = b0 * input + s1;
                s1 = b1 * input - a1 * out + s2;
                s2 = b2 * input - a2 * out;
                *v = out;
            }
            level = level.map(|x0| sec.dc_gain() * x0);
        }
        y
    }

    /// Number of samples of odd-extension padding used by [`Self::filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    /// Forward–backward filtering: zero phase, squared magnitude response.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.pad_len().min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let forward = self.run(&ext, Some(ext[0]));
        let mut rev: Vec<f64> = forward.into_iter().rev().collect();
        let first = rev[0];
        rev = self.run(&rev, Some(first));
        rev.reverse();
        rev[pad..pad + n].to_vec()
    }
}

/// Butterworth filtering of every channel; output length equals input length.
pub fn butterworth_filter(
    x: &UniformSeries,
    spec: &FilterSpec,
    zero_phase: bool,
) -> Result<UniformSeries, SignalError> {
    let filter = SosFilter::design(spec, x.rate)?;
    Ok(x.map_channels(|c| {
        if zero_phase {
            filter.filtfilt(c)
        } else {
            filter.apply(c)
        }
    }))
}

/// Full-wave rectification.
pub fn rectify(x: &UniformSeries) -> UniformSeries {
    x.map_channels(|c| c.iter().map(|v| v.abs()).collect())
}

pub fn mvc_normalize(env: &UniformSeries, mvc_peak: &[f64]) -> Result<UniformSeries, SignalError> {
    if mvc_peak.len() != env.channel_count() {
        return Err(SignalError::InvalidSeries(format!(
            "{} MVC peaks for {} channels",
            mvc_peak.len(),
            env.channel_count()
        )));
    }
    if let Some((channel, &value)) = mvc_peak
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
    {
        return Err(SignalError::NonPositiveMvc { channel, value });
    }
    let channels = env
        .channels
        .iter()
        .zip(mvc_peak)
        .map(|(c, peak)| c.iter().map(|v| v / peak).collect())
        .collect();
    Ok(UniformSeries {
        rate: env.rate,
        t0: env.t0,
        channels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeConfig {
    pub bandpass_low: f64,
    pub bandpass_high: f64,
    pub bandpass_order: usize,
    pub lowpass_cutoff: f64,
    pub lowpass_order: usize,
    pub zero_phase: bool,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self {
            bandpass_low: 10.0,
            bandpass_high: 450.0,
            bandpass_order: 4,
            lowpass_cutoff: 7.0,
            lowpass_order: 4,
            zero_phase: true,
        }
    }
}

impl EnvelopeConfig {
    pub fn bandpass(&self) -> FilterSpec {
        FilterSpec::bandpass(self.bandpass_low, self.bandpass_high, self.bandpass_order)
    }

    pub fn lowpass(&self) -> FilterSpec {
        FilterSpec::lowpass(self.lowpass_cutoff, self.lowpass_order)
    }
}

/// Linear envelope before MVC normalization: band-pass, rectify, low-pass.
pub fn linear_envelope(raw: &UniformSeries, cfg: &EnvelopeConfig) -> Result<UniformSeries, SignalError> {
    let band = butterworth_filter(raw, &cfg.bandpass(), cfg.zero_phase)?;
    butterworth_filter(&rectify(&band), &cfg.lowpass(), cfg.zero_phase)
}

/// Band-pass, rectify, low-pass, then divide by the per-channel MVC peak.
pub fn emg_envelope(
    raw: &UniformSeries,
    mvc_peak: &[f64],
    cfg: &EnvelopeConfig,
) -> Result<UniformSeries, SignalError> {
    let env = linear_envelope(raw, cfg)?;
    // Zero-phase low-pass of a nonnegative signal can ring slightly below zero.
    let env = env.map_channels(|c| c.iter().map(|v| v.max(0.0)).collect());
    mvc_normalize(&env, mvc_peak)
}

/// Per-channel maximum of the linear envelopes of the MVC recordings.
pub fn mvc_peaks(mvc_trials: &[UniformSeries], cfg: &EnvelopeConfig) -> Result<Vec<f64>, SignalError> {
    let first = mvc_trials
        .first()
        .ok_or_else(|| SignalError::InvalidSeries("no MVC trials".into()))?;
    let mut peaks = vec![0.0f64; first.channel_count()];
    for trial in mvc_trials {
        let env = linear_envelope(trial, cfg)?;
        if env.channel_count() != peaks.len() {
            return Err(SignalError::InvalidSeries("MVC trials differ in channel count".into()));
        }
        for (peak, ch) in peaks.iter_mut().zip(env.channels()) {
            *peak = ch.iter().copied().fold(*peak, f64::max);
        }
    }
    Ok(peaks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianConfig {
    pub sigma_samples: f64,
    pub half_width_samples: usize,
}

impl Default for GaussianConfig {
    /// σ = 10 samples truncated at ±3σ.
    fn default() -> Self {
        Self {
            sigma_samples: 10.0,
            half_width_samples: 30,
        }
    }
}

impl GaussianConfig {
    /// σ = 10 with a window of 6 read literally as the half-width.
    pub fn literal() -> Self {
        Self {
            sigma_samples: 10.0,
            half_width_samples: 6,
        }
    }
}

/// Truncated, renormalized Gaussian kernel of length `2 * half_width + 1`.
pub fn gaussian_kernel(sigma: f64, half_width: usize) -> Vec<f64> {
    let hw = half_width as i64;
    let raw: Vec<f64> = (-hw..=hw)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Maps an out-of-range index into `0..n` by mirror reflection about the
/// edges (`d c b a | a b c d | d c b a`).
fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub fn gaussian_smooth(
    x: &UniformSeries,
    sigma_samples: f64,
    half_width_samples: usize,
) -> Result<UniformSeries, SignalError> {
    if !(sigma_samples > 0.0 && sigma_samples.is_finite()) || half_width_samples == 0 {
        return Err(SignalError::InvalidFilter(format!(
            "gaussian needs sigma > 0 and half-width >= 1, got {sigma_samples}, {half_width_samples}"
        )));
    }
    let kernel = gaussian_kernel(sigma_samples, half_width_samples);
    let hw = half_width_samples as i64;
    Ok(x.map_channels(|c| {
        let n = c.len();
        (0..n as i64)
            .map(|i| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * c[reflect_index(i + k as i64 - hw, n)])
                    .sum()
            })
            .collect()
    }))
}

/// Central differences with second-order one-sided stencils at the ends.
pub fn central_difference(x: &UniformSeries, order: u8) -> Result<UniformSeries, SignalError> {
    if !(order == 1 || order == 2) {
        return Err(SignalError::InvalidFilter(format!(
            "difference order must be 1 or 2, got {order}"
        )));
    }
    if x.len() < 3 {
        return Err(SignalError::TooShort {
            len: x.len(),
            needed: 3,
        });
    }
    let dt = x.dt();
    Ok(x.map_channels(|c| match order {
        1 => first_difference(c, dt),
        _ => second_difference(c, dt),
    }))
}

fn first_difference(c: &[f64], dt: f64) -> Vec<f64> {
    let n = c.len();
    let mut d = vec![0.0; n];
    d[0] = (-3.0 * c[0] + 4.0 * c[1] - c[2]) / (2.0 * dt);
    for i in 1..n - 1 {
        d[i] = (c[i + 1] - c[i - 1]) / (2.0 * dt);
    }
    d[n - 1] = (3.0 * c[n - 1] - 4.0 * c[n - 2] + c[n - 3]) / (2.0 * dt);
    d
}

fn second_difference(c: &[f64], dt: f64) -> Vec<f64> {
    let n = c.len();
    let dt2 = dt * dt;
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        d[i] = (c[i + 1] - 2.0 * c[i] + c[i - 1]) / dt2;
    }
    if n >= 4 {
        d[0] = (2.0 * c[0] - 5.0 * c[1] + 4.0 * c[2] - c[3]) / dt2;
        d[n - 1] = (2.0 * c[n - 1] - 5.0 * c[n - 2] + 4.0 * c[n - 3] - c[n - 4]) / dt2;
    } else {
        d[0] = d[1];
        d[n - 1] = d[n - 2];
    }
    d
}

/// Envelope and angles on the angle sample grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSeries {
    pub emg: UniformSeries,
    pub angles: UniformSeries,
}

/// Decimates `emg_env` onto the sample times of `angles` by averaging the
/// envelope over each angle sample period `[t - T/2, t + T/2)`. Angle
/// samples whose window is not fully covered by the envelope are dropped.
pub fn align_and_resample(
    emg_env: &UniformSeries,
    angles: &UniformSeries,
) -> Result<AlignedSeries, SignalError> {
    let period = angles.dt();
    let n_env = emg_env.len() as i64;
    // Tolerance in envelope samples for boundary rounding.
    let eps = 1e-9;
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    for k in 0..angles.len() {
        let t = angles.time(k);
        let lo = ((t - period / 2.0 - emg_env.t0) * emg_env.rate - eps).ceil() as i64;
        let hi = ((t + period / 2.0 - emg_env.t0) * emg_env.rate - eps).ceil() as i64;
        if lo < 0 || hi > n_env || hi <= lo {
            continue;
        }
        let (lo, hi) = (lo as usize, hi as usize);
        let means: Vec<f64> = emg_env
            .channels()
            .iter()
            .map(|c| c[lo..hi].iter().sum::<f64>() / (hi - lo) as f64)
            .collect();
        kept.push(k);
        rows.push(means);
    }
    let (Some(&first), Some(&last)) = (kept.first(), kept.last()) else {
        return Err(SignalError::NoOverlap);
    };
    let angle_rows: Vec<Vec<f64>> = (first..=last).map(|k| angles.frame(k)).collect();
    let t0 = angles.time(first);
    Ok(AlignedSeries {
        emg: UniformSeries::from_frames(angles.rate, t0, &rows)?,
        angles: UniformSeries::from_frames(angles.rate, t0, &angle_rows)?,
    })
}
