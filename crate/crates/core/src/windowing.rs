//! Random fixed-duration windows, resampling to the network input length and
//! the optional frequency-domain front end.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::wfdb::SignalRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub window_seconds: f64,
    pub target_length: usize,
    pub eval_windows_per_record: usize,
    pub train_windows_per_record_per_epoch: usize,
    pub rng_seed: u64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_seconds: 4.0,
            target_length: 192,
            eval_windows_per_record: 32,
            train_windows_per_record_per_epoch: 8,
            rng_seed: 0,
        }
    }
}

impl WindowConfig {
    /// Window length in source samples at the given rate.
    pub fn window_samples(&self, sampling_rate: f64) -> usize {
        (self.window_seconds * sampling_rate).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputDomain {
    Time,
    Frequency,
}

impl fmt::Display for InputDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputDomain::Time => "time",
            InputDomain::Frequency => "freq",
        })
    }
}

impl FromStr for InputDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "time" => Ok(InputDomain::Time),
            "freq" | "frequency" => Ok(InputDomain::Frequency),
            _ => Err(Error::Config(format!("unknown input domain {s:?}"))),
        }
    }
}

/// Batched network input `[B x L x C]` and where each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub tensor: Tensor,
    pub provenance: Vec<(String, usize)>,
}

impl WindowBatch {
    /// Stacks equally shaped `[L x C]` windows.
    pub fn from_windows(windows: Vec<Tensor>, provenance: Vec<(String, usize)>) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 || windows.iter().any(|w| w.shape() != shape.as_slice()) {
            return Err(Error::Shape("windows in a batch must share a [L, C] shape".into()));
        }
        if provenance.len() != windows.len() {
            return Err(Error::Shape("one provenance entry per window".into()));
        }
        let b = windows.len();
        let data: Vec<f64> = windows.into_iter().flat_map(Tensor::into_data).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in window batch".into()));
        }
        Ok(WindowBatch {
            tensor: Tensor::new([b, shape[0], shape[1]], data)?,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Start offset of a uniformly random window of `len` samples.
pub fn sample_offset<R: Rng + ?Sized>(num_samples: usize, len: usize, rng: &mut R) -> Result<usize> {
    if len == 0 || num_samples < len {
        return Err(Error::RecordTooShort {
            needed: len,
            available: num_samples,
        });
    }
    Ok(rng.random_range(0..=num_samples - len))
}

/// Copies samples `offset..offset + len` into a `[len x C]` tensor.
pub fn extract_window(record: &SignalRecord, offset: usize, len: usize) -> Result<Tensor> {
    if offset + len > record.num_samples() || len == 0 {
        return Err(Error::RecordTooShort {
            needed: offset + len,
            available: record.num_samples(),
        });
    }
    let c = record.num_channels();
    Tensor::new([len, c], record.samples()[offset * c..(offset + len) * c].to_vec())
}

/// A random contiguous window of `window_seconds`; returns the start offset
/// and the raw `[4 fs x C]` slice.
pub fn sample_window<R: Rng + ?Sized>(
    record: &SignalRecord,
    cfg: &WindowConfig,
    rng: &mut R,
) -> Result<(usize, Tensor)> {
    let len = cfg.window_samples(record.sampling_rate());
    let offset = sample_offset(record.num_samples(), len, rng)?;
    Ok((offset, extract_window(record, offset, len)?))
}

/// Linear interpolation of every channel at `target` equispaced points that
/// include both endpoints.
pub fn downsample(window: &Tensor, target: usize) -> Result<Tensor> {
    let s = window.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("downsample expects [L, C], got {s:?}")));
    }
    let (len, c) = (s[0], s[1]);
    if target > len {
        return Err(Error::UpsampleNotSupported {
            source_len: len,
            target_len: target,
        });
    }
    if target < 2 {
        return Err(Error::Config("target length must be at least 2".into()));
    }
    let src = window.data();
    let mut out = Vec::with_capacity(target * c);
    for i in 0..target {
        // Position i (len - 1) / (target - 1), split exactly into whole and fraction.
        let num = i * (len - 1);
        let lo = num / (target - 1);
        let hi = (lo + 1).min(len - 1);
        let frac = (num % (target - 1)) as f64 / (target - 1) as f64;
        for ch in 0..c {
            let a = src[lo * c + ch];
            let b = src[hi * c + ch];
            out.push(if frac == 0.0 { a } else { a + (b - a) * frac });
        }
    }
    Tensor::new([target, c], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FftConfig {
    pub d: usize,
    pub n_fft: usize,
    pub n_components: usize,
}

impl FftConfig {
    /// `n_fft = 2^ceil(log2 d)`, keeping the `n_fft / 2 + 1` non-redundant bins.
    pub fn for_length(d: usize) -> Self {
        let n_fft = d.max(1).next_power_of_two();
        FftConfig {
            d,
            n_fft,
            n_components: n_fft / 2 + 1,
        }
    }
}

/// In-place iterative radix-2 decimation-in-time FFT.
pub fn fft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "FFT length {n} is not a power of two");
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let step = -2.0 * PI / size as f64;
        for k in 0..half {
            let w = Complex64::from_polar(1.0, step * k as f64);
            for start in (0..n).step_by(size) {
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        size *= 2;
    }
}

/// Zero-pads one channel to `n_fft` and returns its full complex spectrum.
pub fn padded_spectrum(signal: &[f64], n_fft: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(n_fft, Complex64::new(0.0, 0.0));
    fft_in_place(&mut buf);
    buf
}

/// Magnitudes of the non-redundant bins of each channel: `[d x C] -> [n_components x C]`.
pub fn fft_features(window: &Tensor, cfg: &FftConfig) -> Result<Tensor> {
    let s = window.shape();
    if s.len() != 2 || s[0] != cfg.d {
        return Err(Error::Shape(format!("fft_features expects [{}, C], got {s:?}", cfg.d)));
    }
    if !window.all_finite() {
        return Err(Error::Numeric("non-finite sample in FFT input".into()));
    }
    let c = s[1];
    let mut out = vec![0.0; cfg.n_components * c];
    for ch in 0..c {
        let col: Vec<f64> = window.data().iter().skip(ch).step_by(c).copied().collect();
        let spec = padded_spectrum(&col, cfg.n_fft);
        for k in 0..cfg.n_components {
            out[k * c + ch] = spec[k].norm();
        }
    }
    Tensor::new([cfg.n_components, c], out)
}

/// Raw window to network input: downsample, then the FFT front end for
/// frequency-domain models.
pub fn featurize(raw: &Tensor, target_length: usize, domain: InputDomain) -> Result<Tensor> {
    let down = downsample(raw, target_length)?;
    match domain {
        InputDomain::Time => Ok(down),
        InputDomain::Frequency => fft_features(&down, &FftConfig::for_length(target_length)),
    }
}

/// Network input length for a domain.
pub fn input_length(target_length: usize, domain: InputDomain) -> usize {
    match domain {
        InputDomain::Time => target_length,
        InputDomain::Frequency => FftConfig::for_length(target_length).n_components,
    }
}
