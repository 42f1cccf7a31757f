//! EEG preprocessing: brick-wall bandpass, Welch PSD, band powers and the
//! fixed-length normalized feature vector fed to the physiological encoder.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{DreamError, Result};

pub const DEFAULT_SAMPLE_RATE: f64 = 256.0;
pub const DEFAULT_FEATURE_DIM: usize = 768;
pub const PASS_LO: f64 = 0.5;
pub const PASS_HI: f64 = 12.0;

/// Analysis bands, in feature layout order.
pub const BANDS: [(&str, f64, f64); 3] = [("delta", 0.5, 4.0), ("theta", 4.0, 8.0), ("alpha", 8.0, 12.0)];

#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording {
    pub sample_rate: f64,
    pub channels: Vec<Vec<f64>>,
}

impl EegRecording {
    pub fn new(sample_rate: f64, channels: Vec<Vec<f64>>) -> Result<Self> {
        let rec = EegRecording {
            sample_rate,
            channels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 2.0 * PASS_HI) {
            return Err(DreamError::config(format!(
                "sample rate {} Hz must exceed {} Hz",
                self.sample_rate,
                2.0 * PASS_HI
            )));
        }
        if self.channels.is_empty() {
            return Err(DreamError::input("recording has no channels"));
        }
        let n = self.channels[0].len();
        if self.channels.iter().any(|c| c.len() != n) {
            return Err(DreamError::input("channels differ in length"));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    /// Header line `EEG1 <fs> <channels> <samples>` followed by
    /// little-endian `f32` samples, channel-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "EEG1 {} {} {}\n",
            self.sample_rate,
            self.channels.len(),
            self.samples()
        )
        .into_bytes();
        for ch in &self.channels {
            for &v in ch {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DreamError::Parse {
                line: 1,
                msg: "missing EEG header line".into(),
            })?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| DreamError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        let bad = |msg: String| DreamError::Parse { line: 1, msg };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "EEG1" {
            return Err(bad(format!("malformed EEG header {header:?}")));
        }
        let fs: f64 = fields[1].parse().map_err(|_| bad(format!("bad sample rate {:?}", fields[1])))?;
        let c: usize = fields[2].parse().map_err(|_| bad(format!("bad channel count {:?}", fields[2])))?;
        let n: usize = fields[3].parse().map_err(|_| bad(format!("bad sample count {:?}", fields[3])))?;
        let body = &bytes[nl + 1..];
        if body.len() != c * n * 4 {
            return Err(bad(format!(
                "expected {} sample bytes, found {}",
                c * n * 4,
                body.len()
            )));
        }
        let mut samples = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
        let channels = (0..c).map(|_| samples.by_ref().take(n).collect()).collect();
        EegRecording::new(fs, channels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn bin_freq(k: usize, n: usize, fs: f64) -> f64 {
    let k = if k <= n / 2 { k } else { n - k };
    k as f64 * fs / n as f64
}

fn fft(buf: &mut [Complex<f64>], inverse: bool) {
    let mut planner = FftPlanner::new();
    let plan = if inverse {
        planner.plan_fft_inverse(buf.len())
    } else {
        planner.plan_fft_forward(buf.len())
    };
    plan.process(buf);
}

/// Zero-phase brick-wall filter: forward FFT, zero every bin whose
/// frequency lies outside `[lo, hi]`, inverse FFT.
pub fn bandpass(signal: &[f64], lo: f64, hi: f64, fs: f64) -> Result<Vec<f64>> {
    if !(fs > 2.0 * hi) {
        return Err(DreamError::config(format!(
            "sample rate {fs} Hz must exceed twice the upper cutoff {hi} Hz"
        )));
    }
    if lo > hi {
        return Err(DreamError::input(format!("inverted pass band [{lo}, {hi}]")));
    }
    if signal.len() < 2 {
        return Err(DreamError::input("bandpass needs at least 2 samples"));
    }
    let n = signal.len();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft(&mut buf, false);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = bin_freq(k, n, fs);
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    fft(&mut buf, true);
    Ok(buf.iter().map(|c| c.re / n as f64).collect())
}

/// One-sided power spectral density.
#[derive(Debug, Clone, PartialEq)]
pub struct Psd {
    /// Bin spacing `fs / window_len`.
    pub df: f64,
    pub power: Vec<f64>,
}

impl Psd {
    pub fn freq(&self, bin: usize) -> f64 {
        bin as f64 * self.df
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }

    pub fn argmax(&self) -> usize {
        self.power
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i)
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Welch estimate: periodic-Hann segments of `window_len` samples with the
/// given fractional overlap, one-sided density periodograms averaged.
pub fn welch_psd(signal: &[f64], fs: f64, window_len: usize, overlap: f64) -> Result<Psd> {
    if window_len < 2 {
        return Err(DreamError::config("Welch window must span at least 2 samples"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(DreamError::config(format!("overlap {overlap} outside [0, 1)")));
    }
    if signal.len() < window_len {
        return Err(DreamError::input(format!(
            "signal of {} samples is shorter than one {window_len}-sample window",
            signal.len()
        )));
    }
    let step = ((window_len as f64 * (1.0 - overlap)).round() as usize).max(1);
    let window = hann(window_len);
    let norm = fs * window.iter().map(|w| w * w).sum::<f64>();
    let bins = window_len / 2 + 1;
    let mut power = vec![0.0; bins];
    let mut segments = 0usize;
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    let mut planner = FftPlanner::new();
    let plan = planner.plan_fft_forward(window_len);
    let mut start = 0;
    while start + window_len <= signal.len() {
        for ((b, &x), &w) in buf.iter_mut().zip(&signal[start..start + window_len]).zip(&window) {
            *b = Complex::new(x * w, 0.0);
        }
        plan.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            let mut v = buf[k].norm_sqr() / norm;
            if k != 0 && !(window_len % 2 == 0 && k == window_len / 2) {
                v *= 2.0;
            }
            *p += v;
        }
        segments += 1;
        start += step;
    }
    power.iter_mut().for_each(|p| *p /= segments as f64);
    Ok(Psd {
        df: fs / window_len as f64,
        power,
    })
}

/// Sum of PSD bins whose center frequency lies in `[lo, hi)`.
pub fn band_power(psd: &Psd, band: (f64, f64)) -> Result<f64> {
    let (lo, hi) = band;
    if !(lo < hi) {
        return Err(DreamError::input(format!("inverted band [{lo}, {hi})")));
    }
    let nyquist = psd.freq(psd.power.len().saturating_sub(1));
    if lo < 0.0 || lo > nyquist {
        return Err(DreamError::input(format!(
            "band [{lo}, {hi}) outside PSD range [0, {nyquist}]"
        )));
    }
    Ok(psd
        .power
        .iter()
        .enumerate()
        .filter(|&(k, _)| {
            let f = psd.freq(k);
            f >= lo && f < hi
        })
        .map(|(_, p)| p)
        .sum())
}

/// Feature extraction settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub dim: usize,
    pub window_sec: f64,
    pub hop_sec: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            dim: DEFAULT_FEATURE_DIM,
            window_sec: 2.0,
            hop_sec: 1.0,
        }
    }
}

/// Normalized band-power feature vector of length `dim`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandFeatures {
    pub values: Vec<f64>,
}

impl BandFeatures {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Number of raw band-power entries `featurize` produces before pad/pool.
pub fn raw_feature_len(recording: &EegRecording, cfg: &FeatureConfig) -> usize {
    let (win, hop) = window_hop(recording.sample_rate, cfg);
    let n = recording.samples();
    if n < win {
        return 0;
    }
    ((n - win) / hop + 1) * recording.channels.len() * BANDS.len()
}

fn window_hop(fs: f64, cfg: &FeatureConfig) -> (usize, usize) {
    let win = (cfg.window_sec * fs).round() as usize;
    let hop = ((cfg.hop_sec * fs).round() as usize).max(1);
    (win, hop)
}

/// Bandpass each channel, then for every sliding window and channel emit the
/// delta/theta/alpha powers (window-major, then channel, then band). The
/// vector is zero-padded or mean-pooled to `dim` and scaled into `[0, 1]`
/// by min-max normalization anchored at zero power.
pub fn featurize(recording: &EegRecording, cfg: &FeatureConfig) -> Result<BandFeatures> {
    recording.validate()?;
    if cfg.dim == 0 {
        return Err(DreamError::config("feature dimension must be positive"));
    }
    let fs = recording.sample_rate;
    let (win, hop) = window_hop(fs, cfg);
    if win < 2 || recording.samples() < win {
        return Err(DreamError::input(format!(
            "recording of {} samples is shorter than one {win}-sample window",
            recording.samples()
        )));
    }
    let filtered: Vec<Vec<f64>> = recording
        .channels
        .iter()
        .map(|ch| bandpass(ch, PASS_LO, PASS_HI, fs))
        .collect::<Result<_>>()?;
    let windows = (recording.samples() - win) / hop + 1;
    let mut raw = Vec::with_capacity(windows * filtered.len() * BANDS.len());
    for w in 0..windows {
        let start = w * hop;
        for ch in &filtered {
            let psd = welch_psd(&ch[start..start + win], fs, win, 0.5)?;
            for &(_, lo, hi) in &BANDS {
                raw.push(band_power(&psd, (lo, hi))?);
            }
        }
    }

    let mut values = if raw.len() <= cfg.dim {
        let mut v = raw;
        v.resize(cfg.dim, 0.0);
        v
    } else {
        (0..cfg.dim)
            .map(|g| {
                let (a, b) = (g * raw.len() / cfg.dim, (g + 1) * raw.len() / cfg.dim);
                raw[a..b].iter().sum::<f64>() / (b - a) as f64
            })
            .collect()
    };
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Ok(BandFeatures { values })
}

/// Gaussian noise shaped in the frequency domain so that each analysis band
/// carries amplitude `band_gain[b]`; content outside 0.5 to 12 Hz is removed.
pub fn band_limited_noise<R: Rng + ?Sized>(
    rng: &mut R,
    samples: usize,
    fs: f64,
    band_gain: [f64; 3],
) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..samples)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    fft(&mut buf, false);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = bin_freq(k, samples, fs);
        let gain = BANDS
            .iter()
            .zip(band_gain)
            .find(|((_, lo, hi), _)| f >= *lo && f < *hi)
            .map_or(0.0, |(_, g)| g);
        *c *= gain;
    }
    fft(&mut buf, true);
    buf.iter().map(|c| c.re / samples as f64).collect()
}
