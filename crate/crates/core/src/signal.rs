//! EEG records, preprocessing, patching, spectral targets, and a labeled
//! synthetic generator.
//!
//! The synthetic generator is invented for this crate: each class is a set of
//! frequency bands with amplitudes. Every record picks one integer-Hz tone
//! per band and channel with a random phase, holds it for the whole record,
//! and adds clipped Gaussian noise.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::dft;

pub const MAGIC: &[u8; 4] = b"EEGR";
pub const FORMAT_VERSION: u16 = 1;
/// Largest accepted absolute raw amplitude, in microvolts.
pub const MAX_ABS_UV: f32 = 100.0;
/// Raw microvolts are divided by this to obtain model units.
pub const UV_SCALE: f32 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EegRecord {
    pub channels: Vec<String>,
    pub sample_rate: u32,
    /// `C x S`, row-major.
    pub samples: Vec<f32>,
    pub label: Option<i32>,
}

impl EegRecord {
    pub fn new(channels: Vec<String>, sample_rate: u32, samples: Vec<f32>, label: Option<i32>) -> Result<Self> {
        if channels.is_empty() {
            return invalid("record needs at least one channel");
        }
        if sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        if samples.len() % channels.len() != 0 {
            return invalid(format!("{} samples do not split over {} channels", samples.len(), channels.len()));
        }
        Ok(Self { channels, sample_rate, samples, label })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len() / self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let s = self.n_samples();
        &self.samples[c * s..(c + 1) * s]
    }

    pub fn seconds(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate as f64
    }
}

pub fn default_channel_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("ch{i}")).collect()
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    channels: Vec<String>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the binary record plus a JSON sidecar holding channel names.
pub fn save_record(record: &EegRecord, path: &Path) -> Result<()> {
    let c = u16::try_from(record.n_channels()).map_err(|_| Error::InvalidArgument("too many channels".into()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&c.to_le_bytes())?;
    w.write_all(&record.sample_rate.to_le_bytes())?;
    w.write_all(&(record.n_samples() as u64).to_le_bytes())?;
    w.write_all(&record.label.unwrap_or(-1).to_le_bytes())?;
    for v in &record.samples {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let side = Sidecar { channels: record.channels.clone() };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

pub fn load_record(path: &Path) -> Result<EegRecord> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic {magic:?}", path.display())));
    }
    let mut b2 = [0u8; 2];
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("{}: unsupported version {version}", path.display())));
    }
    r.read_exact(&mut b2)?;
    let c = u16::from_le_bytes(b2) as usize;
    r.read_exact(&mut b4)?;
    let sample_rate = u32::from_le_bytes(b4);
    r.read_exact(&mut b8)?;
    let s = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b4)?;
    let label = i32::from_le_bytes(b4);
    let n = c.checked_mul(s).ok_or_else(|| Error::Format("header size overflow".into()))?;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let samples = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let side = sidecar_path(path);
    let channels = if side.exists() {
        let sc: Sidecar = serde_json::from_slice(&fs::read(side)?)?;
        if sc.channels.len() != c {
            return Err(Error::Format(format!("sidecar names {} channels, header {c}", sc.channels.len())));
        }
        sc.channels
    } else {
        default_channel_names(c)
    };
    EegRecord::new(channels, sample_rate, samples, (label >= 0).then_some(label))
        .map_err(|e| Error::Format(e.to_string()))
}

/// Extension point for band-pass and notch filtering of real recordings.
/// Synthetic data carries no line noise, so this is the identity.
pub fn apply_filters(_record: &mut EegRecord) {}

/// Rejects records exceeding 100 uV anywhere, then scales by 1/100.
pub fn preprocess(raw: &EegRecord) -> Result<EegRecord> {
    let s = raw.n_samples();
    if let Some(i) = raw.samples.iter().position(|v| !v.is_finite() || v.abs() > MAX_ABS_UV) {
        return Err(Error::AmplitudeViolation { channel: i / s, sample: i % s, value: raw.samples[i] });
    }
    let mut out = raw.clone();
    apply_filters(&mut out);
    out.samples.iter_mut().for_each(|v| *v /= UV_SCALE);
    Ok(out)
}

/// `C x N` patches of length `T`, channel-major: patch `(c, n)` is
/// `data[(c * N + n) * T..][..T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub channels: usize,
    pub per_channel: usize,
    pub patch_len: usize,
    pub data: Vec<f32>,
    pub channel_ids: Vec<usize>,
    /// Start time in seconds of each patch column.
    pub patch_times: Vec<f64>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.channels * self.per_channel
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, c: usize, n: usize) -> &[f32] {
        let i = c * self.per_channel + n;
        &self.data[i * self.patch_len..(i + 1) * self.patch_len]
    }

    /// Patch by flat channel-major index.
    pub fn flat(&self, i: usize) -> &[f32] {
        &self.data[i * self.patch_len..(i + 1) * self.patch_len]
    }
}

pub fn patch(record: &EegRecord, patch_seconds: f64) -> Result<PatchGrid> {
    let t = patch_seconds * record.sample_rate as f64;
    if t < 1.0 || t.fract() != 0.0 {
        return invalid(format!("patch of {patch_seconds} s is not a whole number of samples"));
    }
    let t = t as usize;
    let s = record.n_samples();
    if s == 0 || s % t != 0 {
        return invalid(format!("{s} samples do not tile into patches of {t}"));
    }
    let n = s / t;
    Ok(PatchGrid {
        channels: record.n_channels(),
        per_channel: n,
        patch_len: t,
        // Channel-major layout of a C x S matrix is already the patch order.
        data: record.samples.clone(),
        channel_ids: (0..record.n_channels()).collect(),
        patch_times: (0..n).map(|i| i as f64 * patch_seconds).collect(),
    })
}

/// Inverse of [`patch`]: the `C x S` sample matrix.
pub fn unpatch(grid: &PatchGrid) -> Vec<f32> {
    grid.data.clone()
}

/// Amplitude and phase of the length-`T` DFT of one patch, z-scored over
/// bins with the statistics kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqFeatures {
    pub amplitude: Vec<f32>,
    pub phase: Vec<f32>,
    pub amp_mean: f32,
    pub amp_std: f32,
    pub phase_mean: f32,
    pub phase_std: f32,
}

/// Raw `(A, phi)` with `phi` in `(-pi, pi]`.
pub fn polar_spectrum(patch: &[f32]) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = dft(patch)?;
    let amp = s.amplitude();
    let phase = s
        .re
        .iter()
        .zip(&s.im)
        .map(|(&re, &im)| {
            let p = im.atan2(re);
            if p <= -PI {
                PI
            } else {
                p
            }
        })
        .collect();
    Ok((amp, phase))
}

pub(crate) fn zscore(x: &[f64]) -> (Vec<f32>, f32, f32) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    (x.iter().map(|v| ((v - mean) / std) as f32).collect(), mean as f32, std as f32)
}

pub fn freq_features(patch: &[f32]) -> Result<FreqFeatures> {
    if patch.len() < 2 {
        return invalid("freq_features needs at least two samples");
    }
    let (a, p) = polar_spectrum(patch)?;
    let (amplitude, amp_mean, amp_std) = zscore(&a);
    let (phase, phase_mean, phase_std) = zscore(&p);
    Ok(FreqFeatures { amplitude, phase, amp_mean, amp_std, phase_mean, phase_std })
}

/// One-sided amplitude `|X[k]| * 2 / T` for `k = 0..=T/2`; the encoder input.
pub fn rfft_amplitude(patch: &[f32]) -> Result<Vec<f32>> {
    let s = dft(patch)?;
    let t = patch.len();
    let scale = 2.0 / t as f64;
    Ok(s.amplitude()[..t / 2 + 1].iter().map(|a| (a * scale) as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo_hz: f64,
    pub hi_hz: f64,
    pub amplitude_uv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub bands: Vec<Band>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    pub noise_uv: f64,
    pub channels: usize,
    pub seconds: usize,
    pub sample_rate: u32,
    pub records: usize,
}

impl SynthSpec {
    /// Three band-separated classes, 4 channels, 8 s at 200 Hz.
    pub fn desk() -> Self {
        let class = |name: &str, a: (f64, f64), b: (f64, f64)| ClassSpec {
            name: name.into(),
            bands: vec![
                Band { lo_hz: a.0, hi_hz: a.1, amplitude_uv: 30.0 },
                Band { lo_hz: b.0, hi_hz: b.1, amplitude_uv: 12.0 },
            ],
        };
        Self {
            classes: vec![
                class("slow", (1.0, 4.0), (5.0, 7.0)),
                class("alpha", (8.0, 12.0), (13.0, 16.0)),
                class("beta", (18.0, 25.0), (26.0, 30.0)),
            ],
            noise_uv: 4.0,
            channels: 4,
            seconds: 8,
            sample_rate: 200,
            records: 60,
        }
    }

    /// 19 channels, 30 s segments.
    pub fn paper() -> Self {
        Self { channels: 19, seconds: 30, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return invalid("generator needs at least two classes");
        }
        if self.channels == 0 || self.seconds == 0 || self.sample_rate == 0 {
            return invalid("channels, seconds and sample rate must be positive");
        }
        if self.noise_uv < 0.0 {
            return invalid("noise sigma must be non-negative");
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for c in &self.classes {
            if c.bands.is_empty() {
                return invalid(format!("class {} has no bands", c.name));
            }
            let mut peak = 3.0 * self.noise_uv;
            for b in &c.bands {
                if !(b.lo_hz >= 0.0 && b.lo_hz <= b.hi_hz) {
                    return invalid(format!("class {}: bad band {}-{} Hz", c.name, b.lo_hz, b.hi_hz));
                }
                if b.hi_hz >= nyquist {
                    return invalid(format!(
                        "class {}: band up to {} Hz reaches Nyquist {nyquist} Hz",
                        c.name, b.hi_hz
                    ));
                }
                if b.lo_hz.ceil() > b.hi_hz.floor() {
                    return invalid(format!("class {}: band {}-{} Hz holds no integer frequency", c.name, b.lo_hz, b.hi_hz));
                }
                peak += b.amplitude_uv.abs();
            }
            if peak > MAX_ABS_UV as f64 {
                return invalid(format!("class {}: worst-case amplitude {peak} uV exceeds {MAX_ABS_UV}", c.name));
            }
        }
        Ok(())
    }
}

/// Record `i` has label `i % classes`. Output is raw microvolts.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<EegRecord>> {
    spec.validate()?;
    (0..spec.records).map(|i| synth_record(spec, seed, i)).collect()
}

pub fn synth_record(spec: &SynthSpec, seed: u64, index: usize) -> Result<EegRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let class = index % spec.classes.len();
    let s = spec.seconds * spec.sample_rate as usize;
    let fs = spec.sample_rate as f64;
    let noise = Normal::new(0.0, spec.noise_uv.max(1e-12)).expect("valid sigma");
    let clip = 3.0 * spec.noise_uv;
    let mut samples = vec![0f32; spec.channels * s];
    for c in 0..spec.channels {
        let mut tones = Vec::new();
        for b in &spec.classes[class].bands {
            let f = rng.random_range(b.lo_hz.ceil() as i64..=b.hi_hz.floor() as i64) as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            tones.push((f, phase, b.amplitude_uv));
        }
        for (t, out) in samples[c * s..(c + 1) * s].iter_mut().enumerate() {
            let time = t as f64 / fs;
            let mut v: f64 = tones.iter().map(|(f, p, a)| a * (2.0 * PI * f * time + p).sin()).sum();
            if spec.noise_uv > 0.0 {
                v += noise.sample(&mut rng).clamp(-clip, clip);
            }
            *out = v as f32;
        }
    }
    EegRecord::new(default_channel_names(spec.channels), spec.sample_rate, samples, Some(class as i32))
}

/// Index of the largest one-sided amplitude bin, and of the runner-up.
pub fn dominant_bins(patch: &[f32]) -> Result<(usize, usize)> {
    let amp = rfft_amplitude(patch)?;
    let mut order: Vec<usize> = (0..amp.len()).collect();
    order.sort_by(|&a, &b| amp[b].total_cmp(&amp[a]).then(a.cmp(&b)));
    Ok((order[0], *order.get(1).unwrap_or(&order[0])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_scales_and_rejects() {
        let r = EegRecord::new(default_channel_names(1), 200, vec![50.0; 200], None).unwrap();
        assert!(preprocess(&r).unwrap().samples.iter().all(|&v| v == 0.5));
        let mut spike = vec![0.0; 400];
        spike[250] = 150.0;
        let r = EegRecord::new(default_channel_names(2), 200, spike, None).unwrap();
        match preprocess(&r) {
            Err(Error::AmplitudeViolation { channel, sample, value }) => {
                assert_eq!((channel, sample, value), (1, 50, 150.0));
            }
            other => panic!("expected violation, got {other:?}"),
        }
        let z = EegRecord::new(default_channel_names(3), 200, vec![0.0; 600], None).unwrap();
        assert!(preprocess(&z).unwrap().samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_counts() {
        let r = EegRecord::new(default_channel_names(19), 200, vec![0.0; 19 * 6000], None).unwrap();
        let g = patch(&r, 1.0).unwrap();
        assert_eq!((g.len(), g.patch_len), (570, 200));
        let r = EegRecord::new(default_channel_names(6), 200, vec![0.0; 6 * 6000], None).unwrap();
        assert_eq!(patch(&r, 1.0).unwrap().len(), 180);
        let r = EegRecord::new(default_channel_names(1), 200, vec![0.0; 200], None).unwrap();
        assert_eq!(patch(&r, 1.0).unwrap().len(), 1);
        let r = EegRecord::new(default_channel_names(1), 200, vec![0.0; 300], None).unwrap();
        assert!(patch(&r, 1.0).is_err());
    }

    #[test]
    fn quarter_wave_spectrum() {
        let (a, p) = polar_spectrum(&[0.0, 1.0, 0.0, -1.0]).unwrap();
        assert!((a[1] - 2.0).abs() < 1e-12);
        assert!((p[1] + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dc_patch_has_only_bin_zero() {
        let (a, _) = polar_spectrum(&[0.3; 16]).unwrap();
        assert!((a[0] - 4.8).abs() < 1e-6);
        assert!(a[1..].iter().all(|&v| v < 1e-9));
    }

    #[test]
    fn nyquist_band_rejected() {
        let mut spec = SynthSpec::desk();
        spec.classes[0].bands[0].hi_hz = 120.0;
        assert!(synth_generate(&spec, 1).is_err());
    }
}
