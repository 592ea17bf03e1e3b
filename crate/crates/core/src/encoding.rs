//! Input pipelines: MNIST downscaling and latency coding, event-file I/O and
//! the channel subsampling / jitter transforms for spoken-digit data.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::Spike;
use crate::rng::{self, domain};

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("expected a {expected}-pixel image, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sample {sample}: channel {channel} out of range for {n_channels} channels")]
    Channel { sample: usize, channel: usize, n_channels: usize },
    #[error("sample {sample}: label {label} out of range for {n_classes} classes")]
    Label { sample: usize, label: usize, n_classes: usize },
    #[error("invalid IDX file {path}: {message}")]
    Idx { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EncodingError + '_ {
    move |source| EncodingError::Io { path: path.display().to_string(), source }
}

pub const MNIST_SIDE: usize = 28;
pub const SMALL_SIDE: usize = 16;
const CROPPED_SIDE: usize = 24;

/// Crops a 2-pixel border from a 28x28 image and area-averages the
/// remaining 24x24 pixels down to 16x16.
pub fn downscale_image(img: &[f64]) -> Result<Vec<f64>, EncodingError> {
    if img.len() != MNIST_SIDE * MNIST_SIDE {
        return Err(EncodingError::Shape { expected: MNIST_SIDE * MNIST_SIDE, actual: img.len() });
    }
    let weights = area_weights(CROPPED_SIDE, SMALL_SIDE);
    let off = (MNIST_SIDE - CROPPED_SIDE) / 2;
    // Separable resample: rows first, then columns.
    let mut tmp = vec![0.0; SMALL_SIDE * CROPPED_SIDE];
    for (r, wr) in weights.iter().enumerate() {
        for &(s, w) in wr {
            let src = &img[(s + off) * MNIST_SIDE + off..(s + off) * MNIST_SIDE + off + CROPPED_SIDE];
            for (d, v) in tmp[r * CROPPED_SIDE..(r + 1) * CROPPED_SIDE].iter_mut().zip(src) {
                *d += w * v;
            }
        }
    }
    let mut out = vec![0.0; SMALL_SIDE * SMALL_SIDE];
    for r in 0..SMALL_SIDE {
        for (c, wc) in weights.iter().enumerate() {
            out[r * SMALL_SIDE + c] = wc.iter().map(|&(s, w)| w * tmp[r * CROPPED_SIDE + s]).sum();
        }
    }
    Ok(out)
}

/// Overlap weights of each target cell with the source cells, normalized so
/// that every target row sums to one.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let lo = d as f64 * ratio;
            let hi = lo + ratio;
            (lo.floor() as usize..(hi.ceil() as usize).min(src))
                .filter_map(|s| {
                    let overlap = hi.min(s as f64 + 1.0) - lo.max(s as f64);
                    (overlap > 0.0).then_some((s, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyCoderParams {
    /// Input unit time constant, µs.
    pub tau_in: f64,
    /// Input unit threshold.
    pub theta_in: f64,
    /// Stimulus window, µs; later spikes are dropped.
    pub t_max: f64,
}

impl Default for LatencyCoderParams {
    fn default() -> Self {
        Self { tau_in: 8.0, theta_in: 0.2, t_max: 30.0 }
    }
}

/// Spike time of a pixel of intensity `x`, if it fires at all.
pub fn latency(x: f64, p: &LatencyCoderParams) -> Option<f64> {
    (x > p.theta_in).then(|| p.tau_in * (x / (x - p.theta_in)).ln())
}

/// One spike per sufficiently bright pixel (row-major channels), sorted by time.
pub fn latency_encode(img: &[f64], p: &LatencyCoderParams) -> Vec<Spike> {
    let mut events: Vec<Spike> = img
        .iter()
        .enumerate()
        .filter_map(|(i, &x)| latency(x, p).filter(|&t| t < p.t_max).map(|t| Spike::new(i, t)))
        .collect();
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.unit.cmp(&b.unit)));
    events
}

/// Rotates a square image by `degrees` about its center with bilinear
/// sampling; pixels that map outside the source are zero.
pub fn rotate(img: &[f64], side: usize, degrees: f64) -> Vec<f64> {
    if degrees == 0.0 {
        return img.to_vec();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let center = (side as f64 - 1.0) / 2.0;
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= side as isize || y >= side as isize {
            0.0
        } else {
            img[y as usize * side + x as usize]
        }
    };
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - center;
            let dy = y as f64 - center;
            // Inverse mapping: rotate the target coordinate by -angle.
            let sx = c * dx + s * dy + center;
            let sy = -s * dx + c * dy + center;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[y * side + x] = (1.0 - fx) * (1.0 - fy) * at(x0, y0)
                + fx * (1.0 - fy) * at(x0 + 1, y0)
                + (1.0 - fx) * fy * at(x0, y0 + 1)
                + fx * fy * at(x0 + 1, y0 + 1);
        }
    }
    out
}

/// Rotation by an angle drawn uniformly from `[-max_deg, max_deg]`.
pub fn rotate_augment(img: &[f64], side: usize, max_deg: f64, rng: &mut impl Rng) -> Vec<f64> {
    let angle = if max_deg > 0.0 { rng.random_range(-max_deg..=max_deg) } else { 0.0 };
    rotate(img, side, angle)
}

/// One labelled stimulus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSample {
    pub events: Vec<Spike>,
    pub label: usize,
}

/// Labelled event streams. Raw spoken-digit data carries times in seconds;
/// after [`subsample_and_scale`] times are in µs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventDataset {
    pub samples: Vec<EventSample>,
    pub n_channels: usize,
    pub n_classes: usize,
}

impl EventDataset {
    pub fn validate(&self) -> Result<(), EncodingError> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.n_classes {
                return Err(EncodingError::Label { sample: i, label: s.label, n_classes: self.n_classes });
            }
            if let Some(e) = s.events.iter().find(|e| e.unit >= self.n_channels) {
                return Err(EncodingError::Channel { sample: i, channel: e.unit, n_channels: self.n_channels });
            }
        }
        Ok(())
    }

    pub fn event_count(&self) -> usize {
        self.samples.iter().map(|s| s.events.len()).sum()
    }
}

/// Parses the text event format:
///
/// ```text
/// channels=<n> classes=<k>
/// sample label=<y>
/// <time_seconds> <channel>
/// ...
/// <blank line>
/// ```
///
/// Lines starting with `#` are comments. A sample block ends at a blank line,
/// the next `sample` header, or end of file.
pub fn parse_events(text: &str) -> Result<EventDataset, EncodingError> {
    let perr = |line: usize, message: String| EncodingError::Parse { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (n_channels, n_classes) = loop {
        match lines.next() {
            None => return Err(perr(1, "missing header `channels=<n> classes=<k>`".into())),
            Some((_, l)) if l.is_empty() || l.starts_with('#') => continue,
            Some((no, l)) => break parse_header(l).map_err(|m| perr(no, m))?,
        }
    };
    let mut samples: Vec<EventSample> = Vec::new();
    let mut open = false;
    for (no, l) in lines {
        if l.starts_with('#') {
            continue;
        }
        if l.is_empty() {
            open = false;
            continue;
        }
        if let Some(rest) = l.strip_prefix("sample") {
            let label = rest
                .trim()
                .strip_prefix("label=")
                .ok_or_else(|| perr(no, format!("expected `sample label=<y>`, got `{l}`")))?
                .parse::<usize>()
                .map_err(|e| perr(no, format!("bad label: {e}")))?;
            if label >= n_classes {
                return Err(perr(no, format!("label {label} out of range for {n_classes} classes")));
            }
            samples.push(EventSample { events: Vec::new(), label });
            open = true;
            continue;
        }
        if !open {
            return Err(perr(no, format!("event line outside a sample block: `{l}`")));
        }
        let mut parts = l.split_whitespace();
        let (Some(t), Some(c), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(perr(no, format!("expected `<time_seconds> <channel>`, got `{l}`")));
        };
        let time: f64 = t.parse().map_err(|e| perr(no, format!("bad time `{t}`: {e}")))?;
        let channel: usize = c.parse().map_err(|e| perr(no, format!("bad channel `{c}`: {e}")))?;
        if !(time >= 0.0) || !time.is_finite() {
            return Err(perr(no, format!("time {time} must be finite and non-negative")));
        }
        if channel >= n_channels {
            return Err(perr(no, format!("channel {channel} out of range for {n_channels} channels")));
        }
        samples.last_mut().expect("open block").events.push(Spike::new(channel, time));
    }
    Ok(EventDataset { samples, n_channels, n_classes })
}

fn parse_header(line: &str) -> Result<(usize, usize), String> {
    let mut channels = None;
    let mut classes = None;
    for tok in line.split_whitespace() {
        let (key, value) = tok.split_once('=').ok_or_else(|| format!("malformed header token `{tok}`"))?;
        let v: usize = value.parse().map_err(|e| format!("bad value for `{key}`: {e}"))?;
        match key {
            "channels" => channels = Some(v),
            "classes" => classes = Some(v),
            _ => return Err(format!("unknown header key `{key}`")),
        }
    }
    match (channels, classes) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err("header must define channels and classes".into()),
    }
}

pub fn format_events(ds: &EventDataset) -> String {
    let mut s = format!("channels={} classes={}\n", ds.n_channels, ds.n_classes);
    for sample in &ds.samples {
        let _ = writeln!(s, "sample label={}", sample.label);
        for e in &sample.events {
            let _ = writeln!(s, "{} {}", e.time, e.unit);
        }
        s.push('\n');
    }
    s
}

pub fn load_events(path: &Path) -> Result<EventDataset, EncodingError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_events(&text)
}

pub fn write_events(path: &Path, ds: &EventDataset) -> Result<(), EncodingError> {
    std::fs::write(path, format_events(ds)).map_err(io_err(path))
}

pub const SHD_CHANNELS: usize = 700;
pub const SHD_SKIP: usize = 70;
pub const SHD_STRIDE: usize = 9;
pub const SHD_KEPT: usize = 70;

/// Keeps channels `70 + 9k` (k < 70), renumbers them to `k`, and converts
/// times from seconds to µs divided by `scale_div`.
pub fn subsample_and_scale(ds: &EventDataset, scale_div: f64) -> EventDataset {
    let factor = 1e6 / scale_div;
    let samples = ds
        .samples
        .iter()
        .map(|s| EventSample { events: subsample_events(&s.events, factor), label: s.label })
        .collect();
    EventDataset { samples, n_channels: SHD_KEPT, n_classes: ds.n_classes }
}

pub(crate) fn subsample_events(events: &[Spike], factor: f64) -> Vec<Spike> {
    events
        .iter()
        .filter_map(|e| {
            let c = e.unit.checked_sub(SHD_SKIP)?;
            (c % SHD_STRIDE == 0 && c / SHD_STRIDE < SHD_KEPT)
                .then(|| Spike::new(c / SHD_STRIDE, e.time * factor))
        })
        .collect()
}

/// Moves each event to channel `round(N(i, sigma))`, clamped to the valid range.
pub fn jitter_events(events: &[Spike], n_channels: usize, sigma: f64, rng: &mut impl Rng) -> Vec<Spike> {
    if sigma == 0.0 {
        return events.to_vec();
    }
    let max = n_channels as f64 - 1.0;
    events
        .iter()
        .map(|e| {
            let z: f64 = StandardNormal.sample(rng);
            let c = (e.unit as f64 + sigma * z).round().clamp(0.0, max);
            Spike::new(c as usize, e.time)
        })
        .collect()
}

pub fn channel_jitter_augment(ds: &EventDataset, sigma: f64, seed: u64) -> EventDataset {
    let samples = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng::stream(seed, domain::AUGMENT, i as u64);
            EventSample { events: jitter_events(&s.events, ds.n_channels, sigma, &mut rng), label: s.label }
        })
        .collect();
    EventDataset { samples, n_channels: ds.n_channels, n_classes: ds.n_classes }
}

/// Parameters of the synthetic spoken-digit-like generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpeechParams {
    pub n_classes: usize,
    /// Stimulus length, seconds.
    pub duration: f64,
    /// Formant-like bands per utterance.
    pub segments: usize,
    /// Band half-width, channels.
    pub band_width: f64,
    /// Mean events per band.
    pub events_per_segment: f64,
    /// Mean background events per utterance.
    pub background_events: f64,
    /// Per-utterance channel shift spread ("speaker" variability), channels.
    pub speaker_shift: f64,
    /// Per-utterance relative time warp spread.
    pub time_warp: f64,
}

impl Default for SyntheticSpeechParams {
    fn default() -> Self {
        Self {
            n_classes: 4,
            duration: 0.4,
            segments: 3,
            band_width: 30.0,
            events_per_segment: 150.0,
            background_events: 300.0,
            speaker_shift: 35.0,
            time_warp: 0.2,
        }
    }
}

/// Class templates: for each segment a band center (channel) and an onset
/// and length (fractions of the duration).
fn class_templates(p: &SyntheticSpeechParams, seed: u64) -> Vec<Vec<(f64, f64, f64)>> {
    let mut rng = rng::stream(seed, domain::SYNTHETIC, u64::MAX);
    let lo = (SHD_SKIP as f64) + 2.0 * p.band_width;
    let hi = (SHD_SKIP + SHD_STRIDE * (SHD_KEPT - 1)) as f64 - 2.0 * p.band_width;
    (0..p.n_classes)
        .map(|_| {
            let slot = 0.8 / p.segments as f64;
            (0..p.segments)
                .map(|s| {
                    let center = rng.random_range(lo..hi);
                    let onset = 0.05 + s as f64 * slot + rng.random_range(0.0..0.2 * slot);
                    (center, onset, slot * rng.random_range(0.6..1.0))
                })
                .collect()
        })
        .collect()
}

/// Generates a 700-channel dataset (times in seconds) of Poisson event bursts
/// whose channel bands and temporal order depend on the class. `split`
/// selects an independent stream of utterances from the same classes.
pub fn synthetic_speech(p: &SyntheticSpeechParams, n_samples: usize, seed: u64, split: u64) -> EventDataset {
    let templates = class_templates(p, seed);
    let samples = (0..n_samples)
        .map(|i| {
            let label = i % p.n_classes;
            let mut rng = rng::stream(seed ^ split.wrapping_mul(0x9E37_79B9), domain::SYNTHETIC, i as u64);
            let shift = p.speaker_shift * rng.sample::<f64, _>(StandardNormal);
            let warp = 1.0 + p.time_warp * rng.sample::<f64, _>(StandardNormal).clamp(-2.0, 2.0);
            let mut events = Vec::new();
            let max_ch = (SHD_CHANNELS - 1) as f64;
            for &(center, onset, length) in &templates[label] {
                let jitter = 0.03 * rng.sample::<f64, _>(StandardNormal);
                let start = ((onset + jitter) * warp).max(0.0) * p.duration;
                let len = length * warp * p.duration;
                let n = Poisson::new(p.events_per_segment).map(|d| d.sample(&mut rng) as usize).unwrap_or(0);
                let band = Normal::new(center + shift, p.band_width / 2.0).expect("finite band");
                for _ in 0..n {
                    let t = start + rng.random_range(0.0..1.0) * len;
                    let c = band.sample(&mut rng).round().clamp(0.0, max_ch) as usize;
                    if t < p.duration {
                        events.push(Spike::new(c, t));
                    }
                }
            }
            let nb = Poisson::new(p.background_events.max(1e-9)).map(|d| d.sample(&mut rng) as usize).unwrap_or(0);
            for _ in 0..nb {
                events.push(Spike::new(rng.random_range(0..SHD_CHANNELS), rng.random_range(0.0..p.duration)));
            }
            events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.unit.cmp(&b.unit)));
            EventSample { events, label }
        })
        .collect();
    EventDataset { samples, n_channels: SHD_CHANNELS, n_classes: p.n_classes }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>, EncodingError> {
    let file = File::open(path).map_err(io_err(path))?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

fn read_idx(path: &Path, magic: u32, dims: usize, limit: usize) -> Result<(Vec<usize>, Vec<u8>), EncodingError> {
    let bad = |m: &str| EncodingError::Idx { path: path.display().to_string(), message: m.to_string() };
    let mut r = BufReader::new(open_maybe_gz(path)?);
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io_err(path))?;
    if u32::from_be_bytes(word) != magic {
        return Err(bad("unexpected magic number"));
    }
    let mut shape = Vec::with_capacity(dims);
    for _ in 0..dims {
        r.read_exact(&mut word).map_err(io_err(path))?;
        shape.push(u32::from_be_bytes(word) as usize);
    }
    shape[0] = shape[0].min(limit);
    let len: usize = shape.iter().product();
    let mut data = vec![0u8; len];
    r.read_exact(&mut data).map_err(|_| bad("truncated payload"))?;
    let _ = r.fill_buf();
    Ok((shape, data))
}

/// Images in [0, 1] (row-major) with labels.
#[derive(Clone, Debug, Default)]
pub struct ImageSet {
    pub side: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Reads up to `limit` images and labels from IDX files (optionally gzipped).
pub fn load_idx(images: &Path, labels: &Path, limit: usize) -> Result<ImageSet, EncodingError> {
    let (shape, pixels) = read_idx(images, 2051, 3, limit)?;
    let (lshape, lab) = read_idx(labels, 2049, 1, limit)?;
    if shape[0] != lshape[0] || shape[1] != shape[2] {
        return Err(EncodingError::Idx {
            path: images.display().to_string(),
            message: format!("image shape {shape:?} does not match {} labels", lshape[0]),
        });
    }
    let side = shape[1];
    let images = pixels.chunks(side * side).map(|c| c.iter().map(|&p| p as f64 / 255.0).collect()).collect();
    Ok(ImageSet { side, images, labels: lab.into_iter().map(usize::from).collect() })
}
