//! Sample sources feeding the trainer.

use crate::encoding::{
    self, downscale_image, jitter_events, latency_encode, rotate_augment, EncodingError, EventDataset,
    EventSample, ImageSet, LatencyCoderParams, SMALL_SIDE,
};
use crate::network::Spike;
use crate::rng::{self, domain};
use crate::trainer::SampleSource;

/// Latency-coded 16x16 images.
#[derive(Clone, Debug)]
pub struct LatencyImages {
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    clean: Vec<Vec<Spike>>,
    coder: LatencyCoderParams,
    n_classes: usize,
    /// Maximum rotation for augmentation, degrees (0 disables).
    pub rotate_deg: f64,
}

impl LatencyImages {
    /// Downscales 28x28 images and latency-encodes them.
    pub fn from_mnist(set: &ImageSet, coder: LatencyCoderParams, rotate_deg: f64) -> Result<Self, EncodingError> {
        let images = set.images.iter().map(|i| downscale_image(i)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_small(images, set.labels.clone(), 10, coder, rotate_deg))
    }

    /// Wraps already downscaled 16x16 images.
    pub fn from_small(
        images: Vec<Vec<f64>>,
        labels: Vec<usize>,
        n_classes: usize,
        coder: LatencyCoderParams,
        rotate_deg: f64,
    ) -> Self {
        let clean = images.iter().map(|i| latency_encode(i, &coder)).collect();
        Self { images, labels, clean, coder, n_classes, rotate_deg }
    }

    pub fn images(&self) -> &[Vec<f64>] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

impl SampleSource for LatencyImages {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn n_channels(&self) -> usize {
        SMALL_SIDE * SMALL_SIDE
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn duration(&self) -> f64 {
        self.coder.t_max
    }

    fn sample(&self, index: usize, augment: Option<u64>) -> EventSample {
        let label = self.labels[index];
        match augment {
            Some(key) if self.rotate_deg > 0.0 => {
                let mut rng = rng::stream(key, domain::AUGMENT, index as u64);
                let img = rotate_augment(&self.images[index], SMALL_SIDE, self.rotate_deg, &mut rng);
                EventSample { events: latency_encode(&img, &self.coder), label }
            }
            _ => EventSample { events: self.clean[index].clone(), label },
        }
    }
}

/// Spoken-digit event streams: 700-channel raw data (seconds) reduced to 70
/// channels on the µs time scale of the substrate.
#[derive(Clone, Debug)]
pub struct SpeechEvents {
    raw: EventDataset,
    clean: Vec<Vec<Spike>>,
    scale_div: f64,
    duration: f64,
    /// Channel jitter applied before subsampling when augmenting (0 disables).
    pub jitter_sigma: f64,
}

impl SpeechEvents {
    /// `duration` is the stimulus window in µs; later events are dropped.
    pub fn new(raw: EventDataset, scale_div: f64, duration: f64, jitter_sigma: f64) -> Result<Self, EncodingError> {
        raw.validate()?;
        let reduced = encoding::subsample_and_scale(&raw, scale_div);
        let clean = reduced.samples.into_iter().map(|s| clip(s.events, duration)).collect();
        Ok(Self { raw, clean, scale_div, duration, jitter_sigma })
    }

    pub fn raw(&self) -> &EventDataset {
        &self.raw
    }
}

fn clip(mut events: Vec<Spike>, duration: f64) -> Vec<Spike> {
    events.retain(|e| e.time < duration);
    events
}

impl SampleSource for SpeechEvents {
    fn len(&self) -> usize {
        self.raw.samples.len()
    }

    fn n_channels(&self) -> usize {
        encoding::SHD_KEPT
    }

    fn n_classes(&self) -> usize {
        self.raw.n_classes
    }

    fn duration(&self) -> f64 {
        self.duration
    }

    fn sample(&self, index: usize, augment: Option<u64>) -> EventSample {
        let raw = &self.raw.samples[index];
        match augment {
            Some(key) if self.jitter_sigma > 0.0 => {
                let mut rng = rng::stream(key, domain::AUGMENT, index as u64);
                let moved = jitter_events(&raw.events, self.raw.n_channels, self.jitter_sigma, &mut rng);
                let events = encoding::subsample_events(&moved, 1e6 / self.scale_div);
                EventSample { events: clip(events, self.duration), label: raw.label }
            }
            _ => EventSample { events: self.clean[index].clone(), label: raw.label },
        }
    }
}
