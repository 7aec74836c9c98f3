//! Labeled datasets: a seeded synthetic generator and a fixture directory
//! loader.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Per-channel RMS of a class template, in units of the noise deviation.
pub const TEMPLATE_MAGNITUDE: f64 = 3.0;
pub const NOISE_STD: f64 = 1.0;

const INPUTS_FILE: &str = "inputs.dsx";
const LABELS_FILE: &str = "labels.dsx";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor4,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor4, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != inputs.n() {
            return Err(Error::shape(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.n()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::argument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> &Tensor4 {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor4, Vec<usize>)> {
        let x = &self.inputs;
        let sample = x.c() * x.plane_len();
        let mut data = Vec::with_capacity(indices.len() * sample);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&x.data()[i * sample..(i + 1) * sample]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((
            Tensor4::from_vec(indices.len(), x.c(), x.h(), x.w(), data)?,
            labels,
        ))
    }

    /// Reads `inputs.dsx` (samples, c, h, w) and `labels.dsx` (samples, 1, 1, 1).
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let inputs = Tensor4::load(dir.join(INPUTS_FILE))?;
        let raw = Tensor4::load(dir.join(LABELS_FILE))?;
        if raw.shape() != [inputs.n(), 1, 1, 1] {
            return Err(Error::Format(format!(
                "labels shape {:?} does not match {} samples",
                raw.shape(),
                inputs.n()
            )));
        }
        let labels = raw
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(inputs, labels, classes)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.inputs.save(dir.join(INPUTS_FILE))?;
        let labels = self.labels.iter().map(|&l| l as f64).collect();
        Tensor4::from_vec(self.len(), 1, 1, 1, labels)?.save(dir.join(LABELS_FILE))
    }
}

/// One `(1, c, hw, hw)` template per class. Each template is constant over
/// space; its channel vector is a random direction scaled to a per-channel
/// RMS of [`TEMPLATE_MAGNITUDE`], redrawn until every pair of classes is at
/// least `TEMPLATE_MAGNITUDE` apart.
pub fn synth_templates(seed: u64, classes: usize, c: usize, hw: usize) -> Result<Vec<Tensor4>> {
    if classes < 2 || c == 0 || hw == 0 {
        return Err(Error::argument(format!(
            "need classes >= 2 and non-zero extents, got classes={classes}, c={c}, hw={hw}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e3a_11c5);
    let scale = TEMPLATE_MAGNITUDE * (c as f64).sqrt();
    for _ in 0..1000 {
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let z: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
                let norm = z
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                z.iter().map(|v| v * scale / norm).collect()
            })
            .collect();
        let separated = means.iter().enumerate().all(|(i, a)| {
            means[i + 1..].iter().all(|b| {
                let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
                d2.sqrt() >= TEMPLATE_MAGNITUDE
            })
        });
        if separated {
            return means
                .iter()
                .map(|m| Tensor4::from_fn(1, c, hw, hw, |_, ch, _, _| m[ch]))
                .collect();
        }
    }
    Err(Error::argument(format!(
        "cannot place {classes} separated templates in {c} channels"
    )))
}

/// Template of class `i % classes` plus Gaussian noise, for sample `i`.
pub fn synth_dataset(
    seed: u64,
    samples: usize,
    classes: usize,
    c: usize,
    hw: usize,
) -> Result<Dataset> {
    if samples < classes {
        return Err(Error::argument(format!(
            "need at least one sample per class, got {samples} samples for {classes} classes"
        )));
    }
    let templates = synth_templates(seed, classes, c, hw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let sample = c * hw * hw;
    let mut data = Vec::with_capacity(samples * sample);
    for &label in &labels {
        for &t in templates[label].data() {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(t + NOISE_STD * noise);
        }
    }
    Dataset::new(
        Tensor4::from_vec(samples, c, hw, hw, data)?,
        labels,
        classes,
    )
}
