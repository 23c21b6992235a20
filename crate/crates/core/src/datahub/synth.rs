use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry, Modality};
use crate::error::{Error, Result};
use crate::numcore::exec::{map_indexed, Exec};
use crate::numcore::rng::{label_seed, normal, stream};

fn default_channels() -> usize {
    1
}

fn default_samples() -> usize {
    400
}

/// Gaussian class clusters with per-patient offsets, standing in for a real
/// imaging dataset.
///
/// Class means of the `general` and `medical` domains live on disjoint pixel
/// sets (a checkerboard split), `mixed` uses both, and any other tag picks a
/// side from its hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub domain_tag: String,
    pub num_classes: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    /// L2 norm of each class mean.
    pub class_mean_scale: f64,
    pub noise_std: f64,
    pub patient_count: usize,
    pub per_patient_shift_std: f64,
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Mirror every odd-indexed sample left to right.
    #[serde(default)]
    pub flip_odd: bool,
}

impl SyntheticDomainSpec {
    /// Noise-free, shift-free two-class task on 8×8 grayscale images.
    pub fn separable(domain_tag: &str, seed: u64) -> Self {
        Self {
            domain_tag: domain_tag.to_string(),
            num_classes: 2,
            image_size: 8,
            in_channels: 1,
            class_mean_scale: 4.0,
            noise_std: 0.0,
            patient_count: 20,
            per_patient_shift_std: 0.0,
            seed,
            samples: 200,
            flip_odd: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) || !(self.per_patient_shift_std >= 0.0) || !self.class_mean_scale.is_finite() {
            return Err(Error::config("noise_std and per_patient_shift_std must be non-negative"));
        }
        if self.patient_count == 0 || self.num_classes == 0 || self.image_size == 0 || self.in_channels == 0 {
            return Err(Error::config("patient_count, num_classes, image_size and in_channels must be at least 1"));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }

    /// Which checkerboard cells carry the class signal.
    fn support(&self) -> Vec<usize> {
        let s = self.image_size;
        let parity = match self.domain_tag.as_str() {
            "general" => Some(0),
            "medical" => Some(1),
            "mixed" => None,
            other => Some((label_seed(other) % 2) as usize),
        };
        (0..self.image_len())
            .filter(|&i| {
                let (y, x) = ((i / s) % s, i % s);
                parity.is_none_or(|p| (x + y) % 2 == p)
            })
            .collect()
    }

    /// Mean image of class `k` (norm `class_mean_scale`).
    pub fn class_mean(&self, k: usize) -> Vec<f64> {
        use rand::Rng;
        let support = self.support();
        let mut rng = stream(label_seed(&format!("class-mean/{}", self.domain_tag)) ^ self.seed, k as u64);
        let norm = (support.len() as f64).sqrt().max(1.0);
        let mut out = vec![0.0; self.image_len()];
        for i in support {
            out[i] = if rng.random::<bool>() { 1.0 } else { -1.0 } * self.class_mean_scale / norm;
        }
        out
    }

    fn patient_shift(&self, p: usize) -> Vec<f64> {
        if self.per_patient_shift_std == 0.0 {
            return vec![0.0; self.image_len()];
        }
        let mut rng = stream(self.seed ^ label_seed("patient-shift"), p as u64);
        (0..self.image_len()).map(|_| self.per_patient_shift_std * normal(&mut rng)).collect()
    }

    pub fn label_of(&self, i: usize) -> usize {
        i % self.num_classes
    }

    pub fn patient_of(&self, i: usize) -> usize {
        (i / self.num_classes) % self.patient_count
    }
}

/// Deterministic generator for the images of one synthetic spec.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    spec: SyntheticDomainSpec,
    means: Vec<Vec<f64>>,
}

impl SyntheticSource {
    pub fn new(spec: SyntheticDomainSpec) -> Result<Self> {
        spec.validate()?;
        let means = (0..spec.num_classes).map(|k| spec.class_mean(k)).collect();
        Ok(Self { spec, means })
    }

    pub fn spec(&self) -> &SyntheticDomainSpec {
        &self.spec
    }

    /// Image `i` as a flat `C·H·W` vector: class mean + patient shift + noise.
    pub fn image(&self, i: usize) -> Vec<f64> {
        let s = &self.spec;
        let mut img = self.means[s.label_of(i)].clone();
        let shift = s.patient_shift(s.patient_of(i));
        let mut rng = stream(s.seed, i as u64);
        for (v, sh) in img.iter_mut().zip(shift) {
            *v += sh + if s.noise_std > 0.0 { s.noise_std * normal(&mut rng) } else { 0.0 };
        }
        if s.flip_odd && i % 2 == 1 {
            super::images::hflip(&mut img, s.in_channels, s.image_size);
        }
        img
    }

    pub fn images(&self, exec: Exec) -> Vec<Vec<f64>> {
        map_indexed(exec, self.spec.samples, |i| self.image(i))
    }
}

pub const SYNTH_PREFIX: &str = "synth:";

/// Manifest plus generator for a synthetic domain. Sample refs are
/// `synth:<index>`, patients `p000`, `p001`, ….
pub fn synth_dataset(spec: &SyntheticDomainSpec) -> Result<(DatasetManifest, SyntheticSource)> {
    let source = SyntheticSource::new(spec.clone())?;
    let modality = if spec.domain_tag == "medical" { Modality::Xray } else { Modality::Color };
    let entries = (0..spec.samples)
        .map(|i| ManifestEntry {
            sample_ref: format!("{SYNTH_PREFIX}{i}"),
            label: spec.label_of(i),
            patient_id: format!("p{:03}", spec.patient_of(i)),
            modality,
        })
        .collect();
    let manifest = DatasetManifest::new(format!("synth-{}", spec.domain_tag), spec.num_classes, entries)?;
    Ok((manifest, source))
}
