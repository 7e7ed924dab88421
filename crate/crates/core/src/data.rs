//! Synthetic multi-domain image data.
//!
//! The class of a sample decides which shape motif is drawn (bars, crosses,
//! blobs, ...); the domain decides only the style applied on top: an affine
//! intensity map, a background pattern and additive Gaussian noise. Labels
//! therefore mean the same thing in every domain while pixel statistics
//! shift between domains.
//!
//! Everything is a pure function of the manifest and the domain specs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed_path, Prng};

pub const MAX_CLASSES: usize = 8;
const DATASET_MAGIC: &[u8; 4] = b"DDGD";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    None,
    /// Left-to-right ramp from 0 to 1.
    Gradient,
    /// 7-pixel checkerboard of 0 and 1.
    Checker,
    /// Squared distance from the center, 1 at the corners.
    Vignette,
}

impl Background {
    pub fn value(self, i: usize, j: usize, side: usize) -> f64 {
        let last = (side - 1).max(1) as f64;
        match self {
            Background::None => 0.0,
            Background::Gradient => j as f64 / last,
            Background::Checker => ((i / 7 + j / 7) % 2) as f64,
            Background::Vignette => {
                let c = last / 2.0;
                let (di, dj) = ((i as f64 - c) / c, (j as f64 - c) / c);
                (di * di + dj * dj) / 2.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub gain: f64,
    pub bias: f64,
    pub noise: f64,
    pub background: Background,
    #[serde(default)]
    pub background_amplitude: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains([',', '\n', '"']) {
            return Err(invalid(format!("domain name {:?} must be nonempty without commas, quotes or newlines", self.name)));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(invalid(format!("domain {}: gain must be positive", self.name)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid(format!("domain {}: noise must be nonnegative", self.name)));
        }
        if !self.bias.is_finite() || !self.background_amplitude.is_finite() {
            return Err(invalid(format!("domain {}: non-finite style", self.name)));
        }
        Ok(())
    }

    /// `gain * motif + bias + amplitude * background + noise * N(0, 1)`.
    pub fn apply(&self, motif: &[f64], side: usize, rng: &mut Prng) -> Vec<f64> {
        let mut out = Vec::with_capacity(motif.len());
        for (idx, &m) in motif.iter().enumerate() {
            let bg = self.background.value(idx / side, idx % side, side);
            let n = if self.noise > 0.0 { self.noise * rng.normal() } else { 0.0 };
            out.push(self.gain * m + self.bias + self.background_amplitude * bg + n);
        }
        out
    }

    /// Inverts the deterministic part of [`DomainSpec::apply`].
    pub fn strip(&self, image: &[f64], side: usize) -> Vec<f64> {
        image
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let bg = self.background.value(idx / side, idx % side, side);
                (x - self.bias - self.background_amplitude * bg) / self.gain
            })
            .collect()
    }
}

/// Four styles loosely modelled on photo / art / cartoon / sketch.
pub fn default_domains() -> Vec<DomainSpec> {
    let spec = |name: &str, gain, bias, noise, background, amp| DomainSpec {
        name: name.to_string(),
        gain,
        bias,
        noise,
        background,
        background_amplitude: amp,
    };
    vec![
        spec("photo", 1.0, 0.0, 0.05, Background::None, 0.0),
        spec("art", 0.7, 0.2, 0.08, Background::Gradient, 0.25),
        spec("cartoon", 1.3, -0.1, 0.03, Background::Checker, 0.2),
        spec("sketch", 0.8, 0.35, 0.12, Background::Vignette, 0.2),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetManifest {
    pub seed: u64,
    pub classes: usize,
    pub domains: usize,
    pub samples_per_domain: usize,
    pub image_side: usize,
    pub patch: usize,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self { seed: 2024, classes: 5, domains: 4, samples_per_domain: 500, image_side: 28, patch: 4 }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.domains < 3 {
            return Err(invalid(format!("need at least 3 domains, got {}", self.domains)));
        }
        if self.classes < 2 || self.classes > MAX_CLASSES {
            return Err(invalid(format!("classes must lie in 2..={MAX_CLASSES}, got {}", self.classes)));
        }
        if self.samples_per_domain == 0 {
            return Err(invalid("samples_per_domain must be positive"));
        }
        if self.patch == 0 || self.image_side < 8 || self.image_side % self.patch != 0 {
            return Err(invalid(format!(
                "image side {} must be at least 8 and divisible by patch {}",
                self.image_side, self.patch
            )));
        }
        if self.domains > 255 {
            return Err(invalid("at most 255 domains fit the dataset file"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

fn fill_rect(img: &mut [f64], side: usize, r0: usize, c0: usize, h: usize, w: usize, ink: f64) {
    for r in r0..(r0 + h).min(side) {
        for c in c0..(c0 + w).min(side) {
            img[r * side + c] = ink;
        }
    }
}

/// Class motif with intensities in `[0, 1]`; placement is drawn from `rng`.
pub fn render_motif(class: usize, side: usize, rng: &mut Prng) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    let ink = 0.8 + 0.2 * rng.uniform();
    let margin = 2;
    let span = side - 2 * margin;
    match class % MAX_CLASSES {
        0 => {
            for _ in 0..2 + rng.below(2) {
                let r = margin + rng.below(span - 1);
                let c0 = rng.below(4);
                fill_rect(&mut img, side, r, c0, 2, side - c0 - rng.below(4), ink);
            }
        }
        1 => {
            for _ in 0..2 + rng.below(2) {
                let c = margin + rng.below(span - 1);
                let r0 = rng.below(4);
                fill_rect(&mut img, side, r0, c, side - r0 - rng.below(4), 2, ink);
            }
        }
        2 | 5 => {
            let anti = class % MAX_CLASSES == 5;
            for _ in 0..2 {
                let offset = rng.below(side) as isize - (side / 2) as isize;
                for i in 0..side as isize {
                    for t in 0..2 {
                        let j = i + offset + t;
                        if (0..side as isize).contains(&j) {
                            let col = if anti { side - 1 - j as usize } else { j as usize };
                            img[i as usize * side + col] = ink;
                        }
                    }
                }
            }
        }
        3 => {
            for _ in 0..2 + rng.below(2) {
                let cy = 4 + rng.below(side - 7);
                let cx = 4 + rng.below(side - 7);
                fill_rect(&mut img, side, cy, cx - 3, 1, 7, ink);
                fill_rect(&mut img, side, cy - 3, cx, 7, 1, ink);
            }
        }
        4 => {
            for _ in 0..2 {
                let size = 4 + rng.below(3);
                let r = rng.below(side - size);
                let c = rng.below(side - size);
                fill_rect(&mut img, side, r, c, size, size, ink);
            }
        }
        6 => {
            for _ in 0..2 {
                let size = 7;
                let r = rng.below(side - size);
                let c = rng.below(side - size);
                fill_rect(&mut img, side, r, c, 1, size, ink);
                fill_rect(&mut img, side, r + size - 1, c, 1, size, ink);
                fill_rect(&mut img, side, r, c, size, 1, ink);
                fill_rect(&mut img, side, r, c + size - 1, size, 1, ink);
            }
        }
        _ => {
            for _ in 0..8 + rng.below(5) {
                let r = rng.below(side - 1);
                let c = rng.below(side - 1);
                fill_rect(&mut img, side, r, c, 1, 1, ink);
            }
        }
    }
    img
}

/// Seed of sample `index` of domain `domain`; the motif uses
/// `derive(instance, 0)` and the style noise `derive(instance, 1)`.
pub fn instance_seed(manifest: &DatasetManifest, domain: usize, index: usize) -> u64 {
    derive_seed_path(manifest.seed, &[1, domain as u64, index as u64])
}

/// Renders one sample from its class, instance seed and domain style.
pub fn render_sample(class: usize, instance: u64, spec: &DomainSpec, side: usize) -> Vec<f64> {
    let mut motif_rng = Prng::new(derive_seed_path(instance, &[0]));
    let motif = render_motif(class, side, &mut motif_rng);
    let mut noise_rng = Prng::new(derive_seed_path(instance, &[1]));
    spec.apply(&motif, side, &mut noise_rng)
}

/// Sample `k` of each domain has label `k mod C`.
pub fn generate(manifest: &DatasetManifest, specs: &[DomainSpec]) -> Result<DomainDataset> {
    manifest.validate()?;
    if specs.len() != manifest.domains {
        return Err(invalid(format!("{} domain specs for {} domains", specs.len(), manifest.domains)));
    }
    for s in specs {
        s.validate()?;
    }
    let mut samples = Vec::with_capacity(manifest.domains * manifest.samples_per_domain);
    for (domain, spec) in specs.iter().enumerate() {
        for k in 0..manifest.samples_per_domain {
            let label = k % manifest.classes;
            let image = render_sample(label, instance_seed(manifest, domain, k), spec, manifest.image_side);
            samples.push(Sample { image, label, domain });
        }
    }
    Ok(DomainDataset { manifest: *manifest, samples })
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domains_present(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.samples.iter().map(|s| s.domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> Self {
        Self { manifest: self.manifest, samples: self.samples.iter().filter(|s| keep(s)).cloned().collect() }
    }

    pub fn domain(&self, domain: usize) -> Self {
        self.filter(|s| s.domain == domain)
    }

    /// Writes the dataset file: `"DDGD"`, version `u32`, manifest (`seed`
    /// `u64`; classes, domains, samples per domain, side, patch as `u32`),
    /// sample count `u64`, then per sample a label byte, a domain byte and
    /// `side * side` `f64` values. All little-endian.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let m = &self.manifest;
        let mut buf = Vec::with_capacity(40 + self.samples.len() * (2 + 8 * m.image_side * m.image_side));
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&m.seed.to_le_bytes());
        for v in [m.classes, m.domains, m.samples_per_domain, m.image_side, m.patch] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            buf.push(s.label as u8);
            buf.push(s.domain as u8);
            for &x in &s.image {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format { what: "dataset file", detail: detail.to_string() };
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != DATASET_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != DATASET_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let seed = r.u64().ok_or_else(|| bad("truncated header"))?;
        let mut fields = [0usize; 5];
        for f in &mut fields {
            *f = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        }
        let manifest = DatasetManifest {
            seed,
            classes: fields[0],
            domains: fields[1],
            samples_per_domain: fields[2],
            image_side: fields[3],
            patch: fields[4],
        };
        manifest.validate().map_err(|e| bad(&e.to_string()))?;
        let count = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let pixels = manifest.image_side * manifest.image_side;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let head = r.take(2).ok_or_else(|| bad("truncated sample"))?;
            let (label, domain) = (head[0] as usize, head[1] as usize);
            if label >= manifest.classes || domain >= manifest.domains {
                return Err(bad("sample label or domain out of range"));
            }
            let mut image = Vec::with_capacity(pixels);
            for _ in 0..pixels {
                let x = r.f64().ok_or_else(|| bad("truncated sample"))?;
                if !x.is_finite() {
                    return Err(bad("non-finite pixel"));
                }
                image.push(x);
            }
            samples.push(Sample { image, label, domain });
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { manifest, samples })
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Per-domain split: in every domain present, `round(fraction * n)` samples
/// (chosen by a shuffle seeded from `seed` and the domain id) go to
/// validation. Callers remove the target domain first.
pub fn split_train_val(dataset: &DomainDataset, fraction: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for domain in dataset.domains_present() {
        let mut idx: Vec<usize> = (0..dataset.samples.len()).filter(|&i| dataset.samples[i].domain == domain).collect();
        Prng::new(derive_seed_path(seed, &[2, domain as u64])).shuffle(&mut idx);
        let n_val = (fraction * idx.len() as f64).round() as usize;
        if n_val == 0 || n_val == idx.len() {
            return Err(invalid(format!("split of domain {domain} leaves an empty side")));
        }
        let (v, t) = idx.split_at(n_val);
        let mut v = v.to_vec();
        let mut t = t.to_vec();
        v.sort_unstable();
        t.sort_unstable();
        val.extend(v);
        train.extend(t);
    }
    if train.is_empty() || val.is_empty() {
        return Err(invalid("empty split"));
    }
    let pick = |ids: &[usize]| DomainDataset {
        manifest: dataset.manifest,
        samples: ids.iter().map(|&i| dataset.samples[i].clone()).collect(),
    };
    Ok((pick(&train), pick(&val)))
}

/// Images concatenated in row-major order with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// One shuffled pass over a dataset; the last batch may be short.
pub struct Batches<'a> {
    dataset: &'a DomainDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(dataset: &DomainDataset, batch_size: usize, epoch_seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    Prng::new(epoch_seed).shuffle(&mut order);
    Ok(Batches { dataset, order, batch_size, pos: 0 })
}

/// Batches in dataset order without shuffling (evaluation).
pub fn sequential_batches(dataset: &DomainDataset, batch_size: usize) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    Ok(Batches { dataset, order: (0..dataset.samples.len()).collect(), batch_size, pos: 0 })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let mut images = Vec::new();
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            let s = &self.dataset.samples[i];
            images.extend_from_slice(&s.image);
            labels.push(s.label);
        }
        Some(Batch { images, labels, indices })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetManifest {
        DatasetManifest { seed: 5, classes: 5, domains: 4, samples_per_domain: 20, image_side: 28, patch: 4 }
    }

    #[test]
    fn manifest_validation() {
        assert!(DatasetManifest::default().validate().is_ok());
        assert_eq!(DatasetManifest::default().grid(), 7);
        assert!(DatasetManifest { domains: 2, ..small() }.validate().is_err());
        assert!(DatasetManifest { classes: 1, ..small() }.validate().is_err());
        assert!(DatasetManifest { patch: 5, ..small() }.validate().is_err());
        let mut specs = default_domains();
        specs[1].gain = 0.0;
        assert!(generate(&small(), &specs).is_err());
        assert!(generate(&small(), &default_domains()[..3]).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(), &default_domains()).unwrap();
        let b = generate(&small(), &default_domains()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.len(), 80);
        assert!(a.samples.iter().all(|s| s.label < 5 && s.image.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn noiseless_identity_style_is_reproducible() {
        let plain = DomainSpec { name: "plain".into(), gain: 1.0, bias: 0.0, noise: 0.0, background: Background::None, background_amplitude: 0.0 };
        let a = render_sample(3, 99, &plain, 28);
        let b = render_sample(3, 99, &plain, 28);
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn stripping_style_recovers_motif_across_domains() {
        for class in 0..MAX_CLASSES {
            let mut rng = Prng::new(class as u64);
            let motif = render_motif(class, 28, &mut rng);
            assert!(motif.iter().any(|&x| x > 0.0));
            for spec in default_domains() {
                let quiet = DomainSpec { noise: 0.0, ..spec };
                let styled = quiet.apply(&motif, 28, &mut Prng::new(0));
                let back = quiet.strip(&styled, 28);
                for (x, y) in back.iter().zip(&motif) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn split_is_stratified_and_partitions() {
        let ds = generate(&DatasetManifest { samples_per_domain: 500, ..small() }, &default_domains()).unwrap();
        let (train, val) = split_train_val(&ds, 0.2, 3).unwrap();
        for d in 0..4 {
            assert_eq!(train.domain(d).len(), 400);
            assert_eq!(val.domain(d).len(), 100);
        }
        let (train2, val2) = split_train_val(&ds, 0.2, 3).unwrap();
        assert_eq!((&train, &val), (&train2, &val2));
        let mut all: Vec<Vec<u8>> = train.samples.iter().chain(&val.samples).map(|s| s.image.iter().flat_map(|x| x.to_le_bytes()).collect()).collect();
        all.sort();
        let mut orig: Vec<Vec<u8>> = ds.samples.iter().map(|s| s.image.iter().flat_map(|x| x.to_le_bytes()).collect()).collect();
        orig.sort();
        assert_eq!(all, orig);
        assert!(split_train_val(&ds, 0.0, 3).is_err());
        assert!(split_train_val(&ds, 1.0, 3).is_err());
        let tiny = DomainDataset { manifest: ds.manifest, samples: ds.samples[..1].to_vec() };
        assert!(split_train_val(&tiny, 0.2, 1).is_err());
    }

    #[test]
    fn batches_cover_everything_once() {
        let ds = generate(&small(), &default_domains()).unwrap();
        let mut seen: Vec<usize> = batches(&ds, 32, 9).unwrap().flat_map(|b| b.indices).collect();
        let sizes: Vec<usize> = batches(&ds, 32, 9).unwrap().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![32, 32, 16]);
        let again: Vec<usize> = batches(&ds, 32, 9).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(seen, again);
        seen.sort_unstable();
        assert_eq!(seen, (0..80).collect::<Vec<_>>());
        assert!(batches(&ds, 0, 1).is_err());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let ds = generate(&small(), &default_domains()).unwrap();
        let bytes = ds.to_bytes();
        let back = DomainDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert!(DomainDataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DomainDataset::from_bytes(&bad).is_err());
    }
}
