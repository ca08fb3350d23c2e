//! Datasets: CIFAR-10 binary batches, image augmentation, and synthetic
//! feature matrices whose classes differ only in covariance.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{qr_thin, sym_eig};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T = f64> {
    pub image: Tensor<T>,
    pub label: usize,
}

/// Raw 8-bit images stored `H × W × C`, row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` scaled to `[0, 1]`.
    pub fn image<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let raw = self.raw(i);
        Tensor::from_fn([self.height, self.width, self.channels], |k| T::of(raw[k] as f64 / 255.0))
    }

    pub fn sample<T: Scalar>(&self, i: usize, norm: &Normalizer) -> Sample<T> {
        Sample { image: norm.apply(&self.image(i)), label: self.labels[i] }
    }

    /// Images `[start, end)` as a new set.
    pub fn slice(&self, start: usize, end: usize) -> ImageSet {
        let n = self.image_len();
        ImageSet {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels[start * n..end * n].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    /// Splits off the last `n` images.
    pub fn split_tail(&self, n: usize) -> Result<(ImageSet, ImageSet)> {
        if n > self.len() {
            return Err(Error::Config(format!("cannot hold out {n} of {} images", self.len())));
        }
        let cut = self.len() - n;
        Ok((self.slice(0, cut), self.slice(cut, self.len())))
    }

    fn append(&mut self, other: ImageSet) {
        if self.is_empty() {
            *self = other;
            return;
        }
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
    }

    /// Mean of each channel over all pixels, on the `[0, 1]` scale.
    pub fn channel_means(&self) -> Vec<f64> {
        let c = self.channels;
        let mut acc = vec![0u64; c];
        for (i, &p) in self.pixels.iter().enumerate() {
            acc[i % c] += p as u64;
        }
        let count = (self.pixels.len() / c.max(1)).max(1) as f64;
        acc.into_iter().map(|s| s as f64 / 255.0 / count).collect()
    }
}

/// Per-channel mean subtraction for `H × W × C` images.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Normalizer { mean: vec![0.0; channels] }
    }

    pub fn apply<T: Scalar>(&self, image: &Tensor<T>) -> Tensor<T> {
        let c = self.mean.len();
        let mean: Vec<T> = self.mean.iter().map(|&m| T::of(m)).collect();
        Tensor::from_fn(image.shape().clone(), |k| image.data()[k] - mean[k % c])
    }
}

/// Parses concatenated CIFAR-10 records (label byte, then the R, G and B
/// planes of a 32×32 image) into `H × W × C` order.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<ImageSet> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!("{} bytes is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len())));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let count = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(count * plane * CIFAR_CHANNELS);
    let mut labels = Vec::with_capacity(count);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {r} has label {label}")));
        }
        labels.push(label);
        let body = &rec[1..];
        for p in 0..plane {
            for ch in 0..CIFAR_CHANNELS {
                pixels.push(body[ch * plane + p]);
            }
        }
    }
    Ok(ImageSet { height: CIFAR_SIDE, width: CIFAR_SIDE, channels: CIFAR_CHANNELS, pixels, labels })
}

/// Inverse of [`parse_cifar_records`].
pub fn encode_cifar_records(set: &ImageSet) -> Result<Vec<u8>> {
    if (set.height, set.width, set.channels) != (CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS) {
        return Err(Error::Format(format!("not a CIFAR-shaped set: {}x{}x{}", set.height, set.width, set.channels)));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for i in 0..set.len() {
        let label = u8::try_from(set.labels[i]).ok().filter(|&l| (l as usize) < CIFAR_CLASSES);
        out.push(label.ok_or_else(|| Error::Format(format!("label {} out of range", set.labels[i])))?);
        let raw = set.raw(i);
        for ch in 0..CIFAR_CHANNELS {
            out.extend((0..plane).map(|p| raw[p * CIFAR_CHANNELS + ch]));
        }
    }
    Ok(out)
}

pub fn read_cifar_file(path: &Path) -> Result<ImageSet> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    parse_cifar_records(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(ImageSet, ImageSet)> {
    let mut train = ImageSet::default();
    for f in CIFAR_TRAIN_FILES {
        train.append(read_cifar_file(&dir.join(f))?);
    }
    let test = read_cifar_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok((train, test))
}

/// Reverses the column order of an `H × W × C` image.
pub fn hflip<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let [h, w, c] = image.dims().try_into().expect("hflip expects H × W × C");
    let src = image.data();
    Tensor::from_fn([h, w, c], |k| {
        let (row, col, ch) = (k / (w * c), (k / c) % w, k % c);
        src[(row * w + (w - 1 - col)) * c + ch]
    })
}

/// Surrounds an `H × W × C` image with `pad` zero pixels on every side.
pub fn pad_zero<T: Scalar>(image: &Tensor<T>, pad: usize) -> Tensor<T> {
    let [h, w, c] = image.dims().try_into().expect("pad_zero expects H × W × C");
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let src = image.data();
    Tensor::from_fn([ph, pw, c], |k| {
        let (row, col, ch) = (k / (pw * c), (k / c) % pw, k % c);
        if row < pad || col < pad || row >= pad + h || col >= pad + w {
            T::zero()
        } else {
            src[((row - pad) * w + col - pad) * c + ch]
        }
    })
}

/// Window of `out_h × out_w` starting at `(top, left)`.
pub fn crop<T: Scalar>(image: &Tensor<T>, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [h, w, c] = image.dims().try_into().map_err(|_| Error::Shape(format!("crop of {:?}", image.shape())))?;
    if top + out_h > h || left + out_w > w {
        return Err(Error::Shape(format!("crop {out_h}x{out_w} at ({top},{left}) outside {h}x{w}")));
    }
    let src = image.data();
    Ok(Tensor::from_fn([out_h, out_w, c], |k| {
        let (row, col, ch) = (k / (out_w * c), (k / c) % out_w, k % c);
        src[((top + row) * w + left + col) * c + ch]
    }))
}

/// Crop at an offset drawn uniformly from all valid positions.
pub fn random_crop<T: Scalar, R: Rng + ?Sized>(image: &Tensor<T>, out_h: usize, out_w: usize, rng: &mut R) -> Result<Tensor<T>> {
    let (h, w) = (image.dims()[0], image.dims()[1]);
    if out_h > h || out_w > w {
        return Err(Error::Shape(format!("crop {out_h}x{out_w} larger than {h}x{w}")));
    }
    let top = rng.gen_range(0..=h - out_h);
    let left = rng.gen_range(0..=w - out_w);
    crop(image, top, left, out_h, out_w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    /// Zero padding before a crop back to the original size.
    pub crop_pad: Option<usize>,
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, crop_pad: None };
    pub const CIFAR: Augment = Augment { flip: true, crop_pad: Some(4) };

    /// Random flip with probability 1/2, then padded random crop.
    pub fn apply<T: Scalar, R: Rng + ?Sized>(&self, image: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let mut out = if self.flip && rng.gen_bool(0.5) { hflip(image) } else { image.clone() };
        if let Some(pad) = self.crop_pad {
            let (h, w) = (out.dims()[0], out.dims()[1]);
            out = random_crop(&pad_zero(&out, pad), h, w, rng)?;
        }
        Ok(out)
    }
}

/// Zero-mean Gaussian feature matrices with one covariance factor per class.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub feature_dim: usize,
    pub sites: usize,
    /// `D × D` factors `L_c`; class `c` has covariance `L_c L_cᵀ`.
    pub factors: Vec<Tensor>,
    pub mean: Tensor,
    /// Emit rows in `(z, −z)` pairs so each sample's row mean equals `mean`.
    pub antithetic: bool,
    pub seed: u64,
}

impl SynthSpec {
    /// Class `c` gets covariance `I + gain·P_c`, where the `P_c` project onto
    /// disjoint `D/k`-dimensional subspaces of a random basis.
    pub fn subspace(classes: usize, feature_dim: usize, sites: usize, gain: f64, seed: u64) -> Result<Self> {
        if classes == 0 || feature_dim % classes != 0 {
            return Err(Error::Config(format!("{feature_dim} features cannot be split across {classes} classes")));
        }
        if gain <= -1.0 {
            return Err(Error::Config(format!("gain {gain} makes the covariance singular")));
        }
        let mut rng = SeedStream::new(seed).rng("synth.basis");
        let g = Tensor::from_fn([feature_dim, feature_dim], |_| rng.sample::<f64, _>(StandardNormal));
        let (q, _) = qr_thin(&g)?;
        let r = feature_dim / classes;
        let s = (1.0 + gain).sqrt() - 1.0;
        let factors = (0..classes)
            .map(|c| {
                let qc = Tensor::from_fn([feature_dim, r], |k| q.at(k / r, c * r + k % r));
                let p = qc.matmul(&qc.transpose()?)?;
                Tensor::eye(feature_dim).add(&p.scale(s))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SynthSpec {
            classes,
            feature_dim,
            sites,
            factors,
            mean: Tensor::zeros([feature_dim]),
            antithetic: true,
            seed,
        })
    }

    pub fn covariance(&self, class: usize) -> Result<Tensor> {
        let l = &self.factors[class];
        l.matmul(&l.transpose()?)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        if self.classes == 0 || self.sites == 0 || d == 0 {
            return Err(Error::Config("synthetic spec needs classes, sites and features".into()));
        }
        if self.factors.len() != self.classes {
            return Err(Error::Config(format!("{} factors for {} classes", self.factors.len(), self.classes)));
        }
        if self.antithetic && self.sites % 2 != 0 {
            return Err(Error::Config("antithetic sampling needs an even site count".into()));
        }
        if self.mean.dims() != [d] {
            return Err(Error::Config(format!("mean of shape {:?}, expected [{d}]", self.mean.shape())));
        }
        for (c, l) in self.factors.iter().enumerate() {
            if l.dims() != [d, d] {
                return Err(Error::Config(format!("factor {c} has shape {:?}", l.shape())));
            }
            let cov = self.covariance(c)?;
            let eig = sym_eig(&cov)?;
            let floor = 1e-10 * eig.s[0].abs().max(1.0);
            if !(eig.s[d - 1] > floor) {
                return Err(Error::Config(format!("class {c} covariance is not positive definite")));
            }
        }
        Ok(())
    }
}

/// Labelled feature matrices, one `N × D` block per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub sites: usize,
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let n = self.sites * self.dim;
        let block = &self.features[i * n..(i + 1) * n];
        Tensor::from_fn([self.sites, self.dim], |k| T::of(block[k]))
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }
}

/// Draws `count` samples with labels cycling through the classes. Each
/// `stream` (e.g. train, val, test) has its own random sequence.
pub fn gen_synthetic(spec: &SynthSpec, count: usize, stream: &str) -> Result<FeatureSet> {
    spec.validate()?;
    let (n, d) = (spec.sites, spec.feature_dim);
    let mut rng = SeedStream::new(spec.seed).rng(&format!("synth.{stream}"));
    let mut features = Vec::with_capacity(count * n * d);
    let mut labels = Vec::with_capacity(count);
    let mut z = vec![0.0; d];
    for i in 0..count {
        let c = i % spec.classes;
        let l = &spec.factors[c];
        let fresh = if spec.antithetic { n / 2 } else { n };
        for _ in 0..fresh {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let row: Vec<f64> = (0..d).map(|r| (0..d).map(|k| l.at(r, k) * z[k]).sum::<f64>()).collect();
            features.extend(row.iter().zip(spec.mean.data()).map(|(x, m)| m + x));
            if spec.antithetic {
                features.extend(row.iter().zip(spec.mean.data()).map(|(x, m)| m - x));
            }
        }
        labels.push(c);
    }
    Ok(FeatureSet { sites: n, dim: d, features, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_RECORD - 1).map(fill));
        r
    }

    #[test]
    fn record_arithmetic_and_errors() {
        let bytes: Vec<u8> = (0..10).flat_map(|i| record(i as u8, |k| (k % 256) as u8)).collect();
        let set = parse_cifar_records(&bytes).unwrap();
        assert_eq!(set.len(), 10);
        assert!(parse_cifar_records(&bytes[..bytes.len() - 1]).is_err());
        let bad = record(10, |_| 0);
        assert!(matches!(parse_cifar_records(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn saturated_record_is_all_ones() {
        let set = parse_cifar_records(&record(3, |_| 255)).unwrap();
        assert_eq!(set.labels, vec![3]);
        let img: Tensor = set.image(0);
        assert_eq!(img.dims(), [32, 32, 3]);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn plane_layout_and_round_trip() {
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        // pixel value encodes its channel and a position tag
        let rec = record(7, |k| ((k / plane) * 80 + (k % plane) % 80) as u8);
        let set = parse_cifar_records(&rec).unwrap();
        let (row, col) = (5, 9);
        let p = row * 32 + col;
        for ch in 0..3 {
            assert_eq!(set.raw(0)[p * 3 + ch], (ch * 80 + p % 80) as u8);
        }
        assert_eq!(encode_cifar_records(&set).unwrap(), rec);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bytes: Vec<u8> = (0..5).flat_map(|_| {
            let mut r = record(rng.gen_range(0..10), |_| 0);
            r[1..].iter_mut().for_each(|b| *b = rng.gen());
            r
        }).collect();
        assert_eq!(encode_cifar_records(&parse_cifar_records(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn load_reads_all_batches() {
        let dir = tempfile::tempdir().unwrap();
        for (i, f) in CIFAR_TRAIN_FILES.iter().enumerate() {
            fs::write(dir.path().join(f), record(i as u8, |_| 1).repeat(2)).unwrap();
        }
        fs::write(dir.path().join(CIFAR_TEST_FILE), record(9, |_| 2)).unwrap();
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.labels, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        assert_eq!(test.labels, vec![9]);
        let (a, b) = train.split_tail(3).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!(b.labels, vec![3, 4, 4]);
    }

    #[test]
    fn normalization_subtracts_channel_means() {
        let set = parse_cifar_records(&record(0, |k| if k < 1024 { 255 } else { 0 })).unwrap();
        let means = set.channel_means();
        assert_eq!(means, vec![1.0, 0.0, 0.0]);
        let s: Sample = set.sample(0, &Normalizer { mean: means });
        assert!(s.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flip_examples() {
        let img = Tensor::from_fn([2, 2, 1], |k| (k + 1) as f64);
        assert_eq!(hflip(&img).data(), &[2.0, 1.0, 4.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_fn([5, 7, 3], |_| rng.gen_range(0.0..1.0));
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn padded_crop_at_center_is_identity() {
        let img = Tensor::from_fn([4, 6, 3], |k| k as f64);
        let padded = pad_zero(&img, 2);
        assert_eq!(padded.dims(), [8, 10, 3]);
        assert_eq!(crop(&padded, 2, 2, 4, 6).unwrap(), img);
        assert!(crop(&padded, 5, 0, 4, 6).is_err());
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 9×9 image cropped to 7×7: 3×3 = 9 offsets, identified from the
        // top-left value of each crop.
        let img = Tensor::from_fn([9, 9, 1], |k| k as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 9];
        let draws = 10_000;
        for _ in 0..draws {
            let c = random_crop(&img, 7, 7, &mut rng).unwrap();
            let v = c.data()[0] as usize;
            counts[(v / 9) * 3 + v % 9] += 1;
        }
        let expect = draws as f64 / 9.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum();
        // 99th percentile of chi-square with 8 degrees of freedom
        assert!(chi2 < 20.09, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn augmentation_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::from_fn([32, 32, 3], |_| rng.gen_range(0.0..1.0));
        for _ in 0..20 {
            assert_eq!(Augment::CIFAR.apply(&img, &mut rng).unwrap().dims(), [32, 32, 3]);
        }
        assert_eq!(Augment::NONE.apply(&img, &mut rng).unwrap(), img);
    }

    fn empirical_cov(set: &FeatureSet, class: usize) -> Tensor {
        let d = set.dim;
        let mut acc = Tensor::zeros([d, d]);
        let mut rows = 0usize;
        for i in (0..set.len()).filter(|&i| set.labels[i] == class) {
            let x: Tensor = set.sample(i);
            acc.accumulate(&x.transpose().unwrap().matmul(&x).unwrap()).unwrap();
            rows += set.sites;
        }
        acc.scale(1.0 / rows as f64)
    }

    fn frob(t: &Tensor) -> f64 {
        t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn synthetic_covariance_matches_factor() {
        for antithetic in [false, true] {
            let mut spec = SynthSpec::subspace(2, 8, 100, 1.0, 7).unwrap();
            spec.antithetic = antithetic;
            // 2000 samples × 100 rows, half per class: 10⁵ rows per class
            let set = gen_synthetic(&spec, 2000, "check").unwrap();
            for c in 0..2 {
                let want = spec.covariance(c).unwrap();
                let err = frob(&empirical_cov(&set, c).sub(&want).unwrap()) / frob(&want);
                assert!(err < 0.02, "class {c} antithetic {antithetic}: {err}");
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SynthSpec::subspace(4, 16, 8, 1.0, 3).unwrap();
        let a = gen_synthetic(&spec, 40, "train").unwrap();
        let b = gen_synthetic(&spec, 40, "train").unwrap();
        assert!(a.features.iter().zip(&b.features).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a.features, gen_synthetic(&spec, 40, "test").unwrap().features);
        assert_eq!((0..4).map(|c| a.labels.iter().filter(|&&l| l == c).count()).collect::<Vec<_>>(), vec![10; 4]);
    }

    #[test]
    fn synthetic_class_means_are_indistinguishable() {
        for antithetic in [false, true] {
            let mut spec = SynthSpec::subspace(4, 16, 16, 1.0, 5).unwrap();
            spec.antithetic = antithetic;
            let set = gen_synthetic(&spec, 800, "means").unwrap();
            let d = set.dim;
            // compare each class's per-sample row means against the shared mean (0)
            for c in 0..4 {
                let means: Vec<Vec<f64>> = (0..set.len())
                    .filter(|&i| set.labels[i] == c)
                    .map(|i| {
                        let x: Tensor = set.sample(i);
                        (0..d).map(|j| (0..set.sites).map(|r| x.at(r, j)).sum::<f64>() / set.sites as f64).collect()
                    })
                    .collect();
                let m = means.len() as f64;
                for j in 0..d {
                    let mu = means.iter().map(|v| v[j]).sum::<f64>() / m;
                    let var = means.iter().map(|v| (v[j] - mu).powi(2)).sum::<f64>() / (m - 1.0);
                    let se = (var / m).sqrt();
                    if antithetic {
                        assert!(mu.abs() < 1e-12);
                    } else {
                        assert!(mu.abs() < 3.0 * se + 1e-12, "class {c} coord {j}: {mu} vs se {se}");
                    }
                }
            }
        }
    }

    #[test]
    fn single_class_and_invalid_specs() {
        let spec = SynthSpec::subspace(1, 4, 4, 0.5, 0).unwrap();
        let set = gen_synthetic(&spec, 5, "x").unwrap();
        assert!(set.labels.iter().all(|&l| l == 0));

        let mut spec = SynthSpec::subspace(2, 4, 4, 0.5, 0).unwrap();
        spec.factors[1] = Tensor::zeros([4, 4]);
        assert!(matches!(gen_synthetic(&spec, 2, "x"), Err(Error::Config(_))));
        assert!(SynthSpec::subspace(3, 4, 4, 0.5, 0).is_err());
    }
}
