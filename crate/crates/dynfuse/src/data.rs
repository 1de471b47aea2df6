//! Synthetic multimodal datasets with controllable difficulty structure.
//!
//! Every sample is flagged easy or hard at generation time. Easy samples
//! carry the label in the first modality alone (with a weak echo in the
//! others), so a cheap unimodal model suffices. Hard samples split the
//! label across modalities through a shared random mixing scalar: each
//! modality in isolation is corrupted by that scalar, and only the sum of
//! the two projections cancels it. The difficulty flag is generator-side
//! ground truth for evaluating routing — it never enters a model input.
//!
//! Datasets persist to `.dmmd` files (magic, version, JSON header echoing
//! the generating spec, then fixed-width little-endian records) and export
//! to CSV for outside inspection.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strength of the label echo in non-primary modalities of easy samples,
/// as a fraction of `signal_scale`: strong enough that multimodal models
/// gain a little from fusing, far too weak to matter on its own.
pub const WEAK_ECHO: f64 = 0.3;

/// Standard deviation of the shared mixing scalar in hard samples. At 2.0
/// the first modality of a hard sample is label-free noise and the second
/// is corrupted enough that only combining both recovers the label.
pub const HARD_MIX_STD: f64 = 2.0;

/// What the labels are and how a model should read them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "classes", rename_all = "snake_case")]
pub enum TaskKind {
    BinaryClass,
    Multiclass(usize),
    Regression,
}

impl TaskKind {
    /// Number of classes, if this is a classification task.
    pub fn classes(&self) -> Option<usize> {
        match self {
            TaskKind::BinaryClass => Some(2),
            TaskKind::Multiclass(k) => Some(*k),
            TaskKind::Regression => None,
        }
    }
}

/// Generator-side ground truth about a sample, hidden from models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

/// A class index or a regression target, matching the spec's task kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(u32),
    Value(f64),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c as usize),
            Label::Value(_) => None,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Label::Class(_) => None,
            Label::Value(v) => Some(*v),
        }
    }
}

/// One multimodal sample: a feature vector per modality plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<Vec<f64>>,
    pub label: Label,
    pub difficulty: Difficulty,
}

/// Everything that determines a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Feature dimension of each modality; the length is the modality count.
    pub dims: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of samples whose label needs both modalities.
    pub p_hard: f64,
    pub task: TaskKind,
    pub signal_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dims: vec![32, 32],
            n_train: 4000,
            n_test: 2000,
            p_hard: 0.2,
            task: TaskKind::BinaryClass,
            signal_scale: 3.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "need at least 2 modalities with positive dims, got {:?}",
                self.dims
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("train and test sets must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.p_hard) {
            return Err(Error::Config(format!("p_hard must lie in [0,1], got {}", self.p_hard)));
        }
        if !self.signal_scale.is_finite() || self.signal_scale <= 0.0 {
            return Err(Error::Config(format!(
                "signal_scale must be positive and finite, got {}",
                self.signal_scale
            )));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(Error::Config(format!(
                "noise_scale must be non-negative and finite, got {}",
                self.noise_scale
            )));
        }
        if let TaskKind::Multiclass(k) = self.task {
            if k < 2 {
                return Err(Error::Config(format!("multiclass needs k ≥ 2, got {k}")));
            }
        }
        Ok(())
    }
}

/// Which modalities a noise injection corrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseTarget {
    #[serde(rename = "modality_1")]
    Modality1,
    #[serde(rename = "modality_2")]
    Modality2,
    #[serde(rename = "both")]
    Both,
}

impl NoiseTarget {
    fn hits(&self, modality: usize) -> bool {
        match self {
            NoiseTarget::Modality1 => modality == 0,
            NoiseTarget::Modality2 => modality == 1,
            NoiseTarget::Both => modality < 2,
        }
    }
}

/// Test-time corruption protocol: per sample, with probability `prob`, add
/// i.i.d. Gaussian noise of std `sigma` to the targeted modalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub target: NoiseTarget,
    pub sigma: f64,
    pub prob: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            target: NoiseTarget::Modality2,
            sigma: 1.0,
            prob: 1.0 / 3.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise sigma must be non-negative and finite, got {}",
                self.sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Config(format!(
                "injection probability must lie in [0,1], got {}",
                self.prob
            )));
        }
        Ok(())
    }
}

/// A set of samples plus an echo of the spec that generated them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modalities(&self) -> usize {
        self.spec.dims.len()
    }

    /// The chosen rows of one modality as an `[idx.len(), d_m]` matrix.
    pub fn modality_rows(&self, modality: usize, idx: &[usize]) -> Result<Tensor> {
        if modality >= self.modalities() {
            return Err(Error::Dimension {
                what: "modality index",
                expected: format!("< {}", self.modalities()),
                got: format!("{modality}"),
            });
        }
        let d = self.spec.dims[modality];
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].features[modality]);
        }
        Tensor::new(vec![idx.len(), d], data)
    }

    /// One whole modality as an `[n, d_m]` matrix.
    pub fn modality_matrix(&self, modality: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.modality_rows(modality, &idx)
    }

    /// Class labels of the chosen rows; errors on regression data.
    pub fn class_rows(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                self.samples[i].label.class().ok_or(Error::Config(
                    "dataset holds regression targets, not class labels".into(),
                ))
            })
            .collect()
    }

    pub fn class_labels(&self) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.class_rows(&idx)
    }

    /// Regression targets; errors on classification data.
    pub fn target_values(&self) -> Result<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| {
                s.label.value().ok_or(Error::Config(
                    "dataset holds class labels, not regression targets".into(),
                ))
            })
            .collect()
    }

    pub fn difficulties(&self) -> Vec<Difficulty> {
        self.samples.iter().map(|s| s.difficulty).collect()
    }
}

/// A random direction of unit length.
fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Per-dataset latent structure: one carrier direction per class (a single
/// sign-flipped carrier for binary and regression tasks) and one label-free
/// distractor direction, per modality.
struct Latents {
    carriers: Vec<Vec<Vec<f64>>>,
    distractors: Vec<Vec<f64>>,
}

fn draw_latents(spec: &SyntheticSpec, rng: &mut impl Rng) -> Latents {
    let n_carriers = match spec.task {
        TaskKind::Multiclass(k) => k,
        _ => 1,
    };
    let carriers = spec
        .dims
        .iter()
        .map(|&d| (0..n_carriers).map(|_| unit_vector(rng, d)).collect())
        .collect();
    let distractors = spec.dims.iter().map(|&d| unit_vector(rng, d)).collect();
    Latents { carriers, distractors }
}

fn draw_samples(spec: &SyntheticSpec, lat: &Latents, n: usize, rng: &mut impl Rng) -> Vec<Sample> {
    let s = spec.signal_scale;
    (0..n)
        .map(|_| {
            let difficulty = if rng.gen::<f64>() < spec.p_hard {
                Difficulty::Hard
            } else {
                Difficulty::Easy
            };
            // Per-task label and, for binary/regression, the signed carrier
            // coefficient standing in for the class direction.
            let (label, coeff, class) = match spec.task {
                TaskKind::BinaryClass => {
                    let y = rng.gen_range(0..2u32);
                    (Label::Class(y), if y == 1 { 1.0 } else { -1.0 }, 0)
                }
                TaskKind::Multiclass(k) => {
                    let y = rng.gen_range(0..k as u32);
                    (Label::Class(y), 1.0, y as usize)
                }
                TaskKind::Regression => {
                    let y: f64 = rng.gen_range(-1.0..1.0);
                    (Label::Value(y), y, 0)
                }
            };
            let r = if difficulty == Difficulty::Hard {
                HARD_MIX_STD * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let features = (0..spec.dims.len())
                .map(|m| {
                    let d = spec.dims[m];
                    let carrier = &lat.carriers[m][class];
                    let mut x = vec![0.0; d];
                    match (difficulty, m) {
                        // Easy: full signal in modality 1, weak echo elsewhere.
                        (Difficulty::Easy, 0) => {
                            for (xi, ui) in x.iter_mut().zip(carrier) {
                                *xi = s * coeff * ui;
                            }
                        }
                        (Difficulty::Easy, _) => {
                            for (xi, ui) in x.iter_mut().zip(carrier) {
                                *xi = WEAK_ECHO * s * coeff * ui;
                            }
                        }
                        // Hard: modality 1 carries only the mixing scalar;
                        // modality 2 carries twice the signal minus that
                        // scalar, so the projections cancel it only jointly.
                        (Difficulty::Hard, 0) => {
                            let dir = match spec.task {
                                TaskKind::Multiclass(_) => &lat.distractors[0],
                                _ => carrier,
                            };
                            for (xi, ui) in x.iter_mut().zip(dir) {
                                *xi = s * r * ui;
                            }
                        }
                        (Difficulty::Hard, 1) => match spec.task {
                            TaskKind::Multiclass(_) => {
                                for ((xi, ui), di) in
                                    x.iter_mut().zip(carrier).zip(&lat.distractors[1])
                                {
                                    *xi = 2.0 * s * ui - s * r * di;
                                }
                            }
                            _ => {
                                for (xi, ui) in x.iter_mut().zip(carrier) {
                                    *xi = (2.0 * s * coeff - s * r) * ui;
                                }
                            }
                        },
                        // Hard samples carry nothing in further modalities.
                        (Difficulty::Hard, _) => {}
                    }
                    for xi in x.iter_mut() {
                        *xi += spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
                    }
                    x
                })
                .collect();
            Sample { features, label, difficulty }
        })
        .collect()
}

/// Generate the train and test sets a spec describes. The same spec (seed
/// included) always produces identical bytes.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lat = draw_latents(spec, &mut rng);
    let train = draw_samples(spec, &lat, spec.n_train, &mut rng);
    let test = draw_samples(spec, &lat, spec.n_test, &mut rng);
    Ok((
        Dataset { spec: spec.clone(), samples: train },
        Dataset { spec: spec.clone(), samples: test },
    ))
}

/// Corrupt a copy of the set: per sample, with probability `prob`, add
/// N(0, sigma²) i.i.d. to the targeted modalities. Labels and difficulty
/// flags are untouched.
pub fn inject_noise(set: &Dataset, noise: &NoiseSpec, rng: &mut impl Rng) -> Result<Dataset> {
    noise.validate()?;
    if set.modalities() < 2 {
        return Err(Error::Config("noise targets assume at least 2 modalities".into()));
    }
    let mut out = set.clone();
    for sample in &mut out.samples {
        if rng.gen::<f64>() < noise.prob {
            for (m, feats) in sample.features.iter_mut().enumerate() {
                if noise.target.hits(m) {
                    for x in feats.iter_mut() {
                        *x += noise.sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"DMMD";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct FileHeader {
    spec: SyntheticSpec,
    samples: u64,
}

/// Serialize a dataset into the `.dmmd` byte layout.
pub fn dataset_to_bytes(set: &Dataset) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&FileHeader {
        spec: set.spec.clone(),
        samples: set.len() as u64,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + set.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for sample in &set.samples {
        out.push(match sample.difficulty {
            Difficulty::Easy => 0,
            Difficulty::Hard => 1,
        });
        match (set.spec.task, sample.label) {
            (TaskKind::Regression, Label::Value(v)) => out.extend_from_slice(&v.to_le_bytes()),
            (TaskKind::Regression, Label::Class(_)) => {
                return Err(Error::Config("regression set holds a class label".into()))
            }
            (_, Label::Class(c)) => out.extend_from_slice(&c.to_le_bytes()),
            (_, Label::Value(_)) => {
                return Err(Error::Config("classification set holds a float label".into()))
            }
        }
        for feats in &sample.features {
            for x in feats {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parse the `.dmmd` byte layout, reporting the byte offset of anything
/// malformed. Truncation yields an error, never partial data.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, want {MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, want {VERSION}"),
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header_start = r.pos;
    let header_bytes = r.take(header_len, "JSON header")?;
    let header: FileHeader = serde_json::from_slice(header_bytes).map_err(|e| Error::Format {
        offset: header_start as u64,
        message: format!("header does not parse: {e}"),
    })?;
    header.spec.validate().map_err(|e| Error::Format {
        offset: header_start as u64,
        message: format!("header spec invalid: {e}"),
    })?;

    let classes = header.spec.task.classes();
    let mut samples = Vec::with_capacity(header.samples as usize);
    for i in 0..header.samples {
        let off = r.pos as u64;
        let difficulty = match r.u8("difficulty flag")? {
            0 => Difficulty::Easy,
            1 => Difficulty::Hard,
            other => {
                return Err(Error::Format {
                    offset: off,
                    message: format!("sample {i}: difficulty byte must be 0 or 1, got {other}"),
                })
            }
        };
        let off = r.pos as u64;
        let label = match classes {
            Some(k) => {
                let c = r.u32("class label")?;
                if c as usize >= k {
                    return Err(Error::Format {
                        offset: off,
                        message: format!("sample {i}: class {c} out of range for {k} classes"),
                    });
                }
                Label::Class(c)
            }
            None => {
                let v = r.f64("regression target")?;
                if !v.is_finite() {
                    return Err(Error::Format {
                        offset: off,
                        message: format!("sample {i}: non-finite regression target"),
                    });
                }
                Label::Value(v)
            }
        };
        let features = header
            .spec
            .dims
            .iter()
            .map(|&d| {
                (0..d)
                    .map(|_| {
                        let off = r.pos as u64;
                        let x = r.f64("feature")?;
                        if !x.is_finite() {
                            return Err(Error::Format {
                                offset: off,
                                message: format!("sample {i}: non-finite feature"),
                            });
                        }
                        Ok(x)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample { features, label, difficulty });
    }
    r.finish()?;
    Ok(Dataset { spec: header.spec, samples })
}

pub fn save_dataset(set: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_bytes(set)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_bytes(&fs::read(path)?)
}

/// One row per sample: `difficulty,label,m1_0,…,m2_0,…` for external tools.
pub fn export_csv(set: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["difficulty".to_string(), "label".to_string()];
    for (m, &d) in set.spec.dims.iter().enumerate() {
        header.extend((0..d).map(|j| format!("m{}_{j}", m + 1)));
    }
    w.write_record(&header).map_err(csv_err)?;
    for sample in &set.samples {
        let mut row = Vec::with_capacity(header.len());
        row.push(match sample.difficulty {
            Difficulty::Easy => "easy".to_string(),
            Difficulty::Hard => "hard".to_string(),
        });
        row.push(match sample.label {
            Label::Class(c) => c.to_string(),
            Label::Value(v) => v.to_string(),
        });
        for feats in &sample.features {
            row.extend(feats.iter().map(|x| x.to_string()));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
        .map_err(|e| Error::Config(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            dims: vec![4, 3],
            n_train: 40,
            n_test: 20,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = tiny_spec();
        let (a_train, a_test) = generate(&spec).unwrap();
        let (b_train, b_test) = generate(&spec).unwrap();
        assert_eq!(dataset_to_bytes(&a_train).unwrap(), dataset_to_bytes(&b_train).unwrap());
        assert_eq!(dataset_to_bytes(&a_test).unwrap(), dataset_to_bytes(&b_test).unwrap());

        let other = SyntheticSpec { seed: 1, ..spec };
        let (c_train, _) = generate(&other).unwrap();
        assert_ne!(dataset_to_bytes(&a_train).unwrap(), dataset_to_bytes(&c_train).unwrap());
    }

    #[test]
    fn bytes_roundtrip_bitwise() {
        for task in [TaskKind::BinaryClass, TaskKind::Multiclass(5), TaskKind::Regression] {
            let spec = SyntheticSpec { task, ..tiny_spec() };
            let (train, _) = generate(&spec).unwrap();
            let bytes = dataset_to_bytes(&train).unwrap();
            let back = dataset_from_bytes(&bytes).unwrap();
            assert_eq!(back, train);
            assert_eq!(dataset_to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn files_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.dmmd");
        let (train, _) = generate(&tiny_spec()).unwrap();
        save_dataset(&train, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), train);
    }

    #[test]
    fn malformed_files_report_byte_offsets() {
        let (train, _) = generate(&tiny_spec()).unwrap();
        let bytes = dataset_to_bytes(&train).unwrap();

        let offset_of = |bytes: &[u8]| match dataset_from_bytes(bytes) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("want a format error, got {other:?}"),
        };

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(offset_of(&bad), 0);

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(offset_of(&bad), 4);

        // Truncation anywhere inside the record block errors at the cut.
        let cut = bytes.len() - 5;
        assert!(offset_of(&bytes[..cut]) as usize <= cut);

        // A difficulty byte outside {0,1}: first record starts right after
        // the header.
        let header_len =
            u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let first_record = 10 + header_len;
        let mut bad = bytes.clone();
        bad[first_record] = 7;
        assert_eq!(offset_of(&bad), first_record as u64);

        // A class label beyond the task's range.
        let mut bad = bytes.clone();
        bad[first_record + 1..first_record + 5].copy_from_slice(&99u32.to_le_bytes());
        assert_eq!(offset_of(&bad), (first_record + 1) as u64);

        // Trailing garbage is rejected, not ignored.
        let mut bad = bytes.clone();
        bad.push(0);
        assert_eq!(offset_of(&bad), bytes.len() as u64);
    }

    #[test]
    fn zero_sigma_or_zero_prob_leaves_the_set_unchanged() {
        let (train, _) = generate(&tiny_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let same = inject_noise(
            &train,
            &NoiseSpec { sigma: 0.0, ..NoiseSpec::default() },
            &mut rng,
        )
        .unwrap();
        assert_eq!(same, train);
        let same = inject_noise(
            &train,
            &NoiseSpec { prob: 0.0, sigma: 2.0, ..NoiseSpec::default() },
            &mut rng,
        )
        .unwrap();
        assert_eq!(same, train);
    }

    #[test]
    fn injection_count_follows_the_binomial() {
        let spec = SyntheticSpec {
            dims: vec![4, 4],
            n_train: 9000,
            n_test: 1,
            ..SyntheticSpec::default()
        };
        let (train, _) = generate(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy = inject_noise(
            &train,
            &NoiseSpec { sigma: 0.5, ..NoiseSpec::default() },
            &mut rng,
        )
        .unwrap();
        let injected = train
            .samples
            .iter()
            .zip(&noisy.samples)
            .filter(|(a, b)| a.features != b.features)
            .count();
        // 3σ binomial band: mean 3000, σ = √(9000·⅓·⅔) ≈ 44.7.
        assert!((2866..=3134).contains(&injected), "{injected}");
        // Labels and the untargeted modality are untouched.
        for (a, b) in train.samples.iter().zip(&noisy.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.difficulty, b.difficulty);
            assert_eq!(a.features[0], b.features[0]);
        }
    }

    #[test]
    fn two_injections_compose_like_one_wider_injection() {
        let spec = SyntheticSpec {
            dims: vec![2, 4],
            n_train: 4000,
            n_test: 1,
            ..SyntheticSpec::default()
        };
        let (train, _) = generate(&spec).unwrap();
        let delta_var = |noisy: &Dataset| {
            let (mut sum, mut sum2, mut n) = (0.0, 0.0, 0.0);
            for (a, b) in train.samples.iter().zip(&noisy.samples) {
                for (x, y) in a.features[1].iter().zip(&b.features[1]) {
                    let d = y - x;
                    sum += d;
                    sum2 += d * d;
                    n += 1.0;
                }
            }
            sum2 / n - (sum / n) * (sum / n)
        };
        let certain = |sigma: f64| NoiseSpec { sigma, prob: 1.0, target: NoiseTarget::Modality2 };

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let once_a = inject_noise(&train, &certain(0.6), &mut rng).unwrap();
        let twice = inject_noise(&once_a, &certain(0.8), &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let combined = inject_noise(&train, &certain(1.0), &mut rng).unwrap();
        let (va, vb) = (delta_var(&twice), delta_var(&combined));
        assert!((va - vb).abs() / vb < 0.05, "{va} vs {vb}");
    }

    #[test]
    fn csv_export_is_rectangular_and_labeled() {
        let (train, _) = generate(&tiny_spec()).unwrap();
        let text = export_csv(&train).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header.split(',').count(), 2 + 4 + 3);
        assert!(header.starts_with("difficulty,label,m1_0"));
        assert!(header.ends_with("m2_2"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 40);
        for row in rows {
            assert_eq!(row.split(',').count(), 9);
            assert!(row.starts_with("easy,") || row.starts_with("hard,"));
        }
    }

    #[test]
    fn labels_match_the_task_kind() {
        let spec = SyntheticSpec { task: TaskKind::Multiclass(3), ..tiny_spec() };
        let (train, _) = generate(&spec).unwrap();
        assert!(train.class_labels().unwrap().iter().all(|&c| c < 3));
        assert!(train.target_values().is_err());

        let spec = SyntheticSpec { task: TaskKind::Regression, ..tiny_spec() };
        let (train, _) = generate(&spec).unwrap();
        assert!(train.target_values().unwrap().iter().all(|v| (-1.0..1.0).contains(v)));
        assert!(train.class_labels().is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate(&SyntheticSpec { dims: vec![32], ..SyntheticSpec::default() }).is_err());
        assert!(generate(&SyntheticSpec { p_hard: 1.5, ..SyntheticSpec::default() }).is_err());
        assert!(generate(&SyntheticSpec { n_train: 0, ..SyntheticSpec::default() }).is_err());
        assert!(
            generate(&SyntheticSpec { task: TaskKind::Multiclass(1), ..SyntheticSpec::default() })
                .is_err()
        );
        let (train, _) = generate(&tiny_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = NoiseSpec { prob: 2.0, ..NoiseSpec::default() };
        assert!(inject_noise(&train, &bad, &mut rng).is_err());
        let bad = NoiseSpec { sigma: -1.0, ..NoiseSpec::default() };
        assert!(inject_noise(&train, &bad, &mut rng).is_err());
    }
}
