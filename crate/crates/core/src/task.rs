//! Synthetic stand-in for emotional speech.
//!
//! Each condition ("emotion class") owns a characteristic sinusoid; clean
//! samples are that sinusoid at a random phase plus a little Gaussian
//! texture. The oracle compares magnitude spectra, so it ignores phase and
//! scale and gives an exact ground truth for how well a signal expresses a
//! class.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::vector;
use crate::rng::standard_normal_vec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub dim: usize,
    pub classes: usize,
    pub texture_scale: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            classes: 5,
            texture_scale: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionClass {
    pub id: usize,
    /// Cycles per signal length.
    pub frequency: usize,
    pub amplitude: f64,
}

impl EmotionClass {
    pub fn new(id: usize) -> Self {
        Self {
            id,
            frequency: 4 + 2 * id,
            amplitude: 0.5 + 0.1 * id as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanSample {
    pub x0: Vec<f64>,
    pub class_id: usize,
    pub nuisance_seed: u64,
}

/// Clean win/lose pair labelled with the target condition.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanPair {
    pub win: CleanSample,
    pub lose: CleanSample,
    pub prompt: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    config: TaskConfig,
    cos_table: Vec<f64>,
    sin_table: Vec<f64>,
    templates: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::config("the task needs at least two classes"));
        }
        let top = EmotionClass::new(config.classes - 1).frequency;
        if config.dim < 8 || 2 * top >= config.dim {
            return Err(Error::config(format!(
                "dimension {} cannot resolve class frequencies up to {top}",
                config.dim
            )));
        }
        if !(config.texture_scale >= 0.0) {
            return Err(Error::config("texture scale must be non-negative"));
        }
        let d = config.dim;
        let bins = d / 2 + 1;
        let mut cos_table = vec![0.0; bins * d];
        let mut sin_table = vec![0.0; bins * d];
        for k in 0..bins {
            for n in 0..d {
                let angle = 2.0 * PI * ((k * n) % d) as f64 / d as f64;
                cos_table[k * d + n] = angle.cos();
                sin_table[k * d + n] = angle.sin();
            }
        }
        let mut task = Self {
            config,
            cos_table,
            sin_table,
            templates: Vec::new(),
        };
        task.templates = (0..task.config.classes)
            .map(|c| {
                let pure = task.render(EmotionClass::new(c), 0.0, &[], 0.0);
                let mut spec = task.magnitude_spectrum(&pure);
                let n = vector::norm(&spec);
                spec.iter_mut().for_each(|v| *v /= n);
                spec
            })
            .collect();
        Ok(task)
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn class(&self, id: usize) -> Result<EmotionClass> {
        if id >= self.config.classes {
            return Err(Error::usage(format!(
                "class {id} outside [0, {})",
                self.config.classes
            )));
        }
        Ok(EmotionClass::new(id))
    }

    /// Unit-norm magnitude spectrum of the pure class sinusoid.
    pub fn template(&self, class: usize) -> &[f64] {
        &self.templates[class]
    }

    /// `a_c sin(2π f_c n / D + φ) + scale · texture[n]`.
    pub fn render(
        &self,
        class: EmotionClass,
        phase: f64,
        texture: &[f64],
        texture_scale: f64,
    ) -> Vec<f64> {
        let d = self.config.dim as f64;
        (0..self.config.dim)
            .map(|n| {
                let s = class.amplitude
                    * (2.0 * PI * class.frequency as f64 * n as f64 / d + phase).sin();
                s + texture.get(n).map_or(0.0, |t| texture_scale * t)
            })
            .collect()
    }

    /// Deterministic sample from a nuisance seed.
    pub fn clean_from_seed(&self, class: EmotionClass, nuisance_seed: u64) -> CleanSample {
        let mut rng = ChaCha8Rng::seed_from_u64(nuisance_seed);
        let phase = rng.random_range(0.0..2.0 * PI);
        let texture = standard_normal_vec(&mut rng, self.config.dim);
        CleanSample {
            x0: self.render(class, phase, &texture, self.config.texture_scale),
            class_id: class.id,
            nuisance_seed,
        }
    }

    pub fn generate_clean<R: Rng + ?Sized>(&self, class: EmotionClass, rng: &mut R) -> CleanSample {
        self.clean_from_seed(class, rng.next_u64())
    }

    /// One-sided DFT magnitudes, bins `0..=D/2`.
    pub fn magnitude_spectrum(&self, x: &[f64]) -> Vec<f64> {
        let d = self.config.dim;
        (0..d / 2 + 1)
            .map(|k| {
                let c = &self.cos_table[k * d..(k + 1) * d];
                let s = &self.sin_table[k * d..(k + 1) * d];
                let re = vector::dot(x, c);
                let im = vector::dot(x, s);
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    /// Cosine between the normalized magnitude spectrum of `x` and the class
    /// template.
    pub fn oracle_score(&self, x: &[f64], class: usize) -> Result<f64> {
        vector::check_len("signal", x, self.config.dim)?;
        self.class(class)?;
        let spec = self.magnitude_spectrum(x);
        let n = vector::norm(&spec);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate(
                "oracle score of a zero or non-finite signal".into(),
            ));
        }
        Ok((vector::dot(&spec, &self.templates[class]) / n).clamp(-1.0, 1.0))
    }

    pub fn make_preference_pair<R: Rng + ?Sized>(
        &self,
        target: usize,
        distractor: usize,
        rng: &mut R,
    ) -> Result<CleanPair> {
        if target == distractor {
            return Err(Error::usage("target and distractor classes must differ"));
        }
        let t = self.class(target)?;
        let d = self.class(distractor)?;
        Ok(CleanPair {
            win: self.generate_clean(t, rng),
            lose: self.generate_clean(d, rng),
            prompt: target,
        })
    }

    /// Uniform random target with a uniformly chosen different distractor.
    pub fn random_preference_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> CleanPair {
        let c = self.config.classes;
        let target = rng.random_range(0..c);
        let distractor = (target + rng.random_range(1..c)) % c;
        self.make_preference_pair(target, distractor, rng)
            .expect("distinct valid classes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleSetKind {
    /// Independent clean samples.
    Samples,
    /// Consecutive rows form (win, lose) pairs; the prompt is the win class.
    Pairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleSetHeader {
    format: String,
    kind: SampleSetKind,
    count: usize,
    dim: usize,
    /// Hex-encoded generating seed.
    seed: String,
    payload: String,
    class_ids: Vec<usize>,
}

const SAMPLE_SET_FORMAT: &str = "easpo-samples-v1";

/// Row-major matrix of clean samples with per-row class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub kind: SampleSetKind,
    pub dim: usize,
    pub seed: u64,
    pub class_ids: Vec<usize>,
    pub data: Vec<f64>,
}

impl SampleSet {
    pub fn from_samples(dim: usize, seed: u64, samples: &[CleanSample]) -> Self {
        Self {
            kind: SampleSetKind::Samples,
            dim,
            seed,
            class_ids: samples.iter().map(|s| s.class_id).collect(),
            data: samples.iter().flat_map(|s| s.x0.iter().copied()).collect(),
        }
    }

    pub fn from_pairs(dim: usize, seed: u64, pairs: &[CleanPair]) -> Self {
        let rows: Vec<&CleanSample> = pairs.iter().flat_map(|p| [&p.win, &p.lose]).collect();
        Self {
            kind: SampleSetKind::Pairs,
            dim,
            seed,
            class_ids: rows.iter().map(|s| s.class_id).collect(),
            data: rows.iter().flat_map(|s| s.x0.iter().copied()).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.class_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rebuilds the pairs of a [`SampleSetKind::Pairs`] set. Nuisance seeds
    /// are not stored and come back as zero.
    pub fn pairs(&self) -> Result<Vec<CleanPair>> {
        if self.kind != SampleSetKind::Pairs || !self.count().is_multiple_of(2) {
            return Err(Error::usage("sample set does not hold pairs"));
        }
        Ok((0..self.count() / 2)
            .map(|i| {
                let row = |j: usize| CleanSample {
                    x0: self.row(j).to_vec(),
                    class_id: self.class_ids[j],
                    nuisance_seed: 0,
                };
                CleanPair {
                    win: row(2 * i),
                    lose: row(2 * i + 1),
                    prompt: self.class_ids[2 * i],
                }
            })
            .collect())
    }

    /// Writes `<path>` (TOML header) and `<path>.bin` (little-endian f64 rows).
    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = path.with_extension("bin");
        let header = SampleSetHeader {
            format: SAMPLE_SET_FORMAT.into(),
            kind: self.kind,
            count: self.count(),
            dim: self.dim,
            seed: format!("{:016x}", self.seed),
            payload: payload
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            class_ids: self.class_ids.clone(),
        };
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))?;
        let text = toml::to_string(&header).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: SampleSetHeader =
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if header.format != SAMPLE_SET_FORMAT || header.class_ids.len() != header.count {
            return Err(Error::format(path, "inconsistent sample-set header"));
        }
        let payload = path
            .parent()
            .unwrap_or(Path::new("."))
            .join(&header.payload);
        let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
        if bytes.len() != header.count * header.dim * 8 {
            return Err(Error::format(
                &payload,
                "payload size does not match header",
            ));
        }
        let seed = u64::from_str_radix(&header.seed, 16)
            .map_err(|e| Error::format(path, format!("bad seed: {e}")))?;
        Ok(Self {
            kind: header.kind,
            dim: header.dim,
            seed,
            class_ids: header.class_ids,
            data: bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn task() -> SyntheticTask {
        SyntheticTask::new(TaskConfig::default()).unwrap()
    }

    #[test]
    fn noiseless_class_zero_closed_form() {
        let t = task();
        let x = t.render(EmotionClass::new(0), 0.0, &[], 0.0);
        for (n, v) in x.iter().enumerate() {
            assert!((v - 0.5 * (2.0 * PI * 4.0 * n as f64 / 64.0).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn templates_are_unit_norm_and_well_separated() {
        let t = task();
        for a in 0..5 {
            assert!((vector::norm(t.template(a)) - 1.0).abs() < 1e-12);
            for b in 0..a {
                assert!(vector::dot(t.template(a), t.template(b)) < 0.5);
            }
        }
    }

    #[test]
    fn pure_sinusoid_scores() {
        let t = task();
        let x0 = t.render(EmotionClass::new(0), 0.3, &[], 0.0);
        assert!((t.oracle_score(&x0, 0).unwrap() - 1.0).abs() < 1e-9);
        // direct DFT evaluation puts all energy in bin 4, none in bin 12
        assert!(t.oracle_score(&x0, 4).unwrap() < 0.3);
    }

    #[test]
    fn same_seed_same_sample() {
        let t = task();
        let a = t.generate_clean(EmotionClass::new(2), &mut stream(1, "g", 0));
        let b = t.generate_clean(EmotionClass::new(2), &mut stream(1, "g", 0));
        assert_eq!(a, b);
        assert!(a.x0.iter().all(|v| v.abs() <= 0.7 + 0.25));
    }

    #[test]
    fn generated_class_wins_its_own_oracle() {
        let t = task();
        let mut rng = stream(2, "g", 0);
        let n = 10_000;
        let mut wins = 0;
        for _ in 0..n {
            let s = t.generate_clean(EmotionClass::new(2), &mut rng);
            let own = t.oracle_score(&s.x0, 2).unwrap();
            if (0..5)
                .filter(|&c| c != 2)
                .all(|c| t.oracle_score(&s.x0, c).unwrap() < own)
            {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.99 * n as f64);
    }

    #[test]
    fn class_separability() {
        let t = task();
        let mut rng = stream(3, "g", 0);
        let (mut within, mut cross, mut n_cross) = (0.0, 0.0, 0);
        let n = 10_000;
        for i in 0..n {
            let c = i % 5;
            let s = t.generate_clean(EmotionClass::new(c), &mut rng);
            for k in 0..5 {
                let v = t.oracle_score(&s.x0, k).unwrap();
                if k == c {
                    within += v;
                } else {
                    cross += v;
                    n_cross += 1;
                }
            }
        }
        assert!(within / n as f64 - cross / n_cross as f64 > 0.5);
    }

    #[test]
    fn oracle_ranks_win_above_lose() {
        let t = task();
        let mut rng = stream(4, "p", 0);
        let n = 10_000;
        let mut ok = 0;
        for _ in 0..n {
            let p = t.random_preference_pair(&mut rng);
            assert_ne!(p.win.class_id, p.lose.class_id);
            assert_eq!(p.prompt, p.win.class_id);
            if t.oracle_score(&p.win.x0, p.prompt).unwrap()
                > t.oracle_score(&p.lose.x0, p.prompt).unwrap()
            {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.99 * n as f64);
    }

    #[test]
    fn pair_roles_follow_arguments() {
        let t = task();
        let p = t
            .make_preference_pair(1, 0, &mut stream(5, "p", 0))
            .unwrap();
        assert_eq!((p.win.class_id, p.lose.class_id, p.prompt), (1, 0, 1));
        let q = t
            .make_preference_pair(0, 1, &mut stream(5, "p", 0))
            .unwrap();
        assert_eq!((q.win.class_id, q.lose.class_id, q.prompt), (0, 1, 0));
        // swapping consumes the stream identically, so the nuisance draws line up
        assert_eq!(p.win.nuisance_seed, q.win.nuisance_seed);
        assert!(matches!(
            t.make_preference_pair(2, 2, &mut stream(5, "p", 0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_signal_has_no_score() {
        assert!(matches!(
            task().oracle_score(&[0.0; 64], 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn sample_set_round_trip() {
        let t = task();
        let mut rng = stream(6, "p", 0);
        let pairs: Vec<_> = (0..7).map(|_| t.random_preference_pair(&mut rng)).collect();
        let set = SampleSet::from_pairs(64, 99, &pairs);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.toml");
        set.save(&path).unwrap();
        let loaded = SampleSet::load(&path).unwrap();
        assert_eq!(loaded, set);
        let back = loaded.pairs().unwrap();
        assert_eq!(back.len(), 7);
        assert_eq!(back[3].win.x0, pairs[3].win.x0);
        assert_eq!(back[3].prompt, pairs[3].prompt);
    }

    proptest! {
        #[test]
        fn oracle_is_shift_and_scale_invariant(seed in any::<u64>(), shift in 0usize..64, scale in 0.01f64..100.0, class in 0usize..5) {
            let t = task();
            let s = t.clean_from_seed(EmotionClass::new((seed % 5) as usize), seed);
            let base = t.oracle_score(&s.x0, class).unwrap();
            let mut shifted = s.x0.clone();
            shifted.rotate_left(shift);
            prop_assert!((t.oracle_score(&shifted, class).unwrap() - base).abs() < 1e-9);
            let scaled: Vec<f64> = s.x0.iter().map(|v| v * scale).collect();
            prop_assert!((t.oracle_score(&scaled, class).unwrap() - base).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }
}
