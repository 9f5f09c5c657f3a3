use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{pseudo_clean, DiffusionPolicy, LatentState, NoisePredictor};
use crate::error::{Error, Result};
use crate::numerics::{
    load_checkpoint, save_checkpoint, time_features, vector, BlockId, Dense, ParamStore,
    TIME_FEATURES,
};

/// Standard deviation of the random trunk biases. Non-zero biases break the
/// odd symmetry of a bias-free tanh stack, which phase-blind features need.
const TRUNK_BIAS_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSpec {
    pub dim: usize,
    pub classes: usize,
    /// Diffusion steps `T`, used to normalize time features.
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Time features on the input plus time-aware normalization of the
    /// penultimate activations. Off gives the time-blind variant.
    pub time_conditioning: bool,
    pub temperature: f64,
    /// Map noisy inputs through the one-shot clean estimate before encoding.
    pub pseudo_clean: bool,
}

impl ScorerSpec {
    fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.embed_dim == 0 {
            return Err(Error::config(
                "scorer widths must be positive with at least one hidden layer",
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("scorer temperature must be positive"));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.dim + TIME_FEATURES
    }
}

/// Which optimizer group a scorer block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// State-encoder trunk.
    Encoder,
    /// Projection, time-aware normalization and prompt embeddings.
    Head,
}

/// Activations of one scoring pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ScoreTrace {
    t: usize,
    class: usize,
    /// Trunk input followed by each trunk layer's tanh output.
    trunk: Vec<Vec<f64>>,
    time: [f64; TIME_FEATURES],
    gamma: Vec<f64>,
    normalized: Vec<f64>,
    audio: Vec<f64>,
    pub score: f64,
}

/// Time-conditioned two-branch contrastive scorer.
///
/// The state branch encodes `x_t` (with time features) through a tanh trunk,
/// rescales and shifts the penultimate activations with time-driven
/// per-channel parameters, and projects to an embedding. The prompt branch is
/// a learned embedding table. The score is the cosine of the two.
#[derive(Debug, Clone)]
pub struct Scorer {
    spec: ScorerSpec,
    params: ParamStore,
    trunk: Vec<Dense>,
    time_scale: Option<Dense>,
    time_shift: Option<Dense>,
    projection: Dense,
    prompt_table: BlockId,
    frozen: bool,
    preprocessor: Option<DiffusionPolicy>,
}

impl Scorer {
    pub fn new<R: Rng + ?Sized>(spec: ScorerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut trunk = Vec::new();
        let mut width = spec.input_width();
        for (i, &h) in spec.hidden.iter().enumerate() {
            let layer = Dense::new(&mut params, &format!("encoder.{i}"), width, h, 1.0, rng)?;
            for b in params.block_values_mut(layer.bias) {
                *b = TRUNK_BIAS_STD * rng.sample::<f64, _>(StandardNormal);
            }
            trunk.push(layer);
            width = h;
        }
        let (time_scale, time_shift) = if spec.time_conditioning {
            let scale = Dense::new(
                &mut params,
                "time_norm.scale",
                TIME_FEATURES,
                width,
                0.0,
                rng,
            )?;
            let shift = Dense::new(
                &mut params,
                "time_norm.shift",
                TIME_FEATURES,
                width,
                0.0,
                rng,
            )?;
            (Some(scale), Some(shift))
        } else {
            (None, None)
        };
        let projection = Dense::new(
            &mut params,
            "head.projection",
            width,
            spec.embed_dim,
            1.0,
            rng,
        )?;
        let prompt_table =
            params.add_block("prompt_table", &[spec.classes, spec.embed_dim], || {
                rng.sample::<f64, _>(StandardNormal)
            })?;
        Ok(Self {
            spec,
            params,
            trunk,
            time_scale,
            time_shift,
            projection,
            prompt_table,
            frozen: false,
            preprocessor: None,
        })
    }

    pub fn spec(&self) -> &ScorerSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::usage("scorer is frozen"));
        }
        Ok(&mut self.params)
    }

    pub fn temperature(&self) -> f64 {
        self.spec.temperature
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Makes the scorer read-only for the rest of its lifetime.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Installs the denoiser used for the clean-estimate preprocessing.
    pub fn set_preprocessor(&mut self, denoiser: DiffusionPolicy) -> Result<()> {
        if self.frozen {
            return Err(Error::usage("scorer is frozen"));
        }
        self.attach_preprocessor(denoiser)
    }

    fn attach_preprocessor(&mut self, denoiser: DiffusionPolicy) -> Result<()> {
        if denoiser.dim() != self.spec.dim || denoiser.schedule().steps() != self.spec.steps {
            return Err(Error::config(
                "preprocessing denoiser does not match the scorer",
            ));
        }
        self.preprocessor = Some(denoiser);
        Ok(())
    }

    pub fn group_of(&self, block_name: &str) -> ParamGroup {
        if block_name.starts_with("encoder.") {
            ParamGroup::Encoder
        } else {
            ParamGroup::Head
        }
    }

    fn prepare(&self, x: &[f64], t: usize, class: usize) -> Result<Vec<f64>> {
        vector::check_len("scorer input", x, self.spec.dim)?;
        if t > self.spec.steps {
            return Err(Error::usage(format!(
                "timestep {t} outside [0, {}]",
                self.spec.steps
            )));
        }
        if class >= self.spec.classes {
            return Err(Error::usage(format!(
                "condition {class} outside [0, {})",
                self.spec.classes
            )));
        }
        if self.spec.pseudo_clean && t >= 1 {
            let denoiser = self.preprocessor.as_ref().ok_or_else(|| {
                Error::usage("clean-estimate preprocessing is enabled but no denoiser is attached")
            })?;
            return pseudo_clean(denoiser, &LatentState::new(x.to_vec(), t, class));
        }
        Ok(x.to_vec())
    }

    fn time_input(&self, t: usize) -> [f64; TIME_FEATURES] {
        if self.spec.time_conditioning {
            time_features(t, self.spec.steps)
        } else {
            [0.0; TIME_FEATURES]
        }
    }

    pub fn prompt_embedding(&self, class: usize) -> &[f64] {
        let e = self.spec.embed_dim;
        &self.params.block_values(self.prompt_table)[class * e..(class + 1) * e]
    }

    /// Raw (unnormalized) state embedding `f_A(x, t)`.
    pub fn state_embedding(&self, x: &[f64], t: usize, class: usize) -> Result<Vec<f64>> {
        Ok(self.forward(x, t, class)?.audio)
    }

    fn forward(&self, x: &[f64], t: usize, class: usize) -> Result<ScoreTrace> {
        let prepared = self.prepare(x, t, class)?;
        let time = self.time_input(t);
        let values = self.params.values();
        let mut input = prepared;
        input.extend_from_slice(&time);
        let mut trunk = vec![input];
        for layer in &self.trunk {
            let mut h = layer.forward(values, &self.params, trunk.last().unwrap());
            h.iter_mut().for_each(|v| *v = v.tanh());
            trunk.push(h);
        }
        let hidden = trunk.last().unwrap();
        let (gamma, normalized) = match (&self.time_scale, &self.time_shift) {
            (Some(scale), Some(shift)) => {
                let gamma: Vec<f64> = scale
                    .forward(values, &self.params, &time)
                    .into_iter()
                    .map(|g| 1.0 + g)
                    .collect();
                let beta = shift.forward(values, &self.params, &time);
                let normalized = hidden
                    .iter()
                    .zip(&gamma)
                    .zip(&beta)
                    .map(|((h, g), b)| h * g + b)
                    .collect();
                (gamma, normalized)
            }
            _ => (vec![1.0; hidden.len()], hidden.clone()),
        };
        let audio = self.projection.forward(values, &self.params, &normalized);
        let score = cosine(&audio, self.prompt_embedding(class))?;
        Ok(ScoreTrace {
            t,
            class,
            trunk,
            time,
            gamma,
            normalized,
            audio,
            score,
        })
    }

    /// Cosine between the normalized state and prompt embeddings.
    pub fn score(&self, x: &[f64], t: usize, class: usize) -> Result<f64> {
        Ok(self.forward(x, t, class)?.score)
    }

    pub fn score_traced(&self, x: &[f64], t: usize, class: usize) -> Result<ScoreTrace> {
        self.forward(x, t, class)
    }

    /// Adds `d_score * dscore/dθ` into `grads`.
    pub fn backward_score(
        &self,
        trace: &ScoreTrace,
        d_score: f64,
        grads: &mut [f64],
    ) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::config(
                "gradient buffer does not match scorer parameters",
            ));
        }
        let values = self.params.values();
        let prompt = self.prompt_embedding(trace.class);
        let (d_audio, d_prompt) = cosine_grad(&trace.audio, prompt, trace.score);
        let e = self.spec.embed_dim;
        let table = self.params.block(self.prompt_table).range();
        let row = table.start + trace.class * e;
        for (g, d) in grads[row..row + e].iter_mut().zip(&d_prompt) {
            *g += d_score * d;
        }
        let d_audio = vector::scale(&d_audio, d_score);
        let d_norm =
            self.projection
                .backward(values, &self.params, &trace.normalized, &d_audio, grads);
        let hidden = trace.trunk.last().unwrap();
        let mut d_hidden = d_norm.clone();
        if let (Some(scale), Some(shift)) = (&self.time_scale, &self.time_shift) {
            let d_gamma: Vec<f64> = d_norm.iter().zip(hidden).map(|(d, h)| d * h).collect();
            scale.backward(values, &self.params, &trace.time, &d_gamma, grads);
            shift.backward(values, &self.params, &trace.time, &d_norm, grads);
            for (dh, g) in d_hidden.iter_mut().zip(&trace.gamma) {
                *dh *= g;
            }
        }
        let mut d = d_hidden;
        for (i, layer) in self.trunk.iter().enumerate().rev() {
            for (dj, yj) in d.iter_mut().zip(&trace.trunk[i + 1]) {
                *dj *= 1.0 - yj * yj;
            }
            d = layer.backward(values, &self.params, &trace.trunk[i], &d, grads);
        }
        Ok(())
    }

    pub fn trace_timestep(trace: &ScoreTrace) -> usize {
        trace.t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = toml::Table::new();
        meta.insert("frozen".into(), toml::Value::Boolean(self.frozen));
        meta.insert(
            "temperature".into(),
            toml::Value::Float(self.spec.temperature),
        );
        meta.insert(
            "scorer".into(),
            toml::Value::try_from(&self.spec).map_err(|e| Error::config(e.to_string()))?,
        );
        save_checkpoint(path, "scorer", &self.params, meta)?;
        Ok(())
    }

    /// Loads a scorer checkpoint. A scorer trained with clean-estimate
    /// preprocessing needs the same denoiser passed back in.
    pub fn load(path: &Path, preprocessor: Option<DiffusionPolicy>) -> Result<Self> {
        let (manifest, params) = load_checkpoint(path)?;
        if manifest.kind != "scorer" {
            return Err(Error::format(
                path,
                format!("expected a scorer checkpoint, found `{}`", manifest.kind),
            ));
        }
        let spec: ScorerSpec = manifest
            .meta
            .get("scorer")
            .cloned()
            .ok_or_else(|| Error::format(path, "manifest lacks scorer metadata"))?
            .try_into()
            .map_err(|e: toml::de::Error| Error::format(path, e.to_string()))?;
        let frozen = manifest
            .meta
            .get("frozen")
            .and_then(|v| v.as_bool())
            .ok_or_else(|| Error::format(path, "manifest lacks the frozen flag"))?;
        spec.validate()?;
        let trunk = (0..spec.hidden.len())
            .map(|i| Dense::from_store(&params, &format!("encoder.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let (time_scale, time_shift) = if spec.time_conditioning {
            (
                Some(Dense::from_store(&params, "time_norm.scale")?),
                Some(Dense::from_store(&params, "time_norm.shift")?),
            )
        } else {
            (None, None)
        };
        let projection = Dense::from_store(&params, "head.projection")?;
        let prompt_table = params
            .find("prompt_table")
            .ok_or_else(|| Error::format(path, "missing prompt table"))?;
        let mut scorer = Self {
            spec,
            params,
            trunk,
            time_scale,
            time_shift,
            projection,
            prompt_table,
            frozen,
            preprocessor: None,
        };
        match (scorer.spec.pseudo_clean, preprocessor) {
            (true, Some(d)) => scorer.attach_preprocessor(d)?,
            (true, None) => {
                return Err(Error::usage(
                    "scorer uses clean-estimate preprocessing; a denoiser checkpoint is required",
                ))
            }
            (false, _) => {}
        }
        Ok(scorer)
    }
}

/// Cosine of two vectors after ℓ2 normalization.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = vector::norm(a);
    let nb = vector::norm(b);
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Degenerate("zero-norm embedding".into()));
    }
    Ok((vector::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
fn cosine_grad(a: &[f64], b: &[f64], cos: f64) -> (Vec<f64>, Vec<f64>) {
    let na = vector::norm(a);
    let nb = vector::norm(b);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| (y / nb - cos * x / na) / na)
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x / na - cos * y / nb) / nb)
        .collect();
    (da, db)
}
