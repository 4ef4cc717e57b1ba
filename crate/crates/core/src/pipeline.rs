//! End-to-end assembly: configuration, synthetic stand-ins for the image and
//! text encoders, dice supervision, toy SGD training and inference.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blob::Blob;
use crate::casg::{decode_mask, DecoderConfig, DecoderDims, DecoderParams, DecoderVars};
use crate::error::{config_err, Error, Result};
use crate::s2rm::{
    s2rm_forward_batch, FusionConfig, FusionDims, FusionParams, FusionVars, MAX_WORDS,
};
use crate::tensor::nn::{Mode, ParamTree, Role};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Smoothing term of the dice loss.
pub const DICE_EPS: f64 = 1e-6;
/// Soft-mask values at or above this are foreground.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Every knob of a model run. Serialized as JSON; missing fields take the
/// values of [`ModelConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input image height in pixels; multiple of 32.
    pub height: usize,
    /// Input image width in pixels; multiple of 32.
    pub width: usize,
    /// Backbone channels `C_1..C_4` at strides 4, 8, 16, 32.
    pub channels: [usize; 4],
    /// Word-embedding width.
    pub c_lang: usize,
    /// Language clip length, at most 20.
    pub n_max: usize,
    /// Words per synthetic expression.
    pub n_words: usize,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
    /// SGD step size.
    pub lr: f64,
    pub steps: usize,
    /// Samples per batch; also the size of the toy training set.
    pub batch_size: usize,
    /// Strength of the mask-aligned component in synthetic features, in
    /// units of the per-element noise standard deviation.
    pub feature_signal: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 512,
            width: 512,
            channels: [128, 256, 512, 1024],
            c_lang: 768,
            n_max: MAX_WORDS,
            n_words: 8,
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            seed: 0,
            lr: 0.05,
            steps: 500,
            batch_size: 4,
            feature_signal: 1.0,
        }
    }
}

impl ModelConfig {
    /// The overfitting geometry: 256×256 input (8×8 deepest map), narrow
    /// channels and a four-sample training set.
    pub fn toy() -> Self {
        Self {
            height: 256,
            width: 256,
            channels: [8, 8, 16, 16],
            c_lang: 16,
            n_words: 5,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 32 != 0 {
                return Err(config_err(
                    field,
                    format!("must be a positive multiple of 32, got {v}"),
                ));
            }
        }
        if self.channels.contains(&0) {
            return Err(config_err(
                "channels",
                "every stage needs at least one channel",
            ));
        }
        if self.channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(config_err(
                "channels",
                format!(
                    "must be non-decreasing from C1 to C4, got {:?}",
                    self.channels
                ),
            ));
        }
        if self.c_lang == 0 {
            return Err(config_err("c_lang", "must be positive"));
        }
        if self.n_max == 0 || self.n_max > MAX_WORDS {
            return Err(config_err(
                "n_max",
                format!("must be in 1..={MAX_WORDS}, got {}", self.n_max),
            ));
        }
        if self.n_words == 0 || self.n_words > self.n_max {
            return Err(config_err(
                "n_words",
                format!("must be in 1..={}, got {}", self.n_max, self.n_words),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(config_err(
                "lr",
                format!("must be finite and non-negative, got {}", self.lr),
            ));
        }
        // The query and compress blocks always batch-normalize.
        if self.batch_size < 4 {
            return Err(config_err(
                "batch_size",
                format!(
                    "batch norm needs at least 4 samples, got {}",
                    self.batch_size
                ),
            ));
        }
        if !self.feature_signal.is_finite() {
            return Err(config_err("feature_signal", "must be finite"));
        }
        self.decoder.validate()
    }

    /// Spatial size `(H/2^(i+1), W/2^(i+1))` of backbone stage `i`.
    pub fn stage_size(&self, stage: usize) -> (usize, usize) {
        (self.height >> (stage + 1), self.width >> (stage + 1))
    }

    pub fn fusion_dims(&self) -> FusionDims {
        let (height, width) = self.stage_size(4);
        FusionDims {
            height,
            width,
            c_vis: self.channels[3],
            c_lang: self.c_lang,
        }
    }

    pub fn decoder_dims(&self) -> DecoderDims {
        DecoderDims {
            channels: self.channels,
            c_lang: self.c_lang,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    /// Seeded from `config.seed`; fusion weights are drawn first so decoder
    /// ablations leave them untouched.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fusion = FusionParams::init(config.fusion_dims(), &mut rng);
        let decoder = DecoderParams::init(config.decoder_dims(), config.decoder, &mut rng)?;
        Ok(Self { fusion, decoder })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            fusion: FusionParams::zeros(config.fusion_dims()),
            decoder: DecoderParams::zeros(config.decoder_dims(), config.decoder)?,
        })
    }

    pub fn to_blob(&self) -> Blob {
        let meta = serde_json::json!({
            "fusion": self.fusion.dims,
            "decoder": self.decoder.dims,
            "decoder_config": self.decoder.config,
        });
        Blob::from_params(self, meta)
    }

    /// Parameters shaped for `config`, filled from `blob`.
    pub fn from_blob(config: &ModelConfig, blob: &Blob) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        blob.load_into(&mut p)?;
        Ok(p)
    }
}

impl ParamTree for ModelParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.fusion.for_each(f);
        self.decoder.for_each(f);
    }

    fn for_each_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fusion.for_each_trainable_mut(f);
        self.decoder.for_each_trainable_mut(f);
    }

    fn load_from(&mut self, lookup: &mut dyn FnMut(&str) -> Option<Tensor>) -> Result<(), String> {
        self.fusion.load_from(lookup)?;
        self.decoder.load_from(lookup)
    }
}

/// Stand-in for one encoded image/expression pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `V_1..V_4`, stage `i` at `H/2^(i+1) × W/2^(i+1) × C_i`.
    pub vision: [Tensor; 4],
    /// `N × C_lang` word embeddings.
    pub words: Tensor,
    /// `H × W × 1` binary target.
    pub mask: Tensor,
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A filled axis-aligned rectangle or ellipse covering a random fraction of
/// the image.
fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let ellipse = rng.random_bool(0.5);
    let (hf, wf) = (h as f64, w as f64);
    let ry = rng.random_range(0.15..0.35) * hf;
    let rx = rng.random_range(0.15..0.35) * wf;
    let cy = rng.random_range(ry..hf - ry);
    let cx = rng.random_range(rx..wf - rx);
    Tensor::from_fn(&[h, w, 1], |ix| {
        let dy = (ix[0] as f64 + 0.5 - cy) / ry;
        let dx = (ix[1] as f64 + 0.5 - cx) / rx;
        let inside = if ellipse {
            dy * dy + dx * dx <= 1.0
        } else {
            dy.abs() <= 1.0 && dx.abs() <= 1.0
        };
        f64::from(u8::from(inside))
    })
    .expect("positive image size")
}

/// Mean of each `f×f` block of an `H×W×1` map.
fn block_mean(mask: &Tensor, f: usize) -> Vec<f64> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (bh, bw) = (h / f, w / f);
    let mut out = vec![0.0; bh * bw];
    for i in 0..h {
        for j in 0..w {
            out[(i / f) * bw + j / f] += mask.data()[i * w + j];
        }
    }
    let area = (f * f) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    out
}

/// Deterministic synthetic samples `0..count` for `seed`.
///
/// Stage features are standard Gaussian noise plus a rank-one term
/// `feature_signal · (m_i − mean m_i) · u_i`, where `m_i` is the target mask
/// averaged down to the stage resolution and `u_i ∈ {±1}^{C_i}` is a
/// direction shared by every sample of the seed. Words are pure noise.
pub fn synth_batch(config: &ModelConfig, seed: u64, count: usize) -> Result<Vec<SyntheticSample>> {
    config.validate()?;
    if count == 0 {
        return Err(config_err("count", "at least one sample is required"));
    }
    let mut shared = sample_rng(seed, u64::MAX);
    let directions: Vec<Vec<f64>> = config
        .channels
        .iter()
        .map(|&c| {
            (0..c)
                .map(|_| if shared.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    (0..count)
        .map(|index| {
            let mut rng = sample_rng(seed, index as u64);
            let mask = random_shape(&mut rng, config.height, config.width);
            let vision = std::array::from_fn(|k| {
                let stage = k + 1;
                let (h, w) = config.stage_size(stage);
                let c = config.channels[k];
                let m = block_mean(&mask, 1 << (stage + 1));
                let mean = m.iter().sum::<f64>() / m.len() as f64;
                let mut data = gaussian(&mut rng, h * w * c);
                for (cell, &mv) in m.iter().enumerate() {
                    let amp = config.feature_signal * (mv - mean);
                    for (ch, u) in directions[k].iter().enumerate() {
                        data[cell * c + ch] += amp * u;
                    }
                }
                Tensor::new(&[h, w, c], data).expect("stage shape")
            });
            let words = Tensor::new(
                &[config.n_words, config.c_lang],
                gaussian(&mut rng, config.n_words * config.c_lang),
            )
            .expect("word shape");
            Ok(SyntheticSample {
                vision,
                words,
                mask,
            })
        })
        .collect()
}

/// `1 − (2Σpg + ε) / (Σp + Σg + ε)` recorded on the tape.
pub fn dice_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(TensorError::ShapeMismatch {
            op: "dice_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(target).to_vec(),
        }
        .into());
    }
    let pg = tape.mul(pred, target)?;
    let inter = tape.sum(pg);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let sp = tape.sum(pred);
    let sg = tape.sum(target);
    let den = tape.add(sp, sg)?;
    let den = tape.add_scalar(den, DICE_EPS);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Dice loss of plain tensors.
pub fn dice_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = tape.constant(pred.clone());
    let g = tape.constant(target.clone());
    let l = dice_loss(&mut tape, p, g)?;
    Ok(tape.value(l).item())
}

/// Foreground where `p ≥ 0.5`.
pub fn binarize(soft: &Tensor) -> Tensor {
    soft.map(|p| f64::from(u8::from(p >= MASK_THRESHOLD)))
}

/// Intersection over union of two binary masks; two empty masks score 1.
pub fn iou(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "iou",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= MASK_THRESHOLD, y >= MASK_THRESHOLD);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Tape handles of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub fusion: Vec<FusionVars>,
    pub decoder: Vec<DecoderVars>,
}

impl ForwardVars {
    pub fn masks(&self) -> Vec<Var> {
        self.decoder.iter().map(|d| d.mask).collect()
    }
}

/// Fusion over the whole batch (shared batch-norm statistics), then one
/// decoder pass per sample.
pub fn forward(
    tape: &mut Tape,
    samples: &[SyntheticSample],
    params: &mut ModelParams,
    config: &ModelConfig,
    mode: Mode,
) -> Result<ForwardVars> {
    if params.fusion.dims != config.fusion_dims() || params.decoder.dims != config.decoder_dims() {
        return Err(Error::ParamMismatch(format!(
            "parameters built for {:?}/{:?}, config needs {:?}/{:?}",
            params.fusion.dims,
            params.decoder.dims,
            config.fusion_dims(),
            config.decoder_dims()
        )));
    }
    let mut vision = Vec::with_capacity(samples.len());
    let mut words = Vec::with_capacity(samples.len());
    for s in samples {
        let v: [Var; 4] = std::array::from_fn(|k| tape.constant(s.vision[k].clone()));
        vision.push(v);
        words.push(tape.constant(s.words.clone()));
    }
    let v4: Vec<Var> = vision.iter().map(|v| v[3]).collect();
    let fusion = s2rm_forward_batch(tape, &v4, &words, &mut params.fusion, &config.fusion, mode)?;
    let mut decoder = Vec::with_capacity(samples.len());
    for ((v, &t), f) in vision.iter().zip(&words).zip(&fusion) {
        let t_avg = tape.avg_pool(t, &[0])?;
        decoder.push(decode_mask(
            tape,
            [v[0], v[1], v[2]],
            f.fused(),
            t_avg,
            &mut params.decoder,
            &config.decoder,
        )?);
    }
    Ok(ForwardVars { fusion, decoder })
}

/// Batch-mean dice loss of a train-mode forward pass.
pub fn batch_loss(
    tape: &mut Tape,
    samples: &[SyntheticSample],
    params: &mut ModelParams,
    config: &ModelConfig,
    mode: Mode,
) -> Result<Var> {
    let fwd = forward(tape, samples, params, config, mode)?;
    let mut total: Option<Var> = None;
    for (mask, s) in fwd.masks().into_iter().zip(samples) {
        let g = tape.constant(s.mask.clone());
        let l = dice_loss(tape, mask, g)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Missing("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / samples.len() as f64))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Loss before each update.
    pub losses: Vec<f64>,
    pub params: ModelParams,
    pub samples: Vec<SyntheticSample>,
}

/// Plain SGD on the fixed synthetic set of `batch_size` samples, full batch
/// every step.
pub fn train_toy(config: &ModelConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let samples = synth_batch(config, config.seed, config.batch_size)?;
    let mut params = ModelParams::init(config)?;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, &samples, &mut params, config, Mode::Train)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        params.for_each_trainable_mut(&mut |name, t| {
            if let Some(g) = grads.named(name) {
                let updated = t
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(w, g)| w - config.lr * g)
                    .collect();
                *t = Tensor::new(t.shape(), updated).expect("gradient shape matches parameter");
            }
        });
    }
    Ok(TrainOutcome {
        losses,
        params,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// `H×W×1` values in (0,1).
    pub soft: Tensor,
    pub binary: Tensor,
    pub iou: f64,
}

/// Eval-mode prediction for one sample, scored against its target.
pub fn infer(
    config: &ModelConfig,
    params: &ModelParams,
    sample: &SyntheticSample,
) -> Result<Inference> {
    let mut params = params.clone();
    let mut tape = Tape::inference();
    let fwd = forward(
        &mut tape,
        std::slice::from_ref(sample),
        &mut params,
        config,
        Mode::Eval,
    )?;
    let soft = tape.value(fwd.decoder[0].mask).clone();
    let binary = binarize(&soft);
    let iou = iou(&binary, &sample.mask)?;
    Ok(Inference { soft, binary, iou })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 64,
            width: 96,
            channels: [2, 3, 3, 4],
            c_lang: 6,
            n_words: 3,
            steps: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = ModelConfig {
            height: 100,
            ..ModelConfig::toy()
        };
        assert!(matches!(
            cfg.validate(),
            Err(Error::Config {
                field: "height",
                ..
            })
        ));
        let cfg = ModelConfig {
            channels: [8, 4, 16, 16],
            ..ModelConfig::toy()
        };
        assert!(matches!(
            cfg.validate(),
            Err(Error::Config {
                field: "channels",
                ..
            })
        ));
        let cfg = ModelConfig {
            batch_size: 2,
            ..ModelConfig::toy()
        };
        assert!(matches!(
            cfg.validate(),
            Err(Error::Config {
                field: "batch_size",
                ..
            })
        ));
        assert!(ModelConfig::from_json(r#"{"heigth": 64}"#).is_err());
        assert_eq!(
            ModelConfig::from_json("{}").unwrap(),
            ModelConfig::default()
        );
    }

    #[test]
    fn synthetic_data_is_deterministic_and_shaped() {
        let cfg = tiny();
        let a = synth_batch(&cfg, 5, 2).unwrap();
        let b = synth_batch(&cfg, 5, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert_eq!(a[0].vision[3].shape(), &[2, 3, 4]);
        assert_eq!(a[0].vision[0].shape(), &[16, 24, 2]);
        assert_eq!(a[0].mask.shape(), &[64, 96, 1]);
        assert!(a[0].mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn dice_closed_forms() {
        let ones = Tensor::ones(&[4, 4, 1]).unwrap();
        assert!(dice_value(&ones, &ones).unwrap() <= 1e-6);
        let tiny_pred = Tensor::full(&[4, 4, 1], 1e-12).unwrap();
        assert!((dice_value(&tiny_pred, &ones).unwrap() - 1.0).abs() < 1e-6);
        let half = Tensor::from_fn(&[4, 4, 1], |ix| f64::from(u8::from(ix[0] < 2))).unwrap();
        let p = Tensor::full(&[4, 4, 1], 0.5).unwrap();
        // 1 − (2·0.5·8 + ε)/(8 + 8 + ε)
        let want = 1.0 - (8.0 + DICE_EPS) / (16.0 + DICE_EPS);
        assert!((dice_value(&p, &half).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn iou_laws() {
        let a = Tensor::from_fn(&[3, 3, 1], |ix| f64::from(u8::from(ix[0] == 0))).unwrap();
        let b = Tensor::from_fn(&[3, 3, 1], |ix| f64::from(u8::from(ix[0] == 2))).unwrap();
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn zero_params_infer_half_mask() {
        let cfg = tiny();
        let params = ModelParams::zeros(&cfg).unwrap();
        let s = synth_batch(&cfg, 1, 1).unwrap().remove(0);
        let out = infer(&cfg, &params, &s).unwrap();
        assert!(out.soft.data().iter().all(|&v| v == 0.5));
        assert!(out.binary.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let cfg = ModelConfig { lr: 0.0, ..tiny() };
        let out = train_toy(&cfg).unwrap();
        assert_eq!(out.losses.len(), 3);
        assert!(out.losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn params_blob_round_trip() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg).unwrap();
        let back =
            ModelParams::from_blob(&cfg, &Blob::from_bytes(&p.to_blob().to_bytes()).unwrap());
        // Fresh init has no running statistics; those stay unset.
        assert_eq!(back.unwrap(), p);
        let other = ModelConfig {
            channels: [2, 3, 3, 5],
            ..tiny()
        };
        assert!(matches!(
            ModelParams::from_blob(&other, &p.to_blob()),
            Err(Error::ParamMismatch(_))
        ));
    }
}
