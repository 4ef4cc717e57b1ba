//! Cross-scale decoder guided by language and upstream fused features.
//!
//! Stage `i ∈ {3, 2, 1}` works at `H/2^(i+1) × W/2^(i+1)` with `C_i`
//! channels. Stages are removed top-down for the stage ablations, so a
//! decoder with `n` stages runs stages `n, ..., 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::kernels::Activation;
use crate::tensor::nn::{linear_block, LinearParams, Mode, NormKind, ParamTree, Role};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionAct {
    Tanh,
    Sigmoid,
}

impl AttentionAct {
    pub fn activation(self) -> Activation {
        match self {
            AttentionAct::Tanh => Activation::Tanh,
            AttentionAct::Sigmoid => Activation::Sigmoid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Number of attention-guided stages, 0..=3.
    pub stages: usize,
    pub spatial: bool,
    pub channel: bool,
    /// Feed the pooled sentence vector into the attentions.
    pub language: bool,
    pub attention_act: AttentionAct,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            spatial: true,
            channel: true,
            language: true,
            attention_act: AttentionAct::Tanh,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages > 3 {
            return Err(config_err(
                "decoder.stages",
                format!("must be 0..=3, got {}", self.stages),
            ));
        }
        let attention_ablated = !self.spatial
            || !self.channel
            || !self.language
            || self.attention_act != AttentionAct::Tanh;
        if self.stages == 0 && attention_ablated {
            return Err(config_err(
                "decoder",
                "attention switches have no effect with zero decoder stages",
            ));
        }
        Ok(())
    }

    /// Stage indices that run, in execution order.
    pub fn active_stages(&self) -> Vec<usize> {
        (1..=self.stages.min(3)).rev().collect()
    }
}

/// Channel schedule and language width the decoder is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    /// `C_1..C_4`.
    pub channels: [usize; 4],
    pub c_lang: usize,
}

impl DecoderDims {
    pub fn channel(&self, stage: usize) -> usize {
        self.channels[stage - 1]
    }
}

/// Kernel of the spatial attention's dynamic convolution.
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialKernel {
    /// Projected from the pooled sentence vector.
    Language(LinearParams),
    /// Free learned vector, used when language is ablated.
    Free { name: String, value: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub stage: usize,
    pub coord: LinearParams,
    pub mlp_hidden: LinearParams,
    pub mlp_out: LinearParams,
    pub spatial_kernel: SpatialKernel,
    pub fuse_a: LinearParams,
    pub fuse_b: LinearParams,
}

/// Fused features feeding stage `stage`'s coordinate conv, as
/// `(source stage, upsampling factor)`, deepest first.
pub fn coord_sources(stage: usize, config: &DecoderConfig) -> Vec<(usize, usize)> {
    let mut sources = vec![4];
    sources.extend(config.active_stages().into_iter().filter(|&s| s > stage));
    sources
        .into_iter()
        .map(|s| (s, 1usize << (s - stage)))
        .collect()
}

impl StageParams {
    fn build(
        stage: usize,
        dims: &DecoderDims,
        config: &DecoderConfig,
        mut make: impl FnMut(&str, usize, usize) -> LinearParams,
        free: impl FnOnce(&str, usize) -> Tensor,
    ) -> Self {
        let c = dims.channel(stage);
        let coord_in: usize = coord_sources(stage, config)
            .iter()
            .map(|&(s, _)| dims.channel(s))
            .sum();
        let p = |leaf: &str| format!("casg.stage{stage}.{leaf}");
        let mlp_in = if config.language { dims.c_lang + c } else { c };
        let spatial_kernel = if config.language {
            SpatialKernel::Language(make(&p("lang_proj"), dims.c_lang, c))
        } else {
            let name = p("spatial_kernel");
            let value = free(&name, c);
            SpatialKernel::Free { name, value }
        };
        Self {
            stage,
            coord: make(&p("coord"), coord_in, c),
            mlp_hidden: make(&p("mlp.0"), mlp_in, c),
            mlp_out: make(&p("mlp.1"), c, c),
            spatial_kernel,
            fuse_a: make(&p("fuse_a"), 2 * c, c),
            fuse_b: make(&p("fuse_b"), 2 * c, c),
        }
    }

    fn blocks(&self) -> Vec<&LinearParams> {
        let mut v = vec![&self.coord, &self.mlp_hidden, &self.mlp_out];
        if let SpatialKernel::Language(p) = &self.spatial_kernel {
            v.push(p);
        }
        v.extend([&self.fuse_a, &self.fuse_b]);
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut LinearParams> {
        let mut v = vec![&mut self.coord, &mut self.mlp_hidden, &mut self.mlp_out];
        if let SpatialKernel::Language(p) = &mut self.spatial_kernel {
            v.push(p);
        }
        v.extend([&mut self.fuse_a, &mut self.fuse_b]);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub dims: DecoderDims,
    pub config: DecoderConfig,
    /// In execution order (deepest stage first).
    pub stages: Vec<StageParams>,
    pub mask_head: LinearParams,
}

impl DecoderParams {
    pub fn init(dims: DecoderDims, config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        for s in config.active_stages() {
            let sp = StageParams::build(
                s,
                &dims,
                &config,
                |name, i, o| LinearParams::init(name, i, o, NormKind::None, rng),
                |_, _| Tensor::zeros(&[1]).expect("valid"),
            );
            stages.push(sp);
        }
        // Free kernels are drawn after the linear blocks so that turning the
        // language ablation on does not reshuffle every other weight.
        for sp in stages.iter_mut() {
            if let SpatialKernel::Free { value, .. } = &mut sp.spatial_kernel {
                let c = dims.channel(sp.stage);
                let bound = 1.0 / (c as f64).sqrt();
                *value = Tensor::vector(
                    &(0..c)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect::<Vec<_>>(),
                );
            }
        }
        let head_in = dims.channel(if config.stages == 0 { 4 } else { 1 });
        let mask_head = LinearParams::init("casg.mask_head", head_in, 1, NormKind::None, rng);
        Ok(Self {
            dims,
            config,
            stages,
            mask_head,
        })
    }

    pub fn zeros(dims: DecoderDims, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let stages = config
            .active_stages()
            .into_iter()
            .map(|s| {
                StageParams::build(
                    s,
                    &dims,
                    &config,
                    |name, i, o| LinearParams::zeros(name, i, o, NormKind::None),
                    |_, c| Tensor::zeros(&[c]).expect("valid"),
                )
            })
            .collect();
        let head_in = dims.channel(if config.stages == 0 { 4 } else { 1 });
        Ok(Self {
            dims,
            config,
            stages,
            mask_head: LinearParams::zeros("casg.mask_head", head_in, 1, NormKind::None),
        })
    }

    pub fn stage_mut(&mut self, stage: usize) -> Option<&mut StageParams> {
        self.stages.iter_mut().find(|s| s.stage == stage)
    }
}

impl ParamTree for DecoderParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        for s in &self.stages {
            s.blocks().into_iter().for_each(|b| b.for_each(f));
            if let SpatialKernel::Free { name, value } = &s.spatial_kernel {
                f(name, value, Role::Trainable);
            }
        }
        self.mask_head.for_each(f);
    }

    fn for_each_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for s in &mut self.stages {
            s.blocks_mut()
                .into_iter()
                .for_each(|b| b.for_each_trainable_mut(f));
            if let SpatialKernel::Free { name, value } = &mut s.spatial_kernel {
                f(name, value);
            }
        }
        self.mask_head.for_each_trainable_mut(f);
    }

    fn load_from(&mut self, lookup: &mut dyn FnMut(&str) -> Option<Tensor>) -> Result<(), String> {
        for s in &mut self.stages {
            s.blocks_mut()
                .into_iter()
                .try_for_each(|b| b.load_from(lookup))?;
            if let SpatialKernel::Free { name, value } = &mut s.spatial_kernel {
                let t = lookup(name).ok_or_else(|| format!("missing tensor {name}"))?;
                if t.shape() != value.shape() {
                    return Err(format!("tensor {name} has shape {:?}", t.shape()));
                }
                *value = t;
            }
        }
        self.mask_head.load_from(lookup)
    }
}

/// Tape handles of one decoding stage. Ablated attentions are `None`.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub stage: usize,
    pub i_1: Var,
    pub chan_att: Option<Var>,
    pub spat_att: Option<Var>,
    pub i_2: Var,
    pub f_cross: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub stage: usize,
    pub i_1: Tensor,
    pub chan_att: Option<Tensor>,
    pub spat_att: Option<Tensor>,
    pub i_2: Tensor,
    pub f_cross: Tensor,
}

impl StageVars {
    pub fn values(&self, tape: &Tape) -> StageOutput {
        let get = |v: Var| tape.value(v).clone();
        StageOutput {
            stage: self.stage,
            i_1: get(self.i_1),
            chan_att: self.chan_att.map(get),
            spat_att: self.spat_att.map(get),
            i_2: get(self.i_2),
            f_cross: get(self.f_cross),
        }
    }
}

/// Stage `i`'s temporary feature `I_{i,1}`: upsample every available deeper
/// fused map to the stage resolution, concatenate (deepest first), 1×1 conv.
pub fn coord_combine(
    tape: &mut Tape,
    stage: usize,
    fused: &[(usize, Var)],
    params: &mut StageParams,
    config: &DecoderConfig,
) -> Result<Var> {
    let sources = coord_sources(stage, config);
    let mut parts = Vec::with_capacity(sources.len());
    let mut target: Option<Vec<usize>> = None;
    for (src, factor) in sources {
        let &(_, f) = fused.iter().find(|(s, _)| *s == src).ok_or_else(|| {
            Error::Missing(format!("stage {stage} needs fused features of stage {src}"))
        })?;
        let up = tape.upsample_bilinear(f, factor)?;
        let spatial = tape.shape(up)[..2].to_vec();
        match &target {
            Some(t) if *t != spatial => {
                return Err(TensorError::ShapeMismatch {
                    op: "coord_combine",
                    lhs: t.clone(),
                    rhs: spatial,
                }
                .into())
            }
            _ => target = Some(spatial),
        }
        parts.push(up);
    }
    let stacked = tape.concat(&parts, 2)?;
    Ok(linear_block(
        tape,
        stacked,
        &mut params.coord,
        None,
        Mode::Train,
    )?)
}

/// `act(MLP(concat(t_avg, mean(I_{i,1}))))`, or the MLP over the pooled
/// feature alone when `t_avg` is `None`.
pub fn channel_attention(
    tape: &mut Tape,
    t_avg: Option<Var>,
    i_1: Var,
    params: &mut StageParams,
    act: AttentionAct,
) -> Result<Var> {
    let pooled = tape.avg_pool(i_1, &[0, 1])?;
    let input = match t_avg {
        Some(t) => tape.concat(&[t, pooled], 0)?,
        None => pooled,
    };
    let hidden = linear_block(
        tape,
        input,
        &mut params.mlp_hidden,
        Some(Activation::Relu),
        Mode::Train,
    )?;
    let out = linear_block(tape, hidden, &mut params.mlp_out, None, Mode::Train)?;
    Ok(tape.activation(act.activation(), out))
}

/// Dynamic 1×1 convolution: `out[i,j] = act(Σ_c I_{i,1}[i,j,c] · k[c])` with
/// `k` projected from `t_avg` (or a free vector under the language ablation).
pub fn spatial_attention(
    tape: &mut Tape,
    t_avg: Option<Var>,
    i_1: Var,
    params: &mut StageParams,
    act: AttentionAct,
) -> Result<Var> {
    let c = *tape.shape(i_1).last().expect("rank 3");
    let kernel = match (&mut params.spatial_kernel, t_avg) {
        (SpatialKernel::Language(proj), Some(t)) => linear_block(tape, t, proj, None, Mode::Train)?,
        (SpatialKernel::Free { name, value }, None) => tape.param(name, value),
        _ => {
            return Err(Error::ParamMismatch(
                "spatial kernel kind does not match the language setting".into(),
            ))
        }
    };
    let kernel = tape.reshape(kernel, &[c, 1])?;
    let response = tape.matmul(i_1, kernel)?;
    Ok(tape.activation(act.activation(), response))
}

/// `I_2 = conv(concat(V ⊙ C, I_1))`, `F = conv(concat(I_2 ⊙ S, I_1))`; a
/// missing attention leaves its operand ungated.
pub fn stage_fuse(
    tape: &mut Tape,
    v_i: Var,
    i_1: Var,
    chan_att: Option<Var>,
    spat_att: Option<Var>,
    params: &mut StageParams,
) -> Result<(Var, Var)> {
    if tape.shape(v_i) != tape.shape(i_1) {
        return Err(TensorError::ShapeMismatch {
            op: "stage_fuse",
            lhs: tape.shape(v_i).to_vec(),
            rhs: tape.shape(i_1).to_vec(),
        }
        .into());
    }
    let gated_v = match chan_att {
        Some(c) => tape.mul(v_i, c)?,
        None => v_i,
    };
    let a = tape.concat(&[gated_v, i_1], 2)?;
    let i_2 = linear_block(tape, a, &mut params.fuse_a, None, Mode::Train)?;
    let gated = match spat_att {
        Some(s) => tape.mul(i_2, s)?,
        None => i_2,
    };
    let b = tape.concat(&[gated, i_1], 2)?;
    let f = linear_block(tape, b, &mut params.fuse_b, None, Mode::Train)?;
    Ok((i_2, f))
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub stages: Vec<StageVars>,
    pub logits: Var,
    pub mask: Var,
}

/// Run the active stages, then mask head, upsampling to full resolution
/// and sigmoid. `vision` holds `[V_1, V_2, V_3]`.
pub fn decode_mask(
    tape: &mut Tape,
    vision: [Var; 3],
    fused4: Var,
    t_avg: Var,
    params: &mut DecoderParams,
    config: &DecoderConfig,
) -> Result<DecoderVars> {
    config.validate()?;
    if params.config.stages != config.stages || params.config.language != config.language {
        return Err(Error::ParamMismatch(format!(
            "decoder params built for {} stages (language {}), config asks for {} (language {})",
            params.config.stages, params.config.language, config.stages, config.language
        )));
    }
    let lang = config.language.then_some(t_avg);
    let mut fused: Vec<(usize, Var)> = vec![(4, fused4)];
    let mut stages = Vec::new();
    for sp in params.stages.iter_mut() {
        let s = sp.stage;
        let v_i = vision[s - 1];
        let c = params.dims.channel(s);
        if tape.shape(v_i)[2] != c {
            return Err(TensorError::ShapeMismatch {
                op: "decode_mask",
                lhs: tape.shape(v_i).to_vec(),
                rhs: vec![c],
            }
            .into());
        }
        let i_1 = coord_combine(tape, s, &fused, sp, config)?;
        let chan_att = if config.channel {
            Some(channel_attention(
                tape,
                lang,
                i_1,
                sp,
                config.attention_act,
            )?)
        } else {
            None
        };
        let spat_att = if config.spatial {
            Some(spatial_attention(
                tape,
                lang,
                i_1,
                sp,
                config.attention_act,
            )?)
        } else {
            None
        };
        let (i_2, f_cross) = stage_fuse(tape, v_i, i_1, chan_att, spat_att, sp)?;
        fused.push((s, f_cross));
        stages.push(StageVars {
            stage: s,
            i_1,
            chan_att,
            spat_att,
            i_2,
            f_cross,
        });
    }
    let (last_stage, last) = *fused.last().expect("non-empty");
    let logits = linear_block(tape, last, &mut params.mask_head, None, Mode::Train)?;
    // Last feature sits at 1/2^(s+1) of the input resolution.
    let up = tape.upsample_bilinear(logits, 1 << (last_stage + 1))?;
    let mask = tape.sigmoid(up);
    Ok(DecoderVars {
        stages,
        logits,
        mask,
    })
}
