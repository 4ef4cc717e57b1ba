//! Spatial semantic recurrent mining: language distribution, bidirectional
//! cyclic-shift coparsing, and gated balancing of the parsed maps.
//!
//! Feature maps are `H×W×C`. The correlation maps carry `H·W` channels laid
//! out as `k = h·W + w'` for row-shift generators and `k = w·H + i'` for
//! column-shift generators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::Activation;
use crate::tensor::nn::{
    linear_block, linear_block_batched, LinearParams, Mode, NormKind, ParamTree, Role,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Language clip length.
pub const MAX_WORDS: usize = 20;
/// Channels of the positional tensor.
pub const POS_CHANNELS: usize = 8;

/// Ablation switches for the fusion operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Cyclically shift generator slices; off repeats the unshifted tensor.
    pub shift: bool,
    pub l2v: bool,
    pub v2l: bool,
    /// Learned gates; off fixes every gate to 1.
    pub balance: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            shift: true,
            l2v: true,
            v2l: true,
            balance: true,
        }
    }
}

/// Geometry the fusion weights are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDims {
    pub height: usize,
    pub width: usize,
    pub c_vis: usize,
    pub c_lang: usize,
}

impl FusionDims {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub dims: FusionDims,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub gate: LinearParams,
    pub compress: LinearParams,
}

impl FusionParams {
    pub fn init(dims: FusionDims, rng: &mut impl Rng) -> Self {
        let FusionDims { c_vis, c_lang, .. } = dims;
        let maps = 4 * dims.cells();
        Self {
            dims,
            query: LinearParams::init(
                "s2rm.query",
                c_vis + c_lang + POS_CHANNELS,
                c_vis,
                NormKind::Batch,
                rng,
            ),
            key: LinearParams::init("s2rm.key", c_lang, c_vis, NormKind::Layer, rng),
            value: LinearParams::init("s2rm.value", c_lang, c_vis, NormKind::Layer, rng),
            gate: LinearParams::init("s2rm.gate", maps, 4, NormKind::None, rng),
            compress: LinearParams::init("s2rm.compress", maps, c_vis, NormKind::Batch, rng),
        }
    }

    pub fn zeros(dims: FusionDims) -> Self {
        let FusionDims { c_vis, c_lang, .. } = dims;
        let maps = 4 * dims.cells();
        Self {
            dims,
            query: LinearParams::zeros(
                "s2rm.query",
                c_vis + c_lang + POS_CHANNELS,
                c_vis,
                NormKind::Batch,
            ),
            key: LinearParams::zeros("s2rm.key", c_lang, c_vis, NormKind::Layer),
            value: LinearParams::zeros("s2rm.value", c_lang, c_vis, NormKind::Layer),
            gate: LinearParams::zeros("s2rm.gate", maps, 4, NormKind::None),
            compress: LinearParams::zeros("s2rm.compress", maps, c_vis, NormKind::Batch),
        }
    }

    fn blocks(&self) -> [&LinearParams; 5] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.gate,
            &self.compress,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut LinearParams; 5] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.gate,
            &mut self.compress,
        ]
    }
}

impl ParamTree for FusionParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.blocks().into_iter().for_each(|b| b.for_each(f));
    }

    fn for_each_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.blocks_mut()
            .into_iter()
            .for_each(|b| b.for_each_trainable_mut(f));
    }

    fn load_from(&mut self, lookup: &mut dyn FnMut(&str) -> Option<Tensor>) -> Result<(), String> {
        self.blocks_mut()
            .into_iter()
            .try_for_each(|b| b.load_from(lookup))
    }
}

/// Normalized coordinate encoding of an `h×w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTensor(Tensor);

impl PositionalTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Per cell `(i, j)`: `[x_c, y_c, x_min, y_min, x_max, y_max, 1/w, 1/h]`,
/// with extents mapped onto `[-1, 1]`.
pub fn make_positional(h: usize, w: usize) -> Result<PositionalTensor> {
    if h == 0 || w == 0 {
        return Err(crate::error::config_err(
            "positional",
            "height and width must be >= 1",
        ));
    }
    let t = Tensor::from_fn(&[h, w, POS_CHANNELS], |ix| {
        let (i, j) = (ix[0] as f64, ix[1] as f64);
        let (hf, wf) = (h as f64, w as f64);
        let x_min = 2.0 * j / wf - 1.0;
        let x_max = 2.0 * (j + 1.0) / wf - 1.0;
        let y_min = 2.0 * i / hf - 1.0;
        let y_max = 2.0 * (i + 1.0) / hf - 1.0;
        match ix[2] {
            0 => (x_min + x_max) / 2.0,
            1 => (y_min + y_max) / 2.0,
            2 => x_min,
            3 => y_min,
            4 => x_max,
            5 => y_max,
            6 => 1.0 / wf,
            _ => 1.0 / hf,
        }
    })?;
    Ok(PositionalTensor(t))
}

/// Intermediates of the language-distribution step.
#[derive(Debug, Clone, Copy)]
pub struct Distributed {
    pub query: Var,
    pub attention: Var,
    pub t_dist: Var,
}

fn expect_shape(op: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: got.to_vec(),
            rhs: want.to_vec(),
        }
        .into())
    }
}

fn hwc(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(TensorError::InvalidShape {
            op,
            detail: format!("expected H×W×C, got {shape:?}"),
        }
        .into()),
    }
}

/// Query from vision + tiled sentence + position, key/value from words, and
/// the attention-weighted language tensor `t_dist` (one per sample).
///
/// All samples share the query block's batch-norm statistics.
pub fn distribute_language(
    tape: &mut Tape,
    v4: &[Var],
    words: &[Var],
    pos: &PositionalTensor,
    params: &mut FusionParams,
    mode: Mode,
) -> Result<Vec<Distributed>> {
    let d = params.dims;
    if v4.len() != words.len() {
        return Err(Error::Missing(format!(
            "{} vision maps but {} word sequences",
            v4.len(),
            words.len()
        )));
    }
    expect_shape(
        "distribute_language",
        pos.tensor().shape(),
        &[d.height, d.width, POS_CHANNELS],
    )?;
    let p = tape.constant(pos.tensor().clone());
    let mut inputs = Vec::with_capacity(v4.len());
    for (&v, &t) in v4.iter().zip(words) {
        expect_shape(
            "distribute_language",
            tape.shape(v),
            &[d.height, d.width, d.c_vis],
        )?;
        let n = check_words(tape.shape(t), d.c_lang)?;
        debug_assert!(n >= 1);
        let t_avg = tape.avg_pool(t, &[0])?;
        let t_avg = tape.reshape(t_avg, &[1, 1, d.c_lang])?;
        let t0 = tape.broadcast_to(t_avg, &[d.height, d.width, d.c_lang])?;
        inputs.push(tape.concat(&[v, t0, p], 2)?);
    }
    let queries = linear_block_batched(
        tape,
        &inputs,
        &mut params.query,
        Some(Activation::Relu),
        mode,
    )?;
    let mut out = Vec::with_capacity(v4.len());
    for (&q, &t) in queries.iter().zip(words) {
        let k = linear_block(tape, t, &mut params.key, Some(Activation::Relu), mode)?;
        let k = tape.permute(k, &[1, 0])?;
        let v = linear_block(tape, t, &mut params.value, Some(Activation::Relu), mode)?;
        let qf = tape.reshape(q, &[d.cells(), d.c_vis])?;
        let logits = tape.matmul(qf, k)?;
        let logits = tape.scale(logits, 1.0 / (d.c_vis as f64).sqrt());
        let attention = tape.softmax_lastaxis(logits);
        let mixed = tape.matmul(attention, v)?;
        let t_dist = tape.reshape(mixed, &[d.height, d.width, d.c_vis])?;
        out.push(Distributed {
            query: q,
            attention,
            t_dist,
        });
    }
    Ok(out)
}

fn check_words(shape: &[usize], c_lang: usize) -> Result<usize> {
    match *shape {
        [n, c] if c == c_lang => {
            if n > MAX_WORDS {
                Err(Error::TooManyWords {
                    got: n,
                    max: MAX_WORDS,
                })
            } else {
                Ok(n)
            }
        }
        _ => Err(TensorError::ShapeMismatch {
            op: "distribute_language",
            lhs: shape.to_vec(),
            rhs: vec![MAX_WORDS, c_lang],
        }
        .into()),
    }
}

/// Rows cyclically moved down by `h`: `out[r] = x[(r - h) mod H]`.
pub fn shift_rows(tape: &mut Tape, x: Var, h: usize) -> Result<Var> {
    hwc("shift_rows", tape.shape(x))?;
    Ok(tape.roll(x, 0, h as isize)?)
}

/// Columns cyclically moved right by `w`.
pub fn shift_cols(tape: &mut Tape, x: Var, w: usize) -> Result<Var> {
    hwc("shift_cols", tape.shape(x))?;
    Ok(tape.roll(x, 1, w as isize)?)
}

/// Every row shift `0..H` concatenated along the width: `H × (H·W) × C`.
pub fn shift_concat_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let (h, _, _) = hwc("shift_concat_rows", tape.shape(x))?;
    let parts = (0..h)
        .map(|s| shift_rows(tape, x, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.concat(&parts, 1)?)
}

/// Every column shift `0..W` concatenated along the height: `(H·W) × W × C`.
pub fn shift_concat_cols(tape: &mut Tape, x: Var) -> Result<Var> {
    let (_, w, _) = hwc("shift_concat_cols", tape.shape(x))?;
    let parts = (0..w)
        .map(|s| shift_cols(tape, x, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.concat(&parts, 0)?)
}

/// `out[i,j,k] = Σ_c parsed[i,j,c] · gen_row[i,k,c]` as `H` batched
/// `(W×C)·(C×HW)` products.
pub fn correlate_rowwise(tape: &mut Tape, parsed: Var, gen_row: Var) -> Result<Var> {
    let (h, w, c) = hwc("correlate_rowwise", tape.shape(parsed))?;
    expect_shape("correlate_rowwise", tape.shape(gen_row), &[h, h * w, c])?;
    let kernel = tape.permute(gen_row, &[0, 2, 1])?;
    Ok(tape.matmul(parsed, kernel)?)
}

/// `out[i,j,k] = Σ_c parsed[i,j,c] · gen_col[k,j,c]` as `W` batched
/// products, returned as `H×W×(H·W)`.
pub fn correlate_colwise(tape: &mut Tape, parsed: Var, gen_col: Var) -> Result<Var> {
    let (h, w, c) = hwc("correlate_colwise", tape.shape(parsed))?;
    expect_shape("correlate_colwise", tape.shape(gen_col), &[h * w, w, c])?;
    let by_col = tape.permute(parsed, &[1, 0, 2])?;
    let kernel = tape.permute(gen_col, &[1, 2, 0])?;
    let maps = tape.matmul(by_col, kernel)?;
    Ok(tape.permute(maps, &[1, 0, 2])?)
}

fn row_generator(tape: &mut Tape, x: Var, shift: bool) -> Result<Var> {
    if shift {
        shift_concat_rows(tape, x)
    } else {
        let h = tape.shape(x)[0];
        Ok(tape.concat(&vec![x; h], 1)?)
    }
}

fn col_generator(tape: &mut Tape, x: Var, shift: bool) -> Result<Var> {
    if shift {
        shift_concat_cols(tape, x)
    } else {
        let w = tape.shape(x)[1];
        Ok(tape.concat(&vec![x; w], 0)?)
    }
}

/// The four parsed maps, in gate order `[c_l2v, r_l2v, c_v2l, r_v2l]`.
#[derive(Debug, Clone, Copy)]
pub struct CoparseMaps(pub [Var; 4]);

/// Row-shift generators yield the `c_*` maps, column-shift generators the
/// `r_*` maps; `v2l` exchanges the roles of vision and language.
pub fn coparse(
    tape: &mut Tape,
    v4: Var,
    t_dist: Var,
    config: &FusionConfig,
) -> Result<CoparseMaps> {
    let (h, w, _) = hwc("coparse", tape.shape(v4))?;
    expect_shape("coparse", tape.shape(t_dist), tape.shape(v4))?;
    let pair = |tape: &mut Tape, parsed: Var, generator: Var, on: bool| -> Result<[Var; 2]> {
        if !on {
            let z = tape.constant(Tensor::zeros(&[h, w, h * w])?);
            return Ok([z, z]);
        }
        let rows = row_generator(tape, generator, config.shift)?;
        let cols = col_generator(tape, generator, config.shift)?;
        Ok([
            correlate_rowwise(tape, parsed, rows)?,
            correlate_colwise(tape, parsed, cols)?,
        ])
    };
    let [c_l2v, r_l2v] = pair(tape, v4, t_dist, config.l2v)?;
    let [c_v2l, r_v2l] = pair(tape, t_dist, v4, config.v2l)?;
    Ok(CoparseMaps([c_l2v, r_l2v, c_v2l, r_v2l]))
}

#[derive(Debug, Clone, Copy)]
pub struct Balanced {
    pub gates: Var,
    pub fused: Var,
}

/// Gates from conv → spatial mean → sigmoid over the stacked maps, then
/// `fused = v4 + compress(concat(map_k · g_k))`. Compress-block batch norm
/// is shared across all samples.
pub fn balance(
    tape: &mut Tape,
    v4: &[Var],
    maps: &[CoparseMaps],
    params: &mut FusionParams,
    config: &FusionConfig,
    mode: Mode,
) -> Result<Vec<Balanced>> {
    let d = params.dims;
    let mut stacked = Vec::with_capacity(maps.len());
    let mut gates = Vec::with_capacity(maps.len());
    for (&v, m) in v4.iter().zip(maps) {
        expect_shape("balance", tape.shape(v), &[d.height, d.width, d.c_vis])?;
        for &map in &m.0 {
            expect_shape("balance", tape.shape(map), &[d.height, d.width, d.cells()])?;
        }
        let (g, scaled) = if config.balance {
            let all = tape.concat(&m.0, 2)?;
            let logits = linear_block(tape, all, &mut params.gate, None, mode)?;
            let pooled = tape.avg_pool(logits, &[0, 1])?;
            let g = tape.sigmoid(pooled);
            let mut scaled = Vec::with_capacity(4);
            for (k, &map) in m.0.iter().enumerate() {
                let gk = tape.slice(g, 0, k, 1)?;
                scaled.push(tape.mul(map, gk)?);
            }
            (g, scaled)
        } else {
            (tape.constant(Tensor::ones(&[4])?), m.0.to_vec())
        };
        gates.push(g);
        stacked.push(tape.concat(&scaled, 2)?);
    }
    let compressed = linear_block_batched(
        tape,
        &stacked,
        &mut params.compress,
        Some(Activation::Relu),
        mode,
    )?;
    let mut out = Vec::with_capacity(v4.len());
    for ((&v, c), g) in v4.iter().zip(compressed).zip(gates) {
        out.push(Balanced {
            gates: g,
            fused: tape.add(v, c)?,
        });
    }
    Ok(out)
}

/// Tape handles of one fusion pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub distributed: Distributed,
    pub maps: CoparseMaps,
    pub balanced: Balanced,
}

impl FusionVars {
    pub fn fused(&self) -> Var {
        self.balanced.fused
    }

    pub fn bundle(&self, tape: &Tape) -> FusionBundle {
        let get = |v: Var| tape.value(v).clone();
        let [c_l2v, r_l2v, c_v2l, r_v2l] = self.maps.0.map(get);
        FusionBundle {
            query: get(self.distributed.query),
            attention: get(self.distributed.attention),
            t_dist: get(self.distributed.t_dist),
            c_l2v,
            r_l2v,
            c_v2l,
            r_v2l,
            gates: get(self.balanced.gates),
            fused: get(self.balanced.fused),
        }
    }
}

/// Every intermediate of one fusion pass, by value.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBundle {
    pub query: Tensor,
    pub attention: Tensor,
    pub t_dist: Tensor,
    pub c_l2v: Tensor,
    pub r_l2v: Tensor,
    pub c_v2l: Tensor,
    pub r_v2l: Tensor,
    pub gates: Tensor,
    pub fused: Tensor,
}

impl FusionBundle {
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("query", &self.query),
            ("attention", &self.attention),
            ("t_dist", &self.t_dist),
            ("c_l2v", &self.c_l2v),
            ("r_l2v", &self.r_l2v),
            ("c_v2l", &self.c_v2l),
            ("r_v2l", &self.r_v2l),
            ("gates", &self.gates),
            ("fused", &self.fused),
        ]
    }

    pub fn maps(&self) -> [&Tensor; 4] {
        [&self.c_l2v, &self.r_l2v, &self.c_v2l, &self.r_v2l]
    }
}

/// The full fusion trilogy over a batch of samples.
pub fn s2rm_forward_batch(
    tape: &mut Tape,
    v4: &[Var],
    words: &[Var],
    params: &mut FusionParams,
    config: &FusionConfig,
    mode: Mode,
) -> Result<Vec<FusionVars>> {
    let pos = make_positional(params.dims.height, params.dims.width)?;
    let dist = distribute_language(tape, v4, words, &pos, params, mode)?;
    let maps = v4
        .iter()
        .zip(&dist)
        .map(|(&v, d)| coparse(tape, v, d.t_dist, config))
        .collect::<Result<Vec<_>>>()?;
    let balanced = balance(tape, v4, &maps, params, config, mode)?;
    Ok(dist
        .into_iter()
        .zip(maps)
        .zip(balanced)
        .map(|((distributed, maps), balanced)| FusionVars {
            distributed,
            maps,
            balanced,
        })
        .collect())
}

/// Single-sample convenience wrapper around [`s2rm_forward_batch`].
pub fn s2rm_forward(
    tape: &mut Tape,
    v4: Var,
    words: Var,
    params: &mut FusionParams,
    config: &FusionConfig,
    mode: Mode,
) -> Result<FusionVars> {
    Ok(s2rm_forward_batch(tape, &[v4], &[words], params, config, mode)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Tensor {
        let mut tape = Tape::inference();
        let v = f(&mut tape).unwrap();
        tape.value(v).clone()
    }

    fn hwc_tensor(h: usize, w: usize, c: usize, data: &[f64]) -> Tensor {
        Tensor::new(&[h, w, c], data.to_vec()).unwrap()
    }

    #[test]
    fn positional_examples() {
        let p = make_positional(1, 1).unwrap();
        assert_eq!(
            p.tensor().data(),
            &[0.0, 0.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0]
        );
        let p = make_positional(2, 2).unwrap();
        assert_eq!(p.tensor().at(&[0, 0, 0]), -0.5);
        assert_eq!(p.tensor().at(&[0, 0, 1]), -0.5);
        let p = make_positional(3, 5).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(p.tensor().at(&[i, j, 6]), 0.2);
                assert_eq!(p.tensor().at(&[i, j, 7]), 1.0 / 3.0);
            }
        }
        assert!(p.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn shift_examples() {
        let x = hwc_tensor(2, 1, 1, &[1.0, 2.0]);
        assert_eq!(
            run(|t| {
                let v = t.constant(x.clone());
                shift_rows(t, v, 1)
            })
            .data(),
            &[2.0, 1.0]
        );
        assert_eq!(
            run(|t| {
                let v = t.constant(x.clone());
                shift_rows(t, v, 2)
            }),
            x
        );
        let y = hwc_tensor(1, 3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(
            run(|t| {
                let v = t.constant(y.clone());
                shift_cols(t, v, 1)
            })
            .data(),
            &[3.0, 1.0, 2.0]
        );
        assert_eq!(
            run(|t| {
                let v = t.constant(y.clone());
                shift_cols(t, v, 0)
            }),
            y
        );
    }

    #[test]
    fn shift_concat_examples() {
        let x = hwc_tensor(2, 1, 1, &[1.0, 2.0]);
        let r = run(|t| {
            let v = t.constant(x.clone());
            shift_concat_rows(t, v)
        });
        assert_eq!(r.shape(), &[2, 2, 1]);
        assert_eq!(r.data(), &[1.0, 2.0, 2.0, 1.0]);
        let y = hwc_tensor(1, 2, 1, &[1.0, 2.0]);
        let c = run(|t| {
            let v = t.constant(y.clone());
            shift_concat_cols(t, v)
        });
        assert_eq!(c.shape(), &[2, 2, 1]);
        assert_eq!(c.data(), &[1.0, 2.0, 2.0, 1.0]);
        let single = hwc_tensor(1, 3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(
            run(|t| {
                let v = t.constant(single.clone());
                shift_concat_rows(t, v)
            }),
            single
        );
    }

    #[test]
    fn correlate_single_cell_and_zero_generator() {
        let parsed = hwc_tensor(1, 1, 2, &[1.0, 2.0]);
        let generator = hwc_tensor(1, 1, 2, &[3.0, 4.0]);
        let r = run(|t| {
            let (p, g) = (t.constant(parsed.clone()), t.constant(generator.clone()));
            correlate_rowwise(t, p, g)
        });
        assert_eq!(r.data(), &[11.0]);
        let c = run(|t| {
            let (p, g) = (t.constant(parsed.clone()), t.constant(generator.clone()));
            correlate_colwise(t, p, g)
        });
        assert_eq!(c.data(), &[11.0]);
        let zero = run(|t| {
            let p = t.constant(Tensor::ones(&[2, 3, 2]).unwrap());
            let g = t.constant(Tensor::zeros(&[2, 6, 2]).unwrap());
            correlate_rowwise(t, p, g)
        });
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correlate_rejects_mismatched_generators() {
        let mut tape = Tape::inference();
        let p = tape.constant(Tensor::ones(&[2, 3, 2]).unwrap());
        let g = tape.constant(Tensor::ones(&[3, 6, 2]).unwrap());
        assert!(correlate_rowwise(&mut tape, p, g).is_err());
        assert!(correlate_colwise(&mut tape, p, g).is_err());
    }

    #[test]
    fn too_many_words_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = FusionDims {
            height: 1,
            width: 1,
            c_vis: 2,
            c_lang: 3,
        };
        let mut params = FusionParams::init(dims, &mut rng);
        let mut tape = Tape::inference();
        let v = tape.constant(Tensor::ones(&[1, 1, 2]).unwrap());
        let t = tape.constant(Tensor::ones(&[MAX_WORDS + 1, 3]).unwrap());
        let err = s2rm_forward(
            &mut tape,
            v,
            t,
            &mut params,
            &FusionConfig::default(),
            Mode::Train,
        )
        .unwrap_err();
        assert!(matches!(err, Error::TooManyWords { got: 21, max: 20 }));
    }
}
