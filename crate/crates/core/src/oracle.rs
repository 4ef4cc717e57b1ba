//! Brute-force references and numerical verification.
//!
//! Everything here is written with scalar loops over explicit indices. None
//! of it calls the tensor kernels or the tape, so a bug there cannot hide
//! behind an identical bug here. [`Tensor`] is used only as a container.

#![allow(clippy::needless_range_loop)]

use serde::Serialize;

use crate::casg::{coord_sources, SpatialKernel, StageOutput};
use crate::error::{config_err, Error, Result};
use crate::pipeline::{ModelConfig, ModelParams, SyntheticSample};
use crate::s2rm::{FusionBundle, FusionConfig, FusionParams};
use crate::tensor::nn::{LinearParams, Mode, NormKind};
use crate::tensor::{Tensor, TensorError};

/// Pass threshold for the maximum relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Default central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Largest deepest-map side the pipeline oracle accepts.
pub const ORACLE_MAX_SIDE: usize = 8;

const NORM_EPS: f64 = 1e-5;

/// `H×W×C` scratch map with explicit indexing.
#[derive(Debug, Clone, PartialEq)]
struct Grid {
    h: usize,
    w: usize,
    c: usize,
    d: Vec<f64>,
}

impl Grid {
    fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            d: vec![0.0; h * w * c],
        }
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, c] => Ok(Self {
                h,
                w,
                c,
                d: t.data().to_vec(),
            }),
            _ => Err(TensorError::InvalidShape {
                op: "oracle",
                detail: format!("expected H×W×C, got {:?}", t.shape()),
            }
            .into()),
        }
    }

    fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.d[(i * self.w + j) * self.c + k]
    }

    fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.d[(i * self.w + j) * self.c + k] = v;
    }

    fn tensor(&self) -> Tensor {
        Tensor::new(&[self.h, self.w, self.c], self.d.clone()).expect("grid shape")
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            d: self.d.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    fn concat_channels(parts: &[&Grid]) -> Self {
        let (h, w) = (parts[0].h, parts[0].w);
        let c = parts.iter().map(|p| p.c).sum();
        let mut out = Self::zeros(h, w, c);
        for i in 0..h {
            for j in 0..w {
                let mut k0 = 0;
                for p in parts {
                    for k in 0..p.c {
                        out.set(i, j, k0 + k, p.get(i, j, k));
                    }
                    k0 += p.c;
                }
            }
        }
        out
    }

    fn channel_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.c];
        for i in 0..self.h {
            for j in 0..self.w {
                for (k, mk) in m.iter_mut().enumerate() {
                    *mk += self.get(i, j, k);
                }
            }
        }
        let n = (self.h * self.w) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

fn modulo(a: isize, n: usize) -> usize {
    a.rem_euclid(n as isize) as usize
}

/// `out[i,j,h·W+w'] = Σ_c v[i,j,c] · t[(i−h) mod H, w', c]`.
pub fn oracle_correlate_row(v: &Tensor, t: &Tensor) -> Result<Tensor> {
    check_same("oracle_correlate_row", v, t)?;
    let (v, t) = (Grid::from_tensor(v)?, Grid::from_tensor(t)?);
    Ok(correlate_row(&v, &t, true).tensor())
}

/// `out[i,j,w·H+i'] = Σ_c v[i,j,c] · t[i', (j−w) mod W, c]`.
pub fn oracle_correlate_col(v: &Tensor, t: &Tensor) -> Result<Tensor> {
    check_same("oracle_correlate_col", v, t)?;
    let (v, t) = (Grid::from_tensor(v)?, Grid::from_tensor(t)?);
    Ok(correlate_col(&v, &t, true).tensor())
}

fn correlate_row(v: &Grid, t: &Grid, shift: bool) -> Grid {
    let (h, w, c) = (v.h, v.w, v.c);
    let mut out = Grid::zeros(h, w, h * w);
    for i in 0..h {
        for j in 0..w {
            for s in 0..h {
                let src = if shift {
                    modulo(i as isize - s as isize, h)
                } else {
                    i
                };
                for wp in 0..w {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += v.get(i, j, ch) * t.get(src, wp, ch);
                    }
                    out.set(i, j, s * w + wp, acc);
                }
            }
        }
    }
    out
}

fn correlate_col(v: &Grid, t: &Grid, shift: bool) -> Grid {
    let (h, w, c) = (v.h, v.w, v.c);
    let mut out = Grid::zeros(h, w, h * w);
    for i in 0..h {
        for j in 0..w {
            for s in 0..w {
                let src = if shift {
                    modulo(j as isize - s as isize, w)
                } else {
                    j
                };
                for ip in 0..h {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += v.get(i, j, ch) * t.get(ip, src, ch);
                    }
                    out.set(i, j, s * h + ip, acc);
                }
            }
        }
    }
    out
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `rows × in` → `rows × out` through the block's weight and bias.
fn affine_rows(x: &[f64], rows: usize, p: &LinearParams) -> Vec<f64> {
    let (o, n) = (p.out_features(), p.in_features());
    let w = p.weight.data();
    let mut out = vec![0.0; rows * o];
    for r in 0..rows {
        for oc in 0..o {
            let mut acc = p.bias.as_ref().map_or(0.0, |b| b.data()[oc]);
            for ic in 0..n {
                acc += x[r * n + ic] * w[oc * n + ic];
            }
            out[r * o + oc] = acc;
        }
    }
    out
}

/// One linear block applied to several row sets that share batch-norm
/// statistics. Train mode normalizes with the biased variance of all rows.
fn block_rows(
    inputs: &[Vec<f64>],
    p: &LinearParams,
    relu_after: bool,
    mode: Mode,
) -> Result<Vec<Vec<f64>>> {
    let n_in = p.in_features();
    let o = p.out_features();
    let mut outs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| affine_rows(x, x.len() / n_in, p))
        .collect();
    if let Some(norm) = &p.norm {
        let (scale, offset) = (norm.scale.data(), norm.offset.data());
        match norm.kind {
            NormKind::Layer => {
                for y in &mut outs {
                    for row in y.chunks_mut(o) {
                        let mean = row.iter().sum::<f64>() / o as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / o as f64;
                        let sd = (var + NORM_EPS).sqrt();
                        for (k, v) in row.iter_mut().enumerate() {
                            *v = (*v - mean) / sd * scale[k] + offset[k];
                        }
                    }
                }
            }
            NormKind::Batch => {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; o];
                        let mut count = 0usize;
                        for y in &outs {
                            for row in y.chunks(o) {
                                for k in 0..o {
                                    mean[k] += row[k];
                                }
                                count += 1;
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= count as f64);
                        let mut var = vec![0.0; o];
                        for y in &outs {
                            for row in y.chunks(o) {
                                for k in 0..o {
                                    var[k] += (row[k] - mean[k]) * (row[k] - mean[k]);
                                }
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= count as f64);
                        (mean, var)
                    }
                    Mode::Eval => {
                        let r = norm
                            .running
                            .as_ref()
                            .ok_or_else(|| TensorError::UninitializedStatistics(p.name.clone()))?;
                        (r.mean.data().to_vec(), r.var.data().to_vec())
                    }
                };
                for y in &mut outs {
                    for row in y.chunks_mut(o) {
                        for k in 0..o {
                            row[k] = (row[k] - mean[k]) / (var[k] + NORM_EPS).sqrt() * scale[k]
                                + offset[k];
                        }
                    }
                }
            }
            NormKind::None => {}
        }
    }
    if relu_after {
        for y in &mut outs {
            y.iter_mut().for_each(|v| *v = relu(*v));
        }
    }
    Ok(outs)
}

fn block_grids(
    inputs: &[&Grid],
    p: &LinearParams,
    relu_after: bool,
    mode: Mode,
) -> Result<Vec<Grid>> {
    let rows: Vec<Vec<f64>> = inputs.iter().map(|g| g.d.clone()).collect();
    let outs = block_rows(&rows, p, relu_after, mode)?;
    Ok(inputs
        .iter()
        .zip(outs)
        .map(|(g, d)| Grid {
            h: g.h,
            w: g.w,
            c: p.out_features(),
            d,
        })
        .collect())
}

fn block_grid(input: &Grid, p: &LinearParams) -> Result<Grid> {
    Ok(block_grids(&[input], p, false, Mode::Train)?.remove(0))
}

fn positional(h: usize, w: usize, i: usize, j: usize) -> [f64; 8] {
    let (hf, wf) = (h as f64, w as f64);
    let x0 = -1.0 + 2.0 * j as f64 / wf;
    let x1 = -1.0 + 2.0 * (j + 1) as f64 / wf;
    let y0 = -1.0 + 2.0 * i as f64 / hf;
    let y1 = -1.0 + 2.0 * (i + 1) as f64 / hf;
    [
        (x0 + x1) / 2.0,
        (y0 + y1) / 2.0,
        x0,
        y0,
        x1,
        y1,
        1.0 / wf,
        1.0 / hf,
    ]
}

/// Half-pixel bilinear enlargement by an integer factor, edges clamped.
fn upsample(g: &Grid, f: usize) -> Grid {
    let mut out = Grid::zeros(g.h * f, g.w * f, g.c);
    let src = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    for oy in 0..out.h {
        let (y0, y1, fy) = src(oy, g.h);
        for ox in 0..out.w {
            let (x0, x1, fx) = src(ox, g.w);
            for k in 0..g.c {
                let top = g.get(y0, x0, k) * (1.0 - fx) + g.get(y0, x1, k) * fx;
                let bottom = g.get(y1, x0, k) * (1.0 - fx) + g.get(y1, x1, k) * fx;
                out.set(oy, ox, k, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

fn coparse_grids(v4: &Grid, t_dist: &Grid, cfg: &FusionConfig) -> [Grid; 4] {
    let zero = Grid::zeros(v4.h, v4.w, v4.h * v4.w);
    let (c_l2v, r_l2v) = if cfg.l2v {
        (
            correlate_row(v4, t_dist, cfg.shift),
            correlate_col(v4, t_dist, cfg.shift),
        )
    } else {
        (zero.clone(), zero.clone())
    };
    let (c_v2l, r_v2l) = if cfg.v2l {
        (
            correlate_row(t_dist, v4, cfg.shift),
            correlate_col(t_dist, v4, cfg.shift),
        )
    } else {
        (zero.clone(), zero)
    };
    [c_l2v, r_l2v, c_v2l, r_v2l]
}

/// Gates and fused features per sample; the compress block shares
/// batch-norm statistics across samples.
fn balance_grids(
    v4s: &[&Grid],
    maps: &[&[Grid; 4]],
    fp: &FusionParams,
    cfg: &FusionConfig,
    mode: Mode,
) -> Result<Vec<(Vec<f64>, Grid)>> {
    let mut gates_all = Vec::new();
    let mut stacked = Vec::new();
    for m in maps {
        let gates: Vec<f64> = if cfg.balance {
            let all = Grid::concat_channels(&[&m[0], &m[1], &m[2], &m[3]]);
            let logits = block_grid(&all, &fp.gate)?;
            logits.channel_means().into_iter().map(sigmoid).collect()
        } else {
            vec![1.0; 4]
        };
        let scaled: Vec<Grid> = m
            .iter()
            .zip(&gates)
            .map(|(g, &k)| g.map(|v| v * k))
            .collect();
        stacked.push(Grid::concat_channels(&scaled.iter().collect::<Vec<_>>()));
        gates_all.push(gates);
    }
    let stacked_refs: Vec<&Grid> = stacked.iter().collect();
    let compressed = block_grids(&stacked_refs, &fp.compress, true, mode)?;
    Ok(v4s
        .iter()
        .zip(compressed)
        .zip(gates_all)
        .map(|((v4, comp), gates)| {
            let mut fused = (*v4).clone();
            for (f, c) in fused.d.iter_mut().zip(&comp.d) {
                *f += c;
            }
            (gates, fused)
        })
        .collect())
}

/// The four parsed maps `[c_l2v, r_l2v, c_v2l, r_v2l]` of one sample.
pub fn oracle_coparse(v4: &Tensor, t_dist: &Tensor, config: &FusionConfig) -> Result<[Tensor; 4]> {
    check_same("oracle_coparse", v4, t_dist)?;
    let (v, t) = (Grid::from_tensor(v4)?, Grid::from_tensor(t_dist)?);
    Ok(coparse_grids(&v, &t, config).map(|g| g.tensor()))
}

/// `(gates, fused)` per sample from the parsed maps.
pub fn oracle_balance(
    v4: &[Tensor],
    maps: &[[Tensor; 4]],
    params: &FusionParams,
    config: &FusionConfig,
    mode: Mode,
) -> Result<Vec<(Tensor, Tensor)>> {
    let v: Vec<Grid> = v4.iter().map(Grid::from_tensor).collect::<Result<_>>()?;
    let m: Vec<[Grid; 4]> = maps
        .iter()
        .map(|ms| {
            let [a, b, c, d] = ms;
            Ok([
                Grid::from_tensor(a)?,
                Grid::from_tensor(b)?,
                Grid::from_tensor(c)?,
                Grid::from_tensor(d)?,
            ])
        })
        .collect::<Result<_>>()?;
    let cells = params.dims.cells();
    for (vg, mg) in v.iter().zip(&m) {
        if vg.c != params.dims.c_vis
            || mg
                .iter()
                .any(|g| g.c != cells || g.h != vg.h || g.w != vg.w)
        {
            return Err(TensorError::ShapeMismatch {
                op: "oracle_balance",
                lhs: vec![vg.h, vg.w, vg.c],
                rhs: vec![params.dims.height, params.dims.width, cells],
            }
            .into());
        }
    }
    let v_refs: Vec<&Grid> = v.iter().collect();
    let m_refs: Vec<&[Grid; 4]> = m.iter().collect();
    Ok(balance_grids(&v_refs, &m_refs, params, config, mode)?
        .into_iter()
        .map(|(g, f)| (Tensor::vector(&g), f.tensor()))
        .collect())
}

/// Every intermediate of one sample's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrace {
    pub fusion: FusionBundle,
    pub stages: Vec<StageOutput>,
    pub mask: Tensor,
}

/// The whole model recomputed with loops. Train mode shares batch-norm
/// statistics across `samples`, as the optimized forward does.
pub fn oracle_pipeline(
    samples: &[SyntheticSample],
    params: &ModelParams,
    config: &ModelConfig,
    mode: Mode,
) -> Result<Vec<OracleTrace>> {
    config.validate()?;
    let fd = config.fusion_dims();
    if fd.height > ORACLE_MAX_SIDE || fd.width > ORACLE_MAX_SIDE {
        return Err(Error::SizeLimit {
            name: "oracle_pipeline",
            detail: format!(
                "deepest map {}×{} exceeds {ORACLE_MAX_SIDE}×{ORACLE_MAX_SIDE}",
                fd.height, fd.width
            ),
        });
    }
    if params.fusion.dims != fd || params.decoder.dims != config.decoder_dims() {
        return Err(Error::ParamMismatch(
            "oracle: parameters do not fit the config".into(),
        ));
    }
    let fp = &params.fusion;
    let (h, w, c4, cl) = (fd.height, fd.width, fd.c_vis, fd.c_lang);
    let cells = h * w;
    let fcfg = config.fusion;

    // Language distribution.
    let mut v4s = Vec::new();
    let mut t_avgs = Vec::new();
    let mut q_in = Vec::new();
    for s in samples {
        let v4 = Grid::from_tensor(&s.vision[3])?;
        let n = s.words.shape()[0];
        if n > config.n_max {
            return Err(Error::TooManyWords {
                got: n,
                max: config.n_max,
            });
        }
        let mut t_avg = vec![0.0; cl];
        for r in 0..n {
            for (k, t) in t_avg.iter_mut().enumerate() {
                *t += s.words.data()[r * cl + k];
            }
        }
        t_avg.iter_mut().for_each(|t| *t /= n as f64);
        let mut rows = Vec::with_capacity(cells * (c4 + cl + 8));
        for i in 0..h {
            for j in 0..w {
                rows.extend((0..c4).map(|k| v4.get(i, j, k)));
                rows.extend_from_slice(&t_avg);
                rows.extend_from_slice(&positional(h, w, i, j));
            }
        }
        q_in.push(rows);
        v4s.push(v4);
        t_avgs.push(t_avg);
    }
    let queries = block_rows(&q_in, &fp.query, true, mode)?;

    let mut partial = Vec::new();
    for ((s, q), v4) in samples.iter().zip(&queries).zip(&v4s) {
        let n = s.words.shape()[0];
        let words = s.words.data().to_vec();
        let key = block_rows(std::slice::from_ref(&words), &fp.key, true, mode)?.remove(0);
        let value = block_rows(std::slice::from_ref(&words), &fp.value, true, mode)?.remove(0);
        let mut attention = vec![0.0; cells * n];
        for cell in 0..cells {
            let logits: Vec<f64> = (0..n)
                .map(|r| {
                    (0..c4)
                        .map(|k| q[cell * c4 + k] * key[r * c4 + k])
                        .sum::<f64>()
                        / (c4 as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for r in 0..n {
                attention[cell * n + r] = e[r] / z;
            }
        }
        let mut t_dist = Grid::zeros(h, w, c4);
        for cell in 0..cells {
            for k in 0..c4 {
                let acc: f64 = (0..n)
                    .map(|r| attention[cell * n + r] * value[r * c4 + k])
                    .sum();
                t_dist.d[cell * c4 + k] = acc;
            }
        }
        let maps = coparse_grids(v4, &t_dist, &fcfg);
        let query = Grid {
            h,
            w,
            c: c4,
            d: q.clone(),
        };
        partial.push((query, attention, t_dist, maps));
    }

    let v4_refs: Vec<&Grid> = v4s.iter().collect();
    let map_refs: Vec<&[Grid; 4]> = partial.iter().map(|p| &p.3).collect();
    let balanced = balance_grids(&v4_refs, &map_refs, fp, &fcfg, mode)?;

    let mut traces = Vec::new();
    for ((s, part), ((gates, fused), t_avg)) in samples
        .iter()
        .zip(partial)
        .zip(balanced.into_iter().zip(&t_avgs))
    {
        let (query, attention, t_dist, maps) = part;
        let n = s.words.shape()[0];
        let [c_l2v, r_l2v, c_v2l, r_v2l] = maps.map(|m| m.tensor());
        let bundle = FusionBundle {
            query: query.tensor(),
            attention: Tensor::new(&[cells, n], attention).expect("attention shape"),
            t_dist: t_dist.tensor(),
            c_l2v,
            r_l2v,
            c_v2l,
            r_v2l,
            gates: Tensor::vector(&gates),
            fused: fused.tensor(),
        };
        let (stages, mask) = oracle_decoder(s, &fused, t_avg, params, config)?;
        traces.push(OracleTrace {
            fusion: bundle,
            stages,
            mask,
        });
    }
    Ok(traces)
}

fn oracle_decoder(
    s: &SyntheticSample,
    fused4: &Grid,
    t_avg: &[f64],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(Vec<StageOutput>, Tensor)> {
    let dcfg = config.decoder;
    let attention = |x: f64| match dcfg.attention_act {
        crate::casg::AttentionAct::Tanh => x.tanh(),
        crate::casg::AttentionAct::Sigmoid => sigmoid(x),
    };
    let mut fused: Vec<(usize, Grid)> = vec![(4, fused4.clone())];
    let mut outputs = Vec::new();
    for sp in &params.decoder.stages {
        let stage = sp.stage;
        let v = Grid::from_tensor(&s.vision[stage - 1])?;
        let ups: Vec<Grid> = coord_sources(stage, &dcfg)
            .into_iter()
            .map(|(src, f)| {
                let g = &fused
                    .iter()
                    .find(|(k, _)| *k == src)
                    .expect("deeper stage ran")
                    .1;
                upsample(g, f)
            })
            .collect();
        let i_1 = block_grid(
            &Grid::concat_channels(&ups.iter().collect::<Vec<_>>()),
            &sp.coord,
        )?;
        let c = i_1.c;
        let pooled = i_1.channel_means();
        let chan = if dcfg.channel {
            let mut input = if dcfg.language {
                t_avg.to_vec()
            } else {
                Vec::new()
            };
            input.extend_from_slice(&pooled);
            let hidden: Vec<f64> = affine_rows(&input, 1, &sp.mlp_hidden)
                .into_iter()
                .map(relu)
                .collect();
            Some(
                affine_rows(&hidden, 1, &sp.mlp_out)
                    .into_iter()
                    .map(attention)
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        let spat = if dcfg.spatial {
            let kernel = match &sp.spatial_kernel {
                SpatialKernel::Language(p) => affine_rows(t_avg, 1, p),
                SpatialKernel::Free { value, .. } => value.data().to_vec(),
            };
            let mut m = Grid::zeros(i_1.h, i_1.w, 1);
            for i in 0..i_1.h {
                for j in 0..i_1.w {
                    let dot: f64 = (0..c).map(|k| i_1.get(i, j, k) * kernel[k]).sum();
                    m.set(i, j, 0, attention(dot));
                }
            }
            Some(m)
        } else {
            None
        };
        let mut gated_v = v.clone();
        if let Some(ca) = &chan {
            for i in 0..v.h {
                for j in 0..v.w {
                    for k in 0..c {
                        gated_v.set(i, j, k, v.get(i, j, k) * ca[k]);
                    }
                }
            }
        }
        let i_2 = block_grid(&Grid::concat_channels(&[&gated_v, &i_1]), &sp.fuse_a)?;
        let mut gated = i_2.clone();
        if let Some(sa) = &spat {
            for i in 0..i_2.h {
                for j in 0..i_2.w {
                    for k in 0..c {
                        gated.set(i, j, k, i_2.get(i, j, k) * sa.get(i, j, 0));
                    }
                }
            }
        }
        let f_cross = block_grid(&Grid::concat_channels(&[&gated, &i_1]), &sp.fuse_b)?;
        outputs.push(StageOutput {
            stage,
            i_1: i_1.tensor(),
            chan_att: chan.map(|ca| Tensor::vector(&ca)),
            spat_att: spat.map(|m| m.tensor()),
            i_2: i_2.tensor(),
            f_cross: f_cross.tensor(),
        });
        fused.push((stage, f_cross));
    }
    let (last, f) = fused.last().expect("non-empty");
    let logits = block_grid(f, &params.decoder.mask_head)?;
    let mask = upsample(&logits, 1 << (last + 1)).map(sigmoid);
    Ok((outputs, mask.tensor()))
}

/// Central differences `(f(x+εe_i) − f(x−εe_i)) / 2ε` for every element.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(config_err(
            "eps",
            format!("must be positive and finite, got {eps}"),
        ));
    }
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x.data()[i];
        let plus = f(&x.with_element(i, v + eps))?;
        let minus = f(&x.with_element(i, v - eps))?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(i));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(Tensor::new(x.shape(), grad)?)
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest elementwise [`relative_error`] between two gradients.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub eps: f64,
    pub params: Vec<ParamError>,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn new(op: impl Into<String>, eps: f64, params: Vec<ParamError>) -> Self {
        let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
        Self {
            op: op.into(),
            eps,
            params,
            max_rel_err,
            pass: max_rel_err <= GRAD_TOLERANCE,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_correlation() {
        let v = Tensor::new(&[1, 1, 1], vec![2.0]).unwrap();
        let t = Tensor::new(&[1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(oracle_correlate_row(&v, &t).unwrap().data(), &[6.0]);
        assert_eq!(oracle_correlate_col(&v, &t).unwrap().data(), &[6.0]);
    }

    #[test]
    fn single_row_gram() {
        let v = Tensor::from_fn(&[1, 3, 2], |ix| (ix[1] * 2 + ix[2]) as f64 - 1.5).unwrap();
        let out = oracle_correlate_row(&v, &v).unwrap();
        for j in 0..3 {
            for wp in 0..3 {
                let dot: f64 = (0..2).map(|c| v.at(&[0, j, c]) * v.at(&[0, wp, c])).sum();
                assert_eq!(out.at(&[0, j, wp]), dot);
                assert_eq!(out.at(&[0, j, wp]), out.at(&[0, wp, j]));
            }
        }
    }

    #[test]
    fn single_column_uses_unshifted_generator() {
        let v = Tensor::from_fn(&[3, 1, 2], |ix| (ix[0] + 2 * ix[2]) as f64).unwrap();
        let t = Tensor::from_fn(&[3, 1, 2], |ix| (ix[0] * ix[2]) as f64 + 1.0).unwrap();
        let out = oracle_correlate_col(&v, &t).unwrap();
        for i in 0..3 {
            for ip in 0..3 {
                let dot: f64 = (0..2).map(|c| v.at(&[i, 0, c]) * t.at(&[ip, 0, c])).sum();
                assert_eq!(out.at(&[i, 0, ip]), dot);
            }
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = Tensor::zeros(&[2, 2, 1]).unwrap();
        let b = Tensor::zeros(&[2, 3, 1]).unwrap();
        assert!(oracle_correlate_row(&a, &b).is_err());
    }

    #[test]
    fn finite_differences_of_known_functions() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, FD_EPS).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|t| Ok(3.0 * t.data()[0] - 0.5 * t.data()[1]), &x, 0.25).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-14 && (g.data()[1] + 0.5).abs() < 1e-14);
        assert!(matches!(
            finite_diff_grad(
                |t| Ok(if t.data()[0] > 1.0 {
                    f64::INFINITY
                } else {
                    0.0
                }),
                &x,
                FD_EPS
            ),
            Err(Error::NonFinite(0))
        ));
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
