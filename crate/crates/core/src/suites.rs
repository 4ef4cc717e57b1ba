//! Invariant suites shared by the `check` command and the acceptance tests.
//! Each suite returns named checks with a pass/fail status and a metric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::casg::{AttentionAct, DecoderConfig};
use crate::error::Result;
use crate::oracle::{
    oracle_balance, oracle_coparse, oracle_correlate_col, oracle_correlate_row, oracle_pipeline,
};
use crate::pipeline::{forward, synth_batch, ModelConfig, ModelParams, SyntheticSample};
use crate::s2rm::{
    balance, coparse, correlate_colwise, correlate_rowwise, shift_cols, shift_concat_cols,
    shift_concat_rows, shift_rows, CoparseMaps, FusionConfig, FusionDims, FusionParams,
};
use crate::tensor::nn::Mode;
use crate::tensor::{Tape, Tensor, Var};

/// Optimized kernels vs loop oracles.
pub const KERNEL_TOLERANCE: f64 = 1e-10;
/// Full pipeline vs loop oracle.
pub const PIPELINE_TOLERANCE: f64 = 1e-9;
/// Attention rows must sum to one within this.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;
/// Seeded instances per oracle-equivalence entry.
pub const ORACLE_INSTANCES: usize = 50;

pub const SUITES: [&str; 6] = ["shift", "oracle", "shape", "attention", "gates", "ablation"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        ok: bool,
        metric: Option<f64>,
        detail: Option<String>,
    ) -> Self {
        Self {
            name: name.into(),
            status: if ok { Status::Pass } else { Status::Fail },
            metric,
            detail,
        }
    }

    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).expect("positive shape")
}

fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let v = f(&mut tape)?;
    Ok(tape.value(v).clone())
}

/// Identity, full-cycle and composition laws of the cyclic shifts, for every
/// `H ∈ 1..=4`, `W ∈ 1..=5` and shifts `0..=2H` (rows) or `0..=2W` (cols).
/// Equality is bit-exact.
pub fn shift_laws() -> Result<Vec<Check>> {
    type Shift = fn(&mut Tape, Var, usize) -> Result<Var>;
    let axes: [(&str, Shift, usize); 2] = [("rows", shift_rows, 0), ("cols", shift_cols, 1)];
    let mut out = Vec::new();
    for (axis, shift, ax) in axes {
        let (mut identity, mut cycle, mut compose) = ((0, 0), (0, 0), (0, 0));
        for h in 1..=4 {
            for w in 1..=5 {
                let x = Tensor::from_fn(&[h, w, 2], |ix| {
                    (ix[0] * 100 + ix[1] * 10 + ix[2]) as f64 + 0.25
                })?;
                let n = [h, w][ax];
                let run = |s: &[usize]| {
                    eval(|t| {
                        let mut v = t.constant(x.clone());
                        for &k in s {
                            v = shift(t, v, k)?;
                        }
                        Ok(v)
                    })
                };
                identity.0 += 1;
                identity.1 += usize::from(run(&[0])? == x);
                cycle.0 += 1;
                cycle.1 += usize::from(run(&[n])? == x && run(&[2 * n])? == x);
                for a in 0..=2 * n {
                    for b in 0..=2 * n {
                        compose.0 += 1;
                        let lhs = run(&[a, b])?;
                        let rhs = run(&[(a + b) % n])?;
                        compose.1 += usize::from(lhs == rhs && run(&[a + b])? == rhs);
                    }
                }
            }
        }
        for (law, (total, ok)) in [
            ("identity", identity),
            ("full_cycle", cycle),
            ("composition", compose),
        ] {
            out.push(Check::new(
                format!("shift.{axis}.{law}"),
                ok == total,
                Some((total - ok) as f64),
                Some(format!("{ok}/{total} cases bit-exact")),
            ));
        }
    }
    Ok(out)
}

/// A random small geometry with random ablation switches.
fn random_config(rng: &mut ChaCha8Rng, max_side: usize) -> ModelConfig {
    let mut channels = [0usize; 4];
    let mut c = rng.random_range(1..=3);
    for ch in channels.iter_mut() {
        c += rng.random_range(0..=2);
        *ch = c;
    }
    let stages = rng.random_range(0..=3);
    let decoder = if stages == 0 {
        DecoderConfig {
            stages,
            ..DecoderConfig::default()
        }
    } else {
        DecoderConfig {
            stages,
            spatial: rng.random_bool(0.8),
            channel: rng.random_bool(0.8),
            language: rng.random_bool(0.8),
            attention_act: if rng.random_bool(0.5) {
                AttentionAct::Tanh
            } else {
                AttentionAct::Sigmoid
            },
        }
    };
    ModelConfig {
        height: 32 * rng.random_range(1..=max_side),
        width: 32 * rng.random_range(1..=max_side),
        channels,
        c_lang: rng.random_range(1..=8),
        n_words: rng.random_range(1..=6),
        fusion: FusionConfig {
            shift: rng.random_bool(0.8),
            l2v: rng.random_bool(0.8),
            v2l: rng.random_bool(0.8),
            balance: rng.random_bool(0.8),
        },
        decoder,
        seed: rng.random(),
        batch_size: 4,
        ..ModelConfig::default()
    }
}

struct MaxErr(f64);

impl MaxErr {
    fn add(&mut self, a: &Tensor, b: &Tensor) {
        let e = if a.shape() == b.shape() {
            a.max_abs_diff(b)
        } else {
            f64::INFINITY
        };
        self.0 = self.0.max(e);
    }
}

/// Optimized kernels and the full forward pass against the loop oracles on
/// `instances` seeded random problems each.
pub fn oracle_equivalence(seed: u64, instances: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut row, mut col, mut cop, mut bal) = (MaxErr(0.0), MaxErr(0.0), MaxErr(0.0), MaxErr(0.0));
    for _ in 0..instances {
        let (h, w, c) = (
            rng.random_range(1..=5),
            rng.random_range(1..=5),
            rng.random_range(1..=8),
        );
        let v = rand_tensor(&mut rng, &[h, w, c]);
        let t = rand_tensor(&mut rng, &[h, w, c]);
        let fast_row = eval(|tp| {
            let (pv, pt) = (tp.constant(v.clone()), tp.constant(t.clone()));
            let g = shift_concat_rows(tp, pt)?;
            correlate_rowwise(tp, pv, g)
        })?;
        row.add(&fast_row, &oracle_correlate_row(&v, &t)?);
        let fast_col = eval(|tp| {
            let (pv, pt) = (tp.constant(v.clone()), tp.constant(t.clone()));
            let g = shift_concat_cols(tp, pt)?;
            correlate_colwise(tp, pv, g)
        })?;
        col.add(&fast_col, &oracle_correlate_col(&v, &t)?);

        let cfg = FusionConfig {
            shift: rng.random_bool(0.7),
            l2v: rng.random_bool(0.8),
            v2l: rng.random_bool(0.8),
            balance: rng.random_bool(0.8),
        };
        let mut tape = Tape::inference();
        let (pv, pt) = (tape.constant(v.clone()), tape.constant(t.clone()));
        let maps = coparse(&mut tape, pv, pt, &cfg)?;
        for (fast, slow) in maps.0.iter().zip(oracle_coparse(&v, &t, &cfg)?) {
            cop.add(tape.value(*fast), &slow);
        }

        // Balance over a batch of four with fresh weights.
        let dims = FusionDims {
            height: h,
            width: w,
            c_vis: c,
            c_lang: 1,
        };
        let mut params = FusionParams::init(dims, &mut rng);
        let v4s: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[h, w, c])).collect();
        let map_sets: Vec<[Tensor; 4]> = (0..4)
            .map(|_| std::array::from_fn(|_| rand_tensor(&mut rng, &[h, w, h * w])))
            .collect();
        let slow = oracle_balance(&v4s, &map_sets, &params, &cfg, Mode::Train)?;
        let mut tape = Tape::inference();
        let vv: Vec<Var> = v4s.iter().map(|x| tape.constant(x.clone())).collect();
        let mv: Vec<CoparseMaps> = map_sets
            .iter()
            .map(|ms| CoparseMaps(std::array::from_fn(|k| tape.constant(ms[k].clone()))))
            .collect();
        let fast = balance(&mut tape, &vv, &mv, &mut params, &cfg, Mode::Train)?;
        for (f, (g, fused)) in fast.iter().zip(&slow) {
            bal.add(tape.value(f.gates), g);
            bal.add(tape.value(f.fused), fused);
        }
    }
    let mut out: Vec<Check> = [
        ("oracle.correlate_rowwise", row.0),
        ("oracle.correlate_colwise", col.0),
        ("oracle.coparse", cop.0),
        ("oracle.balance", bal.0),
    ]
    .into_iter()
    .map(|(name, e)| {
        Check::new(
            name,
            e <= KERNEL_TOLERANCE,
            Some(e),
            Some(format!("{instances} instances, max abs error")),
        )
    })
    .collect();

    let mut pipe = MaxErr(0.0);
    let mut mask = MaxErr(0.0);
    for k in 0..instances {
        let cfg = random_config(&mut rng, 8);
        let samples = synth_batch(&cfg, cfg.seed, cfg.batch_size)?;
        let mut params = ModelParams::init(&cfg)?;
        // Every other instance runs eval mode on warmed running statistics.
        let mode = if k % 2 == 0 { Mode::Train } else { Mode::Eval };
        if mode == Mode::Eval {
            let mut warm = Tape::inference();
            forward(&mut warm, &samples, &mut params, &cfg, Mode::Train)?;
        }
        let slow = oracle_pipeline(&samples, &params, &cfg, mode)?;
        let mut tape = Tape::inference();
        let fwd = forward(&mut tape, &samples, &mut params.clone(), &cfg, mode)?;
        for ((fv, dv), trace) in fwd.fusion.iter().zip(&fwd.decoder).zip(&slow) {
            let bundle = fv.bundle(&tape);
            for ((_, a), (_, b)) in bundle.named().into_iter().zip(trace.fusion.named()) {
                pipe.add(a, b);
            }
            for (sv, so) in dv.stages.iter().zip(&trace.stages) {
                let fast = sv.values(&tape);
                pipe.add(&fast.i_1, &so.i_1);
                pipe.add(&fast.i_2, &so.i_2);
                pipe.add(&fast.f_cross, &so.f_cross);
                for (a, b) in [
                    (&fast.chan_att, &so.chan_att),
                    (&fast.spat_att, &so.spat_att),
                ] {
                    match (a, b) {
                        (Some(a), Some(b)) => pipe.add(a, b),
                        (None, None) => {}
                        _ => pipe.0 = f64::INFINITY,
                    }
                }
            }
            if dv.stages.len() != trace.stages.len() {
                pipe.0 = f64::INFINITY;
            }
            mask.add(tape.value(dv.mask), &trace.mask);
        }
    }
    let e = pipe.0.max(mask.0);
    out.push(Check::new(
        "oracle.pipeline",
        e <= PIPELINE_TOLERANCE,
        Some(e),
        Some(format!(
            "{instances} instances (H',W' <= 8, random ablations), every intermediate; mask error {:.3e}",
            mask.0
        )),
    ));
    Ok(out)
}

/// Small non-square geometry used by the shape and range suites: `H'×W'`
/// deepest map, narrow channels, four samples.
pub fn probe_config(h4: usize, w4: usize) -> ModelConfig {
    ModelConfig {
        height: 32 * h4,
        width: 32 * w4,
        channels: [2, 3, 3, 4],
        c_lang: 6,
        n_words: 3,
        batch_size: 4,
        seed: 17,
        ..ModelConfig::default()
    }
}

/// Values of one train-mode forward pass over a fresh batch.
pub struct ProbeRun {
    pub config: ModelConfig,
    pub samples: Vec<SyntheticSample>,
    pub bundles: Vec<crate::s2rm::FusionBundle>,
    pub stages: Vec<Vec<crate::casg::StageOutput>>,
    pub masks: Vec<Tensor>,
}

pub fn probe(config: &ModelConfig) -> Result<ProbeRun> {
    let samples = synth_batch(config, config.seed, config.batch_size)?;
    let mut params = ModelParams::init(config)?;
    let mut tape = Tape::inference();
    let fwd = forward(&mut tape, &samples, &mut params, config, Mode::Train)?;
    Ok(ProbeRun {
        config: config.clone(),
        bundles: fwd.fusion.iter().map(|f| f.bundle(&tape)).collect(),
        stages: fwd
            .decoder
            .iter()
            .map(|d| d.stages.iter().map(|s| s.values(&tape)).collect())
            .collect(),
        masks: fwd
            .decoder
            .iter()
            .map(|d| tape.value(d.mask).clone())
            .collect(),
        samples,
    })
}

fn stage_shapes_ok(run: &ProbeRun) -> bool {
    run.stages.iter().flatten().all(|s| {
        let (h, w) = run.config.stage_size(s.stage);
        let c = run.config.channels[s.stage - 1];
        [&s.i_1, &s.i_2, &s.f_cross]
            .iter()
            .all(|t| t.shape() == [h, w, c])
            && s.chan_att.as_ref().is_none_or(|a| a.shape() == [c])
            && s.spat_att.as_ref().is_none_or(|a| a.shape() == [h, w, 1])
    })
}

fn maps_shape_ok(run: &ProbeRun) -> bool {
    let d = run.config.fusion_dims();
    run.bundles.iter().all(|b| {
        b.maps()
            .iter()
            .all(|m| m.shape() == [d.height, d.width, d.cells()])
    })
}

fn masks_ok(run: &ProbeRun) -> bool {
    run.masks.iter().all(|m| {
        m.shape() == [run.config.height, run.config.width, 1]
            && m.data().iter().all(|&p| p > 0.0 && p < 1.0)
    })
}

/// Non-square `H'=4, W'=5` run: map and mask shapes.
pub fn shape_contracts() -> Result<Vec<Check>> {
    let run = probe(&probe_config(4, 5))?;
    let map_shape = run.bundles[0].c_l2v.shape().to_vec();
    Ok(vec![
        Check::new(
            "shape.maps_non_square",
            maps_shape_ok(&run) && map_shape == [4, 5, 20],
            None,
            Some(format!("c/r maps {map_shape:?}")),
        ),
        Check::new(
            "shape.mask_full_resolution",
            masks_ok(&run),
            None,
            Some(format!("mask {:?}, values in (0,1)", run.masks[0].shape())),
        ),
        Check::new("shape.stage_outputs", stage_shapes_ok(&run), None, None),
        Check::new(
            "shape.fused_matches_v4",
            run.bundles
                .iter()
                .zip(&run.samples)
                .all(|(b, s)| b.fused.shape() == s.vision[3].shape()),
            None,
            None,
        ),
    ])
}

/// Attention rows sum to one; decoder attentions within the activation's
/// open range for both tanh and the sigmoid variant.
pub fn attention_checks() -> Result<Vec<Check>> {
    let run = probe(&probe_config(4, 5))?;
    let mut worst = 0.0f64;
    for b in &run.bundles {
        let n = b.attention.shape()[1];
        for row in b.attention.data().chunks(n) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let range = |run: &ProbeRun, lo: f64, hi: f64| {
        let mut all = run.stages.iter().flatten().flat_map(|s| {
            let c = s.chan_att.iter().flat_map(|t| t.data().to_vec());
            let p = s.spat_att.iter().flat_map(|t| t.data().to_vec());
            c.chain(p).collect::<Vec<_>>()
        });
        all.all(|v| v > lo && v < hi)
    };
    let mut sig_cfg = probe_config(4, 5);
    sig_cfg.decoder.attention_act = AttentionAct::Sigmoid;
    let sig = probe(&sig_cfg)?;
    Ok(vec![
        Check::new(
            "attention.rows_sum_to_one",
            worst <= ROW_SUM_TOLERANCE,
            Some(worst),
            Some("max |Σ_n A − 1|".into()),
        ),
        Check::new(
            "attention.shape",
            run.bundles.iter().all(|b| b.attention.shape() == [20, 3]),
            None,
            Some(format!("{:?}", run.bundles[0].attention.shape())),
        ),
        Check::new("attention.tanh_range", range(&run, -1.0, 1.0), None, None),
        Check::new("attention.sigmoid_range", range(&sig, 0.0, 1.0), None, None),
    ])
}

pub fn gate_checks() -> Result<Vec<Check>> {
    let run = probe(&probe_config(4, 5))?;
    let ok = run
        .bundles
        .iter()
        .all(|b| b.gates.shape() == [4] && b.gates.data().iter().all(|&g| g > 0.0 && g < 1.0));
    let spread = run
        .bundles
        .iter()
        .flat_map(|b| b.gates.data().to_vec())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), g| {
            (lo.min(g), hi.max(g))
        });
    Ok(vec![Check::new(
        "gates.range",
        ok,
        None,
        Some(format!("gates in [{:.4}, {:.4}]", spread.0, spread.1)),
    )])
}

/// Shape contracts and mask range on the configured geometry and switches.
pub fn config_checks(config: &ModelConfig) -> Result<Vec<Check>> {
    config.validate()?;
    let run = probe(config)?;
    let ok = maps_shape_ok(&run) && masks_ok(&run) && stage_shapes_ok(&run);
    Ok(vec![Check::new(
        "shape.configured_model",
        ok,
        None,
        Some(format!(
            "{}x{} input, {} stages, mask {:?}",
            config.height,
            config.width,
            config.decoder.stages,
            run.masks[0].shape()
        )),
    )])
}

/// Every ablation switch against the full model on one seed.
pub fn ablations() -> Vec<(&'static str, ModelConfig)> {
    let base = probe_config(2, 3);
    let fusion = |f: fn(&mut FusionConfig)| {
        let mut c = base.clone();
        f(&mut c.fusion);
        c
    };
    let decoder = |f: fn(&mut DecoderConfig)| {
        let mut c = base.clone();
        f(&mut c.decoder);
        c
    };
    vec![
        ("-Shift", fusion(|f| f.shift = false)),
        ("-l2v", fusion(|f| f.l2v = false)),
        ("-v2l", fusion(|f| f.v2l = false)),
        ("-Balance", fusion(|f| f.balance = false)),
        ("-Spa", decoder(|d| d.spatial = false)),
        ("-Cha", decoder(|d| d.channel = false)),
        ("-Lang", decoder(|d| d.language = false)),
        ("Sig", decoder(|d| d.attention_act = AttentionAct::Sigmoid)),
        ("-D3", decoder(|d| d.stages = 2)),
        ("-D2&3", decoder(|d| d.stages = 1)),
        ("-D1&2&3", decoder(|d| d.stages = 0)),
    ]
}

/// Each switch runs, keeps its shape contracts and changes the output.
/// Stage ablations must also leave the fused deepest features untouched.
pub fn ablation_checks() -> Result<Vec<Check>> {
    let full = probe(&probe_config(2, 3))?;
    let mut out = Vec::new();
    for (name, cfg) in ablations() {
        let run = probe(&cfg)?;
        let shapes = maps_shape_ok(&run) && masks_ok(&run) && stage_shapes_ok(&run);
        let stages_ok = run.stages[0].len() == cfg.decoder.stages;
        let diff = run
            .masks
            .iter()
            .zip(&full.masks)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max);
        let mut ok = shapes && stages_ok && diff > 0.0;
        let mut detail = format!("max |mask − full| = {diff:.3e}");
        if cfg.fusion == full.config.fusion {
            let same_f4 = run
                .bundles
                .iter()
                .zip(&full.bundles)
                .all(|(a, b)| a.fused == b.fused);
            ok &= same_f4;
            detail.push_str(if same_f4 {
                ", fused F4 bit-identical"
            } else {
                ", fused F4 changed"
            });
        }
        out.push(Check::new(
            format!("ablation.{name}"),
            ok,
            Some(diff),
            Some(detail),
        ));
    }
    Ok(out)
}

/// Run every suite and keep the checks whose name contains `filter`.
pub fn run_suites(filter: Option<&str>, seed: u64) -> Result<Vec<Check>> {
    let mut all = Vec::new();
    for suite in SUITES {
        all.extend(run_suite(suite, seed)?);
    }
    Ok(match filter {
        Some(f) => all.into_iter().filter(|c| c.name.contains(f)).collect(),
        None => all,
    })
}

pub fn run_suite(suite: &str, seed: u64) -> Result<Vec<Check>> {
    match suite {
        "shift" => shift_laws(),
        "oracle" => oracle_equivalence(seed, ORACLE_INSTANCES),
        "shape" => shape_contracts(),
        "attention" => attention_checks(),
        "gates" => gate_checks(),
        "ablation" => ablation_checks(),
        other => Err(crate::error::config_err(
            "filter",
            format!("unknown suite `{other}`"),
        )),
    }
}
