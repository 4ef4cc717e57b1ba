//! Tape gradients against central finite differences, per primitive and for
//! the end-to-end dice loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::oracle::{finite_diff_grad, max_relative_error, GradCheckReport, ParamError};
use crate::pipeline::{batch_loss, synth_batch, ModelConfig, ModelParams};
use crate::tensor::kernels::Activation;
use crate::tensor::nn::{Mode, ParamTree, Role};
use crate::tensor::{OpKind, Tape, Tensor, Var};

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    op: OpKind,
    /// Distinguishes several cases of one primitive in report names.
    variant: Option<&'static str>,
    inputs: Vec<(&'static str, Tensor)>,
    build: Build,
}

impl Case {
    fn variant(mut self, name: &'static str) -> Self {
        self.variant = Some(name);
        self
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("valid shape")
}

/// Inputs bounded away from zero so kinks and poles stay out of reach of
/// the finite-difference step.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("valid shape")
}

fn case(
    op: OpKind,
    inputs: Vec<(&'static str, Tensor)>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        op,
        variant: None,
        inputs,
        build: Box::new(build),
    }
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    use OpKind::*;
    let mut r = |shape: &[usize]| uniform(rng, shape, -1.0, 1.0);
    let a23 = r(&[2, 3]);
    let b23 = r(&[2, 3]);
    let b3 = r(&[3]);
    let m234 = r(&[2, 3, 4]);
    let m242 = r(&[2, 4, 2]);
    let m42 = r(&[4, 2]);
    let x322 = r(&[3, 2, 2]);
    let x232 = r(&[2, 3, 2]);
    let w43 = r(&[4, 3]);
    let b4 = r(&[4]);
    let x223 = r(&[2, 2, 3]);
    let x323 = r(&[3, 2, 3]);
    let s3 = r(&[3]);
    let o3 = r(&[3]);
    let x34 = uniform(rng, &[3, 4], -2.0, 2.0);
    let den = uniform(rng, &[2, 3], 0.5, 1.5);
    let kinked = signed(rng, &[2, 3, 2]);
    vec![
        case(Add, vec![("a", a23.clone()), ("b", b3.clone())], |t, v| {
            Ok(t.add(v[0], v[1])?)
        }),
        case(Sub, vec![("a", a23.clone()), ("b", b23.clone())], |t, v| {
            Ok(t.sub(v[0], v[1])?)
        }),
        case(Mul, vec![("a", a23.clone()), ("b", b3.clone())], |t, v| {
            Ok(t.mul(v[0], v[1])?)
        }),
        case(Div, vec![("a", a23.clone()), ("b", den)], |t, v| {
            Ok(t.div(v[0], v[1])?)
        }),
        case(Scale, vec![("x", a23.clone())], |t, v| {
            Ok(t.scale(v[0], -1.75))
        }),
        case(AddScalar, vec![("x", a23.clone())], |t, v| {
            Ok(t.add_scalar(v[0], 0.3))
        }),
        case(Matmul, vec![("a", m234.clone()), ("b", m242)], |t, v| {
            Ok(t.matmul(v[0], v[1])?)
        })
        .variant("batched"),
        case(Matmul, vec![("a", m234.clone()), ("b", m42)], |t, v| {
            Ok(t.matmul(v[0], v[1])?)
        })
        .variant("broadcast"),
        case(Permute, vec![("x", m234.clone())], |t, v| {
            Ok(t.permute(v[0], &[2, 0, 1])?)
        }),
        case(Reshape, vec![("x", m234.clone())], |t, v| {
            Ok(t.reshape(v[0], &[4, 6])?)
        }),
        case(
            Concat,
            vec![("a", x322.clone()), ("b", x322.clone())],
            |t, v| Ok(t.concat(&[v[0], v[1]], 1)?),
        ),
        case(Slice, vec![("x", m234.clone())], |t, v| {
            Ok(t.slice(v[0], 1, 1, 2)?)
        }),
        case(Roll, vec![("x", x232.clone())], |t, v| {
            Ok(t.roll(v[0], 1, -2)?)
        }),
        case(BroadcastTo, vec![("x", b3.clone())], |t, v| {
            Ok(t.broadcast_to(v[0], &[2, 2, 3])?)
        }),
        case(Relu, vec![("x", kinked)], |t, v| Ok(t.relu(v[0]))),
        case(
            Sigmoid,
            vec![("x", x34.clone())],
            |t, v| Ok(t.sigmoid(v[0])),
        ),
        case(Tanh, vec![("x", x34.clone())], |t, v| {
            Ok(t.activation(Activation::Tanh, v[0]))
        }),
        case(Softmax, vec![("x", x34.clone())], |t, v| {
            Ok(t.softmax_lastaxis(v[0]))
        }),
        case(Mean, vec![("x", m234.clone())], |t, v| {
            Ok(t.avg_pool(v[0], &[0, 1])?)
        }),
        case(Sum, vec![("x", m234)], |t, v| Ok(t.sum(v[0]))),
        case(Upsample, vec![("x", x232)], |t, v| {
            Ok(t.upsample_bilinear(v[0], 2)?)
        }),
        case(
            Linear,
            vec![("x", x223.clone()), ("weight", w43), ("bias", b4)],
            |t, v| Ok(t.linear(v[0], v[1], v[2])?),
        ),
        case(
            BatchNorm,
            vec![
                ("x", x323.clone()),
                ("scale", s3.clone()),
                ("offset", o3.clone()),
            ],
            |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2])?.0),
        ),
        case(
            BatchNormEval,
            vec![
                ("x", x323.clone()),
                ("scale", s3.clone()),
                ("offset", o3.clone()),
            ],
            |t, v| Ok(t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])?),
        ),
        case(
            LayerNorm,
            vec![("x", x323), ("scale", s3), ("offset", o3)],
            |t, v| Ok(t.layer_norm(v[0], v[1], v[2])?),
        ),
    ]
}

/// `Σ op(x) ⊙ R` for a fixed random `R`, so every output element carries a
/// distinct weight into the scalar.
fn projected(
    tape: &mut Tape,
    case: &Case,
    inputs: &[Tensor],
    weights: &mut Option<Tensor>,
    seed: u64,
) -> Result<(Var, Vec<Var>)> {
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.build)(tape, &vars)?;
    let r = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        uniform(&mut rng, tape.shape(out), -1.0, 1.0)
    });
    let r = tape.constant(r.clone());
    let prod = tape.mul(out, r)?;
    Ok((tape.sum(prod), vars))
}

/// One report per differentiable primitive (matmul twice: batched and
/// broadcast). `fault` corrupts that primitive's backward rule.
pub fn gradcheck_ops(eps: f64, seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for case in cases(&mut rng) {
        let values: Vec<Tensor> = case.inputs.iter().map(|(_, t)| t.clone()).collect();
        let mut weights = None;
        let mut tape = Tape::new();
        tape.inject_fault(fault);
        let (loss, leaves) = projected(&mut tape, &case, &values, &mut weights, seed)?;
        let grads = tape.backward(loss)?;
        let mut params = Vec::new();
        for (k, (name, x)) in case.inputs.iter().enumerate() {
            let numeric = finite_diff_grad(
                |xp| {
                    let mut vals = values.clone();
                    vals[k] = xp.clone();
                    let mut t = Tape::new();
                    let (l, _) = projected(&mut t, &case, &vals, &mut weights.clone(), seed)?;
                    Ok(t.value(l).item())
                },
                x,
                eps,
            )?;
            let analytic = grads
                .get(leaves[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()).expect("shape"));
            params.push(ParamError {
                name: (*name).to_string(),
                max_rel_err: max_relative_error(&analytic, &numeric),
            });
        }
        let label = match case.variant {
            Some(v) => format!("{}[{v}]", case.op.name()),
            None => case.op.name().to_string(),
        };
        reports.push(GradCheckReport::new(label, eps, params));
    }
    Ok(reports)
}

/// Small geometry for the end-to-end check: 64×64 input (2×2 deepest map,
/// 8×8 at stage 2), narrow channels, four samples.
pub fn gradcheck_config(stages: usize, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig {
        height: 64,
        width: 64,
        channels: [2, 3, 3, 4],
        c_lang: 6,
        n_words: 3,
        batch_size: 4,
        seed,
        ..ModelConfig::default()
    };
    cfg.decoder.stages = stages;
    cfg
}

/// Which tensors an end-to-end check covers and how batch norm behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelCheck<'a> {
    pub mode: Mode,
    /// Only trainable tensors whose name starts with this are checked.
    pub prefix: &'a str,
}

impl ModelCheck<'_> {
    pub const EVAL: ModelCheck<'static> = ModelCheck {
        mode: Mode::Eval,
        prefix: "",
    };
    pub const TRAIN: ModelCheck<'static> = ModelCheck {
        mode: Mode::Train,
        prefix: "",
    };
    pub const TRAIN_DECODER: ModelCheck<'static> = ModelCheck {
        mode: Mode::Train,
        prefix: "casg.",
    };
}

/// Dice loss gradient with respect to the model's trainable tensors at
/// fresh initialization.
///
/// Eval mode first runs one train-mode pass over the batch so batch norm
/// has running statistics, then freezes them for both the tape and the
/// finite differences.
pub fn gradcheck_model(
    config: &ModelConfig,
    eps: f64,
    check: ModelCheck<'_>,
    fault: Option<OpKind>,
) -> Result<GradCheckReport> {
    let samples = synth_batch(config, config.seed, config.batch_size)?;
    let mut base = ModelParams::init(config)?;
    if check.mode == Mode::Eval {
        let mut warm = Tape::inference();
        batch_loss(&mut warm, &samples, &mut base, config, Mode::Train)?;
    }
    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let loss = batch_loss(&mut tape, &samples, &mut base.clone(), config, check.mode)?;
    let grads = tape.backward(loss)?;
    let mut names = Vec::new();
    base.for_each(&mut |name, t, role| {
        if role == Role::Trainable && name.starts_with(check.prefix) {
            names.push((name.to_string(), t.clone()));
        }
    });
    let mut params = Vec::new();
    for (name, x) in names {
        let numeric = finite_diff_grad(
            |xp| {
                let mut p = base.clone();
                p.for_each_trainable_mut(&mut |n, t| {
                    if n == name {
                        *t = xp.clone();
                    }
                });
                let mut t = Tape::inference();
                let l = batch_loss(&mut t, &samples, &mut p, config, check.mode)?;
                Ok(t.value(l).item())
            },
            &x,
            eps,
        )?;
        let analytic = grads
            .named(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()).expect("shape"));
        params.push(ParamError {
            max_rel_err: max_relative_error(&analytic, &numeric),
            name,
        });
    }
    let mode = match check.mode {
        Mode::Train => "train",
        Mode::Eval => "eval",
    };
    let scope = if check.prefix.is_empty() {
        "all"
    } else {
        check.prefix.trim_end_matches('.')
    };
    let label = format!(
        "dice_end_to_end[stages={},mode={mode},params={scope}]",
        config.decoder.stages
    );
    Ok(GradCheckReport::new(label, eps, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::FD_EPS;

    #[test]
    fn every_primitive_passes() {
        let reports = gradcheck_ops(FD_EPS, 11, None).unwrap();
        let covered: std::collections::BTreeSet<_> = reports
            .iter()
            .map(|r| r.op.split('[').next().unwrap().to_string())
            .collect();
        for kind in OpKind::ALL.iter().filter(|k| **k != OpKind::Leaf) {
            assert!(covered.contains(kind.name()), "no case for {}", kind.name());
        }
        for r in &reports {
            assert!(r.pass, "{} failed: {:?}", r.op, r.params);
        }
    }

    #[test]
    fn corrupted_rule_is_named() {
        let reports = gradcheck_ops(FD_EPS, 11, Some(OpKind::Softmax)).unwrap();
        let failed: Vec<_> = reports
            .iter()
            .filter(|r| !r.pass)
            .map(|r| r.op.as_str())
            .collect();
        assert_eq!(failed, vec!["softmax"]);
    }

    #[test]
    fn end_to_end_dice_gradients() {
        for stages in [3, 2] {
            for check in [ModelCheck::EVAL, ModelCheck::TRAIN_DECODER] {
                let r = gradcheck_model(&gradcheck_config(stages, 0), FD_EPS, check, None).unwrap();
                assert!(r.pass, "{}: {:?}", r.op, r.params);
            }
        }
    }
}
