//! Per-position linear blocks: 1×1 convolution / linear layer followed by
//! optional batch or layer normalization and an optional activation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::Activation;
use super::{Result, Tape, Tensor, TensorError, Var};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    Batch,
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub kind: NormKind,
    pub scale: Tensor,
    pub offset: Tensor,
    /// Batch norm only; `None` until the first train-mode call.
    pub running: Option<RunningStats>,
}

/// Whether a visited tensor is updated by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Trainable,
    State,
}

/// Structured parameter containers expose their tensors by stable name.
pub trait ParamTree {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor, Role));

    fn for_each_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    /// Replace every tensor with the one `lookup` yields for its name.
    /// Trainable tensors are required; running statistics are optional.
    fn load_from(&mut self, lookup: &mut dyn FnMut(&str) -> Option<Tensor>) -> Result<(), String>;

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t, role| {
            if role == Role::Trainable {
                n += t.len();
            }
        });
        n
    }
}

/// Weights of one linear block. `weight` is `out × in`. Blocks followed by
/// batch norm carry no bias, since the normalization cancels it.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub norm: Option<NormState>,
}

impl LinearParams {
    /// He-uniform weights in ±√(6/in), zero bias, unit norm scale.
    pub fn init(name: &str, in_f: usize, out_f: usize, norm: NormKind, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / in_f as f64).sqrt();
        let weight: Vec<f64> = (0..in_f * out_f)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let mut p = Self::zeros(name, in_f, out_f, norm);
        p.weight = Tensor::from_parts(vec![out_f, in_f], weight);
        if let Some(n) = p.norm.as_mut() {
            n.scale = Tensor::from_parts(vec![out_f], vec![1.0; out_f]);
            n.running = None;
        }
        p
    }

    /// All learned values zero. Batch-norm running statistics are set to
    /// mean 0 / variance 1 so eval mode is usable immediately.
    pub fn zeros(name: &str, in_f: usize, out_f: usize, norm: NormKind) -> Self {
        let z = |n| Tensor::from_parts(vec![n], vec![0.0; n]);
        let norm = match norm {
            NormKind::None => None,
            kind => Some(NormState {
                kind,
                scale: z(out_f),
                offset: z(out_f),
                running: (kind == NormKind::Batch).then(|| RunningStats {
                    mean: z(out_f),
                    var: Tensor::from_parts(vec![out_f], vec![1.0; out_f]),
                }),
            }),
        };
        Self {
            name: name.to_string(),
            weight: Tensor::from_parts(vec![out_f, in_f], vec![0.0; in_f * out_f]),
            bias: (norm.as_ref().map(|n| n.kind) != Some(NormKind::Batch)).then(|| z(out_f)),
            norm,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm.as_ref().map_or(NormKind::None, |n| n.kind)
    }

    fn key(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.name)
    }
}

impl ParamTree for LinearParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        f(&self.key("weight"), &self.weight, Role::Trainable);
        if let Some(b) = &self.bias {
            f(&self.key("bias"), b, Role::Trainable);
        }
        if let Some(n) = &self.norm {
            f(&self.key("norm.scale"), &n.scale, Role::Trainable);
            f(&self.key("norm.offset"), &n.offset, Role::Trainable);
            if let Some(r) = &n.running {
                f(&self.key("norm.running_mean"), &r.mean, Role::State);
                f(&self.key("norm.running_var"), &r.var, Role::State);
            }
        }
    }

    fn for_each_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let (w, b) = (self.key("weight"), self.key("bias"));
        f(&w, &mut self.weight);
        if let Some(bias) = &mut self.bias {
            f(&b, bias);
        }
        let (s, o) = (self.key("norm.scale"), self.key("norm.offset"));
        if let Some(n) = &mut self.norm {
            f(&s, &mut n.scale);
            f(&o, &mut n.offset);
        }
    }

    fn load_from(&mut self, lookup: &mut dyn FnMut(&str) -> Option<Tensor>) -> Result<(), String> {
        let mut take = |key: String, like: &Tensor| -> Result<Tensor, String> {
            let t = lookup(&key).ok_or_else(|| format!("missing tensor {key}"))?;
            if t.shape() != like.shape() {
                return Err(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                ));
            }
            Ok(t)
        };
        self.weight = take(self.key("weight"), &self.weight)?;
        if let Some(b) = &self.bias {
            self.bias = Some(take(self.key("bias"), b)?);
        }
        let keys = [
            self.key("norm.scale"),
            self.key("norm.offset"),
            self.key("norm.running_mean"),
            self.key("norm.running_var"),
        ];
        if let Some(n) = &mut self.norm {
            n.scale = take(keys[0].clone(), &n.scale)?;
            n.offset = take(keys[1].clone(), &n.offset)?;
            if n.kind == NormKind::Batch {
                n.running = match (lookup(&keys[2]), lookup(&keys[3])) {
                    (Some(mean), Some(var)) => {
                        if mean.shape() != n.scale.shape() || var.shape() != n.scale.shape() {
                            return Err(format!(
                                "running statistics of {} have wrong shape",
                                self.name
                            ));
                        }
                        if var.data().iter().any(|&v| v <= 0.0) {
                            return Err(format!(
                                "running variance of {} must be positive",
                                self.name
                            ));
                        }
                        Some(RunningStats { mean, var })
                    }
                    _ => None,
                };
            }
        }
        Ok(())
    }
}

/// `act(norm(x·Wᵀ + b))` over the trailing axis of `x`.
///
/// Train-mode batch norm normalizes with the statistics of this call (every
/// non-channel position) and folds them into the running estimates.
pub fn linear_block(
    tape: &mut Tape,
    x: Var,
    p: &mut LinearParams,
    act: Option<Activation>,
    mode: Mode,
) -> Result<Var> {
    let w = tape.param(&p.key("weight"), &p.weight);
    let b = match &p.bias {
        Some(bias) => tape.param(&p.key("bias"), bias),
        None => tape.constant(Tensor::from_parts(
            vec![p.out_features()],
            vec![0.0; p.out_features()],
        )),
    };
    let mut y = tape.linear(x, w, b)?;
    let (scale_key, offset_key) = (p.key("norm.scale"), p.key("norm.offset"));
    if let Some(norm) = &mut p.norm {
        let scale = tape.param(&scale_key, &norm.scale);
        let offset = tape.param(&offset_key, &norm.offset);
        y = match (norm.kind, mode) {
            (NormKind::Layer, _) => tape.layer_norm(y, scale, offset)?,
            (NormKind::Batch, Mode::Train) => {
                let (out, stats) = tape.batch_norm_train(y, scale, offset)?;
                let unbiased = stats.unbiased_var();
                let running = norm.running.get_or_insert_with(|| RunningStats {
                    mean: Tensor::from_parts(vec![stats.mean.len()], vec![0.0; stats.mean.len()]),
                    var: Tensor::from_parts(vec![stats.mean.len()], vec![1.0; stats.mean.len()]),
                });
                let blend = |old: &Tensor, new: &[f64]| {
                    let data = old
                        .data()
                        .iter()
                        .zip(new)
                        .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                        .collect();
                    Tensor::from_parts(old.shape().to_vec(), data)
                };
                running.mean = blend(&running.mean, &stats.mean);
                running.var = blend(&running.var, &unbiased);
                out
            }
            (NormKind::Batch, Mode::Eval) => {
                let running = norm
                    .running
                    .as_ref()
                    .ok_or_else(|| TensorError::UninitializedStatistics(p.name.clone()))?;
                tape.batch_norm_eval(y, scale, offset, running.mean.data(), running.var.data())?
            }
            (NormKind::None, _) => y,
        };
    }
    Ok(match act {
        Some(kind) => tape.activation(kind, y),
        None => y,
    })
}

/// [`linear_block`] over several inputs at once, so batch normalization sees
/// the positions of every input. Inputs are stacked along axis 0.
pub fn linear_block_batched(
    tape: &mut Tape,
    xs: &[Var],
    p: &mut LinearParams,
    act: Option<Activation>,
    mode: Mode,
) -> Result<Vec<Var>> {
    match xs {
        [] => Err(TensorError::EmptyConcat),
        [x] => Ok(vec![linear_block(tape, *x, p, act, mode)?]),
        _ => {
            let lens: Vec<usize> = xs.iter().map(|&x| tape.shape(x)[0]).collect();
            let stacked = tape.concat(xs, 0)?;
            let y = linear_block(tape, stacked, p, act, mode)?;
            let mut start = 0;
            let mut out = Vec::with_capacity(xs.len());
            for len in lens {
                out.push(tape.slice(y, 0, start, len)?);
                start += len;
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_block() {
        let mut p = LinearParams::zeros("id", 3, 3, NormKind::None);
        p.weight = Tensor::eye(3);
        let x = Tensor::from_fn(&[2, 2, 3], |ix| {
            (ix[0] * 6 + ix[1] * 3 + ix[2]) as f64 - 4.0
        })
        .unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = linear_block(&mut tape, xv, &mut p, None, Mode::Train).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn batch_norm_train_normalizes_channels_and_updates_running() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = LinearParams::init("bn", 3, 4, NormKind::Batch, &mut rng);
        let x = Tensor::from_fn(&[4, 4, 3], |_| rng.random_range(-2.0..2.0)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = linear_block(&mut tape, xv, &mut p, None, Mode::Train).unwrap();
        let stats = crate::tensor::kernels::channel_stats(tape.value(y));
        for (m, v) in stats.mean.iter().zip(&stats.var) {
            assert!(m.abs() <= 1e-10, "mean {m}");
            assert!((v - 1.0).abs() <= 1e-3, "var {v}");
        }
        assert!(p.norm.as_ref().unwrap().running.is_some());
    }

    #[test]
    fn eval_before_train_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LinearParams::init("fresh", 2, 2, NormKind::Batch, &mut rng);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::ones(&[3, 2]).unwrap());
        let err = linear_block(&mut tape, x, &mut p, None, Mode::Eval).unwrap_err();
        assert_eq!(err, TensorError::UninitializedStatistics("fresh".into()));
        linear_block(&mut tape, x, &mut p, None, Mode::Train).unwrap();
        assert!(linear_block(&mut tape, x, &mut p, None, Mode::Eval).is_ok());
    }

    #[test]
    fn load_rejects_wrong_shapes() {
        let src = LinearParams::zeros("a", 2, 3, NormKind::Layer);
        let mut dst = LinearParams::zeros("a", 2, 4, NormKind::Layer);
        let mut lookup = |k: &str| {
            let mut found = None;
            src.for_each(&mut |name, t, _| {
                if name == k {
                    found = Some(t.clone());
                }
            });
            found
        };
        assert!(dst.load_from(&mut lookup).is_err());
    }
}
