//! Timing of the batched-matmul correlation against the loop oracle.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{config_err, Result};
use crate::oracle::{oracle_correlate_col, oracle_correlate_row};
use crate::s2rm::{correlate_colwise, correlate_rowwise, shift_concat_cols, shift_concat_rows};
use crate::suites::KERNEL_TOLERANCE;
use crate::tensor::kernels::{matmul_block, permute};
use crate::tensor::{Tape, Tensor};

pub const BENCH_SIDES: [usize; 3] = [4, 8, 16];
pub const BENCH_CHANNELS: [usize; 2] = [16, 64];
pub const MIN_REPEAT: usize = 3;

/// Timings are zero for a case that failed equivalence, which is not timed.
#[derive(Debug, Clone, Serialize)]
pub struct BenchCase {
    pub side: usize,
    pub channels: usize,
    /// Max abs difference between optimized and oracle maps (row and column).
    pub max_abs_err: f64,
    pub equivalent: bool,
    pub optimized_median_s: f64,
    pub oracle_median_s: f64,
    pub speedup: f64,
    /// Row map through the generic block kernel in f32.
    pub f32_median_s: f64,
    pub f32_max_abs_err: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn timed<T>(repeat: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut times = Vec::with_capacity(repeat);
    let mut last = None;
    for _ in 0..repeat {
        let t0 = Instant::now();
        last = Some(f()?);
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok((last.expect("repeat >= 1"), median(times)))
}

fn optimized(v: &Tensor, t: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::inference();
    let (pv, pt) = (tape.constant(v.clone()), tape.constant(t.clone()));
    let gr = shift_concat_rows(&mut tape, pt)?;
    let row = correlate_rowwise(&mut tape, pv, gr)?;
    let gc = shift_concat_cols(&mut tape, pt)?;
    let col = correlate_colwise(&mut tape, pv, gc)?;
    Ok((tape.value(row).clone(), tape.value(col).clone()))
}

/// Row map in f32: per image row, `(W×C)·(C×HW)` through `matmul_block`.
fn row_map_f32(v: &[f32], kernel: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0f32; h * w * hw];
    for i in 0..h {
        matmul_block(
            &v[i * w * c..(i + 1) * w * c],
            &kernel[i * c * hw..(i + 1) * c * hw],
            &mut out[i * w * hw..(i + 1) * w * hw],
            w,
            c,
            hw,
        );
    }
    out
}

pub fn bench_case(
    side: usize,
    channels: usize,
    repeat: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BenchCase> {
    let shape = [side, side, channels];
    let v = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))?;
    let t = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))?;

    // Equivalence first; a mismatching case is not timed.
    let (row, col) = optimized(&v, &t)?;
    let orow = oracle_correlate_row(&v, &t)?;
    let max_abs_err = row
        .max_abs_diff(&orow)
        .max(col.max_abs_diff(&oracle_correlate_col(&v, &t)?));
    let equivalent = max_abs_err <= KERNEL_TOLERANCE;
    if !equivalent {
        return Ok(BenchCase {
            side,
            channels,
            max_abs_err,
            equivalent,
            optimized_median_s: 0.0,
            oracle_median_s: 0.0,
            speedup: 0.0,
            f32_median_s: 0.0,
            f32_max_abs_err: f64::INFINITY,
        });
    }
    let (_, optimized_median_s) = timed(repeat, || optimized(&v, &t))?;
    let (_, oracle_median_s) = timed(repeat, || {
        Ok((oracle_correlate_row(&v, &t)?, oracle_correlate_col(&v, &t)?))
    })?;

    // The generator is prepared once in f64; only the products run in f32.
    let mut tape = Tape::inference();
    let pt = tape.constant(t.clone());
    let gen = shift_concat_rows(&mut tape, pt)?;
    let kernel = permute(tape.value(gen), &[0, 2, 1])?;
    let v32 = v.to_f32_vec();
    let k32 = kernel.to_f32_vec();
    let (row32, f32_median_s) =
        timed(repeat, || Ok(row_map_f32(&v32, &k32, side, side, channels)))?;
    let f32_max_abs_err = row32
        .iter()
        .zip(orow.data())
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);

    Ok(BenchCase {
        side,
        channels,
        max_abs_err,
        equivalent,
        optimized_median_s,
        oracle_median_s,
        speedup: oracle_median_s / optimized_median_s.max(f64::MIN_POSITIVE),
        f32_median_s,
        f32_max_abs_err,
    })
}

/// Every `H'=W' ∈ {4,8,16}`, `C ∈ {16,64}` case, `repeat` timed runs each.
pub fn bench_correlation(repeat: usize, seed: u64) -> Result<Vec<BenchCase>> {
    if repeat < MIN_REPEAT {
        return Err(config_err(
            "repeat",
            format!("must be at least {MIN_REPEAT}, got {repeat}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for side in BENCH_SIDES {
        for channels in BENCH_CHANNELS {
            out.push(bench_case(side, channels, repeat, &mut rng)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn repeat_below_three_is_rejected() {
        assert!(bench_correlation(2, 0).is_err());
    }

    #[test]
    fn small_case_is_equivalent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let case = bench_case(4, 16, 3, &mut rng).unwrap();
        assert!(case.equivalent, "{case:?}");
        assert!(case.f32_max_abs_err < 1e-3);
    }
}
