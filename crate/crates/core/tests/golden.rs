//! Oracle-produced goldens. Set `S2RM_BLESS=1` to regenerate the files under
//! `tests/golden/`; otherwise they are compared.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use s2rm_core::oracle::{oracle_correlate_col, oracle_correlate_row, oracle_pipeline};
use s2rm_core::pipeline::{forward, synth_batch, ModelConfig, ModelParams};
use s2rm_core::s2rm::{correlate_colwise, correlate_rowwise, shift_concat_cols, shift_concat_rows};
use s2rm_core::tensor::nn::Mode;
use s2rm_core::tensor::{Tape, Tensor};

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn blessing() -> bool {
    std::env::var("S2RM_BLESS").is_ok_and(|v| v == "1")
}

/// Write `value` when blessing, else load the committed file.
fn golden(name: &str, value: Value) -> Value {
    let path = golden_path(name);
    if blessing() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap() + "\n").unwrap();
        return value;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| {
        panic!(
            "{}: {e}; run with S2RM_BLESS=1 to create it",
            path.display()
        )
    });
    serde_json::from_str(&text).unwrap()
}

fn tensor_json(t: &Tensor) -> Value {
    json!({
        "shape": t.shape(),
        "bits": t.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect::<Vec<_>>(),
        "values": t.data(),
    })
}

fn tensor_from_json(v: &Value) -> Tensor {
    let shape: Vec<usize> = serde_json::from_value(v["shape"].clone()).unwrap();
    let data = v["bits"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| f64::from_bits(u64::from_str_radix(b.as_str().unwrap(), 16).unwrap()))
        .collect();
    Tensor::new(&shape, data).unwrap()
}

fn seeded(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn row_correlation_matches_golden() {
    let (v, t) = (seeded(&[3, 2, 2], 101), seeded(&[3, 2, 2], 102));
    let expected = tensor_from_json(&golden(
        "correlate_row_3x2x2.json",
        tensor_json(&oracle_correlate_row(&v, &t).unwrap()),
    ));
    assert_eq!(
        bits(&oracle_correlate_row(&v, &t).unwrap()),
        bits(&expected)
    );
    let mut tape = Tape::inference();
    let (pv, pt) = (tape.constant(v), tape.constant(t));
    let g = shift_concat_rows(&mut tape, pt).unwrap();
    let fast = correlate_rowwise(&mut tape, pv, g).unwrap();
    assert_eq!(tape.value(fast).shape(), [3, 2, 6]);
    assert!(tape.value(fast).max_abs_diff(&expected) <= 1e-10);
}

#[test]
fn col_correlation_matches_golden() {
    let (v, t) = (seeded(&[2, 3, 2], 201), seeded(&[2, 3, 2], 202));
    let expected = tensor_from_json(&golden(
        "correlate_col_2x3x2.json",
        tensor_json(&oracle_correlate_col(&v, &t).unwrap()),
    ));
    assert_eq!(
        bits(&oracle_correlate_col(&v, &t).unwrap()),
        bits(&expected)
    );
    let mut tape = Tape::inference();
    let (pv, pt) = (tape.constant(v), tape.constant(t));
    let g = shift_concat_cols(&mut tape, pt).unwrap();
    let fast = correlate_colwise(&mut tape, pv, g).unwrap();
    assert_eq!(tape.value(fast).shape(), [2, 3, 6]);
    assert!(tape.value(fast).max_abs_diff(&expected) <= 1e-10);
}

/// `H'=W'=8`, `C4=16`, five words.
fn hash_config() -> ModelConfig {
    ModelConfig {
        height: 256,
        width: 256,
        channels: [4, 8, 8, 16],
        c_lang: 8,
        n_words: 5,
        batch_size: 4,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn digest<'a>(named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[test]
fn fusion_bundle_and_mask_hashes_match_golden() {
    let cfg = hash_config();
    let samples = synth_batch(&cfg, cfg.seed, cfg.batch_size).unwrap();
    let params = ModelParams::init(&cfg).unwrap();
    let traces = oracle_pipeline(&samples, &params, &cfg, Mode::Train).unwrap();
    let bundle = &traces[0].fusion;
    assert_eq!(bundle.query.shape(), [8, 8, 16]);
    assert_eq!(bundle.c_l2v.shape(), [8, 8, 64]);
    assert_eq!(bundle.attention.shape(), [64, 5]);
    let oracle_hashes = json!({
        "bundle": digest(bundle.named()),
        "masks": digest(traces.iter().map(|t| ("mask", &t.mask))),
    });
    let expected = golden("pipeline_hashes.json", oracle_hashes.clone());
    assert_eq!(
        oracle_hashes, expected,
        "oracle output drifted from the committed hashes"
    );

    // The optimized pipeline agrees with the same oracle output numerically.
    let mut tape = Tape::inference();
    let fwd = forward(&mut tape, &samples, &mut params.clone(), &cfg, Mode::Train).unwrap();
    let fast = fwd.fusion[0].bundle(&tape);
    for ((name, a), (_, b)) in fast.named().into_iter().zip(bundle.named()) {
        assert!(a.max_abs_diff(b) <= 1e-9, "{name}");
    }
    for (d, t) in fwd.decoder.iter().zip(&traces) {
        assert!(tape.value(d.mask).max_abs_diff(&t.mask) <= 1e-9);
    }
}
