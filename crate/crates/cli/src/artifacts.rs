//! Mask and trace files written by `train-toy` and `infer`.

use std::io::Write;

use s2rm_core::tensor::Tensor;

/// 8-bit binary PGM of an `H×W` or `H×W×1` map with values in [0,1],
/// stored as `round(255·p)`.
pub fn pgm_bytes(mask: &Tensor) -> Vec<u8> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        mask.data()
            .iter()
            .map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8),
    );
    out
}

/// Little-endian f64 values, row-major.
pub fn raw_f64_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Sidecar describing a raw f64 file.
pub fn shape_sidecar(t: &Tensor, data_file: &str) -> serde_json::Value {
    serde_json::json!({
        "file": data_file,
        "dtype": "f64",
        "endianness": "little",
        "order": "row-major",
        "shape": t.shape(),
    })
}

/// `step,loss,lr` rows, one per SGD step.
pub fn loss_csv(losses: &[f64], lr: f64) -> String {
    let mut out = String::from("step,loss,lr\n");
    for (step, loss) in losses.iter().enumerate() {
        // `{:?}` keeps the shortest round-tripping form of the f64.
        out.push_str(&format!("{step},{loss:?},{lr:?}\n"));
    }
    out
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_rounding() {
        let m = Tensor::new(&[2, 3, 1], vec![0.0, 0.5, 1.0, 0.002, 0.998, 0.25]).unwrap();
        let bytes = pgm_bytes(&m);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], [0, 128, 255, 1, 254, 64]);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let csv = loss_csv(&[0.5, 0.25], 0.05);
        assert_eq!(csv, "step,loss,lr\n0,0.5,0.05\n1,0.25,0.05\n");
    }

    #[test]
    fn raw_bytes_round_trip() {
        let t = Tensor::new(&[3], vec![1.5, -0.0, f64::MIN_POSITIVE]).unwrap();
        let bytes = raw_f64_bytes(&t);
        let back: Vec<f64> = bytes
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
