use proptest::prelude::*;
use s2rm_core::blob::Blob;
use s2rm_core::tensor::kernels::{
    concat, inverse_permutation, permute, roll, slice, softmax_lastaxis,
};
use s2rm_core::tensor::Tensor;

fn shape_and_data(max_rank: usize) -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..5, 1..=max_rank).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(-1e3f64..1e3, n))
    })
}

fn tensor(max_rank: usize) -> impl Strategy<Value = Tensor> {
    shape_and_data(max_rank).prop_map(|(s, d)| Tensor::new(&s, d).unwrap())
}

fn tensor_with_perm() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    tensor(4).prop_flat_map(|t| {
        let order: Vec<usize> = (0..t.rank()).collect();
        (Just(t), Just(order).prop_shuffle())
    })
}

proptest! {
    #[test]
    fn permute_then_inverse_is_identity((t, order) in tensor_with_perm()) {
        let p = permute(&t, &order).unwrap();
        let shape: Vec<usize> = order.iter().map(|&o| t.shape()[o]).collect();
        prop_assert_eq!(p.shape(), &shape[..]);
        let back = permute(&p, &inverse_permutation(&order)).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn slices_concat_back((t, cut) in tensor(4).prop_flat_map(|t| {
        let axis_len = t.shape()[0];
        (Just(t), 0..axis_len)
    })) {
        let n = t.shape()[0];
        if cut == 0 {
            prop_assert_eq!(slice(&t, 0, 0, n).unwrap(), t);
        } else {
            let a = slice(&t, 0, 0, cut).unwrap();
            let b = slice(&t, 0, cut, n - cut).unwrap();
            prop_assert_eq!(concat(&[&a, &b], 0).unwrap(), t);
        }
    }

    #[test]
    fn concat_along_last_axis_then_slice(a in tensor(3), extra in 1usize..4) {
        let axis = a.rank() - 1;
        let mut shape = a.shape().to_vec();
        shape[axis] = extra;
        let b = Tensor::from_fn(&shape, |ix| ix.iter().sum::<usize>() as f64).unwrap();
        let c = concat(&[&a, &b], axis).unwrap();
        prop_assert_eq!(c.shape()[axis], a.shape()[axis] + extra);
        prop_assert_eq!(slice(&c, axis, 0, a.shape()[axis]).unwrap(), a.clone());
        prop_assert_eq!(slice(&c, axis, a.shape()[axis], extra).unwrap(), b);
    }

    #[test]
    fn roll_composes_and_inverts(t in tensor(3), a in -6isize..6, b in -6isize..6) {
        for axis in 0..t.rank() {
            let ab = roll(&roll(&t, axis, a).unwrap(), axis, b).unwrap();
            prop_assert_eq!(&ab, &roll(&t, axis, a + b).unwrap());
            prop_assert_eq!(roll(&ab, axis, -(a + b)).unwrap(), t.clone());
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(t in tensor(3), c in -50.0f64..50.0) {
        let s = softmax_lastaxis(&t);
        let n = *t.shape().last().unwrap();
        for row in s.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let shifted = softmax_lastaxis(&t.map(|v| v + c));
        prop_assert!(s.max_abs_diff(&shifted) <= 1e-12);
    }

    #[test]
    fn reshape_preserves_data(t in tensor(4)) {
        let flat = t.reshape(&[t.len()]).unwrap();
        prop_assert_eq!(flat.data(), t.data());
        prop_assert_eq!(flat.reshape(t.shape()).unwrap(), t.clone());
        prop_assert!(t.reshape(&[t.len() + 1]).is_err());
    }

    #[test]
    fn blob_round_trip_is_bit_exact(ts in prop::collection::vec(tensor(4), 1..5), tag in any::<u32>()) {
        let mut blob = Blob::new(serde_json::json!({ "tag": tag }));
        for (k, t) in ts.iter().enumerate() {
            blob.push(format!("t{k}"), t.clone());
        }
        let back = Blob::from_bytes(&blob.to_bytes()).unwrap();
        prop_assert_eq!(&back.meta, &blob.meta);
        prop_assert_eq!(back.entries.len(), ts.len());
        for ((name, a), (k, b)) in back.entries.iter().zip(ts.iter().enumerate()) {
            prop_assert_eq!(name, &format!("t{k}"));
            prop_assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn blob_rejects_truncation() {
    let mut blob = Blob::new(serde_json::Value::Null);
    blob.push("x", Tensor::vector(&[1.0, 2.0, 3.0]));
    let bytes = blob.to_bytes();
    for cut in [0, 4, 8, 12, bytes.len() - 1] {
        assert!(Blob::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}
