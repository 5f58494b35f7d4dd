use motok_tensor::checkpoint::{decode, encode};
use motok_tensor::Tensor;
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = (String, Tensor)> {
    (
        "[a-z][a-z0-9_.]{0,24}",
        prop::collection::vec(1usize..5, 1..4),
        any::<u64>(),
    )
        .prop_map(|(name, shape, seed)| {
            let n: usize = shape.iter().product();
            // arbitrary bit patterns, NaN payloads included
            let data = (0..n as u64)
                .map(|i| f32::from_bits((seed.wrapping_mul(i + 1).wrapping_add(i) >> 16) as u32))
                .collect();
            (name, Tensor::new(&shape, data).unwrap())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn write_read_write_is_byte_identical(ts in prop::collection::vec(tensor_strategy(), 0..6)) {
        let a = encode(&ts).unwrap();
        let back = decode(&a).unwrap();
        prop_assert_eq!(back.len(), ts.len());
        let b = encode(&back).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn truncated_files_are_rejected(ts in prop::collection::vec(tensor_strategy(), 1..3), cut in 1usize..64) {
        let a = encode(&ts).unwrap();
        let cut = cut.min(a.len());
        prop_assert!(decode(&a[..a.len() - cut]).is_err());
    }
}

#[test]
fn bad_magic() {
    let mut a = encode(&[("x".into(), Tensor::ones(&[1]))]).unwrap();
    a[0] = b'X';
    assert!(decode(&a).unwrap_err().to_string().contains("magic"));
}
