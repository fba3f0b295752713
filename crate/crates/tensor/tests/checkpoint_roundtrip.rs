use msas_tensor::{load_checkpoint, save_checkpoint, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn roundtrip_is_bit_exact(
        values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..64),
        name in "[a-z][a-z0-9._]{0,30}",
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.msas");
        let tensor = Tensor::new(vec![values.len()], values).unwrap();
        let entries = vec![
            (name, tensor),
            ("extra.rank3".to_string(), Tensor::full(vec![2, 3, 1], -0.25)),
        ];
        save_checkpoint(&path, &entries).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        prop_assert_eq!(loaded.len(), entries.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&loaded) {
            prop_assert_eq!(n0, n1);
            prop_assert_eq!(t0.shape(), t1.shape());
            // bit-exact, including signed zeros
            for (a, b) in t0.data().iter().zip(t1.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

#[test]
fn rejects_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bogus.msas");
    std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
