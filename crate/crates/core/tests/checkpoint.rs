use std::collections::BTreeMap;

use emovec_core::param_store::{self, decode, encode};
use emovec_core::{ParameterSet, TensorEntry};
use proptest::prelude::*;

fn finite_f32() -> impl Strategy<Value = f32> {
    prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO
}

fn entry() -> impl Strategy<Value = TensorEntry> {
    ("[a-z][a-z0-9_.]{0,11}", prop::collection::vec(1usize..6, 1..4)).prop_flat_map(|(name, shape)| {
        let n: usize = shape.iter().product();
        prop::collection::vec(finite_f32(), n)
            .prop_map(move |data| TensorEntry::new(name.clone(), shape.clone(), data).unwrap())
    })
}

fn parameter_set() -> impl Strategy<Value = ParameterSet> {
    (
        prop::collection::vec(entry(), 0..6),
        prop::collection::btree_map("[a-z.]{1,10}", "[ -~]{0,20}", 0..4),
    )
        .prop_map(|(entries, meta): (_, BTreeMap<String, String>)| {
            let mut set = ParameterSet::new();
            for e in entries {
                if set.get(e.name()).is_none() {
                    set.insert(e).unwrap();
                }
            }
            for (k, v) in meta {
                // Reserved keys only take a closed set of values.
                let _ = set.set_meta(k, v);
            }
            set
        })
}

fn bits(set: &ParameterSet) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    set.tensors()
        .map(|t| {
            (
                t.name().to_string(),
                t.shape().to_vec(),
                t.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decode_inverts_encode_bit_for_bit(set in parameter_set()) {
        let bytes = encode(&set).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(bits(&back), bits(&set));
        prop_assert_eq!(back.meta(), set.meta());
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }
}

#[test]
fn file_roundtrip_keeps_negative_zero_and_subnormals() {
    let data = vec![-0.0f32, f32::MIN_POSITIVE / 4.0, f32::MAX, -f32::MIN_POSITIVE];
    let set = ParameterSet::from_entries([TensorEntry::new("w", vec![2, 2], data).unwrap()])
        .unwrap()
        .with_meta("note", "x")
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.evc");
    param_store::save(&set, &path).unwrap();
    let back = param_store::load(&path).unwrap();
    assert_eq!(bits(&back), bits(&set));
    assert_eq!(back.meta(), set.meta());
    let first = std::fs::read(&path).unwrap();
    param_store::save(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}
