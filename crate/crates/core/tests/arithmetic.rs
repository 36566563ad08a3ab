use emovec_core::arith::EmotionVector;
use emovec_core::{apply_vector, combine, extract_vector, ParameterSet, TensorEntry};
use proptest::prelude::*;

/// Spacing of f32 values at magnitude `x`.
fn ulp(x: f64) -> f64 {
    let a = (x.abs() as f32).max(f32::MIN_POSITIVE);
    (f32::from_bits(a.to_bits() + 1) - a) as f64
}

/// Ulps are measured at the largest operand magnitude, not at the result:
/// when θ and τ nearly cancel, a correctly rounded sum can still be many
/// result-ulps away from a differently rounded route to the same value.
fn assert_within_ulps(got: &ParameterSet, want: &ParameterSet, scale: &[&ParameterSet], ulps: f64) {
    for t in want.tensors() {
        let g = got.get(t.name()).unwrap().data();
        for (i, &w) in t.data().iter().enumerate() {
            let m = scale
                .iter()
                .map(|s| (s.get(t.name()).unwrap().data()[i] as f64).abs())
                .fold(0.0, f64::max);
            let err = (g[i] as f64 - w as f64).abs();
            assert!(
                err <= ulps * ulp(m),
                "{}[{i}]: got {} want {w}, error {err:e} > {ulps} ulp at {m:e}",
                t.name(),
                g[i]
            );
        }
    }
}

fn value() -> impl Strategy<Value = f32> {
    (-1.0f32..1.0, -6i32..4).prop_map(|(m, e)| m * 10f32.powi(e))
}

const SHAPES: [(&str, &[usize]); 3] = [("b", &[7]), ("emb", &[4, 5]), ("w", &[3, 2, 2])];

fn set_from(values: &[f32]) -> ParameterSet {
    let mut rest = values;
    let mut set = ParameterSet::new();
    for (name, shape) in SHAPES {
        let n: usize = shape.iter().product();
        let (head, tail) = rest.split_at(n);
        set.insert(TensorEntry::new(name, shape.to_vec(), head.to_vec()).unwrap())
            .unwrap();
        rest = tail;
    }
    set
}

fn numel() -> usize {
    SHAPES.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// A pretrained-like set and a fine-tuned one: mostly small moves, some large.
fn pair() -> impl Strategy<Value = (ParameterSet, ParameterSet)> {
    (
        prop::collection::vec(value(), numel()),
        prop::collection::vec((value(), prop::bool::weighted(0.1)), numel()),
    )
        .prop_map(|(pre, moves)| {
            let emo: Vec<f32> = pre
                .iter()
                .zip(&moves)
                .map(|(&p, &(d, big))| if big { d } else { p + d * 1e-2 })
                .collect();
            (set_from(&pre), set_from(&emo))
        })
}

fn bits(set: &ParameterSet) -> Vec<u32> {
    set.tensors()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn zero_alpha_is_identity((pre, emo) in pair()) {
        let tau = extract_vector(&emo, &pre, "angry").unwrap();
        prop_assert_eq!(bits(&apply_vector(&pre, &tau, 0.0).unwrap()), bits(&pre));
        prop_assert_eq!(bits(&apply_vector(&emo, &tau, 0.0).unwrap()), bits(&emo));
    }

    #[test]
    fn unit_alpha_reconstructs_the_finetune((pre, emo) in pair()) {
        let tau = extract_vector(&emo, &pre, "sad").unwrap();
        let rebuilt = apply_vector(&pre, &tau, 1.0).unwrap();
        assert_within_ulps(&rebuilt, &emo, &[&pre, &emo], 2.0);
    }

    #[test]
    fn additive_in_alpha((pre, emo) in pair(), a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
        let tau = extract_vector(&emo, &pre, "happy").unwrap();
        let twice = apply_vector(&apply_vector(&pre, &tau, a).unwrap(), &tau, b).unwrap();
        let once = apply_vector(&pre, &tau, a + b).unwrap();
        let doubled = combine(&[(&tau, 2.0)]).unwrap();
        assert_within_ulps(&twice, &once, &[&pre, doubled.as_parameter_set()], 4.0);
    }

    #[test]
    fn extraction_is_antisymmetric((pre, emo) in pair()) {
        let forward = extract_vector(&emo, &pre, "angry").unwrap();
        let backward = extract_vector(&pre, &emo, "angry").unwrap().negate().unwrap();
        assert_within_ulps(forward.as_parameter_set(), backward.as_parameter_set(), &[forward.as_parameter_set()], 1.0);
    }

    #[test]
    fn halves_of_one_vector_recombine((pre, emo) in pair()) {
        let tau = extract_vector(&emo, &pre, "sad").unwrap();
        let c = combine(&[(&tau, 0.5), (&tau, 0.5)]).unwrap();
        assert_within_ulps(c.as_parameter_set(), tau.as_parameter_set(), &[tau.as_parameter_set()], 1.0);
    }
}

#[test]
fn merged_model_records_provenance_not_training_stats() {
    let pre = set_from(&vec![0.5; numel()])
        .with_meta("role", "pretrained")
        .unwrap()
        .with_meta("train.loss", "0.1")
        .unwrap()
        .with_meta("speakers", "n00,e00")
        .unwrap();
    let emo = set_from(&vec![0.75; numel()]).with_meta("scope", "multi").unwrap();
    let tau = extract_vector(&emo, &pre, "angry").unwrap();
    let merged = apply_vector(&pre, &tau, 0.9).unwrap();
    assert_eq!(merged.meta_value("role"), Some("merged"));
    assert_eq!(merged.meta_value("alpha"), Some("0.9"));
    assert_eq!(merged.meta_value("speakers"), Some("n00,e00"));
    assert_eq!(merged.meta_value("train.loss"), None);
    assert_eq!(merged.meta_value("vector.hash"), Some(tau.tensor_hash().as_str()));
    let reloaded = EmotionVector::from_parameter_set(tau.as_parameter_set().clone()).unwrap();
    assert_eq!(reloaded, tau);
}
