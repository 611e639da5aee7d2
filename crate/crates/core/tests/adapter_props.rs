use fewshot_core::{
    adapter_shapes, build_model, ia3_param_count, init_adapter, merge, select_for_batch, Activation, AdapterStore,
    Error, IA3Adapter, ModelSpec, Tensor,
};
use proptest::prelude::*;

fn small_spec() -> impl Strategy<Value = ModelSpec> {
    (
        1usize..=2,
        1usize..=3,
        1usize..=3,
        2usize..12,
        1usize..=2,
        1usize..=2,
        any::<bool>(),
    )
        .prop_map(|(heads, dk, dv, d_ff, enc, dec, gelu)| ModelSpec {
            vocab_size: 16,
            d_model: 6,
            num_heads: heads,
            d_k: heads * dk,
            d_v: heads * dv,
            d_ff,
            enc_layers: enc,
            dec_layers: dec,
            max_seq_len: 12,
            activation: if gelu { Activation::Gelu } else { Activation::Relu },
        })
}

fn adapter_from(spec: &ModelSpec, seed: u64) -> IA3Adapter<f64> {
    let mut k = seed;
    let vectors = adapter_shapes(spec)
        .into_iter()
        .map(|(name, n)| {
            let t = Tensor::from_fn(&[n], |_| {
                k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                0.25 + (k >> 11) as f64 / (1u64 << 53) as f64 * 1.5
            })
            .unwrap();
            (name, t)
        })
        .collect();
    IA3Adapter::from_vectors(spec, vectors).unwrap()
}

fn tokens() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..16, 1..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn merged_weights_reproduce_adapted_forward(
        spec in small_spec(),
        model_seed in 0u64..1000,
        adapter_seed in any::<u64>(),
        x in tokens(),
        y in tokens(),
    ) {
        let model = build_model::<f64>(&spec, model_seed).unwrap();
        let adapter = adapter_from(&spec, adapter_seed);
        let merged = merge(&model, &adapter).unwrap();
        let a = merged.logits(None, &x, &y).unwrap();
        let b = model.logits(Some(&adapter), &x, &y).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
        prop_assert_eq!(merged.num_scalars(), model.num_scalars());
    }

    #[test]
    fn adapter_count_matches_vectors(spec in small_spec()) {
        let a = init_adapter::<f64>(&spec).unwrap();
        prop_assert_eq!(a.num_scalars(), ia3_param_count(&spec));
        prop_assert!(a.vectors().values().all(|t| t.data().iter().all(|&x| x == 1.0)));
    }

    #[test]
    fn mixed_batch_is_order_independent(
        seeds in prop::collection::vec(any::<u64>(), 3),
        order in Just(vec![0usize, 1, 2]).prop_shuffle(),
        xs in prop::collection::vec(tokens(), 3),
        ys in prop::collection::vec(tokens(), 3),
    ) {
        let spec = ModelSpec { vocab_size: 16, max_seq_len: 12, ..ModelSpec::toy() };
        let model = build_model::<f64>(&spec, 7).unwrap();
        let mut store = AdapterStore::new(&spec);
        let names = ["t0", "t1", "t2"];
        for (n, &s) in names.iter().zip(&seeds) {
            store.insert(*n, &adapter_from(&spec, s)).unwrap();
        }
        let ids: Vec<&str> = order.iter().map(|&i| names[i]).collect();
        let inputs: Vec<&[usize]> = order.iter().map(|&i| xs[i].as_slice()).collect();
        let targets: Vec<&[usize]> = order.iter().map(|&i| ys[i].as_slice()).collect();
        let batch = select_for_batch::<f64>(&store, &ids).unwrap();
        let out = batch.logits(&model, &inputs, &targets).unwrap();
        for (j, &i) in order.iter().enumerate() {
            let alone = model.logits(Some(batch.adapter_for(j)), &xs[i], &ys[i]).unwrap();
            prop_assert!(out[j].max_abs_diff(&alone) < 1e-9);
            let stored: IA3Adapter<f64> = store.get(names[i]).unwrap().cast();
            prop_assert_eq!(batch.adapter_for(j), &stored);
        }
    }
}

#[test]
fn unknown_task_is_named() {
    let spec = ModelSpec::toy();
    let store = AdapterStore::new(&spec);
    match select_for_batch::<f64>(&store, &["missing"]) {
        Err(Error::UnknownTask(t)) => assert_eq!(t, "missing"),
        other => panic!("expected unknown task, got {other:?}"),
    }
}

#[test]
fn store_rejects_other_spec() {
    let mut store = AdapterStore::new(&ModelSpec::toy());
    let other = ModelSpec {
        d_ff: 48,
        ..ModelSpec::toy()
    };
    let a = init_adapter::<f64>(&other).unwrap();
    assert!(store.insert("x", &a).is_err());
}

#[test]
fn merge_rejects_mismatched_adapter() {
    let model = build_model::<f64>(&ModelSpec::toy(), 0).unwrap();
    let other = ModelSpec {
        d_ff: 48,
        ..ModelSpec::toy()
    };
    let a = init_adapter::<f64>(&other).unwrap();
    assert!(merge(&model, &a).is_err());
}

#[test]
fn ones_merge_is_identity() {
    let spec = ModelSpec::toy();
    let model = build_model::<f64>(&spec, 1).unwrap();
    let merged = merge(&model, &init_adapter(&spec).unwrap()).unwrap();
    assert_eq!(merged, model);
}
