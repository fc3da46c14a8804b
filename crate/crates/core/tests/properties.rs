//! Property tests for the invariants that span modules: kernel ranges,
//! model output contracts, loss bounds and serialization round trips.

use std::collections::BTreeMap;

use anomize::dataio::{decode_features, encode_features, Checkpoint, Cursor};
use anomize::model::{fuse_scores, AnomizeModel, ModelConfig, Phase, TextInputs};
use anomize::tensor::{cosine_sim_matrix, softmax, topk, Graph, KeyLayout, Tensor};
use anomize::textbank::{DescriptionSet, EmbeddingProvider, Label, LabelSpace, Split};
use anomize::training::{
    compute_loss_weights, loss_categorization, loss_detection_mil, AdamW, Stage, TrainConfig,
};
use proptest::prelude::*;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>, span: f64) -> impl Strategy<Value = Tensor<f64>> {
    (rows, cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-span..span, r * c).prop_map(move |v| Tensor::new(vec![r, c], v).unwrap())
    })
}

/// Selection by repeated linear scans: the first strictly larger value wins,
/// so equal values keep their index order.
fn topk_oracle(values: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| v > values[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

fn bits<T: anomize::tensor::Scalar>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_f64_lossy().to_bits()).collect()
}

fn unit_rows(rows: usize, dim: usize, seed: u64, prefix: &str) -> Tensor<f32> {
    let p = EmbeddingProvider::pseudo(dim, seed);
    let texts: Vec<String> = (0..rows).map(|i| format!("{prefix} {i}")).collect();
    p.embed_all(&texts).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(1..=8, 1..=40, 500.0)) {
        let p = softmax(&x, 1).unwrap();
        for i in 0..x.shape()[0] {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let p32 = softmax(&x.cast::<f32>(), 1).unwrap();
        for i in 0..x.shape()[0] {
            prop_assert!((p32.row(i).iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn topk_matches_selection_oracle(
        (values, k) in (1usize..=200).prop_flat_map(|m| {
            (prop::collection::vec((0u8..12).prop_map(|v| f64::from(v) * 0.25), m), 1..=m)
        })
    ) {
        let (idx, vals) = topk(&values, k).unwrap();
        prop_assert_eq!(&idx, &topk_oracle(&values, k));
        prop_assert_eq!(vals, idx.iter().map(|&i| values[i]).collect::<Vec<_>>());
    }

    #[test]
    fn cosines_lie_in_unit_interval(a in matrix(1..=6, 4..=4, 3.0), b in matrix(1..=6, 4..=4, 3.0)) {
        let s = cosine_sim_matrix(&a, &b).unwrap();
        prop_assert!(s.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn attention_is_pure(q in matrix(1..=5, 8..=8, 2.0), kv in matrix(1..=6, 8..=8, 2.0), heads in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let run = || {
            let mut g = Graph::<f64>::new();
            let (qv, kv_) = (g.input(q.clone()), g.input(kv.clone()));
            let out = g.attention(qv, kv_, kv_, heads, KeyLayout::Shared).unwrap();
            let loss = g.sum(out);
            let grads = g.backward(loss).unwrap();
            (bits(g.value(out)), bits(grads.wrt(qv).unwrap()))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn pseudo_embeddings_are_unit_and_deterministic(text in "[a-z]{1,8}( [a-z]{1,8}){0,6}", seed in 0u64..4, dim in prop::sample::select(vec![8usize, 16, 64])) {
        let p = EmbeddingProvider::pseudo(dim, seed);
        let v = p.embed(&text).unwrap();
        let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
        prop_assert_eq!(v, EmbeddingProvider::pseudo(dim, seed).embed(&text).unwrap());
    }

    #[test]
    fn fused_score_lies_between_streams(
        pairs in prop::collection::vec((0.001f64..0.999, 0.001f64..0.999), 1..30),
        beta in 0.0f64..=1.0,
    ) {
        let (dyn_, sta): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(dyn_.clone()));
        let b = g.constant(Tensor::vector(sta.clone()));
        let s = fuse_scores(&mut g, a, b, beta).unwrap();
        for (i, &v) in g.value(s).data().iter().enumerate() {
            let (lo, hi) = (dyn_[i].min(sta[i]), dyn_[i].max(sta[i]));
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn categorization_loss_bounds(
        batch in prop::collection::vec(
            (2usize..=7).prop_flat_map(|c| (prop::collection::vec(0.0f64..5.0, c), 0..c)),
            1..8,
        )
    ) {
        let (p, labels): (Vec<Vec<f64>>, Vec<usize>) = batch
            .into_iter()
            .map(|(raw, label)| (softmax(&Tensor::vector(raw), 0).unwrap().into_data(), label))
            .unzip();
        let l = loss_categorization(&p, &labels, 1e-7).unwrap();
        prop_assert!(l.ce >= 0.0);
        prop_assert!((0.0..=1.0).contains(&l.sep));
        prop_assert_eq!(l.cat, l.ce + l.sep);
    }

    #[test]
    fn mil_losses_are_non_negative(
        batch in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, any::<bool>()), 1..16)
    ) {
        let q_dyn: Vec<f64> = batch.iter().map(|b| b.0).collect();
        let q_sta: Vec<f64> = batch.iter().map(|b| b.1).collect();
        let anomalous: Vec<bool> = batch.iter().map(|b| b.2).collect();
        let w = compute_loss_weights(&anomalous);
        prop_assert!(w.iter().all(|&v| v >= 1.0));
        let l = loss_detection_mil(&q_dyn, &q_sta, &anomalous, &w, 1e-7).unwrap();
        prop_assert!(l.d_mil >= 0.0 && l.s_mil >= 0.0 && l.det.is_finite());
        prop_assert_eq!(l.det, l.d_mil + l.s_mil);
    }

    #[test]
    fn feature_files_round_trip_bitwise(x in matrix(0..=12, 1..=9, 1e6)) {
        let t = x.cast::<f32>();
        let back = decode_features(&encode_features(&t).unwrap(), "mem").unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(bits(&back), bits(&t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_respects_output_contracts(
        n in prop::sample::select(vec![1usize, 3, 7, 20, 256]),
        dim in prop::sample::select(vec![8usize, 16]),
        c in 2usize..=7,
        k in prop::sample::select(vec![1usize, 5]),
        seed in 0u64..1000,
        beta in prop::sample::select(vec![0.0, 0.3, 0.5, 1.0]),
    ) {
        let config = ModelConfig { heads: 2, concepts_k: k, init_seed: seed, ..ModelConfig::with_dim(dim) };
        let model = AnomizeModel::<f32>::new(config).unwrap();
        let text = TextInputs {
            t_desc: unit_rows(c, dim, seed, "label"),
            concepts: unit_rows(12, dim, seed, "concept"),
        };
        let x = unit_rows(n, dim, seed + 1, "frame").map(|v| v * 3.0);
        for phase in [Phase::Train, Phase::Eval] {
            let out = model.infer(&x, &text, phase, beta).unwrap();
            prop_assert_eq!(out.s.len(), n);
            prop_assert_eq!(out.p_frame.shape(), &[n, c]);
            prop_assert_eq!(out.p_avg.len(), c);
            prop_assert!(out.s_dyn.iter().chain(&out.s_sta).all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(out.s.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(out.p_frame.data().iter().all(|v| v.abs() <= 1.0 + 1e-6));
            let total: f64 = out.p_avg.iter().map(|&v| f64::from(v)).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert_eq!(out.top_m, (n / 16).max(1));
            prop_assert_eq!(&out, &model.infer(&x, &text, phase, beta).unwrap());
        }
    }

    #[test]
    fn stage_masks_partition_parameters(seed in 0u64..100) {
        let model = AnomizeModel::<f32>::new(ModelConfig { heads: 2, init_seed: seed, ..ModelConfig::with_dim(8) }).unwrap();
        for p in model.params.iter() {
            prop_assert!(Stage::Stage1.trains(&p.name) != Stage::Stage2.trains(&p.name));
            prop_assert!(Stage::Joint.trains(&p.name));
        }
    }

    #[test]
    fn zero_lr_step_is_identity(seed in 0u64..100, g in -10.0f32..10.0) {
        let mut model = AnomizeModel::<f32>::new(ModelConfig { heads: 2, init_seed: seed, ..ModelConfig::with_dim(8) }).unwrap();
        for p in model.params.iter_mut() {
            p.grad = p.value.map(|_| g);
        }
        let before: Vec<Vec<u64>> = model.params.iter().map(|p| bits(&p.value)).collect();
        let mut opt = AdamW::new(&TrainConfig { lr: 0.0, ..TrainConfig::default() });
        opt.step(&mut model.params);
        let after: Vec<Vec<u64>> = model.params.iter().map(|p| bits(&p.value)).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn checkpoints_round_trip_bitwise(seed in 0u64..1000, epoch in 0usize..100) {
        let model = AnomizeModel::<f32>::new(ModelConfig { heads: 2, init_seed: seed, ..ModelConfig::with_dim(8) }).unwrap();
        let cursor = Cursor { stage: "stage1".into(), epoch };
        let ck = Checkpoint::from_model(&model, cursor.clone());
        let json = ck.to_json();
        let back = Checkpoint::from_json(&json).unwrap();
        prop_assert_eq!(&back, &ck);
        let restored = back.to_model(Some(&model.config)).unwrap();
        for (a, b) in model.params.iter().zip(restored.params.iter()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(bits(&a.value), bits(&b.value));
        }
        let tampered = json.replacen("\"epoch\": ", "\"epoch\": 1", 1);
        prop_assert_ne!(&tampered, &json);
        prop_assert!(Checkpoint::from_json(&tampered).is_err());
    }

    #[test]
    fn label_and_description_files_round_trip(
        names in prop::collection::btree_set("[a-z]{3,9}", 3..8),
        novel_mask in prop::collection::vec(any::<bool>(), 8),
    ) {
        let names: Vec<String> = names.into_iter().collect();
        let mut labels = vec![Label { index: 0, name: "normal".into(), split: Split::Normal, group: "none".into() }];
        for (i, name) in names.iter().enumerate() {
            // Index 1 is always base and index 2 always novel.
            let novel = i == 1 || (i > 1 && novel_mask[i]);
            labels.push(Label {
                index: i + 1,
                name: name.clone(),
                split: if novel { Split::Novel } else { Split::Base },
                group: format!("g{}", i % 2),
            });
        }
        let space = LabelSpace::new(labels).unwrap();
        prop_assert_eq!(&LabelSpace::from_json(&space.to_json()).unwrap(), &space);

        let descriptions: BTreeMap<usize, String> =
            space.labels().iter().map(|l| (l.index, format!("footage of {}", l.name))).collect();
        let set = DescriptionSet { groups: space.groups(), descriptions };
        let json = serde_json::to_string(&set).unwrap();
        prop_assert_eq!(serde_json::from_str::<DescriptionSet>(&json).unwrap(), set);
    }
}
