use std::collections::HashSet;

use ndarray::Array4;
use proptest::prelude::*;
use tubelet_core::autodiff::{Graph, Matrix};
use tubelet_core::dataset::{split_by_class, ClipRecord, ClipTensor, DatasetManifest, Split};
use tubelet_core::episodes::{sample_episode, shift_labels, unshift_labels, EpisodeConfig};
use tubelet_core::mann::{init_memory, read_memory, write_memory, BackboneMode, MANNConfig};
use tubelet_core::masking::{gather_visible, keep_count, sample_mask, scatter_with_mask_tokens};
use tubelet_core::model::{mse_masked_graph, Checkpoint};
use tubelet_core::params::ParamStore;
use tubelet_core::tokenizer::{patchify, projection_rows, unpatchify, PatchConfig};
use tubelet_core::training::augment::{mix_with, one_hot, smooth_labels};
use tubelet_core::training::eval::{rank_of, topk_accuracy};
use tubelet_core::training::schedule::LrSchedule;
use tubelet_core::training::TrainConfig;

fn manifest(counts: &[usize]) -> DatasetManifest {
    let records = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| {
            (0..n).map(move |i| {
                ClipRecord::normalized(format!("k{c:02}_{i:02}"), "mem", format!("k{c:02}"))
            })
        })
        .collect();
    DatasetManifest::from_records(records).unwrap()
}

fn clip(t: usize, h: usize, w: usize, c: usize, seed: u64) -> ClipTensor {
    let mut s = seed;
    ClipTensor::new(
        Array4::from_shape_fn((t, h, w, c), |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        }),
        10.0,
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn class_split_is_disjoint_and_additive(
        counts in prop::collection::vec(1usize..6, 2..30),
        fraction in 0.05f64..0.95,
        seed: u64,
    ) {
        let m = split_by_class(&manifest(&counts), fraction, seed).unwrap();
        prop_assert!(m.is_class_disjoint());
        prop_assert_eq!(m.clip_count(Split::Train) + m.clip_count(Split::Test), counts.iter().sum::<usize>());
        let n_train = (fraction * counts.len() as f64).round() as usize;
        prop_assert_eq!(m.classes_in(Split::Train).len(), n_train);
    }

    #[test]
    fn episodes_hold_their_cardinality(n_way in 2usize..6, k in 1usize..3, q in 1usize..3, extra in 0usize..3, seed: u64) {
        let m = manifest(&vec![k + q + extra; n_way + extra]);
        let cfg = EpisodeConfig { n_way, k_shot: k, q_queries: q, split: Split::Train };
        let ep = sample_episode(&m, &cfg, seed).unwrap();
        for label in 0..n_way {
            prop_assert_eq!(ep.support.iter().filter(|(_, l)| *l == label).count(), k);
            prop_assert_eq!(ep.query.iter().filter(|(_, l)| *l == label).count(), q);
        }
        let ids: HashSet<&str> = ep.support.iter().chain(&ep.query).map(|(r, _)| r.clip_id.as_str()).collect();
        prop_assert_eq!(ids.len(), ep.len());
        prop_assert_eq!(ep.class_map.iter().collect::<HashSet<_>>().len(), n_way);
    }

    #[test]
    fn shifted_labels_never_leak(labels in prop::collection::vec(0usize..5, 1..40)) {
        let items: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
        let s = shift_labels(&items).unwrap();
        prop_assert_eq!(s.inputs.len(), labels.len());
        prop_assert_eq!(s.inputs[0].1, None);
        for t in 1..labels.len() {
            prop_assert_eq!(s.inputs[t].1, Some(labels[t - 1]));
        }
        prop_assert_eq!(unshift_labels(&s), labels[..labels.len() - 1].to_vec());
    }

    #[test]
    fn patchify_inverts_both_ways(p in prop::sample::select(vec![1usize, 2, 4]), tub in 1usize..3, tc in 1usize..3, hc in 1usize..4, wc in 1usize..4, c in 1usize..4, seed: u64) {
        let cfg = PatchConfig::new(p, tub, 4, false);
        let x = clip(tub * tc, p * hc, p * wc, c, seed);
        let (rows, grid) = patchify(&x, &cfg).unwrap();
        prop_assert_eq!(rows.nrows(), tc * hc * wc);
        let back = unpatchify(&rows, grid, &cfg).unwrap();
        prop_assert_eq!(&back.frames, &x.frames);
        let (again, _) = patchify(&back, &cfg).unwrap();
        prop_assert_eq!(again, rows);
    }

    #[test]
    fn token_count_ignores_spt(tc in 1usize..3, hc in 1usize..4, wc in 1usize..4, seed: u64) {
        let x = clip(2 * tc, 4 * hc, 4 * wc, 3, seed);
        let (plain, _) = projection_rows(&x, &PatchConfig::new(4, 2, 8, false)).unwrap();
        let (spt, _) = projection_rows(&x, &PatchConfig::new(4, 2, 8, true)).unwrap();
        prop_assert_eq!(plain.nrows(), spt.nrows());
        prop_assert_eq!(spt.ncols(), 5 * plain.ncols());
    }

    #[test]
    fn mask_plans_partition_and_restore(n in 1usize..300, ratio in 0.0f64..0.99, seed: u64) {
        let plan = sample_mask(n, ratio, seed).unwrap();
        prop_assert_eq!(plan.visible_idx.len(), keep_count(n, ratio));
        let vis: HashSet<usize> = plan.visible_idx.iter().copied().collect();
        prop_assert!(plan.masked_idx.iter().all(|i| !vis.contains(i)));
        prop_assert_eq!(vis.len() + plan.masked_idx.len(), n);
        let mut order = plan.visible_idx.clone();
        order.extend(&plan.masked_idx);
        prop_assert_eq!(plan.restore.iter().map(|&r| order[r]).collect::<Vec<_>>(), (0..n).collect::<Vec<_>>());
        prop_assert_eq!(sample_mask(n, ratio, seed).unwrap(), plan);
    }

    #[test]
    fn keep_count_is_monotone(n in 1usize..2000, a in 0.0f64..0.99, b in 0.0f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(keep_count(n, lo) >= keep_count(n, hi));
        prop_assert!(keep_count(n, hi) >= 1);
    }

    #[test]
    fn scatter_of_gather_restores_visible_rows(n in 1usize..60, d in 1usize..6, ratio in 0.0f64..0.95, seed: u64) {
        let x = Matrix::from_shape_fn((n, d), |(i, j)| (i * d + j) as f64);
        let plan = sample_mask(n, ratio, seed).unwrap();
        let sentinel = vec![-1.0; d];
        let full = scatter_with_mask_tokens(&gather_visible(&x, &plan).unwrap(), &plan, &sentinel).unwrap();
        for (i, masked) in plan.masked_flags().into_iter().enumerate() {
            if masked {
                prop_assert!(full.row(i).iter().all(|&v| v == -1.0));
            } else {
                prop_assert_eq!(full.row(i), x.row(i));
            }
        }
    }

    #[test]
    fn masked_mse_ignores_visible_predictions(n in 2usize..30, d in 1usize..5, seed: u64, noise in -5.0f64..5.0) {
        let plan = sample_mask(n, 0.5, seed).unwrap();
        let target = Matrix::from_shape_fn((n, d), |(i, j)| ((i + 3 * j) % 7) as f64 / 7.0);
        let pred = Matrix::from_shape_fn((n, d), |(i, j)| ((2 * i + j) % 5) as f64 / 5.0);
        let mut moved = pred.clone();
        for &i in &plan.visible_idx {
            moved.row_mut(i).fill(noise);
        }
        let store = ParamStore::new();
        let loss = |p: Matrix| {
            let mut g = Graph::new(&store);
            let v = g.constant(p);
            let l = mse_masked_graph(&mut g, v, target.clone(), &[&plan]).unwrap();
            g.scalar(l.normalized)
        };
        prop_assert_eq!(loss(pred), loss(moved));
    }

    #[test]
    fn memory_weights_stay_normalized(
        keys in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 20),
        gates in prop::collection::vec(0.0f64..1.0, 2 * 20),
    ) {
        let cfg = MANNConfig { memory_slots: 5, key_dim: 3, n_reads: 2, controller_hidden: 4, usage_decay: 0.95, backbone_mode: BackboneMode::Frozen, n_way: 3 };
        let mut state = init_memory(&cfg);
        for step in 0..20 {
            let k = Matrix::from_shape_vec((2, 3), keys[step * 6..step * 6 + 6].to_vec()).unwrap();
            write_memory(&mut state, &k, &gates[step * 2..step * 2 + 2], cfg.usage_decay).unwrap();
            read_memory(&mut state, &k).unwrap();
            for w in [&state.read_weights, &state.write_weights] {
                prop_assert!(w.iter().all(|&v| v >= 0.0));
                prop_assert!(w.rows().into_iter().all(|r| (r.sum() - 1.0).abs() <= 1e-5));
            }
            prop_assert!(state.usage.iter().all(|&u| u >= 0.0));
        }
    }

    // A half cosine over a single epoch falls faster than base/spe per step,
    // so the bound needs at least two decay epochs.
    #[test]
    fn schedule_has_no_jumps(base in 1e-5f64..1e-1, warmup in 0usize..5, extra in 2usize..20, spe in 1usize..30) {
        let s = LrSchedule::new(base, warmup, warmup + extra, spe);
        let bound = base / spe as f64 + 1e-15;
        for k in 0..s.total_steps {
            let (a, b) = (s.lr_at(k), s.lr_at(k + 1));
            prop_assert!((a - b).abs() <= bound, "step {k}: {a} → {b}");
            prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&b));
        }
    }

    #[test]
    fn mixed_labels_stay_on_the_simplex(labels in prop::collection::vec(0usize..4, 2..8), lambda in 0.0f64..1.0, eps in 0.0f64..0.5) {
        let n = labels.len();
        let smoothed: Vec<f64> = one_hot(&labels, 4).rows().into_iter().flat_map(|r| smooth_labels(&r.to_vec(), eps)).collect();
        let y = Matrix::from_shape_vec((n, 4), smoothed).unwrap();
        let clips: Vec<ClipTensor> = (0..n).map(|i| clip(1, 1, 1, 1, i as u64)).collect();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mixed = mix_with(&clips, &y, lambda, &perm).unwrap();
        for r in mixed.labels.rows() {
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn topk_agrees_with_sorting(v in prop::collection::vec(-10.0f64..10.0, 2..30), pick: prop::sample::Index) {
        let label = pick.index(v.len());
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        let rank = order.iter().position(|&i| i == label).unwrap();
        prop_assert_eq!(rank_of(&v, label), rank);
        let acc = topk_accuracy(&Matrix::from_shape_vec((1, v.len()), v.clone()).unwrap(), &[label], &[1, 3]).unwrap();
        prop_assert_eq!(acc, vec![f64::from(rank < 1), f64::from(rank < 3)]);
    }

    #[test]
    fn unknown_override_keys_are_rejected(key in "[a-z]{3,12}") {
        let known = TrainConfig::schema().into_iter().any(|(k, _)| k == key);
        let result = TrainConfig::load(None, &[format!("{key}=1")]);
        prop_assert_eq!(result.is_err(), !known);
    }

    #[test]
    fn checkpoint_bytes_round_trip(shapes in prop::collection::vec((1usize..5, 1usize..5), 1..6), seed: u64) {
        let mut store = ParamStore::new();
        for (i, (r, c)) in shapes.iter().enumerate() {
            let v = clip(1, *r, *c, 1, seed ^ i as u64).frames.mapv(f64::from).into_shape_with_order((*r, *c)).unwrap();
            store.add(format!("p{i}"), v);
        }
        let ck = Checkpoint::new("test", serde_json::json!({"k": 1}), &store);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), "mem").unwrap();
        prop_assert_eq!(back, ck);
    }
}
