use proptest::prelude::*;

use pmam::checkpoint::{Checkpoint, RngState, Stage};
use pmam::evalkit::{event_f1_intersection, frame_macro_f1, median_filter, pearson, EventList};
use pmam::finetune::ema_update;
use pmam::mam::sample_block_mask;
use pmam::numgrad::{Array, ParamStore};
use pmam::proto::{PrototypeModel, PseudoLabelMatrix};
use pmam::rng::substream;
use pmam::synthgen::{decode_clip, encode_clip, label_matrix, EventInstance, FeatureClip};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array::new(&[rows, cols], v).unwrap())
}

fn mixture() -> impl Strategy<Value = (PrototypeModel, Array)> {
    (1usize..6, 1usize..5, 1usize..12).prop_flat_map(|(k, d, n)| {
        (
            prop::collection::vec(0.05f64..1.0, k),
            matrix(k, d, -3.0, 3.0),
            matrix(k, d, 0.01, 4.0),
            matrix(n, d, -20.0, 20.0),
        )
            .prop_map(|(raw, means, vars, z)| {
                let s: f64 = raw.iter().sum();
                let priors = raw.iter().map(|p| p / s).collect();
                (PrototypeModel::new(priors, means, vars).unwrap(), z)
            })
    })
}

fn binary(frames: usize, categories: usize) -> impl Strategy<Value = Array> {
    prop::collection::vec(any::<bool>(), frames * categories).prop_map(move |v| {
        Array::new(&[frames, categories], v.into_iter().map(|b| b as u8 as f64).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn responsibilities_are_distributions((model, z) in mixture()) {
        let gamma = model.responsibilities(&z).unwrap().gamma;
        for t in 0..z.rows() {
            let row = gamma.row(t);
            prop_assert!(row.iter().all(|&g| (0.0..=1.0).contains(&g)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn masks_cover_the_ratio_in_short_blocks(seed in any::<u64>(), frames in 1usize..300, ratio in 0.05f64..1.0, block in 1usize..20) {
        let block = block.min(frames);
        let mut rng = substream(seed, "prop_mask", &[]);
        let m = sample_block_mask(&mut rng, frames, ratio, block).unwrap();
        prop_assert!(m.count() as f64 >= (ratio * frames as f64).ceil() - 1e-9);
        prop_assert!(m.count() <= frames);
        let mut union = vec![false; frames];
        for &(s, e) in m.blocks() {
            prop_assert!(s < e && e - s <= block && e <= frames);
            union[s..e].iter_mut().for_each(|u| *u = true);
        }
        prop_assert_eq!(union, m.flags());
        prop_assert!(m.indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn oversized_mask_blocks_are_rejected(frames in 1usize..50, extra in 1usize..10) {
        let mut rng = substream(0, "prop_mask", &[]);
        prop_assert!(sample_block_mask(&mut rng, frames, 0.5, frames + extra).is_err());
    }

    #[test]
    fn median_filter_keeps_length_and_range(x in prop::collection::vec(-5.0f64..5.0, 0..60), half in 0usize..6) {
        let y = median_filter(&x, 2 * half + 1).unwrap();
        prop_assert_eq!(y.len(), x.len());
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(y.iter().all(|&v| v >= lo && v <= hi));
        if half == 0 {
            prop_assert_eq!(y, x);
        }
    }

    #[test]
    fn event_runs_rebuild_the_frame_matrix(active in binary(30, 3)) {
        let list = EventList::from_binary(&active);
        let events: Vec<EventInstance> = list
            .per_category
            .iter()
            .enumerate()
            .flat_map(|(c, runs)| runs.iter().map(move |&(s, e)| EventInstance::new(c, s, e, 30).unwrap()))
            .collect();
        let rebuilt = label_matrix(&events, 3, 30);
        for c in 0..3 {
            for t in 0..30 {
                prop_assert_eq!(rebuilt[c * 30 + t] as f64, active.get(t, c));
            }
            prop_assert!(list.per_category[c].windows(2).all(|w| w[0].1 < w[1].0));
        }
    }

    #[test]
    fn perfect_prediction_scores_one(truth in binary(25, 3)) {
        prop_assume!((0..3).all(|c| (0..25).any(|t| truth.get(t, c) > 0.0)));
        prop_assert!((frame_macro_f1(&truth, &truth).unwrap() - 1.0).abs() < 1e-12);
        let events = EventList::from_binary(&truth);
        prop_assert!((event_f1_intersection(&events, &events, 0.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_bounded_and_symmetric(pairs in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 2..40)) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        match (pearson(&x, &y), pearson(&y, &x)) {
            (Some(a), Some(b)) => {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
                prop_assert!((a - b).abs() < 1e-12);
            }
            (None, None) => {}
            other => prop_assert!(false, "asymmetric definedness {:?}", other),
        }
    }

    #[test]
    fn clips_round_trip(features in matrix(4, 12, -10.0, 10.0), onset in 0usize..11, len in 1usize..6) {
        let offset = (onset + len).min(12);
        let events = vec![EventInstance::new(1, onset, offset, 12).unwrap()];
        let clip = FeatureClip {
            label_matrix: label_matrix(&events, 2, 12),
            features,
            events,
            categories: 2,
        };
        let back = decode_clip(&encode_clip(&clip), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, clip);
    }

    #[test]
    fn label_and_prototype_files_round_trip((model, z) in mixture()) {
        let path = std::path::Path::new("mem");
        let labels = model.responsibilities(&z).unwrap();
        let back = PseudoLabelMatrix::from_bytes(&labels.to_bytes(), path).unwrap();
        prop_assert_eq!(back.gamma.data(), labels.gamma.data());
        let m = PrototypeModel::from_bytes(&model.to_bytes(), path).unwrap();
        prop_assert_eq!(m.priors, model.priors);
        prop_assert_eq!(m.means.data(), model.means.data());
        prop_assert_eq!(m.variances.data(), model.variances.data());
    }

    #[test]
    fn checkpoints_round_trip(a in matrix(2, 3, -1.0, 1.0), b in matrix(1, 4, -1.0, 1.0), seed in any::<u64>(), it in 0usize..5) {
        let mut params = ParamStore::new();
        params.add("encoder.w", a).unwrap();
        params.add("head.b", b).unwrap();
        let ckpt = Checkpoint {
            stage: Stage::Pretrain(it),
            config: "seed = 1\n".into(),
            rng: RngState { master_seed: seed, next_iteration: it as u64 + 1 },
            params,
            optimizer: None,
        };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.stage, ckpt.stage);
        prop_assert_eq!(back.rng, ckpt.rng);
        prop_assert_eq!(back.config, ckpt.config);
        prop_assert_eq!(back.params.value_hash(), ckpt.params.value_hash());
    }

    #[test]
    fn ema_stays_between_teacher_and_student(t in matrix(3, 3, -2.0, 2.0), s in matrix(3, 3, -2.0, 2.0), alpha in 0.0f64..=1.0) {
        let mut teacher = ParamStore::new();
        teacher.add("w", t.clone()).unwrap();
        let mut student = ParamStore::new();
        student.add("w", s.clone()).unwrap();
        ema_update(&mut teacher, &student, alpha).unwrap();
        let id = teacher.id("w").unwrap();
        for ((&out, &a), &b) in teacher.value(id).data().iter().zip(t.data()).zip(s.data()) {
            prop_assert!(out >= a.min(b) - 1e-12 && out <= a.max(b) + 1e-12);
        }
    }
}
