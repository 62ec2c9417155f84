mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use protps::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use protps::embedding_io::{
    decode_dataset, encode_dataset, ClassTokenTable, Dataset, EmbeddingRecord, Split,
};
use protps::encoders::ToyTextEncoder;
use protps::evaluator::{InferenceConfig, PredictMode, Predictor};
use protps::model::{Banks, PromptInit, PrototypeInit};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predict_ignores_input_scale(seed in 0u64..10_000, n in 1usize..7, c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let ids: Vec<u32> = (0..n as u32).collect();
        let tokens = random_tokens(&mut r, &ids, 6);
        let enc = ToyTextEncoder::new(6, 2, seed).unwrap();
        let banks = random_banks(&mut r, &ids, 6, 2);
        let p = Predictor::new(&banks, &enc, &tokens, InferenceConfig::default()).unwrap();
        let z = gauss(&mut r, 6);
        let zc: Vec<f64> = z.iter().map(|x| x * c).collect();
        for mode in [PredictMode::Aggregated, PredictMode::Vision, PredictMode::Text] {
            prop_assert_eq!(p.predict(&z, mode).unwrap(), p.predict(&zc, mode).unwrap());
        }
    }

    #[test]
    fn classification_losses_are_nonnegative(seed in 0u64..10_000) {
        let inst = Instance::random(seed, 8, 3, 4, 1);
        let b = inst.total_with(&inst.banks, protps::losses::PairLoss::Pp);
        prop_assert!(b.c1 >= 0.0 && b.c2 >= 0.0);
        prop_assert!(b.pp.is_finite());
    }

    #[test]
    fn text_rows_are_unit(seed in 0u64..10_000) {
        let inst = Instance::random(seed, 8, 3, 5, 2);
        let tc = inst.tc(&inst.banks);
        for row in tc.weights.iter_rows() {
            prop_assert!((ref_dot(row, row).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn expansion_is_monotone(sizes in proptest::collection::vec(0usize..4, 1..6), seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut banks = Banks::new(4, 2);
        let mut next = 0u32;
        for (t, &k) in sizes.iter().enumerate() {
            let before = banks.len();
            let ids: Vec<u32> = (next..next + k as u32).collect();
            next += k as u32;
            let range = banks
                .expand(t, &ids, &BTreeMap::new(), &PrototypeInit::Random, &PromptInit::default(), &mut r)
                .unwrap();
            prop_assert_eq!(range, before..before + k);
            prop_assert!(banks.prototypes.frozen[..before].iter().all(|&f| f));
            prop_assert!(banks.prompts.frozen[..before].iter().all(|&f| f));
            prop_assert!(banks.prototypes.frozen[before..].iter().all(|&f| !f));
            prop_assert!(banks.prototypes.task_of.windows(2).all(|w| w[0] <= w[1]));
            for i in 0..banks.len() {
                let p = banks.prototype(i);
                prop_assert!((ref_dot(p, p).sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dataset_bytes_round_trip(
        seed in 0u64..10_000,
        d in 1usize..9,
        n in 0usize..30,
        classes in 1u32..5,
    ) {
        let mut r = rng(seed);
        let mut tokens = ClassTokenTable::new();
        for c in 0..classes {
            tokens.insert(c, format!("name {c} é"), unit(&mut r, d));
        }
        let records: Vec<EmbeddingRecord> = (0..n)
            .map(|i| EmbeddingRecord {
                class_id: i as u32 % classes,
                domain_id: (i / 7) as u32,
                split: if i % 3 == 0 { Split::Test } else { Split::Train },
                vector: unit(&mut r, d),
            })
            .collect();
        let ds = Dataset { records, tokens };
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        prop_assert_eq!(back.records.len(), ds.records.len());
        for (a, b) in back.records.iter().zip(&ds.records) {
            prop_assert_eq!((a.class_id, a.domain_id, a.split), (b.class_id, b.domain_id, b.split));
            for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
        for ((ca, ta), (cb, tb)) in back.tokens.iter().zip(ds.tokens.iter()) {
            prop_assert_eq!(ca, cb);
            prop_assert_eq!(&ta.name, &tb.name);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact(seed in 0u64..10_000, n in 0usize..6) {
        let mut r = rng(seed);
        let ids: Vec<u32> = (0..n as u32).map(|i| i * 5).collect();
        let banks = random_banks(&mut r, &ids, 5, 3);
        let ckpt = Checkpoint { banks, encoder_seed: seed, config_hash: [seed as u8; 32] };
        prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap(), ckpt);
    }

    #[test]
    fn truncated_dataset_is_a_format_error(seed in 0u64..1000, cut in 1usize..60) {
        let mut r = rng(seed);
        let mut tokens = ClassTokenTable::new();
        tokens.insert(0, "a", unit(&mut r, 3));
        let ds = Dataset {
            records: vec![EmbeddingRecord { class_id: 0, domain_id: 0, split: Split::Train, vector: unit(&mut r, 3) }],
            tokens,
        };
        let bytes = encode_dataset(&ds).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        let is_format = matches!(
            decode_dataset(&bytes[..keep]),
            Err(protps::Error::Format { .. })
        );
        prop_assert!(is_format);
    }
}
