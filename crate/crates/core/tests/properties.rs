use proptest::prelude::*;

use sentiformer::data::{
    build_prompt, read_jsonl, write_jsonl, Dataset, FeatureRecord, MAX_OBJECTS,
};
use sentiformer::eval::EvalReport;
use sentiformer::{Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, rows * cols)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        (rows, cols, data, shift) in (1usize..6, 1usize..9)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), matrix(r, c), -500.0f64..500.0))
    ) {
        let x = Tensor::new(vec![rows, cols], data.clone()).unwrap();
        let shifted = Tensor::new(vec![rows, cols], data.iter().map(|v| v + shift).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.constant(x), tape.constant(shifted));
        let (pa, pb) = (tape.softmax_rows(a).unwrap(), tape.softmax_rows(b).unwrap());
        let (pa, pb) = (tape.value(pa), tape.value(pb));
        for r in 0..rows {
            prop_assert!((pa.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(pa.max_abs_diff(pb) < 1e-12);
    }

    #[test]
    fn jsonl_round_trip(
        records in prop::collection::vec(
            (0usize..8, prop::collection::vec(-1e6f32..1e6, 12), prop::option::of("[a-z ]{1,12}")),
            1..10,
        )
    ) {
        let records: Vec<FeatureRecord> = records
            .into_iter()
            .enumerate()
            .map(|(i, (label, v, caption))| FeatureRecord {
                id: format!("r{i}"),
                label,
                e_v: v[..4].to_vec(),
                e_c: v[4..8].to_vec(),
                e_p: v[8..].to_vec(),
                caption,
                scene: None,
                objects: None,
            })
            .collect();
        let ds = Dataset::new(records).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&ds, &path).unwrap();
        let back = read_jsonl(&path, Some(4)).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn macro_f1_ignores_sample_order(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let split = |ps: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { ps.iter().copied().unzip() };
        let (p1, y1) = split(&pairs);
        let (p2, y2) = split(&shuffled);
        let a = EvalReport::from_predictions(&p1, &y1, 5).unwrap();
        let b = EvalReport::from_predictions(&p2, &y2, 5).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        prop_assert_eq!(a.confusion, b.confusion);
    }

    #[test]
    fn prompt_follows_the_template(
        scene in "[a-z][a-z ]{0,15}",
        objects in prop::collection::vec("[a-z][a-z ]{0,10}", 1..=MAX_OBJECTS),
    ) {
        let p = build_prompt(&scene, &objects).unwrap();
        let head = format!("the scene or background of the image is {scene}, and the image contains the following objects: ");
        prop_assert!(p.starts_with(&head));
        let tail = &p[head.len()..];
        prop_assert_eq!(tail, objects.join(", "));
        prop_assert!(!p.ends_with(", "));
    }
}
