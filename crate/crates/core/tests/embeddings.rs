use sentiformer::data::{gen_synthetic, SyntheticSpec};
use sentiformer::eval::{embeddings, EmbeddingStage};
use sentiformer::training::{init_model, train, TrainConfig};
use sentiformer::ModelConfig;

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let n = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

#[test]
fn trained_embeddings_cluster_by_class() {
    let data = gen_synthetic(&SyntheticSpec {
        classes: 4,
        per_class: 20,
        d_e: 16,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 25,
        learning_rate: 3e-3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mcfg = ModelConfig {
        d_e: 16,
        classes: 4,
        depth_n: 2,
        depth_m: 2,
        ..ModelConfig::default()
    }
    .with_dims(32, 8, 16);
    let mut model = init_model::<f32>(mcfg, &cfg).unwrap();
    let log = train(&mut model, &data, None, &cfg, |_, _| Ok(())).unwrap();
    assert!(log.last().unwrap().accuracy > 0.9, "{:?}", log.last());

    let rows = embeddings(&model, &data, EmbeddingStage::Post).unwrap();
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let c = cosine(&a.vector, &b.vector);
            let slot = if a.label == b.label {
                &mut intra
            } else {
                &mut inter
            };
            slot.0 += c;
            slot.1 += 1;
        }
    }
    let (intra, inter) = (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64);
    assert!(intra > inter, "intra {intra} inter {inter}");
}
