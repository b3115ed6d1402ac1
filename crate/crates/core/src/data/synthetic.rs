use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, FeatureRecord};
use crate::error::{Error, Result};
use crate::model::Stream;

/// Gaussian class clusters, one mean per class and informative stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub d_e: usize,
    /// Norm of every class mean.
    pub separation: f64,
    pub noise_std: f64,
    pub informative: Vec<Stream>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 8,
            per_class: 125,
            d_e: 512,
            separation: 5.0,
            noise_std: 1.0,
            informative: Stream::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class == 0 || self.d_e == 0 {
            return Err(Error::Usage(format!(
                "synthetic data needs classes >= 2, per_class >= 1 and d_e >= 1 \
                 (got {}, {}, {})",
                self.classes, self.per_class, self.d_e
            )));
        }
        if !(self.separation >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Usage(
                "separation and noise_std must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Class-major dataset; ids are `syn-00000`, `syn-00001`, ...
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // means[stream][class]; `None` for noise-only streams
    let means: Vec<Option<Vec<Vec<f64>>>> = Stream::ALL
        .iter()
        .map(|s| {
            spec.informative.contains(s).then(|| {
                (0..spec.classes)
                    .map(|_| {
                        let dir = gaussian(&mut rng, spec.d_e);
                        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                        dir.iter().map(|x| x / norm * spec.separation).collect()
                    })
                    .collect()
            })
        })
        .collect();

    let mut records = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        for _ in 0..spec.per_class {
            let mut streams = means.iter().map(|m| {
                let noise = gaussian(&mut rng, spec.d_e);
                noise
                    .iter()
                    .enumerate()
                    .map(|(i, z)| {
                        let mu = m.as_ref().map_or(0.0, |m| m[class][i]);
                        (mu + spec.noise_std * z) as f32
                    })
                    .collect::<Vec<f32>>()
            });
            let (e_v, e_c, e_p) = (
                streams.next().unwrap(),
                streams.next().unwrap(),
                streams.next().unwrap(),
            );
            records.push(FeatureRecord {
                id: format!("syn-{:05}", records.len()),
                label: class,
                e_v,
                e_c,
                e_p,
                caption: None,
                scene: None,
                objects: None,
            });
        }
    }
    Ok(Dataset { records })
}

/// Seeded shuffle, then the first `round(n * test_fraction)` records become
/// the test split. Both splits keep the shuffled order.
pub fn train_test_split(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Usage(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (dataset.len() as f64 * test_fraction).round() as usize;
    let (test, train) = order.split_at(n_test);
    Ok((dataset.subset(train), dataset.subset(test)))
}
