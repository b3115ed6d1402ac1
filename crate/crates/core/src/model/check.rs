use super::{FeatureBatch, ModelConfig, SentiFormer};
use crate::error::Result;
use crate::model::layers::Fwd;
use crate::tensor::{finite_diff_check, Fault, GradCheckReport, Tape, Tensor};
use crate::training::TruncatedNormal;

/// Finite-difference step used by [`gradient_check`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Double-precision finite-difference check of the full model loss on a
/// seeded two-sample batch.
///
/// Weights come from a wide truncated normal and every value, biases and
/// layer-norm offsets included, is jittered away from its initial constant:
/// with all-zero biases and a blanked stream a layer norm would sit at its
/// singular constant-row point. `fault` corrupts one backward rule so the
/// check can be seen to fail.
pub fn gradient_check(
    config: ModelConfig,
    seed: u64,
    fault: Option<Fault>,
) -> Result<GradCheckReport> {
    let mut model = SentiFormer::<f64>::new(config, &mut TruncatedNormal::new(seed, 0.4, 0.8))?;
    let mut jitter = TruncatedNormal::new(seed.wrapping_add(7), 0.3, 0.6);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().value_mut(id).data_mut() {
            *v += jitter.sample();
        }
    }
    let cfg = model.config().clone();
    let mut g = TruncatedNormal::new(seed.wrapping_add(100), 1.0, 3.0);
    let mut features = || Tensor::from_fn(&[2, cfg.d_e], |_| g.sample());
    let batch = FeatureBatch {
        e_v: features(),
        e_c: features(),
        e_p: features(),
    };
    let labels: Vec<usize> = (0..2).map(|i| (i + 1) % cfg.classes).collect();
    let layout = model.clone();
    finite_diff_check(model.params_mut(), GRADCHECK_STEP, |p| {
        let mut tape = match fault {
            Some(f) => Tape::with_fault(f),
            None => Tape::new(),
        };
        let mut f = Fwd::new(&mut tape, p, 2);
        let acts = layout.forward_with(&mut f, &batch)?;
        let loss = tape.softmax_cross_entropy(acts.logits, &labels)?;
        Ok((tape, loss))
    })
}
