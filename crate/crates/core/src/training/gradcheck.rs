//! Central finite-difference check of the analytic training gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_loss_and_grad, zero_grads};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::{softmax_cross_entropy, Mode, Scalar};
use crate::patching::{Patch, PatchTriple, PATCH_SIZE};
use crate::volume_io::{Candidate, Label};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Random inputs with random labels.
pub fn random_batch(n: usize, seed: u64) -> Vec<(PatchTriple, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut p = || Patch::new(PATCH_SIZE, (0..PATCH_SIZE.iter().product()).map(|_| rng.gen::<f32>()).collect());
            let t = PatchTriple {
                s1: p().expect("patch size"),
                s2: p().expect("patch size"),
                s3: p().expect("patch size"),
                candidate: Candidate::new(format!("g{i}"), [0.0; 3], None),
            };
            (t, if i % 2 == 0 { Label::Nodule } else { Label::NonNodule })
        })
        .collect()
}

/// Mean loss and combined kink signature, forward only.
fn probe(m: &Model<f64>, data: &[(PatchTriple, Label)], mask_seed: u64) -> Result<(f64, Vec<u64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let mut total = 0.0;
    let mut sig = Vec::with_capacity(data.len());
    for (t, label) in data {
        let acts = m.forward_sample(t, Mode::Train, &mut rng)?;
        total += softmax_cross_entropy(&acts.output().data, label.class() as usize).0.as_f64();
        sig.push(m.graph().kink_signature(&acts));
    }
    Ok((total / data.len() as f64, sig))
}

/// Compares analytic and central-difference gradients of the mean batch
/// loss (dropout active with a fixed mask) on `samples` parameters drawn
/// uniformly over all scalar parameters. Parameters whose perturbation
/// flips a ReLU or a pooling winner are skipped and replaced by another
/// draw, since the loss is not differentiable across such a step.
pub fn check_gradients(config: ModelConfig, seed: u64, batch: usize, samples: usize, step: f64) -> Result<Vec<GradCheck>> {
    let mut model: Model<f64> = Model::build_initialized(config, seed)?;
    // Non-zero biases so every parameter kind is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for p in model.params_mut() {
        if p.shape.len() == 1 {
            p.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.05..0.05));
        }
    }
    let data = random_batch(batch, seed + 1);
    let mask_seed = seed + 2;
    let (_, base_sig) = probe(&model, &data, mask_seed)?;
    let mut grads = zero_grads(&model);
    batch_loss_and_grad(&model, &data, Mode::Train, &mut ChaCha8Rng::seed_from_u64(mask_seed), &mut grads)?;

    let offsets: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |i| (pi, i)))
        .collect();
    let mut order: Vec<usize> = (0..offsets.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(samples);
    for k in order {
        if out.len() == samples {
            break;
        }
        let (pi, i) = offsets[k];
        let orig = model.params()[pi].data[i];
        model.params_mut()[pi].data[i] = orig + step;
        let (up, sig_up) = probe(&model, &data, mask_seed)?;
        model.params_mut()[pi].data[i] = orig - step;
        let (down, sig_down) = probe(&model, &data, mask_seed)?;
        model.params_mut()[pi].data[i] = orig;
        if sig_up != base_sig || sig_down != base_sig {
            continue;
        }
        out.push(GradCheck {
            name: model.params()[pi].name.clone(),
            index: i,
            analytic: grads[pi][i],
            numeric: (up - down) / (2.0 * step),
        });
    }
    Ok(out)
}
