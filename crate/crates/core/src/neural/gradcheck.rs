//! Central finite-difference check of the analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::{PolicyNet, OUTPUTS};
use super::train::{batch_gradients, Sample};
use crate::error::NeuralError;

/// Agreement between analytic and numerical gradients for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    /// Checked entries that needed a step below `h` to stay clear of a kink.
    pub reduced: usize,
    /// Entries passed over because every step straddled a ReLU kink.
    pub skipped: usize,
    /// `|a - n| / max(|a|, |n|)` over the checked entries, in the 2-norm.
    pub relative_error: f64,
}

pub const MAX_STEP_CUTS: u32 = 3;

/// Mean batch loss and the concatenated activation patterns.
fn probe(net: &PolicyNet<f64>, batch: &[&Sample<f64>]) -> Result<(f64, Vec<bool>), NeuralError> {
    let mut loss = 0.0;
    let mut pattern = Vec::new();
    for s in batch {
        let cache = net.forward_cached(&s.input)?;
        loss += cache.output().iter().zip(&s.target).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / OUTPUTS as f64;
        pattern.extend(cache.activation_pattern());
    }
    Ok((loss / batch.len() as f64, pattern))
}

/// Compares the analytic gradient of the mean batch loss against central
/// differences with step `h`. Visits entries of each tensor in a seeded
/// random order until `max_entries` have been checked (all entries when
/// `None`). When the `+h` and `-h` probes activate different ReLU units the
/// loss is not differentiable between them and the quotient measures the
/// kink, not the gradient; the step is then cut tenfold, up to
/// [`MAX_STEP_CUTS`] times, before the entry is skipped.
pub fn check_gradients(
    net: &PolicyNet<f64>,
    batch: &[&Sample<f64>],
    h: f64,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<Vec<TensorCheck>, NeuralError> {
    let mut grads = net.zero_grads();
    batch_gradients(net, batch, &mut grads)?;
    let mut work = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(grads.len());
    for (t, grad) in grads.iter().enumerate() {
        let mut order: Vec<usize> = (0..grad.len()).collect();
        order.shuffle(&mut rng);
        let want = max_entries.unwrap_or(order.len());
        let (mut entries, mut reduced, mut skipped) = (0, 0, 0);
        let (mut diff, mut analytic, mut numeric) = (0.0, 0.0, 0.0);
        for i in order {
            if entries == want {
                break;
            }
            let orig = work.params()[t].data()[i];
            let mut quotient = None;
            for cut in 0..=MAX_STEP_CUTS {
                let step = h / 10f64.powi(cut as i32);
                work.params_mut()[t].data_mut()[i] = orig + step;
                let (up, up_pattern) = probe(&work, batch)?;
                work.params_mut()[t].data_mut()[i] = orig - step;
                let (down, down_pattern) = probe(&work, batch)?;
                if up_pattern == down_pattern {
                    quotient = Some((up - down) / (2.0 * step));
                    reduced += (cut > 0) as usize;
                    break;
                }
            }
            work.params_mut()[t].data_mut()[i] = orig;
            let Some(n) = quotient else {
                skipped += 1;
                continue;
            };
            let a = grad.data()[i];
            diff += (a - n) * (a - n);
            analytic += a * a;
            numeric += n * n;
            entries += 1;
        }
        let scale = analytic.sqrt().max(numeric.sqrt());
        let relative_error = if scale == 0.0 { 0.0 } else { diff.sqrt() / scale };
        out.push(TensorCheck { name: net.names()[t].clone(), entries, reduced, skipped, relative_error });
    }
    Ok(out)
}
