//! Finite-difference verification of the analytic gradients.

use rand::seq::index::sample;

use super::Model;
use crate::buffer::ImageBuffer;
use crate::error::Result;
use crate::nn::HasParams;
use crate::rng::Rng;

/// Relative error of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGradError {
    pub name: String,
    pub checked: usize,
    /// `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)` over the
    /// checked coordinates (Euclidean norms).
    pub relative_error: f64,
}

/// Compares backpropagated gradients of the training loss with central
/// differences. Tensors with more than `max_coords` entries are checked on a
/// random subset of coordinates.
pub fn check_gradients(
    model: &mut Model<f64>,
    images: &[&ImageBuffer],
    labels: &[usize],
    step: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<Vec<TensorGradError>> {
    model.compute_gradients(images, labels)?;
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let mut report = Vec::new();
    for (t, grads) in analytic.iter().enumerate() {
        let (name, len) = {
            let p = &model.params()[t];
            (p.name.clone(), p.len())
        };
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            let mut c = sample(rng, len, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &coords {
            let original = model.params()[t].value[i];
            model.params_mut()[t].value[i] = original + step;
            let plus = model.loss(images, labels)?.loss;
            model.params_mut()[t].value[i] = original - step;
            let minus = model.loss(images, labels)?.loss;
            model.params_mut()[t].value[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            diff += (grads[i] - numeric).powi(2);
            na += grads[i].powi(2);
            nn += numeric.powi(2);
        }
        let scale = na.sqrt().max(nn.sqrt());
        let relative_error = if scale == 0.0 {
            0.0
        } else {
            diff.sqrt() / scale
        };
        report.push(TensorGradError {
            name,
            checked: coords.len(),
            relative_error,
        });
    }
    Ok(report)
}
