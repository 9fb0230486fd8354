use crate::{GradError, Tape, Tensor};

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares the tape's reverse-mode gradient at `point` with central
/// differences of step `step`, over every entry of every tracked input.
///
/// Returns `max |analytic - numeric| / (|analytic| + step)`.
pub fn finite_diff_check(tape: &mut Tape, point: &[Tensor], step: f64) -> Result<f64, GradError> {
    tape.forward(point.iter().cloned())?;
    let grads = tape.backward(1.0)?.into_slots();

    let mut worst = 0.0_f64;
    let mut inputs: Vec<Tensor> = point.to_vec();
    for (slot, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for j in 0..inputs[slot].len() {
            let orig = inputs[slot].data()[j];
            inputs[slot].data_mut()[j] = orig + step;
            let up = tape.forward(inputs.iter().cloned())?.item();
            inputs[slot].data_mut()[j] = orig - step;
            let down = tape.forward(inputs.iter().cloned())?.item();
            inputs[slot].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grad.data()[j];
            worst = worst.max((analytic - numeric).abs() / (analytic.abs() + step));
        }
    }
    // Leave the tape evaluated at the original point.
    tape.forward(point.iter().cloned())?;
    Ok(worst)
}

/// False when central differences of steps `step` and `step / 4` disagree
/// somewhere, which happens when a kink (e.g. of `relu`) lies within `step`
/// of `point`. Finite-difference checks are meaningless at such points.
pub fn is_smooth_at(tape: &mut Tape, point: &[Tensor], step: f64) -> Result<bool, GradError> {
    tape.forward(point.iter().cloned())?;
    let tracked: Vec<bool> = tape.backward(1.0)?.into_slots().iter().map(Option::is_some).collect();
    let mut inputs: Vec<Tensor> = point.to_vec();
    let mut smooth = true;
    'outer: for (slot, &t) in tracked.iter().enumerate() {
        if !t {
            continue;
        }
        for j in 0..inputs[slot].len() {
            let orig = inputs[slot].data()[j];
            let mut diff = |h: f64| -> Result<f64, GradError> {
                inputs[slot].data_mut()[j] = orig + h;
                let up = tape.forward(inputs.iter().cloned())?.item();
                inputs[slot].data_mut()[j] = orig - h;
                let down = tape.forward(inputs.iter().cloned())?.item();
                inputs[slot].data_mut()[j] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let coarse = diff(step)?;
            let fine = diff(step / 4.0)?;
            if (coarse - fine).abs() > 1e-3 * (fine.abs() + step) {
                smooth = false;
                break 'outer;
            }
        }
    }
    tape.forward(point.iter().cloned())?;
    Ok(smooth)
}
