use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Generalised advantage estimates for one sequence.
///
/// `values[t]` estimates `V(s_t)`, `bootstrap` estimates the state after the
/// last step. A terminal step cuts both the bootstrap and the accumulation.
/// Returns `(advantages, value_targets)` with `targets = advantages + values`.
pub fn gae_advantages<T: Real>(
    rewards: &[f64],
    values: &[T],
    bootstrap: T,
    terminals: &[bool],
    gamma: T,
    lambda: f64,
) -> Result<(Vec<T>, Vec<T>)> {
    let n = rewards.len();
    if values.len() != n || terminals.len() != n {
        return Err(Error::Shape(format!(
            "gae inputs disagree: {n} rewards, {} values, {} terminal flags",
            values.len(),
            terminals.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut adv = vec![T::zero(); n];
    let mut acc = T::zero();
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if terminals[t] { 0.0 } else { 1.0 };
        let delta = T::from_f64(rewards[t]) + (gamma * next_value).scale(live) - values[t];
        acc = delta + (gamma * acc).scale(lambda * live);
        adv[t] = acc;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(&a, &v)| a + v).collect();
    Ok((adv, targets))
}

/// [`gae_advantages`] over every sequence of a `B x T` batch laid out
/// sequence-major.
pub fn batch_gae<T: Real>(
    rewards: &[f64],
    terminals: &[bool],
    values: &[T],
    bootstrap: &[T],
    seq_len: usize,
    gamma: T,
    lambda: f64,
) -> Result<(Vec<T>, Vec<T>)> {
    let b = bootstrap.len();
    if seq_len == 0 || rewards.len() != b * seq_len {
        return Err(Error::Shape(format!(
            "{} rewards for {b} sequences of length {seq_len}",
            rewards.len()
        )));
    }
    let mut adv = Vec::with_capacity(rewards.len());
    let mut targets = Vec::with_capacity(rewards.len());
    for (i, &boot) in bootstrap.iter().enumerate() {
        let r = i * seq_len..(i + 1) * seq_len;
        let (a, g) = gae_advantages(
            &rewards[r.clone()],
            values.get(r.clone()).ok_or_else(|| Error::Shape("too few values".into()))?,
            boot,
            &terminals[r],
            gamma,
            lambda,
        )?;
        adv.extend(a);
        targets.extend(g);
    }
    Ok((adv, targets))
}
