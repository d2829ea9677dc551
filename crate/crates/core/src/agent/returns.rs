/// One step of a rollout as seen by the return computation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
    /// Critic value of the observation the action was taken in.
    pub value: f64,
    /// Critic value of the final observation of a truncated episode.
    pub truncation_value: f64,
}

/// n-step discounted returns and advantages for one environment's
/// sequence. Episodes are cut at `done`, bootstrapped from
/// `truncation_value` at `truncated`, and from `bootstrap` after the last
/// step.
pub fn compute_returns(steps: &[StepRecord], bootstrap: f64, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut returns = vec![0.0; steps.len()];
    let mut next = bootstrap;
    for (t, s) in steps.iter().enumerate().rev() {
        next = if s.done {
            s.reward
        } else if s.truncated {
            s.reward + gamma * s.truncation_value
        } else {
            s.reward + gamma * next
        };
        returns[t] = next;
    }
    let advantages = returns.iter().zip(steps).map(|(g, s)| g - s.value).collect();
    (returns, advantages)
}
