use super::train::TrainConfig;
use super::AlignError;

/// Learning rate at `step`: linear warmup over `ceil(warmup_ratio · total)`
/// steps to `max_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64, AlignError> {
    let total = cfg.total_steps;
    if step > total {
        return Err(AlignError::StepOutOfRange { step, total });
    }
    let warmup = cfg.warmup_steps();
    if step <= warmup {
        if warmup == 0 {
            return Ok(cfg.max_lr);
        }
        return Ok(cfg.max_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(cfg.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()).max(0.0))
}

/// First and second moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), AlignError> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(AlignError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moment entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(AlignError::NonFiniteGradient("adamw_step".into()));
    }
    let (b1, b2) = cfg.adam_betas;
    state.step += 1;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] *= 1.0 - lr * cfg.weight_decay;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: usize) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg(1000);
        assert_eq!(c.warmup_steps(), 30);
        assert_eq!(lr_schedule(30, &c).unwrap(), 5e-4);
        assert_eq!(lr_schedule(0, &c).unwrap(), 0.0);
        assert_eq!(lr_schedule(1000, &c).unwrap(), 0.0);
        assert!((lr_schedule(30 + 485, &c).unwrap() - 2.5e-4).abs() < 1e-15);
        assert!(matches!(
            lr_schedule(1001, &c),
            Err(AlignError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let c = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &c).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let c = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &[1.0], &mut s, 0.1, &c).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only_shrinks() {
        let c = TrainConfig::default();
        let mut p = vec![2.0];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &[0.0], &mut s, 0.1, &c).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        let c = TrainConfig::default();
        let mut s = AdamState::new(1);
        assert!(matches!(
            adamw_step(&mut [1.0], &[f64::NAN], &mut s, 0.1, &c),
            Err(AlignError::NonFiniteGradient(_))
        ));
        assert!(matches!(
            adamw_step(&mut [1.0, 2.0], &[0.0], &mut s, 0.1, &c),
            Err(AlignError::ShapeMismatch(_))
        ));
    }
}
