use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("total steps must be positive")]
    ZeroTotal,
    #[error("step {step} beyond total {total}")]
    StepBeyondTotal { step: usize, total: usize },
    #[error("base learning rate must be positive and finite, got {0}")]
    BadMu0(f64),
}

/// Annealed SGD learning rate `mu0 / (1 + 10 p)^0.75` where
/// `p = step / total_steps`. `step == total_steps` (p = 1) is allowed.
pub fn lr_schedule(step: usize, total_steps: usize, mu0: f64) -> Result<f64, ScheduleError> {
    if total_steps == 0 {
        return Err(ScheduleError::ZeroTotal);
    }
    if step > total_steps {
        return Err(ScheduleError::StepBeyondTotal {
            step,
            total: total_steps,
        });
    }
    if !mu0.is_finite() || mu0 <= 0.0 {
        return Err(ScheduleError::BadMu0(mu0));
    }
    let p = step as f64 / total_steps as f64;
    Ok(mu0 / (1.0 + 10.0 * p).powf(0.75))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_at_mu0() {
        assert_eq!(lr_schedule(0, 100, 0.01).unwrap(), 0.01);
    }

    #[test]
    fn endpoint_value() {
        let mu = lr_schedule(100, 100, 1e-4).unwrap();
        let expect = 1.655600260761702e-05;
        assert!((mu - expect).abs() / expect < 1e-6, "mu {mu}");
    }

    #[test]
    fn monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=1000 {
            let mu = lr_schedule(step, 1000, 0.02).unwrap();
            assert!(mu <= prev, "step {step}: {mu} > {prev}");
            assert!(mu > 0.0);
            prev = mu;
        }
    }

    #[test]
    fn bad_arguments_error() {
        assert_eq!(lr_schedule(0, 0, 0.01), Err(ScheduleError::ZeroTotal));
        assert_eq!(
            lr_schedule(11, 10, 0.01),
            Err(ScheduleError::StepBeyondTotal { step: 11, total: 10 })
        );
        assert_eq!(lr_schedule(0, 10, 0.0), Err(ScheduleError::BadMu0(0.0)));
        assert_eq!(lr_schedule(0, 10, -0.1), Err(ScheduleError::BadMu0(-0.1)));
    }
}
