use serde::{Deserialize, Serialize};

/// Patience-based early stopping. Only strict improvements reset the counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_dev_metric: Option<f64>,
    pub best_step: usize,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    pub higher_is_better: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopState {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        EarlyStopState {
            best_dev_metric: None,
            best_step: 0,
            epochs_since_improvement: 0,
            patience,
            higher_is_better,
        }
    }

    /// Records one evaluation; `stop` is set once more than `patience`
    /// consecutive evaluations failed to improve.
    pub fn update(&mut self, dev_metric: f64, step: usize) -> StopDecision {
        let improved = match self.best_dev_metric {
            None => true,
            Some(best) if self.higher_is_better => dev_metric > best,
            Some(best) => dev_metric < best,
        };
        if improved {
            self.best_dev_metric = Some(dev_metric);
            self.best_step = step;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        StopDecision {
            improved,
            stop: self.epochs_since_improvement > self.patience,
        }
    }
}

/// Functional form of [`EarlyStopState::update`].
pub fn early_stop_update(mut s: EarlyStopState, dev_metric: f64, step: usize) -> (EarlyStopState, bool) {
    let stop = s.update(dev_metric, step).stop;
    (s, stop)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_metrics_keep_going() {
        let s = EarlyStopState::new(7, true);
        let (s, stop) = early_stop_update(s, 0.5, 1);
        assert!(!stop);
        let (s, stop) = early_stop_update(s, 0.6, 2);
        assert!(!stop);
        assert_eq!(s.epochs_since_improvement, 0);
        assert_eq!(s.best_step, 2);
    }

    #[test]
    fn stops_after_patience_plus_one_flat_epochs() {
        let mut s = EarlyStopState::new(7, true);
        s.update(0.9, 0);
        for epoch in 1..=7 {
            assert!(!s.update(0.8, epoch).stop, "epoch {epoch}");
        }
        assert!(s.update(0.8, 8).stop);
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let mut s = EarlyStopState::new(1, true);
        s.update(0.5, 0);
        let d = s.update(0.5, 1);
        assert!(!d.improved);
        assert_eq!(s.epochs_since_improvement, 1);
        assert_eq!(s.best_step, 0);
    }

    #[test]
    fn lower_is_better_mode() {
        let mut s = EarlyStopState::new(0, false);
        s.update(3.0, 0);
        assert!(s.update(2.0, 1).improved);
        assert!(s.update(2.5, 2).stop);
    }
}
