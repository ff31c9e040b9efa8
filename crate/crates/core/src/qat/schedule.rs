//! Reduce-on-plateau learning-rate schedule and early stopping, both driven by
//! a validation metric that should increase.

/// Multiplies the learning rate by `factor` once the metric has not improved
/// for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    lr: f64,
    best: f64,
    wait: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Plateau {
            factor,
            patience,
            lr,
            best: f64::NEG_INFINITY,
            wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's metric and returns the learning rate for the next epoch.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr *= self.factor;
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop after `patience` epochs without improvement and remembers
/// the best epoch so its weights can be restored.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Returns true if `metric` is a new best.
    pub fn improved(&self, metric: f64) -> bool {
        metric > self.best
    }

    /// Feeds epoch `epoch`'s metric; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.wait = 0;
            false
        } else {
            self.wait += 1;
            self.wait >= self.patience
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}
