#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stop once validation loss has not strictly improved for `patience`
/// consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping {
            patience: patience.max(1),
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some((_, b)) => loss < b,
        };
        if improved {
            self.best = Some((epoch, loss));
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision {
            improved,
            stop: self.bad_epochs >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_one_stops_on_first_flat_epoch() {
        // improving through epoch 3, flat from then on
        let losses = [4.0, 3.0, 2.0, 1.0, 1.0, 1.0, 1.0];
        let mut es = EarlyStopping::new(1);
        let stop = losses
            .iter()
            .enumerate()
            .find(|(e, l)| es.observe(*e, **l).stop)
            .map(|(e, _)| e);
        assert_eq!(stop, Some(4));
        assert_eq!(es.best(), Some((3, 1.0)));
    }

    #[test]
    fn patience_counts_consecutive_bad_epochs() {
        let mut es = EarlyStopping::new(3);
        assert!(!es.observe(0, 1.0).stop);
        assert!(!es.observe(1, 1.5).stop);
        assert!(!es.observe(2, 1.2).stop);
        assert!(es.observe(3, 0.9).improved);
        assert!(!es.observe(4, 1.0).stop);
        assert!(!es.observe(5, 1.0).stop);
        assert!(es.observe(6, 1.0).stop);
    }
}
