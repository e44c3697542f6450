//! Per-camera debounce state machine.

use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Outcome of feeding one frame result into a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub stable: bool,
    pub reset: bool,
    pub consecutive_count: usize,
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub session_id: String,
    /// Class of the current run of above-threshold frames.
    pub last_class: Option<usize>,
    pub consecutive_count: usize,
    /// Class most recently declared stable, until the run breaks.
    pub stable_class: Option<usize>,
    pub frames: u64,
    pub last_seen: Instant,
}

impl SessionState {
    pub fn new(session_id: &str) -> Self {
        Self {
            session_id: session_id.into(),
            last_class: None,
            consecutive_count: 0,
            stable_class: None,
            frames: 0,
            last_seen: Instant::now(),
        }
    }

    /// Advances the state with one result. `class` is `None` when the
    /// frame's confidence fell below the threshold.
    ///
    /// - below threshold: the run ends; `reset` iff a class was stable.
    /// - same class as the run: the count grows.
    /// - different class: the count restarts at 1 and `reset` is set.
    ///
    /// `stable` holds once the run reaches `stability_k` frames.
    pub fn observe(&mut self, class: Option<usize>, stability_k: usize) -> Transition {
        self.frames += 1;
        self.last_seen = Instant::now();
        let Some(c) = class else {
            let reset = self.stable_class.is_some();
            self.last_class = None;
            self.consecutive_count = 0;
            self.stable_class = None;
            return Transition {
                stable: false,
                reset,
                consecutive_count: 0,
            };
        };
        let reset = match self.last_class {
            Some(prev) if prev == c => {
                self.consecutive_count += 1;
                false
            }
            prev => {
                self.consecutive_count = 1;
                self.stable_class = None;
                prev.is_some()
            }
        };
        self.last_class = Some(c);
        let stable = self.consecutive_count >= stability_k;
        if stable {
            self.stable_class = Some(c);
        }
        Transition {
            stable,
            reset,
            consecutive_count: self.consecutive_count,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_frames_make_stable() {
        let mut s = SessionState::new("cam");
        assert!(!s.observe(Some(1), 2).stable);
        assert!(s.observe(Some(1), 2).stable);
    }

    #[test]
    fn low_confidence_after_stable_resets() {
        let mut s = SessionState::new("cam");
        s.observe(Some(0), 2);
        s.observe(Some(0), 2);
        let t = s.observe(None, 2);
        assert_eq!((t.stable, t.reset), (false, true));
        // nothing was stable any more
        assert!(!s.observe(None, 2).reset);
    }

    #[test]
    fn class_change_restarts_count() {
        let mut s = SessionState::new("cam");
        s.observe(Some(0), 2);
        s.observe(Some(0), 2);
        let t = s.observe(Some(2), 2);
        assert_eq!(
            t,
            Transition {
                stable: false,
                reset: true,
                consecutive_count: 1
            }
        );
    }
}
