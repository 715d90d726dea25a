//! Callbacks invoked at fixed points of the training loop.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookKind {
    BeforeExperience,
    AfterEpoch,
    AfterExperience,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookEvent {
    pub kind: HookKind,
    pub experience: usize,
    /// Zero-based epoch for `after_epoch`; the number of epochs run for
    /// `after_experience`.
    pub epoch: Option<usize>,
    pub running_loss: Option<f64>,
}

pub trait TrainingHook {
    fn on_event(&mut self, event: &HookEvent);
}

/// Ignores every event.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl TrainingHook for NoHooks {
    fn on_event(&mut self, _event: &HookEvent) {}
}

/// Records every event in order.
#[derive(Debug, Default, Clone)]
pub struct EventLog(pub Vec<HookEvent>);

impl TrainingHook for EventLog {
    fn on_event(&mut self, event: &HookEvent) {
        self.0.push(event.clone());
    }
}

/// Adapts a closure.
pub struct FnHook<F>(pub F);

impl<F: FnMut(&HookEvent)> TrainingHook for FnHook<F> {
    fn on_event(&mut self, event: &HookEvent) {
        (self.0)(event)
    }
}

impl TrainingHook for Vec<Box<dyn TrainingHook + Send>> {
    fn on_event(&mut self, event: &HookEvent) {
        for hook in self.iter_mut() {
            hook.on_event(event);
        }
    }
}
