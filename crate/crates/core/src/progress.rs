use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inversion,
    NullOptimization,
    Masking,
    Synthesis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Phase,
    /// Steps completed within the phase.
    pub step: usize,
    pub total: usize,
}

/// Progress observer. Returning `false` requests cancellation; the pipeline
/// stops at the next step boundary with [`Error::Cancelled`].
pub type ProgressFn<'a> = &'a mut dyn FnMut(Progress) -> bool;

pub(crate) fn report(progress: &mut Option<ProgressFn<'_>>, phase: Phase, step: usize, total: usize) -> Result<()> {
    if let Some(cb) = progress.as_deref_mut() {
        if !cb(Progress { phase, step, total }) {
            return Err(Error::Cancelled(step));
        }
    }
    Ok(())
}

/// Short-lived reborrow of an optional observer, for handing it to a
/// sub-phase while keeping it for later phases.
pub fn reborrow<'b>(progress: &'b mut Option<ProgressFn<'_>>) -> Option<ProgressFn<'b>> {
    match progress {
        Some(cb) => Some(&mut **cb),
        None => None,
    }
}
