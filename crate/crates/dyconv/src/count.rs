//! Instrumented multiply-accumulate tally.
//!
//! The cost model in [`crate::cost`] is analytic; this module counts what a
//! forward pass actually executes so the two can be compared exactly. Ops
//! count one unit per multiply-accumulate performed in their inner loops
//! (convolutions include padded taps because the loops really do multiply by
//! the zero they read there). Bias additions, batch norm, activations and
//! softmax are free, matching the accounting conventions of the analytic
//! model. Global average pooling is free too, except inside an attention
//! scope, where it is part of the priced attention branch.

use std::cell::RefCell;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CostKind {
    Conv,
    Attention,
    Aggregation,
}

#[derive(Clone, Copy, Default, Debug, PartialEq, Eq)]
pub struct Tally {
    pub conv: u64,
    pub attention: u64,
    pub aggregation: u64,
}

impl Tally {
    pub fn total(&self) -> u64 {
        self.conv + self.attention + self.aggregation
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<Tally>> = const { RefCell::new(None) };
    static SCOPE: RefCell<Vec<CostKind>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` with tallying enabled on this thread and returns its result
/// together with the multiply-accumulates the enclosed ops recorded.
pub fn with_tally<R>(f: impl FnOnce() -> R) -> (R, Tally) {
    ACTIVE.with(|a| *a.borrow_mut() = Some(Tally::default()));
    let r = f();
    let t = ACTIVE.with(|a| a.borrow_mut().take()).unwrap_or_default();
    (r, t)
}

/// Re-buckets everything recorded inside `f` into `kind`. The attention
/// branch wraps its pooling and FC calls in `scoped(CostKind::Attention, ..)`
/// so their cost lands in the attention column rather than the conv column.
pub fn scoped<R>(kind: CostKind, f: impl FnOnce() -> R) -> R {
    SCOPE.with(|s| s.borrow_mut().push(kind));
    let r = f();
    SCOPE.with(|s| {
        s.borrow_mut().pop();
    });
    r
}

fn current_scope() -> Option<CostKind> {
    SCOPE.with(|s| s.borrow().last().copied())
}

pub(crate) fn record(default_kind: CostKind, macs: u64) {
    ACTIVE.with(|a| {
        if let Some(t) = a.borrow_mut().as_mut() {
            match current_scope().unwrap_or(default_kind) {
                CostKind::Conv => t.conv += macs,
                CostKind::Attention => t.attention += macs,
                CostKind::Aggregation => t.aggregation += macs,
            }
        }
    });
}

/// Pooling records only when an attention scope has made it part of the
/// priced branch; a classifier-head pool stays free.
pub(crate) fn record_pool(macs: u64) {
    if current_scope() == Some(CostKind::Attention) {
        record(CostKind::Attention, macs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tally_captures_only_inside_window() {
        record(CostKind::Conv, 5); // no tally installed: dropped
        let ((), t) = with_tally(|| {
            record(CostKind::Conv, 7);
            record(CostKind::Aggregation, 3);
        });
        assert_eq!(t.conv, 7);
        assert_eq!(t.aggregation, 3);
        assert_eq!(t.total(), 10);
    }

    #[test]
    fn scope_rebuckets_and_gates_pooling() {
        let ((), t) = with_tally(|| {
            record_pool(100); // outside attention: free
            scoped(CostKind::Attention, || {
                record_pool(11);
                record(CostKind::Conv, 4); // FC inside the branch
            });
        });
        assert_eq!(t.attention, 15);
        assert_eq!(t.conv, 0);
    }
}
