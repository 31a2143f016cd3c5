//! Thread-local FLOP tally for instrumented forwards.
//!
//! Convention: one multiply-accumulate = 1 FLOP, counted for conv, linear,
//! transposed conv, and the selective scan. Normalizations, activations,
//! elementwise arithmetic, and bias adds are excluded, matching the
//! convention of the usual model-profiling tools.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Run `f` with FLOP counting enabled; returns its result and the tally.
pub fn counted<R>(f: impl FnOnce() -> R) -> (R, u64) {
    struct Guard(Option<u64>);
    impl Drop for Guard {
        fn drop(&mut self) {
            COUNTER.with(|c| c.set(self.0));
        }
    }
    let prev = COUNTER.with(|c| c.replace(Some(0)));
    let guard = Guard(prev);
    let out = f();
    let total = COUNTER.with(|c| c.get()).unwrap_or(0);
    drop(guard);
    (out, total)
}

#[inline]
pub(crate) fn add(n: u64) {
    COUNTER.with(|c| {
        if let Some(cur) = c.get() {
            c.set(Some(cur + n));
        }
    });
}

#[cfg(test)]
mod tests {
    #[test]
    fn counter_scopes_and_restores() {
        let ((), outer) = super::counted(|| {
            super::add(5);
            let ((), inner) = super::counted(|| super::add(7));
            assert_eq!(inner, 7);
            super::add(1);
        });
        // Inner scope replaces the tally; outer only sees its own adds.
        assert_eq!(outer, 6);
    }

    #[test]
    fn add_without_scope_is_noop() {
        super::add(123); // must not panic or leak into later scopes
        let ((), n) = super::counted(|| {});
        assert_eq!(n, 0);
    }
}
