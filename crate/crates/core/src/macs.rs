//! Runtime multiply-accumulate census.
//!
//! Ops report their MAC count at the call site; [`measure`] collects the
//! total for one closure on the current thread. Used to cross-check the
//! analytic counter in `net::count`.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn add(n: u64) {
    COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

/// Runs `f` and returns its result with the MACs its ops reported.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let n = COUNTER.with(|c| c.replace(prev)).unwrap_or(0);
    if let Some(p) = prev {
        COUNTER.with(|c| c.set(Some(p + n)));
    }
    (out, n)
}
