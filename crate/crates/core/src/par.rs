//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the chunked maps run on the rayon
//! pool; without it, or with [`Execution::Sequential`], they run in order on
//! the calling thread. Reductions always combine chunk results with the same
//! fixed pairwise tree, so floating-point results are bit-identical across
//! execution modes and worker counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of items folded sequentially into one partial result.
pub const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Applies `f` to every index in `0..n`, preserving order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Folds `items` chunk-wise with `fold` (starting from `init()` per chunk),
/// then combines the chunk partials with a fixed pairwise tree.
pub fn chunked_tree_reduce<I, A, Init, Fold, Comb>(
    exec: Execution,
    items: &[I],
    init: Init,
    fold: Fold,
    combine: Comb,
) -> Option<A>
where
    I: Sync,
    A: Send,
    Init: Fn() -> A + Sync + Send,
    Fold: Fn(&mut A, usize, &I) + Sync + Send,
    Comb: Fn(A, A) -> A,
{
    if items.is_empty() {
        return None;
    }
    let n_chunks = items.len().div_ceil(CHUNK);
    let partials = map_indexed(exec, n_chunks, |c| {
        let start = c * CHUNK;
        let end = (start + CHUNK).min(items.len());
        let mut acc = init();
        for (i, item) in items[start..end].iter().enumerate() {
            fold(&mut acc, start + i, item);
        }
        acc
    });
    Some(tree_combine(partials, combine))
}

/// Pairwise tree: `((p0 ⊕ p1) ⊕ (p2 ⊕ p3)) ⊕ ...`, level by level.
pub fn tree_combine<A>(mut level: Vec<A>, combine: impl Fn(A, A) -> A) -> A {
    assert!(!level.is_empty(), "tree_combine of nothing");
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        level = next;
    }
    level.pop().expect("non-empty")
}

/// Deterministic max over a slice using the same chunk layout.
pub fn max_by_tree<I, F>(exec: Execution, items: &[I], value: F) -> Option<f64>
where
    I: Sync,
    F: Fn(usize, &I) -> f64 + Sync + Send,
{
    chunked_tree_reduce(
        exec,
        items,
        || f64::NEG_INFINITY,
        |acc, i, item| *acc = acc.max(value(i, item)),
        f64::max,
    )
}
