//! Data-parallel helpers. Scenarios are independent, so batch work maps over
//! them with rayon when the `parallel` feature is on; results are collected in
//! input order, keeping reductions bitwise deterministic regardless of thread
//! count. The sequential path is the fallback without the feature or with
//! `threads = 1`.

/// Map `f` over `items`, preserving order.
pub fn map_ordered<T: Sync, U: Send>(parallel: bool, items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        if parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    items.iter().map(f).collect()
}
