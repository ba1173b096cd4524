//! Order-preserving parallel map. With the `parallel` feature the work is
//! spread over the global rayon pool; results always come back in input order.

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Worker count requested through `AKL_THREADS`, if set to a positive integer.
pub fn requested_threads() -> Option<usize> {
    std::env::var("AKL_THREADS").ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

/// Caps the global pool at `AKL_THREADS`. Safe to call more than once; only
/// the first successful call has an effect.
#[cfg(feature = "parallel")]
pub fn init_from_env() {
    if let Some(n) = requested_threads() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn init_from_env() {}

#[cfg(test)]
mod tests {
    #[test]
    fn map_preserves_order() {
        let out = super::map((0..100).collect(), |x: i32| x * 2);
        assert_eq!(out, (0..100).map(|x| x * 2).collect::<Vec<_>>());
    }
}
