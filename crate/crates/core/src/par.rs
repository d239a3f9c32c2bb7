//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool.
//! Without it, or after [`set_sequential`]`(true)`, every helper runs on the
//! calling thread. Results never depend on the mode: each output element is
//! computed by the same code in the same order, so the two paths are bitwise
//! identical.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Minimum number of inner-loop operations before a kernel fans out.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Force the sequential path at runtime (used by benches and tests).
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Configure the global pool size. Only the first call has any effect.
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Order-preserving map over `0..n`.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Visit `data` in rows of `row_len`, handing each row and its index to `f`.
/// `work_per_row` is an estimate of the inner-loop cost used to decide
/// whether fanning out is worth it.
pub fn rows_mut<F>(data: &mut [f64], row_len: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let rows = data.len() / row_len;
        if is_parallel() && rows > 1 && rows.saturating_mul(work_per_row) >= MIN_PARALLEL_WORK {
            use rayon::prelude::*;
            data.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work_per_row;
    for (i, row) in data.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn rows_visit_every_row() {
        let mut d = vec![0.0; 12];
        rows_mut(&mut d, 3, 1 << 20, |i, row| row.iter_mut().for_each(|x| *x = i as f64));
        assert_eq!(d, vec![0., 0., 0., 1., 1., 1., 2., 2., 2., 3., 3., 3.]);
    }
}
