//! Deterministic chunked parallel reduction.
//!
//! Work items are split into fixed-size chunks in index order. Chunks are
//! folded in parallel and the partial results merged sequentially in chunk
//! order, so the result does not depend on the number of worker threads.

use rayon::prelude::*;

/// Number of items folded sequentially inside one chunk.
pub const CHUNK: usize = 256;

pub fn fold_indexed<A, E, I, F, M>(n: usize, identity: I, fold: F, merge: M) -> Result<A, E>
where
    A: Send,
    E: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) -> Result<(), E> + Sync,
    M: Fn(&mut A, A),
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<Result<A, E>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = identity();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                fold(&mut acc, i)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = identity();
    for p in partials {
        merge(&mut total, p?);
    }
    Ok(total)
}

/// Ordered parallel map over `0..n`.
pub fn map_indexed<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_sum_independent_of_pool_size() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                fold_indexed::<f64, (), _, _, _>(
                    10_000,
                    || 0.0,
                    |acc, i| {
                        *acc += (i as f64).sqrt().sin();
                        Ok(())
                    },
                    |a, b| *a += b,
                )
                .unwrap()
            })
        };
        let one = run(1);
        assert_eq!(one.to_bits(), run(3).to_bits());
        assert_eq!(one.to_bits(), run(8).to_bits());
    }
}
