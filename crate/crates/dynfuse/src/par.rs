//! Order-preserving map over independent work items, parallel when the
//! `parallel` feature (default) is on, sequential otherwise.
//!
//! Every experiment cell owns its model, datasets, and RNG, so results
//! are bitwise-identical whichever backend runs them — the feature flag
//! and the `jobs` limit trade wall time only.

/// Map `f` over `items`, preserving order. `jobs` caps worker threads:
/// `0` uses the backend default, `1` forces in-place sequential
/// execution, anything else builds a pool of that size. Without the
/// `parallel` feature every value of `jobs` runs sequentially.
#[cfg(feature = "parallel")]
pub fn map_cells<T, R, F>(items: Vec<T>, jobs: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match jobs {
        1 => items.into_iter().map(f).collect(),
        0 => items.into_par_iter().map(f).collect(),
        n => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build();
            match pool {
                Ok(pool) => pool.install(|| items.into_par_iter().map(f).collect()),
                // A pool can fail to spawn under resource limits; the
                // work itself must still happen.
                Err(_) => items.into_iter().map(f).collect(),
            }
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_cells<T, R, F>(items: Vec<T>, _jobs: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_input_order_at_every_jobs_setting() {
        let items: Vec<u64> = (0..64).collect();
        for jobs in [0, 1, 2, 8] {
            let out = map_cells(items.clone(), jobs, |x| x * x);
            let want: Vec<u64> = items.iter().map(|x| x * x).collect();
            assert_eq!(out, want, "jobs={jobs}");
        }
    }

    #[test]
    fn parallel_and_sequential_agree_on_stateful_work() {
        // Each cell seeds its own generator from the item, the way
        // experiment cells do, so scheduling cannot leak between them.
        use rand::{Rng, SeedableRng};
        let run = |jobs| {
            map_cells((0..16u64).collect::<Vec<_>>(), jobs, |seed| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                (0..100).map(|_| rng.gen::<f64>()).sum::<f64>()
            })
        };
        let seq = run(1);
        let par = run(0);
        assert!(seq.iter().zip(&par).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
