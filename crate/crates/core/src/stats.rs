//! Moments shared by corpus statistics and empathy aggregation.
//!
//! Standard deviations everywhere in this crate are the population form
//! (divide by `n`, not `n - 1`).

/// Mean and population standard deviation, or `None` for an empty sample.
pub fn mean_std<I>(values: I) -> Option<(f64, f64)>
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: Clone,
{
    let iter = values.into_iter();
    let (n, sum) = iter.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    let var = iter.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Some((mean, var.sqrt()))
}
