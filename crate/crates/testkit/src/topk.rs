//! Exhaustive nearest-neighbor search.

/// Every row scored against `query`, fully sorted by score descending then id ascending,
/// truncated to `k`. Returns `(id, score)`.
pub fn brute_force_topk(ids: &[String], rows: &[Vec<f32>], query: &[f32], k: usize) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = ids
        .iter()
        .zip(rows)
        .map(|(id, row)| {
            let mut s = 0.0f64;
            for i in 0..row.len() {
                s += row[i] as f64 * query[i] as f64;
            }
            (id.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}
