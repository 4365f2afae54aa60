use crate::dataset::{ItemId, PAD};
use crate::error::{Error, Result};

/// 1-based rank of `target` among items `1..scores.len()` not in `exclude`,
/// ordered by descending score then ascending id.
pub fn rank_of(target: ItemId, scores: &[f64], exclude: &[ItemId]) -> Result<usize> {
    if target == PAD || target >= scores.len() {
        return Err(Error::data(format!("target {target} is outside the catalog")));
    }
    if exclude.contains(&target) {
        return Err(Error::data(format!("target {target} is excluded from ranking")));
    }
    let s = scores[target];
    let ahead = (1..scores.len())
        .filter(|&i| i != target && !exclude.contains(&i))
        .filter(|&i| scores[i] > s || (scores[i] == s && i < target))
        .count();
    Ok(ahead + 1)
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("k must be positive"));
    }
    Ok(())
}

pub fn recall_at_k(rank: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(if rank <= k { 1.0 / (1.0 + rank as f64).log2() } else { 0.0 })
}

/// Recall and NDCG at `k` for a target set given each target's rank.
/// Repeated targets count once. The ideal DCG places `min(k, |T|)` hits at
/// the top.
pub fn multi_target_at_k(ranks: &[(ItemId, usize)], k: usize) -> Result<(f64, f64)> {
    check_k(k)?;
    let mut seen: Vec<(ItemId, usize)> = Vec::with_capacity(ranks.len());
    for &(item, rank) in ranks {
        if !seen.iter().any(|&(i, _)| i == item) {
            seen.push((item, rank));
        }
    }
    if seen.is_empty() {
        return Err(Error::data("no targets to evaluate"));
    }
    let gain = |r: usize| 1.0 / (1.0 + r as f64).log2();
    let hits: Vec<usize> = seen.iter().map(|&(_, r)| r).filter(|&r| r <= k).collect();
    let dcg: f64 = hits.iter().map(|&r| gain(r)).sum();
    let ideal: f64 = (1..=k.min(seen.len())).map(gain).sum();
    Ok((hits.len() as f64 / seen.len() as f64, dcg / ideal))
}

/// Area under the ROC curve of `scores` separating `positive` from the rest,
/// with tied scores counted as half. `None` if either class is empty.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Sum of midranks of the positives (Mann-Whitney U).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&t| positive[t]).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}
