use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Catalog, Interaction, InteractionSequence};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub users_before: usize,
    pub items_before: usize,
    pub interactions_before: usize,
    pub removed_users: usize,
    pub removed_items: usize,
    pub removed_interactions: usize,
    /// Passes over the log until nothing changed.
    pub rounds: usize,
}

fn distinct<F: Fn(&Interaction) -> u64>(rows: &[Interaction], key: F) -> usize {
    let mut v: Vec<u64> = rows.iter().map(key).collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Repeatedly drops users and items with fewer than `min_count` interactions
/// until every survivor meets the threshold.
pub fn filter_min_count(interactions: Vec<Interaction>, min_count: usize) -> (Vec<Interaction>, FilterStats) {
    let mut stats = FilterStats {
        users_before: distinct(&interactions, |i| i.user_id),
        items_before: distinct(&interactions, |i| i.item_id),
        interactions_before: interactions.len(),
        ..Default::default()
    };
    let mut rows = interactions;
    loop {
        stats.rounds += 1;
        let mut users: HashMap<u64, usize> = HashMap::new();
        let mut items: HashMap<u64, usize> = HashMap::new();
        for r in &rows {
            *users.entry(r.user_id).or_default() += 1;
            *items.entry(r.item_id).or_default() += 1;
        }
        let before = rows.len();
        rows.retain(|r| users[&r.user_id] >= min_count && items[&r.item_id] >= min_count);
        if rows.len() == before {
            break;
        }
    }
    stats.removed_users = stats.users_before - distinct(&rows, |i| i.user_id);
    stats.removed_items = stats.items_before - distinct(&rows, |i| i.item_id);
    stats.removed_interactions = stats.interactions_before - rows.len();
    (rows, stats)
}

/// Groups rows per user (ascending user id), sorts each history by timestamp
/// keeping input order for ties, and remaps item ids through `catalog`.
pub fn build_sequences(interactions: &[Interaction], catalog: &Catalog) -> Vec<InteractionSequence> {
    let lookup = catalog.lookup();
    let mut per_user: BTreeMap<u64, Vec<&Interaction>> = BTreeMap::new();
    for r in interactions {
        per_user.entry(r.user_id).or_default().push(r);
    }
    per_user
        .into_iter()
        .map(|(user_id, mut rows)| {
            rows.sort_by_key(|r| r.timestamp);
            let labeled = rows.iter().any(|r| r.behavior.is_some());
            InteractionSequence {
                user_id,
                items: rows.iter().map(|r| lookup[&r.item_id]).collect(),
                timestamps: rows.iter().map(|r| r.timestamp).collect(),
                behaviors: labeled.then(|| {
                    rows.iter()
                        .map(|r| r.behavior.clone().unwrap_or_else(|| "unknown".into()))
                        .collect()
                }),
            }
        })
        .collect()
}
