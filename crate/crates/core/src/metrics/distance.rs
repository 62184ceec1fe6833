//! Positional distance between false retrievals and the nearest gold chunk.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub const BUCKET_LABELS: [&str; 3] = ["1-10", "11-100", ">100"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBucket {
    pub label: String,
    pub count: usize,
    pub share_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceProfile {
    /// Count per exact distance.
    pub histogram: BTreeMap<usize, usize>,
    pub buckets: Vec<DistanceBucket>,
    pub false_retrievals: usize,
    /// Runs skipped for lacking gold chunks.
    pub skipped_runs: usize,
}

fn bucket_of(distance: usize) -> usize {
    match distance {
        0..=10 => 0,
        11..=100 => 1,
        _ => 2,
    }
}

/// Builds the profile over `(retrieved, gold)` pairs of chunk indices.
///
/// Each distinct retrieved chunk outside gold contributes its distance to the
/// nearest gold chunk.
pub fn chunk_distance_profile(runs: &[(Vec<usize>, Vec<usize>)]) -> DistanceProfile {
    let mut profile = DistanceProfile::default();
    for (retrieved, gold) in runs {
        let gold: BTreeSet<usize> = gold.iter().copied().collect();
        if gold.is_empty() {
            profile.skipped_runs += 1;
            continue;
        }
        let retrieved: BTreeSet<usize> = retrieved.iter().copied().collect();
        for r in retrieved.difference(&gold) {
            let below = gold.range(..=*r).next_back().map(|g| r - g);
            let above = gold.range(*r..).next().map(|g| g - r);
            let d = below.into_iter().chain(above).min().expect("gold is non-empty");
            *profile.histogram.entry(d).or_default() += 1;
            profile.false_retrievals += 1;
        }
    }
    let mut counts = [0usize; 3];
    for (&d, &n) in &profile.histogram {
        counts[bucket_of(d)] += n;
    }
    profile.buckets = BUCKET_LABELS
        .iter()
        .zip(counts)
        .map(|(label, count)| DistanceBucket {
            label: label.to_string(),
            count,
            share_pct: pct(count, profile.false_retrievals),
        })
        .collect();
    profile
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 * 100.0 / whole as f64
    }
}

impl DistanceProfile {
    /// `(distance, count, cumulative_pct)` rows in ascending distance.
    pub fn rows(&self) -> Vec<(usize, usize, f64)> {
        let mut running = 0;
        self.histogram
            .iter()
            .map(|(&d, &n)| {
                running += n;
                (d, n, pct(running, self.false_retrievals))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("distance,count,cumulative_pct\n");
        for (d, n, cum) in self.rows() {
            out.push_str(&format!("{d},{n},{cum:.4}\n"));
        }
        out
    }

    /// Share of false retrievals within `radius` chunks of gold.
    pub fn share_within(&self, radius: usize) -> f64 {
        let n: usize = self.histogram.range(..=radius).map(|(_, n)| n).sum();
        pct(n, self.false_retrievals)
    }

    pub fn summary(&self) -> String {
        if self.false_retrievals == 0 {
            return "no false retrievals".to_string();
        }
        let buckets: Vec<String> = self
            .buckets
            .iter()
            .map(|b| format!("{}: {} ({:.1}%)", b.label, b.count, b.share_pct))
            .collect();
        format!(
            "{} false retrievals; {}; within 10: {:.1}%, within 100: {:.1}%",
            self.false_retrievals,
            buckets.join(", "),
            self.share_within(10),
            self.share_within(100)
        )
    }
}
