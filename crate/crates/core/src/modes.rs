//! Semantic operating modes and the nearest-signature labeling of mixture
//! components.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::mixture::MixtureModel;

/// Turbine operating modes, in declaration order (also the tie-break order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModeLabel {
    #[serde(rename = "Idling")]
    Idling,
    #[serde(rename = "Start")]
    Start,
    #[serde(rename = "Grid Connecting")]
    GridConnecting,
    #[serde(rename = "Sub-Rated Prod")]
    SubRatedProduction,
    #[serde(rename = "Pitch Managed")]
    PitchManaged,
    #[serde(rename = "Rated Production")]
    RatedProduction,
}

impl ModeLabel {
    pub const ALL: [ModeLabel; 6] = [
        ModeLabel::Idling,
        ModeLabel::Start,
        ModeLabel::GridConnecting,
        ModeLabel::SubRatedProduction,
        ModeLabel::PitchManaged,
        ModeLabel::RatedProduction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModeLabel::Idling => "Idling",
            ModeLabel::Start => "Start",
            ModeLabel::GridConnecting => "Grid Connecting",
            ModeLabel::SubRatedProduction => "Sub-Rated Prod",
            ModeLabel::PitchManaged => "Pitch Managed",
            ModeLabel::RatedProduction => "Rated Production",
        }
    }

    /// File-name friendly spelling, e.g. `sub-rated-prod`.
    pub fn slug(self) -> String {
        self.as_str().to_ascii_lowercase().replace(' ', "-")
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModeLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModeLabel::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.slug() == s)
            .ok_or_else(|| format!("unknown operating mode '{s}'"))
    }
}

/// Mean operating point of a mode in original units, ordered
/// (wind m/s, rotor rpm, pitch deg, power kW).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSignature {
    pub label: ModeLabel,
    pub centroid: [f64; 4],
}

/// Reference mode means of a 2 MW turbine (T01, 2016).
pub fn canonical_signatures() -> Vec<ModeSignature> {
    use ModeLabel::*;
    [
        (Idling, [2.1, 0.8, 23.9, -5.7]),
        (Start, [3.4, 7.1, 11.0, 11.3]),
        (GridConnecting, [5.1, 11.5, -1.1, 223.8]),
        (SubRatedProduction, [8.1, 13.9, -1.9, 923.0]),
        (PitchManaged, [8.6, 2.5, 65.6, 84.7]),
        (RatedProduction, [12.6, 14.8, 4.1, 1870.1]),
    ]
    .into_iter()
    .map(|(label, centroid)| ModeSignature { label, centroid })
    .collect()
}

/// Mixture model together with a label for each component.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledModel {
    pub mixture: MixtureModel,
    pub mapping: Vec<ModeLabel>,
    pub match_cost: f64,
}

impl LabeledModel {
    pub fn label_of(&self, cluster: usize) -> ModeLabel {
        self.mapping[cluster]
    }

    /// Distinct labels in declaration order.
    pub fn labels(&self) -> Vec<ModeLabel> {
        let mut v = self.mapping.clone();
        v.sort();
        v.dedup();
        v
    }
}

/// Reorders a raw mixture mean (power, wind, rotor, pitch) into signature order.
pub fn to_signature_order(raw: &[f64; 4]) -> [f64; 4] {
    [raw[1], raw[2], raw[3], raw[0]]
}

/// Cost matrix `cost[cluster][signature]`: Euclidean distance after dividing
/// each feature by its range over the signature set.
pub fn cost_matrix(centroids: &[[f64; 4]], signatures: &[ModeSignature]) -> Vec<Vec<f64>> {
    let range: [f64; 4] = std::array::from_fn(|d| {
        let (lo, hi) = signatures.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.centroid[d]), hi.max(s.centroid[d]))
        });
        if hi > lo {
            hi - lo
        } else {
            1.0
        }
    });
    centroids
        .iter()
        .map(|c| {
            signatures
                .iter()
                .map(|s| {
                    (0..4)
                        .map(|d| ((c[d] - s.centroid[d]) / range[d]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect()
}

/// Labels every component of `model`. With exactly as many components as
/// signatures the assignment is a minimum-cost bijection found by exhaustive
/// search; otherwise each component takes its nearest signature.
pub fn label_clusters(model: &MixtureModel, signatures: &[ModeSignature]) -> LabeledModel {
    let centroids: Vec<[f64; 4]> = model.raw_means().iter().map(to_signature_order).collect();
    let (mapping, match_cost) = match_centroids(&centroids, signatures);
    LabeledModel {
        mixture: model.clone(),
        mapping,
        match_cost,
    }
}

/// Matching on plain centroids (signature feature order).
pub fn match_centroids(centroids: &[[f64; 4]], signatures: &[ModeSignature]) -> (Vec<ModeLabel>, f64) {
    // Signatures in declaration order so index ties resolve by label order.
    let mut sigs = signatures.to_vec();
    sigs.sort_by_key(|s| s.label);
    let cost = cost_matrix(centroids, &sigs);
    if centroids.len() == sigs.len() {
        let (perm, total) = best_permutation(&cost);
        (perm.iter().map(|&j| sigs[j].label).collect(), total)
    } else {
        let mut total = 0.0;
        let labels = cost
            .iter()
            .map(|row| {
                let j = crate::mixture::argmax_first(&row.iter().map(|c| -c).collect::<Vec<_>>());
                total += row[j];
                sigs[j].label
            })
            .collect();
        (labels, total)
    }
}

/// Exhaustive minimum-cost assignment of rows to columns of a square matrix.
/// Permutations are visited in lexicographic order and only a strictly lower
/// cost replaces the incumbent.
pub fn best_permutation(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    let mut best = perm.clone();
    let mut best_cost = total(&perm);
    while next_permutation(&mut perm) {
        let c = total(&perm);
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&perm);
        }
    }
    (best, best_cost)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_signatures() {
        let sigs = canonical_signatures();
        assert_eq!(sigs.len(), 6);
        let get = |l| sigs.iter().find(|s| s.label == l).unwrap().centroid;
        assert_eq!(get(ModeLabel::RatedProduction), [12.6, 14.8, 4.1, 1870.1]);
        assert_eq!(get(ModeLabel::Idling), [2.1, 0.8, 23.9, -5.7]);
        assert_eq!(get(ModeLabel::GridConnecting), [5.1, 11.5, -1.1, 223.8]);
    }

    #[test]
    fn spellings_round_trip() {
        for m in ModeLabel::ALL {
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
            assert_eq!(serde_json::from_str::<ModeLabel>(&json).unwrap(), m);
            assert_eq!(m.as_str().parse::<ModeLabel>().unwrap(), m);
            assert_eq!(m.slug().parse::<ModeLabel>().unwrap(), m);
        }
        assert_eq!(ModeLabel::SubRatedProduction.slug(), "sub-rated-prod");
    }

    #[test]
    fn exact_signatures_map_to_themselves() {
        let sigs = canonical_signatures();
        // Present the centroids in a scrambled order.
        let order = [4, 2, 0, 5, 1, 3];
        let centroids: Vec<[f64; 4]> = order.iter().map(|&i| sigs[i].centroid).collect();
        let (labels, cost) = match_centroids(&centroids, &sigs);
        assert_eq!(cost, 0.0);
        for (slot, &i) in order.iter().enumerate() {
            assert_eq!(labels[slot], sigs[i].label);
        }
    }

    #[test]
    fn permutation_search_visits_all() {
        let mut p = vec![0, 1, 2, 3, 4, 5];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 720);
    }

    #[test]
    fn non_square_uses_nearest() {
        let sigs = canonical_signatures();
        let centroids = vec![
            [2.0, 0.5, 24.0, -3.0],
            [2.2, 0.9, 23.5, -6.0],
            [12.0, 14.7, 3.0, 1850.0],
        ];
        let (labels, _) = match_centroids(&centroids, &sigs);
        assert_eq!(
            labels,
            vec![ModeLabel::Idling, ModeLabel::Idling, ModeLabel::RatedProduction]
        );
    }
}
