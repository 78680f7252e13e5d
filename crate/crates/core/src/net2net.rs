//! Function-preserving warm starts: the asymmetric network edit distance,
//! donor lookup over evaluated architectures, and the warm/cold cost model.
//!
//! Only insertions and substitutions exist, since a transferred network can
//! grow but never lose a layer. Edits that a widening/deepening transform
//! cannot realize cost `None` (unreachable).

use serde::{Deserialize, Serialize};

use crate::arch::{Action, ActionKind, ArchState};

/// Filters of a convolution or units of a fully connected layer.
fn width(a: Action) -> Option<u32> {
    match a.kind() {
        ActionKind::Conv { filters, .. } => Some(filters),
        ActionKind::Fc { units } => Some(units),
        _ => None,
    }
}

/// Cost of inserting target layer `inserted` after donor layer `reference`.
///
/// `reference = None` is an insertion before any donor layer.
pub fn insertion_cost(reference: Option<Action>, inserted: Action) -> Option<u32> {
    if inserted.is_pool() || inserted.is_terminate() {
        return None;
    }
    let new = width(inserted)?;
    match reference.and_then(width) {
        Some(old) if new < old => None,
        Some(old) if new == old => Some(1),
        _ => Some(2),
    }
}

/// Cost of turning donor layer `from` into target layer `to` (`from != to`).
pub fn substitution_cost(from: Action, to: Action) -> Option<u32> {
    match (from.kind(), to.kind()) {
        (
            ActionKind::Conv { kernel: k0, filters: f0 },
            ActionKind::Conv { kernel: k1, filters: f1 },
        ) => {
            if f1 < f0 {
                None
            } else if k1 > k0 && f1 > f0 {
                Some(2)
            } else {
                Some(1)
            }
        }
        (ActionKind::Fc { units: u0 }, ActionKind::Fc { units: u1 }) => (u1 >= u0).then_some(1),
        // pooling, softmax and conv/fc swaps cannot be transformed
        _ => None,
    }
}

/// Minimal insertion/substitution cost turning `donor` into `target`.
///
/// Both sequences exclude the softmax. Identical layers may be matched for
/// free; the recurrence still considers an insertion at such cells since
/// keeping a layer and inserting a copy next to it can be cheaper than the
/// alignment the match implies.
pub fn edit_distance(donor: &[Action], target: &[Action]) -> Option<u32> {
    let (m, n) = (donor.len(), target.len());
    if m > n {
        return None;
    }
    // dist[i][j]: donor[..i] -> target[..j]
    let mut dist = vec![vec![None::<u32>; n + 1]; m + 1];
    dist[0][0] = Some(0);
    for j in 1..=n {
        dist[0][j] = add(dist[0][j - 1], insertion_cost(None, target[j - 1]));
    }
    for i in 1..=m {
        let a_i = donor[i - 1];
        for j in i..=n {
            let a_j = target[j - 1];
            let diagonal = if a_i == a_j {
                dist[i - 1][j - 1]
            } else {
                add(dist[i - 1][j - 1], substitution_cost(a_i, a_j))
            };
            let insert = add(dist[i][j - 1], insertion_cost(Some(a_i), a_j));
            dist[i][j] = min(diagonal, insert);
        }
    }
    dist[m][n]
}

fn add(a: Option<u32>, b: Option<u32>) -> Option<u32> {
    Some(a? + b?)
}

fn min(a: Option<u32>, b: Option<u32>) -> Option<u32> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

#[derive(Clone, Debug)]
struct DonorEntry {
    key: String,
    layers: Vec<Action>,
    reward: f64,
}

/// A donor architecture selected for warm-starting a target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Donor {
    pub architecture: String,
    pub distance: u32,
    pub reward: f64,
}

/// Every architecture evaluated so far, in evaluation order.
#[derive(Clone, Debug)]
pub struct DonorIndex {
    entries: Vec<DonorEntry>,
    max_distance: u32,
}

impl Default for DonorIndex {
    fn default() -> Self {
        Self::new(2)
    }
}

impl DonorIndex {
    pub fn new(max_distance: u32) -> Self {
        Self {
            entries: Vec::new(),
            max_distance,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_distance(&self) -> u32 {
        self.max_distance
    }

    /// Records an evaluated architecture. Re-inserting a known key is a no-op.
    pub fn insert(&mut self, state: &ArchState, reward: f64) {
        let key = state.canonical_string();
        if self.entries.iter().any(|e| e.key == key) {
            return;
        }
        self.entries.push(DonorEntry {
            key,
            layers: state.layers().to_vec(),
            reward,
        });
    }

    /// Closest stored architecture within the distance limit. Ties go to
    /// the higher reward, then to the earlier entry.
    pub fn find_donor(&self, target: &ArchState) -> Option<Donor> {
        let layers = target.layers();
        let mut best: Option<(&DonorEntry, u32)> = None;
        for entry in &self.entries {
            let Some(d) = edit_distance(&entry.layers, layers) else {
                continue;
            };
            if d > self.max_distance {
                continue;
            }
            let better = match best {
                None => true,
                Some((b, bd)) => d < bd || (d == bd && entry.reward > b.reward),
            };
            if better {
                best = Some((entry, d));
            }
        }
        best.map(|(e, d)| Donor {
            architecture: e.key.clone(),
            distance: d,
            reward: e.reward,
        })
    }
}

/// Training cost in epochs for a warm (transferred) or cold start.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub warm: f64,
    pub cold: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { warm: 1.0, cold: 5.0 }
    }
}

impl CostModel {
    pub fn evaluation_cost(&self, donor_found: bool) -> f64 {
        if donor_found {
            self.warm
        } else {
            self.cold
        }
    }
}
