//! Channel identities, activation masks and the selection constraints that turn a
//! ranking of channels into an executable thin network.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskError {
    #[error("conv layer {layer} would have {active} active channels, minimum is {min}")]
    EmptyLayer { layer: usize, active: usize, min: usize },
    #[error("active fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("cardinality {target} cannot keep {min} channel(s) in each of {layers} layers")]
    FloorUnsatisfiable {
        target: usize,
        layers: usize,
        min: usize,
    },
    #[error("channel {0} is not in the registry")]
    UnknownChannel(ChannelId),
    #[error("mask covers {got} channels, registry has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("malformed run-length encoding: {0}")]
    Rle(String),
}

/// Conv layer ordinal and channel ordinal within that layer, both zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelId {
    pub layer: usize,
    pub index: usize,
}

impl ChannelId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.index)
    }
}

/// Every gateable channel of a model, in layer-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelRegistry {
    widths: Vec<usize>,
    offsets: Vec<usize>,
}

impl ChannelRegistry {
    pub fn from_widths(widths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(widths.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for w in widths {
            acc += w;
            offsets.push(acc);
        }
        Self {
            widths: widths.to_vec(),
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    pub fn flat(&self, id: ChannelId) -> Option<usize> {
        (id.layer < self.widths.len() && id.index < self.widths[id.layer])
            .then(|| self.offsets[id.layer] + id.index)
    }

    pub fn id(&self, flat: usize) -> ChannelId {
        assert!(flat < self.len(), "flat index {flat} out of range");
        let layer = self.offsets.partition_point(|&o| o <= flat) - 1;
        ChannelId::new(layer, flat - self.offsets[layer])
    }

    pub fn layer_of(&self, flat: usize) -> usize {
        self.offsets.partition_point(|&o| o <= flat) - 1
    }

    pub fn iter(&self) -> impl Iterator<Item = ChannelId> + '_ {
        self.widths
            .iter()
            .enumerate()
            .flat_map(|(l, &w)| (0..w).map(move |k| ChannelId::new(l, k)))
    }
}

/// Number of channels to activate: round-half-up of `p · total`.
pub fn target_cardinality(total: usize, p: f64) -> usize {
    // The epsilon keeps products like 0.35 · 10 = 3.4999… on the upper side.
    ((p * total as f64) + 0.5 + 1e-9).floor() as usize
}

/// Boolean activation vector over a registry.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChannelMask {
    bits: Vec<bool>,
    widths: Vec<usize>,
}

impl ChannelMask {
    pub fn all_active(registry: &ChannelRegistry) -> Self {
        Self {
            bits: vec![true; registry.len()],
            widths: registry.widths.clone(),
        }
    }

    pub fn from_bits(registry: &ChannelRegistry, bits: Vec<bool>) -> Result<Self, MaskError> {
        if bits.len() != registry.len() {
            return Err(MaskError::LengthMismatch {
                expected: registry.len(),
                got: bits.len(),
            });
        }
        Ok(Self {
            bits,
            widths: registry.widths.clone(),
        })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn active_fraction(&self) -> f64 {
        self.popcount() as f64 / self.bits.len() as f64
    }

    pub fn is_all_active(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.widths[..layer].iter().sum()
    }

    pub fn layer(&self, layer: usize) -> &[bool] {
        let off = self.layer_offset(layer);
        &self.bits[off..off + self.widths[layer]]
    }

    pub fn is_active(&self, id: ChannelId) -> bool {
        id.layer < self.widths.len()
            && id.index < self.widths[id.layer]
            && self.bits[self.layer_offset(id.layer) + id.index]
    }

    /// Per-layer gate vectors (1.0 active, 0.0 inactive).
    pub fn gates(&self) -> Vec<Vec<f64>> {
        (0..self.widths.len())
            .map(|l| {
                self.layer(l)
                    .iter()
                    .map(|&b| if b { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    pub fn active_ids(&self) -> Vec<ChannelId> {
        (0..self.widths.len())
            .flat_map(|l| {
                self.layer(l)
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(move |(k, _)| ChannelId::new(l, k))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn active_per_layer(&self) -> Vec<usize> {
        (0..self.widths.len())
            .map(|l| self.layer(l).iter().filter(|&&b| b).count())
            .collect()
    }

    pub fn check_floor(&self, min_per_layer: usize) -> Result<(), MaskError> {
        for (layer, active) in self.active_per_layer().into_iter().enumerate() {
            if active < min_per_layer {
                return Err(MaskError::EmptyLayer {
                    layer,
                    active,
                    min: min_per_layer,
                });
            }
        }
        Ok(())
    }

    /// Run lengths alternating inactive/active, starting with an inactive run
    /// (which may be zero).
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(registry: &ChannelRegistry, runs: &[usize]) -> Result<Self, MaskError> {
        let mut bits = Vec::with_capacity(registry.len());
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat_n(value, r));
            value = !value;
        }
        if bits.len() != registry.len() {
            return Err(MaskError::Rle(format!(
                "runs sum to {}, registry has {} channels",
                bits.len(),
                registry.len()
            )));
        }
        Ok(Self {
            bits,
            widths: registry.widths.clone(),
        })
    }

    pub fn rle_string(&self) -> String {
        self.to_rle()
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_rle(registry: &ChannelRegistry, s: &str) -> Result<Self, MaskError> {
        let runs = s
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| MaskError::Rle(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_rle(registry, &runs)
    }
}

/// One floor-repair action: `inserted` was added to satisfy the per-layer
/// minimum of `layer`, displacing `evicted` when the cardinality allowed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepairEvent {
    pub layer: usize,
    pub inserted: ChannelId,
    pub evicted: Option<ChannelId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub mask: ChannelMask,
    pub repairs: Vec<RepairEvent>,
}

/// Repair policy for [`mask_from_selection`].
#[derive(Debug, Clone, Copy)]
pub struct Repair<'a> {
    /// Flat channel indices in order of preference (best first). Must be a
    /// permutation of the registry.
    pub ranking: &'a [usize],
    /// Desired popcount; missing channels are filled from the ranking.
    pub target: usize,
    pub min_per_layer: usize,
}

/// Builds a mask with exactly the selected channels on. With `repair`, the mask
/// is topped up to the target cardinality from the ranking and the per-layer
/// floor is restored by evict-and-insert; without it a floor violation is an
/// error.
pub fn mask_from_selection(
    registry: &ChannelRegistry,
    selected: &[ChannelId],
    repair: Option<Repair<'_>>,
) -> Result<Selection, MaskError> {
    let mut bits = vec![false; registry.len()];
    for &id in selected {
        let flat = registry.flat(id).ok_or(MaskError::UnknownChannel(id))?;
        bits[flat] = true;
    }
    match repair {
        None => {
            let mask = ChannelMask::from_bits(registry, bits)?;
            mask.check_floor(1)?;
            Ok(Selection {
                mask,
                repairs: Vec::new(),
            })
        }
        Some(policy) => {
            debug_assert_eq!(policy.ranking.len(), registry.len());
            let mut count = bits.iter().filter(|&&b| b).count();
            for &flat in policy.ranking {
                if count >= policy.target {
                    break;
                }
                if !bits[flat] {
                    bits[flat] = true;
                    count += 1;
                }
            }
            let repairs = repair_floor(registry, &mut bits, policy.ranking, policy.min_per_layer);
            Ok(Selection {
                mask: ChannelMask::from_bits(registry, bits)?,
                repairs,
            })
        }
    }
}

/// Takes the first `target` channels of `ranking` and repairs the floor.
pub fn select_top(
    registry: &ChannelRegistry,
    ranking: &[usize],
    target: usize,
    min_per_layer: usize,
) -> Result<Selection, MaskError> {
    let mut bits = vec![false; registry.len()];
    for &flat in ranking.iter().take(target) {
        bits[flat] = true;
    }
    let repairs = repair_floor(registry, &mut bits, ranking, min_per_layer);
    Ok(Selection {
        mask: ChannelMask::from_bits(registry, bits)?,
        repairs,
    })
}

/// While a layer is below the floor, insert that layer's best-ranked inactive
/// channel and evict the globally lowest-ranked selected channel from a layer
/// that can spare one. If nothing can be spared the insertion stands alone and
/// the popcount grows.
fn repair_floor(
    registry: &ChannelRegistry,
    bits: &mut [bool],
    ranking: &[usize],
    min_per_layer: usize,
) -> Vec<RepairEvent> {
    let mut rank_of = vec![usize::MAX; registry.len()];
    for (pos, &flat) in ranking.iter().enumerate() {
        rank_of[flat] = pos;
    }
    let mut counts: Vec<usize> = (0..registry.num_layers())
        .map(|l| registry.layer_range(l).filter(|&f| bits[f]).count())
        .collect();
    let mut events = Vec::new();
    loop {
        let Some(layer) = (0..counts.len())
            .find(|&l| counts[l] < min_per_layer.min(registry.widths()[l]))
        else {
            break;
        };
        let insert = registry
            .layer_range(layer)
            .filter(|&f| !bits[f])
            .min_by_key(|&f| rank_of[f])
            .expect("layer below floor has an inactive channel");
        let evict = (0..registry.len())
            .filter(|&f| bits[f] && counts[registry.layer_of(f)] > min_per_layer)
            .max_by_key(|&f| rank_of[f]);
        bits[insert] = true;
        counts[layer] += 1;
        if let Some(e) = evict {
            bits[e] = false;
            counts[registry.layer_of(e)] -= 1;
        }
        events.push(RepairEvent {
            layer,
            inserted: registry.id(insert),
            evicted: evict.map(|e| registry.id(e)),
        });
    }
    events
}

/// Checks `0 < p ≤ 1` and that the resulting cardinality can satisfy the floor.
pub fn validate_fraction(
    registry: &ChannelRegistry,
    p: f64,
    min_per_layer: usize,
) -> Result<usize, MaskError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(MaskError::InvalidFraction(p));
    }
    let target = target_cardinality(registry.len(), p);
    let needed: usize = registry.widths().iter().map(|&w| w.min(min_per_layer)).sum();
    if target < needed || target == 0 {
        return Err(MaskError::FloorUnsatisfiable {
            target,
            layers: registry.num_layers(),
            min: min_per_layer,
        });
    }
    Ok(target)
}

/// Uniformly random subset of cardinality `round(p · |registry|)`, with the floor
/// restored by repair against the same random ranking.
pub fn random_mask<R: Rng + ?Sized>(
    registry: &ChannelRegistry,
    p: f64,
    min_per_layer: usize,
    rng: &mut R,
) -> Result<Selection, MaskError> {
    let target = validate_fraction(registry, p, min_per_layer)?;
    let mut ranking: Vec<usize> = (0..registry.len()).collect();
    ranking.shuffle(rng);
    select_top(registry, &ranking, target, min_per_layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reg24() -> ChannelRegistry {
        ChannelRegistry::from_widths(&[8, 16])
    }

    #[test]
    fn registry_ids_roundtrip() {
        let r = reg24();
        assert_eq!(r.len(), 24);
        for (flat, id) in r.iter().enumerate() {
            assert_eq!(r.flat(id), Some(flat));
            assert_eq!(r.id(flat), id);
        }
        assert_eq!(r.flat(ChannelId::new(0, 8)), None);
    }

    #[test]
    fn select_everything() {
        let r = reg24();
        let all: Vec<_> = r.iter().collect();
        let s = mask_from_selection(&r, &all, None).unwrap();
        assert_eq!(s.mask.popcount(), 24);
    }

    #[test]
    fn empty_selection_without_repair_fails() {
        let r = reg24();
        let err = mask_from_selection(&r, &[], None).unwrap_err();
        assert_eq!(
            err,
            MaskError::EmptyLayer {
                layer: 0,
                active: 0,
                min: 1
            }
        );
    }

    #[test]
    fn repair_tops_up_with_best_ranked() {
        let r = reg24();
        // nine channels, spread over both layers
        let chosen: Vec<ChannelId> = (0..4)
            .map(|k| ChannelId::new(0, k))
            .chain((0..5).map(|k| ChannelId::new(1, k)))
            .collect();
        // caller's ranking prefers the last channel of layer 1
        let mut ranking: Vec<usize> = (0..24).rev().collect();
        ranking.swap(0, 1);
        let s = mask_from_selection(
            &r,
            &chosen,
            Some(Repair {
                ranking: &ranking,
                target: 10,
                min_per_layer: 1,
            }),
        )
        .unwrap();
        assert_eq!(s.mask.popcount(), 10);
        assert!(s.mask.is_active(ChannelId::new(1, 14)));
        assert!(s.repairs.is_empty());
    }

    #[test]
    fn floor_repair_evicts_lowest_ranked() {
        let r = reg24();
        // ranking puts all of layer 1 first, so top-4 empties layer 0
        let ranking: Vec<usize> = (8..24).chain(0..8).collect();
        let s = select_top(&r, &ranking, 4, 1).unwrap();
        assert_eq!(s.mask.popcount(), 4);
        assert_eq!(s.mask.active_per_layer(), vec![1, 3]);
        assert_eq!(
            s.repairs,
            vec![RepairEvent {
                layer: 0,
                inserted: ChannelId::new(0, 0),
                evicted: Some(ChannelId::new(1, 3)),
            }]
        );
    }

    #[test]
    fn repair_grows_popcount_when_nothing_can_be_spared() {
        let r = ChannelRegistry::from_widths(&[2, 2, 2]);
        let ranking: Vec<usize> = (0..6).collect();
        let s = select_top(&r, &ranking, 1, 1).unwrap();
        assert_eq!(s.mask.active_per_layer(), vec![1, 1, 1]);
        assert_eq!(s.mask.popcount(), 3);
    }

    #[test]
    fn random_mask_cardinality() {
        let r = reg24();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_mask(&r, 1.0, 1, &mut rng).unwrap().mask.is_all_active());
        let s = random_mask(&r, 0.5, 1, &mut rng).unwrap();
        assert_eq!(s.mask.popcount(), 12);
        s.mask.check_floor(1).unwrap();
    }

    #[test]
    fn random_mask_rejects_bad_fractions() {
        let r = reg24();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            random_mask(&r, 0.0, 1, &mut rng),
            Err(MaskError::InvalidFraction(_))
        ));
        assert!(matches!(
            random_mask(&r, 0.04, 1, &mut rng),
            Err(MaskError::FloorUnsatisfiable { .. })
        ));
    }

    #[test]
    fn random_masks_differ_across_seeds() {
        let r = reg24();
        let masks: std::collections::HashSet<_> = (0..10)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                random_mask(&r, 0.5, 1, &mut rng).unwrap().mask
            })
            .collect();
        assert!(masks.len() >= 9, "only {} distinct masks", masks.len());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(target_cardinality(24, 0.5), 12);
        assert_eq!(target_cardinality(10, 0.35), 4);
        assert_eq!(target_cardinality(10, 0.34), 3);
        assert_eq!(target_cardinality(144, 0.4), 58);
        assert_eq!(target_cardinality(5504, 0.2), 1101);
    }

    #[test]
    fn rle_string_roundtrip() {
        let r = reg24();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mask(&r, 0.4, 1, &mut rng).unwrap().mask;
        let s = m.rle_string();
        assert_eq!(ChannelMask::parse_rle(&r, &s).unwrap(), m);
        assert!(ChannelMask::parse_rle(&r, "3 4").is_err());
    }

    proptest::proptest! {
        #[test]
        fn random_masks_respect_cardinality_and_floor(
            widths in proptest::collection::vec(1usize..12, 1..6),
            p in 0.05f64..=1.0,
            seed in 0u64..1000,
        ) {
            let r = ChannelRegistry::from_widths(&widths);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match random_mask(&r, p, 1, &mut rng) {
                Ok(sel) => {
                    proptest::prop_assert_eq!(sel.mask.popcount(), target_cardinality(r.len(), p));
                    proptest::prop_assert!(sel.mask.check_floor(1).is_ok());
                }
                Err(MaskError::FloorUnsatisfiable { target, .. }) => {
                    proptest::prop_assert!(target < widths.len());
                }
                Err(e) => proptest::prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn rle_roundtrips(bits in proptest::collection::vec(proptest::bool::ANY, 1..64)) {
            let r = ChannelRegistry::from_widths(&[bits.len()]);
            let m = ChannelMask::from_bits(&r, bits).unwrap();
            proptest::prop_assert_eq!(ChannelMask::from_rle(&r, &m.to_rle()).unwrap(), m);
        }
    }
}
