//! Addressable components, reversible ablation conditions, and the
//! enumerators for group, layer-sweep, positional, and matched random-control
//! suites.
//!
//! A condition is an immutable value passed into a single forward call, so
//! applying one never touches the parameters and there is nothing to release.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HybridLayout, LayerKind, LayoutKind};
use crate::error::{Error, Result};
use crate::seeding::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKind {
    SoftmaxAttention,
    LinearAttention,
    #[serde(rename = "SSM")]
    Ssm,
    WholeLayer,
}

impl ComponentKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::SoftmaxAttention => "attention",
            Self::LinearAttention => "linear",
            Self::Ssm => "ssm",
            Self::WholeLayer => "layer",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "attention" | "softmaxattention" | "attn" => Some(Self::SoftmaxAttention),
            "linear" | "linearattention" => Some(Self::LinearAttention),
            "ssm" => Some(Self::Ssm),
            "layer" | "wholelayer" => Some(Self::WholeLayer),
            _ => None,
        }
    }
}

impl From<LayerKind> for ComponentKind {
    fn from(k: LayerKind) -> Self {
        match k {
            LayerKind::LinearAttention => Self::LinearAttention,
            LayerKind::SoftmaxAttention => Self::SoftmaxAttention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComponentId {
    pub layer_index: usize,
    pub kind: ComponentKind,
}

impl ComponentId {
    pub fn new(layer_index: usize, kind: ComponentKind) -> Self {
        Self { layer_index, kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    Skip,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Baseline,
    Group,
    LayerSweep,
    Positional,
    RandomControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Third {
    Early,
    Middle,
    Late,
}

impl Third {
    pub const ALL: [Third; 3] = [Third::Early, Third::Middle, Third::Late];

    pub fn label(self) -> &'static str {
        match self {
            Third::Early => "early",
            Third::Middle => "middle",
            Third::Late => "late",
        }
    }
}

/// Layer-index ranges of the early, middle, and late thirds. Remainder
/// layers go to the earlier segments, so 8 layers split 3/3/2.
pub fn thirds(n_layers: usize) -> [std::ops::Range<usize>; 3] {
    let base = n_layers / 3;
    let rem = n_layers % 3;
    let early = base + usize::from(rem > 0);
    let middle = base + usize::from(rem > 1);
    [0..early, early..early + middle, early + middle..n_layers]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCondition {
    pub name: String,
    pub targets: BTreeSet<ComponentId>,
    pub mechanism: Mechanism,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_index: Option<usize>,
}

/// Which parts of one layer a condition suppresses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerMask {
    pub skip: bool,
    pub zero_attention: bool,
    pub zero_linear: bool,
    pub zero_ssm: bool,
}

impl LayerMask {
    pub fn is_clear(&self) -> bool {
        *self == Self::default()
    }

    fn merge(self, other: Self) -> Self {
        Self {
            skip: self.skip || other.skip,
            zero_attention: self.zero_attention || other.zero_attention,
            zero_linear: self.zero_linear || other.zero_linear,
            zero_ssm: self.zero_ssm || other.zero_ssm,
        }
    }
}

/// Per-layer suppression derived from a validated condition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(pub Vec<LayerMask>);

impl Mask {
    pub fn clear(n_layers: usize) -> Self {
        Self(vec![LayerMask::default(); n_layers])
    }

    pub fn merge(&self, other: &Mask) -> Mask {
        Mask(self.0.iter().zip(&other.0).map(|(a, b)| a.merge(*b)).collect())
    }

    pub fn layer(&self, l: usize) -> LayerMask {
        self.0.get(l).copied().unwrap_or_default()
    }
}

fn default_mechanism(layout: &HybridLayout) -> Mechanism {
    match layout.kind {
        LayoutKind::Parallel => Mechanism::Zero,
        _ => Mechanism::Skip,
    }
}

impl AblationCondition {
    pub fn baseline(layout: &HybridLayout) -> Self {
        Self {
            name: "baseline".into(),
            targets: BTreeSet::new(),
            mechanism: default_mechanism(layout),
            source: Source::Baseline,
            rng_seed: None,
            trial_index: None,
        }
    }

    pub fn skip_layers(name: impl Into<String>, layers: impl IntoIterator<Item = usize>, source: Source) -> Self {
        Self {
            name: name.into(),
            targets: layers
                .into_iter()
                .map(|l| ComponentId::new(l, ComponentKind::WholeLayer))
                .collect(),
            mechanism: Mechanism::Skip,
            source,
            rng_seed: None,
            trial_index: None,
        }
    }

    pub fn zero(name: impl Into<String>, targets: impl IntoIterator<Item = ComponentId>, source: Source) -> Self {
        Self {
            name: name.into(),
            targets: targets.into_iter().collect(),
            mechanism: Mechanism::Zero,
            source,
            rng_seed: None,
            trial_index: None,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.targets.is_empty()
    }

    /// Number of distinct layers the condition touches.
    pub fn layer_count(&self) -> usize {
        self.targets
            .iter()
            .map(|t| t.layer_index)
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn validate(&self, layout: &HybridLayout) -> Result<()> {
        let n = layout.n_layers();
        if self.source == Source::Baseline && !self.targets.is_empty() {
            return Err(Error::Condition(format!("baseline `{}` has targets", self.name)));
        }
        if self.source == Source::RandomControl && (self.rng_seed.is_none() || self.trial_index.is_none()) {
            return Err(Error::Condition(format!(
                "random control `{}` must record seed and trial index",
                self.name
            )));
        }
        for t in &self.targets {
            if t.layer_index >= n {
                return Err(Error::Condition(format!(
                    "`{}` targets layer {} of a {n}-layer model",
                    self.name, t.layer_index
                )));
            }
            let ok = match (self.mechanism, t.kind) {
                (Mechanism::Skip, ComponentKind::WholeLayer) => layout.kind != LayoutKind::Parallel,
                (Mechanism::Skip, _) | (Mechanism::Zero, ComponentKind::WholeLayer) => false,
                (Mechanism::Zero, kind) => match layout.kind {
                    LayoutKind::Parallel => matches!(kind, ComponentKind::Ssm | ComponentKind::SoftmaxAttention),
                    _ => layout.mixer_kind(t.layer_index).map(ComponentKind::from) == Some(kind),
                },
            };
            if !ok {
                return Err(Error::Condition(format!(
                    "`{}`: {:?} of {:?} at layer {} is not valid for a {:?} layout",
                    self.name, self.mechanism, t.kind, t.layer_index, layout.kind
                )));
            }
        }
        Ok(())
    }

    /// Validates and lowers the condition to per-layer suppression flags.
    pub fn mask(&self, layout: &HybridLayout) -> Result<Mask> {
        self.validate(layout)?;
        let mut mask = Mask::clear(layout.n_layers());
        for t in &self.targets {
            let m = &mut mask.0[t.layer_index];
            match t.kind {
                ComponentKind::WholeLayer => m.skip = true,
                ComponentKind::SoftmaxAttention => m.zero_attention = true,
                ComponentKind::LinearAttention => m.zero_linear = true,
                ComponentKind::Ssm => m.zero_ssm = true,
            }
        }
        Ok(mask)
    }

    /// Union of two conditions sharing a mechanism.
    pub fn union(&self, other: &Self, name: impl Into<String>) -> Result<Self> {
        if self.mechanism != other.mechanism && !self.targets.is_empty() && !other.targets.is_empty() {
            return Err(Error::Condition("cannot union conditions with different mechanisms".into()));
        }
        let mechanism = if self.targets.is_empty() {
            other.mechanism
        } else {
            self.mechanism
        };
        Ok(Self {
            name: name.into(),
            targets: self.targets.union(&other.targets).copied().collect(),
            mechanism,
            source: self.source,
            rng_seed: None,
            trial_index: None,
        })
    }
}

fn layers_of_kind(layout: &HybridLayout, kind: LayerKind) -> Vec<usize> {
    (0..layout.n_layers())
        .filter(|&l| layout.mixer_kind(l) == Some(kind))
        .collect()
}

/// Removes every instance of one component type at once.
pub fn enumerate_group_conditions(layout: &HybridLayout) -> Vec<AblationCondition> {
    match layout.kind {
        LayoutKind::Sequential => [
            (LayerKind::LinearAttention, "linear_off"),
            (LayerKind::SoftmaxAttention, "attention_off"),
        ]
        .into_iter()
        .filter_map(|(kind, name)| {
            let layers = layers_of_kind(layout, kind);
            (!layers.is_empty()).then(|| AblationCondition::skip_layers(name, layers, Source::Group))
        })
        .collect(),
        LayoutKind::Parallel => {
            let n = layout.n_layers();
            vec![
                AblationCondition::zero(
                    "ssm_off",
                    (0..n).map(|l| ComponentId::new(l, ComponentKind::Ssm)),
                    Source::Group,
                ),
                AblationCondition::zero(
                    "attention_off",
                    (0..n).map(|l| ComponentId::new(l, ComponentKind::SoftmaxAttention)),
                    Source::Group,
                ),
            ]
        }
        LayoutKind::PureAttention => Vec::new(),
    }
}

/// One condition per (layer, component), ordered by layer then kind.
pub fn enumerate_layer_sweep(layout: &HybridLayout) -> Vec<AblationCondition> {
    let n = layout.n_layers();
    match layout.kind {
        LayoutKind::Parallel => (0..n)
            .flat_map(|l| {
                [ComponentKind::SoftmaxAttention, ComponentKind::Ssm].map(|kind| {
                    AblationCondition::zero(
                        format!("L{l:02}_{}_zero", kind.label()),
                        [ComponentId::new(l, kind)],
                        Source::LayerSweep,
                    )
                })
            })
            .collect(),
        _ => (0..n)
            .map(|l| {
                let kind = layout.mixer_kind(l).map(ComponentKind::from).unwrap_or(ComponentKind::WholeLayer);
                AblationCondition::skip_layers(format!("L{l:02}_{}_skip", kind.label()), [l], Source::LayerSweep)
            })
            .collect(),
    }
}

/// Early / middle / late conditions for one component kind.
pub fn enumerate_positional(layout: &HybridLayout, kind: ComponentKind) -> Result<Vec<AblationCondition>> {
    let n = layout.n_layers();
    let present: Vec<usize> = match (layout.kind, kind) {
        (LayoutKind::Parallel, ComponentKind::Ssm | ComponentKind::SoftmaxAttention) => (0..n).collect(),
        (LayoutKind::Sequential | LayoutKind::PureAttention, ComponentKind::LinearAttention) => {
            layers_of_kind(layout, LayerKind::LinearAttention)
        }
        (LayoutKind::Sequential | LayoutKind::PureAttention, ComponentKind::SoftmaxAttention) => {
            layers_of_kind(layout, LayerKind::SoftmaxAttention)
        }
        _ => Vec::new(),
    };
    if present.is_empty() {
        return Err(Error::Condition(format!(
            "{kind:?} does not occur in a {:?} layout",
            layout.kind
        )));
    }
    Ok(Third::ALL
        .into_iter()
        .zip(thirds(n))
        .map(|(third, range)| {
            let layers = present.iter().copied().filter(|l| range.contains(l));
            let name = format!("{}_off_{}", kind.label(), third.label());
            match layout.kind {
                LayoutKind::Parallel => AblationCondition::zero(
                    name,
                    layers.map(|l| ComponentId::new(l, kind)),
                    Source::Positional,
                ),
                _ => AblationCondition::skip_layers(name, layers, Source::Positional),
            }
        })
        .collect())
}

/// Disrupts the same number of layers as `matched`, chosen uniformly
/// without replacement from all layers.
pub fn enumerate_random_controls(
    layout: &HybridLayout,
    matched: &AblationCondition,
    trials: usize,
    seed: u64,
) -> Result<Vec<AblationCondition>> {
    enumerate_random_removals(layout, matched.layer_count(), trials, seed, &matched.name)
}

/// Random removal of `count` layers, `trials` times. Sequential and
/// pure-attention layouts skip whole layers; parallel layouts zero both
/// paths of each selected block.
pub fn enumerate_random_removals(
    layout: &HybridLayout,
    count: usize,
    trials: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<AblationCondition>> {
    let n = layout.n_layers();
    if trials == 0 {
        return Err(Error::Condition("random controls need at least one trial".into()));
    }
    if count > n {
        return Err(Error::Condition(format!(
            "cannot select {count} of {n} layers for `{label}`"
        )));
    }
    Ok((0..trials)
        .map(|trial| {
            let layers = random_layers(n, count, seed, trial);
            let name = format!("{label}_random_t{trial}");
            let mut cond = match layout.kind {
                LayoutKind::Parallel => AblationCondition::zero(
                    name,
                    layers.iter().flat_map(|&l| {
                        [
                            ComponentId::new(l, ComponentKind::SoftmaxAttention),
                            ComponentId::new(l, ComponentKind::Ssm),
                        ]
                    }),
                    Source::RandomControl,
                ),
                _ => AblationCondition::skip_layers(name, layers, Source::RandomControl),
            };
            cond.rng_seed = Some(seed);
            cond.trial_index = Some(trial);
            cond
        })
        .collect())
}

/// Selected layer indices, a pure function of `(seed, trial)`; sorted.
pub fn random_layers(n_layers: usize, count: usize, seed: u64, trial: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "random-control", trial as u64));
    let mut picked = sample(&mut rng, n_layers, count).into_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_counts_follow_layout() {
        let seq = HybridLayout::three_to_one(6);
        let groups = enumerate_group_conditions(&seq);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].name, "linear_off");
        assert_eq!(groups[0].targets.len(), 18);
        assert_eq!(groups[1].targets.len(), 6);

        let par = HybridLayout::parallel(36);
        let groups = enumerate_group_conditions(&par);
        assert!(groups.iter().all(|g| g.targets.len() == 36));

        let one = enumerate_group_conditions(&HybridLayout::parallel(1));
        assert_eq!(one.len(), 2);
        assert!(one.iter().all(|g| g.targets.len() == 1));

        assert!(enumerate_group_conditions(&HybridLayout::pure_attention(4)).is_empty());
    }

    #[test]
    fn sweep_counts_and_order() {
        let par = enumerate_layer_sweep(&HybridLayout::parallel(36));
        assert_eq!(par.len(), 72);
        let ids: Vec<ComponentId> = par.iter().map(|c| *c.targets.iter().next().unwrap()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert_eq!(enumerate_layer_sweep(&HybridLayout::three_to_one(6)).len(), 24);
        assert_eq!(
            enumerate_layer_sweep(&HybridLayout::sequential(vec![LayerKind::LinearAttention])).len(),
            1
        );
    }

    #[test]
    fn thirds_rounding() {
        assert_eq!(thirds(36), [0..12, 12..24, 24..36]);
        assert_eq!(thirds(8), [0..3, 3..6, 6..8]);
        assert_eq!(thirds(7), [0..3, 3..5, 5..7]);
        assert_eq!(thirds(2), [0..1, 1..2, 2..2]);
    }

    #[test]
    fn positional_targets_and_errors() {
        let par = HybridLayout::parallel(36);
        let conds = enumerate_positional(&par, ComponentKind::Ssm).unwrap();
        let layers: Vec<Vec<usize>> = conds
            .iter()
            .map(|c| c.targets.iter().map(|t| t.layer_index).collect())
            .collect();
        assert_eq!(layers[0], (0..12).collect::<Vec<_>>());
        assert_eq!(layers[2], (24..36).collect::<Vec<_>>());
        let eight = enumerate_positional(&HybridLayout::parallel(8), ComponentKind::SoftmaxAttention).unwrap();
        let sizes: Vec<usize> = eight.iter().map(|c| c.targets.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2]);
        assert!(enumerate_positional(&HybridLayout::three_to_one(2), ComponentKind::Ssm).is_err());

        let seq = enumerate_positional(&HybridLayout::three_to_one(2), ComponentKind::LinearAttention).unwrap();
        for c in &seq {
            c.validate(&HybridLayout::three_to_one(2)).unwrap();
        }
        // layers 0..3 are L L L; 3..6 are A L L; 6..8 are L A
        assert_eq!(seq[0].targets.len(), 3);
        assert_eq!(seq[1].targets.len(), 2);
        assert_eq!(seq[2].targets.len(), 1);
    }

    #[test]
    fn random_controls_match_counts_and_replay() {
        let seq = HybridLayout::three_to_one(6);
        let linear_off = &enumerate_group_conditions(&seq)[0];
        let trials = enumerate_random_controls(&seq, linear_off, 3, 42).unwrap();
        assert_eq!(trials.len(), 3);
        for t in &trials {
            assert_eq!(t.targets.len(), 18);
            t.validate(&seq).unwrap();
        }
        let again = enumerate_random_controls(&seq, linear_off, 3, 42).unwrap();
        assert_eq!(trials, again);
        assert_ne!(trials[0].targets, trials[1].targets);
        assert_eq!(enumerate_random_controls(&seq, linear_off, 5, 42).unwrap().len(), 5);

        let par = HybridLayout::parallel(8);
        let ssm_off = &enumerate_group_conditions(&par)[0];
        let ctl = enumerate_random_controls(&par, ssm_off, 2, 1).unwrap();
        assert_eq!(ctl[0].layer_count(), 8);
        assert_eq!(ctl[0].targets.len(), 16);

        assert!(enumerate_random_removals(&par, 9, 1, 0, "x").is_err());
        assert!(enumerate_random_removals(&par, 2, 0, 0, "x").is_err());
    }

    #[test]
    fn validation_rejects_mismatched_targets() {
        let seq = HybridLayout::three_to_one(1);
        let bad = AblationCondition::zero("x", [ComponentId::new(0, ComponentKind::Ssm)], Source::LayerSweep);
        assert!(bad.validate(&seq).is_err());
        let bad = AblationCondition::zero(
            "x",
            [ComponentId::new(0, ComponentKind::SoftmaxAttention)],
            Source::LayerSweep,
        );
        assert!(bad.validate(&seq).is_err());
        let ok = AblationCondition::zero(
            "x",
            [ComponentId::new(3, ComponentKind::SoftmaxAttention)],
            Source::LayerSweep,
        );
        ok.validate(&seq).unwrap();
        let par = HybridLayout::parallel(2);
        let skip = AblationCondition::skip_layers("x", [0], Source::LayerSweep);
        assert!(skip.validate(&par).is_err());
        assert!(AblationCondition::skip_layers("x", [5], Source::LayerSweep)
            .validate(&seq)
            .is_err());
        let mut rc = AblationCondition::skip_layers("x", [0], Source::RandomControl);
        assert!(rc.validate(&seq).is_err());
        rc.rng_seed = Some(1);
        rc.trial_index = Some(0);
        rc.validate(&seq).unwrap();
    }

    #[test]
    fn manifest_round_trips() {
        let par = HybridLayout::parallel(4);
        let ctl = enumerate_random_removals(&par, 2, 1, 9, "k2").unwrap().remove(0);
        let json = serde_json::to_string(&ctl).unwrap();
        assert!(json.contains("\"SSM\""));
        let back: AblationCondition = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ctl);
    }
}
