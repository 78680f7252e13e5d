//! Reward predictors for (state, action) pairs.
//!
//! The successor network `s'` of depth `d` (softmax counted as a layer) is
//! encoded as `d` per-layer `log(1 + params)` entries, `log(1 + total
//! params)` and `log(rep_size)`; convolution predictors get the filter
//! count as an extra entry. One Gaussian process exists per depth and
//! action group, where all convolutions with the same kernel size share a
//! group.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::arch::{Action, ActionKind, ArchError, ArchState, SpaceConfig};
use crate::gp::{GpHyperparams, GpModel};
use crate::num::Scalar;
use crate::policy::Transition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionGroup {
    Conv { kernel: u32 },
    Pool { size: u32 },
    Fc { units: u32 },
    Terminate,
}

impl ActionGroup {
    pub fn of(action: Action) -> Self {
        match action.kind() {
            ActionKind::Conv { kernel, .. } => ActionGroup::Conv { kernel },
            ActionKind::Pool { size, .. } => ActionGroup::Pool { size },
            ActionKind::Fc { units } => ActionGroup::Fc { units },
            ActionKind::Terminate => ActionGroup::Terminate,
        }
    }
}

impl fmt::Display for ActionGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionGroup::Conv { kernel } => write!(f, "conv{kernel}"),
            ActionGroup::Pool { size } => write!(f, "pool{size}"),
            ActionGroup::Fc { units } => write!(f, "fc{units}"),
            ActionGroup::Terminate => f.write_str("softmax"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PredictorKey {
    /// Layers in the successor state, softmax included.
    pub depth: usize,
    pub group: ActionGroup,
}

/// Applies `action` and encodes the successor.
pub fn encode<T: Scalar>(
    state: &ArchState,
    action: Action,
    space: &SpaceConfig,
) -> Result<(PredictorKey, Vec<T>), ArchError> {
    let next = state.apply(action, space)?;
    let log1p = |p: u64| T::from_count(p).ln_1p();
    let mut x: Vec<T> = next.layer_params().iter().map(|&p| log1p(p)).collect();
    x.push(log1p(next.total_params()));
    x.push(T::from_count(u64::from(next.rep_size())).ln());
    if let ActionKind::Conv { filters, .. } = action.kind() {
        x.push(T::from_count(u64::from(filters)));
    }
    let key = PredictorKey {
        depth: next.layer_params().len(),
        group: ActionGroup::of(action),
    };
    Ok((key, x))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrpConfig<T> {
    pub gp: GpHyperparams<T>,
    /// Refit a predictor after this many new examples.
    pub refit_every: usize,
    /// Standardize each feature column per predictor before fitting.
    pub standardize_features: bool,
    /// Prediction when nothing has been observed at a depth.
    pub fallback_prior: T,
}

impl<T: Scalar> Default for CrpConfig<T> {
    fn default() -> Self {
        Self {
            gp: GpHyperparams::default(),
            refit_every: 1,
            standardize_features: true,
            fallback_prior: T::lit(0.5),
        }
    }
}

#[derive(Clone, Debug)]
struct Fitted<T> {
    gp: GpModel<T>,
    shift: Vec<T>,
    scale: Vec<T>,
}

#[derive(Clone, Debug)]
struct Predictor<T> {
    inputs: Vec<Vec<T>>,
    labels: Vec<T>,
    fitted: Option<Fitted<T>>,
    unfitted: usize,
}

impl<T: Scalar> Predictor<T> {
    fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    fn refit(&mut self, cfg: &CrpConfig<T>) {
        let dim = self.dim();
        let (shift, scale) = if cfg.standardize_features {
            column_standardization(&self.inputs, dim)
        } else {
            (vec![T::zero(); dim], vec![T::one(); dim])
        };
        let xs = self
            .inputs
            .iter()
            .map(|x| transform(x, &shift, &scale))
            .collect();
        match GpModel::fit(xs, &self.labels, cfg.gp) {
            Ok(gp) => {
                self.fitted = Some(Fitted { gp, shift, scale });
                self.unfitted = 0;
            }
            Err(e) => log::warn!("reward predictor refit failed: {e}"),
        }
    }
}

fn transform<T: Scalar>(x: &[T], shift: &[T], scale: &[T]) -> Vec<T> {
    x.iter()
        .zip(shift.iter().zip(scale))
        .map(|(&v, (&m, &s))| (v - m) / s)
        .collect()
}

fn column_standardization<T: Scalar>(rows: &[Vec<T>], dim: usize) -> (Vec<T>, Vec<T>) {
    let n = T::from_count(rows.len() as u64);
    let mut shift = vec![T::zero(); dim];
    let mut scale = vec![T::one(); dim];
    for j in 0..dim {
        let mean = rows.iter().map(|r| r[j]).sum::<T>() / n;
        let var = rows.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<T>() / n;
        shift[j] = mean;
        if var.sqrt() > T::epsilon().sqrt() {
            scale[j] = var.sqrt();
        }
    }
    (shift, scale)
}

/// Example store plus lazily refitted predictors.
#[derive(Clone, Debug)]
pub struct CrpModel<T> {
    config: CrpConfig<T>,
    predictors: BTreeMap<PredictorKey, Predictor<T>>,
    /// Sum and count of labels per successor depth.
    depth_rewards: BTreeMap<usize, (T, u64)>,
}

/// Serialized example for offline inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub depth: usize,
    pub group: String,
    pub features: Vec<f64>,
    pub label: f64,
}

impl<T: Scalar> CrpModel<T> {
    pub fn new(config: CrpConfig<T>) -> Self {
        Self {
            config,
            predictors: BTreeMap::new(),
            depth_rewards: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &CrpConfig<T> {
        &self.config
    }

    /// Appends one labeled example.
    ///
    /// # Panics
    /// If `x` has a different dimension than earlier examples of `key`.
    pub fn add_example(&mut self, key: PredictorKey, x: Vec<T>, label: T) {
        let p = self.predictors.entry(key).or_insert_with(|| Predictor {
            inputs: Vec::new(),
            labels: Vec::new(),
            fitted: None,
            unfitted: 0,
        });
        if let Some(first) = p.inputs.first() {
            assert_eq!(first.len(), x.len(), "feature dimension changed for {key:?}");
        }
        p.inputs.push(x);
        p.labels.push(label);
        p.unfitted += 1;
        let slot = self.depth_rewards.entry(key.depth).or_insert((T::zero(), 0));
        slot.0 += label;
        slot.1 += 1;
    }

    /// Labels every transition of a terminal path with the final reward.
    pub fn record(&mut self, path: &[Transition], reward: T, space: &SpaceConfig) -> Result<(), ArchError> {
        for t in path {
            let (key, x) = encode(&t.state, t.action, space)?;
            self.add_example(key, x, reward);
        }
        Ok(())
    }

    pub fn num_examples(&self, key: &PredictorKey) -> usize {
        self.predictors.get(key).map_or(0, |p| p.labels.len())
    }

    pub fn keys(&self) -> impl Iterator<Item = &PredictorKey> {
        self.predictors.keys()
    }

    /// Mean label at a depth, or the configured prior.
    pub fn fallback(&self, depth: usize) -> T {
        match self.depth_rewards.get(&depth) {
            Some(&(sum, n)) if n > 0 => sum / T::from_count(n),
            _ => self.config.fallback_prior,
        }
    }

    /// Predicted final reward for taking `action` in `state`, in `[0, 1]`.
    pub fn predict_reward(&mut self, state: &ArchState, action: Action, space: &SpaceConfig) -> Result<T, ArchError> {
        let (key, x) = encode::<T>(state, action, space)?;
        Ok(self.predict_encoded(key, &x))
    }

    pub fn predict_encoded(&mut self, key: PredictorKey, x: &[T]) -> T {
        let fallback = self.fallback(key.depth);
        let cfg = self.config;
        let Some(p) = self.predictors.get_mut(&key) else {
            return fallback;
        };
        if p.fitted.is_none() || p.unfitted >= cfg.refit_every.max(1) {
            p.refit(&cfg);
        }
        let Some(f) = &p.fitted else {
            return fallback;
        };
        match f.gp.predict(&transform(x, &f.shift, &f.scale)) {
            Ok(pred) => pred.mean.max(T::zero()).min(T::one()),
            Err(e) => {
                log::warn!("reward prediction failed for {key:?}: {e}");
                fallback
            }
        }
    }

    /// Writes one JSON object per example.
    pub fn dump_examples<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (key, p) in &self.predictors {
            for (x, &y) in p.inputs.iter().zip(&p.labels) {
                let rec = ExampleRecord {
                    depth: key.depth,
                    group: key.group.to_string(),
                    features: x.iter().map(|v| v.to_f64_lossy()).collect(),
                    label: y.to_f64_lossy(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}
