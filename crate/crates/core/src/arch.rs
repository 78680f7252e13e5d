//! The layer-by-layer architecture MDP.
//!
//! A state is the sequence of layer-adding actions chosen so far. Every
//! transition is deterministic, so a state is fully identified by its action
//! sequence and carries a handful of derived features (feature map size,
//! channel count, fully connected layer bookkeeping, parameter counts).
//!
//! The canonical text form joins layer tokens with `-`:
//! `C(k,f)` convolution, `P(size,stride)` pooling, `FC(units)` fully
//! connected and `SM` for the softmax that terminates a network, e.g.
//! `C(3,64)-C(3,128)-P(2,2)-FC(256)-SM`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONV_KERNELS: [u32; 3] = [1, 3, 5];
pub const CONV_FILTERS: [u32; 4] = [64, 128, 256, 512];
/// Pooling sizes with their fixed strides.
pub const POOL_SHAPES: [(u32, u32); 3] = [(2, 2), (3, 2), (5, 3)];
pub const FC_UNITS: [u32; 3] = [128, 256, 512];
pub const NUM_ACTIONS: usize = 19;

const POOL_BASE: u8 = 12;
const FC_BASE: u8 = 15;
const TERMINATE_INDEX: u8 = 18;

/// One of the 19 layer-adding moves.
///
/// Only valid combinations are constructible; use [`Action::kind`] to inspect
/// the hyperparameters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Action(u8);

/// Decoded view of an [`Action`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionKind {
    Conv { kernel: u32, filters: u32 },
    Pool { size: u32, stride: u32 },
    Fc { units: u32 },
    Terminate,
}

impl Action {
    pub const TERMINATE: Action = Action(TERMINATE_INDEX);

    pub fn conv(kernel: u32, filters: u32) -> Option<Action> {
        let k = CONV_KERNELS.iter().position(|&k| k == kernel)?;
        let f = CONV_FILTERS.iter().position(|&f| f == filters)?;
        Some(Action((k * CONV_FILTERS.len() + f) as u8))
    }

    /// Pooling action of the given window size; the stride is implied.
    pub fn pool(size: u32) -> Option<Action> {
        let p = POOL_SHAPES.iter().position(|&(s, _)| s == size)?;
        Some(Action(POOL_BASE + p as u8))
    }

    pub fn fc(units: u32) -> Option<Action> {
        let u = FC_UNITS.iter().position(|&u| u == units)?;
        Some(Action(FC_BASE + u as u8))
    }

    /// All 19 actions in index order.
    pub fn all() -> impl Iterator<Item = Action> + Clone {
        (0..NUM_ACTIONS as u8).map(Action)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        (index < NUM_ACTIONS).then_some(Action(index as u8))
    }

    pub fn kind(self) -> ActionKind {
        let i = self.0;
        if i < POOL_BASE {
            let per_kernel = CONV_FILTERS.len() as u8;
            ActionKind::Conv {
                kernel: CONV_KERNELS[(i / per_kernel) as usize],
                filters: CONV_FILTERS[(i % per_kernel) as usize],
            }
        } else if i < FC_BASE {
            let (size, stride) = POOL_SHAPES[(i - POOL_BASE) as usize];
            ActionKind::Pool { size, stride }
        } else if i < TERMINATE_INDEX {
            ActionKind::Fc {
                units: FC_UNITS[(i - FC_BASE) as usize],
            }
        } else {
            ActionKind::Terminate
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self.kind(), ActionKind::Conv { .. })
    }

    pub fn is_pool(self) -> bool {
        matches!(self.kind(), ActionKind::Pool { .. })
    }

    pub fn is_fc(self) -> bool {
        matches!(self.kind(), ActionKind::Fc { .. })
    }

    pub fn is_terminate(self) -> bool {
        self == Action::TERMINATE
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind() {
            ActionKind::Conv { kernel, filters } => write!(f, "C({kernel},{filters})"),
            ActionKind::Pool { size, stride } => write!(f, "P({size},{stride})"),
            ActionKind::Fc { units } => write!(f, "FC({units})"),
            ActionKind::Terminate => f.write_str("SM"),
        }
    }
}

impl fmt::Debug for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Action {
    type Err = ArchError;

    fn from_str(token: &str) -> Result<Self, Self::Err> {
        let bad = || ArchError::Parse {
            token: token.to_string(),
        };
        if token == "SM" {
            return Ok(Action::TERMINATE);
        }
        let (head, rest) = token.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let nums = args
            .split(',')
            .map(|s| s.parse::<u32>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        let action = match (head, nums.as_slice()) {
            ("C", &[k, f]) => Action::conv(k, f),
            ("P", &[size, stride]) => {
                Action::pool(size).filter(|a| matches!(a.kind(), ActionKind::Pool { stride: s, .. } if s == stride))
            }
            ("FC", &[units]) => Action::fc(units),
            _ => None,
        };
        action.ok_or_else(bad)
    }
}

impl TryFrom<String> for Action {
    type Error = ArchError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Action> for String {
    fn from(a: Action) -> String {
        a.to_string()
    }
}

/// How pooling layers shrink the feature map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// `floor((n - size) / stride) + 1`
    #[default]
    Valid,
    /// `ceil((n - size) / stride) + 1`
    Ceil,
}

impl PoolMode {
    /// Output side length, or `None` when the window does not fit.
    pub fn output_size(self, input: u32, size: u32, stride: u32) -> Option<u32> {
        let span = input.checked_sub(size)?;
        Some(match self {
            PoolMode::Valid => span / stride + 1,
            PoolMode::Ceil => span.div_ceil(stride) + 1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub input_size: u32,
    pub input_channels: u32,
    pub num_classes: u32,
    /// The first fully connected layer needs a feature map side length
    /// strictly below this value.
    pub fc_rep_threshold: u32,
    /// Lower edges of the representation bins after the first; the default
    /// `[4, 8]` yields `[1,4)`, `[4,8)` and `[8,inf)`.
    pub rep_bin_edges: Vec<u32>,
    pub pool_mode: PoolMode,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            input_channels: 3,
            num_classes: 10,
            fc_rep_threshold: 8,
            rep_bin_edges: vec![4, 8],
            pool_mode: PoolMode::Valid,
        }
    }
}

impl SpaceConfig {
    pub fn rep_bin(&self, rep_size: u32) -> usize {
        rep_bin(rep_size, self)
    }

    pub fn num_rep_bins(&self) -> usize {
        self.rep_bin_edges.len() + 1
    }
}

/// Index of the representation bin containing `rep_size`.
pub fn rep_bin(rep_size: u32, cfg: &SpaceConfig) -> usize {
    debug_assert!(rep_size >= 1);
    cfg.rep_bin_edges.iter().take_while(|&&e| rep_size >= e).count()
}

/// Search-time restrictions layered on top of the structural rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraints {
    /// Maximum number of non-softmax layers.
    pub max_depth: usize,
    /// Terminate is withheld below this depth while other moves exist.
    pub min_depth: usize,
    /// Consecutive convolutions required before each pooling layer.
    pub min_convs_before_pool: usize,
}

impl Constraints {
    pub fn with_max_depth(max_depth: usize) -> Self {
        Self {
            max_depth,
            min_depth: 0,
            min_convs_before_pool: 0,
        }
    }
}

/// The rule an action violates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum Rule {
    #[error("no action may follow the softmax layer")]
    AfterTerminate,
    #[error("convolutions are not allowed after a fully connected layer")]
    ConvAfterFc,
    #[error("pooling must immediately follow a convolution")]
    PoolWithoutConv,
    #[error("pooling requires an earlier convolution with kernel size above one")]
    PoolBeforeWideKernel,
    #[error("pooling window {size} exceeds the {rep_size}x{rep_size} feature map")]
    PoolTooLarge { size: u32, rep_size: u32 },
    #[error("fully connected layers need a feature map smaller than {threshold}, got {rep_size}")]
    FcRepresentationTooLarge { rep_size: u32, threshold: u32 },
    #[error("at most two fully connected layers are allowed")]
    FcLimit,
    #[error("second fully connected layer has {units} units, more than the first ({first})")]
    FcWiderThanFirst { units: u32, first: u32 },
    #[error("depth cap of {max_depth} layers reached")]
    DepthCap { max_depth: usize },
    #[error("network must have at least {min_depth} layers before the softmax")]
    BelowMinDepth { min_depth: usize },
    #[error("pooling needs {required} consecutive convolutions, found {found}")]
    PoolSpacing { required: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ArchError {
    #[error("illegal action {action} after `{state}`: {rule}")]
    Illegal {
        action: Action,
        state: String,
        rule: Rule,
    },
    #[error("legal actions requested for terminal state `{0}`")]
    TerminalQuery(String),
    #[error("malformed layer token `{token}`")]
    Parse { token: String },
}

/// A partial or complete architecture.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchState {
    actions: Vec<Action>,
    depth: usize,
    rep_size: u32,
    channels: u32,
    fc_count: u8,
    first_fc_units: Option<u32>,
    has_widekernel_conv: bool,
    convs_since_pool: usize,
    terminal: bool,
    layer_params: Vec<u64>,
}

impl ArchState {
    /// The empty network on the configured input.
    pub fn new(cfg: &SpaceConfig) -> Self {
        Self {
            actions: Vec::new(),
            depth: 0,
            rep_size: cfg.input_size,
            channels: cfg.input_channels,
            fc_count: 0,
            first_fc_units: None,
            has_widekernel_conv: false,
            convs_since_pool: 0,
            terminal: false,
            layer_params: Vec::new(),
        }
    }

    /// Replays `actions` from the empty state, enforcing the structural rules.
    pub fn from_actions(actions: &[Action], cfg: &SpaceConfig) -> Result<Self, ArchError> {
        actions
            .iter()
            .try_fold(Self::new(cfg), |s, &a| s.apply(a, cfg))
    }

    /// Parses a grammar string and replays it.
    pub fn parse(text: &str, cfg: &SpaceConfig) -> Result<Self, ArchError> {
        Self::from_actions(&parse_actions(text)?, cfg)
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    /// Number of non-softmax layers.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn rep_size(&self) -> u32 {
        self.rep_size
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn fc_count(&self) -> usize {
        self.fc_count as usize
    }

    pub fn first_fc_units(&self) -> Option<u32> {
        self.first_fc_units
    }

    pub fn has_widekernel_conv(&self) -> bool {
        self.has_widekernel_conv
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Trainable parameters per layer, biases included.
    pub fn layer_params(&self) -> &[u64] {
        &self.layer_params
    }

    pub fn total_params(&self) -> u64 {
        self.layer_params.iter().sum()
    }

    pub fn last_action(&self) -> Option<Action> {
        self.actions.last().copied()
    }

    pub fn count_where(&self, pred: impl Fn(Action) -> bool) -> usize {
        self.actions.iter().filter(|&&a| pred(a)).count()
    }

    /// Layer sequence without the softmax.
    pub fn layers(&self) -> &[Action] {
        match self.actions.split_last() {
            Some((last, rest)) if last.is_terminate() => rest,
            _ => &self.actions,
        }
    }

    pub fn canonical_string(&self) -> String {
        canonical_string(&self.actions)
    }

    /// Checks the structural legality rules (no search-time constraints).
    pub fn check(&self, action: Action, cfg: &SpaceConfig) -> Result<(), Rule> {
        if self.terminal {
            return Err(Rule::AfterTerminate);
        }
        match action.kind() {
            ActionKind::Conv { .. } => {
                if self.fc_count > 0 {
                    return Err(Rule::ConvAfterFc);
                }
            }
            ActionKind::Pool { size, stride } => {
                if !self.last_action().is_some_and(Action::is_conv) {
                    return Err(Rule::PoolWithoutConv);
                }
                if !self.has_widekernel_conv {
                    return Err(Rule::PoolBeforeWideKernel);
                }
                if cfg.pool_mode.output_size(self.rep_size, size, stride).is_none() {
                    return Err(Rule::PoolTooLarge {
                        size,
                        rep_size: self.rep_size,
                    });
                }
            }
            ActionKind::Fc { units } => {
                if self.fc_count >= 2 {
                    return Err(Rule::FcLimit);
                }
                match self.first_fc_units {
                    Some(first) if units > first => {
                        return Err(Rule::FcWiderThanFirst { units, first });
                    }
                    Some(_) => {}
                    None if self.rep_size >= cfg.fc_rep_threshold => {
                        return Err(Rule::FcRepresentationTooLarge {
                            rep_size: self.rep_size,
                            threshold: cfg.fc_rep_threshold,
                        });
                    }
                    None => {}
                }
            }
            ActionKind::Terminate => {}
        }
        Ok(())
    }

    /// Checks the structural rules plus the search-time constraints.
    pub fn check_within(
        &self,
        action: Action,
        cfg: &SpaceConfig,
        limits: &Constraints,
    ) -> Result<(), Rule> {
        self.check(action, cfg)?;
        if action.is_terminate() {
            if self.depth < limits.min_depth {
                return Err(Rule::BelowMinDepth {
                    min_depth: limits.min_depth,
                });
            }
            return Ok(());
        }
        if self.depth >= limits.max_depth {
            return Err(Rule::DepthCap {
                max_depth: limits.max_depth,
            });
        }
        if action.is_pool() && self.convs_since_pool < limits.min_convs_before_pool {
            return Err(Rule::PoolSpacing {
                required: limits.min_convs_before_pool,
                found: self.convs_since_pool,
            });
        }
        Ok(())
    }

    /// Legal moves under a plain depth cap. At the cap only `Terminate`
    /// remains.
    pub fn legal_actions(
        &self,
        max_depth: usize,
        cfg: &SpaceConfig,
    ) -> Result<Vec<Action>, ArchError> {
        self.legal_actions_within(cfg, &Constraints::with_max_depth(max_depth))
    }

    /// Legal moves under the full constraint set, in action index order.
    ///
    /// Never empty for a non-terminal state: if the minimum depth would
    /// leave no move, `Terminate` is offered anyway.
    pub fn legal_actions_within(
        &self,
        cfg: &SpaceConfig,
        limits: &Constraints,
    ) -> Result<Vec<Action>, ArchError> {
        if self.terminal {
            return Err(ArchError::TerminalQuery(self.canonical_string()));
        }
        let legal: Vec<Action> = Action::all()
            .filter(|&a| self.check_within(a, cfg, limits).is_ok())
            .collect();
        if legal.is_empty() {
            return Ok(vec![Action::TERMINATE]);
        }
        Ok(legal)
    }

    /// Deterministic successor. Fails if a structural rule is violated.
    pub fn apply(&self, action: Action, cfg: &SpaceConfig) -> Result<ArchState, ArchError> {
        self.check(action, cfg).map_err(|rule| ArchError::Illegal {
            action,
            state: self.canonical_string(),
            rule,
        })?;
        let mut next = self.clone();
        next.actions.push(action);
        let in_features = u64::from(self.rep_size).pow(2) * u64::from(self.channels);
        match action.kind() {
            ActionKind::Conv { kernel, filters } => {
                let (k, f) = (u64::from(kernel), u64::from(filters));
                next.layer_params
                    .push(k * k * u64::from(self.channels) * f + f);
                next.channels = filters;
                next.has_widekernel_conv |= kernel > 1;
                next.convs_since_pool += 1;
                next.depth += 1;
            }
            ActionKind::Pool { size, stride } => {
                next.layer_params.push(0);
                next.rep_size = cfg
                    .pool_mode
                    .output_size(self.rep_size, size, stride)
                    .expect("window checked above");
                next.convs_since_pool = 0;
                next.depth += 1;
            }
            ActionKind::Fc { units } => {
                let u = u64::from(units);
                next.layer_params.push(in_features * u + u);
                next.rep_size = 1;
                next.channels = units;
                next.fc_count += 1;
                next.first_fc_units.get_or_insert(units);
                next.depth += 1;
            }
            ActionKind::Terminate => {
                let classes = u64::from(cfg.num_classes);
                next.layer_params.push(in_features * classes + classes);
                next.terminal = true;
            }
        }
        Ok(next)
    }
}

/// Joins layer tokens with `-`. Serialization does not check reachability.
pub fn canonical_string(actions: &[Action]) -> String {
    actions
        .iter()
        .map(Action::to_string)
        .collect::<Vec<_>>()
        .join("-")
}

/// Parses the grammar into raw actions without replaying legality.
pub fn parse_actions(text: &str) -> Result<Vec<Action>, ArchError> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split('-').map(str::parse).collect()
}
