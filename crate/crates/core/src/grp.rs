//! The full model: score features, projection of the backbone feature,
//! multi-scale convolutional fusion, and the ratio-weighted prediction head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbones::{glorot, Backbone, BackboneConfig};
use crate::compute::{Tape, Var};
use crate::data::BoundDataset;
use crate::distributions::{gumbel_mle_fit, DistKind, DistNet, MleConvention, DEFAULT_DELTA};
use crate::error::{GrpError, Result};
use crate::features::{sampling_scores, score_feature_on_tape};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Ratio features go straight into the fusion layer.
    MinusG,
    /// Fusion replaced by the mean of the three stacked vectors.
    MinusF,
    /// Head replaced by the plain sum of the fused vector.
    MinusD,
    /// The backbone's own prediction; no score features at all.
    BackboneOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::MinusG,
        Variant::MinusF,
        Variant::MinusD,
        Variant::BackboneOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::MinusG => "minus-g",
            Variant::MinusF => "minus-f",
            Variant::MinusD => "minus-d",
            Variant::BackboneOnly => "backbone-only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GrpError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GrpError::config(format!("unknown variant '{s}'")))
    }
}

/// How density parameters are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// Learned from the ratio feature.
    Dynamic,
    /// Fitted once per entity by maximum likelihood and frozen.
    Mle,
}

impl ParamMode {
    pub fn name(self) -> &'static str {
        match self {
            ParamMode::Dynamic => "dynamic",
            ParamMode::Mle => "mle",
        }
    }
}

impl fmt::Display for ParamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamMode {
    type Err = GrpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(ParamMode::Dynamic),
            "mle" => Ok(ParamMode::Mle),
            other => Err(GrpError::config(format!("unknown parameter mode '{other}'"))),
        }
    }
}

/// Column order of the stacked feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackOrder {
    /// `[p_u, p_i, t]`.
    UserItemInteraction,
    /// `[p_u, t, p_i]`, which puts `p_u` and `t` under one width-2 window.
    UserInteractionItem,
}

impl StackOrder {
    pub fn name(self) -> &'static str {
        match self {
            StackOrder::UserItemInteraction => "upt",
            StackOrder::UserInteractionItem => "utp",
        }
    }
}

impl FromStr for StackOrder {
    type Err = GrpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upt" => Ok(StackOrder::UserItemInteraction),
            "utp" => Ok(StackOrder::UserInteractionItem),
            other => Err(GrpError::config(format!(
                "unknown stack order '{other}' (expected upt or utp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub c: usize,
    pub filters_per_scale: usize,
    pub xi: f64,
    pub phi: f64,
    pub delta: f64,
    pub stack_order: StackOrder,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            c: 5,
            filters_per_scale: 16,
            xi: 1.0,
            phi: 0.0,
            delta: DEFAULT_DELTA,
            stack_order: StackOrder::UserItemInteraction,
        }
    }
}

impl FusionConfig {
    /// Total number of filters `K`.
    pub fn total_filters(&self) -> usize {
        3 * self.filters_per_scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 2 {
            return Err(GrpError::config("need at least two rating levels"));
        }
        if self.filters_per_scale == 0 {
            return Err(GrpError::config("filters per scale must be at least 1"));
        }
        if !self.xi.is_finite() || !self.phi.is_finite() {
            return Err(GrpError::config("xi and phi must be finite"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(GrpError::config("delta must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub backbone: BackboneConfig,
    pub dist: DistKind,
    pub variant: Variant,
    pub param_mode: ParamMode,
}

// ---------------------------------------------------------------------------
// Building blocks. Each works on tape nodes so it can be differentiated.

/// `t = W3·s + b3`.
pub fn project_interaction(t: &mut Tape, s: Var, w3: Var, b3: Var) -> Result<Var> {
    t.dense(w3, s, b3)
}

/// Stacks the three length-`c` vectors into a `c × 3` map.
pub fn stack_features(t: &mut Tape, p_u: Var, p_i: Var, proj: Var, order: StackOrder) -> Result<Var> {
    match order {
        StackOrder::UserItemInteraction => t.stack_columns(&[p_u, p_i, proj]),
        StackOrder::UserInteractionItem => t.stack_columns(&[p_u, proj, p_i]),
    }
}

/// One bank of same-width filters: `F × (c·width)` weights, each row a
/// `c × width` filter flattened row-major, and `F × 1` biases.
#[derive(Debug, Clone, Copy)]
pub struct FilterBank {
    pub width: usize,
    pub filters: ParamId,
    pub biases: ParamId,
}

/// Filter banks (widths 1, 2, 3) and the final fully connected layer.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub banks: Vec<FilterBank>,
    pub w4: ParamId,
    pub b4: ParamId,
}

impl FusionWeights {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.banks.iter().flat_map(|b| [b.filters, b.biases]).collect();
        ids.extend([self.w4, self.b4]);
        ids
    }
}

/// Convolves every filter over `z`, max-pools each, and maps the pooled
/// `K`-vector (bank order) to length `c`. Returns `(pooled, fused)`.
pub fn multiscale_fuse(
    t: &mut Tape,
    store: &ParamStore,
    z: Var,
    weights: &FusionWeights,
) -> Result<(Var, Var)> {
    let mut pooled = Vec::with_capacity(weights.banks.len());
    for bank in &weights.banks {
        let fv = t.param(store, bank.filters);
        let bv = t.param(store, bank.biases);
        let conv = t.conv_bank(z, fv, bv, bank.width)?;
        pooled.push(t.row_max(conv)?);
    }
    let h = t.concat(&pooled)?;
    let w4 = t.param(store, weights.w4);
    let b4 = t.param(store, weights.b4);
    let fused = t.dense(w4, h, b4)?;
    Ok((h, fused))
}

/// Joint affine map of `(q_u; q_i)` split back into `(o_u, o_i)`.
pub fn rating_weights(t: &mut Tape, q_u: Var, q_i: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let c = t.value(q_u).len();
    let q = t.concat(&[q_u, q_i])?;
    let o = t.dense(w, q, b)?;
    Ok((t.slice(o, 0, c)?, t.slice(o, c, c)?))
}

/// `o = ξ·o_u + φ·o_i`.
pub fn combine_weights(t: &mut Tape, o_u: Var, o_i: Var, xi: f64, phi: f64) -> Result<Var> {
    let a = t.scale(o_u, xi);
    let b = t.scale(o_i, phi);
    t.add(a, b)
}

/// `r̂ = Σ_k o_k · fused_k`.
pub fn predict(t: &mut Tape, o: Var, fused: Var) -> Result<Var> {
    t.dot(o, fused)
}

/// Arithmetic mean of equal-length vectors.
fn mean_of(t: &mut Tape, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = t.add(acc, p)?;
    }
    Ok(t.scale(acc, 1.0 / parts.len() as f64))
}

// ---------------------------------------------------------------------------

/// Per-example inputs taken from the training statistics.
#[derive(Debug, Clone, Copy)]
pub struct EntityInputs<'a> {
    pub user: usize,
    pub item: usize,
    pub q_u: &'a [f64],
    pub q_i: &'a [f64],
    pub mle_u: Option<(f64, f64)>,
    pub mle_i: Option<(f64, f64)>,
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub pred: Var,
    pub p_u: Option<Var>,
    pub p_i: Option<Var>,
    pub s_raw: Option<Var>,
    pub proj: Option<Var>,
    pub stacked: Option<Var>,
    pub pooled: Option<Var>,
    pub fused: Option<Var>,
}

/// Values of the intermediate features for one user-item pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub p_u: Vec<f64>,
    pub p_i: Vec<f64>,
    pub s_raw: Vec<f64>,
    pub t: Vec<f64>,
    pub z: Tensor,
    pub h_pooled: Vec<f64>,
    pub fused: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GrpModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub user_net: DistNet,
    pub item_net: DistNet,
    pub w3: ParamId,
    pub b3: ParamId,
    pub fusion: FusionWeights,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Frozen per-entity `(α̂, β̂)` for [`ParamMode::Mle`]; `None` falls back
    /// to the learned parameters.
    pub user_fits: Vec<Option<(f64, f64)>>,
    pub item_fits: Vec<Option<(f64, f64)>>,
}

const SMALL_INIT: f64 = 0.05;

fn small(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-SMALL_INIT..SMALL_INIT)).collect(),
    )
}

fn fit_entities(histories: &[Vec<u32>]) -> Vec<Option<(f64, f64)>> {
    histories
        .iter()
        .map(|h| {
            let first = *h.first()?;
            if h.iter().all(|&r| r == first) {
                return None;
            }
            let x: Vec<f64> = h.iter().map(|&r| r as f64).collect();
            gumbel_mle_fit(&x, MleConvention::MinimumCorrected)
                .ok()
                .map(|f| (f.alpha, f.beta))
        })
        .collect()
}

impl GrpModel {
    /// Creates every parameter in `store`.
    ///
    /// Initial values put the model near a sensible prediction: density `k`
    /// is centred on score `k`, the fused vector starts at the sampling
    /// scores (so `r̂` starts at the user's historical mean rating), and the
    /// head starts as the identity on `(q_u; q_i)`.
    pub fn new(
        store: &mut ParamStore,
        config: ModelConfig,
        num_users: usize,
        num_items: usize,
        global_mean: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.fusion.validate()?;
        if config.param_mode == ParamMode::Mle && config.dist != DistKind::Gumbel {
            return Err(GrpError::config(
                "maximum-likelihood parameter mode is only defined for the Gumbel density",
            ));
        }
        let c = config.fusion.c;
        let scores = sampling_scores(c);
        let backbone = Backbone::new(store, config.backbone, num_users, num_items, global_mean, rng)?;
        let delta = config.fusion.delta;
        let user_net = DistNet::new(store, "gumbel.user", config.dist, &scores, delta, rng)?;
        let item_net = DistNet::new(store, "gumbel.item", config.dist, &scores, delta, rng)?;
        let n = backbone.output_dim();
        let w3 = store.add("proj.w", glorot(c, n, rng));
        let b3_init = if config.variant == Variant::MinusF {
            scores.iter().map(|s| 3.0 * s).collect()
        } else {
            vec![0.0; c]
        };
        let b3 = store.add("proj.b", Tensor::vector(b3_init));
        let f = config.fusion.filters_per_scale;
        let mut banks = Vec::with_capacity(3);
        for width in 1..=3 {
            let data: Vec<f64> = (0..f).flat_map(|_| glorot(c, width, rng).into_vec()).collect();
            banks.push(FilterBank {
                width,
                filters: store.add(format!("fuse.f{width}.w"), Tensor::new(f, c * width, data)),
                biases: store.add(format!("fuse.f{width}.b"), Tensor::zeros(f, 1)),
            });
        }
        let k_total = config.fusion.total_filters();
        let w4 = store.add("fuse.out.w", small(c, k_total, rng));
        let b4_init = if config.variant == Variant::MinusD {
            vec![global_mean / c as f64; c]
        } else {
            scores.clone()
        };
        let b4 = store.add("fuse.out.b", Tensor::vector(b4_init));
        let head_w = store.add("head.w", Tensor::identity(2 * c));
        let head_b = store.add("head.b", Tensor::zeros(2 * c, 1));
        Ok(GrpModel {
            config,
            backbone,
            user_net,
            item_net,
            w3,
            b3,
            fusion: FusionWeights { banks, w4, b4 },
            head_w,
            head_b,
            user_fits: Vec::new(),
            item_fits: Vec::new(),
        })
    }

    /// Builds a model sized for `ds`, fitting per-entity parameters when the
    /// mode asks for it.
    pub fn for_dataset(
        store: &mut ParamStore,
        config: ModelConfig,
        ds: &BoundDataset,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.fusion.c != ds.c {
            return Err(GrpError::config(format!(
                "model has {} levels but the dataset has {}",
                config.fusion.c, ds.c
            )));
        }
        let mut model = GrpModel::new(store, config, ds.num_users(), ds.num_items(), ds.train_mean, rng)?;
        if config.param_mode == ParamMode::Mle {
            model.user_fits = fit_entities(&ds.user_histories);
            model.item_fits = fit_entities(&ds.item_histories);
            let fitted = model.user_fits.iter().filter(|f| f.is_some()).count();
            log::info!(
                "fitted static Gumbel parameters for {fitted} of {} users",
                model.user_fits.len()
            );
        }
        Ok(model)
    }

    pub fn inputs<'a>(&self, ds: &'a BoundDataset, user: usize, item: usize) -> EntityInputs<'a> {
        let ur = user.min(ds.num_users());
        let ir = item.min(ds.num_items());
        EntityInputs {
            user,
            item,
            q_u: &ds.user_ratios[ur].q,
            q_i: &ds.item_ratios[ir].q,
            mle_u: self.user_fits.get(ur).copied().flatten(),
            mle_i: self.item_fits.get(ir).copied().flatten(),
        }
    }

    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        self.backbone.param_ids()
    }

    pub fn gumbel_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.user_net.param_ids().to_vec();
        ids.extend(self.item_net.param_ids());
        ids
    }

    /// Smallest scale (and shape, where used) produced for any entity in
    /// `ds`. Positivity holds when this is at least `delta`.
    pub fn min_guarded_param(&self, store: &ParamStore, ds: &BoundDataset) -> Result<f64> {
        let mut lo = f64::INFINITY;
        let mut t = Tape::inference();
        let pairs = [(&self.user_net, &ds.user_ratios, &self.user_fits), (&self.item_net, &ds.item_ratios, &self.item_fits)];
        for (net, ratios, fits) in pairs {
            for (e, r) in ratios.iter().enumerate() {
                if let (ParamMode::Mle, Some(Some((_, beta)))) = (self.config.param_mode, fits.get(e)) {
                    lo = lo.min(*beta);
                    continue;
                }
                t.reset();
                let q = t.constant_vector(&r.q);
                let p = net.forward(&mut t, store, q)?;
                let mut channels = vec![p.scale];
                channels.extend(p.shape);
                for v in channels {
                    lo = t.value(v).as_slice().iter().fold(lo, |a, &b| a.min(b));
                }
            }
        }
        Ok(lo)
    }

    fn score_feature(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        net: &DistNet,
        q: Var,
        scores: Var,
        fit: Option<(f64, f64)>,
    ) -> Result<Var> {
        match (self.config.param_mode, fit) {
            (ParamMode::Mle, Some((alpha, beta))) => {
                let c = self.config.fusion.c;
                let a = t.constant(Tensor::filled(c, 1, alpha));
                let b = t.constant(Tensor::filled(c, 1, beta));
                t.density(DistKind::Gumbel, scores, Some(a), b, None)
            }
            _ => score_feature_on_tape(t, store, net, q, scores),
        }
    }

    /// Records one prediction on `t`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: &EntityInputs<'_>) -> Result<ForwardVars> {
        let variant = self.config.variant;
        if variant == Variant::BackboneOnly {
            let pred = self.backbone.standalone(t, store, x.user, x.item)?;
            return Ok(ForwardVars {
                pred,
                p_u: None,
                p_i: None,
                s_raw: None,
                proj: None,
                stacked: None,
                pooled: None,
                fused: None,
            });
        }
        let fc = &self.config.fusion;
        let q_u = t.constant_vector(x.q_u);
        let q_i = t.constant_vector(x.q_i);
        let (p_u, p_i) = if variant == Variant::MinusG {
            (q_u, q_i)
        } else {
            let scores = t.constant_vector(&sampling_scores(fc.c));
            (
                self.score_feature(t, store, &self.user_net, q_u, scores, x.mle_u)?,
                self.score_feature(t, store, &self.item_net, q_i, scores, x.mle_i)?,
            )
        };
        let s = self.backbone.interaction(t, store, x.user, x.item)?;
        let w3 = t.param(store, self.w3);
        let b3 = t.param(store, self.b3);
        let proj = project_interaction(t, s, w3, b3)?;
        let stacked = stack_features(t, p_u, p_i, proj, fc.stack_order)?;
        let (pooled, fused) = if variant == Variant::MinusF {
            (None, mean_of(t, &[p_u, p_i, proj])?)
        } else {
            let (h, f) = multiscale_fuse(t, store, stacked, &self.fusion)?;
            (Some(h), f)
        };
        let pred = if variant == Variant::MinusD {
            t.sum(fused)
        } else {
            let w = t.param(store, self.head_w);
            let b = t.param(store, self.head_b);
            let (o_u, o_i) = rating_weights(t, q_u, q_i, w, b)?;
            let o = combine_weights(t, o_u, o_i, fc.xi, fc.phi)?;
            predict(t, o, fused)?
        };
        Ok(ForwardVars {
            pred,
            p_u: Some(p_u),
            p_i: Some(p_i),
            s_raw: Some(s),
            proj: Some(proj),
            stacked: Some(stacked),
            pooled,
            fused: Some(fused),
        })
    }

    /// Raw (unclipped) prediction for one pair.
    pub fn predict_one(&self, store: &ParamStore, x: &EntityInputs<'_>) -> Result<f64> {
        let mut t = Tape::inference();
        let out = self.forward(&mut t, store, x)?;
        Ok(t.scalar(out.pred))
    }

    /// Intermediate feature values; `None` for the backbone-only variant.
    pub fn feature_bundle(&self, store: &ParamStore, x: &EntityInputs<'_>) -> Result<Option<FeatureBundle>> {
        let mut t = Tape::inference();
        let out = self.forward(&mut t, store, x)?;
        let vec_of = |v: Option<Var>| v.map(|v| t.value(v).as_slice().to_vec()).unwrap_or_default();
        let Some(stacked) = out.stacked else {
            return Ok(None);
        };
        Ok(Some(FeatureBundle {
            p_u: vec_of(out.p_u),
            p_i: vec_of(out.p_i),
            s_raw: vec_of(out.s_raw),
            t: vec_of(out.proj),
            z: t.value(stacked).clone(),
            h_pooled: vec_of(out.pooled),
            fused: vec_of(out.fused),
        }))
    }
}
