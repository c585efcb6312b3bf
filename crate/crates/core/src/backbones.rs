//! Rating-based backbones that supply the interaction feature `s`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::compute::{Tape, Var};
use crate::error::{GrpError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Pmf,
    NeuMf,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Pmf => "pmf",
            BackboneKind::NeuMf => "neumf",
        }
    }

    /// Display label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            BackboneKind::Pmf => "PMF",
            BackboneKind::NeuMf => "NeuMF",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = GrpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pmf" => Ok(BackboneKind::Pmf),
            "neumf" => Ok(BackboneKind::NeuMf),
            other => Err(GrpError::config(format!("unknown backbone '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Latent dimension `d`.
    pub dim: usize,
    /// Output width `m` of the NeuMF MLP branch.
    pub mlp_out: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Pmf,
            dim: 32,
            mlp_out: 16,
        }
    }
}

/// Latent vectors and biases. Row `num_users` / `num_items` is the
/// cold-start row shared by every unseen ID.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub num_users: usize,
    pub num_items: usize,
    pub users: ParamId,
    pub items: ParamId,
    pub user_bias: ParamId,
    pub item_bias: ParamId,
    pub global_bias: ParamId,
}

const EMBED_INIT: f64 = 0.05;

fn uniform_table(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect(),
    )
}

/// Glorot-uniform `rows × cols` weight matrix.
pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform_table(rows, cols, limit, rng)
}

impl EmbeddingTable {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        num_users: usize,
        num_items: usize,
        dim: usize,
        global_mean: f64,
        rng: &mut impl Rng,
    ) -> Self {
        EmbeddingTable {
            num_users,
            num_items,
            users: store.add_table(
                format!("{prefix}.user_emb"),
                uniform_table(num_users + 1, dim, EMBED_INIT, rng),
            ),
            items: store.add_table(
                format!("{prefix}.item_emb"),
                uniform_table(num_items + 1, dim, EMBED_INIT, rng),
            ),
            user_bias: store.add_table(format!("{prefix}.user_bias"), Tensor::zeros(num_users + 1, 1)),
            item_bias: store.add_table(format!("{prefix}.item_bias"), Tensor::zeros(num_items + 1, 1)),
            global_bias: store.add(format!("{prefix}.global_bias"), Tensor::scalar(global_mean)),
        }
    }

    pub fn user_row(&self, user: usize) -> usize {
        user.min(self.num_users)
    }

    pub fn item_row(&self, item: usize) -> usize {
        item.min(self.num_items)
    }

    /// `b_u + b_i + g` as a scalar node.
    fn bias_sum(&self, t: &mut Tape, store: &ParamStore, user: usize, item: usize) -> Result<Var> {
        let bu = t.param_row(store, self.user_bias, self.user_row(user));
        let bi = t.param_row(store, self.item_bias, self.item_row(item));
        let g = t.param(store, self.global_bias);
        let (bu, bi) = (t.sum(bu), t.sum(bi));
        t.add_n(&[bu, bi, g])
    }

    fn ids(&self) -> [ParamId; 5] {
        [self.users, self.items, self.user_bias, self.item_bias, self.global_bias]
    }
}

/// MLP branch of NeuMF: its own embeddings, one ReLU hidden layer of width
/// `2d`, and a linear output of width `m`.
#[derive(Debug, Clone)]
pub struct MlpBranch {
    pub users: ParamId,
    pub items: ParamId,
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub table: EmbeddingTable,
    pub mlp: Option<MlpBranch>,
    /// NeuMF only: `1 × (d + m)` projection for standalone predictions.
    pub predict_w: Option<ParamId>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        config: BackboneConfig,
        num_users: usize,
        num_items: usize,
        global_mean: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.dim == 0 || (config.kind == BackboneKind::NeuMf && config.mlp_out == 0) {
            return Err(GrpError::config("backbone dimensions must be positive"));
        }
        let d = config.dim;
        let prefix = config.kind.name();
        let table = EmbeddingTable::new(store, prefix, num_users, num_items, d, global_mean, rng);
        let (mlp, predict_w) = match config.kind {
            BackboneKind::Pmf => (None, None),
            BackboneKind::NeuMf => {
                let m = config.mlp_out;
                let mlp = MlpBranch {
                    users: store.add_table(
                        "neumf.mlp.user_emb",
                        uniform_table(num_users + 1, d, EMBED_INIT, rng),
                    ),
                    items: store.add_table(
                        "neumf.mlp.item_emb",
                        uniform_table(num_items + 1, d, EMBED_INIT, rng),
                    ),
                    hidden_w: store.add("neumf.mlp.hidden.w", glorot(2 * d, 2 * d, rng)),
                    hidden_b: store.add("neumf.mlp.hidden.b", Tensor::zeros(2 * d, 1)),
                    out_w: store.add("neumf.mlp.out.w", glorot(m, 2 * d, rng)),
                    out_b: store.add("neumf.mlp.out.b", Tensor::zeros(m, 1)),
                };
                let pw = store.add("neumf.predict.w", glorot(1, d + m, rng));
                (Some(mlp), Some(pw))
            }
        };
        Ok(Backbone {
            config,
            table,
            mlp,
            predict_w,
        })
    }

    /// Length `n` of the interaction feature.
    pub fn output_dim(&self) -> usize {
        match self.config.kind {
            BackboneKind::Pmf => self.config.dim,
            BackboneKind::NeuMf => self.config.dim + self.config.mlp_out,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.table.ids().to_vec();
        if let Some(m) = &self.mlp {
            ids.extend([m.users, m.items, m.hidden_w, m.hidden_b, m.out_w, m.out_b]);
        }
        ids.extend(self.predict_w);
        ids
    }

    /// Elementwise product of the user and item latent vectors.
    fn product_branch(&self, t: &mut Tape, store: &ParamStore, user: usize, item: usize) -> Result<Var> {
        let pu = t.param_row(store, self.table.users, self.table.user_row(user));
        let qi = t.param_row(store, self.table.items, self.table.item_row(item));
        t.mul(pu, qi)
    }

    /// Interaction feature `s_{u,i}`.
    pub fn interaction(&self, t: &mut Tape, store: &ParamStore, user: usize, item: usize) -> Result<Var> {
        let product = self.product_branch(t, store, user, item)?;
        let Some(mlp) = &self.mlp else {
            return Ok(product);
        };
        let eu = t.param_row(store, mlp.users, self.table.user_row(user));
        let ei = t.param_row(store, mlp.items, self.table.item_row(item));
        let x = t.concat(&[eu, ei])?;
        let hw = t.param(store, mlp.hidden_w);
        let hb = t.param(store, mlp.hidden_b);
        let pre = t.dense(hw, x, hb)?;
        let hidden = t.relu(pre);
        let ow = t.param(store, mlp.out_w);
        let ob = t.param(store, mlp.out_b);
        let out = t.dense(ow, hidden, ob)?;
        t.concat(&[product, out])
    }

    /// Rating predicted by the backbone alone.
    pub fn standalone(&self, t: &mut Tape, store: &ParamStore, user: usize, item: usize) -> Result<Var> {
        let s = self.interaction(t, store, user, item)?;
        let core = match self.predict_w {
            None => t.sum(s),
            Some(pw) => {
                let w = t.param(store, pw);
                let zero = t.constant(Tensor::scalar(0.0));
                let v = t.dense(w, s, zero)?;
                t.sum(v)
            }
        };
        let biases = self.table.bias_sum(t, store, user, item)?;
        t.add_n(&[core, biases])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(kind: BackboneKind, d: usize, m: usize, seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BackboneConfig { kind, dim: d, mlp_out: m };
        let b = Backbone::new(&mut store, cfg, 3, 4, 3.5, &mut rng).unwrap();
        (store, b)
    }

    fn eval(b: &Backbone, store: &ParamStore, u: usize, i: usize) -> (Vec<f64>, f64) {
        let mut t = Tape::inference();
        let s = b.interaction(&mut t, store, u, i).unwrap();
        let p = b.standalone(&mut t, store, u, i).unwrap();
        (t.value(s).as_slice().to_vec(), t.scalar(p))
    }

    #[test]
    fn pmf_unit_latents() {
        let d = 4;
        let (mut store, b) = build(BackboneKind::Pmf, d, 0, 1);
        let v = 1.0 / (d as f64).sqrt();
        store.value_mut(b.table.users).fill(v);
        store.value_mut(b.table.items).fill(v);
        store.value_mut(b.table.user_bias).fill(0.25);
        store.value_mut(b.table.item_bias).fill(-0.5);
        let (s, pred) = eval(&b, &store, 0, 1);
        for x in &s {
            assert!((x - 1.0 / d as f64).abs() < 1e-15);
        }
        assert!((pred - (1.0 + 0.25 - 0.5 + 3.5)).abs() < 1e-12);
    }

    #[test]
    fn pmf_zero_item_gives_zero_interaction() {
        let (mut store, b) = build(BackboneKind::Pmf, 4, 0, 2);
        store.value_mut(b.table.items).fill(0.0);
        let (s, _) = eval(&b, &store, 2, 3);
        assert!(s.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pmf_prediction_is_dot_plus_biases() {
        let (mut store, b) = build(BackboneKind::Pmf, 6, 0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for id in [b.table.user_bias, b.table.item_bias] {
            for v in store.value_mut(id).as_mut_slice() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        for (u, i) in [(0, 0), (1, 3), (2, 2)] {
            let pu = store.value(b.table.users).row(u);
            let qi = store.value(b.table.items).row(i);
            let dot: f64 = pu.iter().zip(qi).map(|(a, b)| a * b).sum();
            let expected = dot
                + store.value(b.table.user_bias).get(u, 0)
                + store.value(b.table.item_bias).get(i, 0)
                + 3.5;
            let (_, pred) = eval(&b, &store, u, i);
            assert!((pred - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_ids_use_cold_start_row() {
        let (store, b) = build(BackboneKind::Pmf, 4, 0, 4);
        assert_eq!(eval(&b, &store, 3, 4), eval(&b, &store, 99, 1000));
    }

    #[test]
    fn neumf_shape_and_determinism() {
        let (store, b) = build(BackboneKind::NeuMf, 4, 3, 5);
        let (s, p) = eval(&b, &store, 1, 2);
        assert_eq!(s.len(), 4 + 3);
        assert_eq!(b.output_dim(), 7);
        assert_eq!((s.clone(), p), eval(&b, &store, 1, 2));
    }

    #[test]
    fn neumf_gradients_match_finite_differences() {
        let (mut store, b) = build(BackboneKind::NeuMf, 4, 3, 6);
        // Larger latents so the hidden ReLUs sit away from their kinks.
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for id in b.param_ids() {
            for v in store.value_mut(id).as_mut_slice() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        for (u, i, r) in [(0, 1, 5.0), (2, 3, 1.0)] {
            let report = grad_check_params(
                |t, s| {
                    let p = b.standalone(t, s, u, i)?;
                    t.square_loss(p, r)
                },
                &store,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }
}
