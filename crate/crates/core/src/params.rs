//! Named trainable parameters and their gradient accumulators.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Row-sparse tables (embeddings) only update rows that received gradient.
    pub sparse_rows: bool,
    pub frozen: bool,
    touched: Vec<bool>,
}

impl Param {
    pub fn touched_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.touched
            .iter()
            .enumerate()
            .filter_map(|(r, &t)| t.then_some(r))
    }

    pub fn is_row_touched(&self, row: usize) -> bool {
        self.touched.get(row).copied().unwrap_or(false)
    }

    pub(crate) fn mark_row(&mut self, row: usize) {
        if self.sparse_rows {
            self.touched[row] = true;
        }
    }

    pub(crate) fn clear_grad(&mut self) {
        if self.sparse_rows {
            let cols = self.grad.cols();
            for r in 0..self.touched.len() {
                if self.touched[r] {
                    self.grad.as_mut_slice()[r * cols..(r + 1) * cols].fill(0.0);
                    self.touched[r] = false;
                }
            }
        } else {
            self.grad.fill(0.0);
        }
    }
}

/// Owns every trainable tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    /// Adds a lookup table whose rows are fetched individually.
    pub fn add_table(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    fn push(&mut self, name: String, value: Tensor, sparse_rows: bool) -> ParamId {
        let grad = Tensor::zeros(value.rows(), value.cols());
        let touched = if sparse_rows { vec![false; value.rows()] } else { Vec::new() };
        self.params.push(Param {
            name,
            value,
            grad,
            sparse_rows,
            frozen: false,
            touched,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::clear_grad);
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        let p = &mut self.params[id.0];
        p.grad.add_assign(grad);
        if p.sparse_rows {
            p.touched.iter_mut().for_each(|t| *t = true);
        }
    }

    pub(crate) fn accumulate_row(&mut self, id: ParamId, row: usize, grad: &[f64]) {
        let p = &mut self.params[id.0];
        for (g, d) in p.grad.row_mut(row).iter_mut().zip(grad) {
            *g += d;
        }
        p.mark_row(row);
    }

    /// Copies parameter values (not gradients) from a snapshot of the same layout.
    pub fn load_values(&mut self, other: &ParamStore) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}
