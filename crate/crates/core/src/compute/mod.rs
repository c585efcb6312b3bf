//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! then walks the nodes in exact reverse order of recording and applies
//! each primitive's local gradient rule. Values are plain `f64`
//! scalars, vectors (`n × 1`) or matrices; batching is a loop in the
//! caller, never a dimension inside a primitive.
//!
//! Parameters enter a tape through [`Tape::param`] / [`Tape::param_row`].
//! Those leaves remember where they came from, so after `backward` the
//! accumulated gradients can be scattered back with
//! [`Tape::accumulate_into`].

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};

use std::collections::HashMap;

use crate::distributions::{self, DistKind};
use crate::error::{GrpError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Binding {
    None,
    Param(ParamId),
    Row(ParamId, usize),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense { w: Var, x: Var, b: Var },
    Relu(Var),
    AddConst(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Sum(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    StackColumns(Vec<Var>),
    Conv { z: Var, filter: Var, bias: Var },
    MaxPool { v: Var, argmax: usize },
    ConvBank { z: Var, filters: Var, biases: Var, width: usize },
    RowMax { m: Var, argmax: Vec<usize> },
    Density(Box<DensityNode>),
    SquareLoss { pred: Var, target: f64 },
    AddN(Vec<Var>),
}

#[derive(Debug, Clone)]
struct DensityNode {
    x: Var,
    loc: Option<Var>,
    scale: Var,
    shape: Option<Var>,
    /// Per element: d/dx, d/dloc, d/dscale, d/dshape.
    partials: Vec<[f64; 4]>,
}

/// Recorded computation. One `backward` per forward; call [`Tape::reset`]
/// to reuse the allocation.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    ops: Vec<Op>,
    bindings: Vec<Binding>,
    /// Indexed by parameter id.
    param_leaves: Vec<Option<Var>>,
    row_leaves: HashMap<(ParamId, usize), Var>,
    no_grad: bool,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only; `backward` is rejected.
    pub fn inference() -> Self {
        Tape {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn reset(&mut self) {
        self.values.clear();
        self.grads.clear();
        self.ops.clear();
        self.bindings.clear();
        self.param_leaves.clear();
        self.row_leaves.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0].item()
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op, binding: Binding) -> Var {
        if !self.no_grad {
            self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        }
        self.values.push(value);
        self.ops.push(op);
        self.bindings.push(binding);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Binding::None)
    }

    pub fn constant_vector(&mut self, data: &[f64]) -> Var {
        self.constant(Tensor::vector(data.to_vec()))
    }

    /// Leaf holding the current value of a whole parameter. Repeated calls
    /// within one tape return the same node, so gradients from several
    /// examples accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if let Some(Some(v)) = self.param_leaves.get(i) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, Binding::Param(id));
        if self.param_leaves.len() <= i {
            self.param_leaves.resize(i + 1, None);
        }
        self.param_leaves[i] = Some(v);
        v
    }

    /// Leaf holding one row of a table parameter, as a column vector.
    pub fn param_row(&mut self, store: &ParamStore, id: ParamId, row: usize) -> Var {
        if let Some(&v) = self.row_leaves.get(&(id, row)) {
            return v;
        }
        let data = store.value(id).row(row).to_vec();
        let v = self.push(Tensor::vector(data), Op::Leaf, Binding::Row(id, row));
        self.row_leaves.insert((id, row), v);
        v
    }

    fn check_vector(&self, v: Var, what: &str) -> Result<usize> {
        let t = &self.values[v.0];
        if !t.is_vector() {
            return Err(GrpError::dim(format!(
                "{what}: expected a column vector, got {}x{}",
                t.rows(),
                t.cols()
            )));
        }
        Ok(t.rows())
    }

    fn check_same_len(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let n = self.check_vector(a, what)?;
        let m = self.check_vector(b, what)?;
        if n != m {
            return Err(GrpError::dim(format!("{what}: lengths {n} and {m} differ")));
        }
        Ok(n)
    }

    /// `W x + b`.
    pub fn dense(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.values[w.0].shape();
        let xn = self.check_vector(x, "dense input")?;
        let bm = self.check_vector(b, "dense bias")?;
        if xn != n || bm != m {
            return Err(GrpError::dim(format!(
                "dense: W is {m}x{n}, x has {xn}, b has {bm}"
            )));
        }
        let wv = self.values[w.0].as_slice();
        let xv = self.values[x.0].as_slice();
        let bv = self.values[b.0].as_slice();
        let out: Vec<f64> = (0..m)
            .map(|r| {
                let row = &wv[r * n..(r + 1) * n];
                bv[r] + row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(self.push(Tensor::vector(out), Op::Dense { w, x, b }, Binding::None))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let src = &self.values[x.0];
        let data = src.as_slice().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(src.rows(), src.cols(), data);
        self.push(out, Op::Relu(x), Binding::None)
    }

    /// `x + c` for a constant scalar `c`.
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let src = &self.values[x.0];
        let data = src.as_slice().iter().map(|&v| v + c).collect();
        let out = Tensor::new(src.rows(), src.cols(), data);
        self.push(out, Op::AddConst(x), Binding::None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(GrpError::dim("add: shapes differ"));
        }
        let va = &self.values[a.0];
        let data = va
            .as_slice()
            .iter()
            .zip(self.values[b.0].as_slice())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.rows(), va.cols(), data);
        Ok(self.push(out, Op::Add(a, b), Binding::None))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let src = &self.values[x.0];
        let data = src.as_slice().iter().map(|&v| v * s).collect();
        let out = Tensor::new(src.rows(), src.cols(), data);
        self.push(out, Op::Scale(x, s), Binding::None)
    }

    /// Elementwise product of two equal-length vectors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_len(a, b, "mul")?;
        let data = self.values[a.0]
            .as_slice()
            .iter()
            .zip(self.values[b.0].as_slice())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::vector(data), Op::Mul(a, b), Binding::None))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].as_slice().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), Binding::None)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_len(a, b, "dot")?;
        let s = self.values[a.0]
            .as_slice()
            .iter()
            .zip(self.values[b.0].as_slice())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), Binding::None))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            self.check_vector(p, "concat")?;
            data.extend_from_slice(self.values[p.0].as_slice());
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::Concat(parts.to_vec()),
            Binding::None,
        ))
    }

    /// Elements `start..start + len` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.check_vector(x, "slice")?;
        if start + len > n {
            return Err(GrpError::dim(format!(
                "slice {start}..{} out of range for length {n}",
                start + len
            )));
        }
        let data = self.values[x.0].as_slice()[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Slice { x, start }, Binding::None))
    }

    /// Places equal-length vectors side by side as the columns of a matrix.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        let first = *cols
            .first()
            .ok_or_else(|| GrpError::dim("stack of zero columns"))?;
        let rows = self.check_vector(first, "stack")?;
        for &c in cols {
            if self.check_vector(c, "stack")? != rows {
                return Err(GrpError::dim("stack: column lengths differ"));
            }
        }
        let k = cols.len();
        let mut out = Tensor::zeros(rows, k);
        for (j, &c) in cols.iter().enumerate() {
            for (r, &v) in self.values[c.0].as_slice().iter().enumerate() {
                out.set(r, j, v);
            }
        }
        Ok(self.push(out, Op::StackColumns(cols.to_vec()), Binding::None))
    }

    /// Full-height valid convolution: `filter` spans every row of `z` and
    /// slides along its columns. `bias` is a scalar node.
    pub fn conv_full_height(&mut self, z: Var, filter: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.values[z.0].shape();
        let (fr, width) = self.values[filter.0].shape();
        if !(1..=3).contains(&width) {
            return Err(GrpError::config(format!(
                "convolution width must be 1, 2 or 3, got {width}"
            )));
        }
        if fr != rows {
            return Err(GrpError::dim(format!(
                "filter height {fr} does not match feature map height {rows}"
            )));
        }
        if width > cols {
            return Err(GrpError::dim(format!(
                "filter width {width} exceeds {cols} columns"
            )));
        }
        if self.values[bias.0].len() != 1 {
            return Err(GrpError::dim("convolution bias must be a scalar"));
        }
        let zt = &self.values[z.0];
        let ft = &self.values[filter.0];
        let b = self.values[bias.0].item();
        let out: Vec<f64> = (0..=cols - width)
            .map(|j| {
                let mut acc = b;
                for r in 0..rows {
                    for k in 0..width {
                        acc += ft.get(r, k) * zt.get(r, j + k);
                    }
                }
                acc
            })
            .collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::Conv { z, filter, bias },
            Binding::None,
        ))
    }

    /// Maximum element. Ties resolve to the lowest index, which alone
    /// receives gradient.
    pub fn max_pool(&mut self, v: Var) -> Result<Var> {
        let data = self.values[v.0].as_slice();
        if data.is_empty() {
            return Err(GrpError::dim("max-pool over an empty vector"));
        }
        let mut argmax = 0;
        for (i, &x) in data.iter().enumerate() {
            if x > data[argmax] {
                argmax = i;
            }
        }
        let m = data[argmax];
        Ok(self.push(Tensor::scalar(m), Op::MaxPool { v, argmax }, Binding::None))
    }

    /// `F` full-height filters of one width applied at once. Row `f` of
    /// `filters` is filter `f` flattened row-major (`rows × width`);
    /// `biases` has one entry per filter. The result is `F × (cols − width + 1)`,
    /// row `f` equal to `conv_full_height` with filter `f`.
    pub fn conv_bank(&mut self, z: Var, filters: Var, biases: Var, width: usize) -> Result<Var> {
        let (rows, cols) = self.values[z.0].shape();
        let (nf, flat) = self.values[filters.0].shape();
        if !(1..=3).contains(&width) {
            return Err(GrpError::config(format!(
                "convolution width must be 1, 2 or 3, got {width}"
            )));
        }
        if flat != rows * width {
            return Err(GrpError::dim(format!(
                "filter bank rows have {flat} entries, expected {rows}x{width}"
            )));
        }
        if width > cols {
            return Err(GrpError::dim(format!(
                "filter width {width} exceeds {cols} columns"
            )));
        }
        if self.values[biases.0].shape() != (nf, 1) {
            return Err(GrpError::dim(format!("filter bank needs {nf} biases")));
        }
        let zt = self.values[z.0].as_slice();
        let ft = self.values[filters.0].as_slice();
        let bt = self.values[biases.0].as_slice();
        let out_cols = cols - width + 1;
        let mut out = Vec::with_capacity(nf * out_cols);
        for f in 0..nf {
            let fr = &ft[f * flat..(f + 1) * flat];
            for j in 0..out_cols {
                let mut acc = bt[f];
                for r in 0..rows {
                    for k in 0..width {
                        acc += fr[r * width + k] * zt[r * cols + j + k];
                    }
                }
                out.push(acc);
            }
        }
        Ok(self.push(
            Tensor::new(nf, out_cols, out),
            Op::ConvBank { z, filters, biases, width },
            Binding::None,
        ))
    }

    /// Maximum of each row, as a column vector. Ties go to the lowest
    /// column, matching [`Tape::max_pool`].
    pub fn row_max(&mut self, m: Var) -> Result<Var> {
        let t = &self.values[m.0];
        let (rows, cols) = t.shape();
        if cols == 0 {
            return Err(GrpError::dim("max-pool over an empty vector"));
        }
        let mut argmax = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let mut a = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[a] {
                    a = i;
                }
            }
            argmax.push(a);
            out.push(row[a]);
        }
        Ok(self.push(Tensor::vector(out), Op::RowMax { m, argmax }, Binding::None))
    }

    /// Elementwise density of `kind` at `x`. `loc` and `shape` must be given
    /// exactly when the kind uses them. Positivity of `scale`/`shape` is the
    /// caller's job (see [`crate::distributions::DistNet`]).
    pub fn density(
        &mut self,
        kind: DistKind,
        x: Var,
        loc: Option<Var>,
        scale: Var,
        shape: Option<Var>,
    ) -> Result<Var> {
        let n = self.check_vector(x, "density x")?;
        if kind.uses_location() != loc.is_some() || kind.uses_shape() != shape.is_some() {
            return Err(GrpError::config(format!(
                "{kind} density given the wrong parameter channels"
            )));
        }
        for p in [loc, Some(scale), shape].into_iter().flatten() {
            if self.check_vector(p, "density parameter")? != n {
                return Err(GrpError::dim("density parameters must match x in length"));
            }
        }
        let xs = self.values[x.0].as_slice();
        let scales = self.values[scale.0].as_slice();
        let mut out = Vec::with_capacity(n);
        let mut partials = Vec::with_capacity(n);
        for i in 0..n {
            let l = loc.map_or(0.0, |v| self.values[v.0].as_slice()[i]);
            let s = shape.map_or(0.0, |v| self.values[v.0].as_slice()[i]);
            if scales[i] <= 0.0 || (kind.uses_shape() && s <= 0.0) {
                return Err(GrpError::Domain(format!(
                    "{kind} needs positive scale/shape, got scale {} shape {s}",
                    scales[i]
                )));
            }
            let e = distributions::density(kind, xs[i], l, scales[i], s);
            out.push(e.value);
            partials.push([e.d_x, e.d_loc, e.d_scale, e.d_shape]);
        }
        let node = DensityNode {
            x,
            loc,
            scale,
            shape,
            partials,
        };
        Ok(self.push(
            Tensor::vector(out),
            Op::Density(Box::new(node)),
            Binding::None,
        ))
    }

    /// `(pred − target)²` for a scalar prediction.
    pub fn square_loss(&mut self, pred: Var, target: f64) -> Result<Var> {
        if self.values[pred.0].len() != 1 {
            return Err(GrpError::dim("square loss expects a scalar prediction"));
        }
        let d = self.values[pred.0].item() - target;
        Ok(self.push(
            Tensor::scalar(d * d),
            Op::SquareLoss { pred, target },
            Binding::None,
        ))
    }

    /// Sum of scalar nodes.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for &t in terms {
            if self.values[t.0].len() != 1 {
                return Err(GrpError::dim("add_n expects scalar terms"));
            }
            s += self.values[t.0].item();
        }
        Ok(self.push(Tensor::scalar(s), Op::AddN(terms.to_vec()), Binding::None))
    }

    /// Propagates d(root)/d(node) to every node recorded before `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.no_grad {
            return Err(GrpError::config("backward on an inference tape"));
        }
        if self.backward_done {
            return Err(GrpError::config(
                "backward already ran on this tape; reset before reuse",
            ));
        }
        if self.values[root.0].len() != 1 {
            return Err(GrpError::dim("backward root must be a scalar"));
        }
        self.backward_done = true;
        self.grads[root.0].as_mut_slice()[0] = 1.0;
        for i in (0..=root.0).rev() {
            let g = std::mem::take(&mut self.grads[i]);
            if g.as_slice().iter().any(|&x| x != 0.0) {
                self.backprop_node(i, &g);
            }
            self.grads[i] = g;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) {
        let values = &self.values;
        let grads = &mut self.grads;
        let gs = g.as_slice();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Dense { w, x, b } => {
                let wv = &values[w.0];
                let xv = values[x.0].as_slice();
                let n = wv.cols();
                {
                    let gw = grads[w.0].as_mut_slice();
                    for (r, &gr) in gs.iter().enumerate() {
                        for (c, &xc) in xv.iter().enumerate() {
                            gw[r * n + c] += gr * xc;
                        }
                    }
                }
                {
                    let gx = grads[x.0].as_mut_slice();
                    let ws = wv.as_slice();
                    for (r, &gr) in gs.iter().enumerate() {
                        for (c, gxc) in gx.iter_mut().enumerate() {
                            *gxc += ws[r * n + c] * gr;
                        }
                    }
                }
                for (gb, &gr) in grads[b.0].as_mut_slice().iter_mut().zip(gs) {
                    *gb += gr;
                }
            }
            Op::Relu(x) => {
                let xv = values[x.0].as_slice();
                for ((gx, &xi), &gi) in grads[x.0].as_mut_slice().iter_mut().zip(xv).zip(gs) {
                    if xi > 0.0 {
                        *gx += gi;
                    }
                }
            }
            Op::AddConst(x) => grads[x.0].add_assign(g),
            Op::Add(a, b) => {
                grads[a.0].add_assign(g);
                grads[b.0].add_assign(g);
            }
            Op::Scale(x, s) => {
                for (gx, &gi) in grads[x.0].as_mut_slice().iter_mut().zip(gs) {
                    *gx += s * gi;
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                // `a` and `b` may be the same node, so index rather than zip.
                for (k, &g) in gs.iter().enumerate() {
                    let av = values[a.0].as_slice()[k];
                    let bv = values[b.0].as_slice()[k];
                    grads[a.0].as_mut_slice()[k] += g * bv;
                    grads[b.0].as_mut_slice()[k] += g * av;
                }
            }
            Op::Sum(x) => {
                let gi = gs[0];
                grads[x.0].as_mut_slice().iter_mut().for_each(|v| *v += gi);
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                let gi = gs[0];
                let n = values[a.0].len();
                for k in 0..n {
                    let av = values[a.0].as_slice()[k];
                    let bv = values[b.0].as_slice()[k];
                    grads[a.0].as_mut_slice()[k] += gi * bv;
                    grads[b.0].as_mut_slice()[k] += gi * av;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = values[p.0].len();
                    for (gp, &gi) in grads[p.0].as_mut_slice().iter_mut().zip(&gs[off..off + n]) {
                        *gp += gi;
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let dst = &mut grads[x.0].as_mut_slice()[*start..*start + gs.len()];
                for (d, &gi) in dst.iter_mut().zip(gs) {
                    *d += gi;
                }
            }
            Op::StackColumns(cols) => {
                let k = cols.len();
                for (j, c) in cols.iter().enumerate() {
                    for (r, gc) in grads[c.0].as_mut_slice().iter_mut().enumerate() {
                        *gc += gs[r * k + j];
                    }
                }
            }
            Op::Conv { z, filter, bias } => {
                let zt = &values[z.0];
                let ft = &values[filter.0];
                let (rows, cols) = zt.shape();
                let width = ft.cols();
                for (j, &gj) in gs.iter().enumerate() {
                    for r in 0..rows {
                        for k in 0..width {
                            grads[filter.0].as_mut_slice()[r * width + k] += gj * zt.get(r, j + k);
                            grads[z.0].as_mut_slice()[r * cols + j + k] += gj * ft.get(r, k);
                        }
                    }
                    grads[bias.0].as_mut_slice()[0] += gj;
                }
            }
            Op::MaxPool { v, argmax } => {
                grads[v.0].as_mut_slice()[*argmax] += gs[0];
            }
            Op::ConvBank { z, filters, biases, width } => {
                let (z, filters, biases, width) = (*z, *filters, *biases, *width);
                let (rows, cols) = values[z.0].shape();
                let nf = values[filters.0].rows();
                let flat = rows * width;
                let out_cols = cols - width + 1;
                let zt = values[z.0].as_slice();
                let ft = values[filters.0].as_slice();
                for f in 0..nf {
                    for j in 0..out_cols {
                        let gj = gs[f * out_cols + j];
                        if gj == 0.0 {
                            continue;
                        }
                        for r in 0..rows {
                            for k in 0..width {
                                grads[filters.0].as_mut_slice()[f * flat + r * width + k] +=
                                    gj * zt[r * cols + j + k];
                                grads[z.0].as_mut_slice()[r * cols + j + k] += gj * ft[f * flat + r * width + k];
                            }
                        }
                        grads[biases.0].as_mut_slice()[f] += gj;
                    }
                }
            }
            Op::RowMax { m, argmax } => {
                let cols = values[m.0].cols();
                let gm = grads[m.0].as_mut_slice();
                for (r, &a) in argmax.iter().enumerate() {
                    gm[r * cols + a] += gs[r];
                }
            }
            Op::Density(node) => {
                for (k, p) in node.partials.iter().enumerate() {
                    let gk = gs[k];
                    grads[node.x.0].as_mut_slice()[k] += gk * p[0];
                    if let Some(l) = node.loc {
                        grads[l.0].as_mut_slice()[k] += gk * p[1];
                    }
                    grads[node.scale.0].as_mut_slice()[k] += gk * p[2];
                    if let Some(s) = node.shape {
                        grads[s.0].as_mut_slice()[k] += gk * p[3];
                    }
                }
            }
            Op::SquareLoss { pred, target } => {
                let d = values[pred.0].item() - target;
                grads[pred.0].as_mut_slice()[0] += 2.0 * d * gs[0];
            }
            Op::AddN(terms) => {
                for t in terms {
                    grads[t.0].as_mut_slice()[0] += gs[0];
                }
            }
        }
    }

    /// Adds the gradients of every parameter-bound leaf into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (i, b) in self.bindings.iter().enumerate() {
            match *b {
                Binding::None => {}
                Binding::Param(id) => store.accumulate(id, &self.grads[i]),
                Binding::Row(id, row) => store.accumulate_row(id, row, self.grads[i].as_slice()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn dense_identity_and_zero_weights() {
        let mut t = Tape::new();
        let w = t.constant(Tensor::identity(2));
        let x = t.constant_vector(&[3.0, 4.0]);
        let b = t.constant_vector(&[0.0, 0.0]);
        let y = t.dense(w, x, b).unwrap();
        assert_eq!(t.value(y).as_slice(), &[3.0, 4.0]);

        let w0 = t.constant(Tensor::zeros(2, 2));
        let b1 = t.constant_vector(&[1.0, 2.0]);
        let y = t.dense(w0, x, b1).unwrap();
        assert_eq!(t.value(y).as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_rejects_mismatched_shapes() {
        let mut t = Tape::new();
        let w = t.constant(Tensor::zeros(2, 3));
        let x = t.constant_vector(&[1.0, 2.0]);
        let b = t.constant_vector(&[0.0, 0.0]);
        assert!(matches!(t.dense(w, x, b), Err(GrpError::Dimension(_))));
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            random_tensor(&mut rng, 3, 4),
            random_tensor(&mut rng, 4, 1),
            random_tensor(&mut rng, 3, 1),
        ];
        let report = grad_check(
            |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn relu_values_and_mask() {
        let mut t = Tape::new();
        let x = t.constant_vector(&[-1.0, 0.0, 2.0]);
        let y = t.relu(x);
        assert_eq!(t.value(y).as_slice(), &[0.0, 0.0, 2.0]);
        let n = t.constant_vector(&[-3.0, -0.5]);
        let y2 = t.relu(n);
        assert_eq!(t.value(y2).as_slice(), &[0.0, 0.0]);

        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_shapes_and_column_sums() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::new(5, 3, (0..15).map(f64::from).collect()));
        let f3 = t.constant(Tensor::filled(5, 3, 1.0));
        let bias = t.constant(Tensor::scalar(0.0));
        let out = t.conv_full_height(z, f3, bias).unwrap();
        assert_eq!(t.value(out).len(), 1);

        let f1 = t.constant(Tensor::filled(5, 1, 1.0));
        let out = t.conv_full_height(z, f1, bias).unwrap();
        let zt = t.value(z).clone();
        let sums: Vec<f64> = (0..3).map(|c| (0..5).map(|r| zt.get(r, c)).sum()).collect();
        assert_eq!(t.value(out).as_slice(), sums.as_slice());
    }

    #[test]
    fn conv_rejects_bad_width() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(5, 3));
        let f = t.constant(Tensor::zeros(5, 4));
        let b = t.constant(Tensor::scalar(0.0));
        assert!(matches!(t.conv_full_height(z, f, b), Err(GrpError::Config(_))));
        let f = t.constant(Tensor::zeros(4, 2));
        assert!(matches!(t.conv_full_height(z, f, b), Err(GrpError::Dimension(_))));
    }

    #[test]
    fn max_pool_values_and_tie_rule() {
        let mut t = Tape::new();
        let v = t.constant_vector(&[0.1, 0.7, 0.3]);
        let m = t.max_pool(v).unwrap();
        assert_eq!(t.scalar(m), 0.7);
        let one = t.constant_vector(&[-2.5]);
        let m1 = t.max_pool(one).unwrap();
        assert_eq!(t.scalar(m1), -2.5);
        let empty = t.constant(Tensor::vector(vec![]));
        assert!(matches!(t.max_pool(empty), Err(GrpError::Dimension(_))));

        let mut t = Tape::new();
        let tie = t.constant_vector(&[0.5, 0.5]);
        let m = t.max_pool(tie).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(tie).as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn second_backward_is_rejected_until_reset() {
        let mut t = Tape::new();
        let x = t.constant_vector(&[1.0, 2.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.backward(s).is_err());
        t.reset();
        let x = t.constant_vector(&[1.0, 2.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut t = Tape::inference();
        let x = t.constant_vector(&[1.0]);
        let s = t.sum(x);
        assert!(t.backward(s).is_err());
    }

    #[test]
    fn shared_param_leaf_accumulates_across_uses() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![2.0, 3.0]));
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        assert_eq!(a, b);
        let s1 = t.sum(a);
        let s2 = t.sum(b);
        let tot = t.add_n(&[s1, s2]).unwrap();
        t.backward(tot).unwrap();
        t.accumulate_into(&mut store);
        assert_eq!(store.grad(id).as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn row_leaves_scatter_into_their_row() {
        let mut store = ParamStore::new();
        let id = store.add_table("emb", Tensor::zeros(3, 2));
        let mut t = Tape::new();
        let r = t.param_row(&store, id, 1);
        let s = t.sum(r);
        t.backward(s).unwrap();
        t.accumulate_into(&mut store);
        assert_eq!(store.grad(id).as_slice(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(store.get(id).touched_rows().collect::<Vec<_>>(), vec![1]);
        store.zero_grad();
        assert!(store.grad(id).as_slice().iter().all(|&g| g == 0.0));
        assert_eq!(store.get(id).touched_rows().count(), 0);
    }

    #[test]
    fn square_loss_value() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::scalar(3.0));
        let l = t.square_loss(p, 5.0).unwrap();
        assert_eq!(t.scalar(l), 4.0);
        let p2 = t.constant(Tensor::scalar(5.0));
        let l2 = t.square_loss(p2, 5.0).unwrap();
        assert_eq!(t.scalar(l2), 0.0);
    }

    #[test]
    fn conv_bank_matches_single_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for width in 1..=3 {
            let mut t = Tape::new();
            let z = t.constant(random_tensor(&mut rng, 4, 3));
            let bank = random_tensor(&mut rng, 5, 4 * width);
            let biases = random_tensor(&mut rng, 5, 1);
            let fb = t.constant(bank.clone());
            let bb = t.constant(biases.clone());
            let out = t.conv_bank(z, fb, bb, width).unwrap();
            let pooled = t.row_max(out).unwrap();
            for f in 0..5 {
                let filter = t.constant(Tensor::new(4, width, bank.row(f).to_vec()));
                let b = t.constant(Tensor::scalar(biases.as_slice()[f]));
                let single = t.conv_full_height(z, filter, b).unwrap();
                assert_eq!(t.value(out).row(f), t.value(single).as_slice());
                let m = t.max_pool(single).unwrap();
                assert_eq!(t.value(pooled).as_slice()[f], t.scalar(m));
            }
        }
    }

    #[test]
    fn conv_bank_and_row_max_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for width in 1..=3 {
            let inputs = vec![
                random_tensor(&mut rng, 4, 3),
                random_tensor(&mut rng, 3, 4 * width),
                random_tensor(&mut rng, 3, 1),
            ];
            let r = grad_check(
                |t, v| {
                    let out = t.conv_bank(v[0], v[1], v[2], width)?;
                    let p = t.row_max(out)?;
                    let w = t.constant_vector(&[1.0, -2.0, 0.5]);
                    t.dot(p, w)
                },
                &inputs,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "width {width}: {r:?}");
        }
    }

    #[test]
    fn conv_bank_rejects_bad_shapes() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(4, 3));
        let f = t.constant(Tensor::zeros(2, 8));
        let b = t.constant(Tensor::zeros(2, 1));
        assert!(matches!(t.conv_bank(z, f, b, 4), Err(GrpError::Config(_))));
        assert!(matches!(t.conv_bank(z, f, b, 3), Err(GrpError::Dimension(_))));
        let b3 = t.constant(Tensor::zeros(3, 1));
        assert!(t.conv_bank(z, f, b3, 2).is_err());
        let empty = t.constant(Tensor::zeros(2, 0));
        assert!(t.row_max(empty).is_err());
    }
}
