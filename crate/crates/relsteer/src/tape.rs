//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded eagerly onto a [`Tape`]; [`Tape::backward`]
//! replays them in reverse insertion order (which is a valid reverse
//! topological order) and accumulates gradients additively at fan-in.
//!
//! The op set is deliberately small: exactly what the classifier, the
//! toy generator and the steering loss need. 32-bit floats are the
//! default for training speed; a 64-bit instantiation exists for
//! gradient verification against finite differences.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn};

use crate::error::CoreError;

/// Scalar type the engine runs on. Implemented for `f32` and `f64`.
pub trait Real: ndarray::NdFloat + ndarray::LinalgScalar + std::iter::Sum {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `exp` as used in softmax's hot loop. The 32-bit impl trades the
    /// last bit of accuracy (~2e-7 relative, below f32 resolution of
    /// the surrounding arithmetic) for several-fold throughput; the
    /// 64-bit verification mode keeps the exact libm call.
    fn exp_hot(self) -> Self {
        self.exp()
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp_hot(self) -> Self {
        exp_fast_f32(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// exp(x) = 2^n · e^f with n = round(x·log2 e) and |f·ln 2| ≤ ln2/2;
/// degree-6 Taylor for e^f keeps relative error ≈ 1e-7 on [-80, 88].
///
/// Deliberately branchless (cutoffs are compare+select, NaN rides
/// through the polynomial) so the softmax loop auto-vectorizes.
///
/// Inputs below -80 return an exact zero. The cutoff is well above the
/// f32 underflow point on purpose: a softmax weight of e^-80 ≈ 2e-35 is
/// already far below f32 summation resolution, and flushing there
/// guarantees that even after division by a row normalizer (≤ the row
/// length) no weight ever lands in the subnormal range, where every
/// downstream matmul would pay a ~100× microcode penalty per element.
#[inline(always)]
fn exp_fast_f32(x: f32) -> f32 {
    let flush = x < -80.0;
    let x = if flush { -80.0 } else { x };
    let x = if x > 88.7 { 88.7 } else { x };
    // Rounding via the 1.5·2^23 magic constant parks n in the low
    // mantissa bits of `m`, so 2^n is pure bit surgery — no float→int
    // cast, which is what lets LLVM vectorize the surrounding loop.
    const MAGIC: f32 = 12_582_912.0; // 1.5 · 2^23
    // Two-constant argument reduction keeps f accurate for large |x|.
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let m = x * std::f32::consts::LOG2_E + MAGIC;
    let n = m - MAGIC;
    let f = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + f * (1.0
            + f * (0.5
                + f * (1.0 / 6.0 + f * (1.0 / 24.0 + f * (1.0 / 120.0 + f / 720.0)))));
    // Low mantissa bits of m hold n + 0x400000; rebias to n + 127 and
    // shift into the exponent field.
    let pow2n = f32::from_bits(m.to_bits().wrapping_add(127u32.wrapping_sub(0x40_0000)) << 23);
    let r = pow2n * p;
    if flush {
        0.0
    } else {
        r
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    /// `[n, d] + [1, d]`, broadcast over rows.
    AddRow(Var, Var),
    /// `[n, d] * [1, d]`, broadcast over rows.
    MulRow(Var, Var),
    /// tensor minus a broadcast single-element node.
    SubScalar(Var, Var),
    Matmul(Var, Var),
    /// `a · bᵀ` without materializing the transpose.
    MatmulTB(Var, Var),
    /// Row-wise softmax of a 2-D tensor.
    Softmax(Var),
    /// Row-wise layer normalization (pre-affine: mean 0, variance 1).
    LayerNorm(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    /// Sum of all elements, yields shape `[1]`.
    Sum(Var),
    /// `[n, d] -> [1, d]` mean over rows.
    MeanRows(Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    /// k tensors of shape `[1, m]` stacked into `[k, m]`.
    StackRows(Vec<Var>),
    Reshape(Var),
    /// `-log softmax(logits)[0, target]` for logits of shape `[1, C]`.
    CrossEntropy(Var, usize),
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op,
}

/// Gradients produced by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
    shapes: Vec<Vec<usize>>,
    /// Set when a requested gradient was unreachable from the loss.
    pub unreachable_seen: std::cell::Cell<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`. Unreachable vars yield zeros
    /// and set the warning flag.
    pub fn get(&self, var: Var) -> ArrayD<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                self.unreachable_seen.set(true);
                ArrayD::zeros(IxDyn(&self.shapes[var.0]))
            }
        }
    }

    pub fn get_scalar(&self, var: Var) -> T {
        self.get(var)[[0]]
    }
}

/// Records a computation as a DAG of tensor operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &ArrayD<T> {
        &self.nodes[var.0].value
    }

    pub fn value2(&self, var: Var) -> ndarray::ArrayView2<'_, T> {
        self.nodes[var.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("node is not 2-D")
    }

    pub fn scalar_value(&self, var: Var) -> T {
        let v = &self.nodes[var.0].value;
        assert_eq!(v.len(), 1, "node is not a scalar");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite leaf");
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<T>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf1_as_row(&mut self, value: Array1<T>) -> Var {
        let d = value.len();
        self.leaf(value.into_shape(IxDyn(&[1, d])).unwrap())
    }

    pub fn scalar_leaf(&mut self, value: T) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(), CoreError> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(CoreError::ShapeMismatch {
                context: "elementwise op",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        self.same_shape(a, b)?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        self.same_shape(a, b)?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        self.same_shape(a, b)?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let v = self.nodes[a.0].value.mapv(|x| x * cv);
        self.push(v, Op::Scale(a, c))
    }

    /// `[n, d] + [1, d]` row broadcast.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, CoreError> {
        let (xs, rs) = (self.value2(x), self.value2(row));
        if rs.nrows() != 1 || rs.ncols() != xs.ncols() {
            return Err(CoreError::ShapeMismatch {
                context: "add_row",
                lhs: xs.shape().to_vec(),
                rhs: rs.shape().to_vec(),
            });
        }
        let v = (&xs + &rs).into_dyn();
        Ok(self.push(v, Op::AddRow(x, row)))
    }

    /// `[n, d] * [1, d]` row broadcast.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, CoreError> {
        let (xs, rs) = (self.value2(x), self.value2(row));
        if rs.nrows() != 1 || rs.ncols() != xs.ncols() {
            return Err(CoreError::ShapeMismatch {
                context: "mul_row",
                lhs: xs.shape().to_vec(),
                rhs: rs.shape().to_vec(),
            });
        }
        let v = (&xs * &rs).into_dyn();
        Ok(self.push(v, Op::MulRow(x, row)))
    }

    /// Subtracts a broadcast single-element node from every element.
    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var, CoreError> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(CoreError::Contract("sub_scalar: rhs must have one element"));
        }
        let sv = *self.nodes[s.0].value.iter().next().unwrap();
        let v = self.nodes[x.0].value.mapv(|x| x - sv);
        Ok(self.push(v, Op::SubScalar(x, s)))
    }

    /// Standard matrix product of 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        let (av, bv) = (self.value2(a), self.value2(b));
        if av.ncols() != bv.nrows() {
            return Err(CoreError::ShapeMismatch {
                context: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let v = av.dot(&bv).into_dyn();
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    /// `a · bᵀ` for 2-D tensors.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        let (av, bv) = (self.value2(a), self.value2(b));
        if av.ncols() != bv.ncols() {
            return Err(CoreError::ShapeMismatch {
                context: "matmul_tb",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let v = av.dot(&bv.t()).into_dyn();
        Ok(self.push(v, Op::MatmulTB(a, b)))
    }

    /// Row-wise softmax of a 2-D tensor (max-subtracted for stability).
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value2(x);
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - m).exp_hot());
            let s: T = row.iter().cloned().sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(out.into_dyn(), Op::Softmax(x))
    }

    /// Row-wise layer normalization, pre-affine.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value2(x);
        let n = T::from_f64(xv.ncols() as f64);
        let eps = T::from_f64(LAYER_NORM_EPS);
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let mean: T = row.iter().cloned().sum::<T>() / n;
            let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * rstd);
        }
        self.push(out.into_dyn(), Op::LayerNorm(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|v| v.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|v| v.exp());
        self.push(v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|v| v.ln());
        self.push(v, Op::Ln(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0]
            .value
            .mapv(|v| T::one() / (T::one() + (-v).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let v = self.nodes[x.0].value.mapv(|v| v.max(l).min(h));
        self.push(v, Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.iter().cloned().sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Sum(x))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value2(x);
        let n = T::from_f64(xv.nrows() as f64);
        let v = (xv.sum_axis(Axis(0)) / n)
            .into_shape(IxDyn(&[1, xv.ncols()]))
            .unwrap();
        self.push(v, Op::MeanRows(x))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self
            .value2(x)
            .slice(ndarray::s![start..end, ..])
            .to_owned()
            .into_dyn();
        self.push(v, Op::SliceRows(x, start, end))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self
            .value2(x)
            .slice(ndarray::s![.., start..end])
            .to_owned()
            .into_dyn();
        self.push(v, Op::SliceCols(x, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, CoreError> {
        let views: Vec<_> = parts.iter().map(|&p| self.value2(p)).collect();
        let v = ndarray::concatenate(
            Axis(1),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .map_err(|_| CoreError::Contract("concat_cols: incompatible shapes"))?
        .into_dyn();
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks k tensors of shape `[1, m]` into `[k, m]`.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, CoreError> {
        let views: Vec<_> = parts.iter().map(|&p| self.value2(p)).collect();
        let v = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .map_err(|_| CoreError::Contract("stack_rows: incompatible shapes"))?
        .into_dyn();
        Ok(self.push(v, Op::StackRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, CoreError> {
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape(IxDyn(shape))
            .map_err(|_| CoreError::Contract("reshape: element count mismatch"))?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// `-log softmax(logits)[0, target]`, numerically stable.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, CoreError> {
        let lv = self.value2(logits);
        if lv.nrows() != 1 || target >= lv.ncols() {
            return Err(CoreError::Contract("cross_entropy: logits must be [1, C]"));
        }
        let row = lv.row(0);
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse: T = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        let loss = lse - row[target];
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            Op::CrossEntropy(logits, target),
        ))
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, CoreError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(CoreError::NonScalarLoss);
        }
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), T::one()));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            // Leaves keep their gradient; interior nodes may be queried too.
            grads[i] = Some(g);
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            unreachable_seen: std::cell::Cell::new(false),
        })
    }

    fn accum(grads: &mut [Option<ArrayD<T>>], var: Var, delta: ArrayD<T>) {
        match &mut grads[var.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &ArrayD<T>, grads: &mut Vec<Option<ArrayD<T>>>) {
        let g2 = || {
            g.view()
                .into_dimensionality::<Ix2>()
                .expect("2-D gradient expected")
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = g * &self.nodes[b.0].value;
                let db = g * &self.nodes[a.0].value;
                Self::accum(grads, *a, da);
                Self::accum(grads, *b, db);
            }
            Op::Neg(a) => Self::accum(grads, *a, g.mapv(|v| -v)),
            Op::Scale(a, c) => {
                let cv = T::from_f64(*c);
                Self::accum(grads, *a, g.mapv(|v| v * cv));
            }
            Op::AddRow(x, row) => {
                Self::accum(grads, *x, g.clone());
                let gr = g2().sum_axis(Axis(0));
                let d = gr.len();
                Self::accum(grads, *row, gr.into_shape(IxDyn(&[1, d])).unwrap());
            }
            Op::MulRow(x, row) => {
                let xv = self.value2(*x);
                let rv = self.value2(*row);
                let dx = (&g2() * &rv).into_dyn();
                let dr = (&g2() * &xv).sum_axis(Axis(0));
                let d = dr.len();
                Self::accum(grads, *x, dx);
                Self::accum(grads, *row, dr.into_shape(IxDyn(&[1, d])).unwrap());
            }
            Op::SubScalar(x, s) => {
                Self::accum(grads, *x, g.clone());
                let total: T = g.iter().cloned().sum();
                let shape = self.nodes[s.0].value.raw_dim();
                Self::accum(grads, *s, ArrayD::from_elem(shape, -total));
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value2(*a), self.value2(*b));
                let gv = g2();
                Self::accum(grads, *a, gv.dot(&bv.t()).into_dyn());
                Self::accum(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::MatmulTB(a, b) => {
                let (av, bv) = (self.value2(*a), self.value2(*b));
                let gv = g2();
                Self::accum(grads, *a, gv.dot(&bv).into_dyn());
                Self::accum(grads, *b, gv.t().dot(&av).into_dyn());
            }
            Op::Softmax(x) => {
                let y = self.nodes[i]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let gv = g2();
                let mut dx = (&gv * &y).into_owned();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: T = drow.iter().cloned().sum();
                    ndarray::Zip::from(&mut drow).and(&yrow).for_each(|d, &yv| {
                        *d -= yv * dot;
                    });
                }
                Self::accum(grads, *x, dx.into_dyn());
            }
            Op::LayerNorm(x) => {
                let xv = self.value2(*x);
                let xhat = self.nodes[i]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let gv = g2();
                let n = T::from_f64(xv.ncols() as f64);
                let eps = T::from_f64(LAYER_NORM_EPS);
                let mut dx = Array2::<T>::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let mean: T = row.iter().cloned().sum::<T>() / n;
                    let var: T =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let rstd = T::one() / (var + eps).sqrt();
                    let grow = gv.row(r);
                    let xr = xhat.row(r);
                    let gsum: T = grow.iter().cloned().sum();
                    let gxsum: T = grow.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum();
                    let mut dr = dx.row_mut(r);
                    for c in 0..row.len() {
                        dr[c] = rstd / n * (n * grow[c] - gsum - xr[c] * gxsum);
                    }
                }
                Self::accum(grads, *x, dx.into_dyn());
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                let dx = ndarray::Zip::from(g)
                    .and(xv)
                    .map_collect(|&gv, &v| if v > T::zero() { gv } else { T::zero() });
                Self::accum(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = g * &self.nodes[i].value;
                Self::accum(grads, *x, dx);
            }
            Op::Ln(x) => {
                let dx = ndarray::Zip::from(g)
                    .and(&self.nodes[x.0].value)
                    .map_collect(|&gv, &v| gv / v);
                Self::accum(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let dx = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&gv, &yv| gv * yv * (T::one() - yv));
                Self::accum(grads, *x, dx);
            }
            Op::Clamp(x, lo, hi) => {
                let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                let dx = ndarray::Zip::from(g)
                    .and(&self.nodes[x.0].value)
                    .map_collect(|&gv, &v| if v >= l && v <= h { gv } else { T::zero() });
                Self::accum(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g[[0]];
                let shape = self.nodes[x.0].value.raw_dim();
                Self::accum(grads, *x, ArrayD::from_elem(shape, gv));
            }
            Op::MeanRows(x) => {
                let xv = self.value2(*x);
                let n = T::from_f64(xv.nrows() as f64);
                let gv = g2();
                let mut dx = Array2::<T>::zeros(xv.raw_dim());
                for mut row in dx.rows_mut() {
                    ndarray::Zip::from(&mut row).and(gv.row(0)).for_each(|d, &v| {
                        *d = v / n;
                    });
                }
                Self::accum(grads, *x, dx.into_dyn());
            }
            Op::SliceRows(x, start, _end) => {
                let xv = self.value2(*x);
                let gv = g2();
                let mut dx = Array2::<T>::zeros(xv.raw_dim());
                dx.slice_mut(ndarray::s![*start..*start + gv.nrows(), ..])
                    .assign(&gv);
                Self::accum(grads, *x, dx.into_dyn());
            }
            Op::SliceCols(x, start, _end) => {
                let xv = self.value2(*x);
                let gv = g2();
                let mut dx = Array2::<T>::zeros(xv.raw_dim());
                dx.slice_mut(ndarray::s![.., *start..*start + gv.ncols()])
                    .assign(&gv);
                Self::accum(grads, *x, dx.into_dyn());
            }
            Op::ConcatCols(parts) => {
                let gv = g2();
                let mut off = 0;
                for &p in parts {
                    let w = self.value2(p).ncols();
                    let dp = gv.slice(ndarray::s![.., off..off + w]).to_owned();
                    Self::accum(grads, p, dp.into_dyn());
                    off += w;
                }
            }
            Op::StackRows(parts) => {
                let gv = g2();
                let mut off = 0;
                for &p in parts {
                    let h = self.value2(p).nrows();
                    let dp = gv.slice(ndarray::s![off..off + h, ..]).to_owned();
                    Self::accum(grads, p, dp.into_dyn());
                    off += h;
                }
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.raw_dim();
                Self::accum(grads, *x, g.clone().into_shape(shape).unwrap());
            }
            Op::CrossEntropy(logits, target) => {
                let lv = self.value2(*logits);
                let row = lv.row(0);
                let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
                let z: T = exps.iter().cloned().sum();
                let gv = g[[0]];
                let mut dl = Array2::<T>::zeros((1, row.len()));
                for c in 0..row.len() {
                    let p = exps[c] / z;
                    let onehot = if c == *target { T::one() } else { T::zero() };
                    dl[[0, c]] = gv * (p - onehot);
                }
                Self::accum(grads, *logits, dl.into_dyn());
            }
        }
    }

    /// Gradients w.r.t. a list of tensors. Returns the gradients plus a
    /// flag that is true when any requested tensor was unreachable from
    /// the loss (its gradient is zero in that case).
    pub fn backward_wrt(
        &self,
        loss: Var,
        wrt: &[Var],
    ) -> Result<(Vec<ArrayD<T>>, bool), CoreError> {
        let grads = self.backward(loss)?;
        let out: Vec<_> = wrt.iter().map(|&v| grads.get(v)).collect();
        Ok((out, grads.unreachable_seen.get()))
    }
}
