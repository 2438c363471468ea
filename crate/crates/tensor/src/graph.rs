//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op eagerly: values are computed when the op is
//! added, and [`Graph::backward`] replays the tape in reverse. Parameters are
//! read from a borrowed [`ParamStore`]; the graph never mutates them, so any
//! number of graphs may be built concurrently over one frozen store.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind<T> {
    Gelu,
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    Exp,
    LogFloor(T),
    Scale(T),
    AddScalar,
}

enum Op<T> {
    Input,
    Param,
    Binary {
        a: Var,
        b: Var,
        kind: BinKind,
    },
    Unary {
        x: Var,
        kind: UnaryKind<T>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
        tau: T,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        arg: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    BroadcastTo(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Scan {
        a: Var,
        b: Var,
        g: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Binary { .. } => "binary",
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Gelu => "gelu",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Tanh => "tanh",
                UnaryKind::Exp | UnaryKind::LogFloor(_) => "exp_log",
                _ => "unary_other",
            },
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Softmax { .. } => "softmax",
            Op::SumAll(_) | Op::SumAxis { .. } | Op::MaxAxis { .. } => "reduce",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::Gather { .. } => "gather",
            Op::Scan { .. } => "scan",
        }
    }
}

/// Wall time per op kind, forward and backward.
#[derive(Debug, Default)]
struct Profile {
    last: Option<std::time::Instant>,
    forward: HashMap<&'static str, std::time::Duration>,
    backward: HashMap<&'static str, std::time::Duration>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Splits `shape` around `axis` into `(outer, n, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub struct Graph<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    profile: Option<std::cell::RefCell<Profile>>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            profile: None,
        }
    }

    /// A graph with no parameter store, for free-standing computations.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            profile: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Starts recording wall time per op kind. Forward time of an op is the
    /// time since the previous recorded op.
    pub fn enable_profile(&mut self) {
        self.profile = Some(std::cell::RefCell::new(Profile {
            last: Some(std::time::Instant::now()),
            ..Profile::default()
        }));
    }

    /// Table of recorded times, slowest first.
    pub fn profile_report(&self) -> String {
        let Some(p) = &self.profile else {
            return String::new();
        };
        let p = p.borrow();
        let mut names: Vec<&&str> = p.forward.keys().chain(p.backward.keys()).collect();
        names.sort();
        names.dedup();
        let get = |m: &HashMap<&'static str, std::time::Duration>, k: &str| {
            m.get(k).copied().unwrap_or_default()
        };
        let mut rows: Vec<(&str, std::time::Duration, std::time::Duration)> = names
            .into_iter()
            .map(|&k| (k, get(&p.forward, k), get(&p.backward, k)))
            .collect();
        rows.sort_by_key(|r| std::cmp::Reverse(r.1 + r.2));
        let mut out = String::from("op                 forward_ms backward_ms\n");
        for (k, f, b) in rows {
            out.push_str(&format!(
                "{k:<18} {:>10.1} {:>11.1}\n",
                f.as_secs_f64() * 1e3,
                b.as_secs_f64() * 1e3
            ));
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if let Some(p) = &self.profile {
            let mut p = p.borrow_mut();
            let now = std::time::Instant::now();
            if let Some(last) = p.last {
                *p.forward.entry(op.name()).or_default() += now - last;
            }
            p.last = Some(now);
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free-standing differentiable leaf (gradient available via
    /// [`Gradients::wrt`]).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], v: f64) -> Var {
        self.input(Tensor::full(shape, T::of(v)))
    }

    /// Binds a stored parameter. Repeated binds return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param,
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite {
                what: what.to_string(),
            })
        }
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: "elementwise",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let da = self.data(a);
        let db = self.data(b);
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(numel(&out_shape));
            let (ba, bb) = (
                kernels::broadcast_strides(&sa, &out_shape),
                kernels::broadcast_strides(&sb, &out_shape),
            );
            kernels::for_each2(&out_shape, &ba, &bb, |_, i, j| out.push(f(da[i], db[j])));
            out
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Binary { a, b, kind }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Div)
    }

    fn unary(&mut self, x: Var, kind: UnaryKind<T>, add: T) -> Var {
        let f = |v: T| match kind {
            UnaryKind::Gelu => gelu(v),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::LogFloor(floor) => {
                if v < floor {
                    floor.ln()
                } else {
                    v.ln()
                }
            }
            UnaryKind::Scale(s) => v * s,
            UnaryKind::AddScalar => v + add,
        };
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| f(v)).collect(),
        )
        .expect("unary preserves shape");
        self.push(value, Op::Unary { x, kind }, &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Gelu, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid, T::zero())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu, T::zero())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Abs, T::zero())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp, T::zero())
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, UnaryKind::LogFloor(T::of(floor)), T::zero())
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, UnaryKind::Scale(T::of(s)), T::zero())
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::AddScalar, T::of(c))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[..., k] @ b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 {
            return Err(TensorError::Rank {
                op: "matmul",
                expected: 2,
                shape: sb,
            });
        }
        let k = *sa.last().ok_or(TensorError::Rank {
            op: "matmul",
            expected: 1,
            shape: sa.clone(),
        })?;
        if k != sb[0] {
            return Err(TensorError::AxisMismatch {
                op: "matmul",
                axis: sa.len() - 1,
                lhs: k,
                rhs: sb[0],
            });
        }
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// `x @ w + bias` with `w` laid out `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Batched `op(a) @ op(b)` over a leading batch axis.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        if sa[0] != sb[0] {
            return Err(TensorError::AxisMismatch {
                op: "bmm",
                axis: 0,
                lhs: sa[0],
                rhs: sb[0],
            });
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(TensorError::AxisMismatch {
                op: "bmm",
                axis: 2,
                lhs: k,
                rhs: k2,
            });
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                ta,
                &db[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b, ta, tb }, &[a, b]))
    }

    // ---- convolution -------------------------------------------------------

    /// Cross-correlation of `x[B, Cin, H, W]` with `w[Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: sx,
            });
        }
        if sw.len() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: sw,
            });
        }
        if sx[1] != sw[1] {
            return Err(TensorError::AxisMismatch {
                op: "conv2d",
                axis: 1,
                lhs: sx[1],
                rhs: sw[1],
            });
        }
        let cout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom =
            ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad).ok_or_else(|| {
                TensorError::Invalid {
                    op: "conv2d",
                    reason: format!(
                        "kernel {:?} does not fit input {:?} with pad {pad}",
                        &sw[2..],
                        &sx[2..]
                    ),
                }
            })?;
        let batch = sx[0];
        let (kk, p) = (geom.col_rows(), geom.col_cols());
        let in_sz = sx[1] * sx[2] * sx[3];
        let pointwise = sw[2] == 1 && sw[3] == 1 && stride == 1 && pad == 0;
        let mut out = vec![T::zero(); batch * cout * p];
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); kk * p]
        };
        let xd = self.data(x);
        let wd = self.data(w);
        for n in 0..batch {
            let img = &xd[n * in_sz..(n + 1) * in_sz];
            let src: &[T] = if pointwise {
                img
            } else {
                kernels::im2col(img, &geom, &mut cols);
                &cols
            };
            T::gemm(
                cout,
                kk,
                p,
                wd,
                false,
                src,
                false,
                &mut out[n * cout * p..(n + 1) * cout * p],
                false,
            );
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let bv = bd[i % cout];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::new(vec![batch, cout, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution (no padding) of `x[B, Cin, H, W]` with
    /// `w[Cin, Cout, k, k]`; output extent `(H - 1) * stride + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sx[1] != sw[0] {
            return Err(TensorError::AxisMismatch {
                op: "conv_transpose2d",
                axis: 1,
                lhs: sx[1],
                rhs: sw[0],
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv_transpose2d",
                reason: "stride must be positive".into(),
            });
        }
        let (cin, cout, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let (h, wd_) = (sx[2], sx[3]);
        let oh = (h - 1) * stride + kh;
        let ow = (wd_ - 1) * stride + kw;
        let geom = ConvGeom::new(cout, oh, ow, kh, kw, stride, 0).expect("transpose geometry");
        debug_assert_eq!((geom.out_h, geom.out_w), (h, wd_));
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let batch = sx[0];
        let (kk, p) = (geom.col_rows(), geom.col_cols());
        let out_sz = cout * oh * ow;
        let mut out = vec![T::zero(); batch * out_sz];
        let mut cols = vec![T::zero(); kk * p];
        let xd = self.data(x);
        let wdat = self.data(w);
        for n in 0..batch {
            T::gemm(
                kk,
                cin,
                p,
                wdat,
                true,
                &xd[n * cin * p..(n + 1) * cin * p],
                false,
                &mut cols,
                false,
            );
            kernels::col2im(&cols, &geom, &mut out[n * out_sz..(n + 1) * out_sz]);
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
                let bv = bd[i % cout];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::new(vec![batch, cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    // ---- normalization -----------------------------------------------------

    /// Normalizes along `axis` (population variance) then applies the
    /// per-entry affine `gamma`, `beta` of length `shape[axis]`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        axis: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Rank {
                op: "layer_norm",
                expected: axis + 1,
                shape,
            });
        }
        let (outer, c, inner) = axis_split(&shape, axis);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(TensorError::Invalid {
                    op: "layer_norm",
                    reason: format!("{name} has shape {:?}, expected [{c}]", self.shape(v)),
                });
            }
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); xd.len()];
        let cn = T::of(c as f64);
        let eps = T::of(eps);
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| (o * c + ch) * inner + i;
                let mean = (0..c).map(|ch| xd[at(ch)]).sum::<T>() / cn;
                let var = (0..c)
                    .map(|ch| {
                        let d = xd[at(ch)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / cn;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for ch in 0..c {
                    let xh = (xd[at(ch)] - mean) * r;
                    xhat[at(ch)] = xh;
                    out[at(ch)] = xh * gd[ch] + bd[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Training-mode batch norm over `x[B, C, H, W]` using batch moments.
    /// Returns the output and the (population) batch moments.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchMoments)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::Rank {
                op: "batch_norm",
                expected: 4,
                shape,
            });
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        if gd.len() != c || bd.len() != c {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                reason: format!("affine parameters must have length {c}"),
            });
        }
        let count = T::of((b * hw) as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); c];
        let mut moments = BatchMoments {
            mean: vec![0.0; c],
            var: vec![0.0; c],
        };
        for ch in 0..c {
            let planes = || (0..b).flat_map(move |n| (n * c + ch) * hw..(n * c + ch + 1) * hw);
            let mean = planes().map(|i| xd[i]).sum::<T>() / count;
            let var = planes()
                .map(|i| {
                    let d = xd[i] - mean;
                    d * d
                })
                .sum::<T>()
                / count;
            let r = T::one() / (var + T::of(eps)).sqrt();
            rstd[ch] = r;
            moments.mean[ch] = mean.f64();
            moments.var[ch] = var.f64();
            for i in planes() {
                let xh = (xd[i] - mean) * r;
                xhat[i] = xh;
                out[i] = xh * gd[ch] + bd[ch];
            }
        }
        let value = Tensor::new(shape, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        );
        Ok((v, moments))
    }

    /// Temperature-scaled softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(TensorError::Invalid {
                op: "softmax",
                reason: format!("temperature must be positive, got {tau}"),
            });
        }
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Rank {
                op: "softmax",
                expected: axis + 1,
                shape,
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let t = T::of(tau);
        let mut out = vec![T::zero(); xd.len()];
        if inner == 1 {
            let inv = T::one() / t;
            for (row, dst) in xd.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = ((v - mx) * inv).exp();
                    z = z + *d;
                }
                let zi = T::one() / z;
                dst.iter_mut().for_each(|d| *d = *d * zi);
            }
            let value = Tensor::new(shape, out)?;
            return Ok(self.push(value, Op::Softmax { x, axis, tau: t }, &[x]));
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..n {
                    let e = ((xd[at(k)] - mx) / t).exp();
                    out[at(k)] = e;
                    z = z + e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis, tau: t }, &[x]))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Rank {
                op: "sum_axis",
                expected: axis + 1,
                shape,
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).unwrap_or(&1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Max along `axis`, keeping it with extent 1; ties go to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Rank {
                op: "max_axis",
                expected: axis + 1,
                shape,
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * n) * inner + i;
                for k in 1..n {
                    let at = (o * n + k) * inner + i;
                    if xd[at] > xd[best] {
                        best = at;
                    }
                }
                out[o * inner + i] = xd[best];
                arg[o * inner + i] = best;
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::MaxAxis { x, arg }, &[x]))
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Invalid {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let data = kernels::permute(self.data(x), &shape, perm);
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(oshape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Rank {
                op: "concat",
                expected: axis + 1,
                shape: first,
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice",
                reason: format!(
                    "[{start}, {}) out of range for axis {axis} of {shape:?}",
                    start + len
                ),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match kernels::broadcast_shape(&sx, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: sx,
                    rhs: shape.to_vec(),
                })
            }
        }
        let value = Tensor::new(shape.to_vec(), kernels::expand(self.data(x), &sx, shape))?;
        Ok(self.push(value, Op::BroadcastTo(x), &[x]))
    }

    /// `out[i] = x.flat[idx[i]]`, shaped `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if idx.len() != numel(shape) || idx.iter().any(|&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather",
                reason: format!("{} indices into {n} values for shape {shape:?}", idx.len()),
            });
        }
        let xd = self.data(x);
        let value = Tensor::new(shape.to_vec(), idx.iter().map(|&i| xd[i]).collect())?;
        Ok(self.push(value, Op::Gather { x, idx }, &[x]))
    }

    /// Per-channel linear recurrence over `g[B, L, d]` with coefficients
    /// `a[d]`, `b[d]`: `x_t = a * x_{t-1} + b * g_t` from a zero state.
    /// Returns every state `x_t`.
    pub fn scan(&mut self, a: Var, b: Var, g: Var) -> Result<Var> {
        let sg = self.shape(g).to_vec();
        if sg.len() != 3 {
            return Err(TensorError::Rank {
                op: "scan",
                expected: 3,
                shape: sg,
            });
        }
        let d = sg[2];
        for v in [a, b] {
            if self.shape(v) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "scan",
                    lhs: vec![d],
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let states = kernels::scan_forward(self.data(a), self.data(b), self.data(g), sg[0], sg[1]);
        let value = Tensor::new(sg, states)?;
        Ok(self.push(value, Op::Scan { a, b, g }, &[a, b, g]))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                reason: format!("loss must hold one value, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input | Op::Param => {
                    leaves.insert(idx, gout);
                }
                op => {
                    let start = self.profile.as_ref().map(|_| std::time::Instant::now());
                    self.backprop(op, &node.value, &gout, &mut grads)?;
                    if let (Some(p), Some(start)) = (&self.profile, start) {
                        *p.borrow_mut().backward.entry(op.name()).or_default() += start.elapsed();
                    }
                }
            }
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { leaves, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match op {
            Op::Input | Op::Param => {}
            Op::Binary { a, b, kind } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let oshape = out.shape();
                let same = va.shape() == vb.shape();
                let (sa, sb) = if same {
                    let s = crate::tensor::strides(oshape);
                    (s.clone(), s)
                } else {
                    (
                        kernels::broadcast_strides(va.shape(), oshape),
                        kernels::broadcast_strides(vb.shape(), oshape),
                    )
                };
                let (ad, bd) = (va.data(), vb.data());
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); ad.len()];
                    match kind {
                        BinKind::Add | BinKind::Sub => {
                            kernels::for_each2(oshape, &sa, &sb, |o, i, _| ga[i] = ga[i] + gout[o])
                        }
                        BinKind::Mul => kernels::for_each2(oshape, &sa, &sb, |o, i, j| {
                            ga[i] = ga[i] + gout[o] * bd[j]
                        }),
                        BinKind::Div => kernels::for_each2(oshape, &sa, &sb, |o, i, j| {
                            ga[i] = ga[i] + gout[o] / bd[j]
                        }),
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); bd.len()];
                    match kind {
                        BinKind::Add => {
                            kernels::for_each2(oshape, &sa, &sb, |o, _, j| gb[j] = gb[j] + gout[o])
                        }
                        BinKind::Sub => {
                            kernels::for_each2(oshape, &sa, &sb, |o, _, j| gb[j] = gb[j] - gout[o])
                        }
                        BinKind::Mul => kernels::for_each2(oshape, &sa, &sb, |o, i, j| {
                            gb[j] = gb[j] + gout[o] * ad[i]
                        }),
                        BinKind::Div => kernels::for_each2(oshape, &sa, &sb, |o, i, j| {
                            let y = bd[j];
                            gb[j] = gb[j] - gout[o] * ad[i] / (y * y)
                        }),
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Unary { x, kind } => {
                let xd = self.data(*x);
                let yd = out.data();
                let g: Vec<T> = gout
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let (xv, yv) = (xd[i], yd[i]);
                        g * match *kind {
                            UnaryKind::Gelu => gelu_grad(xv),
                            UnaryKind::Sigmoid => yv * (T::one() - yv),
                            UnaryKind::Tanh => T::one() - yv * yv,
                            UnaryKind::Relu => {
                                if xv > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Abs => {
                                if xv > T::zero() {
                                    T::one()
                                } else if xv < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Exp => yv,
                            UnaryKind::LogFloor(floor) => {
                                if xv > floor {
                                    T::one() / xv
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Scale(s) => s,
                            UnaryKind::AddScalar => T::one(),
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gout, false, self.data(*b), true, &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.data(*a), true, gout, false, &mut gb, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let batch = sa[0];
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let (ad, bd) = (self.data(*a), self.data(*b));
                let (ak, bk, ck) = (m * k, k * n, m * n);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * ak];
                    for i in 0..batch {
                        let gc = &gout[i * ck..(i + 1) * ck];
                        let bs = &bd[i * bk..(i + 1) * bk];
                        let dst = &mut ga[i * ak..(i + 1) * ak];
                        if *ta {
                            T::gemm(k, n, m, bs, *tb, gc, true, dst, false);
                        } else {
                            T::gemm(m, n, k, gc, false, bs, !*tb, dst, false);
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * bk];
                    for i in 0..batch {
                        let gc = &gout[i * ck..(i + 1) * ck];
                        let as_ = &ad[i * ak..(i + 1) * ak];
                        let dst = &mut gb[i * bk..(i + 1) * bk];
                        if *tb {
                            T::gemm(n, m, k, gc, true, as_, *ta, dst, false);
                        } else {
                            T::gemm(k, m, n, as_, !*ta, gc, false, dst, false);
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let sx = self.shape(*x);
                let batch = sx[0];
                let cout = self.shape(*w)[0];
                let (kk, p) = (geom.col_rows(), geom.col_cols());
                let in_sz = geom.channels * geom.height * geom.width;
                let pointwise = geom.kh == 1 && geom.kw == 1 && geom.stride == 1 && geom.pad == 0;
                let (xd, wd) = (self.data(*x), self.data(*w));
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = if want_x {
                    vec![T::zero(); xd.len()]
                } else {
                    Vec::new()
                };
                let mut gw = if want_w {
                    vec![T::zero(); wd.len()]
                } else {
                    Vec::new()
                };
                let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * p }];
                let mut dcols = vec![T::zero(); if want_x && !pointwise { kk * p } else { 0 }];
                for n in 0..batch {
                    let go = &gout[n * cout * p..(n + 1) * cout * p];
                    let img = &xd[n * in_sz..(n + 1) * in_sz];
                    if want_w {
                        let src: &[T] = if pointwise {
                            img
                        } else {
                            kernels::im2col(img, geom, &mut cols);
                            &cols
                        };
                        T::gemm(cout, p, kk, go, false, src, true, &mut gw, true);
                    }
                    if want_x {
                        let dst = &mut gx[n * in_sz..(n + 1) * in_sz];
                        if pointwise {
                            T::gemm(kk, cout, p, wd, true, go, false, dst, false);
                        } else {
                            T::gemm(kk, cout, p, wd, true, go, false, &mut dcols, false);
                            kernels::col2im(&dcols, geom, dst);
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, gx);
                }
                if want_w {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); cout];
                        for (i, chunk) in gout.chunks(p).enumerate() {
                            gb[i % cout] = gb[i % cout] + chunk.iter().copied().sum::<T>();
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let sx = self.shape(*x);
                let (batch, cin) = (sx[0], sx[1]);
                let cout = geom.channels;
                let (kk, p) = (geom.col_rows(), geom.col_cols());
                let out_sz = cout * geom.height * geom.width;
                let (xd, wd) = (self.data(*x), self.data(*w));
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = if want_x {
                    vec![T::zero(); xd.len()]
                } else {
                    Vec::new()
                };
                let mut gw = if want_w {
                    vec![T::zero(); wd.len()]
                } else {
                    Vec::new()
                };
                let mut dcols = vec![T::zero(); kk * p];
                if want_x || want_w {
                    for n in 0..batch {
                        kernels::im2col(&gout[n * out_sz..(n + 1) * out_sz], geom, &mut dcols);
                        if want_x {
                            T::gemm(
                                cin,
                                kk,
                                p,
                                wd,
                                false,
                                &dcols,
                                false,
                                &mut gx[n * cin * p..(n + 1) * cin * p],
                                false,
                            );
                        }
                        if want_w {
                            T::gemm(
                                cin,
                                p,
                                kk,
                                &xd[n * cin * p..(n + 1) * cin * p],
                                false,
                                &dcols,
                                true,
                                &mut gw,
                                true,
                            );
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, gx);
                }
                if want_w {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let plane = geom.height * geom.width;
                        let mut gb = vec![T::zero(); cout];
                        for (i, chunk) in gout.chunks(plane).enumerate() {
                            gb[i % cout] = gb[i % cout] + chunk.iter().copied().sum::<T>();
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, c, inner) = axis_split(out.shape(), *axis);
                let gd = self.data(*gamma);
                let mut gx = vec![T::zero(); gout.len()];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let cn = T::of(c as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |ch: usize| (o * c + ch) * inner + i;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for ch in 0..c {
                            let dy = gout[at(ch)];
                            gg[ch] = gg[ch] + dy * xhat[at(ch)];
                            gbeta[ch] = gbeta[ch] + dy;
                            let dxh = dy * gd[ch];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat[at(ch)];
                        }
                        let r = rstd[o * inner + i] / cn;
                        for ch in 0..c {
                            let dxh = gout[at(ch)] * gd[ch];
                            gx[at(ch)] = r * (cn * dxh - s1 - xhat[at(ch)] * s2);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let s = out.shape();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gd = self.data(*gamma);
                let mut gx = vec![T::zero(); gout.len()];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let cnt = T::of((b * hw) as f64);
                for ch in 0..c {
                    let planes =
                        || (0..b).flat_map(move |n| (n * c + ch) * hw..(n * c + ch + 1) * hw);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for i in planes() {
                        gg[ch] = gg[ch] + gout[i] * xhat[i];
                        gbeta[ch] = gbeta[ch] + gout[i];
                        let dxh = gout[i] * gd[ch];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xhat[i];
                    }
                    let r = rstd[ch] / cnt;
                    for i in planes() {
                        gx[i] = r * (cnt * gout[i] * gd[ch] - s1 - xhat[i] * s2);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gbeta);
            }
            Op::Softmax { x, axis, tau } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot = (0..n).map(|k| gout[at(k)] * y[at(k)]).sum::<T>();
                        for k in 0..n {
                            gx[at(k)] = y[at(k)] * (gout[at(k)] - dot) / *tau;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gout[0]; n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        gx[(o * n + k) * inner..(o * n + k + 1) * inner]
                            .copy_from_slice(&gout[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MaxAxis { x, arg } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (g, &i) in gout.iter().zip(arg) {
                    gx[i] = gx[i] + *g;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gout.to_vec()),
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                self.accumulate(grads, *x, kernels::permute(gout, out.shape(), &inv));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            gv.extend_from_slice(
                                &gout[(o * total + offset) * inner
                                    ..(o * total + offset + n) * inner],
                            );
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&gout[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BroadcastTo(x) => {
                let g = kernels::reduce_to_shape(gout, out.shape(), self.shape(*x));
                self.accumulate(grads, *x, g);
            }
            Op::Gather { x, idx } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (g, &i) in gout.iter().zip(idx) {
                    gx[i] = gx[i] + *g;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Scan { a, b, g } => {
                let s = out.shape();
                let (da, db, dg) = kernels::scan_backward(
                    self.data(*a),
                    self.data(*b),
                    self.data(*g),
                    out.data(),
                    gout,
                    s[0],
                    s[1],
                );
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
                self.accumulate(grads, *g, dg);
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`]: gradients for every differentiable leaf.
pub struct Gradients<T> {
    leaves: HashMap<usize, Vec<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created by [`Graph::leaf`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// One gradient buffer per stored parameter, zero where the parameter did
    /// not take part in the graph.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        let mut out: Vec<Vec<T>> = store
            .iter()
            .map(|(_, p)| vec![T::zero(); p.tensor.len()])
            .collect();
        for &(id, v) in &self.params {
            if let Some(g) = self.leaves.get(&v.0) {
                out[id.index()].copy_from_slice(g);
            }
        }
        out
    }
}
