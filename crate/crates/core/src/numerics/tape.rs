use super::tensor::softmax_row;
use super::{NumericsError, Tensor, LOG_FLOOR};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    AddRow {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        s: f64,
    },
    AddScalar {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Exp {
        x: usize,
    },
    Log {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Abs {
        x: usize,
    },
    Huber {
        x: usize,
        delta: f64,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceRows {
        x: usize,
        offset: usize,
    },
    ConcatRows {
        xs: Vec<usize>,
    },
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
    SumLastdim {
        x: usize,
    },
    HeadScores {
        q: usize,
        k: usize,
        heads: usize,
        scale: f64,
    },
    HeadMix {
        p: usize,
        v: usize,
        heads: usize,
    },
    HeadMean {
        p: usize,
        heads: usize,
    },
    SegmentSum {
        x: usize,
        bounds: Vec<usize>,
    },
    JsRows {
        q: usize,
        target: Vec<f64>,
    },
    BceLogits {
        x: usize,
        target: Vec<f64>,
    },
    CrossEntropy {
        x: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations for one forward pass; replayed in reverse by
/// [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Strided `c = alpha * a * b + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds: the largest offset touched must lie inside each buffer.
    let reach = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize
    };
    assert!(k == 0 || reach(m, k, rsa, csa) < a.len());
    assert!(k == 0 || reach(k, n, rsb, csb) < b.len());
    assert!(reach(m, n, rsc, csc) < c.len());
    // SAFETY: every pointer offset stays within the slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn row_major(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

fn col_major(rows: usize) -> (isize, isize) {
    (1, rows as isize)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn floored_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Jensen-Shannon divergence of two distributions that already sum to one.
pub(crate) fn js_kernel(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        let lm = floored_ln(m);
        if a > 0.0 {
            total += 0.5 * a * (floored_ln(a) - lm);
        }
        if b > 0.0 {
            total += 0.5 * b * (floored_ln(b) - lm);
        }
    }
    total.max(0.0)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values (gradients excluded).
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel() * 8).sum()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records an input tensor; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, NumericsError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.node(v).value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumericsError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(NumericsError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.node(x).value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NumericsError> {
        self.same_shape(a, b, name)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_t(a, false, b, false)
    }

    /// `a [m×k] · bᵀ` where `b` is stored `[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_t(a, false, b, true)
    }

    fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, NumericsError> {
        let (ar, ac) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(NumericsError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        let sa = if ta { col_major(m) } else { row_major(k) };
        let sb = if tb { col_major(k) } else { row_major(n) };
        gemm(
            m,
            k,
            n,
            1.0,
            self.data(a),
            sa,
            self.data(b),
            sb,
            0.0,
            &mut out,
            row_major(n),
        );
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            t,
            Op::Matmul {
                a: a.0,
                b: b.0,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "add", Op::Add { a: a.0, b: b.0 }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "sub", Op::Sub { a: a.0, b: b.0 }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "mul", Op::Mul { a: a.0, b: b.0 }, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "div", Op::Div { a: a.0, b: b.0 }, |x, y| {
            x / y.max(LOG_FLOOR)
        })
    }

    /// `x [..×n] + bias [n]`, broadcast over leading dimensions.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).last_dim();
        if self.value(bias).numel() != n {
            return Err(NumericsError::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(
            t,
            Op::AddRow {
                x: x.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale { x: x.0, s }, |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar { x: x.0 }, |v| v + s)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = src.last_dim();
        let mut data = vec![0.0; src.numel()];
        for (s, d) in src.data().chunks(n).zip(data.chunks_mut(n)) {
            softmax_row(s, d);
        }
        let t = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(x);
        self.push(t, Op::Softmax { x: x.0 }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid { x: x.0 }, sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp { x: x.0 }, f64::exp)
    }

    /// Natural log with the argument floored at `LOG_FLOOR`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log { x: x.0 }, floored_ln)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu { x: x.0 }, gelu)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs { x: x.0 }, f64::abs)
    }

    pub fn huber(&mut self, x: Var, delta: f64) -> Var {
        self.unary(x, Op::Huber { x: x.0, delta }, |v| {
            if v.abs() <= delta {
                0.5 * v * v
            } else {
                delta * (v.abs() - 0.5 * delta)
            }
        })
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let n = self.value(x).last_dim();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(NumericsError::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.value(x).rows();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = vec![0.0; rows * n];
        let (g, b) = (self.data(gamma), self.data(beta));
        for (src, dst) in self.data(x).chunks(n).zip(data.chunks_mut(n)) {
            let mu = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for i in 0..n {
                dst[i] = (src[i] - mu) * r * g[i] + b[i];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Rows `[start, start + count)` of a tensor viewed as `[rows, last_dim]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var, NumericsError> {
        let src = self.value(x);
        let n = src.last_dim();
        if count == 0 || start + count > src.rows() {
            return Err(NumericsError::Shape {
                op: "slice_rows",
                lhs: src.shape().to_vec(),
                rhs: vec![start, count],
            });
        }
        let data = src.data()[start * n..(start + count) * n].to_vec();
        let t = Tensor::new(vec![count, n], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::SliceRows {
                x: x.0,
                offset: start * n,
            },
            rg,
        ))
    }

    /// Concatenates `[r_i, n]` tensors along rows.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let first = *xs
            .first()
            .ok_or_else(|| NumericsError::Contract("concat of nothing".into()))?;
        let n = self.value(first).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            if v.last_dim() != n {
                return Err(NumericsError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            t,
            Op::ConcatRows {
                xs: xs.iter().map(|v| v.0).collect(),
            },
            rg,
        ))
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`.
    pub fn gather(
        &mut self,
        x: Var,
        index: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<Var, NumericsError> {
        let src = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(NumericsError::Contract(format!(
                "gather index {bad} out of range for {} entries",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { x: x.0, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x: x.0 }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums each last-dimension slice: `[.., n] -> [rows]`.
    pub fn sum_lastdim(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = src.last_dim();
        let data: Vec<f64> = src.data().chunks(n).map(|c| c.iter().sum()).collect();
        let t = Tensor::new(vec![data.len()], data).expect("non-empty");
        let rg = self.rg(x);
        self.push(t, Op::SumLastdim { x: x.0 }, rg)
    }

    /// Per-head scaled dot products: `q [n×d]`, `k [m×d]` -> `[heads, n, m]`.
    pub fn head_scores(
        &mut self,
        q: Var,
        k: Var,
        heads: usize,
        scale: f64,
    ) -> Result<Var, NumericsError> {
        let (n, d) = self.matrix_dims(q, "head_scores")?;
        let (m, d2) = self.matrix_dims(k, "head_scores")?;
        if d != d2 || heads == 0 || d % heads != 0 {
            return Err(NumericsError::Shape {
                op: "head_scores",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let dh = d / heads;
        let mut out = vec![0.0; heads * n * m];
        for h in 0..heads {
            gemm(
                n,
                dh,
                m,
                scale,
                &self.data(q)[h * dh..],
                row_major(d),
                &self.data(k)[h * dh..],
                col_major(d),
                0.0,
                &mut out[h * n * m..(h + 1) * n * m],
                row_major(m),
            );
        }
        let t = Tensor::new(vec![heads, n, m], out)?;
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(
            t,
            Op::HeadScores {
                q: q.0,
                k: k.0,
                heads,
                scale,
            },
            rg,
        ))
    }

    /// Per-head weighted sums: `p [heads, n, m]`, `v [m×d]` -> `[n×d]` with
    /// head `h` writing columns `h·d/heads ..`.
    pub fn head_mix(&mut self, p: Var, v: Var, heads: usize) -> Result<Var, NumericsError> {
        let (m, d) = self.matrix_dims(v, "head_mix")?;
        let ps = self.shape(p).to_vec();
        if ps.len() != 3 || ps[0] != heads || ps[2] != m || d % heads != 0 {
            return Err(NumericsError::Shape {
                op: "head_mix",
                lhs: ps,
                rhs: vec![m, d],
            });
        }
        let n = ps[1];
        let dh = d / heads;
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            gemm(
                n,
                m,
                dh,
                1.0,
                &self.data(p)[h * n * m..],
                row_major(m),
                &self.data(v)[h * dh..],
                row_major(d),
                0.0,
                &mut out[h * dh..],
                row_major(d),
            );
        }
        let t = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(p) || self.rg(v);
        Ok(self.push(
            t,
            Op::HeadMix {
                p: p.0,
                v: v.0,
                heads,
            },
            rg,
        ))
    }

    /// Arithmetic mean over the head axis: `[heads, n, m] -> [n, m]`.
    pub fn head_mean(&mut self, p: Var) -> Result<Var, NumericsError> {
        let ps = self.shape(p).to_vec();
        if ps.len() != 3 {
            return Err(NumericsError::Shape {
                op: "head_mean",
                lhs: ps,
                rhs: vec![],
            });
        }
        let (heads, n, m) = (ps[0], ps[1], ps[2]);
        let src = self.data(p);
        let mut out = vec![0.0; n * m];
        for h in 0..heads {
            for (o, s) in out.iter_mut().zip(&src[h * n * m..(h + 1) * n * m]) {
                *o += s;
            }
        }
        let inv = 1.0 / heads as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let t = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(p);
        Ok(self.push(t, Op::HeadMean { p: p.0, heads }, rg))
    }

    /// Sums contiguous column segments: `x [r, T]` with `bounds = [0, .., T]`
    /// -> `[r, bounds.len() - 1]`.
    pub fn segment_sum(&mut self, x: Var, bounds: &[usize]) -> Result<Var, NumericsError> {
        let (r, t) = self.matrix_dims(x, "segment_sum")?;
        let valid = bounds.len() >= 2
            && bounds[0] == 0
            && *bounds.last().unwrap() == t
            && bounds.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(NumericsError::Contract(format!(
                "segment bounds {bounds:?} do not partition {t} columns"
            )));
        }
        let segs = bounds.len() - 1;
        let mut out = vec![0.0; r * segs];
        for (row, dst) in self.data(x).chunks(t).zip(out.chunks_mut(segs)) {
            for (s, d) in dst.iter_mut().enumerate() {
                *d = row[bounds[s]..bounds[s + 1]].iter().sum();
            }
        }
        let tensor = Tensor::new(vec![r, segs], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            tensor,
            Op::SegmentSum {
                x: x.0,
                bounds: bounds.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise Jensen-Shannon divergence against constant targets of the same
    /// shape: `[r, n] -> [r]`.
    pub fn js_rows(&mut self, q: Var, target: Vec<f64>) -> Result<Var, NumericsError> {
        let (r, n) = self.matrix_dims(q, "js_rows")?;
        if target.len() != r * n {
            return Err(NumericsError::Shape {
                op: "js_rows",
                lhs: vec![r, n],
                rhs: vec![target.len()],
            });
        }
        let data: Vec<f64> = target
            .chunks(n)
            .zip(self.data(q).chunks(n))
            .map(|(p, q)| js_kernel(p, q))
            .collect();
        let t = Tensor::new(vec![r], data)?;
        let rg = self.rg(q);
        Ok(self.push(t, Op::JsRows { q: q.0, target }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against constant targets.
    pub fn bce_logits(&mut self, x: Var, target: Vec<f64>) -> Result<Var, NumericsError> {
        if target.len() != self.value(x).numel() {
            return Err(NumericsError::Shape {
                op: "bce_logits",
                lhs: self.shape(x).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let total: f64 = self
            .data(x)
            .iter()
            .zip(&target)
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum();
        let mean = total / target.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(mean), Op::BceLogits { x: x.0, target }, rg))
    }

    /// Weighted mean softmax cross-entropy over rows of `x [r, c]`:
    /// `Σ w_i·(−log softmax(x_i)[t_i]) / Σ w_i`.
    pub fn cross_entropy(
        &mut self,
        x: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix_dims(x, "cross_entropy")?;
        if targets.len() != r || weights.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(NumericsError::Contract(
                "cross_entropy targets/weights mismatch".into(),
            ));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(NumericsError::Contract(
                "cross_entropy weights sum to zero".into(),
            ));
        }
        let mut total = 0.0;
        for ((row, &t), &w) in self.data(x).chunks(c).zip(&targets).zip(&weights) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += w * (lse - row[t]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(total / wsum),
            Op::CrossEntropy {
                x: x.0,
                targets,
                weights,
            },
            rg,
        ))
    }

    /// Scales every last-dimension slice to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = src.last_dim();
        let mut data = src.data().to_vec();
        let mut norms = Vec::with_capacity(src.rows());
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(LOG_FLOOR);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(x);
        self.push(t, Op::NormalizeRows { x: x.0, norms }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`. Afterwards every node that
    /// requires grad carries `∂loss/∂node` (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..count).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(Some(g.unwrap_or_else(|| vec![0.0; n])));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let val = |j: usize| nodes[j].value.data();
        let wants = |j: usize| nodes[j].value.requires_grad();
        // Lazily allocated accumulator for input `j`.
        fn acc<'a>(
            grads: &'a mut [Option<Vec<f64>>],
            nodes: &[Node],
            j: usize,
        ) -> &'a mut Vec<f64> {
            grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()])
        }
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Matmul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                // C = op(A) op(B); dop(A) = dC op(B)^T, dop(B) = op(A)^T dC.
                if wants(a) {
                    let ga = acc(grads, nodes, a);
                    let sb_t = if tb { row_major(k) } else { col_major(n) };
                    if ta {
                        // A stored [k, m]: dA = op(B) dC^T
                        let sb = if tb { col_major(k) } else { row_major(n) };
                        gemm(
                            k,
                            n,
                            m,
                            1.0,
                            val(b),
                            sb,
                            g,
                            col_major(n),
                            1.0,
                            ga,
                            row_major(m),
                        );
                    } else {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            g,
                            row_major(n),
                            val(b),
                            sb_t,
                            1.0,
                            ga,
                            row_major(k),
                        );
                    }
                }
                if wants(b) {
                    let gb = acc(grads, nodes, b);
                    let sa_t = if ta { row_major(m) } else { col_major(k) };
                    if tb {
                        // B stored [n, k]: dB = dC^T op(A)
                        let sa = if ta { col_major(m) } else { row_major(k) };
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            g,
                            col_major(n),
                            val(a),
                            sa,
                            1.0,
                            gb,
                            row_major(k),
                        );
                    } else {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            val(a),
                            sa_t,
                            g,
                            row_major(n),
                            1.0,
                            gb,
                            row_major(n),
                        );
                    }
                }
            }
            &Op::Add { a, b } => {
                for (j, sign) in [(a, 1.0), (b, 1.0)] {
                    if wants(j) {
                        acc(grads, nodes, j)
                            .iter_mut()
                            .zip(g)
                            .for_each(|(d, s)| *d += sign * s);
                    }
                }
            }
            &Op::Sub { a, b } => {
                for (j, sign) in [(a, 1.0), (b, -1.0)] {
                    if wants(j) {
                        acc(grads, nodes, j)
                            .iter_mut()
                            .zip(g)
                            .for_each(|(d, s)| *d += sign * s);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let vb = val(b).to_vec();
                    let ga = acc(grads, nodes, a);
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(&vb) {
                        *d += s * y;
                    }
                }
                if wants(b) {
                    let va = val(a).to_vec();
                    let gb = acc(grads, nodes, b);
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(&va) {
                        *d += s * x;
                    }
                }
            }
            &Op::Div { a, b } => {
                let vb: Vec<f64> = val(b).iter().map(|y| y.max(LOG_FLOOR)).collect();
                if wants(a) {
                    let ga = acc(grads, nodes, a);
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(&vb) {
                        *d += s / y;
                    }
                }
                if wants(b) {
                    let raw_b = val(b).to_vec();
                    let gb = acc(grads, nodes, b);
                    for (((d, s), o), (y, raw)) in
                        gb.iter_mut().zip(g).zip(out).zip(vb.iter().zip(&raw_b))
                    {
                        if *raw >= LOG_FLOOR {
                            *d -= s * o / y;
                        }
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if wants(x) {
                    acc(grads, nodes, x)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
                if wants(bias) {
                    let gb = acc(grads, nodes, bias);
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::Scale { x, s } => {
                if wants(x) {
                    acc(grads, nodes, x)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gi)| *d += s * gi);
                }
            }
            &Op::AddScalar { x } | &Op::Reshape { x } => {
                if wants(x) {
                    acc(grads, nodes, x)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gi)| *d += gi);
                }
            }
            &Op::Softmax { x } => {
                if wants(x) {
                    let n = nodes[i].value.last_dim();
                    let gx = acc(grads, nodes, x);
                    for ((dst, y), gy) in gx.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for t in 0..n {
                            dst[t] += y[t] * (gy[t] - dot);
                        }
                    }
                }
            }
            &Op::Sigmoid { x } => self.elementwise_back(x, g, grads, |_, y| y * (1.0 - y), out),
            &Op::Exp { x } => self.elementwise_back(x, g, grads, |_, y| y, out),
            &Op::Log { x } => self.elementwise_back(
                x,
                g,
                grads,
                |v, _| if v >= LOG_FLOOR { 1.0 / v } else { 0.0 },
                out,
            ),
            &Op::Gelu { x } => self.elementwise_back(x, g, grads, |v, _| gelu_grad(v), out),
            &Op::Abs { x } => self.elementwise_back(
                x,
                g,
                grads,
                |v, _| v.signum() * (v != 0.0) as u8 as f64,
                out,
            ),
            &Op::Huber { x, delta } => {
                self.elementwise_back(x, g, grads, |v, _| v.clamp(-delta, delta), out)
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let n = nodes[i].value.last_dim();
                let xs = val(x);
                let gm = val(gamma);
                let rows = mean.len();
                let mut xhat = vec![0.0; rows * n];
                for r in 0..rows {
                    for t in 0..n {
                        xhat[r * n + t] = (xs[r * n + t] - mean[r]) * rstd[r];
                    }
                }
                if wants(gamma) {
                    let gg = acc(grads, nodes, gamma);
                    for r in 0..rows {
                        for t in 0..n {
                            gg[t] += g[r * n + t] * xhat[r * n + t];
                        }
                    }
                }
                if wants(beta) {
                    let gb = acc(grads, nodes, beta);
                    for r in 0..rows {
                        for t in 0..n {
                            gb[t] += g[r * n + t];
                        }
                    }
                }
                if wants(x) {
                    let gm = gm.to_vec();
                    let gx = acc(grads, nodes, x);
                    let nf = n as f64;
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..n).map(|t| g[r * n + t] * gm[t]).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghx: f64 = gh
                            .iter()
                            .zip(&xhat[r * n..(r + 1) * n])
                            .map(|(a, b)| a * b)
                            .sum();
                        for t in 0..n {
                            gx[r * n + t] +=
                                rstd[r] / nf * (nf * gh[t] - sum_gh - xhat[r * n + t] * sum_ghx);
                        }
                    }
                }
            }
            &Op::SliceRows { x, offset } => {
                if wants(x) {
                    let gx = acc(grads, nodes, x);
                    gx[offset..offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let len = nodes[x].value.numel();
                    if wants(x) {
                        acc(grads, nodes, x)
                            .iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, s)| *d += s);
                    }
                    offset += len;
                }
            }
            Op::Gather { x, index } => {
                if wants(*x) {
                    let gx = acc(grads, nodes, *x);
                    for (&j, s) in index.iter().zip(g) {
                        gx[j] += s;
                    }
                }
            }
            &Op::Sum { x } => {
                if wants(x) {
                    acc(grads, nodes, x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::SumLastdim { x } => {
                if wants(x) {
                    let n = nodes[x].value.last_dim();
                    let gx = acc(grads, nodes, x);
                    for (row, s) in gx.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|d| *d += s);
                    }
                }
            }
            &Op::HeadScores { q, k, heads, scale } => {
                let (n, d) = (nodes[q].value.shape()[0], nodes[q].value.shape()[1]);
                let m = nodes[k].value.shape()[0];
                let dh = d / heads;
                if wants(q) {
                    let gq = acc(grads, nodes, q);
                    for h in 0..heads {
                        gemm(
                            n,
                            m,
                            dh,
                            scale,
                            &g[h * n * m..],
                            row_major(m),
                            &val(k)[h * dh..],
                            row_major(d),
                            1.0,
                            &mut gq[h * dh..],
                            row_major(d),
                        );
                    }
                }
                if wants(k) {
                    let gk = acc(grads, nodes, k);
                    for h in 0..heads {
                        gemm(
                            m,
                            n,
                            dh,
                            scale,
                            &g[h * n * m..],
                            col_major(m),
                            &val(q)[h * dh..],
                            row_major(d),
                            1.0,
                            &mut gk[h * dh..],
                            row_major(d),
                        );
                    }
                }
            }
            &Op::HeadMix { p, v, heads } => {
                let (m, d) = (nodes[v].value.shape()[0], nodes[v].value.shape()[1]);
                let n = nodes[p].value.shape()[1];
                let dh = d / heads;
                if wants(p) {
                    let gp = acc(grads, nodes, p);
                    for h in 0..heads {
                        gemm(
                            n,
                            dh,
                            m,
                            1.0,
                            &g[h * dh..],
                            row_major(d),
                            &val(v)[h * dh..],
                            col_major(d),
                            1.0,
                            &mut gp[h * n * m..(h + 1) * n * m],
                            row_major(m),
                        );
                    }
                }
                if wants(v) {
                    let gv = acc(grads, nodes, v);
                    for h in 0..heads {
                        gemm(
                            m,
                            n,
                            dh,
                            1.0,
                            &val(p)[h * n * m..],
                            col_major(m),
                            &g[h * dh..],
                            row_major(d),
                            1.0,
                            &mut gv[h * dh..],
                            row_major(d),
                        );
                    }
                }
            }
            &Op::HeadMean { p, heads } => {
                if wants(p) {
                    let inv = 1.0 / heads as f64;
                    let gp = acc(grads, nodes, p);
                    for chunk in gp.chunks_mut(g.len()) {
                        chunk.iter_mut().zip(g).for_each(|(d, s)| *d += s * inv);
                    }
                }
            }
            Op::SegmentSum { x, bounds } => {
                if wants(*x) {
                    let t = *bounds.last().unwrap();
                    let segs = bounds.len() - 1;
                    let gx = acc(grads, nodes, *x);
                    for (row, gs) in gx.chunks_mut(t).zip(g.chunks(segs)) {
                        for s in 0..segs {
                            row[bounds[s]..bounds[s + 1]]
                                .iter_mut()
                                .for_each(|d| *d += gs[s]);
                        }
                    }
                }
            }
            Op::JsRows { q, target } => {
                if wants(*q) {
                    let n = nodes[*q].value.last_dim();
                    let qs = val(*q).to_vec();
                    let gq = acc(grads, nodes, *q);
                    for (r, s) in g.iter().enumerate() {
                        for t in r * n..(r + 1) * n {
                            let m = 0.5 * (qs[t] + target[t]);
                            gq[t] += s * 0.5 * (floored_ln(qs[t]) - floored_ln(m));
                        }
                    }
                }
            }
            Op::BceLogits { x, target } => {
                if wants(*x) {
                    let inv = g[0] / target.len() as f64;
                    let xs = val(*x).to_vec();
                    let gx = acc(grads, nodes, *x);
                    for ((d, z), t) in gx.iter_mut().zip(&xs).zip(target) {
                        *d += inv * (sigmoid(*z) - t);
                    }
                }
            }
            Op::CrossEntropy {
                x,
                targets,
                weights,
            } => {
                if wants(*x) {
                    let c = nodes[*x].value.last_dim();
                    let wsum: f64 = weights.iter().sum();
                    let xs = val(*x).to_vec();
                    let gx = acc(grads, nodes, *x);
                    let mut p = vec![0.0; c];
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        softmax_row(&xs[r * c..(r + 1) * c], &mut p);
                        let f = g[0] * w / wsum;
                        for u in 0..c {
                            let onehot = if u == t { 1.0 } else { 0.0 };
                            gx[r * c + u] += f * (p[u] - onehot);
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if wants(*x) {
                    let n = nodes[*x].value.last_dim();
                    let gx = acc(grads, nodes, *x);
                    for (r, norm) in norms.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for t in 0..n {
                            gx[r * n + t] += (gy[t] - y[t] * dot) / norm;
                        }
                    }
                }
            }
        }
    }

    fn elementwise_back(
        &self,
        x: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        deriv: impl Fn(f64, f64) -> f64,
        out: &[f64],
    ) {
        if !self.nodes[x].value.requires_grad() {
            return;
        }
        let xs = self.nodes[x].value.data();
        let gx = grads[x].get_or_insert_with(|| vec![0.0; xs.len()]);
        for t in 0..xs.len() {
            gx[t] += g[t] * deriv(xs[t], out[t]);
        }
    }
}
