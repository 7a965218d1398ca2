//! Flat, value-resolved form of a [`KernelExpr`] used in the hot loops.
//!
//! Every matrix entry is computed independently from the two input rows, so
//! assembling in parallel gives bitwise identical results for any thread
//! count. Reductions over entries are done per column and summed in column
//! order.

use nalgebra::DMatrix;
use rayon::prelude::*;
use smallvec::SmallVec;

use super::base::KernelKind;
use super::expr::KernelExpr;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

type Buf = SmallVec<[f64; 16]>;

#[derive(Clone, Debug)]
struct Leaf {
    kind: KernelKind,
    columns: Vec<usize>,
    inv_ls: Vec<f64>,
    ard: bool,
    variance: f64,
    lengthscale: f64,
    period: f64,
    n_params: usize,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf(Leaf),
    Sum(Vec<Node>, usize),
    Product(Vec<Node>, usize),
}

/// Evaluator snapshot of a kernel expression at its current hyperparameters.
#[derive(Clone, Debug)]
pub struct CompiledKernel {
    root: Node,
    n_params: usize,
    max_column: usize,
}

/// Row-major copy of an input matrix.
pub(crate) struct Rows {
    data: Vec<f64>,
    d: usize,
}

impl Rows {
    pub(crate) fn new(m: &DMatrix<f64>) -> Self {
        let (n, d) = m.shape();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend(m.row(i).iter());
        }
        Self { data, d }
    }

    #[inline]
    pub(crate) fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub(crate) fn len(&self) -> usize {
        if self.d == 0 {
            0
        } else {
            self.data.len() / self.d
        }
    }
}

fn compile_node(e: &KernelExpr) -> Node {
    match e {
        KernelExpr::Leaf(k) => {
            let ls: Vec<f64> = k.lengthscales.iter().map(|p| p.value()).collect();
            let inv_ls = if k.ard {
                ls.iter().map(|l| 1.0 / l).collect()
            } else {
                vec![1.0 / ls[0]; k.columns.len()]
            };
            Node::Leaf(Leaf {
                kind: k.kind,
                columns: k.columns.clone(),
                inv_ls,
                ard: k.ard,
                variance: k.variance.value(),
                lengthscale: ls[0],
                period: k.period.as_ref().map_or(1.0, |p| p.value()),
                n_params: k.n_params(),
            })
        }
        KernelExpr::Sum(c) => Node::Sum(c.iter().map(compile_node).collect(), e.n_params()),
        KernelExpr::Product(c) => {
            Node::Product(c.iter().map(compile_node).collect(), e.n_params())
        }
    }
}

impl Node {
    fn n_params(&self) -> usize {
        match self {
            Node::Leaf(l) => l.n_params,
            Node::Sum(_, n) | Node::Product(_, n) => *n,
        }
    }
}

impl Leaf {
    /// Returns `(k, f)` where `f` is the common factor of the lengthscale
    /// gradients: `∂k/∂log ℓ_d = f·(Δ_d/ℓ_d)²` and `∂k/∂a_d = −f·Δ_d/ℓ_d²`.
    #[inline]
    fn stationary(&self, r2: f64) -> (f64, f64) {
        let s2 = self.variance;
        match self.kind {
            KernelKind::SquaredExponential => {
                let k = s2 * (-0.5 * r2).exp();
                (k, k)
            }
            KernelKind::Matern32 => {
                let r = r2.sqrt();
                let e = (-SQRT3 * r).exp();
                (s2 * (1.0 + SQRT3 * r) * e, 3.0 * s2 * e)
            }
            KernelKind::Matern52 => {
                let r = r2.sqrt();
                let e = (-SQRT5 * r).exp();
                (
                    s2 * (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * e,
                    5.0 / 3.0 * s2 * (1.0 + SQRT5 * r) * e,
                )
            }
            KernelKind::Periodic => unreachable!("periodic handled separately"),
        }
    }

    #[inline]
    fn r2(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for (&c, &il) in self.columns.iter().zip(&self.inv_ls) {
            let t = (a[c] - b[c]) * il;
            r2 += t * t;
        }
        r2
    }

    #[inline]
    fn periodic_parts(&self, a: &[f64], b: &[f64]) -> (f64, f64, f64, f64) {
        let c = self.columns[0];
        let arg = std::f64::consts::PI * (a[c] - b[c]) / self.period;
        let (s, co) = arg.sin_cos();
        let inv_l2 = 1.0 / (self.lengthscale * self.lengthscale);
        let k = self.variance * (-2.0 * s * s * inv_l2).exp();
        (k, s, co, arg)
    }

    #[inline]
    fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        if self.kind == KernelKind::Periodic {
            self.periodic_parts(a, b).0
        } else {
            self.stationary(self.r2(a, b)).0
        }
    }

    #[inline]
    fn value_and_grad(&self, a: &[f64], b: &[f64], g: &mut [f64]) -> f64 {
        if self.kind == KernelKind::Periodic {
            let (k, s, co, arg) = self.periodic_parts(a, b);
            let inv_l2 = 1.0 / (self.lengthscale * self.lengthscale);
            g[0] = k;
            g[1] = 4.0 * k * s * s * inv_l2;
            g[2] = 4.0 * k * s * co * arg * inv_l2;
            return k;
        }
        if self.ard {
            let mut r2 = 0.0;
            for (d, (&c, &il)) in self.columns.iter().zip(&self.inv_ls).enumerate() {
                let t = (a[c] - b[c]) * il;
                g[1 + d] = t * t;
                r2 += t * t;
            }
            let (k, f) = self.stationary(r2);
            g[0] = k;
            for gd in &mut g[1..] {
                *gd *= f;
            }
            k
        } else {
            let r2 = self.r2(a, b);
            let (k, f) = self.stationary(r2);
            g[0] = k;
            g[1] = f * r2;
            k
        }
    }

    /// Adds `scale·∂k(a,b)/∂a` into `out`.
    #[inline]
    fn add_input_grad(&self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        if self.kind == KernelKind::Periodic {
            let (k, s, co, _) = self.periodic_parts(a, b);
            let inv_l2 = 1.0 / (self.lengthscale * self.lengthscale);
            let d = -4.0 * std::f64::consts::PI * k * s * co * inv_l2 / self.period;
            out[self.columns[0]] += scale * d;
            return;
        }
        let (_, f) = self.stationary(self.r2(a, b));
        for (&c, &il) in self.columns.iter().zip(&self.inv_ls) {
            out[c] -= scale * f * (a[c] - b[c]) * il * il;
        }
    }
}

impl Node {
    fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Node::Leaf(l) => l.value(a, b),
            Node::Sum(c, _) => c.iter().map(|n| n.value(a, b)).sum(),
            Node::Product(c, _) => c.iter().map(|n| n.value(a, b)).product(),
        }
    }

    fn value_and_grad(&self, a: &[f64], b: &[f64], g: &mut [f64]) -> f64 {
        match self {
            Node::Leaf(l) => l.value_and_grad(a, b, g),
            Node::Sum(c, _) => {
                let mut off = 0;
                let mut v = 0.0;
                for n in c {
                    let np = n.n_params();
                    v += n.value_and_grad(a, b, &mut g[off..off + np]);
                    off += np;
                }
                v
            }
            Node::Product(c, _) => {
                let mut vals: Buf = SmallVec::new();
                let mut off = 0;
                for n in c {
                    let np = n.n_params();
                    vals.push(n.value_and_grad(a, b, &mut g[off..off + np]));
                    off += np;
                }
                let mut off = 0;
                for (i, n) in c.iter().enumerate() {
                    let others: f64 = vals
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, v)| v)
                        .product();
                    let np = n.n_params();
                    g[off..off + np].iter_mut().for_each(|x| *x *= others);
                    off += np;
                }
                vals.iter().product()
            }
        }
    }

    fn add_input_grad(&self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Node::Leaf(l) => l.add_input_grad(a, b, scale, out),
            Node::Sum(c, _) => c.iter().for_each(|n| n.add_input_grad(a, b, scale, out)),
            Node::Product(c, _) => {
                let vals: Buf = c.iter().map(|n| n.value(a, b)).collect();
                for (i, n) in c.iter().enumerate() {
                    let others: f64 = vals
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, v)| v)
                        .product();
                    n.add_input_grad(a, b, scale * others, out);
                }
            }
        }
    }
}

impl CompiledKernel {
    pub fn new(expr: &KernelExpr) -> Self {
        Self {
            root: compile_node(expr),
            n_params: expr.n_params(),
            max_column: expr.columns().into_iter().max().unwrap_or(0),
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Smallest input width the kernel can be evaluated on.
    pub fn min_width(&self) -> usize {
        self.max_column + 1
    }

    #[inline]
    pub fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        self.root.value(a, b)
    }

    /// Kernel value and the gradient with respect to every log-space
    /// hyperparameter, in pack order.
    #[inline]
    pub fn value_and_grad(&self, a: &[f64], b: &[f64], g: &mut [f64]) -> f64 {
        self.root.value_and_grad(a, b, g)
    }

    /// `∂k(a, b)/∂a`, written into `out` (length = input width).
    pub fn input_grad(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        self.root.add_input_grad(a, b, 1.0, out);
    }

    /// Cross-covariance `K(A, B)`.
    pub fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let ra = Rows::new(a);
        let rb = Rows::new(b);
        self.cross_rows(&ra, &rb)
    }

    pub(crate) fn cross_rows(&self, ra: &Rows, rb: &Rows) -> DMatrix<f64> {
        let (n, m) = (ra.len(), rb.len());
        let mut out = DMatrix::zeros(n, m);
        if n == 0 {
            return out;
        }
        out.as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(j, col)| {
                let bj = rb.row(j);
                for (i, x) in col.iter_mut().enumerate() {
                    *x = self.value(ra.row(i), bj);
                }
            });
        out
    }

    /// Symmetric Gram matrix `K(A, A)`; the upper triangle mirrors the lower.
    pub fn gram(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let ra = Rows::new(a);
        let n = ra.len();
        let mut out = DMatrix::zeros(n, n);
        if n == 0 {
            return out;
        }
        out.as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(j, col)| {
                let aj = ra.row(j);
                for (i, x) in col.iter_mut().enumerate().skip(j) {
                    *x = self.value(ra.row(i), aj);
                }
            });
        for j in 0..n {
            for i in j + 1..n {
                out[(j, i)] = out[(i, j)];
            }
        }
        out
    }

    /// `k(aᵢ, aᵢ)` for every row.
    pub fn diag(&self, a: &DMatrix<f64>) -> Vec<f64> {
        let ra = Rows::new(a);
        (0..ra.len()).map(|i| self.value(ra.row(i), ra.row(i))).collect()
    }

    /// `Σᵢⱼ Wᵢⱼ ∂K(A,A)ᵢⱼ/∂u_p` for every parameter `p`, with `W` symmetric.
    pub fn contract_gram(&self, a: &DMatrix<f64>, w: &DMatrix<f64>) -> Vec<f64> {
        let ra = Rows::new(a);
        let n = ra.len();
        let np = self.n_params;
        let per_col: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let aj = ra.row(j);
                let mut acc = vec![0.0; np];
                let mut g = vec![0.0; np];
                for i in j..n {
                    let weight = if i == j { w[(i, j)] } else { w[(i, j)] + w[(j, i)] };
                    if weight == 0.0 {
                        continue;
                    }
                    self.value_and_grad(ra.row(i), aj, &mut g);
                    for (s, gp) in acc.iter_mut().zip(&g) {
                        *s += weight * gp;
                    }
                }
                acc
            })
            .collect();
        sum_columns(per_col, np)
    }

    /// `Σᵢⱼ Wᵢⱼ ∂K(A,B)ᵢⱼ/∂u_p` for a general cross-covariance.
    pub fn contract_cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>) -> Vec<f64> {
        let ra = Rows::new(a);
        let rb = Rows::new(b);
        let np = self.n_params;
        let per_col: Vec<Vec<f64>> = (0..rb.len())
            .into_par_iter()
            .map(|j| {
                let bj = rb.row(j);
                let mut acc = vec![0.0; np];
                let mut g = vec![0.0; np];
                for i in 0..ra.len() {
                    let weight = w[(i, j)];
                    if weight == 0.0 {
                        continue;
                    }
                    self.value_and_grad(ra.row(i), bj, &mut g);
                    for (s, gp) in acc.iter_mut().zip(&g) {
                        *s += weight * gp;
                    }
                }
                acc
            })
            .collect();
        sum_columns(per_col, np)
    }

    /// `Σᵢ wᵢ ∂k(aᵢ,aᵢ)/∂u_p`.
    pub fn contract_diag(&self, a: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
        let ra = Rows::new(a);
        let np = self.n_params;
        let mut acc = vec![0.0; np];
        let mut g = vec![0.0; np];
        for (i, &wi) in w.iter().enumerate() {
            let r = ra.row(i);
            self.value_and_grad(r, r, &mut g);
            for (s, gp) in acc.iter_mut().zip(&g) {
                *s += wi * gp;
            }
        }
        acc
    }

    /// Row `a` of the result is `Σⱼ Wₐⱼ ∂k(aₐ, bⱼ)/∂aₐ`.
    pub fn contract_input_grad(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        w: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let ra = Rows::new(a);
        let rb = Rows::new(b);
        let d = a.ncols();
        let rows: Vec<Vec<f64>> = (0..ra.len())
            .into_par_iter()
            .map(|i| {
                let ai = ra.row(i);
                let mut acc = vec![0.0; d];
                let mut g = vec![0.0; d];
                for j in 0..rb.len() {
                    let weight = w[(i, j)];
                    if weight == 0.0 {
                        continue;
                    }
                    self.input_grad(ai, rb.row(j), &mut g);
                    for (s, x) in acc.iter_mut().zip(&g) {
                        *s += weight * x;
                    }
                }
                acc
            })
            .collect();
        DMatrix::from_fn(ra.len(), d, |i, k| rows[i][k])
    }
}

fn sum_columns(parts: Vec<Vec<f64>>, np: usize) -> Vec<f64> {
    let mut out = vec![0.0; np];
    for p in parts {
        for (o, x) in out.iter_mut().zip(p) {
            *o += x;
        }
    }
    out
}
