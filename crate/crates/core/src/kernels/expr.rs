use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::base::{BaseKernel, KernelKind};
use super::hyper::HyperParam;
use super::KernelError;

/// Sum/product tree of base kernels.
///
/// Sums behave like a logical OR of the structures the children describe,
/// products like an AND. Parameter order everywhere (packing, gradients,
/// names) is depth-first, left to right, and within a leaf: variance,
/// lengthscales, period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelExpr {
    Leaf(BaseKernel),
    Sum(Vec<KernelExpr>),
    Product(Vec<KernelExpr>),
}

impl KernelExpr {
    pub fn leaf(kernel: BaseKernel) -> Self {
        let mut e = KernelExpr::Leaf(kernel);
        e.assign_names();
        e
    }

    pub fn sum(children: Vec<KernelExpr>) -> Self {
        assert!(children.len() >= 2, "sum needs at least two children");
        let mut e = KernelExpr::Sum(children);
        e.assign_names();
        e
    }

    pub fn product(children: Vec<KernelExpr>) -> Self {
        assert!(children.len() >= 2, "product needs at least two children");
        let mut e = KernelExpr::Product(children);
        e.assign_names();
        e
    }

    pub fn n_params(&self) -> usize {
        match self {
            KernelExpr::Leaf(k) => k.n_params(),
            KernelExpr::Sum(c) | KernelExpr::Product(c) => c.iter().map(Self::n_params).sum(),
        }
    }

    pub fn leaves(&self) -> Vec<&BaseKernel> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a BaseKernel>) {
        match self {
            KernelExpr::Leaf(k) => out.push(k),
            KernelExpr::Sum(c) | KernelExpr::Product(c) => {
                c.iter().for_each(|e| e.collect_leaves(out))
            }
        }
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut BaseKernel> {
        let mut out = Vec::new();
        self.collect_leaves_mut(&mut out);
        out
    }

    fn collect_leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut BaseKernel>) {
        match self {
            KernelExpr::Leaf(k) => out.push(k),
            KernelExpr::Sum(c) | KernelExpr::Product(c) => {
                c.iter_mut().for_each(|e| e.collect_leaves_mut(out))
            }
        }
    }

    /// Hyperparameters in pack order.
    pub fn params(&self) -> Vec<&HyperParam> {
        self.leaves().into_iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut HyperParam> {
        self.leaves_mut().into_iter().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().iter().map(|p| p.name.clone()).collect()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut HyperParam> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    /// Unconstrained (log-space) parameter vector.
    pub fn pack_params(&self) -> Vec<f64> {
        self.params().iter().map(|p| p.unconstrained()).collect()
    }

    pub fn unpack_params(&mut self, values: &[f64]) -> Result<(), KernelError> {
        let expected = self.n_params();
        if values.len() != expected {
            return Err(KernelError::LengthMismatch { expected, found: values.len() });
        }
        for (p, &u) in self.params_mut().into_iter().zip(values) {
            p.set_unconstrained(u);
        }
        Ok(())
    }

    /// Sum of the Gaussian log-priors over all parameters that carry one.
    pub fn log_prior(&self) -> f64 {
        self.params().iter().map(|p| p.log_prior()).sum()
    }

    pub fn log_prior_grad(&self) -> Vec<f64> {
        self.params().iter().map(|p| p.log_prior_grad()).collect()
    }

    /// Switches ARD on or off for the leaf at depth-first index `leaf`.
    pub fn set_ard(&mut self, leaf: usize, ard: bool) -> Result<(), KernelError> {
        let mut leaves = self.leaves_mut();
        let count = leaves.len();
        let k = leaves
            .get_mut(leaf)
            .ok_or_else(|| KernelError::UnknownParameter(format!("leaf {leaf} of {count}")))?;
        k.set_ard(ard)?;
        drop(leaves);
        self.assign_names();
        Ok(())
    }

    pub(crate) fn assign_names(&mut self) {
        for (i, leaf) in self.leaves_mut().into_iter().enumerate() {
            leaf.assign_names(i);
        }
    }

    /// Sorted set of input columns any leaf reads.
    pub fn columns(&self) -> BTreeSet<usize> {
        self.leaves().iter().flat_map(|l| l.columns.iter().copied()).collect()
    }

    pub fn features(&self) -> BTreeSet<String> {
        self.leaves().iter().flat_map(|l| l.features.iter().cloned()).collect()
    }

    /// Re-resolves feature names against a new schema.
    pub fn bind(&mut self, schema: &[String]) -> Result<(), KernelError> {
        for leaf in self.leaves_mut() {
            for (f, c) in leaf.features.iter().zip(leaf.columns.iter_mut()) {
                *c = schema
                    .iter()
                    .position(|s| s == f)
                    .ok_or_else(|| KernelError::UnknownFeature(f.clone()))?;
            }
        }
        Ok(())
    }

    /// Clamps every bounded parameter into its bounds.
    pub fn project(&mut self) {
        self.params_mut().into_iter().for_each(HyperParam::project);
    }

    /// DSL text that parses back to this tree.
    pub fn render(&self) -> String {
        match self {
            KernelExpr::Leaf(k) => format!("{}({})", k.kind.dsl_name(), k.features.join(",")),
            KernelExpr::Sum(c) => c.iter().map(Self::render).collect::<Vec<_>>().join(" + "),
            KernelExpr::Product(c) => c
                .iter()
                .map(|e| match e {
                    KernelExpr::Sum(_) => format!("({})", e.render()),
                    _ => e.render(),
                })
                .collect::<Vec<_>>()
                .join(" * "),
        }
    }

    /// Same tree shape, kinds and features (hyperparameter values ignored).
    pub fn same_structure(&self, other: &KernelExpr) -> bool {
        match (self, other) {
            (KernelExpr::Leaf(a), KernelExpr::Leaf(b)) => {
                a.kind == b.kind && a.features == b.features && a.ard == b.ard
            }
            (KernelExpr::Sum(a), KernelExpr::Sum(b))
            | (KernelExpr::Product(a), KernelExpr::Product(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_structure(y))
            }
            _ => false,
        }
    }

    pub fn kinds(&self) -> Vec<KernelKind> {
        self.leaves().iter().map(|l| l.kind).collect()
    }
}

impl fmt::Display for KernelExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
