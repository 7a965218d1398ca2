use serde::{Deserialize, Serialize};

use super::hyper::HyperParam;
use super::KernelError;

/// Stationary base kernel families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    SquaredExponential,
    Matern32,
    Matern52,
    Periodic,
}

impl KernelKind {
    /// Canonical DSL spelling.
    pub fn dsl_name(self) -> &'static str {
        match self {
            KernelKind::SquaredExponential => "SE",
            KernelKind::Matern32 => "Mat32",
            KernelKind::Matern52 => "Mat52",
            KernelKind::Periodic => "Periodic",
        }
    }

    /// Case-insensitive lookup of a DSL kernel name.
    pub fn from_dsl(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "se" => Some(KernelKind::SquaredExponential),
            "mat32" => Some(KernelKind::Matern32),
            "mat52" => Some(KernelKind::Matern52),
            "periodic" => Some(KernelKind::Periodic),
            _ => None,
        }
    }
}

/// One leaf of a kernel expression, acting on a named subset of the input
/// columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseKernel {
    pub kind: KernelKind,
    pub features: Vec<String>,
    /// Column index of each feature in the bound input schema.
    pub columns: Vec<usize>,
    pub ard: bool,
    pub variance: HyperParam,
    pub lengthscales: Vec<HyperParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<HyperParam>,
}

impl BaseKernel {
    /// Isotropic kernel with unit variance, lengthscale and period.
    pub fn new(
        kind: KernelKind,
        features: Vec<String>,
        columns: Vec<usize>,
    ) -> Result<Self, KernelError> {
        if features.is_empty() {
            return Err(KernelError::EmptyFeatures);
        }
        assert_eq!(features.len(), columns.len());
        for (i, f) in features.iter().enumerate() {
            if features[..i].contains(f) {
                return Err(KernelError::DuplicateFeature(f.clone()));
            }
        }
        if kind == KernelKind::Periodic && features.len() != 1 {
            return Err(KernelError::Arity {
                kernel: kind.dsl_name().to_string(),
                expected: 1,
                found: features.len(),
            });
        }
        let period = (kind == KernelKind::Periodic).then(|| HyperParam::new("period", 1.0));
        Ok(Self {
            kind,
            features,
            columns,
            ard: false,
            variance: HyperParam::new("variance", 1.0),
            lengthscales: vec![HyperParam::new("lengthscale", 1.0)],
            period,
        })
    }

    pub fn n_params(&self) -> usize {
        1 + self.lengthscales.len() + usize::from(self.period.is_some())
    }

    /// Switches between one shared lengthscale and one per feature. The
    /// current (first) lengthscale value seeds the new ones.
    pub fn set_ard(&mut self, ard: bool) -> Result<(), KernelError> {
        if ard && self.kind == KernelKind::Periodic {
            return Err(KernelError::Arity {
                kernel: "Periodic (ARD)".into(),
                expected: 1,
                found: self.features.len(),
            });
        }
        if ard == self.ard {
            return Ok(());
        }
        let seed = self.lengthscales[0].clone();
        let count = if ard { self.features.len() } else { 1 };
        self.lengthscales = vec![seed; count];
        self.ard = ard;
        Ok(())
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &HyperParam> {
        std::iter::once(&self.variance)
            .chain(self.lengthscales.iter())
            .chain(self.period.iter())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut HyperParam> {
        std::iter::once(&mut self.variance)
            .chain(self.lengthscales.iter_mut())
            .chain(self.period.iter_mut())
    }

    /// Renames parameters as `<kind>_<leaf>.<role>[.<feature>]`.
    pub(crate) fn assign_names(&mut self, leaf: usize) {
        let prefix = format!("{}_{}", self.kind.dsl_name().to_ascii_lowercase(), leaf);
        self.variance.name = format!("{prefix}.variance");
        if self.ard {
            for (ls, f) in self.lengthscales.iter_mut().zip(&self.features) {
                ls.name = format!("{prefix}.lengthscale.{f}");
            }
        } else {
            self.lengthscales[0].name = format!("{prefix}.lengthscale");
        }
        if let Some(p) = &mut self.period {
            p.name = format!("{prefix}.period");
        }
    }
}
