//! Fit configuration file: a flat JSON object.
//!
//! ```json
//! {"p": 2, "breakpoints": [0.5, 1.0], "basis": "linear",
//!  "tol": 1e-7, "max_iter": 500, "seed": 7, "scale": 100}
//! ```
//!
//! `breakpoints` is either a list of interior points or `{"quantiles": K}`;
//! `basis` is `"saturated"`, `"linear"` or `{"poly": d}`. `scale` divides the
//! data and explicit breakpoints before fitting, so the fitted model lives on
//! the scaled time axis.

use serde::{Deserialize, Serialize};

use crate::em::{Breakpoints, EmConfig, WeightedSample};
use crate::error::{Error, Result};
use crate::glm::{Basis, RegressionSpec};
use crate::io::DensityTarget;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BreakpointsField {
    Explicit(Vec<f64>),
    Quantiles { quantiles: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisField {
    Named(String),
    Poly { poly: usize },
}

impl BasisField {
    pub fn to_basis(&self) -> Result<Basis> {
        match self {
            BasisField::Named(s) if s == "saturated" => Ok(Basis::Saturated),
            BasisField::Named(s) if s == "linear" => Ok(Basis::Linear),
            BasisField::Named(s) => Err(Error::Input(format!(
                "unknown basis {s:?}; expected \"saturated\", \"linear\" or {{\"poly\": d}}"
            ))),
            BasisField::Poly { poly } => Ok(Basis::Polynomial(*poly)),
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub p: usize,
    pub breakpoints: BreakpointsField,
    pub basis: BasisField,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl FitConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Field checks that do not need the data.
    pub fn check(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Input(format!("config: scale must be positive, got {}", self.scale)));
        }
        self.em_config()?.check()?;
        if let BreakpointsField::Explicit(b) = &self.breakpoints {
            crate::model::Grid::new(b).map_err(|e| Error::Input(format!("config: breakpoints: {e}")))?;
        }
        Ok(())
    }

    /// EM settings on the scaled axis; `seed_override` wins over the file.
    pub fn em_config_with_seed(&self, seed_override: Option<u64>) -> Result<EmConfig> {
        let breakpoints = match &self.breakpoints {
            BreakpointsField::Explicit(b) => Breakpoints::Explicit(b.iter().map(|s| s / self.scale).collect()),
            BreakpointsField::Quantiles { quantiles } => Breakpoints::Quantiles(*quantiles),
        };
        let spec = RegressionSpec {
            basis: self.basis.to_basis()?,
            covariate_rule: Default::default(),
        };
        let mut cfg = EmConfig::new(self.p, breakpoints, spec);
        if let Some(t) = self.tol {
            cfg.tol_rel_loglik = t;
        }
        if let Some(m) = self.max_iter {
            cfg.max_iter = m;
        }
        if let Some(s) = seed_override.or(self.seed) {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn em_config(&self) -> Result<EmConfig> {
        self.em_config_with_seed(None)
    }

    /// Divides the observations by `scale`.
    pub fn prepare_sample(&self, data: &WeightedSample) -> Result<WeightedSample> {
        data.scaled(self.scale)
    }

    /// Divides the abscissae by `scale`; heights are rescaled to keep a density.
    pub fn prepare_target(&self, target: &DensityTarget) -> Result<DensityTarget> {
        target.scaled(self.scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_field_shapes() {
        let c = FitConfig::from_json(r#"{"p":2,"breakpoints":[1,2],"basis":{"poly":1}}"#).unwrap();
        assert_eq!(c.scale, 1.0);
        let em = c.em_config().unwrap();
        assert_eq!(em.breakpoints, Breakpoints::Explicit(vec![1.0, 2.0]));
        assert_eq!(em.spec.basis, Basis::Polynomial(1));
        let c = FitConfig::from_json(
            r#"{"p":1,"breakpoints":{"quantiles":4},"basis":"saturated","tol":1e-9,"max_iter":7,"seed":3}"#,
        )
        .unwrap();
        let em = c.em_config_with_seed(Some(11)).unwrap();
        assert_eq!(em.breakpoints, Breakpoints::Quantiles(4));
        assert_eq!((em.tol_rel_loglik, em.max_iter, em.seed), (1e-9, 7, 11));
    }

    #[test]
    fn rejects_bad_fields() {
        for bad in [
            r#"{"p":1,"breakpoints":[2,1],"basis":"linear"}"#,
            r#"{"p":1,"breakpoints":[1],"basis":"cubic"}"#,
            r#"{"p":1,"breakpoints":[1],"basis":"linear","scale":0}"#,
            r#"{"p":0,"breakpoints":[1],"basis":"linear"}"#,
            r#"{"p":1,"breakpoints":[1],"basis":"linear","extra":1}"#,
        ] {
            assert!(FitConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn scale_divides_data_and_breakpoints() {
        let c = FitConfig::from_json(r#"{"p":1,"breakpoints":[30,60],"basis":"saturated","scale":100}"#).unwrap();
        assert_eq!(c.em_config().unwrap().breakpoints, Breakpoints::Explicit(vec![0.3, 0.6]));
        let d = WeightedSample::unweighted(vec![45.5, 0.5]).unwrap();
        assert_eq!(c.prepare_sample(&d).unwrap().values(), &[0.455, 0.005]);
    }
}
