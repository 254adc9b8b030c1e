use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DesignSpec, ResponseSpec};
use crate::error::{Error, Result};
use crate::regression::{ElasticNetConfig, MlpConfig};
use crate::selection::SelectionMethod;

/// Schema version written to and expected in config documents.
pub const SPEC_VERSION: &str = "1.0";

/// Fixed L2 weight for elastic-net methods that do not set `alpha2`.
pub const DEFAULT_ENET_ALPHA2: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lasso,
    ElasticNet,
    Mlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lasso => "lasso",
            ModelKind::ElasticNet => "elastic_net",
            ModelKind::Mlp => "mlp",
        }
    }
}

/// Optional overrides of the ADMM solver settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    pub admm_rho: Option<f64>,
    pub eps_rel: Option<f64>,
    pub eps_abs: Option<f64>,
    pub max_iter: Option<usize>,
    pub inner_gd_steps: Option<usize>,
    pub inner_lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub model: ModelKind,
    #[serde(default)]
    pub mrd: bool,
    /// Label in reports; defaults to the model name, prefixed `mrd_` when penalized.
    #[serde(default)]
    pub name: Option<String>,
    /// Fixed L1 weight; tuned by cross-validation when absent.
    #[serde(default)]
    pub alpha1: Option<f64>,
    #[serde(default)]
    pub alpha2: Option<f64>,
    /// Fixed discrepancy weight; `min(0.8, 0.8 * validation MSE)` when absent.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub subset_size: Option<usize>,
    #[serde(default)]
    pub solver: SolverOverrides,
    #[serde(default)]
    pub mlp: Option<MlpConfig>,
    /// Record discrepancy quantiles every this many ADMM iterations.
    #[serde(default)]
    pub trace_every: Option<usize>,
}

impl MethodSpec {
    pub fn new(model: ModelKind, mrd: bool) -> Self {
        Self {
            model,
            mrd,
            name: None,
            alpha1: None,
            alpha2: None,
            lambda: None,
            subset_size: None,
            solver: SolverOverrides::default(),
            mlp: None,
            trace_every: None,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!("{}{}", if self.mrd { "mrd_" } else { "" }, self.model.as_str())
        })
    }

    pub fn alpha2(&self) -> f64 {
        match self.model {
            ModelKind::Lasso => 0.0,
            _ => self.alpha2.unwrap_or(DEFAULT_ENET_ALPHA2),
        }
    }

    /// Solver settings with the overrides applied.
    pub fn solver_config(&self, alpha1: f64) -> ElasticNetConfig {
        let mut c = ElasticNetConfig::elastic_net(alpha1, self.alpha2());
        let o = &self.solver;
        c.admm_rho = o.admm_rho.unwrap_or(c.admm_rho);
        c.eps_rel = o.eps_rel.unwrap_or(c.eps_rel);
        c.eps_abs = o.eps_abs.unwrap_or(c.eps_abs);
        c.max_iter = o.max_iter.unwrap_or(c.max_iter);
        c.inner_gd_steps = o.inner_gd_steps.unwrap_or(c.inner_gd_steps);
        c.inner_lr = o.inner_lr.unwrap_or(c.inner_lr);
        c.trace_every = self.trace_every;
        c
    }

    pub fn mlp_config(&self) -> MlpConfig {
        self.mlp.clone().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestSpec {
    Hrt {
        #[serde(default = "default_dummies")]
        k: usize,
    },
    CvHrt {
        #[serde(default = "default_dummies")]
        k: usize,
        folds: usize,
    },
}

impl TestSpec {
    pub fn dummies(&self) -> usize {
        match self {
            TestSpec::Hrt { k } | TestSpec::CvHrt { k, .. } => *k,
        }
    }
}

fn default_dummies() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LawSpec {
    /// The generating distribution of the synthetic design.
    True,
    GaussianFit,
    GmmFit { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub method: SelectionMethod,
    pub q: f64,
}

fn default_trials() -> usize {
    20
}
fn default_train_fraction() -> f64 {
    0.5
}
fn default_cv_folds() -> usize {
    5
}
fn default_grid() -> usize {
    30
}
fn default_trace_dummies() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec_version: String,
    /// Synthetic design. Ignored for the features when `features_csv` is set.
    #[serde(default)]
    pub design: Option<DesignSpec>,
    /// Fixed real features; the response is simulated on top of them.
    #[serde(default)]
    pub features_csv: Option<PathBuf>,
    pub response: ResponseSpec,
    pub methods: Vec<MethodSpec>,
    pub test: TestSpec,
    pub law: LawSpec,
    pub selection: SelectionSpec,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_grid")]
    pub alpha_grid_size: usize,
    /// Dummies per feature when tracing discrepancies along training.
    #[serde(default = "default_trace_dummies")]
    pub trace_dummies: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.spec_version != SPEC_VERSION {
            return bad(format!(
                "spec_version {:?} is not supported (expected {SPEC_VERSION:?})",
                self.spec_version
            ));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("no methods configured".into());
        }
        let labels: BTreeSet<String> = self.methods.iter().map(MethodSpec::label).collect();
        if labels.len() != self.methods.len() {
            return bad("method labels must be unique".into());
        }
        if !(self.selection.q > 0.0 && self.selection.q < 1.0) {
            return bad(format!("q must lie in (0, 1), got {}", self.selection.q));
        }
        if self.test.dummies() == 0 {
            return bad("test needs at least one dummy".into());
        }
        if let TestSpec::CvHrt { folds, .. } = self.test {
            if folds < 2 {
                return bad("cv_hrt needs at least 2 folds".into());
            }
        }
        if self.cv_folds < 2 || self.alpha_grid_size == 0 {
            return bad("cv_folds >= 2 and alpha_grid_size >= 1 required".into());
        }
        match (&self.design, &self.features_csv) {
            (Some(design), None) => {
                design.validate()?;
                self.response.validate(design.d)?;
            }
            (_, Some(_)) => {
                if self.law == LawSpec::True {
                    return bad("the true law is unknown for loaded features; use a fitted law".into());
                }
            }
            (None, None) => return bad("either design or features_csv is required".into()),
        }
        if matches!(self.test, TestSpec::Hrt { .. })
            && !(self.train_fraction > 0.0 && self.train_fraction < 1.0)
        {
            return bad(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        for m in &self.methods {
            if let Some(l) = m.lambda {
                if !(0.0..1.0).contains(&l) {
                    return bad(format!("{}: lambda must lie in [0, 1)", m.label()));
                }
            }
            if m.model == ModelKind::Mlp && m.trace_every.is_some() {
                return bad(format!("{}: trace_every applies to linear models only", m.label()));
            }
        }
        Ok(())
    }
}
