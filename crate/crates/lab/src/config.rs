//! Experiment configuration: a JSON file, flag overrides on top, and the
//! per-regime presets that fill in whatever is left unspecified.

use std::fmt;
use std::path::{Path, PathBuf};

use eos_core::manifold::geometry_constants;
use eos_core::FactorisationProblem;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RegimeRequest {
    Stable,
    Subcritical,
    Critical,
    Supercritical,
}

impl RegimeRequest {
    pub fn label(self) -> &'static str {
        match self {
            RegimeRequest::Stable => "stable",
            RegimeRequest::Subcritical => "subcritical",
            RegimeRequest::Critical => "critical",
            RegimeRequest::Supercritical => "supercritical",
        }
    }
}

impl fmt::Display for RegimeRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Everything needed to reproduce one experiment. Optional fields are
/// filled from the regime presets by [`ExperimentConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub depth: usize,
    pub target: f64,
    pub regime: Option<RegimeRequest>,
    /// Explicit step size; overrides the regime preset.
    pub eta: Option<f64>,
    /// Supercritical excess `ηλ* − 2`.
    pub alpha: f64,
    pub perp0: Option<f64>,
    /// Distance of `θ∥₀` from the balanced point, in units of `y^{1/p}`.
    pub par_offset: Option<f64>,
    /// Explicit starting point; runs a single trajectory.
    pub theta0: Option<Vec<f64>>,
    pub inits: usize,
    pub seed: u64,
    pub steps: Option<usize>,
    pub record_every: usize,
    pub out: PathBuf,
    pub plots: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            target: 1.0,
            regime: None,
            eta: None,
            alpha: 1e-3,
            perp0: None,
            par_offset: None,
            theta0: None,
            inits: 5,
            seed: 0,
            steps: None,
            record_every: 1,
            out: PathBuf::from("eos-out"),
            plots: false,
        }
    }
}

/// How the step size of an experiment is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaRule {
    /// `0.9 · 2/max_i λ(θ∥₀ⁱ)`.
    StableFraction,
    /// Midpoint of `(2/min_i λ(θ∥₀ⁱ), 2/λ*)`.
    BandMidpoint,
    /// Exactly `2/λ*`.
    Edge,
    /// `(2 + α)/λ*`.
    EdgePlusAlpha,
    Explicit(f64),
}

/// A configuration with every preset made explicit. This is what the summary
/// records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub depth: usize,
    pub target: f64,
    pub regime: RegimeRequest,
    pub eta_rule: EtaRule,
    pub alpha: Option<f64>,
    pub perp0: f64,
    pub par_offset: f64,
    pub theta0: Option<Vec<f64>>,
    pub inits: usize,
    pub seed: u64,
    pub steps: usize,
    pub record_every: usize,
    /// Not part of the recorded configuration: the same experiment written to
    /// two directories yields identical summaries.
    #[serde(skip)]
    pub out: PathBuf,
    pub plots: bool,
}

impl ResolvedConfig {
    pub fn problem(&self) -> LabResult<FactorisationProblem> {
        Ok(FactorisationProblem::new(self.depth, self.target)?)
    }
}

fn finite_positive(name: &str, v: f64) -> LabResult<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(LabError::Config(format!(
            "{name} must be finite and positive, got {v}"
        )))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|source| LabError::ConfigFile {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Regime whose presets apply: the requested one, or the one implied by
    /// an explicit `η` relative to `2/λ*`.
    fn preset_regime(&self, lambda_star: f64) -> LabResult<RegimeRequest> {
        match (self.regime, self.eta) {
            (Some(r), _) => Ok(r),
            (None, Some(eta)) => {
                let edge = 2.0 / lambda_star;
                Ok(if (eta - edge).abs() <= 1e-12 * edge {
                    RegimeRequest::Critical
                } else if eta > edge {
                    RegimeRequest::Supercritical
                } else {
                    RegimeRequest::Subcritical
                })
            }
            (None, None) => Err(LabError::Config(
                "either a regime or an explicit eta is required".into(),
            )),
        }
    }

    /// Validates the configuration and fills every preset.
    pub fn resolve(&self) -> LabResult<ResolvedConfig> {
        let prob = FactorisationProblem::new(self.depth, self.target)
            .map_err(|e| LabError::Config(e.to_string()))?;
        let constants = geometry_constants(&prob);
        let regime = self.preset_regime(constants.lambda_star)?;
        if self.inits == 0 {
            return Err(LabError::Config("inits must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(LabError::Config("record_every must be at least 1".into()));
        }
        if let Some(eta) = self.eta {
            finite_positive("eta", eta)?;
        }
        if let Some(theta0) = &self.theta0 {
            if theta0.len() != self.depth {
                return Err(LabError::Config(format!(
                    "theta0 has {} entries, depth is {}",
                    theta0.len(),
                    self.depth
                )));
            }
            if let Some(v) = theta0.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(LabError::Config(format!(
                    "theta0 entries must be positive, got {v}"
                )));
            }
        }

        let (eta_rule, alpha) = match (self.eta, regime) {
            (Some(eta), _) => {
                let excess = eta * constants.lambda_star - 2.0;
                (EtaRule::Explicit(eta), (excess > 0.0).then_some(excess))
            }
            (None, RegimeRequest::Stable) => (EtaRule::StableFraction, None),
            (None, RegimeRequest::Subcritical) => (EtaRule::BandMidpoint, None),
            (None, RegimeRequest::Critical) => (EtaRule::Edge, None),
            (None, RegimeRequest::Supercritical) => {
                finite_positive("alpha", self.alpha)?;
                (EtaRule::EdgePlusAlpha, Some(self.alpha))
            }
        };

        let par_offset = self.par_offset.unwrap_or(match regime {
            RegimeRequest::Subcritical => 0.12,
            RegimeRequest::Critical => 0.15,
            RegimeRequest::Stable | RegimeRequest::Supercritical => 0.05,
        });
        if !(par_offset.is_finite() && par_offset >= 0.0) {
            return Err(LabError::Config(format!(
                "par_offset must be non-negative, got {par_offset}"
            )));
        }
        if regime == RegimeRequest::Subcritical
            && self.eta.is_none()
            && self.theta0.is_none()
            && par_offset == 0.0
        {
            return Err(LabError::Config(
                "the subcritical preset needs a positive par_offset (the band is empty at the balanced point)".into(),
            ));
        }

        let perp0 = match (self.perp0, alpha) {
            (Some(v), _) => v,
            (None, Some(a)) if regime == RegimeRequest::Supercritical => {
                0.5 * (a / constants.c_star).sqrt()
            }
            (None, _) => 1e-2,
        };
        if !perp0.is_finite() {
            return Err(LabError::Config(format!(
                "perp0 must be finite, got {perp0}"
            )));
        }

        let steps = match self.steps {
            Some(0) => return Err(LabError::Config("steps must be at least 1".into())),
            Some(s) => s,
            None => match (regime, alpha) {
                (RegimeRequest::Stable, _) => 10_000,
                (RegimeRequest::Subcritical, _) => 120_000,
                (RegimeRequest::Critical, _) => 100_000,
                (RegimeRequest::Supercritical, Some(a)) => {
                    ((100.0 / a).ceil() as usize).clamp(10_000, 1_000_000)
                }
                (RegimeRequest::Supercritical, None) => 100_000,
            },
        };

        Ok(ResolvedConfig {
            depth: self.depth,
            target: self.target,
            regime,
            eta_rule,
            alpha,
            perp0,
            par_offset,
            theta0: self.theta0.clone(),
            inits: if self.theta0.is_some() { 1 } else { self.inits },
            seed: self.seed,
            steps,
            record_every: self.record_every,
            out: self.out.clone(),
            plots: self.plots,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_regime(r: RegimeRequest) -> ExperimentConfig {
        ExperimentConfig {
            regime: Some(r),
            ..Default::default()
        }
    }

    #[test]
    fn presets_fill_missing_fields() {
        let sub = with_regime(RegimeRequest::Subcritical).resolve().unwrap();
        assert_eq!(sub.eta_rule, EtaRule::BandMidpoint);
        assert_eq!(
            (sub.perp0, sub.par_offset, sub.steps),
            (1e-2, 0.12, 120_000)
        );

        let sup = with_regime(RegimeRequest::Supercritical).resolve().unwrap();
        assert_eq!(sup.alpha, Some(1e-3));
        assert_eq!(sup.steps, 100_000);
        // c* = 22.4 at p = 5, y = 1.
        assert!((sup.perp0 - 0.5 * (1e-3f64 / 22.4).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn explicit_eta_picks_presets_by_band() {
        let cfg = ExperimentConfig {
            eta: Some(0.4),
            ..Default::default()
        };
        let r = cfg.resolve().unwrap();
        assert_eq!(r.regime, RegimeRequest::Critical);
        assert_eq!(r.eta_rule, EtaRule::Explicit(0.4));

        let cfg = ExperimentConfig {
            eta: Some(0.402),
            ..Default::default()
        };
        let r = cfg.resolve().unwrap();
        assert_eq!(r.regime, RegimeRequest::Supercritical);
        assert!((r.alpha.unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let bad = [
            ExperimentConfig::default(),
            ExperimentConfig {
                depth: 1,
                ..with_regime(RegimeRequest::Critical)
            },
            ExperimentConfig {
                target: -1.0,
                ..with_regime(RegimeRequest::Critical)
            },
            ExperimentConfig {
                inits: 0,
                ..with_regime(RegimeRequest::Critical)
            },
            ExperimentConfig {
                steps: Some(0),
                ..with_regime(RegimeRequest::Critical)
            },
            ExperimentConfig {
                theta0: Some(vec![1.0; 3]),
                ..with_regime(RegimeRequest::Critical)
            },
            ExperimentConfig {
                alpha: 0.0,
                ..with_regime(RegimeRequest::Supercritical)
            },
        ];
        for cfg in bad {
            let err = cfg.resolve().unwrap_err();
            assert_eq!(err.exit_code(), 2, "{cfg:?}: {err}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"depth": 3, "colour": 1}"#).is_err());
        let partial = ExperimentConfig::from_json(r#"{"depth": 3, "regime": "critical"}"#).unwrap();
        assert_eq!(partial.depth, 3);
        assert_eq!(partial.inits, 5);
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![
            any::<f64>().prop_filter("finite", |v| v.is_finite()),
            (1e-300f64..1e300),
            (-1.0f64..1.0),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn json_round_trip_is_bit_exact(
            depth in 2usize..10,
            target in finite(),
            eta in proptest::option::of(finite()),
            alpha in finite(),
            perp0 in proptest::option::of(finite()),
            par_offset in proptest::option::of(finite()),
            theta0 in proptest::option::of(proptest::collection::vec(finite(), 0..6)),
            inits in 0usize..100,
            seed in any::<u64>(),
            steps in proptest::option::of(any::<usize>()),
            record_every in 1usize..10,
            regime in proptest::option::of(prop_oneof![
                Just(RegimeRequest::Stable),
                Just(RegimeRequest::Subcritical),
                Just(RegimeRequest::Critical),
                Just(RegimeRequest::Supercritical),
            ]),
            plots in any::<bool>(),
        ) {
            let cfg = ExperimentConfig {
                depth, target, regime, eta, alpha, perp0, par_offset, theta0, inits, seed, steps,
                record_every, out: PathBuf::from("some/dir"), plots,
            };
            let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
            prop_assert_eq!(back.target.to_bits(), cfg.target.to_bits());
            prop_assert_eq!(back.alpha.to_bits(), cfg.alpha.to_bits());
            prop_assert_eq!(back.eta.map(f64::to_bits), cfg.eta.map(f64::to_bits));
            prop_assert_eq!(
                back.theta0.as_ref().map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()),
                cfg.theta0.as_ref().map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            );
            prop_assert_eq!(back, cfg);
        }
    }
}
