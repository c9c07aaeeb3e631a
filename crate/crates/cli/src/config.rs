use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use orthode::adversary::{AttackKind, AttackSpec, PGD_DEFAULT_STEPS};
use orthode::dataio::{downscale, load_mnist_split, synthetic_blobs_sized, Dataset, BLOB_SIDE};
use orthode::odeint::SolverConfig;
use orthode::trainer::{ArchKind, CertifyConfig, ModelSpec, TrainConfig};
use orthode::{Error, Result};

/// Everything one experiment needs. Read from TOML (or from the JSON echo
/// inside a previous `metrics.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One architecture name or a list of them.
    #[serde(deserialize_with = "one_or_many")]
    pub arch: Vec<ArchKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub attacks: Vec<AttackEntry>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<ArchKind>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Arch {
        One(ArchKind),
        Many(Vec<ArchKind>),
    }
    Ok(match Arch::deserialize(d)? {
        Arch::One(a) => vec![a],
        Arch::Many(v) => v,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Directory holding `train-*-ubyte` and `test-*-ubyte` IDX files.
    Mnist {
        path: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default = "one")]
        downscale: usize,
    },
    Synthetic {
        n_per_class: usize,
        #[serde(default = "test_per_class")]
        test_per_class: usize,
        classes: usize,
        spread: f64,
        #[serde(default = "blob_side")]
        side: usize,
    },
}

fn one() -> usize {
    1
}

fn test_per_class() -> usize {
    20
}

fn blob_side() -> usize {
    BLOB_SIDE
}

impl DatasetSpec {
    /// `(train, test)`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Mnist {
                path,
                train_limit,
                test_limit,
                downscale: factor,
            } => {
                if !path.is_dir() {
                    return Err(Error::InvalidConfig(format!("dataset directory {} does not exist", path.display())));
                }
                let mut train = load_mnist_split(path, "train")?;
                // The official distribution names the test split t10k.
                let test_prefix = if path.join("test-images-idx3-ubyte").is_file() { "test" } else { "t10k" };
                let mut test = load_mnist_split(path, test_prefix)?;
                if let Some(n) = train_limit {
                    train = train.take(*n);
                }
                if let Some(n) = test_limit {
                    test = test.take(*n);
                }
                if *factor > 1 {
                    train = downscale(&train, *factor)?;
                    test = downscale(&test, *factor)?;
                }
                Ok((train, test))
            }
            DatasetSpec::Synthetic {
                n_per_class,
                test_per_class,
                classes,
                spread,
                side,
            } => Ok((
                synthetic_blobs_sized(*n_per_class, *classes, *spread, seed, *side)?,
                synthetic_blobs_sized(*test_per_class, *classes, *spread, seed.wrapping_add(1), *side)?,
            )),
        }
    }
}

/// An attack as written in the config. ε (or σ) must be given explicitly;
/// PGD settings fall back to 20 steps of ε/4 with a random start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub kind: AttackKind,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Gaussian std on the [0, 1] scale.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Gaussian std on the 0-255 pixel scale.
    #[serde(default)]
    pub sigma_255: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: Option<bool>,
}

impl AttackEntry {
    pub fn to_spec(&self, index: usize) -> Result<AttackSpec> {
        let missing = |what: &str| Error::InvalidConfig(format!("attack {index} ({:?}) needs an explicit {what}", self.kind));
        let spec = match self.kind {
            AttackKind::None => AttackSpec::none(),
            AttackKind::Fgsm => AttackSpec::fgsm(self.epsilon.ok_or_else(|| missing("epsilon"))?),
            AttackKind::Pgd => AttackSpec {
                steps: self.steps.unwrap_or(PGD_DEFAULT_STEPS),
                step_size: self.step_size,
                random_start: self.random_start.unwrap_or(true),
                ..AttackSpec::pgd(self.epsilon.ok_or_else(|| missing("epsilon"))?)
            },
            AttackKind::Gaussian => match (self.sigma, self.sigma_255) {
                (Some(s), None) => AttackSpec::gaussian(s),
                (None, Some(s)) => AttackSpec::gaussian_255(s),
                (Some(_), Some(_)) => {
                    return Err(Error::InvalidConfig(format!("attack {index}: give sigma or sigma_255, not both")))
                }
                (None, None) => return Err(missing("sigma or sigma_255")),
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Fully explicit form of `spec`, used in the config echo.
    fn resolved(spec: &AttackSpec) -> Self {
        let explicit = |b: bool, v: f64| b.then_some(v);
        let eps = matches!(spec.kind, AttackKind::Fgsm | AttackKind::Pgd);
        let pgd = spec.kind == AttackKind::Pgd;
        Self {
            kind: spec.kind,
            epsilon: explicit(eps, spec.epsilon),
            sigma: explicit(spec.kind == AttackKind::Gaussian, spec.sigma),
            sigma_255: None,
            steps: pgd.then_some(spec.steps),
            step_size: explicit(pgd, spec.step_size()),
            random_start: pgd.then_some(spec.random_start),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Further solvers to evaluate NODE models under, next to the training solver.
    pub extra_solvers: Vec<SolverConfig>,
    /// Test samples whose feature trajectories are written as CSV.
    pub trajectory_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            extra_solvers: Vec::new(),
            trajectory_samples: 4,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value = serde_json::from_str(&text)?;
            // A metrics.json carries the config under "config".
            let inner = value.get("config").cloned().unwrap_or(value);
            serde_json::from_value(inner).map_err(Error::from)
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
        }?;
        Ok(parsed)
    }

    /// Applies command-line overrides, checks every section and makes all
    /// defaults explicit.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        if self.arch.is_empty() {
            return Err(Error::InvalidConfig("arch must name at least one architecture".into()));
        }
        self.train.seed = self.seed;
        self.train.validate()?;
        self.model.validate()?;
        self.solver.validate()?;
        for s in &self.eval.extra_solvers {
            s.validate()?;
        }
        if self.eval.batch_size == 0 {
            return Err(Error::InvalidConfig("eval.batch_size must be positive".into()));
        }
        let specs = self.attack_specs()?;
        self.attacks = specs.iter().map(AttackEntry::resolved).collect();
        Ok(self)
    }

    pub fn attack_specs(&self) -> Result<Vec<AttackSpec>> {
        self.attacks.iter().enumerate().map(|(i, a)| a.to_spec(i)).collect()
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
arch = "ortho_ode"
[dataset]
kind = "synthetic"
n_per_class = 4
classes = 2
spread = 0.1
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.arch, vec![ArchKind::OrthoOde]);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.solver, SolverConfig::default());
        let listed: ExperimentConfig = toml::from_str(&MINIMAL.replace(
            "arch = \"ortho_ode\"",
            "arch = [\"resnet_baseline\", \"ortho_ode\"]",
        ))
        .unwrap();
        assert_eq!(listed.arch.len(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for extra in ["colour = 1\n", "[train]\nlr = 0.1\n", "[solver]\nmethod = \"rk4\"\nsteps = 3\n"] {
            let text = format!("{extra}{MINIMAL}");
            assert!(toml::from_str::<ExperimentConfig>(&text).is_err(), "{extra}");
        }
        let text = MINIMAL.replace("spread = 0.1", "spread = 0.1\nnoise = 2");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn attack_budgets_must_be_explicit() {
        let with = |attack: &str| {
            let cfg: ExperimentConfig = toml::from_str(&format!("{MINIMAL}\n[[attacks]]\n{attack}")).unwrap();
            cfg.resolve(None, None)
        };
        assert!(with("kind = \"fgsm\"").is_err());
        assert!(with("kind = \"pgd\"\nsteps = 3").is_err());
        assert!(with("kind = \"gaussian\"").is_err());
        let cfg = with("kind = \"pgd\"\nepsilon = 0.2").unwrap();
        let spec = &cfg.attack_specs().unwrap()[0];
        assert_eq!((spec.steps, spec.step_size(), spec.random_start), (20, 0.05, true));
        let cfg = with("kind = \"gaussian\"\nsigma_255 = 100").unwrap();
        assert!((cfg.attack_specs().unwrap()[0].sigma - 100.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn resolved_config_round_trips_through_json() {
        let cfg: ExperimentConfig = toml::from_str(&format!("{MINIMAL}\n[[attacks]]\nkind = \"fgsm\"\nepsilon = 0.1")).unwrap();
        let resolved = cfg.resolve(Some(9), None).unwrap();
        assert_eq!(resolved.train.seed, 9);
        let back: ExperimentConfig = serde_json::from_value(resolved.to_json().unwrap()).unwrap();
        assert_eq!(back.clone().resolve(None, None).unwrap(), resolved);
    }
}
