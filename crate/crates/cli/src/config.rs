//! Run configuration: one TOML document per run.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use eigenpinn::oracle::DEFAULT_FD_GRID;
use eigenpinn::{Domain, LossConfig, OperatorSpec, ScanConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed for network initialisation and collocation batches.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Widths of the two hidden layers.
    #[serde(default = "default_hidden")]
    pub hidden_widths: [usize; 2],
    /// Lattice nodes per axis for eigenfunction export.
    #[serde(default = "default_export_resolution")]
    pub export_resolution: usize,
    #[serde(default = "Domain::unit_disk")]
    pub domain: Domain,
    #[serde(default = "OperatorSpec::laplacian")]
    pub operator: OperatorSpec,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Finite-difference intervals per axis for domains without a closed form.
    pub grid_n: usize,
    /// Number of distinct eigenvalues to compute.
    pub count: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            grid_n: DEFAULT_FD_GRID,
            count: 8,
        }
    }
}

fn default_seed() -> u64 {
    1
}

fn default_hidden() -> [usize; 2] {
    [32, 32]
}

fn default_export_resolution() -> usize {
    101
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is valid")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            bail!("seed: must be <= {}", i64::MAX);
        }
        if self.hidden_widths.contains(&0) {
            bail!("hidden_widths: entries must be >= 1");
        }
        if self.export_resolution < 2 {
            bail!("export_resolution: must be >= 2");
        }
        self.domain.validate().context("domain")?;
        self.operator.validate().context("operator")?;
        self.loss.validate().context("loss")?;
        self.train.validate().context("train")?;
        self.scan.validate().context("scan")?;
        if self.oracle.count == 0 {
            bail!("oracle.count: must be >= 1");
        }
        if self.oracle.grid_n < 32 {
            bail!("oracle.grid_n: must be >= 32");
        }
        Ok(())
    }

    /// Network widths `[d, h1, h2, 1]`.
    pub fn widths(&self) -> [usize; 4] {
        [
            self.domain.dim(),
            self.hidden_widths[0],
            self.hidden_widths[1],
            1,
        ]
    }

    /// TOML with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serialising configuration")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use eigenpinn::Potential;

    #[test]
    fn empty_file_gives_unit_disk_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.domain, Domain::unit_disk());
        assert_eq!(cfg.operator, OperatorSpec::laplacian());
        assert_eq!(cfg.scan, ScanConfig::default());
        assert_eq!(cfg.widths(), [2, 32, 32, 1]);
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = r#"
            seed = 7
            [domain]
            kind = "rectangle"
            bounds = [[0.0, 1.0], [0.0, 2.0]]
            [operator]
            kind = "linear"
            potential = { kind = "harmonic", omega = 1.5 }
            [scan]
            e_lo = 44.0
            e_hi = 55.0
            grid_count = 45
        "#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(
            cfg.operator,
            OperatorSpec::Linear {
                potential: Potential::Harmonic { omega: 1.5 }
            }
        );
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_values_naming_the_key() {
        let err = RunConfig::parse("[operator]\nkind = \"plaplace\"\np = 0.5\n").unwrap_err();
        assert!(format!("{err:#}").contains("p must exceed 1"), "{err:#}");
        let err = RunConfig::parse("[scan]\ne_lo = 35.0\ne_hi = 3.0\n").unwrap_err();
        assert!(format!("{err:#}").contains("e_lo"), "{err:#}");
        let err = RunConfig::parse("[scan]\nthreshhold = 1.0\n").unwrap_err();
        assert!(format!("{err:#}").contains("threshhold"), "{err:#}");
        let err = RunConfig::parse("seed = \"one\"\n").unwrap_err();
        assert!(format!("{err:#}").contains("seed"), "{err:#}");
        assert!(RunConfig::parse("[domain]\nkind = \"ball\"\ndim = 2\nradius = -1.0\n").is_err());
    }
}
