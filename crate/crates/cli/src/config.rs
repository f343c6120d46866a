//! Run configuration, one TOML file per run. Relative paths resolve
//! against the configuration file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use condbeta::beta::BetaKind;
use condbeta::learners::{Family, HyperGrid};
use condbeta::panel::{DelimitedFormat, MarketSource, UniverseFilter};
use condbeta::pipeline::ExperimentConfig;
use condbeta::portfolio::PortfolioConfig;
use condbeta::synth::{self, DgpConfig};
use condbeta::valuation::ValuationConfig;
use condbeta::Month;
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub returns: PathBuf,
    /// `(date, ret)` market file; alternatively `market_asset`.
    pub market: Option<PathBuf>,
    /// Asset id of market rows inside the returns file.
    pub market_asset: Option<String>,
    pub riskfree: Option<PathBuf>,
    pub characteristics: PathBuf,
    pub groups: PathBuf,
    pub meta: Option<PathBuf>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub models: Vec<Family>,
    pub kinds: Vec<BetaKind>,
    pub horizons: Vec<u32>,
    pub lagged_beta_predictor: bool,
    pub importance: bool,
    pub first_target: Option<Month>,
    pub last_target: Option<Month>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        ExperimentSection {
            models: d.models,
            kinds: d.kinds,
            horizons: d.horizons,
            lagged_beta_predictor: d.lagged_beta_predictor,
            importance: d.importance,
            first_target: None,
            last_target: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub cw_lags: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            cw_lags: condbeta::evaluation::CW_LAGS,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub data: Option<DataPaths>,
    pub synth: Option<DgpConfig>,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub grid: HyperGrid,
    pub universe: Option<UniverseFilter>,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub valuation: ValuationConfig,
    #[serde(default)]
    pub portfolio: PortfolioConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(d) = &mut self.data {
            fix(&mut d.returns);
            fix(&mut d.characteristics);
            fix(&mut d.groups);
            for p in [&mut d.market, &mut d.riskfree, &mut d.meta]
                .into_iter()
                .flatten()
            {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.is_none() && self.synth.is_none() {
            bail!("config needs a [data] or a [synth] section");
        }
        if let Some(d) = &self.data {
            if d.market.is_none() == d.market_asset.is_none() {
                bail!("[data] needs exactly one of `market` and `market_asset`");
            }
            if !d.delimiter.is_ascii() {
                bail!("[data] delimiter must be a single ASCII character");
            }
        }
        self.experiment_config(false).validate()?;
        Ok(())
    }

    pub fn experiment_config(&self, fail_fast: bool) -> ExperimentConfig {
        let e = &self.experiment;
        ExperimentConfig {
            models: e.models.clone(),
            kinds: e.kinds.clone(),
            horizons: e.horizons.clone(),
            grid: self.grid.clone(),
            seed: self.seed,
            lagged_beta_predictor: e.lagged_beta_predictor,
            fail_fast,
            importance: e.importance,
            first_target: e.first_target,
            last_target: e.last_target,
        }
    }

    /// Input paths: explicit `[data]`, or the files written by `synth`.
    pub fn data_paths(&self) -> DataPaths {
        if let Some(d) = &self.data {
            return d.clone();
        }
        let dir = self.synth_dir();
        DataPaths {
            returns: dir.join(synth::RETURNS_FILE),
            market: Some(dir.join(synth::MARKET_FILE)),
            market_asset: None,
            riskfree: None,
            characteristics: dir.join(synth::CHARACTERISTICS_FILE),
            groups: dir.join(synth::GROUPS_FILE),
            meta: Some(dir.join(synth::META_FILE)),
            delimiter: ',',
        }
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }
}

impl DataPaths {
    pub fn format(&self) -> DelimitedFormat {
        DelimitedFormat {
            delimiter: self.delimiter as u8,
        }
    }

    pub fn market_source(&self) -> MarketSource {
        match (&self.market, &self.market_asset) {
            (Some(p), _) => MarketSource::File(p.clone()),
            (None, Some(a)) => MarketSource::ReservedAsset(a.clone()),
            (None, None) => unreachable!("validated"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn synth_config_defaults_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "output_dir = \"out\"\nseed = 3\n[synth]\nn_assets = 10\n",
        );
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert_eq!(cfg.synth.as_ref().unwrap().n_assets, 10);
        let d = cfg.data_paths();
        assert_eq!(
            d.returns,
            dir.path().join("out/data").join(synth::RETURNS_FILE)
        );
        assert!(matches!(d.market_source(), MarketSource::File(_)));
        let e = cfg.experiment_config(true);
        assert_eq!(e.seed, 3);
        assert!(e.fail_fast);
        assert_eq!(e.horizons, ExperimentConfig::default().horizons);
    }

    #[test]
    fn explicit_data_section() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "output_dir = \"/tmp/x\"\n[data]\nreturns = \"r.csv\"\nmarket_asset = \"MKT\"\n\
             characteristics = \"c.csv\"\ngroups = \"g.csv\"\ndelimiter = \";\"\n\
             [experiment]\nmodels = [\"enet\", \"rf\"]\nkinds = [\"semi_p\"]\nhorizons = [3]\n",
        );
        let cfg = RunConfig::load(&p).unwrap();
        let d = cfg.data_paths();
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(d.characteristics, dir.path().join("c.csv"));
        assert_eq!(d.format().delimiter, b';');
        assert!(matches!(d.market_source(), MarketSource::ReservedAsset(a) if a == "MKT"));
        assert_eq!(
            cfg.experiment.models,
            vec![Family::ElasticNet, Family::RForest]
        );
        assert_eq!(cfg.experiment.kinds, vec![BetaKind::SemiP]);
    }

    #[test]
    fn shipped_example_loads() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.experiment.kinds.len(), 7);
        assert!(cfg.universe.is_some());
    }

    #[test]
    fn invalid_configs() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            "output_dir = \"o\"\n",
            "output_dir = \"o\"\n[synth]\nunknown = 1\n",
            "output_dir = \"o\"\n[data]\nreturns = \"r\"\ncharacteristics = \"c\"\ngroups = \"g\"\n",
            "output_dir = \"o\"\n[synth]\n[experiment]\nhorizons = [5]\n",
        ] {
            assert!(RunConfig::load(&write(dir.path(), text)).is_err(), "{text}");
        }
    }
}
