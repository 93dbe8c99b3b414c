use std::path::Path;

use epifnp::trainer::Hyperparams;

use crate::CliError;

/// Training run description. Every key other than `region` and
/// `train_seasons` is a hyperparameter; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub region: String,
    /// Season labels like `2003/04`; all complete seasons when absent.
    pub train_seasons: Option<Vec<String>>,
    pub hyperparams: Hyperparams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        let region = match table.remove("region") {
            None => "nat".to_string(),
            Some(toml::Value::String(s)) => s,
            Some(v) => return Err(format!("region must be a string, got {v}")),
        };
        let train_seasons = match table.remove("train_seasons") {
            None => None,
            Some(v) => Some(
                v.try_into::<Vec<String>>()
                    .map_err(|e| format!("train_seasons: {e}"))?,
            ),
        };
        let hyperparams: Hyperparams = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| e.to_string())?;
        hyperparams.validate().map_err(|e| e.to_string())?;
        Ok(RunConfig {
            region,
            train_seasons,
            hyperparams,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.region, "nat");
        assert_eq!(c.hyperparams, Hyperparams::default());
        let c = RunConfig::parse(
            "region = \"hhs1\"\ntrain_seasons = [\"2003/04\"]\nmax_epochs = 5\nseed = 3\n[dims]\nhidden = 8\nhead_hidden = 4\n[ablation]\nno_local = true\n",
        )
        .unwrap();
        assert_eq!(c.region, "hhs1");
        assert_eq!(c.train_seasons.as_deref(), Some(&["2003/04".to_string()][..]));
        assert_eq!(c.hyperparams.max_epochs, 5);
        assert_eq!(c.hyperparams.dims.hidden, 8);
        assert!(c.hyperparams.ablation.no_local);
    }

    #[test]
    fn strict_schema() {
        assert!(RunConfig::parse("learning_rat = 0.1").is_err());
        assert!(RunConfig::parse("[dims]\nwidth = 3").is_err());
        assert!(RunConfig::parse("validation_fraction = 0.7").is_err());
        assert!(RunConfig::parse("region = 4").is_err());
    }
}
