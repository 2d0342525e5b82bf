//! Layered configuration. Precedence, lowest to highest: built-in
//! defaults, the `DEP_SEED` environment variable, the `--config` file,
//! then `--set` overrides. Decoder keys bind onto [`DepConfig`]; the
//! benchmark keys (suite size, split, seeds, bias) live here. Unknown keys
//! are errors so typos cannot silently fall back to defaults.

use std::fs;
use std::path::Path;

use dep::bench::Split;
use dep::config::{dep_config_to_map, update_dep_config, ConfigMap};
use dep::engine::DepConfig;

use crate::CliError;

/// Benchmark-level knobs, everything `DepConfig` does not own.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct BenchSettings {
    pub items: usize,
    pub split: Split,
    pub suite_seed: u64,
    pub eval_seed: u64,
    /// Prior strength of the mock model; the default is the committed
    /// calibration value.
    pub bias: f64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            items: 500,
            split: Split::Adversarial,
            suite_seed: 2026,
            eval_seed: 0,
            bias: 1.1,
        }
    }
}

/// The fully resolved configuration for one invocation, plus its canonical
/// echo. Writing [`Effective::to_text`] into the run directory and passing
/// it back through `--config` reproduces the run.
#[derive(Clone, Debug)]
pub struct Effective {
    pub decoder: DepConfig,
    pub bench: BenchSettings,
    echo: ConfigMap,
}

impl Effective {
    pub fn assemble(
        config: Option<&Path>,
        overrides: &[String],
        env_seed: Option<&str>,
    ) -> Result<Self, CliError> {
        let mut map = ConfigMap::new();
        if let Some(seed) = env_seed {
            let seed = seed.trim();
            seed.parse::<u64>().map_err(|_| {
                CliError::Config(format!("DEP_SEED {seed:?} is not an unsigned integer"))
            })?;
            map.set("seed", seed);
        }
        if let Some(path) = config {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("reading {}: {e}", path.display()))
            })?;
            let file_map = ConfigMap::parse(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            for (key, value) in file_map.iter() {
                map.set(key, value);
            }
        }
        for assignment in overrides {
            map.set_assignment(assignment)
                .map_err(|e| CliError::Config(e.to_string()))?;
        }

        let mut decoder = DepConfig::default();
        let foreign =
            update_dep_config(&mut decoder, &map).map_err(|e| CliError::Config(e.to_string()))?;

        let mut bench = BenchSettings::default();
        for key in foreign {
            let value = map.get(&key).expect("foreign keys come from the map");
            match key.as_str() {
                "items" => bench.items = parse(&key, value, "a positive integer")?,
                "split" => bench.split = parse_split(value)?,
                "suite_seed" => bench.suite_seed = parse(&key, value, "an unsigned integer")?,
                "eval_seed" => bench.eval_seed = parse(&key, value, "an unsigned integer")?,
                "bias" => bench.bias = parse(&key, value, "a real")?,
                _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
            }
        }
        if bench.items < 1 {
            return Err(CliError::Config("items must be at least 1".into()));
        }
        if !bench.bias.is_finite() || bench.bias < 0.0 {
            return Err(CliError::Config(format!(
                "bias {} is not a non-negative real",
                bench.bias
            )));
        }

        let mut echo = dep_config_to_map(&decoder);
        echo.set("items", &bench.items.to_string());
        echo.set("split", split_name(bench.split));
        echo.set("suite_seed", &bench.suite_seed.to_string());
        echo.set("eval_seed", &bench.eval_seed.to_string());
        echo.set("bias", &bench.bias.to_string());

        Ok(Effective {
            decoder,
            bench,
            echo,
        })
    }

    /// Canonical `key = value` lines covering every effective value.
    pub fn to_text(&self) -> String {
        self.echo.to_text()
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: {value:?} is not {kind}")))
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Random => "random",
        Split::Popular => "popular",
        Split::Adversarial => "adversarial",
    }
}

fn parse_split(value: &str) -> Result<Split, CliError> {
    match value {
        "random" => Ok(Split::Random),
        "popular" => Ok(Split::Popular),
        "adversarial" => Ok(Split::Adversarial),
        _ => Err(CliError::Config(format!(
            "split: {value:?} is not `random`, `popular`, or `adversarial`"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dep::engine::ScheduleMode;

    #[test]
    fn defaults_when_nothing_is_given() {
        let eff = Effective::assemble(None, &[], None).unwrap();
        assert_eq!(eff.decoder, DepConfig::default());
        assert_eq!(eff.bench, BenchSettings::default());
    }

    #[test]
    fn env_seed_sits_below_file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.cfg");
        fs::write(&path, "seed = 11\nbeta = 3\n").unwrap();

        let eff = Effective::assemble(None, &[], Some("7")).unwrap();
        assert_eq!(eff.decoder.seed, 7);

        let eff = Effective::assemble(Some(&path), &[], Some("7")).unwrap();
        assert_eq!(eff.decoder.seed, 11);
        assert_eq!(eff.decoder.beta, 3.0);

        let eff =
            Effective::assemble(Some(&path), &["seed=5".into()], Some("7")).unwrap();
        assert_eq!(eff.decoder.seed, 5);
    }

    #[test]
    fn bad_env_seed_is_a_config_error() {
        let err = Effective::assemble(None, &[], Some("many")).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn bench_keys_split_off_and_unknowns_fail() {
        let eff = Effective::assemble(
            None,
            &["items=24".into(), "split=popular".into(), "bias=0.5".into()],
            None,
        )
        .unwrap();
        assert_eq!(eff.bench.items, 24);
        assert_eq!(eff.bench.split, Split::Popular);
        assert_eq!(eff.bench.bias, 0.5);
        assert_eq!(eff.decoder, DepConfig::default());

        let err = Effective::assemble(None, &["bogus=1".into()], None).unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("bogus")));

        let err = Effective::assemble(None, &["items=0".into()], None).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn echo_reassembles_to_the_same_configuration() {
        let eff = Effective::assemble(
            None,
            &[
                "mode=fixed_p".into(),
                "fixed_p=0.25".into(),
                "m=5".into(),
                "items=12".into(),
                "split=random".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(eff.decoder.mode, ScheduleMode::FixedP);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("effective.cfg");
        fs::write(&path, eff.to_text()).unwrap();
        let again = Effective::assemble(Some(&path), &[], None).unwrap();
        assert_eq!(again.decoder, eff.decoder);
        assert_eq!(again.bench, eff.bench);
        assert_eq!(again.to_text(), eff.to_text());
    }
}
