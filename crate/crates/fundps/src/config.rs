//! Plain-text `key = value` run configuration: file parsing, command-line
//! overrides, schema validation against a fixed key set, and persistence of
//! the resolved configuration into run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grf::CovarianceSpec;
use crate::pde::PdeKind;

/// One configuration entry with its provenance for error messages.
#[derive(Debug, Clone)]
struct Entry {
    value: String,
    /// 1-based line in the config file, or 0 for a command-line override.
    line: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, Entry>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines; '#' starts a comment, blank lines are
    /// ignored.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut map = ConfigMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let (k, v) = stripped
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value, got {raw:?}")))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line}: empty key")));
            }
            if map.entries.contains_key(&key) {
                return Err(Error::Config(format!("line {line}: duplicate key {key}")));
            }
            map.entries.insert(key, Entry { value: v.trim().to_string(), line });
        }
        Ok(map)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    /// Applies `--key value` / `--key=value` overrides; a flag with the
    /// same name as a config key replaces the file's value.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let body = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key or --key=value, got {arg:?}")))?;
            let (key, value) = if let Some((k, v)) = body.split_once('=') {
                (k.to_string(), v.to_string())
            } else {
                i += 1;
                let v = args
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("flag --{body} is missing a value")))?;
                (body.to_string(), v.clone())
            };
            if key.is_empty() {
                return Err(Error::Config("empty flag name".into()));
            }
            self.entries.insert(key, Entry { value, line: 0 });
            i += 1;
        }
        Ok(())
    }

    /// Rejects any key outside `allowed`, naming the offending line.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (k, e) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                let loc = if e.line == 0 {
                    "command line".to_string()
                } else {
                    format!("line {}", e.line)
                };
                return Err(Error::Config(format!("{loc}: unknown key {k}")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    /// Required typed lookup.
    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let e = self
            .entries
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))?;
        e.value
            .parse()
            .map_err(|_| Error::Config(format!("key {key}: cannot parse {:?}", e.value)))
    }

    /// Typed lookup with a default.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(e) => e
                .value
                .parse()
                .map_err(|_| Error::Config(format!("key {key}: cannot parse {:?}", e.value))),
        }
    }

    /// Serializes the resolved configuration, sorted by key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, e) in &self.entries {
            let _ = writeln!(s, "{} = {}", k, e.value);
        }
        s
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), Entry { value: value.to_string(), line: 0 });
    }
}

/// Parses a covariance spec string: `rbf:<length_scale>` or
/// `matern_op:<tau>,<alpha>,<scale>`.
pub fn parse_covariance(s: &str) -> Result<CovarianceSpec> {
    let (kind, rest) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("covariance spec {s:?} needs kind:params")))?;
    let nums: Vec<f64> = rest
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("covariance spec {s:?}: bad number {p:?}")))
        })
        .collect::<Result<_>>()?;
    let spec = match (kind.trim(), nums.as_slice()) {
        ("rbf", [l]) => CovarianceSpec::rbf(*l),
        ("matern_op", [tau, alpha, scale]) => CovarianceSpec::matern_op(*tau, *alpha, *scale),
        _ => return Err(Error::Config(format!("unknown covariance spec {s:?}"))),
    };
    spec.validate()?;
    Ok(spec)
}

/// Parses a PDE kind string: `poisson`, `darcy`, or `helmholtz:<k>`.
pub fn parse_pde(s: &str) -> Result<PdeKind> {
    match s {
        "poisson" => Ok(PdeKind::Poisson),
        "darcy" => Ok(PdeKind::Darcy),
        _ => {
            if let Some(k) = s.strip_prefix("helmholtz:") {
                let k: f64 = k
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad helmholtz wavenumber in {s:?}")))?;
                Ok(PdeKind::Helmholtz { k })
            } else {
                Err(Error::Config(format!("unknown pde {s:?}")))
            }
        }
    }
}

/// Creates `<base>/<UTC timestamp>_seed<seed>/`, failing rather than
/// reusing an existing directory, and persists the resolved configuration
/// inside it.
pub fn create_run_dir(base: &Path, seed: u64, resolved: &ConfigMap) -> Result<PathBuf> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_err(|_| Error::Config("system clock before the epoch".into()))?
        .as_secs();
    let mut dir = base.join(format!("{secs}_seed{seed}"));
    let mut suffix = 0;
    while dir.exists() {
        suffix += 1;
        dir = base.join(format!("{secs}_seed{seed}_{suffix}"));
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.txt"), resolved.to_text())?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grf::CovarianceKind;

    #[test]
    fn parses_comments_and_whitespace() {
        let text = "# run settings\nseed = 42   # master seed\n\nresolution=32\n";
        let m = ConfigMap::parse_str(text).unwrap();
        assert_eq!(m.require::<u64>("seed").unwrap(), 42);
        assert_eq!(m.require::<usize>("resolution").unwrap(), 32);
        assert_eq!(m.get_or::<f64>("lr", 1e-4).unwrap(), 1e-4);
    }

    #[test]
    fn rejects_malformed_and_duplicate_lines() {
        assert!(ConfigMap::parse_str("justakey\n").is_err());
        let err = ConfigMap::parse_str("a=1\na=2\n").unwrap_err();
        assert!(format!("{err}").contains("line 2"));
    }

    #[test]
    fn unknown_key_names_offending_line() {
        let m = ConfigMap::parse_str("seed=1\nbogus=2\n").unwrap();
        let err = m.check_keys(&["seed"]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 2") && msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn flag_overrides_file_value() {
        let mut m = ConfigMap::parse_str("seed=1\nlr=1e-4\n").unwrap();
        m.apply_overrides(&["--seed".into(), "7".into(), "--lr=2e-4".into()])
            .unwrap();
        assert_eq!(m.require::<u64>("seed").unwrap(), 7);
        assert_eq!(m.require::<f64>("lr").unwrap(), 2e-4);
        assert!(m.apply_overrides(&["oops".into()]).is_err());
        assert!(m.apply_overrides(&["--dangling".into()]).is_err());
    }

    #[test]
    fn covariance_and_pde_parsing() {
        let c = parse_covariance("rbf:0.05").unwrap();
        assert_eq!(c.kind, CovarianceKind::Rbf { length_scale: 0.05 });
        let c = parse_covariance("matern_op:3,2,9").unwrap();
        assert!(matches!(c.kind, CovarianceKind::MaternOp { .. }));
        assert!(parse_covariance("rbf:2.0").is_err()); // out of range
        assert!(parse_covariance("spline:1").is_err());
        assert!(matches!(parse_pde("poisson").unwrap(), PdeKind::Poisson));
        assert!(matches!(parse_pde("helmholtz:2.5").unwrap(), PdeKind::Helmholtz { .. }));
        assert!(parse_pde("wave").is_err());
    }

    #[test]
    fn run_dir_contains_resolved_config() {
        let tmp = tempfile::tempdir().unwrap();
        let mut m = ConfigMap::parse_str("seed=3\n").unwrap();
        m.set("resolution", 16);
        let dir = create_run_dir(tmp.path(), 3, &m).unwrap();
        assert!(dir.file_name().unwrap().to_str().unwrap().contains("seed3"));
        let text = std::fs::read_to_string(dir.join("config.txt")).unwrap();
        assert!(text.contains("seed = 3") && text.contains("resolution = 16"));
        // a second run dir in the same second is still created
        let dir2 = create_run_dir(tmp.path(), 3, &m).unwrap();
        assert_ne!(dir, dir2);
    }
}
