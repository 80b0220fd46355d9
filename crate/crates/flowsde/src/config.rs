//! Plain-text `key = value` run configuration.
//!
//! A settings file is UTF-8 text; `#` starts a comment, blank lines are
//! skipped, and each remaining line must be `key = value`. Command-line
//! flags overwrite file values. Experiments read settings through typed,
//! consuming getters that fall back to declared defaults; after reading,
//! [`Settings::finish`] rejects any key nobody consumed, so misspelled
//! settings fail loudly instead of silently running defaults.
//!
//! Every consulted setting is echoed with its effective value (default or
//! not), giving each run a complete, re-runnable record of its inputs.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;

/// Key-value settings with consumption tracking and an effective-value echo.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    echo: BTreeMap<String, String>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl Settings {
    pub fn empty() -> Self {
        Settings::default()
    }

    /// Parse a settings file. `#` comments may trail a value.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut settings = Settings::empty();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    idx + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !valid_key(key) {
                return Err(Error::Config(format!(
                    "{}:{}: invalid key {key:?} (lowercase snake_case only)",
                    path.display(),
                    idx + 1
                )));
            }
            if settings
                .values
                .insert(key.to_string(), value.to_string())
                .is_some()
            {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate key {key:?}",
                    path.display(),
                    idx + 1
                )));
            }
        }
        Ok(settings)
    }

    /// Overwrite a value (command-line flags take precedence over the file).
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn record(&mut self, key: &str, effective: impl Display) {
        self.echo.insert(key.to_string(), effective.to_string());
    }

    fn parse<T: std::str::FromStr>(key: &str, raw: &str, what: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}: expected {what}, got {raw:?}")))
    }

    pub fn take_string(&mut self, key: &str, default: &str) -> String {
        let v = self.take_raw(key).unwrap_or_else(|| default.to_string());
        self.record(key, &v);
        v
    }

    /// A string setting with no default; omitted keys stay out of the echo.
    pub fn take_optional_string(&mut self, key: &str) -> Option<String> {
        let v = self.take_raw(key);
        if let Some(ref v) = v {
            self.record(key, v);
        }
        v
    }

    pub fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        let v = match self.take_raw(key) {
            Some(raw) => Self::parse(key, &raw, "a number")?,
            None => default,
        };
        self.record(key, v);
        Ok(v)
    }

    pub fn take_optional_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take_raw(key) {
            Some(raw) => {
                let v: f64 = Self::parse(key, &raw, "a number")?;
                self.record(key, v);
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn take_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        let v = match self.take_raw(key) {
            Some(raw) => Self::parse(key, &raw, "an unsigned integer")?,
            None => default,
        };
        self.record(key, v);
        Ok(v)
    }

    pub fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        let v = match self.take_raw(key) {
            Some(raw) => Self::parse(key, &raw, "an unsigned integer")?,
            None => default,
        };
        self.record(key, v);
        Ok(v)
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        let v = match self.take_raw(key) {
            Some(raw) => match raw.as_str() {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                _ => {
                    return Err(Error::Config(format!(
                        "{key}: expected true/false, got {raw:?}"
                    )))
                }
            },
            None => default,
        };
        self.record(key, v);
        Ok(v)
    }

    pub fn take_usize_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        let v = match self.take_raw(key) {
            Some(raw) => raw
                .split(',')
                .map(|item| Self::parse(key, item.trim(), "a comma list of unsigned integers"))
                .collect::<Result<Vec<usize>>>()?,
            None => default.to_vec(),
        };
        if v.is_empty() {
            return Err(Error::Config(format!("{key}: list must be nonempty")));
        }
        self.record(key, join(&v));
        Ok(v)
    }

    pub fn take_f64_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        let v = match self.take_raw(key) {
            Some(raw) => raw
                .split(',')
                .map(|item| Self::parse(key, item.trim(), "a comma list of numbers"))
                .collect::<Result<Vec<f64>>>()?,
            None => default.to_vec(),
        };
        if v.is_empty() {
            return Err(Error::Config(format!("{key}: list must be nonempty")));
        }
        self.record(key, join(&v));
        Ok(v)
    }

    /// Comma list of `lo:hi` pairs, e.g. `0.2:0.4,0.4:0.6`.
    pub fn take_pair_list(&mut self, key: &str, default: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
        let v = match self.take_raw(key) {
            Some(raw) => raw
                .split(',')
                .map(|item| {
                    let (a, b) = item.trim().split_once(':').ok_or_else(|| {
                        Error::Config(format!("{key}: expected `a:b` pairs, got {item:?}"))
                    })?;
                    Ok((
                        Self::parse(key, a.trim(), "a number")?,
                        Self::parse(key, b.trim(), "a number")?,
                    ))
                })
                .collect::<Result<Vec<(f64, f64)>>>()?,
            None => default.to_vec(),
        };
        if v.is_empty() {
            return Err(Error::Config(format!("{key}: list must be nonempty")));
        }
        let shown: Vec<String> = v.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        self.record(key, shown.join(","));
        Ok(v)
    }

    /// Fail on unconsumed keys; on success return the effective-value echo.
    pub fn finish(self) -> Result<BTreeMap<String, String>> {
        if !self.values.is_empty() {
            let keys: Vec<&str> = self.values.keys().map(String::as_str).collect();
            return Err(Error::Config(format!(
                "unknown settings: {}",
                keys.join(", ")
            )));
        }
        Ok(self.echo)
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn settings_from(text: &str) -> Result<Settings> {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(text.as_bytes()).unwrap();
        Settings::from_file(file.path())
    }

    #[test]
    fn parses_comments_blanks_and_values() {
        let mut s = settings_from(
            "# full-line comment\n\
             samples = 500\n\
             \n\
             eta = 0.7 # trailing comment\n\
             rules = euler-logsnr, cps\n",
        )
        .unwrap();
        assert_eq!(s.take_usize("samples", 1).unwrap(), 500);
        assert_eq!(s.take_f64("eta", 1.5).unwrap(), 0.7);
        assert_eq!(s.take_string("rules", ""), "euler-logsnr, cps");
        s.finish().unwrap();
    }

    #[test]
    fn defaults_apply_and_are_echoed() {
        let mut s = Settings::empty();
        assert_eq!(s.take_u64("seed", 17).unwrap(), 17);
        assert_eq!(s.take_usize_list("steps", &[10, 20]).unwrap(), vec![10, 20]);
        assert!(s.take_optional_f64("eta").unwrap().is_none());
        let echo = s.finish().unwrap();
        assert_eq!(echo.get("seed").unwrap(), "17");
        assert_eq!(echo.get("steps").unwrap(), "10,20");
        assert!(!echo.contains_key("eta"));
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut s = settings_from("seed = 1\n").unwrap();
        s.set("seed", 99u64);
        assert_eq!(s.take_u64("seed", 0).unwrap(), 99);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let s = settings_from("samlpes = 10\n").unwrap();
        let err = s.finish().unwrap_err();
        assert!(err.to_string().contains("samlpes"), "{err}");
    }

    #[test]
    fn malformed_lines_and_keys_are_rejected() {
        assert!(settings_from("just words\n").is_err());
        assert!(settings_from("Bad-Key = 1\n").is_err());
        assert!(settings_from("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn typed_parse_errors_name_the_key() {
        let mut s = settings_from("samples = lots\n").unwrap();
        let err = s.take_usize("samples", 3).unwrap_err();
        assert!(err.to_string().contains("samples"), "{err}");

        let mut s = settings_from("pairs = 0.2-0.4\n").unwrap();
        assert!(s.take_pair_list("pairs", &[]).is_err());

        let mut s = settings_from("pairs = 0.2:0.4,0.5:0.9\n").unwrap();
        assert_eq!(
            s.take_pair_list("pairs", &[]).unwrap(),
            vec![(0.2, 0.4), (0.5, 0.9)]
        );
    }

    #[test]
    fn bool_forms() {
        let mut s = Settings::empty();
        s.set("a", "yes");
        s.set("b", "0");
        s.set("c", "maybe");
        assert!(s.take_bool("a", false).unwrap());
        assert!(!s.take_bool("b", true).unwrap());
        assert!(s.take_bool("c", true).is_err());
    }
}
