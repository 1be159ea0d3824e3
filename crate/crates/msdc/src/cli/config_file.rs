//! Flat `key = value` configuration files: UTF-8, `#` comment lines, one
//! assignment per line. Flag values override file values, which override
//! built-in defaults.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub fn parse_config_text(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::ConfigParse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::ConfigParse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Layered lookup: explicit flag, then config file, then default.
pub struct Resolver {
    file: HashMap<String, String>,
}

impl Resolver {
    pub fn from_path(path: Option<&std::path::Path>) -> Result<Self> {
        let file = match path {
            Some(p) => parse_config_text(&std::fs::read_to_string(p)?)?,
            None => HashMap::new(),
        };
        Ok(Resolver { file })
    }

    pub fn resolve<T: std::str::FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(raw) => raw.parse().map_err(|_| {
                Error::invalid(format!("config key `{key}`: cannot parse `{raw}`"))
            }),
            None => Ok(default),
        }
    }

    pub fn resolve_opt<T: std::str::FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::invalid(format!("config key `{key}`: cannot parse `{raw}`"))),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_assignments_and_comments() {
        let map = parse_config_text("# a comment\nheight = 64\n\nwidth=128\nseed =  7\n").unwrap();
        assert_eq!(map["height"], "64");
        assert_eq!(map["width"], "128");
        assert_eq!(map["seed"], "7");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_config_text("height = 64\nnonsense\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn flag_overrides_file_overrides_default() {
        let r = Resolver {
            file: parse_config_text("steps = 50\n").unwrap(),
        };
        assert_eq!(r.resolve("steps", Some(10u64), 1).unwrap(), 10);
        assert_eq!(r.resolve("steps", None, 1u64).unwrap(), 50);
        assert_eq!(r.resolve("batch", None, 2u64).unwrap(), 2);
    }
}
