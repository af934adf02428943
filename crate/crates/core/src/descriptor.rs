//! Tiny `name key=value ...` parser shared by regularizer, permutation and
//! stepsize descriptors.
//!
//! The name may be followed by whitespace or a colon; parameters are separated
//! by whitespace or `;`. List values are comma separated.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Descriptor {
    pub name: String,
    params: BTreeMap<String, String>,
    used: RefCell<Vec<String>>,
}

impl Descriptor {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let (name, rest) = match text.find(|c: char| c == ':' || c.is_whitespace()) {
            Some(i) => (&text[..i], &text[i + 1..]),
            None => (text, ""),
        };
        if name.is_empty() {
            return Err(Error::parse(text, "empty name"));
        }
        let mut params = BTreeMap::new();
        for token in rest.split(|c: char| c == ';' || c.is_whitespace()) {
            if token.is_empty() {
                continue;
            }
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| Error::parse(text, format!("expected key=value, got '{token}'")))?;
            if params.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::parse(text, format!("duplicate key '{k}'")));
            }
        }
        Ok(Descriptor {
            name: name.to_ascii_lowercase(),
            params,
            used: RefCell::new(Vec::new()),
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.params.get(key)?;
        self.used.borrow_mut().push(key.to_string());
        Some(v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.raw(key).map(|v| parse_f64(key, v)).transpose()
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        self.get_f64(key)?
            .ok_or_else(|| Error::parse(&self.name, format!("missing parameter '{key}'")))
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.raw(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|e| Error::parse(key, format!("'{v}': {e}")))
            })
            .transpose()
    }

    pub fn require_u64(&self, key: &str) -> Result<u64> {
        self.get_u64(key)?
            .ok_or_else(|| Error::parse(&self.name, format!("missing parameter '{key}'")))
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.raw(key)
    }

    pub fn get_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.raw(key)
            .map(|v| v.split(',').map(|x| parse_f64(key, x)).collect())
            .transpose()
    }

    /// Errors if any parameter was never read.
    pub fn ensure_consumed(&self) -> Result<()> {
        let used = self.used.borrow();
        for key in self.params.keys() {
            if !used.contains(key) {
                return Err(Error::parse(&self.name, format!("unknown parameter '{key}'")));
            }
        }
        Ok(())
    }
}

pub fn parse_f64(context: &str, text: &str) -> Result<f64> {
    let value: f64 = text
        .trim()
        .parse()
        .map_err(|e| Error::parse(context, format!("'{text}': {e}")))?;
    if value.is_nan() {
        return Err(Error::parse(context, "NaN is not allowed"));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_colon_and_space_forms() {
        let a = Descriptor::parse("l1:lambda=0.5;mu=2").unwrap();
        let b = Descriptor::parse("l1 lambda=0.5 mu=2").unwrap();
        for s in [a, b] {
            assert_eq!(s.name, "l1");
            assert_eq!(s.require_f64("lambda").unwrap(), 0.5);
            assert_eq!(s.require_f64("mu").unwrap(), 2.0);
            s.ensure_consumed().unwrap();
        }
    }

    #[test]
    fn lists_and_errors() {
        let s = Descriptor::parse("box lo=-1,0 hi=1").unwrap();
        assert_eq!(s.get_list("lo").unwrap().unwrap(), vec![-1.0, 0.0]);
        assert!(s.ensure_consumed().is_err());
        assert!(Descriptor::parse("x a").is_err());
        assert!(Descriptor::parse("x a=1 a=2").is_err());
        assert!(Descriptor::parse("x a=nan").unwrap().get_f64("a").is_err());
    }
}
