//! Line-delimited `key=value` records.
//!
//! One record per line, fields separated by a single tab, field order fixed by
//! the producer. Lists are comma-separated; undefined numbers print as `na`.

use std::fmt;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    fields: Vec<(&'static str, String)>,
}

impl Record {
    pub fn new(kind: &str) -> Self {
        Self {
            fields: vec![("kind", kind.to_string())],
        }
    }

    pub fn field(mut self, key: &'static str, value: impl fmt::Display) -> Self {
        self.fields.push((key, value.to_string()));
        self
    }

    pub fn opt(self, key: &'static str, value: Option<impl fmt::Display>) -> Self {
        match value {
            Some(v) => self.field(key, v),
            None => self.field(key, "na"),
        }
    }

    pub fn list<T: fmt::Display>(self, key: &'static str, values: &[T]) -> Self {
        let joined = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        self.field(key, joined)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.fields.iter().map(|(k, _)| *k)
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str("\t")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Splits a record line into `(key, value)` pairs, in order.
pub fn parse_record(line: &str) -> Option<Vec<(String, String)>> {
    line.trim_end_matches(['\n', '\r'])
        .split('\t')
        .map(|f| f.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

/// Looks up a field in a parsed record.
pub fn lookup<'a>(fields: &'a [(String, String)], key: &str) -> Option<&'a str> {
    fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_and_parse() {
        let r = Record::new("step")
            .field("step", 3)
            .field("loss", 0.5)
            .opt("mse", None::<f64>)
            .list("hist", &[1, 0, 2]);
        let line = r.to_string();
        assert_eq!(line, "kind=step\tstep=3\tloss=0.5\tmse=na\thist=1,0,2");
        let parsed = parse_record(&line).unwrap();
        assert_eq!(lookup(&parsed, "hist"), Some("1,0,2"));
        assert_eq!(r.get("loss"), Some("0.5"));
        assert!(parse_record("novalue").is_none());
    }
}
