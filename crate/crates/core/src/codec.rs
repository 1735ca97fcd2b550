//! Line-oriented text encoding shared by cloud snapshots and trainer checkpoints.

use std::str::FromStr;

use crate::error::{Error, Result};

pub fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn hex_to_f64(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Checkpoint(format!("bad float encoding {s:?}")))
}

pub fn hex_list(values: &[f64]) -> String {
    values
        .iter()
        .map(|&v| f64_to_hex(v))
        .collect::<Vec<_>>()
        .join(" ")
}

pub struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    pub fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim_end()))
            .ok_or_else(|| Error::Checkpoint("unexpected end of input".into()))
    }

    /// Next line verbatim, minus trailing whitespace.
    pub fn raw_line(&mut self) -> Result<&'a str> {
        Ok(self.next_line()?.1)
    }

    pub fn expect_exact(&mut self, expected: &str) -> Result<()> {
        let (n, line) = self.next_line()?;
        if line != expected {
            return Err(Error::Checkpoint(format!(
                "line {n}: expected {expected:?}, found {line:?}"
            )));
        }
        Ok(())
    }

    /// Next line split on whitespace, with the leading key checked and removed.
    pub fn keyed_fields(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let (n, line) = self.next_line()?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some(k) if k == key => Ok(parts.collect()),
            other => Err(Error::Checkpoint(format!(
                "line {n}: expected key {key:?}, found {other:?}"
            ))),
        }
    }

    pub fn keyed_value<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let fields = self.keyed_fields(key)?;
        match fields.as_slice() {
            [v] => v
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value {v:?} for {key}"))),
            _ => Err(Error::Checkpoint(format!("{key}: expected one value"))),
        }
    }

    pub fn keyed_floats(&mut self, key: &str) -> Result<Vec<f64>> {
        self.keyed_fields(key)?
            .into_iter()
            .map(hex_to_f64)
            .collect()
    }
}
