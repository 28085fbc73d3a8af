//! Hourly prices and run-cost estimates.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Dollars per hour by hardware name. Names are matched case-insensitively.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceTable {
    prices: BTreeMap<String, f64>,
}

impl Default for PriceTable {
    /// Posted on-demand prices: four accelerators and one CPU core with 2 GB
    /// of RAM (`core`).
    fn default() -> Self {
        Self::from_pairs([
            ("K80", 0.45),
            ("T4", 0.34),
            ("V100", 2.61),
            ("A100", 2.98),
            ("core", 0.062),
        ])
        .expect("built-in prices are positive")
    }
}

impl PriceTable {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        let mut prices = BTreeMap::new();
        for (name, price) in pairs {
            if !(price > 0.0 && price.is_finite()) {
                return Err(Error::Format(format!(
                    "price for {name} must be positive, got {price}"
                )));
            }
            prices.insert(name.to_ascii_lowercase(), price);
        }
        Ok(Self { prices })
    }

    /// Parses lines of `name price` or `name,price`; blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty());
            let (Some(name), Some(price), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!(
                    "price line {}: expected `name price`",
                    lineno + 1
                )));
            };
            let price: f64 = price.parse().map_err(|_| {
                Error::Format(format!("price line {}: bad number `{price}`", lineno + 1))
            })?;
            pairs.push((name, price));
        }
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading price table {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn price(&self, hardware: &str) -> Result<f64> {
        self.prices
            .get(&hardware.to_ascii_lowercase())
            .copied()
            .ok_or_else(|| {
                let known: Vec<&str> = self.prices.keys().map(String::as_str).collect();
                popvec_core::Error::Config(format!(
                    "unknown hardware `{hardware}` (known: {})",
                    known.join(", ")
                ))
                .into()
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.prices.keys().map(String::as_str)
    }
}

/// `runtime_s / 3600 × price`.
pub fn cost_estimate(runtime_s: f64, hardware: &str, table: &PriceTable) -> Result<f64> {
    if !(runtime_s >= 0.0) {
        return Err(
            popvec_core::Error::Config(format!("runtime must be >= 0, got {runtime_s}")).into(),
        );
    }
    Ok(runtime_s / 3600.0 * table.price(hardware)?)
}
