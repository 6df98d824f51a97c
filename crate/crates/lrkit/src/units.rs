//! Count literals with unit suffixes: `12B`, `500e9`, `550M`, `120000000`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UnitError {
    #[error("`{0}` is not a count (expected e.g. 12e9, 12B, 550M)")]
    NotACount(String),
    #[error("`{0}` is not a non-negative whole number of units")]
    NotWhole(String),
    #[error("`{0}` is not a range (expected LO:HI)")]
    NotARange(String),
    #[error("`{0}` is not a grid (expected LO:HI:STEP or a comma list)")]
    NotAGrid(String),
}

/// Parses a count and normalizes it to a raw integer.
pub fn parse_count(s: &str) -> Result<u64, UnitError> {
    let t = s.trim().replace('_', "");
    let (num, scale) = match t.chars().last() {
        Some(c) if c.is_ascii_alphabetic() && !t.ends_with(['e', 'E']) => {
            let scale = match c.to_ascii_uppercase() {
                'K' => 1e3,
                'M' => 1e6,
                'B' | 'G' => 1e9,
                'T' => 1e12,
                _ => return Err(UnitError::NotACount(s.to_string())),
            };
            (&t[..t.len() - 1], scale)
        }
        _ => (t.as_str(), 1.0),
    };
    if let Ok(v) = num.parse::<u64>() {
        if scale == 1.0 {
            return Ok(v);
        }
    }
    let v: f64 = num
        .parse()
        .map_err(|_| UnitError::NotACount(s.to_string()))?;
    let raw = v * scale;
    let rounded = raw.round();
    if !(raw.is_finite()
        && raw >= 0.0
        && rounded < 1.8e19
        && (raw - rounded).abs() <= 1e-9 * raw.max(1.0))
    {
        return Err(UnitError::NotWhole(s.to_string()));
    }
    Ok(rounded as u64)
}

/// `LO:HI` as two counts.
pub fn parse_range(s: &str) -> Result<(u64, u64), UnitError> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| UnitError::NotARange(s.to_string()))?;
    Ok((parse_count(a)?, parse_count(b)?))
}

/// `LO:HI:STEP` (inclusive of `HI` when it lands on the grid) or `a,b,c`.
pub fn parse_count_grid(s: &str) -> Result<Vec<u64>, UnitError> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [lo, hi, step] => {
            let (lo, hi, step) = (parse_count(lo)?, parse_count(hi)?, parse_count(step)?);
            if step == 0 || lo > hi {
                return Err(UnitError::NotAGrid(s.to_string()));
            }
            Ok((0..=(hi - lo) / step).map(|k| lo + k * step).collect())
        }
        [_] => s.split(',').map(parse_count).collect(),
        _ => Err(UnitError::NotAGrid(s.to_string())),
    }
}

/// Comma-separated reals, e.g. an LR grid.
pub fn parse_real_list(s: &str) -> Result<Vec<f64>, UnitError> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| UnitError::NotAGrid(s.to_string()))
        })
        .collect()
}

/// `x:y` as two reals, e.g. an `lr:loss` point.
pub fn parse_pair(s: &str) -> Result<(f64, f64), UnitError> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| UnitError::NotARange(s.to_string()))?;
    let p = |x: &str| {
        x.trim()
            .parse::<f64>()
            .map_err(|_| UnitError::NotARange(s.to_string()))
    };
    Ok((p(a)?, p(b)?))
}
