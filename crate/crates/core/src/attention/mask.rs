use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Local attention window: total neighbourhood width `w` (each token sees
/// `w/2` tokens to each side plus itself), or unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Window {
    Finite(usize),
    Full(FullWindow),
}

/// Serialized as the string `"full"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FullWindow {
    #[serde(rename = "full")]
    Full,
}

impl Window {
    pub const FULL: Window = Window::Full(FullWindow::Full);

    pub fn new(w: usize) -> Result<Self> {
        let window = Window::Finite(w);
        window.validate()?;
        Ok(window)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Window::Finite(w) if w < 2 || w % 2 != 0 => {
                Err(Error::Config(format!("window must be even and >= 2, got {w}")))
            }
            _ => Ok(()),
        }
    }

    /// Tokens admitted on each side, `None` for an unbounded window.
    pub fn half_width(&self) -> Option<usize> {
        match *self {
            Window::Finite(w) => Some(w / 2),
            Window::Full(_) => None,
        }
    }

    /// True when the window covers every pair in a length-`n` sequence.
    pub fn saturates(&self, n: usize) -> bool {
        self.half_width().map_or(true, |h| h + 1 >= n)
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Finite(w) => write!(f, "{w}"),
            Window::Full(_) => f.write_str("full"),
        }
    }
}

impl std::str::FromStr for Window {
    type Err = Error;

    /// Parses `"full"` or an even integer >= 2.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(Window::FULL);
        }
        let w = s.parse().map_err(|_| Error::Config(format!("window must be an even integer or \"full\", got {s:?}")))?;
        Window::new(w)
    }
}

/// Dense boolean admissibility matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    n_rows: usize,
    n_cols: usize,
    bits: Vec<bool>,
}

impl BoolMask {
    pub fn new(n_rows: usize, n_cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n_rows * n_cols {
            return Err(Error::Shape(format!(
                "mask of {n_rows}x{n_cols} needs {} entries, got {}",
                n_rows * n_cols,
                bits.len()
            )));
        }
        Ok(BoolMask { n_rows, n_cols, bits })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n_cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn popcount(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn all(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskSpec {
    Full,
    Band(Window),
    Causal,
    Explicit(BoolMask),
}

/// Materializes the admissibility matrix of `spec` for an
/// `n_rows x n_cols` attention.
pub fn build_mask(spec: &MaskSpec, n_rows: usize, n_cols: usize) -> Result<BoolMask> {
    if n_rows == 0 || n_cols == 0 {
        return Err(Error::Usage("mask dimensions must be positive".into()));
    }
    let mut bits = vec![false; n_rows * n_cols];
    match spec {
        MaskSpec::Full => bits.fill(true),
        MaskSpec::Causal => {
            for i in 0..n_rows {
                for j in 0..=i.min(n_cols - 1) {
                    bits[i * n_cols + j] = true;
                }
            }
        }
        MaskSpec::Band(w) => {
            if n_rows != n_cols {
                return Err(Error::Usage(format!(
                    "band mask requested for non-square {n_rows}x{n_cols}"
                )));
            }
            w.validate()?;
            for i in 0..n_rows {
                for j in 0..n_cols {
                    bits[i * n_cols + j] = w.half_width().map_or(true, |h| i.abs_diff(j) <= h);
                }
            }
        }
        MaskSpec::Explicit(m) => {
            if m.n_rows != n_rows || m.n_cols != n_cols {
                return Err(Error::Shape("explicit mask size mismatch".into()));
            }
            return Ok(m.clone());
        }
    }
    BoolMask::new(n_rows, n_cols, bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_parses_and_prints() {
        for w in [Window::FULL, Window::Finite(2), Window::Finite(64)] {
            assert_eq!(w.to_string().parse::<Window>().unwrap(), w);
        }
        assert_eq!(" FULL ".parse::<Window>().unwrap(), Window::FULL);
        for bad in ["3", "0", "", "wide", "-2"] {
            assert!(bad.parse::<Window>().is_err(), "{bad}");
        }
    }

    fn admitted(m: &BoolMask, i: usize) -> Vec<usize> {
        (0..m.n_cols()).filter(|&j| m.get(i, j)).collect()
    }

    #[test]
    fn band_four_over_nine_tokens() {
        let m = build_mask(&MaskSpec::Band(Window::new(4).unwrap()), 9, 9).unwrap();
        assert_eq!(admitted(&m, 0), vec![0, 1, 2]);
        assert_eq!(admitted(&m, 4), vec![2, 3, 4, 5, 6]);
        assert_eq!(admitted(&m, 8), vec![6, 7, 8]);
        for i in 0..9 {
            assert!(m.get(i, i), "self must be admitted");
        }
    }

    #[test]
    fn wide_band_is_full() {
        for n in 1..12 {
            let w = Window::new(2 * n.max(1)).unwrap();
            assert!(build_mask(&MaskSpec::Band(w), n, n).unwrap().all());
        }
    }

    #[test]
    fn causal_is_lower_triangular() {
        let m = build_mask(&MaskSpec::Causal, 3, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), j <= i);
            }
        }
    }

    #[test]
    fn band_rejects_non_square() {
        let w = Window::new(4).unwrap();
        assert!(matches!(build_mask(&MaskSpec::Band(w), 3, 4), Err(Error::Usage(_))));
    }

    #[test]
    fn window_validation() {
        assert!(Window::new(0).is_err());
        assert!(Window::new(3).is_err());
        assert!(Window::new(2).is_ok());
    }

    #[test]
    fn window_serde() {
        assert_eq!(serde_json::to_string(&Window::FULL).unwrap(), "\"full\"");
        assert_eq!(serde_json::to_string(&Window::Finite(8)).unwrap(), "8");
        let w: Window = serde_json::from_str("\"full\"").unwrap();
        assert_eq!(w, Window::FULL);
    }
}
