//! Trained model parameters and their flat `key=value` text form.
//!
//! ```text
//! # comment lines and blank lines are ignored
//! format=1
//! model=hmc                        # or hmt
//! scales=3
//! wavelet=haar
//! # hmc: one block per orientation and 1-based scale
//! HL.1.initial=9e-1 1e-1           # p(s=0) p(s=1)
//! HL.1.transition=9e-1 1e-1 3e-1 7e-1   # a00 a01 a10 a11
//! HL.1.sigma0=1.2e-2
//! HL.1.b1=2.5e-1
//! LH.1.flat=true                   # subband had no usable coefficients
//! # hmt: one block per orientation
//! HL.root_prior=9e-1 1e-1
//! HL.1.transition=...              # child scale 1 given parent scale 2
//! HL.1.sigma0=...                  # emissions for every scale 1..=scales
//! HL.1.b1=...
//! ```
//!
//! Numbers are written in Rust's shortest round-trip exponent notation, so a
//! write/read cycle reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hmc::ChainParams;
use crate::hmt::TreeParams;
use crate::stat_models::Emission;
use crate::swt::{Orientation, Wavelet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hmc,
    Hmt,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hmc" => Ok(ModelKind::Hmc),
            "hmt" => Ok(ModelKind::Hmt),
            other => Err(Error::Config(format!("unknown model '{other}'"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Hmc => "hmc",
            ModelKind::Hmt => "hmt",
        })
    }
}

/// Parameters for every modeled subband. `None` marks a subband whose
/// coefficients were all below the variance floor; it decodes to non-edge.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Chain {
        scales: usize,
        wavelet: Wavelet,
        /// Keyed by orientation and 1-based scale.
        subbands: BTreeMap<(Orientation, usize), Option<ChainParams>>,
    },
    Tree {
        scales: usize,
        wavelet: Wavelet,
        orientations: BTreeMap<Orientation, Option<TreeParams>>,
    },
}

fn fmt_list(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_emission(out: &mut String, o: Orientation, scale: usize, e: &Emission) {
    let _ = writeln!(out, "{o}.{scale}.sigma0={:e}", e.sigma0);
    let _ = writeln!(out, "{o}.{scale}.b1={:e}", e.b1);
}

fn flat_matrix(a: &[[f64; 2]; 2]) -> [f64; 4] {
    [a[0][0], a[0][1], a[1][0], a[1][1]]
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Chain { .. } => ModelKind::Hmc,
            ModelParams::Tree { .. } => ModelKind::Hmt,
        }
    }

    pub fn scales(&self) -> usize {
        match self {
            ModelParams::Chain { scales, .. } | ModelParams::Tree { scales, .. } => *scales,
        }
    }

    pub fn wavelet(&self) -> Wavelet {
        match self {
            ModelParams::Chain { wavelet, .. } | ModelParams::Tree { wavelet, .. } => *wavelet,
        }
    }

    /// Renders the parameter lines (without the `format`/header lines when
    /// `header` is false, for embedding in metrics files).
    pub fn to_lines(&self, header: bool) -> String {
        let mut out = String::new();
        if header {
            out.push_str("# swt-hmm-edge model parameters\nformat=1\n");
        }
        let _ = writeln!(out, "model={}", self.kind());
        let _ = writeln!(out, "scales={}", self.scales());
        let _ = writeln!(out, "wavelet={}", self.wavelet());
        match self {
            ModelParams::Chain { subbands, .. } => {
                for (&(o, j), p) in subbands {
                    match p {
                        None => {
                            let _ = writeln!(out, "{o}.{j}.flat=true");
                        }
                        Some(p) => {
                            let _ = writeln!(out, "{o}.{j}.initial={}", fmt_list(&p.initial));
                            let _ = writeln!(
                                out,
                                "{o}.{j}.transition={}",
                                fmt_list(&flat_matrix(&p.transition))
                            );
                            write_emission(&mut out, o, j, &p.emission);
                        }
                    }
                }
            }
            ModelParams::Tree { orientations, .. } => {
                for (&o, p) in orientations {
                    match p {
                        None => {
                            let _ = writeln!(out, "{o}.flat=true");
                        }
                        Some(p) => {
                            let _ = writeln!(out, "{o}.root_prior={}", fmt_list(&p.root_prior));
                            for (k, t) in p.transitions.iter().enumerate() {
                                let _ = writeln!(
                                    out,
                                    "{o}.{}.transition={}",
                                    k + 1,
                                    fmt_list(&flat_matrix(t))
                                );
                            }
                            for (k, e) in p.emissions.iter().enumerate() {
                                write_emission(&mut out, o, k + 1, e);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.to_lines(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let table = KeyValues::read(text)?;
        if let Some(v) = table.get_opt("format") {
            if v != "1" {
                return Err(table.error("format", format!("unsupported format version {v}")));
            }
        }
        let kind: ModelKind = table.parse("model")?;
        let scales: usize = table.parse("scales")?;
        if scales == 0 {
            return Err(table.error("scales", "scales must be at least 1".into()));
        }
        let wavelet: Wavelet = table.parse("wavelet")?;
        let orientations: Vec<Orientation> = table.orientations();
        let params = match kind {
            ModelKind::Hmc => {
                let mut subbands = BTreeMap::new();
                for &o in &orientations {
                    for j in 1..=scales {
                        let prefix = format!("{o}.{j}");
                        if table.get_opt(&format!("{prefix}.flat")) == Some("true") {
                            subbands.insert((o, j), None);
                            continue;
                        }
                        if table.get_opt(&format!("{prefix}.initial")).is_none() {
                            continue;
                        }
                        let initial = table.pair(&format!("{prefix}.initial"))?;
                        let transition = table.matrix(&format!("{prefix}.transition"))?;
                        let emission = table.emission(&prefix)?;
                        let p = ChainParams::new(initial, transition, emission).map_err(|e| {
                            table.error(&format!("{prefix}.initial"), e.to_string())
                        })?;
                        subbands.insert((o, j), Some(p));
                    }
                }
                ModelParams::Chain {
                    scales,
                    wavelet,
                    subbands,
                }
            }
            ModelKind::Hmt => {
                let mut map = BTreeMap::new();
                for &o in &orientations {
                    if table.get_opt(&format!("{o}.flat")) == Some("true") {
                        map.insert(o, None);
                        continue;
                    }
                    let root_key = format!("{o}.root_prior");
                    let root_prior = table.pair(&root_key)?;
                    let transitions = (1..scales)
                        .map(|j| table.matrix(&format!("{o}.{j}.transition")))
                        .collect::<Result<Vec<_>>>()?;
                    let emissions = (1..=scales)
                        .map(|j| table.emission(&format!("{o}.{j}")))
                        .collect::<Result<Vec<_>>>()?;
                    let p = TreeParams::new(root_prior, transitions, emissions)
                        .map_err(|e| table.error(&root_key, e.to_string()))?;
                    map.insert(o, Some(p));
                }
                ModelParams::Tree {
                    scales,
                    wavelet,
                    orientations: map,
                }
            }
        };
        Ok(params)
    }
}

/// Parsed `key=value` lines with their source line numbers.
struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    fn read(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ParamFormat {
                line: n + 1,
                message: format!("expected key=value, got '{line}'"),
            })?;
            if entries
                .insert(k.trim().to_string(), (n + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(Error::ParamFormat {
                    line: n + 1,
                    message: format!("duplicate key '{}'", k.trim()),
                });
            }
        }
        Ok(KeyValues { entries })
    }

    fn error(&self, key: &str, message: String) -> Error {
        Error::ParamFormat {
            line: self.entries.get(key).map_or(0, |e| e.0),
            message,
        }
    }

    fn get_opt(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.1.as_str())
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.get_opt(key).ok_or_else(|| Error::ParamFormat {
            line: 0,
            message: format!("missing key '{key}'"),
        })
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.get(key)?
            .parse()
            .map_err(|e: T::Err| self.error(key, format!("bad value for '{key}': {e}")))
    }

    fn numbers<const N: usize>(&self, key: &str) -> Result<[f64; N]> {
        let parts: Vec<&str> = self.get(key)?.split_whitespace().collect();
        if parts.len() != N {
            return Err(self.error(
                key,
                format!("'{key}' needs {N} numbers, got {}", parts.len()),
            ));
        }
        let mut out = [0.0; N];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p
                .parse()
                .map_err(|_| self.error(key, format!("'{p}' is not a number")))?;
        }
        Ok(out)
    }

    fn pair(&self, key: &str) -> Result<[f64; 2]> {
        self.numbers::<2>(key)
    }

    fn matrix(&self, key: &str) -> Result<[[f64; 2]; 2]> {
        let [a, b, c, d] = self.numbers::<4>(key)?;
        Ok([[a, b], [c, d]])
    }

    fn emission(&self, prefix: &str) -> Result<Emission> {
        Ok(Emission {
            sigma0: self.parse(&format!("{prefix}.sigma0"))?,
            b1: self.parse(&format!("{prefix}.b1"))?,
        })
    }

    fn orientations(&self) -> Vec<Orientation> {
        Orientation::ALL
            .into_iter()
            .filter(|o| {
                let prefix = format!("{o}.");
                self.entries.keys().any(|k| k.starts_with(&prefix))
            })
            .collect()
    }
}
