//! Plain-text field container.
//!
//! ```text
//! probsafe-field 1
//! ptype = I
//! policy_tag = nominal_closed_loop
//! provenance = cde
//! fixed_margin = 0
//! axis T = 0 10 101
//! axis x0 = -1 7 321
//! ---
//! <one value per line, row-major, last axis fastest>
//! ```
//!
//! Axis lines appear in storage order (`T`, optional `L`, `x0`, `x1`, …) and
//! give `min max nodes`. `fixed_margin` is omitted when an `L` axis exists.
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! written field reads back bit-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::field::SafeProbabilityField;
use super::grid::{Axis, GridSpec};
use crate::error::{Error, Result};

const MAGIC: &str = "probsafe-field 1";

impl SafeProbabilityField {
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 22 + 256);
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "ptype = {}", self.ptype);
        let _ = writeln!(s, "policy_tag = {}", self.policy_tag);
        let _ = writeln!(s, "provenance = {}", self.provenance);
        if let (Some(m), None) = (self.fixed_margin, &self.grid.margin) {
            let _ = writeln!(s, "fixed_margin = {m}");
        }
        let mut axis = |name: &str, a: &Axis| {
            let _ = writeln!(s, "axis {name} = {} {} {}", a.min, a.max, a.nodes);
        };
        axis("T", &self.grid.horizon);
        if let Some(l) = &self.grid.margin {
            axis("L", l);
        }
        for (i, a) in self.grid.x.iter().enumerate() {
            axis(&format!("x{i}"), a);
        }
        s.push_str("---\n");
        for v in &self.values {
            let _ = writeln!(s, "{v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(Error::Format(format!("missing header line {MAGIC:?}")));
        }
        let (mut ptype, mut tag, mut prov, mut fixed_margin) = (None, None, None, None);
        let (mut horizon, mut margin, mut x) = (None, None, Vec::new());
        for line in lines.by_ref() {
            let line = line.trim();
            if line == "---" {
                break;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Format(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(name) = key.strip_prefix("axis ") {
                let axis = parse_axis(value)?;
                match name.trim() {
                    "T" => horizon = Some(axis),
                    "L" => margin = Some(axis),
                    other => {
                        let idx: usize = other
                            .strip_prefix('x')
                            .and_then(|i| i.parse().ok())
                            .ok_or_else(|| Error::Format(format!("unknown axis {other:?}")))?;
                        if idx != x.len() {
                            return Err(Error::Format(format!("axis x{idx} out of order")));
                        }
                        x.push(axis);
                    }
                }
                continue;
            }
            match key {
                "ptype" => ptype = Some(value.parse()?),
                "policy_tag" => tag = Some(value.parse()?),
                "provenance" => prov = Some(value.parse()?),
                "fixed_margin" => {
                    fixed_margin = Some(value.parse::<f64>().map_err(|e| Error::Format(format!("fixed_margin: {e}")))?)
                }
                other => return Err(Error::Format(format!("unknown header key {other:?}"))),
            }
        }
        let values = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Format(format!("value {l:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        let missing = |k: &str| Error::Format(format!("missing header key {k}"));
        let grid = GridSpec::new(x, margin, horizon.ok_or_else(|| missing("axis T"))?)?;
        SafeProbabilityField::new(
            ptype.ok_or_else(|| missing("ptype"))?,
            grid,
            fixed_margin,
            values,
            tag.ok_or_else(|| missing("policy_tag"))?,
            prov.ok_or_else(|| missing("provenance"))?,
        )
    }

    /// CSV with one row per node: `T,[L,]x0,…,value`.
    pub fn to_csv(&self) -> String {
        let axes = self.grid.axes();
        let mut s = String::from("T");
        if self.grid.margin.is_some() {
            s.push_str(",L");
        }
        for i in 0..self.grid.x.len() {
            let _ = write!(s, ",x{i}");
        }
        s.push_str(",value\n");
        let mut idx = vec![0usize; axes.len()];
        for v in &self.values {
            for (i, a) in idx.iter().zip(&axes) {
                let _ = write!(s, "{},", a.coord(*i));
            }
            let _ = writeln!(s, "{v}");
            for k in (0..axes.len()).rev() {
                idx[k] += 1;
                if idx[k] < axes[k].nodes {
                    break;
                }
                idx[k] = 0;
            }
        }
        s
    }
}

fn parse_axis(s: &str) -> Result<Axis> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Format(format!("axis needs `min max nodes`, got {s:?}")));
    }
    let num = |p: &str| p.parse::<f64>().map_err(|e| Error::Format(format!("axis bound {p:?}: {e}")));
    let nodes = parts[2].parse::<usize>().map_err(|e| Error::Format(format!("axis nodes {:?}: {e}", parts[2])))?;
    Axis::new(num(parts[0])?, num(parts[1])?, nodes)
}

fn io_err(path: &Path, what: &str) -> impl FnOnce(std::io::Error) -> Error {
    let context = format!("{what} {}", path.display());
    move |source| Error::Io { context, source }
}

pub fn write_field(field: &SafeProbabilityField, path: &Path) -> Result<()> {
    fs::write(path, field.to_text()).map_err(io_err(path, "writing field"))
}

pub fn read_field(path: &Path) -> Result<SafeProbabilityField> {
    let text = fs::read_to_string(path).map_err(io_err(path, "reading field"))?;
    SafeProbabilityField::from_text(&text)
}

pub fn write_field_csv(field: &SafeProbabilityField, path: &Path) -> Result<()> {
    fs::write(path, field.to_csv()).map_err(io_err(path, "writing field csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cde_field::{PolicyTag, Provenance};
    use crate::safety_prob::ProbabilityType;

    fn sample() -> SafeProbabilityField {
        let grid = GridSpec::new(
            vec![Axis::new(-1.0, 1.0, 3).unwrap()],
            Some(Axis::new(0.0, 0.5, 3).unwrap()),
            Axis::new(0.0, 2.0, 3).unwrap(),
        )
        .unwrap();
        let values = (0..grid.len()).map(|i| (i as f64 * 0.1).sin().abs() / 3.0).collect();
        SafeProbabilityField::new(
            ProbabilityType::III,
            grid,
            None,
            values,
            PolicyTag::OverallClosedLoop,
            Provenance::Mc,
        )
        .unwrap()
    }

    #[test]
    fn text_round_trip_is_exact() {
        let f = sample();
        let back = SafeProbabilityField::from_text(&f.to_text()).unwrap();
        assert_eq!(f, back);
    }

    #[test]
    fn csv_lists_every_node() {
        let f = sample();
        let csv = f.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "T,L,x0,value");
        assert_eq!(lines.len(), f.values.len() + 1);
        assert!(lines[2].starts_with("0,0,0,"));
        assert!(lines.last().unwrap().starts_with("2,0.5,1,"));
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(matches!(SafeProbabilityField::from_text("nope"), Err(Error::Format(_))));
        let text = sample().to_text().replace("ptype = III\n", "");
        assert!(matches!(SafeProbabilityField::from_text(&text), Err(Error::Format(_))));
    }
}
