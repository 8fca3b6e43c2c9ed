//! Marked point patterns on the unit window.
//!
//! Native-unit data are mapped affinely onto `(0,1)` or `(0,1)^2`; the
//! transform is kept so results can be reported back in native units.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rectangular observation window in native units plus the affine map onto the
/// unit window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    bounds: Vec<(f64, f64)>,
}

impl ObservationWindow {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() || bounds.len() > 2 {
            return Err(Error::Param(format!(
                "window must have 1 or 2 dimensions, got {}",
                bounds.len()
            )));
        }
        for &(lo, hi) in &bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Param(format!("invalid window bounds ({lo}, {hi})")));
            }
        }
        Ok(Self { bounds })
    }

    pub fn unit(dims: usize) -> Self {
        Self {
            bounds: vec![(0.0, 1.0); dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// `(offset, scale)` per dimension: `unit = (native - offset) / scale`.
    pub fn transform(&self) -> Vec<(f64, f64)> {
        self.bounds.iter().map(|&(lo, hi)| (lo, hi - lo)).collect()
    }

    pub fn to_unit(&self, native: &[f64]) -> Vec<f64> {
        native
            .iter()
            .zip(&self.bounds)
            .map(|(&x, &(lo, hi))| (x - lo) / (hi - lo))
            .collect()
    }

    pub fn to_native(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(&self.bounds)
            .map(|(&u, &(lo, hi))| lo + u * (hi - lo))
            .collect()
    }

    /// Area (or length) of the native window.
    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| hi - lo).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "support", rename_all = "snake_case")]
pub enum Support {
    Real,
    Positive,
    ShiftedPositive { offset: f64 },
}

impl Support {
    /// Offset below which values are outside the support, if any.
    pub fn offset(&self) -> Option<f64> {
        match *self {
            Support::Real => None,
            Support::Positive => Some(0.0),
            Support::ShiftedPositive { offset } => Some(offset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarkKind {
    Categorical { levels: usize },
    Count { lower: u64 },
    Continuous(Support),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkDescriptor {
    pub name: String,
    #[serde(flatten)]
    pub kind: MarkKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MarkSchema {
    pub marks: Vec<MarkDescriptor>,
}

impl MarkSchema {
    pub fn new(marks: Vec<MarkDescriptor>) -> Result<Self> {
        for m in &marks {
            match m.kind {
                MarkKind::Categorical { levels } if levels < 2 => {
                    return Err(Error::Param(format!(
                        "categorical mark `{}` needs at least 2 levels",
                        m.name
                    )))
                }
                MarkKind::Continuous(Support::ShiftedPositive { offset }) if !offset.is_finite() => {
                    return Err(Error::Param(format!("mark `{}` has a non-finite offset", m.name)))
                }
                _ => {}
            }
        }
        Ok(Self { marks })
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    /// Check a value against the mark's declared support.
    pub fn check(&self, mark: usize, value: &MarkValue) -> Result<()> {
        let desc = &self.marks[mark];
        let ok = match (&desc.kind, value) {
            (MarkKind::Categorical { levels }, MarkValue::Category(c)) => c < levels,
            (MarkKind::Count { lower }, MarkValue::Count(y)) => y >= lower,
            (MarkKind::Continuous(s), MarkValue::Real(y)) => {
                y.is_finite() && s.offset().is_none_or(|o| *y > o)
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Support(format!("{value:?} for mark `{}` ({:?})", desc.name, desc.kind)))
        }
    }

    fn parse(&self, mark: usize, field: &str) -> std::result::Result<MarkValue, String> {
        let desc = &self.marks[mark];
        let field = field.trim();
        let v = match desc.kind {
            MarkKind::Categorical { .. } => MarkValue::Category(
                field.parse().map_err(|e| format!("mark `{}`: {e}", desc.name))?,
            ),
            MarkKind::Count { .. } => {
                MarkValue::Count(field.parse().map_err(|e| format!("mark `{}`: {e}", desc.name))?)
            }
            MarkKind::Continuous(_) => {
                MarkValue::Real(field.parse().map_err(|e| format!("mark `{}`: {e}", desc.name))?)
            }
        };
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MarkValue {
    Category(usize),
    Count(u64),
    Real(f64),
}

impl MarkValue {
    pub fn as_f64(&self) -> f64 {
        match *self {
            MarkValue::Category(c) => c as f64,
            MarkValue::Count(y) => y as f64,
            MarkValue::Real(y) => y,
        }
    }

    fn render(&self) -> String {
        match self {
            MarkValue::Category(c) => c.to_string(),
            MarkValue::Count(y) => y.to_string(),
            MarkValue::Real(y) => format!("{y:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Location in the unit window.
    pub loc: Vec<f64>,
    pub marks: Vec<MarkValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkedPointPattern {
    pub window: ObservationWindow,
    pub schema: MarkSchema,
    pub events: Vec<Event>,
}

/// An event in native units, prior to rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub loc: Vec<f64>,
    pub marks: Vec<MarkValue>,
}

impl MarkedPointPattern {
    /// Build a pattern from events already in the unit window.
    pub fn new(window: ObservationWindow, schema: MarkSchema, events: Vec<Event>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.loc.len() != window.dims() || e.loc.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                return Err(Error::Boundary { index: i });
            }
            if e.marks.len() != schema.len() {
                return Err(Error::Parse {
                    row: i,
                    msg: format!("expected {} marks, got {}", schema.len(), e.marks.len()),
                });
            }
            for (k, v) in e.marks.iter().enumerate() {
                schema.check(k, v)?;
            }
        }
        Ok(Self {
            window,
            schema,
            events,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.window.dims()
    }

    /// Event indices ordered by coordinate `dim`, ties kept in file order.
    pub fn order_by(&self, dim: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.events.len()).collect();
        idx.sort_by(|&a, &b| self.events[a].loc[dim].total_cmp(&self.events[b].loc[dim]));
        idx
    }

    /// Write in the CSV layout read by [`load_pattern`], in native units.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = location_columns(self.dims());
        header.extend(self.schema.marks.iter().map(|m| m.name.clone()));
        w.write_record(&header)?;
        for e in &self.events {
            let native = self.window.to_native(&e.loc);
            let mut row: Vec<String> = native.iter().map(|x| format!("{x:?}")).collect();
            row.extend(e.marks.iter().map(MarkValue::render));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn location_columns(dims: usize) -> Vec<String> {
    if dims == 1 {
        vec!["t".into()]
    } else {
        (1..=dims).map(|k| format!("x{k}")).collect()
    }
}

/// Map native-unit events onto the unit window.
///
/// Events on or outside the native boundary are rejected rather than nudged.
pub fn rescale_window(
    raw: Vec<RawEvent>,
    window: ObservationWindow,
    schema: MarkSchema,
) -> Result<MarkedPointPattern> {
    let mut events = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        if r.loc.len() != window.dims() {
            return Err(Error::Parse {
                row: i,
                msg: format!("expected {} coordinates, got {}", window.dims(), r.loc.len()),
            });
        }
        let inside = r
            .loc
            .iter()
            .zip(window.bounds())
            .all(|(&x, &(lo, hi))| x > lo && x < hi);
        if !inside {
            return Err(Error::Boundary { index: i });
        }
        let loc = window.to_unit(&r.loc);
        // rounding can land exactly on the unit boundary for points within an
        // ulp of the native boundary
        if loc.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
            return Err(Error::Boundary { index: i });
        }
        events.push(Event {
            loc,
            marks: r.marks,
        });
    }
    MarkedPointPattern::new(window, schema, events)
}

/// Read a pattern from CSV. The header names the location columns (`t` for
/// temporal data, `x1,x2` for spatial data) followed by one column per mark in
/// the schema; marks are matched by name.
pub fn read_pattern<R: Read>(
    reader: R,
    window: ObservationWindow,
    schema: MarkSchema,
) -> Result<MarkedPointPattern> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let loc_cols = location_columns(window.dims())
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let mark_cols = schema
        .marks
        .iter()
        .map(|m| find(&m.name))
        .collect::<Result<Vec<_>>>()?;

    let mut raw = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| {
            rec.get(c).ok_or_else(|| Error::Parse {
                row,
                msg: format!("missing field {c}"),
            })
        };
        let mut loc = Vec::with_capacity(loc_cols.len());
        for &c in &loc_cols {
            let v: f64 = field(c)?.trim().parse().map_err(|e| Error::Parse {
                row,
                msg: format!("location: {e}"),
            })?;
            loc.push(v);
        }
        let mut marks = Vec::with_capacity(mark_cols.len());
        for (k, &c) in mark_cols.iter().enumerate() {
            let v = schema
                .parse(k, field(c)?)
                .map_err(|msg| Error::Parse { row, msg })?;
            schema.check(k, &v)?;
            marks.push(v);
        }
        raw.push(RawEvent { loc, marks });
    }
    rescale_window(raw, window, schema)
}

/// Load a CSV pattern file; native window bounds come from the caller.
pub fn load_pattern(
    path: impl AsRef<Path>,
    window: ObservationWindow,
    schema: MarkSchema,
) -> Result<MarkedPointPattern> {
    let file = std::fs::File::open(path)?;
    read_pattern(std::io::BufReader::new(file), window, schema)
}
