//! Target/binder complex records, their text serialization, and coordinate
//! normalization.
//!
//! A record file is a sequence of blocks:
//!
//! ```text
//! #complex 1abc_A_B
//! T MKV...
//! TX 1.000 2.000 3.000
//! ...
//! B GSE...
//! BX 4.000 5.000 6.000
//! ...
//! ```
//!
//! Coordinates are Ångström with three decimals. Any extra tokens on the
//! header line after the id are kept verbatim as the record's source tag.

use std::fmt::Write as _;
use std::path::Path;

use crate::alphabet;
use crate::discrete::SequenceState;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

/// One chain: sequence over the canonical alphabet and one Cα per residue.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainRecord {
    pub sequence: String,
    pub coords: Vec<[f64; 3]>,
}

impl ChainRecord {
    pub fn new(sequence: String, coords: Vec<[f64; 3]>) -> Result<Self> {
        let rec = Self { sequence, coords };
        rec.validate()?;
        Ok(rec)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !alphabet::is_canonical(&self.sequence) {
            return Err(Error::Validation(format!("non-canonical residue in {:?}", self.sequence)));
        }
        if self.sequence.len() != self.coords.len() {
            return Err(Error::Validation(format!(
                "sequence length {} but {} coordinates",
                self.sequence.len(),
                self.coords.len()
            )));
        }
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite coordinate".into()));
        }
        Ok(())
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.coords {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.coords.len().max(1) as f64;
        c.map(|v| v / n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexRecord {
    pub id: String,
    /// Free-form provenance (entry id and chain ids for curated records).
    pub source: Option<String>,
    pub target: ChainRecord,
    pub binder: ChainRecord,
    pub cluster: Option<String>,
}

impl ComplexRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(char::is_whitespace) {
            return Err(Error::Validation(format!("record id {:?} must be a non-empty token", self.id)));
        }
        self.target.validate()?;
        self.binder.validate()?;
        Ok(())
    }

    /// Total residue count, the unit of the training batch budget.
    pub fn tokens(&self) -> usize {
        self.target.len() + self.binder.len()
    }
}

fn write_chain(out: &mut String, tag: &str, chain: &ChainRecord) {
    let _ = writeln!(out, "{tag} {}", chain.sequence);
    for p in &chain.coords {
        let _ = writeln!(out, "{tag}X {:.3} {:.3} {:.3}", p[0], p[1], p[2]);
    }
}

pub fn write_records(records: &[ComplexRecord]) -> String {
    let mut out = String::new();
    for r in records {
        match &r.source {
            Some(s) => {
                let _ = writeln!(out, "#complex {} {s}", r.id);
            }
            None => {
                let _ = writeln!(out, "#complex {}", r.id);
            }
        }
        write_chain(&mut out, "T", &r.target);
        write_chain(&mut out, "B", &r.binder);
    }
    out
}

#[derive(Default)]
struct Partial {
    id: String,
    source: Option<String>,
    header_line: usize,
    t_seq: Option<String>,
    t_xyz: Vec<[f64; 3]>,
    b_seq: Option<String>,
    b_xyz: Vec<[f64; 3]>,
}

impl Partial {
    fn finish(self) -> Result<ComplexRecord> {
        let line = self.header_line;
        let missing = |what: &str| Error::Parse { line, msg: format!("record {} has no {what} line", self.id) };
        let target = ChainRecord { sequence: self.t_seq.clone().ok_or_else(|| missing("T"))?, coords: self.t_xyz };
        let binder = ChainRecord { sequence: self.b_seq.clone().ok_or_else(|| missing("B"))?, coords: self.b_xyz };
        let rec = ComplexRecord { id: self.id, source: self.source, target, binder, cluster: None };
        rec.validate().map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        Ok(rec)
    }
}

fn parse_xyz(rest: &str, line: usize) -> Result<[f64; 3]> {
    let vals: Vec<f64> = rest
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse { line, msg: format!("bad coordinate: {e}") })?;
    match vals.as_slice() {
        [x, y, z] if vals.iter().all(|v| v.is_finite()) => Ok([*x, *y, *z]),
        _ => Err(Error::Parse { line, msg: "expected three finite coordinates".into() }),
    }
}

pub fn parse_records(text: &str) -> Result<Vec<ComplexRecord>> {
    let mut out = Vec::new();
    let mut cur: Option<Partial> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim_end();
        if l.trim().is_empty() {
            continue;
        }
        if let Some(rest) = l.strip_prefix("#complex") {
            if let Some(p) = cur.take() {
                out.push(p.finish()?);
            }
            let rest = rest.trim();
            let (id, source) = match rest.split_once(char::is_whitespace) {
                Some((id, s)) => (id.to_string(), Some(s.trim().to_string())),
                None => (rest.to_string(), None),
            };
            if id.is_empty() {
                return Err(Error::Parse { line, msg: "missing record id".into() });
            }
            cur = Some(Partial { id, source, header_line: line, ..Default::default() });
            continue;
        }
        let p = cur.as_mut().ok_or_else(|| Error::Parse { line, msg: "data before the first #complex header".into() })?;
        let (tag, rest) = l.split_once(' ').unwrap_or((l, ""));
        match tag {
            "T" if p.t_seq.is_none() => p.t_seq = Some(rest.trim().to_string()),
            "B" if p.b_seq.is_none() && p.t_seq.is_some() => p.b_seq = Some(rest.trim().to_string()),
            "TX" if p.b_seq.is_none() && p.t_seq.is_some() => p.t_xyz.push(parse_xyz(rest, line)?),
            "BX" if p.b_seq.is_some() => p.b_xyz.push(parse_xyz(rest, line)?),
            _ => return Err(Error::Parse { line, msg: format!("unexpected line {l:?}") }),
        }
    }
    if let Some(p) = cur.take() {
        out.push(p.finish()?);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<ComplexRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text)
}

pub fn save_records(path: &Path, records: &[ComplexRecord]) -> Result<()> {
    std::fs::write(path, write_records(records)).map_err(|e| Error::io(path, e))
}

/// A complex in model units: target centroid at the origin, lengths divided
/// by `s_norm`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedComplex<S> {
    pub id: String,
    pub target_seq: Vec<usize>,
    pub target_coords: Mat<S>,
    pub binder_seq: Vec<usize>,
    pub binder_coords: Mat<S>,
    pub centroid: [f64; 3],
    pub s_norm: f64,
}

pub fn normalize_chain<S: Scalar>(coords: &[[f64; 3]], centroid: [f64; 3], s_norm: f64) -> Mat<S> {
    let data = coords.iter().flat_map(|p| (0..3).map(move |k| S::lit((p[k] - centroid[k]) / s_norm))).collect();
    Mat::from_vec(coords.len(), 3, data)
}

pub fn denormalize_chain<S: Scalar>(coords: &Mat<S>, centroid: [f64; 3], s_norm: f64) -> Vec<[f64; 3]> {
    (0..coords.rows())
        .map(|i| {
            let r = coords.row(i);
            [0, 1, 2].map(|k| r[k].to_f64_lossy() * s_norm + centroid[k])
        })
        .collect()
}

impl<S: Scalar> NormalizedComplex<S> {
    pub fn from_record(rec: &ComplexRecord, s_norm: f64) -> Result<Self> {
        if !(s_norm > 0.0) {
            return Err(Error::Config(format!("s_norm must be positive, got {s_norm}")));
        }
        let enc = |s: &str| alphabet::encode(s).ok_or_else(|| Error::Validation(format!("non-canonical sequence {s:?}")));
        let centroid = rec.target.centroid();
        Ok(Self {
            id: rec.id.clone(),
            target_seq: enc(&rec.target.sequence)?,
            target_coords: normalize_chain(&rec.target.coords, centroid, s_norm),
            binder_seq: enc(&rec.binder.sequence)?,
            binder_coords: normalize_chain(&rec.binder.coords, centroid, s_norm),
            centroid,
            s_norm,
        })
    }

    pub fn target_state(&self) -> SequenceState<S> {
        SequenceState::from_indices(&self.target_seq, alphabet::K)
    }

    pub fn binder_state(&self) -> SequenceState<S> {
        SequenceState::from_indices(&self.binder_seq, alphabet::K)
    }

    pub fn tokens(&self) -> usize {
        self.target_seq.len() + self.binder_seq.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ComplexRecord {
        ComplexRecord {
            id: "x_A_B".into(),
            source: Some("x A B".into()),
            target: ChainRecord::new("AC".into(), vec![[1.0, 2.0, 3.0], [-1.25, 0.5, 7.125]]).unwrap(),
            binder: ChainRecord::new("W".into(), vec![[0.0, 0.0, -3.5]]).unwrap(),
            cluster: None,
        }
    }

    #[test]
    fn round_trip() {
        let text = write_records(&[sample(), ComplexRecord { id: "y".into(), source: None, ..sample() }]);
        let back = parse_records(&text).unwrap();
        assert_eq!(back[0], sample());
        assert_eq!(back[1].source, None);
        assert_eq!(write_records(&back), text);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "#complex a\nT AC\nTX 1 2 3\nTX 1 2 zz\n";
        assert!(matches!(parse_records(text), Err(Error::Parse { line: 4, .. })));
        let text = "#complex a\nT AC\nTX 1 2 3\nB A\nBX 0 0 0\n";
        assert!(matches!(parse_records(text), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn normalization_inverts() {
        let rec = sample();
        let n = NormalizedComplex::<f64>::from_record(&rec, 10.0).unwrap();
        let back = denormalize_chain(&n.binder_coords, n.centroid, 10.0);
        for k in 0..3 {
            assert!((back[0][k] - rec.binder.coords[0][k]).abs() < 1e-12);
        }
        let c: f64 = (0..2).map(|i| n.target_coords[(i, 0)]).sum();
        assert!(c.abs() < 1e-12);
    }
}
