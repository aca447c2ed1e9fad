//! Evaluation metrics: recovery, diversity, novelty, success rates, score
//! files and a synthetic geometric scorer.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::record::ComplexRecord;

/// Fraction of positions where `a` and `b` agree.
pub fn amino_acid_recovery(a: &str, b: &str) -> Result<f64> {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    if a.len() != b.len() {
        return Err(Error::Contract(format!("sequence lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Contract("recovery of empty sequences is undefined".into()));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Mean `1 − AAR` over ordered pairs `i ≠ j` of the first `k` candidates.
pub fn diversity<T: AsRef<str>>(candidates: &[T], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Contract(format!("diversity needs k >= 2, got {k}")));
    }
    if candidates.len() < k {
        return Err(Error::Contract(format!("diversity over {k} candidates but only {} given", candidates.len())));
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                sum += 1.0 - amino_acid_recovery(candidates[i].as_ref(), candidates[j].as_ref())?;
            }
        }
    }
    Ok(sum / (k * (k - 1)) as f64)
}

/// Mean `1 − AAR` of the first `k` candidates against `reference`.
pub fn novelty<T: AsRef<str>>(candidates: &[T], reference: &str, k: usize) -> Result<f64> {
    if k == 0 || candidates.len() < k {
        return Err(Error::Contract(format!("novelty over {k} candidates but {} given", candidates.len())));
    }
    let mut sum = 0.0;
    for c in &candidates[..k] {
        sum += 1.0 - amino_acid_recovery(c.as_ref(), reference)?;
    }
    Ok(sum / k as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub iptm: f64,
    pub ptm: f64,
    pub pae: f64,
    pub plddt: f64,
}

impl ScoreRecord {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.iptm) || !unit(self.ptm) {
            return Err(Error::Validation(format!("{}: ipTM/pTM must lie in [0, 1]", self.id)));
        }
        if !(self.pae >= 0.0) || !self.pae.is_finite() {
            return Err(Error::Validation(format!("{}: PAE must be finite and >= 0", self.id)));
        }
        if !(0.0..=100.0).contains(&self.plddt) {
            return Err(Error::Validation(format!("{}: pLDDT must lie in [0, 100]", self.id)));
        }
        Ok(())
    }
}

impl fmt::Display for ScoreRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t{}", self.id, self.iptm, self.ptm, self.pae, self.plddt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuccessThresholds {
    pub iptm_min: f64,
    pub ptm_min: f64,
    pub pae_max: f64,
    pub plddt_min: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self { iptm_min: 0.8, ptm_min: 0.8, pae_max: 10.0, plddt_min: 80.0 }
    }
}

impl SuccessThresholds {
    /// All four thresholds, inclusive.
    pub fn passes(&self, s: &ScoreRecord) -> bool {
        s.iptm >= self.iptm_min && s.ptm >= self.ptm_min && s.pae <= self.pae_max && s.plddt >= self.plddt_min
    }
}

/// Descending pLDDT, ties by id ascending.
pub fn rank_by_plddt(scores: &[ScoreRecord]) -> Vec<ScoreRecord> {
    let mut out = scores.to_vec();
    out.sort_by(plddt_order);
    out
}

/// Pass fraction over the top `k` of each target's ranked list.
pub fn success_rate(ranked: &[(String, Vec<ScoreRecord>)], k: usize, th: &SuccessThresholds) -> Result<f64> {
    if ranked.is_empty() || k == 0 {
        return Err(Error::Contract("success rate needs at least one target and k >= 1".into()));
    }
    let mut hits = 0usize;
    for (target, list) in ranked {
        if list.len() < k {
            return Err(Error::Contract(format!("target {target}: {} scored candidates, need {k}", list.len())));
        }
        hits += list[..k].iter().filter(|s| th.passes(s)).count();
    }
    Ok(hits as f64 / (ranked.len() * k) as f64)
}

/// Fraction of candidates scoring strictly below their target's reference,
/// over the first `k` candidates of every target.
pub fn comparative_success_rate(per_target: &[(Vec<f64>, f64)], k: usize) -> Result<f64> {
    if per_target.is_empty() || k == 0 {
        return Err(Error::Contract("comparative success needs at least one target and k >= 1".into()));
    }
    let mut hits = 0usize;
    for (i, (scores, reference)) in per_target.iter().enumerate() {
        if scores.len() < k {
            return Err(Error::Contract(format!("target {i}: {} scores, need {k}", scores.len())));
        }
        hits += scores[..k].iter().filter(|&&s| s < *reference).count();
    }
    Ok(hits as f64 / (per_target.len() * k) as f64)
}

fn parse_fields(line: &str, n: usize, want: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != want {
        return Err(Error::Parse { line: n, msg: format!("expected {want} fields, got {}", f.len()) });
    }
    Ok(f)
}

fn parse_f64(s: &str, n: usize) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse { line: n, msg: format!("bad number {s:?}") })
}

/// Parses `id iptm ptm pae plddt` lines (tab or space separated).
pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f = parse_fields(line, n, 5)?;
        let rec = ScoreRecord {
            id: f[0].to_string(),
            iptm: parse_f64(f[1], n)?,
            ptm: parse_f64(f[2], n)?,
            pae: parse_f64(f[3], n)?,
            plddt: parse_f64(f[4], n)?,
        };
        rec.validate()?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Parse { line: n, msg: format!("duplicate candidate id {}", rec.id) });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text)
}

/// Parses `id score` lines.
pub fn parse_comparative(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f = parse_fields(line, n, 2)?;
        let v = parse_f64(f[1], n)?;
        if !v.is_finite() {
            return Err(Error::Validation(format!("line {n}: non-finite score")));
        }
        out.push((f[0].to_string(), v));
    }
    Ok(out)
}

/// Parses the single line an external scorer prints: `iptm ptm pae plddt`.
pub fn parse_scorer_output(id: &str, text: &str) -> Result<ScoreRecord> {
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let f = parse_fields(line, 1, 4)?;
    let rec = ScoreRecord {
        id: id.to_string(),
        iptm: parse_f64(f[0], 1)?,
        ptm: parse_f64(f[1], 1)?,
        pae: parse_f64(f[2], 1)?,
        plddt: parse_f64(f[3], 1)?,
    };
    rec.validate()?;
    Ok(rec)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

fn radius_of_gyration(xs: &[[f64; 3]]) -> f64 {
    let n = xs.len() as f64;
    let mut c = [0.0; 3];
    for p in xs {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    (xs.iter().map(|p| dist(p, &c).powi(2)).sum::<f64>() / n).sqrt()
}

/// Deterministic stand-in for a structure-prediction scorer, computed from
/// Cα geometry alone. It rewards inter-chain Cα contacts (< 8 Å), a binder
/// radius of gyration near the compact-chain value `2.2·N^0.38` Å, and
/// consecutive binder Cα spacing near 3.8 Å. Only useful for exercising the
/// evaluation pipeline; the numbers carry no structural meaning.
pub fn synthetic_score(rec: &ComplexRecord) -> ScoreRecord {
    let b = &rec.binder.coords;
    let t = &rec.target.coords;
    let n = b.len().max(1) as f64;
    let contacts = b.iter().filter(|p| t.iter().any(|q| dist(p, q) < 8.0)).count() as f64;
    let contact_frac = contacts / n;
    let rg_ideal = 2.2 * n.powf(0.38);
    let rg = if b.is_empty() { 0.0 } else { radius_of_gyration(b) };
    let rg_fit = (-((rg - rg_ideal) / rg_ideal).powi(2) * 4.0).exp();
    let bond_dev = if b.len() < 2 {
        0.0
    } else {
        b.windows(2).map(|w| (dist(&w[0], &w[1]) - 3.8).abs()).sum::<f64>() / (b.len() - 1) as f64
    };
    let bond_fit = (-bond_dev / 1.5).exp();
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let iptm = clamp(0.2 + 0.8 * contact_frac.sqrt() * rg_fit);
    let ptm = clamp(0.3 + 0.7 * rg_fit * bond_fit);
    let pae = 30.0 * (1.0 - 0.5 * (iptm + ptm)).clamp(0.0, 1.0) + 1.0;
    let plddt = clamp(0.25 + 0.75 * bond_fit * (0.5 + 0.5 * rg_fit)) * 100.0;
    ScoreRecord { id: rec.id.clone(), iptm, ptm, pae, plddt }
}

/// Per-k summary row of an evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKSummary {
    pub k: usize,
    pub iptm: f64,
    pub ptm: f64,
    pub pae: f64,
    pub plddt: f64,
    pub success: f64,
    /// `None` when undefined (k = 1).
    pub diversity: Option<f64>,
    pub novelty: f64,
    pub comparative: Option<f64>,
}

/// One target's candidates, ranked, with their sequences.
#[derive(Clone, Debug)]
pub struct TargetEval {
    pub target: String,
    pub reference_binder: String,
    pub ranked: Vec<ScoreRecord>,
    /// Binder sequences aligned with `ranked`.
    pub sequences: Vec<String>,
    /// Reference score for the comparative rate, with per-candidate scores
    /// aligned with `ranked`.
    pub comparative: Option<(f64, Vec<f64>)>,
}

pub fn summarize(targets: &[TargetEval], k: usize, th: &SuccessThresholds) -> Result<TopKSummary> {
    if targets.is_empty() {
        return Err(Error::Contract("no targets to summarize".into()));
    }
    let mut acc = [0.0f64; 4];
    let mut div = 0.0;
    let mut nov = 0.0;
    for te in targets {
        if te.ranked.len() < k {
            return Err(Error::Contract(format!("target {}: {} candidates, need {k}", te.target, te.ranked.len())));
        }
        for s in &te.ranked[..k] {
            acc[0] += s.iptm;
            acc[1] += s.ptm;
            acc[2] += s.pae;
            acc[3] += s.plddt;
        }
        if k >= 2 {
            div += diversity(&te.sequences, k)?;
        }
        nov += novelty(&te.sequences, &te.reference_binder, k)?;
    }
    let nt = targets.len() as f64;
    let denom = nt * k as f64;
    let ranked: Vec<(String, Vec<ScoreRecord>)> = targets.iter().map(|t| (t.target.clone(), t.ranked.clone())).collect();
    let comparative = if targets.iter().all(|t| t.comparative.is_some()) {
        let per: Vec<(Vec<f64>, f64)> =
            targets.iter().filter_map(|t| t.comparative.as_ref()).map(|(r, s)| (s.clone(), *r)).collect();
        Some(comparative_success_rate(&per, k)?)
    } else {
        None
    };
    Ok(TopKSummary {
        k,
        iptm: acc[0] / denom,
        ptm: acc[1] / denom,
        pae: acc[2] / denom,
        plddt: acc[3] / denom,
        success: success_rate(&ranked, k, th)?,
        diversity: (k >= 2).then_some(div / nt),
        novelty: nov / nt,
        comparative,
    })
}

/// The ranking order: descending pLDDT, then id ascending.
pub fn plddt_order(a: &ScoreRecord, b: &ScoreRecord) -> Ordering {
    b.plddt.total_cmp(&a.plddt).then_with(|| a.id.cmp(&b.id))
}
