//! Structure-file parsing, quality filtering, interface extraction,
//! pseudo-complexes, cluster splits and the synthetic toy corpus.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::alphabet;
use crate::error::{Error, Result};
use crate::record::{ChainRecord, ComplexRecord};
use crate::rng::{substream, Purpose};
use crate::spatial::{count_within, min_distance_within};

pub const MAX_RESOLUTION: f64 = 9.0;
pub const MAX_CA_GAP: f64 = 10.0;
pub const MIN_RESOLVED: usize = 4;
pub const CLASH_DISTANCE: f64 = 1.7;
pub const CLASH_FRACTION: f64 = 0.30;
pub const INTERFACE_DISTANCE: f64 = 5.0;
pub const PSEUDO_MIN_LENGTH: usize = 60;
pub const PSEUDO_CONTACT: f64 = 5.0;
/// Minimum `j − i` for a contact to anchor a pseudo-complex split; closer
/// pairs are backbone neighbours rather than tertiary contacts.
pub const PSEUDO_MIN_SEPARATION: usize = 6;

/// One ATOM line after column decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomRecord {
    pub chain: String,
    pub res_seq: i32,
    pub icode: char,
    pub res_name: String,
    pub atom_name: String,
    pub position: [f64; 3],
    pub occupancy: f64,
    pub altloc: Option<char>,
    pub element: String,
}

impl AtomRecord {
    pub fn is_hydrogen(&self) -> bool {
        matches!(self.element.as_str(), "H" | "D")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residue {
    pub res_seq: i32,
    pub icode: char,
    pub name: String,
    /// One-letter code, `None` for residues outside the canonical table.
    pub code: Option<char>,
    pub ca: Option<[f64; 3]>,
    pub heavy_atoms: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub id: String,
    pub residues: Vec<Residue>,
}

impl Chain {
    pub fn resolved(&self) -> impl Iterator<Item = &Residue> {
        self.residues.iter().filter(|r| r.ca.is_some())
    }

    pub fn heavy_atoms(&self) -> Vec<[f64; 3]> {
        self.residues.iter().flat_map(|r| r.heavy_atoms.iter().copied()).collect()
    }

    /// Sequence and Cα trace of the resolved residues.
    pub fn to_record(&self) -> Option<ChainRecord> {
        let mut seq = String::new();
        let mut coords = Vec::new();
        for r in self.resolved() {
            seq.push(r.code?);
            coords.push(r.ca?);
        }
        Some(ChainRecord { sequence: seq, coords })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureEntry {
    pub id: String,
    pub resolution: Option<f64>,
    pub chains: Vec<Chain>,
}

fn field(line: &str, start: usize, end: usize) -> &str {
    // Columns are 1-based and inclusive; short lines yield empty fields.
    let s = start - 1;
    if s >= line.len() {
        return "";
    }
    line.get(s..end.min(line.len())).unwrap_or("")
}

fn parse_num<T: std::str::FromStr>(line: &str, n: usize, start: usize, end: usize, what: &str) -> Result<T> {
    let raw = field(line, start, end).trim();
    raw.parse::<T>().map_err(|_| Error::Parse { line: n, msg: format!("bad {what} field {raw:?}") })
}

fn parse_atom(line: &str, n: usize) -> Result<AtomRecord> {
    if !line.is_ascii() {
        return Err(Error::Parse { line: n, msg: "non-ASCII ATOM record".into() });
    }
    if line.len() < 54 {
        return Err(Error::Parse { line: n, msg: format!("ATOM record has {} columns, need 54", line.len()) });
    }
    let x = parse_num::<f64>(line, n, 31, 38, "x")?;
    let y = parse_num::<f64>(line, n, 39, 46, "y")?;
    let z = parse_num::<f64>(line, n, 47, 54, "z")?;
    if ![x, y, z].iter().all(|v| v.is_finite()) {
        return Err(Error::Parse { line: n, msg: "non-finite coordinate".into() });
    }
    let occ = field(line, 55, 60).trim();
    let occupancy = if occ.is_empty() {
        1.0
    } else {
        occ.parse::<f64>().map_err(|_| Error::Parse { line: n, msg: format!("bad occupancy field {occ:?}") })?
    };
    let atom_name = field(line, 13, 16).trim().to_string();
    let element = match field(line, 77, 78).trim() {
        "" => atom_name.chars().find(|c| c.is_ascii_alphabetic()).map(|c| c.to_string()).unwrap_or_default(),
        e => e.to_ascii_uppercase(),
    };
    let alt = field(line, 17, 17).chars().next().filter(|c| *c != ' ');
    Ok(AtomRecord {
        chain: field(line, 22, 22).trim().to_string(),
        res_seq: parse_num::<i32>(line, n, 23, 26, "residue number")?,
        icode: field(line, 27, 27).chars().next().unwrap_or(' '),
        res_name: field(line, 18, 20).trim().to_string(),
        atom_name,
        position: [x, y, z],
        occupancy,
        altloc: alt,
        element,
    })
}

fn parse_resolution(line: &str) -> Option<f64> {
    let rest = line.split_once("RESOLUTION.")?.1;
    rest.split_whitespace().next()?.parse::<f64>().ok()
}

/// Parses the ATOM / REMARK 2 subset of a legacy fixed-column structure file.
/// Only the first model is read; HETATM records (including waters) are
/// ignored; for alternate locations the highest-occupancy copy of each atom
/// is kept (first seen on ties).
pub fn parse_structure(text: &str, id: &str) -> Result<StructureEntry> {
    if text.trim().is_empty() {
        return Err(Error::EmptyEntry(format!("{id}: empty structure file")));
    }
    let mut resolution = None;
    let mut atoms: Vec<AtomRecord> = Vec::new();
    let mut slot: HashMap<(String, i32, char, String), usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let record = field(line, 1, 6);
        match record.trim_end() {
            "REMARK" if field(line, 7, 10).trim() == "2" && line.contains("RESOLUTION.") => {
                resolution = parse_resolution(line);
            }
            "ENDMDL" => break,
            "ATOM" => {
                let atom = parse_atom(line, n)?;
                let key = (atom.chain.clone(), atom.res_seq, atom.icode, atom.atom_name.clone());
                match slot.get(&key) {
                    Some(&k) => {
                        if atom.occupancy > atoms[k].occupancy {
                            atoms[k] = atom;
                        }
                    }
                    None => {
                        slot.insert(key, atoms.len());
                        atoms.push(atom);
                    }
                }
            }
            _ => {}
        }
    }

    let mut chains: Vec<Chain> = Vec::new();
    for atom in atoms {
        let ci = match chains.iter().position(|c| c.id == atom.chain) {
            Some(ci) => ci,
            None => {
                chains.push(Chain { id: atom.chain.clone(), residues: Vec::new() });
                chains.len() - 1
            }
        };
        let chain = &mut chains[ci];
        let ri = match chain.residues.iter().rposition(|r| r.res_seq == atom.res_seq && r.icode == atom.icode) {
            Some(ri) => ri,
            None => {
                chain.residues.push(Residue {
                    res_seq: atom.res_seq,
                    icode: atom.icode,
                    name: atom.res_name.clone(),
                    code: alphabet::three_to_one(&atom.res_name),
                    ca: None,
                    heavy_atoms: Vec::new(),
                });
                chain.residues.len() - 1
            }
        };
        let res = &mut chain.residues[ri];
        if atom.atom_name == "CA" {
            res.ca = Some(atom.position);
        }
        if !atom.is_hydrogen() {
            res.heavy_atoms.push(atom.position);
        }
    }
    if chains.is_empty() {
        return Err(Error::EmptyEntry(format!("{id}: no ATOM records")));
    }
    Ok(StructureEntry { id: id.to_string(), resolution, chains })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Reason {
    /// Entry resolution worse than 9 Å.
    Resolution,
    /// No resolution reported; the entry is kept.
    ResolutionUnknown,
    UnknownResidue,
    CaGap,
    TooShort,
    Clash,
}

impl Reason {
    pub fn code(self) -> &'static str {
        match self {
            Reason::Resolution => "resolution",
            Reason::ResolutionUnknown => "resolution-unknown",
            Reason::UnknownResidue => "unknown-residue",
            Reason::CaGap => "ca-gap",
            Reason::TooShort => "too-short",
            Reason::Clash => "clash",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One line of the rejection log; `chain` is `-` for whole-entry decisions.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Rejection {
    pub entry: String,
    pub chain: String,
    pub reason: Reason,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.entry, self.chain, self.reason)
    }
}

fn max_ca_gap(chain: &Chain) -> f64 {
    let cas: Vec<[f64; 3]> = chain.resolved().filter_map(|r| r.ca).collect();
    cas.windows(2)
        .map(|w| (0..3).map(|k| (w[0][k] - w[1][k]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Resolution, unknown-residue, Cα-gap and length filters, in that order.
pub fn apply_quality_filters(entry: &StructureEntry) -> (Vec<Chain>, Vec<Rejection>) {
    let mut log = Vec::new();
    let reject = |chain: &str, reason| Rejection { entry: entry.id.clone(), chain: chain.to_string(), reason };
    match entry.resolution {
        Some(r) if r > MAX_RESOLUTION => {
            log.push(reject("-", Reason::Resolution));
            return (Vec::new(), log);
        }
        None => log.push(reject("-", Reason::ResolutionUnknown)),
        _ => {}
    }
    let mut kept = Vec::new();
    for chain in &entry.chains {
        let reason = if chain.residues.iter().any(|r| r.code.is_none()) {
            Some(Reason::UnknownResidue)
        } else if max_ca_gap(chain) > MAX_CA_GAP {
            Some(Reason::CaGap)
        } else if chain.resolved().count() < MIN_RESOLVED {
            Some(Reason::TooShort)
        } else {
            None
        };
        match reason {
            Some(r) => log.push(reject(&chain.id, r)),
            None => kept.push(chain.clone()),
        }
    }
    (kept, log)
}

/// Fraction of `a`'s heavy atoms within the clash distance of any atom of `b`.
pub fn clash_fraction(a: &Chain, b: &Chain) -> f64 {
    let atoms = a.heavy_atoms();
    if atoms.is_empty() {
        return 0.0;
    }
    count_within(&atoms, &b.heavy_atoms(), CLASH_DISTANCE) as f64 / atoms.len() as f64
}

/// Indices of chains removed by the clash rules. Pairs are visited in index
/// order; a pair is skipped once either chain is already removed.
pub fn detect_clashes(chains: &[Chain]) -> Vec<usize> {
    let counts: Vec<usize> = chains.iter().map(|c| c.heavy_atoms().len()).collect();
    let mut removed = vec![false; chains.len()];
    for i in 0..chains.len() {
        for j in i + 1..chains.len() {
            if removed[i] || removed[j] {
                continue;
            }
            let fi = clash_fraction(&chains[i], &chains[j]);
            let fj = clash_fraction(&chains[j], &chains[i]);
            let victim = match (fi > CLASH_FRACTION, fj > CLASH_FRACTION) {
                (false, false) => continue,
                (true, false) => i,
                (false, true) => j,
                (true, true) => {
                    if fi != fj {
                        if fi > fj { i } else { j }
                    } else if counts[i] != counts[j] {
                        if counts[i] < counts[j] { i } else { j }
                    } else if chains[i].id > chains[j].id {
                        i
                    } else {
                        j
                    }
                }
            };
            removed[victim] = true;
        }
    }
    (0..chains.len()).filter(|&k| removed[k]).collect()
}

/// Minimum heavy-atom distance between two chains when below `cutoff`.
pub fn min_heavy_atom_distance(a: &Chain, b: &Chain, cutoff: f64) -> Option<f64> {
    min_distance_within(&a.heavy_atoms(), &b.heavy_atoms(), cutoff)
}

/// Both orientations of every chain pair whose minimum heavy-atom distance is
/// below 5 Å.
pub fn extract_interface_pairs(entry_id: &str, chains: &[Chain]) -> Vec<ComplexRecord> {
    let mut out = Vec::new();
    for i in 0..chains.len() {
        for j in i + 1..chains.len() {
            match min_heavy_atom_distance(&chains[i], &chains[j], INTERFACE_DISTANCE) {
                Some(d) if d < INTERFACE_DISTANCE => {}
                _ => continue,
            }
            let (Some(a), Some(b)) = (chains[i].to_record(), chains[j].to_record()) else { continue };
            for (t, bd, tc, bc) in [(&a, &b, &chains[i].id, &chains[j].id), (&b, &a, &chains[j].id, &chains[i].id)] {
                out.push(ComplexRecord {
                    id: format!("{entry_id}_{tc}_{bc}"),
                    source: Some(format!("{entry_id} {tc} {bc}")),
                    target: t.clone(),
                    binder: bd.clone(),
                    cluster: None,
                });
            }
        }
    }
    out
}

/// Result of curating one entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curated {
    pub complexes: Vec<ComplexRecord>,
    pub rejections: Vec<Rejection>,
}

/// Filters, clash removal and interface extraction for one entry.
pub fn curate_entry(entry: &StructureEntry) -> Curated {
    let (mut chains, mut rejections) = apply_quality_filters(entry);
    let removed = detect_clashes(&chains);
    for &k in removed.iter().rev() {
        let c = chains.remove(k);
        rejections.push(Rejection { entry: entry.id.clone(), chain: c.id, reason: Reason::Clash });
    }
    Curated { complexes: extract_interface_pairs(&entry.id, &chains), rejections }
}

/// Splits a long monomer at its first tertiary contact into target `[1..i]`
/// and binder `[j..n]`.
pub fn make_pseudo_complex(entry_id: &str, chain: &Chain) -> Option<ComplexRecord> {
    let rec = chain.to_record()?;
    let n = rec.len();
    if n <= PSEUDO_MIN_LENGTH {
        return None;
    }
    let d = |a: usize, b: usize| (0..3).map(|k| (rec.coords[a][k] - rec.coords[b][k]).powi(2)).sum::<f64>().sqrt();
    // 1-based i, j: target is the first i residues, binder the last n − j + 1.
    for i in MIN_RESOLVED..=n {
        for j in (i + PSEUDO_MIN_SEPARATION)..=n {
            if n + 1 - j < MIN_RESOLVED {
                break;
            }
            if d(i - 1, j - 1) < PSEUDO_CONTACT {
                let split = |lo: usize, hi: usize| ChainRecord {
                    sequence: rec.sequence[lo..hi].to_string(),
                    coords: rec.coords[lo..hi].to_vec(),
                };
                return Some(ComplexRecord {
                    id: format!("{entry_id}_{}_pseudo", chain.id),
                    source: Some(format!("{entry_id} {} {i}:{j}", chain.id)),
                    target: split(0, i),
                    binder: split(j - 1, n),
                    cluster: None,
                });
            }
        }
    }
    None
}

/// Parses `sequence-hash<TAB>cluster-id` lines.
pub fn parse_cluster_file(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (h, c) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected sequence-hash<TAB>cluster-id".into() })?;
        out.insert(h.trim().to_string(), c.trim().to_string());
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<ComplexRecord>,
    pub valid: Vec<ComplexRecord>,
    pub test: Vec<ComplexRecord>,
}

/// Cluster-level split. Records are keyed by the hash of their binder
/// sequence; clusters are shuffled with `seed` and dealt out by `ratios`.
pub fn split_by_cluster(
    records: &[ComplexRecord],
    clusters: &HashMap<String, String>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Split> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let mut by_cluster: BTreeMap<String, Vec<ComplexRecord>> = BTreeMap::new();
    for r in records {
        let h = alphabet::sequence_hash(&r.binder.sequence);
        let c = clusters
            .get(&h)
            .ok_or_else(|| Error::Config(format!("record {}: sequence hash {h} missing from cluster file", r.id)))?;
        let mut r = r.clone();
        r.cluster = Some(c.clone());
        by_cluster.entry(c.clone()).or_default().push(r);
    }
    let mut ids: Vec<String> = by_cluster.keys().cloned().collect();
    ids.shuffle(&mut substream(seed, Purpose::Split, 0));
    let total: f64 = ratios.iter().sum();
    let n = ids.len();
    let n_train = ((n as f64) * ratios[0] / total).round() as usize;
    let n_valid = (((n as f64) * ratios[1] / total).round() as usize).min(n - n_train.min(n));
    let mut split = Split::default();
    for (k, id) in ids.iter().enumerate() {
        let dest = if k < n_train {
            &mut split.train
        } else if k < n_train + n_valid {
            &mut split.valid
        } else {
            &mut split.test
        };
        dest.extend(by_cluster.remove(id).unwrap_or_default());
    }
    Ok(split)
}

/// The toy corpus's substitution cipher: index `i` maps to `K − 1 − i`.
pub fn toy_cipher_index(i: usize) -> usize {
    alphabet::K - 1 - i
}

pub fn toy_cipher(seq: &str) -> String {
    seq.chars()
        .map(|c| alphabet::code_of(toy_cipher_index(alphabet::index_of(c).expect("canonical sequence"))))
        .collect()
}

/// Half the target-binder gap of the toy corpus, in Å.
const TOY_HALF_GAP: f64 = 3.0;
const CA_SPACING: f64 = 3.8;

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Synthetic mirrored-motif complexes. Targets are persistent random walks
/// with 3.8 Å steps; the binder is the target's image in a plane placed 3 Å
/// beyond the target's extreme point (so the chains are 6 Å apart at their
/// closest) carrying the ciphered target sequence.
pub fn synth_toy_dataset(count: usize, lengths: (usize, usize), seed: u64) -> Result<Vec<ComplexRecord>> {
    let (lo, hi) = lengths;
    if count == 0 || lo == 0 || lo > hi {
        return Err(Error::Config(format!("toy corpus needs count >= 1 and 1 <= min <= max, got {count}, {lengths:?}")));
    }
    let mut out = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rng = substream(seed, Purpose::Toy, idx as u64);
        let len = rng.gen_range(lo..=hi);
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let mut dir = unit([normal(), normal(), normal()]);
        let mut pos = [0.0f64; 3];
        let mut coords = Vec::with_capacity(len);
        for _ in 0..len {
            coords.push(pos);
            let kick = [normal(), normal(), normal()];
            dir = unit([0, 1, 2].map(|k| dir[k] + 0.6 * kick[k]));
            pos = [0, 1, 2].map(|k| pos[k] + CA_SPACING * dir[k]);
        }
        let c = {
            let mut c = [0.0; 3];
            for p in &coords {
                for k in 0..3 {
                    c[k] += p[k] / len as f64;
                }
            }
            c
        };
        let target_xyz: Vec<[f64; 3]> = coords.iter().map(|p| [0, 1, 2].map(|k| round3(p[k] - c[k]))).collect();
        let n = unit([normal(), normal(), normal()]);
        let far = target_xyz.iter().map(|p| p[0] * n[0] + p[1] * n[1] + p[2] * n[2]).fold(f64::NEG_INFINITY, f64::max);
        let plane = far + TOY_HALF_GAP;
        let binder_xyz = target_xyz
            .iter()
            .map(|p| {
                let s = 2.0 * (p[0] * n[0] + p[1] * n[1] + p[2] * n[2] - plane);
                [0, 1, 2].map(|k| round3(p[k] - s * n[k]))
            })
            .collect();
        let seq: String = (0..len).map(|_| alphabet::code_of(rng.gen_range(0..alphabet::K))).collect();
        out.push(ComplexRecord {
            id: format!("toy{idx:05}"),
            source: None,
            binder: ChainRecord { sequence: toy_cipher(&seq), coords: binder_xyz },
            target: ChainRecord { sequence: seq, coords: target_xyz },
            cluster: None,
        });
    }
    Ok(out)
}

pub const TOY_TRAIN: usize = 500;
pub const TOY_HELD_OUT: usize = 50;
pub const TOY_LENGTHS: (usize, usize) = (12, 24);

/// The standard toy corpus: `TOY_TRAIN` training complexes followed by a
/// disjoint set of `TOY_HELD_OUT` held-out ones, all from one seed.
pub fn toy_corpus(seed: u64) -> Result<(Vec<ComplexRecord>, Vec<ComplexRecord>)> {
    let mut all = synth_toy_dataset(TOY_TRAIN + TOY_HELD_OUT, TOY_LENGTHS, seed)?;
    let held = all.split_off(TOY_TRAIN);
    Ok((all, held))
}
