#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

pub struct Res {
    pub name: &'static str,
    pub atoms: Vec<(&'static str, [f64; 3])>,
}

/// Straight Cα trace of `n` alanines from `origin` in steps of `step`.
pub fn line(n: usize, origin: [f64; 3], step: [f64; 3]) -> Vec<Res> {
    (0..n)
        .map(|i| Res { name: "ALA", atoms: vec![("CA", [0, 1, 2].map(|k| origin[k] + step[k] * i as f64))] })
        .collect()
}

/// Chains `A` and `B` parallel along y; `B` is shifted by `shift` residues
/// and offset by `dz` in z.
pub fn clash_pair(na: usize, nb: usize, shift: usize, dz: f64) -> Vec<(&'static str, Vec<Res>)> {
    let b = (0..nb).map(|i| Res { name: "ALA", atoms: vec![("CA", [0.0, 3.8 * (i + shift) as f64, dz])] }).collect();
    vec![("A", line(na, [0.0; 3], [0.0, 3.8, 0.0])), ("B", b)]
}

pub fn pdb(resolution: Option<f64>, chains: &[(&str, Vec<Res>)]) -> String {
    let mut out = String::new();
    if let Some(r) = resolution {
        let _ = writeln!(out, "REMARK   2 RESOLUTION.    {r:.2} ANGSTROMS.");
    }
    let mut serial = 1;
    for (id, residues) in chains {
        for (i, r) in residues.iter().enumerate() {
            for (name, p) in &r.atoms {
                let _ = writeln!(
                    out,
                    "ATOM  {serial:>5} {name:<4} {:>3} {id}{:>4}    {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}          {:>2}",
                    r.name,
                    i + 1,
                    p[0],
                    p[1],
                    p[2],
                    1.0,
                    20.0,
                    &name[..1]
                );
                serial += 1;
            }
        }
    }
    out.push_str("END\n");
    out
}

/// Writes one clean two-chain entry, one with a Cα gap and one clashing pair.
pub fn write_curation_fixtures(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let clean = vec![("A", line(6, [0.0; 3], [0.0, 3.8, 0.0])), ("B", line(6, [4.0, 0.0, 0.0], [0.0, 3.8, 0.0]))];
    std::fs::write(dir.join("1cln.pdb"), pdb(Some(2.1), &clean)).unwrap();
    let mut gapped = line(3, [0.0; 3], [0.0, 3.5, 0.0]);
    gapped.extend(line(3, [0.0, 18.0, 0.0], [0.0, 3.5, 0.0]));
    let gap = vec![("A", gapped), ("B", line(6, [4.0, 0.0, 0.0], [0.0, 3.5, 0.0]))];
    std::fs::write(dir.join("2gap.pdb"), pdb(Some(2.5), &gap)).unwrap();
    std::fs::write(dir.join("3cls.pdb"), pdb(Some(3.0), &clash_pair(6, 6, 3, 1.0))).unwrap();
}

/// A monomer of 61 residues folded into a hairpin (first contact at 4/10).
pub fn write_monomer(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let mut residues = line(6, [0.0; 3], [0.0, 3.8, 0.0]);
    residues.extend(line(55, [3.0, 19.0, 0.0], [0.0, -3.8, 0.0]));
    std::fs::write(dir.join("4mon.pdb"), pdb(Some(1.8), &[("A", residues)])).unwrap();
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_binderdiff"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn binderdiff")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A tiny run configuration that trains in seconds.
pub const TINY_CONFIG: &str = "\
seed = 3

[denoiser]
d_model = 8
blocks = 1
attn_layers = 1
causal_layers = 1
heads = 2
k_nn = 4
steps = 20

[train]
steps = 6
warmup = 2
batch_tokens = 48
w_ce = 0.01
";
