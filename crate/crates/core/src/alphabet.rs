//! The 20-letter residue alphabet, in alphabetical order of one-letter codes.

use sha2::{Digest, Sha256};

pub const ALPHABET: &str = "ACDEFGHIKLMNPQRSTVWY";
pub const K: usize = 20;

const THREE_LETTER: [(&str, char); 20] = [
    ("ALA", 'A'),
    ("CYS", 'C'),
    ("ASP", 'D'),
    ("GLU", 'E'),
    ("PHE", 'F'),
    ("GLY", 'G'),
    ("HIS", 'H'),
    ("ILE", 'I'),
    ("LYS", 'K'),
    ("LEU", 'L'),
    ("MET", 'M'),
    ("ASN", 'N'),
    ("PRO", 'P'),
    ("GLN", 'Q'),
    ("ARG", 'R'),
    ("SER", 'S'),
    ("THR", 'T'),
    ("VAL", 'V'),
    ("TRP", 'W'),
    ("TYR", 'Y'),
];

pub fn index_of(code: char) -> Option<usize> {
    ALPHABET.find(code.to_ascii_uppercase())
}

pub fn code_of(index: usize) -> char {
    ALPHABET.as_bytes()[index] as char
}

pub fn three_to_one(name: &str) -> Option<char> {
    let name = name.trim();
    THREE_LETTER.iter().find(|(three, _)| three.eq_ignore_ascii_case(name)).map(|&(_, c)| c)
}

pub fn one_to_three(code: char) -> Option<&'static str> {
    THREE_LETTER.iter().find(|&&(_, c)| c == code).map(|&(t, _)| t)
}

/// Encodes a sequence as alphabet indices; `None` if any letter is outside the alphabet.
pub fn encode(seq: &str) -> Option<Vec<usize>> {
    seq.chars().map(index_of).collect()
}

pub fn decode(indices: &[usize]) -> String {
    indices.iter().map(|&i| code_of(i)).collect()
}

pub fn is_canonical(seq: &str) -> bool {
    seq.chars().all(|c| ALPHABET.contains(c))
}

/// Short hash of the alphabet table; checkpoints refuse to load when it differs.
pub fn alphabet_hash() -> String {
    let digest = Sha256::digest(ALPHABET.as_bytes());
    hex::encode(&digest[..8])
}

/// Full SHA-256 hex digest of a sequence, as used by cluster files.
pub fn sequence_hash(seq: &str) -> String {
    hex::encode(Sha256::digest(seq.as_bytes()))
}
