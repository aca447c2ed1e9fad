//! k-nearest-neighbour queries over small point sets.
//!
//! Neighbours are ordered by `(squared distance, index)`, which makes the
//! neighbour set unique even when distances tie.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::linalg::Mat;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

pub fn squared_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest other rows of `points` to row `i`, nearest first.
pub fn neighbors_of<S: Scalar>(points: &Mat<S>, i: usize, k: usize) -> Vec<usize> {
    // Bounded max-heap holding the k best candidates seen so far.
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    let pi = points.row(i);
    for j in 0..points.rows() {
        if j == i {
            continue;
        }
        let cand = Candidate { d2: squared_distance(pi, points.row(j)).to_f64_lossy(), index: j };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand < *worst {
                heap.pop();
                heap.push(cand);
            }
        }
    }
    heap.into_sorted_vec().into_iter().map(|c| c.index).collect()
}

/// Neighbour lists for every row; `k` must be smaller than the row count.
pub fn knn_graph<S: Scalar>(points: &Mat<S>, k: usize) -> Vec<Vec<usize>> {
    assert!(k < points.rows(), "k = {k} needs more than {} points", points.rows());
    (0..points.rows()).map(|i| neighbors_of(points, i, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_index() {
        let p = Mat::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert_eq!(neighbors_of(&p, 0, 2), vec![1, 2]);
        assert_eq!(neighbors_of(&p, 0, 3), vec![1, 2, 3]);
    }
}
