//! Marginal inference on the assignment matrix: leading-eigenvector
//! marginals via power iteration, and an iterative Bayesian reweighting
//! refinement of the pairwise blocks.

use crate::probability::{
    assemble_assignment_matrix, AssignmentMatrix, PairBlock, PairProbMatrix, UnaryTable,
};
use crate::{Error, Result};

/// Power iteration stops when successive normalized iterates differ by less
/// than this in max-norm.
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITERS: usize = 1000;

/// Defaults for the reweighting loop.
pub const PGM_MAX_ROUNDS: usize = 10;
pub const PGM_TOL: f64 = 1e-4;

/// Hard label of one superpixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Foreground,
    Background,
}

/// Per-superpixel `[p(F), p(B)]` marginals, each row summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalTable {
    pub rows: Vec<[f64; 2]>,
}

/// Leading eigenvector by power iteration from the all-ones vector. The
/// matrix is entrywise nonnegative, so the iterates stay nonnegative and the
/// limit is the Perron vector. Returns a unit vector (or the start vector
/// when the matrix annihilates it).
pub fn power_iteration(m: &AssignmentMatrix) -> Vec<f64> {
    let dim = m.dim();
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut next = vec![0.0; dim];
    for _ in 0..POWER_MAX_ITERS {
        m.matvec(&v, &mut next);
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let mut diff = 0.0f64;
        for (n, old) in next.iter_mut().zip(&v) {
            *n /= norm;
            diff = diff.max((*n - old).abs());
        }
        std::mem::swap(&mut v, &mut next);
        if diff < POWER_TOL {
            break;
        }
    }
    v
}

/// Spectral marginals: the leading eigenvector, renormalized per superpixel
/// pair of slots. A zero pair falls back to `[0.5, 0.5]`.
pub fn sgm_marginals(m: &AssignmentMatrix) -> Result<MarginalTable> {
    if m.dim() % 2 != 0 {
        return Err(Error::InvalidInput(
            "assignment matrix needs an even dimension".into(),
        ));
    }
    m.validate_nonnegative()?;
    let v = power_iteration(m);
    let mut rows = Vec::with_capacity(m.dim() / 2);
    for i in 0..m.dim() / 2 {
        let (f, b) = (v[2 * i], v[2 * i + 1]);
        let s = f + b;
        if s <= 0.0 {
            rows.push([0.5, 0.5]);
        } else {
            let pf = f / s;
            rows.push([pf, 1.0 - pf]);
        }
    }
    Ok(MarginalTable { rows })
}

/// One Bayesian reweighting step: every stored block entry is multiplied by
/// the two matching marginals from the previous round and the block is
/// renormalized to sum 1. A block whose mass vanishes resets to its original
/// value.
fn reweight(original: &PairProbMatrix, marginals: &MarginalTable) -> PairProbMatrix {
    let mut blocks = original.blocks.clone();
    for (&(i, j), block) in &mut blocks {
        let mi = marginals.rows[i];
        let mj = marginals.rows[j];
        let next = PairBlock {
            ff: block.ff * mi[0] * mj[0],
            fb: block.fb * mi[0] * mj[1],
            bf: block.bf * mi[1] * mj[0],
            bb: block.bb * mi[1] * mj[1],
        };
        let s = next.sum();
        *block = if s > 0.0 {
            PairBlock {
                ff: next.ff / s,
                fb: next.fb / s,
                bf: next.bf / s,
                bb: next.bb / s,
            }
        } else {
            original.blocks[&(i, j)]
        };
    }
    PairProbMatrix {
        n: original.n,
        blocks,
    }
}

/// Iterative probabilistic refinement: solve for marginals, fold them back
/// into the pairwise blocks (always reweighting the *original* blocks),
/// reassemble with the unchanged unary diagonal, and repeat until the
/// marginals move less than `tol` in max-norm or `max_rounds` is reached.
pub fn pgm_marginals(
    pair0: &PairProbMatrix,
    unary: &UnaryTable,
    lambda: f64,
    max_rounds: usize,
    tol: f64,
) -> Result<MarginalTable> {
    if max_rounds == 0 {
        return Err(Error::InvalidInput("max_rounds must be at least 1".into()));
    }
    let mut marginals = sgm_marginals(&assemble_assignment_matrix(pair0, unary, lambda)?)?;
    for _ in 1..max_rounds {
        let pair = reweight(pair0, &marginals);
        let next = sgm_marginals(&assemble_assignment_matrix(&pair, unary, lambda)?)?;
        let delta = next
            .rows
            .iter()
            .zip(&marginals.rows)
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0f64, f64::max);
        marginals = next;
        if delta < tol {
            break;
        }
    }
    Ok(marginals)
}

/// Maximum-likelihood labels; an exact tie goes to background.
pub fn ml_labels(marginals: &MarginalTable) -> Vec<Label> {
    marginals
        .rows
        .iter()
        .map(|r| {
            if r[0] > r[1] {
                Label::Foreground
            } else {
                Label::Background
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn diag_matrix(d: &[f64]) -> AssignmentMatrix {
        let dim = d.len();
        let rows: Vec<Vec<f64>> = (0..dim)
            .map(|r| {
                (0..dim)
                    .map(|c| if r == c { d[r] } else { 0.0 })
                    .collect()
            })
            .collect();
        AssignmentMatrix::from_dense(&rows).unwrap()
    }

    #[test]
    fn sgm_on_diagonal_selects_largest_slots() {
        let m = diag_matrix(&[4.0, 1.0, 1.0, 4.0]);
        let marg = sgm_marginals(&m).unwrap();
        assert!((marg.rows[0][0] - 1.0).abs() < 1e-8, "{:?}", marg.rows);
        assert!((marg.rows[1][1] - 1.0).abs() < 1e-8, "{:?}", marg.rows);
        let labels = ml_labels(&marg);
        assert_eq!(labels, vec![Label::Foreground, Label::Background]);
    }

    #[test]
    fn power_iteration_matches_dense_eigensolver() {
        let rows = vec![
            vec![2.0, 1.0, 0.5, 0.0],
            vec![1.0, 3.0, 0.2, 0.7],
            vec![0.5, 0.2, 1.0, 0.9],
            vec![0.0, 0.7, 0.9, 2.5],
        ];
        let m = AssignmentMatrix::from_dense(&rows).unwrap();
        let v = power_iteration(&m);

        let dm = nalgebra::DMatrix::from_fn(4, 4, |r, c| rows[r][c]);
        let eig = nalgebra::SymmetricEigen::new(dm);
        let top = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let w = eig.eigenvectors.column(top);
        let dot: f64 = v.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() > 1.0 - 1e-9, "cosine {}", dot.abs());
    }

    #[test]
    fn zero_matrix_falls_back_to_uniform() {
        let m = diag_matrix(&[0.0, 0.0]);
        let marg = sgm_marginals(&m).unwrap();
        assert_eq!(marg.rows, vec![[0.5, 0.5]]);
    }

    #[test]
    fn marginal_rows_sum_to_one() {
        let rows = vec![
            vec![0.5, 0.1, 0.3, 0.2],
            vec![0.1, 0.8, 0.05, 0.4],
            vec![0.3, 0.05, 0.9, 0.25],
            vec![0.2, 0.4, 0.25, 0.6],
        ];
        let m = AssignmentMatrix::from_dense(&rows).unwrap();
        let marg = sgm_marginals(&m).unwrap();
        for r in &marg.rows {
            assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
            assert!(r[0] >= -1e-10 && r[1] >= -1e-10);
        }
    }

    #[test]
    fn odd_dimension_rejected() {
        let m = diag_matrix(&[1.0, 2.0, 3.0]);
        assert!(sgm_marginals(&m).is_err());
    }

    fn uniform_pair(n: usize, edges: &[(usize, usize)]) -> PairProbMatrix {
        let mut blocks = BTreeMap::new();
        for &e in edges {
            blocks.insert(
                e,
                PairBlock {
                    ff: 0.25,
                    fb: 0.25,
                    bf: 0.25,
                    bb: 0.25,
                },
            );
        }
        PairProbMatrix { n, blocks }
    }

    #[test]
    fn pgm_uniform_blocks_are_a_fixed_point() {
        // Uniform blocks and uniform unary keep marginals at [0.5, 0.5];
        // reweighting scales every entry by 0.25 and renormalization restores
        // the block, so the loop stops immediately.
        let pair = uniform_pair(2, &[(0, 1)]);
        let unary = UnaryTable {
            rows: vec![[0.5, 0.5], [0.5, 0.5]],
        };
        let marg = pgm_marginals(&pair, &unary, 1.0, PGM_MAX_ROUNDS, PGM_TOL).unwrap();
        assert_eq!(marg.rows, vec![[0.5, 0.5], [0.5, 0.5]]);
        let sgm = sgm_marginals(
            &assemble_assignment_matrix(&pair, &unary, 1.0).unwrap(),
        )
        .unwrap();
        assert_eq!(marg, sgm);
    }

    #[test]
    fn reweight_zero_marginal_zeroes_matching_entries() {
        let pair = uniform_pair(2, &[(0, 1)]);
        let marg = MarginalTable {
            rows: vec![[1.0, 0.0], [0.6, 0.4]],
        };
        let out = reweight(&pair, &marg);
        let b = out.blocks[&(0, 1)];
        assert_eq!(b.bf, 0.0);
        assert_eq!(b.bb, 0.0);
        assert!((b.ff - 0.6).abs() < 1e-12);
        assert!((b.fb - 0.4).abs() < 1e-12);
        assert!((b.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reweight_dead_block_resets_to_original() {
        let mut blocks = BTreeMap::new();
        blocks.insert(
            (0, 1),
            PairBlock {
                ff: 0.0,
                fb: 0.0,
                bf: 0.5,
                bb: 0.5,
            },
        );
        let pair = PairProbMatrix { n: 2, blocks };
        // Marginals that zero out exactly the supported entries.
        let marg = MarginalTable {
            rows: vec![[1.0, 0.0], [0.5, 0.5]],
        };
        let out = reweight(&pair, &marg);
        assert_eq!(out.blocks[&(0, 1)], pair.blocks[&(0, 1)]);
    }

    #[test]
    fn pgm_three_chain_matches_brute_force() {
        // Three superpixels, two edges, mildly informative blocks and unary.
        let mut blocks = BTreeMap::new();
        for e in [(0usize, 1usize), (1, 2)] {
            blocks.insert(
                e,
                PairBlock {
                    ff: 0.3,
                    fb: 0.2,
                    bf: 0.2,
                    bb: 0.3,
                },
            );
        }
        let pair = PairProbMatrix { n: 3, blocks };
        let unary = UnaryTable {
            rows: vec![[0.9, 0.1], [0.7, 0.3], [0.2, 0.8]],
        };
        let marg = pgm_marginals(&pair, &unary, 1.0, PGM_MAX_ROUNDS, PGM_TOL).unwrap();
        let got = ml_labels(&marg);

        // Exhaustive scoring of all 8 labelings.
        let mut best = (f64::NEG_INFINITY, 0usize);
        for bits in 0..8usize {
            let lab = |i: usize| {
                if bits & (1 << i) != 0 {
                    Label::Foreground
                } else {
                    Label::Background
                }
            };
            let pick = |b: &PairBlock, li: Label, lj: Label| match (li, lj) {
                (Label::Foreground, Label::Foreground) => b.ff,
                (Label::Foreground, Label::Background) => b.fb,
                (Label::Background, Label::Foreground) => b.bf,
                (Label::Background, Label::Background) => b.bb,
            };
            let mut score = 1.0;
            for (&(i, j), b) in &pair.blocks {
                score *= pick(b, lab(i), lab(j));
            }
            for (i, row) in unary.rows.iter().enumerate() {
                score *= match lab(i) {
                    Label::Foreground => row[0],
                    Label::Background => row[1],
                };
            }
            if score > best.0 {
                best = (score, bits);
            }
        }
        let want: Vec<Label> = (0..3)
            .map(|i| {
                if best.1 & (1 << i) != 0 {
                    Label::Foreground
                } else {
                    Label::Background
                }
            })
            .collect();
        assert_eq!(got, want, "marginals {:?}", marg.rows);
    }

    #[test]
    fn labels_invariant_under_matrix_rescaling() {
        let rows = vec![
            vec![0.5, 0.1, 0.3, 0.2],
            vec![0.1, 0.8, 0.05, 0.4],
            vec![0.3, 0.05, 0.9, 0.25],
            vec![0.2, 0.4, 0.25, 0.6],
        ];
        let base = ml_labels(
            &sgm_marginals(&AssignmentMatrix::from_dense(&rows).unwrap()).unwrap(),
        );
        for c in [0.5, 3.0, 100.0] {
            let scaled: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().map(|v| v * c).collect())
                .collect();
            let labels = ml_labels(
                &sgm_marginals(&AssignmentMatrix::from_dense(&scaled).unwrap()).unwrap(),
            );
            assert_eq!(labels, base, "scale {c}");
        }
    }

    #[test]
    fn tie_goes_to_background() {
        let marg = MarginalTable {
            rows: vec![[0.5, 0.5], [0.500001, 0.499999]],
        };
        assert_eq!(
            ml_labels(&marg),
            vec![Label::Background, Label::Foreground]
        );
    }
}
