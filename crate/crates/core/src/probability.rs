//! Assignment probabilities: RBF kernels over model divergences, bandwidth
//! estimation, and assembly of the sparse symmetric assignment matrix.

use std::collections::{BTreeMap, BTreeSet};

use crate::colormodel::{kl_gaussian_to_gmm, sym_kl_gaussian, GaussianModel, GmmModel};
use crate::imageio::TrimapLabel;
use crate::inference::Label;
use crate::superpixel::AdjacencyGraph;
use crate::{Error, Result};

/// Lower bound applied to every kernel bandwidth.
pub const BANDWIDTH_FLOOR: f64 = 1e-8;

/// Per-superpixel `[p(F), p(B)]` rows, each summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryTable {
    pub rows: Vec<[f64; 2]>,
}

/// Joint assignment probabilities for one superpixel pair `(i, j)`:
/// `ff = p(i in F, j in F)`, `fb = p(i in F, j in B)`, and so on.
/// The four entries sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairBlock {
    pub ff: f64,
    pub fb: f64,
    pub bf: f64,
    pub bb: f64,
}

impl PairBlock {
    #[inline]
    pub fn sum(&self) -> f64 {
        self.ff + self.fb + self.bf + self.bb
    }
}

/// Sparse block matrix of pairwise assignment probabilities, one 2x2 block
/// per kept edge, keyed `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairProbMatrix {
    pub n: usize,
    pub blocks: BTreeMap<(usize, usize), PairBlock>,
}

/// Symmetrized divergences for adjacency edges, keyed `(i, j)` with `i < j`.
pub type EdgeDistances = BTreeMap<(usize, usize), f64>;

/// RBF bandwidths. `pair` serves until a labeling exists; the class-routed
/// fields start equal to the label-free values and are refined per round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidths {
    pub unary_f: f64,
    pub unary_b: f64,
    pub pair: f64,
    pub pair_f: f64,
    pub pair_b: f64,
    pub pair_cross: f64,
}

impl Bandwidths {
    pub fn initial(sigma_u: f64, sigma_p: f64) -> Self {
        let u = sigma_u.max(BANDWIDTH_FLOOR);
        let p = sigma_p.max(BANDWIDTH_FLOOR);
        Bandwidths {
            unary_f: u,
            unary_b: u,
            pair: p,
            pair_f: p,
            pair_b: p,
            pair_cross: p,
        }
    }
}

/// Median with the even-count convention (mean of the two middle values).
/// Errors on an empty slice.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median over NaN"));
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Initial unary bandwidth: the median divergence of the given region
/// models to the mixture they were trained on.
pub fn estimate_sigma_u_initial(
    gaussians: &[&GaussianModel],
    gmm: &GmmModel,
) -> Result<f64> {
    let dists = gaussians
        .iter()
        .map(|g| kl_gaussian_to_gmm(g, gmm))
        .collect::<Result<Vec<f64>>>()?;
    Ok(median(&dists)?.max(BANDWIDTH_FLOOR))
}

/// Initial pairwise bandwidth: the median divergence over the kept edges.
pub fn estimate_sigma_p(
    kept_edges: &[(usize, usize)],
    dists: &EdgeDistances,
) -> Result<f64> {
    let vals: Vec<f64> = kept_edges
        .iter()
        .map(|e| {
            dists
                .get(e)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("edge {e:?} has no distance")))
        })
        .collect::<Result<_>>()?;
    Ok(median(&vals)?.max(BANDWIDTH_FLOOR))
}

#[inline]
fn softmax2(neg_a: f64, neg_b: f64) -> [f64; 2] {
    // Normalized [exp(neg_a), exp(neg_b)], stable for large magnitudes.
    let mx = neg_a.max(neg_b);
    let ea = (neg_a - mx).exp();
    let eb = (neg_b - mx).exp();
    let pf = ea / (ea + eb);
    [pf, 1.0 - pf]
}

/// Per-superpixel assignment probabilities from divergences to the
/// foreground and background mixtures. Superpixels whose trimap state is
/// BACKGROUND are clamped to `[0, 1]`.
pub fn unary_probabilities(
    gaussians: &[GaussianModel],
    gmm_f: &GmmModel,
    gmm_b: &GmmModel,
    sigma_f: f64,
    sigma_b: f64,
    states: &[TrimapLabel],
) -> Result<UnaryTable> {
    if gaussians.len() != states.len() {
        return Err(Error::InvalidInput(
            "one trimap state per superpixel required".into(),
        ));
    }
    let sigma_f = sigma_f.max(BANDWIDTH_FLOOR);
    let sigma_b = sigma_b.max(BANDWIDTH_FLOOR);
    let mut rows = Vec::with_capacity(gaussians.len());
    for (g, state) in gaussians.iter().zip(states) {
        if *state == TrimapLabel::Background {
            rows.push([0.0, 1.0]);
            continue;
        }
        let d_f = kl_gaussian_to_gmm(g, gmm_f)?;
        let d_b = kl_gaussian_to_gmm(g, gmm_b)?;
        rows.push(softmax2(-d_f / sigma_f, -d_b / sigma_b));
    }
    Ok(UnaryTable { rows })
}

/// Background-only initialization: `p(B) = exp(-d_B / sigma)` with sigma the
/// median divergence of BACKGROUND-trimap superpixels to the background
/// mixture, and `p(F) = 1 - p(B)`. Returns the table and the bandwidth.
pub fn unary_background_only(
    gaussians: &[GaussianModel],
    gmm_b: &GmmModel,
    states: &[TrimapLabel],
) -> Result<(UnaryTable, f64)> {
    if gaussians.len() != states.len() {
        return Err(Error::InvalidInput(
            "one trimap state per superpixel required".into(),
        ));
    }
    let dists = gaussians
        .iter()
        .map(|g| kl_gaussian_to_gmm(g, gmm_b))
        .collect::<Result<Vec<f64>>>()?;
    let bg: Vec<f64> = dists
        .iter()
        .zip(states)
        .filter(|(_, s)| **s == TrimapLabel::Background)
        .map(|(d, _)| *d)
        .collect();
    if bg.is_empty() {
        return Err(Error::DegenerateTrimap(
            "background-only init needs at least one BACKGROUND superpixel".into(),
        ));
    }
    let sigma = median(&bg)?.max(BANDWIDTH_FLOOR);
    let rows = dists
        .iter()
        .map(|d| {
            let pb = (-d / sigma).exp().clamp(0.0, 1.0);
            [1.0 - pb, pb]
        })
        .collect();
    Ok((UnaryTable { rows }, sigma))
}

/// Keeps, for every superpixel, its `m` most similar adjacent neighbors
/// (smallest divergence, ties to the smaller id). The union of the directed
/// picks is returned as a canonical undirected edge list.
pub fn select_pairwise_neighbors(
    graph: &AdjacencyGraph,
    dists: &EdgeDistances,
    m: usize,
) -> Result<Vec<(usize, usize)>> {
    if m == 0 {
        return Err(Error::InvalidInput("m must be at least 1".into()));
    }
    let mut kept = BTreeSet::new();
    for i in 0..graph.n {
        let mut cand: Vec<(f64, usize)> = graph
            .neighbors(i)
            .iter()
            .map(|&j| {
                let key = (i.min(j), i.max(j));
                dists
                    .get(&key)
                    .copied()
                    .map(|d| (d, j))
                    .ok_or_else(|| Error::InvalidInput(format!("edge {key:?} has no distance")))
            })
            .collect::<Result<_>>()?;
        cand.sort_by(|a, b| a.partial_cmp(b).expect("divergence is NaN"));
        for (_, j) in cand.into_iter().take(m) {
            kept.insert((i.min(j), i.max(j)));
        }
    }
    Ok(kept.into_iter().collect())
}

/// Pairwise divergences for every adjacency edge, computed once per run.
pub fn edge_distances(
    graph: &AdjacencyGraph,
    gaussians: &[GaussianModel],
) -> Result<EdgeDistances> {
    let mut dists = EdgeDistances::new();
    for &(i, j) in &graph.edges {
        dists.insert((i, j), sym_kl_gaussian(&gaussians[i], &gaussians[j])?);
    }
    Ok(dists)
}

/// Builds the 2x2 joint block for every kept edge. With
/// `e = exp(-d / sigma)` the block is `(e/2, e/2)` on the same-label
/// entries and `((1-e)/2, (1-e)/2)` on the mixed ones, the unique
/// solution once the same-label mass is split evenly and the four entries
/// sum to 1.
///
/// When `labels` is given, the bandwidth routes per edge: both endpoints
/// F, both B, or mixed; otherwise the label-free `pair` bandwidth applies.
pub fn pairwise_probabilities(
    n: usize,
    kept_edges: &[(usize, usize)],
    dists: &EdgeDistances,
    bw: &Bandwidths,
    labels: Option<&[Label]>,
) -> Result<PairProbMatrix> {
    let mut blocks = BTreeMap::new();
    for &(i, j) in kept_edges {
        if i >= j || j >= n {
            return Err(Error::InvalidInput(format!(
                "edge ({i}, {j}) is not canonical for n = {n}"
            )));
        }
        let d = dists
            .get(&(i, j))
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("edge ({i}, {j}) has no distance")))?;
        let sigma = match labels {
            None => bw.pair,
            Some(ls) => match (ls[i], ls[j]) {
                (Label::Foreground, Label::Foreground) => bw.pair_f,
                (Label::Background, Label::Background) => bw.pair_b,
                _ => bw.pair_cross,
            },
        }
        .max(BANDWIDTH_FLOOR);
        let e = (-d / sigma).exp();
        let same = e / 2.0;
        let diff = (1.0 - e) / 2.0;
        blocks.insert(
            (i, j),
            PairBlock {
                ff: same,
                fb: diff,
                bf: diff,
                bb: same,
            },
        );
    }
    Ok(PairProbMatrix { n, blocks })
}

/// Sparse symmetric assignment matrix over 2n label slots: per-edge joint
/// blocks off the diagonal plus `lambda^2 * p_unary^2` on it. Slot `2i` is
/// "superpixel i foreground", slot `2i + 1` "superpixel i background".
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    dim: usize,
    diag: Vec<f64>,
    /// Strictly upper-triangular entries `(row, col, value)` in a fixed
    /// deterministic order.
    entries: Vec<(u32, u32, f64)>,
}

impl AssignmentMatrix {
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Builds from a dense symmetric nonnegative matrix. Asymmetry beyond
    /// roundoff or any negative entry is an error.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInput("matrix is not square".into()));
        }
        let scale = rows
            .iter()
            .flatten()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
            .max(1.0);
        let mut diag = vec![0.0; dim];
        let mut entries = Vec::new();
        for r in 0..dim {
            for c in 0..dim {
                let v = rows[r][c];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "entry ({r}, {c}) = {v} is negative or not finite"
                    )));
                }
                if (v - rows[c][r]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidInput(format!(
                        "matrix not symmetric at ({r}, {c})"
                    )));
                }
                if r == c {
                    diag[r] = v;
                } else if r < c && v != 0.0 {
                    entries.push((r as u32, c as u32, v));
                }
            }
        }
        Ok(AssignmentMatrix { dim, diag, entries })
    }

    /// `out = M v`, accumulated in a fixed order for bit-stable results.
    pub fn matvec(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        for i in 0..self.dim {
            out[i] = self.diag[i] * v[i];
        }
        for &(r, c, val) in &self.entries {
            out[r as usize] += val * v[c as usize];
            out[c as usize] += val * v[r as usize];
        }
    }

    /// Any negative or non-finite stored value.
    pub fn validate_nonnegative(&self) -> Result<()> {
        let bad = self
            .diag
            .iter()
            .copied()
            .chain(self.entries.iter().map(|e| e.2))
            .find(|v| !v.is_finite() || *v < 0.0);
        match bad {
            Some(v) => Err(Error::InvalidInput(format!(
                "assignment matrix holds invalid value {v}"
            ))),
            None => Ok(()),
        }
    }

    /// Full coordinate dump, `row col value` per line, sorted by row then
    /// column, for offline inspection.
    pub fn dump_coordinates(&self) -> String {
        let mut coords: Vec<(u32, u32, f64)> = Vec::new();
        for (i, &d) in self.diag.iter().enumerate() {
            if d != 0.0 {
                coords.push((i as u32, i as u32, d));
            }
        }
        for &(r, c, v) in &self.entries {
            coords.push((r, c, v));
            coords.push((c, r, v));
        }
        coords.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut out = String::new();
        for (r, c, v) in coords {
            out.push_str(&format!("{r} {c} {v:.17e}\n"));
        }
        out
    }
}

/// Assembles the assignment matrix from the pairwise blocks and the squared
/// unary diagonal.
pub fn assemble_assignment_matrix(
    pair: &PairProbMatrix,
    unary: &UnaryTable,
    lambda: f64,
) -> Result<AssignmentMatrix> {
    if unary.rows.len() != pair.n {
        return Err(Error::InvalidInput(
            "unary table and pair matrix disagree on n".into(),
        ));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda = {lambda} invalid")));
    }
    let dim = 2 * pair.n;
    let l2 = lambda * lambda;
    let mut diag = Vec::with_capacity(dim);
    for row in &unary.rows {
        diag.push(l2 * row[0] * row[0]);
        diag.push(l2 * row[1] * row[1]);
    }
    let mut entries = Vec::with_capacity(4 * pair.blocks.len());
    for (&(i, j), b) in &pair.blocks {
        let (fi, bi) = ((2 * i) as u32, (2 * i + 1) as u32);
        let (fj, bj) = ((2 * j) as u32, (2 * j + 1) as u32);
        entries.push((fi, fj, b.ff));
        entries.push((fi, bj, b.fb));
        entries.push((bi, fj, b.bf));
        entries.push((bi, bj, b.bb));
    }
    Ok(AssignmentMatrix { dim, diag, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colormodel::GaussianModel;
    use crate::superpixel::{superpixel_adjacency, Superpixel};
    use nalgebra::{Matrix3, Vector3};

    fn iso(mean_l: f64) -> GaussianModel {
        GaussianModel {
            mean: Vector3::new(mean_l, 0.0, 0.0),
            cov: Matrix3::identity(),
        }
    }

    fn gmm_of(g: &GaussianModel) -> GmmModel {
        GmmModel {
            weights: vec![1.0],
            components: vec![g.clone()],
        }
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert_eq!(median(&[7.0]).unwrap(), 7.0);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn unary_equal_bandwidth_one_sigma_apart() {
        // d_F = 0 against its own mixture, d_B = sigma against a mixture one
        // bandwidth away: [1/(1+e^-1), e^-1/(1+e^-1)].
        let g = iso(0.0);
        let gmm_f = gmm_of(&g);
        // KL between unit-cov Gaussians at distance sqrt(2 sigma) gives d = sigma.
        let sigma = 1.7f64;
        let far = iso((2.0 * sigma).sqrt());
        let gmm_b = gmm_of(&far);
        let table = unary_probabilities(
            &[g],
            &gmm_f,
            &gmm_b,
            sigma,
            sigma,
            &[TrimapLabel::Unknown],
        )
        .unwrap();
        let [pf, pb] = table.rows[0];
        assert!((pf - 0.7310585786300049).abs() < 1e-9, "pf = {pf}");
        assert!((pb - 0.2689414213699951).abs() < 1e-9, "pb = {pb}");
        assert!((pf + pb - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unary_clamps_background_trimap() {
        let g = iso(0.0);
        let gmm = gmm_of(&g);
        let table = unary_probabilities(
            &[g.clone(), g],
            &gmm,
            &gmm,
            1.0,
            1.0,
            &[TrimapLabel::Background, TrimapLabel::Unknown],
        )
        .unwrap();
        assert_eq!(table.rows[0], [0.0, 1.0]);
        assert_eq!(table.rows[1], [0.5, 0.5]);
    }

    #[test]
    fn unary_equal_distances_give_half() {
        let g = iso(5.0);
        let gmm = gmm_of(&iso(0.0));
        let table =
            unary_probabilities(&[g], &gmm, &gmm, 2.0, 2.0, &[TrimapLabel::Unknown]).unwrap();
        assert_eq!(table.rows[0], [0.5, 0.5]);
    }

    #[test]
    fn background_only_unary_values() {
        // One background superpixel sitting exactly on the background model
        // fixes sigma at the floor-free median; probe rows follow exp(-d/sigma).
        let on_model = iso(0.0);
        let gmm_b = gmm_of(&on_model);
        // Distance sigma for the probe: engineered via the mean offset again.
        let sigma_probe = 0.8f64;
        let probe = iso((2.0 * sigma_probe).sqrt());
        // Background superpixel at distance sigma_probe too, so the median
        // bandwidth equals sigma_probe.
        let bg = iso((2.0 * sigma_probe).sqrt());
        let (table, sigma) = unary_background_only(
            &[bg, probe, on_model.clone()],
            &gmm_b,
            &[
                TrimapLabel::Background,
                TrimapLabel::Unknown,
                TrimapLabel::Unknown,
            ],
        )
        .unwrap();
        assert!((sigma - sigma_probe).abs() < 1e-12);
        let [pf, pb] = table.rows[1];
        assert!((pb - 0.36787944117144233).abs() < 1e-9, "pb = {pb}");
        assert!((pf - 0.6321205588285577).abs() < 1e-9, "pf = {pf}");
        // Zero distance clamps to pure background.
        assert_eq!(table.rows[2], [0.0, 1.0]);
        assert!(unary_background_only(
            &[on_model],
            &gmm_b,
            &[TrimapLabel::Unknown]
        )
        .is_err());
    }

    fn chain_graph() -> (AdjacencyGraph, EdgeDistances) {
        // Three superpixels in a row: A(0) - B(1) - C(2).
        let sps: Vec<Superpixel> = (0..3)
            .map(|i| Superpixel {
                id: i,
                pixels: vec![i as u32],
                gaussian: None,
                trimap_state: None,
            })
            .collect();
        let graph = superpixel_adjacency(&sps, 3, 1).unwrap();
        let mut dists = EdgeDistances::new();
        dists.insert((0, 1), 1.0);
        dists.insert((1, 2), 2.0);
        (graph, dists)
    }

    #[test]
    fn neighbor_selection_keeps_union_of_picks() {
        let (graph, dists) = chain_graph();
        // m = 1: A picks B, B picks A, C picks B; union {AB, BC}.
        let kept = select_pairwise_neighbors(&graph, &dists, 1).unwrap();
        assert_eq!(kept, vec![(0, 1), (1, 2)]);
        // m larger than the degree keeps all adjacency edges.
        let kept_all = select_pairwise_neighbors(&graph, &dists, 10).unwrap();
        assert_eq!(kept_all, graph.edges);
        assert!(select_pairwise_neighbors(&graph, &dists, 0).is_err());
    }

    #[test]
    fn neighbor_selection_tie_prefers_smaller_id() {
        let sps: Vec<Superpixel> = (0..3)
            .map(|i| Superpixel {
                id: i,
                pixels: vec![i as u32],
                gaussian: None,
                trimap_state: None,
            })
            .collect();
        let graph = superpixel_adjacency(&sps, 3, 1).unwrap();
        let mut dists = EdgeDistances::new();
        dists.insert((0, 1), 1.5);
        dists.insert((1, 2), 1.5);
        let kept = select_pairwise_neighbors(&graph, &dists, 1).unwrap();
        // B's pick ties between A and C and goes to A; C still picks B.
        assert!(kept.contains(&(0, 1)));
        assert!(kept.contains(&(1, 2)));
    }

    #[test]
    fn sigma_p_median_over_kept_edges() {
        let (_, dists) = chain_graph();
        let sigma = estimate_sigma_p(&[(0, 1), (1, 2)], &dists).unwrap();
        assert_eq!(sigma, 1.5);
        assert!(estimate_sigma_p(&[], &dists).is_err());
    }

    #[test]
    fn pairwise_block_at_one_sigma() {
        let mut dists = EdgeDistances::new();
        dists.insert((0, 1), 2.5);
        let bw = Bandwidths::initial(1.0, 2.5);
        let pm = pairwise_probabilities(2, &[(0, 1)], &dists, &bw, None).unwrap();
        let b = pm.blocks[&(0, 1)];
        assert!((b.ff - 0.18393972058572117).abs() < 1e-12);
        assert!((b.bb - 0.18393972058572117).abs() < 1e-12);
        assert!((b.fb - 0.31606027941427883).abs() < 1e-12);
        assert!((b.bf - b.fb).abs() < 1e-15);
        assert!((b.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_zero_distance_splits_same_label_mass() {
        let mut dists = EdgeDistances::new();
        dists.insert((0, 1), 0.0);
        let bw = Bandwidths::initial(1.0, 3.0);
        let pm = pairwise_probabilities(2, &[(0, 1)], &dists, &bw, None).unwrap();
        let b = pm.blocks[&(0, 1)];
        assert_eq!((b.ff, b.bb, b.fb, b.bf), (0.5, 0.5, 0.0, 0.0));
    }

    #[test]
    fn pairwise_routes_bandwidth_by_labels() {
        let mut dists = EdgeDistances::new();
        dists.insert((0, 1), 1.0);
        dists.insert((1, 2), 1.0);
        dists.insert((2, 3), 1.0);
        let bw = Bandwidths {
            unary_f: 1.0,
            unary_b: 1.0,
            pair: 1.0,
            pair_f: 10.0,
            pair_b: 0.1,
            pair_cross: 1.0,
        };
        let labels = [
            Label::Foreground,
            Label::Foreground,
            Label::Background,
            Label::Background,
        ];
        let pm = pairwise_probabilities(
            4,
            &[(0, 1), (1, 2), (2, 3)],
            &dists,
            &bw,
            Some(&labels),
        )
        .unwrap();
        let same_f = pm.blocks[&(0, 1)].ff;
        let cross = pm.blocks[&(1, 2)].ff;
        let same_b = pm.blocks[&(2, 3)].ff;
        // Wider bandwidth -> larger same-label mass.
        assert!(same_f > cross && cross > same_b);
        for b in pm.blocks.values() {
            assert!((b.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_diagonal_squares_unary() {
        let pair = PairProbMatrix {
            n: 1,
            blocks: BTreeMap::new(),
        };
        let unary = UnaryTable {
            rows: vec![[0.8, 0.2]],
        };
        let m = assemble_assignment_matrix(&pair, &unary, 2.0).unwrap();
        let mut out = vec![0.0; 2];
        m.matvec(&[1.0, 1.0], &mut out);
        assert!((out[0] - 2.56).abs() < 1e-12, "diag F {}", out[0]);
        assert!((out[1] - 0.16).abs() < 1e-12, "diag B {}", out[1]);
    }

    #[test]
    fn assemble_places_blocks_symmetrically() {
        let mut blocks = BTreeMap::new();
        blocks.insert(
            (0, 1),
            PairBlock {
                ff: 0.4,
                fb: 0.1,
                bf: 0.2,
                bb: 0.3,
            },
        );
        let pair = PairProbMatrix { n: 2, blocks };
        let unary = UnaryTable {
            rows: vec![[0.5, 0.5], [0.5, 0.5]],
        };
        let m = assemble_assignment_matrix(&pair, &unary, 0.0).unwrap();
        // Row picks: v = e_{slot} probes one column of the matrix.
        let probe = |slot: usize| {
            let mut v = vec![0.0; 4];
            v[slot] = 1.0;
            let mut out = vec![0.0; 4];
            m.matvec(&v, &mut out);
            out
        };
        assert_eq!(probe(2)[0], 0.4); // (F0, F1)
        assert_eq!(probe(3)[0], 0.1); // (F0, B1)
        assert_eq!(probe(2)[1], 0.2); // (B0, F1)
        assert_eq!(probe(0)[2], 0.4); // transpose side
        assert_eq!(probe(0)[3], 0.1);
    }

    #[test]
    fn from_dense_validates() {
        let ok = AssignmentMatrix::from_dense(&[vec![1.0, 2.0], vec![2.0, 0.5]]).unwrap();
        assert_eq!(ok.dim(), 2);
        assert!(ok.validate_nonnegative().is_ok());
        assert!(AssignmentMatrix::from_dense(&[vec![1.0, 2.0], vec![3.0, 0.5]]).is_err());
        assert!(AssignmentMatrix::from_dense(&[vec![1.0, -0.1], vec![-0.1, 0.5]]).is_err());
        assert!(AssignmentMatrix::from_dense(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn coordinate_dump_sorted_and_complete() {
        let m = AssignmentMatrix::from_dense(&[vec![1.0, 0.25], vec![0.25, 0.0]]).unwrap();
        let dump = m.dump_coordinates();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 3); // diag(1,1) entry is zero and omitted
        assert!(lines[0].starts_with("0 0 "));
        assert!(lines[1].starts_with("0 1 "));
        assert!(lines[2].starts_with("1 0 "));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn blocks_sum_to_one_and_shrink_with_distance(
                d1 in 0.0f64..50.0,
                extra in 1e-6f64..50.0,
                sigma in 1e-6f64..20.0,
            ) {
                let mut dists = EdgeDistances::new();
                dists.insert((0, 1), d1);
                dists.insert((0, 2), d1 + extra);
                let bw = Bandwidths::initial(1.0, sigma);
                let pm = pairwise_probabilities(
                    3, &[(0, 1), (0, 2)], &dists, &bw, None,
                ).unwrap();
                let near = pm.blocks[&(0, 1)];
                let far = pm.blocks[&(0, 2)];
                prop_assert!((near.sum() - 1.0).abs() < 1e-12);
                prop_assert!((far.sum() - 1.0).abs() < 1e-12);
                // Same-label mass decreases, mixed mass increases.
                prop_assert!(far.ff <= near.ff + 1e-15);
                prop_assert!(far.fb >= near.fb - 1e-15);
            }

            #[test]
            fn scaling_distances_and_bandwidth_is_invariant(
                d in 0.0f64..20.0,
                sigma in 1e-3f64..10.0,
                c in 1e-3f64..1e3,
            ) {
                let mut base = EdgeDistances::new();
                base.insert((0, 1), d);
                let mut scaled = EdgeDistances::new();
                scaled.insert((0, 1), c * d);
                let pm_base = pairwise_probabilities(
                    2, &[(0, 1)], &base, &Bandwidths::initial(1.0, sigma), None,
                ).unwrap();
                let pm_scaled = pairwise_probabilities(
                    2, &[(0, 1)], &scaled, &Bandwidths::initial(1.0, c * sigma), None,
                ).unwrap();
                let a = pm_base.blocks[&(0, 1)];
                let b = pm_scaled.blocks[&(0, 1)];
                prop_assert!((a.ff - b.ff).abs() < 1e-12);
                prop_assert!((a.fb - b.fb).abs() < 1e-12);
            }

            #[test]
            fn unary_rows_sum_to_one(
                df in 0.0f64..100.0,
                db in 0.0f64..100.0,
                sigma in 1e-6f64..10.0,
            ) {
                let [pf, pb] = softmax2(-df / sigma, -db / sigma);
                prop_assert!((pf + pb - 1.0).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&pf));
            }
        }
    }
}
