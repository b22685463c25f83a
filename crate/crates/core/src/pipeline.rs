//! The full segmentation loop: model initialization, iterative refinement
//! with bandwidth tuning, and majority voting over independent reruns.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::colormodel::{
    fit_gmm, fit_superpixel_gaussians, kl_gaussian_to_gmm, GaussianModel, GmmModel,
};
use crate::imageio::{LabImage, Provenance, SegMask, TriMap, TrimapLabel};
use crate::inference::{
    ml_labels, pgm_marginals, sgm_marginals, Label, MarginalTable, PGM_MAX_ROUNDS, PGM_TOL,
};
use crate::probability::{
    assemble_assignment_matrix, edge_distances, estimate_sigma_p, estimate_sigma_u_initial,
    median, pairwise_probabilities, select_pairwise_neighbors, unary_background_only,
    unary_probabilities, Bandwidths, EdgeDistances, UnaryTable, BANDWIDTH_FLOOR,
};
use crate::superpixel::{
    assign_trimap_states, superpixel_adjacency, watershed_partition, AdjacencyGraph, Superpixel,
};
use crate::{Error, Result};

/// Background training ring width (pixels outside the box, Chebyshev).
pub const BBOX_RING: u32 = 10;

/// GMM fits subsample their training pixels beyond this count (fixed
/// stride, so the choice is deterministic). Several hundred samples per
/// component pin the moments down tightly; capping keeps the per-iteration
/// refits cheap on large images.
pub const MAX_GMM_SAMPLES: usize = 4_000;

/// How unary probabilities are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Bounding box or trimap supervision with two-sided unaries.
    Semi,
    /// Prior-map supervision with two-sided unaries.
    Auto,
    /// Background-only unaries in the first iteration; no initial
    /// foreground mixture is fit.
    Gb,
}

/// Marginal inference scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    /// Single leading-eigenvector solve.
    Sgm,
    /// Iterative Bayesian reweighting around the eigenvector solve.
    Pgm,
}

/// Pipeline parameters. `Default` gives the reference configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SegConfig {
    pub k_f: usize,
    pub k_b: usize,
    /// Most-similar neighbors kept per superpixel.
    pub m: usize,
    /// Unary weight in the assignment matrix diagonal.
    pub lambda: f64,
    pub refine_iters: usize,
    /// Independent reruns combined by majority vote.
    pub runs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub solver: Solver,
    pub target_sp_size: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            k_f: 3,
            k_b: 3,
            m: 4,
            lambda: 2.0,
            refine_iters: 10,
            runs: 10,
            seed: 0,
            mode: Mode::Semi,
            solver: Solver::Pgm,
            target_sp_size: 200,
        }
    }
}

/// Mutable state carried across refinement iterations.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub t: usize,
    pub labels: Vec<Label>,
    /// Absent in `gb` mode until the first refit.
    pub gmm_f: Option<GmmModel>,
    pub gmm_b: GmmModel,
    pub bandwidths: Bandwidths,
    pub marginals: Option<MarginalTable>,
}

/// Result of one run or of the voted ensemble.
#[derive(Debug, Clone)]
pub struct SegOutcome {
    pub mask: SegMask,
    /// All superpixels ended in one class; the mask is trivial.
    pub collapsed: bool,
    /// Refinement iterations actually executed.
    pub iterations: usize,
}

fn subseed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Deterministic stride subsample capping GMM training sets.
fn strided_lab(pixel_ids: &[u32], img: &LabImage) -> Vec<Vector3<f64>> {
    let stride = pixel_ids.len().div_ceil(MAX_GMM_SAMPLES).max(1);
    pixel_ids
        .iter()
        .step_by(stride)
        .map(|&p| Vector3::from(img.pixels[p as usize]))
        .collect()
}

fn pixels_of<'a>(
    sps: &'a [Superpixel],
    mut keep: impl FnMut(&Superpixel) -> bool,
) -> Vec<u32> {
    let mut out = Vec::new();
    for sp in sps {
        if keep(sp) {
            out.extend_from_slice(&sp.pixels);
        }
    }
    out
}

fn state_of(sp: &Superpixel) -> TrimapLabel {
    sp.trimap_state.expect("trimap states assigned")
}

/// Fits the initial color models and bandwidths.
///
/// Background pixels come from BACKGROUND superpixels, restricted to the
/// ring of width [`BBOX_RING`] outside the box when the trimap came from a
/// bounding box. Foreground pixels come from FOREGROUND superpixels when the
/// trimap has any, otherwise from the UNKNOWN region. In `gb` mode no
/// foreground mixture is fit and the unary bandwidth is owned by the
/// background-only table until the first refinement.
pub fn init_models(
    img: &LabImage,
    sps: &[Superpixel],
    trimap: &TriMap,
    cfg: &SegConfig,
    run_seed: u64,
    kept_edges: &[(usize, usize)],
    dists: &EdgeDistances,
) -> Result<IterationState> {
    let n_bg = sps
        .iter()
        .filter(|sp| state_of(sp) == TrimapLabel::Background)
        .count();
    let n_unknown = sps
        .iter()
        .filter(|sp| state_of(sp) == TrimapLabel::Unknown)
        .count();
    if n_bg == 0 || n_unknown == 0 {
        return Err(Error::DegenerateTrimap(format!(
            "need BACKGROUND and UNKNOWN superpixels, have {n_bg} background / {n_unknown} unknown"
        )));
    }

    let mut bg_px = pixels_of(sps, |sp| state_of(sp) == TrimapLabel::Background);
    if let Provenance::Bbox(bbox) = trimap.provenance {
        let w = trimap.width;
        bg_px.retain(|&p| {
            let (x, y) = (p % w, p / w);
            let d = bbox.chebyshev_distance(x, y);
            d > 0 && d <= BBOX_RING
        });
        if bg_px.is_empty() {
            return Err(Error::DegenerateTrimap(
                "no background pixels inside the training ring".into(),
            ));
        }
    }
    let gmm_b = fit_gmm(&strided_lab(&bg_px, img), cfg.k_b, subseed(run_seed, 1))?;

    let has_fg_trimap = sps.iter().any(|sp| state_of(sp) == TrimapLabel::Foreground);
    let fg_px = if has_fg_trimap {
        pixels_of(sps, |sp| state_of(sp) == TrimapLabel::Foreground)
    } else {
        pixels_of(sps, |sp| state_of(sp) == TrimapLabel::Unknown)
    };

    let sigma_p = estimate_sigma_p(kept_edges, dists)?;

    let (gmm_f, sigma_u) = if cfg.mode == Mode::Gb {
        // Placeholder bandwidth; the background-only unary computes its own
        // and refinement replaces it after the first relabel.
        (None, 1.0)
    } else {
        let gmm_f = fit_gmm(&strided_lab(&fg_px, img), cfg.k_f, subseed(run_seed, 2))?;
        let region: Vec<&GaussianModel> = sps
            .iter()
            .filter(|sp| state_of(sp) != TrimapLabel::Background)
            .map(|sp| sp.gaussian.as_ref().expect("gaussians fitted"))
            .collect();
        let sigma_u = estimate_sigma_u_initial(&region, &gmm_f)?;
        (Some(gmm_f), sigma_u)
    };

    let labels = sps
        .iter()
        .map(|sp| {
            if state_of(sp) == TrimapLabel::Background {
                Label::Background
            } else {
                Label::Foreground
            }
        })
        .collect();

    Ok(IterationState {
        t: 0,
        labels,
        gmm_f,
        gmm_b,
        bandwidths: Bandwidths::initial(sigma_u, sigma_p),
        marginals: None,
    })
}

/// Re-estimates the kernel bandwidths from the current labeling. Per-class
/// unary bandwidths are means of within-class divergences; the same-class
/// pairwise bandwidths are means over same-class kept edges and the mixed
/// one is a median. An empty class or edge set keeps the previous value.
pub fn refine_bandwidths(
    gaussians: &[GaussianModel],
    gmm_f: &GmmModel,
    gmm_b: &GmmModel,
    labels: &[Label],
    kept_edges: &[(usize, usize)],
    dists: &EdgeDistances,
    prev: &Bandwidths,
) -> Result<Bandwidths> {
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;

    let mut d_f = Vec::new();
    let mut d_b = Vec::new();
    for (g, l) in gaussians.iter().zip(labels) {
        match l {
            Label::Foreground => d_f.push(kl_gaussian_to_gmm(g, gmm_f)?),
            Label::Background => d_b.push(kl_gaussian_to_gmm(g, gmm_b)?),
        }
    }
    let unary_f = if d_f.is_empty() { prev.unary_f } else { mean(&d_f) };
    let unary_b = if d_b.is_empty() { prev.unary_b } else { mean(&d_b) };

    let mut e_f = Vec::new();
    let mut e_b = Vec::new();
    let mut e_x = Vec::new();
    for &(i, j) in kept_edges {
        let d = dists
            .get(&(i, j))
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("edge ({i}, {j}) has no distance")))?;
        match (labels[i], labels[j]) {
            (Label::Foreground, Label::Foreground) => e_f.push(d),
            (Label::Background, Label::Background) => e_b.push(d),
            _ => e_x.push(d),
        }
    }
    let pair_f = if e_f.is_empty() { prev.pair_f } else { mean(&e_f) };
    let pair_b = if e_b.is_empty() { prev.pair_b } else { mean(&e_b) };
    let pair_cross = if e_x.is_empty() {
        prev.pair_cross
    } else {
        median(&e_x)?
    };

    Ok(Bandwidths {
        unary_f: unary_f.max(BANDWIDTH_FLOOR),
        unary_b: unary_b.max(BANDWIDTH_FLOOR),
        pair: prev.pair,
        pair_f: pair_f.max(BANDWIDTH_FLOOR),
        pair_b: pair_b.max(BANDWIDTH_FLOOR),
        pair_cross: pair_cross.max(BANDWIDTH_FLOOR),
    })
}

struct RunContext {
    sps: Vec<Superpixel>,
    graph: AdjacencyGraph,
    dists: EdgeDistances,
    kept: Vec<(usize, usize)>,
    gaussians: Vec<GaussianModel>,
    states: Vec<TrimapLabel>,
}

fn prepare(img: &LabImage, trimap: &TriMap, cfg: &SegConfig, seed: u64) -> Result<RunContext> {
    if img.width != trimap.width || img.height != trimap.height {
        return Err(Error::InvalidInput(format!(
            "image {}x{} and trimap {}x{} differ",
            img.width, img.height, trimap.width, trimap.height
        )));
    }
    if cfg.m == 0 || cfg.runs == 0 || cfg.refine_iters == 0 {
        return Err(Error::InvalidInput(
            "m, runs, and refine_iters must all be at least 1".into(),
        ));
    }
    let mut sps = watershed_partition(img, seed, cfg.target_sp_size)?;
    assign_trimap_states(&mut sps, trimap);
    fit_superpixel_gaussians(&mut sps, img)?;
    let graph = superpixel_adjacency(&sps, img.width, img.height)?;
    let gaussians: Vec<GaussianModel> = sps
        .iter()
        .map(|sp| sp.gaussian.clone().expect("gaussians fitted"))
        .collect();
    let dists = edge_distances(&graph, &gaussians)?;
    let kept = select_pairwise_neighbors(&graph, &dists, cfg.m)?;
    let states = sps.iter().map(state_of).collect();
    Ok(RunContext {
        sps,
        graph,
        dists,
        kept,
        gaussians,
        states,
    })
}

fn unary_for_iteration(
    ctx: &RunContext,
    state: &IterationState,
    cfg: &SegConfig,
    t: usize,
) -> Result<UnaryTable> {
    if cfg.mode == Mode::Gb && t == 1 {
        let (table, _sigma) = unary_background_only(&ctx.gaussians, &state.gmm_b, &ctx.states)?;
        return Ok(table);
    }
    let gmm_f = state.gmm_f.as_ref().ok_or_else(|| {
        Error::InvalidInput("foreground mixture missing outside gb initialization".into())
    })?;
    unary_probabilities(
        &ctx.gaussians,
        gmm_f,
        &state.gmm_b,
        state.bandwidths.unary_f,
        state.bandwidths.unary_b,
        &ctx.states,
    )
}

fn solve(
    ctx: &RunContext,
    state: &IterationState,
    cfg: &SegConfig,
    unary: &UnaryTable,
    t: usize,
) -> Result<MarginalTable> {
    let labels = if t == 1 { None } else { Some(&state.labels[..]) };
    let pair = pairwise_probabilities(ctx.graph.n, &ctx.kept, &ctx.dists, &state.bandwidths, labels)?;
    match cfg.solver {
        Solver::Sgm => sgm_marginals(&assemble_assignment_matrix(&pair, unary, cfg.lambda)?),
        Solver::Pgm => pgm_marginals(&pair, unary, cfg.lambda, PGM_MAX_ROUNDS, PGM_TOL),
    }
}

/// Clamp BACKGROUND-trimap superpixels to background.
fn clamp_labels(labels: &mut [Label], states: &[TrimapLabel]) {
    for (l, s) in labels.iter_mut().zip(states) {
        if *s == TrimapLabel::Background {
            *l = Label::Background;
        }
    }
}

fn mask_from_labels(ctx: &RunContext, labels: &[Label], img: &LabImage) -> Result<SegMask> {
    let mut fg = vec![false; img.len()];
    for (sp, l) in ctx.sps.iter().zip(labels) {
        if *l == Label::Foreground {
            for &p in &sp.pixels {
                fg[p as usize] = true;
            }
        }
    }
    SegMask::new(img.width, img.height, fg)
}

/// Clamp the component count so a shrunken class can still be refit.
fn usable_k(k: usize, samples: usize) -> usize {
    k.min(samples / 3).max(1)
}

/// One seeded segmentation run.
pub fn run_segmentation(
    img: &LabImage,
    trimap: &TriMap,
    cfg: &SegConfig,
    seed: u64,
) -> Result<SegOutcome> {
    let ctx = prepare(img, trimap, cfg, seed)?;
    let mut state = init_models(img, &ctx.sps, trimap, cfg, seed, &ctx.kept, &ctx.dists)?;
    let mut collapsed = false;
    let mut iterations = 0;

    for t in 1..=cfg.refine_iters {
        iterations = t;
        state.t = t;
        let unary = unary_for_iteration(&ctx, &state, cfg, t)?;
        let marginals = solve(&ctx, &state, cfg, &unary, t)?;
        let mut labels = ml_labels(&marginals);
        clamp_labels(&mut labels, &ctx.states);

        let changed = labels
            .iter()
            .zip(&state.labels)
            .filter(|(a, b)| a != b)
            .count();
        let n_f = labels.iter().filter(|&&l| l == Label::Foreground).count();
        log::debug!(
            target: "graphseg::pipeline",
            "iter {t}: f={} b={} changed={}",
            n_f,
            labels.len() - n_f,
            changed
        );

        let converged = labels == state.labels;
        state.labels = labels;
        state.marginals = Some(marginals);
        if converged {
            break;
        }
        if n_f == 0 || n_f == state.labels.len() {
            collapsed = true;
            log::warn!(
                target: "graphseg::pipeline",
                "all superpixels collapsed to one class at iteration {t}"
            );
            break;
        }
        if t == cfg.refine_iters {
            break;
        }

        // Refit both mixtures from scratch on the relabeled pixel sets.
        let f_px = ctx
            .sps
            .iter()
            .zip(&state.labels)
            .filter(|(_, &l)| l == Label::Foreground)
            .flat_map(|(sp, _)| sp.pixels.iter().copied())
            .collect::<Vec<u32>>();
        let b_px = ctx
            .sps
            .iter()
            .zip(&state.labels)
            .filter(|(_, &l)| l == Label::Background)
            .flat_map(|(sp, _)| sp.pixels.iter().copied())
            .collect::<Vec<u32>>();
        let f_samples = strided_lab(&f_px, img);
        let b_samples = strided_lab(&b_px, img);
        let k_f = usable_k(cfg.k_f, f_samples.len());
        let k_b = usable_k(cfg.k_b, b_samples.len());
        if k_f < cfg.k_f || k_b < cfg.k_b {
            log::warn!(
                target: "graphseg::pipeline",
                "iteration {t}: class too small, fitting {k_f}/{k_b} components instead of {}/{}",
                cfg.k_f, cfg.k_b
            );
        }
        let gmm_f = fit_gmm(&f_samples, k_f, subseed(seed, 2 * t as u64 + 2))?;
        let gmm_b = fit_gmm(&b_samples, k_b, subseed(seed, 2 * t as u64 + 1))?;
        state.bandwidths = refine_bandwidths(
            &ctx.gaussians,
            &gmm_f,
            &gmm_b,
            &state.labels,
            &ctx.kept,
            &ctx.dists,
            &state.bandwidths,
        )?;
        state.gmm_f = Some(gmm_f);
        state.gmm_b = gmm_b;
    }

    Ok(SegOutcome {
        mask: mask_from_labels(&ctx, &state.labels, img)?,
        collapsed,
        iterations,
    })
}

/// Per-pixel majority over equally sized masks; an exact tie is background.
pub fn majority_vote(masks: &[SegMask]) -> Result<SegMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Empty("majority vote over no masks".into()))?;
    if masks
        .iter()
        .any(|m| m.width != first.width || m.height != first.height)
    {
        return Err(Error::InvalidInput("mask dimensions differ".into()));
    }
    let mut votes = vec![0usize; first.foreground.len()];
    for m in masks {
        for (v, &f) in votes.iter_mut().zip(&m.foreground) {
            *v += f as usize;
        }
    }
    let fg = votes.iter().map(|&v| 2 * v > masks.len()).collect();
    SegMask::new(first.width, first.height, fg)
}

/// Runs `cfg.runs` independent seeded runs (seeds `cfg.seed + run_index`)
/// and majority-votes the masks. Runs execute concurrently; the result does
/// not depend on scheduling.
pub fn segment(img: &LabImage, trimap: &TriMap, cfg: &SegConfig) -> Result<SegOutcome> {
    if cfg.runs == 0 {
        return Err(Error::InvalidInput("runs must be at least 1".into()));
    }
    let outcomes: Result<Vec<SegOutcome>> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| run_segmentation(img, trimap, cfg, cfg.seed.wrapping_add(r as u64)))
        .collect();
    let outcomes = outcomes?;
    let masks: Vec<SegMask> = outcomes.iter().map(|o| o.mask.clone()).collect();
    Ok(SegOutcome {
        mask: majority_vote(&masks)?,
        collapsed: outcomes.iter().any(|o| o.collapsed),
        iterations: outcomes.iter().map(|o| o.iterations).max().unwrap_or(0),
    })
}

/// Watershed label map of the first run, PNG-encoded, for debugging.
pub fn superpixel_debug_png(img: &LabImage, cfg: &SegConfig) -> Result<Vec<u8>> {
    let sps = watershed_partition(img, cfg.seed, cfg.target_sp_size)?;
    crate::superpixel::label_map_png(&sps, img.width, img.height)
}

/// Coordinate dump of the first iteration's assembled assignment matrix
/// (first run's seed), for debugging.
pub fn first_iteration_matrix_dump(
    img: &LabImage,
    trimap: &TriMap,
    cfg: &SegConfig,
) -> Result<String> {
    let ctx = prepare(img, trimap, cfg, cfg.seed)?;
    let state = init_models(img, &ctx.sps, trimap, cfg, cfg.seed, &ctx.kept, &ctx.dists)?;
    let unary = unary_for_iteration(&ctx, &state, cfg, 1)?;
    let pair = pairwise_probabilities(ctx.graph.n, &ctx.kept, &ctx.dists, &state.bandwidths, None)?;
    let matrix = assemble_assignment_matrix(&pair, &unary, cfg.lambda)?;
    Ok(matrix.dump_coordinates())
}
