//! Marker-based watershed over-segmentation and the superpixel adjacency
//! graph.
//!
//! Markers are sampled from local gradient minima with a seeded RNG; that is
//! the only source of randomness, so a fixed seed gives a fixed partition.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::colormodel::GaussianModel;
use crate::imageio::{LabImage, TriMap, TrimapLabel};
use crate::{Error, Result};

/// Regions smaller than this are merged into their most similar neighbor.
pub const MIN_SP_PIXELS: usize = 5;

/// A watershed region: sorted pixel indices plus the per-region color model
/// and trimap state once the later stages fill them in.
#[derive(Debug, Clone, PartialEq)]
pub struct Superpixel {
    pub id: usize,
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<u32>,
    pub gaussian: Option<GaussianModel>,
    pub trimap_state: Option<TrimapLabel>,
}

/// Undirected adjacency between superpixels that share a 4-neighbor pixel
/// boundary.
#[derive(Debug, Clone)]
pub struct AdjacencyGraph {
    pub n: usize,
    /// Canonical edge list, each `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }
}

/// Per-channel central differences (one-sided at borders), Euclidean
/// magnitude over all three LAB channels.
fn gradient_magnitude(img: &LabImage) -> Vec<f64> {
    let (w, h) = (img.width as usize, img.height as usize);
    let mut grad = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            let sx = (xr - xl) as f64;
            let sy = (yd - yu) as f64;
            let mut sum = 0.0;
            for c in 0..3 {
                let gx = (img.pixels[y * w + xr][c] - img.pixels[y * w + xl][c]) / sx;
                let gy = (img.pixels[yd * w + x][c] - img.pixels[yu * w + x][c]) / sy;
                sum += gx * gx + gy * gy;
            }
            grad[y * w + x] = sum.sqrt();
        }
    }
    grad
}

fn four_neighbors(idx: usize, w: usize, h: usize, out: &mut [usize; 4]) -> usize {
    let x = idx % w;
    let y = idx / w;
    let mut n = 0;
    if x > 0 {
        out[n] = idx - 1;
        n += 1;
    }
    if x + 1 < w {
        out[n] = idx + 1;
        n += 1;
    }
    if y > 0 {
        out[n] = idx - w;
        n += 1;
    }
    if y + 1 < h {
        out[n] = idx + w;
        n += 1;
    }
    n
}

/// Samples `count` distinct marker pixels: local gradient minima first,
/// arbitrary extra pixels only if the minima run out.
fn sample_markers(grad: &[f64], w: usize, h: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut nb = [0usize; 4];
    let mut minima = Vec::new();
    for idx in 0..grad.len() {
        let n = four_neighbors(idx, w, h, &mut nb);
        if nb[..n].iter().all(|&q| grad[idx] <= grad[q]) {
            minima.push(idx);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    minima.shuffle(&mut rng);
    if minima.len() >= count {
        minima.truncate(count);
        return minima;
    }
    let mut taken = vec![false; grad.len()];
    for &m in &minima {
        taken[m] = true;
    }
    let mut rest: Vec<usize> = (0..grad.len()).filter(|&i| !taken[i]).collect();
    rest.shuffle(&mut rng);
    minima.extend(rest.into_iter().take(count - minima.len()));
    minima
}

/// Floods the gradient surface from the markers (Meyer's algorithm with a
/// priority queue). Ties resolve by insertion order, which makes the flood a
/// breadth-first expansion on flat plateaus and keeps the result
/// deterministic.
fn flood(grad: &[f64], w: usize, h: usize, markers: &[usize]) -> Vec<usize> {
    const UNLABELED: usize = usize::MAX;
    let mut label = vec![UNLABELED; grad.len()];
    // Nonnegative finite f64s order the same as their bit patterns, so the
    // heap can avoid a float wrapper.
    let mut heap: BinaryHeap<Reverse<(u64, u64, usize)>> = BinaryHeap::new();
    let mut seq = 0u64;
    for (lab, &m) in markers.iter().enumerate() {
        label[m] = lab;
        heap.push(Reverse((grad[m].to_bits(), seq, m)));
        seq += 1;
    }
    let mut nb = [0usize; 4];
    while let Some(Reverse((_, _, idx))) = heap.pop() {
        let n = four_neighbors(idx, w, h, &mut nb);
        for &q in &nb[..n] {
            if label[q] == UNLABELED {
                label[q] = label[idx];
                heap.push(Reverse((grad[q].to_bits(), seq, q)));
                seq += 1;
            }
        }
    }
    label
}

/// Local 4-connectivity guard: true when the pixels of `label[idx]`'s
/// region inside the 8-neighborhood form a single 4-connected piece that
/// touches a 4-neighbor of `idx`, so reassigning `idx` cannot split or
/// empty its region.
fn is_simple(label: &[usize], idx: usize, w: usize, h: usize) -> bool {
    let own = label[idx];
    let x = (idx % w) as isize;
    let y = (idx / w) as isize;
    // 3x3 window flags, row-major, center at 4.
    let mut member = [false; 9];
    let mut any4 = false;
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            if label[ny as usize * w + nx as usize] == own {
                member[((dy + 1) * 3 + dx + 1) as usize] = true;
                any4 |= dx == 0 || dy == 0;
            }
        }
    }
    if !any4 {
        return false;
    }
    let mut seen = [false; 9];
    let mut comps = 0;
    for start in 0..9 {
        if start == 4 || !member[start] || seen[start] {
            continue;
        }
        comps += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(c) = stack.pop() {
            let (cx, cy) = ((c % 3) as isize, (c / 3) as isize);
            for (ddx, ddy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (mx, my) = (cx + ddx, cy + ddy);
                if !(0..3).contains(&mx) || !(0..3).contains(&my) {
                    continue;
                }
                let m = (my * 3 + mx) as usize;
                if m != 4 && member[m] && !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
    }
    comps == 1
}

/// One deterministic repair sweep over the flooded label map. The flood
/// resolves equal-gradient saddle pixels (corners of a color edge) by
/// wavefront arrival order, which image noise makes arbitrary; this pass
/// moves each boundary pixel to the 4-adjacent region whose mean color is
/// strictly closest, refusing moves that would break the source region's
/// 4-connectivity. Region means are fixed up front, so on a flat image or
/// an exact two-color edge the sweep changes nothing.
fn snap_boundaries(img: &LabImage, label: &mut [usize], n_regions: usize, w: usize, h: usize) {
    let mut sums = vec![[0.0f64; 4]; n_regions];
    for (idx, &lab) in label.iter().enumerate() {
        let px = img.pixels[idx];
        for c in 0..3 {
            sums[lab][c] += px[c];
        }
        sums[lab][3] += 1.0;
    }
    let means: Vec<[f64; 3]> = sums
        .iter()
        .map(|s| [s[0] / s[3].max(1.0), s[1] / s[3].max(1.0), s[2] / s[3].max(1.0)])
        .collect();

    let best_move = |label: &[usize], idx: usize| -> Option<(f64, usize)> {
        let mut nb = [0usize; 4];
        let own = label[idx];
        let own_d = lab_dist2(&img.pixels[idx], &means[own]);
        let n = four_neighbors(idx, w, h, &mut nb);
        let mut best: Option<(f64, usize)> = None;
        for &q in &nb[..n] {
            let cand = label[q];
            if cand == own {
                continue;
            }
            let d = lab_dist2(&img.pixels[idx], &means[cand]);
            let better = match best {
                None => d < own_d,
                Some((bd, bl)) => d < bd || (d == bd && cand < bl),
            };
            if better {
                best = Some((own_d - d, cand));
            }
        }
        best
    };

    // Schedule by descending improvement: a badly misassigned pixel must be
    // repaired before noise-level moves nearby can rearrange the local
    // topology and trip its connectivity guard.
    let mut queue: Vec<(f64, usize)> = (0..label.len())
        .filter_map(|idx| best_move(label, idx).map(|(gain, _)| (gain, idx)))
        .collect();
    queue.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    for (_, idx) in queue {
        if let Some((_, target)) = best_move(label, idx) {
            if is_simple(label, idx, w, h) {
                label[idx] = target;
            }
        }
    }
}

/// Watershed over-segmentation into roughly `pixel_count / target_sp_size`
/// regions. Every pixel lands in exactly one 4-connected region; boundary
/// pixels are snapped to the most similar adjacent region, and regions
/// smaller than [`MIN_SP_PIXELS`] are merged into their most similar
/// neighbor (mean LAB distance, ties to the smaller id).
pub fn watershed_partition(
    img: &LabImage,
    seed: u64,
    target_sp_size: usize,
) -> Result<Vec<Superpixel>> {
    if target_sp_size == 0 {
        return Err(Error::InvalidInput("target superpixel size is zero".into()));
    }
    let (w, h) = (img.width as usize, img.height as usize);
    let n_px = w * h;
    let grad = gradient_magnitude(img);
    let count = ((n_px + target_sp_size / 2) / target_sp_size).max(1);
    let markers = sample_markers(&grad, w, h, count.min(n_px), seed);
    let mut label = flood(&grad, w, h, &markers);
    snap_boundaries(img, &mut label, markers.len(), w, h);

    let mut regions: Vec<Vec<u32>> = vec![Vec::new(); markers.len()];
    for (idx, &lab) in label.iter().enumerate() {
        regions[lab].push(idx as u32);
    }
    regions.retain(|r| !r.is_empty());

    merge_tiny_regions(&mut regions, img);

    // Canonical ids: order regions by their smallest pixel index.
    regions.sort_by_key(|r| r[0]);
    Ok(regions
        .into_iter()
        .enumerate()
        .map(|(id, pixels)| Superpixel {
            id,
            pixels,
            gaussian: None,
            trimap_state: None,
        })
        .collect())
}

fn mean_lab(pixels: &[u32], img: &LabImage) -> [f64; 3] {
    let mut m = [0.0f64; 3];
    for &p in pixels {
        let px = img.pixels[p as usize];
        for c in 0..3 {
            m[c] += px[c];
        }
    }
    for c in &mut m {
        *c /= pixels.len() as f64;
    }
    m
}

fn lab_dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        let d = a[c] - b[c];
        s += d * d;
    }
    s
}

fn regions_adjacent(a: &[u32], b: &[u32], w: u32) -> bool {
    // Pixel lists are ascending, so a sorted membership probe suffices.
    for &p in a {
        let x = p % w;
        for q in [
            (x > 0).then(|| p - 1),
            Some(p + 1).filter(|_| x + 1 < w),
            p.checked_sub(w),
            Some(p + w),
        ]
        .into_iter()
        .flatten()
        {
            if b.binary_search(&q).is_ok() {
                return true;
            }
        }
    }
    false
}

fn merge_tiny_regions(regions: &mut Vec<Vec<u32>>, img: &LabImage) {
    loop {
        if regions.len() <= 1 {
            return;
        }
        let tiny = match regions
            .iter()
            .enumerate()
            .filter(|(_, r)| r.len() < MIN_SP_PIXELS)
            .min_by_key(|(i, r)| (r.len(), *i))
        {
            Some((i, _)) => i,
            None => return,
        };
        let means: Vec<[f64; 3]> = regions.iter().map(|r| mean_lab(r, img)).collect();
        let mut best: Option<(f64, usize)> = None;
        for j in 0..regions.len() {
            if j == tiny || !regions_adjacent(&regions[tiny], &regions[j], img.width) {
                continue;
            }
            let d = lab_dist2(&means[tiny], &means[j]);
            let better = match best {
                None => true,
                Some((bd, bj)) => d < bd || (d == bd && j < bj),
            };
            if better {
                best = Some((d, j));
            }
        }
        let Some((_, target)) = best else {
            // No adjacent region; with a 4-connected full cover this only
            // happens when the tiny region is the whole image.
            return;
        };
        let mut absorbed = regions.remove(tiny);
        let target = if target > tiny { target - 1 } else { target };
        regions[target].append(&mut absorbed);
        regions[target].sort_unstable();
    }
}

/// Builds the adjacency graph from a disjoint full cover of the image.
/// Errors when a pixel is claimed twice or left unclaimed.
pub fn superpixel_adjacency(
    sps: &[Superpixel],
    width: u32,
    height: u32,
) -> Result<AdjacencyGraph> {
    let n_px = width as usize * height as usize;
    let mut owner = vec![usize::MAX; n_px];
    for sp in sps {
        for &p in &sp.pixels {
            let p = p as usize;
            if p >= n_px {
                return Err(Error::InvalidInput(format!(
                    "superpixel {} holds out-of-range pixel {p}",
                    sp.id
                )));
            }
            if owner[p] != usize::MAX {
                return Err(Error::InvalidInput(format!(
                    "pixel {p} belongs to superpixels {} and {}",
                    owner[p], sp.id
                )));
            }
            owner[p] = sp.id;
        }
    }
    if let Some(p) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(Error::InvalidInput(format!("pixel {p} unclaimed")));
    }

    let w = width as usize;
    let mut edges = std::collections::BTreeSet::new();
    for y in 0..height as usize {
        for x in 0..w {
            let a = owner[y * w + x];
            if x + 1 < w {
                let b = owner[y * w + x + 1];
                if a != b {
                    edges.insert((a.min(b), a.max(b)));
                }
            }
            if y + 1 < height as usize {
                let b = owner[(y + 1) * w + x];
                if a != b {
                    edges.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    let mut neighbors = vec![Vec::new(); sps.len()];
    for &(i, j) in &edges {
        neighbors[i].push(j);
        neighbors[j].push(i);
    }
    for nb in &mut neighbors {
        nb.sort_unstable();
    }
    Ok(AdjacencyGraph {
        n: sps.len(),
        edges,
        neighbors,
    })
}

/// Assigns each superpixel the majority trimap label of its pixels.
/// Ties prefer BACKGROUND, then UNKNOWN, keeping the hard background
/// constraint conservative.
pub fn assign_trimap_states(sps: &mut [Superpixel], trimap: &TriMap) {
    for sp in sps {
        let mut counts = [0usize; 3];
        for &p in &sp.pixels {
            match trimap.labels[p as usize] {
                TrimapLabel::Background => counts[0] += 1,
                TrimapLabel::Unknown => counts[1] += 1,
                TrimapLabel::Foreground => counts[2] += 1,
            }
        }
        let state = if counts[0] >= counts[1] && counts[0] >= counts[2] {
            TrimapLabel::Background
        } else if counts[1] >= counts[2] {
            TrimapLabel::Unknown
        } else {
            TrimapLabel::Foreground
        };
        sp.trimap_state = Some(state);
    }
}

/// Renders the partition as a grayscale label map for debugging: superpixel
/// ids scaled over 0..=255.
pub fn label_map_png(sps: &[Superpixel], width: u32, height: u32) -> Result<Vec<u8>> {
    let n_px = width as usize * height as usize;
    let mut buf = vec![0u8; n_px];
    let scale = 255.0 / (sps.len().max(2) - 1) as f64;
    for sp in sps {
        let v = (sp.id as f64 * scale).round().clamp(0.0, 255.0) as u8;
        for &p in &sp.pixels {
            if (p as usize) < n_px {
                buf[p as usize] = v;
            }
        }
    }
    let img = image::GrayImage::from_raw(width, height, buf)
        .ok_or_else(|| Error::InvalidInput("label map dimensions mismatch".into()))?;
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    Ok(bytes)
}
