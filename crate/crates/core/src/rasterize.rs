//! Tile-based forward alpha compositing of depth-sorted splats and the exact
//! analytic backward pass.
//!
//! Per pixel, splats are blended front to back:
//! `C = Σ_i c_i α_i Π_{j<i}(1-α_j) + bg Π(1-α_j)` with
//! `α_i = opacity_i * exp(-1/2 dᵀ Σ'⁻¹ d)`. The backward pass walks each
//! pixel back to front, reconstructing per-splat transmittance from the
//! stored final value, so only O(1) state per pixel survives the forward
//! pass.
//!
//! [`rasterize_reference`] is the oracle twin: an untiled per-pixel loop over
//! globally depth-sorted splats with no skip floor and no early termination.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::camera::Splat2D;
use crate::error::{Error, Result};

/// Thresholds and tiling parameters. `oracle()` disables every cutoff so
/// tiled and reference rasterization agree to floating-point noise.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Upper clamp on per-splat alpha, `None` disables.
    pub alpha_clamp: Option<f64>,
    /// Splats with alpha below this are skipped, `None` disables.
    pub alpha_skip: Option<f64>,
    /// Stop compositing a pixel once transmittance falls below this.
    pub term_threshold: Option<f64>,
    /// Half-extent of the binning bounding box in sigma units.
    pub bbox_sigma: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            alpha_clamp: Some(0.99),
            alpha_skip: Some(1.0 / 255.0),
            term_threshold: Some(1e-4),
            bbox_sigma: 3.0,
        }
    }
}

impl RasterConfig {
    /// Configuration for oracle comparisons and gradient checks: no clamp,
    /// no skip floor, no early termination, and a binning box wide enough
    /// (8 sigma) that truncation sits below 1e-12 of a splat's mass.
    pub fn oracle() -> Self {
        RasterConfig {
            tile_size: 16,
            alpha_clamp: None,
            alpha_skip: None,
            term_threshold: None,
            bbox_sigma: 8.0,
        }
    }
}

/// Rendered image plus the per-pixel diagnostics the spec of the backward
/// pass relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderFrame {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` linear color.
    pub color: Vec<f64>,
    /// `height * width` final transmittance after all splats.
    pub final_transmittance: Vec<f64>,
    pub background: [f64; 3],
    /// Splats blended per pixel.
    pub contrib_counts: Vec<u32>,
}

impl RenderFrame {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }
}

/// Per-tile splat lists, depth-sorted, built from the k-sigma bounding box
/// of each splat.
#[derive(Debug, Clone)]
pub struct TileBinning {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Splat indices (into the caller's splat slice) per tile, sorted by
    /// ascending depth with ties broken by source_index.
    pub lists: Vec<Vec<u32>>,
}

impl TileBinning {
    /// Continuous pixel-space rectangle covered by tile `(tx, ty)`.
    fn tile_rect(&self, tx: usize, ty: usize, width: usize, height: usize) -> (f64, f64, f64, f64) {
        let x0 = (tx * self.tile_size) as f64;
        let y0 = (ty * self.tile_size) as f64;
        let x1 = (((tx + 1) * self.tile_size).min(width)) as f64;
        let y1 = (((ty + 1) * self.tile_size).min(height)) as f64;
        (x0, y0, x1, y1)
    }
}

/// Opaque forward-pass intermediates consumed by [`rasterize_backward`].
#[derive(Debug, Clone)]
pub struct RasterTape {
    binning: TileBinning,
    /// Inverse 2D covariances, one per splat, same indexing as the input.
    conics: Vec<Matrix2<f64>>,
    /// Per pixel: exclusive end position within its tile's list where the
    /// forward sweep stopped (equals the list length unless terminated).
    stop_pos: Vec<u32>,
    config: RasterConfig,
    n_splats: usize,
}

/// Per-splat gradients out of the rasterizer, indexed like the input splat
/// slice. `d_cov2d` is a full-matrix gradient: symmetric-pair entries each
/// carry their own share.
#[derive(Debug, Clone)]
pub struct SplatGrads {
    pub d_center: Vec<Vector2<f64>>,
    pub d_cov2d: Vec<Matrix2<f64>>,
    pub d_color: Vec<[f64; 3]>,
    pub d_opacity: Vec<f64>,
}

impl SplatGrads {
    fn zeros(n: usize) -> Self {
        SplatGrads {
            d_center: vec![Vector2::zeros(); n],
            d_cov2d: vec![Matrix2::zeros(); n],
            d_color: vec![[0.0; 3]; n],
            d_opacity: vec![0.0; n],
        }
    }
}

fn validate_inputs(
    splats: &[Splat2D],
    colors: &[[f64; 3]],
    opacities: &[f64],
) -> Result<Vec<Matrix2<f64>>> {
    if colors.len() != splats.len() || opacities.len() != splats.len() {
        return Err(Error::InvalidParameter(format!(
            "splat/color/opacity lengths disagree: {} / {} / {}",
            splats.len(),
            colors.len(),
            opacities.len()
        )));
    }
    let mut conics = Vec::with_capacity(splats.len());
    for (i, s) in splats.iter().enumerate() {
        let finite = s.center_px.iter().all(|v| v.is_finite())
            && s.cov2d.iter().all(|v| v.is_finite())
            && s.depth.is_finite()
            && colors[i].iter().all(|v| v.is_finite())
            && opacities[i].is_finite();
        if !finite {
            return Err(Error::Render(format!("splat {i} has non-finite parameters")));
        }
        if !(opacities[i] > 0.0 && opacities[i] < 1.0) {
            return Err(Error::Render(format!(
                "splat {i} opacity {} outside (0, 1)",
                opacities[i]
            )));
        }
        let det = s.cov2d.determinant();
        if det <= 0.0 {
            return Err(Error::Render(format!(
                "splat {i} cov2d not positive definite (det = {det})"
            )));
        }
        let inv_det = 1.0 / det;
        conics.push(Matrix2::new(
            s.cov2d[(1, 1)] * inv_det,
            -s.cov2d[(0, 1)] * inv_det,
            -s.cov2d[(1, 0)] * inv_det,
            s.cov2d[(0, 0)] * inv_det,
        ));
    }
    Ok(conics)
}

/// Depth order with ties broken by ascending source_index, so output is
/// independent of input permutation.
fn sorted_order(splats: &[Splat2D]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let sa = &splats[a as usize];
        let sb = &splats[b as usize];
        sa.depth
            .partial_cmp(&sb.depth)
            .unwrap()
            .then(sa.source_index.cmp(&sb.source_index))
    });
    order
}

/// Bins splats into every tile their k-sigma bounding box overlaps.
pub fn bin_tiles(
    splats: &[Splat2D],
    order: &[u32],
    width: usize,
    height: usize,
    config: &RasterConfig,
) -> TileBinning {
    let tile_size = config.tile_size.max(1);
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &idx in order {
        let s = &splats[idx as usize];
        let (hx, hy) = s.bbox_half_extents(config.bbox_sigma);
        let x_lo = s.center_px.x - hx;
        let x_hi = s.center_px.x + hx;
        let y_lo = s.center_px.y - hy;
        let y_hi = s.center_px.y + hy;
        if x_hi < 0.0 || y_hi < 0.0 || x_lo >= width as f64 || y_lo >= height as f64 {
            continue;
        }
        if !x_lo.is_finite() || !x_hi.is_finite() || !y_lo.is_finite() || !y_hi.is_finite() {
            // Infinite binning margin: splat lands in every tile.
            for list in lists.iter_mut() {
                list.push(idx);
            }
            continue;
        }
        let tx0 = (x_lo.max(0.0) as usize) / tile_size;
        let ty0 = (y_lo.max(0.0) as usize) / tile_size;
        let tx1 = ((x_hi.min(width as f64 - 1e-9).max(0.0)) as usize) / tile_size;
        let ty1 = ((y_hi.min(height as f64 - 1e-9).max(0.0)) as usize) / tile_size;
        for ty in ty0..=ty1.min(tiles_y - 1) {
            for tx in tx0..=tx1.min(tiles_x - 1) {
                lists[ty * tiles_x + tx].push(idx);
            }
        }
    }
    TileBinning {
        tile_size,
        tiles_x,
        tiles_y,
        lists,
    }
}

struct TileResult {
    tx: usize,
    ty: usize,
    color: Vec<f64>,
    transmittance: Vec<f64>,
    counts: Vec<u32>,
    stop_pos: Vec<u32>,
}

/// Tiled forward rasterization. Returns the frame together with the tape the
/// backward pass needs.
pub fn rasterize(
    splats: &[Splat2D],
    colors: &[[f64; 3]],
    opacities: &[f64],
    image_size: (usize, usize),
    background: [f64; 3],
    config: &RasterConfig,
) -> Result<(RenderFrame, RasterTape)> {
    let (width, height) = image_size;
    let conics = validate_inputs(splats, colors, opacities)?;
    let order = sorted_order(splats);
    let binning = bin_tiles(splats, &order, width, height, config);

    let tile_results: Vec<TileResult> = (0..binning.lists.len())
        .into_par_iter()
        .map(|tile_idx| {
            let tx = tile_idx % binning.tiles_x;
            let ty = tile_idx / binning.tiles_x;
            let x0 = tx * binning.tile_size;
            let y0 = ty * binning.tile_size;
            let x1 = (x0 + binning.tile_size).min(width);
            let y1 = (y0 + binning.tile_size).min(height);
            let list = &binning.lists[tile_idx];
            let npix = (x1 - x0) * (y1 - y0);
            let mut color = vec![0.0f64; npix * 3];
            let mut transmittance = vec![1.0f64; npix];
            let mut counts = vec![0u32; npix];
            let mut stop_pos = vec![list.len() as u32; npix];
            for py in y0..y1 {
                for px in x0..x1 {
                    let local = (py - y0) * (x1 - x0) + (px - x0);
                    let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                    let mut t = 1.0f64;
                    let mut c = [0.0f64; 3];
                    let mut n = 0u32;
                    for (pos, &si) in list.iter().enumerate() {
                        let s = &splats[si as usize];
                        let d = p - s.center_px;
                        let q = &conics[si as usize];
                        let maha = d.x * d.x * q[(0, 0)]
                            + 2.0 * d.x * d.y * q[(0, 1)]
                            + d.y * d.y * q[(1, 1)];
                        let g = (-0.5 * maha).exp();
                        let mut alpha = opacities[si as usize] * g;
                        if let Some(clamp) = config.alpha_clamp {
                            alpha = alpha.min(clamp);
                        }
                        if let Some(floor) = config.alpha_skip {
                            if alpha < floor {
                                continue;
                            }
                        }
                        let w = alpha * t;
                        let col = &colors[si as usize];
                        c[0] += col[0] * w;
                        c[1] += col[1] * w;
                        c[2] += col[2] * w;
                        n += 1;
                        t *= 1.0 - alpha;
                        if let Some(term) = config.term_threshold {
                            if t < term {
                                stop_pos[local] = (pos + 1) as u32;
                                break;
                            }
                        }
                    }
                    color[local * 3] = c[0] + background[0] * t;
                    color[local * 3 + 1] = c[1] + background[1] * t;
                    color[local * 3 + 2] = c[2] + background[2] * t;
                    transmittance[local] = t;
                    counts[local] = n;
                }
            }
            TileResult {
                tx,
                ty,
                color,
                transmittance,
                counts,
                stop_pos,
            }
        })
        .collect();

    let mut frame = RenderFrame {
        width,
        height,
        color: vec![0.0; width * height * 3],
        final_transmittance: vec![1.0; width * height],
        background,
        contrib_counts: vec![0; width * height],
    };
    let mut stop_pos = vec![0u32; width * height];
    for tr in tile_results {
        let x0 = tr.tx * binning.tile_size;
        let y0 = tr.ty * binning.tile_size;
        let x1 = (x0 + binning.tile_size).min(width);
        let tile_w = x1 - x0;
        for (local, count) in tr.counts.iter().enumerate() {
            let px = x0 + local % tile_w;
            let py = y0 + local / tile_w;
            let gi = py * width + px;
            frame.color[gi * 3..gi * 3 + 3].copy_from_slice(&tr.color[local * 3..local * 3 + 3]);
            frame.final_transmittance[gi] = tr.transmittance[local];
            frame.contrib_counts[gi] = *count;
            stop_pos[gi] = tr.stop_pos[local];
        }
    }
    let n_splats = splats.len();
    Ok((
        frame,
        RasterTape {
            binning,
            conics,
            stop_pos,
            config: config.clone(),
            n_splats,
        },
    ))
}

/// Oracle rasterizer: per-pixel loop over globally depth-sorted splats with
/// no tiling, no skip floor and no early termination. Only the alpha clamp
/// is honored when configured.
pub fn rasterize_reference(
    splats: &[Splat2D],
    colors: &[[f64; 3]],
    opacities: &[f64],
    image_size: (usize, usize),
    background: [f64; 3],
    config: &RasterConfig,
) -> Result<RenderFrame> {
    let (width, height) = image_size;
    let conics = validate_inputs(splats, colors, opacities)?;
    let order = sorted_order(splats);
    let mut frame = RenderFrame {
        width,
        height,
        color: vec![0.0; width * height * 3],
        final_transmittance: vec![1.0; width * height],
        background,
        contrib_counts: vec![0; width * height],
    };
    for py in 0..height {
        for px in 0..width {
            let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
            let mut t = 1.0f64;
            let mut c = [0.0f64; 3];
            let mut n = 0u32;
            for &si in &order {
                let s = &splats[si as usize];
                let d = p - s.center_px;
                let q = &conics[si as usize];
                let maha =
                    d.x * d.x * q[(0, 0)] + 2.0 * d.x * d.y * q[(0, 1)] + d.y * d.y * q[(1, 1)];
                let g = (-0.5 * maha).exp();
                let mut alpha = opacities[si as usize] * g;
                if let Some(clamp) = config.alpha_clamp {
                    alpha = alpha.min(clamp);
                }
                let w = alpha * t;
                let col = &colors[si as usize];
                c[0] += col[0] * w;
                c[1] += col[1] * w;
                c[2] += col[2] * w;
                n += 1;
                t *= 1.0 - alpha;
            }
            let gi = py * width + px;
            frame.color[gi * 3] = c[0] + background[0] * t;
            frame.color[gi * 3 + 1] = c[1] + background[1] * t;
            frame.color[gi * 3 + 2] = c[2] + background[2] * t;
            frame.final_transmittance[gi] = t;
            frame.contrib_counts[gi] = n;
        }
    }
    Ok(frame)
}

/// Analytic adjoint of [`rasterize`].
///
/// Walks each pixel's splat list back to front, reconstructing the per-splat
/// transmittance from the stored final value, and replaying the forward
/// pass's skip/termination decisions. Splats the forward pass skipped get
/// exactly zero gradient. Per-splat sums are reduced tile by tile in a fixed
/// order so results are independent of thread scheduling.
pub fn rasterize_backward(
    splats: &[Splat2D],
    colors: &[[f64; 3]],
    opacities: &[f64],
    frame: &RenderFrame,
    tape: &RasterTape,
    d_color: &[f64],
) -> Result<SplatGrads> {
    if splats.len() != tape.n_splats {
        return Err(Error::State(format!(
            "tape was built for {} splats, got {}",
            tape.n_splats,
            splats.len()
        )));
    }
    if d_color.len() != frame.width * frame.height * 3 {
        return Err(Error::State(format!(
            "upstream gradient has {} values, expected {}",
            d_color.len(),
            frame.width * frame.height * 3
        )));
    }
    let width = frame.width;
    let height = frame.height;
    let binning = &tape.binning;
    let config = &tape.config;

    // Per-tile partial gradients, parallel over tiles.
    let partials: Vec<(usize, SplatGrads, Vec<u32>)> = (0..binning.lists.len())
        .into_par_iter()
        .map(|tile_idx| {
            let tx = tile_idx % binning.tiles_x;
            let ty = tile_idx / binning.tiles_x;
            let x0 = tx * binning.tile_size;
            let y0 = ty * binning.tile_size;
            let x1 = (x0 + binning.tile_size).min(width);
            let y1 = (y0 + binning.tile_size).min(height);
            let list = &binning.lists[tile_idx];
            // Gradients local to this tile's splat list.
            let mut local = SplatGrads::zeros(list.len());
            for py in y0..y1 {
                for px in x0..x1 {
                    let gi = py * width + px;
                    let dp = [
                        d_color[gi * 3],
                        d_color[gi * 3 + 1],
                        d_color[gi * 3 + 2],
                    ];
                    if dp == [0.0; 3] {
                        continue;
                    }
                    let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                    let t_end = frame.final_transmittance[gi];
                    let mut t_cur = t_end;
                    let mut suffix = [
                        frame.background[0] * t_end,
                        frame.background[1] * t_end,
                        frame.background[2] * t_end,
                    ];
                    let stop = tape.stop_pos[gi] as usize;
                    for pos in (0..stop).rev() {
                        let si = list[pos] as usize;
                        let s = &splats[si];
                        let d = p - s.center_px;
                        let q = &tape.conics[si];
                        let maha = d.x * d.x * q[(0, 0)]
                            + 2.0 * d.x * d.y * q[(0, 1)]
                            + d.y * d.y * q[(1, 1)];
                        let g = (-0.5 * maha).exp();
                        let raw_alpha = opacities[si] * g;
                        let clamped = match config.alpha_clamp {
                            Some(clamp) => raw_alpha > clamp,
                            None => false,
                        };
                        let alpha = if clamped {
                            config.alpha_clamp.unwrap()
                        } else {
                            raw_alpha
                        };
                        if let Some(floor) = config.alpha_skip {
                            if alpha < floor {
                                continue; // skipped in forward too
                            }
                        }
                        // Transmittance in front of this splat.
                        let t_i = t_cur / (1.0 - alpha);
                        t_cur = t_i;
                        let col = &colors[si];
                        let w = alpha * t_i;
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            local.d_color[pos][ch] += dp[ch] * w;
                            d_alpha +=
                                dp[ch] * (col[ch] * t_i - suffix[ch] / (1.0 - alpha));
                            suffix[ch] += col[ch] * w;
                        }
                        if clamped {
                            continue; // plateau of min(alpha, clamp)
                        }
                        let d_g = d_alpha * opacities[si];
                        local.d_opacity[pos] += d_alpha * g;
                        // g = exp(-1/2 maha), maha = dᵀQd, d = p - center
                        let d_maha = -0.5 * g * d_g;
                        let qd = Vector2::new(
                            q[(0, 0)] * d.x + q[(0, 1)] * d.y,
                            q[(1, 0)] * d.x + q[(1, 1)] * d.y,
                        );
                        local.d_center[pos] += qd * (-2.0 * d_maha);
                        // dL/dQ = d_maha d dᵀ; through Q = Σ'⁻¹ this is
                        // dL/dΣ' = -Q (dL/dQ) Q = -d_maha (Qd)(Qd)ᵀ.
                        local.d_cov2d[pos] += qd * qd.transpose() * -d_maha;
                    }
                }
            }
            (tile_idx, local, list.clone())
        })
        .collect();

    // Deterministic reduction in tile order.
    let mut grads = SplatGrads::zeros(splats.len());
    let mut sorted = partials;
    sorted.sort_by_key(|(tile_idx, _, _)| *tile_idx);
    for (_, local, list) in sorted {
        for (pos, &si) in list.iter().enumerate() {
            let si = si as usize;
            grads.d_center[si] += local.d_center[pos];
            grads.d_cov2d[si] += local.d_cov2d[pos];
            for ch in 0..3 {
                grads.d_color[si][ch] += local.d_color[pos][ch];
            }
            grads.d_opacity[si] += local.d_opacity[pos];
        }
    }
    Ok(grads)
}
