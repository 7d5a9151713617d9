//! Tile-binned front-to-back alpha compositing with optional capture of every
//! per-pixel contribution, plus an untiled brute-force reference renderer.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::camera::{project_kernel, Camera, PixelGrid, ProjectedKernel, DEFAULT_LOWPASS};
use crate::error::{Error, Result};
use crate::gaussian::invert_cov2d;
use crate::image::Image;
use crate::scene::{Scene, SH_COEFFS};
use crate::sh::{eval_sh_basis, eval_view_color};

/// Tile side in grid pixels.
pub const TILE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Contributions with `G σ` below this are skipped.
    pub alpha_min: f64,
    /// A pixel stops compositing once its transmittance falls below this.
    pub t_min: f64,
    /// Binning radius in standard deviations. `None` derives it per kernel
    /// from `alpha_min`, so binning never drops a contribution the alpha
    /// test would keep.
    pub extent: Option<f64>,
    pub lowpass: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            alpha_min: 1.0 / 4096.0,
            t_min: 1e-4,
            extent: None,
            lowpass: DEFAULT_LOWPASS,
        }
    }
}

impl RenderSettings {
    /// All approximations off: every kernel is composited at every pixel.
    pub fn exact() -> Self {
        Self {
            alpha_min: 0.0,
            t_min: 0.0,
            extent: Some(f64::INFINITY),
            lowpass: DEFAULT_LOWPASS,
        }
    }

    /// Squared Mahalanobis support radius for a kernel of the given opacity;
    /// negative when the kernel can never pass the alpha test.
    pub fn support_radius2(&self, opacity: f64) -> f64 {
        match self.extent {
            Some(e) => e * e,
            None if self.alpha_min <= 0.0 => f64::INFINITY,
            None if opacity <= self.alpha_min => -1.0,
            None => 2.0 * (opacity / self.alpha_min).ln(),
        }
    }
}

/// One projected kernel in one view.
#[derive(Debug, Clone)]
pub struct SplatEntry {
    pub id: usize,
    pub proj: ProjectedKernel,
    pub inv_cov: Matrix2<f64>,
    pub opacity: f64,
    /// View-dependent colour `c̃` and which channels are above the clamp.
    pub color: [f64; 3],
    pub color_active: [bool; 3],
    /// SH basis evaluated at the view direction.
    pub basis: [f64; SH_COEFFS],
    pub radius2: f64,
}

#[derive(Debug, Clone)]
pub struct SplatList {
    pub grid: PixelGrid,
    pub background: [f64; 3],
    /// Ascending depth, ties broken by kernel id.
    pub entries: Vec<SplatEntry>,
    /// Entry index for each scene kernel, `None` when culled.
    pub entry_of: Vec<Option<usize>>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// `(offset, count)` into `tile_items` per tile, row-major.
    pub tile_ranges: Vec<(usize, usize)>,
    /// Entry indices, depth-ordered within each tile.
    pub tile_items: Vec<u32>,
    alpha_min: f64,
    t_min: f64,
}

impl SplatList {
    pub fn tile(&self, tx: usize, ty: usize) -> &[u32] {
        let (off, n) = self.tile_ranges[ty * self.tiles_x + tx];
        &self.tile_items[off..off + n]
    }

    pub fn entry_for(&self, kernel: usize) -> Option<&SplatEntry> {
        self.entry_of[kernel].map(|i| &self.entries[i])
    }
}

/// One composited contribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatRecord {
    /// Linear index into the render grid.
    pub pixel: u32,
    pub entry: u32,
    pub g: f64,
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub t: f64,
    /// Colour composited behind this splat, background included.
    pub suffix: [f64; 3],
}

/// Captured records, pixel-major in compositing order, with a per-kernel
/// index for the derivative passes.
#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub records: Vec<SplatRecord>,
    kernel_offsets: Vec<usize>,
    kernel_records: Vec<u32>,
}

impl Capture {
    fn new(records: Vec<SplatRecord>, list: &SplatList) -> Self {
        let n = list.entry_of.len();
        let mut counts = vec![0usize; n + 1];
        for r in &records {
            counts[list.entries[r.entry as usize].id + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut cursor = counts.clone();
        let mut kernel_records = vec![0u32; records.len()];
        for (i, r) in records.iter().enumerate() {
            let k = list.entries[r.entry as usize].id;
            kernel_records[cursor[k]] = i as u32;
            cursor[k] += 1;
        }
        Self {
            records,
            kernel_offsets: counts,
            kernel_records,
        }
    }

    /// Records of one scene kernel, in pixel order.
    pub fn for_kernel(&self, kernel: usize) -> impl Iterator<Item = &SplatRecord> + '_ {
        let (lo, hi) = match (self.kernel_offsets.get(kernel), self.kernel_offsets.get(kernel + 1)) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => (0, 0),
        };
        self.kernel_records[lo..hi].iter().map(move |&i| &self.records[i as usize])
    }

    pub fn kernel_count(&self, kernel: usize) -> usize {
        match (self.kernel_offsets.get(kernel), self.kernel_offsets.get(kernel + 1)) {
            (Some(&lo), Some(&hi)) => hi - lo,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderTarget {
    pub image: Image,
    /// Transmittance left for the background at each pixel.
    pub final_t: Vec<f64>,
    pub capture: Option<Capture>,
}

pub fn build_splat_list(scene: &Scene, camera: &Camera, grid: PixelGrid, settings: &RenderSettings) -> Result<SplatList> {
    let mut entries = Vec::with_capacity(scene.len());
    for (id, k) in scene.kernels.iter().enumerate() {
        let radius2 = settings.support_radius2(k.opacity);
        if radius2 < 0.0 {
            continue;
        }
        let proj = match project_kernel(camera, k, settings.lowpass) {
            Ok(p) => p,
            Err(Error::BehindCamera(_)) => continue,
            Err(e) => return Err(e),
        };
        let inv_cov = invert_cov2d(&proj.cov2d)?;
        let basis = eval_sh_basis(&proj.view_dir, scene.sh_degree)?;
        let (color, color_active) = eval_view_color(&basis, &k.sh);
        entries.push(SplatEntry {
            id,
            proj,
            inv_cov,
            opacity: k.opacity,
            color,
            color_active,
            basis: basis.values,
            radius2,
        });
    }
    entries.sort_by(|a, b| a.proj.depth.total_cmp(&b.proj.depth).then(a.id.cmp(&b.id)));
    let mut entry_of = vec![None; scene.len()];
    for (i, e) in entries.iter().enumerate() {
        entry_of[e.id] = Some(i);
    }

    let tiles_x = grid.cols.div_ceil(TILE);
    let tiles_y = grid.rows.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, e) in entries.iter().enumerate() {
        let Some(((c0, c1), (r0, r1))) = covered_grid_box(&grid, e) else {
            continue;
        };
        for ty in r0 / TILE..=r1 / TILE {
            for tx in c0 / TILE..=c1 / TILE {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    let mut tile_ranges = Vec::with_capacity(bins.len());
    let mut tile_items = Vec::with_capacity(bins.iter().map(Vec::len).sum());
    for b in &bins {
        tile_ranges.push((tile_items.len(), b.len()));
        tile_items.extend_from_slice(b);
    }
    Ok(SplatList {
        grid,
        background: scene.background.into(),
        entries,
        entry_of,
        tiles_x,
        tiles_y,
        tile_ranges,
        tile_items,
        alpha_min: settings.alpha_min,
        t_min: settings.t_min,
    })
}

/// Grid-pixel box covered by the axis-aligned bound of the support ellipse.
fn covered_grid_box(grid: &PixelGrid, e: &SplatEntry) -> Option<((usize, usize), (usize, usize))> {
    if grid.is_empty() {
        return None;
    }
    if e.radius2.is_infinite() {
        return Some(((0, grid.cols - 1), (0, grid.rows - 1)));
    }
    let r = e.radius2.sqrt();
    let hx = r * e.proj.cov2d[(0, 0)].sqrt();
    let hy = r * e.proj.cov2d[(1, 1)].sqrt();
    let cols = grid.col_range(e.proj.pi.x - hx, e.proj.pi.x + hx)?;
    let rows = grid.row_range(e.proj.pi.y - hy, e.proj.pi.y + hy)?;
    Some((cols, rows))
}

#[inline]
fn mahalanobis2(inv: &Matrix2<f64>, pi: &Vector2<f64>, x: &Vector2<f64>) -> f64 {
    let d = pi - x;
    inv[(0, 0)] * d.x * d.x + 2.0 * inv[(0, 1)] * d.x * d.y + inv[(1, 1)] * d.y * d.y
}

struct TileOutput {
    pixels: Vec<(u32, [f64; 3], f64)>,
    records: Vec<SplatRecord>,
}

fn composite_tile(list: &SplatList, tx: usize, ty: usize, capture: bool) -> TileOutput {
    let grid = &list.grid;
    let items = list.tile(tx, ty);
    let bg = list.background;
    let (c0, c1) = (tx * TILE, ((tx + 1) * TILE).min(grid.cols));
    let (r0, r1) = (ty * TILE, ((ty + 1) * TILE).min(grid.rows));
    let mut out = TileOutput {
        pixels: Vec::with_capacity((c1 - c0) * (r1 - r0)),
        records: Vec::new(),
    };
    for row in r0..r1 {
        for col in c0..c1 {
            let pixel = (row * grid.cols + col) as u32;
            let x = grid.center(col, row);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let first = out.records.len();
            for &ei in items {
                let e = &list.entries[ei as usize];
                let m2 = mahalanobis2(&e.inv_cov, &e.proj.pi, &x);
                if m2 > e.radius2 {
                    continue;
                }
                let g = (-0.5 * m2).exp();
                let alpha = g * e.opacity;
                if alpha < list.alpha_min || alpha == 0.0 {
                    continue;
                }
                for ch in 0..3 {
                    c[ch] += alpha * e.color[ch] * t;
                }
                if capture {
                    out.records.push(SplatRecord {
                        pixel,
                        entry: ei,
                        g,
                        alpha,
                        t,
                        suffix: [0.0; 3],
                    });
                }
                t *= 1.0 - alpha;
                if t < list.t_min {
                    break;
                }
            }
            for ch in 0..3 {
                c[ch] += t * bg[ch];
            }
            if capture {
                let mut s = bg;
                for r in out.records[first..].iter_mut().rev() {
                    r.suffix = s;
                    let col = &list.entries[r.entry as usize].color;
                    for ch in 0..3 {
                        s[ch] = r.alpha * col[ch] + (1.0 - r.alpha) * s[ch];
                    }
                }
            }
            out.pixels.push((pixel, c, t));
        }
    }
    out
}

pub fn composite_forward(list: &SplatList, capture: bool) -> RenderTarget {
    let grid = &list.grid;
    let tiles: Vec<TileOutput> = (0..list.tiles_x * list.tiles_y)
        .into_par_iter()
        .map(|i| composite_tile(list, i % list.tiles_x, i / list.tiles_x, capture))
        .collect();
    let mut image = Image::new(grid.cols, grid.rows);
    let mut final_t = vec![1.0; grid.len()];
    let mut records = Vec::with_capacity(if capture { tiles.iter().map(|t| t.records.len()).sum() } else { 0 });
    for tile in tiles {
        for (p, c, t) in tile.pixels {
            image.data[p as usize] = c;
            final_t[p as usize] = t;
        }
        records.extend(tile.records);
    }
    RenderTarget {
        image,
        final_t,
        capture: capture.then(|| Capture::new(records, list)),
    }
}

/// Binning plus compositing in one call.
pub fn render(
    scene: &Scene,
    camera: &Camera,
    grid: PixelGrid,
    settings: &RenderSettings,
    capture: bool,
) -> Result<(SplatList, RenderTarget)> {
    let list = build_splat_list(scene, camera, grid, settings)?;
    let target = composite_forward(&list, capture);
    Ok((list, target))
}

/// Full-resolution image with the given settings.
pub fn render_image(scene: &Scene, camera: &Camera, settings: &RenderSettings) -> Result<Image> {
    Ok(render(scene, camera, camera.full_grid(), settings, false)?.1.image)
}

/// Untiled oracle: every pixel sorts every visible kernel itself and
/// composites all of them with no cutoff or early termination.
pub fn render_reference(scene: &Scene, camera: &Camera, grid: PixelGrid, lowpass: f64) -> Result<Image> {
    let mut visible = Vec::new();
    for (id, k) in scene.kernels.iter().enumerate() {
        let proj = match project_kernel(camera, k, lowpass) {
            Ok(p) => p,
            Err(Error::BehindCamera(_)) => continue,
            Err(e) => return Err(e),
        };
        let inv = proj
            .cov2d
            .try_inverse()
            .ok_or_else(|| Error::NumericalDegeneracy("singular 2D covariance".into()))?;
        let basis = eval_sh_basis(&proj.view_dir, scene.sh_degree)?;
        let (color, _) = eval_view_color(&basis, &k.sh);
        visible.push((id, proj.depth, proj.pi, inv, k.opacity, color));
    }
    let bg: [f64; 3] = scene.background.into();
    let data: Vec<[f64; 3]> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.center(i % grid.cols, i / grid.cols);
            let mut order: Vec<usize> = (0..visible.len()).collect();
            order.sort_by(|&a, &b| visible[a].1.total_cmp(&visible[b].1).then(visible[a].0.cmp(&visible[b].0)));
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for &v in &order {
                let (_, _, pi, inv, opacity, color) = &visible[v];
                let d = pi - x;
                let g = (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp();
                let a = g * opacity;
                for ch in 0..3 {
                    c[ch] += a * color[ch] * t;
                }
                t *= 1.0 - a;
            }
            for ch in 0..3 {
                c[ch] += t * bg[ch];
            }
            c
        })
        .collect();
    Ok(Image {
        width: grid.cols,
        height: grid.rows,
        data,
    })
}
