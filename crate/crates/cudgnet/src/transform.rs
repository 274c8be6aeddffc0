//! Input-space Transformation Component: fractal and affine image mixing.
//!
//! Each call picks one of three branches with equal probability and composes
//! it `k` times (fresh fractals and affine draws per repetition):
//!
//! 1. `x ⊕ f1`
//! 2. `(x ⊕ f1) ⊗ (x ⊕ x_aff)`
//! 3. `(x ⊕ f1) ⊗ (x ⊕ x_aff) ⊗ (x ⊕ f2)`
//!
//! `⊕` is an average blend `(a + b) / 2` (plain addition overflows the pixel
//! range) and `⊗` is elementwise multiplication; both keep values in [0, 1].
//! Fractal operands come from an iterated-function-system chaos game, or
//! from a pre-rendered on-disk bank when reproducibility across machines
//! matters. Labels are never touched.

use std::path::Path;

use ndarray::{ArrayD, Ix3, IxDyn};
use rand::Rng;
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::tape::Arr;

/// A rendered fractal operand, deterministic per seed and size.
#[derive(Debug, Clone)]
pub struct FractalImage {
    pub pixels: Arr, // (3, H, W) in [0,1]
    pub seed: u64,
}

/// Configuration for the Transformation Component.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcConfig {
    /// Repetition count is drawn uniformly from [0, k_max] per image.
    pub k_max: u32,
    pub rotation_deg: f64,
    pub translate_frac: f64,
    pub contrast_range: f64,
}

impl Default for TcConfig {
    fn default() -> Self {
        Self {
            k_max: 2,
            rotation_deg: 15.0,
            translate_frac: 0.1,
            contrast_range: 0.3,
        }
    }
}

impl TcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max > 10 {
            return Err(Error::InvalidParam(format!(
                "k_max={} outside [0,10]",
                self.k_max
            )));
        }
        if self.rotation_deg < 0.0 || self.translate_frac < 0.0 || self.contrast_range < 0.0 {
            return Err(Error::InvalidParam("negative affine range".into()));
        }
        Ok(())
    }
}

/// The three Eq-style branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcBranch {
    AddFractal,
    AddFractalMulAffine,
    Full,
}

impl TcBranch {
    /// Uniform draw; each branch has probability 1/3.
    pub fn sample(rng: &mut Pcg64) -> Self {
        match rng.gen_range(0u32..3) {
            0 => TcBranch::AddFractal,
            1 => TcBranch::AddFractalMulAffine,
            _ => TcBranch::Full,
        }
    }
}

fn as3(x: &Arr) -> ndarray::ArrayView3<'_, f64> {
    x.view().into_dimensionality::<Ix3>().expect("(C,H,W) image")
}

/// Average blend, clamped to [0,1].
pub fn blend(a: &Arr, b: &Arr) -> Arr {
    ((a + b) * 0.5).mapv(|v| v.clamp(0.0, 1.0))
}

// ---- fractal rendering ----

struct AffineMap {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    tx: f64,
    ty: f64,
}

impl AffineMap {
    fn spectral_norm(&self) -> f64 {
        // largest singular value of [[a,b],[c,d]]
        let (a, b, c, d) = (self.a, self.b, self.c, self.d);
        let t = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        let disc = (t * t - 4.0 * det * det).max(0.0).sqrt();
        (0.5 * (t + disc)).sqrt()
    }
}

fn sample_contractive_map(rng: &mut Pcg64) -> Result<AffineMap> {
    // resample on non-contractive draws, bounded retries
    for _ in 0..64 {
        let m = AffineMap {
            a: rng.gen_range(-1.0..1.0),
            b: rng.gen_range(-1.0..1.0),
            c: rng.gen_range(-1.0..1.0),
            d: rng.gen_range(-1.0..1.0),
            tx: rng.gen_range(-1.0..1.0),
            ty: rng.gen_range(-1.0..1.0),
        };
        if m.spectral_norm() < 0.9 {
            return Ok(m);
        }
    }
    Err(Error::Other(
        "failed to sample a contractive IFS map in 64 tries".into(),
    ))
}

/// Render an iterated-function-system attractor (chaos game) as an RGB image.
///
/// 2-8 contractive affine maps, 50k points, blurred binary mask tinted with
/// a random hue. Deterministic per (seed, size).
pub fn generate_fractal(seed: u64, size: (usize, usize)) -> Result<FractalImage> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::InvalidParam("fractal size must be positive".into()));
    }
    let mut rng = Pcg64::new(
        (seed as u128) << 64 | 0x5851f42d4c957f2d,
        0x14057b7ef767814f | 1,
    );
    let n_maps = rng.gen_range(2usize..=8);
    let maps: Vec<AffineMap> = (0..n_maps)
        .map(|_| sample_contractive_map(&mut rng))
        .collect::<Result<_>>()?;
    // selection weights proportional to |det| (area), floored for stability
    let weights: Vec<f64> = maps
        .iter()
        .map(|m| (m.a * m.d - m.b * m.c).abs() + 0.05)
        .collect();
    let wsum: f64 = weights.iter().sum();

    let n_points = 50_000usize;
    let warmup = 100usize;
    let mut pts = Vec::with_capacity(n_points);
    let (mut x, mut y) = (0.0f64, 0.0f64);
    for i in 0..(n_points + warmup) {
        let mut pick = rng.gen_range(0.0..wsum);
        let mut chosen = &maps[n_maps - 1];
        for (m, &wt) in maps.iter().zip(weights.iter()) {
            if pick < wt {
                chosen = m;
                break;
            }
            pick -= wt;
        }
        let nx = chosen.a * x + chosen.b * y + chosen.tx;
        let ny = chosen.c * x + chosen.d * y + chosen.ty;
        x = nx;
        y = ny;
        if i >= warmup {
            pts.push((x, y));
        }
    }

    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(px, py) in &pts {
        xmin = xmin.min(px);
        xmax = xmax.max(px);
        ymin = ymin.min(py);
        ymax = ymax.max(py);
    }
    let xr = (xmax - xmin).max(1e-9);
    let yr = (ymax - ymin).max(1e-9);

    let mut mask = vec![0.0f64; h * w];
    for &(px, py) in &pts {
        let col = (((px - xmin) / xr) * (w - 1) as f64).round() as usize;
        let row = (((py - ymin) / yr) * (h - 1) as f64).round() as usize;
        mask[row.min(h - 1) * w + col.min(w - 1)] = 1.0;
    }

    // 3x3 box blur
    let mut blurred = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let ii = i as i64 + di;
                    let jj = j as i64 + dj;
                    if ii >= 0 && ii < h as i64 && jj >= 0 && jj < w as i64 {
                        acc += mask[ii as usize * w + jj as usize];
                        cnt += 1.0;
                    }
                }
            }
            blurred[i * w + j] = acc / cnt;
        }
    }
    let peak = blurred.iter().fold(0.0f64, |a, &b| a.max(b)).max(1e-9);

    // random fully saturated hue tint
    let hue = rng.gen_range(0.0..360.0);
    let tint = hsv_to_rgb(hue, 0.7, 1.0);
    let mut pixels = ArrayD::zeros(IxDyn(&[3, h, w]));
    for i in 0..h {
        for j in 0..w {
            let v = (blurred[i * w + j] / peak).clamp(0.0, 1.0);
            for (ci, t) in tint.iter().enumerate() {
                pixels[[ci, i, j]] = (v * t).clamp(0.0, 1.0);
            }
        }
    }
    Ok(FractalImage { pixels, seed })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

// ---- affine jitter ----

/// Rotation + translation + contrast jitter within the config ranges.
/// Zero ranges reproduce the input exactly.
pub fn random_affine(x: &Arr, cfg: &TcConfig, rng: &mut Pcg64) -> Arr {
    let theta = if cfg.rotation_deg > 0.0 {
        rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians()
    } else {
        0.0
    };
    let x3 = as3(x);
    let (_, h, w) = x3.dim();
    let (tx, ty) = if cfg.translate_frac > 0.0 {
        (
            rng.gen_range(-cfg.translate_frac..=cfg.translate_frac) * w as f64,
            rng.gen_range(-cfg.translate_frac..=cfg.translate_frac) * h as f64,
        )
    } else {
        (0.0, 0.0)
    };
    let contrast = if cfg.contrast_range > 0.0 {
        rng.gen_range(1.0 - cfg.contrast_range..=1.0 + cfg.contrast_range)
    } else {
        1.0
    };
    affine_transform(x, theta, tx, ty, contrast)
}

/// Deterministic affine warp: rotate by `theta` about the image center,
/// translate by (tx, ty) pixels, then contrast-stretch around mid-gray.
pub fn affine_transform(x: &Arr, theta: f64, tx: f64, ty: f64, contrast: f64) -> Arr {
    let x3 = as3(x);
    let (c, h, w) = x3.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let cos = theta.cos();
    let sin = theta.sin();
    let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
    for i in 0..h {
        for j in 0..w {
            // inverse map: rotate output coords back into input space
            let dy = i as f64 - cy - ty;
            let dx = j as f64 - cx - tx;
            let sy = cos * dy + sin * dx + cy;
            let sx = -sin * dy + cos * dx + cx;
            // tolerance absorbs float fuzz at exact-grid rotations (e.g. 180 deg)
            let tol = 1e-9;
            if sy < -tol || sx < -tol || sy > (h - 1) as f64 + tol || sx > (w - 1) as f64 + tol {
                continue; // zero fill
            }
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let i0 = sy.floor() as usize;
            let j0 = sx.floor() as usize;
            let fy = sy - i0 as f64;
            let fx = sx - j0 as f64;
            let i1 = (i0 + 1).min(h - 1);
            let j1 = (j0 + 1).min(w - 1);
            for ci in 0..c {
                let v00 = x3[[ci, i0, j0]];
                let v01 = x3[[ci, i0, j1]];
                let v10 = x3[[ci, i1, j0]];
                let v11 = x3[[ci, i1, j1]];
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out[[ci, i, j]] = ((v - 0.5) * contrast + 0.5).clamp(0.0, 1.0);
            }
        }
    }
    out
}

// ---- fractal sourcing ----

/// Where TC gets its fractal operands: freshly generated per draw, or a
/// pre-rendered on-disk bank (lexicographic file order) for cross-machine
/// reproducibility.
pub enum FractalSource {
    Generated,
    Bank(Vec<Arr>),
}

impl FractalSource {
    pub fn from_bank_dir(dir: &Path, size: (usize, usize)) -> Result<Self> {
        let mut names: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Dataset(format!(
                "fractal bank {} contains no .png files",
                dir.display()
            )));
        }
        let mut images = Vec::with_capacity(names.len());
        for p in names {
            let img = image::open(&p)
                .map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?
                .to_rgb8();
            if (img.height() as usize, img.width() as usize) != size {
                return Err(Error::Dataset(format!(
                    "fractal {} is {}x{}, expected {}x{}",
                    p.display(),
                    img.height(),
                    img.width(),
                    size.0,
                    size.1
                )));
            }
            let mut arr = ArrayD::zeros(IxDyn(&[3, size.0, size.1]));
            for (j, i, px) in img.enumerate_pixels() {
                for ci in 0..3 {
                    arr[[ci, i as usize, j as usize]] = px.0[ci] as f64 / 255.0;
                }
            }
            images.push(arr);
        }
        Ok(Self::Bank(images))
    }

    fn next(&self, size: (usize, usize), rng: &mut Pcg64) -> Result<Arr> {
        match self {
            FractalSource::Generated => {
                let seed: u64 = rng.gen();
                Ok(generate_fractal(seed, size)?.pixels)
            }
            FractalSource::Bank(images) => {
                let idx = rng.gen_range(0..images.len());
                Ok(images[idx].clone())
            }
        }
    }
}

/// Apply one sampled branch once. Exposed for tests that inject operands.
pub fn apply_branch(x: &Arr, branch: TcBranch, f1: &Arr, x_aff: &Arr, f2: &Arr) -> Arr {
    let b1 = blend(x, f1);
    match branch {
        TcBranch::AddFractal => b1,
        TcBranch::AddFractalMulAffine => &b1 * &blend(x, x_aff),
        TcBranch::Full => &(&b1 * &blend(x, x_aff)) * &blend(x, f2),
    }
}

/// The Transformation Component: sample a branch and a repetition count
/// k ~ U[0, k_max], then apply the branch k times with fresh operands.
/// k = 0 returns the input unchanged.
pub fn apply_tc(x: &Arr, cfg: &TcConfig, rng: &mut Pcg64, fractals: &FractalSource) -> Result<Arr> {
    let x3 = as3(x);
    let (_, h, w) = x3.dim();
    let k = rng.gen_range(0..=cfg.k_max);
    let branch = TcBranch::sample(rng);
    let mut cur = x.clone();
    for _ in 0..k {
        let f1 = fractals.next((h, w), rng)?;
        let (x_aff, f2) = match branch {
            TcBranch::AddFractal => (cur.clone(), cur.clone()), // unused operands
            TcBranch::AddFractalMulAffine => (random_affine(&cur, cfg, rng), cur.clone()),
            TcBranch::Full => (
                random_affine(&cur, cfg, rng),
                fractals.next((h, w), rng)?,
            ),
        };
        cur = apply_branch(&cur, branch, &f1, &x_aff, &f2);
    }
    Ok(cur)
}
