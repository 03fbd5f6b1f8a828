//! Poisson seamless cloning on the 5-point stencil.
//!
//! For every pixel `p` of the paste region Ω and each channel:
//!
//! ```text
//! 4 f_p - Σ_{q ∈ N(p) ∩ Ω} f_q = Σ_{q ∈ N(p)} (g_p - g_q) + Σ_{q ∈ N(p) \ Ω} f*_q
//! ```
//!
//! where `g` is the source patch and `f*` the target canvas. The operator is
//! applied matrix-free and solved with conjugate gradients, one channel at a
//! time.

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, RasterImage};

const NEIGHBORS: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// Paste rectangle in canvas coordinates plus an optional mask selecting Ω
/// inside it. Ω never includes the rectangle's 1-pixel border, so every Ω
/// pixel has its four neighbors inside both the source patch and the canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct PasteRegion {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub mask: Option<BinaryMask>,
}

impl PasteRegion {
    pub fn rect(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self { x, y, width, height, mask: None }
    }

    pub fn with_mask(mut self, mask: BinaryMask) -> Self {
        self.mask = Some(mask);
        self
    }

    /// Ω membership over the rectangle, row-major.
    fn omega(&self) -> Result<Vec<bool>> {
        if let Some(m) = &self.mask {
            if m.dims() != (self.width, self.height) {
                return Err(Error::DimensionMismatch(format!(
                    "region mask is {:?}, rectangle is {}x{}",
                    m.dims(),
                    self.width,
                    self.height
                )));
            }
        }
        let (w, h) = (self.width, self.height);
        let mut out = Vec::with_capacity(w as usize * h as usize);
        for y in 0..h {
            for x in 0..w {
                let interior = x > 0 && y > 0 && x + 1 < w && y + 1 < h;
                out.push(interior && self.mask.as_ref().is_none_or(|m| m.get(x, y)));
            }
        }
        Ok(out)
    }

    fn check_in_canvas(&self, canvas: (u32, u32)) -> Result<()> {
        if self.width == 0
            || self.height == 0
            || self.x as u64 + self.width as u64 > canvas.0 as u64
            || self.y as u64 + self.height as u64 > canvas.1 as u64
        {
            return Err(Error::InvalidRegion(format!(
                "rectangle {}x{} at ({},{}) is not inside the {}x{} canvas",
                self.width, self.height, self.x, self.y, canvas.0, canvas.1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverParams {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self { rel_tol: 1e-6, max_iter: 10_000 }
    }
}

/// Assembled per-channel Poisson system over Ω.
#[derive(Clone, Debug)]
pub struct LaplacianSystem {
    region: PasteRegion,
    /// Rectangle-local coordinates of the unknowns, row-major.
    pixels: Vec<(u32, u32)>,
    /// Rectangle pixel -> unknown index.
    index_map: Vec<Option<usize>>,
    /// Unknown-index neighbors that are also unknowns.
    neighbors: Vec<[Option<usize>; 4]>,
    rhs: [Vec<f64>; 3],
    target_in_omega: [Vec<f64>; 3],
}

impl LaplacianSystem {
    pub fn n_unknowns(&self) -> usize {
        self.pixels.len()
    }

    pub fn region(&self) -> &PasteRegion {
        &self.region
    }

    /// Rectangle-local coordinates of the unknowns.
    pub fn pixels(&self) -> &[(u32, u32)] {
        &self.pixels
    }

    pub fn index_of(&self, x: u32, y: u32) -> Option<usize> {
        if x >= self.region.width || y >= self.region.height {
            return None;
        }
        self.index_map[(y * self.region.width + x) as usize]
    }

    pub fn rhs(&self, channel: usize) -> &[f64] {
        &self.rhs[channel]
    }

    /// Target intensities on Ω; the default initial guess.
    pub fn target_guess(&self) -> [Vec<f64>; 3] {
        self.target_in_omega.clone()
    }

    /// `out = A x` with the 5-point stencil restricted to Ω.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, nb) in self.neighbors.iter().enumerate() {
            let mut v = 4.0 * x[i];
            for j in nb.iter().flatten() {
                v -= x[*j];
            }
            out[i] = v;
        }
    }

    /// Explicit row-major `n x n` matrix, for inspection and testing.
    pub fn dense_matrix(&self) -> Vec<f64> {
        let n = self.n_unknowns();
        let mut m = vec![0.0; n * n];
        for (i, nb) in self.neighbors.iter().enumerate() {
            m[i * n + i] = 4.0;
            for j in nb.iter().flatten() {
                m[i * n + j] = -1.0;
            }
        }
        m
    }
}

pub fn assemble_system(
    source: &RasterImage,
    target: &RasterImage,
    region: &PasteRegion,
) -> Result<LaplacianSystem> {
    if source.dims() != (region.width, region.height) {
        return Err(Error::DimensionMismatch(format!(
            "source is {:?}, region rectangle is {}x{}",
            source.dims(),
            region.width,
            region.height
        )));
    }
    region.check_in_canvas(target.dims())?;
    let omega = region.omega()?;
    let w = region.width as usize;

    let mut index_map = vec![None; omega.len()];
    let mut pixels = Vec::new();
    for (k, &inside) in omega.iter().enumerate() {
        if inside {
            index_map[k] = Some(pixels.len());
            pixels.push(((k % w) as u32, (k / w) as u32));
        }
    }
    if pixels.is_empty() {
        return Err(Error::InvalidRegion("paste region Ω is empty".into()));
    }

    let mut neighbors = Vec::with_capacity(pixels.len());
    let mut rhs: [Vec<f64>; 3] = Default::default();
    let mut target_in_omega: [Vec<f64>; 3] = Default::default();
    for &(px, py) in &pixels {
        let mut nb = [None; 4];
        let mut b = [0.0f64; 3];
        for (slot, (dx, dy)) in NEIGHBORS.iter().enumerate() {
            // Ω excludes the rectangle border, so neighbors stay in the rectangle.
            let qx = (px as i64 + dx) as u32;
            let qy = (py as i64 + dy) as u32;
            let q = index_map[qy as usize * w + qx as usize];
            nb[slot] = q;
            for (c, bc) in b.iter_mut().enumerate() {
                *bc += source.channel(px, py, c) as f64 - source.channel(qx, qy, c) as f64;
                if q.is_none() {
                    *bc += target.channel(region.x + qx, region.y + qy, c) as f64;
                }
            }
        }
        neighbors.push(nb);
        for c in 0..3 {
            rhs[c].push(b[c]);
            target_in_omega[c].push(target.channel(region.x + px, region.y + py, c) as f64);
        }
    }

    Ok(LaplacianSystem { region: region.clone(), pixels, index_map, neighbors, rhs, target_in_omega })
}

#[derive(Clone, Debug, Default)]
pub struct ChannelSolution {
    pub values: Vec<f64>,
    pub rel_residual: f64,
    pub iterations: usize,
    /// Relative residual after each iteration, starting with the initial guess.
    pub residual_history: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct PoissonSolution {
    pub channels: [ChannelSolution; 3],
}

impl PoissonSolution {
    pub fn max_rel_residual(&self) -> f64 {
        self.channels.iter().map(|c| c.rel_residual).fold(0.0, f64::max)
    }

    pub fn max_iterations(&self) -> usize {
        self.channels.iter().map(|c| c.iterations).max().unwrap_or(0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients on one right-hand side. Stops when `‖r‖/‖b‖ ≤ rel_tol`.
pub fn cg(
    system: &LaplacianSystem,
    b: &[f64],
    initial_guess: &[f64],
    params: &SolverParams,
) -> Result<ChannelSolution> {
    let n = system.n_unknowns();
    if b.len() != n || initial_guess.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "system has {n} unknowns, got rhs {} and guess {}",
            b.len(),
            initial_guess.len()
        )));
    }
    if !(params.rel_tol > 0.0) || params.max_iter == 0 {
        return Err(Error::InvalidArgument("rel_tol must be > 0 and max_iter >= 1".into()));
    }
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(ChannelSolution {
            values: vec![0.0; n],
            rel_residual: 0.0,
            iterations: 0,
            residual_history: vec![0.0],
        });
    }

    let mut x = initial_guess.to_vec();
    let mut ap = vec![0.0; n];
    system.apply(&x, &mut ap);
    let mut r: Vec<f64> = b.iter().zip(&ap).map(|(bi, ai)| bi - ai).collect();
    let mut rr = dot(&r, &r);
    let mut rel = rr.sqrt() / b_norm;
    let mut history = vec![rel];
    if rel <= params.rel_tol {
        return Ok(ChannelSolution { values: x, rel_residual: rel, iterations: 0, residual_history: history });
    }
    let mut p = r.clone();
    for it in 1..=params.max_iter {
        system.apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        rel = rr_new.sqrt() / b_norm;
        history.push(rel);
        if rel <= params.rel_tol {
            return Ok(ChannelSolution { values: x, rel_residual: rel, iterations: it, residual_history: history });
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(Error::NotConverged { iterations: params.max_iter, rel_residual: rel })
}

/// Solves all three channels.
pub fn solve_cg(
    system: &LaplacianSystem,
    params: &SolverParams,
    initial_guess: &[Vec<f64>; 3],
) -> Result<PoissonSolution> {
    let mut out = PoissonSolution::default();
    for c in 0..3 {
        out.channels[c] = cg(system, &system.rhs[c], &initial_guess[c], params)?;
    }
    Ok(out)
}

/// Writes the solved Ω values into a copy of the target; every other pixel is
/// left untouched. Values are rounded half away from zero and clamped.
pub fn compose(system: &LaplacianSystem, solution: &PoissonSolution, target: &RasterImage) -> RasterImage {
    let mut out = target.clone();
    let r = &system.region;
    for (i, &(px, py)) in system.pixels.iter().enumerate() {
        let mut rgb = [0u8; 3];
        for (c, v) in rgb.iter_mut().enumerate() {
            *v = solution.channels[c].values[i].round().clamp(0.0, 255.0) as u8;
        }
        out.set(r.x + px, r.y + py, rgb);
    }
    out
}

/// assemble → solve (initial guess = target on Ω) → compose.
pub fn seamless_clone(
    source: &RasterImage,
    target: &RasterImage,
    region: &PasteRegion,
    params: &SolverParams,
) -> Result<RasterImage> {
    let system = assemble_system(source, target, region)?;
    let solution = solve_cg(&system, params, &system.target_guess())?;
    Ok(compose(&system, &solution, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: u32, h: u32, rng: &mut impl Rng) -> RasterImage {
        RasterImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn single_pixel_rhs() {
        let src = RasterImage::filled(3, 3, [50, 50, 50]);
        let tgt = RasterImage::filled(5, 5, [200, 200, 200]);
        let sys = assemble_system(&src, &tgt, &PasteRegion::rect(1, 1, 3, 3)).unwrap();
        assert_eq!(sys.n_unknowns(), 1);
        for c in 0..3 {
            assert_eq!(sys.rhs(c), &[800.0]);
        }
        // from a zero start CG needs exactly one step
        let zero = [vec![0.0], vec![0.0], vec![0.0]];
        let sol = solve_cg(&sys, &SolverParams::default(), &zero).unwrap();
        assert_eq!(sol.max_iterations(), 1);
        assert!((sol.channels[0].values[0] - 200.0).abs() < 1e-12);
        // the target-valued guess is already exact
        let sol = solve_cg(&sys, &SolverParams::default(), &sys.target_guess()).unwrap();
        assert_eq!(sol.max_iterations(), 0);
    }

    #[test]
    fn rhs_matches_brute_force_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            // 6x6 rectangle → 4x4 Ω
            let src = random_image(6, 6, &mut rng);
            let tgt = random_image(12, 10, &mut rng);
            let (ox, oy) = (rng.random_range(0..=6), rng.random_range(0..=4));
            let sys = assemble_system(&src, &tgt, &PasteRegion::rect(ox, oy, 6, 6)).unwrap();
            assert_eq!(sys.n_unknowns(), 16);
            for c in 0..3 {
                let mut k = 0;
                for y in 1..5i64 {
                    for x in 1..5i64 {
                        let mut expect = 0.0;
                        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                            let (qx, qy) = (x + dx, y + dy);
                            let gp = src.channel(x as u32, y as u32, c) as f64;
                            let gq = src.channel(qx as u32, qy as u32, c) as f64;
                            expect += gp - gq;
                            let inside = (1..5).contains(&qx) && (1..5).contains(&qy);
                            if !inside {
                                expect += tgt.channel(ox + qx as u32, oy + qy as u32, c) as f64;
                            }
                        }
                        assert_eq!(sys.rhs(c)[k], expect);
                        k += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn source_equal_target_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tgt = random_image(20, 20, &mut rng);
        let region = PasteRegion::rect(4, 5, 9, 7);
        let src = tgt.crop(4, 5, 9, 7).unwrap();
        let sys = assemble_system(&src, &tgt, &region).unwrap();
        let guess = sys.target_guess();
        let mut ax = vec![0.0; sys.n_unknowns()];
        for c in 0..3 {
            sys.apply(&guess[c], &mut ax);
            assert_eq!(ax, sys.rhs(c));
        }
        assert_eq!(seamless_clone(&src, &tgt, &region, &SolverParams::default()).unwrap(), tgt);
    }

    #[test]
    fn unreachable_tolerance_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = random_image(10, 10, &mut rng);
        let tgt = random_image(16, 16, &mut rng);
        let sys = assemble_system(&src, &tgt, &PasteRegion::rect(2, 2, 10, 10)).unwrap();
        let zero: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; sys.n_unknowns()]);
        let err = solve_cg(&sys, &SolverParams { rel_tol: 1e-12, max_iter: 1 }, &zero).unwrap_err();
        match err {
            Error::NotConverged { iterations, rel_residual } => {
                assert_eq!(iterations, 1);
                assert!(rel_residual > 1e-12);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn constant_source_on_constant_target_disappears() {
        let src = RasterImage::filled(11, 9, [30, 90, 10]);
        let tgt = RasterImage::filled(30, 30, [180, 40, 220]);
        let region = PasteRegion::rect(7, 3, 11, 9);
        let out = seamless_clone(&src, &tgt, &region, &SolverParams::default()).unwrap();
        assert_eq!(out, tgt);
    }

    #[test]
    fn region_errors() {
        let src = RasterImage::filled(2, 2, [0, 0, 0]);
        let tgt = RasterImage::filled(8, 8, [0, 0, 0]);
        // 2x2 rectangle has no interior
        assert!(matches!(
            assemble_system(&src, &tgt, &PasteRegion::rect(0, 0, 2, 2)),
            Err(Error::InvalidRegion(_))
        ));
        let src = RasterImage::filled(4, 4, [0, 0, 0]);
        assert!(matches!(
            assemble_system(&src, &tgt, &PasteRegion::rect(5, 5, 4, 4)),
            Err(Error::InvalidRegion(_))
        ));
        assert!(matches!(
            assemble_system(&src, &tgt, &PasteRegion::rect(0, 0, 5, 4)),
            Err(Error::DimensionMismatch(_))
        ));
        let empty_mask = BinaryMask::empty(4, 4);
        assert!(matches!(
            assemble_system(&src, &tgt, &PasteRegion::rect(0, 0, 4, 4).with_mask(empty_mask)),
            Err(Error::InvalidRegion(_))
        ));
    }

    #[test]
    fn mask_restricts_omega_to_interior() {
        let src = RasterImage::filled(5, 5, [0, 0, 0]);
        let tgt = RasterImage::filled(5, 5, [0, 0, 0]);
        let mask = BinaryMask::from_fn(5, 5, |x, _| x <= 2);
        let sys = assemble_system(&src, &tgt, &PasteRegion::rect(0, 0, 5, 5).with_mask(mask)).unwrap();
        assert_eq!(sys.pixels(), &[(1, 1), (2, 1), (1, 2), (2, 2), (1, 3), (2, 3)]);
        assert_eq!(sys.index_of(0, 0), None);
        assert_eq!(sys.index_of(2, 3), Some(5));
    }
}
