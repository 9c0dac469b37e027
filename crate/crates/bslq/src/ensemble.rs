//! Reproducible two-driver Brownian ensembles.
//!
//! Increments are pre-generated once per (seed, path count, grid) so that
//! every consumer — the regression-based adjoint solver, the closed-loop
//! simulator, the verification oracles — sees identical noise. Each path
//! draws from its own counter-seeded stream, which makes the ensemble
//! bit-identical for a fixed seed regardless of how work is threaded.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::TimeGrid;

/// Flat `[path][node][component]` storage for per-path processes.
#[derive(Debug, Clone)]
pub struct PathArray {
    n_paths: usize,
    n_nodes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PathArray {
    pub fn zeros(n_paths: usize, n_nodes: usize, dim: usize) -> Self {
        Self { n_paths, n_nodes, dim, data: vec![0.0; n_paths * n_nodes * dim] }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn offset(&self, path: usize, node: usize) -> usize {
        (path * self.n_nodes + node) * self.dim
    }

    #[inline]
    pub fn slice(&self, path: usize, node: usize) -> &[f64] {
        let o = self.offset(path, node);
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn slice_mut(&mut self, path: usize, node: usize) -> &mut [f64] {
        let o = self.offset(path, node);
        &mut self.data[o..o + self.dim]
    }

    #[inline]
    pub fn get(&self, path: usize, node: usize, comp: usize) -> f64 {
        self.data[self.offset(path, node) + comp]
    }

    /// Contiguous block of one path (all nodes), mutable.
    #[inline]
    pub fn path_mut(&mut self, path: usize) -> &mut [f64] {
        let o = path * self.n_nodes * self.dim;
        &mut self.data[o..o + self.n_nodes * self.dim]
    }

    /// Split into per-path mutable blocks for parallel fills.
    pub fn par_paths_mut(&mut self) -> rayon::slice::ChunksMut<'_, f64> {
        self.data.par_chunks_mut(self.n_nodes * self.dim)
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }
}

/// Pre-generated increments and running values of the two scalar drivers.
#[derive(Debug, Clone)]
pub struct BrownianEnsemble {
    pub seed: u64,
    pub grid: TimeGrid,
    n_paths: usize,
    /// Increments over each cell, variance dt.
    pub dw1: PathArray,
    pub dw2: PathArray,
    /// Driver values at each node (w(0) = 0).
    pub w1: PathArray,
    pub w2: PathArray,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-path stream seed: a fixed mix of the ensemble seed and path index.
fn path_seed(seed: u64, path: usize) -> u64 {
    splitmix64(seed ^ splitmix64(path as u64 ^ 0xA076_1D64_78BD_642F))
}

impl BrownianEnsemble {
    /// Generate `n_paths` independent paths of (W₁, W₂) on `grid`.
    pub fn generate(grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::Config("ensemble needs at least one path".into()));
        }
        let steps = grid.steps();
        let nodes = grid.len();
        let sqrt_dt = grid.dt().sqrt();
        let mut dw1 = PathArray::zeros(n_paths, steps, 1);
        let mut dw2 = PathArray::zeros(n_paths, steps, 1);
        let mut w1 = PathArray::zeros(n_paths, nodes, 1);
        let mut w2 = PathArray::zeros(n_paths, nodes, 1);

        // Generate increments path-parallel, then accumulate node values.
        let fill = |target_dw: &mut PathArray, target_w: &mut PathArray, which: u64| {
            target_dw.data.par_chunks_mut(steps).enumerate().for_each(|(p, block)| {
                let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed ^ which, p));
                for x in block.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = z * sqrt_dt;
                }
            });
            for p in 0..n_paths {
                let mut acc = 0.0;
                for k in 0..steps {
                    acc += target_dw.get(p, k, 0);
                    target_w.slice_mut(p, k + 1)[0] = acc;
                }
            }
        };
        fill(&mut dw1, &mut w1, 0x57_31);
        fill(&mut dw2, &mut w2, 0x57_32);

        Ok(Self { seed, grid: grid.clone(), n_paths, dw1, dw2, w1, w2 })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Same Brownian paths on a grid with half the steps: adjacent
    /// increments are summed. Used by weak-error refinement studies.
    pub fn coarsen(&self) -> Result<BrownianEnsemble> {
        let steps = self.grid.steps();
        if steps % 2 != 0 {
            return Err(Error::Config("coarsen needs an even step count".into()));
        }
        let coarse_grid = TimeGrid::new(self.grid.horizon(), steps / 2)?;
        let mut dw1 = PathArray::zeros(self.n_paths, steps / 2, 1);
        let mut dw2 = PathArray::zeros(self.n_paths, steps / 2, 1);
        let mut w1 = PathArray::zeros(self.n_paths, steps / 2 + 1, 1);
        let mut w2 = PathArray::zeros(self.n_paths, steps / 2 + 1, 1);
        for p in 0..self.n_paths {
            for k in 0..steps / 2 {
                dw1.slice_mut(p, k)[0] = self.dw1.get(p, 2 * k, 0) + self.dw1.get(p, 2 * k + 1, 0);
                dw2.slice_mut(p, k)[0] = self.dw2.get(p, 2 * k, 0) + self.dw2.get(p, 2 * k + 1, 0);
                w1.slice_mut(p, k + 1)[0] = self.w1.get(p, 2 * k + 2, 0);
                w2.slice_mut(p, k + 1)[0] = self.w2.get(p, 2 * k + 2, 0);
            }
        }
        Ok(BrownianEnsemble {
            seed: self.seed,
            grid: coarse_grid,
            n_paths: self.n_paths,
            dw1,
            dw2,
            w1,
            w2,
        })
    }
}

/// Fixed-size path chunking for deterministic parallel reductions: map each
/// chunk in parallel, then fold the chunk results in index order.
pub fn chunked_path_sums<T, F>(n_paths: usize, chunk: usize, map: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    let n_chunks = n_paths.div_ceil(chunk);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk;
            let hi = ((c + 1) * chunk).min(n_paths);
            map(lo..hi)
        })
        .collect()
}
