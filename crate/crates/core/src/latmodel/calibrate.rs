//! Fitting the latency model from timed runs over a design grid.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::time::Instant;

use super::flops::{cache_bytes, flops_block, CacheVariant};
use super::regression::fit;
use super::{DesignPoint, LatencyModel};
use crate::error::{Error, Result};
use crate::kernel::golden::{seeded_input, seeded_weights};
use crate::kernel::{forward_full, forward_masked_ycache, BlockActivations, BlockWeights, Tensor3};
use crate::types::{MaskSpec, TokenGrid};

/// Something that can be timed: the compute of one block at a design point
/// and the copy of a memory-tier blob of a given size. Times are seconds.
pub trait KernelRunner {
    fn compute_seconds(
        &mut self,
        grid: TokenGrid,
        m: f64,
        cached: bool,
        reps: usize,
    ) -> Result<Vec<f64>>;
    fn load_seconds(&mut self, bytes: u64, reps: usize) -> Result<Vec<f64>>;
}

/// Deterministic linear device used by the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatedBackend {
    pub flops_per_sec: f64,
    pub comp_overhead_s: f64,
    pub bytes_per_sec: f64,
    pub load_overhead_s: f64,
}

impl Default for SimulatedBackend {
    fn default() -> Self {
        SimulatedBackend {
            flops_per_sec: 40e12,
            comp_overhead_s: 20e-6,
            bytes_per_sec: 64e9,
            load_overhead_s: 10e-6,
        }
    }
}

impl KernelRunner for SimulatedBackend {
    fn compute_seconds(
        &mut self,
        grid: TokenGrid,
        m: f64,
        cached: bool,
        reps: usize,
    ) -> Result<Vec<f64>> {
        let flops = flops_block(grid, m, cached).total_flops as f64;
        Ok(vec![
            flops / self.flops_per_sec + self.comp_overhead_s;
            reps
        ])
    }

    fn load_seconds(&mut self, bytes: u64, reps: usize) -> Result<Vec<f64>> {
        Ok(vec![
            bytes as f64 / self.bytes_per_sec + self.load_overhead_s;
            reps
        ])
    }
}

/// Times the real kernel on this machine.
pub struct LiveKernelRunner {
    seed: u64,
    weights: HashMap<usize, BlockWeights>,
    inputs: HashMap<TokenGrid, (Tensor3, BlockActivations)>,
    blob: Vec<u8>,
    dest: Vec<u8>,
}

impl LiveKernelRunner {
    pub fn new(seed: u64) -> LiveKernelRunner {
        LiveKernelRunner {
            seed,
            weights: HashMap::new(),
            inputs: HashMap::new(),
            blob: Vec::new(),
            dest: Vec::new(),
        }
    }

    fn prepare(&mut self, grid: TokenGrid) -> Result<()> {
        let seed = self.seed;
        let w = self
            .weights
            .entry(grid.hidden)
            .or_insert_with(|| seeded_weights(seed, grid.hidden));
        if let Entry::Vacant(slot) = self.inputs.entry(grid) {
            let x = seeded_input(seed, "calibration-input", grid);
            let (_, acts) = forward_full(&x, w)?;
            slot.insert((x, acts));
        }
        Ok(())
    }
}

impl KernelRunner for LiveKernelRunner {
    fn compute_seconds(
        &mut self,
        grid: TokenGrid,
        m: f64,
        cached: bool,
        reps: usize,
    ) -> Result<Vec<f64>> {
        self.prepare(grid)?;
        let w = &self.weights[&grid.hidden];
        let (x, acts) = &self.inputs[&grid];
        let mask = MaskSpec::leading(
            grid.tokens,
            MaskSpec::from_ratio(m)?.masked_tokens(grid.tokens),
        )?;
        let mut out = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            let y = if cached {
                forward_masked_ycache(x, &mask, acts, w)?
            } else {
                forward_full(x, w)?.0
            };
            out.push(t.elapsed().as_secs_f64());
            std::hint::black_box(y);
        }
        Ok(out)
    }

    fn load_seconds(&mut self, bytes: u64, reps: usize) -> Result<Vec<f64>> {
        let n = bytes as usize;
        if self.blob.len() < n {
            self.blob = (0..n).map(|i| (i % 251) as u8).collect();
            self.dest = vec![0; n];
        }
        // Small copies are averaged over enough repetitions to rise well
        // above timer resolution.
        let inner = (1 << 22) / n.max(1) + 1;
        let mut out = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            for _ in 0..inner {
                self.dest[..n].copy_from_slice(std::hint::black_box(&self.blob[..n]));
            }
            std::hint::black_box(&self.dest);
            out.push(t.elapsed().as_secs_f64() / inner as f64);
        }
        Ok(out)
    }
}

/// Fitted model plus any repeatability warnings raised on the way.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub model: LatencyModel,
    pub warnings: Vec<String>,
}

const MAX_CV: f64 = 0.25;
const MAX_RETRIES: usize = 3;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn coeff_of_variation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Repeats a measurement with more repetitions while it is too noisy.
fn measure<F>(label: &str, reps: usize, warnings: &mut Vec<String>, mut run: F) -> Result<f64>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let mut reps = reps.max(1);
    let mut samples = run(reps)?;
    let mut tries = 0;
    while samples.len() > 2 && coeff_of_variation(&samples) > MAX_CV && tries < MAX_RETRIES {
        reps *= 2;
        tries += 1;
        samples = run(reps)?;
    }
    if samples.len() > 2 && coeff_of_variation(&samples) > MAX_CV {
        let msg = format!(
            "{label}: timing variation {:.2} above {MAX_CV} after {tries} retries",
            coeff_of_variation(&samples)
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(median(&mut samples))
}

/// Times every design point (cached and dense compute, plus the blob copy
/// of its cached rows) and fits both regressions.
pub fn calibrate<R: KernelRunner>(
    runner: &mut R,
    design: &[DesignPoint],
    reps: usize,
) -> Result<Calibration> {
    if design.len() < 2 {
        return Err(Error::Fit(format!(
            "calibration design needs at least two points, got {}",
            design.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut comp = Vec::new();
    let mut load = Vec::new();
    for p in design {
        let grid = p.grid()?;
        for cached in [true, false] {
            let flops = flops_block(grid, p.mask_ratio, cached).total_flops;
            let label = format!("compute {p:?} cached={cached}");
            let t = measure(&label, reps, &mut warnings, |r| {
                runner.compute_seconds(grid, p.mask_ratio, cached, r)
            })?;
            comp.push((flops as f64, t));
        }
        let bytes = cache_bytes(grid, p.mask_ratio, CacheVariant::Y);
        if bytes > 0 {
            let label = format!("load {bytes} bytes");
            let t = measure(&label, reps, &mut warnings, |r| {
                runner.load_seconds(bytes, r)
            })?;
            load.push((bytes as f64, t));
        }
    }
    let model = LatencyModel::from_fits(fit(&comp)?, fit(&load)?, design.to_vec())?;
    Ok(Calibration { model, warnings })
}

fn grid_product(
    batches: &[usize],
    tokens: &[usize],
    hiddens: &[usize],
    ms: &[f64],
) -> Vec<DesignPoint> {
    let mut out = Vec::new();
    for &batch in batches {
        for &t in tokens {
            for &hidden in hiddens {
                for &mask_ratio in ms {
                    out.push(DesignPoint {
                        batch,
                        tokens: t,
                        hidden,
                        mask_ratio,
                    });
                }
            }
        }
    }
    out
}

/// Desk-scale grid for timing the real kernel.
pub fn default_live_grid() -> Vec<DesignPoint> {
    grid_product(
        &[1, 2],
        &[128, 256, 512],
        &[32, 64],
        &[0.125, 0.25, 0.5, 1.0],
    )
}

/// Grid at serving scale for the simulated device.
pub fn default_sim_grid() -> Vec<DesignPoint> {
    grid_product(&[1, 2, 4, 8], &[4096], &[640], &[0.05, 0.1, 0.25, 0.5, 1.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulated_backend_fits_exactly() {
        let mut sim = SimulatedBackend::default();
        let cal = calibrate(&mut sim, &default_sim_grid(), 1).unwrap();
        let comp = cal.model.comp().unwrap();
        let load = cal.model.load().unwrap();
        assert_eq!(comp.r2, 1.0);
        assert_eq!(load.r2, 1.0);
        assert!((comp.slope * 40e12 - 1.0).abs() < 1e-9);
        assert!((load.slope * 64e9 - 1.0).abs() < 1e-9);
        assert!(cal.warnings.is_empty());
    }

    #[test]
    fn single_point_design_is_a_fit_error() {
        let mut sim = SimulatedBackend::default();
        let one = &default_sim_grid()[..1];
        assert!(matches!(calibrate(&mut sim, one, 1), Err(Error::Fit(_))));
    }

    #[test]
    fn noisy_runner_warns() {
        struct Noisy(u64);
        impl KernelRunner for Noisy {
            fn compute_seconds(
                &mut self,
                g: TokenGrid,
                m: f64,
                c: bool,
                reps: usize,
            ) -> Result<Vec<f64>> {
                let base = flops_block(g, m, c).total_flops as f64 * 1e-12;
                Ok((0..reps)
                    .map(|_| {
                        self.0 += 1;
                        base * if self.0.is_multiple_of(2) { 0.2 } else { 3.0 }
                    })
                    .collect())
            }
            fn load_seconds(&mut self, bytes: u64, reps: usize) -> Result<Vec<f64>> {
                Ok(vec![bytes as f64 * 1e-9; reps])
            }
        }
        let cal = calibrate(&mut Noisy(0), &default_live_grid()[..4], 4).unwrap();
        assert!(!cal.warnings.is_empty());
    }
}
