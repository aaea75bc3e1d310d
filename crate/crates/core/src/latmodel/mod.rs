//! FLOP/byte accounting and the affine latency models that turn per-block
//! work into compute and cache-load durations.

mod calibrate;
mod flops;
mod regression;

pub use calibrate::{
    calibrate, default_live_grid, default_sim_grid, Calibration, KernelRunner, LiveKernelRunner,
    SimulatedBackend,
};
pub use flops::{cache_bytes, flops_block, CacheVariant, FlopReport, BYTES_PER_ELEM};
pub use regression::{fit, LinearFit};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Nanos, TokenGrid};

/// One request's share of a batch: its latent grid and mask ratio.
pub type BatchItem = (TokenGrid, f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub batch: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub mask_ratio: f64,
}

impl DesignPoint {
    pub fn grid(&self) -> Result<TokenGrid> {
        TokenGrid::new(self.batch, self.tokens, self.hidden)
    }
}

/// Per-block latency model: FLOPs to compute seconds and cached bytes to
/// load seconds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyModel {
    comp: Option<LinearFit>,
    load: Option<LinearFit>,
    design_grid: Vec<DesignPoint>,
}

/// On-disk JSON layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelDoc {
    comp_slope: f64,
    comp_intercept: f64,
    load_slope: f64,
    load_intercept: f64,
    r2_comp: f64,
    r2_load: f64,
    #[serde(default)]
    design_grid: Vec<DesignPoint>,
}

fn check_fit(name: &str, f: &LinearFit) -> Result<()> {
    if !f.slope.is_finite() || !f.intercept.is_finite() || !f.r2.is_finite() {
        return Err(Error::Fit(format!(
            "{name} model has non-finite coefficients"
        )));
    }
    if f.slope < 0.0 {
        return Err(Error::Fit(format!("{name} slope {} is negative", f.slope)));
    }
    if !(0.0..=1.0).contains(&f.r2) {
        return Err(Error::Fit(format!("{name} r2 {} outside [0, 1]", f.r2)));
    }
    Ok(())
}

impl LatencyModel {
    pub fn unfitted() -> LatencyModel {
        LatencyModel::default()
    }

    pub fn from_fits(
        comp: LinearFit,
        load: LinearFit,
        design_grid: Vec<DesignPoint>,
    ) -> Result<LatencyModel> {
        check_fit("compute", &comp)?;
        check_fit("load", &load)?;
        Ok(LatencyModel {
            comp: Some(comp),
            load: Some(load),
            design_grid,
        })
    }

    /// Model of a device with the given throughputs and fixed per-block
    /// overheads.
    pub fn linear(
        flops_per_sec: f64,
        comp_overhead: Nanos,
        bytes_per_sec: f64,
        load_overhead: Nanos,
    ) -> Result<LatencyModel> {
        LatencyModel::from_fits(
            LinearFit {
                slope: 1.0 / flops_per_sec,
                intercept: comp_overhead.as_secs_f64(),
                r2: 1.0,
            },
            LinearFit {
                slope: 1.0 / bytes_per_sec,
                intercept: load_overhead.as_secs_f64(),
                r2: 1.0,
            },
            Vec::new(),
        )
    }

    pub fn is_fitted(&self) -> bool {
        self.comp.is_some() && self.load.is_some()
    }

    pub fn comp(&self) -> Result<&LinearFit> {
        self.comp
            .as_ref()
            .ok_or_else(|| Error::State("compute model is not fitted".into()))
    }

    pub fn load(&self) -> Result<&LinearFit> {
        self.load
            .as_ref()
            .ok_or_else(|| Error::State("load model is not fitted".into()))
    }

    pub fn design_grid(&self) -> &[DesignPoint] {
        &self.design_grid
    }

    pub fn comp_latency(&self, flops: u64) -> Result<Nanos> {
        Ok(Nanos::from_secs_f64(self.comp()?.predict(flops as f64)))
    }

    pub fn load_latency(&self, bytes: u64) -> Result<Nanos> {
        Ok(Nanos::from_secs_f64(self.load()?.predict(bytes as f64)))
    }

    /// Per-block compute latency of a batch: the regression applied to the
    /// summed FLOPs of its members.
    pub fn predict_comp(&self, batch: &[BatchItem], cached: bool) -> Result<Nanos> {
        let flops = batch
            .iter()
            .map(|&(g, m)| flops_block(g, m, cached).total_flops)
            .sum();
        self.comp_latency(flops)
    }

    /// Per-block latency of loading the batch's cached `Y` rows.
    pub fn predict_load(&self, batch: &[BatchItem]) -> Result<Nanos> {
        let bytes = batch
            .iter()
            .map(|&(g, m)| cache_bytes(g, m, CacheVariant::Y))
            .sum();
        self.load_latency(bytes)
    }

    pub fn to_json(&self) -> Result<String> {
        let (c, l) = (self.comp()?, self.load()?);
        let doc = ModelDoc {
            comp_slope: c.slope,
            comp_intercept: c.intercept,
            load_slope: l.slope,
            load_intercept: l.intercept,
            r2_comp: c.r2,
            r2_load: l.r2,
            design_grid: self.design_grid.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::State(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<LatencyModel> {
        let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        LatencyModel::from_fits(
            LinearFit {
                slope: doc.comp_slope,
                intercept: doc.comp_intercept,
                r2: doc.r2_comp,
            },
            LinearFit {
                slope: doc.load_slope,
                intercept: doc.load_intercept,
                r2: doc.r2_load,
            },
            doc.design_grid,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> LatencyModel {
        LatencyModel::linear(1e12, Nanos::from_micros(20), 25e9, Nanos::from_micros(10)).unwrap()
    }

    fn g() -> TokenGrid {
        TokenGrid::new(1, 1024, 64).unwrap()
    }

    #[test]
    fn empty_batch_is_intercept_only() {
        let m = model();
        assert_eq!(m.predict_comp(&[], true).unwrap(), Nanos::from_micros(20));
        assert_eq!(m.predict_load(&[]).unwrap(), Nanos::from_micros(10));
    }

    #[test]
    fn full_mask_cached_equals_uncached() {
        let m = model();
        let b = [(g(), 1.0)];
        assert_eq!(
            m.predict_comp(&b, true).unwrap(),
            m.predict_comp(&b, false).unwrap()
        );
    }

    #[test]
    fn batch_work_is_summed() {
        let one = flops_block(g(), 0.3, true).total_flops;
        let m = model();
        let pair = m.predict_comp(&[(g(), 0.3), (g(), 0.3)], true).unwrap();
        assert_eq!(pair, m.comp_latency(2 * one).unwrap());
    }

    #[test]
    fn unfitted_model_is_a_state_error() {
        let m = LatencyModel::unfitted();
        assert!(matches!(m.predict_comp(&[], true), Err(Error::State(_))));
        assert!(matches!(m.predict_load(&[]), Err(Error::State(_))));
        assert!(m.to_json().is_err());
    }

    #[test]
    fn negative_slope_rejected() {
        let bad = LinearFit {
            slope: -1.0,
            intercept: 0.0,
            r2: 0.5,
        };
        let ok = LinearFit {
            slope: 1.0,
            intercept: 0.0,
            r2: 1.0,
        };
        assert!(LatencyModel::from_fits(bad, ok, vec![]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = model();
        let back = LatencyModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        for key in [
            "comp_slope",
            "comp_intercept",
            "load_slope",
            "load_intercept",
            "r2_comp",
            "r2_load",
            "design_grid",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    proptest::proptest! {
        #[test]
        fn predictions_monotone_in_mask(a in 0.0f64..=1.0, b in 0.0f64..=1.0, other in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let m = model();
            let c_lo = m.predict_comp(&[(g(), lo), (g(), other)], true).unwrap();
            let c_hi = m.predict_comp(&[(g(), hi), (g(), other)], true).unwrap();
            proptest::prop_assert!(c_lo <= c_hi);
            let l_lo = m.predict_load(&[(g(), lo), (g(), other)]).unwrap();
            let l_hi = m.predict_load(&[(g(), hi), (g(), other)]).unwrap();
            proptest::prop_assert!(l_lo >= l_hi);
        }
    }
}
