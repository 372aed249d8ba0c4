//! Storage-versus-recompute economics: the break-even access interval,
//! energy per prefill versus per load, and a simple TCO comparison.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvstore::StoreStats;

pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const BYTES_PER_MB: f64 = 1_000_000.0;
/// Default GPU amortization horizon for [`tco_estimate`]: three years.
pub const DEFAULT_AMORTIZATION_S: f64 = 3.0 * 365.0 * SECONDS_PER_DAY;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("{name} must be finite and strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must be finite and non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
}

pub type Result<T, E = CostError> = std::result::Result<T, E>;

/// Hardware and price inputs. Defaults are the H100 / commodity-SSD figures:
/// a $50,000 GPU producing 250 MB of KV in 0.5 s, $400 per 4 TB of flash
/// reading 250 MB in 20 ms, 170 J per prefill and 0.14 J per load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    pub gpu_price_usd: f64,
    pub kv_rate_mb_per_gpu_sec: f64,
    pub storage_price_usd_per_mb: f64,
    pub load_sec_per_mb: f64,
    pub prefill_energy_j: f64,
    pub load_energy_j: f64,
    pub gpu_power_w: f64,
    pub ssd_power_w: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            gpu_price_usd: 50_000.0,
            kv_rate_mb_per_gpu_sec: 250.0 / 0.5,
            storage_price_usd_per_mb: 400.0 / 4_000_000.0,
            load_sec_per_mb: 0.020 / 250.0,
            prefill_energy_j: 170.0,
            load_energy_j: 0.14,
            gpu_power_w: 350.0,
            ssd_power_w: 7.0,
        }
    }
}

fn positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(CostError::NonPositive { name, value })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(CostError::Negative { name, value })
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        positive("gpu_price_usd", self.gpu_price_usd)?;
        positive("kv_rate_mb_per_gpu_sec", self.kv_rate_mb_per_gpu_sec)?;
        positive("storage_price_usd_per_mb", self.storage_price_usd_per_mb)?;
        positive("load_sec_per_mb", self.load_sec_per_mb)?;
        positive("prefill_energy_j", self.prefill_energy_j)?;
        positive("load_energy_j", self.load_energy_j)?;
        positive("gpu_power_w", self.gpu_power_w)?;
        positive("ssd_power_w", self.ssd_power_w)
    }
}

/// How the load-time factor of the break-even formula is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecPerMbMode {
    /// `T = $/GPU * Sec/MB / (KV MB per GPU-sec * $/MB)`, literally.
    AsWritten,
    /// Same with the Sec/MB factor set to 1, the five-minute-rule analogue.
    #[default]
    Unit,
}

impl FromStr for SecPerMbMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "unit" => Ok(Self::Unit),
            "as-written" | "as_written" => Ok(Self::AsWritten),
            other => Err(format!("unknown break-even mode {other:?} (expected unit or as-written)")),
        }
    }
}

impl fmt::Display for SecPerMbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unit => "unit",
            Self::AsWritten => "as-written",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakEvenResult {
    pub t_seconds: f64,
    pub t_days: f64,
}

impl BreakEvenResult {
    pub fn from_seconds(t_seconds: f64) -> Self {
        Self { t_seconds, t_days: t_seconds / SECONDS_PER_DAY }
    }
}

/// Access interval below which keeping a KV cache on flash is cheaper than
/// recomputing it on the GPU.
pub fn break_even(params: &CostParams, mode: SecPerMbMode) -> Result<BreakEvenResult> {
    params.validate()?;
    let sec_per_mb = match mode {
        SecPerMbMode::AsWritten => params.load_sec_per_mb,
        SecPerMbMode::Unit => 1.0,
    };
    let t = (params.gpu_price_usd * sec_per_mb) / (params.kv_rate_mb_per_gpu_sec * params.storage_price_usd_per_mb);
    Ok(BreakEvenResult::from_seconds(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyComparison {
    pub ratio: f64,
    pub prefill_j: f64,
    pub load_j: f64,
}

pub fn energy_comparison(params: &CostParams) -> Result<EnergyComparison> {
    positive("prefill_energy_j", params.prefill_energy_j)?;
    positive("load_energy_j", params.load_energy_j)?;
    Ok(EnergyComparison {
        ratio: params.prefill_energy_j / params.load_energy_j,
        prefill_j: params.prefill_energy_j,
        load_j: params.load_energy_j,
    })
}

/// Joules for measured phase times: GPU power over prefill + decode, SSD
/// power over loads.
pub fn phase_energy_j(params: &CostParams, load_s: f64, prefill_s: f64, decode_s: f64) -> f64 {
    params.gpu_power_w * (prefill_s + decode_s) + params.ssd_power_w * load_s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcoEstimate {
    pub kv_mb: f64,
    pub horizon_s: f64,
    pub accesses: f64,
    pub storage_cost_usd: f64,
    pub recompute_cost_usd: f64,
    pub matkv_cheaper: bool,
}

/// Compares holding the store's bytes on flash against regenerating them on
/// every access over `horizon_s`, with the GPU price amortized over the same
/// horizon.
pub fn tco_estimate(
    stats: &StoreStats,
    params: &CostParams,
    accesses_per_doc_per_day: f64,
    horizon_s: f64,
) -> Result<TcoEstimate> {
    params.validate()?;
    non_negative("accesses_per_doc_per_day", accesses_per_doc_per_day)?;
    positive("horizon_s", horizon_s)?;
    let kv_mb = stats.bytes as f64 / BYTES_PER_MB;
    let accesses = accesses_per_doc_per_day * horizon_s / SECONDS_PER_DAY;
    let gpu_usd_per_s = params.gpu_price_usd / horizon_s;
    let storage_cost_usd = kv_mb * params.storage_price_usd_per_mb;
    let recompute_cost_usd = accesses * (kv_mb / params.kv_rate_mb_per_gpu_sec) * gpu_usd_per_s;
    Ok(TcoEstimate {
        kv_mb,
        horizon_s,
        accesses,
        storage_cost_usd,
        recompute_cost_usd,
        matkv_cheaper: storage_cost_usd < recompute_cost_usd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    fn stats_of(bytes: u64) -> StoreStats {
        StoreStats { files: 1, bytes, ..Default::default() }
    }

    #[test]
    fn ten_day_rule() {
        let r = break_even(&CostParams::default(), SecPerMbMode::Unit).unwrap();
        assert!(rel(r.t_seconds, 1_000_000.0) < 1e-12);
        assert!((r.t_days - 11.574_074).abs() < 1e-6);
        assert_eq!(r.t_days, r.t_seconds / 86_400.0);
    }

    #[test]
    fn as_written_scales_by_load_time() {
        let p = CostParams::default();
        let lit = break_even(&p, SecPerMbMode::AsWritten).unwrap();
        let unit = break_even(&p, SecPerMbMode::Unit).unwrap();
        assert!(rel(lit.t_seconds, unit.t_seconds * p.load_sec_per_mb) < 1e-12);
        assert!(rel(lit.t_seconds, 80.0) < 1e-12);
    }

    #[test]
    fn inverse_proportionality() {
        let p = CostParams::default();
        let base = break_even(&p, SecPerMbMode::Unit).unwrap().t_seconds;
        let dear = CostParams { storage_price_usd_per_mb: 2.0 * p.storage_price_usd_per_mb, ..p };
        let fast = CostParams { kv_rate_mb_per_gpu_sec: 2.0 * p.kv_rate_mb_per_gpu_sec, ..p };
        assert!(rel(break_even(&dear, SecPerMbMode::Unit).unwrap().t_seconds, base / 2.0) < 1e-12);
        assert!(rel(break_even(&fast, SecPerMbMode::Unit).unwrap().t_seconds, base / 2.0) < 1e-12);
    }

    #[test]
    fn nonpositive_inputs_rejected() {
        let p = CostParams { gpu_price_usd: 0.0, ..Default::default() };
        assert!(break_even(&p, SecPerMbMode::Unit).is_err());
        let p = CostParams { load_energy_j: -1.0, ..Default::default() };
        assert!(energy_comparison(&p).is_err());
        let p = CostParams { kv_rate_mb_per_gpu_sec: f64::NAN, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn energy_ratios() {
        let r = energy_comparison(&CostParams::default()).unwrap();
        assert!((r.ratio - 1214.285_714).abs() < 1e-5);
        let same = CostParams { prefill_energy_j: 3.0, load_energy_j: 3.0, ..Default::default() };
        assert_eq!(energy_comparison(&same).unwrap().ratio, 1.0);
        let alt = CostParams { prefill_energy_j: 175.0, load_energy_j: 0.05, ..Default::default() };
        assert!(rel(energy_comparison(&alt).unwrap().ratio, 3500.0) < 1e-12);
    }

    #[test]
    fn tco_cases() {
        let p = CostParams::default();
        let cache = stats_of(250_000_000);
        let idle = tco_estimate(&cache, &p, 0.0, DEFAULT_AMORTIZATION_S).unwrap();
        assert_eq!(idle.recompute_cost_usd, 0.0);
        assert!(!idle.matkv_cheaper);

        let hourly = tco_estimate(&cache, &p, 24.0, DEFAULT_AMORTIZATION_S).unwrap();
        assert!(hourly.matkv_cheaper);
        assert!(hourly.recompute_cost_usd > 100.0 * hourly.storage_cost_usd);

        // accessing exactly once per break-even interval balances the costs
        let t = break_even(&p, SecPerMbMode::Unit).unwrap().t_seconds;
        let at_t = tco_estimate(&cache, &p, SECONDS_PER_DAY / t, DEFAULT_AMORTIZATION_S).unwrap();
        assert!(rel(at_t.recompute_cost_usd, at_t.storage_cost_usd) < 1e-9);
    }

    #[test]
    fn params_parse_with_defaults() {
        let p: CostParams = serde_json::from_str(r#"{"load_energy_j": 0.05, "prefill_energy_j": 175}"#).unwrap();
        assert_eq!(p.gpu_price_usd, 50_000.0);
        assert_eq!(p.load_energy_j, 0.05);
        assert!(serde_json::from_str::<CostParams>(r#"{"gpu_prize": 1}"#).is_err());
    }
}
