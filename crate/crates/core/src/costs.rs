//! Analytic compute and storage costs of few-shot methods.
//!
//! Everything is exact integer arithmetic; only [`sig2`] and the byte
//! renderers round. The attention term that grows quadratically with sequence
//! length is ignored throughout.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ia3::ia3_param_count;
use crate::model::ModelSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Inference,
    Training,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Shots concatenated into every query; shots stored on disk.
    Icl,
    /// Adapter applied at inference; no training cost reported.
    PeftInference,
    /// Adapter trained then applied; both costs reported.
    PeftTraining,
    /// Plain model on the bare query.
    ZeroShot,
}

pub fn flops_per_token(arch: Arch, params: u128, phase: Phase) -> u128 {
    let factor = match (arch, phase) {
        (Arch::DecoderOnly, Phase::Inference) => 2,
        (Arch::DecoderOnly, Phase::Training) => 6,
        (Arch::EncoderDecoder, Phase::Inference) => 1,
        (Arch::EncoderDecoder, Phase::Training) => 3,
    };
    factor * params
}

/// Shots are processed once per query (cached keys and values are not
/// credited against compute).
pub fn icl_inference_flops(arch: Arch, params: u128, k: u128, shot_len: u128, query_len: u128) -> u128 {
    flops_per_token(arch, params, Phase::Inference) * (k * shot_len + query_len)
}

pub fn peft_inference_flops(arch: Arch, params: u128, query_len: u128) -> u128 {
    flops_per_token(arch, params, Phase::Inference) * query_len
}

pub fn peft_training_flops(arch: Arch, params: u128, steps: u128, batch: u128, seq_len: u128) -> u128 {
    flops_per_token(arch, params, Phase::Training) * steps * batch * seq_len
}

fn bytes_per_value(bits: u32) -> Result<u128> {
    if bits == 0 || !bits.is_multiple_of(8) {
        return Err(Error::Contract(format!(
            "value width of {bits} bits is not a whole number of bytes"
        )));
    }
    Ok(u128::from(bits / 8))
}

pub fn icl_storage_bytes(k: u128, tokens_per_shot: u128, bits: u32) -> Result<u128> {
    Ok(k * tokens_per_shot * bytes_per_value(bits)?)
}

/// One key and one value vector per token per layer.
pub fn kv_cache_bytes(k: u128, tokens_per_shot: u128, layers: u128, d_model: u128, bits: u32) -> Result<u128> {
    Ok(k * tokens_per_shot * layers * d_model * 2 * bytes_per_value(bits)?)
}

pub fn adapter_storage_bytes(adapter_params: u128, bits: u32) -> Result<u128> {
    Ok(adapter_params * bytes_per_value(bits)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostScenario {
    pub name: String,
    pub arch: Arch,
    pub params: u128,
    pub method: Method,
    #[serde(default)]
    pub shots: u128,
    #[serde(default)]
    pub shot_len: u128,
    #[serde(default)]
    pub query_len: u128,
    #[serde(default)]
    pub train_steps: u128,
    #[serde(default)]
    pub batch_size: u128,
    #[serde(default)]
    pub seq_len: u128,
    #[serde(default = "default_bits")]
    pub value_bits: u32,
    #[serde(default)]
    pub adapter_params: u128,
    /// Layer count and width for the key/value cache figure; both zero skips it.
    #[serde(default)]
    pub layers: u128,
    #[serde(default)]
    pub d_model: u128,
}

fn default_bits() -> u32 {
    32
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub name: String,
    pub inference_flops: u128,
    pub training_flops: u128,
    pub disk_bytes: u128,
    pub kv_cache_bytes: Option<u128>,
}

impl CostScenario {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.value_bits, 16 | 32 | 64) {
            return Err(Error::config(
                "value_bits",
                format!("must be 16, 32 or 64, got {}", self.value_bits),
            ));
        }
        if self.params == 0 {
            return Err(Error::config("params", "must be positive"));
        }
        Ok(())
    }

    pub fn report(&self) -> Result<CostReport> {
        self.validate()?;
        let s = self;
        let (inference_flops, training_flops, disk_bytes) = match s.method {
            Method::Icl => (
                icl_inference_flops(s.arch, s.params, s.shots, s.shot_len, s.query_len),
                0,
                icl_storage_bytes(s.shots, s.shot_len, s.value_bits)?,
            ),
            Method::ZeroShot => (peft_inference_flops(s.arch, s.params, s.query_len), 0, 0),
            Method::PeftInference => (
                peft_inference_flops(s.arch, s.params, s.query_len),
                0,
                adapter_storage_bytes(s.adapter_params, s.value_bits)?,
            ),
            Method::PeftTraining => (
                peft_inference_flops(s.arch, s.params, s.query_len),
                peft_training_flops(s.arch, s.params, s.train_steps, s.batch_size, s.seq_len),
                adapter_storage_bytes(s.adapter_params, s.value_bits)?,
            ),
        };
        let kv_cache_bytes = if s.method == Method::Icl && s.layers > 0 && s.d_model > 0 {
            Some(kv_cache_bytes(s.shots, s.shot_len, s.layers, s.d_model, s.value_bits)?)
        } else {
            None
        };
        Ok(CostReport {
            name: s.name.clone(),
            inference_flops,
            training_flops,
            disk_bytes,
            kv_cache_bytes,
        })
    }
}

pub const MEDIAN_SHOTS: u128 = 41;
pub const SHOT_LEN: u128 = 98;
pub const QUERY_LEN: u128 = 103;

fn icl_row(name: &str, arch: Arch, params: u128) -> CostScenario {
    CostScenario {
        name: name.into(),
        arch,
        params,
        method: Method::Icl,
        shots: MEDIAN_SHOTS,
        shot_len: SHOT_LEN,
        query_len: QUERY_LEN,
        train_steps: 0,
        batch_size: 0,
        seq_len: 0,
        value_bits: 32,
        adapter_params: 0,
        layers: 0,
        d_model: 0,
    }
}

/// The six method rows: adapter fine-tuning, zero-shot, and four in-context
/// learners.
pub fn table1_scenarios() -> Vec<CostScenario> {
    let adapter_params = ia3_param_count(&ModelSpec::t0_11b_dims()) as u128;
    vec![
        CostScenario {
            name: "T-Few".into(),
            arch: Arch::EncoderDecoder,
            params: 11_000_000_000,
            method: Method::PeftTraining,
            shots: 0,
            shot_len: 0,
            query_len: QUERY_LEN,
            train_steps: 1000,
            batch_size: 8,
            seq_len: QUERY_LEN,
            value_bits: 32,
            adapter_params,
            layers: 0,
            d_model: 0,
        },
        CostScenario {
            name: "T0".into(),
            method: Method::ZeroShot,
            shots: 0,
            shot_len: 0,
            ..icl_row("", Arch::EncoderDecoder, 11_000_000_000)
        },
        icl_row("T5+LM", Arch::EncoderDecoder, 11_000_000_000),
        icl_row("GPT-3 6.7B", Arch::DecoderOnly, 6_700_000_000),
        icl_row("GPT-3 13B", Arch::DecoderOnly, 13_000_000_000),
        icl_row("GPT-3 175B", Arch::DecoderOnly, 175_000_000_000),
    ]
}

/// The largest GPT-3 prompted with 32 shots of 512 tokens (96 layers, width
/// 12288): shot storage and cached keys/values.
pub fn full_context_scenario() -> CostScenario {
    CostScenario {
        name: "GPT-3 175B, 32x512 context".into(),
        shots: 32,
        shot_len: 512,
        layers: 96,
        d_model: 12288,
        ..icl_row("", Arch::DecoderOnly, 175_000_000_000)
    }
}

pub fn table1_report() -> Vec<CostReport> {
    table1_scenarios()
        .iter()
        .map(|s| s.report().expect("built-in scenarios are valid"))
        .collect()
}

/// Rounds to two significant figures (half away from zero), returned as
/// `(mantissa, exponent)` with `mantissa` in `10..=99` so that the value is
/// `mantissa · 10^(exponent - 1)`.
pub fn round_sig2(x: u128) -> (u8, u32) {
    if x < 10 {
        return ((x * 10) as u8, 0);
    }
    let mut e = 0u32;
    let mut p = 1u128;
    while x / p >= 100 {
        p *= 10;
        e += 1;
    }
    // x / p in 10..=99, remainder decides rounding
    let mut m = x / p;
    if p > 1 && (x % p) * 2 >= p {
        m += 1;
    }
    if m == 100 {
        m = 10;
        e += 1;
    }
    (m as u8, e + 1)
}

/// Scientific notation at two significant figures: `1133000000000` → `1.1e12`.
pub fn sig2(x: u128) -> String {
    if x == 0 {
        return "0".into();
    }
    let (m, e) = round_sig2(x);
    format!("{}.{}e{}", m / 10, m % 10, e)
}

fn sig2_scaled(x: u128, unit: u128) -> String {
    // two significant figures of x / unit, printed without an exponent
    let (m, e) = round_sig2(x);
    let digits_of_unit = unit.ilog10();
    let exp = e as i64 - 1 - digits_of_unit as i64;
    let v = f64::from(m) * 10f64.powi(exp as i32);
    if exp >= 0 {
        format!("{v:.0}")
    } else {
        format!("{v:.*}", (-exp) as usize)
    }
}

/// Decimal units, two significant figures: `16072` → `16 kB`.
pub fn render_bytes_decimal(bytes: u128) -> String {
    let units = [
        (1_000_000_000_000u128, "TB"),
        (1_000_000_000, "GB"),
        (1_000_000, "MB"),
        (1_000, "kB"),
    ];
    for (unit, label) in units {
        if bytes >= unit {
            return format!("{} {label}", sig2_scaled(bytes, unit));
        }
    }
    format!("{bytes} B")
}

/// Binary gibibytes with up to one decimal: `154618822656` → `144 GiB`.
pub fn render_gib(bytes: u128) -> String {
    let tenths = (bytes * 10 + (1 << 29)) >> 30;
    if tenths.is_multiple_of(10) {
        format!("{} GiB", tenths / 10)
    } else {
        format!("{}.{} GiB", tenths / 10, tenths % 10)
    }
}

/// Fixed-width text table with raw integers next to rounded figures.
pub fn render_table(reports: &[CostReport]) -> String {
    let w = reports.iter().map(|r| r.name.len()).chain([6]).max().unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<w$}  {:>9}  {:>9}  {:>8}  {:>8}  raw (inference / training / disk)",
        "method", "inference", "training", "disk", "kv cache"
    );
    for r in reports {
        let kv = r.kv_cache_bytes.map(render_gib).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<w$}  {:>9}  {:>9}  {:>8}  {:>8}  {} / {} / {}",
            r.name,
            sig2(r.inference_flops),
            sig2(r.training_flops),
            render_bytes_decimal(r.disk_bytes),
            kv,
            r.inference_flops,
            r.training_flops,
            r.disk_bytes
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_token_rules() {
        assert_eq!(
            flops_per_token(Arch::DecoderOnly, 175_000_000_000, Phase::Inference),
            350_000_000_000
        );
        assert_eq!(
            flops_per_token(Arch::EncoderDecoder, 11_000_000_000, Phase::Training),
            33_000_000_000
        );
        assert_eq!(
            flops_per_token(Arch::EncoderDecoder, 11_000_000_000, Phase::Inference),
            11_000_000_000
        );
    }

    #[test]
    fn sig2_rounding() {
        assert_eq!(sig2(1_133_000_000_000), "1.1e12");
        assert_eq!(sig2(1_442_350_000_000_000), "1.4e15");
        assert_eq!(sig2(995), "1.0e3");
        assert_eq!(sig2(150), "1.5e2");
        assert_eq!(sig2(7), "7.0e0");
        assert_eq!(sig2(0), "0");
    }

    #[test]
    fn byte_rendering() {
        assert_eq!(render_bytes_decimal(16_072), "16 kB");
        assert_eq!(render_bytes_decimal(65_536), "66 kB");
        assert_eq!(render_bytes_decimal(2_162_688), "2.2 MB");
        assert_eq!(render_bytes_decimal(8), "8 B");
        assert_eq!(render_gib(154_618_822_656), "144 GiB");
    }

    #[test]
    fn odd_bit_widths_are_rejected() {
        assert!(icl_storage_bytes(1, 1, 12).is_err());
        assert!(kv_cache_bytes(1, 1, 1, 1, 0).is_err());
        let mut s = table1_scenarios().remove(0);
        s.value_bits = 8;
        assert!(matches!(s.report(), Err(Error::Config { .. })));
    }
}
