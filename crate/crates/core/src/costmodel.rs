//! Closed-form parameter and multiply-accumulate accounting, plus a
//! warm-up-then-time throughput harness.
//!
//! One multiply-accumulate counts as one FLOP; only matmuls and convolutions
//! are counted.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{AttentionVariant, ModelConfig};
use crate::error::{config_err, Result};
use crate::numerics::Tensor;

/// Per-component split; fields sum to the matching total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    /// Patch embedding, positional table, timestep MLP, label table.
    pub embeddings: u64,
    pub attention: u64,
    /// Dense MLPs and MoE layers (router included).
    pub mlp: u64,
    pub adaln: u64,
    pub final_layer: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.embeddings + self.attention + self.mlp + self.adaln + self.final_layer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: u64,
    /// Parameters touched per token: `K` of `E` experts in MoE blocks.
    pub activated: u64,
    pub breakdown: Breakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounts {
    pub total: u64,
    pub breakdown: Breakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub iterations: usize,
    pub warmup: usize,
    pub it_per_s: f64,
    pub latency_min_s: f64,
    pub latency_median_s: f64,
    pub latency_max_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub name: String,
    pub total_params: u64,
    pub activated_params: u64,
    pub flops_per_forward: u64,
    pub params_breakdown: Breakdown,
    pub flops_breakdown: Breakdown,
    /// Weight bytes plus an analytic activation high-water mark at batch 1.
    pub peak_memory_estimate_bytes: u64,
    #[serde(default)]
    pub measured: Option<Throughput>,
}

fn linear_params(inp: u64, out: u64) -> u64 {
    inp * out + out
}

fn mlp_params(cfg: &ModelConfig) -> u64 {
    let (c, h) = (cfg.hidden as u64, cfg.mlp_hidden() as u64);
    linear_params(c, h) + linear_params(h, c)
}

fn attention_params(cfg: &ModelConfig) -> u64 {
    let c = cfg.hidden as u64;
    let w = cfg.attn_width() as u64;
    let proj = linear_params(w, c);
    match &cfg.attention {
        AttentionVariant::Baseline | AttentionVariant::Shallow => linear_params(c, 3 * w) + proj,
        AttentionVariant::Mediated { dwc_kernel, .. } => {
            let kk = (*dwc_kernel * *dwc_kernel) as u64;
            linear_params(c, 3 * w) + c * kk + c + proj
        }
        AttentionVariant::Focused { groups, .. } => {
            linear_params(c, c) + linear_params(c, 2 * c / *groups as u64) + proj
        }
    }
}

/// Closed-form total and activated parameter counts (positional table included).
pub fn count_params(cfg: &ModelConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let c = cfg.hidden as u64;
    let n = cfg.tokens() as u64;
    let out = (cfg.patch * cfg.patch * cfg.out_channels()) as u64;
    let embeddings = linear_params(cfg.patch_dim() as u64, c)
        + n * c
        + linear_params(cfg.freq_embed_dim as u64, c)
        + linear_params(c, c)
        + (cfg.num_classes as u64 + 1) * c;
    let depth = cfg.depth as u64;
    let attention = depth * attention_params(cfg);
    let adaln = depth * linear_params(c, 6 * c);
    let mlp1 = mlp_params(cfg);
    let (mut mlp, mut inactive) = (0, 0);
    for i in 0..cfg.depth {
        match &cfg.moe {
            Some(m) if m.is_moe_block(i) => {
                mlp += m.experts as u64 * c + (m.experts + m.shared_experts) as u64 * mlp1;
                inactive += (m.experts - m.active) as u64 * mlp1;
            }
            _ => mlp += mlp1,
        }
    }
    let final_layer = linear_params(c, 2 * c) + linear_params(c, out);
    let breakdown = Breakdown { embeddings, attention, mlp, adaln, final_layer };
    let total = breakdown.total();
    Ok(ParamCounts { total, activated: total - inactive, breakdown })
}

/// Attention MACs for one layer at batch 1 with `w` the effective Q/K/V width.
fn attention_macs(cfg: &ModelConfig, n: u64, w: u64) -> u64 {
    let c = cfg.hidden as u64;
    let proj = n * w * c;
    match &cfg.attention {
        AttentionVariant::Baseline | AttentionVariant::Shallow => n * c * 3 * w + 2 * n * n * w + proj,
        AttentionVariant::Mediated { n: m, dwc_kernel } => {
            let kk = (*dwc_kernel * *dwc_kernel) as u64;
            n * c * 3 * w + 4 * n * *m as u64 * w + n * c * kk + proj
        }
        AttentionVariant::Focused { groups, .. } => {
            let g = *groups as u64;
            let h = cfg.heads as u64;
            let d = c / h;
            let hk = h / g;
            n * c * c + n * c * 2 * c / g + hk * n * d * d + h * n * d * d + n * c + proj
        }
    }
}

/// Closed-form MACs of one forward at batch 1. With `elide_pruned`, pruned
/// heads (`keep_heads`) are dropped from the attention width.
pub fn count_flops(cfg: &ModelConfig, elide_pruned: bool) -> Result<FlopCounts> {
    cfg.validate()?;
    let c = cfg.hidden as u64;
    let n = cfg.tokens() as u64;
    let out = (cfg.patch * cfg.patch * cfg.out_channels()) as u64;
    let mut w = cfg.attn_width() as u64;
    if elide_pruned {
        if let Some(k) = cfg.keep_heads {
            if matches!(cfg.attention, AttentionVariant::Focused { .. }) {
                return Err(config_err!("head elision is undefined for focused attention"));
            }
            w = k as u64 * cfg.head_dim() as u64;
        }
    }
    let embeddings = n * cfg.patch_dim() as u64 * c + cfg.freq_embed_dim as u64 * c + c * c;
    let depth = cfg.depth as u64;
    let attention = depth * attention_macs(cfg, n, w);
    let adaln = depth * c * 6 * c;
    let dense = 2 * n * c * cfg.mlp_hidden() as u64;
    let mut mlp = 0;
    for i in 0..cfg.depth {
        match &cfg.moe {
            Some(m) if m.is_moe_block(i) => {
                mlp += n * c * m.experts as u64 + (m.active + m.shared_experts) as u64 * dense;
            }
            _ => mlp += dense,
        }
    }
    let final_layer = c * 2 * c + n * c * out;
    let breakdown = Breakdown { embeddings, attention, mlp, adaln, final_layer };
    Ok(FlopCounts { total: breakdown.total(), breakdown })
}

/// Largest activation footprint (bytes, f32) of one inference forward at batch 1.
pub fn activation_high_water(cfg: &ModelConfig) -> u64 {
    let (c, n, h) = (cfg.hidden as u64, cfg.tokens() as u64, cfg.heads as u64);
    let w = cfg.attn_width() as u64;
    let scores = match &cfg.attention {
        AttentionVariant::Baseline | AttentionVariant::Shallow => h * n * n,
        AttentionVariant::Mediated { n: m, .. } => 2 * h * n * *m as u64,
        AttentionVariant::Focused { .. } => c * c / h + n * c,
    };
    let active = cfg.moe.as_ref().map_or(1, |m| (m.active + m.shared_experts) as u64);
    let attn_peak = 2 * n * c + 3 * n * w + scores;
    let mlp_peak = 2 * n * c + active * n * cfg.mlp_hidden() as u64;
    4 * attn_peak.max(mlp_peak)
}

/// Report for a config; `weight_bytes` overrides the f32 default (e.g. for
/// quantized weights).
pub fn cost_report(name: &str, cfg: &ModelConfig, weight_bytes: Option<u64>) -> Result<CostReport> {
    let p = count_params(cfg)?;
    let f = count_flops(cfg, true)?;
    let weights = weight_bytes.unwrap_or(4 * p.total);
    Ok(CostReport {
        name: name.to_string(),
        total_params: p.total,
        activated_params: p.activated,
        flops_per_forward: f.total,
        params_breakdown: p.breakdown,
        flops_breakdown: f.breakdown,
        peak_memory_estimate_bytes: weights + activation_high_water(cfg),
        measured: None,
    })
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn activated_m(&self) -> f64 {
        self.activated_params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.flops_per_forward as f64 / 1e9
    }
}

/// Aligned text table: Params (M) with activated count in brackets for MoE,
/// blank FID/sFID slots, GFLOPS, throughput.
pub fn render_table(reports: &[CostReport]) -> String {
    let header = ["Model", "Params (M)", "FID", "sFID", "GFLOPS", "Throughput (it/s)", "Peak est. (MB)"];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            let params = if r.activated_params != r.total_params {
                format!("{:.1} [{:.0}]", r.params_m(), r.activated_m())
            } else {
                format!("{:.1}", r.params_m())
            };
            [
                r.name.clone(),
                params,
                String::new(),
                String::new(),
                format!("{:.2}", r.gflops()),
                r.measured.map_or(String::new(), |m| format!("{:.2}", m.it_per_s)),
                format!("{:.1}", r.peak_memory_estimate_bytes as f64 / 1e6),
            ]
        })
        .collect();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: &[&str], out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join(" | ").trim_end());
    };
    line(&header, &mut out);
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("-+-"));
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&cells, &mut out);
    }
    out
}

/// Run `warmup` untimed calls, then time `iterations` calls individually.
pub fn profile_throughput<F>(mut forward: F, iterations: usize, warmup: usize) -> Result<Throughput>
where
    F: FnMut() -> Result<()>,
{
    if iterations == 0 {
        return Err(config_err!("throughput needs at least one timed iteration"));
    }
    for _ in 0..warmup {
        forward()?;
    }
    let mut lat = Vec::with_capacity(iterations);
    let start = Instant::now();
    for _ in 0..iterations {
        let t0 = Instant::now();
        forward()?;
        lat.push(t0.elapsed().as_secs_f64());
    }
    let total = start.elapsed().as_secs_f64();
    lat.sort_by(f64::total_cmp);
    let median = if iterations % 2 == 1 {
        lat[iterations / 2]
    } else {
        0.5 * (lat[iterations / 2 - 1] + lat[iterations / 2])
    };
    Ok(Throughput {
        iterations,
        warmup,
        it_per_s: iterations as f64 / total.max(f64::MIN_POSITIVE),
        latency_min_s: lat[0],
        latency_median_s: median,
        latency_max_s: lat[iterations - 1],
    })
}

/// Throughput of batch-`batch` inference forwards of `model`.
pub fn profile_model(model: &crate::DiTModel, batch: usize, iterations: usize, warmup: usize) -> Result<Throughput> {
    let cfg = &model.config;
    let x = Tensor::zeros([batch, cfg.in_channels, cfg.input_size, cfg.input_size]);
    let t = vec![500; batch];
    let y = vec![0; batch];
    profile_throughput(|| model.predict(&x, &t, &y).map(|_| ()), iterations, warmup)
}
