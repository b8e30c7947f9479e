//! Static FLOP counting and wall-clock latency measurement.
//!
//! FLOPs follow the `2 × MACs` convention for convolutions (bias additions
//! are not counted) plus one FLOP per element for elementwise layers.

use std::time::Instant;

use crate::error::{CoreError, Result};
use crate::nn::LayerOp;

/// Anything that can describe its layers for a given `B × C × H × W` input
/// without running.
pub trait CostModel {
    fn layer_ops(&self, input: [usize; 4]) -> Result<Vec<LayerOp>>;
}

/// Total FLOPs of a layer list; fails listing every layer without a cost
/// model.
pub fn count_flops(ops: &[LayerOp]) -> Result<u64> {
    let unknown: Vec<String> = ops
        .iter()
        .filter_map(|op| match op {
            LayerOp::Opaque { name } => Some(name.clone()),
            _ => None,
        })
        .collect();
    if !unknown.is_empty() {
        return Err(CoreError::Analysis(unknown));
    }
    Ok(ops
        .iter()
        .map(|op| match op {
            LayerOp::Conv { spec, batch, out_hw, .. } => {
                let macs = batch
                    * spec.out_channels
                    * out_hw.0
                    * out_hw.1
                    * (spec.in_channels / spec.groups)
                    * spec.kernel_h
                    * spec.kernel_w;
                2 * macs as u64
            }
            LayerOp::ConvTranspose { spec, batch, in_hw, .. } => {
                let macs = batch * spec.in_channels * spec.out_channels * in_hw.0 * in_hw.1 * spec.kernel_h * spec.kernel_w;
                2 * macs as u64
            }
            LayerOp::Elementwise { elements, .. } => *elements as u64,
            LayerOp::Opaque { .. } => unreachable!("rejected above"),
        })
        .sum())
}

/// GFLOPs for one forward pass on `input`.
pub fn estimate_flops(model: &impl CostModel, input: [usize; 4]) -> Result<f64> {
    Ok(count_flops(&model.layer_ops(input)?)? as f64 / 1e9)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub runs: usize,
}

/// Times `n_runs` calls of `run` after `warmup` untimed calls. Must not run
/// alongside other benchmarks; the caller is responsible for pinning the
/// worker count to one thread.
pub fn time_inference(mut run: impl FnMut() -> Result<()>, n_runs: usize, warmup: usize) -> Result<LatencyStats> {
    if n_runs < 10 || warmup < 3 {
        return Err(CoreError::Config(format!(
            "need at least 10 timed runs and 3 warmup runs, got {n_runs} and {warmup}"
        )));
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Ok(LatencyStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        runs: n_runs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComputeReport {
    pub name: String,
    pub params: usize,
    pub gflops: f64,
    pub latency: LatencyStats,
    pub input: [usize; 4],
}

impl ComputeReport {
    /// `params × 4` bytes in MiB.
    pub fn size_mb(&self) -> f64 {
        size_mb(self.params)
    }

    pub fn markdown(reports: &[ComputeReport]) -> String {
        let mut out = String::from(
            "| Model | Input | Parameters (Mil.) | Size (MB) | GFLOPs | Inference Time (ms) |\n\
             |---|---|---|---|---|---|\n",
        );
        for r in reports {
            out.push_str(&format!(
                "| {} | {}×{}×{}×{} | {:.4} | {:.3} | {:.4} | {:.3} ± {:.3} (min {:.3}) |\n",
                r.name,
                r.input[0],
                r.input[1],
                r.input[2],
                r.input[3],
                r.params as f64 / 1e6,
                r.size_mb(),
                r.gflops,
                r.latency.mean_ms,
                r.latency.std_ms,
                r.latency.min_ms
            ));
        }
        out
    }

    pub fn csv(reports: &[ComputeReport]) -> String {
        let mut out = String::from("model,batch,channels,height,width,params,size_mb,gflops,latency_mean_ms,latency_std_ms,latency_min_ms,runs\n");
        for r in reports {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.name,
                r.input[0],
                r.input[1],
                r.input[2],
                r.input[3],
                r.params,
                r.size_mb(),
                r.gflops,
                r.latency.mean_ms,
                r.latency.std_ms,
                r.latency.min_ms,
                r.latency.runs
            ));
        }
        out
    }
}

pub fn size_mb(params: usize) -> f64 {
    params as f64 * 4.0 / (1 << 20) as f64
}
