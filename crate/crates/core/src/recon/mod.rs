//! Block-wise reconstruction: capture each decoder block's calibration
//! inputs and full-precision outputs, then learn the rounding of its seven
//! projections (and optionally a per-group scale factor) so the quantized
//! block reproduces those outputs.

pub mod report;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{block_forward, block_forward_graph, linear_name, BlockVars, BlockWeights, DecoderConfig, Model, Proj};
use crate::model::data::TokenDataset;
use crate::par::{HardenOrder, finalize_merge, hardened_codes, Adam, AdamConfig, ParSchedule, RoundingState, SoftQuantizer, DST_WEIGHT_DECAY};
use crate::quant::{
    compute_qparams_clipped, dequantize, quantize_with_params, search_clipping, QuantParams, QuantSpec,
    QuantizedTensor,
};
use crate::tensor::Tensor;

pub use report::{write_loss_trace_csv, write_reports_jsonl, LayerFlips, LossPoint, ReconReport};

/// Calibration inputs of one block, `[samples × seq × in]`, and the
/// full-precision block's outputs on those same inputs,
/// `[samples × seq × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCapture {
    pub block: usize,
    pub x: Tensor,
    pub y_fp: Tensor,
}

impl BlockCapture {
    pub fn samples(&self) -> usize {
        self.x.shape()[0]
    }

    /// Rows of `t` for the given samples, concatenated.
    fn select(&self, t: &Tensor, samples: &[usize]) -> Vec<f32> {
        let n = t.numel() / t.shape()[0];
        samples.iter().flat_map(|&s| t.data()[s * n..(s + 1) * n].iter().copied()).collect()
    }
}

/// Runs `calib` through the embeddings and blocks `0..b` of `model`, then
/// through block `b` of `model` for the target.
///
/// During sequential quantization `model` holds the already-quantized
/// blocks before `b` and the still full-precision block `b`; passing the
/// original model instead gives full-precision propagation.
pub fn capture_block_io(model: &Model, b: usize, calib: &TokenDataset, act_bits: Option<u8>) -> Result<BlockCapture> {
    if b >= model.blocks.len() {
        return Err(arg_err!("block index {b} outside 0..{}", model.blocks.len()));
    }
    let segs: Vec<usize> = (0..calib.num_segments()).collect();
    let tokens = calib.gather(&segs);
    let mut x = model.embed(&tokens, segs.len())?;
    for blk in &model.blocks[..b] {
        x = block_forward(blk, &model.config, &x, act_bits)?;
    }
    let y_fp = block_forward(&model.blocks[b], &model.config, &x, None)?;
    Ok(BlockCapture { block: b, x, y_fp })
}

/// Mean over samples of the squared Frobenius error, accumulated in f64.
pub fn reconstruction_loss(y_hat: &Tensor, y_fp: &Tensor) -> Result<f64> {
    if y_hat.shape() != y_fp.shape() {
        return Err(dim_err!("reconstruction shapes differ: {:?} vs {:?}", y_hat.shape(), y_fp.shape()));
    }
    let samples = y_hat.shape().first().copied().unwrap_or(1).max(1);
    let sq: f64 = y_hat.data().iter().zip(y_fp.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
    Ok(sq / samples as f64)
}

/// Records `sum((ŷ − y)²) / samples` on the graph.
pub fn reconstruction_loss_graph(g: &mut Graph, y_hat: Var, y_fp: Var, samples: usize) -> Result<Var> {
    let diff = g.sub(y_hat, y_fp)?;
    let sq = g.sum_sq(diff);
    Ok(g.scale(sq, 1.0 / samples.max(1) as f32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub spec: QuantSpec,
    /// Per-group clipping search grid; `None` uses the spec's `(γ, β)`.
    pub search_clip: Option<usize>,
    pub schedule: ParSchedule,
    pub harden_order: HardenOrder,
    /// Adam steps per hardening iteration.
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learn the per-group dequantization scale factor.
    pub dst: bool,
    pub dst_weight_decay: f32,
    /// Per-token activation fake-quant inside the reconstruction.
    pub act_bits: Option<u8>,
    pub log_interval: usize,
    pub seed: u64,
    /// Keep the round-to-nearest codes (with unit scale factors) when the
    /// learned rounding ends with a higher full-capture loss.
    pub rtn_fallback: bool,
}

impl ReconConfig {
    pub fn new(spec: QuantSpec) -> Self {
        Self {
            spec,
            search_clip: None,
            schedule: ParSchedule::default_exponential(),
            harden_order: HardenOrder::default(),
            steps: 250,
            batch_size: 4,
            adam: AdamConfig::default(),
            dst: true,
            dst_weight_decay: DST_WEIGHT_DECAY,
            act_bits: None,
            log_interval: 10,
            seed: 0,
            rtn_fallback: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.batch_size == 0 {
            return Err(arg_err!("batch size must be at least 1"));
        }
        if self.log_interval == 0 {
            return Err(arg_err!("log interval must be at least 1"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(arg_err!("learning rate must be positive, got {}", self.adam.lr));
        }
        if !(self.dst_weight_decay >= 0.0) {
            return Err(arg_err!("weight decay must be non-negative"));
        }
        if let Some(b) = self.act_bits {
            if !(2..=8).contains(&b) {
                return Err(arg_err!("activation bits {b} outside 2..=8"));
            }
        }
        if self.search_clip == Some(0) {
            return Err(arg_err!("clipping search grid must be at least 1"));
        }
        Ok(())
    }
}

/// Quantization parameters for one weight under the run's clipping policy.
pub fn layer_params(w: &Tensor, cfg: &ReconConfig) -> Result<QuantParams> {
    let (rows, cols) = w.as_matrix();
    let g = cfg.spec.group_size(cols)?;
    let clip = match cfg.search_clip {
        Some(grid) => search_clipping(w, &cfg.spec, grid)?,
        None => vec![(cfg.spec.gamma, cfg.spec.beta); rows * cols / g],
    };
    compute_qparams_clipped(w, &cfg.spec, &clip)
}

/// Positions where two quantized tensors disagree, and their share in
/// percent of all elements.
pub fn count_flips(a: &QuantizedTensor, b: &QuantizedTensor) -> Result<(usize, f64)> {
    if a.shape != b.shape || a.spec != b.spec || a.params.group_size != b.params.group_size {
        return Err(arg_err!("flip count needs tensors with the same shape and quantization spec"));
    }
    let n = a.numel();
    let count = a.codes().iter().zip(b.codes()).filter(|(x, y)| **x != *y).count();
    let pct = if n == 0 { 0.0 } else { count as f64 / n as f64 * 100.0 };
    Ok((count, pct))
}

/// Learned rounding of a set of linear weights.
#[derive(Debug, Clone)]
pub struct RoundingOutcome {
    /// Weights with the hard rounding folded in; re-quantizing them with the
    /// stored parameters reproduces the stored codes.
    pub merged: Vec<Tensor>,
    pub quantized: Vec<QuantizedTensor>,
    /// Round-to-nearest on the same parameters, for flip statistics.
    pub rtn: Vec<QuantizedTensor>,
    pub report: ReconReport,
}

/// Result of calibrating one block; per-layer vectors are indexed by
/// [`Proj::index`].
#[derive(Debug, Clone)]
pub struct BlockOutcome {
    pub merged: BlockWeights,
    /// Weights used downstream: the dequantized codes, scale factor applied.
    pub deployed: BlockWeights,
    pub quantized: Vec<QuantizedTensor>,
    pub rtn: Vec<QuantizedTensor>,
    pub report: ReconReport,
}

struct Layer {
    name: String,
    theta: Tensor,
    params: QuantParams,
    sq: SoftQuantizer,
    offset: usize,
    groups: std::ops::Range<usize>,
}

fn with_linears(base: &BlockWeights, linears: Vec<Tensor>) -> BlockWeights {
    let mut out = base.clone();
    for (p, t) in Proj::ALL.into_iter().zip(linears) {
        *out.linear_mut(p) = t;
    }
    out
}

fn capture_loss(w: &BlockWeights, model_cfg: &DecoderConfig, cap: &BlockCapture, act_bits: Option<u8>) -> Result<f64> {
    let y = block_forward(w, model_cfg, &cap.x, act_bits)?;
    reconstruction_loss(&y, &cap.y_fp)
}

fn capture_dims(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        s => Err(dim_err!("capture {what} must be [samples × seq × features], got {s:?}")),
    }
}

/// Reconstruction loss of fixed weights over the whole capture.
fn full_capture_loss<F>(weights: &[Tensor], cap: &BlockCapture, forward: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var], Var, usize) -> Result<Var>,
{
    let [n, seq, din] = capture_dims(&cap.x, "inputs")?;
    let mut g = Graph::new();
    let w: Vec<Var> = weights.iter().map(|t| g.constant(t.clone())).collect();
    let x = g.constant(cap.x.clone().reshape([n * seq, din])?);
    let y = forward(&mut g, &w, x, n)?;
    let y = g.value(y).clone().reshape(cap.y_fp.shape().to_vec())?;
    reconstruction_loss(&y, &cap.y_fp)
}

/// Progressive adaptive rounding of `weights` so that `forward` reproduces
/// the capture's targets.
///
/// `forward(g, w, x, batch)` records the module on `g` with weight handles
/// `w` (in the order of `weights`) and input `x` of `[batch·seq × in]`
/// rows. Each schedule entry `P_k` hardens rounding variables across all
/// weights until `P_k`% are hard, then runs `steps` Adam updates of the
/// remaining soft logits (and of the scale logits when enabled). A final
/// step hardens everything. Adam state persists across iterations.
pub fn optimize_rounding<F>(
    weights: &[(String, &Tensor)],
    cap: &BlockCapture,
    cfg: &ReconConfig,
    forward: F,
) -> Result<RoundingOutcome>
where
    F: Fn(&mut Graph, &[Var], Var, usize) -> Result<Var>,
{
    cfg.validate()?;
    let start = Instant::now();
    let [samples, seq, din] = capture_dims(&cap.x, "inputs")?;
    let [ys, yseq, dout] = capture_dims(&cap.y_fp, "targets")?;
    if ys != samples || yseq != seq || samples == 0 {
        return Err(dim_err!("capture inputs {:?} and targets {:?} do not match", cap.x.shape(), cap.y_fp.shape()));
    }

    let mut layers = Vec::with_capacity(weights.len());
    let mut parts = Vec::with_capacity(weights.len());
    let (mut offset, mut goff) = (0, 0);
    for (name, theta) in weights {
        let params = layer_params(theta, cfg)?;
        let sq = SoftQuantizer::new(theta, &params, &cfg.spec)?;
        parts.push(RoundingState::init(theta.data(), &params));
        let groups = goff..goff + params.num_groups();
        goff = groups.end;
        layers.push(Layer { name: name.clone(), offset, groups, theta: (*theta).clone(), params, sq });
        offset += theta.numel();
    }
    let mut state = RoundingState::concat(parts);
    let initial_state = state.clone();
    let mut v = vec![0.0f32; goff];

    let rtn: Vec<QuantizedTensor> = layers
        .iter()
        .map(|l| {
            let codes = quantize_with_params(l.theta.data(), &l.params, &cfg.spec);
            QuantizedTensor::from_codes(l.sq.shape, &codes, l.params.clone(), None, cfg.spec)
        })
        .collect::<Result<_>>()?;
    let rtn_w: Vec<Tensor> = rtn.iter().map(dequantize).collect();
    let initial_loss = full_capture_loss(&rtn_w, cap, &forward)?;

    let mut adam_nu = Adam::new(state.total(), cfg.adam);
    let mut adam_v = Adam::new(v.len(), cfg.adam);
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (cap.block as u64).wrapping_mul(0x9e37_79b9)));
    let batch = cfg.batch_size.min(samples);
    let mut cursor = 0usize;
    let mut trace = Vec::new();

    for (k, &pk) in cfg.schedule.percents.iter().enumerate() {
        state.harden_ordered(pk, cfg.harden_order)?;
        for t in 0..cfg.steps {
            let picks: Vec<usize> = (0..batch).map(|i| order[(cursor + i) % samples]).collect();
            cursor = (cursor + batch) % samples;

            let mut g = Graph::new();
            let mut nu_vars = Vec::with_capacity(layers.len());
            let mut v_vars = Vec::with_capacity(layers.len());
            let mut lin = Vec::with_capacity(layers.len());
            for l in &layers {
                let n = l.sq.numel();
                let nu = g.param(Tensor::vector(state.nu[l.offset..l.offset + n].to_vec()));
                let vv = cfg.dst.then(|| g.param(Tensor::vector(v[l.groups.clone()].to_vec())));
                lin.push(l.sq.forward(&mut g, nu, vv)?);
                nu_vars.push(nu);
                v_vars.push(vv);
            }
            let x = g.constant(Tensor::new([batch * seq, din], cap.select(&cap.x, &picks))?);
            let y = g.constant(Tensor::new([batch * seq, dout], cap.select(&cap.y_fp, &picks))?);
            let y_hat = forward(&mut g, &lin, x, batch)?;
            let loss = reconstruction_loss_graph(&mut g, y_hat, y, batch)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                let vmax = v.iter().fold(0.0f32, |m, x| m.max(x.abs()));
                return Err(Error::Divergence(format!(
                    "block {}: loss {lv} at iteration {}, step {}; {} of {} rounding variables hard, max |v| = {vmax}",
                    cap.block,
                    k + 1,
                    t + 1,
                    state.hardened_count(),
                    state.total()
                )));
            }
            if (t + 1) % cfg.log_interval == 0 {
                trace.push(LossPoint { iteration: k + 1, step: t + 1, hard_percent: state.hardened_percent(), loss: lv as f64 });
            }
            g.backward(loss)?;

            let mut gnu = vec![0.0f32; state.total()];
            let mut gv = vec![0.0f32; v.len()];
            for (i, l) in layers.iter().enumerate() {
                if let Some(gr) = g.grad(nu_vars[i]) {
                    gnu[l.offset..l.offset + gr.len()].copy_from_slice(gr);
                }
                if let Some(gr) = v_vars[i].and_then(|vv| g.grad(vv)) {
                    gv[l.groups.clone()].copy_from_slice(gr);
                }
            }
            adam_nu.step(&mut state.nu, Some(&gnu), 0.0)?;
            if cfg.dst {
                adam_v.step(&mut v, Some(&gv), cfg.dst_weight_decay)?;
            }
        }
    }
    state.harden_ordered(100.0, cfg.harden_order)?;
    let mut done = finish_rounding(&layers, &rtn, &state, cfg.dst.then_some(v.as_slice()), cap, cfg, &forward)?;
    let mut fell_back = false;
    if cfg.rtn_fallback && done.3 > initial_loss {
        let mut init = initial_state;
        init.harden_ordered(100.0, cfg.harden_order)?;
        let alt = finish_rounding(&layers, &rtn, &init, None, cap, cfg, &forward)?;
        if alt.3 < done.3 {
            done = alt;
            fell_back = true;
        }
    }
    let (merged, quantized, flips, final_loss) = done;
    Ok(RoundingOutcome {
        merged,
        quantized,
        rtn,
        report: ReconReport {
            block: cap.block,
            initial_loss,
            final_loss,
            fell_back,
            loss_trace: trace,
            flips,
            seconds: start.elapsed().as_secs_f64(),
        },
    })
}

type Finished = (Vec<Tensor>, Vec<QuantizedTensor>, Vec<LayerFlips>, f64);

/// Merges a fully hard state into weights and codes and measures the
/// deployed loss on the whole capture.
fn finish_rounding<F>(
    layers: &[Layer],
    rtn: &[QuantizedTensor],
    state: &RoundingState,
    v: Option<&[f32]>,
    cap: &BlockCapture,
    cfg: &ReconConfig,
    forward: &F,
) -> Result<Finished>
where
    F: Fn(&mut Graph, &[Var], Var, usize) -> Result<Var>,
{
    let mut merged = Vec::with_capacity(layers.len());
    let mut quantized = Vec::with_capacity(layers.len());
    let mut flips = Vec::with_capacity(layers.len());
    for (l, r) in layers.iter().zip(rtn) {
        let sub = state.slice(l.offset..l.offset + l.sq.numel());
        let codes = hardened_codes(l.theta.data(), &sub.nu, &l.params, &cfg.spec)?;
        let m = finalize_merge(l.theta.data(), &sub, &l.params, &cfg.spec)?;
        if quantize_with_params(&m, &l.params, &cfg.spec) != codes {
            return Err(Error::State(format!("merged {} does not requantize to its codes", l.name)));
        }
        let dst = cfg.dst.then(|| v.map_or_else(|| vec![0.0; l.groups.len()], |v| v[l.groups.clone()].to_vec()));
        let q = QuantizedTensor::from_codes(l.sq.shape, &codes, l.params.clone(), dst, cfg.spec)?;
        let (count, percent) = count_flips(&q, r)?;
        flips.push(LayerFlips { layer: l.name.clone(), count, percent });
        merged.push(Tensor::new(l.sq.shape, m)?);
        quantized.push(q);
    }
    let deployed: Vec<Tensor> = quantized.iter().map(dequantize).collect();
    let final_loss = full_capture_loss(&deployed, cap, forward)?;
    Ok((merged, quantized, flips, final_loss))
}

/// Rounding of a single linear layer `y = x·wᵀ` against its capture.
pub fn optimize_linear(w: &Tensor, cap: &BlockCapture, cfg: &ReconConfig) -> Result<RoundingOutcome> {
    optimize_rounding(&[("linear".to_string(), w)], cap, cfg, |g, w, x, _| g.linear(x, w[0]))
}

/// Rounding of a decoder block's seven projections against its capture.
pub fn optimize_block(
    block: &BlockWeights,
    model_cfg: &DecoderConfig,
    cap: &BlockCapture,
    cfg: &ReconConfig,
) -> Result<BlockOutcome> {
    let d = model_cfg.d_model;
    if cap.x.shape().last() != Some(&d) || cap.y_fp.shape() != cap.x.shape() {
        return Err(dim_err!("block capture {:?} / {:?} does not match d_model {d}", cap.x.shape(), cap.y_fp.shape()));
    }
    let weights: Vec<(String, &Tensor)> = Proj::ALL.iter().map(|&p| (p.name().to_string(), block.linear(p))).collect();
    let act_bits = cfg.act_bits;
    let out = optimize_rounding(&weights, cap, cfg, |g, w, x, batch| {
        let vars = BlockVars {
            attn_norm: g.constant(block.attn_norm.clone()),
            mlp_norm: g.constant(block.mlp_norm.clone()),
            linears: w.try_into().map_err(|_| dim_err!("expected seven projections"))?,
        };
        block_forward_graph(g, model_cfg, &vars, x, batch, act_bits)
    })?;
    Ok(BlockOutcome {
        merged: with_linears(block, out.merged),
        deployed: with_linears(block, out.quantized.iter().map(dequantize).collect()),
        quantized: out.quantized,
        rtn: out.rtn,
        report: out.report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rtn,
    Par,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeConfig {
    pub method: Method,
    pub recon: ReconConfig,
    /// Capture each block's inputs through the full-precision predecessors
    /// instead of the already-quantized ones.
    pub fp_propagation: bool,
}

#[derive(Debug, Clone)]
pub struct QuantizedModel {
    /// f32 model with every projection replaced by its dequantized codes.
    pub model: Model,
    /// Stored codes by tensor name.
    pub tensors: BTreeMap<String, QuantizedTensor>,
    /// Round-to-nearest codes on the same parameters.
    pub rtn: BTreeMap<String, QuantizedTensor>,
    /// Merged full-precision weights by tensor name (empty for RTN).
    pub merged: BTreeMap<String, Tensor>,
    pub reports: Vec<ReconReport>,
}

/// Calibrates every block in order. Embeddings, norms, and the LM head stay
/// in full precision.
pub fn quantize_model(fp: &Model, calib: &TokenDataset, cfg: &QuantizeConfig) -> Result<QuantizedModel> {
    cfg.recon.validate()?;
    if calib.vocab_size() != fp.config.vocab_size {
        return Err(arg_err!("calibration vocab {} does not match model vocab {}", calib.vocab_size(), fp.config.vocab_size));
    }
    let mut work = fp.clone();
    let mut tensors = BTreeMap::new();
    let mut rtn_all = BTreeMap::new();
    let mut merged_all = BTreeMap::new();
    let mut reports = Vec::with_capacity(fp.blocks.len());
    for b in 0..fp.blocks.len() {
        let source = if cfg.fp_propagation { fp } else { &work };
        let cap = capture_block_io(source, b, calib, cfg.recon.act_bits)?;
        let block = &fp.blocks[b];
        let (deployed, quantized, rtn, merged, report) = match cfg.method {
            Method::Par => {
                let o = optimize_block(block, &fp.config, &cap, &cfg.recon)?;
                (o.deployed, o.quantized, o.rtn, Some(o.merged), o.report)
            }
            Method::Rtn => {
                let start = Instant::now();
                let q: Vec<QuantizedTensor> = Proj::ALL
                    .iter()
                    .map(|&p| {
                        let w = block.linear(p);
                        let params = layer_params(w, &cfg.recon)?;
                        crate::quant::quantize_rtn_with(w, params, &cfg.recon.spec)
                    })
                    .collect::<Result<_>>()?;
                let deployed = with_linears(block, q.iter().map(dequantize).collect());
                let loss = capture_loss(&deployed, &fp.config, &cap, cfg.recon.act_bits)?;
                let flips = Proj::ALL
                    .iter()
                    .map(|p| LayerFlips { layer: p.name().to_string(), count: 0, percent: 0.0 })
                    .collect();
                let report = ReconReport {
                    block: b,
                    initial_loss: loss,
                    final_loss: loss,
                    fell_back: false,
                    loss_trace: Vec::new(),
                    flips,
                    seconds: start.elapsed().as_secs_f64(),
                };
                (deployed, q.clone(), q, None, report)
            }
        };
        for (i, p) in Proj::ALL.into_iter().enumerate() {
            let name = linear_name(b, p);
            tensors.insert(name.clone(), quantized[i].clone());
            rtn_all.insert(name.clone(), rtn[i].clone());
            if let Some(m) = &merged {
                merged_all.insert(name, m.linear(p).clone());
            }
        }
        work.blocks[b] = deployed;
        reports.push(report);
    }
    Ok(QuantizedModel { model: work, tensors, rtn: rtn_all, merged: merged_all, reports })
}
