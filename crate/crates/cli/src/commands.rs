use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use lowbit::error::{Error, Result};
use lowbit::model::checkpoint::{from_container, model_config, quantized_records, to_container};
use lowbit::model::{patterned_corpus, perplexity, train_toy, DecoderConfig, Proj, TokenDataset, TrainConfig};
use lowbit::par::{AdamConfig, HardenOrder, ParSchedule};
use lowbit::quant::{quantize_rtn_with, Container, Granularity, QuantSpec, Record};
use lowbit::recon::{
    count_flips, quantize_model, write_loss_trace_csv, write_reports_jsonl, Method, QuantizeConfig, ReconConfig,
};
use serde_json::{json, Value};

use crate::args::*;

fn arg(msg: String) -> Error {
    Error::Argument(msg)
}

fn load_data(path: &Path, format: DataFormat, vocab: usize, seq_len: usize) -> Result<TokenDataset> {
    match format {
        DataFormat::Text => {
            if vocab != 256 {
                return Err(arg(format!("text corpora use the 256-byte vocabulary, model has {vocab}")));
            }
            TokenDataset::ingest_text(path, seq_len)
        }
        DataFormat::Tokens => TokenDataset::ingest_tokens(path, vocab, seq_len),
    }
}

fn select(ds: TokenDataset, skip: usize, take: Option<usize>) -> Result<TokenDataset> {
    let n = ds.num_segments();
    let end = match take {
        Some(0) => return Err(arg("--take must be at least 1".into())),
        Some(t) => skip.checked_add(t).filter(|&e| e <= n),
        None => Some(n),
    };
    match end {
        Some(end) if skip < end => ds.slice(skip..end),
        _ => Err(arg(format!("segment selection skip {skip}, take {take:?} exceeds the {n} segments available"))),
    }
}

fn load_selected(d: &DataArgs, cfg: &DecoderConfig) -> Result<TokenDataset> {
    select(load_data(&d.data, d.data_format, cfg.vocab_size, cfg.seq_len)?, d.skip, d.take)
}

fn run_record(cmd: &Command) -> Result<Value> {
    Ok(serde_json::to_value(cmd)?)
}

pub fn train_toy_cmd(a: &TrainArgs, cmd: &Command) -> Result<()> {
    let cfg = DecoderConfig {
        vocab_size: a.vocab_size,
        d_model: a.d_model,
        n_heads: a.heads,
        n_blocks: a.blocks,
        mlp_hidden: a.mlp_hidden,
        seq_len: a.seq_len,
        rope: a.rope,
    };
    cfg.validate()?;
    if a.batch_size == 0 {
        return Err(arg("--batch-size must be at least 1".into()));
    }
    if !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(arg(format!("--lr must be positive, got {}", a.lr)));
    }
    let data = if a.synthetic {
        let toks = patterned_corpus(a.vocab_size, a.synthetic_words, a.synthetic_tokens, a.seed)?;
        TokenDataset::new(toks, a.vocab_size, a.seq_len)?
    } else {
        let path = a.data.as_ref().ok_or_else(|| arg("--data or --synthetic is required".into()))?;
        load_data(path, a.data_format, a.vocab_size, a.seq_len)?
    };
    if let Some(p) = &a.save_corpus {
        data.write_tokens(p)?;
    }
    let tc = TrainConfig { steps: a.steps, batch_size: a.batch_size, lr: a.lr, seed: a.seed, log_interval: 100 };
    let (model, report) = train_toy(cfg, &data, &tc)?;
    let meta = json!({
        "run": run_record(cmd)?,
        "seed": a.seed,
        "data_hash": data.hash(),
        "train": report,
    });
    to_container(&model, &BTreeMap::new(), meta)?.save(&a.out)?;
    println!("trained {} parameters for {} steps; training perplexity {:.4}", model.num_params(), a.steps, report.final_ppl);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn quant_spec(q: &QuantArgs) -> Result<QuantSpec> {
    let gran = if q.group_size == 0 { Granularity::PerChannel } else { Granularity::PerGroup { group_size: q.group_size } };
    QuantSpec::new(q.bits, gran)?.with_clipping(q.gamma, q.beta)
}

/// Validates every quantization flag against the model before any work.
fn recon_config(q: &QuantArgs, cfg: &DecoderConfig, schedule: ParSchedule) -> Result<ReconConfig> {
    let spec = quant_spec(q)?;
    for p in Proj::ALL {
        let cols = p.shape(cfg)[1];
        spec.group_size(cols).map_err(|e| match e {
            Error::Argument(m) => arg(format!("{}: {m}", p.name())),
            other => other,
        })?;
    }
    if let Some(b) = q.act_bits {
        if !(2..=8).contains(&b) {
            return Err(arg(format!("--act-bits {b} outside 2..=8")));
        }
    }
    let rc = ReconConfig {
        spec,
        search_clip: q.search_clip,
        schedule,
        harden_order: match q.harden_order {
            HardenOrderArg::Highest => HardenOrder::HighestScore,
            HardenOrderArg::Lowest => HardenOrder::LowestScore,
        },
        steps: q.steps,
        batch_size: q.batch_size,
        adam: AdamConfig::with_lr(q.lr),
        dst: !q.no_dst,
        dst_weight_decay: lowbit::par::DST_WEIGHT_DECAY,
        act_bits: if q.quant_acts { q.act_bits } else { None },
        log_interval: q.log_interval,
        seed: q.seed,
        rtn_fallback: !q.no_rtn_fallback,
    };
    rc.validate()?;
    Ok(rc)
}

fn quantize_config(q: &QuantArgs, rc: ReconConfig) -> QuantizeConfig {
    QuantizeConfig {
        method: match q.method {
            MethodArg::Par => Method::Par,
            MethodArg::Rtn => Method::Rtn,
        },
        recon: rc,
        fp_propagation: q.fp_propagation,
    }
}

pub fn quantize_cmd(a: &QuantizeArgs, cmd: &Command) -> Result<()> {
    let src = Container::load(&a.model)?;
    let cfg = model_config(&src)?;
    let schedule: ParSchedule = a.quant.schedule.parse()?;
    let rc = recon_config(&a.quant, &cfg, schedule)?;
    let calib = load_selected(&a.calib, &cfg)?;
    if !quantized_records(&src).is_empty() {
        return Err(arg(format!("{} is already quantized", a.model.display())));
    }
    let fp = from_container(&src)?;
    let qc = quantize_config(&a.quant, rc);
    let out = quantize_model(&fp, &calib, &qc)?;
    let run = run_record(cmd)?;
    let meta = json!({
        "run": run,
        "seed": a.quant.seed,
        "data_hash": calib.hash(),
        "quantize": qc,
        "act_bits": a.quant.act_bits,
    });
    to_container(&fp, &out.tensors, meta)?.save(&a.out)?;
    if let Some(p) = &a.report {
        write_reports_jsonl(p, &out.reports, &json!({ "run": run, "seed": a.quant.seed, "data_hash": calib.hash() }))?;
    }
    if let Some(dir) = &a.trace_dir {
        fs::create_dir_all(dir)?;
        for r in &out.reports {
            write_loss_trace_csv(dir.join(format!("block{}_loss.csv", r.block)), r)?;
        }
    }
    for r in &out.reports {
        let flips: usize = r.flips.iter().map(|f| f.count).sum();
        println!(
            "block {}: initial loss {:.6}, final loss {:.6}, {} flipped codes, {:.1}s",
            r.block, r.initial_loss, r.final_loss, flips, r.seconds
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Byte accounting of the quantized records in a container.
pub struct Memory {
    pub layers: usize,
    pub codes: usize,
    pub scales_zeros: usize,
    pub factors: usize,
    pub f32_equivalent: usize,
    pub all_f32: usize,
}

pub fn memory(c: &Container) -> Memory {
    let mut m = Memory { layers: 0, codes: 0, scales_zeros: 0, factors: 0, f32_equivalent: 0, all_f32: 0 };
    for (_, r) in &c.records {
        m.all_f32 += 4 * r.numel();
        if let Record::Quant(q) = r {
            m.layers += 1;
            m.codes += q.packed.len();
            m.scales_zeros += 5 * q.params.num_groups();
            m.factors += q.dst.as_ref().map_or(0, |v| 4 * v.len());
            m.f32_equivalent += 4 * q.numel();
        }
    }
    m
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let c = Container::load(&a.model)?;
    let model = from_container(&c)?;
    let data = load_selected(&a.data, &model.config)?;
    let act_bits = a.act_bits.or_else(|| c.metadata.get("act_bits").and_then(Value::as_u64).map(|b| b as u8));
    if let Some(b) = act_bits {
        if !(2..=8).contains(&b) {
            return Err(arg(format!("--act-bits {b} outside 2..=8")));
        }
    }
    let ppl = perplexity(&model, &data, act_bits)?;
    let m = memory(&c);
    println!("perplexity: {ppl:.6}");
    let packed = m.codes + m.scales_zeros + m.factors;
    if m.layers == 0 {
        println!("weight memory: no quantized layers, {} bytes f32", m.all_f32);
    } else {
        println!(
            "weight memory: {packed} bytes packed ({} codes + {} scales/zero points + {} scale factors) vs {} bytes f32 over {} quantized layers (ratio {:.4})",
            m.codes,
            m.scales_zeros,
            m.factors,
            m.f32_equivalent,
            m.layers,
            packed as f64 / m.f32_equivalent as f64
        );
    }
    if let Some(p) = &a.json {
        let v = json!({
            "perplexity": ppl,
            "act_bits": act_bits,
            "data_hash": data.hash(),
            "packed_bytes": packed,
            "code_bytes": m.codes,
            "scale_zero_bytes": m.scales_zeros,
            "scale_factor_bytes": m.factors,
            "f32_bytes": m.f32_equivalent,
            "quantized_layers": m.layers,
        });
        fs::write(p, serde_json::to_string_pretty(&v)?)?;
    }
    Ok(())
}

pub fn flips_cmd(a: &FlipArgs) -> Result<()> {
    let fp = from_container(&Container::load(&a.model)?)?;
    let qc = Container::load(&a.quantized)?;
    let quantized = quantized_records(&qc);
    if quantized.is_empty() {
        return Err(arg(format!("{} holds no quantized layers", a.quantized.display())));
    }
    let named: BTreeMap<String, &lowbit::Tensor> = fp.named_tensors().into_iter().collect();
    let mut rows = Vec::new();
    for (name, q) in &quantized {
        let w = named.get(name).ok_or_else(|| arg(format!("{name} is not a tensor of the full-precision model")))?;
        let rtn = quantize_rtn_with(w, q.params.clone(), &q.spec)?;
        let (count, pct) = count_flips(q, &rtn)?;
        rows.push((name.clone(), count, q.numel(), pct));
    }
    let mut out = String::from("layer,flipped,total,percent\n");
    println!("{:<28} {:>10} {:>10} {:>9}", "layer", "flipped", "total", "percent");
    for (name, count, total, pct) in &rows {
        println!("{name:<28} {count:>10} {total:>10} {pct:>8.3}%");
        out.push_str(&format!("{name},{count},{total},{pct}\n"));
    }
    let (c, t): (usize, usize) = rows.iter().fold((0, 0), |(c, t), r| (c + r.1, t + r.2));
    println!("{:<28} {:>10} {:>10} {:>8.3}%", "all", c, t, c as f64 / t as f64 * 100.0);
    if let Some(p) = &a.csv {
        fs::write(p, out)?;
    }
    Ok(())
}

pub fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let src = Container::load(&a.model)?;
    let cfg = model_config(&src)?;
    let mut schedules = Vec::new();
    for &t in &a.temperatures {
        schedules.push(ParSchedule::exponential(t, a.iterations)?);
    }
    for l in &a.lists {
        schedules.push(l.parse::<ParSchedule>()?);
    }
    let base = recon_config(&a.quant, &cfg, ParSchedule::default_exponential())?;
    let calib = load_selected(&a.calib, &cfg)?;
    let eval = select(load_data(&a.eval_data, a.calib.data_format, cfg.vocab_size, cfg.seq_len)?, a.eval_skip, a.eval_take)?;
    let fp = from_container(&src)?;
    let act_bits = a.quant.act_bits;

    let mut csv = fs::File::create(&a.out)?;
    writeln!(csv, "schedule,perplexity,mean_final_loss")?;
    let fp_ppl = perplexity(&fp, &eval, act_bits)?;
    writeln!(csv, "fp,{fp_ppl},")?;
    let rtn = quantize_model(&fp, &calib, &QuantizeConfig { method: Method::Rtn, recon: base.clone(), fp_propagation: a.quant.fp_propagation })?;
    let rtn_ppl = perplexity(&rtn.model, &eval, act_bits)?;
    writeln!(csv, "rtn,{rtn_ppl},{}", mean_final(&rtn.reports))?;
    println!("fp {fp_ppl:.4}  rtn {rtn_ppl:.4}");
    for s in schedules {
        let rc = ReconConfig { schedule: s.clone(), ..base.clone() };
        let q = quantize_model(&fp, &calib, &QuantizeConfig { method: Method::Par, recon: rc, fp_propagation: a.quant.fp_propagation })?;
        let ppl = perplexity(&q.model, &eval, act_bits)?;
        writeln!(csv, "\"{s}\",{ppl},{}", mean_final(&q.reports))?;
        csv.flush()?;
        println!("{s}  {ppl:.4}");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn mean_final(r: &[lowbit::recon::ReconReport]) -> f64 {
    r.iter().map(|x| x.final_loss).sum::<f64>() / r.len().max(1) as f64
}

/// The `run` record stored by `quantize` / `train-toy`.
pub fn recorded_command(path: &Path) -> Result<Command> {
    let bytes = fs::read(path)?;
    let run = if bytes.starts_with(lowbit::quant::container::MAGIC) {
        Container::from_bytes(&bytes)?.metadata.get("run").cloned()
    } else {
        let text = String::from_utf8(bytes).map_err(|e| Error::Data(format!("report is not UTF-8: {e}")))?;
        let first = text.lines().next().ok_or_else(|| Error::Data("report is empty".into()))?;
        let v: Value = serde_json::from_str(first)?;
        v.get("config").and_then(|c| c.get("run")).cloned()
    };
    let run = run.ok_or_else(|| Error::Data(format!("{} carries no run record", path.display())))?;
    Ok(serde_json::from_value(run)?)
}
