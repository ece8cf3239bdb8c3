//! Model ↔ container conversion.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use super::{DecoderConfig, Model};
use crate::error::{data_err, Result};
use crate::quant::{dequantize, Container, QuantizedTensor, Record};

/// Builds a container holding every model tensor. Tensors named in
/// `quantized` are stored as integer codes, everything else as f32.
/// `extra` must be a JSON object; its keys are merged into the metadata
/// next to the model configuration.
pub fn to_container(model: &Model, quantized: &BTreeMap<String, QuantizedTensor>, extra: Value) -> Result<Container> {
    let mut meta = json!({ "model": model.config });
    match extra {
        Value::Object(map) => meta.as_object_mut().expect("object literal").extend(map),
        Value::Null => {}
        other => return Err(data_err!("checkpoint metadata must be an object, got {other}")),
    }
    let mut c = Container::new(meta);
    for (name, t) in model.named_tensors() {
        match quantized.get(&name) {
            Some(q) => {
                if q.shape[..] != *t.shape() {
                    return Err(data_err!("quantized {name} has shape {:?}, model has {:?}", q.shape, t.shape()));
                }
                c.push(name, Record::Quant(q.clone()));
            }
            None => c.push(name, Record::F32(t.clone())),
        }
    }
    Ok(c)
}

pub fn model_config(c: &Container) -> Result<DecoderConfig> {
    let cfg = c
        .metadata
        .get("model")
        .ok_or_else(|| data_err!("container metadata has no model configuration"))?;
    Ok(serde_json::from_value(cfg.clone())?)
}

/// Materializes an f32 model; quantized records are dequantized, with the
/// tuned scale factor applied when present.
pub fn from_container(c: &Container) -> Result<Model> {
    let config = model_config(c)?;
    Model::from_named(config, |name| match c.get(name) {
        Some(Record::F32(t)) => Ok(t.clone()),
        Some(Record::Quant(q)) => Ok(dequantize(q)),
        None => Err(data_err!("container is missing tensor {name}")),
    })
}

/// Quantized records by name.
pub fn quantized_records(c: &Container) -> BTreeMap<String, QuantizedTensor> {
    c.records
        .iter()
        .filter_map(|(n, r)| match r {
            Record::Quant(q) => Some((n.clone(), q.clone())),
            Record::F32(_) => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_name, Proj};
    use crate::quant::{quantize_rtn, QuantSpec};

    #[test]
    fn fp_and_quantized_round_trip() {
        let cfg = DecoderConfig { vocab_size: 10, d_model: 8, n_heads: 2, n_blocks: 1, mlp_hidden: 8, seq_len: 4, rope: false };
        let m = Model::init(cfg, 2).unwrap();
        let c = to_container(&m, &BTreeMap::new(), json!({"seed": 2})).unwrap();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(from_container(&back).unwrap(), m);
        assert_eq!(back.metadata["seed"], 2);

        let name = linear_name(0, Proj::Up);
        let q = quantize_rtn(m.blocks[0].linear(Proj::Up), &QuantSpec::per_channel(8).unwrap()).unwrap();
        let deq = dequantize(&q);
        let qc = to_container(&m, &BTreeMap::from([(name.clone(), q)]), Value::Null).unwrap();
        let qm = from_container(&qc).unwrap();
        assert_eq!(qm.blocks[0].linear(Proj::Up), &deq);
        assert_eq!(quantized_records(&qc).len(), 1);
    }
}
