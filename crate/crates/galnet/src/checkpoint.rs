//! Model serialization: a self-describing JSON container holding the
//! config echo, every parameter (name, tag, shape, values), and the
//! batchnorm running statistics. f64 values survive the round trip
//! bitwise (shortest-round-trip printing, exact parsing).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{build_model, AttributeModel, ModelConfig, ParamRegistry, ParamTag};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub tag: ParamTag,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct BufferRecord {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamRecord>,
    pub buffers: Vec<BufferRecord>,
}

/// Captures the current model state.
pub fn snapshot(model: &AttributeModel, registry: &ParamRegistry) -> Checkpoint {
    let params = registry
        .iter()
        .map(|e| ParamRecord {
            name: e.name.clone(),
            tag: e.tag,
            shape: e.tensor.shape().to_vec(),
            values: e.tensor.to_vec(),
        })
        .collect();
    let buffers = model
        .named_buffers()
        .into_iter()
        .map(|(name, values)| BufferRecord { name, values })
        .collect();
    Checkpoint {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        params,
        buffers,
    }
}

pub fn save(model: &AttributeModel, registry: &ParamRegistry, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer(BufWriter::new(file), &snapshot(model, registry))
        .map_err(|e| Error::Contract(format!("checkpoint serialization failed: {e}")))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
        line: e.line(),
        msg: format!("checkpoint: {e}"),
    })?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Contract(format!(
            "unsupported checkpoint version {}",
            ck.version
        )));
    }
    Ok(ck)
}

/// Rebuilds a model from a checkpoint; every stored parameter and buffer
/// overwrites the fresh initialization by name.
pub fn load(path: impl AsRef<Path>) -> Result<(AttributeModel, ParamRegistry)> {
    let ck = read_file(path)?;
    let (model, registry) = build_model(&ck.config, 0)?;
    restore(&model, &registry, &ck)?;
    Ok((model, registry))
}

fn restore(model: &AttributeModel, registry: &ParamRegistry, ck: &Checkpoint) -> Result<()> {
    if ck.params.len() != registry.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} parameters, model expects {}",
            ck.params.len(),
            registry.len()
        )));
    }
    for rec in &ck.params {
        let entry = registry
            .get(&rec.name)
            .ok_or_else(|| Error::Contract(format!("checkpoint parameter '{}' unknown to the model", rec.name)))?;
        if entry.tensor.shape() != rec.shape.as_slice() {
            return Err(Error::Contract(format!(
                "parameter '{}': checkpoint shape {:?} vs model shape {:?}",
                rec.name,
                rec.shape,
                entry.tensor.shape()
            )));
        }
        if entry.tag != rec.tag {
            return Err(Error::Contract(format!(
                "parameter '{}': checkpoint tag {:?} vs model tag {:?}",
                rec.name, rec.tag, entry.tag
            )));
        }
        entry.tensor.set_values(&rec.values)?;
    }
    for buf in &ck.buffers {
        model.set_buffer(&buf.name, &buf.values)?;
    }
    Ok(())
}

/// Copies the feature net (FLN-tagged parameters, feature heads, and
/// batchnorm buffers) from a source checkpoint into an existing model —
/// the warm start for correlation-only training.
pub fn load_feature_net(
    model: &AttributeModel,
    registry: &ParamRegistry,
    source: &Checkpoint,
) -> Result<()> {
    if source.config.m != model.config.m
        || source.config.input != model.config.input
        || source.config.backbone != model.config.backbone
        || source.config.branch_channels != model.config.branch_channels
    {
        return Err(Error::Config(
            "init-from: source checkpoint feature net is structurally incompatible".into(),
        ));
    }
    for rec in &source.params {
        if !matches!(rec.tag, ParamTag::Fln | ParamTag::HeadF) {
            continue;
        }
        let entry = registry
            .get(&rec.name)
            .ok_or_else(|| Error::Contract(format!("init-from: parameter '{}' missing in target", rec.name)))?;
        if entry.tensor.shape() != rec.shape.as_slice() {
            return Err(Error::Contract(format!(
                "init-from: parameter '{}' shape mismatch",
                rec.name
            )));
        }
        entry.tensor.set_values(&rec.values)?;
    }
    for buf in &source.buffers {
        model.set_buffer(&buf.name, &buf.values)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvBlockSpec, Variant};
    use crate::tensor::Tensor;
    use rand::Rng;
    use tempfile::tempdir;

    fn micro_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            m: 3,
            input: (8, 8, 1),
            backbone: vec![ConvBlockSpec::plain(4)],
            branch_channels: 4,
            projection_channels: 2,
            variant,
            prior_groups: None,
            affinity_scale: false,
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let (model, registry) = build_model(&micro_config(Variant::GalJ), 42).unwrap();
        // dirty the running stats so buffers are non-trivial
        let mut rng = crate::model::component_rng(1, "ckpt-test");
        let batch = Tensor::new(
            &[2, 8, 8, 1],
            (0..128).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        model.forward(&batch, crate::layers::Mode::Train).unwrap();

        save(&model, &registry, &path).unwrap();
        let (loaded, loaded_reg) = load(&path).unwrap();
        for (a, b) in registry.iter().zip(loaded_reg.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tag, b.tag);
            assert_eq!(
                a.tensor.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.tensor.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "parameter {} not bitwise equal",
                a.name
            );
        }
        for ((na, va), (nb, vb)) in model.named_buffers().iter().zip(loaded.named_buffers().iter()) {
            assert_eq!(na, nb);
            assert_eq!(
                va.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                vb.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "buffer {na} not bitwise equal"
            );
        }
        assert_eq!(loaded.config, model.config);
    }

    #[test]
    fn saved_bytes_are_deterministic() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        let (model, registry) = build_model(&micro_config(Variant::Baseline), 7).unwrap();
        save(&model, &registry, &p1).unwrap();
        save(&model, &registry, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn feature_net_transfer_copies_only_feature_side() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("base.json");
        let (base_model, base_reg) = build_model(&micro_config(Variant::Baseline), 3).unwrap();
        // make the baseline distinctive
        for e in base_reg.iter() {
            let vals: Vec<f64> = e.tensor.to_vec().iter().map(|v| v + 1.0).collect();
            e.tensor.set_values(&vals).unwrap();
        }
        save(&base_model, &base_reg, &path).unwrap();
        let source = read_file(&path).unwrap();

        let (gal_model, gal_reg) = build_model(&micro_config(Variant::GalC), 9).unwrap();
        let cln_before: Vec<Vec<u64>> = gal_reg
            .iter()
            .filter(|e| matches!(e.tag, ParamTag::Cln | ParamTag::HeadC))
            .map(|e| e.tensor.to_vec().iter().map(|v| v.to_bits()).collect())
            .collect();
        load_feature_net(&gal_model, &gal_reg, &source).unwrap();
        for e in gal_reg.iter() {
            match e.tag {
                ParamTag::Fln | ParamTag::HeadF => {
                    let src = base_reg.get(&e.name).unwrap();
                    assert_eq!(e.tensor.to_vec(), src.tensor.to_vec(), "{} not copied", e.name);
                }
                _ => {}
            }
        }
        let cln_after: Vec<Vec<u64>> = gal_reg
            .iter()
            .filter(|e| matches!(e.tag, ParamTag::Cln | ParamTag::HeadC))
            .map(|e| e.tensor.to_vec().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(cln_before, cln_after, "correlation net must be untouched");
    }

    #[test]
    fn incompatible_feature_net_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("base.json");
        let (m1, r1) = build_model(&micro_config(Variant::Baseline), 0).unwrap();
        save(&m1, &r1, &path).unwrap();
        let source = read_file(&path).unwrap();
        let mut other = micro_config(Variant::GalC);
        other.branch_channels = 8;
        let (m2, r2) = build_model(&other, 0).unwrap();
        assert!(matches!(
            load_feature_net(&m2, &r2, &source).err(),
            Some(Error::Config(_))
        ));
    }
}
