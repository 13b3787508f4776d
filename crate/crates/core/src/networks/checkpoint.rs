//! Checkpoints: safetensors file holding parameters and optimiser moments, with the model
//! config, schedule, adapter registry and training state in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use osr_autodiff::{Moments, ParamStore, Scalar, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::lora::LoraRegistry;
use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

pub const FORMAT: &str = "osr-checkpoint/1";

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainState {
    /// Last completed phase, e.g. `vae`, `base`, `stage1`, `stage2`.
    pub phase: String,
    pub step: u64,
    pub seed: u64,
    /// Extra values such as the parameter hash recorded when a phase started.
    pub notes: BTreeMap<String, String>,
}

/// Optimiser moments keyed by group (`gen`, `disc`) then parameter name.
pub type OptimStates<T> = BTreeMap<String, HashMap<String, Moments<T>>>;

pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub disc: Option<ParamStore<T>>,
    pub optim: OptimStates<T>,
    pub state: TrainState,
}

fn f32_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    t.data()
        .iter()
        .flat_map(|v| (v.to_f64_lossy() as f32).to_le_bytes())
        .collect()
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    disc: Option<&ParamStore<T>>,
    optim: &OptimStates<T>,
    state: &TrainState,
) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (_, name, t) in model.store.iter() {
        entries.push((format!("param/{name}"), t.shape().to_vec(), f32_bytes(t)));
    }
    if let Some(d) = disc {
        for (_, name, t) in d.iter() {
            entries.push((format!("disc/{name}"), t.shape().to_vec(), f32_bytes(t)));
        }
    }
    let mut adam_steps: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for (group, moments) in optim {
        let steps = adam_steps.entry(group.clone()).or_default();
        for (name, m) in moments {
            entries.push((format!("adam/{group}/m/{name}"), m.m.shape().to_vec(), f32_bytes(&m.m)));
            entries.push((format!("adam/{group}/v/{name}"), m.v.shape().to_vec(), f32_bytes(&m.v)));
            steps.insert(name.clone(), m.step);
        }
    }
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("config".to_string(), json(&model.config));
    meta.insert("schedule".to_string(), model.schedule.to_text());
    meta.insert("lora".to_string(), json(&model.lora));
    meta.insert("latent_scale".to_string(), format!("{:e}", model.latent_scale));
    meta.insert("state".to_string(), json(state));
    meta.insert("adam_steps".to_string(), json(&adam_steps));
    meta.insert("has_disc".to_string(), disc.is_some().to_string());

    let views = entries
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Format(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn json<S: serde::Serialize>(v: &S) -> String {
    serde_json::to_string(v).expect("serialisable metadata")
}

fn read_tensor<T: Scalar>(st: &SafeTensors, name: &str) -> Result<Tensor<T>> {
    let view = st
        .tensor(name)
        .map_err(|_| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
    if view.dtype() != Dtype::F32 {
        return Err(Error::Format(format!("tensor `{name}` is {:?}, expected F32", view.dtype())));
    }
    let data = view
        .data()
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec(view.shape(), data).map_err(|e| Error::Format(e.to_string()))
}

fn meta_field<'a>(meta: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))
}

fn parse_json<D: serde::de::DeserializeOwned>(text: &str, key: &str) -> Result<D> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint `{key}`: {e}")))
}

/// Loads a checkpoint, rebuilding the architecture from its config and checking that the
/// stored tensors match it exactly.
pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Format("checkpoint has no metadata".into()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    let format = meta_field(&meta, "format")?;
    if format != FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format `{format}`")));
    }
    let config: ModelConfig = parse_json(meta_field(&meta, "config")?, "config")?;
    let schedule = NoiseSchedule::from_text(meta_field(&meta, "schedule")?)?;
    let lora: LoraRegistry = parse_json(meta_field(&meta, "lora")?, "lora")?;
    let latent_scale: f64 = meta_field(&meta, "latent_scale")?
        .parse()
        .map_err(|_| Error::Format("bad latent_scale".into()))?;
    let state: TrainState = parse_json(meta_field(&meta, "state")?, "state")?;
    let adam_steps: BTreeMap<String, BTreeMap<String, u64>> =
        parse_json(meta_field(&meta, "adam_steps")?, "adam_steps")?;
    let has_disc = meta_field(&meta, "has_disc")? == "true";

    let mut model = Model::<T>::new(config, schedule, 0)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for ad in lora.adapters() {
        model
            .lora
            .inject(&mut model.store, &mut rng, &ad.site, ad.set, ad.rank, ad.scale)?;
    }
    model.latent_scale = latent_scale;
    let mut expected = fill_store(&st, &mut model.store, "param/")?;

    let disc = if has_disc {
        let mut d = super::disc::init::<T>(0);
        expected += fill_store(&st, &mut d, "disc/")?;
        Some(d)
    } else {
        None
    };

    let mut optim = OptimStates::new();
    for (group, steps) in adam_steps {
        let mut moments = HashMap::new();
        for (name, step) in steps {
            let m = read_tensor(&st, &format!("adam/{group}/m/{name}"))?;
            let v = read_tensor(&st, &format!("adam/{group}/v/{name}"))?;
            expected += 2;
            moments.insert(name, Moments { m, v, step });
        }
        optim.insert(group, moments);
    }
    if expected != st.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, architecture accounts for {expected}",
            st.len()
        )));
    }
    Ok(Checkpoint {
        model,
        disc,
        optim,
        state,
    })
}

fn fill_store<T: Scalar>(st: &SafeTensors, store: &mut ParamStore<T>, prefix: &str) -> Result<usize> {
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in &names {
        let t = read_tensor(st, &format!("{prefix}{name}"))?;
        store.set(name, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(names.len())
}
