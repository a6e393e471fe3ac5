//! Model checkpoints: a text header, a one-line JSON manifest, then every
//! parameter and momentum buffer as little-endian f64 in manifest order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Sgd;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::TrainState;

const MAGIC: &str = "AIA-CKPT 1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    state: TrainState,
    params: Vec<(String, Vec<usize>)>,
    velocity: Vec<(String, usize)>,
}

/// Everything needed to rebuild a model and continue its training.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Sgd<T>,
    pub state: TrainState,
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>, optimizer: &Sgd<T>, state: &TrainState) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let params = model.named_params();
    let manifest = Manifest {
        model: model.config.clone(),
        state: *state,
        params: params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        velocity: optimizer.velocity().iter().map(|(n, v)| (n.clone(), v.len())).collect(),
    };
    let json = serde_json::to_string(&manifest).map_err(|e| Error::format(path, e.to_string()))?;
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{MAGIC}").map_err(io)?;
    writeln!(w, "{json}").map_err(io)?;
    let values = params
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .chain(optimizer.velocity().values().flatten());
    for &x in values {
        w.write_f64::<LittleEndian>(x.to_f64_lossy()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim_end() != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("manifest: {e}")))?;

    let truncated = |_| Error::format(path, "truncated data");
    let mut read = |n: usize| -> Result<Vec<T>> {
        (0..n)
            .map(|_| r.read_f64::<LittleEndian>().map(T::lit).map_err(truncated))
            .collect()
    };
    let mut model = Model::<T>::new(manifest.model.clone(), 0)?;
    {
        let mut slots = model.named_params_mut();
        if slots.len() != manifest.params.len() {
            return Err(Error::format(
                path,
                format!("{} parameter arrays for a model with {}", manifest.params.len(), slots.len()),
            ));
        }
        for ((name, shape), (expected, slot)) in manifest.params.iter().zip(slots.iter_mut()) {
            if name != expected || shape.as_slice() != slot.shape() {
                return Err(Error::format(path, format!("array {name} {shape:?} does not fit {expected} {:?}", slot.shape())));
            }
            let data = read(shape.iter().product())?;
            **slot = Tensor::new(shape.clone(), data)?.with_grad();
        }
    }
    let mut optimizer = Sgd::new(T::zero(), T::zero());
    for (name, len) in &manifest.velocity {
        optimizer.set_velocity(name.clone(), read(*len)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        state: manifest.state,
    })
}
