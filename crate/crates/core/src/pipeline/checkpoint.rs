//! Checkpoint directories: a text manifest plus little-endian f64 tensor data.
//!
//! ```text
//! ELMCKPT 1
//! kind = supernet
//! dims.hidden = 64
//! ...
//! tensor emb.pos 128x64 0
//! ```
//! Tensor offsets count f64 values into `tensors.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::archspace::{ArchGenome, BlockChoice, ModelDims, SearchSpace, NUM_CANDIDATES};
use crate::error::{ElmError, Result};
use crate::numkernel::{DType, Tensor};
use crate::supernet::{Model, Network, ParamStore, Supernet};

pub const CKPT_HEADER: &str = "ELMCKPT 1";
const MANIFEST: &str = "manifest.txt";
const TENSORS: &str = "tensors.bin";
const GENOME: &str = "genome.txt";

/// Raw checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
    pub genome: Option<ArchGenome>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            params: ParamStore::new(),
            genome: None,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ElmError::Parse(format!("checkpoint lacks `{key}`")))
    }

    pub fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| ElmError::Parse(format!("checkpoint `{key}` has bad value `{v}`")))
    }

    /// Writes to `<dir>.partial` then renames, so an interrupted save never
    /// leaves a directory that looks complete.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = PathBuf::from(format!("{}.partial", dir.display()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| ElmError::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| ElmError::io(&tmp, e))?;
        let mut manifest = format!("{CKPT_HEADER}\n");
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(ElmError::Contract(format!("checkpoint metadata `{k}` is not a single token line")));
            }
            manifest.push_str(&format!("{k} = {v}\n"));
        }
        let mut bytes = Vec::with_capacity(self.params.numel() as usize * 8);
        let mut offset = 0usize;
        for (name, t) in self.params.iter() {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {name} {} {offset}\n", shape.join("x")));
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.numel();
        }
        let write = |name: &str, data: &[u8]| {
            let p = tmp.join(name);
            fs::write(&p, data).map_err(|e| ElmError::io(&p, e))
        };
        write(MANIFEST, manifest.as_bytes())?;
        write(TENSORS, &bytes)?;
        if let Some(g) = &self.genome {
            write(GENOME, g.to_text().as_bytes())?;
        }
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| ElmError::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| ElmError::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| ElmError::io(&mpath, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(CKPT_HEADER) {
            return Err(ElmError::Parse(format!("{}: not an `{CKPT_HEADER}` checkpoint", dir.display())));
        }
        let bpath = dir.join(TENSORS);
        let bytes = fs::read(&bpath).map_err(|e| ElmError::io(&bpath, e))?;
        if bytes.len() % 8 != 0 {
            return Err(ElmError::Parse(format!("{}: truncated tensor data", bpath.display())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut ck = Checkpoint::new();
        let dtype = DType::F64;
        let mut tensors = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let bad = || ElmError::Parse(format!("bad tensor line `{line}`"));
                if parts.len() != 3 {
                    return Err(bad());
                }
                let shape = parts[1]
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                let offset: usize = parts[2].parse().map_err(|_| bad())?;
                tensors.push((parts[0].to_string(), shape, offset));
            } else {
                let (k, v) = line
                    .split_once(" = ")
                    .ok_or_else(|| ElmError::Parse(format!("bad manifest line `{line}`")))?;
                ck.set(k, v);
            }
        }
        let stored = match ck.meta.get("dtype").map(String::as_str) {
            Some("f32") => DType::F32,
            _ => dtype,
        };
        for (name, shape, offset) in tensors {
            let n: usize = shape.iter().product();
            let data = values
                .get(offset..offset + n)
                .ok_or_else(|| ElmError::Parse(format!("tensor `{name}` runs past the data file")))?
                .to_vec();
            ck.params.insert(name, Tensor::with_dtype(shape, data, stored)?);
        }
        let gpath = dir.join(GENOME);
        if gpath.exists() {
            ck.genome = Some(ArchGenome::load(&gpath)?);
        }
        Ok(ck)
    }

    /// Errors unless the checkpoint was written under the same config hash.
    pub fn check_hash(&self, expected: &str, force: bool) -> Result<()> {
        let found = self.get("config_hash")?;
        if found != expected && !force {
            return Err(ElmError::Config(format!(
                "checkpoint was written under config {found}, current config is {expected} (use --force to override)"
            )));
        }
        Ok(())
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

fn put_dims(ck: &mut Checkpoint, prefix: &str, d: &ModelDims) {
    ck.set(&format!("{prefix}.vocab"), d.vocab);
    ck.set(&format!("{prefix}.hidden"), d.hidden);
    ck.set(&format!("{prefix}.layers"), d.layers);
    ck.set(&format!("{prefix}.heads"), d.heads);
    ck.set(&format!("{prefix}.inner"), d.inner);
    ck.set(&format!("{prefix}.ffn_init"), d.ffn_init);
    ck.set(&format!("{prefix}.ffn_step"), d.ffn_step);
    ck.set(&format!("{prefix}.ffn_max"), d.ffn_max);
    ck.set(&format!("{prefix}.max_len"), d.max_len);
    ck.set(&format!("{prefix}.tie_head"), d.tie_head);
}

fn get_dims(ck: &Checkpoint, prefix: &str) -> Result<ModelDims> {
    let n = |k: &str| ck.num::<usize>(&format!("{prefix}.{k}"));
    Ok(ModelDims {
        vocab: n("vocab")?,
        hidden: n("hidden")?,
        layers: n("layers")?,
        heads: n("heads")?,
        inner: n("inner")?,
        ffn_init: n("ffn_init")?,
        ffn_step: n("ffn_step")?,
        ffn_max: n("ffn_max")?,
        max_len: n("max_len")?,
        tie_head: ck.num(&format!("{prefix}.tie_head"))?,
    })
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| ElmError::Parse(format!("bad list `{s}`"))))
        .collect()
}

pub fn supernet_checkpoint(net: &Supernet, config_hash: &str, stage: &str) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set("kind", "supernet");
    ck.set("stage", stage);
    ck.set("config_hash", config_hash);
    ck.set("dtype", net.dtype().name());
    put_dims(&mut ck, "dims", net.dims());
    let space = net.space();
    ck.set("space.heads", space.heads);
    ck.set("space.choices", list(&space.choices.iter().map(|c| c.index()).collect::<Vec<_>>()));
    for (l, row) in space.ffn.iter().enumerate() {
        ck.set(&format!("space.ffn.{l}"), list(row));
    }
    ck.params = net.params().clone();
    ck
}

pub fn supernet_from_checkpoint(ck: &Checkpoint) -> Result<Supernet> {
    if ck.get("kind")? != "supernet" {
        return Err(ElmError::Parse(format!("checkpoint holds a {}, not a supernet", ck.get("kind")?)));
    }
    let dims = get_dims(ck, "dims")?;
    let choices = parse_list(ck.get("space.choices")?)?
        .into_iter()
        .map(|i| BlockChoice::from_index(i).ok_or_else(|| ElmError::Parse(format!("bad candidate {i}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut ffn = Vec::with_capacity(dims.layers);
    for l in 0..dims.layers {
        let row = parse_list(ck.get(&format!("space.ffn.{l}"))?)?;
        let row: [usize; NUM_CANDIDATES] = row
            .try_into()
            .map_err(|_| ElmError::Parse(format!("space.ffn.{l} needs {NUM_CANDIDATES} entries")))?;
        ffn.push(row);
    }
    let space = SearchSpace {
        ffn,
        heads: ck.num("space.heads")?,
        choices,
    };
    let dtype = if ck.get("dtype")? == "f32" { DType::F32 } else { DType::F64 };
    Supernet::from_parts(dims, space, ck.params.clone(), dtype)
}

pub fn model_checkpoint(model: &Model, config_hash: &str, stage: &str) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set("kind", "model");
    ck.set("stage", stage);
    ck.set("config_hash", config_hash);
    ck.set("dtype", model.dtype().name());
    put_dims(&mut ck, "dims", model.dims());
    ck.params = model.params().clone();
    ck.genome = Some(model.genome().clone());
    ck
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    if ck.get("kind")? != "model" {
        return Err(ElmError::Parse(format!("checkpoint holds a {}, not a model", ck.get("kind")?)));
    }
    let dims = get_dims(ck, "dims")?;
    let genome = ck
        .genome
        .clone()
        .ok_or_else(|| ElmError::Parse("model checkpoint lacks its genome".into()))?;
    let dtype = if ck.get("dtype")? == "f32" { DType::F32 } else { DType::F64 };
    Model::from_parts(dims, genome, ck.params.clone(), dtype)
}
