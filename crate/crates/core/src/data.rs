//! Dataset ingestion and checkpoint persistence.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{UViTConfig, UViTModel};
use crate::conditioning::ConditionInput;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::OptimizerState;

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, H, W, C]` with values in `[-1, 1]`.
    pub images: Tensor,
    pub conditions: Vec<ConditionInput>,
    pub name: String,
    pub split: String,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        conditions: Vec<ConditionInput>,
        name: impl Into<String>,
        split: impl Into<String>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != conditions.len() {
            return Err(Error::Shape(format!(
                "images {:?} with {} conditions",
                images.shape(),
                conditions.len()
            )));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Parameter("image values must lie in [-1, 1]".into()));
        }
        Ok(Self {
            images,
            conditions,
            name: name.into(),
            split: split.into(),
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    /// `(H, W, C)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.conditions
            .iter()
            .map(|c| match c {
                ConditionInput::Class(k) => Some(*k),
                _ => None,
            })
            .collect()
    }

    /// Same images, every condition replaced with `Unconditional`.
    pub fn unconditional(mut self) -> Self {
        self.conditions = vec![ConditionInput::Unconditional; self.conditions.len()];
        self
    }
}

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Maps a pixel byte to `[-1, 1]`.
pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Parses concatenated CIFAR-10 binary records (label byte then 1024 R,
/// 1024 G, 1024 B bytes, each plane row-major 32x32) into HWC pixels.
pub fn parse_cifar10_records(bytes: &[u8], file: &Path) -> Result<(Vec<u8>, Vec<f64>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::Ingestion {
            file: file.to_path_buf(),
            msg: format!(
                "truncated record at offset {offset} ({} trailing bytes)",
                bytes.len() - offset
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * plane * 3);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Ingestion {
                file: file.to_path_buf(),
                msg: format!("label {label} at offset {}", r * CIFAR_RECORD),
            });
        }
        labels.push(label);
        for p in 0..plane {
            for c in 0..3 {
                pixels.push(byte_to_unit(rec[1 + c * plane + p]));
            }
        }
    }
    Ok((labels, pixels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads CIFAR-10 from the standard binary batch files in `dir`.
pub fn load_cifar10(dir: &Path, split: Split, class_conditional: bool) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in &files {
        let bytes = fs::read(f).map_err(|e| Error::Ingestion {
            file: f.clone(),
            msg: format!("cannot read at offset 0: {e}"),
        })?;
        let (l, p) = parse_cifar10_records(&bytes, f)?;
        labels.extend(l);
        pixels.extend(p);
    }
    let n = labels.len();
    let images = Tensor::from_vec(&[n, CIFAR_SIDE, CIFAR_SIDE, 3], pixels)?;
    let conditions = labels
        .iter()
        .map(|&l| {
            if class_conditional {
                ConditionInput::Class(l as usize)
            } else {
                ConditionInput::Unconditional
            }
        })
        .collect();
    let split_name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    Dataset::new(images, conditions, "cifar10", split_name, 10)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ToySpec {
    /// i.i.d. `N(mu, sigma²)` pixels, unconditional. Values are not clipped,
    /// so this set bypasses the `[-1, 1]` range check.
    Gaussian {
        mu: f64,
        sigma: f64,
        size: usize,
        channels: usize,
    },
    /// Single-channel procedural shapes with class labels.
    Shapes { kinds: usize, size: usize },
}

pub const SHAPE_KINDS: [&str; 4] = ["square", "cross", "frame", "bar"];

fn draw_shape(kind: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![-1.0; size * size];
    let s = size / 8;
    let mut set = |y: usize, x: usize| {
        for dy in 0..s {
            for dx in 0..s {
                img[(y * s + dy) * size + x * s + dx] = 1.0;
            }
        }
    };
    match kind {
        // filled 4x4 square
        0 => {
            let (oy, ox) = (rng.random_range(0..=4), rng.random_range(0..=4));
            for y in 0..4 {
                for x in 0..4 {
                    set(oy + y, ox + x);
                }
            }
        }
        // plus sign with arms of length 2
        1 => {
            let (cy, cx) = (rng.random_range(2..=5), rng.random_range(2..=5));
            for d in 0..5 {
                set(cy + d - 2, cx);
                set(cy, cx + d - 2);
            }
        }
        // hollow 5x5 frame
        2 => {
            let (oy, ox) = (rng.random_range(0..=3), rng.random_range(0..=3));
            for i in 0..5 {
                set(oy, ox + i);
                set(oy + 4, ox + i);
                set(oy + i, ox);
                set(oy + i, ox + 4);
            }
        }
        // horizontal 2x6 bar
        _ => {
            let (oy, ox) = (rng.random_range(0..=6), rng.random_range(0..=2));
            for y in 0..2 {
                for x in 0..6 {
                    set(oy + y, ox + x);
                }
            }
        }
    }
    img
}

/// Desk-scale datasets generated deterministically from `seed`.
pub fn make_toy_dataset(spec: &ToySpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Parameter("toy dataset needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *spec {
        ToySpec::Gaussian {
            mu,
            sigma,
            size,
            channels,
        } => {
            if !(sigma > 0.0) || size == 0 || channels == 0 || !mu.is_finite() {
                return Err(Error::Parameter(format!("invalid gaussian spec {spec:?}")));
            }
            let len = n * size * size * channels;
            let data = (0..len)
                .map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Ok(Dataset {
                images: Tensor::from_vec(&[n, size, size, channels], data)?,
                conditions: vec![ConditionInput::Unconditional; n],
                name: format!("gaussian({mu},{sigma})"),
                split: "train".into(),
                num_classes: 0,
            })
        }
        ToySpec::Shapes { kinds, size } => {
            if !(2..=SHAPE_KINDS.len()).contains(&kinds) || !(size == 8 || size == 16) {
                return Err(Error::Parameter(format!(
                    "shapes need 2..={} kinds and size 8 or 16, got {kinds} and {size}",
                    SHAPE_KINDS.len()
                )));
            }
            let mut data = Vec::with_capacity(n * size * size);
            let mut conditions = Vec::with_capacity(n);
            for i in 0..n {
                // Round-robin labels keep classes balanced.
                let kind = i % kinds;
                data.extend(draw_shape(kind, size, &mut rng));
                conditions.push(ConditionInput::Class(kind));
            }
            Dataset::new(
                Tensor::from_vec(&[n, size, size, 1], data)?,
                conditions,
                format!("shapes{kinds}x{size}"),
                "train",
                kinds,
            )
        }
    }
}

/// Seeded word-vector table standing in for a text encoder.
#[derive(Clone, Debug)]
pub struct ToyVocab {
    words: HashMap<String, Vec<f64>>,
    unk: Vec<f64>,
    context_dim: usize,
    seed: u64,
}

impl ToyVocab {
    pub fn new<S: AsRef<str>>(words: &[S], context_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (context_dim as f64).sqrt();
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..context_dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let unk = draw(&mut rng);
        let mut table = HashMap::new();
        for w in words {
            let key = w.as_ref().to_lowercase();
            let v = draw(&mut rng);
            table.entry(key).or_insert(v);
        }
        Self {
            words: table,
            unk,
            context_dim,
            seed,
        }
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Lowercased whitespace tokens mapped to vectors, truncated to `max_len`
    /// and zero-padded.
    pub fn encode(&self, prompt: &str, max_len: usize) -> ConditionInput {
        let mut emb = vec![0.0; max_len * self.context_dim];
        let mut valid = 0;
        for word in prompt.split_whitespace().take(max_len) {
            let v = self.words.get(&word.to_lowercase()).unwrap_or(&self.unk);
            emb[valid * self.context_dim..(valid + 1) * self.context_dim].copy_from_slice(v);
            valid += 1;
        }
        ConditionInput::Context {
            embeddings: Tensor::from_vec(&[max_len, self.context_dim], emb)
                .expect("sized above"),
            valid_len: valid,
        }
    }
}

pub fn toy_text_encode(prompt: &str, vocab: &ToyVocab, max_len: usize) -> ConditionInput {
    vocab.encode(prompt, max_len)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UVTC";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

const OPT_M: &str = "optim.m.";
const OPT_V: &str = "optim.v.";

/// Exact generator position, enough to resume the stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: UViTConfig,
    /// Extra `key=value` metadata (for example the toy vocabulary seed).
    pub metadata: Vec<(String, String)>,
    pub iteration: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
}

fn persist<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Persistence(msg.into()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}

impl Checkpoint {
    pub fn from_model(
        model: &UViTModel,
        iteration: u64,
        optimizer: Option<&OptimizerState>,
        rng: Option<&ChaCha8Rng>,
    ) -> Self {
        Self {
            config: model.config().clone(),
            metadata: Vec::new(),
            iteration,
            tensors: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
            rng: rng.map(RngState::capture),
        }
    }

    pub fn to_model(&self) -> Result<UViTModel> {
        let mut named = HashMap::new();
        for (k, v) in &self.tensors {
            named.insert(k.clone(), v.clone());
        }
        UViTModel::from_named_tensors(self.config.clone(), named)
    }

    pub fn metadata_value(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut lines: Vec<(String, String)> = self.config.to_pairs();
        for (k, v) in &self.metadata {
            lines.push((format!("meta.{k}"), v.clone()));
        }
        if let Some(opt) = &self.optimizer {
            lines.push(("optim.step".into(), opt.step.to_string()));
        }
        if let Some(r) = &self.rng {
            lines.push(("rng.seed".into(), hex(&r.seed)));
            lines.push(("rng.stream".into(), r.stream.to_string()));
            lines.push(("rng.word_pos".into(), r.word_pos.to_string()));
        }
        let mut tensors: Vec<(String, &Tensor)> =
            self.tensors.iter().map(|(k, t)| (k.clone(), t)).collect();
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.tensors.len() || opt.v.len() != self.tensors.len() {
                return persist("optimizer state does not match the tensor list");
            }
            for (i, (name, _)) in self.tensors.iter().enumerate() {
                tensors.push((format!("{OPT_M}{name}"), &opt.m[i]));
                tensors.push((format!("{OPT_V}{name}"), &opt.v[i]));
            }
        }
        encode_tensor_file(&lines, self.iteration, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file = TensorFile::from_bytes(bytes)?;
        let mut model_pairs = Vec::new();
        let mut metadata = Vec::new();
        let mut opt_step = None;
        let (mut rseed, mut rstream, mut rpos) = (None, None, None);
        for (k, v) in &file.lines {
            match k.as_str() {
                "optim.step" => opt_step = v.parse::<u64>().ok(),
                "rng.seed" => rseed = unhex(v).and_then(|b| <[u8; 32]>::try_from(b).ok()),
                "rng.stream" => rstream = v.parse::<u64>().ok(),
                "rng.word_pos" => rpos = v.parse::<u128>().ok(),
                _ => match k.strip_prefix("meta.") {
                    Some(m) => metadata.push((m.to_string(), v.clone())),
                    None => model_pairs.push((k.as_str(), v.as_str())),
                },
            }
        }
        let config = UViTConfig::from_pairs(model_pairs)
            .map_err(|e| Error::Persistence(format!("config: {e}")))?;
        let rng = match (rseed, rstream, rpos) {
            (Some(seed), Some(stream), Some(word_pos)) => Some(RngState {
                seed,
                stream,
                word_pos,
            }),
            (None, None, None) => None,
            _ => return persist("incomplete rng state"),
        };

        let mut tensors = Vec::new();
        let mut m = HashMap::new();
        let mut v = HashMap::new();
        for (name, t) in file.tensors {
            if let Some(base) = name.strip_prefix(OPT_M) {
                m.insert(base.to_string(), t);
            } else if let Some(base) = name.strip_prefix(OPT_V) {
                v.insert(base.to_string(), t);
            } else {
                tensors.push((name, t));
            }
        }
        let optimizer = match opt_step {
            Some(step) => {
                let mut ms = Vec::new();
                let mut vs = Vec::new();
                for (name, _) in &tensors {
                    match (m.remove(name), v.remove(name)) {
                        (Some(a), Some(b)) => {
                            ms.push(a);
                            vs.push(b);
                        }
                        _ => return persist(format!("optimizer moments missing for '{name}'")),
                    }
                }
                Some(OptimizerState { m: ms, v: vs, step })
            }
            None => None,
        };
        if !m.is_empty() || !v.is_empty() {
            return persist("optimizer moments without optimizer state");
        }
        Ok(Self {
            config,
            metadata,
            iteration: file.iteration,
            tensors,
            optimizer,
            rng,
        })
    }
}

/// The raw container behind checkpoints: header lines, a counter and named
/// tensors, with no interpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub lines: Vec<(String, String)>,
    pub iteration: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let refs: Vec<(String, &Tensor)> =
            self.tensors.iter().map(|(k, t)| (k.clone(), t)).collect();
        encode_tensor_file(&self.lines, self.iteration, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return persist("bad magic");
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return persist(format!(
                "version mismatch: file has {version}, reader supports {CHECKPOINT_VERSION}"
            ));
        }
        let text_len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(text_len, "config")?)
            .map_err(|_| Error::Persistence("config is not valid UTF-8".into()))?;
        let mut lines = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let Some((k, v)) = line.split_once('=') else {
                return persist(format!("config line {} is not key=value", ln + 1));
            };
            lines.push((k.to_string(), v.to_string()));
        }
        let iteration = r.u64("iteration")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for i in 0..count {
            let name_len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Persistence(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return persist(format!("duplicate tensor name '{name}'"));
            }
            let dtype = r.u8("dtype")?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Persistence(format!("dims of '{name}' overflow")))?;
            let width = match dtype {
                DTYPE_F64 => 8,
                DTYPE_F32 => 4,
                other => return persist(format!("unknown dtype code {other} for '{name}'")),
            };
            let bytes_len = n
                .checked_mul(width)
                .ok_or_else(|| Error::Persistence(format!("size of '{name}' overflows")))?;
            let raw = r.take(bytes_len, &format!("data of '{name}'"))?;
            let data: Vec<f64> = if width == 8 {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            };
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return persist(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            lines,
            iteration,
            tensors,
        })
    }

    pub fn line(&self, key: &str) -> Option<&str> {
        self.lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn encode_tensor_file(
    lines: &[(String, String)],
    iteration: u64,
    tensors: &[(String, &Tensor)],
) -> Result<Vec<u8>> {
    let mut text = String::new();
    for (k, v) in lines {
        if k.is_empty() || k.contains('=') || k.contains('\n') || v.contains('\n') {
            return persist(format!("'{k}' cannot be encoded as a key=value line"));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    let mut seen = HashSet::new();
    for (name, _) in tensors {
        if !seen.insert(name.as_str()) {
            return persist(format!("duplicate tensor name '{name}'"));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        if name.len() > u16::MAX as usize {
            return persist(format!("tensor name too long: {name}"));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return persist(format!(
                "truncated while reading {what} at offset {}",
                self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_bytes(&ckpt.to_bytes()?, path)
}

pub(crate) fn write_bytes(bytes: &[u8], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)
        .map_err(|e| Error::Persistence(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(bytes)
        .map_err(|e| Error::Persistence(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_bytes(path)?)
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Persistence(format!("cannot read {}: {e}", path.display())))
}
