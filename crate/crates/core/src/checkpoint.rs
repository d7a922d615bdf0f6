//! Binary checkpoint container.
//!
//! ```text
//! magic "SPKDIFF\0" | version u32
//! header: u32 length, UTF-8 "key=value" lines
//! u32 entry count, then per entry:
//!   u16 name length, name, u8 dtype (0 = f32, 1 = f64), u8 rank,
//!   rank x u64 dims, payload (little-endian), 8-byte checksum
//! ```
//!
//! The checksum is the first 8 bytes of SHA-256 over name, dtype, dims and
//! payload. Entry prefixes: `param/`, `stat/<layer>/{mean,var}`,
//! `adam/{m,v}/`, `fused/<i>` and `fused/readout`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffusion::{make_cosine_schedule_with, LambdaSign, NoiseSchedule};
use crate::error::{Error, Result};
use crate::sampling::FusedStepConv;
use crate::snn::{NeuronConfig, RunningStats};
use crate::tensor::Tensor;
use crate::train::AdamState;
use crate::unet::{ModelParams, UNet, UNetConfig};

const MAGIC: &[u8; 8] = b"SPKDIFF\0";
pub const FORMAT_VERSION: u32 = 1;

/// Precomputed fused kernels for one inference plan.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedKernels {
    pub steps: Vec<FusedStepConv>,
    pub readout: FusedStepConv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: UNetConfig,
    /// Diffusion step count `T`.
    pub t_max: usize,
    pub lambda_sign: LambdaSign,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
    /// Optimizer steps taken.
    pub step: u64,
    pub fused: Option<FusedKernels>,
}

impl Checkpoint {
    pub fn new(unet: &UNet, sched: &NoiseSchedule) -> Self {
        Checkpoint {
            model: unet.config.clone(),
            t_max: sched.t_max(),
            lambda_sign: sched.lambda_sign(),
            params: unet.params.clone(),
            adam: None,
            step: 0,
            fused: None,
        }
    }

    pub fn unet(&self) -> Result<UNet> {
        UNet::new(self.model.clone(), self.params.clone())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_cosine_schedule_with(self.t_max, self.model.neuron.num_steps, self.lambda_sign)
    }

    fn header(&self) -> String {
        let m = &self.model;
        let n = &m.neuron;
        let mults: Vec<String> = m.channel_multipliers.iter().map(|v| v.to_string()).collect();
        let mut h = String::new();
        let mut kv = |k: &str, v: String| h.push_str(&format!("{k}={v}\n"));
        kv("model.channels", m.channels.to_string());
        kv("model.image_size", m.image_size.to_string());
        kv("model.base_channels", m.base_channels.to_string());
        kv("model.channel_multipliers", mults.join(","));
        kv("model.res_blocks", m.num_res_blocks.to_string());
        kv("model.time_dim", m.time_embed_dim.to_string());
        kv("snn.v_threshold", format!("{:?}", n.v_threshold));
        kv("snn.tau_decay", format!("{:?}", n.tau_decay));
        kv("snn.surrogate_width", format!("{:?}", n.surrogate_width));
        kv("snn.steps", n.num_steps.to_string());
        kv("diffusion.T", self.t_max.to_string());
        kv(
            "loss.lambda_sign",
            match self.lambda_sign {
                LambdaSign::Magnitude => "magnitude".into(),
                LambdaSign::Literal => "literal".into(),
            },
        );
        kv("train.step", self.step.to_string());
        kv("adam.present", self.adam.is_some().to_string());
        if let Some(a) = &self.adam {
            kv("adam.step", a.step.to_string());
        }
        if let Some(f) = &self.fused {
            kv("fused.steps", f.steps.len().to_string());
            let ts: Vec<String> = f.steps.iter().map(|s| s.t.to_string()).collect();
            kv("fused.t", ts.join(","));
        }
        h
    }
}

enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

struct Entry {
    name: String,
    dims: Vec<usize>,
    payload: Payload,
}

impl Entry {
    fn f32(name: String, t: &Tensor<f32>) -> Self {
        Entry {
            name,
            dims: t.shape().to_vec(),
            payload: Payload::F32(t.data().to_vec()),
        }
    }

    fn f64(name: String, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Entry {
            name,
            dims,
            payload: Payload::F64(data),
        }
    }

    fn dtype(&self) -> u8 {
        match self.payload {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
        }
    }

    fn payload_bytes(&self) -> Vec<u8> {
        match &self.payload {
            Payload::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

fn checksum(name: &str, dtype: u8, dims: &[usize], payload: &[u8]) -> [u8; 8] {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update([dtype]);
    for d in dims {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(payload);
    h.finalize()[..8].try_into().expect("digest is 32 bytes")
}

fn entries(ck: &Checkpoint) -> Vec<Entry> {
    let mut out = Vec::new();
    for (k, t) in &ck.params.tensors {
        out.push(Entry::f32(format!("param/{k}"), t));
    }
    for (k, s) in &ck.params.stats {
        out.push(Entry::f64(format!("stat/{k}/mean"), vec![s.mean.len()], s.mean.clone()));
        out.push(Entry::f64(format!("stat/{k}/var"), vec![s.var.len()], s.var.clone()));
    }
    if let Some(a) = &ck.adam {
        for (k, t) in &a.m {
            out.push(Entry::f32(format!("adam/m/{k}"), t));
        }
        for (k, t) in &a.v {
            out.push(Entry::f32(format!("adam/v/{k}"), t));
        }
    }
    if let Some(f) = &ck.fused {
        let conv = |out: &mut Vec<Entry>, prefix: String, c: &FusedStepConv| {
            out.push(Entry::f64(format!("{prefix}/weight"), c.weight.shape().to_vec(), c.weight.data().to_vec()));
            out.push(Entry::f64(format!("{prefix}/bias"), vec![c.bias.len()], c.bias.clone()));
        };
        for (i, s) in f.steps.iter().enumerate() {
            conv(&mut out, format!("fused/{i}"), s);
        }
        conv(&mut out, "fused/readout".into(), &f.readout);
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = ck.header();
    b.extend_from_slice(&(header.len() as u32).to_le_bytes());
    b.extend_from_slice(header.as_bytes());
    let list = entries(ck);
    b.extend_from_slice(&(list.len() as u32).to_le_bytes());
    for e in &list {
        b.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        b.extend_from_slice(e.name.as_bytes());
        b.push(e.dtype());
        b.push(e.dims.len() as u8);
        for d in &e.dims {
            b.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let payload = e.payload_bytes();
        b.extend_from_slice(&payload);
        b.extend_from_slice(&checksum(&e.name, e.dtype(), &e.dims, &payload));
    }
    b
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let bytes = encode_checkpoint(ck);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.fail(
                self.pos,
                format!("needs {n} more bytes, {} remain", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse_header(text: &str, r: &Reader, at: usize) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| r.fail(at, format!("header line without '=': {line}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn field<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str, r: &Reader, at: usize) -> Result<T> {
    let v = h.get(key).ok_or_else(|| r.fail(at, format!("header lacks '{key}'")))?;
    v.parse().map_err(|_| r.fail(at, format!("header field {key}={v} is malformed")))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.fail(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.fail(8, format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = r.u32()? as usize;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| r.fail(at, "header is not UTF-8"))?;
    let h = parse_header(text, &r, at)?;
    let mults: Vec<usize> = h
        .get("model.channel_multipliers")
        .ok_or_else(|| r.fail(at, "header lacks 'model.channel_multipliers'"))?
        .split(',')
        .map(|s| s.parse().map_err(|_| r.fail(at, "malformed channel multipliers")))
        .collect::<Result<_>>()?;
    let model = UNetConfig {
        channels: field(&h, "model.channels", &r, at)?,
        image_size: field(&h, "model.image_size", &r, at)?,
        base_channels: field(&h, "model.base_channels", &r, at)?,
        channel_multipliers: mults,
        num_res_blocks: field(&h, "model.res_blocks", &r, at)?,
        time_embed_dim: field(&h, "model.time_dim", &r, at)?,
        neuron: NeuronConfig {
            v_threshold: field(&h, "snn.v_threshold", &r, at)?,
            tau_decay: field(&h, "snn.tau_decay", &r, at)?,
            surrogate_width: field(&h, "snn.surrogate_width", &r, at)?,
            num_steps: field(&h, "snn.steps", &r, at)?,
        },
    };
    let lambda_sign = match h.get("loss.lambda_sign").map(String::as_str) {
        Some("magnitude") => LambdaSign::Magnitude,
        Some("literal") => LambdaSign::Literal,
        _ => return Err(r.fail(at, "header field loss.lambda_sign is missing or malformed")),
    };
    let adam_present: bool = field(&h, "adam.present", &r, at)?;
    let fused_steps: Option<usize> = h.contains_key("fused.steps").then(|| field(&h, "fused.steps", &r, at)).transpose()?;
    let fused_t: Vec<usize> = match h.get("fused.t") {
        Some(s) if !s.is_empty() => s
            .split(',')
            .map(|v| v.parse().map_err(|_| r.fail(at, "malformed fused.t")))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };

    let mut f32s: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut f64s: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let count = r.u32()?;
    for _ in 0..count {
        let start = r.pos;
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| r.fail(start, "entry name is not UTF-8"))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let width = match dtype {
            0 => 4,
            1 => 8,
            d => return Err(r.fail(start, format!("entry '{name}' has unknown dtype {d}"))),
        };
        let n: usize = dims.iter().product();
        let payload_at = r.pos;
        let payload = r.take(n.checked_mul(width).ok_or_else(|| r.fail(start, "entry size overflows"))?)?;
        let stored = r.take(8)?;
        if stored != checksum(&name, dtype, &dims, payload) {
            return Err(r.fail(payload_at, format!("checksum mismatch in entry '{name}'")));
        }
        if dtype == 0 {
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            f32s.insert(name, Tensor::new(dims, data)?);
        } else {
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            f64s.insert(name, (dims, data));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let strip = |map: &BTreeMap<String, Tensor<f32>>, prefix: &str| -> BTreeMap<String, Tensor<f32>> {
        map.iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    };
    let tensors = strip(&f32s, "param/");
    let mut stats: BTreeMap<String, RunningStats> = BTreeMap::new();
    for (k, (_, v)) in &f64s {
        let Some(rest) = k.strip_prefix("stat/") else { continue };
        let (layer, which) = rest
            .rsplit_once('/')
            .ok_or_else(|| r.fail(0, format!("malformed statistics entry '{k}'")))?;
        let s = stats.entry(layer.to_string()).or_insert(RunningStats {
            mean: Vec::new(),
            var: Vec::new(),
        });
        match which {
            "mean" => s.mean = v.clone(),
            "var" => s.var = v.clone(),
            _ => return Err(r.fail(0, format!("malformed statistics entry '{k}'"))),
        }
    }
    let params = ModelParams { tensors, stats };
    params.check_against(&model)?;
    let adam = adam_present
        .then(|| -> Result<AdamState> {
            Ok(AdamState {
                step: field(&h, "adam.step", &r, at)?,
                m: strip(&f32s, "adam/m/"),
                v: strip(&f32s, "adam/v/"),
            })
        })
        .transpose()?;
    let fused = match fused_steps {
        None => None,
        Some(k) => {
            if fused_t.len() != k {
                return Err(r.fail(at, "fused.t length differs from fused.steps"));
            }
            let conv = |prefix: String, index: usize, t: usize| -> Result<FusedStepConv> {
                let (ws, wd) = f64s
                    .get(&format!("{prefix}/weight"))
                    .ok_or_else(|| r.fail(0, format!("missing entry {prefix}/weight")))?;
                let (_, bd) = f64s
                    .get(&format!("{prefix}/bias"))
                    .ok_or_else(|| r.fail(0, format!("missing entry {prefix}/bias")))?;
                Ok(FusedStepConv {
                    index,
                    t,
                    weight: Tensor::new(ws.clone(), wd.clone())?,
                    bias: bd.clone(),
                })
            };
            let steps = (0..k).map(|i| conv(format!("fused/{i}"), i, fused_t[i])).collect::<Result<Vec<_>>>()?;
            let readout = conv("fused/readout".into(), k, 0)?;
            Some(FusedKernels { steps, readout })
        }
    };
    Ok(Checkpoint {
        model,
        t_max: field(&h, "diffusion.T", &r, at)?,
        lambda_sign,
        params,
        adam,
        step: field(&h, "train.step", &r, at)?,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_cosine_schedule;
    use crate::sampling::FusedSampler;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> UNetConfig {
        UNetConfig {
            image_size: 8,
            base_channels: 8,
            time_embed_dim: 16,
            ..UNetConfig::desk()
        }
    }

    fn randomized(seed: u64) -> Checkpoint {
        let mut unet = UNet::build(small(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in unet.params.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        for s in unet.params.stats.values_mut() {
            s.mean.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            s.var.iter_mut().for_each(|v| *v = rng.random_range(0.1..2.0));
        }
        let sched = make_cosine_schedule(100, 4).unwrap();
        Checkpoint::new(&unet, &sched)
    }

    fn bit_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
        let f32_eq = |x: &BTreeMap<String, Tensor<f32>>, y: &BTreeMap<String, Tensor<f32>>| {
            x.len() == y.len() && x.iter().zip(y).all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
        };
        let stats_eq = a.params.stats.iter().zip(&b.params.stats).all(|((ka, sa), (kb, sb))| {
            ka == kb
                && sa.mean.iter().zip(&sb.mean).all(|(x, y)| x.to_bits() == y.to_bits())
                && sa.var.iter().zip(&sb.var).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        let adam_eq = match (&a.adam, &b.adam) {
            (None, None) => true,
            (Some(x), Some(y)) => x.step == y.step && f32_eq(&x.m, &y.m) && f32_eq(&x.v, &y.v),
            _ => false,
        };
        a.model == b.model
            && a.t_max == b.t_max
            && a.step == b.step
            && f32_eq(&a.params.tensors, &b.params.tensors)
            && stats_eq
            && adam_eq
            && a.fused == b.fused
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut ck = randomized(3);
        ck.model.neuron.tau_decay = 0.1 + 0.2;
        ck.step = 17;
        save_checkpoint(&ck, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert!(bit_equal(&ck, &back));
        assert!(back.adam.is_none());
        assert_eq!(back.model.neuron.tau_decay.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn adam_state_and_fused_kernels_survive() {
        let mut ck = randomized(5);
        let names: Vec<String> = ck.params.tensors.keys().cloned().collect();
        let mut adam = AdamState { step: 9, ..Default::default() };
        for n in &names {
            let t = ck.params.tensors[n].map(|v| v * 0.5 - 1e-7);
            adam.m.insert(n.clone(), t.clone());
            adam.v.insert(n.clone(), t.map(|v| v * v));
        }
        ck.adam = Some(adam);
        let unet = ck.unet().unwrap();
        let sched = ck.schedule().unwrap();
        let fs = FusedSampler::new(&unet, &sched, 3).unwrap();
        ck.fused = Some(FusedKernels {
            steps: fs.steps.clone(),
            readout: fs.readout.clone(),
        });
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert!(bit_equal(&ck, &back));
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let ck = randomized(1);
        let bytes = encode_checkpoint(&ck);
        let mut bad = bytes.clone();
        let at = bytes.len() - 20;
        bad[at] ^= 0x01;
        let e = decode_checkpoint(&bad, Path::new("mem")).unwrap_err();
        assert!(e.to_string().contains("checksum mismatch"), "{e}");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = encode_checkpoint(&randomized(1));
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let e = decode_checkpoint(&bytes, Path::new("mem")).unwrap_err();
        assert!(e.to_string().contains("unsupported format version 2"), "{e}");
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes, Path::new("mem")).is_err());
    }
}
