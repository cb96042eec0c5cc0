//! Binary checkpoints.
//!
//! ```text
//! ALORA-CHECKPOINT
//! version 1
//! [config]
//! layers=2
//! ...
//! [tensors]
//! embed f64 32,64
//! adapter.0.gate_state u8 4
//! ...
//! [data]
//! <little-endian arrays in table order>
//! ```
//!
//! Adapters are written uncompacted, so pruned ranks keep their indices.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use alora_autodiff::{DType, Float, Tensor};

use crate::error::{AloraError, Result};
use crate::lora::{GateState, GatedLoraAdapter};
use crate::model::{Activation, BlockWeights, ModelConfig, ModuleId, SuperNetwork};
use crate::regularizers::{HardConcreteConfig, HardConcreteGate};

pub const MAGIC: &str = "ALORA-CHECKPOINT";
pub const VERSION: u32 = 1;

enum Payload<'a, S> {
    Float(&'a Tensor<S>),
    Bytes(Vec<u8>),
}

struct Entry<'a, S> {
    name: String,
    shape: Vec<usize>,
    payload: Payload<'a, S>,
}

fn entries<S: Float>(net: &SuperNetwork<S>) -> Vec<Entry<'_, S>> {
    let mut out = Vec::new();
    fn float<S: Float>(name: String, t: &Tensor<S>) -> Entry<'_, S> {
        Entry {
            name,
            shape: t.shape().to_vec(),
            payload: Payload::Float(t),
        }
    }
    out.push(float("embed".into(), &net.embed));
    out.push(float("pos".into(), &net.pos));
    for (l, b) in net.blocks.iter().enumerate() {
        for (n, t) in [
            ("w_q", &b.w_q),
            ("w_k", &b.w_k),
            ("w_v", &b.w_v),
            ("w_o", &b.w_o),
            ("w_up", &b.w_up),
            ("w_down", &b.w_down),
            ("b_up", &b.b_up),
            ("b_down", &b.b_down),
        ] {
            out.push(float(format!("block.{l}.{n}"), t));
        }
    }
    out.push(float("unembed".into(), &net.unembed));
    for ad in &net.adapters {
        let m = ad.module.0;
        out.push(float(format!("adapter.{m}.a"), &ad.a.value));
        out.push(float(format!("adapter.{m}.b"), &ad.b.value));
        out.push(float(format!("adapter.{m}.gate_logits"), &ad.gate_logits.value));
        out.push(Entry {
            name: format!("adapter.{m}.gate_state"),
            shape: vec![ad.gate_state.len()],
            payload: Payload::Bytes(ad.gate_state.iter().map(|s| s.to_byte()).collect()),
        });
    }
    if let Some(gates) = &net.l0_gates {
        for (m, g) in gates.iter().enumerate() {
            out.push(float(format!("l0.{m}.log_theta"), &g.log_theta.value));
        }
    }
    out
}

fn config_lines<S: Float>(net: &SuperNetwork<S>) -> Vec<String> {
    let c = &net.config;
    let mut lines = vec![
        format!("layers={}", c.layers),
        format!("d_model={}", c.d_model),
        format!("heads={}", c.heads),
        format!("d_ff={}", c.d_ff),
        format!("vocab={}", c.vocab),
        format!("max_seq_len={}", c.max_seq_len),
        format!("activation={}", c.activation.name()),
        format!("adapter_scaling={}", net.adapters.first().map_or(1.0, |a| a.scaling)),
    ];
    if let Some(g) = net.l0_gates.as_ref().and_then(|g| g.first()) {
        lines.push(format!("hc_tau={}", g.config.tau));
        lines.push(format!("hc_gamma_lower={}", g.config.gamma_lower));
        lines.push(format!("hc_zeta_upper={}", g.config.zeta_upper));
    }
    lines
}

pub fn save<S: Float>(net: &SuperNetwork<S>, path: &Path) -> Result<()> {
    let io = |e| AloraError::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    let entries = entries(net);
    let mut header = format!("{MAGIC}\nversion {VERSION}\n[config]\n");
    for line in config_lines(net) {
        header.push_str(&line);
        header.push('\n');
    }
    header.push_str("[tensors]\n");
    for e in &entries {
        let dtype = match e.payload {
            Payload::Float(_) => S::DTYPE.name(),
            Payload::Bytes(_) => "u8",
        };
        let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
        header.push_str(&format!("{} {} {}\n", e.name, dtype, shape.join(",")));
    }
    header.push_str("[data]\n");
    w.write_all(header.as_bytes()).map_err(io)?;
    let mut buf = Vec::new();
    for e in &entries {
        buf.clear();
        match &e.payload {
            Payload::Float(t) => t.data().iter().for_each(|x| x.write_le(&mut buf)),
            Payload::Bytes(b) => buf.extend_from_slice(b),
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct TableRow {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

fn parse_header<R: BufRead>(r: &mut R, path: &Path) -> Result<(Vec<(String, String)>, Vec<TableRow>)> {
    let bad = |reason: String| AloraError::format(path, reason);
    let mut line = String::new();
    let mut next = |r: &mut R| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| AloraError::io(path, e))?;
        if n == 0 {
            return Err(AloraError::format(path, "truncated header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next(r)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = next(r)?;
    if version != format!("version {VERSION}") {
        return Err(bad(format!("unsupported {version}")));
    }
    if next(r)? != "[config]" {
        return Err(bad("missing [config] section".into()));
    }
    let mut config = Vec::new();
    loop {
        let l = next(r)?;
        if l == "[tensors]" {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed config line `{l}`")))?;
        config.push((k.to_string(), v.to_string()));
    }
    let mut table = Vec::new();
    loop {
        let l = next(r)?;
        if l == "[data]" {
            break;
        }
        let parts: Vec<&str> = l.split(' ').collect();
        if parts.len() != 3 {
            return Err(bad(format!("malformed tensor line `{l}`")));
        }
        let shape = if parts[2].is_empty() {
            Vec::new()
        } else {
            parts[2]
                .split(',')
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("bad shape in `{l}`")))?
        };
        table.push(TableRow {
            name: parts[0].to_string(),
            dtype: parts[1].to_string(),
            shape,
        });
    }
    Ok((config, table))
}

fn parse_model_config(pairs: &[(String, String)], path: &Path) -> Result<ModelConfig> {
    let get = |k: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| AloraError::format(path, format!("config key `{k}` missing")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| AloraError::format(path, format!("config key `{k}` is not an integer")))
    };
    let activation = Activation::parse(get("activation")?)
        .ok_or_else(|| AloraError::format(path, "unknown activation"))?;
    let cfg = ModelConfig {
        layers: num("layers")?,
        d_model: num("d_model")?,
        heads: num("heads")?,
        d_ff: num("d_ff")?,
        vocab: num("vocab")?,
        max_seq_len: num("max_seq_len")?,
        activation,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint, converting stored floats to `S` if needed.
pub fn load<S: Float>(path: &Path) -> Result<SuperNetwork<S>> {
    let file = std::fs::File::open(path).map_err(|e| AloraError::io(path, e))?;
    let mut r = BufReader::new(file);
    let (pairs, table) = parse_header(&mut r, path)?;
    let config = parse_model_config(&pairs, path)?;
    let lookup = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    let scaling: f64 = lookup("adapter_scaling")
        .map(|v| v.parse().map_err(|_| AloraError::format(path, "bad adapter_scaling")))
        .transpose()?
        .unwrap_or(1.0);

    let mut floats: std::collections::HashMap<String, Tensor<S>> = Default::default();
    let mut bytes: std::collections::HashMap<String, Vec<u8>> = Default::default();
    for row in &table {
        let n: usize = row.shape.iter().product();
        if row.dtype == "u8" {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|_| AloraError::format(path, format!("truncated data for {}", row.name)))?;
            bytes.insert(row.name.clone(), buf);
            continue;
        }
        let dtype = DType::parse(&row.dtype)
            .ok_or_else(|| AloraError::format(path, format!("unknown dtype `{}`", row.dtype)))?;
        let mut buf = vec![0u8; n * dtype.size_of()];
        r.read_exact(&mut buf)
            .map_err(|_| AloraError::format(path, format!("truncated data for {}", row.name)))?;
        let data: Vec<S> = match dtype {
            DType::F32 => buf.chunks_exact(4).map(|c| S::lit(f32::read_le(c).as_f64())).collect(),
            DType::F64 => buf.chunks_exact(8).map(|c| S::lit(f64::read_le(c))).collect(),
        };
        floats.insert(row.name.clone(), Tensor::new(row.shape.clone(), data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| AloraError::io(path, e))?;
    if !rest.is_empty() {
        return Err(AloraError::format(path, format!("{} trailing bytes", rest.len())));
    }

    let has_l0 = floats.contains_key("l0.0.log_theta");
    let mut take = |name: String, shape: &[usize]| -> Result<Tensor<S>> {
        let t = floats
            .remove(&name)
            .ok_or_else(|| AloraError::format(path, format!("tensor `{name}` missing")))?;
        if !shape.is_empty() && t.shape() != shape {
            return Err(AloraError::format(
                path,
                format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    };
    let (d, v, f) = (config.d_model, config.vocab, config.d_ff);
    let embed = take("embed".into(), &[v, d])?;
    let pos = take("pos".into(), &[config.max_seq_len, d])?;
    let mut blocks = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let mut b = BlockWeights::zeros(&config);
        b.w_q = take(format!("block.{l}.w_q"), &[d, d])?;
        b.w_k = take(format!("block.{l}.w_k"), &[d, d])?;
        b.w_v = take(format!("block.{l}.w_v"), &[d, d])?;
        b.w_o = take(format!("block.{l}.w_o"), &[d, d])?;
        b.w_up = take(format!("block.{l}.w_up"), &[d, f])?;
        b.w_down = take(format!("block.{l}.w_down"), &[f, d])?;
        b.b_up = take(format!("block.{l}.b_up"), &[f])?;
        b.b_down = take(format!("block.{l}.b_down"), &[d])?;
        blocks.push(b);
    }
    let unembed = take("unembed".into(), &[d, v])?;
    let mut adapters = Vec::with_capacity(config.module_count());
    for m in 0..config.module_count() {
        let a = take(format!("adapter.{m}.a"), &[])?;
        let b = take(format!("adapter.{m}.b"), &[])?;
        let logits = take(format!("adapter.{m}.gate_logits"), &[])?;
        let mut ad = GatedLoraAdapter::from_factors(ModuleId(m), a, b)?;
        let (d_in, d_out) = config.module_shape(ModuleId(m).kind());
        if ad.d_in() != d_in || ad.d_out() != d_out || logits.numel() != ad.rank() {
            return Err(AloraError::format(path, format!("adapter {m} has inconsistent shapes")));
        }
        ad.gate_logits.value = logits;
        let states = bytes
            .remove(&format!("adapter.{m}.gate_state"))
            .ok_or_else(|| AloraError::format(path, format!("gate_state of adapter {m} missing")))?;
        if states.len() != ad.rank() {
            return Err(AloraError::format(path, format!("gate_state of adapter {m} has wrong length")));
        }
        ad.gate_state = states
            .iter()
            .map(|&b| GateState::from_byte(b))
            .collect::<Option<_>>()
            .ok_or_else(|| AloraError::format(path, format!("bad gate_state byte in adapter {m}")))?;
        ad.scaling = scaling;
        adapters.push(ad);
    }
    let l0_gates = if has_l0 {
        let num = |k: &str| -> Result<f64> {
            lookup(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| AloraError::format(path, format!("config key `{k}` missing")))
        };
        let hc = HardConcreteConfig {
            tau: num("hc_tau")?,
            gamma_lower: num("hc_gamma_lower")?,
            zeta_upper: num("hc_zeta_upper")?,
        };
        let mut gates = Vec::with_capacity(adapters.len());
        for ad in &adapters {
            let lt = take(format!("l0.{}.log_theta", ad.module.0), &[ad.rank()])?;
            let mut g = HardConcreteGate::new(ad.module, ad.rank(), 0.0, hc);
            g.log_theta.value = lt;
            gates.push(g);
        }
        Some(gates)
    } else {
        None
    };
    if let Some(name) = floats.keys().next() {
        return Err(AloraError::format(path, format!("unexpected tensor `{name}`")));
    }
    Ok(SuperNetwork {
        config,
        embed,
        pos,
        blocks,
        unembed,
        adapters,
        l0_gates,
    })
}
