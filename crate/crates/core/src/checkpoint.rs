//! Checkpoint file: `SOTTA1\n`, a plain-text header, then the payload.
//!
//! ```text
//! SOTTA1
//! input_dim 16
//! hidden 64,64
//! classes 4
//! bn_eps 0.00001
//! tensor bn0.beta 1 64
//! ...
//! payload_bytes 41472
//! crc32 1a2b3c4d
//! end
//! <little-endian f64 payload, tensors in header order>
//! ```
//!
//! Tensors are the parameters (name order), then `running{i}.mean`,
//! `running{i}.var` per BN layer, then `source.mean` and `source.std`.

use crate::dataset::FeatureStats;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec, RunningStats};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"SOTTA1\n";

fn tensors_of(net: &Network) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = net
        .params()
        .iter()
        .map(|(n, p)| (n.to_string(), &p.value))
        .collect();
    for (i, r) in net.running().iter().enumerate() {
        out.push((format!("running{i}.mean"), &r.mean));
        out.push((format!("running{i}.var"), &r.var));
    }
    out.push(("source.mean".into(), &net.source_stats().mean));
    out.push(("source.std".into(), &net.source_stats().std));
    out
}

pub fn save_checkpoint(net: &Network) -> Vec<u8> {
    let spec = net.spec();
    let tensors = tensors_of(net);
    let mut payload = Vec::new();
    for (_, t) in &tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hidden: Vec<String> = spec.hidden.iter().map(usize::to_string).collect();
    let mut header = String::new();
    header.push_str(&format!("input_dim {}\n", spec.input_dim));
    header.push_str(&format!("hidden {}\n", hidden.join(",")));
    header.push_str(&format!("classes {}\n", spec.classes));
    header.push_str(&format!("bn_eps {:?}\n", spec.bn_eps));
    for (name, t) in &tensors {
        header.push_str(&format!("tensor {name} {} {}\n", t.rows(), t.cols()));
    }
    header.push_str(&format!("payload_bytes {}\n", payload.len()));
    header.push_str(&format!("crc32 {:08x}\n", crc32fast::hash(&payload)));
    header.push_str("end\n");

    let mut out = MAGIC.to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Header {
    spec: NetworkSpec,
    tensors: Vec<(String, usize, usize)>,
    payload_bytes: usize,
    crc: u32,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_header(text: &str) -> Result<Header> {
    let mut input_dim = None;
    let mut hidden = None;
    let mut classes = None;
    let mut bn_eps = None;
    let mut tensors = Vec::new();
    let mut payload_bytes = None;
    let mut crc = None;
    for line in text.lines() {
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("bad number in `{line}`")))
        };
        match key {
            "input_dim" => input_dim = Some(num(rest)?),
            "classes" => classes = Some(num(rest)?),
            "hidden" => {
                hidden = Some(if rest.is_empty() {
                    Vec::new()
                } else {
                    rest.split(',').map(num).collect::<Result<Vec<_>>>()?
                })
            }
            "bn_eps" => {
                bn_eps = Some(
                    rest.parse::<f64>()
                        .map_err(|_| bad(format!("bad bn_eps `{rest}`")))?,
                )
            }
            "tensor" => {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(bad(format!("malformed tensor line `{line}`")));
                }
                tensors.push((parts[0].to_string(), num(parts[1])?, num(parts[2])?));
            }
            "payload_bytes" => payload_bytes = Some(num(rest)?),
            "crc32" => {
                crc = Some(
                    u32::from_str_radix(rest, 16).map_err(|_| bad(format!("bad crc `{rest}`")))?,
                )
            }
            other => return Err(bad(format!("unknown header key `{other}`"))),
        }
    }
    let spec = NetworkSpec {
        input_dim: input_dim.ok_or_else(|| bad("missing input_dim"))?,
        hidden: hidden.ok_or_else(|| bad("missing hidden"))?,
        classes: classes.ok_or_else(|| bad("missing classes"))?,
        bn_eps: bn_eps.ok_or_else(|| bad("missing bn_eps"))?,
    };
    spec.validate()?;
    Ok(Header {
        spec,
        tensors,
        payload_bytes: payload_bytes.ok_or_else(|| bad("missing payload_bytes"))?,
        crc: crc.ok_or_else(|| bad("missing crc32"))?,
    })
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Network> {
    let Some(rest) = bytes.strip_prefix(MAGIC) else {
        if bytes.starts_with(b"SOTTA") {
            return Err(bad("unsupported checkpoint version"));
        }
        return Err(bad("missing SOTTA1 magic"));
    };
    let end = rest
        .windows(4)
        .position(|w| w == b"end\n")
        .filter(|&p| p == 0 || rest[p - 1] == b'\n')
        .ok_or_else(|| bad("truncated header"))?;
    let header_text = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let header = parse_header(header_text)?;
    let payload = &rest[end + 4..];
    if payload.len() != header.payload_bytes {
        return Err(bad(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if crc32fast::hash(payload) != header.crc {
        return Err(bad("checksum mismatch"));
    }
    let declared: usize = header.tensors.iter().map(|(_, r, c)| r * c * 8).sum();
    if declared != payload.len() {
        return Err(bad("tensor table does not match payload size"));
    }

    // Rebuild against a template so names, shapes, and the trainable
    // partition come from the spec rather than from the file.
    let template = Network::init(header.spec.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = tensors_of(&template)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(bad("tensor count does not match the network spec"));
    }

    let mut values = Vec::with_capacity(expected.len());
    let mut off = 0;
    for ((name, shape), (hname, r, c)) in expected.iter().zip(&header.tensors) {
        if name != hname || shape[..] != [*r, *c] {
            return Err(bad(format!(
                "tensor `{hname}` {r}x{c} does not match expected `{name}` {shape:?}"
            )));
        }
        let n = r * c;
        let data: Vec<f64> = payload[off..off + n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        off += n * 8;
        values.push(
            Tensor::new(shape.clone(), data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?,
        );
    }

    let mut values = values.into_iter();
    let mut params = ParamSet::new();
    for (name, p) in template.params().iter() {
        params.insert(name, values.next().expect("counted"), p.trainable)?;
    }
    let mut running = Vec::new();
    for _ in 0..template.num_bn_layers() {
        let mean = values.next().expect("counted");
        let var = values.next().expect("counted");
        running.push(RunningStats { mean, var });
    }
    let source = FeatureStats {
        mean: values.next().expect("counted"),
        std: values.next().expect("counted"),
    };
    Ok(Network::from_parts(header.spec, params, running, source))
}

/// Loads and checks that the stored network matches `expected`.
pub fn load_checkpoint_for(bytes: &[u8], expected: &NetworkSpec) -> Result<Network> {
    let net = load_checkpoint(bytes)?;
    if net.spec() != expected {
        return Err(Error::SpecMismatch {
            expected: expected.describe(),
            found: net.spec().describe(),
        });
    }
    Ok(net)
}
