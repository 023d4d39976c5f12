//! `ActivationDump`: tapped patch-token activations together with everything
//! needed to recompute Sum scores offline. The byte layout is described in
//! `docs/formats.md`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::adapt::AdaptedEncoder;
use crate::encoder::ln_project;
use crate::episodes::{ImageSet, Role};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tir::{binarize_topk, token_class_similarity, SumScoreMap};

pub const DUMP_MAGIC: &str = "TIRDUMP";
pub const DUMP_VERSION: u32 = 1;
const MAX_HEADER_BYTES: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    External,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Synthetic => "synthetic",
            Provenance::External => "external",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub provenance: Provenance,
    pub topk_ratio: f64,
    /// Patch tokens per tapped layer, `[B × M × D_v]` (no CLS).
    pub layers: BTreeMap<usize, Tensor>,
    /// `[K × D_t]`.
    pub classes: Tensor,
    /// Final-norm scale and shift applied before the projection, `[D_v]`.
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    /// `[D_v × D_t]`.
    pub projection: Tensor,
    /// Generator roles per token, `[B·M]`, when known.
    pub roles: Option<Vec<Role>>,
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

impl ActivationDump {
    /// Validates and stores the arrays at `f32` precision, so a dump built
    /// in memory equals its own round trip through a file.
    pub fn new(
        provenance: Provenance,
        topk_ratio: f64,
        layers: BTreeMap<usize, Tensor>,
        classes: Tensor,
        ln_gamma: Tensor,
        ln_beta: Tensor,
        projection: Tensor,
        roles: Option<Vec<Role>>,
    ) -> Result<Self> {
        let dump = Self {
            provenance,
            topk_ratio,
            layers: layers.iter().map(|(&l, t)| (l, quantize(t))).collect(),
            classes: quantize(&classes),
            ln_gamma: quantize(&ln_gamma),
            ln_beta: quantize(&ln_beta),
            projection: quantize(&projection),
            roles,
        };
        dump.validate()?;
        Ok(dump)
    }

    /// Runs `images` through `enc` (with its TIR layer active) and keeps the
    /// patch tokens of `layers`.
    pub fn capture(
        enc: &AdaptedEncoder,
        images: &ImageSet,
        classes: &Tensor,
        layers: &[usize],
        topk_ratio: f64,
    ) -> Result<Self> {
        let (_, acts, _) = enc.forward(&images.images, classes, layers, false)?;
        let b = images.len();
        let mut out = BTreeMap::new();
        for (&l, a) in &acts.layers {
            out.insert(l, strip_cls(a, b)?);
        }
        Self::new(
            Provenance::Synthetic,
            topk_ratio,
            out,
            classes.clone(),
            enc.base.ln_g.clone(),
            enc.base.ln_b.clone(),
            enc.base.proj.clone(),
            Some(images.roles.clone()),
        )
    }

    pub fn batch(&self) -> usize {
        self.first_layer().map(|t| t.shape()[0]).unwrap_or(0)
    }

    pub fn tokens(&self) -> usize {
        self.first_layer().map(|t| t.shape()[1]).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn text_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn class_count(&self) -> usize {
        self.classes.rows()
    }

    pub fn deepest_layer(&self) -> Option<usize> {
        self.layers.keys().next_back().copied()
    }

    fn first_layer(&self) -> Option<&Tensor> {
        self.layers.values().next()
    }

    pub fn layer(&self, layer: usize) -> Result<&Tensor> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::Argument(format!("layer {layer} not in dump (have {:?})", self.layers.keys())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(m));
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return bad(format!("topk_ratio {} outside (0, 1]", self.topk_ratio));
        }
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        if self.projection.shape().len() != 2 {
            return bad(format!("projection has shape {:?}", self.projection.shape()));
        }
        let (dv, dt) = (self.width(), self.text_dim());
        let (b, m) = (self.batch(), self.tokens());
        if b == 0 || m == 0 || dv == 0 || dt == 0 {
            return bad("empty dimension".into());
        }
        for (l, t) in &self.layers {
            if t.shape() != [b, m, dv] {
                return bad(format!("layer {l} has shape {:?}, expected [{b}, {m}, {dv}]", t.shape()));
            }
        }
        if self.classes.shape().len() != 2 || self.classes.shape()[1] != dt || self.classes.rows() == 0 {
            return bad(format!("class embeddings have shape {:?}, expected [K, {dt}]", self.classes.shape()));
        }
        if self.ln_gamma.shape() != [dv] || self.ln_beta.shape() != [dv] {
            return bad(format!("norm parameters must have shape [{dv}]"));
        }
        if let Some(r) = &self.roles {
            if r.len() != b * m {
                return bad(format!("{} roles for {} tokens", r.len(), b * m));
            }
        }
        for (name, t) in self.arrays() {
            if !t.is_finite() {
                return bad(format!("{name} has non-finite values"));
            }
        }
        Ok(())
    }

    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = self.layers.iter().map(|(l, t)| (format!("layer.{l}"), t)).collect();
        v.push(("class_embeddings".into(), &self.classes));
        v.push(("proj_ln_gamma".into(), &self.ln_gamma));
        v.push(("proj_ln_beta".into(), &self.ln_beta));
        v.push(("projection".into(), &self.projection));
        v
    }

    /// Token–class cosine similarities of one tapped layer, `[B × M × K]`.
    pub fn similarity(&self, layer: usize) -> Result<Tensor> {
        let proj = ln_project(self.layer(layer)?, &self.ln_gamma, &self.ln_beta, &self.projection)?;
        token_class_similarity(&proj, &self.classes)
    }

    pub fn sum_scores(&self, layer: usize) -> Result<SumScoreMap> {
        binarize_topk(&self.similarity(layer)?, self.topk_ratio)
    }

    /// Sum maps of every tapped layer, all at the dump's `topk_ratio`.
    pub fn all_sum_scores(&self) -> Result<BTreeMap<usize, SumScoreMap>> {
        self.layers.keys().map(|&l| Ok((l, self.sum_scores(l)?))).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        let (b, m, dv, dt, k) = (self.batch(), self.tokens(), self.width(), self.text_dim(), self.class_count());
        let layers: Vec<String> = self.layers.keys().map(|l| l.to_string()).collect();
        let mut h = String::new();
        h += &format!("{DUMP_MAGIC}\nversion {DUMP_VERSION}\nprovenance {}\n", self.provenance);
        h += &format!("batch {b}\ntokens {m}\nwidth {dv}\ntext_dim {dt}\nclasses {k}\n");
        h += &format!("layers {}\ntopk_ratio {}\n", layers.join(" "), self.topk_ratio);
        let mut arrays: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .arrays()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.data().iter().map(|&v| v as f32).collect()))
            .collect();
        if let Some(r) = &self.roles {
            arrays.push(("roles".into(), vec![b, m], r.iter().map(|&r| r as u8 as f32).collect()));
        }
        for (n, s, _) in &arrays {
            let dims: Vec<String> = s.iter().map(|d| d.to_string()).collect();
            h += &format!("array {n} {}\n", dims.join(" "));
        }
        h += "end\n";
        w.write_all(h.as_bytes())?;
        for (_, _, data) in &arrays {
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let header = read_header(&mut r)?;
        let mut arrays = BTreeMap::new();
        for (name, shape) in &header.arrays {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("array {name}: {e}")))?;
            let data: Vec<f64> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            arrays.insert(name.clone(), Tensor::new(shape.clone(), data)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last array".into()));
        }
        let mut take = |name: &str| arrays.remove(name).ok_or_else(|| Error::Format(format!("missing array {name}")));
        let mut layers = BTreeMap::new();
        for &l in &header.layers {
            layers.insert(l, take(&format!("layer.{l}"))?);
        }
        let classes = take("class_embeddings")?;
        let ln_gamma = take("proj_ln_gamma")?;
        let ln_beta = take("proj_ln_beta")?;
        let projection = take("projection")?;
        let roles = match arrays.remove("roles") {
            None => None,
            Some(t) => Some(
                t.data()
                    .iter()
                    .map(|&v| {
                        (v.fract() == 0.0 && (0.0..=2.0).contains(&v))
                            .then(|| Role::from_u8(v as u8))
                            .flatten()
                            .ok_or_else(|| Error::Format(format!("invalid role code {v}")))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Format(format!("unexpected array {extra}")));
        }
        let dump = Self {
            provenance: header.provenance,
            topk_ratio: header.topk_ratio,
            layers,
            classes,
            ln_gamma,
            ln_beta,
            projection,
            roles,
        };
        dump.validate()?;
        let dims = (dump.batch(), dump.tokens(), dump.width(), dump.text_dim(), dump.class_count());
        if dims != header.dims {
            return Err(Error::Format(format!(
                "header declares (batch, tokens, width, text_dim, classes) = {:?} but arrays give {:?}",
                header.dims, dims
            )));
        }
        Ok(dump)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::fs::File::open(path)?)
    }
}

/// `[B·(M+1) × D]` with CLS first per image to `[B × M × D]`.
pub fn strip_cls(tokens: &Tensor, batch: usize) -> Result<Tensor> {
    let d = tokens.last_dim();
    if batch == 0 || tokens.rows() % batch != 0 || tokens.rows() / batch < 2 {
        return Err(Error::Argument(format!("cannot split {:?} into {batch} images", tokens.shape())));
    }
    let t = tokens.rows() / batch;
    let mut out = Vec::with_capacity(batch * (t - 1) * d);
    for b in 0..batch {
        out.extend_from_slice(&tokens.data()[(b * t + 1) * d..(b + 1) * t * d]);
    }
    Tensor::new(vec![batch, t - 1, d], out)
}

struct Header {
    provenance: Provenance,
    dims: (usize, usize, usize, usize, usize),
    layers: Vec<usize>,
    topk_ratio: f64,
    arrays: Vec<(String, Vec<usize>)>,
}

fn read_header(r: &mut impl BufRead) -> Result<Header> {
    let fmt = |m: String| Error::Format(m);
    let mut lines = Vec::new();
    let mut total = 0;
    loop {
        let mut line = Vec::new();
        let n = r.read_until(b'\n', &mut line)?;
        if n == 0 {
            return Err(fmt("header not terminated by 'end'".into()));
        }
        total += n;
        if total > MAX_HEADER_BYTES {
            return Err(fmt("header too long".into()));
        }
        let line = String::from_utf8(line).map_err(|_| fmt("header is not UTF-8".into()))?;
        let line = line.trim_end_matches('\n').to_string();
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    let mut it = lines.into_iter();
    if it.next().as_deref() != Some(DUMP_MAGIC) {
        return Err(fmt("not an activation dump".into()));
    }
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut arrays = Vec::new();
    for line in it {
        let (key, value) = line.split_once(' ').unwrap_or((line.as_str(), ""));
        if key == "array" {
            let mut parts = value.split_whitespace();
            let name = parts.next().ok_or_else(|| fmt("array line without a name".into()))?;
            let shape = parts
                .map(|p| p.parse::<usize>().map_err(|_| fmt(format!("bad dimension '{p}' for {name}"))))
                .collect::<Result<Vec<_>>>()?;
            if arrays.iter().any(|(n, _)| n == name) {
                return Err(fmt(format!("duplicate array {name}")));
            }
            arrays.push((name.to_string(), shape));
        } else if fields.insert(key.to_string(), value.to_string()).is_some() {
            return Err(fmt(format!("duplicate header key {key}")));
        }
    }
    let mut get = |k: &str| fields.remove(k).ok_or_else(|| fmt(format!("missing header key {k}")));
    let version: u32 = get("version")?.parse().map_err(|_| fmt("bad version".into()))?;
    if version != DUMP_VERSION {
        return Err(fmt(format!("unsupported dump version {version}")));
    }
    let provenance = match get("provenance")?.as_str() {
        "synthetic" => Provenance::Synthetic,
        "external" => Provenance::External,
        p => return Err(fmt(format!("unknown provenance '{p}'"))),
    };
    let mut num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| fmt(format!("bad value for {k}"))) };
    let dims = (num("batch")?, num("tokens")?, num("width")?, num("text_dim")?, num("classes")?);
    let layers = get("layers")?
        .split_whitespace()
        .map(|p| p.parse::<usize>().map_err(|_| fmt(format!("bad layer '{p}'"))))
        .collect::<Result<Vec<_>>>()?;
    let topk_ratio: f64 = get("topk_ratio")?.parse().map_err(|_| fmt("bad topk_ratio".into()))?;
    if let Some(k) = fields.keys().next() {
        return Err(fmt(format!("unknown header key {k}")));
    }
    Ok(Header { provenance, dims, layers, topk_ratio, arrays })
}
