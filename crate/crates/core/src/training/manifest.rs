//! Architecture manifests.
//!
//! ```text
//! image 28 28
//! [generative]
//! layer 2 top_bernoulli 200
//! layer 1 sbn 200
//! layer 0 sbn 784
//! [recognition]
//! layer 1 sbn 200
//! layer 2 sbn 200
//! ```
//!
//! Generative layer `l` emits `z_l` (layer 0 emits the data); recognition
//! layer `l` emits `z_l` from `z_{l-1}`. NADE and VAE layers accept
//! `hidden=<w>[,<w>...]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{LayerKind, LayerParams};
use crate::model::{GenerativeModel, RecognitionModel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub image_shape: Option<(usize, usize)>,
    /// Indexed by layer, likelihood first.
    pub generative: Vec<LayerSpec>,
    /// Indexed by layer minus one, `z_1` first.
    pub recognition: Vec<LayerSpec>,
}

#[derive(PartialEq)]
enum Section {
    None,
    Generative,
    Recognition,
}

fn parse_usize(tok: &str, what: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::Format(format!("manifest line {line}: {what} {tok:?} is not a count")))
}

fn default_hidden(kind: LayerKind, width: usize) -> Vec<usize> {
    match kind {
        LayerKind::Nade | LayerKind::TopNade => vec![width],
        LayerKind::VaeBinary | LayerKind::VaeReal => vec![width, width],
        _ => Vec::new(),
    }
}

fn collect(section: BTreeMap<usize, LayerSpec>, first: usize, name: &str) -> Result<Vec<LayerSpec>> {
    for (expected, idx) in (first..).zip(section.keys()) {
        if *idx != expected {
            return Err(Error::Format(format!("{name} layers must be numbered consecutively from {first}")));
        }
    }
    Ok(section.into_values().collect())
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut image_shape = None;
        let mut section = Section::None;
        let mut gen = BTreeMap::new();
        let mut rec = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let lineno = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "[generative]" => section = Section::Generative,
                "[recognition]" => section = Section::Recognition,
                "image" if toks.len() == 3 => {
                    image_shape = Some((parse_usize(toks[1], "rows", lineno)?, parse_usize(toks[2], "cols", lineno)?));
                }
                "layer" if toks.len() == 4 || toks.len() == 5 => {
                    let idx = parse_usize(toks[1], "index", lineno)?;
                    let kind: LayerKind = toks[2].parse()?;
                    let width = parse_usize(toks[3], "width", lineno)?;
                    if width == 0 {
                        return Err(Error::Format(format!("manifest line {lineno}: zero width")));
                    }
                    let hidden = match toks.get(4) {
                        Some(opt) => {
                            let list = opt.strip_prefix("hidden=").ok_or_else(|| {
                                Error::Format(format!("manifest line {lineno}: unknown option {opt:?}"))
                            })?;
                            list.split(',').map(|w| parse_usize(w, "hidden width", lineno)).collect::<Result<_>>()?
                        }
                        None => default_hidden(kind, width),
                    };
                    let spec = LayerSpec { kind, width, hidden };
                    let target = match section {
                        Section::Generative => &mut gen,
                        Section::Recognition => &mut rec,
                        Section::None => {
                            return Err(Error::Format(format!("manifest line {lineno}: layer outside a section")))
                        }
                    };
                    if target.insert(idx, spec).is_some() {
                        return Err(Error::Format(format!("manifest line {lineno}: layer {idx} repeated")));
                    }
                }
                _ => return Err(Error::Format(format!("manifest line {lineno}: cannot parse {line:?}"))),
            }
        }
        let generative = collect(gen, 0, "generative")?;
        let recognition = collect(rec, 1, "recognition")?;
        let m = Self { image_shape, generative, recognition };
        m.build().map_err(|e| match e {
            Error::Format(_) => e,
            other => Error::Format(format!("manifest: {other}")),
        })?;
        Ok(m)
    }

    /// Data dimension `D`.
    pub fn data_dim(&self) -> usize {
        self.generative.first().map_or(0, |l| l.width)
    }

    /// Zero-initialized models with the described shapes.
    pub fn build(&self) -> Result<(GenerativeModel, RecognitionModel)> {
        if self.generative.len() < 2 {
            return Err(Error::Format("the generative stack needs a likelihood and a top layer".into()));
        }
        if let Some((r, c)) = self.image_shape {
            if r * c != self.data_dim() {
                return Err(Error::Format(format!("image {r}x{c} does not match data dimension {}", self.data_dim())));
            }
        }
        let top = self.generative.len() - 1;
        let gen = self
            .generative
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let in_dim = if l == top { 0 } else { self.generative[l + 1].width };
                LayerParams::zeros(s.kind, in_dim, s.width, &s.hidden)
            })
            .collect::<Result<Vec<_>>>()?;
        let g = GenerativeModel::new(gen)?;
        if self.recognition.len() != top {
            return Err(Error::Format(format!(
                "recognition stack has {} layers, the generative stack has {top} hidden layers",
                self.recognition.len()
            )));
        }
        let rec = self
            .recognition
            .iter()
            .enumerate()
            .map(|(l, s)| {
                if s.width != self.generative[l + 1].width {
                    return Err(Error::Format(format!(
                        "recognition layer {} has width {}, generative layer has {}",
                        l + 1,
                        s.width,
                        self.generative[l + 1].width
                    )));
                }
                LayerParams::zeros(s.kind, self.generative[l].width, s.width, &s.hidden)
            })
            .collect::<Result<Vec<_>>>()?;
        let r = RecognitionModel::new(rec)?;
        r.check_matches(&g)?;
        Ok((g, r))
    }

    /// Canonical text; equal manifests render identically.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some((r, c)) = self.image_shape {
            let _ = writeln!(out, "image {r} {c}");
        }
        let line = |out: &mut String, idx: usize, s: &LayerSpec| {
            let _ = write!(out, "layer {idx} {} {}", s.kind, s.width);
            if !s.hidden.is_empty() {
                let h: Vec<String> = s.hidden.iter().map(usize::to_string).collect();
                let _ = write!(out, " hidden={}", h.join(","));
            }
            out.push('\n');
        };
        out.push_str("[generative]\n");
        for (idx, s) in self.generative.iter().enumerate().rev() {
            line(&mut out, idx, s);
        }
        out.push_str("[recognition]\n");
        for (idx, s) in self.recognition.iter().enumerate() {
            line(&mut out, idx + 1, s);
        }
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    /// An SBN likelihood over `d` bits with SBN hidden layers of the given
    /// widths (bottom first), a factorized Bernoulli top and an SBN
    /// recognition stack.
    pub fn sbn_stack(d: usize, widths: &[usize], image_shape: Option<(usize, usize)>) -> Self {
        let spec = |kind, width| LayerSpec { kind, width, hidden: Vec::new() };
        let mut generative = vec![spec(LayerKind::Sbn, d)];
        for (i, &w) in widths.iter().enumerate() {
            let kind = if i + 1 == widths.len() { LayerKind::TopBernoulli } else { LayerKind::Sbn };
            generative.push(spec(kind, w));
        }
        let recognition = widths.iter().map(|&w| spec(LayerKind::Sbn, w)).collect();
        Self { image_shape, generative, recognition }
    }
}
