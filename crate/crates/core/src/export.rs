//! Attention, concept-state and class-activation exports.
//!
//! Attention CSVs have the header `block,concept,y0x0,y0x1,…` and one row
//! per concept; each row is a softmax over positions and sums to 1. State
//! CSVs have the header `block,concept,s0,…` with the sampler output `h`
//! before normalization. CAM grids have the header `row,x0,x1,…` and are
//! min-max scaled to [0, 1]. Numbers are written in shortest round-trip
//! form.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::network::Model;
use crate::nn::{BufferStore, Forward, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vcr::SamplerKind;

/// Concept values of one block for every batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMaps {
    pub block: usize,
    pub concepts: usize,
    pub width: usize,
    pub state_width: usize,
    pub height: usize,
    pub breadth: usize,
    /// `[N×C×HW]`.
    pub attention: Tensor,
    /// `[N×C×p̃]`.
    pub states: Tensor,
    /// Concept feature map entering the module, `[N×C·p×H×W]`.
    pub z: Tensor,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Eval-mode forward pass collecting block `block`'s concept values.
pub fn concept_maps(model: &Model, params: &ParamStore, buffers: &BufferStore, x: &Tensor, block: usize) -> Result<ConceptMaps> {
    let count = model.blocks().count();
    let blk = model
        .blocks()
        .nth(block)
        .ok_or_else(|| Error::config(format!("block {block} out of range; the model has {count} blocks")))?;
    let vcr = blk
        .vcr
        .as_ref()
        .ok_or_else(|| Error::config(format!("block {block} has no concept module")))?;
    if vcr.sampler.kind == SamplerKind::Pool {
        return Err(Error::config(format!(
            "block {block} uses the pooling sampler, which has no attention map"
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut f = Forward::inference(&mut g, params, buffers);
    model.forward(&mut f, xv)?;
    let tap = |name: &str| g.value(g.tapped(&format!("blocks.{block}.{name}")).expect("block is tapped")).clone();
    let z = tap("input");
    Ok(ConceptMaps {
        block,
        concepts: vcr.config.concepts,
        width: vcr.config.width,
        state_width: vcr.config.state_width,
        height: z.shape()[2],
        breadth: z.shape()[3],
        attention: tap("attention"),
        states: tap("state"),
        z,
    })
}

fn rows_csv(header: String, block: usize, rows: &[Real], row_len: usize) -> String {
    let mut s = header;
    s.push('\n');
    for (c, row) in rows.chunks_exact(row_len).enumerate() {
        s.push_str(&format!("{block},{c}"));
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

impl ConceptMaps {
    pub fn batch(&self) -> usize {
        self.attention.shape()[0]
    }

    fn element(t: &Tensor, n: usize) -> &[Real] {
        let len = t.numel() / t.shape()[0];
        &t.data()[n * len..(n + 1) * len]
    }

    pub fn attention_csv(&self, n: usize) -> String {
        let mut header = String::from("block,concept");
        for y in 0..self.height {
            for x in 0..self.breadth {
                header.push_str(&format!(",y{y}x{x}"));
            }
        }
        rows_csv(header, self.block, Self::element(&self.attention, n), self.height * self.breadth)
    }

    pub fn states_csv(&self, n: usize) -> String {
        let mut header = String::from("block,concept");
        for i in 0..self.state_width {
            header.push_str(&format!(",s{i}"));
        }
        rows_csv(header, self.block, Self::element(&self.states, n), self.state_width)
    }

    /// Write `attention_b{block}_n{i}.csv` and `states_b{block}_n{i}.csv`
    /// for every batch element.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();
        for n in 0..self.batch() {
            let a = dir.join(format!("attention_b{}_n{n}.csv", self.block));
            write(&a, self.attention_csv(n).as_bytes())?;
            let s = dir.join(format!("states_b{}_n{n}.csv", self.block));
            write(&s, self.states_csv(n).as_bytes())?;
            out.extend([a, s]);
        }
        Ok(out)
    }
}

/// A parsed export: block index, column names and a `[rows×cols]` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptTable {
    pub block: usize,
    pub columns: Vec<String>,
    pub values: Tensor,
}

/// Read an attention or state CSV back.
pub fn parse_concept_csv(text: &str) -> Result<ConceptTable> {
    let bad = |line: usize, what: String| Error::Data(format!("line {line}: {what}"));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "missing header".into()))?.split(',').collect();
    if header.len() < 3 || header[0] != "block" || header[1] != "concept" {
        return Err(bad(1, format!("unexpected header {:?}", header.join(","))));
    }
    let cols = header.len() - 2;
    let (mut block, mut values, mut rows) = (None, Vec::new(), 0);
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(bad(i + 2, format!("{} fields, header has {}", fields.len(), header.len())));
        }
        let b: usize = fields[0].parse().map_err(|_| bad(i + 2, format!("bad block {:?}", fields[0])))?;
        if *block.get_or_insert(b) != b {
            return Err(bad(i + 2, "mixed block indices".into()));
        }
        if fields[1] != rows.to_string() {
            return Err(bad(i + 2, format!("expected concept {rows}, found {:?}", fields[1])));
        }
        for f in &fields[2..] {
            values.push(f.parse::<Real>().map_err(|_| bad(i + 2, format!("bad number {f:?}")))?);
        }
        rows += 1;
    }
    let block = block.ok_or_else(|| bad(2, "no rows".into()))?;
    Ok(ConceptTable {
        block,
        columns: header[2..].iter().map(|s| s.to_string()).collect(),
        values: Tensor::new([rows, cols], values)?,
    })
}

/// `h_c = W^v_c · Σ_j M[c, j]·z_c[:, j]` for one batch element, from an
/// attention grid `[C×HW]`, the concept map `[C·p×H×W]` and the value
/// projection `[C·p̃×p×1×1]`.
pub fn recompute_states(attention: &Tensor, z: &Tensor, value: &Tensor, concepts: usize) -> Result<Tensor> {
    let (c, hw) = (concepts, attention.shape()[1]);
    let p = z.shape()[0] / c;
    let pt = value.shape()[0] / c;
    if attention.shape()[0] != c || z.numel() != c * p * hw || value.numel() != c * pt * p {
        return Err(Error::Data("attention, concept map and value projection disagree in shape".into()));
    }
    let (m, zd, w) = (attention.data(), z.data(), value.data());
    let mut out = vec![0.0; c * pt];
    for ci in 0..c {
        let pooled: Vec<Real> = (0..p)
            .map(|i| {
                let row = &zd[(ci * p + i) * hw..(ci * p + i + 1) * hw];
                row.iter().zip(&m[ci * hw..(ci + 1) * hw]).map(|(a, b)| a * b).sum()
            })
            .collect();
        for k in 0..pt {
            let wr = &w[(ci * pt + k) * p..(ci * pt + k + 1) * p];
            out[ci * pt + k] = wr.iter().zip(&pooled).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Tensor::new([c, pt], out)?)
}

/// Class activation map `Σ_k w[k, class]·F[k]` over the final feature map
/// of a single image, min-max scaled to [0, 1]. A constant map is all
/// zeros.
pub fn class_activation_map(
    model: &Model,
    params: &ParamStore,
    buffers: &BufferStore,
    image: &Tensor,
    class: usize,
) -> Result<Tensor> {
    if class >= model.spec.classes {
        return Err(Error::config(format!(
            "class {class} out of range; the model has {} classes",
            model.spec.classes
        )));
    }
    if image.ndim() != 4 || image.shape()[0] != 1 {
        return Err(Error::config(format!("expected one image [1×C×H×W], got {:?}", image.shape())));
    }
    let mut g = Graph::new();
    let xv = g.constant(image.clone());
    let mut f = Forward::inference(&mut g, params, buffers);
    model.forward(&mut f, xv)?;
    let feats = g.value(g.tapped("features").expect("features are tapped"));
    let (d, h, w) = (feats.shape()[1], feats.shape()[2], feats.shape()[3]);
    let weight = params.value(model.net.head.weight);
    let k = model.spec.classes;
    let mut map = vec![0.0; h * w];
    for ch in 0..d {
        let wk = weight.data()[ch * k + class];
        for (m, v) in map.iter_mut().zip(&feats.data()[ch * h * w..(ch + 1) * h * w]) {
            *m += wk * v;
        }
    }
    let lo = map.iter().copied().fold(Real::INFINITY, Real::min);
    let hi = map.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if hi > lo {
        map.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        map.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(Tensor::new([h, w], map)?)
}

pub fn cam_csv(map: &Tensor) -> String {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut s = String::from("row");
    for x in 0..w {
        s.push_str(&format!(",x{x}"));
    }
    s.push('\n');
    for y in 0..h {
        s.push_str(&format!("y{y}"));
        for v in &map.data()[y * w..(y + 1) * w] {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Binary greyscale PGM (P5), 255 for the hottest cell.
pub fn cam_pgm(map: &Tensor) -> Vec<u8> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Write `cam_n{index}_c{class}.csv` and `.pgm` into `dir`.
pub fn write_cam(map: &Tensor, dir: &Path, index: usize, class: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("cam_n{index}_c{class}.csv"));
    let pgm = dir.join(format!("cam_n{index}_c{class}.pgm"));
    write(&csv, cam_csv(map).as_bytes())?;
    write(&pgm, &cam_pgm(map))?;
    Ok(vec![csv, pgm])
}
