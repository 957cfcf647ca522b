//! Closed-form parameter and multiply-accumulate accounting.
//!
//! Counts are derived from the configuration alone, mirroring the modules
//! exactly (the toy-scale counts are verified against the instantiated
//! model parameter for parameter). MACs cover convolutions and matrix
//! multiplies; elementwise work and normalization are negligible at this
//! scale and are left out. FLOPs are reported both as MACs and as 2*MACs,
//! since both conventions are common.

use crate::model::{Ablation, ModelConfig};

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn conv(ci: usize, co: usize, k: usize) -> usize {
    ci * co * k * k + co
}

fn layer_norm(c: usize) -> usize {
    2 * c
}

/// Per-module parameter counts (trainable only) for one configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ParamCounts {
    /// one encoder stream
    pub stream: usize,
    /// both encoder streams
    pub streams: usize,
    pub sacr: usize,
    pub edge: usize,
    pub decoder: usize,
    pub total: usize,
}

/// Per-module MAC counts for one forward pass at batch 1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MacCounts {
    pub stream: u64,
    pub streams: u64,
    pub sacr: u64,
    pub edge: u64,
    pub decoder: u64,
    pub total: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityReport {
    pub params: ParamCounts,
    pub macs: MacCounts,
}

fn block_params(c: usize, heads: usize, w: usize) -> usize {
    let span = 2 * w - 1;
    layer_norm(c)
        + linear(c, 3 * c)
        + linear(c, c)
        + span * span * heads
        + layer_norm(c)
        + linear(c, 4 * c)
        + linear(4 * c, c)
}

pub fn param_counts(cfg: &ModelConfig) -> ParamCounts {
    let bb = cfg.backbone();
    let mut stream = conv(3, bb.embed_dim, bb.patch_size) + layer_norm(bb.embed_dim);
    for i in 0..4 {
        let c = bb.stage_dim(i);
        stream += bb.depths[i] * block_params(c, bb.num_heads[i], bb.stage_window(i));
        if i < 3 {
            stream += layer_norm(4 * c) + linear(4 * c, 2 * c);
        }
    }

    let dims = [
        bb.stage_dim(0),
        bb.stage_dim(1),
        bb.stage_dim(2),
        bb.stage_dim(3),
    ];
    let sacr = if cfg.ablation == Ablation::Dem {
        // parameters exist but are bypassed; report the active path
        0
    } else {
        dims.iter().map(|&c| conv(1, 1, 3) + conv(c, c, 1)).sum()
    };

    let ce = 3 * cfg.edge_branch();
    let edge = if cfg.ablation == Ablation::NoEdge {
        0
    } else {
        let br = cfg.edge_branch();
        conv(dims[0], br, 1)
            + conv(dims[1], br, 1)
            + conv(dims[2], br, 1)
            + conv(ce, ce, 3)
            + 2 * ce // batch-norm scale and shift
            + conv(ce, ce, 1)
    };

    let mut decoder = 0;
    if cfg.ablation != Ablation::FuseOnly {
        for i in 0..3 {
            decoder += conv(2 * dims[i + 1], 2 * dims[i], 3);
        }
    }
    let head_in = 2 * dims[0] + if cfg.ablation == Ablation::NoEdge { 0 } else { ce };
    decoder += conv(head_in, 1, 3);
    if cfg.ablation != Ablation::NoEdge {
        decoder += conv(ce, 1, 3);
    }

    let streams = 2 * stream;
    ParamCounts {
        stream,
        streams,
        sacr,
        edge,
        decoder,
        total: streams + sacr + edge + decoder,
    }
}

fn block_macs(side: usize, c: usize, w: usize) -> u64 {
    let hw = (side * side) as u64;
    let c = c as u64;
    let w2 = (w * w) as u64;
    // qkv 3C^2 + proj C^2 + mlp 8C^2, attention 2*w^2*C per token
    12 * hw * c * c + 2 * hw * w2 * c
}

pub fn mac_counts(cfg: &ModelConfig) -> MacCounts {
    let bb = cfg.backbone();
    let s4 = (bb.img_size / bb.patch_size) as u64;
    let mut stream: u64 =
        s4 * s4 * bb.embed_dim as u64 * 3 * (bb.patch_size * bb.patch_size) as u64;
    for i in 0..4 {
        let side = bb.stage_side(i);
        let c = bb.stage_dim(i);
        stream += bb.depths[i] as u64 * block_macs(side, c, bb.stage_window(i));
        if i < 3 {
            // merge: (HW/4) tokens, 4C -> 2C
            let hw = (side * side) as u64;
            stream += 2 * hw * (c * c) as u64;
        }
    }

    let dims = [
        bb.stage_dim(0),
        bb.stage_dim(1),
        bb.stage_dim(2),
        bb.stage_dim(3),
    ];
    let sides = [
        bb.stage_side(0),
        bb.stage_side(1),
        bb.stage_side(2),
        bb.stage_side(3),
    ];
    let sacr = if cfg.ablation == Ablation::Dem {
        0
    } else {
        (0..4)
            .map(|i| {
                let hw = (sides[i] * sides[i]) as u64;
                let c = dims[i] as u64;
                hw * 9 + 2 * c * c // spatial conv + both streams' channel conv
            })
            .sum()
    };

    let ce = (3 * cfg.edge_branch()) as u64;
    let edge = if cfg.ablation == Ablation::NoEdge {
        0
    } else {
        let br = cfg.edge_branch() as u64;
        let hw1 = (sides[0] * sides[0]) as u64;
        let mut e = 0u64;
        for i in 0..3 {
            e += (sides[i] * sides[i]) as u64 * dims[i] as u64 * br;
        }
        e + hw1 * ce * ce * 9 + ce * ce
    };

    let mut decoder = 0u64;
    if cfg.ablation != Ablation::FuseOnly {
        for i in 0..3 {
            let hw = (sides[i] * sides[i]) as u64;
            decoder += hw * (2 * dims[i + 1]) as u64 * (2 * dims[i]) as u64 * 9;
        }
    }
    let hw1 = (sides[0] * sides[0]) as u64;
    let head_in = (2 * dims[0] + if cfg.ablation == Ablation::NoEdge { 0 } else { 3 * cfg.edge_branch() }) as u64;
    decoder += hw1 * head_in * 9;
    if cfg.ablation != Ablation::NoEdge {
        decoder += hw1 * ce * 9;
    }

    let streams = 2 * stream;
    MacCounts {
        stream,
        streams,
        sacr,
        edge,
        decoder,
        total: streams + sacr + edge + decoder,
    }
}

pub fn report(cfg: &ModelConfig) -> ComplexityReport {
    ComplexityReport {
        params: param_counts(cfg),
        macs: mac_counts(cfg),
    }
}

fn fmt_m(v: usize) -> String {
    format!("{:.2}M", v as f64 / 1e6)
}

fn fmt_g(v: u64) -> String {
    format!("{:.2}G", v as f64 / 1e9)
}

impl ComplexityReport {
    pub fn table(&self) -> String {
        let p = &self.params;
        let m = &self.macs;
        let mut s = String::new();
        s.push_str("module            params      macs\n");
        s.push_str(&format!(
            "encoder stream    {:<10}  {}\n",
            fmt_m(p.stream),
            fmt_g(m.stream)
        ));
        s.push_str(&format!(
            "both streams      {:<10}  {}\n",
            fmt_m(p.streams),
            fmt_g(m.streams)
        ));
        s.push_str(&format!(
            "re-calibration    {:<10}  {}\n",
            fmt_m(p.sacr),
            fmt_g(m.sacr)
        ));
        s.push_str(&format!(
            "edge branch       {:<10}  {}\n",
            fmt_m(p.edge),
            fmt_g(m.edge)
        ));
        s.push_str(&format!(
            "decoder           {:<10}  {}\n",
            fmt_m(p.decoder),
            fmt_g(m.decoder)
        ));
        s.push_str(&format!(
            "total             {:<10}  {}\n",
            fmt_m(p.total),
            fmt_g(m.total)
        ));
        s.push_str(&format!(
            "flops (1x macs) {} / (2x macs) {}\n",
            fmt_g(m.total),
            fmt_g(2 * m.total)
        ));
        s
    }
}

/// The four standard rows: complete model and the three ablations.
pub fn ablation_table(scale: crate::model::Scale) -> String {
    let mut s = String::from("variant     params      macs\n");
    for (name, ab) in [
        ("full", Ablation::None),
        ("-recalib", Ablation::Dem),
        ("-edge", Ablation::NoEdge),
        ("-aggregate", Ablation::FuseOnly),
    ] {
        let cfg = ModelConfig {
            scale,
            ablation: ab,
        };
        let r = report(&cfg);
        s.push_str(&format!(
            "{name:<11} {:<10}  {}\n",
            fmt_m(r.params.total),
            fmt_g(r.macs.total)
        ));
    }
    s
}
