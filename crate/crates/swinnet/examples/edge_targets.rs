//! Show how edge supervision targets are produced: take a binary mask,
//! run the edge detector, and print both as ASCII art.

use swinnet::dataio::{canny_edges, Plane};

fn show(p: &Plane, title: &str) {
    println!("{title}:");
    for r in 0..p.h {
        let row: String = (0..p.w)
            .map(|c| if p.at(r, c) > 0.5 { '#' } else { '.' })
            .collect();
        println!("  {row}");
    }
}

fn main() {
    let (h, w) = (24, 40);
    let mut mask = Plane::constant(h, w, 0.0);
    // a rectangle and a small blob
    for r in 4..16 {
        for c in 6..20 {
            mask.data[r * w + c] = 1.0;
        }
    }
    for r in 14..21 {
        for c in 26..34 {
            if (r as i32 - 17).pow(2) + (c as i32 - 30).pow(2) <= 12 {
                mask.data[r * w + c] = 1.0;
            }
        }
    }
    show(&mask, "ground-truth mask");
    let edges = canny_edges(&mask);
    show(&edges, "edge target");
    let on: usize = edges.data.iter().map(|&v| v as usize).sum();
    println!("{on} edge pixels of {}", h * w);
}
