//! Binary little-endian PLY export/import of Gaussian clouds.
//!
//! Per-vertex properties, all float32:
//! x y z rot_w rot_x rot_y rot_z scale_x scale_y scale_z opacity red green blue

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{GaussianCloud, GaussianPrimitive};
use crate::error::{Error, Result};
use crate::real::Real;

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "scale_x", "scale_y", "scale_z", "opacity",
    "red", "green", "blue",
];

pub fn export_ply<S: Real>(cloud: &GaussianCloud<S>, path: &Path) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::contract("export_ply: empty cloud"));
    }
    let ctx = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for p in PROPERTIES {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(|e| Error::io(ctx(), e))?;
    for prim in &cloud.primitives {
        let fields: [f32; 14] = [
            prim.mu.x.to_f64() as f32,
            prim.mu.y.to_f64() as f32,
            prim.mu.z.to_f64() as f32,
            prim.quat[0].to_f64() as f32,
            prim.quat[1].to_f64() as f32,
            prim.quat[2].to_f64() as f32,
            prim.quat[3].to_f64() as f32,
            prim.scale.x.to_f64() as f32,
            prim.scale.y.to_f64() as f32,
            prim.scale.z.to_f64() as f32,
            prim.opacity.to_f64() as f32,
            prim.color[0].to_f64() as f32,
            prim.color[1].to_f64() as f32,
            prim.color[2].to_f64() as f32,
        ];
        for v in fields {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn import_ply(path: &Path) -> Result<GaussianCloud<f32>> {
    let ctx = || path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut r = BufReader::new(file);

    // header is ASCII lines up to end_header
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|e| Error::io(ctx(), e))?;
        header.push(byte[0]);
        if header.ends_with(b"end_header\n") {
            break;
        }
        if header.len() > 1 << 16 {
            return Err(Error::format(ctx(), "unterminated PLY header"));
        }
    }
    let header = String::from_utf8(header).map_err(|_| Error::format(ctx(), "non-ASCII header"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::format(ctx(), "missing ply magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                if parts.next() != Some("binary_little_endian") {
                    return Err(Error::format(ctx(), "unsupported PLY format"));
                }
            }
            Some("element") => {
                if parts.next() == Some("vertex") {
                    count = parts
                        .next()
                        .and_then(|v| v.parse::<usize>().ok())
                        .or_else(|| None);
                }
            }
            Some("property") => {
                if parts.next() != Some("float") {
                    return Err(Error::format(ctx(), "only float properties supported"));
                }
                props.push(parts.next().unwrap_or("").to_string());
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::format(ctx(), "missing vertex element"))?;
    if props != PROPERTIES {
        return Err(Error::format(ctx(), format!("unexpected property layout: {props:?}")));
    }
    let mut primitives = Vec::with_capacity(count);
    let mut buf = [0u8; 4 * 14];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|e| Error::io(ctx(), e))?;
        let f = |i: usize| f32::from_le_bytes(buf[i * 4..i * 4 + 4].try_into().unwrap());
        primitives.push(GaussianPrimitive {
            mu: Vector3::new(f(0), f(1), f(2)),
            quat: [f(3), f(4), f(5), f(6)],
            scale: Vector3::new(f(7), f(8), f(9)),
            opacity: f(10),
            color: [f(11), f(12), f(13)],
        });
    }
    Ok(GaussianCloud { primitives })
}
