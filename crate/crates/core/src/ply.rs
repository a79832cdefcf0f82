//! Binary little-endian PLY storage for Gaussian clouds, using the property
//! layout shared by common splat viewers (DC color term only).

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::gaussian::{Gaussian3D, GaussianCloud};

/// Zeroth-order real spherical harmonic, `1 / (2√π)`.
pub const SH_C0: f64 = 0.28209479177387814;

pub const PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
    "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

const RECORD_BYTES: usize = PROPERTIES.len() * 4;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed PLY header at `{element}`: {reason}")]
    MalformedHeader { element: String, reason: String },
    #[error("element `{element}` has unexpected property set: expected [{expected}], found [{found}]")]
    PropertySet { element: String, expected: String, found: String },
    #[error("truncated payload in element `{element}`: vertex {index} of {count} is incomplete")]
    Truncated { element: String, index: usize, count: usize },
}

pub fn color_to_dc(c: f64) -> f32 {
    ((c - 0.5) / SH_C0) as f32
}

pub fn dc_to_color(dc: f32) -> f64 {
    dc as f64 * SH_C0 + 0.5
}

pub fn write_ply<W: Write>(cloud: &GaussianCloud, mut out: W) -> io::Result<()> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for p in PROPERTIES {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;

    let mut buf = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for g in cloud.gaussians() {
        let values: [f32; 17] = [
            g.mu.x as f32,
            g.mu.y as f32,
            g.mu.z as f32,
            0.0,
            0.0,
            0.0,
            color_to_dc(g.color.x),
            color_to_dc(g.color.y),
            color_to_dc(g.color.z),
            g.logit_opacity as f32,
            g.log_scale.x as f32,
            g.log_scale.y as f32,
            g.log_scale.z as f32,
            g.quat[0] as f32,
            g.quat[1] as f32,
            g.quat[2] as f32,
            g.quat[3] as f32,
        ];
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

pub fn save_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<(), PlyError> {
    let mut bytes = Vec::new();
    write_ply(cloud, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianCloud, PlyError> {
    let file = fs::File::open(path)?;
    read_ply(io::BufReader::new(file))
}

fn header_err(element: &str, reason: impl Into<String>) -> PlyError {
    PlyError::MalformedHeader { element: element.to_string(), reason: reason.into() }
}

/// Parses a cloud; ids are reassigned in file order.
pub fn read_ply<R: BufRead>(mut input: R) -> Result<GaussianCloud, PlyError> {
    let mut line = String::new();
    let next_line = |input: &mut R, line: &mut String| -> Result<bool, PlyError> {
        line.clear();
        let n = input.read_line(line)?;
        Ok(n > 0)
    };

    if !next_line(&mut input, &mut line)? || line.trim_end() != "ply" {
        return Err(header_err("ply", "missing `ply` magic line"));
    }
    let mut format_seen = false;
    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    let mut current_element = String::from("ply");
    loop {
        if !next_line(&mut input, &mut line)? {
            return Err(header_err(&current_element, "header ended without `end_header`"));
        }
        let text = line.trim_end();
        let tokens: Vec<&str> = text.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, ver] => {
                if *fmt != "binary_little_endian" || *ver != "1.0" {
                    return Err(header_err("format", format!("unsupported format `{fmt} {ver}`")));
                }
                format_seen = true;
            }
            ["element", name, count] => {
                if *name != "vertex" {
                    return Err(header_err(name, "only a `vertex` element is supported"));
                }
                if vertex_count.is_some() {
                    return Err(header_err(name, "element declared twice"));
                }
                let n = count
                    .parse::<usize>()
                    .map_err(|_| header_err(name, format!("invalid element count `{count}`")))?;
                vertex_count = Some(n);
                current_element = name.to_string();
            }
            ["property", ty, name] => {
                if vertex_count.is_none() {
                    return Err(header_err(name, "property declared before any element"));
                }
                if *ty != "float" && *ty != "float32" {
                    return Err(PlyError::PropertySet {
                        element: current_element.clone(),
                        expected: "float properties".into(),
                        found: format!("{ty} {name}"),
                    });
                }
                properties.push(name.to_string());
            }
            _ => return Err(header_err(&current_element, format!("unrecognized header line `{text}`"))),
        }
    }
    if !format_seen {
        return Err(header_err("format", "missing format line"));
    }
    let count = vertex_count.ok_or_else(|| header_err("vertex", "missing `element vertex` line"))?;
    if properties.iter().map(String::as_str).ne(PROPERTIES.iter().copied()) {
        return Err(PlyError::PropertySet {
            element: "vertex".into(),
            expected: PROPERTIES.join(" "),
            found: properties.join(" "),
        });
    }

    let mut cloud = GaussianCloud::new();
    let mut record = [0u8; RECORD_BYTES];
    for index in 0..count {
        input.read_exact(&mut record).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => PlyError::Truncated { element: "vertex".into(), index, count },
            _ => PlyError::Io(e),
        })?;
        let f = |k: usize| f32::from_le_bytes(record[4 * k..4 * k + 4].try_into().unwrap());
        cloud.push(Gaussian3D {
            mu: Vector3::new(f(0) as f64, f(1) as f64, f(2) as f64),
            color: Vector3::new(dc_to_color(f(6)), dc_to_color(f(7)), dc_to_color(f(8))),
            logit_opacity: f(9) as f64,
            log_scale: Vector3::new(f(10) as f64, f(11) as f64, f(12) as f64),
            quat: [f(13) as f64, f(14) as f64, f(15) as f64, f(16) as f64],
        });
    }
    Ok(cloud)
}
