//! Point cloud readers: ASCII XYZ (one `x y z` per line, `#` comments) and
//! binary-little-endian PLY with float32/float64 vertex positions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{MapBuilderError, PointCloud};

pub fn load_point_cloud(path: &Path) -> Result<PointCloud, MapBuilderError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => load_ply(path),
        _ => load_xyz(path),
    }
}

pub fn load_xyz(path: &Path) -> Result<PointCloud, MapBuilderError> {
    let reader = BufReader::new(File::open(path)?);
    let mut points = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let mut coord = [0.0f64; 3];
        for slot in &mut coord {
            *slot = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| MapBuilderError::CloudParse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: "expected `x y z`".into(),
                })?;
        }
        points.push(Vector3::new(coord[0], coord[1], coord[2]));
    }
    PointCloud::new(points)
}

pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<(), MapBuilderError> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in &cloud.points {
        writeln!(out, "{:.16e} {:.16e} {:.16e}", p.x, p.y, p.z)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy)]
enum PlyScalar {
    F32,
    F64,
    Other(usize),
}

impl PlyScalar {
    fn size(self) -> usize {
        match self {
            PlyScalar::F32 => 4,
            PlyScalar::F64 => 8,
            PlyScalar::Other(size) => size,
        }
    }
}

fn scalar_type(name: &str) -> Option<PlyScalar> {
    match name {
        "float" | "float32" => Some(PlyScalar::F32),
        "double" | "float64" => Some(PlyScalar::F64),
        "char" | "int8" | "uchar" | "uint8" => Some(PlyScalar::Other(1)),
        "short" | "int16" | "ushort" | "uint16" => Some(PlyScalar::Other(2)),
        "int" | "int32" | "uint" | "uint32" => Some(PlyScalar::Other(4)),
        _ => None,
    }
}

pub fn load_ply(path: &Path) -> Result<PointCloud, MapBuilderError> {
    let parse_err = |message: &str, line: usize| MapBuilderError::CloudParse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    };

    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut line_no = 0;
    let read_line = |reader: &mut BufReader<File>, line: &mut String, line_no: &mut usize| {
        line.clear();
        *line_no += 1;
        reader.read_line(line).map(|n| n > 0)
    };

    if !read_line(&mut reader, &mut line, &mut line_no)? || line.trim() != "ply" {
        return Err(parse_err("missing `ply` magic", line_no));
    }

    let mut vertex_count: Option<usize> = None;
    // (offset, scalar) for x, y, z inside one vertex record.
    let mut coords: [Option<(usize, PlyScalar)>; 3] = [None, None, None];
    let mut record_size = 0usize;
    let mut in_vertex_element = false;

    loop {
        if !read_line(&mut reader, &mut line, &mut line_no)? {
            return Err(parse_err("unexpected end of header", line_no));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(parse_err("only binary_little_endian PLY is supported", line_no));
                }
            }
            ["element", "vertex", count] => {
                vertex_count = Some(
                    count
                        .parse()
                        .map_err(|_| parse_err("invalid vertex count", line_no))?,
                );
                in_vertex_element = true;
                record_size = 0;
            }
            ["element", _, _] => in_vertex_element = false,
            ["property", "list", ..] => {
                if in_vertex_element {
                    return Err(parse_err("list properties on vertices are unsupported", line_no));
                }
            }
            ["property", type_name, prop_name] => {
                if in_vertex_element {
                    let scalar = scalar_type(type_name)
                        .ok_or_else(|| parse_err("unknown property type", line_no))?;
                    let slot = match *prop_name {
                        "x" => Some(0),
                        "y" => Some(1),
                        "z" => Some(2),
                        _ => None,
                    };
                    if let Some(slot) = slot {
                        if !matches!(scalar, PlyScalar::F32 | PlyScalar::F64) {
                            return Err(parse_err(
                                "vertex positions must be float32 or float64",
                                line_no,
                            ));
                        }
                        coords[slot] = Some((record_size, scalar));
                    }
                    record_size += scalar.size();
                }
            }
            _ => return Err(parse_err("unrecognized header line", line_no)),
        }
    }

    let vertex_count = vertex_count.ok_or_else(|| parse_err("no vertex element", line_no))?;
    let coords = match coords {
        [Some(x), Some(y), Some(z)] => [x, y, z],
        _ => return Err(parse_err("vertex element lacks x/y/z properties", line_no)),
    };

    let mut record = vec![0u8; record_size];
    let mut points = Vec::with_capacity(vertex_count);
    for _ in 0..vertex_count {
        reader.read_exact(&mut record)?;
        let mut coord = [0.0f64; 3];
        for (slot, &(offset, scalar)) in coord.iter_mut().zip(&coords) {
            *slot = match scalar {
                PlyScalar::F32 => {
                    f32::from_le_bytes(record[offset..offset + 4].try_into().unwrap()) as f64
                }
                PlyScalar::F64 => {
                    f64::from_le_bytes(record[offset..offset + 8].try_into().unwrap())
                }
                PlyScalar::Other(_) => unreachable!(),
            };
        }
        points.push(Vector3::new(coord[0], coord[1], coord[2]));
    }
    PointCloud::new(points)
}
