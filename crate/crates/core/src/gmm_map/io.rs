//! ASCII map format.
//!
//! ```text
//! GMMMAP 1 <component_count>
//! # optional comment / metadata lines
//! <id> <weight> <mx> <my> <mz> <s11> <s12> <s13> <s22> <s23> <s33>
//! ```
//!
//! Covariances are stored upper-triangular in row-major order, one component
//! per line, ordered by ascending id. Values are written with 17 significant
//! digits so a save/load round trip is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{GaussianComponent3D, GmmMap, MapError, DEFAULT_NEIGHBOR_COUNT};

pub fn save_map(map: &GmmMap, path: &Path) -> Result<(), MapError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "GMMMAP 1 {}", map.components.len())?;
    for (key, value) in &map.metadata {
        writeln!(out, "# {key}: {value}")?;
    }
    for c in &map.components {
        let s = &c.covariance;
        writeln!(
            out,
            "{} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
            c.id,
            c.weight,
            c.mean.x,
            c.mean.y,
            c.mean.z,
            s[(0, 0)],
            s[(0, 1)],
            s[(0, 2)],
            s[(1, 1)],
            s[(1, 2)],
            s[(2, 2)]
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Load a map, recomputing decomposition, degeneracy flags and the neighbor
/// graph (with [`DEFAULT_NEIGHBOR_COUNT`] neighbors).
pub fn load_map(path: &Path) -> Result<GmmMap, MapError> {
    let path_str = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (header_no, header) = lines
        .next()
        .ok_or_else(|| parse_error(&path_str, 1, "empty file"))?;
    let header = header?;
    let count = parse_header(&header).ok_or_else(|| {
        parse_error(
            &path_str,
            header_no + 1,
            "expected header `GMMMAP 1 <component_count>`",
        )
    })?;

    let mut components = Vec::with_capacity(count);
    let mut metadata = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once(':') {
                metadata.push((key.trim().to_string(), value.trim().to_string()));
            }
            continue;
        }
        components.push(parse_component(&path_str, line_no, trimmed)?);
    }

    if components.len() != count {
        return Err(parse_error(
            &path_str,
            0,
            &format!(
                "header declares {count} components, found {}",
                components.len()
            ),
        ));
    }

    let mut map = GmmMap::new(components)?;
    map.metadata = metadata;
    map.build_neighbor_graph(DEFAULT_NEIGHBOR_COUNT);
    Ok(map)
}

fn parse_header(line: &str) -> Option<usize> {
    let mut parts = line.split_whitespace();
    if parts.next()? != "GMMMAP" || parts.next()? != "1" {
        return None;
    }
    let count = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some(count)
}

fn parse_component(
    path: &str,
    line_no: usize,
    line: &str,
) -> Result<GaussianComponent3D, MapError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 11 {
        return Err(parse_error(
            path,
            line_no,
            &format!("expected 11 fields, found {}", fields.len()),
        ));
    }
    let id: usize = fields[0]
        .parse()
        .map_err(|_| parse_error(path, line_no, "invalid component id"))?;
    let mut values = [0.0f64; 10];
    for (slot, field) in values.iter_mut().zip(&fields[1..]) {
        *slot = field
            .parse()
            .map_err(|_| parse_error(path, line_no, &format!("invalid number `{field}`")))?;
    }
    let [weight, mx, my, mz, s11, s12, s13, s22, s23, s33] = values;
    let covariance = Matrix3::new(
        s11, s12, s13, //
        s12, s22, s23, //
        s13, s23, s33,
    );
    GaussianComponent3D::new(id, weight, Vector3::new(mx, my, mz), covariance)
}

fn parse_error(path: &str, line: usize, message: &str) -> MapError {
    MapError::Parse {
        path: path.to_string(),
        line,
        message: message.to_string(),
    }
}
