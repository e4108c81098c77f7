//! Shared file formats.
//!
//! Binary grid format ("PGF1"), used for graph functions and sampled fields:
//!
//! ```text
//! magic   4 bytes  b"PGF1"
//! u32 LE  ambient dimension n
//! u32 LE  number of axes m
//! per axis: u64 LE len, f64 LE min, f64 LE step, u8 periodic
//! f64 LE  affine offset
//! f64 LE x (m-1)  affine slopes (spatial axes only)
//! payload: product(len) f64 LE samples, row-major, last axis fastest
//! ```
//!
//! CSV exports carry one row per lattice node with columns `x1..x_{n-1}, t, value`.

use crate::error::{Error, Result};
use crate::graph::GraphFunction;
use crate::grid::{Axis, Field, Lattice};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PGF1";

pub fn write_graph(path: &Path, g: &GraphFunction, ambient_n: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_grid_to(&mut f, g.field(), ambient_n, g.offset(), g.slope())
}

pub fn write_field(path: &Path, field: &Field, ambient_n: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let slopes = vec![0.0; field.lattice.ndim() - 1];
    write_grid_to(&mut f, field, ambient_n, 0.0, &slopes)
}

fn write_grid_to(
    w: &mut impl Write,
    field: &Field,
    ambient_n: usize,
    offset: f64,
    slopes: &[f64],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(ambient_n as u32).to_le_bytes())?;
    let m = field.lattice.ndim() as u32;
    w.write_all(&m.to_le_bytes())?;
    for ax in field.lattice.axes() {
        w.write_all(&(ax.len as u64).to_le_bytes())?;
        w.write_all(&ax.min.to_le_bytes())?;
        w.write_all(&ax.step.to_le_bytes())?;
        w.write_all(&[u8::from(ax.periodic)])?;
    }
    w.write_all(&offset.to_le_bytes())?;
    for s in slopes {
        w.write_all(&s.to_le_bytes())?;
    }
    for v in &field.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub struct GridFile {
    pub ambient_n: usize,
    pub field: Field,
    pub offset: f64,
    pub slopes: Vec<f64>,
}

pub fn read_grid(path: &Path) -> Result<GridFile> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid("not a PGF1 grid file"));
    }
    let ambient_n = read_u32(&mut f)? as usize;
    let m = read_u32(&mut f)? as usize;
    let mut axes = Vec::with_capacity(m);
    for _ in 0..m {
        let len = read_u64(&mut f)? as usize;
        let min = read_f64(&mut f)?;
        let step = read_f64(&mut f)?;
        let mut p = [0u8; 1];
        f.read_exact(&mut p)?;
        axes.push(Axis {
            len,
            min,
            step,
            periodic: p[0] != 0,
        });
    }
    let offset = read_f64(&mut f)?;
    let mut slopes = Vec::with_capacity(m - 1);
    for _ in 0..m - 1 {
        slopes.push(read_f64(&mut f)?);
    }
    let lattice = Lattice::new(axes);
    let mut values = vec![0.0f64; lattice.len()];
    for v in values.iter_mut() {
        *v = read_f64(&mut f)?;
    }
    Ok(GridFile {
        ambient_n,
        field: Field { lattice, values },
        offset,
        slopes,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// CSV export of a sampled field: columns `x..., t, value`.
pub fn write_field_csv(path: &Path, field: &Field, value_name: &str) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let nd = field.lattice.ndim();
    let mut header = Vec::new();
    for a in 0..nd - 1 {
        header.push(format!("x{}", a + 1));
    }
    header.push("t".into());
    header.push(value_name.into());
    writeln!(w, "{}", header.join(","))?;
    for flat in 0..field.lattice.len() {
        let c = field.lattice.coords_flat(flat);
        let mut row: Vec<String> = c.iter().map(|v| format!("{v:.12e}")).collect();
        row.push(format!("{:.12e}", field.values[flat]));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Generic CSV table writer: fixed column schema checked per row.
pub fn write_csv_table(path: &Path, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", columns.join(","))?;
    for row in rows {
        if row.len() != columns.len() {
            return Err(Error::invalid(format!(
                "row has {} fields, schema has {}",
                row.len(),
                columns.len()
            )));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_graph, GraphKind, GraphParams};

    #[test]
    fn graph_roundtrip() {
        let mut p = GraphParams::desk_default(2, 8);
        p.slope = vec![0.7];
        p.offset = -0.3;
        let g = make_graph(GraphKind::Affine, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgf");
        write_graph(&path, &g, 2).unwrap();
        let f = read_grid(&path).unwrap();
        assert_eq!(f.ambient_n, 2);
        assert_eq!(f.slopes, vec![0.7]);
        assert_eq!(f.offset, -0.3);
        assert_eq!(f.field.values, g.field().values);
    }

    #[test]
    fn csv_schema_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![vec!["1".to_string(), "2".to_string()]];
        assert!(write_csv_table(&path, &["a", "b"], &rows).is_ok());
        assert!(write_csv_table(&path, &["a"], &rows).is_err());
    }
}
