//! Plain-text artifacts: density snapshots, 2-D sections and CSV tables.
//!
//! Numbers are written with 17 significant digits (`{:.16e}`), which
//! round-trips every `f64` exactly. Lines end in `\n`.

use std::io::{self, BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::equivalence::SnapshotComparison;
use crate::glm::{CovariateLaw, GlmDataset};
use crate::grid::{DensityField, GridSpec};
use crate::particles::ParticleEnsemble;
use crate::transport::MomentReport;

const DENSITY_MAGIC: &str = "# newtonflow density v1";

pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn join_nums(v: &[f64]) -> String {
    v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(",")
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn parse_f64s(s: &str) -> io::Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| invalid(format!("bad number '{t}': {e}"))))
        .collect()
}

/// Writes a snapshot: a header with `p`, `lower`, `dx`, `cells` and `time`,
/// then one cell value per line in row-major order (last axis fastest).
pub fn write_density<W: Write>(mut w: W, rho: &DensityField) -> io::Result<()> {
    let g = &rho.grid;
    writeln!(w, "{DENSITY_MAGIC}")?;
    writeln!(w, "p {}", g.dim())?;
    writeln!(w, "lower {}", join_nums(g.lower()))?;
    writeln!(w, "dx {}", join_nums(g.dx()))?;
    let cells: Vec<String> = g.cells().iter().map(|c| c.to_string()).collect();
    writeln!(w, "cells {}", cells.join(","))?;
    writeln!(w, "time {}", fmt_num(rho.time))?;
    writeln!(w, "values")?;
    for v in &rho.values {
        writeln!(w, "{}", fmt_num(*v))?;
    }
    Ok(())
}

pub fn read_density<R: BufRead>(r: R) -> io::Result<DensityField> {
    let mut lines = r.lines();
    let mut next = |what: &str| -> io::Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| invalid(format!("unexpected end of file, expected {what}")))
    };
    if next("header")? != DENSITY_MAGIC {
        return Err(invalid("not a density snapshot"));
    }
    let mut field = |key: &str| -> io::Result<String> {
        let line = next(key)?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_owned)
            .ok_or_else(|| invalid(format!("expected '{key}', found '{line}'")))
    };
    let p: usize = field("p")?.trim().parse().map_err(|_| invalid("bad p"))?;
    let lower = parse_f64s(&field("lower")?)?;
    let dx = parse_f64s(&field("dx")?)?;
    let cells = field("cells")?
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| invalid(format!("bad cell count '{t}'"))))
        .collect::<io::Result<Vec<_>>>()?;
    let time = field("time")?.trim().parse::<f64>().map_err(|_| invalid("bad time"))?;
    if next("values")? != "values" {
        return Err(invalid("expected 'values'"));
    }
    if lower.len() != p || dx.len() != p || cells.len() != p {
        return Err(invalid("header vectors do not match p"));
    }
    let grid = GridSpec::new(lower, dx, cells).map_err(|e| invalid(e.to_string()))?;
    let mut values = Vec::with_capacity(grid.len());
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        values.push(line.trim().parse::<f64>().map_err(|_| invalid(format!("bad value '{line}'")))?);
    }
    DensityField::new(grid, values, time).map_err(|e| invalid(e.to_string()))
}

/// Cell index per axis nearest to the density mean, the default cut for
/// 2-D sections.
pub fn indices_at(grid: &GridSpec, point: &DVector<f64>) -> Vec<usize> {
    (0..grid.dim()).map(|k| grid.nearest_index(k, point[k])).collect()
}

/// CSV of the 2-D section spanned by `axes`, other axes fixed at
/// `fixed[k]`. Columns: both coordinates and the density.
pub fn write_section<W: Write>(
    mut w: W,
    rho: &DensityField,
    axes: (usize, usize),
    fixed: &[usize],
) -> io::Result<()> {
    let g = &rho.grid;
    let (a, b) = axes;
    if a == b || a >= g.dim() || b >= g.dim() || fixed.len() != g.dim() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "bad section axes"));
    }
    writeln!(w, "x{},x{},density", a + 1, b + 1)?;
    let mut idx = fixed.to_vec();
    for i in 0..g.cells()[a] {
        for j in 0..g.cells()[b] {
            idx[a] = i;
            idx[b] = j;
            let c = g.linear_index(&idx);
            writeln!(
                w,
                "{},{},{}",
                fmt_num(g.center_coord(a, i)),
                fmt_num(g.center_coord(b, j)),
                fmt_num(rho.values[c])
            )?;
        }
    }
    Ok(())
}

/// CSV `t,mass,mean_1..p,cov_11..cov_pp,momenta,outflow` with the
/// covariance flattened row-major.
pub fn write_moments<W: Write>(mut w: W, reports: &[MomentReport], outflow: &[f64]) -> io::Result<()> {
    let p = reports.first().map_or(0, |r| r.mean.len());
    let mut header = vec!["t".to_string(), "mass".to_string()];
    header.extend((1..=p).map(|i| format!("mean_{i}")));
    for i in 1..=p {
        header.extend((1..=p).map(|j| format!("cov_{i}{j}")));
    }
    header.push("momenta".into());
    header.push("outflow".into());
    writeln!(w, "{}", header.join(","))?;
    for (k, r) in reports.iter().enumerate() {
        let mut row = vec![r.time, r.mass];
        row.extend(r.mean.iter());
        for i in 0..p {
            row.extend((0..p).map(|j| r.covariance[(i, j)]));
        }
        row.push(r.momenta);
        row.push(outflow.get(k).copied().unwrap_or(0.0));
        writeln!(w, "{}", join_nums(&row))?;
    }
    Ok(())
}

/// CSV `t,l1,max_abs,mass_pde,mass_particles,escaped_fraction,outflow_fraction`.
pub fn write_comparisons<W: Write>(mut w: W, rows: &[SnapshotComparison]) -> io::Result<()> {
    writeln!(
        w,
        "t,l1,max_abs,mass_pde,mass_particles,escaped_fraction,outflow_fraction"
    )?;
    for s in rows {
        let r = &s.report;
        writeln!(
            w,
            "{}",
            join_nums(&[
                r.time,
                r.l1_distance,
                r.max_abs,
                r.mass_1,
                r.mass_2,
                s.escaped_fraction,
                s.outflow_fraction
            ])
        )?;
    }
    Ok(())
}

/// CSV `t,x1..xp`, one row per particle.
pub fn write_ensemble<W: Write>(mut w: W, e: &ParticleEnsemble, p: usize) -> io::Result<()> {
    let cols: Vec<String> = (1..=p).map(|i| format!("x{i}")).collect();
    writeln!(w, "t,{}", cols.join(","))?;
    for x in &e.positions {
        let mut row = vec![e.time];
        row.extend(x.iter());
        writeln!(w, "{}", join_nums(&row))?;
    }
    Ok(())
}

/// Dataset as CSV `x1..xp,y`.
pub fn write_dataset<W: Write>(mut w: W, d: &GlmDataset) -> io::Result<()> {
    let cols: Vec<String> = (1..=d.p()).map(|i| format!("x{i}")).collect();
    writeln!(w, "{},y", cols.join(","))?;
    for j in 0..d.n() {
        let mut row: Vec<f64> = d.x().row(j).iter().copied().collect();
        row.push(d.y()[j]);
        writeln!(w, "{}", join_nums(&row))?;
    }
    Ok(())
}

/// `key=value` sidecar recording how a dataset was generated.
pub fn write_dataset_meta<W: Write>(mut w: W, d: &GlmDataset) -> io::Result<()> {
    writeln!(w, "n={}", d.n())?;
    writeln!(w, "p={}", d.p())?;
    writeln!(w, "seed={}", d.seed())?;
    writeln!(w, "covariate_law={}", d.law())?;
    writeln!(w, "beta_star={}", join_nums(d.beta_star().as_slice()))
}

/// Reads a dataset CSV and its sidecar.
pub fn read_dataset<R: BufRead, M: BufRead>(csv: R, meta: M) -> io::Result<GlmDataset> {
    let mut seed = 0u64;
    let mut law = CovariateLaw::default();
    let mut beta_star = None;
    for line in meta.lines() {
        let line = line?;
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        match k.trim() {
            "seed" => seed = v.trim().parse().map_err(|_| invalid("bad seed"))?,
            "covariate_law" => law = v.trim().parse().map_err(|e: crate::Error| invalid(e.to_string()))?,
            "beta_star" => beta_star = Some(parse_f64s(v)?),
            _ => {}
        }
    }
    let mut lines = csv.lines();
    let header = lines.next().transpose()?.ok_or_else(|| invalid("empty dataset"))?;
    let cols = header.split(',').count();
    if cols < 2 || header.rsplit(',').next() != Some("y") {
        return Err(invalid("dataset header must be x1,...,xp,y"));
    }
    let p = cols - 1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let row = parse_f64s(&line)?;
        if row.len() != cols {
            return Err(invalid(format!("expected {cols} columns, found {}", row.len())));
        }
        xs.extend_from_slice(&row[..p]);
        ys.push(row[p]);
    }
    let n = ys.len();
    let beta_star = DVector::from_vec(beta_star.unwrap_or_else(|| vec![0.0; p]));
    GlmDataset::new(
        DMatrix::from_row_slice(n, p, &xs),
        DVector::from_vec(ys),
        beta_star,
        seed,
        law,
    )
    .map_err(|e| invalid(e.to_string()))
}
